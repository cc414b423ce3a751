#pragma once

#include "flowlab/config.hpp"
#include "flowlab/editing.hpp"
#include "flowlab/flows.hpp"
#include "flowlab/rng.hpp"

namespace flowlab {

// Deterministic toy data generators. gaussian-ring with modes=8, radius=2,
// noise_std=0.1 is the canonical 2-D benchmark; tiny-shapes are 8x8
// procedural images (1 or 2 channels) for the editing pipeline.
struct ToySpec {
    std::string kind = "gaussian-ring";  // gaussian-ring | checkerboard | two-moons | tiny-shapes
    int64_t count = 1024;
    uint64_t seed = 1;

    int64_t modes = 8;
    double radius = 2.0;
    double noise_std = 0.1;

    int64_t img_channels = 1;

    int64_t dim() const;
    ImageShape image_shape() const { return {img_channels, 8, 8}; }
    void validate() const;
    KvMap to_kv(const std::string& prefix = "data.") const;
    static ToySpec from_kv(const KvMap& kv, const std::string& prefix = "data.");
};

FiniteDataset generate(const ToySpec& spec);

}  // namespace flowlab
