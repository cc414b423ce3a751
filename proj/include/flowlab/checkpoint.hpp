#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "flowlab/nn.hpp"

namespace flowlab {

// Self-describing binary container for everything a run needs to resume
// bit-exactly: named f64 arrays (parameters, moments, weights) plus raw byte
// blobs (RNG state, config text). Byte layout, all little-endian:
//
//   magic "FLOWCKPT" (8 bytes)
//   u32 version (currently 1)
//   u64 record count
//   per record:
//     u32 name length, name bytes
//     u8  kind: 0 = f64 array, 1 = byte blob
//     kind 0: u32 ndim, u64 dims[ndim], f64 data[prod(dims)]
//     kind 1: u64 size, raw bytes
struct CheckpointRecord {
    uint8_t kind = 0;
    Shape shape;
    std::vector<double> f64;
    std::vector<uint8_t> bytes;
};

class Checkpoint {
public:
    void put_array(const std::string& name, const Shape& shape, std::vector<double> data);
    void put_bytes(const std::string& name, std::vector<uint8_t> data);
    void put_string(const std::string& name, const std::string& s);
    void put_scalar(const std::string& name, double v);
    void put_i64(const std::string& name, int64_t v);
    void put_u64(const std::string& name, uint64_t v);

    bool has(const std::string& name) const;
    const CheckpointRecord& get(const std::string& name) const;
    std::string get_string(const std::string& name) const;
    double get_scalar(const std::string& name) const;
    int64_t get_i64(const std::string& name) const;
    uint64_t get_u64(const std::string& name) const;

    // parameter helpers: names become "<prefix>/<param name>"
    void put_params(const std::string& prefix, const ParamList& params);
    void load_params(const std::string& prefix, ParamList& params) const;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

    const std::map<std::string, CheckpointRecord>& records() const { return records_; }

private:
    std::map<std::string, CheckpointRecord> records_;
};

}  // namespace flowlab
