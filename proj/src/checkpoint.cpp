#include "flowlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace flowlab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container is defined little-endian; add byte swaps for big-endian hosts");

namespace {

constexpr char kMagic[8] = {'F', 'L', 'O', 'W', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw ValidationError("checkpoint: truncated file");
    return v;
}

}  // namespace

void Checkpoint::put_array(const std::string& name, const Shape& shape, std::vector<double> data) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
        throw ValidationError("checkpoint: array '" + name + "' shape " + shape_str(shape) +
                              " disagrees with data length " + std::to_string(data.size()));
    CheckpointRecord r;
    r.kind = 0;
    r.shape = shape;
    r.f64 = std::move(data);
    records_[name] = std::move(r);
}

void Checkpoint::put_bytes(const std::string& name, std::vector<uint8_t> data) {
    CheckpointRecord r;
    r.kind = 1;
    r.bytes = std::move(data);
    records_[name] = std::move(r);
}

void Checkpoint::put_string(const std::string& name, const std::string& s) {
    put_bytes(name, std::vector<uint8_t>(s.begin(), s.end()));
}

void Checkpoint::put_scalar(const std::string& name, double v) { put_array(name, {}, {v}); }

void Checkpoint::put_i64(const std::string& name, int64_t v) {
    std::vector<uint8_t> b(8);
    std::memcpy(b.data(), &v, 8);
    put_bytes(name, std::move(b));
}

void Checkpoint::put_u64(const std::string& name, uint64_t v) {
    std::vector<uint8_t> b(8);
    std::memcpy(b.data(), &v, 8);
    put_bytes(name, std::move(b));
}

bool Checkpoint::has(const std::string& name) const { return records_.count(name) > 0; }

const CheckpointRecord& Checkpoint::get(const std::string& name) const {
    auto it = records_.find(name);
    if (it == records_.end()) throw ValidationError("checkpoint: no record named '" + name + "'");
    return it->second;
}

std::string Checkpoint::get_string(const std::string& name) const {
    const auto& r = get(name);
    return std::string(r.bytes.begin(), r.bytes.end());
}

double Checkpoint::get_scalar(const std::string& name) const {
    const auto& r = get(name);
    if (r.kind != 0 || r.f64.size() != 1) throw ValidationError("checkpoint: '" + name + "' is not a scalar");
    return r.f64[0];
}

int64_t Checkpoint::get_i64(const std::string& name) const {
    const auto& r = get(name);
    if (r.kind != 1 || r.bytes.size() != 8) throw ValidationError("checkpoint: '" + name + "' is not an i64");
    int64_t v;
    std::memcpy(&v, r.bytes.data(), 8);
    return v;
}

uint64_t Checkpoint::get_u64(const std::string& name) const {
    const auto& r = get(name);
    if (r.kind != 1 || r.bytes.size() != 8) throw ValidationError("checkpoint: '" + name + "' is not a u64");
    uint64_t v;
    std::memcpy(&v, r.bytes.data(), 8);
    return v;
}

void Checkpoint::put_params(const std::string& prefix, const ParamList& params) {
    for (const auto& p : params) {
        auto d = p.t.data();
        put_array(prefix + "/" + p.name, p.t.shape(), std::vector<double>(d.begin(), d.end()));
    }
}

void Checkpoint::load_params(const std::string& prefix, ParamList& params) const {
    for (auto& p : params) {
        const auto& r = get(prefix + "/" + p.name);
        if (r.shape != p.t.shape())
            throw ValidationError("checkpoint: parameter '" + p.name + "' has shape " + shape_str(r.shape) +
                                  " on disk vs " + shape_str(p.t.shape()) + " in model");
        auto dst = p.t.raw_data();
        std::copy(r.f64.begin(), r.f64.end(), dst.begin());
    }
}

void Checkpoint::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValidationError("checkpoint: cannot open '" + path + "' for writing");
    os.write(kMagic, 8);
    write_pod<uint32_t>(os, kVersion);
    write_pod<uint64_t>(os, records_.size());
    for (const auto& [name, r] : records_) {
        write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<uint8_t>(os, r.kind);
        if (r.kind == 0) {
            write_pod<uint32_t>(os, static_cast<uint32_t>(r.shape.size()));
            for (int64_t d : r.shape) write_pod<uint64_t>(os, static_cast<uint64_t>(d));
            os.write(reinterpret_cast<const char*>(r.f64.data()),
                     static_cast<std::streamsize>(r.f64.size() * sizeof(double)));
        } else {
            write_pod<uint64_t>(os, r.bytes.size());
            os.write(reinterpret_cast<const char*>(r.bytes.data()), static_cast<std::streamsize>(r.bytes.size()));
        }
    }
    if (!os) throw ValidationError("checkpoint: write to '" + path + "' failed");
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("checkpoint: cannot open '" + path + "'");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw ValidationError("checkpoint: '" + path + "' has no FLOWCKPT header");
    uint32_t version = read_pod<uint32_t>(is);
    if (version != kVersion)
        throw ValidationError("checkpoint: unsupported version " + std::to_string(version));
    uint64_t count = read_pod<uint64_t>(is);
    Checkpoint ck;
    for (uint64_t i = 0; i < count; ++i) {
        uint32_t name_len = read_pod<uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        uint8_t kind = read_pod<uint8_t>(is);
        if (kind == 0) {
            uint32_t ndim = read_pod<uint32_t>(is);
            Shape shape(ndim);
            for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<int64_t>(read_pod<uint64_t>(is));
            std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
            is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
            if (!is) throw ValidationError("checkpoint: truncated array record '" + name + "'");
            ck.put_array(name, shape, std::move(data));
        } else if (kind == 1) {
            uint64_t size = read_pod<uint64_t>(is);
            std::vector<uint8_t> data(size);
            is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(size));
            if (!is) throw ValidationError("checkpoint: truncated blob record '" + name + "'");
            ck.put_bytes(name, std::move(data));
        } else {
            throw ValidationError("checkpoint: unknown record kind in '" + name + "'");
        }
    }
    return ck;
}

}  // namespace flowlab
