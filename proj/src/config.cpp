#include "flowlab/config.hpp"

#include <fstream>
#include <sstream>

#include "flowlab/common.hpp"

namespace flowlab {

KvMap kv_parse(const std::string& text) {
    KvMap kv;
    std::istringstream is(text);
    std::string line;
    int64_t lineno = 0;
    auto trim = [](std::string s) {
        size_t b = s.find_first_not_of(" \t\r");
        size_t e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ValidationError("config: line " + std::to_string(lineno) + " has no '=': " + t);
        kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return kv;
}

std::string kv_serialize(const KvMap& kv) {
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

KvMap kv_load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("config: cannot open '" + path + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    return kv_parse(ss.str());
}

void kv_save_file(const std::string& path, const KvMap& kv) {
    std::ofstream os(path);
    if (!os) throw ValidationError("config: cannot open '" + path + "' for writing");
    os << kv_serialize(kv);
}

uint64_t fnv1a64(std::string_view data) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex_u64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

std::string kv_get(const KvMap& kv, const std::string& key, const std::string& fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
}

double kv_get_f64(const KvMap& kv, const std::string& key, double fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : std::stod(it->second);
}

int64_t kv_get_i64(const KvMap& kv, const std::string& key, int64_t fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : std::stoll(it->second);
}

uint64_t kv_get_u64(const KvMap& kv, const std::string& key, uint64_t fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : std::stoull(it->second);
}

}  // namespace flowlab
