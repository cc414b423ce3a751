#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

namespace flowlab {

// Plain-text key=value config files: one pair per line, '#' comments,
// canonical serialization is key-sorted (std::map order) so hashing is
// stable under reordering of the source file.
using KvMap = std::map<std::string, std::string>;

KvMap kv_parse(const std::string& text);
std::string kv_serialize(const KvMap& kv);
KvMap kv_load_file(const std::string& path);
void kv_save_file(const std::string& path, const KvMap& kv);

uint64_t fnv1a64(std::string_view data);
std::string hex_u64(uint64_t v);

// typed getters with defaults
std::string kv_get(const KvMap& kv, const std::string& key, const std::string& fallback);
double kv_get_f64(const KvMap& kv, const std::string& key, double fallback);
int64_t kv_get_i64(const KvMap& kv, const std::string& key, int64_t fallback);
uint64_t kv_get_u64(const KvMap& kv, const std::string& key, uint64_t fallback);

}  // namespace flowlab
