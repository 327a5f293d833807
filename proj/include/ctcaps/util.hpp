#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace ctcaps::util {

uint64_t fnv1a64(const unsigned char* bytes, size_t n);
uint64_t fnv1a64_file(const std::filesystem::path& path);
std::string hex64(uint64_t v);

// Whole-file helpers. Writes go through a temp file + rename so readers
// never observe a partial file.
std::string read_text_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
void write_file_atomic(const std::filesystem::path& path, const std::vector<unsigned char>& bytes);

// newline-delimited key=value text, UTF-8, order-preserving.
using KvPairs = std::vector<std::pair<std::string, std::string>>;
KvPairs parse_kv(const std::string& text, const std::string& origin);
std::string serialize_kv(const KvPairs& pairs);
// First value for key; throws DataError naming origin when absent.
std::string kv_get(const KvPairs& pairs, const std::string& key, const std::string& origin);
bool kv_has(const KvPairs& pairs, const std::string& key);

}  // namespace ctcaps::util
