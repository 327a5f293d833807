#include "ctcaps/util.hpp"

#include <fstream>
#include <sstream>

#include "ctcaps/errors.hpp"

namespace ctcaps::util {

uint64_t fnv1a64(const unsigned char* bytes, size_t n) {
  uint64_t h = 14695981039346656037ULL;
  for (size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

uint64_t fnv1a64_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open");
  uint64_t h = 14695981039346656037ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  return h;
}

std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

namespace {

void write_atomic_impl(const std::filesystem::path& path, const char* data, size_t n) {
  auto parent = path.parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(tmp.string() + ": cannot open for writing");
    out.write(data, static_cast<std::streamsize>(n));
    out.flush();
    if (!out) throw DataError(tmp.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  write_atomic_impl(path, content.data(), content.size());
}

void write_file_atomic(const std::filesystem::path& path,
                       const std::vector<unsigned char>& bytes) {
  write_atomic_impl(path, reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

KvPairs parse_kv(const std::string& text, const std::string& origin) {
  KvPairs pairs;
  size_t pos = 0;
  int lineno = 0;
  while (pos < text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError(origin + ": line " + std::to_string(lineno) + " is not key=value");
    pairs.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  return pairs;
}

std::string serialize_kv(const KvPairs& pairs) {
  std::string out;
  for (const auto& [k, v] : pairs) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

std::string kv_get(const KvPairs& pairs, const std::string& key, const std::string& origin) {
  for (const auto& [k, v] : pairs)
    if (k == key) return v;
  throw DataError(origin + ": missing key '" + key + "'");
}

bool kv_has(const KvPairs& pairs, const std::string& key) {
  for (const auto& [k, v] : pairs)
    if (k == key) return true;
  return false;
}

}  // namespace ctcaps::util
