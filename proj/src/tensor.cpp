#include "ctcaps/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ctcaps/errors.hpp"
#include "ctcaps/util.hpp"

namespace ctcaps {

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

bool all_finite(const std::vector<float>& v) {
  for (float x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

namespace {

void check_shape(const std::vector<int>& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dim");
  for (int d : shape)
    if (d < 1) throw ShapeError("tensor shape " + shape_str(shape) + " has a dim < 1");
}

std::shared_ptr<TensorNode> make_node(std::vector<int> shape, std::vector<float> data,
                                      bool requires_grad) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  check_shape(shape);
  std::vector<float> data(static_cast<size_t>(shape_numel(shape)), 0.0f);
  return wrap(make_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
  check_shape(shape);
  std::vector<float> data(static_cast<size_t>(shape_numel(shape)), value);
  return wrap(make_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data,
                         bool requires_grad) {
  check_shape(shape);
  if (static_cast<int64_t>(data.size()) != shape_numel(shape))
    throw ShapeError("data size " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  if (!all_finite(data)) throw UsageError("tensor data contains a non-finite value");
  return wrap(make_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

float Tensor::item() const {
  if (numel() != 1)
    throw UsageError("item() needs a single-element tensor, got " + shape_str(shape()));
  return node_->data[0];
}

namespace {

size_t flat_index(const std::vector<int>& shape, std::initializer_list<int> idx) {
  if (idx.size() != shape.size())
    throw ShapeError("index rank " + std::to_string(idx.size()) +
                     " does not match tensor shape " + shape_str(shape));
  size_t flat = 0;
  size_t k = 0;
  for (int i : idx) {
    if (i < 0 || i >= shape[k])
      throw ShapeError("index " + std::to_string(i) + " out of range for dim " +
                       std::to_string(k) + " of " + shape_str(shape));
    flat = flat * shape[k] + static_cast<size_t>(i);
    ++k;
  }
  return flat;
}

}  // namespace

float Tensor::at(std::initializer_list<int> idx) const {
  return node_->data[flat_index(node_->shape, idx)];
}

void Tensor::set(std::initializer_list<int> idx, float v) {
  node_->data[flat_index(node_->shape, idx)] = v;
}

Tensor Tensor::clone() const {
  auto node = make_node(node_->shape, node_->data, node_->requires_grad);
  return wrap(std::move(node));
}

namespace {

void put_u32(std::vector<unsigned char>& out, uint32_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

uint32_t get_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
         static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}

}  // namespace

std::vector<unsigned char> encode_ctt(const Tensor& t) {
  std::vector<unsigned char> out;
  out.reserve(5 + 4 * t.shape().size() + 4 * static_cast<size_t>(t.numel()));
  for (char m : {'C', 'T', 'T', '1'}) out.push_back(static_cast<unsigned char>(m));
  out.push_back(static_cast<unsigned char>(t.rank()));
  for (int d : t.shape()) put_u32(out, static_cast<uint32_t>(d));
  for (float v : t.values()) put_u32(out, std::bit_cast<uint32_t>(v));
  return out;
}

Tensor decode_ctt(const std::vector<unsigned char>& bytes, const std::string& origin) {
  if (bytes.size() < 5 || std::memcmp(bytes.data(), "CTT1", 4) != 0)
    throw DataError(origin + ": not a CTT1 tensor file");
  const int rank = bytes[4];
  if (rank < 1 || rank > 8) throw DataError(origin + ": bad tensor rank " + std::to_string(rank));
  size_t off = 5;
  if (bytes.size() < off + 4 * static_cast<size_t>(rank))
    throw DataError(origin + ": truncated header");
  std::vector<int> shape(static_cast<size_t>(rank));
  int64_t numel = 1;
  for (int i = 0; i < rank; ++i) {
    uint32_t d = get_u32(bytes.data() + off);
    off += 4;
    if (d < 1 || d > (1u << 28)) throw DataError(origin + ": bad dim " + std::to_string(d));
    shape[static_cast<size_t>(i)] = static_cast<int>(d);
    numel *= d;
    if (numel > (int64_t{1} << 31)) throw DataError(origin + ": tensor too large");
  }
  if (bytes.size() != off + 4 * static_cast<size_t>(numel))
    throw DataError(origin + ": payload size does not match dims");
  std::vector<float> data(static_cast<size_t>(numel));
  for (int64_t i = 0; i < numel; ++i) {
    data[static_cast<size_t>(i)] =
        std::bit_cast<float>(get_u32(bytes.data() + off + 4 * static_cast<size_t>(i)));
    if (!std::isfinite(data[static_cast<size_t>(i)]))
      throw DataError(origin + ": non-finite value at element " + std::to_string(i));
  }
  return Tensor::from_data(std::move(shape), std::move(data));
}

Tensor read_ctt(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return decode_ctt(bytes, path.string());
}

void write_ctt(const Tensor& t, const std::filesystem::path& path) {
  util::write_file_atomic(path, encode_ctt(t));
}

}  // namespace ctcaps
