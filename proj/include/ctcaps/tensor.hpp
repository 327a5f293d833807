#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace ctcaps {

// One node of the autodiff tape. Holds the value buffer and, when the node
// participates in a backward pass, the gradient buffer plus the links and
// closure needed to push gradients to its parents.
struct TensorNode {
  std::vector<int> shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
  }
};

int64_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Dense row-major float32 tensor with handle semantics: copying a Tensor
// shares the underlying node. Values are treated as immutable once an op
// has consumed them; only leaves (parameters, freshly built tensors) are
// mutated in place, by initialization and by the optimizer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
  // Validates that every value is finite.
  static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return node_->numel(); }

  const float* data() const { return node_->data.data(); }
  float* data() { return node_->data.data(); }
  const std::vector<float>& values() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<float>& grad() const { return node_->grad; }
  std::vector<float>& grad_vec() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0f);
  }

  float item() const;  // requires numel() == 1
  float at(std::initializer_list<int> idx) const;
  void set(std::initializer_list<int> idx, float v);

  // Deep copy of the value buffer; never carries tape links.
  Tensor clone() const;

  std::shared_ptr<TensorNode>& node() { return node_; }
  const std::shared_ptr<TensorNode>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<TensorNode> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  std::shared_ptr<TensorNode> node_;
};

bool all_finite(const std::vector<float>& v);

// CTT v1 container: magic "CTT1", u8 rank, rank x u32 little-endian dims,
// row-major f32 little-endian payload. Trailing bytes and short files are
// rejected; loaded values must be finite.
Tensor read_ctt(const std::filesystem::path& path);
void write_ctt(const Tensor& t, const std::filesystem::path& path);
std::vector<unsigned char> encode_ctt(const Tensor& t);
Tensor decode_ctt(const std::vector<unsigned char>& bytes, const std::string& origin);

}  // namespace ctcaps
