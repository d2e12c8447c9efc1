#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

// Minimal dense f64 tensor library with reverse-mode autodiff.
// The graph is define-by-run: every op that touches a gradient-requiring
// input records its inputs and a backprop closure on the output tensor.
// backward() walks that structure once in reverse topological order.

namespace tdl::nc {

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized lazily by ensure_grad()
  bool requires_grad = false;
  std::string name;  // non-empty for named parameters

  // autograd tape (empty for leaves)
  std::vector<TensorPtr> parents;
  std::function<void()> backprop;

  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.size() > 1 ? shape[1] : 1; }
  bool is_scalar() const { return data.size() == 1; }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  void zero_grad() { grad.assign(data.size(), 0.0); }
  double item() const {
    if (!is_scalar()) throw NumericError("item() on non-scalar tensor");
    return data[0];
  }
};

// Thread-local switch: while disabled, ops skip tape recording entirely
// (outputs carry requires_grad=false). Used for inference rollouts.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

TensorPtr make_tensor(std::vector<std::size_t> shape, std::vector<double> data,
                      bool requires_grad = false);
TensorPtr zeros(std::vector<std::size_t> shape, bool requires_grad = false);
TensorPtr full(std::vector<std::size_t> shape, double value,
               bool requires_grad = false);
TensorPtr scalar(double value);
TensorPtr randn(std::vector<std::size_t> shape, std::mt19937_64& rng,
                double stddev, bool requires_grad = false);

// Raw matmul kernels on contiguous row-major buffers; C is accumulated into.
void matmul_nn(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n);
void matmul_nt(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n);  // C[m,n] = A[m,k] * B[n,k]^T
void matmul_tn(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n);  // C[m,n] = A[k,m]^T * B[k,n]

// Ops. Shape rules are fixed (no general broadcasting):
//   matmul: [m,k]x[k,n] -> [m,n]
//   add:    same shape, or a 2D [m,n] + b [n] / [1,n] row-broadcast bias
//   mul:    same shape, or b scalar
//   softmax, layer_norm: over the last dim of a 2D tensor
//   concat/slice: 2D, axis 0 or 1
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
TensorPtr transpose(const TensorPtr& a);
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& a, double s);
TensorPtr gelu(const TensorPtr& a);
TensorPtr softmax(const TensorPtr& a);
TensorPtr layer_norm(const TensorPtr& a, const TensorPtr& gain,
                     const TensorPtr& bias);
TensorPtr mse(const TensorPtr& a, const TensorPtr& b);
TensorPtr bce_with_logits(const TensorPtr& logits, const TensorPtr& targets);
TensorPtr concat(const std::vector<TensorPtr>& parts, int axis);
TensorPtr slice(const TensorPtr& a, int axis, std::size_t begin,
                std::size_t end);
TensorPtr embedding(const TensorPtr& table,
                    const std::vector<std::size_t>& ids);
TensorPtr mean_rows(const TensorPtr& a);  // [m,n] -> [1,n]

// Reverse-mode sweep from a scalar loss. Gradients accumulate into .grad of
// every tensor on the tape that requires gradients; call zero_grad between
// unrelated backward passes.
void backward(const TensorPtr& loss);

// Central-difference gradient oracle: (f(x+d) - f(x-d)) / 2d per coordinate.
// f evaluates the scalar objective from the tensor's current data.
std::vector<double> finite_diff_grad(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& x, double step);

// Named parameter collection with deterministic (insertion) order.
class ParamStore {
 public:
  TensorPtr create(const std::string& name, std::vector<std::size_t> shape,
                   std::mt19937_64& rng, double stddev);
  TensorPtr create_zeros(const std::string& name,
                         std::vector<std::size_t> shape);
  TensorPtr get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<TensorPtr>& all() const { return params_; }
  std::size_t total_size() const;
  void zero_grad();

 private:
  std::vector<TensorPtr> params_;
  std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<TensorPtr> params, AdamConfig cfg);
  // Standard bias-corrected Adam; throws NumericError on non-finite grads.
  void step();
  void zero_grad();
  std::int64_t step_count() const { return step_count_; }
  void set_step_count(std::int64_t t) { step_count_ = t; }
  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::vector<double>& moment1(std::size_t i) { return m_[i]; }
  std::vector<double>& moment2(std::size_t i) { return v_[i]; }
  const std::vector<TensorPtr>& params() const { return params_; }

 private:
  std::vector<TensorPtr> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t step_count_ = 0;
};

// Parameter checkpoint container, magic "TDLCKPT1": for each entry a u32 name
// length, the UTF-8 name, u32 rank, u64 dims, then raw little-endian f64s.
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, TensorPtr>>& entries);
std::map<std::string, TensorPtr> load_checkpoint(const std::string& path);

bool all_finite(const Tensor& t);

}  // namespace tdl::nc
