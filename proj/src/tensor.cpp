#include "tdl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace tdl::nc {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

[[noreturn]] void shape_error(const char* op, const Tensor& a,
                              const Tensor& b) {
  throw NumericError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape) + " vs " + shape_str(b.shape));
}

void require_2d(const char* op, const Tensor& a) {
  if (a.shape.size() != 2)
    throw NumericError(std::string(op) + ": expected 2D tensor, got " +
                       shape_str(a.shape));
}

thread_local bool g_grad_enabled = true;

bool any_requires(std::initializer_list<const TensorPtr*> ts) {
  if (!g_grad_enabled) return false;
  for (const auto* t : ts)
    if (*t && (*t)->requires_grad) return true;
  return false;
}

TensorPtr make_out(std::vector<std::size_t> shape, bool requires_grad) {
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->data.assign(shape_product(t->shape), 0.0);
  t->requires_grad = requires_grad;
  return t;
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

TensorPtr make_tensor(std::vector<std::size_t> shape, std::vector<double> data,
                      bool requires_grad) {
  if (shape_product(shape) != data.size())
    throw NumericError("make_tensor: shape " + shape_str(shape) +
                       " does not match data length " +
                       std::to_string(data.size()));
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->data = std::move(data);
  t->requires_grad = requires_grad;
  return t;
}

TensorPtr zeros(std::vector<std::size_t> shape, bool requires_grad) {
  auto t = std::make_shared<Tensor>();
  std::size_t n = shape_product(shape);
  t->shape = std::move(shape);
  t->data.assign(n, 0.0);
  t->requires_grad = requires_grad;
  return t;
}

TensorPtr full(std::vector<std::size_t> shape, double value,
               bool requires_grad) {
  auto t = zeros(std::move(shape), requires_grad);
  std::fill(t->data.begin(), t->data.end(), value);
  return t;
}

TensorPtr scalar(double value) { return make_tensor({1}, {value}); }

TensorPtr randn(std::vector<std::size_t> shape, std::mt19937_64& rng,
                double stddev, bool requires_grad) {
  auto t = zeros(std::move(shape), requires_grad);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t->data) v = dist(rng) * stddev;
  return t;
}

bool all_finite(const Tensor& t) {
  for (double v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---------------------------------------------------------------- kernels

void matmul_nn(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void matmul_nt(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

void matmul_tn(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// -------------------------------------------------------------------- ops

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
  require_2d("matmul", *a);
  require_2d("matmul", *b);
  if (a->shape[1] != b->shape[0]) shape_error("matmul", *a, *b);
  const std::size_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
  auto out = make_out({m, n}, any_requires({&a, &b}));
  matmul_nn(a->data.data(), b->data.data(), out->data.data(), m, k, n);
  if (out->requires_grad) {
    out->parents = {a, b};
    Tensor* o = out.get();
    out->backprop = [a, b, o, m, k, n] {
      if (a->requires_grad) {
        a->ensure_grad();
        matmul_nt(o->grad.data(), b->data.data(), a->grad.data(), m, n, k);
      }
      if (b->requires_grad) {
        b->ensure_grad();
        matmul_tn(a->data.data(), o->grad.data(), b->grad.data(), k, m, n);
      }
    };
  }
  return out;
}

TensorPtr transpose(const TensorPtr& a) {
  require_2d("transpose", *a);
  const std::size_t m = a->shape[0], n = a->shape[1];
  auto out = make_out({n, m}, any_requires({&a}));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out->data[j * m + i] = a->data[i * n + j];
  if (out->requires_grad) {
    out->parents = {a};
    Tensor* o = out.get();
    out->backprop = [a, o, m, n] {
      a->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          a->grad[i * n + j] += o->grad[j * m + i];
    };
  }
  return out;
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  const bool bias_case = a->shape.size() == 2 &&
                         b->size() == a->shape[1] && b->shape != a->shape;
  if (!bias_case && a->shape != b->shape) shape_error("add", *a, *b);
  auto out = make_out(a->shape, any_requires({&a, &b}));
  if (bias_case) {
    const std::size_t m = a->shape[0], n = a->shape[1];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out->data[i * n + j] = a->data[i * n + j] + b->data[j];
  } else {
    for (std::size_t i = 0; i < a->size(); ++i)
      out->data[i] = a->data[i] + b->data[i];
  }
  if (out->requires_grad) {
    out->parents = {a, b};
    Tensor* o = out.get();
    out->backprop = [a, b, o, bias_case] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += o->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        if (bias_case) {
          const std::size_t m = a->shape[0], n = a->shape[1];
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
              b->grad[j] += o->grad[i * n + j];
        } else {
          for (std::size_t i = 0; i < b->size(); ++i) b->grad[i] += o->grad[i];
        }
      }
    };
  }
  return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
  return add(a, scale(b, -1.0));
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
  const bool scalar_case = b->size() == 1 && a->size() != 1;
  if (!scalar_case && a->shape != b->shape) shape_error("mul", *a, *b);
  auto out = make_out(a->shape, any_requires({&a, &b}));
  if (scalar_case) {
    const double s = b->data[0];
    for (std::size_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] * s;
  } else {
    for (std::size_t i = 0; i < a->size(); ++i)
      out->data[i] = a->data[i] * b->data[i];
  }
  if (out->requires_grad) {
    out->parents = {a, b};
    Tensor* o = out.get();
    out->backprop = [a, b, o, scalar_case] {
      if (a->requires_grad) {
        a->ensure_grad();
        if (scalar_case) {
          const double s = b->data[0];
          for (std::size_t i = 0; i < a->size(); ++i)
            a->grad[i] += o->grad[i] * s;
        } else {
          for (std::size_t i = 0; i < a->size(); ++i)
            a->grad[i] += o->grad[i] * b->data[i];
        }
      }
      if (b->requires_grad) {
        b->ensure_grad();
        if (scalar_case) {
          double acc = 0.0;
          for (std::size_t i = 0; i < a->size(); ++i)
            acc += o->grad[i] * a->data[i];
          b->grad[0] += acc;
        } else {
          for (std::size_t i = 0; i < b->size(); ++i)
            b->grad[i] += o->grad[i] * a->data[i];
        }
      }
    };
  }
  return out;
}

TensorPtr scale(const TensorPtr& a, double s) {
  auto out = make_out(a->shape, any_requires({&a}));
  for (std::size_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] * s;
  if (out->requires_grad) {
    out->parents = {a};
    Tensor* o = out.get();
    out->backprop = [a, o, s] {
      a->ensure_grad();
      for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += o->grad[i] * s;
    };
  }
  return out;
}

TensorPtr gelu(const TensorPtr& a) {
  auto out = make_out(a->shape, any_requires({&a}));
  for (std::size_t i = 0; i < a->size(); ++i) {
    const double x = a->data[i];
    out->data[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  if (out->requires_grad) {
    out->parents = {a};
    Tensor* o = out.get();
    out->backprop = [a, o] {
      a->ensure_grad();
      for (std::size_t i = 0; i < a->size(); ++i) {
        const double x = a->data[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        a->grad[i] += o->grad[i] * (cdf + x * pdf);
      }
    };
  }
  return out;
}

TensorPtr softmax(const TensorPtr& a) {
  require_2d("softmax", *a);
  const std::size_t m = a->shape[0], n = a->shape[1];
  auto out = make_out(a->shape, any_requires({&a}));
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = a->data.data() + i * n;
    double* yi = out->data.data() + i * n;
    double mx = xi[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < n; ++j) yi[j] *= inv;
  }
  if (out->requires_grad) {
    out->parents = {a};
    Tensor* o = out.get();
    out->backprop = [a, o, m, n] {
      a->ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        const double* yi = o->data.data() + i * n;
        const double* gi = o->grad.data() + i * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += yi[j] * gi[j];
        double* ai = a->grad.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) ai[j] += yi[j] * (gi[j] - dot);
      }
    };
  }
  return out;
}

TensorPtr layer_norm(const TensorPtr& a, const TensorPtr& gain,
                     const TensorPtr& bias) {
  require_2d("layer_norm", *a);
  const std::size_t m = a->shape[0], n = a->shape[1];
  if (gain->size() != n || bias->size() != n)
    throw NumericError("layer_norm: gain/bias length must equal row width " +
                       std::to_string(n));
  constexpr double eps = 1e-5;
  auto out = make_out(a->shape, any_requires({&a, &gain, &bias}));
  std::vector<double> mean(m), istd(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = a->data.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(n);
    mean[i] = mu;
    istd[i] = 1.0 / std::sqrt(var + eps);
    double* yi = out->data.data() + i * n;
    for (std::size_t j = 0; j < n; ++j)
      yi[j] = (xi[j] - mu) * istd[i] * gain->data[j] + bias->data[j];
  }
  if (out->requires_grad) {
    out->parents = {a, gain, bias};
    Tensor* o = out.get();
    out->backprop = [a, gain, bias, o, m, n, mean = std::move(mean),
                     istd = std::move(istd)] {
      for (std::size_t i = 0; i < m; ++i) {
        const double* xi = a->data.data() + i * n;
        const double* gi = o->grad.data() + i * n;
        if (gain->requires_grad) {
          gain->ensure_grad();
          for (std::size_t j = 0; j < n; ++j)
            gain->grad[j] += gi[j] * (xi[j] - mean[i]) * istd[i];
        }
        if (bias->requires_grad) {
          bias->ensure_grad();
          for (std::size_t j = 0; j < n; ++j) bias->grad[j] += gi[j];
        }
        if (a->requires_grad) {
          a->ensure_grad();
          // dL/dx via the standard layer-norm backward over one row
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double gh = gi[j] * gain->data[j];
            sum_g += gh;
            sum_gx += gh * (xi[j] - mean[i]) * istd[i];
          }
          const double invn = 1.0 / static_cast<double>(n);
          double* ai = a->grad.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) {
            const double xh = (xi[j] - mean[i]) * istd[i];
            const double gh = gi[j] * gain->data[j];
            ai[j] += istd[i] * (gh - invn * sum_g - xh * invn * sum_gx);
          }
        }
      }
    };
  }
  return out;
}

TensorPtr mse(const TensorPtr& a, const TensorPtr& b) {
  if (a->size() != b->size()) shape_error("mse", *a, *b);
  const std::size_t n = a->size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a->data[i] - b->data[i];
    acc += d * d;
  }
  auto out = make_out({1}, any_requires({&a, &b}));
  out->data[0] = acc / static_cast<double>(n);
  if (out->requires_grad) {
    out->parents = {a, b};
    Tensor* o = out.get();
    out->backprop = [a, b, o, n] {
      const double g = o->grad[0] * 2.0 / static_cast<double>(n);
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          a->grad[i] += g * (a->data[i] - b->data[i]);
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          b->grad[i] -= g * (a->data[i] - b->data[i]);
      }
    };
  }
  return out;
}

TensorPtr bce_with_logits(const TensorPtr& logits, const TensorPtr& targets) {
  if (logits->size() != targets->size())
    shape_error("bce_with_logits", *logits, *targets);
  const std::size_t n = logits->size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits->data[i], t = targets->data[i];
    // softplus(z) - t*z, computed stably
    const double sp = z > 0 ? z + std::log1p(std::exp(-z))
                            : std::log1p(std::exp(z));
    acc += sp - t * z;
  }
  auto out = make_out({1}, any_requires({&logits}));
  out->data[0] = acc / static_cast<double>(n);
  if (out->requires_grad) {
    out->parents = {logits, targets};
    Tensor* o = out.get();
    out->backprop = [logits, targets, o, n] {
      logits->ensure_grad();
      const double g = o->grad[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double z = logits->data[i];
        const double sig = 1.0 / (1.0 + std::exp(-z));
        logits->grad[i] += g * (sig - targets->data[i]);
      }
    };
  }
  return out;
}

TensorPtr concat(const std::vector<TensorPtr>& parts, int axis) {
  if (parts.empty()) throw NumericError("concat: empty input list");
  if (axis != 0 && axis != 1) throw NumericError("concat: axis must be 0 or 1");
  bool rg = false;
  for (const auto& p : parts) {
    require_2d("concat", *p);
    rg = rg || p->requires_grad;
  }
  std::size_t rows = parts[0]->shape[0], cols = parts[0]->shape[1];
  if (axis == 0) {
    rows = 0;
    for (const auto& p : parts) {
      if (p->shape[1] != cols) shape_error("concat", *parts[0], *p);
      rows += p->shape[0];
    }
  } else {
    cols = 0;
    for (const auto& p : parts) {
      if (p->shape[0] != rows) shape_error("concat", *parts[0], *p);
      cols += p->shape[1];
    }
  }
  auto out = make_out({rows, cols}, rg);
  if (axis == 0) {
    std::size_t r = 0;
    for (const auto& p : parts) {
      std::memcpy(out->data.data() + r * cols, p->data.data(),
                  p->size() * sizeof(double));
      r += p->shape[0];
    }
  } else {
    std::size_t c = 0;
    for (const auto& p : parts) {
      const std::size_t pn = p->shape[1];
      for (std::size_t i = 0; i < rows; ++i)
        std::memcpy(out->data.data() + i * cols + c,
                    p->data.data() + i * pn, pn * sizeof(double));
      c += pn;
    }
  }
  if (out->requires_grad) {
    out->parents = parts;
    Tensor* o = out.get();
    out->backprop = [parts, o, axis, rows, cols] {
      if (axis == 0) {
        std::size_t r = 0;
        for (const auto& p : parts) {
          if (p->requires_grad) {
            p->ensure_grad();
            for (std::size_t i = 0; i < p->size(); ++i)
              p->grad[i] += o->grad[r * cols + i];
          }
          r += p->shape[0];
        }
      } else {
        std::size_t c = 0;
        for (const auto& p : parts) {
          const std::size_t pn = p->shape[1];
          if (p->requires_grad) {
            p->ensure_grad();
            for (std::size_t i = 0; i < rows; ++i)
              for (std::size_t j = 0; j < pn; ++j)
                p->grad[i * pn + j] += o->grad[i * cols + c + j];
          }
          c += pn;
        }
      }
    };
  }
  return out;
}

TensorPtr slice(const TensorPtr& a, int axis, std::size_t begin,
                std::size_t end) {
  require_2d("slice", *a);
  if (axis != 0 && axis != 1) throw NumericError("slice: axis must be 0 or 1");
  const std::size_t m = a->shape[0], n = a->shape[1];
  const std::size_t limit = axis == 0 ? m : n;
  if (begin > end || end > limit)
    throw NumericError("slice: range [" + std::to_string(begin) + "," +
                       std::to_string(end) + ") out of bounds for axis size " +
                       std::to_string(limit));
  auto out = make_out(axis == 0 ? std::vector<std::size_t>{end - begin, n}
                                : std::vector<std::size_t>{m, end - begin},
                      any_requires({&a}));
  if (axis == 0) {
    std::memcpy(out->data.data(), a->data.data() + begin * n,
                (end - begin) * n * sizeof(double));
  } else {
    for (std::size_t i = 0; i < m; ++i)
      std::memcpy(out->data.data() + i * (end - begin),
                  a->data.data() + i * n + begin,
                  (end - begin) * sizeof(double));
  }
  if (out->requires_grad) {
    out->parents = {a};
    Tensor* o = out.get();
    out->backprop = [a, o, axis, begin, end, m, n] {
      a->ensure_grad();
      if (axis == 0) {
        for (std::size_t i = 0; i < (end - begin) * n; ++i)
          a->grad[begin * n + i] += o->grad[i];
      } else {
        const std::size_t w = end - begin;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j)
            a->grad[i * n + begin + j] += o->grad[i * w + j];
      }
    };
  }
  return out;
}

TensorPtr embedding(const TensorPtr& table,
                    const std::vector<std::size_t>& ids) {
  require_2d("embedding", *table);
  const std::size_t v = table->shape[0], d = table->shape[1];
  for (std::size_t id : ids)
    if (id >= v)
      throw NumericError("embedding: index " + std::to_string(id) +
                         " out of vocabulary size " + std::to_string(v));
  auto out = make_out({ids.size(), d}, any_requires({&table}));
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out->data.data() + i * d, table->data.data() + ids[i] * d,
                d * sizeof(double));
  if (out->requires_grad) {
    out->parents = {table};
    Tensor* o = out.get();
    out->backprop = [table, o, ids, d] {
      table->ensure_grad();
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j)
          table->grad[ids[i] * d + j] += o->grad[i * d + j];
    };
  }
  return out;
}

TensorPtr mean_rows(const TensorPtr& a) {
  require_2d("mean_rows", *a);
  const std::size_t m = a->shape[0], n = a->shape[1];
  auto out = make_out({1, n}, any_requires({&a}));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out->data[j] += a->data[i * n + j];
  const double inv = 1.0 / static_cast<double>(m);
  for (std::size_t j = 0; j < n; ++j) out->data[j] *= inv;
  if (out->requires_grad) {
    out->parents = {a};
    Tensor* o = out.get();
    out->backprop = [a, o, m, n, inv] {
      a->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          a->grad[i * n + j] += o->grad[j] * inv;
    };
  }
  return out;
}

// --------------------------------------------------------------- backward

void backward(const TensorPtr& loss) {
  if (!loss->is_scalar())
    throw NumericError("backward: loss must be scalar, got shape " +
                       shape_str(loss->shape));
  // iterative post-order DFS over parents
  std::vector<Tensor*> order;
  std::unordered_set<Tensor*> visited;
  std::vector<std::pair<TensorPtr, std::size_t>> stack;
  stack.emplace_back(loss, 0);
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorPtr p = node->parents[next++];
      if (visited.insert(p.get()).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node.get());
      stack.pop_back();
    }
  }
  loss->ensure_grad();
  loss->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor* t = *it;
    if (t->backprop) {
      t->ensure_grad();
      t->backprop();
    }
  }
}

std::vector<double> finite_diff_grad(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& x, double step) {
  if (!(step > 0)) throw NumericError("finite_diff_grad: step must be > 0");
  std::vector<double> g(x.size());
  std::vector<double> xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + step;
    const double fp = f(xp);
    xp[i] = x[i] - step;
    const double fm = f(xp);
    xp[i] = x[i];
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

// ------------------------------------------------------------ parameters

TensorPtr ParamStore::create(const std::string& name,
                             std::vector<std::size_t> shape,
                             std::mt19937_64& rng, double stddev) {
  if (index_.count(name))
    throw NumericError("ParamStore: duplicate parameter " + name);
  auto t = randn(std::move(shape), rng, stddev, true);
  t->name = name;
  index_[name] = params_.size();
  params_.push_back(t);
  return t;
}

TensorPtr ParamStore::create_zeros(const std::string& name,
                                   std::vector<std::size_t> shape) {
  if (index_.count(name))
    throw NumericError("ParamStore: duplicate parameter " + name);
  auto t = zeros(std::move(shape), true);
  t->name = name;
  index_[name] = params_.size();
  params_.push_back(t);
  return t;
}

TensorPtr ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end())
    throw NumericError("ParamStore: unknown parameter " + name);
  return params_[it->second];
}

bool ParamStore::has(const std::string& name) const {
  return index_.count(name) > 0;
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->size();
  return n;
}

void ParamStore::zero_grad() {
  for (const auto& p : params_) p->zero_grad();
}

Adam::Adam(std::vector<TensorPtr> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p->size(), 0.0);
    v_.emplace_back(p->size(), 0.0);
  }
}

void Adam::step() {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i];
    p.ensure_grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = p.grad[j];
      if (!std::isfinite(g))
        throw NumericError("Adam: non-finite gradient in parameter " +
                           (p.name.empty() ? std::string("<anon>") : p.name));
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.data[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (const auto& p : params_) p->zero_grad();
}

// ------------------------------------------------------------ checkpoints

namespace {
constexpr char kCkptMagic[8] = {'T', 'D', 'L', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw NumericError(std::string("checkpoint: truncated reading ") + what);
  return v;
}
}  // namespace

void save_checkpoint(
    const std::string& path,
    const std::vector<std::pair<std::string, TensorPtr>>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw NumericError("checkpoint: cannot open for write: " + path);
  os.write(kCkptMagic, 8);
  for (const auto& [name, t] : entries) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t->shape.size()));
    for (std::size_t d : t->shape) write_pod<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t->data.data()),
             static_cast<std::streamsize>(t->size() * sizeof(double)));
  }
  if (!os) throw NumericError("checkpoint: write failed: " + path);
}

std::map<std::string, TensorPtr> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NumericError("checkpoint: cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw NumericError("checkpoint: bad magic in " + path);
  std::map<std::string, TensorPtr> out;
  while (true) {
    std::uint32_t name_len{};
    is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    if (is.eof()) break;
    if (!is) throw NumericError("checkpoint: truncated header in " + path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw NumericError("checkpoint: truncated name in " + path);
    const auto rank = read_pod<std::uint32_t>(is, "rank");
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(read_pod<std::uint64_t>(is, "dims"));
      n *= d;
    }
    auto t = zeros(shape);
    t->name = name;
    is.read(reinterpret_cast<char*>(t->data.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!is)
      throw NumericError("checkpoint: truncated data for parameter " + name);
    out[name] = t;
  }
  return out;
}

}  // namespace tdl::nc
