#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mergevit {

// Thrown on incompatible shapes; the message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Thrown when an operation produces NaN/Inf. Non-finite values are an error
// condition, never a silent state.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Scalar multiply-add / elementwise op counter. Enabled via FlopScope; used
// to cross-check the analytic cost model against the actual forward pass.
struct FlopCounter {
  static inline thread_local std::uint64_t count = 0;
  static inline thread_local bool enabled = false;
  static inline void add(std::uint64_t n) {
    if (enabled) count += n;
  }
};

class FlopScope {
 public:
  FlopScope() : prev_enabled_(FlopCounter::enabled), prev_count_(FlopCounter::count) {
    FlopCounter::enabled = true;
    FlopCounter::count = 0;
  }
  ~FlopScope() {
    FlopCounter::enabled = prev_enabled_;
    FlopCounter::count = prev_count_;
  }
  std::uint64_t flops() const { return FlopCounter::count; }

 private:
  bool prev_enabled_;
  std::uint64_t prev_count_;
};

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major array of 32- or 64-bit floats. Everything in the model is
// one of these: activations, parameters, gradients, images.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), T(0));
  }
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::size_t>(numel_of(shape)) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::size_t size() const { return data.size(); }
  int rows() const { return shape.at(0); }
  int cols() const { return shape.at(1); }
  bool is_matrix() const { return shape.size() == 2; }

  T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
  const T& operator()(int r, int c) const {
    return data[static_cast<std::size_t>(r) * shape[1] + c];
  }

  const T* row_ptr(int r) const { return data.data() + static_cast<std::size_t>(r) * shape[1]; }
  T* row_ptr(int r) { return data.data() + static_cast<std::size_t>(r) * shape[1]; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
void ensure_finite(const Tensor<T>& t, const char* where) {
  if (!all_finite(t)) throw NumericError(std::string(where) + " produced a non-finite value");
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* name) {
  if (!t.is_matrix())
    throw ShapeError(std::string(name) + " must be 2-D, got shape " + shape_str(t.shape));
}

// ---------------------------------------------------------------------------
// matmul and its transposed variants. The ikj loop order keeps the inner loop
// contiguous so the compiler vectorizes it.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul lhs");
  require_matrix(b, "matmul rhs");
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape) + " x " +
                     shape_str(b.shape));
  const int n = a.rows(), k = a.cols(), m = b.cols();
  Tensor<T> c({n, m});
  for (int i = 0; i < n; ++i) {
    T* cr = c.row_ptr(i);
    for (int kk = 0; kk < k; ++kk) {
      const T av = a(i, kk);
      const T* br = b.row_ptr(kk);
      for (int j = 0; j < m; ++j) cr[j] += av * br[j];
    }
  }
  FlopCounter::add(2ull * n * k * m);
  ensure_finite(c, "matmul");
  return c;
}

// a[N x K] * b^T where b is [M x K]; result [N x M].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_nt lhs");
  require_matrix(b, "matmul_nt rhs");
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape) + " x " +
                     shape_str(b.shape) + "^T");
  const int n = a.rows(), k = a.cols(), m = b.rows();
  Tensor<T> c({n, m});
  for (int i = 0; i < n; ++i) {
    const T* ar = a.row_ptr(i);
    T* cr = c.row_ptr(i);
    for (int j = 0; j < m; ++j) {
      const T* br = b.row_ptr(j);
      T acc = 0;
      for (int kk = 0; kk < k; ++kk) acc += ar[kk] * br[kk];
      cr[j] = acc;
    }
  }
  FlopCounter::add(2ull * n * k * m);
  ensure_finite(c, "matmul_nt");
  return c;
}

// a^T * b where a is [K x N], b is [K x M]; result [N x M].
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_tn lhs");
  require_matrix(b, "matmul_tn rhs");
  if (a.rows() != b.rows())
    throw ShapeError("matmul_tn: inner dimensions disagree, " + shape_str(a.shape) + "^T x " +
                     shape_str(b.shape));
  const int k = a.rows(), n = a.cols(), m = b.cols();
  Tensor<T> c({n, m});
  for (int kk = 0; kk < k; ++kk) {
    const T* ar = a.row_ptr(kk);
    const T* br = b.row_ptr(kk);
    for (int i = 0; i < n; ++i) {
      const T av = ar[i];
      T* cr = c.row_ptr(i);
      for (int j = 0; j < m; ++j) cr[j] += av * br[j];
    }
  }
  FlopCounter::add(2ull * n * k * m);
  ensure_finite(c, "matmul_tn");
  return c;
}

// dY [N x M] flowing back through Y = A * B gives dA = dY B^T, dB = A^T dY.
template <typename T>
void matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dy, Tensor<T>* da,
                     Tensor<T>* db) {
  if (da) *da = matmul_nt(dy, b);
  if (db) *db = matmul_tn(a, dy);
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a, "transpose");
  Tensor<T> out({a.cols(), a.rows()});
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

// ---------------------------------------------------------------------------
// softmax over rows, with per-row max subtraction for stability.
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kSoftmaxFlopsPerElem = 5;  // max, sub, exp, sum, div

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require_matrix(x, "softmax_rows");
  const int r = x.rows(), c = x.cols();
  Tensor<T> y({r, c});
  for (int i = 0; i < r; ++i) {
    const T* xr = x.row_ptr(i);
    T* yr = y.row_ptr(i);
    T mx = xr[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    T sum = 0;
    for (int j = 0; j < c; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < c; ++j) yr[j] *= inv;
  }
  FlopCounter::add(kSoftmaxFlopsPerElem * static_cast<std::uint64_t>(r) * c);
  ensure_finite(y, "softmax_rows");
  return y;
}

// dL/dx given y = softmax_rows(x) and dy = dL/dy:
// dx_ij = y_ij * (dy_ij - sum_k dy_ik y_ik)
template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  if (y.shape != dy.shape)
    throw ShapeError("softmax_rows_backward: " + shape_str(y.shape) + " vs " +
                     shape_str(dy.shape));
  const int r = y.rows(), c = y.cols();
  Tensor<T> dx({r, c});
  for (int i = 0; i < r; ++i) {
    const T* yr = y.row_ptr(i);
    const T* dr = dy.row_ptr(i);
    T* xr = dx.row_ptr(i);
    T dot = 0;
    for (int j = 0; j < c; ++j) dot += yr[j] * dr[j];
    for (int j = 0; j < c; ++j) xr[j] = yr[j] * (dr[j] - dot);
  }
  FlopCounter::add(4ull * r * c);
  return dx;
}

// ---------------------------------------------------------------------------
// layer norm over the last dimension of an [N x D] matrix. Biased variance
// (divide by D), default eps 1e-6.
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-6;
inline constexpr std::uint64_t kLayerNormFlopsPerElem = 8;  // mean, var, normalize, affine

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(kLayerNormEps)) {
  require_matrix(x, "layer_norm");
  const int n = x.rows(), d = x.cols();
  if (static_cast<int>(gamma.size()) != d || static_cast<int>(beta.size()) != d)
    throw ShapeError("layer_norm: gamma/beta length must equal row width " + std::to_string(d));
  Tensor<T> y({n, d});
  for (int i = 0; i < n; ++i) {
    const T* xr = x.row_ptr(i);
    T* yr = y.row_ptr(i);
    T mean = 0;
    for (int j = 0; j < d; ++j) mean += xr[j];
    mean /= T(d);
    T var = 0;
    for (int j = 0; j < d; ++j) {
      const T dv = xr[j] - mean;
      var += dv * dv;
    }
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) yr[j] = (xr[j] - mean) * inv * gamma.data[j] + beta.data[j];
  }
  FlopCounter::add(kLayerNormFlopsPerElem * static_cast<std::uint64_t>(n) * d);
  ensure_finite(y, "layer_norm");
  return y;
}

template <typename T>
void layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& dy,
                         Tensor<T>* dx, Tensor<T>* dgamma, Tensor<T>* dbeta,
                         T eps = T(kLayerNormEps)) {
  const int n = x.rows(), d = x.cols();
  if (dx) *dx = Tensor<T>({n, d});
  for (int i = 0; i < n; ++i) {
    const T* xr = x.row_ptr(i);
    const T* dr = dy.row_ptr(i);
    T mean = 0;
    for (int j = 0; j < d; ++j) mean += xr[j];
    mean /= T(d);
    T var = 0;
    for (int j = 0; j < d; ++j) {
      const T dv = xr[j] - mean;
      var += dv * dv;
    }
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + eps);

    // xhat_j = (x_j - mean) * inv; accumulate parameter grads and the two
    // row means the input gradient needs.
    T m1 = 0, m2 = 0;
    for (int j = 0; j < d; ++j) {
      const T xhat = (xr[j] - mean) * inv;
      const T dxhat = dr[j] * gamma.data[j];
      if (dgamma) dgamma->data[j] += dr[j] * xhat;
      if (dbeta) dbeta->data[j] += dr[j];
      m1 += dxhat;
      m2 += dxhat * xhat;
    }
    m1 /= T(d);
    m2 /= T(d);
    if (dx) {
      T* out = dx->row_ptr(i);
      for (int j = 0; j < d; ++j) {
        const T xhat = (xr[j] - mean) * inv;
        const T dxhat = dr[j] * gamma.data[j];
        out[j] = inv * (dxhat - m1 - xhat * m2);
      }
    }
  }
  FlopCounter::add(12ull * n * d);
}

// ---------------------------------------------------------------------------
// GELU, tanh approximation.
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kGeluFlopsPerElem = 10;

template <typename T>
T gelu_scalar(T x) {
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T u = c * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y;
  y.shape = x.shape;
  y.data.resize(x.data.size());
  for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] = gelu_scalar(x.data[i]);
  FlopCounter::add(kGeluFlopsPerElem * x.data.size());
  ensure_finite(y, "gelu");
  return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  if (x.shape != dy.shape)
    throw ShapeError("gelu_backward: " + shape_str(x.shape) + " vs " + shape_str(dy.shape));
  const T c = T(0.7978845608028654);
  Tensor<T> dx;
  dx.shape = x.shape;
  dx.data.resize(x.data.size());
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const T xv = x.data[i];
    const T u = c * (xv + T(0.044715) * xv * xv * xv);
    const T t = std::tanh(u);
    const T du = c * (T(1) + T(3) * T(0.044715) * xv * xv);
    const T g = T(0.5) * (T(1) + t) + T(0.5) * xv * (T(1) - t * t) * du;
    dx.data[i] = dy.data[i] * g;
  }
  FlopCounter::add(kGeluFlopsPerElem * x.data.size());
  return dx;
}

// ---------------------------------------------------------------------------
// Small elementwise helpers.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape)
    throw ShapeError("add: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor<T> c;
  c.shape = a.shape;
  c.data.resize(a.data.size());
  for (std::size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] + b.data[i];
  FlopCounter::add(a.data.size());
  ensure_finite(c, "add");
  return c;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape)
    throw ShapeError("add_inplace: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
  FlopCounter::add(a.data.size());
}

// y[i,:] += v for every row i.
template <typename T>
void add_row_inplace(Tensor<T>& a, const Tensor<T>& v) {
  require_matrix(a, "add_row_inplace");
  if (static_cast<int>(v.size()) != a.cols())
    throw ShapeError("add_row_inplace: row width " + std::to_string(a.cols()) + " vs vector " +
                     std::to_string(v.size()));
  for (int i = 0; i < a.rows(); ++i) {
    T* r = a.row_ptr(i);
    for (int j = 0; j < a.cols(); ++j) r[j] += v.data[j];
  }
  FlopCounter::add(a.size());
}

template <typename T>
Tensor<T> col_sums(const Tensor<T>& a) {
  require_matrix(a, "col_sums");
  Tensor<T> out({a.cols()});
  for (int i = 0; i < a.rows(); ++i) {
    const T* r = a.row_ptr(i);
    for (int j = 0; j < a.cols(); ++j) out.data[j] += r[j];
  }
  FlopCounter::add(a.size());
  return out;
}

}  // namespace mergevit
