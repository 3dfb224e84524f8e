#include "isodream/tape.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace isodream {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) {
    return T(1) / (T(1) + std::exp(-x));
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T stable_softplus(T x) {
  if (x > T(30)) return x;
  if (x < T(-30)) return std::exp(x);
  return std::log1p(std::exp(x));
}

inline int conv_out(int h, int k, int stride, int pad) {
  return (h + 2 * pad - k) / stride + 1;
}

// col[r * col_stride + j] over output positions j, kernel rows r.
template <typename T>
void im2col(const T* img, int cin, int h, int w, int k, int stride, int pad,
            T* col, int col_stride) {
  const int oh = conv_out(h, k, stride, pad);
  const int ow = conv_out(w, k, stride, pad);
  for (int ci = 0; ci < cin; ++ci) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        T* dst = col + ((ci * k + kh) * k + kw) * col_stride;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + kh;
          if (iy < 0 || iy >= h) {
            std::fill(dst + oy * ow, dst + (oy + 1) * ow, T(0));
            continue;
          }
          const T* src = img + (ci * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kw;
            dst[oy * ow + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int col_stride, int cin, int h, int w, int k,
                int stride, int pad, T* img) {
  const int oh = conv_out(h, k, stride, pad);
  const int ow = conv_out(w, k, stride, pad);
  for (int ci = 0; ci < cin; ++ci) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        const T* src = col + ((ci * k + kh) * k + kw) * col_stride;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + kh;
          if (iy < 0 || iy >= h) continue;
          T* dst = img + (ci * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kw;
            if (ix >= 0 && ix < w) dst[ix] += src[oy * ow + ox];
          }
        }
      }
    }
  }
}

enum class Op : uint8_t {
  kConst, kParam, kParamFrozen,
  kLinear, kMatmulNT, kMatmulNN,
  kAdd, kSub, kMul, kAffineConst,
  kSigmoid, kTanh, kElu, kRelu, kSoftplusFloor, kLog,
  kConcatCols, kSliceCols, kSliceRows, kStackRows,
  kMulRowBcast, kSubRowBcast, kMulChanBcast, kRowDot,
  kSumAll, kSumSq, kSqErr, kMeanRows, kRowSoftmax,
  kSoftmax3, kKlDiag, kBceLogits, kStGate,
  kConv2d, kDeconv2d,
};

}  // namespace

// ---- GradSink ----------------------------------------------------------------

template <typename T>
void GradSink<T>::clear() {
  for (int id : touched_) {
    std::fill(slots_[id].begin(), slots_[id].end(), T(0));
  }
  touched_.clear();
}

template <typename T>
std::vector<T>& GradSink<T>::slot(const ParamTensor<T>& p) {
  ISO_CHECK(p.id >= 0, "parameter '" + p.name + "' is unregistered");
  if (p.id >= static_cast<int>(slots_.size())) slots_.resize(p.id + 1);
  auto& s = slots_[p.id];
  if (s.size() != static_cast<size_t>(p.size())) {
    s.assign(p.size(), T(0));
    touched_.push_back(p.id);
  } else if (std::find(touched_.begin(), touched_.end(), p.id) == touched_.end()) {
    touched_.push_back(p.id);
  }
  return s;
}

template <typename T>
const std::vector<T>* GradSink<T>::peek(int param_id) const {
  if (param_id < 0 || param_id >= static_cast<int>(slots_.size())) return nullptr;
  if (std::find(touched_.begin(), touched_.end(), param_id) == touched_.end()) {
    return nullptr;
  }
  return &slots_[param_id];
}

template <typename T>
void GradSink<T>::flush_into_params(ParamSet<T>& params) const {
  for (int id : touched_) {
    auto& p = params.by_id(id);
    const auto& s = slots_[id];
    for (int i = 0; i < p.size(); ++i) p.grad[i] += s[i];
  }
}

// ---- Tape ----------------------------------------------------------------------

template <typename T>
struct Tape<T>::Node {
  Op op;
  int rows, cols;
  int off;
  int a = -1, b = -1, c = -1, d = -1;
  int i0 = 0, i1 = 0, i2 = 0, i3 = 0, i4 = 0, i5 = 0;
  T f0 = 0, f1 = 0;
  int pref = -1;
};

template <typename T>
Tape<T>::Tape() = default;

template <typename T>
Tape<T>::~Tape() = default;

template <typename T>
size_t Tape<T>::node_count() const {
  return nodes_.size();
}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
  vals_.clear();
  adjs_.clear();
  ipool_.clear();
  param_refs_.clear();
  param_vars_.clear();
  adjoints_valid_ = false;
}

template <typename T>
Var Tape<T>::push(int rows, int cols) {
  ISO_CHECK(rows > 0 && cols > 0, "tape value must have positive shape");
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.off = static_cast<int>(vals_.size());
  vals_.resize(vals_.size() + static_cast<size_t>(rows) * cols, T(0));
  nodes_.push_back(n);
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
T* Tape<T>::data(Var v) {
  return vals_.data() + nodes_[v.id].off;
}

template <typename T>
const T* Tape<T>::cdata(Var v) const {
  return vals_.data() + nodes_[v.id].off;
}

template <typename T>
T* Tape<T>::adj(Var v) {
  return adjs_.data() + nodes_[v.id].off;
}

template <typename T>
int Tape<T>::rows(Var v) const {
  ISO_CHECK(v.valid() && v.id < static_cast<int>(nodes_.size()), "invalid Var");
  return nodes_[v.id].rows;
}

template <typename T>
int Tape<T>::cols(Var v) const {
  ISO_CHECK(v.valid() && v.id < static_cast<int>(nodes_.size()), "invalid Var");
  return nodes_[v.id].cols;
}

template <typename T>
std::span<const T> Tape<T>::value(Var v) const {
  const Node& n = nodes_[v.id];
  return {vals_.data() + n.off, static_cast<size_t>(n.rows) * n.cols};
}

template <typename T>
std::vector<T> Tape<T>::value_copy(Var v) const {
  auto s = value(v);
  return std::vector<T>(s.begin(), s.end());
}

template <typename T>
T Tape<T>::scalar_value(Var v) const {
  ISO_CHECK(size(v) == 1, "scalar_value on non-scalar");
  return cdata(v)[0];
}

template <typename T>
bool Tape<T>::all_finite(Var v) const {
  for (T x : value(v)) {
    if (!std::isfinite(static_cast<double>(x))) return false;
  }
  return true;
}

template <typename T>
std::span<const T> Tape<T>::adjoint(Var v) const {
  ISO_CHECK(adjoints_valid_, "adjoint() before backward()");
  const Node& n = nodes_[v.id];
  return {adjs_.data() + n.off, static_cast<size_t>(n.rows) * n.cols};
}

template <typename T>
Var Tape<T>::constant(std::span<const T> data_in, int rows, int cols) {
  ISO_CHECK(static_cast<int>(data_in.size()) == rows * cols,
            "constant data size does not match shape");
  Var v = push(rows, cols);
  nodes_[v.id].op = Op::kConst;
  std::copy(data_in.begin(), data_in.end(), data(v));
  return v;
}

template <typename T>
Var Tape<T>::zeros(int rows, int cols) {
  Var v = push(rows, cols);
  nodes_[v.id].op = Op::kConst;
  return v;
}

template <typename T>
Var Tape<T>::param(const ParamTensor<T>& p) {
  for (auto& [ptr, id] : param_vars_) {
    if (ptr == &p) return Var{id};
  }
  Var v = push(p.rows, p.cols);
  nodes_[v.id].op = Op::kParam;
  nodes_[v.id].pref = static_cast<int>(param_refs_.size());
  param_refs_.push_back(&p);
  std::copy(p.value.begin(), p.value.end(), data(v));
  param_vars_.emplace_back(&p, v.id);
  return v;
}

template <typename T>
Var Tape<T>::param_frozen(const ParamTensor<T>& p) {
  Var v = push(p.rows, p.cols);
  nodes_[v.id].op = Op::kParamFrozen;
  std::copy(p.value.begin(), p.value.end(), data(v));
  return v;
}

template <typename T>
Var Tape<T>::linear(Var x, Var W, Var b) {
  const int n = rows(x), k = cols(x), m = rows(W);
  ISO_CHECK(cols(W) == k, "linear: weight/input width mismatch");
  if (b.valid()) {
    ISO_CHECK(rows(b) == 1 && cols(b) == m, "linear: bias shape mismatch");
  }
  Var y = push(n, m);
  Node& nd = nodes_[y.id];
  nd.op = Op::kLinear;
  nd.a = x.id;
  nd.b = W.id;
  nd.c = b.valid() ? b.id : -1;
  Map<T>(data(y), n, m).noalias() =
      CMap<T>(cdata(x), n, k) * CMap<T>(cdata(W), m, k).transpose();
  if (b.valid()) {
    Map<T>(data(y), n, m).rowwise() +=
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(cdata(b), m);
  }
  return y;
}

template <typename T>
Var Tape<T>::matmul_nt(Var a, Var b) {
  const int n = rows(a), k = cols(a), m = rows(b);
  ISO_CHECK(cols(b) == k, "matmul_nt: inner dims mismatch");
  Var y = push(n, m);
  Node& nd = nodes_[y.id];
  nd.op = Op::kMatmulNT;
  nd.a = a.id;
  nd.b = b.id;
  Map<T>(data(y), n, m).noalias() =
      CMap<T>(cdata(a), n, k) * CMap<T>(cdata(b), m, k).transpose();
  return y;
}

template <typename T>
Var Tape<T>::matmul_nn(Var a, Var b) {
  const int n = rows(a), k = cols(a), m = cols(b);
  ISO_CHECK(rows(b) == k, "matmul_nn: inner dims mismatch");
  Var y = push(n, m);
  Node& nd = nodes_[y.id];
  nd.op = Op::kMatmulNN;
  nd.a = a.id;
  nd.b = b.id;
  Map<T>(data(y), n, m).noalias() =
      CMap<T>(cdata(a), n, k) * CMap<T>(cdata(b), k, m);
  return y;
}

namespace {
template <typename T>
void check_same_shape(const Tape<T>& t, Var a, Var b, const char* what) {
  ISO_CHECK(t.rows(a) == t.rows(b) && t.cols(a) == t.cols(b),
            std::string(what) + ": shape mismatch");
}
}  // namespace

template <typename T>
Var Tape<T>::add(Var a, Var b) {
  check_same_shape(*this, a, b, "add");
  Var y = push(rows(a), cols(a));
  Node& nd = nodes_[y.id];
  nd.op = Op::kAdd;
  nd.a = a.id;
  nd.b = b.id;
  const T* pa = cdata(a);
  const T* pb = cdata(b);
  T* py = data(y);
  for (int i = 0; i < size(y); ++i) py[i] = pa[i] + pb[i];
  return y;
}

template <typename T>
Var Tape<T>::sub(Var a, Var b) {
  check_same_shape(*this, a, b, "sub");
  Var y = push(rows(a), cols(a));
  Node& nd = nodes_[y.id];
  nd.op = Op::kSub;
  nd.a = a.id;
  nd.b = b.id;
  const T* pa = cdata(a);
  const T* pb = cdata(b);
  T* py = data(y);
  for (int i = 0; i < size(y); ++i) py[i] = pa[i] - pb[i];
  return y;
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
  check_same_shape(*this, a, b, "mul");
  Var y = push(rows(a), cols(a));
  Node& nd = nodes_[y.id];
  nd.op = Op::kMul;
  nd.a = a.id;
  nd.b = b.id;
  const T* pa = cdata(a);
  const T* pb = cdata(b);
  T* py = data(y);
  for (int i = 0; i < size(y); ++i) py[i] = pa[i] * pb[i];
  return y;
}

template <typename T>
Var Tape<T>::affine_const(Var a, T alpha, T beta) {
  Var y = push(rows(a), cols(a));
  Node& nd = nodes_[y.id];
  nd.op = Op::kAffineConst;
  nd.a = a.id;
  nd.f0 = alpha;
  nd.f1 = beta;
  const T* pa = cdata(a);
  T* py = data(y);
  for (int i = 0; i < size(y); ++i) py[i] = alpha * pa[i] + beta;
  return y;
}

template <typename T>
Var Tape<T>::sigmoid(Var a) {
  Var y = push(rows(a), cols(a));
  Node& nd = nodes_[y.id];
  nd.op = Op::kSigmoid;
  nd.a = a.id;
  const T* pa = cdata(a);
  T* py = data(y);
  for (int i = 0; i < size(y); ++i) py[i] = stable_sigmoid(pa[i]);
  return y;
}

template <typename T>
Var Tape<T>::tanh_(Var a) {
  Var y = push(rows(a), cols(a));
  Node& nd = nodes_[y.id];
  nd.op = Op::kTanh;
  nd.a = a.id;
  const T* pa = cdata(a);
  T* py = data(y);
  for (int i = 0; i < size(y); ++i) py[i] = std::tanh(pa[i]);
  return y;
}

template <typename T>
Var Tape<T>::elu(Var a) {
  Var y = push(rows(a), cols(a));
  Node& nd = nodes_[y.id];
  nd.op = Op::kElu;
  nd.a = a.id;
  const T* pa = cdata(a);
  T* py = data(y);
  for (int i = 0; i < size(y); ++i) {
    py[i] = pa[i] > T(0) ? pa[i] : std::expm1(pa[i]);
  }
  return y;
}

template <typename T>
Var Tape<T>::relu(Var a) {
  Var y = push(rows(a), cols(a));
  Node& nd = nodes_[y.id];
  nd.op = Op::kRelu;
  nd.a = a.id;
  const T* pa = cdata(a);
  T* py = data(y);
  for (int i = 0; i < size(y); ++i) py[i] = pa[i] > T(0) ? pa[i] : T(0);
  return y;
}

template <typename T>
Var Tape<T>::softplus_floor(Var a, T floor) {
  Var y = push(rows(a), cols(a));
  Node& nd = nodes_[y.id];
  nd.op = Op::kSoftplusFloor;
  nd.a = a.id;
  nd.f0 = floor;
  const T* pa = cdata(a);
  T* py = data(y);
  for (int i = 0; i < size(y); ++i) py[i] = stable_softplus(pa[i]) + floor;
  return y;
}

template <typename T>
Var Tape<T>::log_(Var a) {
  Var y = push(rows(a), cols(a));
  Node& nd = nodes_[y.id];
  nd.op = Op::kLog;
  nd.a = a.id;
  const T* pa = cdata(a);
  T* py = data(y);
  for (int i = 0; i < size(y); ++i) py[i] = std::log(pa[i]);
  return y;
}

template <typename T>
Var Tape<T>::concat_cols(std::span<const Var> parts) {
  ISO_CHECK(!parts.empty(), "concat_cols: empty");
  const int n = rows(parts[0]);
  int total = 0;
  for (Var p : parts) {
    ISO_CHECK(rows(p) == n, "concat_cols: row mismatch");
    total += cols(p);
  }
  Var y = push(n, total);
  Node& nd = nodes_[y.id];
  nd.op = Op::kConcatCols;
  nd.i0 = static_cast<int>(ipool_.size());
  nd.i1 = static_cast<int>(parts.size());
  for (Var p : parts) ipool_.push_back(p.id);
  T* py = data(y);
  int c0 = 0;
  for (Var p : parts) {
    const int c = cols(p);
    const T* pp = cdata(p);
    for (int r = 0; r < n; ++r) {
      std::memcpy(py + r * total + c0, pp + r * c, sizeof(T) * c);
    }
    c0 += c;
  }
  return y;
}

template <typename T>
Var Tape<T>::slice_cols(Var a, int col0, int ncols) {
  ISO_CHECK(col0 >= 0 && ncols > 0 && col0 + ncols <= cols(a),
            "slice_cols out of range");
  const int n = rows(a), c = cols(a);
  Var y = push(n, ncols);
  Node& nd = nodes_[y.id];
  nd.op = Op::kSliceCols;
  nd.a = a.id;
  nd.i0 = col0;
  const T* pa = cdata(a);
  T* py = data(y);
  for (int r = 0; r < n; ++r) {
    std::memcpy(py + r * ncols, pa + r * c + col0, sizeof(T) * ncols);
  }
  return y;
}

template <typename T>
Var Tape<T>::slice_rows(Var a, int row0, int nrows) {
  ISO_CHECK(row0 >= 0 && nrows > 0 && row0 + nrows <= rows(a),
            "slice_rows out of range");
  const int c = cols(a);
  Var y = push(nrows, c);
  Node& nd = nodes_[y.id];
  nd.op = Op::kSliceRows;
  nd.a = a.id;
  nd.i0 = row0;
  std::memcpy(data(y), cdata(a) + static_cast<size_t>(row0) * c,
              sizeof(T) * static_cast<size_t>(nrows) * c);
  return y;
}

template <typename T>
Var Tape<T>::stack_rows(std::span<const Var> parts) {
  ISO_CHECK(!parts.empty(), "stack_rows: empty");
  const int c = cols(parts[0]);
  int total = 0;
  for (Var p : parts) {
    ISO_CHECK(cols(p) == c, "stack_rows: col mismatch");
    total += rows(p);
  }
  Var y = push(total, c);
  Node& nd = nodes_[y.id];
  nd.op = Op::kStackRows;
  nd.i0 = static_cast<int>(ipool_.size());
  nd.i1 = static_cast<int>(parts.size());
  for (Var p : parts) ipool_.push_back(p.id);
  T* py = data(y);
  int r0 = 0;
  for (Var p : parts) {
    std::memcpy(py + static_cast<size_t>(r0) * c, cdata(p),
                sizeof(T) * static_cast<size_t>(rows(p)) * c);
    r0 += rows(p);
  }
  return y;
}

template <typename T>
Var Tape<T>::mul_rowbcast(Var x, Var s) {
  ISO_CHECK(rows(s) == rows(x) && cols(s) == 1, "mul_rowbcast: scale must be [n,1]");
  const int n = rows(x), c = cols(x);
  Var y = push(n, c);
  Node& nd = nodes_[y.id];
  nd.op = Op::kMulRowBcast;
  nd.a = x.id;
  nd.b = s.id;
  const T* px = cdata(x);
  const T* ps = cdata(s);
  T* py = data(y);
  for (int r = 0; r < n; ++r) {
    for (int j = 0; j < c; ++j) py[r * c + j] = px[r * c + j] * ps[r];
  }
  return y;
}

template <typename T>
Var Tape<T>::sub_rowbcast(Var x, Var m) {
  ISO_CHECK(rows(m) == 1 && cols(m) == cols(x), "sub_rowbcast: mean must be [1,c]");
  const int n = rows(x), c = cols(x);
  Var y = push(n, c);
  Node& nd = nodes_[y.id];
  nd.op = Op::kSubRowBcast;
  nd.a = x.id;
  nd.b = m.id;
  const T* px = cdata(x);
  const T* pm = cdata(m);
  T* py = data(y);
  for (int r = 0; r < n; ++r) {
    for (int j = 0; j < c; ++j) py[r * c + j] = px[r * c + j] - pm[j];
  }
  return y;
}

template <typename T>
Var Tape<T>::mul_chanbcast(Var rgb, Var m, int channels) {
  const int n = rows(rgb), cw = cols(rgb), p = cols(m);
  ISO_CHECK(rows(m) == n && cw == channels * p, "mul_chanbcast: shape mismatch");
  Var y = push(n, cw);
  Node& nd = nodes_[y.id];
  nd.op = Op::kMulChanBcast;
  nd.a = rgb.id;
  nd.b = m.id;
  nd.i0 = channels;
  const T* px = cdata(rgb);
  const T* pm = cdata(m);
  T* py = data(y);
  for (int r = 0; r < n; ++r) {
    for (int q = 0; q < channels; ++q) {
      const T* xr = px + r * cw + q * p;
      T* yr = py + r * cw + q * p;
      const T* mr = pm + r * p;
      for (int j = 0; j < p; ++j) yr[j] = xr[j] * mr[j];
    }
  }
  return y;
}

template <typename T>
Var Tape<T>::rowdot(Var a, Var b) {
  check_same_shape(*this, a, b, "rowdot");
  const int n = rows(a), c = cols(a);
  Var y = push(n, 1);
  Node& nd = nodes_[y.id];
  nd.op = Op::kRowDot;
  nd.a = a.id;
  nd.b = b.id;
  const T* pa = cdata(a);
  const T* pb = cdata(b);
  T* py = data(y);
  for (int r = 0; r < n; ++r) {
    T acc = 0;
    for (int j = 0; j < c; ++j) acc += pa[r * c + j] * pb[r * c + j];
    py[r] = acc;
  }
  return y;
}

template <typename T>
Var Tape<T>::sum_all(Var a) {
  Var y = push(1, 1);
  Node& nd = nodes_[y.id];
  nd.op = Op::kSumAll;
  nd.a = a.id;
  T acc = 0;
  for (T x : value(a)) acc += x;
  data(y)[0] = acc;
  return y;
}

template <typename T>
Var Tape<T>::sum_sq(Var a) {
  Var y = push(1, 1);
  Node& nd = nodes_[y.id];
  nd.op = Op::kSumSq;
  nd.a = a.id;
  T acc = 0;
  for (T x : value(a)) acc += x * x;
  data(y)[0] = acc;
  return y;
}

template <typename T>
Var Tape<T>::sq_err(Var a, Var b) {
  check_same_shape(*this, a, b, "sq_err");
  Var y = push(1, 1);
  Node& nd = nodes_[y.id];
  nd.op = Op::kSqErr;
  nd.a = a.id;
  nd.b = b.id;
  const T* pa = cdata(a);
  const T* pb = cdata(b);
  T acc = 0;
  for (int i = 0; i < size(a); ++i) {
    const T d = pa[i] - pb[i];
    acc += d * d;
  }
  data(y)[0] = acc;
  return y;
}

template <typename T>
Var Tape<T>::mean_rows(Var a) {
  const int n = rows(a), c = cols(a);
  Var y = push(1, c);
  Node& nd = nodes_[y.id];
  nd.op = Op::kMeanRows;
  nd.a = a.id;
  const T* pa = cdata(a);
  T* py = data(y);
  std::fill(py, py + c, T(0));
  for (int r = 0; r < n; ++r) {
    for (int j = 0; j < c; ++j) py[j] += pa[r * c + j];
  }
  const T inv = T(1) / T(n);
  for (int j = 0; j < c; ++j) py[j] *= inv;
  return y;
}

template <typename T>
Var Tape<T>::row_softmax(Var a) {
  const int n = rows(a), c = cols(a);
  Var y = push(n, c);
  Node& nd = nodes_[y.id];
  nd.op = Op::kRowSoftmax;
  nd.a = a.id;
  const T* pa = cdata(a);
  T* py = data(y);
  for (int r = 0; r < n; ++r) {
    const T* ar = pa + r * c;
    T* yr = py + r * c;
    T mx = ar[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, ar[j]);
    T z = 0;
    for (int j = 0; j < c; ++j) {
      yr[j] = std::exp(ar[j] - mx);
      z += yr[j];
    }
    const T inv = T(1) / z;
    for (int j = 0; j < c; ++j) yr[j] *= inv;
  }
  return y;
}

template <typename T>
Var Tape<T>::softmax3(Var la, Var lb, Var lc) {
  check_same_shape(*this, la, lb, "softmax3");
  check_same_shape(*this, la, lc, "softmax3");
  const int n = rows(la), p = cols(la);
  Var y = push(n, 3 * p);
  Node& nd = nodes_[y.id];
  nd.op = Op::kSoftmax3;
  nd.a = la.id;
  nd.b = lb.id;
  nd.c = lc.id;
  const T* pa = cdata(la);
  const T* pb = cdata(lb);
  const T* pc = cdata(lc);
  T* py = data(y);
  for (int r = 0; r < n; ++r) {
    for (int j = 0; j < p; ++j) {
      const int i = r * p + j;
      const T m = std::max(pa[i], std::max(pb[i], pc[i]));
      const T ea = std::exp(pa[i] - m);
      const T eb = std::exp(pb[i] - m);
      const T ec = std::exp(pc[i] - m);
      const T inv = T(1) / (ea + eb + ec);
      py[r * 3 * p + j] = ea * inv;
      py[r * 3 * p + p + j] = eb * inv;
      py[r * 3 * p + 2 * p + j] = ec * inv;
    }
  }
  return y;
}

template <typename T>
Var Tape<T>::kl_diag(Var mq, Var sq, Var mp, Var sp, T wq, T wp) {
  check_same_shape(*this, mq, sq, "kl_diag");
  check_same_shape(*this, mq, mp, "kl_diag");
  check_same_shape(*this, mq, sp, "kl_diag");
  for (T s : value(sq)) ISO_CHECK(s > T(0), "kl_diag: q std must be positive");
  for (T s : value(sp)) ISO_CHECK(s > T(0), "kl_diag: p std must be positive");
  Var y = push(1, 1);
  Node& nd = nodes_[y.id];
  nd.op = Op::kKlDiag;
  nd.a = mq.id;
  nd.b = sq.id;
  nd.c = mp.id;
  nd.d = sp.id;
  nd.f0 = wq;
  nd.f1 = wp;
  const T* q = cdata(mq);
  const T* qs = cdata(sq);
  const T* pm = cdata(mp);
  const T* ps = cdata(sp);
  T acc = 0;
  for (int i = 0; i < size(mq); ++i) {
    const T dm = q[i] - pm[i];
    acc += std::log(ps[i] / qs[i]) +
           (qs[i] * qs[i] + dm * dm) / (T(2) * ps[i] * ps[i]) - T(0.5);
  }
  data(y)[0] = acc;
  return y;
}

template <typename T>
Var Tape<T>::bce_logits(Var logits, Var labels) {
  check_same_shape(*this, logits, labels, "bce_logits");
  Var y = push(1, 1);
  Node& nd = nodes_[y.id];
  nd.op = Op::kBceLogits;
  nd.a = logits.id;
  nd.b = labels.id;
  const T* px = cdata(logits);
  const T* pl = cdata(labels);
  T acc = 0;
  for (int i = 0; i < size(logits); ++i) {
    acc += stable_softplus(px[i]) - pl[i] * px[i];
  }
  data(y)[0] = acc;
  return y;
}

template <typename T>
Var Tape<T>::st_gate(Var x, T threshold_logit) {
  Var y = push(rows(x), cols(x));
  Node& nd = nodes_[y.id];
  nd.op = Op::kStGate;
  nd.a = x.id;
  nd.f0 = threshold_logit;
  const T* px = cdata(x);
  T* py = data(y);
  for (int i = 0; i < size(y); ++i) {
    py[i] = px[i] >= threshold_logit ? T(1) : T(0);
  }
  return y;
}

template <typename T>
Var Tape<T>::conv2d(Var x, Var W, Var b, int cin, int h, int w, int k,
                    int stride, int pad) {
  const int n = rows(x);
  ISO_CHECK(cols(x) == cin * h * w, "conv2d: input spatial size mismatch");
  ISO_CHECK(cols(W) == cin * k * k, "conv2d: weight width mismatch");
  const int cout = rows(W);
  if (b.valid()) ISO_CHECK(rows(b) == 1 && cols(b) == cout, "conv2d: bias shape");
  const int oh = conv_out(h, k, stride, pad);
  const int ow = conv_out(w, k, stride, pad);
  ISO_CHECK(oh > 0 && ow > 0, "conv2d: empty output");
  Var y = push(n, cout * oh * ow);
  Node& nd = nodes_[y.id];
  nd.op = Op::kConv2d;
  nd.a = x.id;
  nd.b = W.id;
  nd.c = b.valid() ? b.id : -1;
  nd.i0 = cin; nd.i1 = h; nd.i2 = w; nd.i3 = k; nd.i4 = stride; nd.i5 = pad;

  const int ckk = cin * k * k;
  const int ohw = oh * ow;
  scratch_a_.assign(static_cast<size_t>(ckk) * n * ohw, T(0));
  for (int i = 0; i < n; ++i) {
    im2col(cdata(x) + static_cast<size_t>(i) * cin * h * w, cin, h, w, k,
           stride, pad, scratch_a_.data() + static_cast<size_t>(i) * ohw,
           n * ohw);
  }
  scratch_b_.assign(static_cast<size_t>(cout) * n * ohw, T(0));
  Map<T>(scratch_b_.data(), cout, n * ohw).noalias() =
      CMap<T>(cdata(W), cout, ckk) * CMap<T>(scratch_a_.data(), ckk, n * ohw);
  T* py = data(y);
  const T* pb = b.valid() ? cdata(b) : nullptr;
  for (int i = 0; i < n; ++i) {
    for (int co = 0; co < cout; ++co) {
      const T* src = scratch_b_.data() + static_cast<size_t>(co) * n * ohw +
                     static_cast<size_t>(i) * ohw;
      T* dst = py + static_cast<size_t>(i) * cout * ohw +
               static_cast<size_t>(co) * ohw;
      if (pb) {
        const T bias = pb[co];
        for (int j = 0; j < ohw; ++j) dst[j] = src[j] + bias;
      } else {
        std::memcpy(dst, src, sizeof(T) * ohw);
      }
    }
  }
  return y;
}

template <typename T>
Var Tape<T>::deconv2d(Var x, Var W, Var b, int cin, int h, int w, int cout,
                      int k, int stride, int pad) {
  const int n = rows(x);
  ISO_CHECK(cols(x) == cin * h * w, "deconv2d: input spatial size mismatch");
  ISO_CHECK(rows(W) == cin && cols(W) == cout * k * k,
            "deconv2d: weight shape mismatch");
  const int oh = (h - 1) * stride - 2 * pad + k;
  const int ow = (w - 1) * stride - 2 * pad + k;
  ISO_CHECK(oh > 0 && ow > 0, "deconv2d: empty output");
  if (b.valid()) ISO_CHECK(rows(b) == 1 && cols(b) == cout, "deconv2d: bias shape");
  Var y = push(n, cout * oh * ow);
  Node& nd = nodes_[y.id];
  nd.op = Op::kDeconv2d;
  nd.a = x.id;
  nd.b = W.id;
  nd.c = b.valid() ? b.id : -1;
  nd.i0 = cin; nd.i1 = h; nd.i2 = w; nd.i3 = k; nd.i4 = stride; nd.i5 = pad;

  const int ckk = cout * k * k;
  const int hw = h * w;
  // X_all[cin, n*hw]
  scratch_a_.assign(static_cast<size_t>(cin) * n * hw, T(0));
  for (int i = 0; i < n; ++i) {
    const T* src = cdata(x) + static_cast<size_t>(i) * cin * hw;
    for (int ci = 0; ci < cin; ++ci) {
      std::memcpy(scratch_a_.data() + static_cast<size_t>(ci) * n * hw +
                      static_cast<size_t>(i) * hw,
                  src + static_cast<size_t>(ci) * hw, sizeof(T) * hw);
    }
  }
  scratch_b_.assign(static_cast<size_t>(ckk) * n * hw, T(0));
  Map<T>(scratch_b_.data(), ckk, n * hw).noalias() =
      CMap<T>(cdata(W), cin, ckk).transpose() * CMap<T>(scratch_a_.data(), cin, n * hw);
  T* py = data(y);
  const T* pb = b.valid() ? cdata(b) : nullptr;
  for (int i = 0; i < n; ++i) {
    T* img = py + static_cast<size_t>(i) * cout * oh * ow;
    col2im_add(scratch_b_.data() + static_cast<size_t>(i) * hw, n * hw, cout,
               oh, ow, k, stride, pad, img);
    if (pb) {
      for (int co = 0; co < cout; ++co) {
        const T bias = pb[co];
        T* ch = img + static_cast<size_t>(co) * oh * ow;
        for (int j = 0; j < oh * ow; ++j) ch[j] += bias;
      }
    }
  }
  return y;
}

// ---- backward ----------------------------------------------------------------

template <typename T>
void Tape<T>::backward(Var loss, GradSink<T>& sink) {
  ISO_CHECK(size(loss) == 1, "backward: loss must be scalar");
  adjs_.assign(vals_.size(), T(0));
  adj(loss)[0] = T(1);

  for (int idx = loss.id; idx >= 0; --idx) {
    const Node& nd = nodes_[idx];
    const T* g = adjs_.data() + nd.off;
    const int n = nd.rows, c = nd.cols;
    const int sz = n * c;
    switch (nd.op) {
      case Op::kConst:
      case Op::kParamFrozen:
        break;
      case Op::kParam: {
        const ParamTensor<T>& p = *param_refs_[nd.pref];
        auto& slot = sink.slot(p);
        for (int i = 0; i < sz; ++i) slot[i] += g[i];
        break;
      }
      case Op::kLinear: {
        const Node& xn = nodes_[nd.a];
        const Node& wn = nodes_[nd.b];
        const int k = xn.cols, m = wn.rows;
        CMap<T> gy(g, n, m);
        Map<T>(adjs_.data() + xn.off, n, k).noalias() +=
            gy * CMap<T>(vals_.data() + wn.off, m, k);
        Map<T>(adjs_.data() + wn.off, m, k).noalias() +=
            gy.transpose() * CMap<T>(vals_.data() + xn.off, n, k);
        if (nd.c >= 0) {
          T* gb = adjs_.data() + nodes_[nd.c].off;
          for (int r = 0; r < n; ++r) {
            for (int j = 0; j < m; ++j) gb[j] += g[r * m + j];
          }
        }
        break;
      }
      case Op::kMatmulNT: {
        const Node& an = nodes_[nd.a];
        const Node& bn = nodes_[nd.b];
        const int k = an.cols, m = bn.rows;
        CMap<T> gy(g, n, m);
        Map<T>(adjs_.data() + an.off, n, k).noalias() +=
            gy * CMap<T>(vals_.data() + bn.off, m, k);
        Map<T>(adjs_.data() + bn.off, m, k).noalias() +=
            gy.transpose() * CMap<T>(vals_.data() + an.off, n, k);
        break;
      }
      case Op::kMatmulNN: {
        const Node& an = nodes_[nd.a];
        const Node& bn = nodes_[nd.b];
        const int k = an.cols, m = bn.cols;
        CMap<T> gy(g, n, m);
        Map<T>(adjs_.data() + an.off, n, k).noalias() +=
            gy * CMap<T>(vals_.data() + bn.off, k, m).transpose();
        Map<T>(adjs_.data() + bn.off, k, m).noalias() +=
            CMap<T>(vals_.data() + an.off, n, k).transpose() * gy;
        break;
      }
      case Op::kAdd: {
        T* ga = adjs_.data() + nodes_[nd.a].off;
        T* gb = adjs_.data() + nodes_[nd.b].off;
        for (int i = 0; i < sz; ++i) {
          ga[i] += g[i];
          gb[i] += g[i];
        }
        break;
      }
      case Op::kSub: {
        T* ga = adjs_.data() + nodes_[nd.a].off;
        T* gb = adjs_.data() + nodes_[nd.b].off;
        for (int i = 0; i < sz; ++i) {
          ga[i] += g[i];
          gb[i] -= g[i];
        }
        break;
      }
      case Op::kMul: {
        T* ga = adjs_.data() + nodes_[nd.a].off;
        T* gb = adjs_.data() + nodes_[nd.b].off;
        const T* va = vals_.data() + nodes_[nd.a].off;
        const T* vb = vals_.data() + nodes_[nd.b].off;
        for (int i = 0; i < sz; ++i) {
          ga[i] += g[i] * vb[i];
          gb[i] += g[i] * va[i];
        }
        break;
      }
      case Op::kAffineConst: {
        T* ga = adjs_.data() + nodes_[nd.a].off;
        for (int i = 0; i < sz; ++i) ga[i] += nd.f0 * g[i];
        break;
      }
      case Op::kSigmoid: {
        T* ga = adjs_.data() + nodes_[nd.a].off;
        const T* y = vals_.data() + nd.off;
        for (int i = 0; i < sz; ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
        break;
      }
      case Op::kTanh: {
        T* ga = adjs_.data() + nodes_[nd.a].off;
        const T* y = vals_.data() + nd.off;
        for (int i = 0; i < sz; ++i) ga[i] += g[i] * (T(1) - y[i] * y[i]);
        break;
      }
      case Op::kElu: {
        T* ga = adjs_.data() + nodes_[nd.a].off;
        const T* x = vals_.data() + nodes_[nd.a].off;
        const T* y = vals_.data() + nd.off;
        for (int i = 0; i < sz; ++i) {
          ga[i] += g[i] * (x[i] > T(0) ? T(1) : y[i] + T(1));
        }
        break;
      }
      case Op::kRelu: {
        T* ga = adjs_.data() + nodes_[nd.a].off;
        const T* x = vals_.data() + nodes_[nd.a].off;
        for (int i = 0; i < sz; ++i) {
          if (x[i] > T(0)) ga[i] += g[i];
        }
        break;
      }
      case Op::kSoftplusFloor: {
        T* ga = adjs_.data() + nodes_[nd.a].off;
        const T* x = vals_.data() + nodes_[nd.a].off;
        for (int i = 0; i < sz; ++i) ga[i] += g[i] * stable_sigmoid(x[i]);
        break;
      }
      case Op::kLog: {
        T* ga = adjs_.data() + nodes_[nd.a].off;
        const T* x = vals_.data() + nodes_[nd.a].off;
        for (int i = 0; i < sz; ++i) ga[i] += g[i] / x[i];
        break;
      }
      case Op::kConcatCols: {
        int c0 = 0;
        for (int pi = 0; pi < nd.i1; ++pi) {
          const Node& pn = nodes_[ipool_[nd.i0 + pi]];
          T* gp = adjs_.data() + pn.off;
          for (int r = 0; r < n; ++r) {
            const T* gr = g + r * c + c0;
            T* pr = gp + r * pn.cols;
            for (int j = 0; j < pn.cols; ++j) pr[j] += gr[j];
          }
          c0 += pn.cols;
        }
        break;
      }
      case Op::kSliceCols: {
        const Node& an = nodes_[nd.a];
        T* ga = adjs_.data() + an.off;
        for (int r = 0; r < n; ++r) {
          for (int j = 0; j < c; ++j) {
            ga[r * an.cols + nd.i0 + j] += g[r * c + j];
          }
        }
        break;
      }
      case Op::kSliceRows: {
        const Node& an = nodes_[nd.a];
        T* ga = adjs_.data() + an.off + static_cast<size_t>(nd.i0) * c;
        for (int i = 0; i < sz; ++i) ga[i] += g[i];
        break;
      }
      case Op::kStackRows: {
        int r0 = 0;
        for (int pi = 0; pi < nd.i1; ++pi) {
          const Node& pn = nodes_[ipool_[nd.i0 + pi]];
          T* gp = adjs_.data() + pn.off;
          const T* gr = g + static_cast<size_t>(r0) * c;
          for (int i = 0; i < pn.rows * c; ++i) gp[i] += gr[i];
          r0 += pn.rows;
        }
        break;
      }
      case Op::kMulRowBcast: {
        const Node& xn = nodes_[nd.a];
        T* gx = adjs_.data() + xn.off;
        T* gs = adjs_.data() + nodes_[nd.b].off;
        const T* x = vals_.data() + xn.off;
        const T* s = vals_.data() + nodes_[nd.b].off;
        for (int r = 0; r < n; ++r) {
          T acc = 0;
          for (int j = 0; j < c; ++j) {
            gx[r * c + j] += g[r * c + j] * s[r];
            acc += g[r * c + j] * x[r * c + j];
          }
          gs[r] += acc;
        }
        break;
      }
      case Op::kSubRowBcast: {
        T* gx = adjs_.data() + nodes_[nd.a].off;
        T* gm = adjs_.data() + nodes_[nd.b].off;
        for (int r = 0; r < n; ++r) {
          for (int j = 0; j < c; ++j) {
            gx[r * c + j] += g[r * c + j];
            gm[j] -= g[r * c + j];
          }
        }
        break;
      }
      case Op::kMulChanBcast: {
        const Node& mn = nodes_[nd.b];
        const int p = mn.cols, ch = nd.i0;
        T* gx = adjs_.data() + nodes_[nd.a].off;
        T* gm = adjs_.data() + mn.off;
        const T* x = vals_.data() + nodes_[nd.a].off;
        const T* m = vals_.data() + mn.off;
        for (int r = 0; r < n; ++r) {
          for (int q = 0; q < ch; ++q) {
            const int base = r * c + q * p;
            for (int j = 0; j < p; ++j) {
              gx[base + j] += g[base + j] * m[r * p + j];
              gm[r * p + j] += g[base + j] * x[base + j];
            }
          }
        }
        break;
      }
      case Op::kRowDot: {
        const Node& an = nodes_[nd.a];
        const int ac = an.cols;
        T* ga = adjs_.data() + an.off;
        T* gb = adjs_.data() + nodes_[nd.b].off;
        const T* va = vals_.data() + an.off;
        const T* vb = vals_.data() + nodes_[nd.b].off;
        for (int r = 0; r < n; ++r) {
          const T gr = g[r];
          for (int j = 0; j < ac; ++j) {
            ga[r * ac + j] += gr * vb[r * ac + j];
            gb[r * ac + j] += gr * va[r * ac + j];
          }
        }
        break;
      }
      case Op::kSumAll: {
        const Node& an = nodes_[nd.a];
        T* ga = adjs_.data() + an.off;
        const T gv = g[0];
        for (int i = 0; i < an.rows * an.cols; ++i) ga[i] += gv;
        break;
      }
      case Op::kSumSq: {
        const Node& an = nodes_[nd.a];
        T* ga = adjs_.data() + an.off;
        const T* va = vals_.data() + an.off;
        const T gv = T(2) * g[0];
        for (int i = 0; i < an.rows * an.cols; ++i) ga[i] += gv * va[i];
        break;
      }
      case Op::kSqErr: {
        const Node& an = nodes_[nd.a];
        T* ga = adjs_.data() + an.off;
        T* gb = adjs_.data() + nodes_[nd.b].off;
        const T* va = vals_.data() + an.off;
        const T* vb = vals_.data() + nodes_[nd.b].off;
        const T gv = T(2) * g[0];
        for (int i = 0; i < an.rows * an.cols; ++i) {
          const T d = gv * (va[i] - vb[i]);
          ga[i] += d;
          gb[i] -= d;
        }
        break;
      }
      case Op::kMeanRows: {
        const Node& an = nodes_[nd.a];
        T* ga = adjs_.data() + an.off;
        const T inv = T(1) / T(an.rows);
        for (int r = 0; r < an.rows; ++r) {
          for (int j = 0; j < c; ++j) ga[r * c + j] += g[j] * inv;
        }
        break;
      }
      case Op::kRowSoftmax: {
        T* ga = adjs_.data() + nodes_[nd.a].off;
        const T* y = vals_.data() + nd.off;
        for (int r = 0; r < n; ++r) {
          const T* yr = y + r * c;
          const T* gr = g + r * c;
          T dot = 0;
          for (int j = 0; j < c; ++j) dot += gr[j] * yr[j];
          for (int j = 0; j < c; ++j) ga[r * c + j] += yr[j] * (gr[j] - dot);
        }
        break;
      }
      case Op::kSoftmax3: {
        const Node& an = nodes_[nd.a];
        const int p = an.cols;
        T* gl[3] = {adjs_.data() + nodes_[nd.a].off,
                    adjs_.data() + nodes_[nd.b].off,
                    adjs_.data() + nodes_[nd.c].off};
        const T* y = vals_.data() + nd.off;
        for (int r = 0; r < n; ++r) {
          for (int j = 0; j < p; ++j) {
            const T ys[3] = {y[r * 3 * p + j], y[r * 3 * p + p + j],
                             y[r * 3 * p + 2 * p + j]};
            const T gs[3] = {g[r * 3 * p + j], g[r * 3 * p + p + j],
                             g[r * 3 * p + 2 * p + j]};
            const T dot = gs[0] * ys[0] + gs[1] * ys[1] + gs[2] * ys[2];
            for (int q = 0; q < 3; ++q) {
              gl[q][r * p + j] += ys[q] * (gs[q] - dot);
            }
          }
        }
        break;
      }
      case Op::kKlDiag: {
        const Node& an = nodes_[nd.a];
        const int m = an.rows * an.cols;
        T* gmq = adjs_.data() + nodes_[nd.a].off;
        T* gsq = adjs_.data() + nodes_[nd.b].off;
        T* gmp = adjs_.data() + nodes_[nd.c].off;
        T* gsp = adjs_.data() + nodes_[nd.d].off;
        const T* q = vals_.data() + nodes_[nd.a].off;
        const T* qs = vals_.data() + nodes_[nd.b].off;
        const T* pm = vals_.data() + nodes_[nd.c].off;
        const T* ps = vals_.data() + nodes_[nd.d].off;
        const T gv = g[0];
        for (int i = 0; i < m; ++i) {
          const T dm = q[i] - pm[i];
          const T isp2 = T(1) / (ps[i] * ps[i]);
          gmq[i] += gv * nd.f0 * dm * isp2;
          gsq[i] += gv * nd.f0 * (qs[i] * isp2 - T(1) / qs[i]);
          gmp[i] -= gv * nd.f1 * dm * isp2;
          gsp[i] += gv * nd.f1 *
                    (T(1) / ps[i] - (qs[i] * qs[i] + dm * dm) * isp2 / ps[i]);
        }
        break;
      }
      case Op::kBceLogits: {
        const Node& an = nodes_[nd.a];
        const int m = an.rows * an.cols;
        T* gx = adjs_.data() + an.off;
        const T* x = vals_.data() + an.off;
        const T* l = vals_.data() + nodes_[nd.b].off;
        const T gv = g[0];
        for (int i = 0; i < m; ++i) {
          gx[i] += gv * (stable_sigmoid(x[i]) - l[i]);
        }
        break;
      }
      case Op::kStGate: {
        T* gx = adjs_.data() + nodes_[nd.a].off;
        const T* x = vals_.data() + nodes_[nd.a].off;
        for (int i = 0; i < sz; ++i) {
          const T s = stable_sigmoid(x[i]);
          gx[i] += g[i] * s * (T(1) - s);
        }
        break;
      }
      case Op::kConv2d: {
        const Node& xn = nodes_[nd.a];
        const Node& wn = nodes_[nd.b];
        const int cin = nd.i0, h = nd.i1, w = nd.i2, k = nd.i3, st = nd.i4,
                  pd = nd.i5;
        const int cout = wn.rows;
        const int oh = conv_out(h, k, st, pd), ow = conv_out(w, k, st, pd);
        const int ckk = cin * k * k, ohw = oh * ow;
        // dY_all [cout, n*ohw]
        scratch_b_.assign(static_cast<size_t>(cout) * n * ohw, T(0));
        for (int i = 0; i < n; ++i) {
          for (int co = 0; co < cout; ++co) {
            std::memcpy(scratch_b_.data() + static_cast<size_t>(co) * n * ohw +
                            static_cast<size_t>(i) * ohw,
                        g + static_cast<size_t>(i) * cout * ohw +
                            static_cast<size_t>(co) * ohw,
                        sizeof(T) * ohw);
          }
        }
        // col_all recomputed
        scratch_a_.assign(static_cast<size_t>(ckk) * n * ohw, T(0));
        const T* xv = vals_.data() + xn.off;
        for (int i = 0; i < n; ++i) {
          im2col(xv + static_cast<size_t>(i) * cin * h * w, cin, h, w, k, st,
                 pd, scratch_a_.data() + static_cast<size_t>(i) * ohw, n * ohw);
        }
        Map<T>(adjs_.data() + wn.off, cout, ckk).noalias() +=
            CMap<T>(scratch_b_.data(), cout, n * ohw) *
            CMap<T>(scratch_a_.data(), ckk, n * ohw).transpose();
        if (nd.c >= 0) {
          T* gb = adjs_.data() + nodes_[nd.c].off;
          for (int co = 0; co < cout; ++co) {
            const T* row = scratch_b_.data() + static_cast<size_t>(co) * n * ohw;
            T acc = 0;
            for (int j = 0; j < n * ohw; ++j) acc += row[j];
            gb[co] += acc;
          }
        }
        scratch_c_.assign(static_cast<size_t>(ckk) * n * ohw, T(0));
        Map<T>(scratch_c_.data(), ckk, n * ohw).noalias() =
            CMap<T>(vals_.data() + wn.off, cout, ckk).transpose() *
            CMap<T>(scratch_b_.data(), cout, n * ohw);
        T* gx = adjs_.data() + xn.off;
        for (int i = 0; i < n; ++i) {
          col2im_add(scratch_c_.data() + static_cast<size_t>(i) * ohw, n * ohw,
                     cin, h, w, k, st, pd,
                     gx + static_cast<size_t>(i) * cin * h * w);
        }
        break;
      }
      case Op::kDeconv2d: {
        const Node& xn = nodes_[nd.a];
        const Node& wn = nodes_[nd.b];
        const int cin = nd.i0, h = nd.i1, w = nd.i2, k = nd.i3, st = nd.i4,
                  pd = nd.i5;
        const int ckk = wn.cols;  // cout*k*k
        const int cout = ckk / (k * k);
        const int oh = (h - 1) * st - 2 * pd + k;
        const int ow = (w - 1) * st - 2 * pd + k;
        const int hw = h * w;
        // dcol_all [ckk, n*hw] = im2col of dY images
        scratch_b_.assign(static_cast<size_t>(ckk) * n * hw, T(0));
        for (int i = 0; i < n; ++i) {
          im2col(g + static_cast<size_t>(i) * cout * oh * ow, cout, oh, ow, k,
                 st, pd, scratch_b_.data() + static_cast<size_t>(i) * hw,
                 n * hw);
        }
        // X_all [cin, n*hw]
        scratch_a_.assign(static_cast<size_t>(cin) * n * hw, T(0));
        const T* xv = vals_.data() + xn.off;
        for (int i = 0; i < n; ++i) {
          for (int ci = 0; ci < cin; ++ci) {
            std::memcpy(scratch_a_.data() + static_cast<size_t>(ci) * n * hw +
                            static_cast<size_t>(i) * hw,
                        xv + static_cast<size_t>(i) * cin * hw +
                            static_cast<size_t>(ci) * hw,
                        sizeof(T) * hw);
          }
        }
        Map<T>(adjs_.data() + wn.off, cin, ckk).noalias() +=
            CMap<T>(scratch_a_.data(), cin, n * hw) *
            CMap<T>(scratch_b_.data(), ckk, n * hw).transpose();
        // dX_all = W @ dcol_all
        scratch_c_.assign(static_cast<size_t>(cin) * n * hw, T(0));
        Map<T>(scratch_c_.data(), cin, n * hw).noalias() =
            CMap<T>(vals_.data() + wn.off, cin, ckk) *
            CMap<T>(scratch_b_.data(), ckk, n * hw);
        T* gx = adjs_.data() + xn.off;
        for (int i = 0; i < n; ++i) {
          for (int ci = 0; ci < cin; ++ci) {
            const T* src = scratch_c_.data() + static_cast<size_t>(ci) * n * hw +
                           static_cast<size_t>(i) * hw;
            T* dst = gx + static_cast<size_t>(i) * cin * hw +
                     static_cast<size_t>(ci) * hw;
            for (int j = 0; j < hw; ++j) dst[j] += src[j];
          }
        }
        if (nd.c >= 0) {
          T* gb = adjs_.data() + nodes_[nd.c].off;
          for (int i = 0; i < n; ++i) {
            for (int co = 0; co < cout; ++co) {
              const T* ch = g + static_cast<size_t>(i) * cout * oh * ow +
                            static_cast<size_t>(co) * oh * ow;
              T acc = 0;
              for (int j = 0; j < oh * ow; ++j) acc += ch[j];
              gb[co] += acc;
            }
          }
        }
        break;
      }
    }
  }
  adjoints_valid_ = true;
}

// ---- spec-level helpers --------------------------------------------------------

template <typename T>
Var sample_gaussian(Tape<T>& tape, Var mean, Var stddev, std::span<const T> noise) {
  ISO_CHECK(tape.size(mean) == tape.size(stddev), "sample_gaussian: shape mismatch");
  ISO_CHECK(noise.size() == static_cast<size_t>(tape.size(mean)),
            "sample_gaussian: noise size mismatch");
  for (T s : tape.value(stddev)) {
    ISO_CHECK(s > T(0), "sample_gaussian: std must be strictly positive");
  }
  Var eps = tape.constant(noise, tape.rows(mean), tape.cols(mean));
  return tape.add(mean, tape.mul(stddev, eps));
}

template <typename T>
T gaussian_kl(std::span<const T> mean_q, std::span<const T> std_q,
              std::span<const T> mean_p, std::span<const T> std_p) {
  ISO_CHECK(mean_q.size() == std_q.size() && mean_q.size() == mean_p.size() &&
                mean_q.size() == std_p.size(),
            "gaussian_kl: shape mismatch");
  T acc = 0;
  for (size_t i = 0; i < mean_q.size(); ++i) {
    ISO_CHECK(std_q[i] > T(0) && std_p[i] > T(0),
              "gaussian_kl: std must be strictly positive");
    const T dm = mean_q[i] - mean_p[i];
    acc += std::log(std_p[i] / std_q[i]) +
           (std_q[i] * std_q[i] + dm * dm) / (T(2) * std_p[i] * std_p[i]) -
           T(0.5);
  }
  return acc;
}

template class GradSink<float>;
template class GradSink<double>;
template class Tape<float>;
template class Tape<double>;
template Var sample_gaussian<float>(Tape<float>&, Var, Var, std::span<const float>);
template Var sample_gaussian<double>(Tape<double>&, Var, Var, std::span<const double>);
template float gaussian_kl<float>(std::span<const float>, std::span<const float>,
                                  std::span<const float>, std::span<const float>);
template double gaussian_kl<double>(std::span<const double>, std::span<const double>,
                                    std::span<const double>, std::span<const double>);

}  // namespace isodream
