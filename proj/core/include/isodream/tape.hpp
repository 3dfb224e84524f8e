#pragma once

#include <span>
#include <utility>
#include <vector>

#include "isodream/common.hpp"
#include "isodream/params.hpp"

namespace isodream {

// Handle into a Tape. Only valid for the tape that produced it, until the
// next clear().
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Accumulates per-parameter gradients for one forward/backward pass. Each
// batch element gets its own sink; the trainer reduces sinks in element
// order, which keeps batched gradients bit-deterministic under threading.
template <typename T>
class GradSink {
 public:
  void resize(int param_count) { slots_.resize(param_count); }
  void clear();
  std::vector<T>& slot(const ParamTensor<T>& p);
  const std::vector<T>* peek(int param_id) const;
  const std::vector<int>& touched() const { return touched_; }

  // Adds every touched slot into the persistent grad buffers, each exactly
  // once per call.
  void flush_into_params(ParamSet<T>& params) const;

 private:
  std::vector<std::vector<T>> slots_;
  std::vector<int> touched_;
};

// Reverse-mode tape over dense row-major buffers.
//
// A value is logically [rows, cols]: `rows` batches a vector-valued quantity,
// e.g. time steps, imagination starts or hypothetical actions. Images are
// carried as rows of flattened C*H*W data; convolution nodes keep their own
// geometry. Elementwise nodes ignore the split entirely.
//
// One tape is confined to a single thread for its forward and backward pass.
// backward() visits each recorded node exactly once, in reverse order.
template <typename T>
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void clear();

  // -- leaves ---------------------------------------------------------------
  Var constant(std::span<const T> data, int rows, int cols);
  Var scalar(T v) { return constant(std::span<const T>(&v, 1), 1, 1); }
  Var zeros(int rows, int cols);
  // Trainable leaf; gradients flow to the sink passed to backward(). The
  // same tensor maps to the same Var for the lifetime of the tape.
  Var param(const ParamTensor<T>& p);
  // Leaf using the tensor's current value but receiving no gradient
  // (e.g. the critic applied inside the actor objective).
  Var param_frozen(const ParamTensor<T>& p);

  // -- dense algebra ----------------------------------------------------------
  // y = x * W^T + b, with W:[out,in], b:[1,out] (b may be invalid for none).
  Var linear(Var x, Var W, Var b);
  Var matmul_nt(Var a, Var b);  // [n,k] x [m,k]^T -> [n,m]
  Var matmul_nn(Var a, Var b);  // [n,k] x [k,m]   -> [n,m]

  // -- elementwise ------------------------------------------------------------
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var affine_const(Var a, T alpha, T beta);  // alpha*a + beta
  Var scale(Var a, T alpha) { return affine_const(a, alpha, T(0)); }
  Var sigmoid(Var a);
  Var tanh_(Var a);
  Var elu(Var a);
  Var relu(Var a);
  Var softplus_floor(Var a, T floor);  // log1p(exp(a)) + floor
  Var log_(Var a);

  // -- shape ------------------------------------------------------------------
  Var concat_cols(std::span<const Var> parts);
  Var slice_cols(Var a, int col0, int ncols);
  Var slice_rows(Var a, int row0, int nrows);
  Var stack_rows(std::span<const Var> parts);

  // -- broadcast / reductions ---------------------------------------------------
  Var mul_rowbcast(Var x, Var s);     // x:[n,c] * s:[n,1]
  Var sub_rowbcast(Var x, Var m);     // x:[n,c] - m:[1,c]
  Var mul_chanbcast(Var rgb, Var m, int channels);  // rgb:[n,ch*p] * m:[n,p]
  Var rowdot(Var a, Var b);           // [n,c],[n,c] -> [n,1]
  Var sum_all(Var a);                 // -> [1,1]
  Var sum_sq(Var a);                  // sum(a^2) -> [1,1]
  Var sq_err(Var a, Var b);           // sum((a-b)^2) -> [1,1]
  Var mean_rows(Var a);               // [n,c] -> [1,c]
  Var row_softmax(Var a);             // softmax over cols, per row

  // -- model-specific nodes -----------------------------------------------------
  // Per-element softmax over three logit maps; output layout [n, 3*p] as
  // [mask_a | mask_b | mask_c] blocks.
  Var softmax3(Var la, Var lb, Var lc);
  // Diagonal-Gaussian KL(q||p) summed over all entries, with DreamerV2-style
  // gradient balancing: q-side partials scaled by wq, p-side by wp. Values
  // are exact regardless of the weights.
  Var kl_diag(Var mq, Var sq, Var mp, Var sp, T wq, T wp);
  // Bernoulli NLL with logits, summed; labels are constants in [0,1].
  Var bce_logits(Var logits, Var labels);
  // Hard threshold 1[x >= t] with straight-through sigmoid backward.
  Var st_gate(Var x, T threshold_logit);

  // conv with stride/pad over rows of [cin*h*w]; weight [cout, cin*k*k].
  Var conv2d(Var x, Var W, Var b, int cin, int h, int w, int k, int stride, int pad);
  // transposed conv; weight [cin, cout*k*k]; output [n, cout*oh*ow] with
  // oh = (h-1)*stride - 2*pad + k.
  Var deconv2d(Var x, Var W, Var b, int cin, int h, int w, int cout, int k,
               int stride, int pad);

  // -- access -------------------------------------------------------------------
  int rows(Var v) const;
  int cols(Var v) const;
  int size(Var v) const { return rows(v) * cols(v); }
  std::span<const T> value(Var v) const;
  std::vector<T> value_copy(Var v) const;
  T scalar_value(Var v) const;
  bool all_finite(Var v) const;

  // Backward from a scalar loss; parameter gradients land in `sink`.
  // Gradients of intermediate nodes are freshly zeroed each call.
  void backward(Var loss, GradSink<T>& sink);
  // Adjoint of a leaf/input observed during the latest backward().
  std::span<const T> adjoint(Var v) const;

  size_t node_count() const;

 private:
  struct Node;
  Var push(int rows, int cols);
  T* data(Var v);
  const T* cdata(Var v) const;
  T* adj(Var v);

  std::vector<Node> nodes_;
  std::vector<T> vals_;
  std::vector<T> adjs_;
  std::vector<int> ipool_;   // child lists for variadic nodes
  std::vector<const ParamTensor<T>*> param_refs_;
  std::vector<std::pair<const ParamTensor<T>*, int>> param_vars_;  // cache
  std::vector<T> scratch_a_, scratch_b_, scratch_c_;  // conv workspaces
  bool adjoints_valid_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;
extern template class GradSink<float>;
extern template class GradSink<double>;

// ---- spec-level diffcore helpers ---------------------------------------------

// mean + std .* noise with reparameterized gradients (none into noise).
// std must be strictly positive.
template <typename T>
Var sample_gaussian(Tape<T>& tape, Var mean, Var stddev, std::span<const T> noise);

// Closed-form diagonal-Gaussian KL(q||p) as a plain number.
template <typename T>
T gaussian_kl(std::span<const T> mean_q, std::span<const T> std_q,
              std::span<const T> mean_p, std::span<const T> std_p);

extern template Var sample_gaussian<float>(Tape<float>&, Var, Var, std::span<const float>);
extern template Var sample_gaussian<double>(Tape<double>&, Var, Var, std::span<const double>);
extern template float gaussian_kl<float>(std::span<const float>, std::span<const float>,
                                         std::span<const float>, std::span<const float>);
extern template double gaussian_kl<double>(std::span<const double>, std::span<const double>,
                                           std::span<const double>, std::span<const double>);

}  // namespace isodream
