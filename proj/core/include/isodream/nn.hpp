#pragma once

#include <string>
#include <vector>

#include "isodream/params.hpp"
#include "isodream/tape.hpp"

namespace isodream {

// Thin layer wrappers; each registers its tensors in a ParamSet group at
// construction and applies itself onto a tape. `frozen` applies the current
// weights without routing gradients to them.

template <typename T>
struct LinearLayer {
  ParamTensor<T>* W = nullptr;
  ParamTensor<T>* b = nullptr;

  LinearLayer() = default;
  LinearLayer(ParamSet<T>& ps, const std::string& group, const std::string& name,
              int in, int out, bool bias = true);
  Var apply(Tape<T>& t, Var x, bool frozen = false) const;
};

// Gated recurrent unit:
//   r = sigmoid(W_r [x,h] + b_r)
//   u = sigmoid(W_u [x,h] + b_u)
//   c = tanh(W_c [x, r.h] + b_c)
//   h' = (1-u).h + u.c
template <typename T>
struct GruCell {
  LinearLayer<T> wr, wu, wc;
  int input_dim = 0, hidden_dim = 0;

  GruCell() = default;
  GruCell(ParamSet<T>& ps, const std::string& group, const std::string& name,
          int input, int hidden);
  Var step(Tape<T>& t, Var h, Var x) const;
};

// Two-layer perceptron with ELU hidden activation.
template <typename T>
struct Mlp {
  LinearLayer<T> l1, l2;

  Mlp() = default;
  Mlp(ParamSet<T>& ps, const std::string& group, const std::string& name,
      int in, int hidden, int out);
  Var apply(Tape<T>& t, Var x, bool frozen = false) const;
};

struct ConvSpec {
  int image_size = 32;
  int in_channels = 3;
  std::array<int, 3> channels{8, 16, 24};
  int kernel = 3;         // encoder kernel (stride 2)
  int deconv_kernel = 4;  // decoder kernel (stride 2)
};

// Three stride-2 conv stages followed by a linear projection to a flat
// feature vector. Input rows are flattened [3*H*W] images.
template <typename T>
struct ConvEncoder {
  std::vector<ParamTensor<T>*> w, b;
  LinearLayer<T> head;
  ConvSpec spec;
  int feature_dim = 0;

  ConvEncoder() = default;
  ConvEncoder(ParamSet<T>& ps, const std::string& group, const std::string& name,
              const ConvSpec& spec, int feature_dim);
  Var apply(Tape<T>& t, Var images) const;
  int bottleneck_size() const;
};

// Mirror of the encoder: linear from a latent vector to the bottleneck, then
// three stride-2 transposed-conv stages to [out_channels*H*W].
template <typename T>
struct ConvDecoder {
  LinearLayer<T> head;
  std::vector<ParamTensor<T>*> w, b;
  ConvSpec spec;
  std::array<int, 3> channels{24, 16, 8};
  int out_channels = 4;

  ConvDecoder() = default;
  ConvDecoder(ParamSet<T>& ps, const std::string& group, const std::string& name,
              const ConvSpec& spec, int latent_dim, int out_channels);
  Var apply(Tape<T>& t, Var latents) const;
};

// Adam with bias correction and a global-norm gradient clip over the owned
// tensors. Owns no tensors; steps whatever grads are in them.
template <typename T>
class AdamOptimizer {
 public:
  AdamOptimizer() = default;
  AdamOptimizer(std::vector<ParamTensor<T>*> params, double lr,
                double clip_norm, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

  void step();
  void zero_grads();
  double last_grad_norm() const { return last_grad_norm_; }
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  const std::vector<ParamTensor<T>*>& params() const { return params_; }

 private:
  std::vector<ParamTensor<T>*> params_;
  std::vector<std::vector<T>> m_, v_;
  double lr_ = 1e-3, clip_ = 0.0, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  double last_grad_norm_ = 0.0;
};

extern template struct LinearLayer<float>;
extern template struct LinearLayer<double>;
extern template struct GruCell<float>;
extern template struct GruCell<double>;
extern template struct Mlp<float>;
extern template struct Mlp<double>;
extern template struct ConvEncoder<float>;
extern template struct ConvEncoder<double>;
extern template struct ConvDecoder<float>;
extern template struct ConvDecoder<double>;
extern template class AdamOptimizer<float>;
extern template class AdamOptimizer<double>;

}  // namespace isodream
