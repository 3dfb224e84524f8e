#include "isodream/nn.hpp"

#include <cmath>

namespace isodream {

template <typename T>
LinearLayer<T>::LinearLayer(ParamSet<T>& ps, const std::string& group,
                            const std::string& name, int in, int out, bool bias) {
  W = &ps.add(group, name + ".w", out, in);
  if (bias) b = &ps.add(group, name + ".b", 1, out);
}

template <typename T>
Var LinearLayer<T>::apply(Tape<T>& t, Var x, bool frozen) const {
  Var w = frozen ? t.param_frozen(*W) : t.param(*W);
  Var bias;
  if (b) bias = frozen ? t.param_frozen(*b) : t.param(*b);
  return t.linear(x, w, bias);
}

template <typename T>
GruCell<T>::GruCell(ParamSet<T>& ps, const std::string& group,
                    const std::string& name, int input, int hidden)
    : wr(ps, group, name + ".r", input + hidden, hidden),
      wu(ps, group, name + ".u", input + hidden, hidden),
      wc(ps, group, name + ".c", input + hidden, hidden),
      input_dim(input),
      hidden_dim(hidden) {}

template <typename T>
Var GruCell<T>::step(Tape<T>& t, Var h, Var x) const {
  ISO_CHECK(t.cols(h) == hidden_dim, "gru_step: hidden width mismatch");
  ISO_CHECK(t.cols(x) == input_dim, "gru_step: input width mismatch");
  ISO_CHECK(t.rows(h) == t.rows(x), "gru_step: row mismatch");
  const Var xh = t.concat_cols(std::array<Var, 2>{x, h});
  const Var r = t.sigmoid(wr.apply(t, xh));
  const Var u = t.sigmoid(wu.apply(t, xh));
  const Var xrh = t.concat_cols(std::array<Var, 2>{x, t.mul(r, h)});
  const Var c = t.tanh_(wc.apply(t, xrh));
  // (1-u).h + u.c
  return t.add(t.mul(t.affine_const(u, T(-1), T(1)), h), t.mul(u, c));
}

template <typename T>
Mlp<T>::Mlp(ParamSet<T>& ps, const std::string& group, const std::string& name,
            int in, int hidden, int out)
    : l1(ps, group, name + ".fc1", in, hidden),
      l2(ps, group, name + ".fc2", hidden, out) {}

template <typename T>
Var Mlp<T>::apply(Tape<T>& t, Var x, bool frozen) const {
  return l2.apply(t, t.elu(l1.apply(t, x, frozen)), frozen);
}

template <typename T>
ConvEncoder<T>::ConvEncoder(ParamSet<T>& ps, const std::string& group,
                            const std::string& name, const ConvSpec& s,
                            int feature)
    : spec(s), feature_dim(feature) {
  int cin = s.in_channels;
  for (int i = 0; i < 3; ++i) {
    const int cout = s.channels[i];
    w.push_back(&ps.add(group, name + ".conv" + std::to_string(i) + ".w", cout,
                        cin * s.kernel * s.kernel));
    b.push_back(&ps.add(group, name + ".conv" + std::to_string(i) + ".b", 1, cout));
    cin = cout;
  }
  head = LinearLayer<T>(ps, group, name + ".head", bottleneck_size(), feature);
}

template <typename T>
int ConvEncoder<T>::bottleneck_size() const {
  return spec.channels[2] * (spec.image_size / 8) * (spec.image_size / 8);
}

template <typename T>
Var ConvEncoder<T>::apply(Tape<T>& t, Var images) const {
  ISO_CHECK(t.cols(images) ==
                spec.in_channels * spec.image_size * spec.image_size,
            "conv_encode: wrong spatial size");
  Var x = images;
  int cin = spec.in_channels;
  int hw = spec.image_size;
  for (int i = 0; i < 3; ++i) {
    x = t.conv2d(x, t.param(*w[i]), t.param(*b[i]), cin, hw, hw, spec.kernel,
                 2, spec.kernel / 2);
    x = t.elu(x);
    cin = spec.channels[i];
    hw /= 2;
  }
  return head.apply(t, x);
}

template <typename T>
ConvDecoder<T>::ConvDecoder(ParamSet<T>& ps, const std::string& group,
                            const std::string& name, const ConvSpec& s,
                            int latent_dim, int out_ch)
    : spec(s), out_channels(out_ch) {
  channels = {s.channels[2], s.channels[1], s.channels[0]};
  const int base = s.image_size / 8;
  head = LinearLayer<T>(ps, group, name + ".head", latent_dim,
                        channels[0] * base * base);
  const int k = s.deconv_kernel;
  for (int i = 0; i < 3; ++i) {
    const int cin = channels[i];
    const int cout = i < 2 ? channels[i + 1] : out_channels;
    w.push_back(&ps.add(group, name + ".deconv" + std::to_string(i) + ".w",
                        cin, cout * k * k));
    b.push_back(&ps.add(group, name + ".deconv" + std::to_string(i) + ".b", 1,
                        cout));
  }
}

template <typename T>
Var ConvDecoder<T>::apply(Tape<T>& t, Var latents) const {
  const int base = spec.image_size / 8;
  Var x = t.elu(head.apply(t, latents));
  int hw = base;
  const int k = spec.deconv_kernel;
  for (int i = 0; i < 3; ++i) {
    const int cin = channels[i];
    const int cout = i < 2 ? channels[i + 1] : out_channels;
    x = t.deconv2d(x, t.param(*w[i]), t.param(*b[i]), cin, hw, hw, cout, k, 2,
                   (k - 2) / 2);
    if (i < 2) x = t.elu(x);
    hw *= 2;
  }
  return x;
}

template <typename T>
AdamOptimizer<T>::AdamOptimizer(std::vector<ParamTensor<T>*> params, double lr,
                                double clip_norm, double beta1, double beta2,
                                double eps)
    : params_(std::move(params)),
      lr_(lr),
      clip_(clip_norm),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i]->size(), T(0));
    v_[i].assign(params_[i]->size(), T(0));
  }
}

template <typename T>
void AdamOptimizer<T>::zero_grads() {
  for (auto* p : params_) p->zero_grad();
}

template <typename T>
void AdamOptimizer<T>::step() {
  double norm_sq = 0.0;
  for (auto* p : params_) {
    for (T g : p->grad) norm_sq += static_cast<double>(g) * g;
  }
  last_grad_norm_ = std::sqrt(norm_sq);
  double scale = 1.0;
  if (clip_ > 0.0 && last_grad_norm_ > clip_) {
    scale = clip_ / last_grad_norm_;
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (size_t i = 0; i < params_.size(); ++i) {
    auto* p = params_[i];
    auto& m = m_[i];
    auto& v = v_[i];
    for (int j = 0; j < p->size(); ++j) {
      const double g = static_cast<double>(p->grad[j]) * scale;
      m[j] = static_cast<T>(beta1_ * m[j] + (1.0 - beta1_) * g);
      v[j] = static_cast<T>(beta2_ * v[j] + (1.0 - beta2_) * g * g);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p->value[j] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

template struct LinearLayer<float>;
template struct LinearLayer<double>;
template struct GruCell<float>;
template struct GruCell<double>;
template struct Mlp<float>;
template struct Mlp<double>;
template struct ConvEncoder<float>;
template struct ConvEncoder<double>;
template struct ConvDecoder<float>;
template struct ConvDecoder<double>;
template class AdamOptimizer<float>;
template class AdamOptimizer<double>;

}  // namespace isodream
