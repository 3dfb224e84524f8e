#pragma once

#include <span>
#include <vector>

#include "isodream/config.hpp"
#include "isodream/nn.hpp"
#include "isodream/replay_buffer.hpp"

namespace isodream {

enum class GateMode {
  kHard,  // 1[sigmoid(f) >= threshold], straight-through backward
  kSoft,  // sigmoid(f); used by finite-difference verification
};

// Unbiased empirical variance (1/(n-1)), the diversity measure applied to
// the hypothetical-action transition sets.
template <typename T>
T unbiased_variance(std::span<const T> samples);

// Three-branch world model: an action-conditioned recurrent branch, an
// action-free recurrent branch joined to it through a binary dependency gate,
// and a static branch. Reconstruction composes the three decoders under a
// per-pixel softmax mask. The action-conditioned component is decoded from
// the one-step prior, the action-free component from the posterior, so only
// action-predictable content survives in the controllable branch.
template <typename T>
class WorldModel {
 public:
  WorldModel(const WMConfig& cfg, ParamSet<T>& params, int action_dim = kActionDim);

  const WMConfig& config() const { return cfg_; }
  int action_dim() const { return action_dim_; }
  int feature_dim() const { return cfg_.branch_feature_dim(); }

  // One branch's recurrent state on a tape. feat = [h, sample].
  struct Branch {
    Var h, mean, stddev, sample, feat;
  };

  Var encode(Tape<T>& t, Var obs) const;  // [n, 3HW] -> [n, F]
  Branch initial_branch(Tape<T>& t, int n) const;

  Var static_code(Tape<T>& t, Var frames) const;                // [K,3HW] -> [1,d_b]
  Var static_code_from_features(Tape<T>& t, Var feats) const;   // [K,F]   -> [1,d_b]

  Branch prior_step_controllable(Tape<T>& t, const Branch& prev, Var action,
                                 std::span<const T> noise) const;
  // Raw gate activation f(concat(feat_s, feat_z)); one fully connected layer.
  Var gate_logit(Tape<T>& t, Var feat_s, Var feat_z) const;
  Var gate_value(Tape<T>& t, Var logit, GateMode mode) const;
  // h' consumes [z_prev, action, gated_s]; pass a zero action outside world
  // model training and a zero gated_s when the gate is closed by convention.
  Branch prior_step_free(Tape<T>& t, const Branch& prev, Var action, Var gated_s,
                         std::span<const T> noise) const;

  struct PosteriorStep {
    Branch ctrl, free;  // posterior states
    Branch ctrl_prior;  // prior stats and sample sharing the same h
    Var prior_z_mean, prior_z_stddev;
    Var kl_s, kl_z;  // balanced-KL scalars for this step
  };
  PosteriorStep posterior_step(Tape<T>& t, const Branch& prev_ctrl,
                               const Branch& prev_free, Var obs_feat, Var a_prev,
                               Var gated_s, bool feed_action_to_free,
                               std::span<const T> noise_post_s,
                               std::span<const T> noise_post_z,
                               std::span<const T> noise_prior_s) const;

  Var inverse_action(Tape<T>& t, Var s_prev_sample, Var s_sample) const;

  struct Recon {
    Var rgb_s, rgb_z, rgb_b;          // [n, 3HW] ([1, 3HW] for rgb_b)
    Var mask_s, mask_z, mask_b;       // [n, HW], rows sum to one per pixel
    Var composite;                    // [n, 3HW]
  };
  Recon decode_composite(Tape<T>& t, Var feat_s, Var feat_z, Var static_b) const;

  Var predict_reward(Tape<T>& t, Var feat_s, Var feat_z) const;         // [n,1]
  Var predict_discount_logit(Tape<T>& t, Var feat_s, Var feat_z) const; // [n,1]

  // ---- per-element training graph -------------------------------------------

  // Training slab, step-major: row (t*B + b) holds element b at step t.
  // batch == 1 gives the plain single-sequence layout.
  struct SeqElement {
    int steps = 0;
    int batch = 1;
    std::vector<T> obs;          // [T*B, 3HW]
    std::vector<T> prev_action;  // [T*B, A]
    std::vector<T> action;       // [T*B, A] executed at the frame
    std::vector<T> reward;       // [T*B]
    std::vector<T> cont;         // [T*B]
  };
  static SeqElement element_from_batch(const SeqBatch& b, int index);
  static SeqElement slab_from_batch(const SeqBatch& b);

  struct UnrollNoise {
    std::vector<T> post_s, post_z, prior_s;  // each [T * B * d], step-major
    static UnrollNoise draw(int steps, int latent_dim, RngStream& rng,
                            int batch = 1);
    static UnrollNoise zeros(int steps, int latent_dim, int batch = 1);
  };

  struct LossOptions {
    GateMode gate_mode = GateMode::kHard;
    bool train_mode = true;  // feed real actions to the action-free branch
  };

  // All breakdown entries are per-sequence means over the batch. var_s and
  // var_z are the Eq. 9/10 sums over time; the penalties are the objective
  // terms built from them (hinge applied to the batch mean).
  struct LossBreakdown {
    double total = 0, image_nll = 0, action_loss = 0, reward_nll = 0,
           discount_nll = 0, kl_s = 0, kl_z = 0;
    double var_s = 0, var_z = 0;
    double var_penalty_s = 0, var_penalty_z = 0;
    double base = 0;
    double gate_open_rate = 0;
  };

  struct ElementGraph {
    Var total;  // scalar objective for backward()
    LossBreakdown values;
    // posterior trajectory, detached, step-major [T * B * dim]
    std::vector<T> post_h_s, post_s, post_h_z, post_z;
    // gate decisions, step-major [(T-1) * B], indexed by the frame they were
    // computed at
    std::vector<uint8_t> gate_open;
    // prior means under the hypothetical action sets, detached, so the
    // variance terms can be recomputed from first principles:
    // [(T-1)*B, 2, d] for {a,-a} and [(T-1)*B, 3, d] for {a,0,-a}, flattened
    std::vector<T> var_replicas_s, var_replicas_z;
    Recon recon;  // per-step reconstruction handles (valid while tape lives)
  };
  // Builds the full Eq. 11 objective (batch mean) in one graph. Throws
  // TrainingFailure naming the first non-finite component.
  ElementGraph element_loss(Tape<T>& t, const SeqElement& seq,
                            const UnrollNoise& noise, const LossOptions& opts) const;

  // Open-loop rollout: posteriors over `context` frames, then priors driven by
  // the recorded actions. Returns per-frame reconstructions (means used for
  // the latent samples during the prediction phase).
  struct Prediction {
    Recon recon;       // rows = context + horizon frames
    int context = 0, horizon = 0;
  };
  Prediction predict(Tape<T>& t, const SeqElement& seq, int context, int horizon,
                     const LossOptions& opts) const;

 private:
  Branch make_branch(Tape<T>& t, Var h, Var mean, Var raw_std,
                     std::span<const T> noise) const;
  Var gated_input(Tape<T>& t, const Branch& ctrl, const Branch& free,
                  GateMode mode, uint8_t* open_out) const;

  WMConfig cfg_;
  int action_dim_ = kActionDim;

  ConvEncoder<T> encoder_;
  LinearLayer<T> static_head_;
  ConvDecoder<T> static_decoder_;
  GruCell<T> gru_s_, gru_z_;
  Mlp<T> post_s_, post_z_, prior_s_, prior_z_;
  ConvDecoder<T> dec_s_, dec_z_;
  Mlp<T> inverse_;
  LinearLayer<T> gate_;
  Mlp<T> reward_, discount_;
};

extern template class WorldModel<float>;
extern template class WorldModel<double>;
extern template float unbiased_variance<float>(std::span<const float>);
extern template double unbiased_variance<double>(std::span<const double>);

}  // namespace isodream
