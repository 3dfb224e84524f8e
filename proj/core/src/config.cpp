#include "isodream/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "isodream/sha256.hpp"

namespace isodream {

using json = nlohmann::ordered_json;

void WMConfig::validate() const {
  ISO_CHECK(alpha >= 0 && beta1 >= 0 && beta2 >= 0 && lambda1 >= 0 && lambda2 >= 0,
            "loss weights must be nonnegative");
  ISO_CHECK(variance_margin >= 0, "variance margin must be nonnegative");
  ISO_CHECK(context_frames >= 1, "context_frames must be >= 1");
  ISO_CHECK(latent_dim >= 1 && hidden_dim >= 1 && static_dim >= 1 &&
                feature_dim >= 1 && head_hidden >= 1,
            "model widths must be positive");
  ISO_CHECK(image_size % 8 == 0 && image_size >= 8,
            "image size must be a positive multiple of 8");
  ISO_CHECK(min_std > 0, "min_std must be positive");
  ISO_CHECK(kl_balance >= 0 && kl_balance <= 1, "kl_balance must be in [0,1]");
  ISO_CHECK(gate_threshold > 0 && gate_threshold < 1,
            "gate threshold must be in (0,1)");
}

void ACConfig::validate() const {
  ISO_CHECK(horizon >= 1, "imagination horizon must be >= 1");
  ISO_CHECK(tau >= 0, "attention window must be >= 0");
  ISO_CHECK(gamma >= 0 && gamma <= 1, "gamma must be in [0,1]");
  ISO_CHECK(lambda_ >= 0 && lambda_ <= 1, "lambda must be in [0,1]");
  ISO_CHECK(entropy_weight >= 0, "entropy weight must be nonnegative");
  ISO_CHECK(actor_hidden >= 1 && critic_hidden >= 1, "head widths must be positive");
  ISO_CHECK(min_std > 0, "policy min_std must be positive");
  ISO_CHECK(imagine_stride >= 1, "imagine_stride must be >= 1");
}

void TrainConfig::validate() const {
  ISO_CHECK(total_env_steps >= 0, "total_env_steps must be nonnegative");
  ISO_CHECK(prefill_steps >= sequence_length,
            "prefill must cover at least one training sequence");
  ISO_CHECK(train_every >= 1, "train_every must be >= 1");
  ISO_CHECK(batch_size >= 1 && sequence_length >= 3,
            "batch and sequence sizes must allow a context plus transitions");
  ISO_CHECK(buffer_capacity >= sequence_length, "buffer too small");
  ISO_CHECK(eval_episodes >= 1, "eval_episodes must be >= 1");
}

void RunConfig::validate() const {
  env.validate();
  world_model.validate();
  behavior.validate();
  train.validate();
  ISO_CHECK(world_model.image_size == kImageSize,
            "environment renders 32x32 observations");
  ISO_CHECK(train.sequence_length >= world_model.context_frames + 2,
            "sequence length must be at least K+2");
}

namespace {

json env_to_json(const EnvConfig& c) {
  return json{{"arena_size", c.arena_size},
              {"agent_radius", c.agent_radius},
              {"ball_count", c.ball_count},
              {"ball_radius", c.ball_radius},
              {"ball_speed", c.ball_speed},
              {"dt", c.dt},
              {"collision_penalty", c.collision_penalty},
              {"lateral_penalty", c.lateral_penalty},
              {"episode_length", c.episode_length},
              {"agent_color", c.agent_color}};
}

json wm_to_json(const WMConfig& c) {
  return json{{"alpha", c.alpha},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"lambda1", c.lambda1},
              {"lambda2", c.lambda2},
              {"variance_margin", c.variance_margin},
              {"context_frames", c.context_frames},
              {"latent_dim", c.latent_dim},
              {"hidden_dim", c.hidden_dim},
              {"static_dim", c.static_dim},
              {"feature_dim", c.feature_dim},
              {"head_hidden", c.head_hidden},
              {"image_size", c.image_size},
              {"enc_channels", c.enc_channels},
              {"min_std", c.min_std},
              {"kl_balance", c.kl_balance},
              {"gate_threshold", c.gate_threshold},
              {"reward_uses_z", c.reward_uses_z},
              {"free_branch_kl", c.free_branch_kl}};
}

json ac_to_json(const ACConfig& c) {
  return json{{"horizon", c.horizon},
              {"tau", c.tau},
              {"gamma", c.gamma},
              {"lambda", c.lambda_},
              {"entropy_weight", c.entropy_weight},
              {"actor_lr", c.actor_lr},
              {"critic_lr", c.critic_lr},
              {"actor_hidden", c.actor_hidden},
              {"critic_hidden", c.critic_hidden},
              {"min_std", c.min_std},
              {"learned_projection", c.learned_projection},
              {"imagine_stride", c.imagine_stride}};
}

json train_to_json(const TrainConfig& c) {
  return json{{"total_env_steps", c.total_env_steps},
              {"prefill_steps", c.prefill_steps},
              {"train_every", c.train_every},
              {"batch_size", c.batch_size},
              {"sequence_length", c.sequence_length},
              {"buffer_capacity", c.buffer_capacity},
              {"wm_lr", c.wm_lr},
              {"grad_clip", c.grad_clip},
              {"eval_interval", c.eval_interval},
              {"eval_episodes", c.eval_episodes},
              {"checkpoint_interval", c.checkpoint_interval},
              {"seed", c.seed}};
}

// Applies `src` onto default-constructed fields, rejecting unknown keys.
template <typename Fn>
void apply_fields(const json& src, const std::string& section,
                  const std::set<std::string>& known, Fn&& get) {
  for (auto it = src.begin(); it != src.end(); ++it) {
    if (!known.count(it.key())) {
      throw IoError("unknown config key '" + section + "." + it.key() + "'");
    }
  }
  get();
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

EnvConfig env_from_json(const json& j) {
  EnvConfig c;
  apply_fields(j, "env",
               {"arena_size", "agent_radius", "ball_count", "ball_radius",
                "ball_speed", "dt", "collision_penalty", "lateral_penalty",
                "episode_length", "agent_color"},
               [&] {
                 read_if(j, "arena_size", c.arena_size);
                 read_if(j, "agent_radius", c.agent_radius);
                 read_if(j, "ball_count", c.ball_count);
                 read_if(j, "ball_radius", c.ball_radius);
                 read_if(j, "ball_speed", c.ball_speed);
                 read_if(j, "dt", c.dt);
                 read_if(j, "collision_penalty", c.collision_penalty);
                 read_if(j, "lateral_penalty", c.lateral_penalty);
                 read_if(j, "episode_length", c.episode_length);
                 read_if(j, "agent_color", c.agent_color);
               });
  return c;
}

WMConfig wm_from_json(const json& j) {
  WMConfig c;
  apply_fields(j, "world_model",
               {"alpha", "beta1", "beta2", "lambda1", "lambda2",
                "variance_margin", "context_frames", "latent_dim", "hidden_dim",
                "static_dim", "feature_dim", "head_hidden", "image_size",
                "enc_channels", "min_std", "kl_balance", "gate_threshold",
                "reward_uses_z", "free_branch_kl"},
               [&] {
                 read_if(j, "alpha", c.alpha);
                 read_if(j, "beta1", c.beta1);
                 read_if(j, "beta2", c.beta2);
                 read_if(j, "lambda1", c.lambda1);
                 read_if(j, "lambda2", c.lambda2);
                 read_if(j, "variance_margin", c.variance_margin);
                 read_if(j, "context_frames", c.context_frames);
                 read_if(j, "latent_dim", c.latent_dim);
                 read_if(j, "hidden_dim", c.hidden_dim);
                 read_if(j, "static_dim", c.static_dim);
                 read_if(j, "feature_dim", c.feature_dim);
                 read_if(j, "head_hidden", c.head_hidden);
                 read_if(j, "image_size", c.image_size);
                 read_if(j, "enc_channels", c.enc_channels);
                 read_if(j, "min_std", c.min_std);
                 read_if(j, "kl_balance", c.kl_balance);
                 read_if(j, "gate_threshold", c.gate_threshold);
                 read_if(j, "reward_uses_z", c.reward_uses_z);
                 read_if(j, "free_branch_kl", c.free_branch_kl);
               });
  return c;
}

ACConfig ac_from_json(const json& j) {
  ACConfig c;
  apply_fields(j, "behavior",
               {"horizon", "tau", "gamma", "lambda", "entropy_weight",
                "actor_lr", "critic_lr", "actor_hidden", "critic_hidden",
                "min_std", "learned_projection", "imagine_stride"},
               [&] {
                 read_if(j, "horizon", c.horizon);
                 read_if(j, "tau", c.tau);
                 read_if(j, "gamma", c.gamma);
                 read_if(j, "lambda", c.lambda_);
                 read_if(j, "entropy_weight", c.entropy_weight);
                 read_if(j, "actor_lr", c.actor_lr);
                 read_if(j, "critic_lr", c.critic_lr);
                 read_if(j, "actor_hidden", c.actor_hidden);
                 read_if(j, "critic_hidden", c.critic_hidden);
                 read_if(j, "min_std", c.min_std);
                 read_if(j, "learned_projection", c.learned_projection);
                 read_if(j, "imagine_stride", c.imagine_stride);
               });
  return c;
}

TrainConfig train_from_json(const json& j) {
  TrainConfig c;
  apply_fields(j, "train",
               {"total_env_steps", "prefill_steps", "train_every", "batch_size",
                "sequence_length", "buffer_capacity", "wm_lr", "grad_clip",
                "eval_interval", "eval_episodes", "checkpoint_interval", "seed"},
               [&] {
                 read_if(j, "total_env_steps", c.total_env_steps);
                 read_if(j, "prefill_steps", c.prefill_steps);
                 read_if(j, "train_every", c.train_every);
                 read_if(j, "batch_size", c.batch_size);
                 read_if(j, "sequence_length", c.sequence_length);
                 read_if(j, "buffer_capacity", c.buffer_capacity);
                 read_if(j, "wm_lr", c.wm_lr);
                 read_if(j, "grad_clip", c.grad_clip);
                 read_if(j, "eval_interval", c.eval_interval);
                 read_if(j, "eval_episodes", c.eval_episodes);
                 read_if(j, "checkpoint_interval", c.checkpoint_interval);
                 read_if(j, "seed", c.seed);
               });
  return c;
}

}  // namespace

std::string RunConfig::to_json(int indent) const {
  json j{{"env", env_to_json(env)},
         {"world_model", wm_to_json(world_model)},
         {"behavior", ac_to_json(behavior)},
         {"train", train_to_json(train)}};
  return j.dump(indent);
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw IoError(std::string("config parse error: ") + e.what());
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() != "env" && it.key() != "world_model" && it.key() != "behavior" &&
        it.key() != "train") {
      throw IoError("unknown config section '" + it.key() + "'");
    }
  }
  RunConfig c;
  try {
    if (j.contains("env")) c.env = env_from_json(j.at("env"));
    if (j.contains("world_model")) c.world_model = wm_from_json(j.at("world_model"));
    if (j.contains("behavior")) c.behavior = ac_from_json(j.at("behavior"));
    if (j.contains("train")) c.train = train_from_json(j.at("train"));
  } catch (const json::exception& e) {
    throw IoError(std::string("config field error: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f.is_open()) throw IoError("cannot open config file " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return from_json(os.str());
}

std::string RunConfig::config_hash() const {
  return Sha256::hash_hex(to_json(0));
}

}  // namespace isodream
