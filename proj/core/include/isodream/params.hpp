#pragma once

#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "isodream/common.hpp"
#include "isodream/rng.hpp"

namespace isodream {

// The checkpointable parameter groups. Order is the container order in
// ISODPAR1 files and the optimizer partition:
//   world model: shared_encoder .. discount_head
//   actor optimizer: actor (+ attention when projections are enabled)
//   critic optimizer: critic
inline const std::vector<std::string>& parameter_group_names() {
  static const std::vector<std::string> names = {
      "shared_encoder",   "action_cond_branch", "action_free_branch",
      "static_branch",    "inverse_cell",       "dependency_gate",
      "reward_head",      "discount_head",      "actor",
      "critic",           "attention"};
  return names;
}

template <typename T>
struct ParamTensor {
  std::string group;
  std::string name;  // unique within group
  int rows = 0, cols = 0;
  std::vector<T> value;
  std::vector<T> grad;
  int id = -1;  // dense registry index within the owning ParamSet

  int size() const { return rows * cols; }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

// Owns every trainable tensor, keyed by (group, name). Tensors are created
// once at model construction; pointers stay stable afterwards.
template <typename T>
class ParamSet {
 public:
  ParamSet() = default;
  ParamSet(const ParamSet&) = delete;
  ParamSet& operator=(const ParamSet&) = delete;

  ParamTensor<T>& add(const std::string& group, const std::string& name,
                      int rows, int cols);
  ParamTensor<T>* find(const std::string& group, const std::string& name);
  const ParamTensor<T>* find(const std::string& group,
                             const std::string& name) const;

  std::vector<ParamTensor<T>*> group_tensors(const std::string& group);
  std::vector<const ParamTensor<T>*> group_tensors(const std::string& group) const;
  bool has_group(const std::string& group) const;

  int count() const { return static_cast<int>(all_.size()); }
  ParamTensor<T>& by_id(int id) { return *all_[id]; }
  const ParamTensor<T>& by_id(int id) const { return *all_[id]; }
  const std::vector<ParamTensor<T>*>& all() { return all_; }

  void zero_grads();
  long total_scalars() const;

  // Glorot-uniform weights, zero biases (a tensor with rows==1 is treated
  // as a bias). Each group draws from its own stream keyed by (seed, group),
  // so a selective checkpoint load can re-initialize the remaining groups
  // to exactly the fresh-init state.
  void init_group(const std::string& group, uint64_t seed);
  void init_all(uint64_t seed);

 private:
  std::vector<std::unique_ptr<ParamTensor<T>>> storage_;
  std::vector<ParamTensor<T>*> all_;
  std::map<std::pair<std::string, std::string>, ParamTensor<T>*> index_;
};

extern template class ParamSet<float>;
extern template class ParamSet<double>;

}  // namespace isodream
