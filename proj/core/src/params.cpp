#include "isodream/params.hpp"

#include <cmath>

namespace isodream {

template <typename T>
ParamTensor<T>& ParamSet<T>::add(const std::string& group,
                                 const std::string& name, int rows, int cols) {
  ISO_CHECK(rows > 0 && cols > 0, "parameter must have positive shape");
  ISO_CHECK(index_.find({group, name}) == index_.end(),
            "duplicate parameter " + group + "." + name);
  auto t = std::make_unique<ParamTensor<T>>();
  t->group = group;
  t->name = name;
  t->rows = rows;
  t->cols = cols;
  t->value.assign(static_cast<size_t>(rows) * cols, T(0));
  t->grad.assign(static_cast<size_t>(rows) * cols, T(0));
  t->id = static_cast<int>(all_.size());
  ParamTensor<T>* raw = t.get();
  storage_.push_back(std::move(t));
  all_.push_back(raw);
  index_[{group, name}] = raw;
  return *raw;
}

template <typename T>
ParamTensor<T>* ParamSet<T>::find(const std::string& group,
                                  const std::string& name) {
  auto it = index_.find({group, name});
  return it == index_.end() ? nullptr : it->second;
}

template <typename T>
const ParamTensor<T>* ParamSet<T>::find(const std::string& group,
                                        const std::string& name) const {
  auto it = index_.find({group, name});
  return it == index_.end() ? nullptr : it->second;
}

template <typename T>
std::vector<ParamTensor<T>*> ParamSet<T>::group_tensors(const std::string& group) {
  std::vector<ParamTensor<T>*> out;
  for (auto* p : all_) {
    if (p->group == group) out.push_back(p);
  }
  return out;
}

template <typename T>
std::vector<const ParamTensor<T>*> ParamSet<T>::group_tensors(
    const std::string& group) const {
  std::vector<const ParamTensor<T>*> out;
  for (auto* p : all_) {
    if (p->group == group) out.push_back(p);
  }
  return out;
}

template <typename T>
bool ParamSet<T>::has_group(const std::string& group) const {
  for (auto* p : all_) {
    if (p->group == group) return true;
  }
  return false;
}

template <typename T>
void ParamSet<T>::zero_grads() {
  for (auto* p : all_) p->zero_grad();
}

template <typename T>
long ParamSet<T>::total_scalars() const {
  long n = 0;
  for (auto* p : all_) n += p->size();
  return n;
}

template <typename T>
void ParamSet<T>::init_group(const std::string& group, uint64_t seed) {
  RngStream rng = RngStream::derive(seed, "param_init", fnv1a64(group));
  for (auto* p : group_tensors(group)) {
    const bool is_bias = p->name.size() >= 2 &&
                         p->name.compare(p->name.size() - 2, 2, ".b") == 0;
    if (is_bias) {
      std::fill(p->value.begin(), p->value.end(), T(0));
      continue;
    }
    const double limit = std::sqrt(6.0 / (p->rows + p->cols));
    for (auto& v : p->value) {
      v = static_cast<T>(rng.uniform(-limit, limit));
    }
  }
}

template <typename T>
void ParamSet<T>::init_all(uint64_t seed) {
  for (const auto& g : parameter_group_names()) init_group(g, seed);
}

template class ParamSet<float>;
template class ParamSet<double>;

}  // namespace isodream
