#include "moder/params.hpp"

#include "moder/hash.hpp"

namespace moder {

void ParamSet::add(const std::string& name, Matrix value, bool trainable) {
  if (name.empty()) throw ContractError("ParamSet: empty parameter name");
  if (value.size() == 0) throw DimensionError("ParamSet: parameter '" + name + "' has an empty shape");
  if (!value.allFinite()) throw DomainError("ParamSet: parameter '" + name + "' has non-finite entries");
  const auto [it, inserted] = params_.emplace(name, Param{std::move(value), trainable});
  if (!inserted) throw ContractError("ParamSet: duplicate parameter '" + name + "'");
}

Param& ParamSet::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw LookupError("ParamSet: no parameter '" + name + "'");
  return it->second;
}

const Param& ParamSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw LookupError("ParamSet: no parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, p] : params_) out.push_back(name);
  return out;
}

std::vector<std::string> ParamSet::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [name, p] : params_)
    if (p.trainable) out.push_back(name);
  return out;
}

std::uint64_t ParamSet::fingerprint() const {
  Fnv1a h;
  for (const auto& [name, p] : params_) {
    h.update(name);
    h.update(static_cast<std::uint64_t>(p.trainable));
    h.update_matrix(p.value);
  }
  return h.digest();
}

bool ParamSet::operator==(const ParamSet& other) const {
  if (params_.size() != other.params_.size()) return false;
  auto a = params_.begin();
  auto b = other.params_.begin();
  for (; a != params_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.trainable != b->second.trainable) return false;
    if (a->second.value.rows() != b->second.value.rows() || a->second.value.cols() != b->second.value.cols()) return false;
    if (a->second.value != b->second.value) return false;
  }
  return true;
}

}  // namespace moder
