#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "moder/numerics.hpp"

namespace moder {

struct Param {
  Matrix value;
  bool trainable = true;
};

/// Gradients keyed by parameter name.
using Gradients = std::map<std::string, Matrix>;

/// Named collection of dense parameters. One-dimensional tensors are stored
/// as n x 1 matrices.
class ParamSet {
 public:
  using Storage = std::map<std::string, Param>;

  void add(const std::string& name, Matrix value, bool trainable = true);

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  const Matrix& value(const std::string& name) const { return at(name).value; }

  std::size_t size() const { return params_.size(); }
  bool empty() const { return params_.empty(); }
  std::vector<std::string> names() const;
  std::vector<std::string> trainable_names() const;

  Storage::const_iterator begin() const { return params_.begin(); }
  Storage::const_iterator end() const { return params_.end(); }
  Storage::iterator begin() { return params_.begin(); }
  Storage::iterator end() { return params_.end(); }

  /// Hash over names, shapes, trainable flags and raw values.
  std::uint64_t fingerprint() const;

  bool operator==(const ParamSet& other) const;

 private:
  Storage params_;
};

}  // namespace moder
