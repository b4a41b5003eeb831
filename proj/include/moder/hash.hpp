#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string_view>

#include "moder/numerics.hpp"

namespace moder {

/// 64-bit FNV-1a, used for fingerprints and file checksums.
class Fnv1a {
 public:
  static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ULL;
  static constexpr std::uint64_t kPrime = 0x100000001b3ULL;

  void update(std::span<const unsigned char> bytes) {
    for (unsigned char b : bytes) {
      state_ ^= b;
      state_ *= kPrime;
    }
  }
  void update(const void* data, std::size_t n) {
    update(std::span<const unsigned char>(static_cast<const unsigned char*>(data), n));
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  void update(std::uint64_t v) { update(&v, sizeof v); }

  /// Dense matrix contents in row-major order, plus shape.
  template <typename Derived>
  void update_matrix(const Eigen::DenseBase<Derived>& m) {
    update(static_cast<std::uint64_t>(m.rows()));
    update(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const auto v = m(r, c);
        update(&v, sizeof v);
      }
  }

  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = kOffset;
};

inline std::uint64_t fnv1a64(std::string_view s) {
  Fnv1a h;
  h.update(s);
  return h.digest();
}

}  // namespace moder
