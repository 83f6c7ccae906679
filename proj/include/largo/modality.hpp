// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "largo/error.hpp"
#include "largo/tensor.hpp"

namespace largo {

/// Non-empty subset of N modalities. The model index m of a subset is its
/// bitmask read as an integer (bit n set <=> modality n present), so the
/// subsets map one-to-one onto m = 1 .. 2^N - 1 and m = M is the full set.
class ModalityMask {
 public:
  static constexpr std::size_t kMaxModalities = 16;

  ModalityMask(std::uint32_t bits, std::size_t n_modalities) : bits_(bits), n_(n_modalities) {
    if (n_ == 0 || n_ > kMaxModalities) throw ModalityError("modality count must be in [1, 16]");
    if (bits_ == 0) throw ModalityError("modality subset must be non-empty");
    if (bits_ >> n_) throw ModalityError("modality subset names a modality >= N");
  }

  static ModalityMask from_index(std::size_t m, std::size_t n_modalities) {
    return ModalityMask(static_cast<std::uint32_t>(m), n_modalities);
  }

  static ModalityMask full(std::size_t n_modalities) {
    return ModalityMask((std::uint32_t{1} << n_modalities) - 1, n_modalities);
  }

  static ModalityMask of(std::initializer_list<std::size_t> modalities, std::size_t n_modalities) {
    std::uint32_t bits = 0;
    for (auto i : modalities) {
      if (i >= n_modalities) throw ModalityError("modality id out of range");
      bits |= std::uint32_t{1} << i;
    }
    return ModalityMask(bits, n_modalities);
  }

  std::size_t index() const noexcept { return bits_; }
  std::uint32_t bits() const noexcept { return bits_; }
  std::size_t n_modalities() const noexcept { return n_; }
  std::size_t model_count() const noexcept { return (std::size_t{1} << n_) - 1; }
  std::size_t count() const noexcept { return static_cast<std::size_t>(std::popcount(bits_)); }
  bool contains(std::size_t modality) const noexcept { return (bits_ >> modality) & 1u; }
  bool is_full() const noexcept { return index() == model_count(); }

  /// Present modalities in ascending order.
  std::vector<std::size_t> members() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < n_; ++i)
      if (contains(i)) out.push_back(i);
    return out;
  }

  /// Presence pattern with '*' for present and '.' for absent, modality 0 first.
  std::string pattern() const {
    std::string s;
    for (std::size_t i = 0; i < n_; ++i) s += contains(i) ? '*' : '.';
    return s;
  }

  friend bool operator==(const ModalityMask&, const ModalityMask&) = default;

 private:
  std::uint32_t bits_;
  std::size_t n_;
};

inline std::size_t model_count_for(std::size_t n_modalities) {
  return (std::size_t{1} << n_modalities) - 1;
}

/// Per-modality input tensors keyed by modality id.
using ModalityInputs = std::map<std::size_t, DenseTensor>;

/// Checks that exactly the modalities of `mask` are supplied.
inline void check_inputs_match(const ModalityInputs& inputs, const ModalityMask& mask) {
  for (const auto& [id, _] : inputs)
    if (id >= mask.n_modalities() || !mask.contains(id))
      throw ModalityError("input supplied for modality " + std::to_string(id) +
                          " which is absent from subset " + mask.pattern());
  for (auto id : mask.members())
    if (!inputs.count(id))
      throw ModalityError("modality " + std::to_string(id) + " of subset " + mask.pattern() +
                          " was not supplied");
}

}  // namespace largo
