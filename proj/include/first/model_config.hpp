#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "first/errors.hpp"

namespace first {

struct ModelConfig {
  std::uint32_t n_layers = 12;
  std::uint32_t d_model = 64;
  std::uint32_t n_heads = 4;
  std::uint32_t d_ff = 256;
  std::uint32_t vocab_size = 260;  // 256 bytes + BOS, EOS, PAD, SEP
  std::uint32_t max_seq = 256;

  static constexpr double kNormEps = 1e-5;
  static constexpr double kRopeTheta = 10000.0;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1) throw ConfigError("model config: need at least one layer");
    if (vocab_size < 2) throw ConfigError("model config: vocabulary must have at least 2 entries");
    if (n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigError("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                        std::to_string(n_heads));
    }
    if (head_dim() % 2 != 0) throw ConfigError("model config: head dimension must be even for rotary embeddings");
    if (d_ff == 0 || max_seq == 0) throw ConfigError("model config: d_ff and max_seq must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// One flag per layer. Used both as a skip set (flag = skipped) and as an
// include path (flag = executed); the owning type says which.
class LayerMask {
 public:
  LayerMask() = default;
  explicit LayerMask(std::size_t n_layers, bool value = false) : bits_(n_layers, value ? 1 : 0) {}

  static LayerMask from_indices(std::size_t n_layers, std::span<const std::size_t> indices) {
    LayerMask m(n_layers);
    for (auto i : indices) m.set(i, true);
    return m;
  }
  static LayerMask from_indices(std::size_t n_layers, std::initializer_list<std::size_t> indices) {
    return from_indices(n_layers, std::span<const std::size_t>(indices.begin(), indices.size()));
  }
  // Character i describes layer i ('1' = set).
  static LayerMask from_bitstring(const std::string& s) {
    LayerMask m(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] != '0' && s[i] != '1') throw ConfigError("layer mask: bad character in '" + s + "'");
      m.bits_[i] = s[i] == '1';
    }
    return m;
  }

  std::size_t size() const { return bits_.size(); }
  bool empty() const { return bits_.empty(); }
  bool test(std::size_t i) const { return i < bits_.size() && bits_[i] != 0; }
  bool operator[](std::size_t i) const { return test(i); }
  void set(std::size_t i, bool v) {
    if (i >= bits_.size()) {
      throw ConfigError("layer mask: index " + std::to_string(i) + " >= " + std::to_string(bits_.size()));
    }
    bits_[i] = v ? 1 : 0;
  }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto b : bits_) c += b;
    return c;
  }
  LayerMask complement() const {
    LayerMask m(bits_.size());
    for (std::size_t i = 0; i < bits_.size(); ++i) m.bits_[i] = bits_[i] ? 0 : 1;
    return m;
  }
  std::vector<std::size_t> indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < bits_.size(); ++i)
      if (bits_[i]) out.push_back(i);
    return out;
  }
  std::string to_bitstring() const {
    std::string s(bits_.size(), '0');
    for (std::size_t i = 0; i < bits_.size(); ++i) s[i] = bits_[i] ? '1' : '0';
    return s;
  }

  friend bool operator==(const LayerMask&, const LayerMask&) = default;

 private:
  std::vector<std::uint8_t> bits_;
};

// True if `skip` names no layers (either unsized or all clear).
inline bool skips_nothing(const LayerMask& skip) { return skip.count() == 0; }

}  // namespace first
