#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace headsim {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class WeightType : std::uint8_t { Q = 0, K = 1, V = 2, O = 3 };

inline constexpr std::array<WeightType, 4> kAllWeightTypes = {
    WeightType::Q, WeightType::K, WeightType::V, WeightType::O};

char to_char(WeightType t);
WeightType weight_type_from_char(char c);

struct ModelConfig {
  int d_model = 0;
  int d_head = 0;
  int n_layers = 0;
  int n_heads = 0;
  int vocab_size = 0;

  void validate() const;
  int total_heads() const { return n_layers * n_heads; }

  bool operator==(const ModelConfig&) const = default;
};

struct HeadId {
  int layer = 0;
  int head = 0;

  auto operator<=>(const HeadId&) const = default;

  // "L4H7"
  std::string str() const;
  static HeadId parse(std::string_view text);

  // Flattened index layer * n_heads + head.
  int index(const ModelConfig& cfg) const { return layer * cfg.n_heads + head; }
};

struct WeightRef {
  HeadId head;
  WeightType wtype = WeightType::Q;

  auto operator<=>(const WeightRef&) const = default;
  std::string str() const;
};

// Which weight type of the earlier (source) head is compared with which weight
// type of the later (target) head. "OQ" = source O, target Q.
struct PairingType {
  WeightType source = WeightType::O;
  WeightType target = WeightType::Q;

  auto operator<=>(const PairingType&) const = default;

  std::string str() const;
  static PairingType parse(std::string_view text);
  static std::array<PairingType, 16> all();
};

// The four d_model x d_head column-subspace generators of one head: W_Q^T,
// W_K^T, W_V^T and W_O.
struct HeadGenerators {
  Matrix q, k, v, o;

  const Matrix& get(WeightType t) const;
  Matrix& get(WeightType t);
};

struct HeadPair {
  HeadId source;
  HeadId target;

  auto operator<=>(const HeadPair&) const = default;
};

}  // namespace headsim

template <>
struct std::hash<headsim::HeadId> {
  std::size_t operator()(const headsim::HeadId& h) const noexcept {
    return std::hash<long long>{}((static_cast<long long>(h.layer) << 32) ^
                                  static_cast<unsigned>(h.head));
  }
};
