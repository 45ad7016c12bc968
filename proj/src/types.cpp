#include "headsim/types.hpp"

#include <charconv>
#include <utility>

#include "headsim/error.hpp"

namespace headsim {

char to_char(WeightType t) {
  switch (t) {
    case WeightType::Q: return 'Q';
    case WeightType::K: return 'K';
    case WeightType::V: return 'V';
    case WeightType::O: return 'O';
  }
  return '?';
}

WeightType weight_type_from_char(char c) {
  switch (c) {
    case 'Q': case 'q': return WeightType::Q;
    case 'K': case 'k': return WeightType::K;
    case 'V': case 'v': return WeightType::V;
    case 'O': case 'o': return WeightType::O;
    default: break;
  }
  throw InvalidArgument(std::string("unknown weight type '") + c + "'");
}

void ModelConfig::validate() const {
  if (d_model < 1 || d_head < 1 || n_layers < 1 || n_heads < 1)
    throw InvalidArgument("model config: d_model, d_head, n_layers, n_heads must be >= 1");
  if (vocab_size < 0) throw InvalidArgument("model config: vocab_size must be >= 0");
  if (d_head > d_model) throw InvalidArgument("model config: d_head exceeds d_model");
}

std::string HeadId::str() const {
  return "L" + std::to_string(layer) + "H" + std::to_string(head);
}

HeadId HeadId::parse(std::string_view text) {
  auto fail = [&] { return InvalidArgument("malformed head id '" + std::string(text) + "'"); };
  if (text.size() < 4 || (text[0] != 'L' && text[0] != 'l')) throw fail();
  const auto hpos = text.find_first_of("Hh", 1);
  if (hpos == std::string_view::npos) throw fail();
  HeadId id;
  const char* b = text.data();
  auto r1 = std::from_chars(b + 1, b + hpos, id.layer);
  auto r2 = std::from_chars(b + hpos + 1, b + text.size(), id.head);
  if (r1.ec != std::errc{} || r1.ptr != b + hpos || r2.ec != std::errc{} ||
      r2.ptr != b + text.size() || hpos == 1 || hpos + 1 == text.size() ||
      id.layer < 0 || id.head < 0)
    throw fail();
  return id;
}

std::string WeightRef::str() const {
  return head.str() + "." + std::string(1, to_char(wtype));
}

std::string PairingType::str() const {
  return std::string{to_char(source), to_char(target)};
}

PairingType PairingType::parse(std::string_view text) {
  if (text.size() != 2) throw InvalidArgument("pairing must be two letters, got '" + std::string(text) + "'");
  return {weight_type_from_char(text[0]), weight_type_from_char(text[1])};
}

std::array<PairingType, 16> PairingType::all() {
  std::array<PairingType, 16> out{};
  std::size_t i = 0;
  for (auto s : kAllWeightTypes)
    for (auto t : kAllWeightTypes) out[i++] = {s, t};
  return out;
}

const Matrix& HeadGenerators::get(WeightType t) const {
  switch (t) {
    case WeightType::Q: return q;
    case WeightType::K: return k;
    case WeightType::V: return v;
    case WeightType::O: return o;
  }
  return q;
}

Matrix& HeadGenerators::get(WeightType t) {
  return const_cast<Matrix&>(std::as_const(*this).get(t));
}

}  // namespace headsim
