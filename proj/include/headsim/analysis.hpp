#pragma once

// Wiring diagrams, toy-model debiasing, inlet/outlet hub scores and the KL
// informativeness heatmap over the 16 pairings.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "headsim/rand_baseline.hpp"
#include "headsim/similarity.hpp"
#include "headsim/tensor_io.hpp"

namespace headsim {

struct WiringEdge {
  PairingType pairing;
  HeadPair pair;
  double score = 0;
  double opacity = 0;  // score / largest score of the pairing
};

struct WiringDiagram {
  int k = 0;
  std::vector<WiringEdge> edges;
  // Optional per-head token labels.
  std::map<HeadId, std::vector<std::string>> labels;

  bool contains(PairingType pairing, const HeadPair& pair) const;
  // Nodes L{l}H{h}; fillcolor from the first matching annotation class.
  std::string to_dot(const HeadClassAnnotations* ann = nullptr) const;
  nlohmann::json to_json(const HeadClassAnnotations* ann = nullptr) const;
};

// Top-k edges of one table, score descending, ties by (source, target).
std::vector<WiringEdge> top_k_edges(const SimilarityTable& table, int k);
WiringDiagram build_wiring(const std::vector<SimilarityTable>& tables, int k);

struct DebiasResult {
  SimilarityTable table;
  double bias = 0;
  bool degenerate = false;  // nothing exceeded the bias; zeros kept
};

// bias = mean metric over n_random pairs of N(0, 1) heads with the table's
// d_model / d_head; scores become max(score - bias, 0) / max.
DebiasResult debias_toy(const SimilarityTable& table, int n_random, std::uint64_t seed);

enum class HubDirection { kInlet, kOutlet };

struct HubScoreTable {
  HubDirection direction = HubDirection::kInlet;
  PairingType pairing;
  std::map<HeadId, double> scores;  // only heads where the score is defined

  // Descending, ties by head id.
  std::vector<std::pair<HeadId, double>> ranked() const;
  nlohmann::json to_json() const;
};

// Inlet: every source h' gives its largest PK over later-layer targets to the
// targets attaining it. Requires every strict_earlier pair in the table.
HubScoreTable inlet_scores(const SimilarityTable& table);
// Outlet: every target h' gives its largest PK over earlier-layer sources to
// the sources attaining it.
HubScoreTable outlet_scores(const SimilarityTable& table);

enum class KlDirection { kFitVsReference, kReferenceVsFit };

struct KlOptions {
  KlDirection direction = KlDirection::kFitVsReference;
  double variance_floor = 1e-12;
};

struct KlHeatmap {
  Matrix kl = Matrix::Zero(4, 4);  // row source type, column target type (Q, K, V, O)
  Matrix fitted_mean = Matrix::Zero(4, 4);
  Matrix fitted_variance = Matrix::Zero(4, 4);
  PkReferenceDistribution reference;
  std::vector<std::string> floored;  // pairings whose variance hit the floor

  double at(PairingType p) const;
  void write_csv(std::ostream& os) const;
  nlohmann::json to_json() const;
};

// PK over strict_earlier pairs for all 16 pairings, Gaussian fit, KL against
// tight_reference(d_model, d_head).
KlHeatmap kl_heatmap(const WeightStore& store, const KlOptions& opts = {}, int threads = 0);

}  // namespace headsim
