#include "headsim/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "headsim/error.hpp"

namespace headsim {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const char* class_color(HeadClass c) {
  switch (c) {
    case HeadClass::kDuplicate: return "#e377c2";
    case HeadClass::kPrevious: return "#2ca02c";
    case HeadClass::kInduction: return "#1f77b4";
    case HeadClass::kNameMover: return "#d62728";
    case HeadClass::kNegativeNameMover: return "#9467bd";
    case HeadClass::kBackupNameMover: return "#ff7f0e";
    case HeadClass::kSInhibition: return "#8c564b";
    case HeadClass::kIdentity: return "#bcbd22";
  }
  return "#ffffff";
}

// Functional classes take precedence over Identity for coloring.
std::vector<HeadClass> classes_of(const HeadId& h, const HeadClassAnnotations* ann) {
  std::vector<HeadClass> out;
  if (ann == nullptr) return out;
  for (HeadClass c : kAllHeadClasses)
    if (ann->heads(c).count(h)) out.push_back(c);
  return out;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out;
}

}  // namespace

bool WiringDiagram::contains(PairingType pairing, const HeadPair& pair) const {
  return std::any_of(edges.begin(), edges.end(), [&](const WiringEdge& e) {
    return e.pairing == pairing && e.pair == pair;
  });
}

std::string WiringDiagram::to_dot(const HeadClassAnnotations* ann) const {
  std::set<HeadId> nodes;
  for (const auto& e : edges) {
    nodes.insert(e.pair.source);
    nodes.insert(e.pair.target);
  }
  std::ostringstream os;
  os << "digraph wiring {\n  rankdir=TB;\n  node [shape=box, style=filled, fillcolor=\"#ffffff\"];\n";
  for (const HeadId& h : nodes) {
    os << "  " << h.str() << " [label=\"" << h.str();
    if (auto it = labels.find(h); it != labels.end())
      for (const auto& tok : it->second) os << "\\n" << escape(tok);
    os << "\"";
    const auto cls = classes_of(h, ann);
    if (!cls.empty())
      os << ", fillcolor=\"" << class_color(cls.front()) << "\", class=\"" << to_string(cls.front())
         << "\"";
    os << "];\n";
  }
  for (const auto& e : edges) {
    char alpha[3];
    std::snprintf(alpha, sizeof alpha, "%02x",
                  static_cast<int>(std::lround(std::clamp(e.opacity, 0.0, 1.0) * 255)));
    os << "  " << e.pair.source.str() << " -> " << e.pair.target.str() << " [pairing=\""
       << e.pairing.str() << "\", score=" << fmt(e.score) << ", alpha=" << fmt(e.opacity)
       << ", penwidth=" << fmt(1.0 + 3.0 * e.opacity) << ", color=\"#000000" << alpha
       << "\"];\n";
  }
  os << "}\n";
  return os.str();
}

nlohmann::json WiringDiagram::to_json(const HeadClassAnnotations* ann) const {
  nlohmann::json j_edges = nlohmann::json::array();
  std::set<HeadId> nodes;
  for (const auto& e : edges) {
    j_edges.push_back({{"pairing", e.pairing.str()},
                       {"src", e.pair.source.str()},
                       {"dst", e.pair.target.str()},
                       {"score", e.score},
                       {"opacity", e.opacity}});
    nodes.insert(e.pair.source);
    nodes.insert(e.pair.target);
  }
  nlohmann::json j_nodes = nlohmann::json::array();
  for (const HeadId& h : nodes) {
    nlohmann::json n = {{"id", h.str()}};
    nlohmann::json cls = nlohmann::json::array();
    for (HeadClass c : classes_of(h, ann)) cls.push_back(to_string(c));
    n["classes"] = cls;
    if (auto it = labels.find(h); it != labels.end()) n["tokens"] = it->second;
    j_nodes.push_back(n);
  }
  return {{"k", k}, {"nodes", j_nodes}, {"edges", j_edges}};
}

std::vector<WiringEdge> top_k_edges(const SimilarityTable& table, int k) {
  std::vector<std::size_t> idx(table.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto n = std::min<std::size_t>(std::max(k, 0), idx.size());
  std::partial_sort(idx.begin(), idx.begin() + n, idx.end(), [&](auto a, auto b) {
    if (table.scores[a] != table.scores[b]) return table.scores[a] > table.scores[b];
    return table.pairs[a] < table.pairs[b];
  });
  std::vector<WiringEdge> out;
  const double top = n > 0 ? table.scores[idx[0]] : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = table.scores[idx[i]];
    out.push_back({table.pairing, table.pairs[idx[i]], s, top > 0 ? s / top : 0.0});
  }
  return out;
}

WiringDiagram build_wiring(const std::vector<SimilarityTable>& tables, int k) {
  WiringDiagram d;
  d.k = k;
  for (const auto& t : tables) {
    auto e = top_k_edges(t, k);
    d.edges.insert(d.edges.end(), e.begin(), e.end());
  }
  return d;
}

DebiasResult debias_toy(const SimilarityTable& table, int n_random, std::uint64_t seed) {
  if (n_random < 1) throw InvalidArgument("debias_toy: n_random must be positive");
  const ModelConfig cfg{table.config.d_model, table.config.d_head, 2, 1, 0};
  const std::uint64_t base = derive_seed(seed, "debias");
  double bias = 0;
  for (int i = 0; i < n_random; ++i) {
    Philox4x32 rng(base, i);
    std::vector<HeadGenerators> heads(2);
    for (auto& h : heads)
      for (WeightType t : kAllWeightTypes) {
        Matrix& m = h.get(t);
        m.resize(cfg.d_model, cfg.d_head);
        for (Eigen::Index c = 0; c < m.cols(); ++c)
          for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = rng.normal();
      }
    const WeightStore store = WeightStore::from_generators(cfg, std::move(heads));
    bias += score_pair(store, table.metric, table.pairing, {{0, 0}, {1, 0}});
  }
  bias /= n_random;

  DebiasResult r{table, bias, false};
  double top = 0;
  for (double& s : r.table.scores) {
    s = std::max(s - bias, 0.0);
    top = std::max(top, s);
  }
  if (top > 0)
    for (double& s : r.table.scores) s /= top;
  else
    r.degenerate = true;
  return r;
}

std::vector<std::pair<HeadId, double>> HubScoreTable::ranked() const {
  std::vector<std::pair<HeadId, double>> v(scores.begin(), scores.end());
  std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return v;
}

nlohmann::json HubScoreTable::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [h, s] : ranked()) rows.push_back({{"head", h.str()}, {"score", s}});
  return {{"direction", direction == HubDirection::kInlet ? "inlet" : "outlet"},
          {"pairing", pairing.str()},
          {"scores", rows}};
}

namespace {

HubScoreTable hub_scores(const SimilarityTable& table, HubDirection dir) {
  const ModelConfig& cfg = table.config;
  HubScoreTable out{dir, table.pairing, {}};
  const bool inlet = dir == HubDirection::kInlet;
  for (int l = 0; l < cfg.n_layers; ++l)
    for (int h = 0; h < cfg.n_heads; ++h)
      if (inlet ? l > 0 : l < cfg.n_layers - 1) out.scores[{l, h}] = 0.0;

  auto score_of = [&](const HeadPair& p) {
    const auto v = table.find(p);
    if (!v)
      throw InvalidArgument("hub scores need every strict_earlier pair; missing " +
                            p.source.str() + "->" + p.target.str());
    return *v;
  };
  // The anchor head distributes its best score over the partner heads on the
  // other side that attain it.
  for (int l = 0; l < cfg.n_layers; ++l)
    for (int h = 0; h < cfg.n_heads; ++h) {
      const HeadId anchor{l, h};
      std::vector<std::pair<HeadId, double>> partners;
      const int lo = inlet ? l + 1 : 0, hi = inlet ? cfg.n_layers : l;
      for (int pl = lo; pl < hi; ++pl)
        for (int ph = 0; ph < cfg.n_heads; ++ph) {
          const HeadId other{pl, ph};
          partners.push_back(
              {other, score_of(inlet ? HeadPair{anchor, other} : HeadPair{other, anchor})});
        }
      if (partners.empty()) continue;
      double best = partners.front().second;
      for (const auto& p : partners) best = std::max(best, p.second);
      for (const auto& p : partners)
        if (p.second == best) out.scores[p.first] += best;
    }
  return out;
}

}  // namespace

HubScoreTable inlet_scores(const SimilarityTable& table) {
  return hub_scores(table, HubDirection::kInlet);
}

HubScoreTable outlet_scores(const SimilarityTable& table) {
  return hub_scores(table, HubDirection::kOutlet);
}

double KlHeatmap::at(PairingType p) const {
  return kl(static_cast<int>(p.source), static_cast<int>(p.target));
}

void KlHeatmap::write_csv(std::ostream& os) const {
  os << "source";
  for (WeightType t : kAllWeightTypes) os << ',' << to_char(t);
  os << '\n';
  for (WeightType s : kAllWeightTypes) {
    os << to_char(s);
    for (WeightType t : kAllWeightTypes)
      os << ',' << fmt(kl(static_cast<int>(s), static_cast<int>(t)));
    os << '\n';
  }
}

nlohmann::json KlHeatmap::to_json() const {
  nlohmann::json cells = nlohmann::json::array();
  for (PairingType p : PairingType::all()) {
    const int r = static_cast<int>(p.source), c = static_cast<int>(p.target);
    cells.push_back({{"pairing", p.str()},
                     {"kl", kl(r, c)},
                     {"fitted_mean", fitted_mean(r, c)},
                     {"fitted_variance", fitted_variance(r, c)}});
  }
  return {{"reference", {{"mean", reference.mean}, {"variance", reference.variance}}},
          {"floored", floored},
          {"cells", cells}};
}

KlHeatmap kl_heatmap(const WeightStore& store, const KlOptions& opts, int threads) {
  const ModelConfig& cfg = store.config();
  KlHeatmap out;
  out.reference = tight_reference(cfg.d_model, cfg.d_head);
  Gaussian ref = out.reference.gaussian();
  ref.variance = std::max(ref.variance, opts.variance_floor);
  for (PairingType p : PairingType::all()) {
    const SimilarityTable t =
        score_all_pairs(store, Metric::kPK, p, PairMode::kStrictEarlier, threads);
    const auto emp = EmpiricalDistribution::from_samples(t.scores);
    Gaussian fit = emp.gaussian();
    if (fit.variance < opts.variance_floor) {
      fit.variance = opts.variance_floor;
      out.floored.push_back(p.str());
    }
    const int r = static_cast<int>(p.source), c = static_cast<int>(p.target);
    out.fitted_mean(r, c) = emp.fitted_mean;
    out.fitted_variance(r, c) = emp.fitted_variance;
    out.kl(r, c) = opts.direction == KlDirection::kFitVsReference ? gaussian_kl(fit, ref)
                                                                  : gaussian_kl(ref, fit);
  }
  return out;
}

}  // namespace headsim
