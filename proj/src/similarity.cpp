#include "headsim/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <ostream>

#include <Eigen/QR>
#include <Eigen/SVD>

#include "headsim/error.hpp"
#include "headsim/parallel.hpp"
#include "headsim/subspace.hpp"

namespace headsim {

std::string to_string(Metric m) {
  switch (m) {
    case Metric::kPK: return "pk";
    case Metric::kCS: return "cs";
    case Metric::kSimpleCS: return "simple-cs";
    case Metric::kLinearCKA: return "cka";
    case Metric::kProcrustes: return "procrustes";
  }
  return "?";
}

Metric metric_from_string(const std::string& s) {
  for (Metric m : {Metric::kPK, Metric::kCS, Metric::kSimpleCS, Metric::kLinearCKA,
                   Metric::kProcrustes})
    if (to_string(m) == s) return m;
  throw InvalidArgument("unknown metric '" + s + "'");
}

std::string to_string(PairMode m) {
  return m == PairMode::kStrictEarlier ? "strict_earlier" : "same_type";
}

PairMode pair_mode_from_string(const std::string& s) {
  if (s == "strict_earlier" || s == "strict") return PairMode::kStrictEarlier;
  if (s == "same_type" || s == "same") return PairMode::kSameType;
  throw InvalidArgument("unknown pair mode '" + s + "'");
}

namespace {

using WT = WeightType;

// (X, Y) generator types of the factorization X Y^T for a role on one side.
std::pair<WT, WT> factor_types(WT role, Side side) {
  const bool src = side == Side::kSource;
  switch (role) {
    case WT::Q: return src ? std::pair{WT::Q, WT::K} : std::pair{WT::K, WT::Q};
    case WT::K: return src ? std::pair{WT::K, WT::Q} : std::pair{WT::Q, WT::K};
    case WT::V: return src ? std::pair{WT::V, WT::O} : std::pair{WT::O, WT::V};
    case WT::O: return src ? std::pair{WT::O, WT::V} : std::pair{WT::V, WT::O};
  }
  throw InvalidArgument("bad weight type");
}

// tr(A B) for symmetric B.
double trace_product(const Matrix& a, const Matrix& b) { return a.cwiseProduct(b).sum(); }

// CS of X_t Y_t^T against X_s Y_s^T given the generators and their Grams.
double factored_cs(const Matrix& yt, const Matrix& xs, const Matrix& gxt, const Matrix& gyt,
                   const Matrix& gxs, const Matrix& gys) {
  const double den2 = trace_product(gxt, gyt) * trace_product(gxs, gys);
  if (!(den2 > 0)) return 0.0;
  const Matrix m = yt.transpose() * xs;
  const double num2 = trace_product(m.transpose() * gxt * m, gys);
  return std::clamp(std::sqrt(std::max(num2, 0.0) / den2), 0.0, 1.0);
}

Matrix thin_r(const Matrix& w) {
  Eigen::HouseholderQR<Matrix> qr(w);
  const Eigen::Index k = std::min(w.rows(), w.cols());
  return qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
}

double procrustes_from_r(const Matrix& rs, const Matrix& rt, double ss, double tt) {
  const double den = ss + tt;
  if (!(den > 0)) throw NumericalError("procrustes similarity: both inputs are zero");
  const Matrix cross = rs * rt.transpose();
  const double nuclear = Eigen::JacobiSVD<Matrix>(cross).singularValues().sum();
  return std::clamp(2.0 * nuclear / den, 0.0, 1.0);
}

double cka_from_grams(const Matrix& ga, const Matrix& gb) {
  const double na = ga.norm(), nb = gb.norm();
  if (!(na > 0) || !(nb > 0)) throw NumericalError("linear CKA: centered weight is zero");
  return std::clamp(trace_product(ga, gb) / (na * nb), 0.0, 1.0);
}

void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InvalidArgument(std::string(what) + ": shape mismatch");
}

}  // namespace

FactoredMatrix composition_factors(const HeadGenerators& g, WeightType role, Side side) {
  const auto [x, y] = factor_types(role, side);
  return {g.get(x), g.get(y)};
}

Matrix composition_matrix(const HeadGenerators& g, WeightType role, Side side) {
  return composition_factors(g, role, side).dense();
}

Matrix composition_matrix(const TensorBundle& bundle, const HeadId& head, WeightType role,
                          Side side) {
  const auto [x, y] = factor_types(role, side);
  return bundle.get_weight({head, x}) * bundle.get_weight({head, y}).transpose();
}

double composition_score(const Matrix& wt, const Matrix& ws) {
  if (wt.cols() != ws.rows()) throw InvalidArgument("composition_score: shape mismatch");
  const double den = wt.norm() * ws.norm();
  if (!(den > 0)) return 0.0;
  return std::clamp((wt * ws).norm() / den, 0.0, 1.0);
}

double composition_score(const FactoredMatrix& wt, const FactoredMatrix& ws) {
  if (wt.y.rows() != ws.x.rows()) throw InvalidArgument("composition_score: shape mismatch");
  auto gram = [](const Matrix& m) -> Matrix { return m.transpose() * m; };
  return factored_cs(wt.y, ws.x, gram(wt.x), gram(wt.y), gram(ws.x), gram(ws.y));
}

double simple_cs(const Matrix& ws, const Matrix& wt) {
  if (ws.rows() != wt.rows()) throw InvalidArgument("simple_cs: shape mismatch");
  const double den = wt.norm() * ws.norm();
  if (!(den > 0)) return 0.0;
  return std::clamp((wt.transpose() * ws).norm() / den, 0.0, 1.0);
}

double linear_cka(const Matrix& ws, const Matrix& wt) {
  check_same_shape(ws, wt, "linear_cka");
  const Matrix cs = center_rows(ws), ct = center_rows(wt);
  return cka_from_grams(cs.transpose() * cs, ct.transpose() * ct);
}

double procrustes_similarity(const Matrix& ws, const Matrix& wt) {
  check_same_shape(ws, wt, "procrustes_similarity");
  return procrustes_from_r(thin_r(ws), thin_r(wt), ws.squaredNorm(), wt.squaredNorm());
}

std::vector<HeadPair> enumerate_pairs(const ModelConfig& cfg, PairMode mode) {
  cfg.validate();
  std::vector<HeadPair> out;
  for (int ls = 0; ls < cfg.n_layers; ++ls)
    for (int hs = 0; hs < cfg.n_heads; ++hs) {
      const HeadId src{ls, hs};
      if (mode == PairMode::kSameType)
        for (int ht = hs + 1; ht < cfg.n_heads; ++ht) out.push_back({src, {ls, ht}});
      for (int lt = ls + 1; lt < cfg.n_layers; ++lt)
        for (int ht = 0; ht < cfg.n_heads; ++ht) out.push_back({src, {lt, ht}});
    }
  return out;  // generated in (source, target) order
}

struct WeightStore::Slot {
  std::once_flag gen_once, basis_once, gram_once, cgram_once, r_once;
  Matrix gen, basis, gram, cgram, r;
};

WeightStore::WeightStore(ModelConfig cfg, Loader loader)
    : cfg_(cfg), loader_(std::move(loader)) {
  cfg_.validate();
  slots_.resize(static_cast<std::size_t>(cfg_.total_heads()) * 4);
  for (auto& s : slots_) s = std::make_unique<Slot>();
}

WeightStore::~WeightStore() = default;
WeightStore::WeightStore(WeightStore&&) noexcept = default;
WeightStore& WeightStore::operator=(WeightStore&&) noexcept = default;

WeightStore WeightStore::from_bundle(const TensorBundle& bundle, bool preprocessed,
                                     const PreprocessOptions& opts) {
  return WeightStore(bundle.config(), [bundle, preprocessed, opts](const WeightRef& ref) {
    Matrix g = bundle.get_weight(ref);
    if (!preprocessed) return g;
    if (ref.wtype == WeightType::O) {
      if (opts.center_writes) g = center_columns(g);
    } else if (opts.fold_ln) {
      const std::string gn = names::ln1_gamma(ref.head.layer);
      if (!bundle.has(gn)) throw BundleError("LN folding requested but " + gn + " is missing");
      const Vector gamma = bundle.read_vector(gn);
      if (gamma.size() != g.rows()) throw BundleError(gn + ": length does not match d_model");
      g = center_columns(gamma.asDiagonal() * g);
    }
    return g;
  });
}

WeightStore WeightStore::from_generators(ModelConfig cfg, std::vector<HeadGenerators> heads) {
  cfg.validate();
  if (static_cast<int>(heads.size()) != cfg.total_heads())
    throw InvalidArgument("from_generators: expected one entry per head");
  for (const auto& h : heads)
    for (WeightType t : kAllWeightTypes)
      if (h.get(t).rows() != cfg.d_model || h.get(t).cols() != cfg.d_head)
        throw InvalidArgument("from_generators: generator must be d_model x d_head");
  auto shared = std::make_shared<std::vector<HeadGenerators>>(std::move(heads));
  const int n_heads = cfg.n_heads;
  return WeightStore(cfg, [shared, n_heads](const WeightRef& ref) {
    return (*shared)[ref.head.layer * n_heads + ref.head.head].get(ref.wtype);
  });
}

WeightStore::Slot& WeightStore::slot(const WeightRef& ref) const {
  if (ref.head.layer < 0 || ref.head.layer >= cfg_.n_layers || ref.head.head < 0 ||
      ref.head.head >= cfg_.n_heads)
    throw InvalidArgument("weight reference out of range: " + ref.str());
  return *slots_[ref.head.index(cfg_) * 4 + static_cast<int>(ref.wtype)];
}

const Matrix& WeightStore::generator(const WeightRef& ref) const {
  Slot& s = slot(ref);
  std::call_once(s.gen_once, [&] { s.gen = loader_(ref); });
  return s.gen;
}

const Matrix& WeightStore::basis(const WeightRef& ref) const {
  Slot& s = slot(ref);
  std::call_once(s.basis_once, [&] {
    try {
      s.basis = orthonormalize(generator(ref)).basis();
    } catch (const NumericalError& e) {
      throw NumericalError(ref.str() + ": " + e.what());
    }
  });
  return s.basis;
}

const Matrix& WeightStore::gram(const WeightRef& ref) const {
  Slot& s = slot(ref);
  std::call_once(s.gram_once, [&] {
    const Matrix& g = generator(ref);
    s.gram = g.transpose() * g;
  });
  return s.gram;
}

const Matrix& WeightStore::centered_gram(const WeightRef& ref) const {
  Slot& s = slot(ref);
  std::call_once(s.cgram_once, [&] {
    const Matrix c = center_rows(generator(ref));
    s.cgram = c.transpose() * c;
  });
  return s.cgram;
}

const Matrix& WeightStore::r_factor(const WeightRef& ref) const {
  Slot& s = slot(ref);
  std::call_once(s.r_once, [&] { s.r = thin_r(generator(ref)); });
  return s.r;
}

HeadGenerators WeightStore::head(const HeadId& h) const {
  return {generator({h, WeightType::Q}), generator({h, WeightType::K}),
          generator({h, WeightType::V}), generator({h, WeightType::O})};
}

double score_pair(const WeightStore& store, Metric metric, PairingType pairing,
                  const HeadPair& pair) {
  const WeightRef src{pair.source, pairing.source};
  const WeightRef dst{pair.target, pairing.target};
  switch (metric) {
    case Metric::kPK:
      return std::min<double>(
          projection_kernel_unchecked(store.basis(src), store.basis(dst)), store.config().d_head);
    case Metric::kCS: {
      const auto [xs, ys] = factor_types(pairing.source, Side::kSource);
      const auto [xt, yt] = factor_types(pairing.target, Side::kTarget);
      const HeadId s = pair.source, t = pair.target;
      return factored_cs(store.generator({t, yt}), store.generator({s, xs}),
                         store.gram({t, xt}), store.gram({t, yt}), store.gram({s, xs}),
                         store.gram({s, ys}));
    }
    case Metric::kSimpleCS:
      return simple_cs(store.generator(src), store.generator(dst));
    case Metric::kLinearCKA:
      try {
        return cka_from_grams(store.centered_gram(src), store.centered_gram(dst));
      } catch (const NumericalError& e) {
        throw NumericalError(src.str() + " vs " + dst.str() + ": " + e.what());
      }
    case Metric::kProcrustes:
      return procrustes_from_r(store.r_factor(src), store.r_factor(dst),
                               store.gram(src).trace(), store.gram(dst).trace());
  }
  throw InvalidArgument("bad metric");
}

std::optional<double> SimilarityTable::find(const HeadPair& p) const {
  const auto it = std::lower_bound(pairs.begin(), pairs.end(), p);
  if (it == pairs.end() || *it != p) return std::nullopt;
  return scores[it - pairs.begin()];
}

double SimilarityTable::at(const HeadPair& p) const {
  const auto v = find(p);
  if (!v)
    throw InvalidArgument("pair " + p.source.str() + "->" + p.target.str() + " not in table");
  return *v;
}

void SimilarityTable::write_csv(std::ostream& os, bool header) const {
  if (header) os << "pairing,metric,src_layer,src_head,dst_layer,dst_head,score\n";
  const std::string prefix = pairing.str() + "," + to_string(metric) + ",";
  char buf[64];
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", scores[i]);
    os << prefix << pairs[i].source.layer << ',' << pairs[i].source.head << ','
       << pairs[i].target.layer << ',' << pairs[i].target.head << ',' << buf << '\n';
  }
}

nlohmann::json SimilarityTable::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < pairs.size(); ++i)
    rows.push_back({{"src", pairs[i].source.str()},
                    {"dst", pairs[i].target.str()},
                    {"score", scores[i]}});
  return {{"metric", to_string(metric)},
          {"pairing", pairing.str()},
          {"pair_mode", to_string(mode)},
          {"scores", std::move(rows)}};
}

SimilarityTable score_all_pairs(const WeightStore& store, Metric metric, PairingType pairing,
                                PairMode mode, int threads) {
  SimilarityTable t{metric, pairing, mode, store.config(),
                    enumerate_pairs(store.config(), mode), {}};
  t.scores.assign(t.pairs.size(), 0.0);

  std::vector<std::size_t> row_start;
  for (std::size_t i = 0; i < t.pairs.size(); ++i)
    if (i == 0 || t.pairs[i].source != t.pairs[i - 1].source) row_start.push_back(i);
  row_start.push_back(t.pairs.size());

  parallel_for(row_start.size() - 1, threads, [&](std::size_t r) {
    for (std::size_t i = row_start[r]; i < row_start[r + 1]; ++i)
      t.scores[i] = score_pair(store, metric, pairing, t.pairs[i]);
  });
  return t;
}

std::vector<LayerNormStats> layerwise_frobenius_stats(const WeightStore& store) {
  const ModelConfig& cfg = store.config();
  std::vector<LayerNormStats> out(cfg.n_layers);
  auto mean_std = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = 0;
    for (double x : v) mean += x;
    mean /= v.size();
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    sd = std::sqrt(var / v.size());
  };
  for (int l = 0; l < cfg.n_layers; ++l) {
    std::vector<double> qk, ov;
    for (int h = 0; h < cfg.n_heads; ++h) {
      const HeadId id{l, h};
      qk.push_back(std::sqrt(std::max(
          0.0, trace_product(store.gram({id, WT::Q}), store.gram({id, WT::K})))));
      ov.push_back(std::sqrt(std::max(
          0.0, trace_product(store.gram({id, WT::O}), store.gram({id, WT::V})))));
    }
    mean_std(qk, out[l].qk_mean, out[l].qk_std);
    mean_std(ov, out[l].ov_mean, out[l].ov_std);
  }
  return out;
}

}  // namespace headsim
