#include "headsim/unembed.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <Eigen/QR>
#include <Eigen/SVD>

#include "headsim/error.hpp"
#include "headsim/evaluation.hpp"
#include "headsim/parallel.hpp"

namespace headsim {

std::string to_string(UnembedPrep p) {
  switch (p) {
    case UnembedPrep::kIdentity: return "identity";
    case UnembedPrep::kCenter: return "center";
    case UnembedPrep::kNormalize: return "normalize";
    case UnembedPrep::kCenterNormalize: return "center-normalize";
  }
  return "?";
}

UnembedPrep unembed_prep_from_string(const std::string& s) {
  for (UnembedPrep p : kAllUnembedPreps)
    if (to_string(p) == s) return p;
  throw InvalidArgument("unknown unembedding preprocessing '" + s + "'");
}

Matrix ln_final_transform(const Matrix& w, const LnParams& ln) {
  ln.check(w.rows());
  Matrix out(w.rows(), w.cols());
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    const Vector c = w.col(j).array() - w.col(j).mean();
    const double sd = std::sqrt(c.squaredNorm() / w.rows());
    if (!(sd > 1e-12))
      throw NumericalError("ln_final_transform: column " + std::to_string(j) +
                           " has zero variance");
    out.col(j) = (c / sd).cwiseProduct(ln.gamma) + ln.beta;
  }
  return out;
}

namespace {

bool centers(UnembedPrep p) {
  return p == UnembedPrep::kCenter || p == UnembedPrep::kCenterNormalize;
}
bool normalizes(UnembedPrep p) {
  return p == UnembedPrep::kNormalize || p == UnembedPrep::kCenterNormalize;
}

// Norms of the columns, with 0 mapped to 0 after division.
Vector safe_inverse(const Vector& norms) {
  return norms.unaryExpr([](double n) { return n > 0 ? 1.0 / n : 0.0; });
}

// ||P f(e_t)|| from the projected raw columns Q^T E and Q^T e_mean.
Vector logits_from_projection(const Matrix& qte, const Vector& qtm, const Vector& norm,
                              const Vector& centered_norm, UnembedPrep prep) {
  Vector n = centers(prep) ? Vector((qte.colwise() - qtm).colwise().norm().transpose())
                           : Vector(qte.colwise().norm().transpose());
  if (normalizes(prep))
    n = n.cwiseProduct(safe_inverse(centers(prep) ? centered_norm : norm));
  return n;
}

}  // namespace

Matrix preprocess_unembedding(const Matrix& e_out, UnembedPrep prep) {
  Matrix f = e_out;
  if (centers(prep)) f = center_rows(e_out);
  if (normalizes(prep)) f = f * safe_inverse(f.colwise().norm().transpose()).asDiagonal();
  return f;
}

ObliqueProjector::ObliqueProjector(const Matrix& w_tilde) {
  if (w_tilde.cols() == 0 || w_tilde.cols() > w_tilde.rows())
    throw InvalidArgument("ObliqueProjector: need 1 <= columns <= rows");
  Eigen::HouseholderQR<Matrix> qr(w_tilde);
  const Matrix r = qr.matrixQR().topRows(w_tilde.cols()).triangularView<Eigen::Upper>();
  const Vector sv = Eigen::JacobiSVD<Matrix>(r).singularValues();
  const double ratio = sv(sv.size() - 1) > 0 ? sv(0) / sv(sv.size() - 1) : INFINITY;
  if (!(ratio * ratio < 1e12))
    throw NumericalError("oblique projector: W^T W is singular (condition number >= 1e12)");
  q_ = qr.householderQ() * Matrix::Identity(w_tilde.rows(), w_tilde.cols());
}

Vector ObliqueProjector::projected_norms(const Matrix& vectors) const {
  return (q_.transpose() * vectors).colwise().norm().transpose();
}

Matrix ObliqueProjector::apply(const Matrix& vectors) const {
  return q_ * (q_.transpose() * vectors);
}

std::string display_token(const std::string& raw) {
  static const std::string marker = "\xC4\xA0";  // U+0120
  std::string out;
  for (std::size_t i = 0; i < raw.size();) {
    if (raw.compare(i, marker.size(), marker) == 0) {
      out += '_';
      i += marker.size();
    } else {
      out += raw[i++];
    }
  }
  return out;
}

nlohmann::json TokenLogitRanking::to_json() const {
  nlohmann::json top_json = nlohmann::json::array();
  for (const auto& t : top) top_json.push_back({{"id", t.id}, {"token", t.token}, {"logit", t.logit}});
  return {{"head", head.head.str()},
          {"wtype", std::string(1, to_char(head.wtype))},
          {"prep", to_string(prep)},
          {"top", top_json}};
}

TokenLogitRanking oblique_projector_logits(const Matrix& w_tilde, const Matrix& e_out,
                                           UnembedPrep prep, int top_k,
                                           const std::vector<std::string>* vocab) {
  if (e_out.rows() != w_tilde.rows())
    throw InvalidArgument("oblique_projector_logits: unembedding rows must equal d_model");
  if (vocab && static_cast<Eigen::Index>(vocab->size()) < e_out.cols())
    throw InvalidArgument("oblique_projector_logits: vocabulary shorter than unembedding");
  const ObliqueProjector proj(w_tilde);
  const Matrix qte = proj.q().transpose() * e_out;
  const Vector mean = e_out.rowwise().mean();
  const Vector qtm = proj.q().transpose() * mean;
  const Vector norm = e_out.colwise().norm().transpose();
  const Vector centered_norm = (e_out.colwise() - mean).colwise().norm().transpose();

  TokenLogitRanking out;
  out.prep = prep;
  out.logits = logits_from_projection(qte, qtm, norm, centered_norm, prep);
  std::vector<int> ids(out.logits.size());
  std::iota(ids.begin(), ids.end(), 0);
  const auto k = std::min<std::size_t>(std::max(top_k, 0), ids.size());
  std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), [&](int a, int b) {
    if (out.logits(a) != out.logits(b)) return out.logits(a) > out.logits(b);
    return a < b;
  });
  for (std::size_t i = 0; i < k; ++i)
    out.top.push_back({ids[i], vocab ? display_token((*vocab)[ids[i]]) : std::to_string(ids[i]),
                       out.logits(ids[i])});
  return out;
}

namespace {

LnParams read_ln_final(const TensorBundle& bundle) {
  if (!bundle.has(names::kLnFinalGamma) || !bundle.has(names::kLnFinalBeta))
    throw BundleError("bundle lacks ln_final.gamma / ln_final.beta");
  LnParams ln{bundle.read_vector(names::kLnFinalGamma), bundle.read_vector(names::kLnFinalBeta)};
  if (ln.gamma.size() != bundle.config().d_model || ln.beta.size() != bundle.config().d_model)
    throw BundleError("ln_final parameters must have length d_model");
  return ln;
}

Matrix read_unembed(const TensorBundle& bundle) {
  if (!bundle.has(names::kUnembed)) throw BundleError("bundle lacks unembed.W_U");
  Matrix e = bundle.read_matrix(names::kUnembed);
  if (e.rows() != bundle.config().d_model)
    throw BundleError("unembed.W_U must be d_model x vocab");
  return e;
}

}  // namespace

TokenLogitRanking project_unembedding(const TensorBundle& bundle, const WeightRef& ref,
                                      UnembedPrep prep, int top_k, bool preprocessed) {
  const WeightStore store = WeightStore::from_bundle(bundle, preprocessed);
  const Matrix w_tilde = ln_final_transform(store.generator(ref), read_ln_final(bundle));
  std::vector<std::string> vocab;
  if (bundle.has_vocab()) vocab = bundle.read_vocab();
  TokenLogitRanking r = oblique_projector_logits(w_tilde, read_unembed(bundle), prep, top_k,
                                                 bundle.has_vocab() ? &vocab : nullptr);
  r.head = ref;
  return r;
}

nlohmann::json UnembedStats::to_json() const {
  nlohmann::json j = {{"mean_cos_to_mean", mean_cos_to_mean},
                      {"rho_norm_beta", rho_norm_beta},
                      {"rho_centered_norm_beta", rho_centered_norm_beta},
                      {"rho_pre_post_normalize", rho_pre_post_normalize},
                      {"rho_centered_pre_post_normalize", rho_centered_pre_post_normalize}};
  auto summarize = [](const std::vector<double>& v) -> nlohmann::json {
    if (v.empty()) return nullptr;
    double mean = 0;
    for (double x : v) mean += x;
    mean /= v.size();
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    return {{"mean", mean}, {"std", std::sqrt(var / v.size())}, {"n", v.size()}};
  };
  nlohmann::json table = nlohmann::json::object();
  for (UnembedPrep p : kAllUnembedPreps) {
    std::map<std::string, std::vector<double>> by_type;
    for (const auto& c : cells) {
      if (c.prep != p || std::isnan(c.rho)) continue;
      by_type[std::string(1, to_char(c.head.wtype))].push_back(c.rho);
      by_type["All"].push_back(c.rho);
    }
    nlohmann::json row = nlohmann::json::object();
    for (const auto& [k, v] : by_type) row[k] = summarize(v);
    table[to_string(p)] = row;
  }
  j["projected_norm_spearman"] = table;
  return j;
}

UnembedStats unembed_stats(const TensorBundle& bundle, const std::vector<HeadId>& heads,
                           bool preprocessed, int threads) {
  const LnParams ln = read_ln_final(bundle);
  const Matrix e = read_unembed(bundle);
  const Vector mean = e.rowwise().mean();
  const Matrix centered = e.colwise() - mean;

  UnembedStats s;
  s.norm = e.colwise().norm().transpose();
  s.centered_norm = centered.colwise().norm().transpose();
  s.beta_dot = e.transpose() * ln.beta;
  s.centered_beta_dot = centered.transpose() * ln.beta;
  const double mean_norm = mean.norm();
  double cos_sum = 0;
  for (Eigen::Index t = 0; t < e.cols(); ++t)
    if (s.norm(t) > 0 && mean_norm > 0) cos_sum += e.col(t).dot(mean) / (s.norm(t) * mean_norm);
  s.mean_cos_to_mean = cos_sum / e.cols();

  auto to_std = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  auto rho = [&](const Vector& a, const Vector& b) {
    return e.cols() < 2 ? std::nan("") : spearman(to_std(a), to_std(b));
  };
  s.rho_norm_beta = rho(s.norm, s.beta_dot);
  s.rho_centered_norm_beta = rho(s.centered_norm, s.centered_beta_dot);
  s.rho_pre_post_normalize = rho(s.beta_dot, s.beta_dot.cwiseProduct(safe_inverse(s.norm)));
  s.rho_centered_pre_post_normalize =
      rho(s.centered_beta_dot, s.centered_beta_dot.cwiseProduct(safe_inverse(s.centered_norm)));

  const WeightStore store = WeightStore::from_bundle(bundle, preprocessed);
  std::vector<WeightRef> refs;
  for (const HeadId& h : heads)
    for (WeightType t : kAllWeightTypes) refs.push_back({h, t});
  std::vector<std::array<double, 4>> rhos(refs.size());
  parallel_for(refs.size(), threads, [&](std::size_t i) {
    const ObliqueProjector proj(ln_final_transform(store.generator(refs[i]), ln));
    const Matrix qte = proj.q().transpose() * e;
    const Vector qtm = proj.q().transpose() * mean;
    for (std::size_t p = 0; p < kAllUnembedPreps.size(); ++p) {
      const UnembedPrep prep = kAllUnembedPreps[p];
      const Vector logits = logits_from_projection(qte, qtm, s.norm, s.centered_norm, prep);
      rhos[i][p] = rho(centers(prep) ? s.centered_norm : s.norm, logits);
    }
  });
  for (std::size_t i = 0; i < refs.size(); ++i)
    for (std::size_t p = 0; p < kAllUnembedPreps.size(); ++p)
      s.cells.push_back({refs[i], kAllUnembedPreps[p], rhos[i][p]});
  return s;
}

}  // namespace headsim
