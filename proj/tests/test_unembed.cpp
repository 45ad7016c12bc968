#include <doctest.h>

#include <set>

#include <Eigen/LU>

#include "headsim/error.hpp"
#include "headsim/evaluation.hpp"
#include "headsim/unembed.hpp"
#include "support.hpp"

using namespace headsim;
using testsupport::gaussian;
using testsupport::gaussian_vec;

namespace {

Matrix explicit_projector(const Matrix& w) {
  return w * (w.transpose() * w).inverse() * w.transpose();
}

Vector f_explicit(const Vector& e, const Vector& mean, UnembedPrep prep) {
  Vector v = e;
  if (prep == UnembedPrep::kCenter || prep == UnembedPrep::kCenterNormalize) v = e - mean;
  if (prep == UnembedPrep::kNormalize || prep == UnembedPrep::kCenterNormalize) {
    const double n = v.norm();
    v = n > 0 ? Vector(v / n) : Vector::Zero(v.size());
  }
  return v;
}

Vector ln_explicit(const Vector& x, const Vector& gamma, const Vector& beta) {
  const double d = x.size();
  const double mu = x.sum() / d;
  double var = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) var += (x(i) - mu) * (x(i) - mu);
  const double sd = std::sqrt(var / d);
  Vector out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) out(i) = gamma(i) * (x(i) - mu) / sd + beta(i);
  return out;
}

}  // namespace

TEST_CASE("prep names") {
  for (UnembedPrep p : kAllUnembedPreps) CHECK(unembed_prep_from_string(to_string(p)) == p);
  CHECK(to_string(UnembedPrep::kCenterNormalize) == "center-normalize");
  CHECK_THROWS_AS(unembed_prep_from_string("whiten"), InvalidArgument);
}

TEST_CASE("ln_final_transform") {
  std::mt19937_64 rng(1);
  const int d = 9;
  Matrix w = gaussian(d, 3, rng);
  // Column 0 standardized already: mean 0, 1/d variance 1.
  w.col(0) = w.col(0).array() - w.col(0).mean();
  w.col(0) *= std::sqrt(static_cast<double>(d)) / w.col(0).norm();
  const Matrix id = ln_final_transform(w, LnParams::identity(d));
  CHECK((id.col(0) - w.col(0)).norm() < 1e-12);

  const LnParams ln{gaussian_vec(d, rng), gaussian_vec(d, rng)};
  const Matrix out = ln_final_transform(w, ln);
  for (Eigen::Index j = 0; j < 3; ++j) {
    CHECK((out.col(j) - ln_explicit(w.col(j), ln.gamma, ln.beta)).norm() < 1e-10);
    const Vector pre_beta = (out.col(j) - ln.beta).cwiseQuotient(ln.gamma);
    CHECK(std::abs(pre_beta.mean()) < 1e-10);
  }

  w.col(1).setConstant(3.0);
  try {
    ln_final_transform(w, ln);
    FAIL("expected zero-variance error");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("column 1") != std::string::npos);
  }
  CHECK_THROWS_AS(ln_final_transform(w, LnParams::identity(d + 1)), InvalidArgument);
}

TEST_CASE("unembedding preprocessing variants") {
  std::mt19937_64 rng(2);
  Matrix e = gaussian(6, 8, rng);
  const Vector mean = e.rowwise().mean();
  for (UnembedPrep p : kAllUnembedPreps) {
    const Matrix f = preprocess_unembedding(e, p);
    for (Eigen::Index t = 0; t < e.cols(); ++t)
      CHECK((f.col(t) - f_explicit(e.col(t), mean, p)).norm() < 1e-12);
  }
  // A token equal to the mean maps to zero after centering.
  Matrix two = Matrix::Zero(6, 3);
  two.col(0) = gaussian_vec(6, rng);
  two.col(2) = -two.col(0);
  const Matrix f = preprocess_unembedding(two, UnembedPrep::kCenterNormalize);
  CHECK(f.col(1).isZero());
}

TEST_CASE("oblique projector") {
  std::mt19937_64 rng(3);
  const Matrix w = gaussian(12, 4, rng);
  const ObliqueProjector p(w);
  const Matrix pe = explicit_projector(w);
  const Matrix probes = gaussian(12, 20, rng);
  CHECK((p.apply(probes) - pe * probes).norm() < 1e-10);
  CHECK((p.projected_norms(probes) - (pe * probes).colwise().norm().transpose()).norm() < 1e-10);
  // Idempotent and self-adjoint on probes.
  CHECK((p.apply(p.apply(probes)) - p.apply(probes)).norm() < 1e-8);
  const Matrix u = gaussian(12, 5, rng);
  CHECK((p.apply(u).transpose() * probes - u.transpose() * p.apply(probes)).norm() < 1e-8);

  Matrix sing = w;
  sing.col(3) = sing.col(0);
  CHECK_THROWS_AS(ObliqueProjector{sing}, NumericalError);
  Matrix ill = w;
  ill.col(3) = ill.col(0) + 1e-7 * ill.col(1);  // cond(W^T W) ~ 1e14
  CHECK_THROWS_AS(ObliqueProjector{ill}, NumericalError);
}

TEST_CASE("token logits") {
  std::mt19937_64 rng(4);
  const int d = 10, dh = 3, vocab = 30;
  const Matrix w = gaussian(d, dh, rng);
  const Matrix e = gaussian(d, vocab, rng);
  const Vector mean = e.rowwise().mean();
  const Matrix pe = explicit_projector(w);
  for (UnembedPrep prep : kAllUnembedPreps) {
    const auto r = oblique_projector_logits(w, e, prep, 5);
    for (int t = 0; t < vocab; ++t) {
      const Vector f = f_explicit(e.col(t), mean, prep);
      CHECK(std::abs(r.logits(t) - (pe * f).norm()) < 1e-10);
      CHECK(r.logits(t) <= f.norm() + 1e-12);
    }
    REQUIRE(r.top.size() == 5);
    for (std::size_t i = 1; i < r.top.size(); ++i) CHECK(r.top[i - 1].logit >= r.top[i].logit);
    CHECK(r.top[0].logit == r.logits.maxCoeff());
    CHECK(r.top[0].token == std::to_string(r.top[0].id));
    // Span-only dependence: rescaled columns give the same logits.
    Matrix scaled = w;
    scaled.col(0) *= 7.0;
    scaled.col(2) *= 0.01;
    CHECK((oblique_projector_logits(scaled, e, prep, 5).logits - r.logits).norm() < 1e-9);
  }
}

TEST_CASE("in-span and orthogonal tokens") {
  const int d = 6;
  Matrix w = Matrix::Zero(d, 2);
  w(0, 0) = 2;
  w(1, 1) = 3;
  w(0, 1) = 1;
  Matrix e = Matrix::Zero(d, 2);
  e(0, 0) = 0.6;
  e(1, 0) = 0.8;  // unit norm, inside span(e1, e2)
  e(4, 1) = 1.0;  // orthogonal
  const auto r = oblique_projector_logits(w, e, UnembedPrep::kIdentity, 2);
  CHECK(r.logits(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(r.logits(1)) < 1e-12);
  const auto n = oblique_projector_logits(w, 5.0 * e, UnembedPrep::kNormalize, 2);
  CHECK(n.logits(0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ties and display strings") {
  CHECK(display_token("\xC4\xA0" "Paris") == "_Paris");
  CHECK(display_token("a\xC4\xA0" "b\xC4\xA0") == "a_b_");
  CHECK(display_token("plain") == "plain");

  const int d = 4;
  Matrix w = Matrix::Zero(d, 1);
  w(0, 0) = 1;
  Matrix e = Matrix::Zero(d, 4);
  e(0, 0) = 1;
  e(0, 1) = 2;
  e(0, 2) = 2;
  e(1, 3) = 1;
  const std::vector<std::string> vocab = {"a", "\xC4\xA0" "b", "c", "d"};
  const auto r = oblique_projector_logits(w, e, UnembedPrep::kIdentity, 3, &vocab);
  REQUIRE(r.top.size() == 3);
  CHECK(r.top[0].id == 1);
  CHECK(r.top[0].token == "_b");
  CHECK(r.top[1].id == 2);
  CHECK(r.top[2].id == 0);
  const auto j = r.to_json();
  CHECK(j["top"][0]["token"] == "_b");
  CHECK(j["prep"] == "identity");

  const std::vector<std::string> short_vocab = {"a"};
  CHECK_THROWS_AS(oblique_projector_logits(w, e, UnembedPrep::kIdentity, 3, &short_vocab),
                  InvalidArgument);
}

namespace {

testsupport::ModelBundleSpec unembed_spec(const ModelConfig& cfg, std::mt19937_64& rng) {
  testsupport::ModelBundleSpec spec;
  spec.cfg = cfg;
  spec.heads = testsupport::random_heads(cfg, rng);
  spec.with_ln1 = true;
  for (int l = 0; l < cfg.n_layers; ++l) {
    spec.ln1_gamma.push_back(gaussian_vec(cfg.d_model, rng));
    spec.ln1_beta.push_back(gaussian_vec(cfg.d_model, rng));
  }
  spec.with_unembed = true;
  spec.ln_final_gamma = gaussian_vec(cfg.d_model, rng).cwiseAbs();
  spec.ln_final_beta = gaussian_vec(cfg.d_model, rng);
  // Share a common direction so tokens have a nonzero mean.
  spec.unembed = gaussian(cfg.d_model, cfg.vocab_size, rng);
  spec.unembed.colwise() += 0.8 * gaussian_vec(cfg.d_model, rng);
  for (int t = 0; t < cfg.vocab_size; ++t) spec.vocab.push_back("\xC4\xA0tok" + std::to_string(t));
  return spec;
}

}  // namespace

TEST_CASE("project_unembedding follows the manual pipeline") {
  testsupport::TempDir dir;
  const ModelConfig cfg{12, 3, 2, 2, 40};
  std::mt19937_64 rng(5);
  const auto spec = unembed_spec(cfg, rng);
  const auto bundle = testsupport::write_model_bundle(dir / "b", spec);
  const WeightRef ref{{1, 0}, WeightType::O};
  const LnParams ln_final{spec.ln_final_gamma, spec.ln_final_beta};

  for (bool preprocessed : {false, true}) {
    const auto r = project_unembedding(bundle, ref, UnembedPrep::kCenterNormalize, 10, preprocessed);
    Matrix g = spec.heads[ref.head.index(cfg)].o;
    if (preprocessed) g = g.rowwise() - g.colwise().mean();
    Matrix wt(cfg.d_model, cfg.d_head);
    for (int j = 0; j < cfg.d_head; ++j) wt.col(j) = ln_explicit(g.col(j), ln_final.gamma, ln_final.beta);
    const Matrix pe = explicit_projector(wt);
    const Vector mean = spec.unembed.rowwise().mean();
    for (int t = 0; t < cfg.vocab_size; ++t) {
      const Vector f = f_explicit(spec.unembed.col(t), mean, UnembedPrep::kCenterNormalize);
      CHECK(std::abs(r.logits(t) - (pe * f).norm()) < 1e-9);
      CHECK(r.logits(t) <= 1.0 + 1e-12);
    }
    CHECK(r.head == ref);
    REQUIRE(r.top.size() == 10);
    CHECK(r.top[0].token.rfind("_tok", 0) == 0);
  }
}

TEST_CASE("f32 and f64 bundles give stable top tokens") {
  testsupport::TempDir dir;
  const ModelConfig cfg{24, 4, 1, 1, 200};
  std::mt19937_64 rng(6);
  auto spec = unembed_spec(cfg, rng);
  const auto b64 = testsupport::write_model_bundle(dir / "f64", spec);
  spec.dtype = DType::kF32;
  const auto b32 = testsupport::write_model_bundle(dir / "f32", spec);
  const WeightRef ref{{0, 0}, WeightType::O};
  const auto r64 = project_unembedding(b64, ref, UnembedPrep::kCenterNormalize, 10);
  const auto r32 = project_unembedding(b32, ref, UnembedPrep::kCenterNormalize, 10);
  std::set<int> a, b, both;
  for (const auto& t : r64.top) a.insert(t.id);
  for (const auto& t : r32.top) b.insert(t.id);
  for (int id : a)
    if (b.count(id)) both.insert(id);
  const double jaccard = static_cast<double>(both.size()) / (a.size() + b.size() - both.size());
  CHECK(jaccard >= 0.8);
}

TEST_CASE("unembedding statistics") {
  testsupport::TempDir dir;
  const ModelConfig cfg{10, 2, 2, 2, 30};
  std::mt19937_64 rng(7);
  auto spec = unembed_spec(cfg, rng);
  const auto bundle = testsupport::write_model_bundle(dir / "b", spec);
  const std::vector<HeadId> heads = {{0, 1}, {1, 0}};
  const auto s = unembed_stats(bundle, heads, true, 2);

  const Matrix& e = spec.unembed;
  const Vector mean = e.rowwise().mean();
  double cos_sum = 0;
  for (int t = 0; t < cfg.vocab_size; ++t) {
    CHECK(s.norm(t) == doctest::Approx(e.col(t).norm()));
    CHECK(s.centered_norm(t) == doctest::Approx((e.col(t) - mean).norm()));
    CHECK(s.beta_dot(t) == doctest::Approx(e.col(t).dot(spec.ln_final_beta)));
    cos_sum += e.col(t).dot(mean) / (e.col(t).norm() * mean.norm());
  }
  CHECK(s.mean_cos_to_mean == doctest::Approx(cos_sum / cfg.vocab_size));
  auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  CHECK(s.rho_norm_beta == doctest::Approx(spearman(vec(s.norm), vec(s.beta_dot))));

  REQUIRE(s.cells.size() == heads.size() * 4 * 4);
  for (const auto& c : s.cells) {
    CHECK(c.rho >= -1.0);
    CHECK(c.rho <= 1.0);
  }
  // One cell recomputed by hand.
  const auto& c0 = s.cells.front();
  const auto r = project_unembedding(bundle, c0.head, c0.prep, 0, true);
  const Vector& ref_norm = c0.prep == UnembedPrep::kCenter || c0.prep == UnembedPrep::kCenterNormalize
                               ? s.centered_norm : s.norm;
  CHECK(c0.rho == doctest::Approx(spearman(vec(ref_norm), vec(r.logits))));

  const auto j = s.to_json();
  CHECK(j["projected_norm_spearman"]["center-normalize"]["All"]["n"] == 8);
  CHECK(j["projected_norm_spearman"]["identity"]["Q"]["n"] == 2);

  // beta = 0: every inner product vanishes and the correlation is undefined.
  spec.ln_final_beta.setZero();
  const auto zb = testsupport::write_model_bundle(dir / "zb", spec);
  const auto sz = unembed_stats(zb, {}, true, 1);
  CHECK(sz.beta_dot.isZero());
  CHECK(std::isnan(sz.rho_norm_beta));
  CHECK(sz.cells.empty());
}

TEST_CASE("missing unembedding tensors are bundle errors") {
  testsupport::TempDir dir;
  const ModelConfig cfg{6, 2, 1, 1, 0};
  std::mt19937_64 rng(8);
  testsupport::ModelBundleSpec spec;
  spec.cfg = cfg;
  spec.heads = testsupport::random_heads(cfg, rng);
  const auto b = testsupport::write_model_bundle(dir / "b", spec);
  CHECK_THROWS_AS(project_unembedding(b, {{0, 0}, WeightType::O}, UnembedPrep::kIdentity, 3, false),
                  BundleError);
  CHECK_THROWS_AS(unembed_stats(b, {}, false), BundleError);
}
