#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "headsim/error.hpp"
#include "headsim/evaluation.hpp"
#include "support.hpp"

using namespace headsim;

namespace {

// Average precision by recounting every item for each distinct threshold.
double ap_oracle(const std::vector<double>& s, const std::vector<bool>& y) {
  std::vector<double> thresholds = s;
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  double pos = 0;
  for (bool b : y) pos += b;
  double ap = 0, prev_recall = 0;
  for (double tau : thresholds) {
    double tp = 0, sel = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= tau) {
        ++sel;
        tp += y[i];
      }
    const double recall = tp / pos;
    ap += (recall - prev_recall) * tp / sel;
    prev_recall = recall;
  }
  return ap;
}

// Probability a random positive outranks a random negative, ties 1/2.
double roc_oracle(const std::vector<double>& s, const std::vector<bool>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] && !y[j]) {
        ++pairs;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return wins / pairs;
}

SimilarityTable table_with(const ModelConfig& cfg, PairMode mode, std::vector<double> scores = {}) {
  SimilarityTable t;
  t.config = cfg;
  t.mode = mode;
  t.pairs = enumerate_pairs(cfg, mode);
  t.scores = scores.empty() ? std::vector<double>(t.pairs.size(), 0.0) : std::move(scores);
  return t;
}

// Rebuilds the seen-head set from scratch for every prefix of the ranking.
double detection_oracle(const SimilarityTable& t, const std::set<HeadId>& positives) {
  std::vector<std::size_t> order(t.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
    return t.scores[a] > t.scores[b] || (t.scores[a] == t.scores[b] && t.pairs[a] < t.pairs[b]);
  });
  std::map<double, double> best_precision;  // recall -> max precision
  for (std::size_t k = 1; k <= order.size(); ++k) {
    std::set<HeadId> seen;
    for (std::size_t i = 0; i < k; ++i) {
      seen.insert(t.pairs[order[i]].source);
      seen.insert(t.pairs[order[i]].target);
    }
    double hits = 0;
    for (const auto& h : seen) hits += positives.count(h);
    const double recall = hits / positives.size(), precision = hits / seen.size();
    auto [it, inserted] = best_precision.emplace(recall, precision);
    if (!inserted) it->second = std::max(it->second, precision);
  }
  double auc = 0, prev = 0;
  for (const auto& [r, p] : best_precision) {
    auc += (r - prev) * p;
    prev = r;
  }
  return auc;
}

}  // namespace

TEST_CASE("Spearman") {
  CHECK(spearman({1, 2, 3, 4}, {1, 3, 2, 4}) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(spearman({3, 1, 2}, {3, 1, 2}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4, 5}, {5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(std::isnan(spearman({1, 1, 1}, {1, 2, 3})));
  CHECK_THROWS_AS(spearman({1, 2}, {1, 2, 3}), InvalidArgument);
  // Ties: ranks (1.5, 1.5, 3) against (1, 2, 3) give rho = sqrt(3)/2.
  CHECK(spearman({5, 5, 7}, {1, 2, 3}) == doctest::Approx(std::sqrt(3.0) / 2));
  CHECK(average_ranks({10, 30, 20, 30}) == std::vector<double>{1, 3.5, 2, 3.5});
}

TEST_CASE("binary AUC hand cases") {
  const auto perfect = binary_auc({0.9, 0.8, 0.1, 0.05}, {true, true, false, false});
  CHECK(perfect.pr_auc == 1.0);
  CHECK(perfect.roc_auc == 1.0);
  CHECK(perfect.positives == 2);
  CHECK(perfect.negatives == 2);

  // Hand-built 6-pair case: ranking + - + - - +.
  const std::vector<double> s = {6, 5, 4, 3, 2, 1};
  const std::vector<bool> y = {true, false, true, false, false, true};
  const auto a = binary_auc(s, y);
  CHECK(a.pr_auc == doctest::Approx((1.0 + 2.0 / 3 + 3.0 / 6) / 3).epsilon(1e-15));
  CHECK(a.roc_auc == doctest::Approx(5.0 / 9).epsilon(1e-15));

  CHECK_THROWS_AS(binary_auc({1, 2}, {true, true}), InvalidArgument);
  CHECK_THROWS_AS(binary_auc({1, 2}, {true}), InvalidArgument);
}

TEST_CASE("binary AUC matches exhaustive enumeration on small cases") {
  std::mt19937_64 rng(1);
  for (int n = 2; n <= 200; ++n) {
    for (int rep = 0; rep < 3; ++rep) {
      std::vector<double> s(n);
      std::vector<bool> y(n);
      std::uniform_int_distribution<int> level(0, rep == 0 ? 3 : 1000);  // rep 0 is tie-heavy
      for (int i = 0; i < n; ++i) {
        s[i] = level(rng) / 10.0;
        y[i] = rng() % 3 == 0;
      }
      y[0] = true;
      y[1] = false;
      const auto a = binary_auc(s, y);
      CHECK(std::abs(a.pr_auc - ap_oracle(s, y)) < 1e-12);
      CHECK(std::abs(a.roc_auc - roc_oracle(s, y)) < 1e-12);
    }
  }
}

TEST_CASE("random scores give ROC-AUC near 0.5") {
  const ModelConfig gpt2{768, 64, 12, 12, 0};
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u;
  auto t = table_with(gpt2, PairMode::kSameType);
  std::set<HeadId> cls;
  for (const char* h : {"L5H0", "L5H1", "L5H5", "L6H9", "L7H2", "L7H10"}) cls.insert(HeadId::parse(h));
  for (int seed = 0; seed < 10; ++seed) {
    for (auto& s : t.scores) s = u(rng);
    const auto a = pair_classification_auc(t, cls);
    CHECK(a.positives == 15);
    CHECK(std::abs(a.roc_auc - 0.5) < 0.3);  // 15 positives: SE about 0.075
  }
  double mean = 0;
  for (int seed = 0; seed < 40; ++seed) {
    for (auto& s : t.scores) s = u(rng);
    mean += pair_classification_auc(t, cls).roc_auc / 40;
  }
  CHECK(std::abs(mean - 0.5) < 0.1);
}

TEST_CASE("head detection PR-AUC") {
  SUBCASE("every pair joins two positives") {
    const ModelConfig cfg{4, 2, 2, 2, 0};
    auto t = table_with(cfg, PairMode::kStrictEarlier, {4, 3, 2, 1});
    std::set<HeadId> pos = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
    for (const auto& p : head_detection_curve(t, pos)) CHECK(p.precision == 1.0);
    CHECK(head_detection_pr_auc(t, pos) == 1.0);
  }
  SUBCASE("positives never appear") {
    const ModelConfig cfg{4, 2, 2, 2, 0};
    auto t = table_with(cfg, PairMode::kStrictEarlier, {4, 3, 2, 1});
    CHECK(head_detection_pr_auc(t, std::set<HeadId>{{5, 0}}) == 0.0);
    CHECK_THROWS_AS(head_detection_pr_auc(t, std::set<HeadId>{}), InvalidArgument);
  }
  SUBCASE("3-head toy with one positive") {
    // Heads L0H0, L1H0, L2H0; pairs (0->1)=0.2, (0->2)=0.9, (1->2)=0.5.
    const ModelConfig cfg{4, 2, 3, 1, 0};
    auto t = table_with(cfg, PairMode::kStrictEarlier, {0.2, 0.9, 0.5});
    // Positive L1H0 enters with the second pair: 3 heads seen, precision 1/3.
    CHECK(head_detection_pr_auc(t, std::set<HeadId>{{1, 0}}) == doctest::Approx(1.0 / 3));
    CHECK(head_detection_pr_auc(t, std::set<HeadId>{{1, 0}}) ==
          detection_oracle(t, std::set<HeadId>{{1, 0}}));
  }
  SUBCASE("random tables against the prefix oracle") {
    std::mt19937_64 rng(3);
    const ModelConfig cfg{4, 2, 4, 3, 0};
    for (int trial = 0; trial < 50; ++trial) {
      auto t = table_with(cfg, trial % 2 ? PairMode::kSameType : PairMode::kStrictEarlier);
      std::uniform_int_distribution<int> level(0, trial % 3 == 0 ? 4 : 10000);
      for (auto& s : t.scores) s = level(rng);
      std::set<HeadId> pos;
      for (int l = 0; l < 4; ++l)
        for (int h = 0; h < 3; ++h)
          if (rng() % 4 == 0) pos.insert({l, h});
      if (pos.empty()) pos.insert({2, 1});
      CHECK(std::abs(head_detection_pr_auc(t, pos) - detection_oracle(t, pos)) < 1e-12);
    }
  }
  SUBCASE("annotations overload ignores Identity") {
    const ModelConfig cfg{4, 2, 2, 2, 0};
    auto t = table_with(cfg, PairMode::kStrictEarlier, {4, 3, 2, 1});
    HeadClassAnnotations ann;
    ann.classes[HeadClass::kPrevious] = {{0, 1}};
    ann.classes[HeadClass::kIdentity] = {{0, 0}, {1, 0}};
    CHECK(head_detection_pr_auc(t, ann) == head_detection_pr_auc(t, std::set<HeadId>{{0, 1}}));
  }
}

TEST_CASE("pair classification with annotations") {
  const ModelConfig cfg{4, 2, 3, 2, 0};
  std::mt19937_64 rng(4);
  auto t = table_with(cfg, PairMode::kSameType);
  std::uniform_real_distribution<double> u;
  for (auto& s : t.scores) s = u(rng);
  HeadClassAnnotations ann;
  ann.classes[HeadClass::kPrevious] = {{0, 0}, {1, 1}};
  ann.classes[HeadClass::kNameMover] = {{1, 0}, {2, 1}};
  ann.classes[HeadClass::kIdentity] = {{0, 1}, {2, 0}};
  std::vector<bool> labels;
  for (const auto& p : t.pairs) {
    const bool prev = ann.heads(HeadClass::kPrevious).count(p.source) &&
                      ann.heads(HeadClass::kPrevious).count(p.target);
    const bool nm = ann.heads(HeadClass::kNameMover).count(p.source) &&
                    ann.heads(HeadClass::kNameMover).count(p.target);
    labels.push_back(prev || nm);
  }
  const auto a = pair_classification_auc(t, ann);
  CHECK(a.positives == 2);
  CHECK(a.pr_auc == doctest::Approx(ap_oracle(t.scores, labels)));
  CHECK(a.roc_auc == doctest::Approx(roc_oracle(t.scores, labels)));
}

TEST_CASE("classwise mean AUC") {
  const auto ann = load_annotations(testsupport::source_dir() / "data/gpt2_small_annotations.json");
  const ModelConfig gpt2{768, 64, 12, 12, 0};

  SUBCASE("Induction has 15 positive pairs in a same_type table") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u;
    std::vector<SimilarityTable> tables;
    for (const char* p : {"QQ", "KK", "VV", "OO"}) {
      auto t = table_with(gpt2, PairMode::kSameType);
      t.pairing = PairingType::parse(p);
      for (auto& s : t.scores) s = u(rng);
      tables.push_back(t);
    }
    const auto summary = classwise_mean_auc(tables, ann);
    CHECK(summary.cells.size() == 4 * 7);
    double pr = 0, roc = 0;
    for (const auto& c : summary.cells) {
      CHECK_FALSE(c.skipped);
      if (c.head_class == "Induction") CHECK(c.positives == 15);
      if (c.head_class == "NegativeNameMover") CHECK(c.positives == 1);
      if (c.head_class == "BackupNameMover") CHECK(c.positives == 28);
      pr += c.pr_auc / summary.cells.size();
      roc += c.roc_auc / summary.cells.size();
    }
    CHECK(summary.mean_pr_auc == doctest::Approx(pr));
    CHECK(summary.mean_roc_auc == doctest::Approx(roc));
    const auto j = summary.to_json();
    CHECK(j["cells"].size() == 28);
  }

  SUBCASE("classes with fewer than two heads are skipped") {
    HeadClassAnnotations small;
    small.classes[HeadClass::kPrevious] = {{0, 0}};
    small.classes[HeadClass::kInduction] = {{0, 0}, {1, 1}};
    const ModelConfig cfg{4, 2, 2, 2, 0};
    auto t = table_with(cfg, PairMode::kSameType, {1, 2, 3, 4, 5, 6});
    const auto s = classwise_mean_auc({t}, small);
    std::size_t kept = 0;
    for (const auto& c : s.cells) {
      if (c.head_class == "Previous") CHECK(c.skipped);
      if (!c.skipped) ++kept;
    }
    CHECK(kept == 1);
  }

  SUBCASE("coinciding within-class subspaces are ranked first") {
    const ModelConfig cfg{16, 2, 3, 3, 0};
    std::mt19937_64 rng(6);
    auto heads = testsupport::random_heads(cfg, rng);
    const Matrix shared = testsupport::gaussian(16, 2, rng);
    HeadClassAnnotations one;
    one.classes[HeadClass::kSInhibition] = {{0, 1}, {1, 2}, {2, 0}};
    for (const auto& h : one.heads(HeadClass::kSInhibition))
      for (WeightType t : kAllWeightTypes)
        heads[h.index(cfg)].get(t) = shared * testsupport::gaussian(2, 2, rng);
    const auto store = WeightStore::from_generators(cfg, heads);
    const auto s = classwise_mean_auc(store, Metric::kPK, one, 1);
    CHECK(s.mean_pr_auc == doctest::Approx(1.0));
    CHECK(s.mean_roc_auc == doctest::Approx(1.0));
  }
}

TEST_CASE("preprocessing MSE") {
  const ModelConfig cfg{8, 4, 3, 2, 0};
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 4);
  auto a = table_with(cfg, PairMode::kStrictEarlier);
  for (auto& s : a.scores) s = u(rng);
  CHECK(preprocess_mse(a, a, false) == 0.0);
  auto b = a;
  for (auto& s : b.scores) s += 0.25;
  CHECK(preprocess_mse(a, b, false) == doctest::Approx(0.0625));
  CHECK(preprocess_mse(a, b, true) == doctest::Approx(0.0625 / 16));
  auto c = table_with(cfg, PairMode::kSameType);
  CHECK_THROWS_AS(preprocess_mse(a, c, false), InvalidArgument);
}
