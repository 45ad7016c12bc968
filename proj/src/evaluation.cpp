#include "headsim/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "headsim/error.hpp"

namespace headsim {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * (i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw InvalidArgument("spearman: length mismatch");
  if (x.size() < 2) throw InvalidArgument("spearman: need at least 2 values");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = x.size();
  const double mean = (n + 1) / 2;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  if (sxx == 0 || syy == 0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

std::vector<std::size_t> rank_order(const SimilarityTable& table) {
  std::vector<std::size_t> idx(table.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) {
    if (table.scores[a] != table.scores[b]) return table.scores[a] > table.scores[b];
    return table.pairs[a] < table.pairs[b];
  });
  return idx;
}

double step_pr_auc(const std::vector<PrPoint>& curve) {
  std::vector<PrPoint> pts = curve;
  std::stable_sort(pts.begin(), pts.end(),
                   [](const PrPoint& a, const PrPoint& b) { return a.recall < b.recall; });
  double auc = 0, prev_recall = 0;
  for (std::size_t i = 0; i < pts.size();) {
    std::size_t j = i;
    double best = pts[i].precision;
    while (j + 1 < pts.size() && pts[j + 1].recall == pts[i].recall)
      best = std::max(best, pts[++j].precision);
    if (pts[i].recall > prev_recall) {
      auc += (pts[i].recall - prev_recall) * best;
      prev_recall = pts[i].recall;
    }
    i = j + 1;
  }
  return auc;
}

std::vector<PrPoint> head_detection_curve(const SimilarityTable& table,
                                          const std::set<HeadId>& positives) {
  if (positives.empty()) throw InvalidArgument("head detection: no positive heads");
  std::set<HeadId> seen;
  std::size_t hits = 0;
  std::vector<PrPoint> curve;
  curve.reserve(table.size());
  auto visit = [&](const HeadId& h) {
    if (seen.insert(h).second && positives.count(h)) ++hits;
  };
  for (std::size_t i : rank_order(table)) {
    visit(table.pairs[i].source);
    visit(table.pairs[i].target);
    curve.push_back({static_cast<double>(hits) / positives.size(),
                     static_cast<double>(hits) / seen.size()});
  }
  return curve;
}

double head_detection_pr_auc(const SimilarityTable& table, const std::set<HeadId>& positives) {
  return step_pr_auc(head_detection_curve(table, positives));
}

double head_detection_pr_auc(const SimilarityTable& table, const HeadClassAnnotations& ann) {
  return head_detection_pr_auc(table, ann.functional_heads());
}

BinaryAuc binary_auc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw InvalidArgument("binary_auc: length mismatch");
  BinaryAuc out;
  for (bool l : labels) (l ? out.positives : out.negatives)++;
  if (out.positives == 0 || out.negatives == 0)
    throw InvalidArgument("binary_auc: need both positives and negatives");

  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  double tp = 0, fp = 0, prev_recall = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? tp : fp) += 1;
      ++j;
    }
    const double recall = tp / out.positives;
    out.pr_auc += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
    i = j;
  }

  const auto ranks = average_ranks(scores);
  double pos_rank_sum = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i)
    if (labels[i]) pos_rank_sum += ranks[i];
  const double p = out.positives, n = out.negatives;
  out.roc_auc = (pos_rank_sum - p * (p + 1) / 2) / (p * n);
  return out;
}

BinaryAuc pair_classification_auc(const SimilarityTable& table, const std::set<HeadId>& cls) {
  std::vector<bool> labels(table.size());
  for (std::size_t i = 0; i < table.size(); ++i)
    labels[i] = cls.count(table.pairs[i].source) && cls.count(table.pairs[i].target);
  return binary_auc(table.scores, labels);
}

BinaryAuc pair_classification_auc(const SimilarityTable& table,
                                  const HeadClassAnnotations& ann) {
  std::vector<bool> labels(table.size(), false);
  for (const auto& [c, heads] : ann.classes) {
    if (c == HeadClass::kIdentity) continue;
    for (std::size_t i = 0; i < table.size(); ++i)
      if (heads.count(table.pairs[i].source) && heads.count(table.pairs[i].target))
        labels[i] = true;
  }
  return binary_auc(table.scores, labels);
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j = {{"metric", metric},       {"pairing", pairing},
                      {"head_class", head_class}, {"positives", positives},
                      {"pairs", pairs},         {"skipped", skipped}};
  if (!skipped) {
    j["pr_auc"] = pr_auc;
    j["roc_auc"] = roc_auc;
  }
  if (!note.empty()) j["note"] = note;
  return j;
}

nlohmann::json ClasswiseSummary::to_json() const {
  nlohmann::json cells_json = nlohmann::json::array();
  for (const auto& c : cells) cells_json.push_back(c.to_json());
  return {{"mean_pr_auc", mean_pr_auc}, {"mean_roc_auc", mean_roc_auc}, {"cells", cells_json}};
}

ClasswiseSummary classwise_mean_auc(const std::vector<SimilarityTable>& tables,
                                    const HeadClassAnnotations& ann) {
  ClasswiseSummary out;
  double pr_sum = 0, roc_sum = 0;
  std::size_t kept = 0;
  for (const auto& t : tables) {
    for (HeadClass c : kAllHeadClasses) {
      if (c == HeadClass::kIdentity) continue;
      const auto& heads = ann.heads(c);
      EvalReport r;
      r.metric = to_string(t.metric);
      r.pairing = t.pairing.str();
      r.head_class = to_string(c);
      r.pairs = t.size();
      for (const auto& p : t.pairs)
        if (heads.count(p.source) && heads.count(p.target)) ++r.positives;
      if (heads.size() < 2 || r.positives == 0 || r.positives == r.pairs) {
        r.skipped = true;
        r.note = heads.size() < 2 ? "fewer than 2 heads" : "no positive or negative pairs";
      } else {
        const BinaryAuc a = pair_classification_auc(t, heads);
        r.pr_auc = a.pr_auc;
        r.roc_auc = a.roc_auc;
        pr_sum += a.pr_auc;
        roc_sum += a.roc_auc;
        ++kept;
      }
      out.cells.push_back(std::move(r));
    }
  }
  if (kept > 0) {
    out.mean_pr_auc = pr_sum / kept;
    out.mean_roc_auc = roc_sum / kept;
  }
  return out;
}

ClasswiseSummary classwise_mean_auc(const WeightStore& store, Metric metric,
                                    const HeadClassAnnotations& ann, int threads) {
  std::vector<SimilarityTable> tables;
  for (WeightType t : kAllWeightTypes)
    tables.push_back(score_all_pairs(store, metric, {t, t}, PairMode::kSameType, threads));
  return classwise_mean_auc(tables, ann);
}

double preprocess_mse(const SimilarityTable& orig, const SimilarityTable& prep,
                      bool normalize_pk) {
  if (orig.pairs != prep.pairs) throw InvalidArgument("preprocess_mse: pair sets differ");
  if (orig.size() == 0) throw InvalidArgument("preprocess_mse: empty tables");
  const double scale = normalize_pk ? 1.0 / orig.config.d_head : 1.0;
  double sum = 0;
  for (std::size_t i = 0; i < orig.size(); ++i) {
    const double diff = (orig.scores[i] - prep.scores[i]) * scale;
    sum += diff * diff;
  }
  return sum / orig.size();
}

}  // namespace headsim
