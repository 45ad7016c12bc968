#pragma once

// Rank correlation, head-level detection PR-AUC, pair-level PR-AUC / ROC-AUC
// and the original-vs-preprocessed MSE.

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "headsim/similarity.hpp"
#include "headsim/tensor_io.hpp"

namespace headsim {

// 1-based ranks, ties share their average rank.
std::vector<double> average_ranks(const std::vector<double>& v);

// Spearman's rho with average ranks. NaN when either input is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// Indices of table.pairs by descending score; equal scores keep pair order,
// which is lexicographic in head ids.
std::vector<std::size_t> rank_order(const SimilarityTable& table);

struct PrPoint {
  double recall = 0;
  double precision = 0;
};

// Step integration: sum over recall increments of the largest precision seen
// at the new recall level.
double step_pr_auc(const std::vector<PrPoint>& curve);

// Walks pairs in rank order keeping the set of heads met so far. After each
// pair, precision = |seen & positives| / |seen| and recall = |seen &
// positives| / |positives|. Throws InvalidArgument when positives is empty.
std::vector<PrPoint> head_detection_curve(const SimilarityTable& table,
                                          const std::set<HeadId>& positives);
double head_detection_pr_auc(const SimilarityTable& table, const std::set<HeadId>& positives);
// Positives are every annotated head outside the Identity class.
double head_detection_pr_auc(const SimilarityTable& table, const HeadClassAnnotations& ann);

struct BinaryAuc {
  double pr_auc = 0;   // average precision over distinct score thresholds
  double roc_auc = 0;  // Mann-Whitney with average ranks, ties count 1/2
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

// Throws InvalidArgument without both classes present.
BinaryAuc binary_auc(const std::vector<double>& scores, const std::vector<bool>& labels);

// A pair is positive when both heads are in `cls`.
BinaryAuc pair_classification_auc(const SimilarityTable& table, const std::set<HeadId>& cls);
// A pair is positive when both heads share a non-Identity class.
BinaryAuc pair_classification_auc(const SimilarityTable& table, const HeadClassAnnotations& ann);

struct EvalReport {
  std::string metric;
  std::string pairing;
  std::string head_class;
  double pr_auc = 0;
  double roc_auc = 0;
  std::size_t positives = 0;
  std::size_t pairs = 0;
  bool skipped = false;
  std::string note;

  nlohmann::json to_json() const;
};

struct ClasswiseSummary {
  std::vector<EvalReport> cells;
  double mean_pr_auc = 0;
  double mean_roc_auc = 0;

  nlohmann::json to_json() const;
};

// One cell per (table, non-Identity class); positives are within-class
// pairs. Classes with fewer than 2 heads, or without positive pairs in the
// table, are skipped and flagged. Means run over the cells kept.
ClasswiseSummary classwise_mean_auc(const std::vector<SimilarityTable>& tables,
                                    const HeadClassAnnotations& ann);
// Same over QQ, KK, VV and OO same_type tables scored from the store.
ClasswiseSummary classwise_mean_auc(const WeightStore& store, Metric metric,
                                    const HeadClassAnnotations& ann, int threads = 0);

// Mean squared difference over identical pair sets. With normalize_pk both
// tables are divided by d_head first.
double preprocess_mse(const SimilarityTable& orig, const SimilarityTable& prep,
                      bool normalize_pk);

}  // namespace headsim
