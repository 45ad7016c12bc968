#pragma once

// Composition Score, Projection Kernel and the baseline metrics between head
// weights, plus the pairwise scoring engine over a whole model.

#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "headsim/preprocessing.hpp"
#include "headsim/tensor_io.hpp"
#include "headsim/types.hpp"

namespace headsim {

enum class Metric { kPK, kCS, kSimpleCS, kLinearCKA, kProcrustes };

// "pk", "cs", "simple-cs", "cka", "procrustes"
std::string to_string(Metric m);
Metric metric_from_string(const std::string& s);

enum class PairMode { kStrictEarlier, kSameType };

std::string to_string(PairMode m);  // "strict_earlier" / "same_type"
PairMode pair_mode_from_string(const std::string& s);

enum class Side { kSource, kTarget };

// A d x d matrix kept as X Y^T with X, Y of shape d x d_head.
struct FactoredMatrix {
  Matrix x;
  Matrix y;

  Matrix dense() const { return x * y.transpose(); }
};

// Composition matrix of one head for a role on one side of a pair:
//   source  Q: W_QK   K: W_QK^T  V: W_OV^T  O: W_OV
//   target  Q: W_QK^T K: W_QK    V: W_OV    O: W_OV^T
// with W_QK = W_Q^T W_K and W_OV = W_O W_V.
FactoredMatrix composition_factors(const HeadGenerators& g, WeightType role, Side side);
Matrix composition_matrix(const HeadGenerators& g, WeightType role, Side side);
Matrix composition_matrix(const TensorBundle& bundle, const HeadId& head,
                          WeightType role, Side side);

// ||Wt Ws||_F / (||Wt||_F ||Ws||_F); 0 when either norm is 0.
double composition_score(const Matrix& wt, const Matrix& ws);
// Same value evaluated through d_head x d_head products only.
double composition_score(const FactoredMatrix& wt, const FactoredMatrix& ws);

// CS applied to raw d x d_head weights with the target transposed:
// ||Wt^T Ws||_F / (||Wt||_F ||Ws||_F).
double simple_cs(const Matrix& ws, const Matrix& wt);

// Linear CKA of d x d_head weights centered across their d_head columns.
// Throws NumericalError when a centered weight is zero.
double linear_cka(const Matrix& ws, const Matrix& wt);

// 1 - ||Phi Ws - Wt||^2 / (||Phi Ws||^2 + ||Wt||^2) at the optimal orthogonal
// Phi, which reduces to 2 ||Ws Wt^T||_* / (||Ws||^2 + ||Wt||^2).
// Throws NumericalError when both inputs are zero.
double procrustes_similarity(const Matrix& ws, const Matrix& wt);

// Sorted by (source, target). Same-layer pairs in kSameType have
// source.head < target.head.
std::vector<HeadPair> enumerate_pairs(const ModelConfig& cfg, PairMode mode);

// Per-weight generators and derived quantities, each computed at most once.
// Safe to query from many threads.
class WeightStore {
 public:
  using Loader = std::function<Matrix(const WeightRef&)>;

  WeightStore(ModelConfig cfg, Loader loader);
  ~WeightStore();
  WeightStore(WeightStore&&) noexcept;
  WeightStore& operator=(WeightStore&&) noexcept;

  // With preprocessed=true the generators pass through LN folding and write
  // centering as configured in opts.
  static WeightStore from_bundle(const TensorBundle& bundle, bool preprocessed = false,
                                 const PreprocessOptions& opts = {});
  // heads[layer * n_heads + head]
  static WeightStore from_generators(ModelConfig cfg, std::vector<HeadGenerators> heads);

  const ModelConfig& config() const { return cfg_; }

  const Matrix& generator(const WeightRef& ref) const;
  // Orthonormal basis; rank deficiency is reported with the WeightRef.
  const Matrix& basis(const WeightRef& ref) const;
  // G^T G
  const Matrix& gram(const WeightRef& ref) const;
  // Gram of the weight after centering across its d_head columns.
  const Matrix& centered_gram(const WeightRef& ref) const;
  // R of a thin QR of the generator, so that G G'^T has the singular values
  // of R R'^T.
  const Matrix& r_factor(const WeightRef& ref) const;
  HeadGenerators head(const HeadId& h) const;

 private:
  struct Slot;
  Slot& slot(const WeightRef& ref) const;

  ModelConfig cfg_;
  Loader loader_;
  std::vector<std::unique_ptr<Slot>> slots_;
};

double score_pair(const WeightStore& store, Metric metric, PairingType pairing,
                  const HeadPair& pair);

struct SimilarityTable {
  Metric metric = Metric::kPK;
  PairingType pairing;
  PairMode mode = PairMode::kStrictEarlier;
  ModelConfig config;
  std::vector<HeadPair> pairs;  // sorted
  std::vector<double> scores;   // aligned with pairs

  std::size_t size() const { return pairs.size(); }
  std::optional<double> find(const HeadPair& p) const;
  double at(const HeadPair& p) const;

  // pairing,metric,src_layer,src_head,dst_layer,dst_head,score
  void write_csv(std::ostream& os, bool header = true) const;
  nlohmann::json to_json() const;
};

// One work item per source head; threads <= 0 uses every core.
SimilarityTable score_all_pairs(const WeightStore& store, Metric metric,
                                PairingType pairing, PairMode mode, int threads = 0);

struct LayerNormStats {
  double qk_mean = 0, qk_std = 0, ov_mean = 0, ov_std = 0;
};

// Per layer, mean and population std over heads of ||W_QK||_F and ||W_OV||_F.
std::vector<LayerNormStats> layerwise_frobenius_stats(const WeightStore& store);

}  // namespace headsim
