#pragma once

// Token interpretation of head subspaces: unembedding vectors projected onto
// the span of final-LN-transformed head weights.

#include <string>
#include <vector>

#include <json.hpp>

#include "headsim/preprocessing.hpp"
#include "headsim/similarity.hpp"
#include "headsim/tensor_io.hpp"
#include "headsim/types.hpp"

namespace headsim {

enum class UnembedPrep { kIdentity, kCenter, kNormalize, kCenterNormalize };

inline constexpr std::array<UnembedPrep, 4> kAllUnembedPreps = {
    UnembedPrep::kIdentity, UnembedPrep::kCenter, UnembedPrep::kNormalize,
    UnembedPrep::kCenterNormalize};

// "identity", "center", "normalize", "center-normalize"
std::string to_string(UnembedPrep p);
UnembedPrep unembed_prep_from_string(const std::string& s);

// LN applied to each column independently: center, divide by the 1/d
// standard deviation, scale by gamma, add beta. Throws NumericalError naming
// the column when its standard deviation is at most 1e-12.
Matrix ln_final_transform(const Matrix& w, const LnParams& ln);

// Columns f(e_t) of a d x T unembedding. A column that vanishes after
// centering maps to zero under the normalizing variants.
Matrix preprocess_unembedding(const Matrix& e_out, UnembedPrep prep);

// P = W (W^T W)^{-1} W^T held through a thin QR of W, so ||P v|| = ||Q^T v||.
class ObliqueProjector {
 public:
  // Throws NumericalError when cond(W^T W) >= 1e12.
  explicit ObliqueProjector(const Matrix& w_tilde);

  // ||P v|| for each column v.
  Vector projected_norms(const Matrix& vectors) const;
  Matrix apply(const Matrix& vectors) const;
  const Matrix& q() const { return q_; }

 private:
  Matrix q_;
};

struct TokenScore {
  int id = 0;
  std::string token;  // display form, "Ġ" replaced by "_"
  double logit = 0;
};

struct TokenLogitRanking {
  WeightRef head;
  UnembedPrep prep = UnembedPrep::kCenterNormalize;
  Vector logits;
  std::vector<TokenScore> top;  // descending, ties by ascending id

  nlohmann::json to_json() const;
};

std::string display_token(const std::string& raw);

// Logit ||P f(e_t)|| for every token and the top_k ranking.
TokenLogitRanking oblique_projector_logits(const Matrix& w_tilde, const Matrix& e_out,
                                           UnembedPrep prep, int top_k,
                                           const std::vector<std::string>* vocab = nullptr);

// Reads the head weight (optionally preprocessed), ln_final and W_U from the
// bundle and ranks tokens. W_U is used as stored.
TokenLogitRanking project_unembedding(const TensorBundle& bundle, const WeightRef& ref,
                                      UnembedPrep prep, int top_k, bool preprocessed = true);

struct UnembedStats {
  Vector norm;               // ||e_t||
  Vector centered_norm;      // ||e_t - e_mean||
  Vector beta_dot;           // e_t^T beta
  Vector centered_beta_dot;  // (e_t - e_mean)^T beta
  double mean_cos_to_mean = 0;
  double rho_norm_beta = 0;          // Spearman(||e_t||, e_t^T beta)
  double rho_centered_norm_beta = 0; // Spearman(||e_t - e_mean||, (e_t - e_mean)^T beta)
  double rho_pre_post_normalize = 0; // Spearman(e_t^T beta, (e_t/||e_t||)^T beta)
  double rho_centered_pre_post_normalize = 0;  // same after centering

  struct Cell {
    WeightRef head;
    UnembedPrep prep;
    double rho = 0;  // Spearman(unembedding norm, projected norm)
  };
  std::vector<Cell> cells;

  // mean and std of rho per prep and weight type plus "All" across types.
  nlohmann::json to_json() const;
};

// Global token statistics, plus one Spearman cell per head in `heads` x
// weight type x prep. The unembedding norm is ||e_t|| for identity/normalize
// and ||e_t - e_mean|| for the centered variants.
UnembedStats unembed_stats(const TensorBundle& bundle, const std::vector<HeadId>& heads,
                           bool preprocessed = true, int threads = 0);

}  // namespace headsim
