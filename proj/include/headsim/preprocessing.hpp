#pragma once

// Output-preserving weight rewrites: LayerNorm folding into reading weights,
// centering of residual-stream writes, unembedding centering and attention
// output-bias folding. Centering matrices are never materialized; C_d acting
// on a vector subtracts its mean.

#include <filesystem>
#include <utility>

#include "headsim/tensor_io.hpp"
#include "headsim/types.hpp"

namespace headsim {

struct LnParams {
  Vector gamma;
  Vector beta;

  static LnParams identity(Eigen::Index d);
  void check(Eigen::Index d) const;
};

// C_d M: subtract each column's mean from that column.
Matrix center_columns(const Matrix& m);
// M C_n: subtract each row's mean from that row.
Matrix center_rows(const Matrix& m);
Vector center(const Vector& v);

struct AffineParams {
  Matrix weight;
  Vector bias;
};

// W_in' = W_in D_gamma C_d, b_in' = W_in beta + b_in, so that
// W_in LN(x) + b_in == W_in' LN2(x) + b_in' with LN2 the standardize-only map.
AffineParams fold_ln_into_reading(const Matrix& w_in, const Vector& b_in,
                                  const LnParams& ln);

// W_out' = C_d W_out, b_out' = C_d b_out.
AffineParams center_writing(const Matrix& w_out, const Vector& b_out);

// E_out' = E_out C_T (each row's vocabulary mean removed).
Matrix center_unembedding(const Matrix& e_out);

struct FoldedBias {
  Vector b_v;  // always zero
  Vector b_o;
};

// b_O' = W_O b_V + b_O, b_V' = 0.
FoldedBias fold_attention_bias(const Matrix& w_o, const Vector& b_v, const Vector& b_o);

struct PreprocessOptions {
  bool fold_ln = true;
  bool center_writes = true;
  bool center_unembed = true;
  bool fold_bias = true;
};

// Writes a preprocessed copy of `in` to `out` and returns it loaded. Tensors
// not touched by any step are copied byte for byte. When LN folding is on the
// output carries identity ln1 parameters, so a second pass leaves weights
// unchanged.
TensorBundle preprocess_bundle(const TensorBundle& in, const std::filesystem::path& out,
                               const PreprocessOptions& opts = {});

// In-memory variant for the d_model x d_head generators of one head (Q/K/V
// transposed, O as stored). Only the weight matrices change.
void preprocess_generators(HeadGenerators& g, const LnParams* ln1,
                           const PreprocessOptions& opts);

}  // namespace headsim
