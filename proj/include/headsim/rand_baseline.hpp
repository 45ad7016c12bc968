#pragma once

// Null model for PK: uniformly random m-dimensional subspaces of R^d, the
// Gaussian approximations of their PK distribution, and closed-form Gaussian
// KL divergence.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "headsim/subspace.hpp"
#include "headsim/types.hpp"

namespace headsim {

// Philox4x32-10 counter-based generator (Salmon et al. 2011). The 64-bit key
// is the seed; the upper 64 counter bits select an independent stream.
class Philox4x32 {
 public:
  explicit Philox4x32(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint32_t next_u32();
  // Uniform on the open interval (0, 1), 53 random bits.
  double uniform();
  // Standard normal via Box-Muller.
  double normal();

  // One raw Philox block for counter (c0..c3) under key (k0, k1).
  static std::array<std::uint32_t, 4> block(std::array<std::uint32_t, 4> ctr,
                                            std::array<std::uint32_t, 2> key);

 private:
  void refill();

  std::array<std::uint32_t, 2> key_;
  std::array<std::uint32_t, 4> ctr_;
  std::array<std::uint32_t, 4> buf_{};
  int pos_ = 4;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Subsystem seed derived from a master seed and a label (FNV-1a over the
// label mixed with the seed through splitmix64).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);

// d x m Gaussian matrix orthonormalized by Householder QR with the signs of
// diag(R) absorbed, which is Haar-distributed on the Stiefel manifold.
Matrix sample_stiefel_matrix(int d, int m, Philox4x32& rng);
Subspace sample_stiefel(int d, int m, std::uint64_t seed, std::uint64_t stream = 0);

struct Gaussian {
  double mean = 0.0;
  double variance = 1.0;
};

enum class ReferenceKind { kTight, kLoose };

struct PkReferenceDistribution {
  double mean = 0.0;
  double variance = 0.0;
  ReferenceKind kind = ReferenceKind::kTight;

  Gaussian gaussian() const { return {mean, variance}; }
};

// mean m^2/d, variance 2 m^2 (d-m)^2 / (d^2 (d-1) (d+2))
PkReferenceDistribution tight_reference(int d, int m);
// mean m^2/d, variance 2 m^2 / d^2
PkReferenceDistribution loose_reference(int d, int m);

struct EmpiricalDistribution {
  std::vector<double> samples;
  double fitted_mean = 0.0;
  double fitted_variance = 0.0;  // unbiased

  static EmpiricalDistribution from_samples(std::vector<double> samples);
  Gaussian gaussian() const { return {fitted_mean, fitted_variance}; }
};

// n_pairs independent PK values between uniformly random m-dim subspaces.
// Pair i draws from stream i of derive_seed(seed, "pk-pairs"); by rotation
// invariance one side of each pair is the coordinate span of e_1..e_m.
EmpiricalDistribution empirical_pk_distribution(int d, int m, int n_pairs,
                                                std::uint64_t seed, int threads = 0);

struct MomentEstimate {
  std::string name;
  double expected = 0.0;
  double estimate = 0.0;
  double std_error = 0.0;

  double z() const;
  bool flagged(double limit = 4.0) const { return !(std::abs(z()) <= limit); }
};

struct MomentReport {
  int d = 0;
  long n_samples = 0;
  // E[R^2], E[R^4], Cov same row, Cov different row and column.
  std::vector<MomentEstimate> moments;
  // max | sum_j R_ij^2 - 1 | over rows of full d x d samples.
  double max_row_norm_error = 0.0;

  bool ok(double limit = 4.0) const;
};

// Estimates the entry moments of a Haar orthogonal R from the top-left k x k
// block (k = min(4, d/2), at least 1) of n_samples independent d x k Stiefel
// draws. Each estimate is a per-sample block average, so its standard error
// comes from the spread across samples.
MomentReport moment_oracles(int d, long n_samples, std::uint64_t seed, int threads = 0);

// KL(p || q) for univariate Gaussians. Throws InvalidArgument on a
// nonpositive variance.
double gaussian_kl(const Gaussian& p, const Gaussian& q);

// Kolmogorov-Smirnov distance between the empirical CDF of samples and
// N(mean, sd^2).
double ks_statistic_normal(std::vector<double> samples, double mean, double sd);

}  // namespace headsim
