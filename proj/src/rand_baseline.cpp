#include "headsim/rand_baseline.hpp"

#include <algorithm>
#include <numbers>

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include "headsim/error.hpp"
#include "headsim/parallel.hpp"

namespace headsim {

namespace {

constexpr std::uint32_t kM0 = 0xD2511F53, kM1 = 0xCD9E8D57;
constexpr std::uint32_t kW0 = 0x9E3779B9, kW1 = 0xBB67AE85;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

void check_dims(int d, int m) {
  if (m < 1 || d < 1 || m > d)
    throw InvalidArgument("need 1 <= m <= d (got d=" + std::to_string(d) +
                          ", m=" + std::to_string(m) + ")");
}

Matrix gaussian_matrix(int rows, int cols, Philox4x32& rng) {
  Matrix g(rows, cols);
  for (Eigen::Index j = 0; j < g.cols(); ++j)
    for (Eigen::Index i = 0; i < g.rows(); ++i) g(i, j) = rng.normal();
  return g;
}

struct Accum {
  long n = 0;
  double sum = 0, sum_sq = 0;

  void add(double x) {
    ++n;
    sum += x;
    sum_sq += x * x;
  }
  void merge(const Accum& o) {
    n += o.n;
    sum += o.sum;
    sum_sq += o.sum_sq;
  }
  double mean() const { return sum / n; }
  double std_error() const {
    if (n < 2) return 0.0;
    const double mu = mean();
    const double var = std::max(0.0, (sum_sq - n * mu * mu) / (n - 1));
    return std::sqrt(var / n);
  }
};

}  // namespace

Philox4x32::Philox4x32(std::uint64_t seed, std::uint64_t stream)
    : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
      ctr_{0, 0, static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)} {}

std::array<std::uint32_t, 4> Philox4x32::block(std::array<std::uint32_t, 4> c,
                                               std::array<std::uint32_t, 2> k) {
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      k[0] += kW0;
      k[1] += kW1;
    }
    const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * c[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * c[2];
    c = {static_cast<std::uint32_t>(p1 >> 32) ^ c[1] ^ k[0], static_cast<std::uint32_t>(p1),
         static_cast<std::uint32_t>(p0 >> 32) ^ c[3] ^ k[1], static_cast<std::uint32_t>(p0)};
  }
  return c;
}

void Philox4x32::refill() {
  buf_ = block(ctr_, key_);
  if (++ctr_[0] == 0) ++ctr_[1];
  pos_ = 0;
}

std::uint32_t Philox4x32::next_u32() {
  if (pos_ == 4) refill();
  return buf_[pos_++];
}

double Philox4x32::uniform() {
  const std::uint64_t hi = next_u32(), lo = next_u32();
  const std::uint64_t bits = ((hi << 32) | lo) >> 11;
  return (static_cast<double>(bits) + 0.5) * 0x1p-53;
}

double Philox4x32::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  const double r = std::sqrt(-2.0 * std::log(uniform()));
  const double t = 2.0 * std::numbers::pi * uniform();
  spare_ = r * std::sin(t);
  have_spare_ = true;
  return r * std::cos(t);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return splitmix64(splitmix64(seed) ^ h);
}

Matrix sample_stiefel_matrix(int d, int m, Philox4x32& rng) {
  check_dims(d, m);
  const Matrix g = gaussian_matrix(d, m, rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(d, m);
  const auto& r = qr.matrixQR();
  for (int j = 0; j < m; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  return q;
}

Subspace sample_stiefel(int d, int m, std::uint64_t seed, std::uint64_t stream) {
  Philox4x32 rng(seed, stream);
  return Subspace::from_orthonormal(sample_stiefel_matrix(d, m, rng));
}

PkReferenceDistribution tight_reference(int d, int m) {
  if (d < 2) throw InvalidArgument("tight_reference: d must be at least 2");
  check_dims(d, m);
  const double dd = d, mm = m;
  return {mm * mm / dd,
          2.0 * mm * mm * (dd - mm) * (dd - mm) / (dd * dd * (dd - 1) * (dd + 2)),
          ReferenceKind::kTight};
}

PkReferenceDistribution loose_reference(int d, int m) {
  check_dims(d, m);
  const double dd = d, mm = m;
  return {mm * mm / dd, 2.0 * mm * mm / (dd * dd), ReferenceKind::kLoose};
}

EmpiricalDistribution EmpiricalDistribution::from_samples(std::vector<double> samples) {
  if (samples.empty()) throw InvalidArgument("empirical distribution needs at least one sample");
  EmpiricalDistribution e;
  e.samples = std::move(samples);
  const double n = e.samples.size();
  double mean = 0;
  for (double x : e.samples) mean += x;
  mean /= n;
  double ss = 0;
  for (double x : e.samples) ss += (x - mean) * (x - mean);
  e.fitted_mean = mean;
  e.fitted_variance = e.samples.size() > 1 ? ss / (n - 1) : 0.0;
  return e;
}

EmpiricalDistribution empirical_pk_distribution(int d, int m, int n_pairs, std::uint64_t seed,
                                                int threads) {
  check_dims(d, m);
  if (n_pairs <= 0) throw InvalidArgument("empirical_pk_distribution: n_pairs must be positive");
  const std::uint64_t base = derive_seed(seed, "pk-pairs");
  std::vector<double> pk(n_pairs);
  // The PK law is invariant under rotating both subspaces, so the second
  // subspace is fixed to span(e_1..e_m). For A = span(G) with Gaussian G,
  // PK = tr((G^T G)^{-1} G_top^T G_top) where G_top holds the first m rows.
  parallel_for(n_pairs, threads, [&](std::size_t i) {
    Philox4x32 rng(base, i);
    const Matrix g = gaussian_matrix(d, m, rng);
    Matrix gram = Matrix::Zero(m, m);
    gram.selfadjointView<Eigen::Lower>().rankUpdate(g.transpose());
    Matrix top = Matrix::Zero(m, m);
    top.selfadjointView<Eigen::Lower>().rankUpdate(g.topRows(m).transpose());
    const Matrix top_full = top.selfadjointView<Eigen::Lower>();
    const Eigen::LLT<Matrix> llt(gram.selfadjointView<Eigen::Lower>());
    if (llt.info() != Eigen::Success) throw NumericalError("random Gram not positive definite");
    pk[i] = std::clamp(llt.solve(top_full).trace(), 0.0, static_cast<double>(m));
  });
  return EmpiricalDistribution::from_samples(std::move(pk));
}

double MomentEstimate::z() const {
  const double diff = estimate - expected;
  if (std_error > 0) return diff / std_error;
  return diff == 0 ? 0.0 : std::copysign(INFINITY, diff);
}

bool MomentReport::ok(double limit) const {
  for (const auto& m : moments)
    if (m.flagged(limit)) return false;
  return max_row_norm_error < 1e-10;
}

MomentReport moment_oracles(int d, long n_samples, std::uint64_t seed, int threads) {
  if (d < 2) throw InvalidArgument("moment_oracles: d must be at least 2");
  if (n_samples < 2) throw InvalidArgument("moment_oracles: need at least 2 samples");
  const int k = std::max(1, std::min(4, d / 2));
  const std::uint64_t base = derive_seed(seed, "moments");

  const int workers = std::max<long>(1, std::min<long>(resolve_threads(threads), n_samples));
  std::vector<std::array<Accum, 4>> parts(workers);
  parallel_for(workers, workers, [&](std::size_t w) {
    auto& acc = parts[w];
    for (long s = static_cast<long>(w); s < n_samples; s += workers) {
      Philox4x32 rng(base, s);
      const Matrix q = sample_stiefel_matrix(d, k, rng);
      const Matrix sq = q.topRows(k).array().square();
      double m2 = 0, m4 = 0, same = 0, diff = 0;
      long n_same = 0, n_diff = 0;
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          m2 += sq(i, j);
          m4 += sq(i, j) * sq(i, j);
          for (int i2 = 0; i2 < k; ++i2)
            for (int j2 = 0; j2 < k; ++j2) {
              if (i2 == i && j2 > j) {
                same += sq(i, j) * sq(i2, j2);
                ++n_same;
              } else if (i2 > i && j2 != j) {
                diff += sq(i, j) * sq(i2, j2);
                ++n_diff;
              }
            }
        }
      acc[0].add(m2 / (k * k));
      acc[1].add(m4 / (k * k));
      if (n_same) acc[2].add(same / n_same);
      if (n_diff) acc[3].add(diff / n_diff);
    }
  });
  std::array<Accum, 4> total;
  for (const auto& p : parts)
    for (int i = 0; i < 4; ++i) total[i].merge(p[i]);

  const double dd = d;
  const double inv_d2 = 1.0 / (dd * dd);
  MomentReport rep;
  rep.d = d;
  rep.n_samples = n_samples;
  rep.moments.push_back({"E[R^2]", 1.0 / dd, total[0].mean(), total[0].std_error()});
  rep.moments.push_back(
      {"E[R^4]", 3.0 / (dd * (dd + 2)), total[1].mean(), total[1].std_error()});
  if (total[2].n > 0)
    rep.moments.push_back({"Cov(R_ij^2,R_ij'^2)", -2.0 / (dd * dd * (dd + 2)),
                           total[2].mean() - inv_d2, total[2].std_error()});
  if (total[3].n > 0)
    rep.moments.push_back({"Cov(R_ij^2,R_i'j'^2)", 2.0 / (dd * dd * (dd - 1) * (dd + 2)),
                           total[3].mean() - inv_d2, total[3].std_error()});

  // Row norms of full square samples.
  const int n_full = d <= 64 ? 4 : 1;
  for (int s = 0; s < n_full; ++s) {
    Philox4x32 rng(derive_seed(seed, "moments-rows"), s);
    const Matrix r = sample_stiefel_matrix(d, d, rng);
    rep.max_row_norm_error = std::max(
        rep.max_row_norm_error, (r.rowwise().squaredNorm().array() - 1.0).abs().maxCoeff());
  }
  return rep;
}

double gaussian_kl(const Gaussian& p, const Gaussian& q) {
  if (!(p.variance > 0) || !(q.variance > 0))
    throw InvalidArgument("gaussian_kl: variances must be positive");
  const double diff = p.mean - q.mean;
  return 0.5 * std::log(q.variance / p.variance) +
         (p.variance + diff * diff) / (2.0 * q.variance) - 0.5;
}

double ks_statistic_normal(std::vector<double> samples, double mean, double sd) {
  if (samples.empty()) throw InvalidArgument("ks_statistic_normal: no samples");
  if (!(sd > 0)) throw InvalidArgument("ks_statistic_normal: sd must be positive");
  std::sort(samples.begin(), samples.end());
  const double n = samples.size();
  double dmax = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double f = 0.5 * std::erfc(-(samples[i] - mean) / (sd * std::numbers::sqrt2));
    dmax = std::max({dmax, f - i / n, (i + 1) / n - f});
  }
  return dmax;
}

}  // namespace headsim
