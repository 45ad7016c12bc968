#pragma once

// Shared helpers for the test binaries. Random draws here use the standard
// library engines so the oracles stay independent of the library's own
// generator.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/QR>

#include "headsim/tensor_io.hpp"
#include "headsim/types.hpp"

namespace testsupport {

using headsim::HeadGenerators;
using headsim::HeadId;
using headsim::Matrix;
using headsim::ModelConfig;
using headsim::Vector;
using headsim::WeightType;

inline Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& g) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(g);
  return m;
}

inline Vector gaussian_vec(Eigen::Index n, std::mt19937_64& g) { return gaussian(n, 1, g); }

// Classical Gram-Schmidt, done twice for stability.
inline Matrix gram_schmidt(Matrix a) {
  for (int pass = 0; pass < 2; ++pass)
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      for (Eigen::Index i = 0; i < j; ++i) a.col(j) -= a.col(i).dot(a.col(j)) * a.col(i);
      a.col(j).normalize();
    }
  return a;
}

inline Matrix random_orthonormal(int d, int m, std::mt19937_64& g) {
  return gram_schmidt(gaussian(d, m, g));
}

inline Matrix random_orthogonal(int d, std::mt19937_64& g) { return random_orthonormal(d, d, g); }

inline HeadGenerators random_head(int d, int dh, std::mt19937_64& g) {
  return {gaussian(d, dh, g), gaussian(d, dh, g), gaussian(d, dh, g), gaussian(d, dh, g)};
}

inline std::vector<HeadGenerators> random_heads(const ModelConfig& cfg, std::mt19937_64& g) {
  std::vector<HeadGenerators> out;
  for (int i = 0; i < cfg.total_heads(); ++i) out.push_back(random_head(cfg.d_model, cfg.d_head, g));
  return out;
}

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("headsim-test-" + std::to_string(stamp) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

struct ModelBundleSpec {
  ModelConfig cfg;
  std::vector<HeadGenerators> heads;  // layer * n_heads + head
  bool with_ln1 = false;
  std::vector<Vector> ln1_gamma, ln1_beta;  // per layer
  bool with_biases = false;
  std::vector<Vector> b_v, b_o;  // per head
  bool with_unembed = false;
  Vector ln_final_gamma, ln_final_beta;
  Matrix unembed;  // d x T
  std::vector<std::string> vocab;
  headsim::DType dtype = headsim::DType::kF64;
  std::function<void(headsim::BundleWriter&)> extra;  // runs before finish()
};

// Writes heads in stored orientation: Q/K/V as d_head x d, O as d x d_head.
inline headsim::TensorBundle write_model_bundle(const std::filesystem::path& root,
                                                const ModelBundleSpec& s) {
  using namespace headsim;
  BundleWriter w(root, s.cfg, s.dtype);
  for (int l = 0; l < s.cfg.n_layers; ++l) {
    for (int h = 0; h < s.cfg.n_heads; ++h) {
      const HeadId id{l, h};
      const auto& g = s.heads[id.index(s.cfg)];
      w.add_matrix(names::weight({id, WeightType::Q}), g.q.transpose());
      w.add_matrix(names::weight({id, WeightType::K}), g.k.transpose());
      w.add_matrix(names::weight({id, WeightType::V}), g.v.transpose());
      w.add_matrix(names::weight({id, WeightType::O}), g.o);
      if (s.with_biases) {
        w.add_vector(names::bias_v(id), s.b_v[id.index(s.cfg)]);
        w.add_vector(names::bias_o(id), s.b_o[id.index(s.cfg)]);
      }
    }
    if (s.with_ln1) {
      w.add_vector(names::ln1_gamma(l), s.ln1_gamma[l]);
      w.add_vector(names::ln1_beta(l), s.ln1_beta[l]);
    }
  }
  if (s.with_unembed) {
    w.add_vector(names::kLnFinalGamma, s.ln_final_gamma);
    w.add_vector(names::kLnFinalBeta, s.ln_final_beta);
    w.add_matrix(names::kUnembed, s.unembed);
    if (!s.vocab.empty()) w.set_vocab(s.vocab);
  }
  if (s.extra) s.extra(w);
  w.finish();
  return TensorBundle::load(root);
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline std::filesystem::path source_dir() { return HEADSIM_SOURCE_DIR; }

}  // namespace testsupport
