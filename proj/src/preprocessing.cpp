#include "headsim/preprocessing.hpp"

#include <set>
#include <string>

#include "headsim/error.hpp"

namespace headsim {

LnParams LnParams::identity(Eigen::Index d) {
  return {Vector::Ones(d), Vector::Zero(d)};
}

void LnParams::check(Eigen::Index d) const {
  if (gamma.size() != d || beta.size() != d)
    throw InvalidArgument("LN parameters must have length " + std::to_string(d));
}

Matrix center_columns(const Matrix& m) {
  return m.rowwise() - m.colwise().mean();
}

Matrix center_rows(const Matrix& m) {
  return m.colwise() - m.rowwise().mean();
}

Vector center(const Vector& v) {
  return v.array() - v.mean();
}

AffineParams fold_ln_into_reading(const Matrix& w_in, const Vector& b_in,
                                  const LnParams& ln) {
  ln.check(w_in.cols());
  if (b_in.size() != w_in.rows())
    throw InvalidArgument("fold_ln_into_reading: bias length does not match W_in rows");
  const Matrix scaled = w_in * ln.gamma.asDiagonal();
  return {center_rows(scaled), w_in * ln.beta + b_in};
}

AffineParams center_writing(const Matrix& w_out, const Vector& b_out) {
  if (b_out.size() != w_out.rows())
    throw InvalidArgument("center_writing: bias length does not match W_out rows");
  return {center_columns(w_out), center(b_out)};
}

Matrix center_unembedding(const Matrix& e_out) { return center_rows(e_out); }

FoldedBias fold_attention_bias(const Matrix& w_o, const Vector& b_v, const Vector& b_o) {
  if (b_v.size() != w_o.cols() || b_o.size() != w_o.rows())
    throw InvalidArgument("fold_attention_bias: shape mismatch");
  return {Vector::Zero(b_v.size()), w_o * b_v + b_o};
}

void preprocess_generators(HeadGenerators& g, const LnParams* ln1,
                           const PreprocessOptions& opts) {
  if (opts.fold_ln) {
    if (ln1 == nullptr) throw BundleError("LN folding requested but ln1 parameters are missing");
    ln1->check(g.q.rows());
    // Generator G = W^T, so W D_gamma C_d becomes C_d D_gamma G.
    for (Matrix* m : {&g.q, &g.k, &g.v})
      *m = center_columns(ln1->gamma.asDiagonal() * *m);
  }
  if (opts.center_writes) g.o = center_columns(g.o);
}

TensorBundle preprocess_bundle(const TensorBundle& in, const std::filesystem::path& out,
                               const PreprocessOptions& opts) {
  if (std::filesystem::exists(out) && std::filesystem::equivalent(in.root(), out))
    throw InvalidArgument("preprocess_bundle: output must differ from input");

  const ModelConfig& cfg = in.config();
  const auto d = cfg.d_model;
  BundleWriter w(out, cfg, in.default_dtype());
  std::set<std::string> written;
  auto put_matrix = [&](const std::string& name, const Matrix& m) {
    w.add_matrix(name, m);
    written.insert(name);
  };
  auto put_vector = [&](const std::string& name, const Vector& v) {
    w.add_vector(name, v);
    written.insert(name);
  };
  auto bias_or_zero = [&](const std::string& name, Eigen::Index n) -> Vector {
    return in.has(name) ? in.read_vector(name) : Vector::Zero(n);
  };

  for (int l = 0; l < cfg.n_layers; ++l) {
    LnParams ln;
    if (opts.fold_ln) {
      if (!in.has(names::ln1_gamma(l)) || !in.has(names::ln1_beta(l)))
        throw BundleError("LN folding requested but " + names::ln1_gamma(l) + "/beta missing");
      ln = {in.read_vector(names::ln1_gamma(l)), in.read_vector(names::ln1_beta(l))};
      ln.check(d);
    }

    for (int h = 0; h < cfg.n_heads; ++h) {
      const HeadId head{l, h};
      Vector b_v = bias_or_zero(names::bias_v(head), cfg.d_head);
      for (WeightType t : {WeightType::Q, WeightType::K, WeightType::V}) {
        const std::string wn = names::weight({head, t});
        const std::string bn = names::bias(head, t);
        if (!opts.fold_ln) break;
        const Matrix w_in = in.read_matrix(wn);
        const AffineParams folded = fold_ln_into_reading(w_in, bias_or_zero(bn, cfg.d_head), ln);
        put_matrix(wn, folded.weight);
        if (t == WeightType::V)
          b_v = folded.bias;
        else
          put_vector(bn, folded.bias);
      }

      const std::string on = names::weight({head, WeightType::O});
      Matrix w_o = in.read_matrix(on);
      Vector b_o = bias_or_zero(names::bias_o(head), d);
      const bool bias_present = in.has(names::bias_v(head)) || in.has(names::bias_o(head));
      if (opts.fold_bias) {
        const FoldedBias fb = fold_attention_bias(w_o, b_v, b_o);
        b_v = fb.b_v;
        b_o = fb.b_o;
      }
      if (opts.center_writes) {
        const AffineParams c = center_writing(w_o, b_o);
        w_o = c.weight;
        b_o = c.bias;
        put_matrix(on, w_o);
      }
      if (opts.fold_ln || opts.fold_bias || bias_present) {
        put_vector(names::bias_v(head), b_v);
        put_vector(names::bias_o(head), b_o);
      }
    }
    if (opts.fold_ln) {
      const LnParams id = LnParams::identity(d);
      put_vector(names::ln1_gamma(l), id.gamma);
      put_vector(names::ln1_beta(l), id.beta);
    }
  }

  if (opts.center_unembed && in.has(names::kUnembed))
    put_matrix(names::kUnembed, center_unembedding(in.read_matrix(names::kUnembed)));

  for (const auto& e : in.entries())
    if (!written.count(e.name)) w.copy_from(in, e.name);
  for (const auto& [k, v] : in.metadata().items()) w.set_metadata(k, v);
  if (in.has_vocab()) w.set_vocab(in.read_vocab());
  w.finish();
  return TensorBundle::load(out);
}

}  // namespace headsim
