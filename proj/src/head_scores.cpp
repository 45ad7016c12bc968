#include "headsim/head_scores.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <ostream>
#include <set>

#include "headsim/error.hpp"
#include "headsim/parallel.hpp"

namespace headsim {

std::string to_string(HeadScoreKind k) {
  switch (k) {
    case HeadScoreKind::kIdentity: return "identity";
    case HeadScoreKind::kPrevious: return "previous";
    case HeadScoreKind::kDuplicate: return "duplicate";
    case HeadScoreKind::kInduction: return "induction";
  }
  return "?";
}

HeadScoreKind head_score_kind_from_string(const std::string& s) {
  for (auto k : {HeadScoreKind::kIdentity, HeadScoreKind::kPrevious, HeadScoreKind::kDuplicate,
                 HeadScoreKind::kInduction})
    if (to_string(k) == s) return k;
  throw InvalidArgument("unknown head score kind '" + s + "'");
}

PatternDump::PatternDump(ModelConfig cfg, int n_seq, int n_ctx, int base_len, Loader loader)
    : cfg_(cfg), n_seq_(n_seq), n_ctx_(n_ctx), base_len_(base_len), loader_(std::move(loader)) {
  cfg_.validate();
  if (n_seq_ < 1 || n_ctx_ < 1 || base_len_ < 1)
    throw InvalidArgument("pattern dump needs n_seq, n_ctx and base_len >= 1");
}

PatternDump PatternDump::from_bundle(const TensorBundle& bundle) {
  const auto base_len = bundle.metadata_int("pattern_base_len");
  const auto n_seq = bundle.metadata_int("pattern_n_seq");
  if (!base_len || !n_seq)
    throw BundleError("bundle metadata lacks pattern_base_len / pattern_n_seq");
  const std::string first = names::pattern(0, {0, 0});
  if (!bundle.has(first)) throw BundleError("bundle has no attention patterns (" + first + ")");
  const auto& shape = bundle.entry(first).shape;
  if (shape.size() != 2 || shape[0] != shape[1])
    throw BundleError(first + ": pattern must be square");
  const int n_ctx = static_cast<int>(shape[0]);
  if (n_ctx != 2 * *base_len)
    throw BundleError("pattern context " + std::to_string(n_ctx) + " != 2 * pattern_base_len");
  return PatternDump(bundle.config(), static_cast<int>(*n_seq), n_ctx,
                     static_cast<int>(*base_len), [bundle](int seq, const HeadId& h) {
                       return bundle.read_matrix(names::pattern(seq, h));
                     });
}

PatternDump PatternDump::from_memory(ModelConfig cfg, int base_len,
                                     std::vector<std::vector<Matrix>> patterns) {
  if (patterns.empty() || patterns[0].empty())
    throw InvalidArgument("from_memory: no patterns");
  const int n_ctx = static_cast<int>(patterns[0][0].rows());
  const int n_heads = cfg.n_heads;
  for (const auto& seq : patterns)
    if (static_cast<int>(seq.size()) != cfg.total_heads())
      throw InvalidArgument("from_memory: expected one pattern per head per sequence");
  auto shared = std::make_shared<std::vector<std::vector<Matrix>>>(std::move(patterns));
  const int n_seq = static_cast<int>(shared->size());
  return PatternDump(cfg, n_seq, n_ctx, base_len, [shared, n_heads](int seq, const HeadId& h) {
    return (*shared)[seq][h.layer * n_heads + h.head];
  });
}

Matrix PatternDump::pattern(int seq, const HeadId& head) const {
  if (seq < 0 || seq >= n_seq_) throw InvalidArgument("sequence index out of range");
  Matrix a = loader_(seq, head);
  const std::string where = "pattern " + std::to_string(seq) + "/" + head.str();
  if (a.rows() != n_ctx_ || a.cols() != n_ctx_)
    throw BundleError(where + ": expected " + std::to_string(n_ctx_) + " x " +
                      std::to_string(n_ctx_));
  for (int i = 0; i < n_ctx_; ++i) {
    if (std::abs(a.row(i).sum() - 1.0) > 1e-4) throw BundleError(where + ": row does not sum to 1");
    if (i + 1 < n_ctx_ && a.row(i).tail(n_ctx_ - i - 1).cwiseAbs().maxCoeff() > 1e-6)
      throw BundleError(where + ": attention above the diagonal");
  }
  return a;
}

std::vector<std::pair<HeadId, double>> HeadScoreTable::top_k(int k) const {
  std::vector<std::pair<HeadId, double>> all;
  for (int l = 0; l < scores.rows(); ++l)
    for (int h = 0; h < scores.cols(); ++h) all.push_back({{l, h}, scores(l, h)});
  std::stable_sort(all.begin(), all.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  all.resize(std::min<std::size_t>(std::max(k, 0), all.size()));
  return all;
}

void HeadScoreTable::write_csv(std::ostream& os) const {
  os << "layer,head,score\n";
  char buf[64];
  for (int l = 0; l < scores.rows(); ++l)
    for (int h = 0; h < scores.cols(); ++h) {
      std::snprintf(buf, sizeof buf, "%.17g", scores(l, h));
      os << l << ',' << h << ',' << buf << '\n';
    }
}

HeadScoreTable offset_score(const PatternDump& dump, int offset, int min_query, int threads) {
  if (min_query < 0) min_query = offset;
  if (offset < 0 || offset >= dump.n_ctx())
    throw InvalidArgument("offset must lie in [0, n_ctx)");
  if (min_query < offset || min_query >= dump.n_ctx())
    throw InvalidArgument("min_query must lie in [offset, n_ctx)");
  const ModelConfig& cfg = dump.config();
  HeadScoreTable t{HeadScoreKind::kIdentity, cfg, Matrix::Zero(cfg.n_layers, cfg.n_heads)};
  parallel_for(cfg.total_heads(), threads, [&](std::size_t idx) {
    const HeadId h{static_cast<int>(idx) / cfg.n_heads, static_cast<int>(idx) % cfg.n_heads};
    double sum = 0;
    long count = 0;
    for (int s = 0; s < dump.n_seq(); ++s) {
      const Matrix a = dump.pattern(s, h);
      for (int i = min_query; i < dump.n_ctx(); ++i, ++count) sum += a(i, i - offset);
    }
    t.scores(h.layer, h.head) = sum / count;
  });
  return t;
}

HeadScoreTable identity_score(const PatternDump& dump, int threads) {
  return offset_score(dump, 0, 0, threads);
}

HeadScoreTable head_score(const PatternDump& dump, HeadScoreKind kind, int threads) {
  const int L = dump.base_len();
  HeadScoreTable t;
  switch (kind) {
    case HeadScoreKind::kIdentity: t = offset_score(dump, 0, 0, threads); break;
    case HeadScoreKind::kPrevious: t = offset_score(dump, 1, 1, threads); break;
    case HeadScoreKind::kDuplicate: t = offset_score(dump, L, L, threads); break;
    case HeadScoreKind::kInduction: t = offset_score(dump, L - 1, L, threads); break;
  }
  t.kind = kind;
  return t;
}

HeadClassAnnotations assign_top_k_classes(const HeadClassAnnotations& base,
                                          const HeadScoreTable* previous,
                                          const HeadScoreTable* induction,
                                          const HeadScoreTable* identity, int k) {
  std::set<HeadId> labelled;
  for (const auto& [cls, heads] : base.classes) labelled.insert(heads.begin(), heads.end());
  HeadClassAnnotations out = base;
  auto add_unlabelled = [&](const HeadScoreTable* t, HeadClass cls) {
    if (t == nullptr) return;
    for (const auto& [h, score] : t->top_k(k))
      if (!labelled.count(h)) out.classes[cls].insert(h);
  };
  add_unlabelled(previous, HeadClass::kPrevious);
  add_unlabelled(induction, HeadClass::kInduction);
  if (identity != nullptr && k > 0) {
    auto& id = out.classes[HeadClass::kIdentity];
    for (const auto& [h, score] : identity->top_k(k)) id.insert(h);
  }
  return out;
}

}  // namespace headsim
