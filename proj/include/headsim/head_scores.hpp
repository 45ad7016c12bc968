#pragma once

// Attention-pattern head scores on repeated random-token sequences of length
// 2L: identity (diagonal), previous (offset 1), duplicate (offset L) and
// induction (offset L-1).

#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "headsim/tensor_io.hpp"
#include "headsim/types.hpp"

namespace headsim {

enum class HeadScoreKind { kIdentity, kPrevious, kDuplicate, kInduction };

std::string to_string(HeadScoreKind k);
HeadScoreKind head_score_kind_from_string(const std::string& s);

class PatternDump {
 public:
  using Loader = std::function<Matrix(int seq, const HeadId& head)>;

  PatternDump(ModelConfig cfg, int n_seq, int n_ctx, int base_len, Loader loader);

  // Reads pattern_base_len / pattern_n_seq from the manifest metadata and
  // patterns.{seq}.{l}.{h} tensors on demand.
  static PatternDump from_bundle(const TensorBundle& bundle);
  // patterns[seq][layer * n_heads + head]
  static PatternDump from_memory(ModelConfig cfg, int base_len,
                                 std::vector<std::vector<Matrix>> patterns);

  const ModelConfig& config() const { return cfg_; }
  int n_seq() const { return n_seq_; }
  int n_ctx() const { return n_ctx_; }
  int base_len() const { return base_len_; }

  // Loads and validates one pattern: n_ctx x n_ctx, rows sum to 1 within
  // 1e-4, zero above the diagonal within 1e-6.
  Matrix pattern(int seq, const HeadId& head) const;

 private:
  ModelConfig cfg_;
  int n_seq_, n_ctx_, base_len_;
  Loader loader_;
};

struct HeadScoreTable {
  HeadScoreKind kind = HeadScoreKind::kIdentity;
  ModelConfig config;
  Matrix scores;  // n_layers x n_heads

  double at(const HeadId& h) const { return scores(h.layer, h.head); }
  // Descending, ties by ascending head id.
  std::vector<std::pair<HeadId, double>> top_k(int k) const;
  // layer,head,score
  void write_csv(std::ostream& os) const;
};

// Mean over sequences and query positions i >= min_query of A[i, i - offset].
// min_query < 0 means min_query = offset.
HeadScoreTable offset_score(const PatternDump& dump, int offset, int min_query = -1,
                            int threads = 0);
HeadScoreTable identity_score(const PatternDump& dump, int threads = 0);
// previous: offset 1 over i >= 1; duplicate: offset L over i >= L;
// induction: offset L-1 over i >= L.
HeadScoreTable head_score(const PatternDump& dump, HeadScoreKind kind, int threads = 0);

// Adds the top-k Previous / Induction heads that carry no label anywhere in
// `base`, and sets Identity to the top-k identity heads. Null tables are
// skipped.
HeadClassAnnotations assign_top_k_classes(const HeadClassAnnotations& base,
                                          const HeadScoreTable* previous,
                                          const HeadScoreTable* induction,
                                          const HeadScoreTable* identity, int k = 10);

}  // namespace headsim
