#pragma once

// Tensor-bundle container: a directory holding manifest.json plus one raw
// little-endian, row-major payload file per tensor.
//
//   {"version":1, "dtype":"f32",
//    "config":{"d_model":768, "d_head":64, "n_layers":12, "n_heads":12,
//              "vocab_size":50257},
//    "metadata":{"pattern_base_len":100, "pattern_n_seq":8},
//    "vocab":"vocab.json",
//    "tensors":[{"name":"blocks.0.attn.W_Q.0", "shape":[64,768],
//                "file":"blocks.0.attn.W_Q.0.bin"}, ...]}
//
// A tensor entry may carry its own "dtype" overriding the bundle default.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "headsim/types.hpp"

namespace headsim {

enum class DType { kF32, kF64 };

std::size_t dtype_width(DType t);
std::string to_string(DType t);
DType dtype_from_string(const std::string& s);

struct TensorEntry {
  std::string name;
  std::vector<std::int64_t> shape;
  DType dtype = DType::kF32;
  std::string file;  // relative to bundle root

  std::int64_t numel() const;
  std::uint64_t byte_size() const { return numel() * dtype_width(dtype); }
};

// A tensor widened to f64, row-major.
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  Matrix as_matrix() const;  // requires rank 2
  Vector as_vector() const;  // requires rank 1
};

// Naming convention for model-derived tensors.
namespace names {
std::string weight(const WeightRef& ref);
// blocks.{l}.attn.b_{Q|K|V|O}.{h}
std::string bias(const HeadId& h, WeightType t);
std::string bias_v(const HeadId& h);
std::string bias_o(const HeadId& h);
std::string ln1_gamma(int layer);
std::string ln1_beta(int layer);
inline constexpr const char* kLnFinalGamma = "ln_final.gamma";
inline constexpr const char* kLnFinalBeta = "ln_final.beta";
inline constexpr const char* kUnembed = "unembed.W_U";
std::string pattern(int seq, const HeadId& h);
}  // namespace names

// Immutable after load. Payloads are read on demand, so concurrent readers
// are safe and repeated reads return identical data.
class TensorBundle {
 public:
  static TensorBundle load(const std::filesystem::path& root);

  const std::filesystem::path& root() const { return root_; }
  const ModelConfig& config() const { return config_; }
  DType default_dtype() const { return dtype_; }
  const std::vector<TensorEntry>& entries() const { return entries_; }
  const nlohmann::json& metadata() const { return metadata_; }
  std::optional<std::int64_t> metadata_int(const std::string& key) const;

  bool has(const std::string& name) const;
  const TensorEntry& entry(const std::string& name) const;

  Tensor read(const std::string& name) const;
  std::vector<char> read_bytes(const std::string& name) const;
  Matrix read_matrix(const std::string& name) const;
  Vector read_vector(const std::string& name) const;

  // Column-subspace generator of one head weight, always d_model x d_head:
  // Q/K/V are stored d_head x d_model and returned transposed; O is returned
  // as stored.
  Matrix get_weight(const WeightRef& ref) const;

  bool has_vocab() const { return !vocab_file_.empty(); }
  std::vector<std::string> read_vocab() const;

 private:
  std::filesystem::path root_;
  ModelConfig config_;
  DType dtype_ = DType::kF32;
  std::vector<TensorEntry> entries_;
  std::map<std::string, std::size_t> index_;
  nlohmann::json metadata_ = nlohmann::json::object();
  std::string vocab_file_;
};

// Builds a bundle directory tensor by tensor; the manifest is written by
// finish().
class BundleWriter {
 public:
  BundleWriter(std::filesystem::path root, ModelConfig config,
               DType dtype = DType::kF32);

  void add(const std::string& name, std::vector<std::int64_t> shape,
           std::span<const double> row_major);
  void add_matrix(const std::string& name, const Matrix& m);
  void add_vector(const std::string& name, const Vector& v);
  // Copies the payload bytes unchanged.
  void copy_from(const TensorBundle& src, const std::string& name);
  void set_metadata(const std::string& key, nlohmann::json value);
  void set_vocab(const std::vector<std::string>& vocab);
  void finish();

 private:
  void register_entry(TensorEntry e);

  std::filesystem::path root_;
  ModelConfig config_;
  DType dtype_;
  std::vector<TensorEntry> entries_;
  std::set<std::string> names_;
  nlohmann::json metadata_ = nlohmann::json::object();
  bool has_vocab_ = false;
  bool finished_ = false;
};

// Byte-identical copy of every payload plus manifest and vocab.
void write_bundle(const TensorBundle& bundle, const std::filesystem::path& out);

enum class HeadClass {
  kDuplicate,
  kPrevious,
  kInduction,
  kNameMover,
  kNegativeNameMover,
  kBackupNameMover,
  kSInhibition,
  kIdentity,
};

inline constexpr std::array<HeadClass, 8> kAllHeadClasses = {
    HeadClass::kDuplicate,         HeadClass::kPrevious,
    HeadClass::kInduction,         HeadClass::kNameMover,
    HeadClass::kNegativeNameMover, HeadClass::kBackupNameMover,
    HeadClass::kSInhibition,       HeadClass::kIdentity};

std::string to_string(HeadClass c);
HeadClass head_class_from_string(const std::string& s);

struct HeadClassAnnotations {
  std::map<HeadClass, std::set<HeadId>> classes;

  const std::set<HeadId>& heads(HeadClass c) const;
  // Union over every class except Identity.
  std::set<HeadId> functional_heads() const;
  void validate(const ModelConfig& cfg) const;
  nlohmann::json to_json() const;
};

// JSON object mapping class label to a list of "L{l}H{h}" strings.
HeadClassAnnotations load_annotations(const std::filesystem::path& path);
HeadClassAnnotations parse_annotations(const nlohmann::json& j);

}  // namespace headsim
