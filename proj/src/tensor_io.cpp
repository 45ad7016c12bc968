#include "headsim/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>

#include "headsim/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace headsim {
namespace {

constexpr const char* kManifest = "manifest.json";

template <typename T>
T from_le(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary | std::ios::ate);
  if (!in) throw BundleError("cannot open " + p.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  std::vector<char> buf(size);
  in.seekg(0);
  if (size > 0 && !in.read(buf.data(), static_cast<std::streamsize>(size)))
    throw BundleError("short read on " + p.string());
  return buf;
}

void spit(const fs::path& p, const char* data, std::size_t n) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw BundleError("cannot write " + p.string());
  out.write(data, static_cast<std::streamsize>(n));
  if (!out) throw BundleError("write failed on " + p.string());
}

json config_to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model}, {"d_head", c.d_head}, {"n_layers", c.n_layers},
          {"n_heads", c.n_heads}, {"vocab_size", c.vocab_size}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.d_head = j.at("d_head").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.vocab_size = j.value("vocab_size", 0);
  c.validate();
  return c;
}

std::string wname(WeightType t) {
  switch (t) {
    case WeightType::Q: return "W_Q";
    case WeightType::K: return "W_K";
    case WeightType::V: return "W_V";
    case WeightType::O: return "W_O";
  }
  return "";
}

}  // namespace

std::size_t dtype_width(DType t) { return t == DType::kF32 ? 4 : 8; }

std::string to_string(DType t) { return t == DType::kF32 ? "f32" : "f64"; }

DType dtype_from_string(const std::string& s) {
  if (s == "f32") return DType::kF32;
  if (s == "f64") return DType::kF64;
  throw BundleError("unknown dtype '" + s + "'");
}

std::int64_t TensorEntry::numel() const {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         std::multiplies<>());
}

Matrix Tensor::as_matrix() const {
  if (shape.size() != 2) throw InvalidArgument("tensor is not rank 2");
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  return Eigen::Map<const RowMajor>(data.data(), shape[0], shape[1]);
}

Vector Tensor::as_vector() const {
  if (shape.size() != 1) throw InvalidArgument("tensor is not rank 1");
  return Eigen::Map<const Vector>(data.data(), shape[0]);
}

namespace names {
std::string weight(const WeightRef& r) {
  return "blocks." + std::to_string(r.head.layer) + ".attn." + wname(r.wtype) +
         "." + std::to_string(r.head.head);
}
std::string bias(const HeadId& h, WeightType t) {
  return "blocks." + std::to_string(h.layer) + ".attn.b_" + std::string(1, to_char(t)) +
         "." + std::to_string(h.head);
}
std::string bias_v(const HeadId& h) { return bias(h, WeightType::V); }
std::string bias_o(const HeadId& h) { return bias(h, WeightType::O); }
std::string ln1_gamma(int layer) { return "blocks." + std::to_string(layer) + ".ln1.gamma"; }
std::string ln1_beta(int layer) { return "blocks." + std::to_string(layer) + ".ln1.beta"; }
std::string pattern(int seq, const HeadId& h) {
  return "patterns." + std::to_string(seq) + "." + std::to_string(h.layer) + "." +
         std::to_string(h.head);
}
}  // namespace names

TensorBundle TensorBundle::load(const fs::path& root) {
  const fs::path mpath = root / kManifest;
  if (!fs::exists(mpath)) throw BundleError("missing manifest: " + mpath.string());

  json m;
  try {
    std::ifstream in(mpath);
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw BundleError("malformed manifest " + mpath.string() + ": " + e.what());
  }

  TensorBundle b;
  b.root_ = root;
  try {
    if (m.value("version", 0) != 1) throw BundleError("unsupported manifest version");
    b.dtype_ = dtype_from_string(m.value("dtype", std::string("f32")));
    b.config_ = config_from_json(m.at("config"));
    if (m.contains("metadata")) b.metadata_ = m.at("metadata");
    b.vocab_file_ = m.value("vocab", std::string());

    for (const auto& t : m.at("tensors")) {
      TensorEntry e;
      e.name = t.at("name").get<std::string>();
      e.shape = t.at("shape").get<std::vector<std::int64_t>>();
      e.dtype = t.contains("dtype") ? dtype_from_string(t.at("dtype").get<std::string>())
                                    : b.dtype_;
      e.file = t.at("file").get<std::string>();
      for (auto s : e.shape)
        if (s < 0) throw BundleError("negative dimension in tensor " + e.name);
      if (b.index_.count(e.name)) throw BundleError("duplicate tensor name " + e.name);

      const fs::path payload = root / e.file;
      if (!fs::exists(payload)) throw BundleError("missing payload for " + e.name + ": " + payload.string());
      const auto actual = fs::file_size(payload);
      if (actual != e.byte_size())
        throw BundleError("byte-length mismatch for " + e.name + ": expected " +
                          std::to_string(e.byte_size()) + ", found " + std::to_string(actual));
      b.index_[e.name] = b.entries_.size();
      b.entries_.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw BundleError(std::string("malformed manifest: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw BundleError(std::string("malformed manifest: ") + e.what());
  }
  return b;
}

std::optional<std::int64_t> TensorBundle::metadata_int(const std::string& key) const {
  if (!metadata_.contains(key)) return std::nullopt;
  return metadata_.at(key).get<std::int64_t>();
}

bool TensorBundle::has(const std::string& name) const { return index_.count(name) > 0; }

const TensorEntry& TensorBundle::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw BundleError("missing tensor " + name);
  return entries_[it->second];
}

std::vector<char> TensorBundle::read_bytes(const std::string& name) const {
  const auto& e = entry(name);
  auto bytes = slurp(root_ / e.file);
  if (bytes.size() != e.byte_size())
    throw BundleError("payload for " + name + " changed size since load");
  return bytes;
}

Tensor TensorBundle::read(const std::string& name) const {
  const auto& e = entry(name);
  const auto bytes = read_bytes(name);
  Tensor t;
  t.shape = e.shape;
  t.data.resize(static_cast<std::size_t>(e.numel()));
  if (e.dtype == DType::kF32) {
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      std::uint32_t u;
      std::memcpy(&u, bytes.data() + 4 * i, 4);
      t.data[i] = static_cast<double>(std::bit_cast<float>(from_le(u)));
    }
  } else {
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      std::uint64_t u;
      std::memcpy(&u, bytes.data() + 8 * i, 8);
      t.data[i] = std::bit_cast<double>(from_le(u));
    }
  }
  return t;
}

Matrix TensorBundle::read_matrix(const std::string& name) const { return read(name).as_matrix(); }
Vector TensorBundle::read_vector(const std::string& name) const { return read(name).as_vector(); }

Matrix TensorBundle::get_weight(const WeightRef& ref) const {
  const auto& c = config_;
  if (ref.head.layer < 0 || ref.head.layer >= c.n_layers || ref.head.head < 0 ||
      ref.head.head >= c.n_heads)
    throw InvalidArgument("weight ref " + ref.str() + " out of range for " +
                          std::to_string(c.n_layers) + "x" + std::to_string(c.n_heads) + " model");
  const std::string name = names::weight(ref);
  const auto& e = entry(name);
  const bool is_out = ref.wtype == WeightType::O;
  const std::vector<std::int64_t> expect =
      is_out ? std::vector<std::int64_t>{c.d_model, c.d_head}
             : std::vector<std::int64_t>{c.d_head, c.d_model};
  if (e.shape != expect)
    throw BundleError("shape mismatch for " + name + " against model config");
  Matrix m = read(name).as_matrix();
  if (is_out) return m;
  return m.transpose();
}

std::vector<std::string> TensorBundle::read_vocab() const {
  if (vocab_file_.empty()) throw BundleError("bundle has no vocab");
  try {
    std::ifstream in(root_ / vocab_file_);
    if (!in) throw BundleError("cannot open vocab " + (root_ / vocab_file_).string());
    return json::parse(in).get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw BundleError(std::string("malformed vocab: ") + e.what());
  }
}

BundleWriter::BundleWriter(fs::path root, ModelConfig config, DType dtype)
    : root_(std::move(root)), config_(config), dtype_(dtype) {
  config_.validate();
  fs::create_directories(root_);
}

void BundleWriter::register_entry(TensorEntry e) {
  if (finished_) throw InvalidArgument("bundle writer already finished");
  if (!names_.insert(e.name).second) throw InvalidArgument("duplicate tensor name " + e.name);
  entries_.push_back(std::move(e));
}

void BundleWriter::add(const std::string& name, std::vector<std::int64_t> shape,
                       std::span<const double> row_major) {
  TensorEntry e{name, std::move(shape), dtype_, name + ".bin"};
  if (static_cast<std::int64_t>(row_major.size()) != e.numel())
    throw InvalidArgument("data length does not match shape for " + name);
  std::vector<char> buf(e.byte_size());
  for (std::size_t i = 0; i < row_major.size(); ++i) {
    if (dtype_ == DType::kF32) {
      const auto u = from_le(std::bit_cast<std::uint32_t>(static_cast<float>(row_major[i])));
      std::memcpy(buf.data() + 4 * i, &u, 4);
    } else {
      const auto u = from_le(std::bit_cast<std::uint64_t>(row_major[i]));
      std::memcpy(buf.data() + 8 * i, &u, 8);
    }
  }
  spit(root_ / e.file, buf.data(), buf.size());
  register_entry(std::move(e));
}

void BundleWriter::add_matrix(const std::string& name, const Matrix& m) {
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const RowMajor rm = m;
  add(name, {m.rows(), m.cols()}, std::span<const double>(rm.data(), rm.size()));
}

void BundleWriter::add_vector(const std::string& name, const Vector& v) {
  add(name, {v.size()}, std::span<const double>(v.data(), v.size()));
}

void BundleWriter::copy_from(const TensorBundle& src, const std::string& name) {
  const auto& se = src.entry(name);
  const auto bytes = src.read_bytes(name);
  TensorEntry e{name, se.shape, se.dtype, name + ".bin"};
  spit(root_ / e.file, bytes.data(), bytes.size());
  register_entry(std::move(e));
}

void BundleWriter::set_metadata(const std::string& key, json value) {
  metadata_[key] = std::move(value);
}

void BundleWriter::set_vocab(const std::vector<std::string>& vocab) {
  const std::string text = json(vocab).dump();
  spit(root_ / "vocab.json", text.data(), text.size());
  has_vocab_ = true;
}

void BundleWriter::finish() {
  if (finished_) return;
  json tensors = json::array();
  for (const auto& e : entries_) {
    json t = {{"name", e.name}, {"shape", e.shape}, {"file", e.file}};
    if (e.dtype != dtype_) t["dtype"] = to_string(e.dtype);
    tensors.push_back(std::move(t));
  }
  json m = {{"version", 1},
            {"dtype", to_string(dtype_)},
            {"config", config_to_json(config_)},
            {"metadata", metadata_},
            {"tensors", std::move(tensors)}};
  if (has_vocab_) m["vocab"] = "vocab.json";
  const std::string text = m.dump(1);
  spit(root_ / kManifest, text.data(), text.size());
  finished_ = true;
}

void write_bundle(const TensorBundle& bundle, const fs::path& out) {
  BundleWriter w(out, bundle.config(), bundle.default_dtype());
  for (const auto& e : bundle.entries()) w.copy_from(bundle, e.name);
  for (const auto& [k, v] : bundle.metadata().items()) w.set_metadata(k, v);
  if (bundle.has_vocab()) w.set_vocab(bundle.read_vocab());
  w.finish();
}

std::string to_string(HeadClass c) {
  switch (c) {
    case HeadClass::kDuplicate: return "Duplicate";
    case HeadClass::kPrevious: return "Previous";
    case HeadClass::kInduction: return "Induction";
    case HeadClass::kNameMover: return "NameMover";
    case HeadClass::kNegativeNameMover: return "NegativeNameMover";
    case HeadClass::kBackupNameMover: return "BackupNameMover";
    case HeadClass::kSInhibition: return "SInhibition";
    case HeadClass::kIdentity: return "Identity";
  }
  return "";
}

HeadClass head_class_from_string(const std::string& s) {
  for (auto c : kAllHeadClasses)
    if (to_string(c) == s) return c;
  throw InvalidArgument("unknown head class label '" + s + "'");
}

const std::set<HeadId>& HeadClassAnnotations::heads(HeadClass c) const {
  static const std::set<HeadId> kEmpty;
  auto it = classes.find(c);
  return it == classes.end() ? kEmpty : it->second;
}

std::set<HeadId> HeadClassAnnotations::functional_heads() const {
  std::set<HeadId> out;
  for (const auto& [c, hs] : classes)
    if (c != HeadClass::kIdentity) out.insert(hs.begin(), hs.end());
  return out;
}

void HeadClassAnnotations::validate(const ModelConfig& cfg) const {
  for (const auto& [c, hs] : classes)
    for (const auto& h : hs)
      if (h.layer >= cfg.n_layers || h.head >= cfg.n_heads)
        throw InvalidArgument("annotated head " + h.str() + " (" + to_string(c) +
                              ") outside model dimensions");
}

json HeadClassAnnotations::to_json() const {
  json j = json::object();
  for (const auto& [c, hs] : classes) {
    json arr = json::array();
    for (const auto& h : hs) arr.push_back(h.str());
    j[to_string(c)] = std::move(arr);
  }
  return j;
}

HeadClassAnnotations parse_annotations(const json& j) {
  if (!j.is_object()) throw InvalidArgument("annotations must be a JSON object");
  HeadClassAnnotations a;
  for (const auto& [label, arr] : j.items()) {
    const HeadClass c = head_class_from_string(label);
    auto& set = a.classes[c];
    for (const auto& s : arr) {
      if (!s.is_string()) throw InvalidArgument("malformed head id in class " + label);
      set.insert(HeadId::parse(s.get<std::string>()));
    }
  }
  return a;
}

HeadClassAnnotations load_annotations(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw BundleError("cannot open annotations " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidArgument("malformed annotations file: " + std::string(e.what()));
  }
  return parse_annotations(j);
}

}  // namespace headsim
