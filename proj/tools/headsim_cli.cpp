// headsim: weight-based attention-head similarity pipelines.
//
// Exit codes: 0 success, 64 usage / invalid argument, 65 bad bundle or input
// file, 70 numerical failure, 73 output not writable.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "headsim/analysis.hpp"
#include "headsim/error.hpp"
#include "headsim/evaluation.hpp"
#include "headsim/head_scores.hpp"
#include "headsim/preprocessing.hpp"
#include "headsim/rand_baseline.hpp"
#include "headsim/similarity.hpp"
#include "headsim/tensor_io.hpp"
#include "headsim/unembed.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace headsim;

namespace {

constexpr int kExitUsage = 64;
constexpr int kExitData = 65;
constexpr int kExitSoftware = 70;
constexpr int kExitCantCreate = 73;

struct OutputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  int threads = 0;
  std::uint64_t seed = 0;
};

// Writes to a file, or stdout for "" / "-".
class Output {
 public:
  explicit Output(const std::string& path) : path_(path) {
    if (!to_stdout()) {
      std::error_code ec;
      if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path(), ec);
      file_.open(path, std::ios::binary);
      if (!file_) throw OutputError("cannot open output '" + path + "'");
    }
  }
  std::ostream& stream() { return to_stdout() ? std::cout : file_; }
  bool to_stdout() const { return path_.empty() || path_ == "-"; }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream file_;
};

std::vector<PairingType> parse_pairings(const std::string& text) {
  if (text == "all") {
    const auto a = PairingType::all();
    return {a.begin(), a.end()};
  }
  std::vector<PairingType> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(PairingType::parse(item));
  if (out.empty()) throw InvalidArgument("no pairing given");
  return out;
}

std::vector<HeadId> parse_heads(const std::string& text, const ModelConfig& cfg) {
  std::vector<HeadId> out;
  if (text == "all") {
    for (int l = 0; l < cfg.n_layers; ++l)
      for (int h = 0; h < cfg.n_heads; ++h) out.push_back({l, h});
    return out;
  }
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(HeadId::parse(item));
  return out;
}

// Config echo: embedded in JSON outputs, a leading comment in DOT, a sidecar
// <out>.config.json next to CSV files, and always one line on stderr.
void echo_config(const json& cfg) { std::cerr << "config: " << cfg.dump() << '\n'; }

void write_sidecar(const Output& out, const json& cfg) {
  if (out.to_stdout()) return;
  std::ofstream f(out.path() + ".config.json");
  if (!f) throw OutputError("cannot write config sidecar for '" + out.path() + "'");
  f << cfg.dump(2) << '\n';
}

json base_config(const std::string& command, const Common& c) {
  return {{"command", command}, {"threads", c.threads}, {"seed", c.seed}};
}

WeightStore load_store(const TensorBundle& b, bool preprocessed) {
  return WeightStore::from_bundle(b, preprocessed);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"headsim: subspace similarity between transformer attention heads", "headsim"};
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  Common common;
  app.add_option("--threads", common.threads, "Worker threads (0 = all cores)")
      ->envname("HEADSIM_THREADS");
  app.add_option("--seed", common.seed, "Master seed; subsystem seeds derive from it")
      ->envname("HEADSIM_SEED");
  app.require_subcommand(1);
  app.fallthrough();

  std::function<void()> run;

  // similarity
  std::string bundle_path, metric_s = "pk", pairing_s = "OQ", mode_s = "strict_earlier",
                           out_path, format = "csv";
  bool preprocessed = false;
  auto* sim = app.add_subcommand("similarity", "Score every head pair for one or more pairings");
  sim->add_option("--bundle", bundle_path, "Tensor bundle directory")->required()->envname("HEADSIM_BUNDLE");
  sim->add_option("--metric", metric_s, "pk|cs|simple-cs|cka|procrustes");
  sim->add_option("--pairing", pairing_s, "Comma list such as OQ,OK or 'all'");
  sim->add_option("--mode", mode_s, "strict_earlier|same_type");
  sim->add_flag("--preprocessed", preprocessed, "Fold LN and center writes first");
  sim->add_option("--format", format, "csv|json")->check(CLI::IsMember({"csv", "json"}));
  sim->add_option("--out", out_path, "Output file (default stdout)");
  sim->callback([&] {
    run = [&] {
      const auto bundle = TensorBundle::load(bundle_path);
      const auto store = load_store(bundle, preprocessed);
      const Metric metric = metric_from_string(metric_s);
      const PairMode mode = pair_mode_from_string(mode_s);
      json cfg = base_config("similarity", common);
      cfg.update({{"bundle", bundle_path}, {"metric", metric_s}, {"pairing", pairing_s},
                  {"mode", mode_s}, {"preprocessed", preprocessed}});
      echo_config(cfg);
      Output out(out_path);
      json tables = json::array();
      bool header = true;
      for (PairingType p : parse_pairings(pairing_s)) {
        const auto t = score_all_pairs(store, metric, p, mode, common.threads);
        if (format == "csv") {
          t.write_csv(out.stream(), header);
          header = false;
        } else {
          tables.push_back(t.to_json());
        }
      }
      if (format == "json")
        out.stream() << json{{"config", cfg}, {"tables", tables}}.dump(1) << '\n';
      else
        write_sidecar(out, cfg);
    };
  });

  // wiring
  std::string pairings_s = "OQ,OK,OV", annotations_path;
  int k = 20, label_tokens = 0, n_random = 64;
  bool debias = false;
  std::string wiring_format = "dot";
  auto* wir = app.add_subcommand("wiring", "Top-k wiring diagram as DOT or JSON");
  wir->add_option("--bundle", bundle_path)->required()->envname("HEADSIM_BUNDLE");
  wir->add_option("--metric", metric_s);
  wir->add_option("--pairings", pairings_s, "Comma list or 'all'");
  wir->add_option("--k", k, "Edges per pairing");
  wir->add_flag("--preprocessed", preprocessed);
  wir->add_option("--annotations", annotations_path, "Head-class file for node colors");
  wir->add_option("--label-tokens", label_tokens, "Top tokens of each node's O subspace");
  wir->add_flag("--debias", debias, "Subtract the random-weight bias first");
  wir->add_option("--n-random", n_random, "Random pairs for --debias");
  wir->add_option("--format", wiring_format)->check(CLI::IsMember({"dot", "json"}));
  wir->add_option("--out", out_path);
  wir->callback([&] {
    run = [&] {
      const auto bundle = TensorBundle::load(bundle_path);
      const auto store = load_store(bundle, preprocessed);
      const Metric metric = metric_from_string(metric_s);
      json cfg = base_config("wiring", common);
      cfg.update({{"bundle", bundle_path}, {"metric", metric_s}, {"pairings", pairings_s},
                  {"k", k}, {"preprocessed", preprocessed}, {"debias", debias},
                  {"n_random", n_random}, {"label_tokens", label_tokens}});
      echo_config(cfg);
      std::vector<SimilarityTable> tables;
      for (PairingType p : parse_pairings(pairings_s)) {
        auto t = score_all_pairs(store, metric, p, PairMode::kStrictEarlier, common.threads);
        if (debias) t = debias_toy(t, n_random, common.seed).table;
        tables.push_back(std::move(t));
      }
      auto diagram = build_wiring(tables, k);
      if (label_tokens > 0) {
        std::set<HeadId> nodes;
        for (const auto& e : diagram.edges) nodes.insert({e.pair.source, e.pair.target});
        for (const HeadId& h : nodes) {
          const auto r = project_unembedding(bundle, {h, WeightType::O},
                                             UnembedPrep::kCenterNormalize, label_tokens, true);
          for (const auto& t : r.top) diagram.labels[h].push_back(t.token);
        }
      }
      std::optional<HeadClassAnnotations> ann;
      if (!annotations_path.empty()) ann = load_annotations(annotations_path);
      Output out(out_path);
      if (wiring_format == "dot") {
        out.stream() << "// config: " << cfg.dump() << '\n'
                     << diagram.to_dot(ann ? &*ann : nullptr);
      } else {
        json j = diagram.to_json(ann ? &*ann : nullptr);
        j["config"] = cfg;
        out.stream() << j.dump(1) << '\n';
      }
    };
  });

  // hubs
  std::string direction = "both";
  auto* hubs = app.add_subcommand("hubs", "PK inlet / outlet hub scores");
  hubs->add_option("--bundle", bundle_path)->required()->envname("HEADSIM_BUNDLE");
  hubs->add_option("--pairings", pairings_s);
  hubs->add_option("--direction", direction)->check(CLI::IsMember({"inlet", "outlet", "both"}));
  hubs->add_flag("--preprocessed", preprocessed);
  hubs->add_option("--out", out_path);
  hubs->callback([&] {
    run = [&] {
      const auto bundle = TensorBundle::load(bundle_path);
      const auto store = load_store(bundle, preprocessed);
      json cfg = base_config("hubs", common);
      cfg.update({{"bundle", bundle_path}, {"pairings", pairings_s}, {"direction", direction},
                  {"preprocessed", preprocessed}});
      echo_config(cfg);
      json results = json::array();
      for (PairingType p : parse_pairings(pairings_s)) {
        const auto t =
            score_all_pairs(store, Metric::kPK, p, PairMode::kStrictEarlier, common.threads);
        if (direction != "outlet") results.push_back(inlet_scores(t).to_json());
        if (direction != "inlet") results.push_back(outlet_scores(t).to_json());
      }
      Output out(out_path);
      out.stream() << json{{"config", cfg}, {"hubs", results}}.dump(1) << '\n';
    };
  });

  // rand-baseline
  int d = 768, m = 64, pairs = 100000;
  long moments = 0;
  std::string stats_path;
  auto* rb = app.add_subcommand("rand-baseline", "PK distribution of random subspaces");
  rb->add_option("--d", d, "Ambient dimension");
  rb->add_option("--m", m, "Subspace dimension");
  rb->add_option("--pairs", pairs, "Number of random pairs");
  rb->add_option("--moments", moments, "Also run the entry-moment oracles with this many samples");
  rb->add_option("--out", out_path, "Sample CSV (default stdout)");
  rb->add_option("--stats", stats_path, "JSON stats file (default stderr)");
  rb->callback([&] {
    run = [&] {
      json cfg = base_config("rand-baseline", common);
      cfg.update({{"d", d}, {"m", m}, {"pairs", pairs}, {"moments", moments}});
      echo_config(cfg);
      const auto emp = empirical_pk_distribution(d, m, pairs, common.seed, common.threads);
      const auto tight = tight_reference(d, m);
      const auto loose = loose_reference(d, m);
      Output out(out_path);
      out.stream() << "index,pk\n";
      char buf[64];
      for (std::size_t i = 0; i < emp.samples.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", emp.samples[i]);
        out.stream() << i << ',' << buf << '\n';
      }
      json stats = {{"config", cfg},
                    {"fitted_mean", emp.fitted_mean},
                    {"fitted_variance", emp.fitted_variance},
                    {"tight", {{"mean", tight.mean}, {"variance", tight.variance}}},
                    {"loose", {{"mean", loose.mean}, {"variance", loose.variance}}}};
      if (emp.fitted_variance > 0) {
        stats["kl_fit_vs_tight"] = gaussian_kl(emp.gaussian(), tight.gaussian().variance > 0
                                                                   ? tight.gaussian()
                                                                   : Gaussian{tight.mean, 1e-12});
        stats["kl_fit_vs_loose"] = gaussian_kl(emp.gaussian(), loose.gaussian());
      }
      if (moments > 0) {
        const auto rep = moment_oracles(d, moments, common.seed, common.threads);
        json mj = json::array();
        for (const auto& e : rep.moments)
          mj.push_back({{"name", e.name}, {"expected", e.expected}, {"estimate", e.estimate},
                        {"std_error", e.std_error}, {"z", e.z()}, {"flagged", e.flagged()}});
        stats["moments"] = {{"estimates", mj}, {"max_row_norm_error", rep.max_row_norm_error},
                            {"ok", rep.ok()}};
      }
      if (stats_path.empty()) {
        std::cerr << stats.dump() << '\n';
      } else {
        Output s(stats_path);
        s.stream() << stats.dump(1) << '\n';
      }
      write_sidecar(out, cfg);
    };
  });

  // head-scores
  std::string kind_s = "identity", assign_out;
  int top_k = 10;
  auto* hs = app.add_subcommand("head-scores", "Attention-pattern head scores");
  hs->add_option("--bundle", bundle_path)->required()->envname("HEADSIM_BUNDLE");
  hs->add_option("--kind", kind_s, "identity|previous|duplicate|induction");
  hs->add_option("--out", out_path, "CSV layer,head,score");
  hs->add_option("--annotations", annotations_path, "Base annotations for --assign-out");
  hs->add_option("--assign-out", assign_out,
                 "Write base annotations plus top-k Previous/Induction/Identity heads");
  hs->add_option("--top", top_k, "k for --assign-out");
  hs->callback([&] {
    run = [&] {
      const auto bundle = TensorBundle::load(bundle_path);
      const auto dump = PatternDump::from_bundle(bundle);
      json cfg = base_config("head-scores", common);
      cfg.update({{"bundle", bundle_path}, {"kind", kind_s}, {"n_seq", dump.n_seq()},
                  {"base_len", dump.base_len()}});
      echo_config(cfg);
      const auto table = head_score(dump, head_score_kind_from_string(kind_s), common.threads);
      Output out(out_path);
      table.write_csv(out.stream());
      write_sidecar(out, cfg);
      if (!assign_out.empty()) {
        if (annotations_path.empty()) throw InvalidArgument("--assign-out needs --annotations");
        const auto prev = head_score(dump, HeadScoreKind::kPrevious, common.threads);
        const auto ind = head_score(dump, HeadScoreKind::kInduction, common.threads);
        const auto id = head_score(dump, HeadScoreKind::kIdentity, common.threads);
        const auto merged =
            assign_top_k_classes(load_annotations(annotations_path), &prev, &ind, &id, top_k);
        Output a(assign_out);
        a.stream() << merged.to_json().dump(2) << '\n';
      }
    };
  });

  // project-unembed
  std::string head_s = "L4H7", wtype_s = "O", prep_s = "center-normalize", stats_heads;
  bool raw_weights = false;
  auto* pu = app.add_subcommand("project-unembed", "Rank tokens by projection onto a head subspace");
  pu->add_option("--bundle", bundle_path)->required()->envname("HEADSIM_BUNDLE");
  pu->add_option("--head", head_s, "Head id such as L4H7");
  pu->add_option("--wtype", wtype_s, "Q|K|V|O");
  pu->add_option("--prep", prep_s, "identity|center|normalize|center-normalize");
  pu->add_option("--top", top_k, "Number of tokens");
  pu->add_flag("--raw", raw_weights, "Skip weight preprocessing");
  pu->add_option("--stats", stats_heads,
                 "Instead report unembedding statistics over these heads ('all' or a list)");
  pu->add_option("--out", out_path, "JSON output");
  pu->callback([&] {
    run = [&] {
      const auto bundle = TensorBundle::load(bundle_path);
      json cfg = base_config("project-unembed", common);
      cfg.update({{"bundle", bundle_path}, {"head", head_s}, {"wtype", wtype_s},
                  {"prep", prep_s}, {"top", top_k}, {"preprocessed", !raw_weights},
                  {"stats", stats_heads}});
      echo_config(cfg);
      json j;
      if (!stats_heads.empty()) {
        j = unembed_stats(bundle, parse_heads(stats_heads, bundle.config()), !raw_weights,
                          common.threads)
                .to_json();
      } else {
        if (wtype_s.size() != 1) throw InvalidArgument("--wtype must be one of Q, K, V, O");
        const WeightRef ref{HeadId::parse(head_s), weight_type_from_char(wtype_s[0])};
        j = project_unembedding(bundle, ref, unembed_prep_from_string(prep_s), top_k,
                                !raw_weights)
                .to_json();
      }
      j["config"] = cfg;
      Output out(out_path);
      out.stream() << j.dump(1) << '\n';
    };
  });

  // evaluate
  std::string task = "detection";
  auto* ev = app.add_subcommand("evaluate", "PR-AUC / ROC-AUC against head-class annotations");
  ev->add_option("--bundle", bundle_path)->required()->envname("HEADSIM_BUNDLE");
  ev->add_option("--metric", metric_s);
  ev->add_option("--task", task, "detection|classification|preprocess-mse")
      ->check(CLI::IsMember({"detection", "classification", "preprocess-mse"}));
  ev->add_option("--annotations", annotations_path);
  ev->add_option("--pairings", pairings_s, "Pairings for detection / preprocess-mse");
  ev->add_flag("--preprocessed", preprocessed);
  ev->add_option("--out", out_path, "JSON report");
  ev->callback([&] {
    run = [&] {
      const auto bundle = TensorBundle::load(bundle_path);
      const Metric metric = metric_from_string(metric_s);
      json cfg = base_config("evaluate", common);
      cfg.update({{"bundle", bundle_path}, {"metric", metric_s}, {"task", task},
                  {"annotations", annotations_path}, {"pairings", pairings_s},
                  {"preprocessed", preprocessed}});
      echo_config(cfg);
      json report = {{"config", cfg}};
      if (task == "preprocess-mse") {
        const auto orig = load_store(bundle, false);
        const auto prep = load_store(bundle, true);
        json rows = json::array();
        for (PairingType p : parse_pairings(pairings_s)) {
          const auto a = score_all_pairs(orig, metric, p, PairMode::kStrictEarlier, common.threads);
          const auto b = score_all_pairs(prep, metric, p, PairMode::kStrictEarlier, common.threads);
          rows.push_back({{"pairing", p.str()},
                          {"mse", preprocess_mse(a, b, metric == Metric::kPK)}});
        }
        report["mse"] = rows;
      } else {
        if (annotations_path.empty()) throw InvalidArgument("--annotations is required");
        const auto ann = load_annotations(annotations_path);
        ann.validate(bundle.config());
        const auto store = load_store(bundle, preprocessed);
        if (task == "detection") {
          json rows = json::array();
          for (PairingType p : parse_pairings(pairings_s)) {
            const auto t =
                score_all_pairs(store, metric, p, PairMode::kStrictEarlier, common.threads);
            rows.push_back({{"pairing", p.str()},
                            {"pr_auc", head_detection_pr_auc(t, ann)},
                            {"positives", ann.functional_heads().size()},
                            {"pairs", t.size()}});
          }
          report["detection"] = rows;
        } else {
          report["classification"] = classwise_mean_auc(store, metric, ann, common.threads).to_json();
        }
      }
      Output out(out_path);
      out.stream() << report.dump(1) << '\n';
    };
  });

  // preprocess
  std::string in_path;
  bool no_ln = false, no_cw = false, no_cu = false, no_fb = false;
  auto* pp = app.add_subcommand("preprocess", "Write an output-preserving preprocessed bundle");
  pp->add_option("--in", in_path)->required();
  pp->add_option("--out", out_path)->required();
  pp->add_flag("--no-ln-fold", no_ln);
  pp->add_flag("--no-center-writes", no_cw);
  pp->add_flag("--no-center-unembed", no_cu);
  pp->add_flag("--no-fold-bias", no_fb);
  pp->callback([&] {
    run = [&] {
      json cfg = base_config("preprocess", common);
      cfg.update({{"in", in_path}, {"out", out_path}, {"fold_ln", !no_ln},
                  {"center_writes", !no_cw}, {"center_unembed", !no_cu}, {"fold_bias", !no_fb}});
      echo_config(cfg);
      const auto in = TensorBundle::load(in_path);
      PreprocessOptions opts{!no_ln, !no_cw, !no_cu, !no_fb};
      const auto out = preprocess_bundle(in, out_path, opts);
      std::ofstream f(fs::path(out_path) / "preprocess.config.json");
      f << cfg.dump(2) << '\n';
      std::cout << "wrote " << out.entries().size() << " tensors to " << out_path << '\n';
    };
  });

  // kl-heatmap
  std::string kl_dir = "fit-ref";
  double floor = 1e-12;
  auto* kl = app.add_subcommand("kl-heatmap", "KL of fitted PK distributions vs the random reference");
  kl->add_option("--bundle", bundle_path)->required()->envname("HEADSIM_BUNDLE");
  kl->add_option("--direction", kl_dir, "fit-ref: KL(fit || ref); ref-fit: KL(ref || fit)")
      ->check(CLI::IsMember({"fit-ref", "ref-fit"}));
  kl->add_option("--variance-floor", floor);
  kl->add_flag("--preprocessed", preprocessed);
  kl->add_option("--format", format)->check(CLI::IsMember({"csv", "json"}));
  kl->add_option("--out", out_path);
  kl->callback([&] {
    run = [&] {
      const auto bundle = TensorBundle::load(bundle_path);
      const auto store = load_store(bundle, preprocessed);
      json cfg = base_config("kl-heatmap", common);
      cfg.update({{"bundle", bundle_path}, {"direction", kl_dir}, {"variance_floor", floor},
                  {"preprocessed", preprocessed}});
      echo_config(cfg);
      KlOptions opts;
      opts.direction = kl_dir == "fit-ref" ? KlDirection::kFitVsReference
                                           : KlDirection::kReferenceVsFit;
      opts.variance_floor = floor;
      const auto hm = kl_heatmap(store, opts, common.threads);
      Output out(out_path);
      if (format == "csv") {
        hm.write_csv(out.stream());
        write_sidecar(out, cfg);
      } else {
        json j = hm.to_json();
        j["config"] = cfg;
        out.stream() << j.dump(1) << '\n';
      }
      for (const auto& p : hm.floored)
        std::cerr << "warning: variance floor engaged for " << p << '\n';
    };
  });

  // norms
  auto* nm = app.add_subcommand("norms", "Layerwise Frobenius norms of W_QK and W_OV");
  nm->add_option("--bundle", bundle_path)->required()->envname("HEADSIM_BUNDLE");
  nm->add_flag("--preprocessed", preprocessed);
  nm->add_option("--out", out_path);
  nm->callback([&] {
    run = [&] {
      const auto bundle = TensorBundle::load(bundle_path);
      const auto store = load_store(bundle, preprocessed);
      json cfg = base_config("norms", common);
      cfg.update({{"bundle", bundle_path}, {"preprocessed", preprocessed}});
      echo_config(cfg);
      Output out(out_path);
      out.stream() << "layer,qk_mean,qk_std,ov_mean,ov_std\n";
      const auto stats = layerwise_frobenius_stats(store);
      char buf[160];
      for (std::size_t l = 0; l < stats.size(); ++l) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", l, stats[l].qk_mean,
                      stats[l].qk_std, stats[l].ov_mean, stats[l].ov_std);
        out.stream() << buf;
      }
      write_sidecar(out, cfg);
    };
  });

  if (argc < 2) {
    std::cerr << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << "error[usage]: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (run) run();
    return 0;
  } catch (const Error& e) {
    switch (e.kind()) {
      case ErrorKind::kInvalidArgument:
        std::cerr << "error[usage]: " << e.what() << '\n';
        return kExitUsage;
      case ErrorKind::kBundle:
        std::cerr << "error[bundle]: " << e.what() << '\n';
        return kExitData;
      case ErrorKind::kNumerical:
        std::cerr << "error[numerical]: " << e.what() << '\n';
        return kExitSoftware;
    }
  } catch (const OutputError& e) {
    std::cerr << "error[output]: " << e.what() << '\n';
    return kExitCantCreate;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << '\n';
    return kExitSoftware;
  }
  return kExitSoftware;
}
