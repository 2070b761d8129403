#include "cir/cli.hpp"

#include <cstdlib>
#include <functional>
#include <iostream>
#include <memory>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "cir/io.hpp"
#include "cir/pipeline.hpp"

namespace cir::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Records every file a verb reads or writes, then emits run.json.
class Manifest {
 public:
  explicit Manifest(std::string verb) : verb_(std::move(verb)) {}

  void set_config(json c) { config_ = std::move(c); }
  void set_seed(std::uint64_t s) { seed_ = s; }

  void input(const fs::path& p) {
    inputs_.push_back({{"path", p.string()}, {"fnv1a64", io::hex64(hash_file(p))}});
  }
  void output(const fs::path& p, std::string_view bytes) {
    io::write_file_atomic(p, bytes);
    output_existing(p);
  }
  void output_existing(const fs::path& p) {
    outputs_.push_back({{"path", p.string()}, {"fnv1a64", io::hex64(hash_file(p))}});
  }

  /// Writes run.json into `dir` and returns the manifest text.
  std::string finish(const fs::path& dir) const {
    json j;
    j["verb"] = verb_;
    j["config"] = config_;
    j["seed"] = seed_;
    j["inputs"] = inputs_;
    j["artifacts"] = outputs_;
    const std::string text = j.dump(2) + "\n";
    fs::create_directories(dir);
    io::write_file_atomic(dir / "run.json", text);
    return text;
  }

 private:
  static std::uint64_t hash_file(const fs::path& p) {
    const auto bytes = io::read_file(p);
    return fnv1a64(bytes.data(), bytes.size());
  }

  std::string verb_;
  json config_ = json::object();
  std::uint64_t seed_ = 0;
  json inputs_ = json::array();
  json outputs_ = json::array();
};

using Override = std::function<void(TrainConfig&)>;

template <typename V, typename Setter>
void train_flag(CLI::App* app, std::vector<Override>& ov, const std::string& name,
                const std::string& help, Setter set) {
  auto value = std::make_shared<V>();
  CLI::Option* opt = app->add_option(name, *value, help);
  ov.push_back([opt, value, set](TrainConfig& c) {
    if (opt->count() > 0) set(c, *value);
  });
}

template <typename Setter>
void train_switch(CLI::App* app, std::vector<Override>& ov, const std::string& name,
                  const std::string& help, Setter set) {
  CLI::Option* opt = app->add_flag(name, help);
  ov.push_back([opt, set](TrainConfig& c) {
    if (opt->count() > 0) set(c);
  });
}

/// Flags shared by train and eval that map onto TrainConfig fields.
struct TrainFlags {
  std::string config_path;
  std::string mode;
  CLI::Option* threads_opt = nullptr;
  unsigned threads = 1;
  std::vector<Override> overrides;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "training config JSON file")->check(CLI::ExistingFile);
    app->add_option("--mode", mode, "infonce | dpo | zeroshot")
        ->check(CLI::IsMember({"infonce", "dpo", "zeroshot", "infonce_fusion", "retrieval_dpo", "zeroshot_eval"}));
    threads_opt = app->add_option("--threads", threads, "worker thread cap")->check(CLI::PositiveNumber);
    auto& ov = overrides;
    train_flag<std::uint64_t>(app, ov, "--seed", "model seed", [](TrainConfig& c, auto v) { c.seed = v; });
    train_flag<std::size_t>(app, ov, "--batch-size", "batch size",
                            [](TrainConfig& c, auto v) { c.batch_size = v; });
    train_flag<std::size_t>(app, ov, "--epochs", "epoch count", [](TrainConfig& c, auto v) { c.epochs = v; });
    train_flag<std::size_t>(app, ov, "--patience", "early stopping patience",
                            [](TrainConfig& c, auto v) { c.patience = v; });
    train_flag<double>(app, ov, "--tau", "InfoNCE temperature",
                       [](TrainConfig& c, auto v) { c.loss.temperature = v; });
    train_flag<double>(app, ov, "--beta", "DPO beta", [](TrainConfig& c, auto v) { c.loss.beta = v; });
    train_flag<double>(app, ov, "--logit-scale", "similarity scale",
                       [](TrainConfig& c, auto v) { c.loss.logit_scale = v; });
    train_switch(app, ov, "--exclude-positive", "drop the positive from the InfoNCE denominator",
                 [](TrainConfig& c) { c.loss.exclude_positive = true; });
    train_flag<std::string>(app, ov, "--optim-preset", "standard | blip2", [](TrainConfig& c, auto v) {
      apply_json(json{{"optim", {{"preset", v}}}}, c);
    });
    train_flag<double>(app, ov, "--lr", "learning rate", [](TrainConfig& c, auto v) { c.optim.lr = v; });
    train_flag<double>(app, ov, "--weight-decay", "AdamW weight decay",
                       [](TrainConfig& c, auto v) { c.optim.weight_decay = v; });
    train_flag<std::string>(app, ov, "--schedule", "constant | onecycle", [](TrainConfig& c, auto v) {
      apply_json(json{{"schedule", {{"kind", v}}}}, c);
    });
    train_flag<Eigen::Index>(app, ov, "--mining-k", "hard negative search depth",
                             [](TrainConfig& c, auto v) { c.mining_k = v; });
    train_flag<std::string>(app, ov, "--mining-gallery", "train | trainval",
                            [](TrainConfig& c, auto v) { c.mining_gallery = v; });
    train_flag<std::size_t>(app, ov, "--max-records-per-epoch", "training records per epoch ceiling",
                            [](TrainConfig& c, auto v) { c.max_records_per_epoch = v; });
    train_switch(app, ov, "--widen-trainable", "also train the fusion backbone",
                 [](TrainConfig& c) { c.model.widen_trainable = true; });
    auto ks = std::make_shared<std::vector<Eigen::Index>>();
    CLI::Option* ks_opt = app->add_option("--ks", *ks, "comma-separated recall cut-offs")->delimiter(',');
    ov.push_back([ks_opt, ks](TrainConfig& c) {
      if (ks_opt->count() > 0) c.eval_ks = *ks;
    });
  }

  TrainConfig resolve(Manifest& m) const {
    json file = json::object();
    if (!config_path.empty()) {
      try {
        file = json::parse(io::read_file(config_path));
      } catch (const json::exception& e) {
        fail(ErrorCode::Parse, config_path + ": " + e.what());
      }
      m.input(config_path);
    }
    if (!mode.empty()) file["mode"] = std::string(to_string(parse_mode(mode)));
    TrainConfig c = train_config_from_json(file);
    for (const auto& o : overrides) o(c);
    c.threads = resolve_threads();
    c.validate();
    return c;
  }

  unsigned resolve_threads() const {
    if (threads_opt->count() > 0) return threads;
    if (const char* env = std::getenv("CIR_THREADS"); env && *env) {
      try {
        const long v = std::stol(env);
        require(v >= 1, ErrorCode::InvalidArgument, "CIR_THREADS must be >= 1");
        return static_cast<unsigned>(v);
      } catch (const std::logic_error&) {
        fail(ErrorCode::InvalidArgument, std::string("CIR_THREADS is not a number: ") + env);
      }
    }
    return std::max(1u, std::thread::hardware_concurrency());
  }
};

struct Log {
  std::ostream& err;
  template <typename... Args>
  void operator()(const Args&... parts) const {
    err << "[cir]";
    ((err << ' ' << parts), ...);
    err << '\n';
  }
};

Dataset open_dataset(const fs::path& dir, Manifest& m) {
  Dataset d = load_dataset(dir);
  m.input(dir / "gallery.emb");
  m.input(dir / "triplets.jsonl");
  return d;
}

/// Loads the mining index from `cache` when its contents match the mining
/// gallery; otherwise builds it and writes the cache.
FlatIpIndex obtain_index(const Dataset& d, const TrainConfig& cfg, const fs::path& cache, Manifest& m,
                         const Log& log) {
  const Gallery raw = build_mining_gallery(d, cfg.mining_gallery);
  if (!cache.empty() && fs::exists(cache)) {
    std::string reason;
    try {
      FlatIpIndex ix = load_index(cache);
      const auto stub = make_vision_stub(cfg, d);
      if (ix.ids() != raw.ids())
        reason = "gallery ids differ";
      else if (ix.dim() != stub.output_dim())
        reason = "dimension differs";
      else {
        log("index: loaded cached index", cache.string(), "rows", ix.size());
        m.input(cache);
        return ix;
      }
    } catch (const Error& e) {
      reason = e.what();
    }
    log("index: cache", cache.string(), "is stale (" + reason + "), rebuilding");
  }
  FlatIpIndex ix = FlatIpIndex::build(encode_gallery(make_vision_stub(cfg, d), raw));
  log("index: built index over", ix.size(), "rows");
  if (!cache.empty()) {
    if (cache.has_parent_path()) fs::create_directories(cache.parent_path());
    m.output(cache, ix.encode());
    log("index: wrote cache", cache.string());
  }
  return ix;
}

Split parse_eval_split(const std::string& s) {
  const Split sp = parse_split(s);
  require(sp != Split::Train, ErrorCode::InvalidArgument, "evaluation split must be val or test");
  return sp;
}

void log_history(const TrainHistory& h, const Log& log) {
  log("initial batch loss", h.initial_loss);
  for (const auto& e : h.epochs) {
    const auto r10 = e.val_recall.count(10) ? e.val_recall.at(10) : 0.0;
    log("epoch", e.epoch, "loss", e.train_loss, "val R@10", r10, "lr", e.lr_last);
  }
  log("best epoch", h.best_epoch);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const Log log{err};
  CLI::App app{"Composed image retrieval toolkit", "cir"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a seeded synthetic dataset");
  SynthConfig sc;
  std::string synth_out;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--seed", sc.seed, "generator seed");
  synth->add_option("--gallery-size", sc.gallery_size, "image count");
  synth->add_option("--dim", sc.dim, "embedding width");
  synth->add_option("--vocab-size", sc.vocab_size, "token vocabulary size");
  synth->add_option("--edit-dim", sc.edit_dim, "edit direction width");
  synth->add_option("--noise-sigma", sc.noise_sigma, "target noise");

  // build-index
  auto* build = app.add_subcommand("build-index", "build or load the cached mining index");
  TrainFlags build_flags;
  std::string build_data, build_cache, build_out;
  build->add_option("--data", build_data, "dataset directory")->required();
  build->add_option("--index-cache", build_cache, "index file")->required();
  build->add_option("--out", build_out, "manifest directory (default: the cache's directory)");
  build_flags.attach(build);

  // train
  auto* train = app.add_subcommand("train", "train a model, or run zero-shot evaluation");
  TrainFlags train_flags;
  std::string train_data, train_out, train_cache;
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "output directory")->required();
  train->add_option("--index-cache", train_cache, "mining index cache (dpo)");
  train_flags.attach(train);

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint or the zero-shot baseline");
  TrainFlags eval_flags;
  std::string eval_data, eval_ckpt, eval_split = "val", eval_out = ".";
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file");
  eval->add_option("--split", eval_split, "val | test")->check(CLI::IsMember({"val", "test"}));
  eval->add_option("--out", eval_out, "output directory");
  eval_flags.attach(eval);

  // report
  auto* report = app.add_subcommand("report", "re-render a recall report");
  std::string report_in, report_out = ".";
  report->add_option("--input", report_in, "report JSON (averages are recomputed)")->required();
  report->add_option("--out", report_out, "output directory");

  std::vector<const char*> argv{"cir"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kUsage;
  }

  if (synth->parsed()) {
    sc.validate();
    Manifest m("synth");
    m.set_seed(sc.seed);
    const json cfg = {{"gallery_size", sc.gallery_size}, {"dim", sc.dim},
                      {"vocab_size", sc.vocab_size},     {"edit_dim", sc.edit_dim},
                      {"noise_sigma", sc.noise_sigma},   {"seed", sc.seed},
                      {"max_len", sc.max_len},           {"split_fractions", sc.split_fractions}};
    m.set_config(cfg);
    const fs::path dir = synth_out;
    fs::create_directories(dir);
    const auto data = generate_synthetic(sc);
    Dataset d{data.gallery, data.triplets, sc.vocab_size, sc.max_len};
    for (const auto& p : save_dataset(d, dir, {{"synth", cfg}})) m.output_existing(p);
    save_planted_truth(data.truth, dir);
    for (const char* f : {"truth_a.emb", "truth_b.emb", "truth_tokens.emb"}) m.output_existing(dir / f);
    log("synth: wrote", d.triplets.records.size(), "triplets and", d.gallery.size(), "images to",
        dir.string());
    out << m.finish(dir);
    return kOk;
  }

  if (build->parsed()) {
    Manifest m("build-index");
    const auto cfg = build_flags.resolve(m);
    m.set_config(cfg);
    m.set_seed(cfg.seed);
    const Dataset d = open_dataset(build_data, m);
    const fs::path cache = build_cache;
    obtain_index(d, cfg, cache, m, log);
    if (build_out.empty()) build_out = cache.has_parent_path() ? cache.parent_path().string() : ".";
    out << m.finish(build_out);
    return kOk;
  }

  if (train->parsed()) {
    Manifest m("train");
    const auto cfg = train_flags.resolve(m);
    m.set_config(cfg);
    m.set_seed(cfg.seed);
    const Dataset d = open_dataset(train_data, m);
    const fs::path dir = train_out;
    fs::create_directories(dir);
    if (cfg.mode == Mode::ZeroShotEval) {
      const auto r = zeroshot_eval(d, cfg, Split::Val);
      m.output(dir / "report.json", report_json(r));
      log("zeroshot: val queries", r.query_count);
      out << m.finish(dir);
      return kOk;
    }
    TrainResult res;
    if (cfg.mode == Mode::InfoNceFusion) {
      log("train: infonce_fusion on", d.triplets.of_split(Split::Train).size(), "records");
      res = train_fusion_infonce(d, cfg);
    } else {
      log("train: retrieval_dpo on", d.triplets.of_split(Split::Train).size(), "records");
      const auto ix = obtain_index(d, cfg, train_cache, m, log);
      res = train_retrieval_dpo(d, cfg, nullptr, &ix);
    }
    log_history(res.history, log);
    require(res.frozen_hash_before == res.frozen_hash_after, ErrorCode::InvalidArgument,
            "frozen parameters changed during training");
    m.output(dir / "checkpoint.ckpt", res.checkpoint.encode());
    m.output(dir / "history.jsonl", history_jsonl(res.history));
    m.output(dir / "report.json", report_json(res.best_report));
    out << m.finish(dir);
    return kOk;
  }

  if (eval->parsed()) {
    Manifest m("eval");
    const Split split = parse_eval_split(eval_split);
    auto cfg = eval_flags.resolve(m);
    const Dataset d = open_dataset(eval_data, m);
    RecallReport r;
    if (!eval_ckpt.empty()) {
      const auto ck = load_checkpoint(eval_ckpt);
      m.input(eval_ckpt);
      const auto ck_cfg = config_of(ck);
      m.set_config({{"checkpoint_config", ck_cfg}, {"split", eval_split}, {"eval_ks", cfg.eval_ks}});
      m.set_seed(ck_cfg.seed);
      r = evaluate_checkpoint(ck, d, split, cfg.eval_ks, cfg.threads);
    } else {
      require(cfg.mode == Mode::ZeroShotEval, ErrorCode::InvalidArgument,
              "eval needs --checkpoint unless --mode zeroshot");
      m.set_config({{"config", cfg}, {"split", eval_split}});
      m.set_seed(cfg.seed);
      r = zeroshot_eval(d, cfg, split);
    }
    const std::string text = report_json(r);
    m.output(fs::path(eval_out) / ("report_" + eval_split + ".json"), text);
    m.finish(eval_out);
    log("eval:", r.query_count, eval_split, "queries");
    out << text;
    return kOk;
  }

  // report
  Manifest m("report");
  RecallReport r = parse_report_json(io::read_file(report_in));
  m.input(report_in);
  r.recompute_average();
  const std::string text = report_json(r);
  fs::create_directories(report_out);
  m.output(fs::path(report_out) / "report.json", text);
  m.finish(report_out);
  out << text;
  return kOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return run(args, out, err);
  } catch (const Error& e) {
    err << "[cir] error (" << to_string(e.code()) << "): " << e.what() << '\n';
    switch (e.code()) {
      case ErrorCode::NonFiniteGradient: return kNumericFailure;
      case ErrorCode::InvalidArgument:
      case ErrorCode::InvalidTemperature:
      case ErrorCode::StepOutOfRange: return kUsage;
      default: return kDataError;
    }
  } catch (const fs::filesystem_error& e) {
    err << "[cir] error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    err << "[cir] error: " << e.what() << '\n';
    return kDataError;
  }
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace cir::cli
