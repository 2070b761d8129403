#include "cir/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "cir/io.hpp"
#include "cir/parallel.hpp"

namespace cir {
namespace {

using json = nlohmann::json;

constexpr std::uint64_t kVisionTag = 11;
constexpr std::uint64_t kFusionTag = 12;
constexpr std::uint64_t kTextTag = 13;
constexpr std::uint64_t kShuffleTag = 21;

std::string recall_key(Eigen::Index k) { return "R@" + std::to_string(k); }

double round2(double percent) { return std::round(percent * 100.0) / 100.0; }

template <typename T>
void take(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const json& j, std::initializer_list<std::string_view> known, const char* where) {
  for (const auto& [key, _] : j.items()) {
    const bool ok = std::find(known.begin(), known.end(), key) != known.end();
    require(ok, ErrorCode::Parse, std::string("unknown config key '") + key + "' in " + where);
  }
}

std::string_view to_string(ScheduleKind k) { return k == ScheduleKind::OneCycle ? "onecycle" : "constant"; }

ScheduleKind parse_schedule(std::string_view s) {
  if (s == "constant") return ScheduleKind::Constant;
  if (s == "onecycle") return ScheduleKind::OneCycle;
  fail(ErrorCode::Parse, "unknown schedule '" + std::string(s) + "'");
}

Gallery subset_gallery(const Gallery& g, const std::set<std::string>& ids) {
  std::vector<std::string> out_ids(ids.begin(), ids.end());
  MatrixXf m(static_cast<Eigen::Index>(out_ids.size()), g.dim());
  for (std::size_t i = 0; i < out_ids.size(); ++i) {
    const auto row = g.row_of(out_ids[i]);
    require(row.has_value(), ErrorCode::UnknownId, "gallery has no id '" + out_ids[i] + "'");
    m.row(static_cast<Eigen::Index>(i)) = g.embeddings().row(*row);
  }
  return Gallery(std::move(out_ids), std::move(m));
}

std::set<std::string> image_ids(const Dataset& d, std::initializer_list<Split> splits) {
  std::set<std::string> ids;
  for (const auto& r : d.triplets.records) {
    if (std::find(splits.begin(), splits.end(), r.split) == splits.end()) continue;
    ids.insert(r.reference_id);
    ids.insert(r.target_id);
  }
  return ids;
}

std::vector<const TripletRecord*> training_records(const Dataset& d, const TrainConfig& cfg) {
  auto recs = d.triplets.of_split(Split::Train);
  require(!recs.empty(), ErrorCode::InvalidArgument, "dataset has no training records");
  if (recs.size() > cfg.max_records_per_epoch) recs.resize(cfg.max_records_per_epoch);
  return recs;
}

void shuffle(std::vector<std::size_t>& v, SeededRng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

class LrSchedule {
 public:
  LrSchedule(const TrainConfig& cfg, std::uint64_t steps_per_epoch) : base_(cfg.optim.lr) {
    if (cfg.schedule.kind == ScheduleKind::OneCycle) {
      one_ = OneCycleConfig::for_epochs(cfg.optim.lr, cfg.epochs, steps_per_epoch);
      one_->div_factor = cfg.schedule.div_factor;
      one_->final_div_factor = cfg.schedule.final_div_factor;
      if (cfg.schedule.pct_start) one_->pct_start = *cfg.schedule.pct_start;
      one_->validate();
    }
  }
  double at(std::uint64_t step) const { return one_ ? onecycle_lr(step, *one_) : base_; }

 private:
  double base_;
  std::optional<OneCycleConfig> one_;
};

/// Per-epoch bookkeeping shared by both training loops.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  /// Returns true when this epoch is the new best.
  bool observe(std::size_t epoch, double recall_at_10) {
    if (best_epoch_ == 0 || recall_at_10 > best_) {
      best_ = recall_at_10;
      best_epoch_ = epoch;
      return true;
    }
    return false;
  }
  bool should_stop(std::size_t epoch) const { return epoch - best_epoch_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }

 private:
  std::size_t patience_;
  double best_ = 0.0;
  std::size_t best_epoch_ = 0;
};

double selection_recall(const RecallReport& r) {
  auto it = r.average.find(10);
  if (it != r.average.end()) return it->second;
  return r.average.empty() ? 0.0 : r.average.rbegin()->second;
}

json model_json(const ModelConfig& m) {
  return {{"d_txt", m.d_txt},         {"d_q", m.d_q},
          {"d_v", m.d_v},             {"patches", m.patches},
          {"queries", m.queries},     {"vision_identity", m.vision_identity},
          {"d_img", m.d_img},         {"train_token_table", m.train_token_table},
          {"widen_trainable", m.widen_trainable}};
}

void apply_model_json(const json& j, ModelConfig& m) {
  reject_unknown(j,
                 {"d_txt", "d_q", "d_v", "patches", "queries", "vision_identity", "d_img",
                  "train_token_table", "widen_trainable"},
                 "model");
  take(j, "d_txt", m.d_txt);
  take(j, "d_q", m.d_q);
  take(j, "d_v", m.d_v);
  take(j, "patches", m.patches);
  take(j, "queries", m.queries);
  take(j, "vision_identity", m.vision_identity);
  take(j, "d_img", m.d_img);
  take(j, "train_token_table", m.train_token_table);
  take(j, "widen_trainable", m.widen_trainable);
}

}  // namespace

// --- Config --------------------------------------------------------------------

std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::InfoNceFusion: return "infonce_fusion";
    case Mode::RetrievalDpo: return "retrieval_dpo";
    case Mode::ZeroShotEval: return "zeroshot_eval";
  }
  return "infonce_fusion";
}

Mode parse_mode(std::string_view s) {
  if (s == "infonce_fusion" || s == "infonce") return Mode::InfoNceFusion;
  if (s == "retrieval_dpo" || s == "dpo") return Mode::RetrievalDpo;
  if (s == "zeroshot_eval" || s == "zeroshot") return Mode::ZeroShotEval;
  fail(ErrorCode::Parse, "unknown mode '" + std::string(s) + "'");
}

ModelConfig ModelConfig::full_dims() {
  ModelConfig m;
  m.vision_identity = false;
  m.d_img = 512;
  m.d_txt = 512;
  m.d_v = 1024;
  return m;
}

TrainConfig TrainConfig::defaults(Mode mode) {
  TrainConfig c;
  c.mode = mode;
  c.batch_size = mode == Mode::RetrievalDpo ? 256 : 128;
  c.optim = AdamWConfig::standard();
  return c;
}

void TrainConfig::validate() const {
  require(batch_size >= 1, ErrorCode::InvalidArgument, "batch_size must be >= 1");
  require(epochs >= 1 && epochs <= 10, ErrorCode::InvalidArgument, "epochs must lie in [1, 10]");
  require(!eval_ks.empty() && std::is_sorted(eval_ks.begin(), eval_ks.end()) && eval_ks.front() >= 1,
          ErrorCode::InvalidArgument, "eval_ks must be positive and sorted ascending");
  require(mining_k >= 1, ErrorCode::InvalidArgument, "mining_k must be >= 1");
  require(mining_gallery == "train" || mining_gallery == "trainval", ErrorCode::InvalidArgument,
          "mining_gallery must be 'train' or 'trainval'");
  require(max_records_per_epoch >= 1, ErrorCode::InvalidArgument,
          "max_records_per_epoch must be >= 1");
  loss.validate();
  optim.validate();
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"mode", std::string(to_string(c.mode))},
           {"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"patience", c.patience},
           {"seed", c.seed},
           {"loss",
            {{"temperature", c.loss.temperature},
             {"beta", c.loss.beta},
             {"logit_scale", c.loss.logit_scale},
             {"exclude_positive", c.loss.exclude_positive}}},
           {"optim",
            {{"lr", c.optim.lr},
             {"beta1", c.optim.beta1},
             {"beta2", c.optim.beta2},
             {"eps", c.optim.eps},
             {"weight_decay", c.optim.weight_decay}}},
           {"schedule",
            {{"kind", std::string(to_string(c.schedule.kind))},
             {"div_factor", c.schedule.div_factor},
             {"final_div_factor", c.schedule.final_div_factor},
             {"pct_start", c.schedule.pct_start ? json(*c.schedule.pct_start) : json(nullptr)}}},
           {"mining_k", c.mining_k},
           {"eval_ks", c.eval_ks},
           {"mining_gallery", c.mining_gallery},
           {"max_records_per_epoch", c.max_records_per_epoch},
           {"model", model_json(c.model)}};
}

void apply_json(const json& j, TrainConfig& c) {
  require(j.is_object(), ErrorCode::Parse, "training config must be a JSON object");
  try {
    reject_unknown(j,
                   {"mode", "batch_size", "epochs", "patience", "seed", "loss", "optim",
                    "schedule", "mining_k", "eval_ks", "mining_gallery", "max_records_per_epoch",
                    "model", "threads"},
                   "config");
    if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
    take(j, "batch_size", c.batch_size);
    take(j, "epochs", c.epochs);
    take(j, "patience", c.patience);
    take(j, "seed", c.seed);
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      reject_unknown(l, {"temperature", "beta", "logit_scale", "exclude_positive"}, "loss");
      take(l, "temperature", c.loss.temperature);
      take(l, "beta", c.loss.beta);
      take(l, "logit_scale", c.loss.logit_scale);
      take(l, "exclude_positive", c.loss.exclude_positive);
    }
    if (j.contains("optim")) {
      const auto& o = j.at("optim");
      reject_unknown(o, {"preset", "lr", "beta1", "beta2", "eps", "weight_decay"}, "optim");
      if (o.contains("preset")) {
        const auto p = o.at("preset").get<std::string>();
        require(p == "standard" || p == "blip2", ErrorCode::Parse, "unknown optim preset " + p);
        c.optim = p == "blip2" ? AdamWConfig::blip2() : AdamWConfig::standard();
      }
      take(o, "lr", c.optim.lr);
      take(o, "beta1", c.optim.beta1);
      take(o, "beta2", c.optim.beta2);
      take(o, "eps", c.optim.eps);
      take(o, "weight_decay", c.optim.weight_decay);
    }
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      reject_unknown(s, {"kind", "div_factor", "final_div_factor", "pct_start"}, "schedule");
      if (s.contains("kind")) c.schedule.kind = parse_schedule(s.at("kind").get<std::string>());
      take(s, "div_factor", c.schedule.div_factor);
      take(s, "final_div_factor", c.schedule.final_div_factor);
      if (s.contains("pct_start")) {
        if (s.at("pct_start").is_null())
          c.schedule.pct_start.reset();
        else
          c.schedule.pct_start = s.at("pct_start").get<double>();
      }
    }
    take(j, "mining_k", c.mining_k);
    take(j, "eval_ks", c.eval_ks);
    take(j, "mining_gallery", c.mining_gallery);
    take(j, "max_records_per_epoch", c.max_records_per_epoch);
    take(j, "threads", c.threads);
    if (j.contains("model")) {
      const auto& m = j.at("model");
      if (m.is_string()) {
        require(m.get<std::string>() == "full-dims", ErrorCode::Parse, "unknown model preset");
        c.model = ModelConfig::full_dims();
      } else {
        apply_model_json(m, c.model);
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::Parse, std::string("training config: ") + e.what());
  }
}

TrainConfig train_config_from_json(const json& j) {
  Mode mode = Mode::InfoNceFusion;
  if (j.is_object() && j.contains("mode") && j.at("mode").is_string())
    mode = parse_mode(j.at("mode").get<std::string>());
  TrainConfig c = TrainConfig::defaults(mode);
  apply_json(j, c);
  return c;
}

// --- Dataset -----------------------------------------------------------------

Dataset load_dataset(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), ErrorCode::Io,
          "data directory " + dir.string() + " does not exist");
  Dataset d;
  const auto meta_path = dir / "dataset.json";
  if (std::filesystem::exists(meta_path)) {
    try {
      const auto meta = json::parse(io::read_file(meta_path));
      take(meta, "vocab_size", d.vocab_size);
      take(meta, "max_len", d.max_len);
    } catch (const json::exception& e) {
      fail(ErrorCode::Parse, meta_path.string() + ": " + e.what());
    }
  }
  d.gallery = load_gallery(dir / "gallery.emb");
  d.triplets = load_triplets(dir / "triplets.jsonl", d.gallery, d.vocab_size, d.max_len);
  return d;
}

std::vector<std::filesystem::path> save_dataset(const Dataset& d, const std::filesystem::path& dir,
                                                const json& meta) {
  json m = meta;
  m["vocab_size"] = d.vocab_size;
  m["max_len"] = d.max_len;
  m["dim"] = d.gallery.dim();
  const std::vector<std::filesystem::path> paths = {dir / "gallery.emb", dir / "triplets.jsonl",
                                                    dir / "dataset.json"};
  save_gallery(d.gallery, paths[0]);
  save_triplets(d.triplets, paths[1]);
  io::write_file_atomic(paths[2], m.dump(2) + "\n");
  return paths;
}

Gallery build_eval_gallery(const Dataset& d) {
  return subset_gallery(d.gallery, image_ids(d, {Split::Train, Split::Val}));
}

Gallery gallery_for_split(const Dataset& d, Split split) {
  if (split == Split::Test)
    return subset_gallery(d.gallery, image_ids(d, {Split::Train, Split::Val, Split::Test}));
  return build_eval_gallery(d);
}

Gallery build_mining_gallery(const Dataset& d, std::string_view which) {
  if (which == "trainval") return build_eval_gallery(d);
  require(which == "train", ErrorCode::InvalidArgument, "unknown mining gallery");
  return subset_gallery(d.gallery, image_ids(d, {Split::Train}));
}

Gallery encode_gallery(const VisionStub<double>& stub, const Gallery& g) {
  MatrixXf out(g.size(), stub.output_dim());
  for (Eigen::Index r = 0; r < g.size(); ++r)
    out.row(r) = vision_encode(stub, g.row64(r)).transpose().cast<float>();
  return Gallery(g.ids(), std::move(out));
}

// --- Recall --------------------------------------------------------------------

void RecallReport::recompute_average() {
  average.clear();
  if (per_category.empty()) return;
  std::set<Eigen::Index> ks;
  for (const auto& [_, m] : per_category)
    for (const auto& [k, v] : m) ks.insert(k);
  for (auto k : ks) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& [_, m] : per_category) {
      auto it = m.find(k);
      if (it == m.end()) continue;
      sum += it->second;
      ++n;
    }
    if (n == per_category.size()) average[k] = sum / double(n);
  }
}

RecallReport evaluate_recall(const FlatIpIndex& ix, std::span<const Query> queries,
                             std::span<const Eigen::Index> ks, unsigned threads) {
  require(!ks.empty(), ErrorCode::InvalidArgument, "no K values requested");
  const Eigen::Index max_k = *std::max_element(ks.begin(), ks.end());
  for (const auto& q : queries)
    require(ix.gallery().contains(q.target_id), ErrorCode::UnknownTarget,
            "target '" + q.target_id + "' is not in the evaluation gallery");

  // Rank of each query's target within the top max_k, or -1.
  std::vector<Eigen::Index> rank(queries.size(), -1);
  parallel_for(queries.size(), threads, [&](std::size_t i) {
    const auto hits = ix.search(queries[i].prompt, max_k);
    for (std::size_t r = 0; r < hits.size(); ++r)
      if (hits[r].id == queries[i].target_id) {
        rank[i] = static_cast<Eigen::Index>(r);
        break;
      }
  });

  std::map<std::string, std::pair<std::size_t, std::map<Eigen::Index, std::size_t>>> counts;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    auto& [total, hits] = counts[queries[i].category];
    ++total;
    for (auto k : ks) hits[k] += (rank[i] >= 0 && rank[i] < k) ? 1 : 0;
  }
  RecallReport r;
  r.query_count = queries.size();
  for (const auto& [cat, c] : counts)
    for (auto k : ks) r.per_category[cat][k] = double(c.second.at(k)) / double(c.first);
  r.recompute_average();
  return r;
}

std::string report_json(const RecallReport& r) {
  auto render = [](const std::map<Eigen::Index, double>& m) {
    json o = json::object();
    for (const auto& [k, v] : m) o[recall_key(k)] = round2(100.0 * v);
    return o;
  };
  json j;
  j["categories"] = json::object();
  for (const auto& [cat, m] : r.per_category) j["categories"][cat] = render(m);
  j["average"] = render(r.average);
  j["query_count"] = r.query_count;
  return j.dump() + "\n";
}

RecallReport parse_report_json(std::string_view text) {
  RecallReport r;
  auto parse_ks = [](const json& o) {
    std::map<Eigen::Index, double> m;
    for (const auto& [key, v] : o.items()) {
      require(key.starts_with("R@"), ErrorCode::Parse, "bad recall key '" + key + "'");
      m[std::stol(key.substr(2))] = v.get<double>() / 100.0;
    }
    return m;
  };
  try {
    const auto j = json::parse(text);
    for (const auto& [cat, o] : j.at("categories").items()) r.per_category[cat] = parse_ks(o);
    if (j.contains("average")) r.average = parse_ks(j.at("average"));
    take(j, "query_count", r.query_count);
  } catch (const json::exception& e) {
    fail(ErrorCode::Parse, std::string("report: ") + e.what());
  }
  return r;
}

// --- Models --------------------------------------------------------------------

Eigen::VectorXd FusionModel::prompt(const Dataset& d, const TripletRecord& rec,
                                    FusionCache<double>* cache) const {
  const auto row = d.gallery.row_of(rec.reference_id);
  require(row.has_value(), ErrorCode::UnknownId, "no reference '" + rec.reference_id + "'");
  return fuse(fusion, vision_patches(vision, d.gallery.row64(*row)), rec.tokens, cache);
}

VisionStub<double> make_vision_stub(const TrainConfig& cfg, const Dataset& d) {
  SeededRng rng = SeededRng(cfg.seed).fork(kVisionTag);
  const auto d_img = cfg.model.vision_identity ? d.gallery.dim() : cfg.model.d_img;
  return VisionStub<double>::init(d.gallery.dim(), d_img, cfg.model.vision_identity,
                                  cfg.model.patches, cfg.model.d_v, rng);
}

FusionModel make_fusion_model(const TrainConfig& cfg, const Dataset& d) {
  FusionModel m{make_vision_stub(cfg, d), {}};
  require(m.vision.output_dim() == cfg.model.d_txt, ErrorCode::DimMismatch,
          "prompt width d_txt must equal the image embedding width");
  SeededRng rng = SeededRng(cfg.seed).fork(kFusionTag);
  FusionConfig fc{d.vocab_size,    cfg.model.queries,           cfg.model.d_q,
                  cfg.model.d_v,   cfg.model.d_txt,             cfg.model.train_token_table,
                  cfg.model.widen_trainable};
  m.fusion = FusionParams<double>::init(fc, rng);
  return m;
}

TextModel make_text_model(const TrainConfig& cfg, const Dataset& d) {
  TextModel m{make_vision_stub(cfg, d), {}};
  require(m.vision.output_dim() == cfg.model.d_txt, ErrorCode::DimMismatch,
          "prompt width d_txt must equal the image embedding width");
  SeededRng rng = SeededRng(cfg.seed).fork(kTextTag);
  m.text = TextTowerParams<double>::init({d.vocab_size, d.max_len, cfg.model.d_txt}, rng);
  return m;
}

std::uint64_t frozen_hash(const FusionModel& m) {
  return bundle_hash(m.vision, false) ^ (bundle_hash(m.fusion, false) * 31);
}

std::uint64_t frozen_hash(const TextModel& m) {
  return bundle_hash(m.vision, false) ^ (bundle_hash(m.text, false) * 31);
}

namespace {
json checkpoint_config(const TrainConfig& cfg, const Dataset& d) {
  json j = cfg;
  j["vocab_size"] = d.vocab_size;
  j["max_len"] = d.max_len;
  j["gallery_dim"] = d.gallery.dim();
  return j;
}

TrainConfig config_for_restore(const Checkpoint& ck, const Dataset& d) {
  TrainConfig cfg = config_of(ck);
  require(ck.config.value("vocab_size", d.vocab_size) == d.vocab_size &&
              ck.config.value("gallery_dim", d.gallery.dim()) == d.gallery.dim(),
          ErrorCode::DimMismatch, "checkpoint was trained on data of a different shape");
  return cfg;
}
}  // namespace

TrainConfig config_of(const Checkpoint& ck) {
  json j = ck.config;
  for (const char* k : {"vocab_size", "max_len", "gallery_dim"}) j.erase(k);
  return train_config_from_json(j);
}

Checkpoint to_checkpoint(const FusionModel& m, const TrainConfig& cfg, const Dataset& d) {
  Checkpoint ck;
  ck.config = checkpoint_config(cfg, d);
  append_bundle(ck, m.vision);
  append_bundle(ck, m.fusion);
  return ck;
}

Checkpoint to_checkpoint(const TextModel& m, const TrainConfig& cfg, const Dataset& d) {
  Checkpoint ck;
  ck.config = checkpoint_config(cfg, d);
  append_bundle(ck, m.vision);
  append_bundle(ck, m.text);
  return ck;
}

FusionModel fusion_from_checkpoint(const Checkpoint& ck, const Dataset& d) {
  auto m = make_fusion_model(config_for_restore(ck, d), d);
  restore_bundle(ck, m.vision);
  restore_bundle(ck, m.fusion);
  return m;
}

TextModel text_from_checkpoint(const Checkpoint& ck, const Dataset& d) {
  auto m = make_text_model(config_for_restore(ck, d), d);
  restore_bundle(ck, m.vision);
  restore_bundle(ck, m.text);
  return m;
}

std::vector<Query> build_queries(const FusionModel& m, const Dataset& d, Split split,
                                 unsigned threads) {
  const auto recs = d.triplets.of_split(split);
  std::vector<Query> qs(recs.size());
  parallel_for(recs.size(), threads, [&](std::size_t i) {
    qs[i] = {m.prompt(d, *recs[i]), recs[i]->target_id, recs[i]->category};
  });
  return qs;
}

std::vector<Query> build_queries(const TextModel& m, const Dataset& d, Split split,
                                 unsigned threads) {
  const auto recs = d.triplets.of_split(split);
  std::vector<Query> qs(recs.size());
  parallel_for(recs.size(), threads, [&](std::size_t i) {
    qs[i] = {m.prompt(*recs[i]), recs[i]->target_id, recs[i]->category};
  });
  return qs;
}

RecallReport evaluate_checkpoint(const Checkpoint& ck, const Dataset& d, Split split,
                                 std::span<const Eigen::Index> ks, unsigned threads) {
  const auto cfg = config_of(ck);
  if (cfg.mode == Mode::InfoNceFusion) {
    const auto m = fusion_from_checkpoint(ck, d);
    const auto ix = FlatIpIndex::build(encode_gallery(m.vision, gallery_for_split(d, split)));
    return evaluate_recall(ix, build_queries(m, d, split, threads), ks, threads);
  }
  const auto m = text_from_checkpoint(ck, d);
  const auto ix = FlatIpIndex::build(encode_gallery(m.vision, gallery_for_split(d, split)));
  return evaluate_recall(ix, build_queries(m, d, split, threads), ks, threads);
}

// --- Training ------------------------------------------------------------------

std::string history_jsonl(const TrainHistory& h) {
  std::string out;
  for (const auto& e : h.epochs) {
    json j;
    j["epoch"] = e.epoch;
    j["train_loss"] = e.train_loss;
    j["lr_last"] = e.lr_last;
    j["best"] = e.epoch == h.best_epoch;
    json recall = json::object();
    for (const auto& [k, v] : e.val_recall) recall[recall_key(k)] = v;
    j["val_recall"] = recall;
    if (e.epoch == 1) j["initial_batch_loss"] = h.initial_loss;
    out += j.dump() + "\n";
  }
  return out;
}

namespace {

/// Shared epoch loop. `step(batch, lr)` runs forward/backward/update on one
/// batch and returns its loss; `evaluate()` returns the val report;
/// `snapshot()` returns the current checkpoint.
template <typename Step, typename Evaluate, typename Snapshot>
TrainResult run_epochs(const TrainConfig& cfg, std::size_t n_records, Step&& step,
                       Evaluate&& evaluate, Snapshot&& snapshot) {
  TrainResult result;
  const std::size_t steps_per_epoch = (n_records + cfg.batch_size - 1) / cfg.batch_size;
  const LrSchedule schedule(cfg, steps_per_epoch);
  SeededRng shuffle_rng = SeededRng(cfg.seed).fork(kShuffleTag);
  EarlyStopper stopper(cfg.patience);
  std::vector<std::size_t> order(n_records);
  std::uint64_t global_step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n_records; ++i) order[i] = i;
    shuffle(order, shuffle_rng);
    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(n_records, lo + cfg.batch_size);
      std::span<const std::size_t> batch(order.data() + lo, hi - lo);
      lr = schedule.at(global_step);
      double loss = 0.0;
      try {
        loss = step(batch, lr);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::ZeroVector) throw;
        fail(ErrorCode::NonFiniteGradient, std::string("training diverged: ") + e.what());
      }
      require(std::isfinite(loss), ErrorCode::NonFiniteGradient, "training loss is not finite");
      if (global_step == 0) result.history.initial_loss = loss;
      loss_sum += loss;
      ++global_step;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / double(steps_per_epoch);
    rec.lr_last = lr;
    RecallReport report = evaluate();
    rec.val_recall = report.average;
    result.history.epochs.push_back(rec);
    if (stopper.observe(epoch, selection_recall(report))) {
      result.checkpoint = snapshot();
      result.best_report = std::move(report);
    }
    result.history.best_epoch = stopper.best_epoch();
    if (stopper.should_stop(epoch)) break;
  }
  return result;
}

template <typename Bundle>
Bundle reduce_in_order(const Bundle& zero, std::vector<Bundle>& parts) {
  Bundle total = zero;
  for (const auto& p : parts) add_into(total, p);
  return total;
}

}  // namespace

TrainResult train_fusion_infonce(const Dataset& d, const TrainConfig& cfg, const FusionModel* init) {
  cfg.validate();
  require(cfg.mode == Mode::InfoNceFusion, ErrorCode::InvalidArgument,
          "train_fusion_infonce needs mode infonce_fusion");
  FusionModel model = init ? *init : make_fusion_model(cfg, d);
  const auto before = frozen_hash(model);
  const auto records = training_records(d, cfg);
  const auto eval_index = FlatIpIndex::build(encode_gallery(model.vision, build_eval_gallery(d)));

  // Target embeddings are frozen; encode once.
  std::vector<Eigen::VectorXd> targets(records.size());
  for (std::size_t i = 0; i < records.size(); ++i)
    targets[i] = vision_encode(model.vision, d.gallery.row64(*d.gallery.row_of(records[i]->target_id)));

  AdamWState<double> state;
  const FusionParams<double> zero = zeros_like(model.fusion);

  auto step = [&](std::span<const std::size_t> batch, double lr) {
    const auto b = static_cast<Eigen::Index>(batch.size());
    std::vector<FusionCache<double>> caches(batch.size());
    MatrixXd prompts(b, model.fusion.dim()), tgt(b, model.fusion.dim());
    parallel_for(batch.size(), cfg.threads, [&](std::size_t i) {
      prompts.row(static_cast<Eigen::Index>(i)) =
          model.prompt(d, *records[batch[i]], &caches[i]).transpose();
    });
    for (std::size_t i = 0; i < batch.size(); ++i)
      tgt.row(static_cast<Eigen::Index>(i)) = targets[batch[i]].transpose();
    const auto loss = info_nce(prompts, tgt, cfg.loss.temperature, cfg.loss.exclude_positive);
    const MatrixXd& dprompts = loss.grads.at("prompts");
    std::vector<FusionParams<double>> parts(batch.size(), zero);
    parallel_for(batch.size(), cfg.threads, [&](std::size_t i) {
      fuse_backward(model.fusion, records[batch[i]]->tokens, caches[i],
                    Eigen::VectorXd(dprompts.row(static_cast<Eigen::Index>(i)).transpose()), parts[i]);
    });
    AdamWConfig opt = cfg.optim;
    opt.lr = lr;
    adamw_step(model.fusion, reduce_in_order(zero, parts), state, opt);
    return loss.value;
  };
  auto evaluate = [&] {
    return evaluate_recall(eval_index, build_queries(model, d, Split::Val, cfg.threads), cfg.eval_ks,
                           cfg.threads);
  };
  auto snapshot = [&] {
    auto ck = to_checkpoint(model, cfg, d);
    append_optimizer(ck, state);
    return ck;
  };
  TrainResult result = run_epochs(cfg, records.size(), step, evaluate, snapshot);
  result.frozen_hash_before = before;
  result.frozen_hash_after = frozen_hash(model);
  return result;
}

TrainResult train_retrieval_dpo(const Dataset& d, const TrainConfig& cfg, const TextModel* init,
                                const FlatIpIndex* mining_index) {
  cfg.validate();
  require(cfg.mode == Mode::RetrievalDpo, ErrorCode::InvalidArgument,
          "train_retrieval_dpo needs mode retrieval_dpo");
  TextModel model = init ? *init : make_text_model(cfg, d);
  const auto before = frozen_hash(model);
  const auto records = training_records(d, cfg);

  std::optional<FlatIpIndex> built;
  if (!mining_index) {
    built = FlatIpIndex::build(encode_gallery(model.vision, build_mining_gallery(d, cfg.mining_gallery)));
    mining_index = &*built;
  }
  const auto eval_index = FlatIpIndex::build(encode_gallery(model.vision, build_eval_gallery(d)));

  // The mining index is static, so each record's hard negative is fixed.
  std::vector<Eigen::VectorXd> positives(records.size()), negatives(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& target = records[i]->target_id;
    const auto pos_row = mining_index->gallery().row_of(target);
    require(pos_row.has_value(), ErrorCode::NotFound,
            "training target '" + target + "' is missing from the mining index");
    const auto neg_row = mining_index->mine_hard_negative(*pos_row, cfg.mining_k);
    const auto& neg_id = mining_index->ids()[static_cast<std::size_t>(neg_row)];
    positives[i] = vision_encode(model.vision, d.gallery.row64(*d.gallery.row_of(target)));
    negatives[i] = vision_encode(model.vision, d.gallery.row64(*d.gallery.row_of(neg_id)));
  }

  AdamWState<double> state;
  const TextTowerParams<double> zero = zeros_like(model.text);

  auto step = [&](std::span<const std::size_t> batch, double lr) {
    const auto b = static_cast<Eigen::Index>(batch.size());
    std::vector<TextCache<double>> caches(batch.size());
    std::vector<Eigen::VectorXd> prompts(batch.size());
    Eigen::VectorXd s_plus(b), s_minus(b);
    parallel_for(batch.size(), cfg.threads, [&](std::size_t i) {
      prompts[i] = model.prompt(*records[batch[i]], &caches[i]);
      const auto s = similarity_scores(prompts[i], positives[batch[i]], negatives[batch[i]],
                                       cfg.loss.logit_scale);
      s_plus[static_cast<Eigen::Index>(i)] = s.positive;
      s_minus[static_cast<Eigen::Index>(i)] = s.negative;
    });
    const auto loss = dpo_loss(s_plus, s_minus, cfg.loss.beta);
    const MatrixXd& dplus = loss.grads.at("s_plus");
    const MatrixXd& dminus = loss.grads.at("s_minus");
    std::vector<TextTowerParams<double>> parts(batch.size(), zero);
    parallel_for(batch.size(), cfg.threads, [&](std::size_t i) {
      const auto row = static_cast<Eigen::Index>(i);
      const Eigen::VectorXd dprompt =
          cfg.loss.logit_scale * (dplus(row, 0) * positives[batch[i]] + dminus(row, 0) * negatives[batch[i]]);
      text_backward(model.text, records[batch[i]]->tokens, caches[i], dprompt, parts[i]);
    });
    AdamWConfig opt = cfg.optim;
    opt.lr = lr;
    adamw_step(model.text, reduce_in_order(zero, parts), state, opt);
    return loss.value;
  };
  auto evaluate = [&] {
    return evaluate_recall(eval_index, build_queries(model, d, Split::Val, cfg.threads), cfg.eval_ks,
                           cfg.threads);
  };
  auto snapshot = [&] {
    auto ck = to_checkpoint(model, cfg, d);
    append_optimizer(ck, state);
    return ck;
  };
  TrainResult result = run_epochs(cfg, records.size(), step, evaluate, snapshot);
  result.frozen_hash_before = before;
  result.frozen_hash_after = frozen_hash(model);
  return result;
}

RecallReport zeroshot_eval(const Dataset& d, const TrainConfig& cfg, Split split) {
  cfg.validate();
  const auto model = make_text_model(cfg, d);
  const auto ix = FlatIpIndex::build(encode_gallery(model.vision, gallery_for_split(d, split)));
  return evaluate_recall(ix, build_queries(model, d, split, cfg.threads), cfg.eval_ks, cfg.threads);
}

}  // namespace cir
