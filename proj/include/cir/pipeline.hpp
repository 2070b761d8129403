#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cir/checkpoint.hpp"
#include "cir/dataset.hpp"
#include "cir/encoders.hpp"
#include "cir/flat_index.hpp"
#include "cir/losses.hpp"
#include "cir/optim.hpp"

namespace cir {

enum class Mode { InfoNceFusion, RetrievalDpo, ZeroShotEval };
std::string_view to_string(Mode m);
/// Accepts the long names and the CLI short forms infonce, dpo, zeroshot.
Mode parse_mode(std::string_view s);

enum class ScheduleKind { Constant, OneCycle };

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::Constant;
  double div_factor = 100.0;
  double final_div_factor = 1e4;
  /// Defaults to 1.5 / epochs when unset.
  std::optional<double> pct_start;
};

struct ModelConfig {
  Eigen::Index d_txt = 64;
  Eigen::Index d_q = 32;
  Eigen::Index d_v = 64;
  Eigen::Index patches = 16;
  Eigen::Index queries = 32;
  /// Identity vision stub (d_img = gallery dim) or a frozen random projection.
  bool vision_identity = true;
  Eigen::Index d_img = 64;
  /// Fusion mode only; no pretrained token table exists for synthetic data.
  bool train_token_table = true;
  /// Unfreeze the fusion backbone as well as the head.
  bool widen_trainable = false;

  /// 1024-d image / 512-d text widths of the full-size encoders.
  static ModelConfig full_dims();
};

struct TrainConfig {
  Mode mode = Mode::InfoNceFusion;
  std::size_t batch_size = 128;
  std::size_t epochs = 5;
  std::size_t patience = 3;
  std::uint64_t seed = 7;
  LossConfig loss;
  AdamWConfig optim;
  ScheduleConfig schedule;
  Eigen::Index mining_k = 50;
  std::vector<Eigen::Index> eval_ks = {1, 5, 10, 50};
  /// "train" or "trainval".
  std::string mining_gallery = "train";
  std::size_t max_records_per_epoch = 60000;
  ModelConfig model;
  unsigned threads = 1;

  /// Batch 128 for fusion, 256 for Retrieval-DPO.
  static TrainConfig defaults(Mode mode);
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Overlays the keys present in `j` onto `c`. Unknown keys are rejected.
void apply_json(const nlohmann::json& j, TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct Dataset {
  Gallery gallery;
  TripletSet triplets;
  std::int32_t vocab_size = 50;
  std::size_t max_len = kDefaultMaxLen;
};

/// Reads gallery.emb, triplets.jsonl and dataset.json from a data directory.
Dataset load_dataset(const std::filesystem::path& dir);
/// Writes gallery.emb, triplets.jsonl and dataset.json; returns the paths.
std::vector<std::filesystem::path> save_dataset(const Dataset& d, const std::filesystem::path& dir,
                                                const nlohmann::json& meta);

/// Union of train and val image ids (reference and target), sorted by id.
Gallery build_eval_gallery(const Dataset& d);
/// Gallery searched when evaluating `split`. Val and train use the
/// train+val gallery; test adds the test images.
Gallery gallery_for_split(const Dataset& d, Split split);
/// Hard-negative mining gallery: "train" or "trainval" image ids, sorted.
Gallery build_mining_gallery(const Dataset& d, std::string_view which);

/// Rows replaced by vision_encode of each raw embedding, stored at f32.
Gallery encode_gallery(const VisionStub<double>& stub, const Gallery& g);

// --- Recall ------------------------------------------------------------------

struct RecallReport {
  std::map<std::string, std::map<Eigen::Index, double>> per_category;
  std::map<Eigen::Index, double> average;
  std::size_t query_count = 0;

  /// Recomputes `average` as the unweighted mean over categories.
  void recompute_average();
  bool operator==(const RecallReport&) const = default;
};

struct Query {
  Eigen::VectorXd prompt;
  std::string target_id;
  std::string category;
};

RecallReport evaluate_recall(const FlatIpIndex& ix, std::span<const Query> queries,
                             std::span<const Eigen::Index> ks, unsigned threads = 1);

/// {"average":{...},"categories":{...},"query_count":n}; percentages with two
/// decimals, keys sorted, newline-terminated.
std::string report_json(const RecallReport& r);
RecallReport parse_report_json(std::string_view text);

// --- Models --------------------------------------------------------------------

struct FusionModel {
  VisionStub<double> vision;
  FusionParams<double> fusion;

  Eigen::VectorXd prompt(const Dataset& d, const TripletRecord& rec,
                         FusionCache<double>* cache = nullptr) const;
};

struct TextModel {
  VisionStub<double> vision;
  TextTowerParams<double> text;

  Eigen::VectorXd prompt(const TripletRecord& rec, TextCache<double>* cache = nullptr) const {
    return text_encode(text, rec.tokens, cache);
  }
};

VisionStub<double> make_vision_stub(const TrainConfig& cfg, const Dataset& d);
FusionModel make_fusion_model(const TrainConfig& cfg, const Dataset& d);
/// Retrieval-DPO trainable set: text block only.
TextModel make_text_model(const TrainConfig& cfg, const Dataset& d);

/// Hash over the tensors a run must never change: the vision stub, plus the
/// frozen tensors of the tower.
std::uint64_t frozen_hash(const FusionModel& m);
std::uint64_t frozen_hash(const TextModel& m);

Checkpoint to_checkpoint(const FusionModel& m, const TrainConfig& cfg, const Dataset& d);
Checkpoint to_checkpoint(const TextModel& m, const TrainConfig& cfg, const Dataset& d);
FusionModel fusion_from_checkpoint(const Checkpoint& ck, const Dataset& d);
TextModel text_from_checkpoint(const Checkpoint& ck, const Dataset& d);
TrainConfig config_of(const Checkpoint& ck);

std::vector<Query> build_queries(const FusionModel& m, const Dataset& d, Split split,
                                 unsigned threads = 1);
std::vector<Query> build_queries(const TextModel& m, const Dataset& d, Split split,
                                 unsigned threads = 1);

/// Re-evaluates a saved checkpoint on a split.
RecallReport evaluate_checkpoint(const Checkpoint& ck, const Dataset& d, Split split,
                                 std::span<const Eigen::Index> ks, unsigned threads = 1);

// --- Training ------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  std::map<Eigen::Index, double> val_recall;
  double lr_last = 0.0;
};

struct TrainHistory {
  double initial_loss = 0.0;  // first batch, before any update
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based
};

/// One JSON object per epoch, newline-terminated.
std::string history_jsonl(const TrainHistory& h);

struct TrainResult {
  Checkpoint checkpoint;  // best epoch, with optimizer state
  TrainHistory history;
  RecallReport best_report;  // val report of the best epoch
  std::uint64_t frozen_hash_before = 0;
  std::uint64_t frozen_hash_after = 0;
};

TrainResult train_fusion_infonce(const Dataset& d, const TrainConfig& cfg,
                                 const FusionModel* init = nullptr);

/// `mining_index` must be built over encode_gallery of the mining gallery; it
/// is built here when null.
TrainResult train_retrieval_dpo(const Dataset& d, const TrainConfig& cfg,
                                const TextModel* init = nullptr,
                                const FlatIpIndex* mining_index = nullptr);

/// Untrained seeded text tower, caption-only prompts.
RecallReport zeroshot_eval(const Dataset& d, const TrainConfig& cfg, Split split = Split::Val);

}  // namespace cir
