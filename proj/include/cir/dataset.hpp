#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cir/tensor.hpp"

namespace cir {

inline constexpr std::int32_t kPadToken = 0;
inline constexpr std::int32_t kImageToken = 1;
inline constexpr std::size_t kDefaultMaxLen = 77;

/// Preprocessing constants of the image pipeline this lab stands in for.
/// Nothing here touches pixels; they are carried so a real encoder can be
/// attached later. The two statistics sets disagree in the source material
/// and are both kept verbatim.
struct ImagePreprocessMeta {
  static constexpr int kSize = 224;
  static constexpr std::string_view kResample = "bicubic";
  static constexpr std::array<double, 3> kClipMean = {0.481, 0.457, 0.408};
  static constexpr std::array<double, 3> kClipStd = {0.268, 0.261, 0.276};
  static constexpr std::array<double, 3> kImageNetMean = {0.485, 0.456, 0.406};
  static constexpr std::array<double, 3> kImageNetStd = {0.229, 0.224, 0.225};
};

struct TokenSeq {
  std::vector<std::int32_t> ids;
  std::vector<bool> pad_mask;  // true at real (non-pad) positions

  std::size_t size() const { return ids.size(); }
  std::size_t real_count() const;
  bool operator==(const TokenSeq&) const = default;
};

/// Position 0 is the image marker; each whitespace-separated word hashes into
/// [2, vocab_size). Pads with kPadToken and truncates to max_len.
TokenSeq tokenize(std::string_view caption, std::int32_t vocab_size,
                  std::size_t max_len = kDefaultMaxLen);

std::int32_t word_token(std::string_view word, std::int32_t vocab_size);

class Gallery {
 public:
  Gallery() = default;
  Gallery(std::vector<std::string> ids, MatrixXf embeddings);

  const std::vector<std::string>& ids() const { return ids_; }
  const MatrixXf& embeddings() const { return embeddings_; }
  Eigen::Index size() const { return embeddings_.rows(); }
  Eigen::Index dim() const { return embeddings_.cols(); }
  bool empty() const { return ids_.empty(); }

  std::optional<Eigen::Index> row_of(std::string_view id) const;
  bool contains(std::string_view id) const { return row_of(id).has_value(); }
  Eigen::VectorXd row64(Eigen::Index row) const {
    return embeddings_.row(row).transpose().cast<double>();
  }

  /// Bitwise equality of ids and payload.
  bool operator==(const Gallery& other) const;

 private:
  std::vector<std::string> ids_;
  MatrixXf embeddings_;
  std::unordered_map<std::string, Eigen::Index> rows_;
};

std::string encode_emb1(const Gallery& g);
Gallery decode_emb1(std::string_view bytes);
void save_gallery(const Gallery& g, const std::filesystem::path& path);
Gallery load_gallery(const std::filesystem::path& path);

enum class Split { Train, Val, Test };
std::string_view to_string(Split s);
Split parse_split(std::string_view s);

struct TripletRecord {
  std::string caption;
  TokenSeq tokens;
  std::string reference_id;
  std::string target_id;
  std::string category;
  Split split = Split::Train;
};

struct TripletSet {
  std::vector<TripletRecord> records;

  std::vector<const TripletRecord*> of_split(Split s) const;
};

/// Throws UnknownId for ids missing from the gallery and SplitLeak when an
/// image id appears under more than one split.
void validate_triplets(const TripletSet& set, const Gallery& gallery);

std::string encode_triplets(const TripletSet& set);
void save_triplets(const TripletSet& set, const std::filesystem::path& path);
TripletSet load_triplets(const std::filesystem::path& path, const Gallery& gallery,
                         std::int32_t vocab_size, std::size_t max_len = kDefaultMaxLen);

struct SynthConfig {
  Eigen::Index gallery_size = 2000;
  Eigen::Index dim = 64;
  std::int32_t vocab_size = 50;
  Eigen::Index edit_dim = 16;
  double noise_sigma = 0.05;
  std::uint64_t seed = 7;
  std::size_t max_len = kDefaultMaxLen;
  std::array<double, 3> split_fractions = {0.8, 0.1, 0.1};

  void validate() const;
};

/// Generative map of the synthetic dataset:
/// target = normalize(A r + B mean(directions[caption tokens]) + noise).
struct PlantedTruth {
  MatrixXd a;                 // dim x dim
  MatrixXd b;                 // dim x edit_dim
  MatrixXd token_directions;  // vocab x edit_dim

  /// The noise-free target direction for a reference and caption.
  Eigen::VectorXd planted_target(const Eigen::VectorXd& reference, const TokenSeq& tokens) const;
};

struct SyntheticData {
  Gallery gallery;
  TripletSet triplets;
  PlantedTruth truth;
};

/// One word per token id in [2, vocab_size), chosen so that word_token(word)
/// returns that id. Index 0 and 1 are empty.
std::vector<std::string> synthetic_words(std::int32_t vocab_size);

SyntheticData generate_synthetic(const SynthConfig& cfg);

/// truth_a.emb, truth_b.emb and truth_tokens.emb under dir.
void save_planted_truth(const PlantedTruth& truth, const std::filesystem::path& dir);
PlantedTruth load_planted_truth(const std::filesystem::path& dir);

}  // namespace cir
