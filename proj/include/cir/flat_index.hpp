#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cir/dataset.hpp"

namespace cir {

struct SearchHit {
  std::string id;
  Eigen::Index row = 0;
  double score = 0.0;

  bool operator==(const SearchHit&) const = default;
};

/// Sorted by score descending, ties by ascending row.
using SearchResult = std::vector<SearchHit>;

/// Exact inner-product index over unit-normalized rows.
class FlatIpIndex {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  /// Normalizes every gallery row. Throws EmptyGallery or ZeroVector.
  static FlatIpIndex build(const Gallery& g);

  /// Exact top-k by dot(normalize(query), row). k larger than the gallery
  /// clamps to the gallery size.
  SearchResult search(const Eigen::Ref<const Eigen::VectorXd>& query, Eigen::Index k) const;

  /// Batched search; results are independent of the thread count.
  std::vector<SearchResult> search_many(std::span<const Eigen::VectorXd> queries, Eigen::Index k,
                                        unsigned threads = 1) const;

  /// First of the top-k neighbours of the positive's own row that is not the
  /// positive itself.
  Eigen::Index mine_hard_negative(Eigen::Index positive_row, Eigen::Index k = 50) const;

  const Gallery& gallery() const { return normalized_; }
  const MatrixXf& rows() const { return normalized_.embeddings(); }
  const std::vector<std::string>& ids() const { return normalized_.ids(); }
  Eigen::Index size() const { return normalized_.size(); }
  Eigen::Index dim() const { return normalized_.dim(); }

  bool operator==(const FlatIpIndex& other) const { return normalized_ == other.normalized_; }

  std::string encode() const;
  static FlatIpIndex decode(std::string_view bytes);

 private:
  explicit FlatIpIndex(Gallery normalized);

  Gallery normalized_;
  MatrixXd rows64_;
};

void save_index(const FlatIpIndex& ix, const std::filesystem::path& path);
FlatIpIndex load_index(const std::filesystem::path& path);

}  // namespace cir
