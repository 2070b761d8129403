#include "cir/flat_index.hpp"

#include <algorithm>
#include <numeric>

#include "cir/io.hpp"
#include "cir/parallel.hpp"

namespace cir {
namespace {
constexpr std::string_view kIndexMagic = "FIP1";
}

FlatIpIndex::FlatIpIndex(Gallery normalized)
    : normalized_(std::move(normalized)), rows64_(normalized_.embeddings().cast<double>()) {}

FlatIpIndex FlatIpIndex::build(const Gallery& g) {
  require(!g.empty(), ErrorCode::EmptyGallery, "cannot index an empty gallery");
  return FlatIpIndex(Gallery(g.ids(), l2_normalize_rows(g.embeddings())));
}

SearchResult FlatIpIndex::search(const Eigen::Ref<const Eigen::VectorXd>& query,
                                 Eigen::Index k) const {
  require(query.size() == dim(), ErrorCode::DimMismatch,
          "query dim " + std::to_string(query.size()) + " vs index dim " + std::to_string(dim()));
  require(k >= 1, ErrorCode::InvalidArgument, "k must be >= 1");
  const Eigen::VectorXd q = l2_normalize(query);
  const Eigen::VectorXd scores = rows64_ * q;

  const Eigen::Index n = size();
  const Eigen::Index take = std::min(k, n);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  auto better = [&](Eigen::Index a, Eigen::Index b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  };
  std::partial_sort(order.begin(), order.begin() + take, order.end(), better);

  SearchResult out;
  out.reserve(static_cast<std::size_t>(take));
  for (Eigen::Index i = 0; i < take; ++i) {
    const auto row = order[static_cast<std::size_t>(i)];
    out.push_back({ids()[static_cast<std::size_t>(row)], row, scores[row]});
  }
  return out;
}

std::vector<SearchResult> FlatIpIndex::search_many(std::span<const Eigen::VectorXd> queries,
                                                   Eigen::Index k, unsigned threads) const {
  std::vector<SearchResult> out(queries.size());
  parallel_for(queries.size(), threads, [&](std::size_t i) { out[i] = search(queries[i], k); });
  return out;
}

Eigen::Index FlatIpIndex::mine_hard_negative(Eigen::Index positive_row, Eigen::Index k) const {
  require(positive_row >= 0 && positive_row < size(), ErrorCode::NotFound,
          "positive row " + std::to_string(positive_row) + " outside index of " +
              std::to_string(size()));
  require(size() >= 2, ErrorCode::NoNegative, "index has a single row");
  // k = 1 would only ever surface the positive itself.
  const auto hits = search(rows64_.row(positive_row).transpose(), std::max<Eigen::Index>(k, 2));
  for (const auto& h : hits)
    if (h.row != positive_row) return h.row;
  fail(ErrorCode::NoNegative, "no non-positive neighbour in top-" + std::to_string(k));
}

std::string FlatIpIndex::encode() const {
  io::ByteWriter w;
  w.bytes(kIndexMagic);
  w.u32(kFormatVersion);
  w.bytes(encode_emb1(normalized_));
  return w.take();
}

FlatIpIndex FlatIpIndex::decode(std::string_view bytes) {
  io::ByteReader r(bytes);
  require(bytes.size() >= 4 && r.bytes(4) == kIndexMagic, ErrorCode::BadMagic,
          "expected FIP1 magic");
  const auto version = r.u32();
  require(version == kFormatVersion, ErrorCode::VersionMismatch,
          "index format version " + std::to_string(version) + ", expected " +
              std::to_string(kFormatVersion));
  Gallery g = decode_emb1(bytes.substr(8));
  for (Eigen::Index i = 0; i < g.size(); ++i)
    require(std::abs(std::sqrt(squared_norm64(g.embeddings().row(i))) - 1.0) <= 1e-6,
            ErrorCode::NotNormalized, "index row " + std::to_string(i) + " is not unit norm");
  return FlatIpIndex(std::move(g));
}

void save_index(const FlatIpIndex& ix, const std::filesystem::path& path) {
  io::write_file_atomic(path, ix.encode());
}

FlatIpIndex load_index(const std::filesystem::path& path) {
  return FlatIpIndex::decode(io::read_file(path));
}

}  // namespace cir
