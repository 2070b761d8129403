#include "cir/dataset.hpp"

#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cir/io.hpp"

namespace cir {
namespace {

constexpr std::string_view kEmbMagic = "EMB1";
constexpr std::array<std::string_view, 3> kCategories = {"shirt", "dress", "toptee"};

std::string image_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img%05zu", i);
  return buf;
}

Gallery matrix_to_emb(const MatrixXd& m) {
  std::vector<std::string> ids;
  ids.reserve(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) ids.push_back(std::to_string(r));
  return Gallery(std::move(ids), m.cast<float>());
}

MatrixXd emb_to_matrix(const Gallery& g) { return g.embeddings().cast<double>(); }

}  // namespace

std::size_t TokenSeq::real_count() const {
  std::size_t n = 0;
  for (bool b : pad_mask) n += b ? 1 : 0;
  return n;
}

std::int32_t word_token(std::string_view word, std::int32_t vocab_size) {
  const auto h = fnv1a64(word.data(), word.size());
  return 2 + static_cast<std::int32_t>(h % static_cast<std::uint64_t>(vocab_size - 2));
}

TokenSeq tokenize(std::string_view caption, std::int32_t vocab_size, std::size_t max_len) {
  require(max_len >= 2, ErrorCode::InvalidArgument, "max_len must be >= 2");
  require(vocab_size >= 3, ErrorCode::InvalidArgument, "vocab_size must be >= 3");
  TokenSeq t;
  t.ids.assign(max_len, kPadToken);
  t.pad_mask.assign(max_len, false);
  t.ids[0] = kImageToken;
  t.pad_mask[0] = true;
  std::size_t pos = 1;
  std::size_t i = 0;
  while (i < caption.size() && pos < max_len) {
    while (i < caption.size() && std::isspace(static_cast<unsigned char>(caption[i]))) ++i;
    std::size_t j = i;
    while (j < caption.size() && !std::isspace(static_cast<unsigned char>(caption[j]))) ++j;
    if (j > i) {
      t.ids[pos] = word_token(caption.substr(i, j - i), vocab_size);
      t.pad_mask[pos] = true;
      ++pos;
    }
    i = j;
  }
  return t;
}

// --- Gallery ---------------------------------------------------------------

Gallery::Gallery(std::vector<std::string> ids, MatrixXf embeddings)
    : ids_(std::move(ids)), embeddings_(std::move(embeddings)) {
  require(static_cast<Eigen::Index>(ids_.size()) == embeddings_.rows(), ErrorCode::DimMismatch,
          "gallery has " + std::to_string(ids_.size()) + " ids over " +
              std::to_string(embeddings_.rows()) + " rows");
  rows_.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    auto [it, fresh] = rows_.emplace(ids_[i], static_cast<Eigen::Index>(i));
    require(fresh, ErrorCode::DuplicateId, "duplicate gallery id '" + ids_[i] + "'");
  }
}

std::optional<Eigen::Index> Gallery::row_of(std::string_view id) const {
  auto it = rows_.find(std::string(id));
  if (it == rows_.end()) return std::nullopt;
  return it->second;
}

bool Gallery::operator==(const Gallery& other) const {
  if (ids_ != other.ids_ || embeddings_.rows() != other.embeddings_.rows() ||
      embeddings_.cols() != other.embeddings_.cols())
    return false;
  return std::memcmp(embeddings_.data(), other.embeddings_.data(),
                     sizeof(float) * static_cast<std::size_t>(embeddings_.size())) == 0;
}

std::string encode_emb1(const Gallery& g) {
  io::ByteWriter w;
  w.bytes(kEmbMagic);
  w.u32(static_cast<std::uint32_t>(g.size()));
  w.u32(static_cast<std::uint32_t>(g.dim()));
  for (Eigen::Index r = 0; r < g.size(); ++r) {
    const auto& id = g.ids()[static_cast<std::size_t>(r)];
    require(id.size() <= 0xffff, ErrorCode::InvalidArgument, "id longer than 65535 bytes");
    w.u16(static_cast<std::uint16_t>(id.size()));
    w.bytes(id);
    for (Eigen::Index c = 0; c < g.dim(); ++c) w.f32(g.embeddings()(r, c));
  }
  return w.take();
}

Gallery decode_emb1(std::string_view bytes) {
  io::ByteReader r(bytes);
  require(bytes.size() >= 4 && r.bytes(4) == kEmbMagic, ErrorCode::BadMagic, "expected EMB1 magic");
  const std::uint32_t rows = r.u32();
  const std::uint32_t dim = r.u32();
  // Each row needs at least its length prefix and payload.
  const std::uint64_t min_row = 2 + 4ULL * dim;
  require(static_cast<std::uint64_t>(rows) * min_row <= r.remaining(), ErrorCode::TruncatedFile,
          "header declares " + std::to_string(rows) + " rows of dim " + std::to_string(dim) +
              " but only " + std::to_string(r.remaining()) + " payload bytes remain");
  std::vector<std::string> ids;
  ids.reserve(rows);
  MatrixXf m(rows, dim);
  for (std::uint32_t i = 0; i < rows; ++i) {
    const auto len = r.u16();
    ids.emplace_back(r.bytes(len));
    for (std::uint32_t c = 0; c < dim; ++c) m(i, c) = r.f32();
  }
  require(r.remaining() == 0, ErrorCode::DimMismatch,
          std::to_string(r.remaining()) + " trailing bytes after declared rows");
  return Gallery(std::move(ids), std::move(m));
}

void save_gallery(const Gallery& g, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_emb1(g));
}

Gallery load_gallery(const std::filesystem::path& path) { return decode_emb1(io::read_file(path)); }

// --- Triplets --------------------------------------------------------------

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  fail(ErrorCode::Parse, "unknown split '" + std::string(s) + "'");
}

std::vector<const TripletRecord*> TripletSet::of_split(Split s) const {
  std::vector<const TripletRecord*> out;
  for (const auto& r : records)
    if (r.split == s) out.push_back(&r);
  return out;
}

void validate_triplets(const TripletSet& set, const Gallery& gallery) {
  std::unordered_map<std::string, Split> owner;
  auto claim = [&](const std::string& id, Split s, std::size_t line) {
    require(gallery.contains(id), ErrorCode::UnknownId,
            "record " + std::to_string(line) + " names id '" + id + "' absent from gallery");
    auto [it, fresh] = owner.emplace(id, s);
    require(fresh || it->second == s, ErrorCode::SplitLeak,
            "image '" + id + "' appears in both " + std::string(to_string(it->second)) + " and " +
                std::string(to_string(s)));
  };
  for (std::size_t i = 0; i < set.records.size(); ++i) {
    const auto& rec = set.records[i];
    claim(rec.reference_id, rec.split, i);
    claim(rec.target_id, rec.split, i);
  }
}

std::string encode_triplets(const TripletSet& set) {
  std::string out;
  for (const auto& r : set.records) {
    nlohmann::json j = {{"caption", r.caption},
                        {"reference", r.reference_id},
                        {"target", r.target_id},
                        {"category", r.category},
                        {"split", std::string(to_string(r.split))}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

void save_triplets(const TripletSet& set, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_triplets(set));
}

TripletSet load_triplets(const std::filesystem::path& path, const Gallery& gallery,
                         std::int32_t vocab_size, std::size_t max_len) {
  const std::string text = io::read_file(path);
  TripletSet set;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      TripletRecord rec;
      rec.caption = j.at("caption").get<std::string>();
      rec.reference_id = j.at("reference").get<std::string>();
      rec.target_id = j.at("target").get<std::string>();
      rec.category = j.at("category").get<std::string>();
      rec.split = parse_split(j.at("split").get<std::string>());
      rec.tokens = tokenize(rec.caption, vocab_size, max_len);
      set.records.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::Parse, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  validate_triplets(set, gallery);
  return set;
}

// --- Synthetic generator ---------------------------------------------------

void SynthConfig::validate() const {
  require(gallery_size >= 10, ErrorCode::InvalidArgument, "gallery_size must be >= 10");
  require(dim >= 1 && edit_dim >= 1, ErrorCode::InvalidArgument, "dims must be >= 1");
  require(vocab_size >= 3, ErrorCode::InvalidArgument, "vocab_size must be >= 3");
  require(noise_sigma >= 0.0, ErrorCode::InvalidArgument, "noise_sigma must be >= 0");
  require(max_len >= 6, ErrorCode::InvalidArgument, "max_len must hold a 5-word caption");
  double sum = 0.0;
  for (double f : split_fractions) {
    require(f >= 0.0, ErrorCode::InvalidArgument, "negative split fraction");
    sum += f;
  }
  require(std::abs(sum - 1.0) < 1e-9, ErrorCode::InvalidArgument, "split fractions must sum to 1");
}

Eigen::VectorXd PlantedTruth::planted_target(const Eigen::VectorXd& reference,
                                            const TokenSeq& tokens) const {
  Eigen::VectorXd edit = Eigen::VectorXd::Zero(b.cols());
  int n = 0;
  for (std::size_t p = 1; p < tokens.size(); ++p) {
    if (!tokens.pad_mask[p]) continue;
    edit += token_directions.row(tokens.ids[p]).transpose();
    ++n;
  }
  if (n > 0) edit /= n;
  return l2_normalize(Eigen::VectorXd(a * reference + b * edit));
}

std::vector<std::string> synthetic_words(std::int32_t vocab_size) {
  std::vector<std::string> words(static_cast<std::size_t>(vocab_size));
  std::int32_t missing = vocab_size - 2;
  for (std::uint64_t i = 0; missing > 0; ++i) {
    std::string w = "edit" + std::to_string(i);
    auto& slot = words[static_cast<std::size_t>(word_token(w, vocab_size))];
    if (slot.empty()) {
      slot = std::move(w);
      --missing;
    }
  }
  return words;
}

SyntheticData generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  const SeededRng root(cfg.seed);
  SeededRng rng_a = root.fork(1), rng_b = root.fork(2), rng_dir = root.fork(3);
  SeededRng rng_ref = root.fork(4), rng_cap = root.fork(5), rng_noise = root.fork(6);
  SeededRng rng_split = root.fork(7);

  // Stored at f32 precision so truth files round-trip exactly.
  PlantedTruth truth;
  truth.a = gaussian_matrix<float>(cfg.dim, cfg.dim, rng_a, 1.0 / std::sqrt(double(cfg.dim)))
                .cast<double>();
  truth.b = gaussian_matrix<float>(cfg.dim, cfg.edit_dim, rng_b,
                                   1.0 / std::sqrt(double(cfg.edit_dim)))
                .cast<double>();
  truth.token_directions =
      gaussian_matrix<float>(cfg.vocab_size, cfg.edit_dim, rng_dir,
                             1.0 / std::sqrt(double(cfg.edit_dim)))
          .cast<double>();

  const auto words = synthetic_words(cfg.vocab_size);
  const std::size_t n_records = static_cast<std::size_t>(cfg.gallery_size) / 2;

  std::vector<std::string> ids(static_cast<std::size_t>(cfg.gallery_size));
  MatrixXf emb(cfg.gallery_size, cfg.dim);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = image_id(i);

  // Split assignment over a seeded permutation of record indices.
  std::vector<std::size_t> perm(n_records);
  for (std::size_t i = 0; i < n_records; ++i) perm[i] = i;
  for (std::size_t i = n_records; i > 1; --i) std::swap(perm[i - 1], perm[rng_split.below(i)]);
  const auto n_train = static_cast<std::size_t>(std::llround(cfg.split_fractions[0] * n_records));
  const auto n_val = static_cast<std::size_t>(std::llround(cfg.split_fractions[1] * n_records));
  std::vector<Split> split_of(n_records, Split::Test);
  for (std::size_t k = 0; k < n_records; ++k) {
    split_of[perm[k]] = k < n_train ? Split::Train : (k < n_train + n_val ? Split::Val : Split::Test);
  }

  const double ref_scale = 1.0 / std::sqrt(double(cfg.dim));
  TripletSet set;
  set.records.reserve(n_records);
  for (std::size_t i = 0; i < n_records; ++i) {
    Eigen::VectorXd ref(cfg.dim);
    for (Eigen::Index c = 0; c < cfg.dim; ++c) ref[c] = double(float(ref_scale * rng_ref.normal()));

    const auto n_words = 1 + rng_cap.below(5);
    std::string caption;
    for (std::uint64_t w = 0; w < n_words; ++w) {
      const auto tok = 2 + rng_cap.below(static_cast<std::uint64_t>(cfg.vocab_size - 2));
      if (!caption.empty()) caption += ' ';
      caption += words[tok];
    }
    TripletRecord rec;
    rec.caption = std::move(caption);
    rec.tokens = tokenize(rec.caption, cfg.vocab_size, cfg.max_len);
    rec.reference_id = ids[2 * i];
    rec.target_id = ids[2 * i + 1];
    rec.category = std::string(kCategories[i % kCategories.size()]);
    rec.split = split_of[i];

    Eigen::VectorXd edit = Eigen::VectorXd::Zero(cfg.edit_dim);
    for (std::size_t p = 1; p < rec.tokens.size() && rec.tokens.pad_mask[p]; ++p)
      edit += truth.token_directions.row(rec.tokens.ids[p]).transpose();
    edit /= static_cast<double>(n_words);

    Eigen::VectorXd target = truth.a * ref + truth.b * edit;
    if (cfg.noise_sigma > 0.0)
      for (Eigen::Index c = 0; c < cfg.dim; ++c) target[c] += cfg.noise_sigma * rng_noise.normal();
    target = l2_normalize(target);

    emb.row(static_cast<Eigen::Index>(2 * i)) = ref.transpose().cast<float>();
    emb.row(static_cast<Eigen::Index>(2 * i + 1)) = target.transpose().cast<float>();
    set.records.push_back(std::move(rec));
  }
  // An odd gallery_size leaves one unreferenced distractor image.
  if (static_cast<std::size_t>(cfg.gallery_size) > 2 * n_records) {
    for (Eigen::Index c = 0; c < cfg.dim; ++c)
      emb(cfg.gallery_size - 1, c) = float(ref_scale * rng_ref.normal());
  }

  SyntheticData out{Gallery(std::move(ids), std::move(emb)), std::move(set), std::move(truth)};
  validate_triplets(out.triplets, out.gallery);
  return out;
}

void save_planted_truth(const PlantedTruth& truth, const std::filesystem::path& dir) {
  save_gallery(matrix_to_emb(truth.a), dir / "truth_a.emb");
  save_gallery(matrix_to_emb(truth.b), dir / "truth_b.emb");
  save_gallery(matrix_to_emb(truth.token_directions), dir / "truth_tokens.emb");
}

PlantedTruth load_planted_truth(const std::filesystem::path& dir) {
  return PlantedTruth{emb_to_matrix(load_gallery(dir / "truth_a.emb")),
                      emb_to_matrix(load_gallery(dir / "truth_b.emb")),
                      emb_to_matrix(load_gallery(dir / "truth_tokens.emb"))};
}

}  // namespace cir
