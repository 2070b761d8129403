#include <doctest.h>

#include <fstream>
#include <set>

#include "cir/dataset.hpp"
#include "cir/flat_index.hpp"
#include "cir/io.hpp"
#include "oracles.hpp"
#include "test_helpers.hpp"

using namespace cir;

TEST_CASE("tokenize") {
  auto empty = tokenize("", 50, 77);
  REQUIRE(empty.size() == 77);
  CHECK(empty.ids[0] == kImageToken);
  CHECK(empty.pad_mask[0]);
  for (std::size_t i = 1; i < 77; ++i) {
    CHECK(empty.ids[i] == kPadToken);
    CHECK_FALSE(empty.pad_mask[i]);
  }

  CHECK(tokenize("make it blue", 50) == tokenize("make it blue", 50));
  CHECK(tokenize("  make   it\tblue ", 50) == tokenize("make it blue", 50));

  std::string long_caption;
  for (int i = 0; i < 200; ++i) long_caption += "word" + std::to_string(i) + " ";
  auto t = tokenize(long_caption, 50, 77);
  CHECK(t.size() == 77);
  CHECK(t.real_count() == 77);

  CHECK_CIR_ERROR(tokenize("x", 50, 1), ErrorCode::InvalidArgument);
}

TEST_CASE("tokenize never leaves [0, vocab)") {
  SeededRng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto vocab = static_cast<std::int32_t>(3 + rng.below(100));
    std::string caption;
    for (std::uint64_t w = 0, n = rng.below(12); w < n; ++w)
      caption += "w" + std::to_string(rng.next_u64()) + " ";
    auto seq = tokenize(caption, vocab, 2 + rng.below(20));
    for (std::size_t i = 0; i < seq.size(); ++i) {
      CHECK(seq.ids[i] >= 0);
      CHECK(seq.ids[i] < vocab);
      if (i > 0 && seq.pad_mask[i]) CHECK(seq.ids[i] >= 2);
    }
  }
}

namespace {
Gallery small_gallery() {
  MatrixXf m(3, 2);
  m << 1, 2, 3, 4, -5, 0.25f;
  return Gallery({"a", "b", "c"}, m);
}
}  // namespace

TEST_CASE("Gallery invariants") {
  CHECK_CIR_ERROR(Gallery({"a", "a"}, MatrixXf::Ones(2, 2)), ErrorCode::DuplicateId);
  CHECK_CIR_ERROR(Gallery({"a"}, MatrixXf::Ones(2, 2)), ErrorCode::DimMismatch);
  auto g = small_gallery();
  CHECK(g.row_of("b") == 1);
  CHECK_FALSE(g.row_of("zz").has_value());
}

TEST_CASE("EMB1 round trip and corruption") {
  auto dir = scratch_dir("emb1");
  auto g = small_gallery();
  save_gallery(g, dir / "g.emb");
  auto back = load_gallery(dir / "g.emb");
  CHECK(back == g);
  for (Eigen::Index r = 0; r < g.size(); ++r) CHECK(back.ids()[r] == g.ids()[r]);

  // Byte layout: magic, rows, dim, then (u16 len, id, f32 * dim) per row.
  const auto bytes = encode_emb1(g);
  CHECK(bytes.substr(0, 4) == "EMB1");
  CHECK(bytes.size() == 12 + 3 * (2 + 1 + 8));

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_CIR_ERROR(decode_emb1(bad), ErrorCode::BadMagic);

  // Header says 10 rows, payload holds 5.
  MatrixXf five = MatrixXf::Ones(5, 4);
  Gallery g5({"0", "1", "2", "3", "4"}, five);
  auto truncated = encode_emb1(g5);
  truncated[4] = 10;
  CHECK_CIR_ERROR(decode_emb1(truncated), ErrorCode::TruncatedFile);

  // Dropping the tail mid-row.
  CHECK_CIR_ERROR(decode_emb1(bytes.substr(0, bytes.size() - 3)), ErrorCode::TruncatedFile);

  // Duplicate ids in the payload.
  auto dup = bytes;
  dup[12 + 2] = 'b';
  CHECK_CIR_ERROR(decode_emb1(dup), ErrorCode::DuplicateId);
}

TEST_CASE("load_triplets validation") {
  auto dir = scratch_dir("triplets");
  MatrixXf m = MatrixXf::Ones(6, 2);
  Gallery g({"r1", "t1", "r2", "t2", "r3", "t3"}, m);
  auto write = [&](const std::string& text) {
    std::ofstream(dir / "t.jsonl") << text;
    return dir / "t.jsonl";
  };
  const std::string ok =
      R"({"caption":"make it red","reference":"r1","target":"t1","category":"dress","split":"train"})"
      "\n"
      R"({"caption":"add stripes","reference":"r2","target":"t2","category":"shirt","split":"val"})"
      "\n"
      R"({"caption":"","reference":"r3","target":"t3","category":"toptee","split":"test"})"
      "\n";
  auto set = load_triplets(write(ok), g, 50);
  REQUIRE(set.records.size() == 3);
  CHECK(set.records[0].tokens == tokenize("make it red", 50));
  CHECK(set.records[1].split == Split::Val);
  CHECK(set.of_split(Split::Test).size() == 1);

  CHECK_CIR_ERROR(
      load_triplets(
          write(R"({"caption":"x","reference":"nope","target":"t1","category":"dress","split":"train"})"),
          g, 50),
      ErrorCode::UnknownId);
  CHECK_CIR_ERROR(
      load_triplets(
          write(R"({"caption":"x","reference":"r1","target":"t1","category":"dress","split":"train"})"
                "\n"
                R"({"caption":"y","reference":"r2","target":"t1","category":"dress","split":"test"})"),
          g, 50),
      ErrorCode::SplitLeak);
  CHECK_CIR_ERROR(load_triplets(write("{not json"), g, 50), ErrorCode::Parse);
  CHECK_CIR_ERROR(
      load_triplets(
          write(R"({"caption":"x","reference":"r1","target":"t1","category":"dress","split":"dev"})"),
          g, 50),
      ErrorCode::Parse);

  // encode/load round trip through the file format.
  save_triplets(set, dir / "again.jsonl");
  auto again = load_triplets(dir / "again.jsonl", g, 50);
  REQUIRE(again.records.size() == set.records.size());
  for (std::size_t i = 0; i < set.records.size(); ++i) {
    CHECK(again.records[i].caption == set.records[i].caption);
    CHECK(again.records[i].target_id == set.records[i].target_id);
    CHECK(again.records[i].split == set.records[i].split);
  }
}

TEST_CASE("synthetic_words map back to their token ids") {
  auto words = synthetic_words(50);
  std::set<std::string> seen;
  for (std::int32_t id = 2; id < 50; ++id) {
    CHECK(word_token(words[id], 50) == id);
    seen.insert(words[id]);
  }
  CHECK(seen.size() == 48);
}

TEST_CASE("generate_synthetic contracts") {
  SynthConfig cfg;
  cfg.gallery_size = 400;
  auto a = generate_synthetic(cfg);
  auto b = generate_synthetic(cfg);
  CHECK(a.gallery == b.gallery);
  CHECK(encode_triplets(a.triplets) == encode_triplets(b.triplets));
  CHECK(a.truth.a == b.truth.a);

  CHECK(a.gallery.size() == 400);
  CHECK(a.triplets.records.size() == 200);
  CHECK(a.triplets.of_split(Split::Train).size() == 160);
  CHECK(a.triplets.of_split(Split::Val).size() == 20);
  CHECK(a.triplets.of_split(Split::Test).size() == 20);

  std::set<std::string> per_split[3];
  for (const auto& r : a.triplets.records) {
    auto& s = per_split[static_cast<int>(r.split)];
    s.insert(r.reference_id);
    s.insert(r.target_id);
    CHECK(a.gallery.contains(r.target_id));
    const auto n = r.tokens.real_count();
    CHECK(n >= 2);
    CHECK(n <= 6);
  }
  for (int i = 0; i < 3; ++i)
    for (int j = i + 1; j < 3; ++j)
      for (const auto& id : per_split[i]) CHECK(per_split[j].count(id) == 0);

  std::set<std::string> cats;
  for (const auto& r : a.triplets.records) cats.insert(r.category);
  CHECK(cats == std::set<std::string>{"dress", "shirt", "toptee"});

  cfg.seed = 8;
  CHECK_FALSE(generate_synthetic(cfg).gallery == a.gallery);

  cfg.gallery_size = 5;
  CHECK_CIR_ERROR(generate_synthetic(cfg), ErrorCode::InvalidArgument);
}

TEST_CASE("noise-free planted map retrieves every target at rank 1") {
  SynthConfig cfg;
  cfg.gallery_size = 600;
  cfg.noise_sigma = 0.0;
  auto data = generate_synthetic(cfg);
  for (Split split : {Split::Train, Split::Val, Split::Test}) {
    std::vector<Eigen::VectorXd> queries;
    std::vector<std::string> targets;
    for (const auto* rec : data.triplets.of_split(split)) {
      const auto ref = data.gallery.row64(*data.gallery.row_of(rec->reference_id));
      queries.push_back(data.truth.planted_target(ref, rec->tokens));
      targets.push_back(rec->target_id);
    }
    CHECK(oracle::brute_force_recall(data.gallery, queries, targets, 1) == 1.0);
  }
}

TEST_CASE("planted truth files round trip") {
  auto dir = scratch_dir("truth");
  SynthConfig cfg;
  cfg.gallery_size = 20;
  auto data = generate_synthetic(cfg);
  save_planted_truth(data.truth, dir);
  auto back = load_planted_truth(dir);
  CHECK(back.a == data.truth.a);
  CHECK(back.b == data.truth.b);
  CHECK(back.token_directions == data.truth.token_directions);
}
