#include <doctest.h>

#include <cstring>

#include "cir/checkpoint.hpp"
#include "cir/encoders.hpp"
#include "cir/io.hpp"
#include "test_helpers.hpp"

using namespace cir;

namespace {
Checkpoint sample() {
  SeededRng rng(3);
  Checkpoint ck;
  ck.config = {{"lr", 0.01}, {"mode", "infonce_fusion"}};
  ck.tensors.push_back({"a", gaussian_matrix<double>(3, 4, rng, 1.0), true});
  ck.tensors.push_back({"b", gaussian_matrix<double>(1, 7, rng, 1e-7), false});
  ck.tensors.push_back({"empty", MatrixXd(0, 5), false});
  ck.optimizer_step = 42;
  return ck;
}
}  // namespace

TEST_CASE("checkpoint encode/decode is bit exact") {
  const auto ck = sample();
  const auto bytes = ck.encode();
  const auto back = Checkpoint::decode(bytes);
  CHECK(back.encode() == bytes);
  REQUIRE(back.tensors.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.tensors[i].name == ck.tensors[i].name);
    CHECK(back.tensors[i].trainable == ck.tensors[i].trainable);
    CHECK(back.tensors[i].value.rows() == ck.tensors[i].value.rows());
    CHECK(back.tensors[i].value.cols() == ck.tensors[i].value.cols());
    CHECK(std::memcmp(back.tensors[i].value.data(), ck.tensors[i].value.data(),
                      sizeof(double) * ck.tensors[i].value.size()) == 0);
  }
  CHECK(back.optimizer_step == 42);
  CHECK(back.config == ck.config);
  CHECK(back.find("b") != nullptr);
  CHECK(back.find("nope") == nullptr);
}

TEST_CASE("checkpoint file round trip") {
  const auto dir = scratch_dir("ckpt");
  const auto ck = sample();
  save_checkpoint(ck, dir / "x.ckpt");
  CHECK(load_checkpoint(dir / "x.ckpt") == ck);
  CHECK(io::read_file(dir / "x.ckpt") == ck.encode());
}

TEST_CASE("checkpoint decode errors") {
  auto bytes = sample().encode();
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_CIR_ERROR(Checkpoint::decode(bad), ErrorCode::BadMagic);
  CHECK_CIR_ERROR(Checkpoint::decode(""), ErrorCode::BadMagic);
  bad = bytes;
  bad[4] = 9;
  CHECK_CIR_ERROR(Checkpoint::decode(bad), ErrorCode::VersionMismatch);
  CHECK_CIR_ERROR(Checkpoint::decode(bytes.substr(0, bytes.size() - 3)), ErrorCode::TruncatedFile);
  CHECK_CIR_ERROR(Checkpoint::decode(bytes + "zz"), ErrorCode::DimMismatch);
  CHECK_CIR_ERROR(load_checkpoint(scratch_dir("ckpt_missing") / "none.ckpt"), ErrorCode::Io);
}

TEST_CASE("bundle and optimizer state survive a checkpoint") {
  SeededRng rng(5);
  auto text = TextTowerParams<double>::init({20, 8, 6}, rng);
  Checkpoint ck;
  append_bundle(ck, text);
  AdamWState<double> st;
  auto grads = zeros_like(text);
  grads.block.w_q.setConstant(0.3);
  adamw_step(text, grads, st, AdamWConfig{});
  append_optimizer(ck, st);

  const auto back = Checkpoint::decode(ck.encode());
  SeededRng other(99);
  auto restored = TextTowerParams<double>::init({20, 8, 6}, other);
  // ck holds the pre-step tensors.
  restore_bundle(back, restored);
  SeededRng again(5);
  const auto original = TextTowerParams<double>::init({20, 8, 6}, again);
  CHECK(bundle_hash(restored, true) == bundle_hash(original, true));
  CHECK(bundle_hash(restored, false) == bundle_hash(original, false));
  CHECK(restored.trainable == original.trainable);

  const auto st2 = restore_optimizer(back);
  CHECK(st2.step == st.step);
  REQUIRE(st2.moments.size() == st.moments.size());
  for (const auto& [name, m] : st.moments) {
    CHECK(st2.moments.at(name).m == m.m);
    CHECK(st2.moments.at(name).v == m.v);
  }

  SeededRng wrong(1);
  auto smaller = TextTowerParams<double>::init({20, 8, 4}, wrong);
  CHECK_CIR_ERROR(restore_bundle(back, smaller), ErrorCode::ShapeMismatch);
  Checkpoint none;
  CHECK_CIR_ERROR(restore_bundle(none, smaller), ErrorCode::NotFound);
}

TEST_CASE("resuming from saved optimizer state matches uninterrupted updates") {
  SeededRng rng(8);
  auto a = TextTowerParams<double>::init({12, 4, 5}, rng);
  auto b = a;
  auto g = zeros_like(a);
  SeededRng grng(9);
  TextTowerParams<double>::visit(g, [&](const std::string&, MatrixXd& m) {
    m = gaussian_matrix<double>(m.rows(), m.cols(), grng, 1.0);
  });
  AdamWConfig cfg;
  cfg.lr = 1e-2;
  AdamWState<double> sa, sb;
  for (int i = 0; i < 3; ++i) adamw_step(a, g, sa, cfg);

  adamw_step(b, g, sb, cfg);
  Checkpoint ck;
  append_bundle(ck, b);
  append_optimizer(ck, sb);
  const auto back = Checkpoint::decode(ck.encode());
  SeededRng other(1);
  auto c = TextTowerParams<double>::init({12, 4, 5}, other);
  restore_bundle(back, c);
  auto sc = restore_optimizer(back);
  for (int i = 0; i < 2; ++i) adamw_step(c, g, sc, cfg);
  CHECK(bundle_hash(c, true) == bundle_hash(a, true));
  CHECK(sc.step == sa.step);
}
