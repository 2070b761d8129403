#include <doctest.h>

#include <cstdlib>
#include <sstream>

#include <json.hpp>

#include "cir/cli.hpp"
#include "cir/io.hpp"
#include "cir/tensor.hpp"
#include "test_helpers.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cir_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cir::cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

struct Workspace {
  fs::path root, data, config;

  explicit Workspace(const std::string& name) : root(scratch_dir(name)), data(root / "data"), config(root / "cfg.json") {
    const auto r = cir_run({"synth", "--out", data.string(), "--seed", "5", "--gallery-size", "160", "--dim",
                            "16", "--vocab-size", "20", "--edit-dim", "4"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const json cfg = {{"epochs", 2},
                      {"batch_size", 16},
                      {"optim", {{"lr", 0.01}}},
                      {"model", {{"d_txt", 16}, {"d_v", 8}, {"d_q", 8}, {"queries", 4}, {"patches", 4}}}};
    cir::io::write_file_atomic(config, cfg.dump());
  }
};

}  // namespace

TEST_CASE("cli synth writes the dataset and a manifest") {
  Workspace w("cli_synth");
  for (const char* f : {"gallery.emb", "triplets.jsonl", "dataset.json", "truth_a.emb", "truth_b.emb",
                        "truth_tokens.emb", "run.json"})
    CHECK_MESSAGE(fs::exists(w.data / f), f);
  const auto manifest = json::parse(cir::io::read_file(w.data / "run.json"));
  CHECK(manifest["verb"] == "synth");
  CHECK(manifest["seed"] == 5);
  CHECK(manifest["artifacts"].size() == 6);
  for (const auto& a : manifest["artifacts"]) {
    const auto bytes = cir::io::read_file(a["path"].get<std::string>());
    CHECK(a["fnv1a64"] == cir::io::hex64(cir::fnv1a64(bytes.data(), bytes.size())));
  }
}

TEST_CASE("cli usage errors exit 1") {
  CHECK(cir_run({}).code == cir::cli::kUsage);
  CHECK(cir_run({"fly"}).code == cir::cli::kUsage);
  CHECK(cir_run({"synth", "--out", "x", "--bogus", "1"}).code == cir::cli::kUsage);
  CHECK(cir_run({"synth"}).code == cir::cli::kUsage);
  CHECK(cir_run({"train", "--data", "d", "--out", "o", "--mode", "sgd"}).code == cir::cli::kUsage);
  const auto help = cir_run({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("build-index") != std::string::npos);
}

TEST_CASE("cli missing data directory exits 2 and names the path") {
  const auto root = scratch_dir("cli_missing");
  const auto missing = (root / "nowhere").string();
  const auto r = cir_run({"train", "--mode", "dpo", "--data", missing, "--index-cache",
                          (root / "ix.fip").string(), "--out", (root / "o").string()});
  CHECK(r.code == cir::cli::kDataError);
  CHECK(r.err.find(missing) != std::string::npos);
  CHECK(r.out.empty());
}

TEST_CASE("cli bad flag values exit 1") {
  Workspace w("cli_badvalue");
  const auto r = cir_run({"train", "--data", w.data.string(), "--out", (w.root / "o").string(), "--config",
                          w.config.string(), "--tau", "0"});
  CHECK(r.code == cir::cli::kUsage);
  const auto e = cir_run({"train", "--data", w.data.string(), "--out", (w.root / "o").string(), "--config",
                          w.config.string(), "--epochs", "40"});
  CHECK(e.code == cir::cli::kUsage);
}

TEST_CASE("cli divergent training exits 3") {
  Workspace w("cli_nan");
  const auto r = cir_run({"train", "--data", w.data.string(), "--out", (w.root / "o").string(), "--config",
                          w.config.string(), "--lr", "1e305", "--threads", "1"});
  CHECK_MESSAGE(r.code == cir::cli::kNumericFailure, r.err);
}

TEST_CASE("cli build-index caches and reloads") {
  Workspace w("cli_index");
  const auto cache = (w.root / "ix" / "mining.fip").string();
  const auto first = cir_run({"build-index", "--data", w.data.string(), "--index-cache", cache});
  REQUIRE_MESSAGE(first.code == 0, first.err);
  CHECK(first.err.find("built index") != std::string::npos);
  const auto bytes = cir::io::read_file(cache);
  const auto second = cir_run({"build-index", "--data", w.data.string(), "--index-cache", cache});
  REQUIRE(second.code == 0);
  CHECK(second.err.find("loaded cached index") != std::string::npos);
  CHECK(second.err.find("built index") == std::string::npos);
  CHECK(cir::io::read_file(cache) == bytes);
  CHECK(json::parse(second.out)["verb"] == "build-index");

  cir::io::write_file_atomic(cache, "garbage");
  const auto third = cir_run({"build-index", "--data", w.data.string(), "--index-cache", cache});
  REQUIRE(third.code == 0);
  CHECK(third.err.find("rebuilding") != std::string::npos);
  CHECK(cir::io::read_file(cache) == bytes);

  const auto wide = cir_run({"build-index", "--data", w.data.string(), "--index-cache", cache,
                             "--mining-gallery", "trainval"});
  REQUIRE(wide.code == 0);
  CHECK(wide.err.find("gallery ids differ") != std::string::npos);
}

TEST_CASE("cli train, eval and report") {
  Workspace w("cli_train");
  const auto out = (w.root / "fusion").string();
  const auto t = cir_run({"train", "--data", w.data.string(), "--out", out, "--config", w.config.string(),
                          "--mode", "infonce", "--threads", "2"});
  REQUIRE_MESSAGE(t.code == 0, t.err);
  const auto manifest = json::parse(t.out);
  CHECK(manifest["config"]["mode"] == "infonce_fusion");
  CHECK(manifest["config"]["batch_size"] == 16);
  for (const char* f : {"checkpoint.ckpt", "history.jsonl", "report.json", "run.json"})
    CHECK(fs::exists(fs::path(out) / f));

  const auto e = cir_run({"eval", "--checkpoint", out + "/checkpoint.ckpt", "--data", w.data.string(),
                          "--split", "val", "--out", (w.root / "eval").string()});
  REQUIRE_MESSAGE(e.code == 0, e.err);
  const auto report = json::parse(e.out);
  CHECK(report.contains("categories"));
  CHECK(report["average"].contains("R@10"));
  CHECK(e.out == cir::io::read_file(fs::path(out) / "report.json"));
  CHECK(e.out.back() == '\n');

  const auto test = cir_run({"eval", "--checkpoint", out + "/checkpoint.ckpt", "--data", w.data.string(),
                             "--split", "test", "--ks", "1,10", "--out", (w.root / "eval").string()});
  REQUIRE_MESSAGE(test.code == 0, test.err);
  CHECK(json::parse(test.out)["average"].size() == 2);
  CHECK(cir_run({"eval", "--checkpoint", out + "/checkpoint.ckpt", "--data", w.data.string(), "--split",
                 "train", "--out", (w.root / "eval").string()})
            .code == cir::cli::kUsage);

  const auto fixture = w.root / "fixture.json";
  cir::io::write_file_atomic(fixture, R"({"categories":{"dress":{"R@10":40.06,"R@50":63.47},)"
                                      R"("toptee":{"R@10":50.43,"R@50":72.11},)"
                                      R"("shirt":{"R@10":45.58,"R@50":67.12}}})");
  const auto rep = cir_run({"report", "--input", fixture.string(), "--out", (w.root / "rep").string()});
  REQUIRE_MESSAGE(rep.code == 0, rep.err);
  CHECK(rep.out.find("\"average\":{\"R@10\":45.36,\"R@50\":67.57}") != std::string::npos);
}

TEST_CASE("cli dpo and zero-shot runs") {
  Workspace w("cli_dpo");
  const auto cache = (w.root / "ix.fip").string();
  const auto t = cir_run({"train", "--mode", "dpo", "--data", w.data.string(), "--index-cache", cache, "--out",
                          (w.root / "dpo").string(), "--config", w.config.string(), "--mining-k", "10",
                          "--batch-size", "32"});
  REQUIRE_MESSAGE(t.code == 0, t.err);
  CHECK(fs::exists(cache));
  CHECK(json::parse(t.out)["config"]["mining_k"] == 10);

  const auto z = cir_run({"eval", "--mode", "zeroshot", "--data", w.data.string(), "--config", w.config.string(),
                          "--out", (w.root / "z").string()});
  REQUIRE_MESSAGE(z.code == 0, z.err);
  CHECK(json::parse(z.out)["query_count"].get<int>() > 0);
  CHECK(cir_run({"eval", "--data", w.data.string(), "--out", (w.root / "z").string()}).code == cir::cli::kUsage);
}

TEST_CASE("cli reruns reproduce byte-identical artifacts") {
  Workspace w("cli_rerun");
  const auto out = (w.root / "run").string();
  const std::vector<std::string> args{"train", "--data", w.data.string(), "--out", out, "--config",
                                      w.config.string(), "--seed", "11"};
  const auto a = cir_run(args);
  REQUIRE_MESSAGE(a.code == 0, a.err);
  std::map<std::string, std::string> first;
  for (const auto& p : fs::directory_iterator(out)) first[p.path().string()] = cir::io::read_file(p.path());
  const auto b = cir_run(args);
  REQUIRE(b.code == 0);
  CHECK(a.out == b.out);
  for (const auto& [path, bytes] : first) CHECK_MESSAGE(cir::io::read_file(path) == bytes, path);
}

TEST_CASE("cli thread count from the environment") {
  Workspace w("cli_env");
  ::setenv("CIR_THREADS", "zero", 1);
  const auto bad = cir_run({"eval", "--mode", "zeroshot", "--data", w.data.string(), "--config", w.config.string(),
                            "--out", (w.root / "z").string()});
  CHECK(bad.code == cir::cli::kUsage);
  ::setenv("CIR_THREADS", "2", 1);
  const auto good = cir_run({"eval", "--mode", "zeroshot", "--data", w.data.string(), "--config",
                             w.config.string(), "--out", (w.root / "z").string()});
  CHECK(good.code == 0);
  ::unsetenv("CIR_THREADS");
}
