#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "causaltok/archive.hpp"
#include "causaltok/commands.hpp"
#include "causaltok/config.hpp"
#include "causaltok/errors.hpp"
#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"

using namespace causaltok;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"({
  "seed": 3,
  "output_dir": "unused",
  "image": {"channels": 3, "height": 16, "width": 16},
  "dataset": {"kind": "synthetic", "count": 8, "seed": 5},
  "encoder": {"patch_size": 4, "width": 16, "depth": 1, "heads": 2, "num_tokens": 4, "token_dim": 4, "mlp_ratio": 2},
  "decoder": {"patch_size": 4, "width": 16, "depth": 2, "heads": 2, "repa_layer": 1, "mlp_ratio": 2,
              "time_freq_dim": 16},
  "repa": {"hidden": 16},
  "vfm": {"hidden": 16},
  "train": {"total_epochs": 8, "batch_size": 4, "lr": 0.001, "sample_every": 4, "checkpoint_every": 2},
  "ar": {"width": 16, "depth": 1, "heads": 2, "mlp_ratio": 2, "head_hidden": 16, "head_depth": 1,
         "diff_sample_steps": 5, "time_freq_dim": 8},
  "ar_train": {"total_epochs": 2, "batch_size": 4, "lr": 0.001},
  "eval": {"images": 4}
})";

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("causaltok_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<json> read_jsonl(const fs::path& p) {
  std::ifstream in(p);
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(json::parse(line));
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void collect_paths(const json& j, const std::string& prefix, std::set<std::string>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix + it.key();
    out.insert(key);
    if (it->is_object()) collect_paths(*it, key + ".", out);
  }
}

void collect_schema_paths(const json& schema, const std::string& prefix, std::set<std::string>& out) {
  for (auto it = schema["properties"].begin(); it != schema["properties"].end(); ++it) {
    const std::string key = prefix + it.key();
    out.insert(key);
    if (it->contains("properties")) collect_schema_paths(*it, key + ".", out);
  }
}

}  // namespace

TEST_CASE("config round-trip is a fixed point") {
  const RunConfig def = default_run_config();
  const std::string once = serialize_run_config(def);
  CHECK(serialize_run_config(parse_run_config(once)) == once);

  const RunConfig tiny = parse_run_config(kTinyConfig);
  const std::string t1 = serialize_run_config(tiny);
  CHECK(serialize_run_config(parse_run_config(t1)) == t1);
  CHECK(tiny.tokenizer.decoder.token_dim == 4);
  CHECK(tiny.tokenizer.vfm_dim == 16);
  CHECK(tiny.ar.num_tokens == 4);
  CHECK(tiny.train.schedule.mf_start_epoch == 1);
  CHECK(tiny.train.schedule.interval_start_epoch == 4);
  CHECK(tiny.ar.null_class_id == tiny.ar.n_classes);
}

TEST_CASE("config defaults") {
  const RunConfig c = default_run_config();
  CHECK(c.train.schedule.lr == 1e-4);
  CHECK(c.train.schedule.weight_decay == 0.05);
  CHECK(c.train.schedule.grad_clip == 3.0);
  CHECK(c.train.schedule.ema == 0.999);
  CHECK(c.train.schedule.lr_schedule == LrSchedule::Cosine);
  CHECK(c.train.adaptive.c == 1e-3);
  CHECK(c.train.weights.repa == 1.0);
  CHECK(c.train.weights.repa_a == 0.8);
  CHECK(c.ar_schedule.lr == 5e-5);
  CHECK(c.ar_schedule.lr_schedule == LrSchedule::Constant);
  CHECK(c.ar_schedule.warmup_fraction == doctest::Approx(0.24));
  CHECK(c.tokenizer.decoder.repa_layer == c.tokenizer.decoder.depth / 2);
}

TEST_CASE("config diagnostics collect every problem") {
  try {
    parse_run_config(R"({"encoder": {"width": "wide", "bogus": 1}, "nonsense": true, "loss": {"q": 2}})");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("encoder.width") != std::string::npos);
    CHECK(msg.find("encoder.bogus") != std::string::npos);
    CHECK(msg.find("nonsense") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_run_config("{not json"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"total_epochs": 4, "mf_start_epoch": 5}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"dataset": {"kind": "folder"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"vfm": {"kind": "imagenet"}})"), ConfigError);
  CHECK_THROWS_AS(load_run_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("published schema covers exactly the serialised keys") {
  std::ifstream in(CAUSALTOK_SCHEMA_PATH);
  REQUIRE(in.good());
  const json schema = json::parse(in);
  std::set<std::string> from_schema, from_config;
  collect_schema_paths(schema, "", from_schema);
  collect_paths(json::parse(serialize_run_config(default_run_config())), "", from_config);
  CHECK(from_schema == from_config);
}

TEST_CASE("output directory resolution") {
  RunConfig c = default_run_config();
  c.output_dir = "runs/x";
  unsetenv(kOutputRootEnv);
  CHECK(resolve_output_dir(c, std::nullopt) == fs::path("runs/x"));
  CHECK(resolve_output_dir(c, fs::path("elsewhere")) == fs::path("elsewhere"));
  setenv(kOutputRootEnv, "/tmp/root", 1);
  CHECK(resolve_output_dir(c, std::nullopt) == fs::path("/tmp/root/runs/x"));
  CHECK(resolve_output_dir(c, fs::path("/abs")) == fs::path("/abs"));
  unsetenv(kOutputRootEnv);
}

TEST_CASE("reconstruction modes") {
  CHECK(ReconstructMode::parse("one-step").kind == ReconstructMode::Kind::OneStep);
  const auto m = ReconstructMode::parse("multi-step:25:2.0");
  CHECK(m.kind == ReconstructMode::Kind::MultiStep);
  CHECK(m.steps == 25);
  CHECK(m.cfg_scale == 2.0);
  const auto p = ReconstructMode::parse("prefix:3");
  CHECK(p.kind == ReconstructMode::Kind::Prefix);
  CHECK(p.b == 3);
  const auto s = ReconstructMode::parse("segment:1:3");
  CHECK(s.kind == ReconstructMode::Kind::Segment);
  CHECK(s.a == 1);
  CHECK(s.b == 3);
  CHECK(s.name() == "segment_1_3");
  for (const char* bad : {"", "two-step", "multi-step:x:2", "prefix:", "segment:1", "multi-step:0:1", "prefix:2:3"}) {
    CHECK_THROWS_AS(ReconstructMode::parse(bad), UsageError);
  }
  CHECK(parse_eval_suite("balance") == EvalSuite::Balance);
  CHECK_THROWS_AS(parse_eval_suite("fid"), UsageError);
}

TEST_CASE("archive round-trip") {
  const fs::path dir = fresh_dir("archive");
  Archive a;
  a.metadata_json = R"({"x":1})";
  Rng rng(1);
  a.tensors.emplace("m/one", rng.normal_matrix(3, 5));
  a.tensors.emplace("two", Matrix::Zero(0, 4));
  save_archive(dir / "a.bin", a);
  const Archive b = load_archive(dir / "a.bin");
  CHECK(json::parse(b.metadata_json) == json::parse(a.metadata_json));
  CHECK(b.tensor("m/one") == a.tensor("m/one"));
  CHECK(b.tensor("two").cols() == 4);
  CHECK(tensor_hash(a.tensors) == tensor_hash(b.tensors));
  std::ofstream(dir / "bad.bin") << "garbage";
  CHECK_THROWS(load_archive(dir / "bad.bin"));
  fs::remove_all(dir);
}

TEST_CASE("checkpoint round-trip reproduces forward outputs") {
  const fs::path dir = fresh_dir("ckpt");
  RunConfig cfg = parse_run_config(kTinyConfig);
  TrainState state(cfg.tokenizer, cfg.train.adam, cfg.seed);
  const auto data = load_dataset(cfg);
  const auto vfm = make_vfm(cfg);
  state.epoch = 5;
  for (int i = 0; i < 3; ++i) train_step(state, std::span(data).first(4), *vfm, cfg.train, 10);
  save_tokenizer_checkpoint(dir / "t.ckpt", cfg, state);
  const TokenizerCheckpoint ck = load_tokenizer_checkpoint(dir / "t.ckpt");
  CHECK(serialize_run_config(ck.config) == serialize_run_config(cfg));
  CHECK(ck.state.step == 3);
  CHECK(ck.state.epoch == 5);
  CHECK(ck.state.optimizer.steps() == 3);
  CHECK(ck.state.counters.jvp_calls == state.counters.jvp_calls);
  CHECK(ck.state.rng.state() == state.rng.state());

  Rng rng(2);
  const Matrix eps = rng.normal_matrix(3, 256);
  for (WeightChoice w : {WeightChoice::Ema, WeightChoice::Raw}) {
    const auto& a = inference_model(state, w);
    const auto& b = inference_model(ck.state, w);
    const Matrix ta = a.encoder.encode(data[0].image).tokens;
    CHECK(testutil::max_abs(ta - b.encoder.encode(data[0].image).tokens) <= 1e-6);
    CHECK(testutil::max_abs(one_step(a.decoder, ta, eps) - one_step(b.decoder, ta, eps)) <= 1e-6);
  }

  // Continuing from the checkpoint matches continuing in memory.
  TrainState resumed = ck.state;
  const auto r1 = train_step(state, std::span(data).first(4), *vfm, cfg.train, 10);
  const auto r2 = train_step(resumed, std::span(data).first(4), *vfm, cfg.train, 10);
  CHECK(r1.losses.total == r2.losses.total);

  std::ofstream(dir / "junk.ckpt") << "CAUSALTOK-ARCHIVE 1\n5\n{}";
  CHECK_THROWS(load_tokenizer_checkpoint(dir / "junk.ckpt"));
  fs::remove_all(dir);
}

TEST_CASE("command pipeline smoke run") {
  const fs::path dir = fresh_dir("pipeline");
  const RunConfig cfg = parse_run_config(kTinyConfig);

  const auto tr = cmd_train_tokenizer(cfg, dir / "tok");
  CHECK(fs::exists(tr.checkpoint));
  CHECK(fs::exists(dir / "tok" / "config.json"));
  CHECK(fs::exists(dir / "tok" / "checkpoints" / "tokenizer_epoch2.ckpt"));
  CHECK(fs::exists(dir / "tok" / "samples" / "epoch4.ppm"));
  CHECK(tr.steps == 16);
  const auto log = read_jsonl(tr.log);
  REQUIRE(log.size() == 16);
  for (const auto& rec : log) {
    const int epoch = rec["epoch"].get<int>();
    if (epoch < 1) {
      CHECK(rec["l_mf"].get<double>() == 0.0);
      CHECK(rec["mf_active"].get<bool>() == false);
    }
    CHECK(rec["interval_active"].get<bool>() == (epoch >= 4));
  }

  SUBCASE("determinism and resume") {
    const auto again = cmd_train_tokenizer(cfg, dir / "tok2");
    CHECK(read_jsonl(again.log)[0]["total"] == log[0]["total"]);
    CHECK(slurp(again.checkpoint) == slurp(tr.checkpoint));

    RunConfig longer = cfg;
    longer.train.schedule.total_epochs = 10;
    CHECK_THROWS_AS(cmd_train_tokenizer(longer, dir / "tok3", {dir / "tok" / "checkpoints" / "tokenizer_epoch2.ckpt"}),
                    ConfigError);
    const auto resumed =
        cmd_train_tokenizer(cfg, dir / "tok3", {dir / "tok" / "checkpoints" / "tokenizer_epoch2.ckpt"});
    CHECK(slurp(resumed.checkpoint) == slurp(tr.checkpoint));
  }

  SUBCASE("reconstruct") {
    const auto data = load_dataset(cfg);
    const std::span<const Sample> four(data.data(), 4);
    const auto one = cmd_reconstruct(tr.checkpoint, four, ReconstructMode::parse("one-step"), dir, 1);
    CHECK(fs::exists(one.grid));
    CHECK(fs::exists(one.record));
    CHECK(json::parse(slurp(one.record))["cfg_scale"] == 1.0);
    CHECK(one.metrics.psnr.size() == 4);
    const auto multi = cmd_reconstruct(tr.checkpoint, four, ReconstructMode::parse("multi-step:25:2.0"), dir, 1);
    CHECK(json::parse(slurp(multi.record))["cfg_scale"] == 2.0);

    const TokenizerCheckpoint ck = load_tokenizer_checkpoint(tr.checkpoint);
    std::vector<Matrix> imgs;
    for (const auto& s : four) imgs.push_back(s.image);
    const auto full = reconstruct_images(ck.state.ema, imgs, ReconstructMode::parse("prefix:4"), 9);
    const auto seg = reconstruct_images(ck.state.ema, imgs, ReconstructMode::parse("segment:0:4"), 9);
    const auto os = reconstruct_images(ck.state.ema, imgs, ReconstructMode::parse("one-step"), 9);
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      CHECK(testutil::max_abs(full[i] - seg[i]) == 0.0);
      CHECK(testutil::max_abs(full[i] - os[i]) < 1e-12);
    }
    CHECK_THROWS_AS(cmd_reconstruct(tr.checkpoint, four, ReconstructMode::parse("prefix:9"), dir, 1), UsageError);

    const auto ident = image_metrics(imgs, imgs, cfg.image);
    CHECK(ident.mean_psnr == 99.0);
    CHECK(ident.mean_ssim == doctest::Approx(1.0));
  }

  SUBCASE("generator training, generation and evaluation") {
    const auto ar = cmd_train_ar(cfg, tr.checkpoint, dir / "ar");
    CHECK(fs::exists(ar.checkpoint));
    CHECK(ar.cache_misses == 8);
    CHECK(ar.cache_hits == 0);
    CHECK(ar.encoder_hash_before == ar.encoder_hash_after);
    CHECK(read_jsonl(ar.log).size() == 4);
    const auto ar2 = cmd_train_ar(cfg, tr.checkpoint, dir / "ar");
    CHECK(ar2.cache_hits == 8);
    CHECK(ar2.cache_misses == 0);

    RunConfig other = cfg;
    other.tokenizer.encoder.token_dim = 8;
    other.finalize();
    CHECK_THROWS_AS(cmd_train_ar(other, tr.checkpoint, dir / "ar_bad"), ConfigError);

    const auto g = cmd_generate(tr.checkpoint, ar.checkpoint, 1, 4, 1.0, 7, dir / "gen");
    CHECK(g.images.size() == 4);
    CHECK(g.queries.uncond == 0);
    CHECK(json::parse(slurp(dir / "gen" / "generate" / "record.json"))["null_class_queries"] == 0);
    for (const auto& im : g.images) {
      CHECK(im.tokens.rows() == 4);
      CHECK(im.image.allFinite());
      for (Eigen::Index i = 0; i < im.tokens.rows(); ++i) CHECK(std::abs(im.tokens.row(i).norm() - 1.0) < 1e-9);
    }
    CHECK(fs::exists(dir / "gen" / "generate" / "tokens_3.tok"));
    const std::string grid = slurp(g.grid);
    cmd_generate(tr.checkpoint, ar.checkpoint, 1, 4, 1.0, 7, dir / "gen");
    CHECK(slurp(g.grid) == grid);
    const auto guided = cmd_generate(tr.checkpoint, ar.checkpoint, 1, 2, 2.0, 7, dir / "gen2");
    CHECK(guided.queries.uncond > 0);
    CHECK_THROWS_AS(cmd_generate(tr.checkpoint, ar.checkpoint, 4, 1, 1.0, 7, dir / "gen3"), UsageError);
    CHECK_THROWS_AS(cmd_generate(tr.checkpoint, ar.checkpoint, -1, 1, 1.0, 7, dir / "gen3"), UsageError);

    EvaluateOptions opts;
    opts.tokenizer_ckpt = tr.checkpoint;
    opts.ar_ckpt = ar.checkpoint;
    opts.balance_draws = 20000;
    const json recon = json::parse(cmd_evaluate(EvalSuite::Recon, opts, dir));
    CHECK(recon["modes"].contains("one-step"));
    CHECK(fs::exists(dir / "eval_recon.txt"));
    const json gen = json::parse(cmd_evaluate(EvalSuite::Gen, opts, dir));
    CHECK(gen["frechet"].get<double>() >= 0.0);
    const json bal = json::parse(cmd_evaluate(EvalSuite::Balance, opts, dir));
    CHECK(bal["histograms"]["all"]["max_over_min"] == 1.0);
    const auto fk = bal["histograms"]["first_k"]["frequency"].get<std::vector<double>>();
    for (std::size_t i = 1; i < fk.size(); ++i) CHECK(fk[i] < fk[i - 1]);
    CHECK(bal["histograms"]["interval"]["max_over_min"].get<double>() < 1.5);
    const json cau = json::parse(cmd_evaluate(EvalSuite::Causality, opts, dir));
    std::vector<int> ks;
    for (const auto& p : cau["curve"]) ks.push_back(p["k"].get<int>());
    CHECK(ks == std::vector<int>{1, 2, 4});

    EvaluateOptions none;
    CHECK_THROWS_AS(cmd_evaluate(EvalSuite::Recon, none, dir), UsageError);
    CHECK_NOTHROW(cmd_evaluate(EvalSuite::Balance, none, dir));
    EvaluateOptions no_ar;
    no_ar.tokenizer_ckpt = tr.checkpoint;
    CHECK_THROWS_AS(cmd_evaluate(EvalSuite::Gen, no_ar, dir), UsageError);
  }
  fs::remove_all(dir);
}
