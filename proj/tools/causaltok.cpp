// causaltok: train, reconstruct, generate and evaluate from the command line.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "causaltok/commands.hpp"
#include "causaltok/errors.hpp"

namespace fs = std::filesystem;
using namespace causaltok;

namespace {

WeightChoice parse_weights(const std::string& s) {
  if (s == "ema") return WeightChoice::Ema;
  if (s == "raw") return WeightChoice::Raw;
  throw UsageError("--weights must be 'ema' or 'raw'");
}

std::optional<fs::path> opt_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::path(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal 1D image tokenizer with a one-step mean-velocity decoder"};
  app.require_subcommand(1);

  std::string config_path, resume, out, tokenizer, ar, images, mode = "one-step", weights = "ema";
  std::string suite;
  std::optional<std::uint64_t> seed;
  int count = 16, class_id = 0, n = 4, draws = 100000;
  double s_max = 2.0;

  auto* train_tok = app.add_subcommand("train-tokenizer", "Train encoder, decoder and REPA projector");
  train_tok->add_option("--config", config_path, "Run configuration (JSON)")->required();
  train_tok->add_option("--resume", resume, "Continue from a tokenizer checkpoint");
  train_tok->add_option("--seed", seed, "Override the configured seed");
  train_tok->add_option("--out", out, "Output directory (default: config output_dir)");

  auto* train_ar = app.add_subcommand("train-ar", "Train the autoregressive generator on frozen tokens");
  train_ar->add_option("--config", config_path, "Run configuration (JSON)")->required();
  train_ar->add_option("--tokenizer", tokenizer, "Tokenizer checkpoint")->required();
  train_ar->add_option("--resume", resume, "Continue from a generator checkpoint");
  train_ar->add_option("--seed", seed, "Override the configured seed");
  train_ar->add_option("--out", out, "Output directory (default: config output_dir)");
  train_ar->add_option("--weights", weights, "Tokenizer weights: ema or raw");

  auto* recon = app.add_subcommand("reconstruct", "Reconstruct images and report PSNR/SSIM");
  recon->add_option("--checkpoint", tokenizer, "Tokenizer checkpoint")->required();
  recon->add_option("--mode", mode, "one-step | multi-step:<n>:<scale> | prefix:<k> | segment:<a>:<b>");
  recon->add_option("--images", images, "Folder with labels.txt (default: the checkpoint's dataset)");
  recon->add_option("--count", count, "Number of images from the dataset");
  recon->add_option("--seed", seed, "Noise seed");
  recon->add_option("--out", out, "Output directory");
  recon->add_option("--weights", weights, "ema or raw");

  auto* gen = app.add_subcommand("generate", "Sample token sequences and decode them in one step");
  gen->add_option("--tokenizer", tokenizer, "Tokenizer checkpoint")->required();
  gen->add_option("--ar", ar, "Generator checkpoint")->required();
  gen->add_option("--class", class_id, "Class id");
  gen->add_option("--n", n, "Number of images");
  gen->add_option("--s-max", s_max, "Guidance scale reached at the last token");
  gen->add_option("--seed", seed, "Sampling seed");
  gen->add_option("--out", out, "Output directory");
  gen->add_option("--weights", weights, "ema or raw");

  auto* eval = app.add_subcommand("evaluate", "Run an evaluation suite and write a report");
  eval->add_option("--suite", suite, "recon | gen | balance | causality")->required();
  eval->add_option("--tokenizer", tokenizer, "Tokenizer checkpoint");
  eval->add_option("--ar", ar, "Generator checkpoint (gen suite)");
  eval->add_option("--images", images, "Folder with labels.txt (default: the checkpoint's dataset)");
  eval->add_option("--s-max", s_max, "Guidance scale for the gen suite");
  eval->add_option("--draws", draws, "Draws per histogram for the balance suite");
  eval->add_option("--seed", seed, "Evaluation seed");
  eval->add_option("--out", out, "Output directory");
  eval->add_option("--weights", weights, "ema or raw");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_tok->parsed()) {
      RunConfig cfg = load_run_config(config_path);
      if (seed) cfg.seed = *seed;
      TrainTokenizerOptions opts;
      opts.resume = opt_path(resume);
      opts.progress = &std::cerr;
      const auto dir = resolve_output_dir(cfg, opt_path(out));
      const auto res = cmd_train_tokenizer(cfg, dir, opts);
      std::cout << "checkpoint: " << res.checkpoint.string() << "\nlog: " << res.log.string()
                << "\nsteps: " << res.steps << " (skipped " << res.skipped_steps << ")\n";
    } else if (train_ar->parsed()) {
      RunConfig cfg = load_run_config(config_path);
      if (seed) cfg.seed = *seed;
      TrainAROptions opts;
      opts.resume = opt_path(resume);
      opts.weights = parse_weights(weights);
      opts.progress = &std::cerr;
      const auto dir = resolve_output_dir(cfg, opt_path(out));
      const auto res = cmd_train_ar(cfg, tokenizer, dir, opts);
      std::cout << "checkpoint: " << res.checkpoint.string() << "\nlog: " << res.log.string()
                << "\ntoken cache: " << res.cache_hits << " hits, " << res.cache_misses << " misses\n";
    } else if (recon->parsed()) {
      const auto m = ReconstructMode::parse(mode);
      const auto ck = load_tokenizer_checkpoint(tokenizer);
      std::vector<Sample> data =
          images.empty() ? load_dataset(ck.config) : load_folder_dataset(images, ck.config.image);
      if (count > 0 && static_cast<int>(data.size()) > count) data.resize(static_cast<std::size_t>(count));
      const auto dir = resolve_output_dir(ck.config, opt_path(out));
      const auto res = cmd_reconstruct(tokenizer, data, m, dir, seed.value_or(0), parse_weights(weights));
      std::cout << m.name() << ": PSNR " << res.metrics.mean_psnr << " dB, SSIM " << res.metrics.mean_ssim
                << "\ngrid: " << res.grid.string() << "\nrecord: " << res.record.string() << "\n";
    } else if (gen->parsed()) {
      const auto ck = load_tokenizer_checkpoint(tokenizer);
      const auto dir = resolve_output_dir(ck.config, opt_path(out));
      const auto res =
          cmd_generate(tokenizer, ar, class_id, n, s_max, seed.value_or(0), dir, parse_weights(weights));
      std::cout << "grid: " << res.grid.string() << "\nnull-class queries: " << res.queries.uncond << "\n";
    } else if (eval->parsed()) {
      EvaluateOptions opts;
      opts.tokenizer_ckpt = opt_path(tokenizer);
      opts.ar_ckpt = opt_path(ar);
      opts.images_dir = opt_path(images);
      opts.seed = seed.value_or(0);
      opts.s_max = s_max;
      opts.balance_draws = draws;
      opts.weights = parse_weights(weights);
      const EvalSuite s = parse_eval_suite(suite);
      RunConfig base = opts.tokenizer_ckpt ? load_tokenizer_checkpoint(*opts.tokenizer_ckpt).config
                                           : default_run_config();
      const auto dir = resolve_output_dir(base, opt_path(out));
      std::cout << cmd_evaluate(s, opts, dir) << "\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 64;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
