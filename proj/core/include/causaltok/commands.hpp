#pragma once

// Command implementations behind the CLI verbs. Each takes a resolved
// output directory and writes its artifacts there:
//
//   train-tokenizer  train_log.jsonl, tokenizer.ckpt, checkpoints/, samples/
//   train-ar         ar_log.jsonl, ar.ckpt, token_cache/
//   reconstruct      reconstruct/<mode>.ppm, reconstruct/<mode>.json
//   generate         generate/grid.ppm, generate/tokens_<i>.tok, generate/record.json
//   evaluate         eval_<suite>.json, eval_<suite>.txt

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "causaltok/argen.hpp"
#include "causaltok/config.hpp"
#include "causaltok/traintok.hpp"

namespace causaltok {

inline constexpr const char* kOutputRootEnv = "CAUSALTOK_OUTPUT_ROOT";

/// `override_dir` if given, else cfg.output_dir; a relative result is placed
/// under $CAUSALTOK_OUTPUT_ROOT when that variable is set.
std::filesystem::path resolve_output_dir(const RunConfig& cfg,
                                         const std::optional<std::filesystem::path>& override_dir);

struct TokenizerCheckpoint {
  RunConfig config;
  TrainState state;
};

void save_tokenizer_checkpoint(const std::filesystem::path& path, const RunConfig& cfg,
                               const TrainState& state);
TokenizerCheckpoint load_tokenizer_checkpoint(const std::filesystem::path& path);

struct ARCheckpoint {
  RunConfig config;
  ARTrainState state;
  int epoch = 0;
  std::uint64_t encoder_hash = 0;
};

void save_ar_checkpoint(const std::filesystem::path& path, const RunConfig& cfg,
                        const ARTrainState& state, int epoch, std::uint64_t encoder_hash);
ARCheckpoint load_ar_checkpoint(const std::filesystem::path& path);

/// Parameters used for inference: the EMA copy or the raw weights.
enum class WeightChoice { Ema, Raw };
const TokenizerModel& inference_model(const TrainState& state, WeightChoice w);

struct TrainTokenizerOptions {
  std::optional<std::filesystem::path> resume;
  std::ostream* progress = nullptr;
};

struct TrainTokenizerResult {
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  std::int64_t steps = 0;
  std::int64_t skipped_steps = 0;
};

TrainTokenizerResult cmd_train_tokenizer(const RunConfig& cfg, const std::filesystem::path& out_dir,
                                         const TrainTokenizerOptions& opts = {});

struct TrainAROptions {
  std::optional<std::filesystem::path> resume;
  WeightChoice weights = WeightChoice::Ema;
  std::ostream* progress = nullptr;
};

struct TrainARResult {
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  std::int64_t steps = 0;
  int cache_hits = 0;
  int cache_misses = 0;
  std::uint64_t encoder_hash_before = 0;
  std::uint64_t encoder_hash_after = 0;
};

/// Encodes the dataset with the frozen tokenizer encoder (cached per image id
/// under token_cache/<encoder hash>/) and trains the generator on it.
TrainARResult cmd_train_ar(const RunConfig& cfg, const std::filesystem::path& tokenizer_ckpt,
                           const std::filesystem::path& out_dir, const TrainAROptions& opts = {});

struct ReconstructMode {
  enum class Kind { OneStep, MultiStep, Prefix, Segment } kind = Kind::OneStep;
  int steps = 25;
  double cfg_scale = 2.0;
  int a = 0;
  int b = 0;

  /// "one-step", "multi-step:<n>:<scale>", "prefix:<k>", "segment:<a>:<b>";
  /// anything else throws UsageError.
  static ReconstructMode parse(const std::string& text);
  std::string name() const;
};

struct ImageMetrics {
  std::vector<double> psnr;
  std::vector<double> ssim;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
};

ImageMetrics image_metrics(std::span<const Matrix> originals, std::span<const Matrix> recon,
                           const ImageShape& shape);

/// Reconstructs every image with `mode`; eps is drawn from Rng(seed) per image.
std::vector<Matrix> reconstruct_images(const TokenizerModel& model, std::span<const Matrix> images,
                                       const ReconstructMode& mode, std::uint64_t seed);

struct ReconstructResult {
  ImageMetrics metrics;
  std::filesystem::path grid;
  std::filesystem::path record;
};

ReconstructResult cmd_reconstruct(const std::filesystem::path& checkpoint,
                                  std::span<const Sample> images, const ReconstructMode& mode,
                                  const std::filesystem::path& out_dir, std::uint64_t seed,
                                  WeightChoice weights = WeightChoice::Ema);

struct GenerateResult {
  std::vector<GeneratedImage> images;
  QueryCounter queries;
  std::filesystem::path grid;
};

GenerateResult cmd_generate(const std::filesystem::path& tokenizer_ckpt,
                            const std::filesystem::path& ar_ckpt, int class_id, int n, double s_max,
                            std::uint64_t seed, const std::filesystem::path& out_dir,
                            WeightChoice weights = WeightChoice::Ema);

enum class EvalSuite { Recon, Gen, Balance, Causality };
EvalSuite parse_eval_suite(const std::string& text);

struct EvaluateOptions {
  std::optional<std::filesystem::path> tokenizer_ckpt;
  std::optional<std::filesystem::path> ar_ckpt;
  std::optional<std::filesystem::path> images_dir;  // folder dataset; default: the config's dataset
  std::uint64_t seed = 0;
  double s_max = 2.0;
  int balance_draws = 100000;
  WeightChoice weights = WeightChoice::Ema;
};

/// Writes eval_<suite>.json and eval_<suite>.txt and returns the JSON text.
std::string cmd_evaluate(EvalSuite suite, const EvaluateOptions& opts,
                         const std::filesystem::path& out_dir);

}  // namespace causaltok
