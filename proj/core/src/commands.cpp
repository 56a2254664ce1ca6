#include "causaltok/commands.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "causaltok/archive.hpp"
#include "causaltok/errors.hpp"
#include "causaltok/image.hpp"
#include "causaltok/metrics.hpp"
#include "causaltok/sampling.hpp"
#include "json.hpp"

namespace causaltok {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path resolve_output_dir(const RunConfig& cfg, const std::optional<fs::path>& override_dir) {
  fs::path p = override_dir ? *override_dir : fs::path(cfg.output_dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0') {
      p = fs::path(root) / p;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr int kCheckpointFormat = 1;

json read_metadata(const Archive& a, const char* expected_kind, const fs::path& path) {
  json meta = json::parse(a.metadata_json);
  if (meta.value("kind", "") != expected_kind) {
    throw ConfigError(path.string() + " is not a " + expected_kind + " checkpoint");
  }
  if (meta.value("format", 0) != kCheckpointFormat) {
    throw ConfigError(path.string() + ": unsupported checkpoint format");
  }
  return meta;
}

std::map<std::string, Matrix> prefixed(const std::map<std::string, Matrix>& all, const std::string& prefix) {
  std::map<std::string, Matrix> out;
  for (const auto& [k, v] : all) {
    if (k.rfind(prefix, 0) == 0) out.emplace(k.substr(prefix.size()), v);
  }
  return out;
}

}  // namespace

void save_tokenizer_checkpoint(const fs::path& path, const RunConfig& cfg, const TrainState& state) {
  Archive a;
  json meta;
  meta["kind"] = "tokenizer";
  meta["format"] = kCheckpointFormat;
  meta["config"] = json::parse(serialize_run_config(cfg));
  meta["step"] = state.step;
  meta["epoch"] = state.epoch;
  meta["skipped_steps"] = state.skipped_steps;
  meta["jvp_calls"] = state.counters.jvp_calls;
  meta["adam_steps"] = state.optimizer.steps();
  meta["rng"] = state.rng.state();
  a.metadata_json = meta.dump();
  a.tensors = state.model.export_tensors("model/");
  a.tensors.merge(state.ema.export_tensors("ema/"));
  state.optimizer.export_state(a.tensors, "adam/");
  save_archive(path, a);
}

TokenizerCheckpoint load_tokenizer_checkpoint(const fs::path& path) {
  const Archive a = load_archive(path);
  const json meta = read_metadata(a, "tokenizer", path);
  TokenizerCheckpoint ck;
  ck.config = parse_run_config(meta.at("config").dump());
  ck.state = TrainState(ck.config.tokenizer, ck.config.train.adam, ck.config.seed);
  ck.state.model.import_tensors(a.tensors, "model/");
  ck.state.ema.import_tensors(a.tensors, "ema/");
  ck.state.optimizer.import_state(prefixed(a.tensors, "adam/"), "", meta.at("adam_steps").get<std::int64_t>());
  ck.state.step = meta.at("step").get<std::int64_t>();
  ck.state.epoch = meta.at("epoch").get<int>();
  ck.state.skipped_steps = meta.at("skipped_steps").get<std::int64_t>();
  ck.state.counters.jvp_calls = meta.at("jvp_calls").get<std::int64_t>();
  ck.state.rng.set_state(meta.at("rng").get<std::string>());
  return ck;
}

void save_ar_checkpoint(const fs::path& path, const RunConfig& cfg, const ARTrainState& state, int epoch,
                        std::uint64_t encoder_hash) {
  Archive a;
  json meta;
  meta["kind"] = "ar";
  meta["format"] = kCheckpointFormat;
  meta["config"] = json::parse(serialize_run_config(cfg));
  meta["step"] = state.step;
  meta["epoch"] = epoch;
  meta["skipped_steps"] = state.skipped_steps;
  meta["adam_steps"] = state.optimizer.steps();
  meta["rng"] = state.rng.state();
  meta["encoder_hash"] = std::to_string(encoder_hash);
  a.metadata_json = meta.dump();
  export_params(state.model.params(), "model/", a.tensors);
  export_params(state.ema.params(), "ema/", a.tensors);
  state.optimizer.export_state(a.tensors, "adam/");
  save_archive(path, a);
}

ARCheckpoint load_ar_checkpoint(const fs::path& path) {
  const Archive a = load_archive(path);
  const json meta = read_metadata(a, "ar", path);
  ARCheckpoint ck;
  ck.config = parse_run_config(meta.at("config").dump());
  ck.state = ARTrainState(ck.config.ar, ck.config.train.adam, ck.config.seed);
  import_params(ck.state.model.params(), "model/", a.tensors);
  import_params(ck.state.ema.params(), "ema/", a.tensors);
  ck.state.optimizer.import_state(prefixed(a.tensors, "adam/"), "", meta.at("adam_steps").get<std::int64_t>());
  ck.state.step = meta.at("step").get<std::int64_t>();
  ck.state.skipped_steps = meta.at("skipped_steps").get<std::int64_t>();
  ck.state.rng.set_state(meta.at("rng").get<std::string>());
  ck.epoch = meta.at("epoch").get<int>();
  ck.encoder_hash = std::stoull(meta.at("encoder_hash").get<std::string>());
  return ck;
}

const TokenizerModel& inference_model(const TrainState& state, WeightChoice w) {
  return w == WeightChoice::Ema ? state.ema : state.model;
}

// ---------------------------------------------------------------------------
// Reconstruction helpers

ReconstructMode ReconstructMode::parse(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  auto bad = [&]() {
    return UsageError("unknown reconstruction mode '" + text +
                      "' (expected one-step, multi-step:<n>:<scale>, prefix:<k> or segment:<a>:<b>)");
  };
  auto to_int = [&](const std::string& s) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(s, &used);
    } catch (const std::exception&) {
      throw bad();
    }
    if (used != s.size()) throw bad();
    return v;
  };
  ReconstructMode m;
  if (parts.size() == 1 && parts[0] == "one-step") {
    m.kind = Kind::OneStep;
  } else if (parts.size() == 3 && parts[0] == "multi-step") {
    m.kind = Kind::MultiStep;
    m.steps = to_int(parts[1]);
    std::size_t used = 0;
    try {
      m.cfg_scale = std::stod(parts[2], &used);
    } catch (const std::exception&) {
      throw bad();
    }
    if (used != parts[2].size() || m.steps < 1 || m.cfg_scale < 0.0) throw bad();
  } else if (parts.size() == 2 && parts[0] == "prefix") {
    m.kind = Kind::Prefix;
    m.b = to_int(parts[1]);
    if (m.b < 1) throw bad();
  } else if (parts.size() == 3 && parts[0] == "segment") {
    m.kind = Kind::Segment;
    m.a = to_int(parts[1]);
    m.b = to_int(parts[2]);
    if (m.a < 0 || m.b <= m.a) throw bad();
  } else {
    throw bad();
  }
  return m;
}

std::string ReconstructMode::name() const {
  std::ostringstream os;
  switch (kind) {
    case Kind::OneStep:
      os << "one-step";
      break;
    case Kind::MultiStep:
      os << "multi-step_" << steps << "_" << cfg_scale;
      break;
    case Kind::Prefix:
      os << "prefix_" << b;
      break;
    case Kind::Segment:
      os << "segment_" << a << "_" << b;
      break;
  }
  return os.str();
}

ImageMetrics image_metrics(std::span<const Matrix> originals, std::span<const Matrix> recon,
                           const ImageShape& shape) {
  if (originals.size() != recon.size() || originals.empty()) {
    throw std::invalid_argument("image_metrics: need equally many, non-zero images");
  }
  ImageMetrics m;
  for (std::size_t i = 0; i < originals.size(); ++i) {
    m.psnr.push_back(psnr(originals[i], recon[i]));
    m.ssim.push_back(ssim(originals[i], recon[i], shape));
    m.mean_psnr += m.psnr.back();
    m.mean_ssim += m.ssim.back();
  }
  m.mean_psnr /= static_cast<double>(originals.size());
  m.mean_ssim /= static_cast<double>(originals.size());
  return m;
}

std::vector<Matrix> reconstruct_images(const TokenizerModel& model, std::span<const Matrix> images,
                                       const ReconstructMode& mode, std::uint64_t seed) {
  const int K = model.encoder.config().num_tokens;
  if ((mode.kind == ReconstructMode::Kind::Prefix || mode.kind == ReconstructMode::Kind::Segment) &&
      mode.b > K) {
    throw UsageError("reconstruction mode " + mode.name() + " exceeds K=" + std::to_string(K));
  }
  IdentityCodec codec;
  Rng rng(seed);
  std::vector<Matrix> out;
  for (const Matrix& img : images) {
    const Matrix x = codec.encode(img);
    const Matrix tokens = model.encoder.encode(img).tokens;
    const Matrix eps = rng.normal_matrix(x.rows(), x.cols());
    Matrix z;
    switch (mode.kind) {
      case ReconstructMode::Kind::OneStep:
        z = one_step(model.decoder, tokens, eps);
        break;
      case ReconstructMode::Kind::MultiStep:
        z = multi_step(model.decoder, tokens, eps, mode.steps, mode.cfg_scale);
        break;
      case ReconstructMode::Kind::Prefix:
        z = prefix_reconstruct(model.decoder, x, mode.b, tokens, eps);
        break;
      case ReconstructMode::Kind::Segment:
        z = segment_reconstruct(model.decoder, x, mode.a, mode.b, tokens, eps);
        break;
    }
    out.push_back(codec.decode(z));
  }
  return out;
}

namespace {

std::vector<Matrix> images_of(std::span<const Sample> samples) {
  std::vector<Matrix> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.image);
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// Rows of (input | reconstruction ...) pairs.
void write_side_by_side(const fs::path& path, std::span<const Matrix> left,
                        std::span<const std::vector<Matrix>> columns, const ImageShape& shape) {
  std::vector<Matrix> tiles;
  for (std::size_t i = 0; i < left.size(); ++i) {
    tiles.push_back(left[i]);
    for (const auto& col : columns) tiles.push_back(col[i]);
  }
  const Grid g = make_grid(tiles, shape, static_cast<int>(1 + columns.size()));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_pnm(path, g.image, g.shape);
}

void write_sample_grid(const fs::path& path, const TokenizerModel& model,
                       std::span<const Sample> data, const ImageShape& shape, std::uint64_t seed) {
  const std::size_t n = std::min<std::size_t>(4, data.size());
  const auto imgs = images_of(data.first(n));
  ReconstructMode multi;
  multi.kind = ReconstructMode::Kind::MultiStep;
  const std::vector<std::vector<Matrix>> cols = {
      reconstruct_images(model, imgs, ReconstructMode{}, seed),
      reconstruct_images(model, imgs, multi, seed)};
  write_side_by_side(path, imgs, cols, shape);
}

}  // namespace

// ---------------------------------------------------------------------------
// train-tokenizer

TrainTokenizerResult cmd_train_tokenizer(const RunConfig& cfg_in, const fs::path& out_dir,
                                         const TrainTokenizerOptions& opts) {
  RunConfig cfg = cfg_in;
  cfg.finalize();
  const auto data = load_dataset(cfg);
  const auto vfm = make_vfm(cfg);
  if (vfm->num_patches() != cfg.tokenizer.encoder.num_patches() || vfm->dim() != cfg.tokenizer.vfm_dim) {
    throw ConfigError("vfm features do not match the encoder patch grid and width");
  }

  TrainState state;
  if (opts.resume) {
    TokenizerCheckpoint ck = load_tokenizer_checkpoint(*opts.resume);
    if (serialize_run_config(ck.config) != serialize_run_config(cfg)) {
      throw ConfigError("resume: checkpoint config differs from the requested config");
    }
    state = std::move(ck.state);
  } else {
    state = TrainState(cfg.tokenizer, cfg.train.adam, cfg.seed);
  }

  const auto& sched = cfg.train.schedule;
  BatchSampler sampler(data.size(), sched.batch_size, cfg.seed);
  const int bpe = sampler.batches_per_epoch();
  const std::int64_t total_steps = static_cast<std::int64_t>(sched.total_epochs) * bpe;

  fs::create_directories(out_dir / "checkpoints");
  TrainTokenizerResult res;
  res.log = out_dir / "train_log.jsonl";
  res.checkpoint = out_dir / "tokenizer.ckpt";
  write_text(out_dir / "config.json", serialize_run_config(cfg));
  std::ofstream log(res.log, opts.resume ? std::ios::app : std::ios::trunc);

  for (int epoch = state.epoch; epoch < sched.total_epochs; ++epoch) {
    state.epoch = epoch;
    const int first = static_cast<int>(state.step - static_cast<std::int64_t>(epoch) * bpe);
    double epoch_loss = 0.0;
    int counted = 0;
    for (int b = std::max(first, 0); b < bpe; ++b) {
      const auto idx = sampler.batch(epoch, b);
      const auto batch = gather_batch(data, idx);
      const StepRecord rec = train_step(state, batch, *vfm, cfg.train, total_steps);
      log << to_json_line(rec) << '\n';
      if (!rec.skipped) {
        epoch_loss += rec.losses.total;
        ++counted;
      }
    }
    log.flush();
    state.epoch = epoch + 1;
    const bool last = epoch + 1 == sched.total_epochs;
    if ((epoch + 1) % cfg.checkpoint_every == 0 || last) {
      save_tokenizer_checkpoint(out_dir / "checkpoints" / ("tokenizer_epoch" + std::to_string(epoch + 1) + ".ckpt"),
                                cfg, state);
      save_tokenizer_checkpoint(res.checkpoint, cfg, state);
    }
    if (cfg.sample_every > 0 && ((epoch + 1) % cfg.sample_every == 0 || last)) {
      write_sample_grid(out_dir / "samples" / ("epoch" + std::to_string(epoch + 1) + ".ppm"), state.ema, data,
                        cfg.image, cfg.seed);
    }
    if (opts.progress) {
      *opts.progress << "epoch " << epoch + 1 << "/" << sched.total_epochs << " mean loss "
                     << (counted ? epoch_loss / counted : 0.0) << " (skipped " << state.skipped_steps << ")\n";
    }
  }
  res.steps = state.step;
  res.skipped_steps = state.skipped_steps;
  return res;
}

// ---------------------------------------------------------------------------
// train-ar

namespace {

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

void check_ar_matches_tokenizer(const RunConfig& ar_cfg, const RunConfig& tok_cfg) {
  if (ar_cfg.tokenizer.encoder.num_tokens != tok_cfg.tokenizer.encoder.num_tokens ||
      ar_cfg.tokenizer.encoder.token_dim != tok_cfg.tokenizer.encoder.token_dim ||
      !(ar_cfg.image == tok_cfg.image)) {
    throw ConfigError("token shape mismatch: generator expects " + std::to_string(ar_cfg.ar.num_tokens) + "x" +
                      std::to_string(ar_cfg.ar.token_dim) + " tokens, tokenizer produces " +
                      std::to_string(tok_cfg.tokenizer.encoder.num_tokens) + "x" +
                      std::to_string(tok_cfg.tokenizer.encoder.token_dim));
  }
}

}  // namespace

TrainARResult cmd_train_ar(const RunConfig& cfg_in, const fs::path& tokenizer_ckpt, const fs::path& out_dir,
                           const TrainAROptions& opts) {
  RunConfig cfg = cfg_in;
  cfg.finalize();
  const TokenizerCheckpoint tok = load_tokenizer_checkpoint(tokenizer_ckpt);
  check_ar_matches_tokenizer(cfg, tok.config);
  const Encoder& encoder = inference_model(tok.state, opts.weights).encoder;

  TrainARResult res;
  res.encoder_hash_before = tensor_hash([&] {
    std::map<std::string, Matrix> m;
    export_params(encoder.params(), "", m);
    return m;
  }());

  const auto data = load_dataset(cfg);
  const fs::path cache = out_dir / "token_cache" / hex64(res.encoder_hash_before);
  fs::create_directories(cache);
  std::vector<TokenSequence> seqs;
  seqs.reserve(data.size());
  for (const auto& s : data) {
    const fs::path file = cache / (s.id + ".tok");
    TokenSequence seq;
    seq.label = s.label;
    if (fs::exists(file)) {
      seq.tokens = load_archive(file).tensor("tokens");
      ++res.cache_hits;
    } else {
      seq.tokens = encoder.encode(s.image).tokens;
      Archive a;
      a.metadata_json = json{{"kind", "tokens"}, {"image_id", s.id}, {"label", s.label}}.dump();
      a.tensors.emplace("tokens", seq.tokens);
      save_archive(file, a);
      ++res.cache_misses;
    }
    if (seq.label < 0 || seq.label >= cfg.ar.n_classes) {
      throw ConfigError("image " + s.id + " has label " + std::to_string(seq.label) + " outside [0, n_classes)");
    }
    seqs.push_back(std::move(seq));
  }

  ARTrainState state;
  int start_epoch = 0;
  if (opts.resume) {
    ARCheckpoint ck = load_ar_checkpoint(*opts.resume);
    if (ck.encoder_hash != res.encoder_hash_before) {
      throw ConfigError("resume: generator checkpoint was trained on a different tokenizer");
    }
    state = std::move(ck.state);
    start_epoch = ck.epoch;
  } else {
    state = ARTrainState(cfg.ar, cfg.train.adam, cfg.seed + 1);
  }

  const auto& sched = cfg.ar_schedule;
  BatchSampler sampler(seqs.size(), sched.batch_size, cfg.seed + 1);
  const int bpe = sampler.batches_per_epoch();
  const std::int64_t total_steps = static_cast<std::int64_t>(sched.total_epochs) * bpe;
  res.log = out_dir / "ar_log.jsonl";
  res.checkpoint = out_dir / "ar.ckpt";
  std::ofstream log(res.log, opts.resume ? std::ios::app : std::ios::trunc);
  for (int epoch = start_epoch; epoch < sched.total_epochs; ++epoch) {
    const int first = static_cast<int>(state.step - static_cast<std::int64_t>(epoch) * bpe);
    double sum = 0.0;
    int counted = 0;
    for (int b = std::max(first, 0); b < bpe; ++b) {
      std::vector<TokenSequence> batch;
      for (auto i : sampler.batch(epoch, b)) batch.push_back(seqs[i]);
      ARStepRecord rec = train_ar_step(state, batch, sched, total_steps);
      rec.epoch = epoch;
      log << json{{"step", rec.step}, {"epoch", rec.epoch}, {"loss", rec.loss}, {"lr", rec.lr},
                  {"grad_norm", rec.grad_norm}, {"skipped", rec.skipped}}
                 .dump()
          << '\n';
      if (!rec.skipped) {
        sum += rec.loss;
        ++counted;
      }
    }
    log.flush();
    const bool last = epoch + 1 == sched.total_epochs;
    if ((epoch + 1) % cfg.checkpoint_every == 0 || last) {
      save_ar_checkpoint(res.checkpoint, cfg, state, epoch + 1, res.encoder_hash_before);
    }
    if (opts.progress) {
      *opts.progress << "ar epoch " << epoch + 1 << "/" << sched.total_epochs << " mean loss "
                     << (counted ? sum / counted : 0.0) << "\n";
    }
  }
  res.steps = state.step;
  res.encoder_hash_after = tensor_hash([&] {
    std::map<std::string, Matrix> m;
    export_params(encoder.params(), "", m);
    return m;
  }());
  return res;
}

// ---------------------------------------------------------------------------
// reconstruct

ReconstructResult cmd_reconstruct(const fs::path& checkpoint, std::span<const Sample> images,
                                  const ReconstructMode& mode, const fs::path& out_dir, std::uint64_t seed,
                                  WeightChoice weights) {
  if (images.empty()) throw UsageError("reconstruct: no images");
  const TokenizerCheckpoint ck = load_tokenizer_checkpoint(checkpoint);
  const auto& model = inference_model(ck.state, weights);
  const auto originals = images_of(images);
  const auto recon = reconstruct_images(model, originals, mode, seed);

  ReconstructResult res;
  res.metrics = image_metrics(originals, recon, ck.config.image);
  res.grid = out_dir / "reconstruct" / (mode.name() + ".ppm");
  res.record = out_dir / "reconstruct" / (mode.name() + ".json");
  const std::vector<std::vector<Matrix>> cols = {recon};
  write_side_by_side(res.grid, originals, cols, ck.config.image);

  json rec;
  rec["mode"] = mode.name();
  rec["cfg_scale"] = mode.kind == ReconstructMode::Kind::MultiStep ? mode.cfg_scale : 1.0;
  rec["mean_psnr"] = res.metrics.mean_psnr;
  rec["mean_ssim"] = res.metrics.mean_ssim;
  json per = json::array();
  for (std::size_t i = 0; i < images.size(); ++i) {
    per.push_back({{"id", images[i].id}, {"psnr", res.metrics.psnr[i]}, {"ssim", res.metrics.ssim[i]}});
  }
  rec["images"] = std::move(per);
  write_text(res.record, rec.dump(2) + "\n");
  return res;
}

// ---------------------------------------------------------------------------
// generate

GenerateResult cmd_generate(const fs::path& tokenizer_ckpt, const fs::path& ar_ckpt, int class_id, int n,
                            double s_max, std::uint64_t seed, const fs::path& out_dir, WeightChoice weights) {
  if (n < 1) throw UsageError("generate: n must be positive");
  if (s_max < 1.0) throw UsageError("generate: s_max must be >= 1");
  const TokenizerCheckpoint tok = load_tokenizer_checkpoint(tokenizer_ckpt);
  const ARCheckpoint ar = load_ar_checkpoint(ar_ckpt);
  check_ar_matches_tokenizer(ar.config, tok.config);
  const ARModel& gen = weights == WeightChoice::Ema ? ar.state.ema : ar.state.model;
  if (class_id < 0 || class_id >= gen.config().n_classes) {
    throw UsageError("generate: class id " + std::to_string(class_id) + " outside [0, " +
                     std::to_string(gen.config().n_classes) + ")");
  }
  const auto& model = inference_model(tok.state, weights);
  IdentityCodec codec;
  Rng rng(seed);
  GenerateResult res;
  const fs::path dir = out_dir / "generate";
  fs::create_directories(dir);
  std::vector<Matrix> imgs;
  for (int i = 0; i < n; ++i) {
    res.images.push_back(
        generate_image(gen, model.decoder, tok.config.image, codec, class_id, s_max, rng, &res.queries));
    imgs.push_back(res.images.back().image);
    Archive a;
    a.metadata_json = json{{"kind", "tokens"}, {"class_id", class_id}, {"index", i}}.dump();
    a.tensors.emplace("tokens", res.images.back().tokens);
    save_archive(dir / ("tokens_" + std::to_string(i) + ".tok"), a);
  }
  const Grid g = make_grid(imgs, tok.config.image, std::min(n, 8));
  res.grid = dir / "grid.ppm";
  write_pnm(res.grid, g.image, g.shape);
  json rec{{"class_id", class_id}, {"n", n}, {"s_max", s_max}, {"seed", seed},
           {"cond_queries", res.queries.cond}, {"null_class_queries", res.queries.uncond}};
  write_text(dir / "record.json", rec.dump(2) + "\n");
  return res;
}

// ---------------------------------------------------------------------------
// evaluate

EvalSuite parse_eval_suite(const std::string& text) {
  if (text == "recon") return EvalSuite::Recon;
  if (text == "gen") return EvalSuite::Gen;
  if (text == "balance") return EvalSuite::Balance;
  if (text == "causality") return EvalSuite::Causality;
  throw UsageError("unknown evaluation suite '" + text + "' (expected recon, gen, balance or causality)");
}

namespace {

const char* suite_name(EvalSuite s) {
  switch (s) {
    case EvalSuite::Recon:
      return "recon";
    case EvalSuite::Gen:
      return "gen";
    case EvalSuite::Balance:
      return "balance";
    case EvalSuite::Causality:
      return "causality";
  }
  return "?";
}

std::vector<Sample> eval_images(const RunConfig& cfg, const EvaluateOptions& opts) {
  std::vector<Sample> data = opts.images_dir ? load_folder_dataset(*opts.images_dir, cfg.image) : load_dataset(cfg);
  if (static_cast<int>(data.size()) > cfg.eval_images) data.resize(static_cast<std::size_t>(cfg.eval_images));
  return data;
}

std::string histogram_line(const std::vector<double>& h) {
  std::ostringstream os;
  os.precision(3);
  for (std::size_t i = 0; i < h.size(); ++i) os << (i ? " " : "") << h[i];
  return os.str();
}

}  // namespace

std::string cmd_evaluate(EvalSuite suite, const EvaluateOptions& opts, const fs::path& out_dir) {
  json report;
  report["suite"] = suite_name(suite);
  std::ostringstream summary;
  summary << "suite: " << suite_name(suite) << "\n";

  auto need_tok = [&]() {
    if (!opts.tokenizer_ckpt) {
      throw UsageError(std::string("suite '") + suite_name(suite) + "' requires --tokenizer <checkpoint>");
    }
    return load_tokenizer_checkpoint(*opts.tokenizer_ckpt);
  };

  switch (suite) {
    case EvalSuite::Recon: {
      const TokenizerCheckpoint ck = need_tok();
      const auto& model = inference_model(ck.state, opts.weights);
      const auto data = eval_images(ck.config, opts);
      const auto originals = images_of(data);
      const auto vfm = make_vfm(ck.config);
      const Matrix real = pooled_features(*vfm, originals);
      ReconstructMode multi;
      multi.kind = ReconstructMode::Kind::MultiStep;
      for (const auto& mode : {ReconstructMode{}, multi}) {
        const auto recon = reconstruct_images(model, originals, mode, opts.seed);
        const ImageMetrics m = image_metrics(originals, recon, ck.config.image);
        const double fd = frechet_distance(real, pooled_features(*vfm, recon));
        report["modes"][mode.name()] = {{"psnr", m.mean_psnr}, {"ssim", m.mean_ssim}, {"frechet", fd}};
        summary << mode.name() << ": PSNR " << m.mean_psnr << " dB, SSIM " << m.mean_ssim << ", Frechet " << fd
                << "\n";
      }
      report["n_images"] = data.size();
      break;
    }
    case EvalSuite::Gen: {
      const TokenizerCheckpoint ck = need_tok();
      if (!opts.ar_ckpt) throw UsageError("suite 'gen' requires --ar <checkpoint>");
      const ARCheckpoint ar = load_ar_checkpoint(*opts.ar_ckpt);
      check_ar_matches_tokenizer(ar.config, ck.config);
      const ARModel& gen = opts.weights == WeightChoice::Ema ? ar.state.ema : ar.state.model;
      const auto& model = inference_model(ck.state, opts.weights);
      const auto data = eval_images(ck.config, opts);
      const auto vfm = make_vfm(ck.config);
      IdentityCodec codec;
      Rng rng(opts.seed);
      std::vector<Matrix> generated;
      for (std::size_t i = 0; i < data.size(); ++i) {
        const int cls = static_cast<int>(i % static_cast<std::size_t>(gen.config().n_classes));
        generated.push_back(generate_image(gen, model.decoder, ck.config.image, codec, cls, opts.s_max, rng).image);
      }
      const double fd = frechet_distance(pooled_features(*vfm, images_of(data)), pooled_features(*vfm, generated));
      report["frechet"] = fd;
      report["n_images"] = data.size();
      report["s_max"] = opts.s_max;
      summary << "generated vs real Frechet (stub features): " << fd << "\n";
      break;
    }
    case EvalSuite::Balance: {
      const RunConfig cfg = opts.tokenizer_ckpt ? load_tokenizer_checkpoint(*opts.tokenizer_ckpt).config
                                                : default_run_config();
      const int K = cfg.tokenizer.encoder.num_tokens;
      const std::pair<const char*, TokenSelector> selectors[] = {
          {"interval", TokenSelector::Interval}, {"all", TokenSelector::All}, {"first_k", TokenSelector::FirstK}};
      for (const auto& [name, sel] : selectors) {
        Rng rng(opts.seed);
        const auto h = token_usage_histogram(K, opts.balance_draws, sel, rng, cfg.train.adaptive, cfg.train.time);
        const double mx = *std::max_element(h.begin(), h.end());
        const double mn = *std::min_element(h.begin(), h.end());
        report["histograms"][name] = {{"frequency", h}, {"max_over_min", mn > 0 ? mx / mn : INFINITY}};
        summary << name << " (max/min " << (mn > 0 ? mx / mn : INFINITY) << "): " << histogram_line(h) << "\n";
      }
      report["K"] = K;
      report["draws"] = opts.balance_draws;
      break;
    }
    case EvalSuite::Causality: {
      const TokenizerCheckpoint ck = need_tok();
      const auto& model = inference_model(ck.state, opts.weights);
      const auto data = eval_images(ck.config, opts);
      const int K = ck.config.tokenizer.encoder.num_tokens;
      std::vector<int> ks;
      for (int d : {8, 4, 2, 1}) {
        const int k = std::max(1, K / d);
        if (ks.empty() || ks.back() != k) ks.push_back(k);
      }
      Rng rng(opts.seed);
      const auto imgs = images_of(data);
      const auto curve = causality_probe(model.encoder, model.decoder, imgs, ks, rng);
      std::vector<double> kv, ev;
      json table = json::array();
      summary << "k\terror\n";
      for (const auto& p : curve) {
        kv.push_back(p.k);
        ev.push_back(p.error);
        table.push_back({{"k", p.k}, {"error", p.error}});
        summary << p.k << "\t" << p.error << "\n";
      }
      report["curve"] = std::move(table);
      report["spearman"] = kv.size() >= 2 ? spearman(kv, ev) : 0.0;
      summary << "spearman(k, error) = " << report["spearman"].get<double>() << "\n";
      break;
    }
  }

  const std::string text = report.dump(2);
  write_text(out_dir / ("eval_" + std::string(suite_name(suite)) + ".json"), text + "\n");
  write_text(out_dir / ("eval_" + std::string(suite_name(suite)) + ".txt"), summary.str());
  return text;
}

}  // namespace causaltok
