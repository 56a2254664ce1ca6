#include "causaltok/config.hpp"

#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <utility>

#include "causaltok/errors.hpp"
#include "json.hpp"

namespace causaltok {

using nlohmann::json;

namespace {

template <typename E>
using EnumNames = std::vector<std::pair<const char*, E>>;

const EnumNames<DatasetKind> kDatasetKinds = {{"synthetic", DatasetKind::Synthetic},
                                              {"folder", DatasetKind::Folder}};
const EnumNames<VfmKind> kVfmKinds = {{"stub", VfmKind::Stub}, {"feature_dir", VfmKind::FeatureDir}};
const EnumNames<TimeDistribution> kTimeKinds = {{"uniform", TimeDistribution::Uniform},
                                                {"logit_normal", TimeDistribution::LogitNormal}};
const EnumNames<LrSchedule> kLrKinds = {{"cosine", LrSchedule::Cosine}, {"constant", LrSchedule::Constant}};

class Writer {
 public:
  explicit Writer(json& j) : j_(j) {}

  template <typename T>
  void field(const char* key, T& value) {
    j_[key] = value;
  }
  template <typename E>
  void enumeration(const char* key, E& value, const EnumNames<E>& names) {
    for (const auto& [name, v] : names) {
      if (v == value) j_[key] = name;
    }
  }
  void section(const char* key, const std::function<void(Writer&)>& fn) {
    json child = json::object();
    Writer w(child);
    fn(w);
    j_[key] = std::move(child);
  }

 private:
  json& j_;
};

class Reader {
 public:
  Reader(const json& j, std::string path, std::vector<std::string>& errors)
      : j_(j), path_(std::move(path)), errors_(errors) {}

  template <typename T>
  void field(const char* key, T& value) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    bool ok = false;
    if constexpr (std::is_same_v<T, std::string>) {
      ok = v.is_string();
    } else if constexpr (std::is_floating_point_v<T>) {
      ok = v.is_number();
    } else if constexpr (std::is_unsigned_v<T>) {
      ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
    } else {
      ok = v.is_number_integer();
    }
    if (!ok) {
      errors_.push_back(where(key) + ": wrong type (" + std::string(v.type_name()) + ")");
      return;
    }
    value = v.get<T>();
  }
  template <typename E>
  void enumeration(const char* key, E& value, const EnumNames<E>& names) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    if (v.is_string()) {
      for (const auto& [name, e] : names) {
        if (v.get<std::string>() == name) {
          value = e;
          return;
        }
      }
    }
    std::string allowed;
    for (const auto& [name, _] : names) allowed += std::string(allowed.empty() ? "" : ", ") + name;
    errors_.push_back(where(key) + ": expected one of {" + allowed + "}");
  }
  void section(const char* key, const std::function<void(Reader&)>& fn) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    if (!v.is_object()) {
      errors_.push_back(where(key) + ": expected an object");
      return;
    }
    Reader r(v, where(key), errors_);
    fn(r);
    r.check_unknown();
  }
  void check_unknown() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) errors_.push_back(where(k.c_str()) + ": unknown key");
    }
  }

 private:
  std::string where(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& j_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

template <typename V>
void visit_schedule(V& s, TrainSchedule& t, bool staged) {
  s.field("total_epochs", t.total_epochs);
  if (staged) {
    s.field("mf_start_epoch", t.mf_start_epoch);
    s.field("interval_start_epoch", t.interval_start_epoch);
  }
  s.field("lr", t.lr);
  s.field("min_lr", t.min_lr);
  s.enumeration("lr_schedule", t.lr_schedule, kLrKinds);
  s.field("warmup_fraction", t.warmup_fraction);
  s.field("batch_size", t.batch_size);
  s.field("weight_decay", t.weight_decay);
  s.field("grad_clip", t.grad_clip);
  s.field("ema", t.ema);
  s.field("p_uncond", t.p_uncond);
}

template <typename V>
void visit_config(V& v, RunConfig& c) {
  v.field("seed", c.seed);
  v.field("output_dir", c.output_dir);
  v.section("image", [&](V& s) {
    s.field("channels", c.image.channels);
    s.field("height", c.image.height);
    s.field("width", c.image.width);
  });
  v.section("dataset", [&](V& s) {
    s.enumeration("kind", c.dataset.kind, kDatasetKinds);
    s.field("count", c.dataset.count);
    s.field("seed", c.dataset.seed);
    s.field("path", c.dataset.path);
  });
  v.section("encoder", [&](V& s) {
    auto& e = c.tokenizer.encoder;
    s.field("patch_size", e.patch_size);
    s.field("width", e.width);
    s.field("depth", e.depth);
    s.field("heads", e.heads);
    s.field("num_tokens", e.num_tokens);
    s.field("token_dim", e.token_dim);
    s.field("mlp_ratio", e.mlp_ratio);
  });
  v.section("decoder", [&](V& s) {
    auto& d = c.tokenizer.decoder;
    s.field("patch_size", d.patch_size);
    s.field("width", d.width);
    s.field("depth", d.depth);
    s.field("heads", d.heads);
    s.field("repa_layer", d.repa_layer);
    s.field("mlp_ratio", d.mlp_ratio);
    s.field("time_freq_dim", d.time_freq_dim);
    s.field("time_max_freq", d.time_max_freq);
  });
  v.section("repa", [&](V& s) { s.field("hidden", c.tokenizer.repa_hidden); });
  v.section("vfm", [&](V& s) {
    s.enumeration("kind", c.vfm.kind, kVfmKinds);
    s.field("seed", c.vfm.seed);
    s.field("hidden", c.vfm.hidden);
    s.field("path", c.vfm.path);
  });
  v.section("loss", [&](V& s) {
    s.field("c", c.train.adaptive.c);
    s.field("w", c.train.adaptive.w);
    s.field("q", c.train.adaptive.q);
    s.enumeration("time_distribution", c.train.time.kind, kTimeKinds);
    s.field("logit_mean", c.train.time.logit_mean);
    s.field("logit_std", c.train.time.logit_std);
    s.field("w_repa", c.train.weights.repa);
    s.field("w_repa_a", c.train.weights.repa_a);
  });
  v.section("train", [&](V& s) {
    visit_schedule(s, c.train.schedule, true);
    s.field("beta1", c.train.adam.beta1);
    s.field("beta2", c.train.adam.beta2);
    s.field("adam_eps", c.train.adam.eps);
    s.field("checkpoint_every", c.checkpoint_every);
    s.field("sample_every", c.sample_every);
  });
  v.section("ar", [&](V& s) {
    s.field("width", c.ar.width);
    s.field("depth", c.ar.depth);
    s.field("heads", c.ar.heads);
    s.field("mlp_ratio", c.ar.mlp_ratio);
    s.field("n_classes", c.ar.n_classes);
    s.field("null_class_id", c.ar.null_class_id);
    s.field("head_hidden", c.ar.head_hidden);
    s.field("head_depth", c.ar.head_depth);
    s.field("diff_train_steps", c.ar.diff_train_steps);
    s.field("diff_sample_steps", c.ar.diff_sample_steps);
    s.field("time_freq_dim", c.ar.time_freq_dim);
    s.field("time_max_freq", c.ar.time_max_freq);
  });
  v.section("ar_train", [&](V& s) { visit_schedule(s, c.ar_schedule, false); });
  v.section("eval", [&](V& s) { s.field("images", c.eval_images); });
}

}  // namespace

RunConfig default_run_config() {
  RunConfig c;
  c.train.schedule = TrainSchedule::with_ratios(16);
  c.ar_schedule.total_epochs = 40;
  c.ar_schedule.mf_start_epoch = 0;
  c.ar_schedule.interval_start_epoch = 0;
  c.ar_schedule.lr = 5e-5;
  c.ar_schedule.lr_schedule = LrSchedule::Constant;
  c.ar_schedule.warmup_fraction = 96.0 / 400.0;
  c.finalize();
  return c;
}

void RunConfig::finalize() {
  tokenizer.encoder.image = image;
  tokenizer.decoder.latent = image;
  tokenizer.decoder.token_dim = tokenizer.encoder.token_dim;
  tokenizer.decoder.max_tokens = tokenizer.encoder.num_tokens;
  tokenizer.vfm_dim = tokenizer.encoder.width;
  ar.num_tokens = tokenizer.encoder.num_tokens;
  ar.token_dim = tokenizer.encoder.token_dim;
  ar_schedule.mf_start_epoch = 0;
  ar_schedule.interval_start_epoch = 0;

  if (image.channels < 1 || image.height < 1 || image.width < 1) {
    throw ConfigError("image: dimensions must be positive");
  }
  tokenizer.validate();
  train.schedule.validate();
  train.adaptive.validate();
  if (train.time.kind == TimeDistribution::LogitNormal && !(train.time.logit_std > 0.0)) {
    throw ConfigError("loss.logit_std must be positive");
  }
  if (train.weights.repa < 0.0 || train.weights.repa_a < 0.0) {
    throw ConfigError("loss: alignment weights must be non-negative");
  }
  if (!(train.adam.beta1 >= 0.0 && train.adam.beta1 < 1.0 && train.adam.beta2 >= 0.0 &&
        train.adam.beta2 < 1.0 && train.adam.eps > 0.0)) {
    throw ConfigError("train: need beta1, beta2 in [0, 1) and adam_eps > 0");
  }
  ar.validate();
  ar_schedule.validate();
  if (dataset.kind == DatasetKind::Synthetic && dataset.count < 1) {
    throw ConfigError("dataset.count must be positive");
  }
  if (dataset.kind == DatasetKind::Folder && dataset.path.empty()) {
    throw ConfigError("dataset.path is required for kind 'folder'");
  }
  if (vfm.kind == VfmKind::FeatureDir && vfm.path.empty()) {
    throw ConfigError("vfm.path is required for kind 'feature_dir'");
  }
  if (vfm.hidden < 1) throw ConfigError("vfm.hidden must be positive");
  if (checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be >= 1");
  if (sample_every < 0) throw ConfigError("train.sample_every must be >= 0");
  if (eval_images < 1) throw ConfigError("eval.images must be >= 1");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: top level must be an object");

  RunConfig c = default_run_config();
  c.train.schedule.mf_start_epoch = -1;
  c.train.schedule.interval_start_epoch = -1;
  c.ar.null_class_id = -1;
  std::vector<std::string> errors;
  Reader r(j, "", errors);
  visit_config(r, c);
  r.check_unknown();
  if (!errors.empty()) {
    std::string msg = "config has " + std::to_string(errors.size()) + " error(s):";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  if (c.train.schedule.mf_start_epoch < 0) c.train.schedule.mf_start_epoch = c.train.schedule.total_epochs / 8;
  if (c.train.schedule.interval_start_epoch < 0) {
    c.train.schedule.interval_start_epoch = c.train.schedule.total_epochs / 2;
  }
  if (c.ar.null_class_id < 0) c.ar.null_class_id = c.ar.n_classes;
  c.finalize();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string serialize_run_config(const RunConfig& cfg) {
  RunConfig copy = cfg;
  json j = json::object();
  Writer w(j);
  visit_config(w, copy);
  return j.dump(2);
}

std::unique_ptr<VfmBackend> make_vfm(const RunConfig& cfg) {
  const auto& e = cfg.tokenizer.encoder;
  if (cfg.vfm.kind == VfmKind::FeatureDir) {
    return std::make_unique<FeatureDirVfm>(cfg.vfm.path, e.num_patches(), e.width);
  }
  StubVfmConfig s;
  s.image = cfg.image;
  s.patch_size = e.patch_size;
  s.dim = e.width;
  s.hidden = cfg.vfm.hidden;
  s.seed = cfg.vfm.seed;
  return std::make_unique<StubVfm>(s);
}

std::vector<Sample> load_dataset(const RunConfig& cfg) {
  if (cfg.dataset.kind == DatasetKind::Folder) return load_folder_dataset(cfg.dataset.path, cfg.image);
  SyntheticConfig s;
  s.image = cfg.image;
  s.count = cfg.dataset.count;
  s.seed = cfg.dataset.seed;
  return synthetic_dataset(s);
}

}  // namespace causaltok
