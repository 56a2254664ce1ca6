#pragma once

// Run configuration: every model, loss and schedule setting plus dataset,
// VFM and output choices. Stored as JSON; the accepted layout is published
// in schema/run_config.schema.json.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "causaltok/argen.hpp"
#include "causaltok/data.hpp"
#include "causaltok/repa.hpp"
#include "causaltok/traintok.hpp"

namespace causaltok {

enum class DatasetKind { Synthetic, Folder };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::Synthetic;
  int count = 256;          // synthetic only
  std::uint64_t seed = 7;   // synthetic only
  std::string path;         // folder only
};

enum class VfmKind { Stub, FeatureDir };

struct VfmConfig {
  VfmKind kind = VfmKind::Stub;
  std::uint64_t seed = 1234;
  int hidden = 64;
  std::string path;  // feature_dir only
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  ImageShape image{3, 32, 32};
  DatasetConfig dataset;
  TokenizerConfig tokenizer;
  TokenizerTrainConfig train;
  VfmConfig vfm;
  ARConfig ar;
  TrainSchedule ar_schedule;
  int checkpoint_every = 1;  // epochs
  int sample_every = 1;      // epochs; 0 disables sample grids
  int eval_images = 64;

  /// Copies shared fields (image shape, token sizes, VFM width) into the
  /// nested model configs and checks every invariant; throws ConfigError.
  void finalize();
};

RunConfig default_run_config();
/// Unknown keys, wrong types and invalid values are all reported together in
/// one ConfigError. Absent keys keep their defaults; absent staging epochs
/// follow the 1/8 and 1/2 ratios of total_epochs.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string serialize_run_config(const RunConfig& cfg);

std::unique_ptr<VfmBackend> make_vfm(const RunConfig& cfg);
std::vector<Sample> load_dataset(const RunConfig& cfg);

}  // namespace causaltok
