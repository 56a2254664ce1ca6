#pragma once

// Single-file named-tensor container.
//
//   CAUSALTOK-ARCHIVE <version>\n
//   <manifest byte length>\n
//   <manifest JSON>
//   <tensor payload: little-endian float64, row-major, concatenated>
//
// The manifest lists every tensor as {name, rows, cols, offset} (offset in
// doubles from the start of the payload) and carries a free-form "metadata"
// object supplied by the caller.

#include <filesystem>
#include <map>
#include <string>

#include "causaltok/autodiff.hpp"
#include "causaltok/tensor.hpp"

namespace causaltok {

inline constexpr int kArchiveVersion = 1;

struct Archive {
  std::string metadata_json = "{}";
  std::map<std::string, Matrix> tensors;

  const Matrix& tensor(const std::string& name) const;
};

void save_archive(const std::filesystem::path& path, const Archive& archive);
Archive load_archive(const std::filesystem::path& path);

/// FNV-1a over tensor names and raw bytes; used to fingerprint parameters.
std::uint64_t tensor_hash(const std::map<std::string, Matrix>& tensors);

/// Copy every parameter value into `out` under `prefix + name`.
void export_params(const ParamStore& params, const std::string& prefix,
                   std::map<std::string, Matrix>& out);
/// Overwrite every parameter from `in`; a missing name or a shape mismatch
/// throws ConfigError.
void import_params(ParamStore& params, const std::string& prefix,
                   const std::map<std::string, Matrix>& in);

}  // namespace causaltok
