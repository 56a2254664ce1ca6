#include "causaltok/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "causaltok/errors.hpp"
#include "json.hpp"

namespace causaltok {

namespace {

constexpr const char* kMagic = "CAUSALTOK-ARCHIVE";

static_assert(std::endian::native == std::endian::little,
              "archive payload is written in native order; big-endian hosts need byte swapping");

}  // namespace

const Matrix& Archive::tensor(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::runtime_error("archive: missing tensor '" + name + "'");
  return it->second;
}

void save_archive(const std::filesystem::path& path, const Archive& archive) {
  nlohmann::json manifest;
  manifest["format_version"] = kArchiveVersion;
  manifest["dtype"] = "float64";
  manifest["byte_order"] = "little";
  manifest["metadata"] = nlohmann::json::parse(archive.metadata_json);
  nlohmann::json list = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, m] : archive.tensors) {
    list.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += static_cast<std::size_t>(m.size());
  }
  manifest["tensors"] = std::move(list);
  const std::string text = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("archive: cannot write " + tmp.string());
    out << kMagic << ' ' << kArchiveVersion << '\n' << text.size() << '\n' << text;
    for (const auto& [_, m] : archive.tensors) {
      out.write(reinterpret_cast<const char*>(m.data()),
                static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("archive: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("archive: cannot open " + path.string());
  std::string magic;
  int version = 0;
  std::size_t length = 0;
  in >> magic >> version >> length;
  in.get();
  if (magic != kMagic) throw std::runtime_error("archive: bad magic in " + path.string());
  if (version != kArchiveVersion) {
    throw std::runtime_error("archive: unsupported version " + std::to_string(version));
  }
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw std::runtime_error("archive: truncated manifest in " + path.string());
  const auto manifest = nlohmann::json::parse(text);

  Archive a;
  a.metadata_json = manifest.at("metadata").dump();
  const auto payload_start = in.tellg();
  for (const auto& entry : manifest.at("tensors")) {
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    const auto offset = entry.at("offset").get<std::streamoff>();
    Matrix m(rows, cols);
    in.seekg(payload_start + offset * static_cast<std::streamoff>(sizeof(double)));
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw std::runtime_error("archive: truncated tensor payload in " + path.string());
    a.tensors.emplace(entry.at("name").get<std::string>(), std::move(m));
  }
  return a;
}

std::uint64_t tensor_hash(const std::map<std::string, Matrix>& tensors) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, m] : tensors) {
    mix(name.data(), name.size());
    const Eigen::Index shape[2] = {m.rows(), m.cols()};
    mix(shape, sizeof(shape));
    mix(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  return h;
}

void export_params(const ParamStore& params, const std::string& prefix,
                   std::map<std::string, Matrix>& out) {
  for (const auto& [name, p] : params) out[prefix + name] = p.value;
}

void import_params(ParamStore& params, const std::string& prefix,
                   const std::map<std::string, Matrix>& in) {
  for (auto& [name, p] : params) {
    auto it = in.find(prefix + name);
    if (it == in.end()) throw ConfigError("checkpoint is missing tensor '" + prefix + name + "'");
    if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols()) {
      throw ConfigError("checkpoint tensor '" + prefix + name + "' has shape " +
                        std::to_string(it->second.rows()) + "x" + std::to_string(it->second.cols()) +
                        ", model expects " + std::to_string(p.value.rows()) + "x" +
                        std::to_string(p.value.cols()));
    }
    p.value = it->second;
  }
}

}  // namespace causaltok
