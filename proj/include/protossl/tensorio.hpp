#pragma once

#include "protossl/core.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace protossl {

// On-disk tensor container: a directory holding manifest.json plus a single
// raw little-endian float32 blob (data.bin), row-major. The manifest lists
// tensor names, shapes and byte offsets; arbitrary JSON metadata rides along
// under "extra". Writes are byte-deterministic for identical content.

struct TensorInfo {
  std::string name;
  std::vector<Index> shape;
  std::int64_t offset{0};  // bytes into data.bin
};

class TensorWriter {
 public:
  /// Append a matrix as a rank-2 tensor.
  void add(const std::string& name, const Eigen::Ref<const Mat>& m);
  /// Append raw values under an explicit shape (row-major).
  void add(const std::string& name, const std::vector<Index>& shape,
           const std::vector<double>& values);
  void set_extra(nlohmann::json extra);

  /// Write manifest.json and data.bin under dir (created if absent).
  void save(const std::filesystem::path& dir) const;

 private:
  std::vector<TensorInfo> infos_;
  std::vector<float> blob_;
  std::shared_ptr<nlohmann::json> extra_;
};

class TensorDir {
 public:
  static TensorDir load(const std::filesystem::path& dir);

  bool has(const std::string& name) const;
  const TensorInfo& info(const std::string& name) const;
  /// Rank-2 view (rank-1 becomes a column; rank>2 collapses trailing dims).
  Mat matrix(const std::string& name) const;
  std::vector<double> raw(const std::string& name) const;
  const nlohmann::json& extra() const;
  const std::vector<TensorInfo>& tensors() const { return infos_; }

 private:
  std::vector<TensorInfo> infos_;
  std::map<std::string, std::size_t> index_;
  std::vector<float> blob_;
  std::shared_ptr<nlohmann::json> extra_;
};

}  // namespace protossl
