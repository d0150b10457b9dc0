#include "protossl/tensorio.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "tensor blobs are little-endian; big-endian hosts unsupported");

namespace protossl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::size_t element_count(const std::vector<Index>& shape) {
  std::size_t n = 1;
  for (Index d : shape) {
    if (d < 0) throw std::invalid_argument("tensor shape has negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

void write_file(const fs::path& p, const void* data, std::size_t bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + p.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw std::runtime_error("short write: " + p.string());
}

}  // namespace

void TensorWriter::add(const std::string& name, const Eigen::Ref<const Mat>& m) {
  std::vector<double> values(static_cast<std::size_t>(m.size()));
  // Mat is row-major so a flat copy preserves row-major order.
  Eigen::Map<Mat>(values.data(), m.rows(), m.cols()) = m;
  add(name, {m.rows(), m.cols()}, values);
}

void TensorWriter::add(const std::string& name, const std::vector<Index>& shape,
                       const std::vector<double>& values) {
  if (element_count(shape) != values.size()) {
    throw std::invalid_argument("tensor '" + name + "': shape/value count mismatch");
  }
  TensorInfo info;
  info.name = name;
  info.shape = shape;
  info.offset = static_cast<std::int64_t>(blob_.size() * sizeof(float));
  infos_.push_back(std::move(info));
  blob_.reserve(blob_.size() + values.size());
  for (double v : values) blob_.push_back(static_cast<float>(v));
}

void TensorWriter::set_extra(json extra) {
  extra_ = std::make_shared<json>(std::move(extra));
}

void TensorWriter::save(const fs::path& dir) const {
  fs::create_directories(dir);
  json manifest;
  manifest["dtype"] = "f32";
  json tensors = json::array();
  for (const auto& info : infos_) {
    json t;
    t["name"] = info.name;
    t["shape"] = info.shape;
    t["offset"] = info.offset;
    tensors.push_back(std::move(t));
  }
  manifest["tensors"] = std::move(tensors);
  manifest["extra"] = extra_ ? *extra_ : json::object();
  const std::string text = manifest.dump(2) + "\n";
  write_file(dir / "manifest.json", text.data(), text.size());
  write_file(dir / "data.bin", blob_.data(), blob_.size() * sizeof(float));
}

TensorDir TensorDir::load(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("missing tensor manifest: " + manifest_path.string());
  json manifest = json::parse(in);
  if (manifest.at("dtype").get<std::string>() != "f32") {
    throw std::runtime_error("unsupported dtype in " + manifest_path.string());
  }

  TensorDir td;
  td.extra_ = std::make_shared<json>(manifest.value("extra", json::object()));
  for (const auto& t : manifest.at("tensors")) {
    TensorInfo info;
    info.name = t.at("name").get<std::string>();
    for (const auto& d : t.at("shape")) info.shape.push_back(d.get<Index>());
    info.offset = t.at("offset").get<std::int64_t>();
    td.index_[info.name] = td.infos_.size();
    td.infos_.push_back(std::move(info));
  }

  const fs::path blob_path = dir / "data.bin";
  std::ifstream blob(blob_path, std::ios::binary | std::ios::ate);
  if (!blob) throw std::runtime_error("missing tensor blob: " + blob_path.string());
  const auto bytes = static_cast<std::size_t>(blob.tellg());
  if (bytes % sizeof(float) != 0) {
    throw std::runtime_error("tensor blob size not a multiple of 4: " + blob_path.string());
  }
  td.blob_.resize(bytes / sizeof(float));
  blob.seekg(0);
  blob.read(reinterpret_cast<char*>(td.blob_.data()), static_cast<std::streamsize>(bytes));
  if (!blob) throw std::runtime_error("short read: " + blob_path.string());
  return td;
}

bool TensorDir::has(const std::string& name) const { return index_.count(name) > 0; }

const TensorInfo& TensorDir::info(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no tensor named '" + name + "'");
  return infos_[it->second];
}

Mat TensorDir::matrix(const std::string& name) const {
  const TensorInfo& inf = info(name);
  Index rows = 1, cols = 1;
  if (inf.shape.size() == 1) {
    rows = inf.shape[0];
  } else if (!inf.shape.empty()) {
    rows = inf.shape[0];
    for (std::size_t i = 1; i < inf.shape.size(); ++i) cols *= inf.shape[i];
  }
  const auto begin = static_cast<std::size_t>(inf.offset) / sizeof(float);
  const auto count = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  if (begin + count > blob_.size()) {
    throw std::runtime_error("tensor '" + name + "' extends past blob end");
  }
  Mat m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      m(r, c) = static_cast<double>(blob_[begin + static_cast<std::size_t>(r * cols + c)]);
    }
  }
  return m;
}

std::vector<double> TensorDir::raw(const std::string& name) const {
  const TensorInfo& inf = info(name);
  const auto begin = static_cast<std::size_t>(inf.offset) / sizeof(float);
  const auto count = element_count(inf.shape);
  if (begin + count > blob_.size()) {
    throw std::runtime_error("tensor '" + name + "' extends past blob end");
  }
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<double>(blob_[begin + i]);
  return out;
}

const json& TensorDir::extra() const { return *extra_; }

}  // namespace protossl
