#include "slimunet/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "slimunet/error.hpp"

namespace slimunet {
namespace fs = std::filesystem;

namespace {

constexpr const char* kArchiveFormat = "slimunet-tensor-archive";
constexpr int kArchiveVersion = 1;

template <class T> constexpr const char* dtype_tag();
template <> constexpr const char* dtype_tag<float>() { return "f32"; }
template <> constexpr const char* dtype_tag<double>() { return "f64"; }

template <class U>
void put_le(std::string& out, U v) {
  static_assert(std::is_integral_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <class T>
void put_data(std::string& out, const Tensor<T>& t) {
  const std::size_t n = static_cast<std::size_t>(t.numel()) * sizeof(T);
  const std::size_t start = out.size();
  out.resize(start + n);
  std::memcpy(out.data() + start, t.data(), n);
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = start; i < out.size(); i += sizeof(T)) std::reverse(out.begin() + i, out.begin() + i + sizeof(T));
  }
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + p.string());
}

std::uint64_t get_le(const std::string& buf, std::size_t& pos, std::size_t width) {
  if (pos + width > buf.size()) throw IoError("tensor archive truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
  pos += width;
  return v;
}

}  // namespace

nlohmann::json read_json_file(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const nlohmann::json& j) { write_file(path, j.dump(2) + "\n"); }

template <class T>
void write_tensor_archive(const fs::path& dir, const std::string& stem, const std::vector<NamedTensor<T>>& tensors) {
  fs::create_directories(dir);
  std::string bin;
  nlohmann::json records = nlohmann::json::array();
  for (const auto& [path, t] : tensors) {
    const std::size_t offset = bin.size();
    put_le<std::uint32_t>(bin, static_cast<std::uint32_t>(path.size()));
    bin += path;
    const std::string tag = dtype_tag<T>();
    put_le<std::uint32_t>(bin, static_cast<std::uint32_t>(tag.size()));
    bin += tag;
    put_le<std::uint32_t>(bin, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_le<std::uint64_t>(bin, static_cast<std::uint64_t>(d));
    const std::size_t data_offset = bin.size();
    put_data(bin, t);
    records.push_back({{"path", path},
                       {"dtype", tag},
                       {"rank", t.rank()},
                       {"dims", t.shape()},
                       {"offset", offset},
                       {"data_offset", data_offset},
                       {"nbytes", bin.size() - data_offset}});
  }
  write_file(dir / (stem + ".bin"), bin);
  write_json_file(dir / (stem + ".index.json"),
                  {{"format", kArchiveFormat}, {"version", kArchiveVersion}, {"records", records}});
}

template <class T>
std::vector<NamedTensor<T>> read_tensor_archive(const fs::path& dir, const std::string& stem) {
  const auto index = read_json_file(dir / (stem + ".index.json"));
  if (index.value("format", "") != kArchiveFormat || index.value("version", 0) != kArchiveVersion) {
    throw IoError("unsupported tensor archive in " + dir.string());
  }
  const std::string bin = read_file(dir / (stem + ".bin"));
  std::vector<NamedTensor<T>> out;
  for (const auto& rec : index.at("records")) {
    std::size_t pos = rec.at("offset").get<std::size_t>();
    const auto path_len = get_le(bin, pos, 4);
    if (pos + path_len > bin.size()) throw IoError("tensor archive truncated");
    std::string path = bin.substr(pos, path_len);
    pos += path_len;
    const auto tag_len = get_le(bin, pos, 4);
    if (pos + tag_len > bin.size()) throw IoError("tensor archive truncated");
    const std::string tag = bin.substr(pos, tag_len);
    pos += tag_len;
    if (tag != dtype_tag<T>()) throw IoError("record '" + path + "' has dtype " + tag + ", expected " + dtype_tag<T>());
    if (path != rec.at("path").get<std::string>()) throw IoError("index/record path mismatch at '" + path + "'");
    const auto rank = get_le(bin, pos, 4);
    Shape shape;
    for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::int64_t>(get_le(bin, pos, 8)));
    Tensor<T> t(shape);
    const std::size_t n = static_cast<std::size_t>(t.numel()) * sizeof(T);
    if (pos + n > bin.size()) throw IoError("tensor archive truncated in '" + path + "'");
    std::memcpy(t.data(), bin.data() + pos, n);
    if constexpr (std::endian::native == std::endian::big) {
      auto* bytes = reinterpret_cast<char*>(t.data());
      for (std::size_t i = 0; i < n; i += sizeof(T)) std::reverse(bytes + i, bytes + i + sizeof(T));
    }
    out.emplace_back(std::move(path), std::move(t));
  }
  return out;
}

void save_checkpoint(const UNetModel& model, const fs::path& dir, const nlohmann::json& meta) {
  fs::create_directories(dir);
  write_json_file(dir / "config.json", to_json(model.config()));
  std::vector<NamedTensor<float>> tensors;
  for (const auto& [path, v] : model.parameters()) tensors.emplace_back(path, v.value());
  write_tensor_archive(dir, "tensors", tensors);
  nlohmann::json m = meta.is_object() ? meta : nlohmann::json::object();
  m["provenance"] = model.provenance;
  write_json_file(dir / "meta.json", m);
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("checkpoint directory not found: " + dir.string());
  UNetConfig config = config_from_json(read_json_file(dir / "config.json"));
  std::map<std::string, Tensor<float>> tensors;
  for (auto& [path, t] : read_tensor_archive<float>(dir, "tensors")) tensors.emplace(std::move(path), std::move(t));
  UNetModel model(std::move(config), std::move(tensors));
  nlohmann::json meta = fs::exists(dir / "meta.json") ? read_json_file(dir / "meta.json") : nlohmann::json::object();
  if (meta.contains("provenance")) model.provenance = meta.at("provenance").get<std::map<std::string, std::string>>();
  return {std::move(model), std::move(meta)};
}

template void write_tensor_archive(const fs::path&, const std::string&, const std::vector<NamedTensor<float>>&);
template void write_tensor_archive(const fs::path&, const std::string&, const std::vector<NamedTensor<double>>&);
template std::vector<NamedTensor<float>> read_tensor_archive(const fs::path&, const std::string&);
template std::vector<NamedTensor<double>> read_tensor_archive(const fs::path&, const std::string&);

}  // namespace slimunet
