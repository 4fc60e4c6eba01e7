#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "slimunet/backbone.hpp"

namespace slimunet {

/// One named tensor inside a flat archive.
template <class T>
using NamedTensor = std::pair<std::string, Tensor<T>>;

/// Writes `<stem>.bin` (self-describing records) and `<stem>.index.json`
/// (record list with byte offsets). Records are stored in the given order.
template <class T>
void write_tensor_archive(const std::filesystem::path& dir, const std::string& stem,
                          const std::vector<NamedTensor<T>>& tensors);

/// Reads every record listed in the index; dtype must match T.
template <class T>
std::vector<NamedTensor<T>> read_tensor_archive(const std::filesystem::path& dir, const std::string& stem);

struct LoadedCheckpoint {
  UNetModel model;
  nlohmann::json meta;
};

/// Checkpoint directory layout: config.json, tensors.bin, tensors.index.json
/// and meta.json (provenance plus caller-supplied metadata).
void save_checkpoint(const UNetModel& model, const std::filesystem::path& dir, const nlohmann::json& meta = {});
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace slimunet
