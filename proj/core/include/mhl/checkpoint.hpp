#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace mhl {

/// Versioned binary container: magic, JSON header, then named float64
/// little-endian blobs in header order.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, Eigen::VectorXd>> blobs;

  const Eigen::VectorXd& blob(const std::string& name) const;  // data error if absent
  bool has_blob(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ck);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace mhl
