#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fedrco/data.hpp"
#include "fedrco/federation.hpp"
#include "json.hpp"

namespace fedrco::config {

enum class DatasetKind { Synthetic, File };
enum class PartitionKind { Dirichlet, Pathological, Iid };
enum class ModelKind { Dense, Cnn };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::Synthetic;
  data::SyntheticSpec synthetic{32, 10, 4000, 5.0};
  std::size_t test_samples = 1000;
  std::string train_path;
  std::string test_path;
};

struct PartitionConfig {
  PartitionKind kind = PartitionKind::Dirichlet;
  double alpha = 0.1;
  std::size_t labels_per_client = 2;
};

struct ModelConfig {
  ModelKind kind = ModelKind::Dense;
  std::vector<std::size_t> hidden{32};
  std::vector<std::size_t> conv_channels{16, 16};
  std::size_t kernel = 3;
};

struct ExperimentConfig {
  federation::FederationConfig federation;
  std::size_t rounds = 60;
  DatasetConfig dataset;
  PartitionConfig partition;
  ModelConfig model;

  federation::Method method() const { return federation.local.method; }
  std::uint64_t seed() const { return federation.seed; }
};

/// Parses a JSON document. Missing keys keep their defaults; unknown keys,
/// wrong types and out-of-range values throw ConfigInvalid with the dotted
/// path of the offending field.
ExperimentConfig from_json(const nlohmann::json& doc);

// Fully resolved configuration, every field present.
nlohmann::json to_json(const ExperimentConfig& cfg);

// Throws IoFailure, ConfigInvalid.
ExperimentConfig load(const std::filesystem::path& path);

/// Sets a dotted key (e.g. "kfac.t_inv") from a string, parsing it as JSON
/// when possible and as a string otherwise. The short form "t_inv" and any
/// other unique leaf name are accepted. Throws ConfigInvalid.
void set_value(nlohmann::json& doc, const std::string& key, const std::string& value);

}  // namespace fedrco::config
