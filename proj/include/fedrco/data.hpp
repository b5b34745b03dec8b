#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "fedrco/numerics.hpp"
#include "fedrco/rng.hpp"
#include "fedrco/tensor.hpp"

namespace fedrco::data {

// Labelled samples; features hold one sample per column in (C, H, W) order.
struct Dataset {
  Shape3 shape;
  Matrix features;
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  Dataset subset(std::span<const std::size_t> indices) const;
  // Throws FormatError when labels or features break the invariants.
  void validate() const;
};

// Per-client index lists into a parent dataset.
struct Partition {
  std::vector<std::vector<std::size_t>> clients;

  std::size_t num_clients() const { return clients.size(); }
  std::size_t total() const;
};

/// Label-skew split: for every class, a Dir(alpha) draw over clients decides
/// the share of that class each client receives. With repair enabled, any
/// client left empty takes one sample from the currently largest client.
Partition dirichlet_partition(const Dataset& ds, std::size_t num_clients,
                              double alpha, Rng& rng, bool repair = true);

/// Each client holds exactly labels_per_client distinct labels; a label's
/// samples are split evenly among the clients holding it.
Partition pathological_partition(const Dataset& ds, std::size_t num_clients,
                                 std::size_t labels_per_client, Rng& rng);

Partition iid_partition(const Dataset& ds, std::size_t num_clients, Rng& rng);

// Gaussian blobs (unit covariance) whose class means are pairwise
// `separation` apart. Labels are balanced within one sample.
struct SyntheticSpec {
  std::size_t dim = 32;
  std::size_t classes = 10;
  std::size_t samples = 4000;
  double separation = 3.0;
};

Dataset make_synthetic_classification(const SyntheticSpec& spec, Rng& rng);

// Train/test pair drawn from one set of class means.
struct SplitDataset {
  Dataset train;
  Dataset test;
};
SplitDataset make_synthetic_split(const SyntheticSpec& spec,
                                  std::size_t test_samples, std::uint64_t seed);

// Binary dataset file; the byte layout is documented in docs/dataset_format.md.
inline constexpr char kDatasetMagic[4] = {'F', 'R', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;

void write_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace fedrco::data
