#include "fedrco/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>

#include "fedrco/error.hpp"

namespace fedrco::data {
namespace {

std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& ds) {
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  }
  return by_class;
}

void require_clients(std::size_t num_clients) {
  if (num_clients == 0) {
    throw Error(ErrorCode::InvalidArgument, "partition: need at least one client");
  }
}

Matrix class_means(const SyntheticSpec& spec, Rng& rng) {
  const auto d = static_cast<Eigen::Index>(spec.dim);
  const auto k = static_cast<Eigen::Index>(spec.classes);
  const double radius = spec.separation / std::sqrt(2.0);
  Matrix means = Matrix::Zero(d, k);
  if (spec.classes <= spec.dim) {
    // Scaled orthonormal axes: every pair of means is exactly `separation` apart.
    for (Eigen::Index c = 0; c < k; ++c) means(c, c) = radius;
    return means;
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index c = 0; c < k; ++c) {
    Vector v(d);
    for (Eigen::Index i = 0; i < d; ++i) v(i) = normal(rng);
    means.col(c) = radius * v.normalized();
  }
  return means;
}

Dataset sample_blobs(const Matrix& means, std::size_t n, Rng& rng) {
  const auto classes = static_cast<std::size_t>(means.cols());
  Dataset ds;
  ds.shape = Shape3{static_cast<std::size_t>(means.rows()), 1, 1};
  ds.num_classes = classes;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(i % classes);
  std::shuffle(ds.labels.begin(), ds.labels.end(), rng);

  std::normal_distribution<double> normal(0.0, 1.0);
  ds.features.resize(means.rows(), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    for (Eigen::Index r = 0; r < means.rows(); ++r) {
      ds.features(r, col) = means(r, ds.labels[i]) + normal(rng);
    }
  }
  return ds;
}

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char bytes[4] = {
      static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
      static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.shape = shape;
  out.num_classes = num_classes;
  out.features.resize(features.rows(), static_cast<Eigen::Index>(indices.size()));
  out.labels.reserve(indices.size());
  for (std::size_t j = 0; j < indices.size(); ++j) {
    if (indices[j] >= size()) {
      throw Error(ErrorCode::InvalidArgument, "Dataset::subset: index out of range");
    }
    out.features.col(static_cast<Eigen::Index>(j)) =
        features.col(static_cast<Eigen::Index>(indices[j]));
    out.labels.push_back(labels[indices[j]]);
  }
  return out;
}

void Dataset::validate() const {
  if (features.cols() != static_cast<Eigen::Index>(labels.size()) ||
      features.rows() != static_cast<Eigen::Index>(shape.size())) {
    throw Error(ErrorCode::FormatError, "dataset: feature matrix does not match labels/shape");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw Error(ErrorCode::FormatError, "dataset: label out of range");
    }
  }
  if (!features.allFinite()) {
    throw Error(ErrorCode::FormatError, "dataset: non-finite feature");
  }
}

std::size_t Partition::total() const {
  std::size_t n = 0;
  for (const auto& c : clients) n += c.size();
  return n;
}

Partition dirichlet_partition(const Dataset& ds, std::size_t num_clients,
                              double alpha, Rng& rng, bool repair) {
  require_clients(num_clients);
  if (!(alpha > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "dirichlet_partition: alpha must be positive");
  }
  auto by_class = indices_by_class(ds);
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    if (by_class[k].empty()) {
      throw Error(ErrorCode::TooFewSamples,
                  "dirichlet_partition: class " + std::to_string(k) + " has no samples");
    }
  }
  if (repair && ds.size() < num_clients) {
    throw Error(ErrorCode::TooFewSamples, "dirichlet_partition: fewer samples than clients");
  }

  Partition part;
  part.clients.resize(num_clients);
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> share(num_clients);
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    double sum = 0.0;
    for (auto& s : share) {
      s = gamma(rng);
      sum += s;
    }
    if (!(sum > 0.0)) {
      // Every gamma draw underflowed; give the whole class to one client.
      std::fill(share.begin(), share.end(), 0.0);
      share[std::uniform_int_distribution<std::size_t>(0, num_clients - 1)(rng)] = 1.0;
      sum = 1.0;
    }
    const double n = static_cast<double>(members.size());
    double cumulative = 0.0;
    std::size_t begin = 0;
    for (std::size_t c = 0; c < num_clients; ++c) {
      cumulative += share[c] / sum;
      std::size_t end = (c + 1 == num_clients)
                            ? members.size()
                            : std::min(members.size(),
                                       static_cast<std::size_t>(std::floor(cumulative * n)));
      end = std::max(end, begin);
      part.clients[c].insert(part.clients[c].end(), members.begin() + begin,
                             members.begin() + end);
      begin = end;
    }
  }

  if (repair) {
    for (std::size_t c = 0; c < num_clients; ++c) {
      if (!part.clients[c].empty()) continue;
      auto largest = std::max_element(
          part.clients.begin(), part.clients.end(),
          [](const auto& a, const auto& b) { return a.size() < b.size(); });
      part.clients[c].push_back(largest->back());
      largest->pop_back();
    }
  }
  for (auto& c : part.clients) std::sort(c.begin(), c.end());
  return part;
}

Partition pathological_partition(const Dataset& ds, std::size_t num_clients,
                                 std::size_t labels_per_client, Rng& rng) {
  require_clients(num_clients);
  const std::size_t num_classes = ds.num_classes;
  if (labels_per_client == 0 || labels_per_client > num_classes ||
      num_clients * labels_per_client < num_classes) {
    throw Error(ErrorCode::InfeasibleAssignment,
                "pathological_partition: cannot give " + std::to_string(num_clients) +
                    " clients " + std::to_string(labels_per_client) +
                    " distinct labels while covering " + std::to_string(num_classes) +
                    " classes");
  }

  // Label slots: every class appears floor or ceil of slots/num_classes times.
  const std::size_t slots = num_clients * labels_per_client;
  std::vector<std::size_t> class_order(num_classes);
  std::iota(class_order.begin(), class_order.end(), 0);
  std::shuffle(class_order.begin(), class_order.end(), rng);
  std::vector<std::size_t> remaining(num_classes, slots / num_classes);
  for (std::size_t i = 0; i < slots % num_classes; ++i) ++remaining[class_order[i]];

  // Greedy largest-remaining-first keeps max(remaining) <= clients left, so
  // every client can always pick distinct labels.
  std::vector<std::vector<std::size_t>> holders(num_classes);
  std::vector<std::size_t> candidates(num_classes);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> tie_break(num_classes);
  for (std::size_t c = 0; c < num_clients; ++c) {
    for (auto& t : tie_break) t = unit(rng);
    std::iota(candidates.begin(), candidates.end(), 0);
    std::sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
      if (remaining[a] != remaining[b]) return remaining[a] > remaining[b];
      return tie_break[a] < tie_break[b];
    });
    for (std::size_t j = 0; j < labels_per_client; ++j) {
      --remaining[candidates[j]];
      holders[candidates[j]].push_back(c);
    }
  }

  Partition part;
  part.clients.resize(num_clients);
  auto by_class = indices_by_class(ds);
  for (std::size_t k = 0; k < num_classes; ++k) {
    auto& members = by_class[k];
    std::shuffle(members.begin(), members.end(), rng);
    const std::size_t h = holders[k].size();
    std::size_t begin = 0;
    for (std::size_t i = 0; i < h; ++i) {
      const std::size_t take = members.size() / h + (i < members.size() % h ? 1 : 0);
      auto& dst = part.clients[holders[k][i]];
      dst.insert(dst.end(), members.begin() + begin, members.begin() + begin + take);
      begin += take;
    }
  }
  for (std::size_t c = 0; c < num_clients; ++c) {
    if (part.clients[c].empty()) {
      throw Error(ErrorCode::TooFewSamples,
                  "pathological_partition: client " + std::to_string(c) +
                      " received no samples");
    }
    std::sort(part.clients[c].begin(), part.clients[c].end());
  }
  return part;
}

Partition iid_partition(const Dataset& ds, std::size_t num_clients, Rng& rng) {
  require_clients(num_clients);
  if (ds.size() < num_clients) {
    throw Error(ErrorCode::TooFewSamples, "iid_partition: fewer samples than clients");
  }
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  Partition part;
  part.clients.resize(num_clients);
  for (std::size_t i = 0; i < order.size(); ++i) {
    part.clients[i % num_clients].push_back(order[i]);
  }
  for (auto& c : part.clients) std::sort(c.begin(), c.end());
  return part;
}

Dataset make_synthetic_classification(const SyntheticSpec& spec, Rng& rng) {
  if (spec.dim == 0 || spec.classes == 0 || spec.samples < spec.classes) {
    throw Error(ErrorCode::InvalidArgument,
                "make_synthetic_classification: need dim > 0 and samples >= classes");
  }
  const Matrix means = class_means(spec, rng);
  return sample_blobs(means, spec.samples, rng);
}

SplitDataset make_synthetic_split(const SyntheticSpec& spec, std::size_t test_samples,
                                  std::uint64_t seed) {
  if (spec.dim == 0 || spec.classes == 0 || spec.samples < spec.classes ||
      test_samples < spec.classes) {
    throw Error(ErrorCode::InvalidArgument,
                "make_synthetic_split: need dim > 0 and at least one sample per class");
  }
  Rng mean_rng = make_stream(seed, 0, 0, StreamTag::DatasetMeans);
  const Matrix means = class_means(spec, mean_rng);
  Rng train_rng = make_stream(seed, 0, 0, StreamTag::DatasetSamples);
  Rng test_rng = make_stream(seed, 0, 1, StreamTag::DatasetSamples);
  return SplitDataset{sample_blobs(means, spec.samples, train_rng),
                      sample_blobs(means, test_samples, test_rng)};
}

void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  ds.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  out.write(kDatasetMagic, 4);
  put_u32(out, kDatasetVersion);
  put_u32(out, static_cast<std::uint32_t>(ds.size()));
  put_u32(out, static_cast<std::uint32_t>(ds.shape.channels));
  put_u32(out, static_cast<std::uint32_t>(ds.shape.height));
  put_u32(out, static_cast<std::uint32_t>(ds.shape.width));
  put_u32(out, static_cast<std::uint32_t>(ds.num_classes));
  for (Eigen::Index j = 0; j < ds.features.cols(); ++j) {
    for (Eigen::Index i = 0; i < ds.features.rows(); ++i) {
      put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(ds.features(i, j))));
    }
  }
  for (int y : ds.labels) put_u32(out, static_cast<std::uint32_t>(y));
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                         std::istreambuf_iterator<char>());
  constexpr std::size_t kHeader = 28;
  if (bytes.size() < kHeader || std::memcmp(bytes.data(), kDatasetMagic, 4) != 0) {
    throw Error(ErrorCode::FormatError, path.string() + ": bad magic");
  }
  if (get_u32(&bytes[4]) != kDatasetVersion) {
    throw Error(ErrorCode::FormatError, path.string() + ": unsupported version");
  }
  const std::size_t n = get_u32(&bytes[8]);
  Dataset ds;
  ds.shape = Shape3{get_u32(&bytes[12]), get_u32(&bytes[16]), get_u32(&bytes[20])};
  ds.num_classes = get_u32(&bytes[24]);
  const std::size_t dim = ds.shape.size();
  if (dim == 0 || ds.num_classes == 0 || bytes.size() != kHeader + 4 * n * dim + 4 * n) {
    throw Error(ErrorCode::FormatError, path.string() + ": size does not match header");
  }
  ds.features.resize(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(n));
  const unsigned char* p = bytes.data() + kHeader;
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < dim; ++i, p += 4) {
      ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          std::bit_cast<float>(get_u32(p));
    }
  }
  ds.labels.resize(n);
  for (std::size_t j = 0; j < n; ++j, p += 4) {
    const std::uint32_t y = get_u32(p);
    if (y >= ds.num_classes) {
      throw Error(ErrorCode::FormatError, path.string() + ": label out of range");
    }
    ds.labels[j] = static_cast<int>(y);
  }
  ds.validate();
  return ds;
}

}  // namespace fedrco::data
