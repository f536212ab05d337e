// Copyright 2026 The FLoPS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FLOPS_PARTITION_HPP
#define FLOPS_PARTITION_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "flops/dataset.hpp"
#include "flops/log.hpp"
#include "flops/rng.hpp"

namespace flops {

/// One client's local data. `indices` are the row numbers in the source dataset.
struct ClientShard {
  int client_id = 0;
  Dataset data;
  std::vector<std::size_t> indices;

  ClientShard() = default;
  ClientShard(int id, Dataset d, std::vector<std::size_t> idx)
      : client_id(id), data(std::move(d)), indices(std::move(idx)) {
    if (data.rows() < 1) throw std::invalid_argument("client shard " + std::to_string(id) + " is empty");
  }

  Eigen::Index n() const { return data.rows(); }
};

enum class PartitionMode { Iid, QuantitySkew, LabelSkew, ClusterSplit };

inline PartitionMode partition_mode_from_string(const std::string& s) {
  if (s == "iid") return PartitionMode::Iid;
  if (s == "quantity_skew") return PartitionMode::QuantitySkew;
  if (s == "label_skew") return PartitionMode::LabelSkew;
  if (s == "cluster_split") return PartitionMode::ClusterSplit;
  throw std::invalid_argument("unknown partition mode '" + s + "'");
}

inline std::string to_string(PartitionMode m) {
  switch (m) {
    case PartitionMode::Iid: return "iid";
    case PartitionMode::QuantitySkew: return "quantity_skew";
    case PartitionMode::LabelSkew: return "label_skew";
    case PartitionMode::ClusterSplit: return "cluster_split";
  }
  return "?";
}

struct HeterogeneityConfig {
  PartitionMode mode = PartitionMode::QuantitySkew;
  double alpha_iid = 1000.0;
  /// Attribute skew; no shift is applied when unset.
  std::optional<double> sigma_ms;
  double participation = 0.1;
  int clusters = 10;
  int parts_per_cluster = 20;

  void validate() const {
    if (!(alpha_iid > 0.0)) throw std::invalid_argument("alpha_iid must be positive");
    if (sigma_ms && *sigma_ms < 0.0) throw std::invalid_argument("sigma_ms must be non-negative");
    if (!(participation > 0.0 && participation <= 1.0)) throw std::invalid_argument("participation must lie in (0, 1]");
  }
};

using Assignment = std::vector<std::vector<std::size_t>>;

inline std::vector<ClientShard> make_shards(const Dataset& data, const Assignment& assignment) {
  std::vector<ClientShard> shards;
  shards.reserve(assignment.size());
  for (std::size_t c = 0; c < assignment.size(); ++c)
    shards.emplace_back(static_cast<int>(c), data.subset(assignment[c]), assignment[c]);
  return shards;
}

namespace partition_detail {

/// Integer counts summing to `total`, proportional to `p` (largest remainder).
inline std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& p) {
  std::vector<std::size_t> counts(p.size());
  std::vector<std::pair<double, std::size_t>> rem(p.size());
  std::size_t used = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double exact = p[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    used += counts[i];
    rem[i] = {exact - std::floor(exact), i};
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < total; ++k, ++used) ++counts[rem[k % rem.size()].second];
  while (used > total) {  // only reachable through rounding noise
    auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --used;
  }
  return counts;
}

inline std::vector<std::size_t> shuffled_range(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  rng.shuffle(idx);
  return idx;
}

/// Splits `members` into `parts` consecutive chunks whose sizes differ by at most one.
inline Assignment even_chunks(const std::vector<std::size_t>& members, std::size_t parts) {
  Assignment out(parts);
  const std::size_t base = members.size() / parts, extra = members.size() % parts;
  std::size_t pos = 0;
  for (std::size_t k = 0; k < parts; ++k) {
    const std::size_t len = base + (k < extra ? 1 : 0);
    out[k].assign(members.begin() + static_cast<std::ptrdiff_t>(pos), members.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  return out;
}

}  // namespace partition_detail

inline Assignment iid_assignment(std::size_t n, int clients, Rng& rng) {
  if (clients < 1) throw std::invalid_argument("need at least one client");
  if (n < static_cast<std::size_t>(clients)) throw std::invalid_argument("dataset smaller than client count");
  return partition_detail::even_chunks(partition_detail::shuffled_range(n, rng), static_cast<std::size_t>(clients));
}

/// Client sizes follow Dir(alpha * 1_C); every client keeps at least one sample.
inline Assignment dirichlet_quantity_assignment(std::size_t n, int clients, double alpha_iid, Rng& rng) {
  if (clients < 1) throw std::invalid_argument("need at least one client");
  if (!(alpha_iid > 0.0)) throw std::invalid_argument("alpha_iid must be positive");
  const auto C = static_cast<std::size_t>(clients);
  if (n < C) throw std::invalid_argument("dataset smaller than client count");
  const auto order = partition_detail::shuffled_range(n, rng);
  const auto props = rng.dirichlet(C, alpha_iid);
  auto counts = partition_detail::apportion(n - C, props);
  Assignment out(C);
  std::size_t pos = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t len = counts[c] + 1;
    out[c].assign(order.begin() + static_cast<std::ptrdiff_t>(pos), order.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  return out;
}

inline std::vector<ClientShard> dirichlet_quantity_split(const Dataset& data, int clients, double alpha_iid, Rng& rng) {
  return make_shards(data, dirichlet_quantity_assignment(static_cast<std::size_t>(data.rows()), clients, alpha_iid, rng));
}

/// Per-class Dirichlet allocation over clients. Clients left empty receive one
/// sample from the currently largest shard.
inline Assignment dirichlet_label_assignment(const std::vector<int>& labels, int clients, double alpha_iid, Rng& rng) {
  if (clients < 1) throw std::invalid_argument("need at least one client");
  if (!(alpha_iid > 0.0)) throw std::invalid_argument("alpha_iid must be positive");
  const auto C = static_cast<std::size_t>(clients);
  if (labels.size() < C) throw std::invalid_argument("dataset smaller than client count");
  int classes = 0;
  for (int y : labels) {
    if (y < 0) throw std::invalid_argument("label split needs non-negative class ids");
    classes = std::max(classes, y + 1);
  }
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  Assignment out(C);
  for (auto& members : by_class) {
    rng.shuffle(members);
    const auto counts = partition_detail::apportion(members.size(), rng.dirichlet(C, alpha_iid));
    std::size_t pos = 0;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t k = 0; k < counts[c]; ++k) out[c].push_back(members[pos++]);
  }
  for (auto& shard : out) {
    if (!shard.empty()) continue;
    auto donor = std::max_element(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.size() < b.size(); });
    shard.push_back(donor->back());
    donor->pop_back();
  }
  for (auto& shard : out) std::sort(shard.begin(), shard.end());
  return out;
}

inline std::vector<int> class_labels(const Dataset& data) {
  if (data.Y.cols() != 1) throw std::invalid_argument("label split needs a single class-id column");
  std::vector<int> y(static_cast<std::size_t>(data.rows()));
  for (Eigen::Index i = 0; i < data.rows(); ++i) y[static_cast<std::size_t>(i)] = static_cast<int>(data.Y(i, 0));
  return y;
}

inline std::vector<ClientShard> dirichlet_label_split(const Dataset& data, int clients, double alpha_iid, Rng& rng) {
  return make_shards(data, dirichlet_label_assignment(class_labels(data), clients, alpha_iid, rng));
}

/// Attribute skew: client c draws mu_c ~ N(0, sigma_ms^2) and every feature
/// value gets an added N(mu_c, 1) draw. Sparse shards are left untouched.
inline std::vector<ClientShard> affine_shift(std::vector<ClientShard> shards, double sigma_ms, Rng& rng) {
  bool warned = false;
  for (auto& shard : shards) {
    Rng local = rng.fork(static_cast<std::uint64_t>(shard.client_id));
    if (shard.data.is_sparse()) {
      if (!warned) log::warn("affine shift skipped for sparse features");
      warned = true;
      continue;
    }
    const double mu = local.normal(0.0, sigma_ms);
    auto& X = shard.data.dense();
    for (Eigen::Index i = 0; i < X.rows(); ++i)
      for (Eigen::Index j = 0; j < X.cols(); ++j) X(i, j) += local.normal(mu, 1.0);
  }
  return shards;
}

struct KMeansResult {
  std::vector<int> assignment;
  Eigen::MatrixXd centroids;
  int iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding on L2-normalized rows.
inline KMeansResult kmeans(const SparseRows& rows, int k, Rng& rng, int max_iter = 100, double tol = 1e-4) {
  const auto n = rows.rows(), dim = rows.cols();
  if (k < 1 || k > n) throw std::invalid_argument("k-means needs 1 <= k <= rows");
  SparseRows X = rows;
  for (Eigen::Index i = 0; i < n; ++i) {
    double norm = 0.0;
    for (SparseRows::InnerIterator it(X, i); it; ++it) norm += it.value() * it.value();
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (SparseRows::InnerIterator it(X, i); it; ++it) it.valueRef() /= norm;
  }
  Eigen::VectorXd row_sq(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    row_sq[i] = 0.0;
    for (SparseRows::InnerIterator it(X, i); it; ++it) row_sq[i] += it.value() * it.value();
  }

  Eigen::MatrixXd centroids(k, dim);
  auto dist_to = [&](const Eigen::MatrixXd& cents, Eigen::Index c, Eigen::Index i) {
    double dot = 0.0;
    for (SparseRows::InnerIterator it(X, i); it; ++it) dot += it.value() * cents(c, it.col());
    return std::max(0.0, row_sq[i] - 2.0 * dot + cents.row(c).squaredNorm());
  };
  auto set_row = [&](Eigen::Index c, Eigen::Index i) {
    centroids.row(c).setZero();
    for (SparseRows::InnerIterator it(X, i); it; ++it) centroids(c, it.col()) = it.value();
  };

  set_row(0, static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n))));
  Eigen::VectorXd best(n);
  for (Eigen::Index i = 0; i < n; ++i) best[i] = dist_to(centroids, 0, i);
  for (int c = 1; c < k; ++c) {
    const double total = best.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double target = rng.uniform() * total, acc = 0.0;
      for (pick = 0; pick < n - 1; ++pick) {
        acc += best[pick];
        if (acc >= target) break;
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n)));
    }
    set_row(c, pick);
    for (Eigen::Index i = 0; i < n; ++i) best[i] = std::min(best[i], dist_to(centroids, c, i));
  }

  KMeansResult res{std::vector<int>(static_cast<std::size_t>(n), 0), centroids, 0};
  for (int iter = 1; iter <= max_iter; ++iter) {
    res.iterations = iter;
    for (Eigen::Index i = 0; i < n; ++i) {
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = dist_to(centroids, c, i);
        if (d < bd) {
          bd = d;
          res.assignment[static_cast<std::size_t>(i)] = c;
        }
      }
    }
    Eigen::MatrixXd next = Eigen::MatrixXd::Zero(k, dim);
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int c = res.assignment[static_cast<std::size_t>(i)];
      ++counts[static_cast<std::size_t>(c)];
      for (SparseRows::InnerIterator it(X, i); it; ++it) next(c, it.col()) += it.value();
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        next.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
      } else {
        // reseed an empty cluster at the point farthest from its centroid
        Eigen::Index far = 0;
        double fd = -1.0;
        for (Eigen::Index i = 0; i < n; ++i) {
          const double d = dist_to(centroids, res.assignment[static_cast<std::size_t>(i)], i);
          if (d > fd) {
            fd = d;
            far = i;
          }
        }
        next.row(c).setZero();
        for (SparseRows::InnerIterator it(X, far); it; ++it) next(c, it.col()) = it.value();
      }
    }
    const double shift = (next - centroids).rowwise().norm().maxCoeff();
    centroids = std::move(next);
    if (shift < tol) break;
  }
  res.centroids = centroids;
  return res;
}

/// k-means clusters, each cut into `parts` even pieces; every client receives two
/// (cluster, part) pairs, from distinct clusters whenever possible.
inline Assignment cluster_assignment(const std::vector<int>& cluster_of, int k, int parts, int clients, Rng& rng) {
  if (k < 1 || parts < 1 || clients < 1) throw std::invalid_argument("cluster split needs positive k, parts and clients");
  if (k * parts != 2 * clients) throw std::invalid_argument("cluster split needs clusters * parts == 2 * clients");
  struct Group {
    std::vector<std::size_t> members;
    int parts = 0;
  };
  std::vector<Group> groups(static_cast<std::size_t>(k));
  for (auto& g : groups) g.parts = parts;
  for (std::size_t i = 0; i < cluster_of.size(); ++i) groups.at(static_cast<std::size_t>(cluster_of[i])).members.push_back(i);

  auto too_small = [](const Group& g) { return g.members.size() < static_cast<std::size_t>(g.parts); };
  while (std::any_of(groups.begin(), groups.end(), too_small)) {
    if (groups.size() == 1) throw std::invalid_argument("dataset too small for the requested cluster split");
    std::sort(groups.begin(), groups.end(), [](const Group& a, const Group& b) { return a.members.size() < b.members.size(); });
    log::warn("cluster with " + std::to_string(groups[0].members.size()) + " rows merged into the next smallest cluster");
    groups[1].members.insert(groups[1].members.end(), groups[0].members.begin(), groups[0].members.end());
    groups[1].parts += groups[0].parts;
    groups.erase(groups.begin());
  }

  struct Piece {
    std::size_t cluster;
    std::vector<std::size_t> rows;
  };
  std::vector<Piece> pieces;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto members = groups[g].members;
    std::sort(members.begin(), members.end());
    rng.shuffle(members);
    for (auto& chunk : partition_detail::even_chunks(members, static_cast<std::size_t>(groups[g].parts)))
      pieces.push_back({g, std::move(chunk)});
  }
  rng.shuffle(pieces);

  Assignment out(static_cast<std::size_t>(clients));
  for (auto& shard : out) {
    Piece first = std::move(pieces.back());
    pieces.pop_back();
    auto other = std::find_if(pieces.rbegin(), pieces.rend(), [&](const Piece& p) { return p.cluster != first.cluster; });
    auto pick = other != pieces.rend() ? std::prev(other.base()) : std::prev(pieces.end());
    shard = first.rows;
    shard.insert(shard.end(), pick->rows.begin(), pick->rows.end());
    std::sort(shard.begin(), shard.end());
    pieces.erase(pick);
  }
  return out;
}

inline std::vector<ClientShard> cluster_split_rcv1(const Dataset& data, int k, int parts, int clients, Rng& rng) {
  const SparseRows rows = data.is_sparse() ? data.sparse() : SparseRows(data.dense().sparseView());
  Rng km_rng = rng.fork(1), split_rng = rng.fork(2);
  const auto km = kmeans(rows, k, km_rng);
  return make_shards(data, cluster_assignment(km.assignment, k, parts, clients, split_rng));
}

/// K = floor(gamma_c * C) distinct client ids, ascending.
inline std::vector<int> sample_participants(int clients, double gamma_c, Rng& rng) {
  const auto K = static_cast<std::size_t>(std::floor(gamma_c * clients + 1e-9));
  if (clients < 1 || K < 1) throw std::invalid_argument("participation selects no clients");
  if (K > static_cast<std::size_t>(clients)) throw std::invalid_argument("participation fraction exceeds 1");
  std::vector<int> ids;
  for (auto i : rng.sample_without_replacement(static_cast<std::size_t>(clients), K)) ids.push_back(static_cast<int>(i));
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace flops

#endif  // FLOPS_PARTITION_HPP
