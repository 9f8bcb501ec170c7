#pragma once

// Random 8:1:1 and cluster-aware train/dev/test splitting.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "protgo/error.hpp"
#include "protgo/ingest.hpp"
#include "protgo/rng.hpp"

namespace protgo {

enum class SplitKind { Random, Clustered };

inline std::string_view split_kind_name(SplitKind k) { return k == SplitKind::Random ? "random" : "clustered"; }

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> dev;
  std::vector<std::string> test;
  std::uint64_t seed = 0;
  SplitKind kind = SplitKind::Random;
  std::optional<double> identity_threshold;  // clustered only
  std::optional<std::size_t> kmer;           // clustered only

  std::size_t total() const { return train.size() + dev.size() + test.size(); }
  std::array<const std::vector<std::string>*, 3> parts() const { return {&train, &dev, &test}; }
};

inline DatasetSplit random_split(std::vector<std::string> accessions, std::uint64_t seed) {
  const std::size_t n = accessions.size();
  if (n < 10) throw Error("random split needs at least 10 records, got " + std::to_string(n));
  Rng rng(seed);
  rng.shuffle(accessions);
  const std::size_t tenth = n / 10;
  DatasetSplit split;
  split.seed = seed;
  split.kind = SplitKind::Random;
  const auto dev_begin = accessions.begin() + static_cast<std::ptrdiff_t>(n - 2 * tenth);
  const auto test_begin = accessions.begin() + static_cast<std::ptrdiff_t>(n - tenth);
  split.train.assign(accessions.begin(), dev_begin);
  split.dev.assign(dev_begin, test_begin);
  split.test.assign(test_begin, accessions.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.dev.begin(), split.dev.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

// ---------------------------------------------------------------------------
// k-mer clustering.

struct ClusterAssignment {
  std::map<std::string, std::size_t> cluster_of;
  std::vector<std::string> representative;  // indexed by cluster id

  std::size_t num_clusters() const { return representative.size(); }

  std::vector<std::vector<std::string>> members() const {
    std::vector<std::vector<std::string>> out(num_clusters());
    for (const auto& [acc, c] : cluster_of) out[c].push_back(acc);
    return out;
  }
};

// Sorted multiset of the length-k windows of a sequence.
inline std::vector<std::string_view> kmer_multiset(std::string_view seq, std::size_t k) {
  std::vector<std::string_view> out;
  if (seq.size() < k) return out;
  out.reserve(seq.size() - k + 1);
  for (std::size_t i = 0; i + k <= seq.size(); ++i) out.push_back(seq.substr(i, k));
  std::sort(out.begin(), out.end());
  return out;
}

inline std::size_t multiset_intersection(const std::vector<std::string_view>& a,
                                         const std::vector<std::string_view>& b) {
  std::size_t shared = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++shared;
      ++i;
      ++j;
    }
  }
  return shared;
}

// |shared k-mer multiset| / |k-mers of the shorter sequence|. When the shorter
// sequence has no k-mers the similarity is 1 for identical sequences, else 0.
inline double kmer_similarity(std::string_view a, std::string_view b, std::size_t k) {
  const auto ka = kmer_multiset(a, k);
  const auto kb = kmer_multiset(b, k);
  const std::size_t denom = std::min(ka.size(), kb.size());
  if (denom == 0) return a == b ? 1.0 : 0.0;
  return static_cast<double>(multiset_intersection(ka, kb)) / static_cast<double>(denom);
}

// Greedy first-match clustering. Records are visited longest first (ties keep
// input order); each joins the first cluster, in founding order, whose
// representative reaches the identity threshold, or founds a new one.
inline ClusterAssignment cluster_sequences(const std::vector<ProteinRecord>& records, double identity_threshold,
                                           std::size_t kmer) {
  if (kmer < 2) throw Error("kmer must be at least 2");
  if (!(identity_threshold > 0.0 && identity_threshold <= 1.0)) {
    throw Error("identity threshold must lie in (0, 1]");
  }
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return records[a].sequence.size() > records[b].sequence.size();
  });

  struct Rep {
    std::string_view sequence;
    std::vector<std::string_view> kmers;
  };
  std::vector<Rep> reps;
  ClusterAssignment out;
  for (std::size_t idx : order) {
    const auto& rec = records[idx];
    auto kmers = kmer_multiset(rec.sequence, kmer);
    std::optional<std::size_t> joined;
    for (std::size_t c = 0; c < reps.size(); ++c) {
      const std::size_t denom = std::min(kmers.size(), reps[c].kmers.size());
      double sim = 0.0;
      if (denom == 0) {
        sim = rec.sequence == reps[c].sequence ? 1.0 : 0.0;
      } else {
        sim = static_cast<double>(multiset_intersection(kmers, reps[c].kmers)) / static_cast<double>(denom);
      }
      if (sim >= identity_threshold) {
        joined = c;
        break;
      }
    }
    if (!joined) {
      joined = reps.size();
      reps.push_back({rec.sequence, std::move(kmers)});
      out.representative.push_back(rec.accession);
    }
    if (!out.cluster_of.emplace(rec.accession, *joined).second) {
      throw Error("duplicate accession '" + rec.accession + "'");
    }
  }
  return out;
}

// Whole clusters are dealt, in seeded-shuffle order, to the split currently
// furthest below its target record count (ties go to train, then dev).
inline DatasetSplit clustered_split(const ClusterAssignment& assignment, std::array<double, 3> ratios,
                                    std::uint64_t seed) {
  const double total_ratio = ratios[0] + ratios[1] + ratios[2];
  if (std::any_of(ratios.begin(), ratios.end(), [](double r) { return r < 0.0; }) ||
      std::abs(total_ratio - 1.0) > 1e-6) {
    throw Error("split ratios must be non-negative and sum to 1");
  }
  if (assignment.num_clusters() < 3) {
    throw Error("clustered split needs at least 3 clusters, got " + std::to_string(assignment.num_clusters()));
  }
  auto members = assignment.members();
  std::vector<std::size_t> order(members.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);

  const double n = static_cast<double>(assignment.cluster_of.size());
  std::array<std::vector<std::string>, 3> parts;
  for (std::size_t c : order) {
    std::size_t best = 0;
    double best_deficit = -INFINITY;
    for (std::size_t s = 0; s < 3; ++s) {
      const double deficit = ratios[s] * n - static_cast<double>(parts[s].size());
      if (deficit > best_deficit) {
        best_deficit = deficit;
        best = s;
      }
    }
    parts[best].insert(parts[best].end(), members[c].begin(), members[c].end());
  }
  DatasetSplit split;
  split.seed = seed;
  split.kind = SplitKind::Clustered;
  split.train = std::move(parts[0]);
  split.dev = std::move(parts[1]);
  split.test = std::move(parts[2]);
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.dev.begin(), split.dev.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

struct LeakageReport {
  std::vector<std::size_t> spanning_clusters;  // cluster ids present in more than one split

  std::size_t count() const { return spanning_clusters.size(); }
};

inline LeakageReport audit_leakage(const DatasetSplit& split, const ClusterAssignment& assignment) {
  std::map<std::size_t, std::set<std::size_t>> seen_in;
  std::size_t visited = 0;
  const auto parts = split.parts();
  for (std::size_t s = 0; s < parts.size(); ++s) {
    for (const auto& acc : *parts[s]) {
      const auto it = assignment.cluster_of.find(acc);
      if (it == assignment.cluster_of.end()) {
        throw Error("accession '" + acc + "' in split has no cluster assignment");
      }
      seen_in[it->second].insert(s);
      ++visited;
    }
  }
  if (visited != assignment.cluster_of.size()) {
    throw Error("split covers " + std::to_string(visited) + " accessions but the assignment has " +
                std::to_string(assignment.cluster_of.size()));
  }
  LeakageReport report;
  for (const auto& [cluster, splits] : seen_in) {
    if (splits.size() > 1) report.spanning_clusters.push_back(cluster);
  }
  return report;
}

}  // namespace protgo
