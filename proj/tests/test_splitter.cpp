#include <gtest/gtest.h>

#include <set>

#include "protgo/splitter.hpp"

using namespace protgo;

namespace {

std::vector<std::string> ids(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("P" + std::to_string(i));
  return out;
}

void expect_partition(const DatasetSplit& s, const std::vector<std::string>& input) {
  std::set<std::string> all;
  for (const auto* part : s.parts()) {
    for (const auto& a : *part) EXPECT_TRUE(all.insert(a).second) << "duplicate " << a;
  }
  EXPECT_EQ(all, std::set<std::string>(input.begin(), input.end()));
}

std::string random_protein(Rng& rng, std::size_t len) {
  static constexpr std::string_view kStd = "ACDEFGHIKLMNPQRSTVWY";
  std::string s;
  for (std::size_t i = 0; i < len; ++i) s.push_back(kStd[rng.below(kStd.size())]);
  return s;
}

// Families of point-mutated variants around random ancestors.
std::vector<ProteinRecord> random_corpus(Rng& rng, std::size_t families, std::size_t max_members) {
  std::vector<ProteinRecord> out;
  for (std::size_t f = 0; f < families; ++f) {
    const auto ancestor = random_protein(rng, 20 + rng.below(40));
    const auto members = 1 + rng.below(max_members);
    for (std::size_t m = 0; m < members; ++m) {
      std::string s = ancestor;
      for (auto& c : s) {
        if (rng.uniform() < 0.15) c = random_protein(rng, 1)[0];
      }
      if (rng.uniform() < 0.3) s += random_protein(rng, rng.below(10));
      out.push_back({"F" + std::to_string(f) + "_" + std::to_string(m), s, {}});
    }
  }
  return out;
}

}  // namespace

TEST(RandomSplit, SizesFollowEightOneOne) {
  for (std::size_t n : {10u, 100u, 101u, 999u}) {
    const auto input = ids(n);
    const auto s = random_split(input, 3);
    EXPECT_EQ(s.dev.size(), n / 10);
    EXPECT_EQ(s.test.size(), n / 10);
    EXPECT_EQ(s.train.size(), n - 2 * (n / 10));
    expect_partition(s, input);
  }
  const auto s100 = random_split(ids(100), 1);
  EXPECT_EQ(s100.train.size(), 80u);
}

TEST(RandomSplit, DeterministicForSeed) {
  const auto a = random_split(ids(57), 7);
  const auto b = random_split(ids(57), 7);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.dev, b.dev);
  EXPECT_EQ(a.test, b.test);
  const auto c = random_split(ids(57), 8);
  EXPECT_NE(a.test, c.test);
}

TEST(RandomSplit, TooFewRecords) { EXPECT_THROW(random_split(ids(9), 1), Error); }

TEST(Cluster, KmerSimilarityHandCase) {
  // AAAAA -> {AAA x3}; AAAAC -> {AAA x2, AAC}; shared 2 of 3.
  EXPECT_NEAR(kmer_similarity("AAAAA", "AAAAC", 3), 2.0 / 3.0, 1e-15);
  const std::vector<ProteinRecord> recs = {{"a", "AAAAA", {}}, {"b", "AAAAC", {}}};
  EXPECT_EQ(cluster_sequences(recs, 0.5, 3).num_clusters(), 1u);
  EXPECT_EQ(cluster_sequences(recs, 0.7, 3).num_clusters(), 2u);
}

TEST(Cluster, IdenticalAndDisjointSequences) {
  const std::vector<ProteinRecord> same = {{"a", "MKVLAAG", {}}, {"b", "MKVLAAG", {}}};
  EXPECT_EQ(cluster_sequences(same, 1.0, 5).num_clusters(), 1u);
  const std::vector<ProteinRecord> tiny = {{"a", "MK", {}}, {"b", "MK", {}}};
  EXPECT_EQ(cluster_sequences(tiny, 1.0, 5).num_clusters(), 1u);
  const std::vector<ProteinRecord> disjoint = {{"a", "AAAAAAA", {}}, {"b", "CCCCCCC", {}}};
  EXPECT_EQ(cluster_sequences(disjoint, 0.5, 3).num_clusters(), 2u);
}

TEST(Cluster, LongestSequenceFoundsFirstCluster) {
  const std::vector<ProteinRecord> recs = {{"short", "AAAAC", {}}, {"long", "AAAAAAAA", {}}};
  const auto c = cluster_sequences(recs, 0.5, 3);
  ASSERT_EQ(c.num_clusters(), 1u);
  EXPECT_EQ(c.representative[0], "long");
}

TEST(Cluster, RejectsBadParameters) {
  const std::vector<ProteinRecord> recs = {{"a", "AAAA", {}}};
  EXPECT_THROW(cluster_sequences(recs, 0.5, 1), Error);
  EXPECT_THROW(cluster_sequences(recs, 0.0, 3), Error);
  EXPECT_THROW(cluster_sequences(recs, 1.5, 3), Error);
}

TEST(ClusteredSplit, SingletonsSplitNearEvenly) {
  std::vector<ProteinRecord> recs;
  Rng rng(2);
  for (int i = 0; i < 31; ++i) recs.push_back({"P" + std::to_string(i), random_protein(rng, 40), {}});
  const auto c = cluster_sequences(recs, 0.9, 5);
  ASSERT_EQ(c.num_clusters(), recs.size());
  const auto s = clustered_split(c, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 4);
  for (const auto* part : s.parts()) EXPECT_LE(std::abs(static_cast<double>(part->size()) - 31.0 / 3.0), 1.0);
}

TEST(ClusteredSplit, GiantClusterStaysWhole) {
  ClusterAssignment a;
  a.representative.push_back("G0");
  for (int i = 0; i < 90; ++i) a.cluster_of["G" + std::to_string(i)] = 0;
  for (int i = 0; i < 10; ++i) {
    a.cluster_of["S" + std::to_string(i)] = a.representative.size();
    a.representative.push_back("S" + std::to_string(i));
  }
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = clustered_split(a, {1.0 / 3, 1.0 / 3, 1.0 / 3}, seed);
    int holders = 0;
    for (const auto* part : s.parts()) {
      const auto n = std::count_if(part->begin(), part->end(), [](const std::string& x) { return x[0] == 'G'; });
      EXPECT_TRUE(n == 0 || n == 90);
      holders += n == 90;
    }
    EXPECT_EQ(holders, 1);
    EXPECT_EQ(audit_leakage(s, a).count(), 0u);
  }
}

TEST(ClusteredSplit, Errors) {
  ClusterAssignment two;
  two.cluster_of = {{"a", 0}, {"b", 1}};
  two.representative = {"a", "b"};
  EXPECT_THROW(clustered_split(two, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 0), Error);
  ClusterAssignment three = two;
  three.cluster_of["c"] = 2;
  three.representative.push_back("c");
  EXPECT_THROW(clustered_split(three, {0.5, 0.5, 0.5}, 0), Error);
  EXPECT_NO_THROW(clustered_split(three, {0.8, 0.1, 0.1}, 0));
}

TEST(ClusteredSplit, Deterministic) {
  Rng rng(8);
  const auto recs = random_corpus(rng, 30, 4);
  const auto c = cluster_sequences(recs, 0.5, 5);
  const auto a = clustered_split(c, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 21);
  const auto b = clustered_split(c, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 21);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.dev, b.dev);
  EXPECT_EQ(a.test, b.test);
}

TEST(Audit, DetectsSpanningCluster) {
  ClusterAssignment a;
  a.cluster_of = {{"x", 0}, {"y", 0}, {"z", 1}};
  a.representative = {"x", "z"};
  DatasetSplit s;
  s.train = {"x", "z"};
  s.test = {"y"};
  const auto r = audit_leakage(s, a);
  ASSERT_EQ(r.count(), 1u);
  EXPECT_EQ(r.spanning_clusters[0], 0u);
}

TEST(Audit, EmptyDevStillAudits) {
  ClusterAssignment a;
  a.cluster_of = {{"x", 0}, {"y", 1}};
  a.representative = {"x", "y"};
  DatasetSplit s;
  s.train = {"x"};
  s.test = {"y"};
  EXPECT_EQ(audit_leakage(s, a).count(), 0u);
}

TEST(Audit, AccessionMismatch) {
  ClusterAssignment a;
  a.cluster_of = {{"x", 0}, {"y", 1}};
  a.representative = {"x", "y"};
  DatasetSplit s;
  s.train = {"x", "q"};
  EXPECT_THROW(audit_leakage(s, a), Error);
  DatasetSplit partial;
  partial.train = {"x"};
  EXPECT_THROW(audit_leakage(partial, a), Error);
}

TEST(SplitterProperty, PartitionAndAtomicityOverRandomCorpora) {
  Rng rng(1234);
  for (int corpus = 0; corpus < 20; ++corpus) {
    const auto recs = random_corpus(rng, 10 + rng.below(30), 5);
    std::vector<std::string> accs;
    for (const auto& r : recs) accs.push_back(r.accession);
    for (double threshold : {0.3, 0.5, 0.8}) {
      const auto c = cluster_sequences(recs, threshold, 4);
      if (c.num_clusters() < 3) continue;
      for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto s = clustered_split(c, {1.0 / 3, 1.0 / 3, 1.0 / 3}, seed);
        expect_partition(s, accs);
        EXPECT_EQ(audit_leakage(s, c).count(), 0u);
      }
    }
    if (accs.size() >= 10) expect_partition(random_split(accs, corpus), accs);
  }
}

TEST(SplitterProperty, RaisingThresholdNeverMergesClusters) {
  Rng rng(77);
  for (int corpus = 0; corpus < 30; ++corpus) {
    const auto recs = random_corpus(rng, 5 + rng.below(20), 6);
    std::size_t previous = 0;
    for (double threshold : {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0}) {
      const auto n = cluster_sequences(recs, threshold, 3).num_clusters();
      EXPECT_GE(n, previous) << "corpus " << corpus << " threshold " << threshold;
      previous = n;
    }
  }
}
