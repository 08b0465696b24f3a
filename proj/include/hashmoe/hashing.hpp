#pragma once

#include "hashmoe/corpus.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace hashmoe {

enum class HashKind { Random, Balanced, Clustered, Dispersed };

HashKind hash_kind_from_string(const std::string& s);
std::string hash_kind_to_string(HashKind k);

// Immutable token-id -> expert-id lookup, fixed before training.
struct HashRoutingTable {
    HashKind kind = HashKind::Random;
    int32_t K = 1;
    uint64_t seed = 0;
    uint64_t vocab_digest = 0;
    std::vector<int32_t> table;  // length V, entries in [0,K)

    int32_t route(int32_t token_id) const { return table[static_cast<size_t>(token_id)]; }
    int32_t V() const { return static_cast<int32_t>(table.size()); }

    std::string to_json() const;
    static HashRoutingTable from_json(const std::string& json_text);
    void save(const std::string& path) const;
    static HashRoutingTable load(const std::string& path);
};

// N independent tables sharing K; N must divide the FFN widths it serves.
struct MultiHashSpec {
    std::vector<HashRoutingTable> tables;
    int32_t N() const { return static_cast<int32_t>(tables.size()); }
    int32_t K() const { return tables.at(0).K; }
};

struct ClusterModel {
    std::vector<double> centroids;  // Kc x d row-major
    int32_t Kc = 0;
    int32_t dim = 0;
    std::vector<int32_t> assignment;  // per point, nearest centroid
    double inertia = 0;
};

struct BalanceStats {
    std::vector<double> shares;  // frequency-weighted, sums to 1
    double max_share = 0;
    double min_share = 0;
    double entropy = 0;  // nats
    double ideal_share = 0;

    std::string to_json() const;
};

HashRoutingTable build_random_table(const Vocab& vocab, int32_t K, uint64_t seed);
// Greedy: descending frequency (ties by id), into the bucket with the
// smallest frequency load (ties by lowest index). All-zero frequencies
// degenerate to round-robin by id.
HashRoutingTable build_balanced_table(const Vocab& vocab, int32_t K);

int32_t route_bigram(int32_t prev_id, int32_t cur_id, int32_t K, uint64_t seed);
int32_t route_position(int64_t t, int32_t K);

// Lloyd iterations from k-means++ seeding; empty clusters repaired by
// reseeding to the point farthest from its assigned centroid.
ClusterModel kmeans(const std::vector<double>& points, int32_t n_points, int32_t dim, int32_t Kc,
                    uint64_t seed, int max_iters = 100, double tol = 1e-6,
                    std::vector<double>* inertia_trace = nullptr);

HashRoutingTable build_clustered_table(const ClusterModel& cm, int32_t K, const Vocab& vocab);
HashRoutingTable build_dispersed_table(const ClusterModel& cm, int32_t K, const Vocab& vocab);

BalanceStats balance_stats(const HashRoutingTable& table, const Vocab& vocab);
// Shares from arbitrary non-negative weights (e.g. realized routing counts).
BalanceStats balance_stats_from_weights(const std::vector<double>& weight_per_expert);

}  // namespace hashmoe
