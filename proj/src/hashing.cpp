#include "hashmoe/hashing.hpp"

#include "hashmoe/common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

using json = nlohmann::json;

namespace hashmoe {

HashKind hash_kind_from_string(const std::string& s) {
    if (s == "random") return HashKind::Random;
    if (s == "balanced") return HashKind::Balanced;
    if (s == "clustered") return HashKind::Clustered;
    if (s == "dispersed") return HashKind::Dispersed;
    throw std::invalid_argument("unknown hash kind: " + s);
}

std::string hash_kind_to_string(HashKind k) {
    switch (k) {
        case HashKind::Random: return "random";
        case HashKind::Balanced: return "balanced";
        case HashKind::Clustered: return "clustered";
        case HashKind::Dispersed: return "dispersed";
    }
    return "?";
}

std::string HashRoutingTable::to_json() const {
    json j;
    j["kind"] = hash_kind_to_string(kind);
    j["K"] = K;
    j["seed"] = seed;
    j["vocab_digest"] = to_hex(vocab_digest);
    j["table"] = table;
    return j.dump();
}

HashRoutingTable HashRoutingTable::from_json(const std::string& json_text) {
    json j = json::parse(json_text);
    HashRoutingTable t;
    t.kind = hash_kind_from_string(j.at("kind").get<std::string>());
    t.K = j.at("K").get<int32_t>();
    t.seed = j.at("seed").get<uint64_t>();
    t.vocab_digest = from_hex(j.at("vocab_digest").get<std::string>());
    t.table = j.at("table").get<std::vector<int32_t>>();
    for (int32_t e : t.table)
        if (e < 0 || e >= t.K)
            throw std::runtime_error("routing table entry out of range: " + std::to_string(e));
    return t;
}

void HashRoutingTable::save(const std::string& path) const { write_text_file(path, to_json()); }

HashRoutingTable HashRoutingTable::load(const std::string& path) {
    return from_json(read_text_file(path));
}

HashRoutingTable build_random_table(const Vocab& vocab, int32_t K, uint64_t seed) {
    if (K < 1) throw std::invalid_argument("build_random_table: K must be >= 1");
    HashRoutingTable t;
    t.kind = HashKind::Random;
    t.K = K;
    t.seed = seed;
    t.vocab_digest = vocab.digest();
    t.table.resize(static_cast<size_t>(vocab.size()));
    for (int32_t i = 0; i < vocab.size(); ++i)
        t.table[static_cast<size_t>(i)] =
            static_cast<int32_t>(mix64(seed + static_cast<uint64_t>(i)) % static_cast<uint64_t>(K));
    return t;
}

HashRoutingTable build_balanced_table(const Vocab& vocab, int32_t K) {
    if (K < 1) throw std::invalid_argument("build_balanced_table: K must be >= 1");
    HashRoutingTable t;
    t.kind = HashKind::Balanced;
    t.K = K;
    t.seed = 0;
    t.vocab_digest = vocab.digest();
    t.table.assign(static_cast<size_t>(vocab.size()), 0);

    if (vocab.total_freq() == 0) {
        for (int32_t i = 0; i < vocab.size(); ++i) t.table[static_cast<size_t>(i)] = i % K;
        return t;
    }

    std::vector<int32_t> order(static_cast<size_t>(vocab.size()));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int32_t a, int32_t b) {
        if (vocab.freq[a] != vocab.freq[b]) return vocab.freq[a] > vocab.freq[b];
        return a < b;
    });

    std::vector<int64_t> load(static_cast<size_t>(K), 0);
    for (int32_t id : order) {
        int32_t best = 0;
        for (int32_t k = 1; k < K; ++k)
            if (load[k] < load[best]) best = k;
        t.table[static_cast<size_t>(id)] = best;
        load[best] += vocab.freq[static_cast<size_t>(id)];
    }
    return t;
}

int32_t route_bigram(int32_t prev_id, int32_t cur_id, int32_t K, uint64_t seed) {
    uint64_t fp = mix64(mix64(seed ^ (static_cast<uint64_t>(prev_id) * 0x9E3779B97F4A7C15ull)) ^
                        static_cast<uint64_t>(cur_id));
    return static_cast<int32_t>(fp % static_cast<uint64_t>(K));
}

int32_t route_position(int64_t t, int32_t K) {
    return static_cast<int32_t>(t % K);
}

namespace {

double sq_dist(const double* a, const double* b, int32_t d) {
    double s = 0;
    for (int32_t j = 0; j < d; ++j) {
        double c = a[j] - b[j];
        s += c * c;
    }
    return s;
}

// assignment pass; returns inertia. Ties -> lowest centroid index.
double assign_points(const std::vector<double>& pts, int32_t n, int32_t d,
                     const std::vector<double>& centroids, int32_t Kc,
                     std::vector<int32_t>& assignment) {
    double inertia = 0;
    for (int32_t i = 0; i < n; ++i) {
        const double* p = pts.data() + static_cast<size_t>(i) * d;
        int32_t best = 0;
        double best_d = sq_dist(p, centroids.data(), d);
        for (int32_t k = 1; k < Kc; ++k) {
            double dd = sq_dist(p, centroids.data() + static_cast<size_t>(k) * d, d);
            if (dd < best_d) {
                best_d = dd;
                best = k;
            }
        }
        assignment[static_cast<size_t>(i)] = best;
        inertia += best_d;
    }
    return inertia;
}

}  // namespace

ClusterModel kmeans(const std::vector<double>& points, int32_t n_points, int32_t dim, int32_t Kc,
                    uint64_t seed, int max_iters, double tol, std::vector<double>* inertia_trace) {
    if (Kc < 1) throw std::invalid_argument("kmeans: K must be >= 1");
    if (Kc > n_points)
        throw std::invalid_argument("kmeans: K=" + std::to_string(Kc) + " exceeds points=" +
                                    std::to_string(n_points));
    if (static_cast<size_t>(n_points) * dim != points.size())
        throw std::invalid_argument("kmeans: point buffer size mismatch");

    ClusterModel cm;
    cm.Kc = Kc;
    cm.dim = dim;
    cm.centroids.resize(static_cast<size_t>(Kc) * dim);
    cm.assignment.assign(static_cast<size_t>(n_points), 0);

    std::mt19937_64 rng(mix64(seed ^ 0x6b6d65616e73ull));

    // k-means++ seeding
    std::vector<double> min_d(static_cast<size_t>(n_points), std::numeric_limits<double>::max());
    int32_t first = static_cast<int32_t>(rng() % static_cast<uint64_t>(n_points));
    std::copy_n(points.data() + static_cast<size_t>(first) * dim, dim, cm.centroids.data());
    for (int32_t k = 1; k < Kc; ++k) {
        const double* last = cm.centroids.data() + static_cast<size_t>(k - 1) * dim;
        double total = 0;
        for (int32_t i = 0; i < n_points; ++i) {
            double dd = sq_dist(points.data() + static_cast<size_t>(i) * dim, last, dim);
            if (dd < min_d[static_cast<size_t>(i)]) min_d[static_cast<size_t>(i)] = dd;
            total += min_d[static_cast<size_t>(i)];
        }
        int32_t chosen = 0;
        if (total > 0) {
            double u = uniform01(rng) * total;
            double acc = 0;
            for (int32_t i = 0; i < n_points; ++i) {
                acc += min_d[static_cast<size_t>(i)];
                if (u < acc) {
                    chosen = i;
                    break;
                }
                chosen = i;
            }
        } else {
            chosen = static_cast<int32_t>(rng() % static_cast<uint64_t>(n_points));
        }
        std::copy_n(points.data() + static_cast<size_t>(chosen) * dim, dim,
                    cm.centroids.data() + static_cast<size_t>(k) * dim);
    }

    std::vector<int32_t> prev = cm.assignment;
    std::vector<double> sums(static_cast<size_t>(Kc) * dim);
    std::vector<int64_t> counts(static_cast<size_t>(Kc));
    double inertia = assign_points(points, n_points, dim, cm.centroids, Kc, cm.assignment);
    if (inertia_trace) inertia_trace->push_back(inertia);

    for (int iter = 0; iter < max_iters; ++iter) {
        // update step
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (int32_t i = 0; i < n_points; ++i) {
            int32_t k = cm.assignment[static_cast<size_t>(i)];
            ++counts[static_cast<size_t>(k)];
            const double* p = points.data() + static_cast<size_t>(i) * dim;
            double* s = sums.data() + static_cast<size_t>(k) * dim;
            for (int32_t j = 0; j < dim; ++j) s[j] += p[j];
        }
        double max_move_sq = 0;
        for (int32_t k = 0; k < Kc; ++k) {
            if (counts[static_cast<size_t>(k)] == 0) continue;
            double* c = cm.centroids.data() + static_cast<size_t>(k) * dim;
            double move = 0;
            for (int32_t j = 0; j < dim; ++j) {
                double nv = sums[static_cast<size_t>(k) * dim + j] /
                            static_cast<double>(counts[static_cast<size_t>(k)]);
                double diff = nv - c[j];
                move += diff * diff;
                c[j] = nv;
            }
            max_move_sq = std::max(max_move_sq, move);
        }
        // empty-cluster repair: reseed to the point farthest from its centroid
        std::vector<bool> taken(static_cast<size_t>(n_points), false);
        for (int32_t k = 0; k < Kc; ++k) {
            if (counts[static_cast<size_t>(k)] != 0) continue;
            int32_t far = -1;
            double far_d = -1;
            for (int32_t i = 0; i < n_points; ++i) {
                if (taken[static_cast<size_t>(i)]) continue;
                double dd = sq_dist(points.data() + static_cast<size_t>(i) * dim,
                                    cm.centroids.data() +
                                        static_cast<size_t>(cm.assignment[static_cast<size_t>(i)]) * dim,
                                    dim);
                if (dd > far_d) {
                    far_d = dd;
                    far = i;
                }
            }
            if (far >= 0) {
                taken[static_cast<size_t>(far)] = true;
                std::copy_n(points.data() + static_cast<size_t>(far) * dim, dim,
                            cm.centroids.data() + static_cast<size_t>(k) * dim);
                max_move_sq = std::numeric_limits<double>::max();
            }
        }

        prev = cm.assignment;
        inertia = assign_points(points, n_points, dim, cm.centroids, Kc, cm.assignment);
        if (inertia_trace) inertia_trace->push_back(inertia);
        if (cm.assignment == prev || max_move_sq < tol * tol) break;
    }

    // final means over the converged assignment, then one more assignment so
    // the nearest-centroid invariant holds exactly
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (int32_t i = 0; i < n_points; ++i) {
        int32_t k = cm.assignment[static_cast<size_t>(i)];
        ++counts[static_cast<size_t>(k)];
        const double* p = points.data() + static_cast<size_t>(i) * dim;
        for (int32_t j = 0; j < dim; ++j) sums[static_cast<size_t>(k) * dim + j] += p[j];
    }
    for (int32_t k = 0; k < Kc; ++k)
        if (counts[static_cast<size_t>(k)] > 0)
            for (int32_t j = 0; j < dim; ++j)
                cm.centroids[static_cast<size_t>(k) * dim + j] =
                    sums[static_cast<size_t>(k) * dim + j] /
                    static_cast<double>(counts[static_cast<size_t>(k)]);
    cm.inertia = assign_points(points, n_points, dim, cm.centroids, Kc, cm.assignment);
    return cm;
}

HashRoutingTable build_clustered_table(const ClusterModel& cm, int32_t K, const Vocab& vocab) {
    if (cm.Kc != K)
        throw std::invalid_argument("build_clustered_table: cluster count " +
                                    std::to_string(cm.Kc) + " != K " + std::to_string(K));
    if (static_cast<int32_t>(cm.assignment.size()) != vocab.size())
        throw std::invalid_argument("build_clustered_table: cluster model covers " +
                                    std::to_string(cm.assignment.size()) + " tokens, vocab has " +
                                    std::to_string(vocab.size()));
    HashRoutingTable t;
    t.kind = HashKind::Clustered;
    t.K = K;
    t.seed = 0;
    t.vocab_digest = vocab.digest();
    t.table = cm.assignment;
    return t;
}

HashRoutingTable build_dispersed_table(const ClusterModel& cm, int32_t K, const Vocab& vocab) {
    if (K < 1) throw std::invalid_argument("build_dispersed_table: K must be >= 1");
    if (static_cast<int32_t>(cm.assignment.size()) != vocab.size())
        throw std::invalid_argument("build_dispersed_table: cluster model covers " +
                                    std::to_string(cm.assignment.size()) + " tokens, vocab has " +
                                    std::to_string(vocab.size()));
    HashRoutingTable t;
    t.kind = HashKind::Dispersed;
    t.K = K;
    t.seed = 0;
    t.vocab_digest = vocab.digest();
    t.table.assign(static_cast<size_t>(vocab.size()), 0);

    for (int32_t c = 0; c < cm.Kc; ++c) {
        std::vector<int32_t> members;
        for (int32_t i = 0; i < vocab.size(); ++i)
            if (cm.assignment[static_cast<size_t>(i)] == c) members.push_back(i);
        std::sort(members.begin(), members.end(), [&](int32_t a, int32_t b) {
            if (vocab.freq[a] != vocab.freq[b]) return vocab.freq[a] > vocab.freq[b];
            return a < b;
        });
        // round-robin, staggered by cluster id
        for (size_t r = 0; r < members.size(); ++r)
            t.table[static_cast<size_t>(members[r])] =
                static_cast<int32_t>((static_cast<size_t>(c % K) + r) % static_cast<size_t>(K));
    }
    return t;
}

BalanceStats balance_stats_from_weights(const std::vector<double>& weight_per_expert) {
    double total = std::accumulate(weight_per_expert.begin(), weight_per_expert.end(), 0.0);
    if (total <= 0) throw std::runtime_error("balance stats: zero total weight");
    BalanceStats s;
    s.shares.resize(weight_per_expert.size());
    s.ideal_share = 1.0 / static_cast<double>(weight_per_expert.size());
    s.max_share = 0;
    s.min_share = std::numeric_limits<double>::max();
    s.entropy = 0;
    for (size_t i = 0; i < weight_per_expert.size(); ++i) {
        double share = weight_per_expert[i] / total;
        s.shares[i] = share;
        s.max_share = std::max(s.max_share, share);
        s.min_share = std::min(s.min_share, share);
        if (share > 0) s.entropy -= share * std::log(share);
    }
    return s;
}

BalanceStats balance_stats(const HashRoutingTable& table, const Vocab& vocab) {
    if (table.V() != vocab.size())
        throw std::invalid_argument("balance_stats: table covers " + std::to_string(table.V()) +
                                    " tokens, vocab has " + std::to_string(vocab.size()));
    std::vector<double> mass(static_cast<size_t>(table.K), 0.0);
    for (int32_t i = 0; i < vocab.size(); ++i)
        mass[static_cast<size_t>(table.route(i))] +=
            static_cast<double>(vocab.freq[static_cast<size_t>(i)]);
    return balance_stats_from_weights(mass);
}

std::string BalanceStats::to_json() const {
    json j;
    j["shares"] = shares;
    j["max_share"] = max_share;
    j["min_share"] = min_share;
    j["entropy"] = entropy;
    j["ideal_share"] = ideal_share;
    return j.dump(2);
}

}  // namespace hashmoe
