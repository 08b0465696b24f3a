#pragma once

#include "hashmoe/corpus.hpp"
#include "hashmoe/hashing.hpp"
#include "hashmoe/optim.hpp"
#include "hashmoe/tensor.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace hashmoe {

enum class RouterKind { Dense, Hash, MultiHash, Switch, TokenSwitch };
enum class RouteFeature { Current, Previous, Bigram, Position, OracleFuture, PredictedFuture };

RouterKind router_kind_from_string(const std::string& s);
std::string router_kind_to_string(RouterKind k);
RouteFeature route_feature_from_string(const std::string& s);
std::string route_feature_to_string(RouteFeature f);

struct RouterSpec {
    RouterKind kind = RouterKind::Dense;
    int32_t K = 1;
    RouteFeature feature = RouteFeature::Current;
    HashRoutingTable table;      // hash with a token-id feature
    MultiHashSpec multihash;     // multihash
    double load_bal_alpha = 0.0; // switch / token_switch
    std::string predictor_ckpt;  // predicted_future
    uint64_t bigram_seed = 0;
};

struct ModelConfig {
    int32_t layers = 4;
    int32_t d_model = 128;
    int32_t ffn_hidden = 512;
    int32_t heads = 4;
    int32_t max_context = 64;
    int32_t vocab_size = 0;
    uint64_t vocab_digest = 0;  // 0 = unchecked
    std::vector<std::pair<int32_t, RouterSpec>> sparse_layers;

    const RouterSpec* router_at(int32_t layer) const;
    void validate() const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

struct ParamCounts {
    int64_t shared = 0;
    int64_t per_expert = 0;  // 2dD + D + d (one sparse layer's expert size)
    int64_t total = 0;
};

ParamCounts count_params(const ModelConfig& cfg);
// Multiply-accumulates per token; sparse layers count the single routed
// expert only.
int64_t flops_per_token(const ModelConfig& cfg);

struct TraceEntry {
    int32_t layer = 0;
    int32_t position = 0;  // row index b*T + t within the batch
    int32_t feature_id = 0;
    int32_t expert = 0;
    float gate = 1.0f;
};

struct RoutingTrace {
    std::vector<TraceEntry> entries;
};

template <class S>
struct ForwardResult {
    Var<S> logits;  // [B*T, V]
    Var<S> nll;     // scalar mean teacher-forced NLL (when targets given)
    Var<S> aux;     // summed load-balance terms; null when none
    RoutingTrace trace;
    std::vector<std::vector<int64_t>> expert_counts;  // per sparse layer, length K
};

struct ForwardOptions {
    bool want_loss = true;
    bool want_trace = false;
    bool oracle_allowed = false;
};

// Ops run outside the tape while a guard is alive (evaluation, frozen
// predictor passes).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

template <class S>
class Model {
public:
    // Registers freshly initialized parameters into `store`.
    Model(ModelConfig cfg, ParamStore<S>& store, uint64_t init_seed);

    ForwardResult<S> forward(const TokenBatch& batch, const ForwardOptions& opts = {});

    const ModelConfig& config() const { return cfg_; }
    ParamStore<S>& store() { return *store_; }

    // Frozen next-token predictor for predicted_future routing.
    void attach_predictor(std::shared_ptr<Model<S>> predictor);
    bool needs_predictor() const;

private:
    struct LayerVars {
        Var<S> ln1_g, ln1_b, ln2_g, ln2_b;
        Var<S> wq, bq, wk, bk, wv, bv, wo, bo;
        // dense
        Var<S> w1, b1, w2, b2;
        // sparse
        ExpertBankVars<S> bank;
        MultiHashBankVars<S> mh_bank;
        Var<S> router_w;    // switch / token_switch
        Var<S> router_tok;  // token_switch lookup table
    };

    std::vector<int32_t> resolve_features(const RouterSpec& spec, const TokenBatch& batch,
                                          const ForwardOptions& opts);

    ModelConfig cfg_;
    ParamStore<S>* store_;
    Var<S> embed_tok_, embed_pos_, final_g_, final_b_;
    std::vector<LayerVars> layers_;
    std::shared_ptr<Model<S>> predictor_;
};

extern template class Model<float>;
extern template class Model<double>;

}  // namespace hashmoe
