#include "hashmoe/model.hpp"

#include "hashmoe/common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>

using json = nlohmann::json;

namespace hashmoe {

namespace {
thread_local int g_no_grad_depth = 0;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

RouterKind router_kind_from_string(const std::string& s) {
    if (s == "dense") return RouterKind::Dense;
    if (s == "hash") return RouterKind::Hash;
    if (s == "multihash") return RouterKind::MultiHash;
    if (s == "switch") return RouterKind::Switch;
    if (s == "token_switch") return RouterKind::TokenSwitch;
    throw std::invalid_argument("unknown router kind: " + s);
}

std::string router_kind_to_string(RouterKind k) {
    switch (k) {
        case RouterKind::Dense: return "dense";
        case RouterKind::Hash: return "hash";
        case RouterKind::MultiHash: return "multihash";
        case RouterKind::Switch: return "switch";
        case RouterKind::TokenSwitch: return "token_switch";
    }
    return "?";
}

RouteFeature route_feature_from_string(const std::string& s) {
    if (s == "current") return RouteFeature::Current;
    if (s == "previous") return RouteFeature::Previous;
    if (s == "bigram") return RouteFeature::Bigram;
    if (s == "position") return RouteFeature::Position;
    if (s == "oracle_future") return RouteFeature::OracleFuture;
    if (s == "predicted_future") return RouteFeature::PredictedFuture;
    throw std::invalid_argument("unknown route feature: " + s);
}

std::string route_feature_to_string(RouteFeature f) {
    switch (f) {
        case RouteFeature::Current: return "current";
        case RouteFeature::Previous: return "previous";
        case RouteFeature::Bigram: return "bigram";
        case RouteFeature::Position: return "position";
        case RouteFeature::OracleFuture: return "oracle_future";
        case RouteFeature::PredictedFuture: return "predicted_future";
    }
    return "?";
}

const RouterSpec* ModelConfig::router_at(int32_t layer) const {
    for (const auto& [idx, spec] : sparse_layers)
        if (idx == layer) return &spec;
    return nullptr;
}

void ModelConfig::validate() const {
    if (layers < 1 || d_model < 1 || ffn_hidden < 1 || heads < 1 || max_context < 1 ||
        vocab_size < 1)
        throw std::invalid_argument("model config: all dimensions must be >= 1");
    if (d_model % heads != 0)
        throw std::invalid_argument("model config: d_model " + std::to_string(d_model) +
                                    " not divisible by heads " + std::to_string(heads));
    for (const auto& [idx, spec] : sparse_layers) {
        if (idx < 0 || idx >= layers)
            throw std::invalid_argument("model config: sparse layer index " + std::to_string(idx) +
                                        " out of range (layers=" + std::to_string(layers) + ")");
        if (spec.K < 1) throw std::invalid_argument("model config: K must be >= 1");
        if (spec.kind == RouterKind::Hash) {
            bool needs_table = spec.feature != RouteFeature::Bigram &&
                               spec.feature != RouteFeature::Position;
            if (needs_table) {
                if (spec.table.V() != vocab_size)
                    throw std::invalid_argument(
                        "model config: routing table covers " + std::to_string(spec.table.V()) +
                        " tokens, vocab has " + std::to_string(vocab_size));
                if (spec.table.K != spec.K)
                    throw std::invalid_argument("model config: table K != router K");
                if (vocab_digest != 0 && spec.table.vocab_digest != 0 &&
                    spec.table.vocab_digest != vocab_digest)
                    throw std::runtime_error("vocab mismatch (digest) between model and routing table");
            }
        }
        if (spec.kind == RouterKind::MultiHash) {
            int32_t N = spec.multihash.N();
            if (N < 1) throw std::invalid_argument("model config: multihash needs N >= 1 tables");
            if (d_model % N != 0 || ffn_hidden % N != 0)
                throw std::invalid_argument("model config: multihash N=" + std::to_string(N) +
                                            " must divide d=" + std::to_string(d_model) +
                                            " and D=" + std::to_string(ffn_hidden));
            if (spec.feature != RouteFeature::Current)
                throw std::invalid_argument("model config: multihash routes on the current token");
            for (const auto& t : spec.multihash.tables) {
                if (t.V() != vocab_size)
                    throw std::invalid_argument("model config: multihash table size mismatch");
                if (t.K != spec.K)
                    throw std::invalid_argument("model config: multihash table K mismatch");
                if (vocab_digest != 0 && t.vocab_digest != 0 && t.vocab_digest != vocab_digest)
                    throw std::runtime_error("vocab mismatch (digest) between model and routing table");
            }
        }
        if ((spec.kind == RouterKind::Switch || spec.kind == RouterKind::TokenSwitch) &&
            spec.load_bal_alpha < 0)
            throw std::invalid_argument("model config: load_bal_alpha must be >= 0");
    }
}

namespace {

json router_to_json(const RouterSpec& spec) {
    json j;
    j["kind"] = router_kind_to_string(spec.kind);
    j["K"] = spec.K;
    switch (spec.kind) {
        case RouterKind::Dense:
            break;
        case RouterKind::Hash:
            j["feature"] = route_feature_to_string(spec.feature);
            if (spec.feature == RouteFeature::Bigram) j["bigram_seed"] = spec.bigram_seed;
            if (spec.feature != RouteFeature::Bigram && spec.feature != RouteFeature::Position)
                j["table"] = json::parse(spec.table.to_json());
            if (spec.feature == RouteFeature::PredictedFuture)
                j["predictor_ckpt"] = spec.predictor_ckpt;
            break;
        case RouterKind::MultiHash: {
            json tables = json::array();
            for (const auto& t : spec.multihash.tables) tables.push_back(json::parse(t.to_json()));
            j["tables"] = tables;
            break;
        }
        case RouterKind::Switch:
            j["load_bal"] = spec.load_bal_alpha;
            break;
        case RouterKind::TokenSwitch:
            j["load_bal"] = spec.load_bal_alpha;
            break;
    }
    return j;
}

RouterSpec router_from_json(const json& j) {
    RouterSpec spec;
    spec.kind = router_kind_from_string(j.at("kind").get<std::string>());
    spec.K = j.at("K").get<int32_t>();
    if (j.contains("feature")) spec.feature = route_feature_from_string(j["feature"]);
    if (j.contains("bigram_seed")) spec.bigram_seed = j["bigram_seed"].get<uint64_t>();
    if (j.contains("table")) spec.table = HashRoutingTable::from_json(j["table"].dump());
    if (j.contains("tables"))
        for (const auto& t : j["tables"])
            spec.multihash.tables.push_back(HashRoutingTable::from_json(t.dump()));
    if (j.contains("load_bal")) spec.load_bal_alpha = j["load_bal"].get<double>();
    if (j.contains("predictor_ckpt")) spec.predictor_ckpt = j["predictor_ckpt"].get<std::string>();
    return spec;
}

}  // namespace

std::string ModelConfig::to_json() const {
    json j;
    j["layers"] = layers;
    j["d_model"] = d_model;
    j["ffn_hidden"] = ffn_hidden;
    j["heads"] = heads;
    j["max_context"] = max_context;
    j["vocab_size"] = vocab_size;
    j["vocab_digest"] = to_hex(vocab_digest);
    json sl = json::array();
    for (const auto& [idx, spec] : sparse_layers) {
        json item;
        item["layer"] = idx;
        item["router"] = router_to_json(spec);
        sl.push_back(item);
    }
    j["sparse_layers"] = sl;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    ModelConfig cfg;
    cfg.layers = j.at("layers").get<int32_t>();
    cfg.d_model = j.at("d_model").get<int32_t>();
    cfg.ffn_hidden = j.at("ffn_hidden").get<int32_t>();
    cfg.heads = j.at("heads").get<int32_t>();
    cfg.max_context = j.at("max_context").get<int32_t>();
    cfg.vocab_size = j.at("vocab_size").get<int32_t>();
    if (j.contains("vocab_digest")) cfg.vocab_digest = from_hex(j["vocab_digest"]);
    if (j.contains("sparse_layers"))
        for (const auto& item : j["sparse_layers"])
            cfg.sparse_layers.emplace_back(item.at("layer").get<int32_t>(),
                                           router_from_json(item.at("router")));
    return cfg;
}

ParamCounts count_params(const ModelConfig& cfg) {
    cfg.validate();
    const int64_t d = cfg.d_model, D = cfg.ffn_hidden, V = cfg.vocab_size, L = cfg.layers;
    const int64_t attn = 4 * (d * d + d);
    const int64_t ffn = d * D + D + D * d + d;
    const int64_t norms = 2 * (2 * d);
    int64_t dense_total = V * d + int64_t(cfg.max_context) * d + L * (attn + ffn + norms) + 2 * d;

    ParamCounts pc;
    pc.per_expert = 2 * d * D + D + d;
    pc.total = dense_total;
    int64_t expert_total = 0;
    for (const auto& [idx, spec] : cfg.sparse_layers) {
        (void)idx;
        if (spec.kind == RouterKind::Dense) continue;
        pc.total += (int64_t(spec.K) - 1) * pc.per_expert;
        expert_total += int64_t(spec.K) * pc.per_expert;
        if (spec.kind == RouterKind::Switch) pc.total += d * spec.K;
        if (spec.kind == RouterKind::TokenSwitch) pc.total += d * spec.K + V * d;
    }
    pc.shared = pc.total - expert_total;
    return pc;
}

int64_t flops_per_token(const ModelConfig& cfg) {
    cfg.validate();
    const int64_t d = cfg.d_model, D = cfg.ffn_hidden, V = cfg.vocab_size, T = cfg.max_context;
    int64_t macs = 0;
    for (int32_t l = 0; l < cfg.layers; ++l) {
        macs += 4 * d * d + 2 * T * d;  // qkvo projections + score/mix
        macs += 2 * d * D;              // one FFN (the routed expert for sparse layers)
        const RouterSpec* spec = cfg.router_at(l);
        if (spec && (spec->kind == RouterKind::Switch || spec->kind == RouterKind::TokenSwitch))
            macs += d * spec->K;  // router projection
    }
    macs += d * V;  // tied output head
    return macs;
}

// ---- model ------------------------------------------------------------------

template <class S>
Model<S>::Model(ModelConfig cfg, ParamStore<S>& store, uint64_t init_seed)
    : cfg_(std::move(cfg)), store_(&store) {
    cfg_.validate();
    std::mt19937_64 rng(mix64(init_seed ^ 0x6d6f64656cull));
    const int64_t d = cfg_.d_model, D = cfg_.ffn_hidden, V = cfg_.vocab_size;
    const double std_init = 0.02;

    auto w = [&](const std::string& name, std::vector<int64_t> shape) {
        return store_->add(name, Tensor<S>::randn(std::move(shape), rng, std_init));
    };
    auto zeros = [&](const std::string& name, std::vector<int64_t> shape) {
        return store_->add(name, Tensor<S>::zeros(std::move(shape)));
    };
    auto ones = [&](const std::string& name, std::vector<int64_t> shape) {
        return store_->add(name, Tensor<S>::full(std::move(shape), S(1)));
    };

    embed_tok_ = w("embed.tok", {V, d});
    embed_pos_ = w("embed.pos", {cfg_.max_context, d});

    layers_.resize(static_cast<size_t>(cfg_.layers));
    for (int32_t l = 0; l < cfg_.layers; ++l) {
        auto& L = layers_[static_cast<size_t>(l)];
        std::string p = "layer" + std::to_string(l) + ".";
        L.ln1_g = ones(p + "ln1.gain", {d});
        L.ln1_b = zeros(p + "ln1.bias", {d});
        L.wq = w(p + "attn.wq", {d, d});
        L.bq = zeros(p + "attn.bq", {d});
        L.wk = w(p + "attn.wk", {d, d});
        L.bk = zeros(p + "attn.bk", {d});
        L.wv = w(p + "attn.wv", {d, d});
        L.bv = zeros(p + "attn.bv", {d});
        L.wo = w(p + "attn.wo", {d, d});
        L.bo = zeros(p + "attn.bo", {d});
        L.ln2_g = ones(p + "ln2.gain", {d});
        L.ln2_b = zeros(p + "ln2.bias", {d});

        const RouterSpec* spec = cfg_.router_at(l);
        if (!spec || spec->kind == RouterKind::Dense) {
            L.w1 = w(p + "ffn.w1", {d, D});
            L.b1 = zeros(p + "ffn.b1", {D});
            L.w2 = w(p + "ffn.w2", {D, d});
            L.b2 = zeros(p + "ffn.b2", {d});
            continue;
        }
        if (spec->kind == RouterKind::MultiHash) {
            int32_t N = spec->multihash.N();
            L.mh_bank.N = N;
            L.mh_bank.A.resize(static_cast<size_t>(N));
            L.mh_bank.bias_a.resize(static_cast<size_t>(N));
            L.mh_bank.B.resize(static_cast<size_t>(N));
            L.mh_bank.bias_b.resize(static_cast<size_t>(N));
            for (int32_t m = 0; m < N; ++m)
                for (int32_t k = 0; k < spec->K; ++k) {
                    std::string q = p + "seg" + std::to_string(m) + ".expert" + std::to_string(k);
                    L.mh_bank.A[m].push_back(w(q + ".A", {d, D / N}));
                    L.mh_bank.bias_a[m].push_back(zeros(q + ".a", {D / N}));
                    L.mh_bank.B[m].push_back(w(q + ".B", {D, d / N}));
                    L.mh_bank.bias_b[m].push_back(zeros(q + ".b", {d / N}));
                }
            continue;
        }
        for (int32_t k = 0; k < spec->K; ++k) {
            std::string q = p + "expert" + std::to_string(k);
            L.bank.A.push_back(w(q + ".A", {d, D}));
            L.bank.bias_a.push_back(zeros(q + ".a", {D}));
            L.bank.B.push_back(w(q + ".B", {D, d}));
            L.bank.bias_b.push_back(zeros(q + ".b", {d}));
        }
        if (spec->kind == RouterKind::Switch || spec->kind == RouterKind::TokenSwitch)
            L.router_w = w(p + "router.w", {d, spec->K});
        if (spec->kind == RouterKind::TokenSwitch)
            L.router_tok = w(p + "router.tok", {V, d});
    }
    final_g_ = ones("final_norm.gain", {d});
    final_b_ = zeros("final_norm.bias", {d});
}

template <class S>
void Model<S>::attach_predictor(std::shared_ptr<Model<S>> predictor) {
    predictor_ = std::move(predictor);
}

template <class S>
bool Model<S>::needs_predictor() const {
    for (const auto& [idx, spec] : cfg_.sparse_layers) {
        (void)idx;
        if (spec.kind == RouterKind::Hash && spec.feature == RouteFeature::PredictedFuture)
            return true;
    }
    return false;
}

template <class S>
std::vector<int32_t> Model<S>::resolve_features(const RouterSpec& spec, const TokenBatch& batch,
                                                const ForwardOptions& opts) {
    const int32_t B = batch.B, T = batch.T;
    const size_t R = static_cast<size_t>(B) * T;
    std::vector<int32_t> feat(R);
    switch (spec.feature) {
        case RouteFeature::Current:
            std::copy(batch.inputs.begin(), batch.inputs.end(), feat.begin());
            break;
        case RouteFeature::Previous:
            for (int32_t b = 0; b < B; ++b)
                for (int32_t t = 0; t < T; ++t)
                    feat[size_t(b) * T + t] =
                        t == 0 ? Vocab::kBos : batch.inputs[size_t(b) * T + t - 1];
            break;
        case RouteFeature::Bigram:
        case RouteFeature::Position:
            // computed directly in forward; feature ids mirror the inputs/positions
            for (int32_t b = 0; b < B; ++b)
                for (int32_t t = 0; t < T; ++t)
                    feat[size_t(b) * T + t] = spec.feature == RouteFeature::Position
                                                  ? t
                                                  : batch.inputs[size_t(b) * T + t];
            break;
        case RouteFeature::OracleFuture:
            if (batch.targets.size() != R)
                throw std::runtime_error("oracle_future routing requires targets");
            if (!opts.oracle_allowed)
                throw std::runtime_error("oracle_future routing requires oracle_allowed");
            std::copy(batch.targets.begin(), batch.targets.end(), feat.begin());
            break;
        case RouteFeature::PredictedFuture: {
            if (!predictor_)
                throw std::runtime_error("predicted_future routing requires an attached predictor");
            NoGradGuard ng;
            ForwardOptions popts;
            popts.want_loss = false;
            popts.want_trace = false;
            auto pres = predictor_->forward(batch, popts);
            feat = argmax_rows(pres.logits->value);
            break;
        }
    }
    return feat;
}

template <class S>
ForwardResult<S> Model<S>::forward(const TokenBatch& batch, const ForwardOptions& opts) {
    const int32_t B = batch.B, T = batch.T;
    if (T > cfg_.max_context)
        throw std::invalid_argument("context length " + std::to_string(T) + " exceeds max " +
                                    std::to_string(cfg_.max_context));
    const size_t R = static_cast<size_t>(B) * T;
    for (int32_t id : batch.inputs)
        if (id < 0 || id >= cfg_.vocab_size)
            throw std::out_of_range("input id " + std::to_string(id) + " out of vocab range");

    ForwardResult<S> res;

    std::vector<int32_t> pos_ids(R);
    for (int32_t b = 0; b < B; ++b)
        for (int32_t t = 0; t < T; ++t) pos_ids[size_t(b) * T + t] = t;

    Var<S> h = add(embedding_rows(embed_tok_, batch.inputs), embedding_rows(embed_pos_, pos_ids));

    for (int32_t l = 0; l < cfg_.layers; ++l) {
        auto& L = layers_[static_cast<size_t>(l)];
        // pre-norm attention block
        Var<S> a_in = layer_norm(h, L.ln1_g, L.ln1_b);
        Var<S> q = add_bias(matmul(a_in, L.wq), L.bq);
        Var<S> k = add_bias(matmul(a_in, L.wk), L.bk);
        Var<S> v = add_bias(matmul(a_in, L.wv), L.bv);
        Var<S> attn = causal_attention(q, k, v, B, T, cfg_.heads);
        h = add(h, add_bias(matmul(attn, L.wo), L.bo));

        // pre-norm FFN block (dense or routed)
        Var<S> f_in = layer_norm(h, L.ln2_g, L.ln2_b);
        const RouterSpec* spec = cfg_.router_at(l);
        Var<S> ffn_out;
        if (!spec || spec->kind == RouterKind::Dense) {
            ffn_out = add_bias(matmul(relu(add_bias(matmul(f_in, L.w1), L.b1)), L.w2), L.b2);
        } else if (spec->kind == RouterKind::Hash) {
            auto feat = resolve_features(*spec, batch, opts);
            std::vector<int32_t> experts(R);
            if (spec->feature == RouteFeature::Bigram) {
                for (int32_t b = 0; b < B; ++b)
                    for (int32_t t = 0; t < T; ++t) {
                        int32_t prev = t == 0 ? Vocab::kBos : batch.inputs[size_t(b) * T + t - 1];
                        experts[size_t(b) * T + t] =
                            route_bigram(prev, batch.inputs[size_t(b) * T + t], spec->K,
                                         spec->bigram_seed);
                    }
            } else if (spec->feature == RouteFeature::Position) {
                for (size_t r = 0; r < R; ++r)
                    experts[r] = route_position(feat[r], spec->K);
            } else {
                for (size_t r = 0; r < R; ++r) experts[r] = spec->table.route(feat[r]);
            }
            ffn_out = moe_hash_ffn(f_in, experts, L.bank);

            std::vector<int64_t> counts(static_cast<size_t>(spec->K), 0);
            for (size_t r = 0; r < R; ++r) ++counts[static_cast<size_t>(experts[r])];
            res.expert_counts.push_back(std::move(counts));
            if (opts.want_trace)
                for (size_t r = 0; r < R; ++r)
                    res.trace.entries.push_back(
                        {l, static_cast<int32_t>(r), feat[r], experts[r], 1.0f});
        } else if (spec->kind == RouterKind::MultiHash) {
            std::vector<std::vector<int32_t>> ids(static_cast<size_t>(spec->multihash.N()));
            for (int32_t m = 0; m < spec->multihash.N(); ++m) {
                ids[static_cast<size_t>(m)].resize(R);
                for (size_t r = 0; r < R; ++r)
                    ids[static_cast<size_t>(m)][r] =
                        spec->multihash.tables[static_cast<size_t>(m)].route(batch.inputs[r]);
            }
            ffn_out = moe_multihash_ffn(f_in, ids, L.mh_bank);

            std::vector<int64_t> counts(static_cast<size_t>(spec->K), 0);
            for (size_t r = 0; r < R; ++r) ++counts[static_cast<size_t>(ids[0][r])];
            res.expert_counts.push_back(std::move(counts));
            if (opts.want_trace)
                for (size_t r = 0; r < R; ++r)
                    res.trace.entries.push_back(
                        {l, static_cast<int32_t>(r), batch.inputs[r], ids[0][r], 1.0f});
        } else {
            // switch / token_switch: learned top-1 with gate scaling
            Var<S> router_in = spec->kind == RouterKind::Switch
                                   ? f_in
                                   : embedding_rows(L.router_tok, batch.inputs);
            Var<S> logits_r = matmul(router_in, L.router_w);
            Var<S> p = softmax_rows(logits_r);
            std::vector<int32_t> experts = argmax_rows(p->value);
            Var<S> gates = rows_gather(p, experts);
            ffn_out = scale_rows(moe_hash_ffn(f_in, experts, L.bank), gates);

            std::vector<int64_t> counts(static_cast<size_t>(spec->K), 0);
            for (size_t r = 0; r < R; ++r) ++counts[static_cast<size_t>(experts[r])];
            if (spec->load_bal_alpha > 0) {
                // alpha * K * sum_i f_i * P_i
                std::vector<double> wvec(static_cast<size_t>(spec->K));
                for (int32_t i = 0; i < spec->K; ++i)
                    wvec[static_cast<size_t>(i)] = spec->load_bal_alpha * double(spec->K) *
                                                   double(counts[static_cast<size_t>(i)]) /
                                                   double(R);
                Var<S> aux = colmean_dot(p, wvec);
                res.aux = res.aux ? add(res.aux, aux) : aux;
            }
            res.expert_counts.push_back(std::move(counts));
            if (opts.want_trace)
                for (size_t r = 0; r < R; ++r)
                    res.trace.entries.push_back({l, static_cast<int32_t>(r), batch.inputs[r],
                                                 experts[r],
                                                 static_cast<float>(gates->value.data[r])});
        }
        h = add(h, ffn_out);
    }

    h = layer_norm(h, final_g_, final_b_);
    res.logits = matmul_nt(h, embed_tok_);  // weight-tied head

    if (opts.want_loss) {
        if (batch.targets.size() != R)
            throw std::invalid_argument("forward: loss requested but batch has no targets");
        for (int32_t id : batch.targets)
            if (id < 0 || id >= cfg_.vocab_size)
                throw std::out_of_range("target id out of vocab range");
        res.nll = softmax_cross_entropy(res.logits, batch.targets);
    }
    return res;
}

template class Model<float>;
template class Model<double>;

}  // namespace hashmoe
