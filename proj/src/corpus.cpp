#include "hashmoe/corpus.hpp"

#include "hashmoe/common.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace hashmoe {

TokenizerKind tokenizer_from_string(const std::string& s) {
    if (s == "char") return TokenizerKind::Char;
    if (s == "word") return TokenizerKind::Word;
    throw std::invalid_argument("unknown tokenizer: " + s + " (expected char|word)");
}

std::string tokenizer_to_string(TokenizerKind k) {
    return k == TokenizerKind::Char ? "char" : "word";
}

std::vector<std::string> tokenize(const std::string& text, TokenizerKind kind) {
    std::vector<std::string> out;
    if (kind == TokenizerKind::Char) {
        out.reserve(text.size());
        for (char c : text) out.emplace_back(1, c);
        return out;
    }
    size_t i = 0;
    const size_t n = text.size();
    while (i < n) {
        while (i < n && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        size_t start = i;
        while (i < n && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        if (i > start) out.emplace_back(text.substr(start, i - start));
    }
    return out;
}

int32_t Vocab::lookup(const std::string& tok) const {
    auto it = id_of.find(tok);
    return it == id_of.end() ? kUnk : it->second;
}

int64_t Vocab::total_freq() const {
    return std::accumulate(freq.begin(), freq.end(), int64_t{0});
}

uint64_t Vocab::digest() const {
    uint64_t h = 1469598103934665603ull;
    for (int32_t i = 0; i < size(); ++i) {
        h = fnv1a(tokens[i].data(), tokens[i].size(), h);
        unsigned char zero = 0;
        h = fnv1a(&zero, 1, h);
        int64_t f = freq[i];
        h = fnv1a(&f, sizeof(f), h);
    }
    return h;
}

namespace {

std::string escape_token(const std::string& tok) {
    std::string out;
    out.reserve(tok.size());
    for (char c : tok) {
        switch (c) {
            case '\\': out += "\\\\"; break;
            case '\t': out += "\\t"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            default: out += c;
        }
    }
    return out;
}

std::string unescape_token(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (size_t i = 0; i < s.size(); ++i) {
        if (s[i] != '\\' || i + 1 == s.size()) {
            out += s[i];
            continue;
        }
        ++i;
        switch (s[i]) {
            case '\\': out += '\\'; break;
            case 't': out += '\t'; break;
            case 'n': out += '\n'; break;
            case 'r': out += '\r'; break;
            default: out += s[i];
        }
    }
    return out;
}

}  // namespace

void Vocab::save(const std::string& path) const {
    std::ostringstream ss;
    for (int32_t i = 0; i < size(); ++i)
        ss << escape_token(tokens[i]) << '\t' << freq[i] << '\n';
    write_text_file(path, ss.str());
}

Vocab Vocab::load(const std::string& path, TokenizerKind kind) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocab file: " + path);
    Vocab v;
    v.tokenizer = kind;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        size_t tab = line.rfind('\t');
        if (tab == std::string::npos)
            throw std::runtime_error("malformed vocab line: " + line);
        std::string tok = unescape_token(line.substr(0, tab));
        int64_t count = std::stoll(line.substr(tab + 1));
        v.id_of.emplace(tok, v.size());
        v.tokens.push_back(std::move(tok));
        v.freq.push_back(count);
    }
    if (v.size() < kNumSpecials) throw std::runtime_error("vocab file too small: " + path);
    return v;
}

Vocab build_vocab(const std::string& corpus_text, TokenizerKind kind, int32_t max_size,
                  int64_t freq_sample_tokens) {
    auto toks = tokenize(corpus_text, kind);
    if (toks.empty()) throw std::runtime_error("empty corpus");
    if (max_size < Vocab::kNumSpecials + 1)
        throw std::invalid_argument("max_size too small: " + std::to_string(max_size));

    int64_t counted = freq_sample_tokens >= 0
                          ? std::min<int64_t>(freq_sample_tokens, static_cast<int64_t>(toks.size()))
                          : static_cast<int64_t>(toks.size());

    std::unordered_map<std::string, int64_t> counts;
    for (int64_t i = 0; i < counted; ++i) ++counts[toks[static_cast<size_t>(i)]];

    std::vector<std::pair<std::string, int64_t>> ordered(counts.begin(), counts.end());
    std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocab v;
    v.tokenizer = kind;
    v.tokens = {"<pad>", "<unk>", "<bos>"};
    v.freq = {0, 0, 0};
    for (int32_t i = 0; i < Vocab::kNumSpecials; ++i) v.id_of.emplace(v.tokens[i], i);

    size_t keep = static_cast<size_t>(max_size - Vocab::kNumSpecials);
    for (size_t i = 0; i < ordered.size(); ++i) {
        if (i < keep) {
            v.id_of.emplace(ordered[i].first, v.size());
            v.tokens.push_back(ordered[i].first);
            v.freq.push_back(ordered[i].second);
        } else {
            // truncated types map to unk; their mass stays counted there
            v.freq[Vocab::kUnk] += ordered[i].second;
        }
    }
    return v;
}

std::vector<int32_t> encode(const Vocab& vocab, const std::string& text) {
    auto toks = tokenize(text, vocab.tokenizer);
    std::vector<int32_t> ids;
    ids.reserve(toks.size());
    for (const auto& t : toks) ids.push_back(vocab.lookup(t));
    return ids;
}

std::string decode(const Vocab& vocab, const std::vector<int32_t>& ids) {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= vocab.size())
            throw std::out_of_range("decode: id " + std::to_string(ids[i]) + " out of range (V=" +
                                    std::to_string(vocab.size()) + ")");
        if (vocab.tokenizer == TokenizerKind::Word && i > 0) out += ' ';
        out += vocab.tokens[static_cast<size_t>(ids[i])];
    }
    return out;
}

BatchStream::BatchStream(std::vector<int32_t> ids, int32_t B, int32_t T, uint64_t seed)
    : ids_(std::move(ids)), B_(B), T_(T), seed_(seed) {
    if (B < 1 || T < 1) throw std::invalid_argument("batch dimensions must be >= 1");
    if (static_cast<int64_t>(ids_.size()) < int64_t{B} * (T + 1))
        throw std::runtime_error("insufficient ids: need at least " +
                                 std::to_string(int64_t{B} * (T + 1)) + ", have " +
                                 std::to_string(ids_.size()));
    int64_t n_windows = (static_cast<int64_t>(ids_.size()) - 1) / T_;
    windows_.resize(static_cast<size_t>(n_windows));
    for (int64_t w = 0; w < n_windows; ++w) windows_[static_cast<size_t>(w)] = w * T_;
    reshuffle();
}

void BatchStream::reshuffle() {
    std::sort(windows_.begin(), windows_.end());
    std::mt19937_64 rng(mix64(seed_ ^ static_cast<uint64_t>(epoch_)));
    std::shuffle(windows_.begin(), windows_.end(), rng);
    cursor_ = 0;
}

TokenBatch BatchStream::next() {
    if (cursor_ + static_cast<size_t>(B_) > windows_.size()) {
        ++epoch_;
        reshuffle();
    }
    TokenBatch batch;
    batch.B = B_;
    batch.T = T_;
    batch.inputs.resize(static_cast<size_t>(B_) * T_);
    batch.targets.resize(static_cast<size_t>(B_) * T_);
    for (int32_t b = 0; b < B_; ++b) {
        int64_t start = windows_[cursor_++];
        for (int32_t t = 0; t < T_; ++t) {
            batch.inputs[static_cast<size_t>(b) * T_ + t] = ids_[static_cast<size_t>(start + t)];
            batch.targets[static_cast<size_t>(b) * T_ + t] = ids_[static_cast<size_t>(start + t + 1)];
        }
    }
    return batch;
}

SyntheticKind synthetic_kind_from_string(const std::string& s) {
    if (s == "zipf") return SyntheticKind::Zipf;
    if (s == "zipf-markov") return SyntheticKind::ZipfMarkov;
    if (s == "markov-deterministic") return SyntheticKind::MarkovDeterministic;
    throw std::invalid_argument("unknown synthetic corpus kind: " + s);
}

namespace {

// cumulative-weight sampler over ranks 0..V-1 with weight (rank+1)^-s
struct ZipfSampler {
    std::vector<double> cdf;

    ZipfSampler(int32_t V, double s) {
        cdf.resize(static_cast<size_t>(V));
        double acc = 0.0;
        for (int32_t i = 0; i < V; ++i) {
            acc += std::pow(static_cast<double>(i + 1), -s);
            cdf[static_cast<size_t>(i)] = acc;
        }
        for (auto& c : cdf) c /= acc;
    }

    int32_t sample(std::mt19937_64& rng) const {
        double u = uniform01(rng);
        auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
        if (it == cdf.end()) --it;
        return static_cast<int32_t>(it - cdf.begin());
    }
};

void append_word(std::string& out, int32_t rank) {
    if (!out.empty()) out += ' ';
    out += 'w';
    out += std::to_string(rank);
}

}  // namespace

std::vector<int32_t> markov_successor_permutation(int32_t V, uint64_t seed) {
    // single V-cycle so every token occurs and the bigram map is a permutation
    std::vector<int32_t> order(static_cast<size_t>(V));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix64(seed ^ 0x6d61726b6f76ull));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int32_t> succ(static_cast<size_t>(V));
    for (int32_t i = 0; i < V; ++i)
        succ[static_cast<size_t>(order[static_cast<size_t>(i)])] =
            order[static_cast<size_t>((i + 1) % V)];
    return succ;
}

std::string synthetic_corpus(const SyntheticSpec& spec) {
    if (spec.V < 2) throw std::invalid_argument("synthetic corpus needs V >= 2");
    if (spec.length < 1) throw std::invalid_argument("synthetic corpus needs length >= 1");

    std::string out;
    out.reserve(static_cast<size_t>(spec.length) * 5);
    std::mt19937_64 rng(mix64(spec.seed));

    switch (spec.kind) {
        case SyntheticKind::Zipf: {
            ZipfSampler zipf(spec.V, spec.zipf_s);
            for (int64_t i = 0; i < spec.length; ++i) append_word(out, zipf.sample(rng));
            break;
        }
        case SyntheticKind::MarkovDeterministic: {
            auto succ = markov_successor_permutation(spec.V, spec.seed);
            int32_t cur = static_cast<int32_t>(mix64(spec.seed + 1) % static_cast<uint64_t>(spec.V));
            for (int64_t i = 0; i < spec.length; ++i) {
                append_word(out, cur);
                cur = succ[static_cast<size_t>(cur)];
            }
            break;
        }
        case SyntheticKind::ZipfMarkov: {
            // Zipfian marginals plus a fixed sparse successor structure: from
            // token i, with probability follow_q pick one of `successors`
            // per-token successor words (themselves Zipf draws), otherwise a
            // fresh unigram draw.
            ZipfSampler zipf(spec.V, spec.zipf_s);
            int m = std::max(1, spec.successors);
            std::vector<int32_t> succ(static_cast<size_t>(spec.V) * static_cast<size_t>(m));
            for (int32_t i = 0; i < spec.V; ++i) {
                std::mt19937_64 state_rng(mix64(spec.seed ^ (0x5a49ull + static_cast<uint64_t>(i))));
                for (int k = 0; k < m; ++k)
                    succ[static_cast<size_t>(i) * m + static_cast<size_t>(k)] = zipf.sample(state_rng);
            }
            // fixed within-state weights, geometric-ish and normalized
            std::vector<double> w(static_cast<size_t>(m));
            double acc = 0.0;
            for (int k = 0; k < m; ++k) acc += (w[static_cast<size_t>(k)] = std::pow(0.55, k));
            for (auto& x : w) x /= acc;

            int32_t cur = zipf.sample(rng);
            for (int64_t i = 0; i < spec.length; ++i) {
                append_word(out, cur);
                if (uniform01(rng) < spec.follow_q) {
                    double u = uniform01(rng);
                    int pick = 0;
                    double c = 0.0;
                    for (int k = 0; k < m; ++k) {
                        c += w[static_cast<size_t>(k)];
                        if (u < c) { pick = k; break; }
                        pick = k;
                    }
                    cur = succ[static_cast<size_t>(cur) * m + static_cast<size_t>(pick)];
                } else {
                    cur = zipf.sample(rng);
                }
            }
            break;
        }
    }
    return out;
}

}  // namespace hashmoe
