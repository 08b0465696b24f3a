#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace hashmoe {

enum class TokenizerKind { Char, Word };

TokenizerKind tokenizer_from_string(const std::string& s);
std::string tokenizer_to_string(TokenizerKind k);

std::vector<std::string> tokenize(const std::string& text, TokenizerKind kind);

// Token ids are dense 0..V-1, specials first: pad=0, unk=1, bos=2.
struct Vocab {
    std::vector<std::string> tokens;
    std::unordered_map<std::string, int32_t> id_of;
    std::vector<int64_t> freq;
    TokenizerKind tokenizer = TokenizerKind::Word;

    static constexpr int32_t kPad = 0;
    static constexpr int32_t kUnk = 1;
    static constexpr int32_t kBos = 2;
    static constexpr int32_t kNumSpecials = 3;

    int32_t size() const { return static_cast<int32_t>(tokens.size()); }
    int32_t lookup(const std::string& tok) const;
    int64_t total_freq() const;
    uint64_t digest() const;

    // One `token<TAB>count` line per id, in id order. Tab/newline/backslash
    // in tokens are escaped.
    void save(const std::string& path) const;
    static Vocab load(const std::string& path, TokenizerKind kind = TokenizerKind::Word);
};

// freq_sample_tokens < 0 counts the whole stream; otherwise only the first
// freq_sample_tokens tokens contribute to the frequency statistics.
Vocab build_vocab(const std::string& corpus_text, TokenizerKind kind, int32_t max_size,
                  int64_t freq_sample_tokens = -1);

std::vector<int32_t> encode(const Vocab& vocab, const std::string& text);
std::string decode(const Vocab& vocab, const std::vector<int32_t>& ids);

struct TokenBatch {
    int32_t B = 0;
    int32_t T = 0;
    std::vector<int32_t> inputs;   // row-major B x T
    std::vector<int32_t> targets;  // inputs shifted left by one within each stream
};

// Deterministic stream of batches. The id sequence is cut into contiguous
// non-overlapping windows of T tokens; window start order is shuffled per
// epoch from the seed.
class BatchStream {
public:
    BatchStream(std::vector<int32_t> ids, int32_t B, int32_t T, uint64_t seed);

    TokenBatch next();
    int64_t windows_per_epoch() const { return static_cast<int64_t>(windows_.size()); }
    int64_t batches_per_epoch() const { return windows_per_epoch() / B_; }

private:
    void reshuffle();

    std::vector<int32_t> ids_;
    int32_t B_;
    int32_t T_;
    uint64_t seed_;
    int64_t epoch_ = 0;
    size_t cursor_ = 0;
    std::vector<int64_t> windows_;  // window start offsets into ids_
};

enum class SyntheticKind { Zipf, ZipfMarkov, MarkovDeterministic };

SyntheticKind synthetic_kind_from_string(const std::string& s);

struct SyntheticSpec {
    SyntheticKind kind = SyntheticKind::Zipf;
    int32_t V = 1000;      // word types
    int64_t length = 100000;
    uint64_t seed = 0;
    double zipf_s = 1.07;
    // zipf-markov only: per-token successor count and probability of
    // following the successor structure instead of a fresh unigram draw
    int successors = 3;
    double follow_q = 0.8;
};

// Space-separated word stream, words named w0..w{V-1} by descending base rank.
std::string synthetic_corpus(const SyntheticSpec& spec);

// The deterministic successor permutation used by MarkovDeterministic with
// this V and seed; successor_of[i] is the token rank following rank i.
std::vector<int32_t> markov_successor_permutation(int32_t V, uint64_t seed);

}  // namespace hashmoe
