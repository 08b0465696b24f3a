#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace hashmoe {

// Dense row-major tensor. S is float for training, double for the
// gradient-check mode.
template <class S>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<S> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shp) : shape(std::move(shp)) {
        data.assign(static_cast<size_t>(numel_of(shape)), S(0));
    }

    static int64_t numel_of(const std::vector<int64_t>& shp) {
        int64_t n = 1;
        for (int64_t d : shp) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int64_t> shp) { return Tensor(std::move(shp)); }
    static Tensor full(std::vector<int64_t> shp, S v) {
        Tensor t(std::move(shp));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(S v) {
        Tensor t({1});
        t.data[0] = v;
        return t;
    }
    static Tensor randn(std::vector<int64_t> shp, std::mt19937_64& rng, double stddev) {
        Tensor t(std::move(shp));
        std::normal_distribution<double> dist(0.0, stddev);
        for (auto& x : t.data) x = static_cast<S>(dist(rng));
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(size_t i) const { return shape.at(i); }
    int64_t rows() const { return shape.at(0); }
    int64_t cols() const { return shape.at(1); }
    S* ptr() { return data.data(); }
    const S* ptr() const { return data.data(); }
    S& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
    S at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const;
    std::string shape_str() const;
};

template <class S> struct Node;
template <class S> using Var = std::shared_ptr<Node<S>>;

template <class S>
struct Node {
    Tensor<S> value;
    Tensor<S> grad;  // allocated lazily, same shape as value
    bool requires_grad = false;
    std::string label;

    std::vector<Var<S>> parents;
    std::function<void(Node<S>&)> backprop;

    Tensor<S>& ensure_grad() {
        if (grad.shape != value.shape) grad = Tensor<S>::zeros(value.shape);
        return grad;
    }
    bool has_grad() const { return grad.shape == value.shape; }
};

template <class S>
Var<S> make_leaf(Tensor<S> value, bool requires_grad = false, std::string label = {}) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->label = std::move(label);
    return n;
}

// When enabled, every op scans its output and throws naming the op on the
// first non-finite value. Off by default (hot path).
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

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

// Reverse-mode sweep from a scalar loss. Accumulates into leaf grads and
// releases the tape (interior edges/closures) afterwards.
template <class S> void backward(const Var<S>& loss);

// ---- primitive ops ------------------------------------------------------

template <class S> Var<S> add(const Var<S>& a, const Var<S>& b);              // same shape
template <class S> Var<S> add_bias(const Var<S>& x, const Var<S>& bias);      // [R,n] + [n]
template <class S> Var<S> mul(const Var<S>& a, const Var<S>& b);              // elementwise
template <class S> Var<S> scale(const Var<S>& x, double c);
template <class S> Var<S> relu(const Var<S>& x);
template <class S> Var<S> matmul(const Var<S>& a, const Var<S>& b);           // [m,k]*[k,n]
template <class S> Var<S> matmul_nt(const Var<S>& a, const Var<S>& b);        // [m,k]*[n,k]^T
template <class S> Var<S> embedding_rows(const Var<S>& table, const std::vector<int32_t>& ids);
template <class S> Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias,
                                     double eps = 1e-5);
template <class S> Var<S> causal_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v,
                                           int32_t B, int32_t T, int32_t heads);
template <class S> Var<S> softmax_cross_entropy(const Var<S>& logits,
                                                const std::vector<int32_t>& targets);
template <class S> Var<S> softmax_rows(const Var<S>& x);
template <class S> Var<S> rows_gather(const Var<S>& p, const std::vector<int32_t>& idx);  // [R,K]->[R]
template <class S> Var<S> scale_rows(const Var<S>& x, const Var<S>& g);                   // rows by g[R]
template <class S> Var<S> colmean_dot(const Var<S>& p, const std::vector<double>& w);     // scalar
template <class S> Var<S> sum(const Var<S>& x);                                           // scalar

// ---- mixture-of-experts ops ---------------------------------------------

// One sparse layer's expert weights; A[k]: [d,D], B[k]: [D,d].
template <class S>
struct ExpertBankVars {
    std::vector<Var<S>> A, bias_a, B, bias_b;
    int32_t K() const { return static_cast<int32_t>(A.size()); }
};

// Segmented bank for multihash: A[m][k]: [d,D/N], B[m][k]: [D,d/N].
template <class S>
struct MultiHashBankVars {
    int32_t N = 1;
    std::vector<std::vector<Var<S>>> A, bias_a, B, bias_b;
    int32_t K() const { return static_cast<int32_t>(A.at(0).size()); }
};

// out[r] = B_k(relu(A_k h[r] + a_k)) + b_k with k = expert_of_row[r].
template <class S>
Var<S> moe_hash_ffn(const Var<S>& h, const std::vector<int32_t>& expert_of_row,
                    const ExpertBankVars<S>& bank);

// v = relu(concat_m A_{m,k_m} h), out = concat_m B_{m,k_m} v, with
// k_m = ids_per_segment[m][r].
template <class S>
Var<S> moe_multihash_ffn(const Var<S>& h, const std::vector<std::vector<int32_t>>& ids_per_segment,
                         const MultiHashBankVars<S>& bank);

// ---- non-taped helpers ---------------------------------------------------

// Row-wise argmax (ties -> lowest index).
template <class S> std::vector<int32_t> argmax_rows(const Tensor<S>& x);

extern template struct Tensor<float>;
extern template struct Tensor<double>;

}  // namespace hashmoe
