#pragma once

#include "hashmoe/tensor.hpp"

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace hashmoe {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
};

// Named parameter registry with per-parameter Adam state and freeze flags.
// Iteration order is registration order (deterministic updates and
// serialization).
template <class S>
class ParamStore {
public:
    struct Entry {
        Var<S> var;
        bool trainable = true;
        Tensor<S> m, v;    // allocated on first update
        int64_t steps = 0;  // per-parameter update count for bias correction
    };

    Var<S> add(const std::string& name, Tensor<S> init, bool trainable = true);
    Var<S> get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Entry& entry(const std::string& name);
    const Entry& entry(const std::string& name) const;
    const std::vector<std::string>& names() const { return order_; }
    size_t size() const { return order_.size(); }
    int64_t total_elements() const;

    void zero_grad();
    // Global-norm clip over trainable grads; bitwise no-op when the norm is
    // already <= max_norm. Returns the pre-clip norm.
    double clip_grad_norm(double max_norm);
    void adam_step(double lr, const AdamConfig& cfg = {});
    // Marks matching parameters frozen. A pattern matches by prefix, or by
    // '*' glob over the whole name. Throws if a pattern matches nothing.
    void freeze(const std::vector<std::string>& patterns);
    std::vector<std::string> frozen_names() const;
    void reset_optimizer_state();

    int64_t global_step = 0;  // serialized as the checkpoint's scalar `step`

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Entry> index_;
};

bool name_matches_pattern(const std::string& name, const std::string& pattern);

// InvSqrt schedule: max_lr * min(step/warmup, sqrt(warmup/step)), step >= 1.
double lr_schedule(int64_t step, double max_lr, int64_t warmup);

extern template class ParamStore<float>;
extern template class ParamStore<double>;

}  // namespace hashmoe
