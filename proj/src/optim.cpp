#include "hashmoe/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace hashmoe {

bool name_matches_pattern(const std::string& name, const std::string& pattern) {
    if (pattern.empty()) return false;
    if (name.rfind(pattern, 0) == 0) return true;  // prefix
    if (pattern.find('*') == std::string::npos) return false;
    // iterative glob with '*' only
    size_t n = 0, p = 0, star = std::string::npos, match = 0;
    while (n < name.size()) {
        if (p < pattern.size() && (pattern[p] == name[n])) {
            ++n;
            ++p;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            match = n;
        } else if (star != std::string::npos) {
            p = star + 1;
            n = ++match;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

double lr_schedule(int64_t step, double max_lr, int64_t warmup) {
    if (step < 1) throw std::invalid_argument("lr_schedule: step must be >= 1");
    if (warmup < 1) throw std::invalid_argument("lr_schedule: warmup must be >= 1");
    double ramp = double(step) / double(warmup);
    double decay = std::sqrt(double(warmup) / double(step));
    return max_lr * std::min(ramp, decay);
}

template <class S>
Var<S> ParamStore<S>::add(const std::string& name, Tensor<S> init, bool trainable) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    Entry e;
    e.var = make_leaf<S>(std::move(init), true, name);
    e.trainable = trainable;
    order_.push_back(name);
    auto it = index_.emplace(name, std::move(e)).first;
    return it->second.var;
}

template <class S>
Var<S> ParamStore<S>::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named: " + name);
    return it->second.var;
}

template <class S>
typename ParamStore<S>::Entry& ParamStore<S>::entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named: " + name);
    return it->second;
}

template <class S>
const typename ParamStore<S>::Entry& ParamStore<S>::entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named: " + name);
    return it->second;
}

template <class S>
int64_t ParamStore<S>::total_elements() const {
    int64_t n = 0;
    for (const auto& name : order_) n += index_.at(name).var->value.numel();
    return n;
}

template <class S>
void ParamStore<S>::zero_grad() {
    for (const auto& name : order_) {
        auto& e = index_.at(name);
        if (e.var->has_grad())
            std::fill(e.var->grad.data.begin(), e.var->grad.data.end(), S(0));
    }
}

template <class S>
double ParamStore<S>::clip_grad_norm(double max_norm) {
    double sq = 0;
    for (const auto& name : order_) {
        auto& e = index_.at(name);
        if (!e.trainable || !e.var->has_grad()) continue;
        for (S g : e.var->grad.data) sq += double(g) * double(g);
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        double s = max_norm / norm;
        for (const auto& name : order_) {
            auto& e = index_.at(name);
            if (!e.trainable || !e.var->has_grad()) continue;
            for (S& g : e.var->grad.data) g = static_cast<S>(g * s);
        }
    }
    return norm;
}

template <class S>
void ParamStore<S>::adam_step(double lr, const AdamConfig& cfg) {
    ++global_step;
    for (const auto& name : order_) {
        auto& e = index_.at(name);
        if (!e.trainable || !e.var->has_grad()) continue;
        if (e.m.shape != e.var->value.shape) {
            e.m = Tensor<S>::zeros(e.var->value.shape);
            e.v = Tensor<S>::zeros(e.var->value.shape);
        }
        ++e.steps;
        double bc1 = 1.0 - std::pow(cfg.beta1, double(e.steps));
        double bc2 = 1.0 - std::pow(cfg.beta2, double(e.steps));
        S* p = e.var->value.ptr();
        const S* g = e.var->grad.ptr();
        S* m = e.m.ptr();
        S* v = e.v.ptr();
        for (int64_t i = 0; i < e.var->value.numel(); ++i) {
            double gi = g[i];
            double mi = cfg.beta1 * double(m[i]) + (1.0 - cfg.beta1) * gi;
            double vi = cfg.beta2 * double(v[i]) + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<S>(mi);
            v[i] = static_cast<S>(vi);
            double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
            p[i] = static_cast<S>(double(p[i]) - update);
        }
    }
}

template <class S>
void ParamStore<S>::freeze(const std::vector<std::string>& patterns) {
    for (const auto& pat : patterns) {
        bool any = false;
        for (const auto& name : order_) {
            if (name_matches_pattern(name, pat)) {
                index_.at(name).trainable = false;
                any = true;
            }
        }
        if (!any) throw std::invalid_argument("freeze pattern matches no parameter: " + pat);
    }
}

template <class S>
std::vector<std::string> ParamStore<S>::frozen_names() const {
    std::vector<std::string> out;
    for (const auto& name : order_)
        if (!index_.at(name).trainable) out.push_back(name);
    return out;
}

template <class S>
void ParamStore<S>::reset_optimizer_state() {
    global_step = 0;
    for (const auto& name : order_) {
        auto& e = index_.at(name);
        e.m = Tensor<S>();
        e.v = Tensor<S>();
        e.steps = 0;
    }
}

template class ParamStore<float>;
template class ParamStore<double>;

}  // namespace hashmoe
