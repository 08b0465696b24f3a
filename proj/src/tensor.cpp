#include "hashmoe/tensor.hpp"

#include "hashmoe/common.hpp"

#include <Eigen/Core>
#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace hashmoe {

namespace {

bool g_finite_checks = false;
thread_local int g_no_grad_depth = 0;

template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Map = Eigen::Map<EMat<S>>;
template <class S>
using CMap = Eigen::Map<const EMat<S>>;
template <class S>
using StridedMap = Eigen::Map<EMat<S>, 0, Eigen::OuterStride<>>;
template <class S>
using CStridedMap = Eigen::Map<const EMat<S>, 0, Eigen::OuterStride<>>;

template <class S>
CMap<S> as_mat(const Tensor<S>& t) {
    return CMap<S>(t.ptr(), t.rows(), t.cols());
}
template <class S>
Map<S> as_mat(Tensor<S>& t) {
    return Map<S>(t.ptr(), t.rows(), t.cols());
}

template <class S>
void require_2d(const Tensor<S>& t, const char* op) {
    if (t.shape.size() != 2)
        throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got " + t.shape_str());
}

template <class S>
Var<S> finish_op(const char* label, Tensor<S> value, std::vector<Var<S>> parents,
                 std::function<void(Node<S>&)> backprop) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    n->label = label;
    bool rg = false;
    if (g_no_grad_depth == 0)
        for (const auto& p : parents) rg = rg || p->requires_grad;
    n->requires_grad = rg;
    if (rg) {
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    if (g_finite_checks && !n->value.all_finite())
        throw std::runtime_error(std::string("non-finite value produced by op '") + label + "'");
    return n;
}

}  // namespace

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }

template <class S>
bool Tensor<S>::all_finite() const {
    for (S v : data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

template <class S>
std::string Tensor<S>::shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <class S>
void backward(const Var<S>& loss) {
    if (!loss) throw std::invalid_argument("backward: null node");
    if (loss->value.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " + loss->value.shape_str());
    if (!loss->requires_grad) return;

    // reverse post-order over the parents DAG
    std::vector<Node<S>*> topo;
    std::unordered_set<Node<S>*> visited;
    struct Frame { Node<S>* node; size_t next; };
    std::vector<Frame> stack;
    stack.push_back({loss.get(), 0});
    visited.insert(loss.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->parents.size()) {
            Node<S>* p = f.node->parents[f.next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(f.node);
            stack.pop_back();
        }
    }

    loss->ensure_grad().data[0] = S(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node<S>* n = *it;
        if (n->backprop && n->has_grad()) n->backprop(*n);
    }
    // release the tape; leaves keep their grads
    for (Node<S>* n : topo) {
        n->backprop = nullptr;
        n->parents.clear();
    }
}

// ---- elementwise ----------------------------------------------------------

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    if (!a->value.same_shape(b->value))
        throw std::invalid_argument("add: shape mismatch " + a->value.shape_str() + " vs " +
                                    b->value.shape_str());
    Tensor<S> out = a->value;
    const S* bp = b->value.ptr();
    S* op = out.ptr();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] += bp[i];
    return finish_op<S>("add", std::move(out), {a, b}, [](Node<S>& n) {
        for (auto& p : n.parents) {
            if (!p->requires_grad) continue;
            S* g = p->ensure_grad().ptr();
            const S* og = n.grad.ptr();
            for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += og[i];
        }
    });
}

template <class S>
Var<S> add_bias(const Var<S>& x, const Var<S>& bias) {
    require_2d(x->value, "add_bias");
    int64_t R = x->value.rows(), n = x->value.cols();
    if (bias->value.numel() != n)
        throw std::invalid_argument("add_bias: bias length " + bias->value.shape_str() +
                                    " does not match " + x->value.shape_str());
    Tensor<S> out = x->value;
    const S* bp = bias->value.ptr();
    for (int64_t r = 0; r < R; ++r) {
        S* row = out.ptr() + r * n;
        for (int64_t j = 0; j < n; ++j) row[j] += bp[j];
    }
    return finish_op<S>("add_bias", std::move(out), {x, bias}, [R, n](Node<S>& node) {
        auto& x = node.parents[0];
        auto& b = node.parents[1];
        if (x->requires_grad) {
            S* g = x->ensure_grad().ptr();
            const S* og = node.grad.ptr();
            for (int64_t i = 0; i < R * n; ++i) g[i] += og[i];
        }
        if (b->requires_grad) {
            S* g = b->ensure_grad().ptr();
            for (int64_t r = 0; r < R; ++r) {
                const S* row = node.grad.ptr() + r * n;
                for (int64_t j = 0; j < n; ++j) g[j] += row[j];
            }
        }
    });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    if (!a->value.same_shape(b->value))
        throw std::invalid_argument("mul: shape mismatch " + a->value.shape_str() + " vs " +
                                    b->value.shape_str());
    Tensor<S> out = a->value;
    const S* bp = b->value.ptr();
    S* op = out.ptr();
    for (int64_t i = 0; i < out.numel(); ++i) op[i] *= bp[i];
    return finish_op<S>("mul", std::move(out), {a, b}, [](Node<S>& n) {
        auto& a = n.parents[0];
        auto& b = n.parents[1];
        const S* og = n.grad.ptr();
        if (a->requires_grad) {
            S* g = a->ensure_grad().ptr();
            const S* bv = b->value.ptr();
            for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += og[i] * bv[i];
        }
        if (b->requires_grad) {
            S* g = b->ensure_grad().ptr();
            const S* av = a->value.ptr();
            for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += og[i] * av[i];
        }
    });
}

template <class S>
Var<S> scale(const Var<S>& x, double c) {
    Tensor<S> out = x->value;
    for (auto& v : out.data) v = static_cast<S>(v * c);
    return finish_op<S>("scale", std::move(out), {x}, [c](Node<S>& n) {
        auto& x = n.parents[0];
        if (!x->requires_grad) return;
        S* g = x->ensure_grad().ptr();
        const S* og = n.grad.ptr();
        for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += static_cast<S>(og[i] * c);
    });
}

template <class S>
Var<S> relu(const Var<S>& x) {
    Tensor<S> out = x->value;
    for (auto& v : out.data) v = v > S(0) ? v : S(0);
    return finish_op<S>("relu", std::move(out), {x}, [](Node<S>& n) {
        auto& x = n.parents[0];
        if (!x->requires_grad) return;
        S* g = x->ensure_grad().ptr();
        const S* og = n.grad.ptr();
        const S* xv = x->value.ptr();
        for (int64_t i = 0; i < n.grad.numel(); ++i)
            if (xv[i] > S(0)) g[i] += og[i];
    });
}

// ---- matmul ----------------------------------------------------------------

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
    require_2d(a->value, "matmul");
    require_2d(b->value, "matmul");
    if (a->value.cols() != b->value.rows())
        throw std::invalid_argument("matmul: inner dimensions disagree, " + a->value.shape_str() +
                                    " vs " + b->value.shape_str());
    Tensor<S> out({a->value.rows(), b->value.cols()});
    as_mat(out).noalias() = as_mat(a->value) * as_mat(b->value);
    return finish_op<S>("matmul", std::move(out), {a, b}, [](Node<S>& n) {
        auto& a = n.parents[0];
        auto& b = n.parents[1];
        auto dC = as_mat(n.grad);
        if (a->requires_grad)
            as_mat(a->ensure_grad()).noalias() += dC * as_mat(b->value).transpose();
        if (b->requires_grad)
            as_mat(b->ensure_grad()).noalias() += as_mat(a->value).transpose() * dC;
    });
}

template <class S>
Var<S> matmul_nt(const Var<S>& a, const Var<S>& b) {
    require_2d(a->value, "matmul_nt");
    require_2d(b->value, "matmul_nt");
    if (a->value.cols() != b->value.cols())
        throw std::invalid_argument("matmul_nt: inner dimensions disagree, " + a->value.shape_str() +
                                    " vs " + b->value.shape_str() + " transposed");
    Tensor<S> out({a->value.rows(), b->value.rows()});
    as_mat(out).noalias() = as_mat(a->value) * as_mat(b->value).transpose();
    return finish_op<S>("matmul_nt", std::move(out), {a, b}, [](Node<S>& n) {
        auto& a = n.parents[0];
        auto& b = n.parents[1];
        auto dC = as_mat(n.grad);
        if (a->requires_grad)
            as_mat(a->ensure_grad()).noalias() += dC * as_mat(b->value);
        if (b->requires_grad)
            as_mat(b->ensure_grad()).noalias() += dC.transpose() * as_mat(a->value);
    });
}

// ---- embedding -------------------------------------------------------------

template <class S>
Var<S> embedding_rows(const Var<S>& table, const std::vector<int32_t>& ids) {
    require_2d(table->value, "embedding_rows");
    int64_t V = table->value.rows(), d = table->value.cols();
    Tensor<S> out({static_cast<int64_t>(ids.size()), d});
    for (size_t r = 0; r < ids.size(); ++r) {
        int32_t id = ids[r];
        if (id < 0 || id >= V)
            throw std::out_of_range("embedding_rows: id " + std::to_string(id) + " out of range V=" +
                                    std::to_string(V));
        std::copy_n(table->value.ptr() + int64_t(id) * d, d, out.ptr() + int64_t(r) * d);
    }
    return finish_op<S>("embedding_rows", std::move(out), {table}, [ids, d](Node<S>& n) {
        auto& table = n.parents[0];
        if (!table->requires_grad) return;
        S* g = table->ensure_grad().ptr();
        const S* og = n.grad.ptr();
        for (size_t r = 0; r < ids.size(); ++r) {
            S* dst = g + int64_t(ids[r]) * d;
            const S* src = og + int64_t(r) * d;
            for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

// ---- layer norm -------------------------------------------------------------

template <class S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias, double eps) {
    require_2d(x->value, "layer_norm");
    int64_t R = x->value.rows(), d = x->value.cols();
    if (gain->value.numel() != d || bias->value.numel() != d)
        throw std::invalid_argument("layer_norm: gain/bias length must match feature dim " +
                                    std::to_string(d));
    Tensor<S> out({R, d});
    auto xhat = std::make_shared<Tensor<S>>(Tensor<S>({R, d}));
    auto inv_std = std::make_shared<std::vector<S>>(static_cast<size_t>(R));
    const S* gp = gain->value.ptr();
    const S* bp = bias->value.ptr();
    for (int64_t r = 0; r < R; ++r) {
        const S* row = x->value.ptr() + r * d;
        double mean = 0;
        for (int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= double(d);
        double var = 0;
        for (int64_t j = 0; j < d; ++j) {
            double c = row[j] - mean;
            var += c * c;
        }
        var /= double(d);
        double istd = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(r)] = static_cast<S>(istd);
        S* xh = xhat->ptr() + r * d;
        S* o = out.ptr() + r * d;
        for (int64_t j = 0; j < d; ++j) {
            xh[j] = static_cast<S>((row[j] - mean) * istd);
            o[j] = xh[j] * gp[j] + bp[j];
        }
    }
    return finish_op<S>("layer_norm", std::move(out), {x, gain, bias},
                        [xhat, inv_std, R, d](Node<S>& n) {
        auto& x = n.parents[0];
        auto& gain = n.parents[1];
        auto& bias = n.parents[2];
        const S* og = n.grad.ptr();
        const S* gp = gain->value.ptr();
        if (gain->requires_grad) {
            S* gg = gain->ensure_grad().ptr();
            for (int64_t r = 0; r < R; ++r) {
                const S* xh = xhat->ptr() + r * d;
                const S* dy = og + r * d;
                for (int64_t j = 0; j < d; ++j) gg[j] += dy[j] * xh[j];
            }
        }
        if (bias->requires_grad) {
            S* bg = bias->ensure_grad().ptr();
            for (int64_t r = 0; r < R; ++r) {
                const S* dy = og + r * d;
                for (int64_t j = 0; j < d; ++j) bg[j] += dy[j];
            }
        }
        if (x->requires_grad) {
            S* xg = x->ensure_grad().ptr();
            for (int64_t r = 0; r < R; ++r) {
                const S* xh = xhat->ptr() + r * d;
                const S* dy = og + r * d;
                double istd = (*inv_std)[static_cast<size_t>(r)];
                double m1 = 0, m2 = 0;  // mean(dy*g), mean(dy*g*xhat)
                for (int64_t j = 0; j < d; ++j) {
                    double dg = double(dy[j]) * gp[j];
                    m1 += dg;
                    m2 += dg * xh[j];
                }
                m1 /= double(d);
                m2 /= double(d);
                S* dst = xg + r * d;
                for (int64_t j = 0; j < d; ++j) {
                    double dg = double(dy[j]) * gp[j];
                    dst[j] += static_cast<S>(istd * (dg - m1 - double(xh[j]) * m2));
                }
            }
        }
    });
}

// ---- attention ---------------------------------------------------------------

template <class S>
Var<S> causal_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int32_t B, int32_t T,
                        int32_t heads) {
    require_2d(q->value, "causal_attention");
    int64_t R = q->value.rows(), d = q->value.cols();
    if (R != int64_t(B) * T)
        throw std::invalid_argument("causal_attention: rows != B*T");
    if (!q->value.same_shape(k->value) || !q->value.same_shape(v->value))
        throw std::invalid_argument("causal_attention: q/k/v shapes differ");
    if (d % heads != 0)
        throw std::invalid_argument("causal_attention: d not divisible by heads");
    int64_t dh = d / heads;
    double alpha = 1.0 / std::sqrt(double(dh));

    // per-(batch,head) post-softmax attention weights, kept for backward
    auto probs = std::make_shared<std::vector<S>>(size_t(B) * heads * T * T);
    Tensor<S> out({R, d});

#pragma omp parallel for collapse(2) schedule(static)
    for (int32_t b = 0; b < B; ++b) {
        for (int32_t h = 0; h < heads; ++h) {
            CStridedMap<S> Q(q->value.ptr() + int64_t(b) * T * d + h * dh, T, dh,
                             Eigen::OuterStride<>(d));
            CStridedMap<S> K(k->value.ptr() + int64_t(b) * T * d + h * dh, T, dh,
                             Eigen::OuterStride<>(d));
            CStridedMap<S> V(v->value.ptr() + int64_t(b) * T * d + h * dh, T, dh,
                             Eigen::OuterStride<>(d));
            Map<S> P(probs->data() + (size_t(b) * heads + h) * T * T, T, T);
            P.noalias() = Q * K.transpose();
            for (int32_t i = 0; i < T; ++i) {
                S* row = P.data() + int64_t(i) * T;
                double mx = -std::numeric_limits<double>::infinity();
                for (int32_t j = 0; j <= i; ++j) mx = std::max(mx, double(row[j]) * alpha);
                double denom = 0;
                for (int32_t j = 0; j <= i; ++j) {
                    double e = std::exp(double(row[j]) * alpha - mx);
                    row[j] = static_cast<S>(e);
                    denom += e;
                }
                for (int32_t j = 0; j <= i; ++j) row[j] = static_cast<S>(row[j] / denom);
                for (int32_t j = i + 1; j < T; ++j) row[j] = S(0);
            }
            StridedMap<S> O(out.ptr() + int64_t(b) * T * d + h * dh, T, dh, Eigen::OuterStride<>(d));
            O.noalias() = P * V;
        }
    }

    return finish_op<S>("causal_attention", std::move(out), {q, k, v},
                        [probs, B, T, heads, d, dh, alpha](Node<S>& n) {
        auto& q = n.parents[0];
        auto& k = n.parents[1];
        auto& v = n.parents[2];
        if (!q->requires_grad && !k->requires_grad && !v->requires_grad) return;
        Tensor<S>& qg = q->ensure_grad();
        Tensor<S>& kg = k->ensure_grad();
        Tensor<S>& vg = v->ensure_grad();
#pragma omp parallel for collapse(2) schedule(static)
        for (int32_t b = 0; b < B; ++b) {
            for (int32_t h = 0; h < heads; ++h) {
                CStridedMap<S> Q(q->value.ptr() + int64_t(b) * T * d + h * dh, T, dh,
                                 Eigen::OuterStride<>(d));
                CStridedMap<S> K(k->value.ptr() + int64_t(b) * T * d + h * dh, T, dh,
                                 Eigen::OuterStride<>(d));
                CStridedMap<S> V(v->value.ptr() + int64_t(b) * T * d + h * dh, T, dh,
                                 Eigen::OuterStride<>(d));
                CMap<S> P(probs->data() + (size_t(b) * heads + h) * T * T, T, T);
                CStridedMap<S> dO(n.grad.ptr() + int64_t(b) * T * d + h * dh, T, dh,
                                  Eigen::OuterStride<>(d));

                EMat<S> dP(T, T);
                dP.noalias() = dO * V.transpose();
                // softmax backward per row; masked entries have P=0 so their
                // dS vanishes automatically
                EMat<S> dS(T, T);
                for (int32_t i = 0; i < T; ++i) {
                    double dot = 0;
                    for (int32_t j = 0; j < T; ++j) dot += double(dP(i, j)) * P(i, j);
                    for (int32_t j = 0; j < T; ++j)
                        dS(i, j) = static_cast<S>(double(P(i, j)) * (double(dP(i, j)) - dot) * alpha);
                }
                StridedMap<S> dQ(qg.ptr() + int64_t(b) * T * d + h * dh, T, dh,
                                 Eigen::OuterStride<>(d));
                StridedMap<S> dK(kg.ptr() + int64_t(b) * T * d + h * dh, T, dh,
                                 Eigen::OuterStride<>(d));
                StridedMap<S> dV(vg.ptr() + int64_t(b) * T * d + h * dh, T, dh,
                                 Eigen::OuterStride<>(d));
                dQ.noalias() += dS * K;
                dK.noalias() += dS.transpose() * Q;
                dV.noalias() += P.transpose() * dO;
            }
        }
    });
}

// ---- losses / softmax ---------------------------------------------------------

template <class S>
Var<S> softmax_cross_entropy(const Var<S>& logits, const std::vector<int32_t>& targets) {
    require_2d(logits->value, "softmax_cross_entropy");
    int64_t R = logits->value.rows(), V = logits->value.cols();
    if (static_cast<int64_t>(targets.size()) != R)
        throw std::invalid_argument("softmax_cross_entropy: target count != rows");
    for (int32_t t : targets)
        if (t < 0 || t >= V)
            throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(t) +
                                    " out of range V=" + std::to_string(V));

    auto probs = std::make_shared<Tensor<S>>(Tensor<S>({R, V}));
    double total = 0;
#pragma omp parallel for schedule(static) reduction(+ : total)
    for (int64_t r = 0; r < R; ++r) {
        const S* row = logits->value.ptr() + r * V;
        S* p = probs->ptr() + r * V;
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < V; ++j) mx = std::max(mx, double(row[j]));
        double denom = 0;
        for (int64_t j = 0; j < V; ++j) {
            double e = std::exp(double(row[j]) - mx);
            p[j] = static_cast<S>(e);
            denom += e;
        }
        double inv = 1.0 / denom;
        for (int64_t j = 0; j < V; ++j) p[j] = static_cast<S>(p[j] * inv);
        total += std::log(denom) + mx - double(row[targets[static_cast<size_t>(r)]]);
    }
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(total / double(R)));
    return finish_op<S>("softmax_cross_entropy", std::move(out), {logits},
                        [probs, targets, R, V](Node<S>& n) {
        auto& logits = n.parents[0];
        if (!logits->requires_grad) return;
        S scale = n.grad.data[0] / static_cast<S>(R);
        S* g = logits->ensure_grad().ptr();
        const S* p = probs->ptr();
        for (int64_t r = 0; r < R; ++r) {
            S* dst = g + r * V;
            const S* src = p + r * V;
            for (int64_t j = 0; j < V; ++j) dst[j] += src[j] * scale;
            dst[targets[static_cast<size_t>(r)]] -= scale;
        }
    });
}

template <class S>
Var<S> softmax_rows(const Var<S>& x) {
    require_2d(x->value, "softmax_rows");
    int64_t R = x->value.rows(), K = x->value.cols();
    Tensor<S> out({R, K});
    for (int64_t r = 0; r < R; ++r) {
        const S* row = x->value.ptr() + r * K;
        S* o = out.ptr() + r * K;
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < K; ++j) mx = std::max(mx, double(row[j]));
        double denom = 0;
        for (int64_t j = 0; j < K; ++j) {
            double e = std::exp(double(row[j]) - mx);
            o[j] = static_cast<S>(e);
            denom += e;
        }
        for (int64_t j = 0; j < K; ++j) o[j] = static_cast<S>(o[j] / denom);
    }
    auto saved = std::make_shared<Tensor<S>>(out);
    return finish_op<S>("softmax_rows", std::move(out), {x}, [saved, R, K](Node<S>& n) {
        auto& x = n.parents[0];
        if (!x->requires_grad) return;
        S* g = x->ensure_grad().ptr();
        const S* og = n.grad.ptr();
        const S* p = saved->ptr();
        for (int64_t r = 0; r < R; ++r) {
            double dot = 0;
            for (int64_t j = 0; j < K; ++j) dot += double(og[r * K + j]) * p[r * K + j];
            for (int64_t j = 0; j < K; ++j)
                g[r * K + j] += static_cast<S>(double(p[r * K + j]) * (double(og[r * K + j]) - dot));
        }
    });
}

template <class S>
Var<S> rows_gather(const Var<S>& p, const std::vector<int32_t>& idx) {
    require_2d(p->value, "rows_gather");
    int64_t R = p->value.rows(), K = p->value.cols();
    if (static_cast<int64_t>(idx.size()) != R)
        throw std::invalid_argument("rows_gather: index count != rows");
    Tensor<S> out({R});
    for (int64_t r = 0; r < R; ++r) {
        int32_t j = idx[static_cast<size_t>(r)];
        if (j < 0 || j >= K) throw std::out_of_range("rows_gather: index out of range");
        out.data[static_cast<size_t>(r)] = p->value.ptr()[r * K + j];
    }
    return finish_op<S>("rows_gather", std::move(out), {p}, [idx, K](Node<S>& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        S* g = p->ensure_grad().ptr();
        const S* og = n.grad.ptr();
        for (size_t r = 0; r < idx.size(); ++r) g[int64_t(r) * K + idx[r]] += og[r];
    });
}

template <class S>
Var<S> scale_rows(const Var<S>& x, const Var<S>& g) {
    require_2d(x->value, "scale_rows");
    int64_t R = x->value.rows(), n = x->value.cols();
    if (g->value.numel() != R)
        throw std::invalid_argument("scale_rows: gate length != rows");
    Tensor<S> out = x->value;
    for (int64_t r = 0; r < R; ++r) {
        S s = g->value.data[static_cast<size_t>(r)];
        S* row = out.ptr() + r * n;
        for (int64_t j = 0; j < n; ++j) row[j] *= s;
    }
    return finish_op<S>("scale_rows", std::move(out), {x, g}, [R, n](Node<S>& node) {
        auto& x = node.parents[0];
        auto& g = node.parents[1];
        const S* og = node.grad.ptr();
        if (x->requires_grad) {
            S* xg = x->ensure_grad().ptr();
            for (int64_t r = 0; r < R; ++r) {
                S s = g->value.data[static_cast<size_t>(r)];
                for (int64_t j = 0; j < n; ++j) xg[r * n + j] += og[r * n + j] * s;
            }
        }
        if (g->requires_grad) {
            S* gg = g->ensure_grad().ptr();
            const S* xv = x->value.ptr();
            for (int64_t r = 0; r < R; ++r) {
                double dot = 0;
                for (int64_t j = 0; j < n; ++j) dot += double(og[r * n + j]) * xv[r * n + j];
                gg[r] += static_cast<S>(dot);
            }
        }
    });
}

template <class S>
Var<S> colmean_dot(const Var<S>& p, const std::vector<double>& w) {
    require_2d(p->value, "colmean_dot");
    int64_t R = p->value.rows(), K = p->value.cols();
    if (static_cast<int64_t>(w.size()) != K)
        throw std::invalid_argument("colmean_dot: weight length != cols");
    double total = 0;
    for (int64_t r = 0; r < R; ++r) {
        const S* row = p->value.ptr() + r * K;
        for (int64_t j = 0; j < K; ++j) total += double(row[j]) * w[static_cast<size_t>(j)];
    }
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(total / double(R)));
    return finish_op<S>("colmean_dot", std::move(out), {p}, [w, R, K](Node<S>& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        S* g = p->ensure_grad().ptr();
        double s = double(n.grad.data[0]) / double(R);
        for (int64_t r = 0; r < R; ++r)
            for (int64_t j = 0; j < K; ++j)
                g[r * K + j] += static_cast<S>(s * w[static_cast<size_t>(j)]);
    });
}

template <class S>
Var<S> sum(const Var<S>& x) {
    double total = 0;
    for (S v : x->value.data) total += double(v);
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(total));
    return finish_op<S>("sum", std::move(out), {x}, [](Node<S>& n) {
        auto& x = n.parents[0];
        if (!x->requires_grad) return;
        S* g = x->ensure_grad().ptr();
        S og = n.grad.data[0];
        for (int64_t i = 0; i < x->value.numel(); ++i) g[i] += og;
    });
}

// ---- mixture-of-experts ops -----------------------------------------------------

namespace {

// rows grouped by expert, each group in ascending row order
std::vector<std::vector<int32_t>> group_rows(const std::vector<int32_t>& expert_of_row, int32_t K) {
    std::vector<std::vector<int32_t>> groups(static_cast<size_t>(K));
    for (size_t r = 0; r < expert_of_row.size(); ++r) {
        int32_t k = expert_of_row[r];
        if (k < 0 || k >= K)
            throw std::out_of_range("expert id " + std::to_string(k) + " out of range K=" +
                                    std::to_string(K));
        groups[static_cast<size_t>(k)].push_back(static_cast<int32_t>(r));
    }
    return groups;
}

template <class S>
EMat<S> gather_rows(const Tensor<S>& src, const std::vector<int32_t>& rows) {
    EMat<S> out(rows.size(), src.cols());
    for (size_t i = 0; i < rows.size(); ++i)
        out.row(static_cast<Eigen::Index>(i)) =
            CMap<S>(src.ptr(), src.rows(), src.cols()).row(rows[i]);
    return out;
}

}  // namespace

template <class S>
Var<S> moe_hash_ffn(const Var<S>& h, const std::vector<int32_t>& expert_of_row,
                    const ExpertBankVars<S>& bank) {
    require_2d(h->value, "moe_hash_ffn");
    const int32_t K = bank.K();
    const int64_t R = h->value.rows(), d = h->value.cols();
    const int64_t D = bank.A.at(0)->value.cols();
    if (static_cast<int64_t>(expert_of_row.size()) != R)
        throw std::invalid_argument("moe_hash_ffn: expert ids != rows");
    auto groups = std::make_shared<std::vector<std::vector<int32_t>>>(group_rows(expert_of_row, K));
    // post-relu activations per expert, reused in backward
    auto acts = std::make_shared<std::vector<EMat<S>>>(static_cast<size_t>(K));

    Tensor<S> out({R, d});
#pragma omp parallel for schedule(dynamic)
    for (int32_t k = 0; k < K; ++k) {
        const auto& rows = (*groups)[static_cast<size_t>(k)];
        if (rows.empty()) continue;
        EMat<S> H = gather_rows(h->value, rows);
        EMat<S> Z(rows.size(), D);
        Z.noalias() = H * as_mat(bank.A[k]->value);
        Z.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(
            bank.bias_a[k]->value.ptr(), D);
        Z = Z.cwiseMax(S(0));
        EMat<S> Y(rows.size(), d);
        Y.noalias() = Z * as_mat(bank.B[k]->value);
        Y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(
            bank.bias_b[k]->value.ptr(), d);
        for (size_t i = 0; i < rows.size(); ++i)
            Map<S>(out.ptr(), R, d).row(rows[i]) = Y.row(static_cast<Eigen::Index>(i));
        (*acts)[static_cast<size_t>(k)] = std::move(Z);
    }

    std::vector<Var<S>> parents = {h};
    for (int32_t k = 0; k < K; ++k) {
        parents.push_back(bank.A[k]);
        parents.push_back(bank.bias_a[k]);
        parents.push_back(bank.B[k]);
        parents.push_back(bank.bias_b[k]);
    }
    return finish_op<S>("moe_hash_ffn", std::move(out), std::move(parents),
                        [groups, acts, K, R, d, D](Node<S>& n) {
        auto& h = n.parents[0];
        bool need_dh = h->requires_grad;
        if (need_dh) h->ensure_grad();
#pragma omp parallel for schedule(dynamic)
        for (int32_t k = 0; k < K; ++k) {
            const auto& rows = (*groups)[static_cast<size_t>(k)];
            if (rows.empty()) continue;
            auto& A = n.parents[1 + 4 * size_t(k)];
            auto& ba = n.parents[2 + 4 * size_t(k)];
            auto& B = n.parents[3 + 4 * size_t(k)];
            auto& bb = n.parents[4 + 4 * size_t(k)];
            const EMat<S>& Z = (*acts)[static_cast<size_t>(k)];

            EMat<S> dY = gather_rows(n.grad, rows);
            if (bb->requires_grad) {
                S* g = bb->ensure_grad().ptr();
                for (int64_t j = 0; j < d; ++j) g[j] += dY.col(j).sum();
            }
            if (B->requires_grad)
                as_mat(B->ensure_grad()).noalias() += Z.transpose() * dY;
            EMat<S> dZ(rows.size(), D);
            dZ.noalias() = dY * as_mat(B->value).transpose();
            dZ = (Z.array() > S(0)).template cast<S>() * dZ.array();
            if (ba->requires_grad) {
                S* g = ba->ensure_grad().ptr();
                for (int64_t j = 0; j < D; ++j) g[j] += dZ.col(j).sum();
            }
            EMat<S> H = gather_rows(h->value, rows);
            if (A->requires_grad)
                as_mat(A->ensure_grad()).noalias() += H.transpose() * dZ;
            if (need_dh) {
                EMat<S> dH(rows.size(), d);
                dH.noalias() = dZ * as_mat(A->value).transpose();
                Map<S> hg(h->grad.ptr(), R, d);
                for (size_t i = 0; i < rows.size(); ++i)
                    hg.row(rows[i]) += dH.row(static_cast<Eigen::Index>(i));
            }
        }
    });
}

template <class S>
Var<S> moe_multihash_ffn(const Var<S>& h, const std::vector<std::vector<int32_t>>& ids_per_segment,
                         const MultiHashBankVars<S>& bank) {
    require_2d(h->value, "moe_multihash_ffn");
    const int32_t N = bank.N;
    const int32_t K = bank.K();
    const int64_t R = h->value.rows(), d = h->value.cols();
    const int64_t Dn = bank.A.at(0).at(0)->value.cols();  // D/N
    const int64_t dn = bank.B.at(0).at(0)->value.cols();  // d/N
    const int64_t D = Dn * N;
    if (static_cast<int64_t>(ids_per_segment.size()) != N)
        throw std::invalid_argument("moe_multihash_ffn: expected " + std::to_string(N) +
                                    " id streams");
    if (dn * N != d)
        throw std::invalid_argument("moe_multihash_ffn: segment output width mismatch");

    auto groups = std::make_shared<std::vector<std::vector<std::vector<int32_t>>>>();
    groups->reserve(static_cast<size_t>(N));
    for (int32_t m = 0; m < N; ++m) {
        if (static_cast<int64_t>(ids_per_segment[static_cast<size_t>(m)].size()) != R)
            throw std::invalid_argument("moe_multihash_ffn: id stream length != rows");
        groups->push_back(group_rows(ids_per_segment[static_cast<size_t>(m)], K));
    }

    // z: pre-relu concat of segment projections, then v = relu(z)
    auto vbuf = std::make_shared<Tensor<S>>(Tensor<S>({R, D}));
    for (int32_t m = 0; m < N; ++m) {
        auto& seg_groups = (*groups)[static_cast<size_t>(m)];
#pragma omp parallel for schedule(dynamic)
        for (int32_t k = 0; k < K; ++k) {
            const auto& rows = seg_groups[static_cast<size_t>(k)];
            if (rows.empty()) continue;
            EMat<S> H = gather_rows(h->value, rows);
            EMat<S> Z(rows.size(), Dn);
            Z.noalias() = H * as_mat(bank.A[m][k]->value);
            Z.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(
                bank.bias_a[m][k]->value.ptr(), Dn);
            Map<S> vb(vbuf->ptr(), R, D);
            for (size_t i = 0; i < rows.size(); ++i)
                vb.block(rows[i], m * Dn, 1, Dn) = Z.row(static_cast<Eigen::Index>(i));
        }
    }
    for (auto& x : vbuf->data) x = x > S(0) ? x : S(0);

    Tensor<S> out({R, d});
    for (int32_t m = 0; m < N; ++m) {
        auto& seg_groups = (*groups)[static_cast<size_t>(m)];
#pragma omp parallel for schedule(dynamic)
        for (int32_t k = 0; k < K; ++k) {
            const auto& rows = seg_groups[static_cast<size_t>(k)];
            if (rows.empty()) continue;
            EMat<S> Vk = gather_rows(*vbuf, rows);
            EMat<S> Y(rows.size(), dn);
            Y.noalias() = Vk * as_mat(bank.B[m][k]->value);
            Y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(
                bank.bias_b[m][k]->value.ptr(), dn);
            Map<S> o(out.ptr(), R, d);
            for (size_t i = 0; i < rows.size(); ++i)
                o.block(rows[i], m * dn, 1, dn) = Y.row(static_cast<Eigen::Index>(i));
        }
    }

    std::vector<Var<S>> parents = {h};
    for (int32_t m = 0; m < N; ++m)
        for (int32_t k = 0; k < K; ++k) {
            parents.push_back(bank.A[m][k]);
            parents.push_back(bank.bias_a[m][k]);
            parents.push_back(bank.B[m][k]);
            parents.push_back(bank.bias_b[m][k]);
        }

    return finish_op<S>("moe_multihash_ffn", std::move(out), std::move(parents),
                        [groups, vbuf, N, K, R, d, D, Dn, dn](Node<S>& n) {
        auto& h = n.parents[0];
        bool need_dh = h->requires_grad;
        if (need_dh) h->ensure_grad();
        auto parent_at = [&](int32_t m, int32_t k, int which) -> Var<S>& {
            return n.parents[1 + 4 * (size_t(m) * K + k) + static_cast<size_t>(which)];
        };

        // B-side backward, accumulating dv across segments
        Tensor<S> dv({R, D});
        for (int32_t m = 0; m < N; ++m) {
            auto& seg_groups = (*groups)[static_cast<size_t>(m)];
#pragma omp parallel for schedule(dynamic)
            for (int32_t k = 0; k < K; ++k) {
                const auto& rows = seg_groups[static_cast<size_t>(k)];
                if (rows.empty()) continue;
                auto& B = parent_at(m, k, 2);
                auto& bb = parent_at(m, k, 3);
                EMat<S> dY(rows.size(), dn);
                {
                    CMap<S> og(n.grad.ptr(), R, d);
                    for (size_t i = 0; i < rows.size(); ++i)
                        dY.row(static_cast<Eigen::Index>(i)) = og.block(rows[i], m * dn, 1, dn);
                }
                if (bb->requires_grad) {
                    S* g = bb->ensure_grad().ptr();
                    for (int64_t j = 0; j < dn; ++j) g[j] += dY.col(j).sum();
                }
                EMat<S> Vk = gather_rows(*vbuf, rows);
                if (B->requires_grad)
                    as_mat(B->ensure_grad()).noalias() += Vk.transpose() * dY;
                EMat<S> dVk(rows.size(), D);
                dVk.noalias() = dY * as_mat(B->value).transpose();
                Map<S> dvm(dv.ptr(), R, D);
                for (size_t i = 0; i < rows.size(); ++i)
                    dvm.row(rows[i]) += dVk.row(static_cast<Eigen::Index>(i));
            }
        }
        // relu mask
        {
            S* dz = dv.ptr();
            const S* vv = vbuf->ptr();
            for (int64_t i = 0; i < R * D; ++i)
                if (!(vv[i] > S(0))) dz[i] = S(0);
        }
        // A-side backward per segment
        for (int32_t m = 0; m < N; ++m) {
            auto& seg_groups = (*groups)[static_cast<size_t>(m)];
#pragma omp parallel for schedule(dynamic)
            for (int32_t k = 0; k < K; ++k) {
                const auto& rows = seg_groups[static_cast<size_t>(k)];
                if (rows.empty()) continue;
                auto& A = parent_at(m, k, 0);
                auto& ba = parent_at(m, k, 1);
                EMat<S> dZ(rows.size(), Dn);
                {
                    CMap<S> dvm(dv.ptr(), R, D);
                    for (size_t i = 0; i < rows.size(); ++i)
                        dZ.row(static_cast<Eigen::Index>(i)) = dvm.block(rows[i], m * Dn, 1, Dn);
                }
                if (ba->requires_grad) {
                    S* g = ba->ensure_grad().ptr();
                    for (int64_t j = 0; j < Dn; ++j) g[j] += dZ.col(j).sum();
                }
                EMat<S> H = gather_rows(h->value, rows);
                if (A->requires_grad)
                    as_mat(A->ensure_grad()).noalias() += H.transpose() * dZ;
                if (need_dh) {
                    EMat<S> dH(rows.size(), d);
                    dH.noalias() = dZ * as_mat(A->value).transpose();
                    Map<S> hg(h->grad.ptr(), R, d);
                    for (size_t i = 0; i < rows.size(); ++i)
                        hg.row(rows[i]) += dH.row(static_cast<Eigen::Index>(i));
                }
            }
        }
    });
}

template <class S>
std::vector<int32_t> argmax_rows(const Tensor<S>& x) {
    int64_t R = x.rows(), C = x.cols();
    std::vector<int32_t> out(static_cast<size_t>(R));
    for (int64_t r = 0; r < R; ++r) {
        const S* row = x.ptr() + r * C;
        int32_t best = 0;
        for (int64_t j = 1; j < C; ++j)
            if (row[j] > row[best]) best = static_cast<int32_t>(j);
        out[static_cast<size_t>(r)] = best;
    }
    return out;
}

// ---- explicit instantiations ----------------------------------------------------

template struct Tensor<float>;
template struct Tensor<double>;

#define HASHMOE_INSTANTIATE(S)                                                                  \
    template void backward<S>(const Var<S>&);                                                   \
    template Var<S> add<S>(const Var<S>&, const Var<S>&);                                       \
    template Var<S> add_bias<S>(const Var<S>&, const Var<S>&);                                  \
    template Var<S> mul<S>(const Var<S>&, const Var<S>&);                                       \
    template Var<S> scale<S>(const Var<S>&, double);                                            \
    template Var<S> relu<S>(const Var<S>&);                                                     \
    template Var<S> matmul<S>(const Var<S>&, const Var<S>&);                                    \
    template Var<S> matmul_nt<S>(const Var<S>&, const Var<S>&);                                 \
    template Var<S> embedding_rows<S>(const Var<S>&, const std::vector<int32_t>&);              \
    template Var<S> layer_norm<S>(const Var<S>&, const Var<S>&, const Var<S>&, double);         \
    template Var<S> causal_attention<S>(const Var<S>&, const Var<S>&, const Var<S>&, int32_t,   \
                                        int32_t, int32_t);                                      \
    template Var<S> softmax_cross_entropy<S>(const Var<S>&, const std::vector<int32_t>&);       \
    template Var<S> softmax_rows<S>(const Var<S>&);                                             \
    template Var<S> rows_gather<S>(const Var<S>&, const std::vector<int32_t>&);                 \
    template Var<S> scale_rows<S>(const Var<S>&, const Var<S>&);                                \
    template Var<S> colmean_dot<S>(const Var<S>&, const std::vector<double>&);                  \
    template Var<S> sum<S>(const Var<S>&);                                                      \
    template Var<S> moe_hash_ffn<S>(const Var<S>&, const std::vector<int32_t>&,                 \
                                    const ExpertBankVars<S>&);                                  \
    template Var<S> moe_multihash_ffn<S>(const Var<S>&,                                         \
                                         const std::vector<std::vector<int32_t>>&,              \
                                         const MultiHashBankVars<S>&);                          \
    template std::vector<int32_t> argmax_rows<S>(const Tensor<S>&);

HASHMOE_INSTANTIATE(float)
HASHMOE_INSTANTIATE(double)

#undef HASHMOE_INSTANTIATE

}  // namespace hashmoe
