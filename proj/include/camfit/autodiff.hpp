#pragma once

// Tape-based reverse-mode autodiff over Tensor<T>. Design goals, in order:
//
//  1. Exact, deterministic gradients (kernels fix accumulation order).
//  2. A scratch `grad(out, wrt)` query that differentiates an intermediate
//     value without touching parameter gradients. The attention-map machinery
//     needs d(objective)/d(feature map) mid-step, on the same tape that later
//     runs the real backward pass.
//  3. Ops always record their pullbacks; whether a gradient actually flows is
//     decided at backward time, so frozen-model forward passes can still be
//     differentiated with respect to activations.
//
// Nodes own their value (Tensor storage is shared, so wrapping a parameter is
// free) and a per-node adjoint buffer tagged with a walk epoch, which lets
// many backward walks reuse the same tape without clearing anything.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <type_traits>
#include <vector>

#include "camfit/common.hpp"
#include "camfit/kernels.hpp"
#include "camfit/tensor.hpp"

namespace camfit {

template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;

    Param() = default;
    Param(std::string n, Tensor<T> v, bool train = true)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(train) {}

    void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
class Tape;

template <typename T>
struct Node {
    Tensor<T> value;
    std::vector<Node*> parents;
    std::function<void(Tape<T>&, Node<T>&)> pullback;  // empty for leaves
    Param<T>* param = nullptr;                         // set on parameter leaves
    bool needs_grad = false;
    int64_t idx = -1;  // position on the tape

    // Scratch adjoint, valid only when adj_epoch matches the tape's walk.
    std::vector<T> adj;
    uint64_t adj_epoch = 0;
};

// Lightweight handle; the tape owns the node.
template <typename T>
class Var {
  public:
    Var() = default;
    Var(Tape<T>* tape, Node<T>* node) : tape_(tape), node_(node) {}

    bool defined() const { return node_ != nullptr; }
    const Tensor<T>& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    Node<T>* node() const { return node_; }
    Tape<T>* tape() const { return tape_; }

  private:
    Tape<T>* tape_ = nullptr;
    Node<T>* node_ = nullptr;
};

template <typename T>
class Tape {
  public:
    // Constant leaf: participates in forward math, never receives gradient
    // unless targeted via grad().
    Var<T> leaf(Tensor<T> v) {
        Node<T>* n = push();
        n->value = std::move(v);
        return {this, n};
    }

    // Parameter leaf: shares the parameter's storage; backward() accumulates
    // its adjoint into p.grad when the parameter is trainable.
    Var<T> param(Param<T>& p) {
        Node<T>* n = push();
        n->value = p.value;
        n->param = &p;
        n->needs_grad = p.trainable;
        return {this, n};
    }

    Var<T> make(Tensor<T> v, std::vector<Node<T>*> parents,
                std::function<void(Tape<T>&, Node<T>&)> pullback) {
        Node<T>* n = push();
        n->value = std::move(v);
        n->parents = std::move(parents);
        n->pullback = std::move(pullback);
        for (Node<T>* p : n->parents)
            if (p->needs_grad) {
                n->needs_grad = true;
                break;
            }
        return {this, n};
    }

    // Adjoint accessor for pullbacks: zero-initialized on first touch per walk.
    T* adj(Node<T>* n) {
        if (n->adj_epoch != epoch_) {
            n->adj.assign(size_t(n->value.numel()), T(0));
            n->adj_epoch = epoch_;
        }
        return n->adj.data();
    }

    bool touched(const Node<T>* n) const { return n->adj_epoch == epoch_; }

    // Should a pullback bother producing this parent's adjoint?
    bool wants_grad(const Node<T>* n) const {
        if (active_mask_) return (*active_mask_)[size_t(n->idx)] != 0;
        return n->needs_grad;
    }

    // Full backward pass from a scalar: accumulates into Param::grad.
    void backward(Var<T> out) {
        Node<T>* o = check_out(out);
        ++epoch_;
        adj(o)[0] = T(1);
        for (int64_t i = o->idx; i >= 0; --i) {
            Node<T>* n = nodes_[size_t(i)].get();
            if (!touched(n) || !n->needs_grad) continue;
            if (n->param && n->param->trainable) {
                T* g = n->param->grad.data();
                for (int64_t j = 0; j < n->value.numel(); ++j) g[j] += n->adj[size_t(j)];
            }
            if (n->pullback) n->pullback(*this, *n);
        }
    }

    // Scratch gradient of a scalar w.r.t. an intermediate node. Parameter
    // gradients are untouched. Returns nullopt when `out` does not depend on
    // `wrt` (the adjoint never arrives).
    std::optional<Tensor<T>> grad(Var<T> out, Var<T> wrt) {
        Node<T>* o = check_out(out);
        Node<T>* w = wrt.node();
        CAMFIT_CHECK(w != nullptr && wrt.tape() == this, UsageError, "grad: foreign node");
        if (w->idx > o->idx) return std::nullopt;

        // Forward reachability from wrt; only masked nodes can carry the
        // adjoint, so the walk skips everything else (in particular the
        // subgraph below wrt, which may be the whole backbone).
        std::vector<char> mask(size_t(o->idx) + 1, 0);
        mask[size_t(w->idx)] = 1;
        for (int64_t i = w->idx + 1; i <= o->idx; ++i) {
            for (Node<T>* p : nodes_[size_t(i)]->parents)
                if (p->idx <= o->idx && mask[size_t(p->idx)]) {
                    mask[size_t(i)] = 1;
                    break;
                }
        }
        if (!mask[size_t(o->idx)]) return std::nullopt;

        ++epoch_;
        adj(o)[0] = T(1);
        active_mask_ = &mask;
        for (int64_t i = o->idx; i >= w->idx; --i) {
            Node<T>* n = nodes_[size_t(i)].get();
            if (!mask[size_t(i)] || !touched(n)) continue;
            if (n->pullback) n->pullback(*this, *n);
        }
        active_mask_ = nullptr;

        if (!touched(w)) return std::nullopt;
        Tensor<T> g(w->value.shape());
        std::copy(w->adj.begin(), w->adj.end(), g.data());
        return g;
    }

    void clear() {
        nodes_.clear();
        epoch_ = 0;
    }

    size_t size() const { return nodes_.size(); }

  private:
    Node<T>* push() {
        nodes_.push_back(std::make_unique<Node<T>>());
        Node<T>* n = nodes_.back().get();
        n->idx = int64_t(nodes_.size()) - 1;
        return n;
    }

    Node<T>* check_out(Var<T> out) {
        CAMFIT_CHECK(out.defined() && out.tape() == this, UsageError, "backward: foreign node");
        CAMFIT_CHECK(out.value().numel() == 1, UsageError,
                     "backward: output must be a scalar, got " + shape_str(out.shape()));
        return out.node();
    }

    std::vector<std::unique_ptr<Node<T>>> nodes_;
    uint64_t epoch_ = 0;
    const std::vector<char>* active_mask_ = nullptr;
};

// ===========================================================================
// Ops. Each computes its value with the shared kernels and records a pullback
// that accumulates into parent adjoints (guarded by wants_grad).
// ===========================================================================

namespace ops {

template <typename T>
Tape<T>& tape_of(Var<T> a) {
    CAMFIT_CHECK(a.defined(), UsageError, "op on undefined Var");
    return *a.tape();
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    CAMFIT_CHECK(same_shape(a.value(), b.value()), ArgumentError,
                 "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> y(a.shape());
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* py = y.data();
    for (int64_t i = 0; i < y.numel(); ++i) py[i] = pa[i] + pb[i];
    return tape_of(a).make(std::move(y), {a.node(), b.node()}, [](Tape<T>& tp, Node<T>& self) {
        for (Node<T>* p : self.parents)
            if (tp.wants_grad(p)) {
                T* g = tp.adj(p);
                for (int64_t i = 0; i < self.value.numel(); ++i) g[i] += self.adj[size_t(i)];
            }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
    Tensor<T> y(a.shape());
    const T* pa = a.value().data();
    T* py = y.data();
    for (int64_t i = 0; i < y.numel(); ++i) py[i] = c * pa[i];
    return tape_of(a).make(std::move(y), {a.node()}, [c](Tape<T>& tp, Node<T>& self) {
        Node<T>* p = self.parents[0];
        if (!tp.wants_grad(p)) return;
        T* g = tp.adj(p);
        for (int64_t i = 0; i < self.value.numel(); ++i) g[i] += c * self.adj[size_t(i)];
    });
}

template <typename T>
Var<T> sum(Var<T> a) {
    T s = 0;
    const T* pa = a.value().data();
    for (int64_t i = 0; i < a.value().numel(); ++i) s += pa[i];
    return tape_of(a).make(Tensor<T>::scalar(s), {a.node()}, [](Tape<T>& tp, Node<T>& self) {
        Node<T>* p = self.parents[0];
        if (!tp.wants_grad(p)) return;
        const T g = self.adj[0];
        T* gp = tp.adj(p);
        for (int64_t i = 0; i < p->value.numel(); ++i) gp[i] += g;
    });
}

// Cut the graph: same values, no history. Used for key-branch embeddings and
// for attention-map targets that must act as constants.
template <typename T>
Var<T> detach(Var<T> a) {
    return tape_of(a).leaf(a.value());
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
    Tensor<T> y = a.value().reshaped(std::move(shape));
    return tape_of(a).make(std::move(y), {a.node()}, [](Tape<T>& tp, Node<T>& self) {
        Node<T>* p = self.parents[0];
        if (!tp.wants_grad(p)) return;
        T* g = tp.adj(p);
        for (int64_t i = 0; i < self.value.numel(); ++i) g[i] += self.adj[size_t(i)];
    });
}

template <typename T>
Var<T> relu(Var<T> a) {
    Tensor<T> y(a.shape());
    kernels::relu_forward(a.value().numel(), a.value().data(), y.data());
    return tape_of(a).make(std::move(y), {a.node()}, [](Tape<T>& tp, Node<T>& self) {
        Node<T>* p = self.parents[0];
        if (!tp.wants_grad(p)) return;
        kernels::relu_backward(p->value.numel(), p->value.data(), self.adj.data(), tp.adj(p));
    });
}

// ---------------------------------------------------------------------------
// conv2d: x [N,C,H,W], w [OC,C,kh,kw], optional bias [OC] -> [N,OC,OH,OW]
// ---------------------------------------------------------------------------
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::type_identity_t<std::optional<Var<T>>> bias,
              int64_t stride, int64_t pad) {
    CAMFIT_CHECK(x.shape().size() == 4 && w.shape().size() == 4, ArgumentError,
                 "conv2d: expected 4-d input and weight");
    const int64_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int64_t OC = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    CAMFIT_CHECK(w.shape()[1] == C, ArgumentError, "conv2d: channel mismatch");
    const int64_t OH = kernels::conv_out_dim(H, kh, stride, pad);
    const int64_t OW = kernels::conv_out_dim(W, kw, stride, pad);
    CAMFIT_CHECK(OH > 0 && OW > 0, ArgumentError, "conv2d: output would be empty");
    const int64_t Kc = C * kh * kw, S = OH * OW;
    const bool unit = (kh == 1 && kw == 1 && stride == 1 && pad == 0);

    Tensor<T> y({N, OC, OH, OW});
    // Keep the unfolded patches for backward; for 1x1/stride-1 convolutions
    // im2col is the identity, so skip the copy entirely.
    auto cols = std::make_shared<std::vector<T>>(unit ? 0 : size_t(N * Kc * S));
    {
        const T* xp = x.value().data();
        T* yp = y.data();
        const T* wp = w.value().data();
        kernels::parallel_for(N, [&](int64_t n) {
            const T* col;
            if (unit) {
                col = xp + n * C * H * W;
            } else {
                T* cb = cols->data() + n * Kc * S;
                kernels::im2col(xp + n * C * H * W, cb, C, H, W, kh, kw, stride, pad, OH, OW);
                col = cb;
            }
            kernels::gemm(wp, col, yp + n * OC * S, OC, Kc, S);
        });
        if (bias) {
            CAMFIT_CHECK(bias->value().numel() == OC, ArgumentError, "conv2d: bias size");
            kernels::add_bias_nchw(yp, bias->value().data(), N, OC, S);
        }
    }

    std::vector<Node<T>*> parents = {x.node(), w.node()};
    if (bias) parents.push_back(bias->node());
    return tape_of(x).make(
        std::move(y), std::move(parents),
        [=](Tape<T>& tp, Node<T>& self) {
            Node<T>* xn = self.parents[0];
            Node<T>* wn = self.parents[1];
            const T* dy = self.adj.data();
            const T* xp = xn->value.data();
            if (tp.wants_grad(wn)) {
                // dW[OC,Kc] += sum_n dY_n [OC,S] * col_n^T [S,Kc]; serial over
                // samples for a fixed accumulation order.
                T* dw = tp.adj(wn);
                std::vector<T> colt(size_t(S * Kc));
                std::vector<T> colbuf(unit ? size_t(0) : size_t(0));
                for (int64_t n = 0; n < N; ++n) {
                    const T* col = unit ? xp + n * C * H * W : cols->data() + n * Kc * S;
                    kernels::transpose(col, colt.data(), Kc, S);
                    kernels::gemm(dy + n * OC * S, colt.data(), dw, OC, S, Kc,
                                  /*accumulate=*/true);
                }
            }
            if (tp.wants_grad(xn)) {
                const T* wp = wn->value.data();
                std::vector<T> wt(size_t(Kc * OC));
                kernels::transpose(wp, wt.data(), OC, Kc);
                T* dx = tp.adj(xn);
                kernels::parallel_for(N, [&](int64_t n) {
                    if (unit) {
                        kernels::gemm(wt.data(), dy + n * OC * S, dx + n * C * H * W, Kc, OC, S,
                                      /*accumulate=*/true);
                    } else {
                        std::vector<T> dcol(size_t(Kc * S));
                        kernels::gemm(wt.data(), dy + n * OC * S, dcol.data(), Kc, OC, S);
                        kernels::col2im(dcol.data(), dx + n * C * H * W, C, H, W, kh, kw, stride,
                                        pad, OH, OW);
                    }
                });
            }
            if (self.parents.size() > 2 && tp.wants_grad(self.parents[2])) {
                T* db = tp.adj(self.parents[2]);
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t oc = 0; oc < OC; ++oc) {
                        const T* row = dy + (n * OC + oc) * S;
                        T s = 0;
                        for (int64_t i = 0; i < S; ++i) s += row[i];
                        db[oc] += s;
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// Batch norm over channels; works for [N,C,H,W] and [N,D] (D as channels).
// ---------------------------------------------------------------------------

template <typename T>
struct BnBuffers {
    Tensor<T> running_mean;
    Tensor<T> running_var;
    explicit BnBuffers(int64_t c)
        : running_mean({c}), running_var(Tensor<T>::full({c}, T(1))) {}
    BnBuffers() = default;
};

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BnBuffers<T>& bufs, bool training,
                  bool update_running, T momentum = T(0.1), T eps = T(1e-5)) {
    const auto& sh = x.shape();
    CAMFIT_CHECK(sh.size() == 2 || sh.size() == 4, ArgumentError, "batch_norm: 2-d or 4-d input");
    const int64_t N = sh[0], C = sh[1];
    const int64_t HW = sh.size() == 4 ? sh[2] * sh[3] : 1;
    CAMFIT_CHECK(gamma.value().numel() == C && beta.value().numel() == C, ArgumentError,
                 "batch_norm: affine parameter size mismatch");
    CAMFIT_CHECK(bufs.running_mean.numel() == C, StateError, "batch_norm: buffer size mismatch");

    auto mean = std::make_shared<std::vector<T>>(size_t(C));
    auto var = std::make_shared<std::vector<T>>(size_t(C));
    if (training) {
        const int64_t M = N * HW;
        CAMFIT_CHECK(M > 1, NumericError, "batch_norm: batch statistics need > 1 element");
        kernels::bn_channel_stats(x.value().data(), N, C, HW, mean->data(), var->data());
        if (update_running) {
            // Torch-style: running <- (1-m)*running + m*batch, unbiased var.
            T* rm = bufs.running_mean.data();
            T* rv = bufs.running_var.data();
            const T unbias = T(M) / T(M - 1);
            for (int64_t c = 0; c < C; ++c) {
                rm[c] = (T(1) - momentum) * rm[c] + momentum * (*mean)[size_t(c)];
                rv[c] = (T(1) - momentum) * rv[c] + momentum * (*var)[size_t(c)] * unbias;
            }
        }
    } else {
        std::copy(bufs.running_mean.data(), bufs.running_mean.data() + C, mean->data());
        std::copy(bufs.running_var.data(), bufs.running_var.data() + C, var->data());
    }

    Tensor<T> y(sh);
    auto xhat = std::make_shared<std::vector<T>>(size_t(N * C * HW));
    kernels::bn_normalize(x.value().data(), y.data(), xhat->data(), N, C, HW, mean->data(),
                          var->data(), gamma.value().data(), beta.value().data(), eps);

    return tape_of(x).make(
        std::move(y), {x.node(), gamma.node(), beta.node()},
        [=](Tape<T>& tp, Node<T>& self) {
            Node<T>* xn = self.parents[0];
            Node<T>* gn = self.parents[1];
            Node<T>* bn = self.parents[2];
            // dgamma/dbeta are cheap; compute them into local buffers and
            // hand out only what is wanted.
            std::vector<T> dgamma(size_t(C), T(0)), dbeta(size_t(C), T(0));
            std::vector<T> dx_local;
            T* dx = nullptr;
            if (tp.wants_grad(xn)) dx = tp.adj(xn);
            else {
                dx_local.assign(size_t(N * C * HW), T(0));
                dx = dx_local.data();
            }
            if (training) {
                kernels::bn_backward(xhat->data(), self.adj.data(), dx, dgamma.data(),
                                     dbeta.data(), N, C, HW, var->data(), gn->value.data(), eps);
            } else {
                kernels::bn_backward_eval(self.adj.data(), dx, dgamma.data(), dbeta.data(),
                                          xhat->data(), N, C, HW, var->data(), gn->value.data(),
                                          eps);
            }
            if (tp.wants_grad(gn)) kernels::axpy(C, T(1), dgamma.data(), tp.adj(gn));
            if (tp.wants_grad(bn)) kernels::axpy(C, T(1), dbeta.data(), tp.adj(bn));
        });
}

template <typename T>
Var<T> max_pool2d(Var<T> x, int64_t k, int64_t stride, int64_t pad) {
    const auto& sh = x.shape();
    CAMFIT_CHECK(sh.size() == 4, ArgumentError, "max_pool2d: 4-d input expected");
    const int64_t N = sh[0], C = sh[1], H = sh[2], W = sh[3];
    const int64_t OH = kernels::conv_out_dim(H, k, stride, pad);
    const int64_t OW = kernels::conv_out_dim(W, k, stride, pad);
    CAMFIT_CHECK(OH > 0 && OW > 0, ArgumentError, "max_pool2d: output would be empty");
    Tensor<T> y({N, C, OH, OW});
    auto argmax = std::make_shared<std::vector<int64_t>>(size_t(N * C * OH * OW));
    kernels::maxpool_forward(x.value().data(), y.data(), argmax->data(), N, C, H, W, k, stride,
                             pad, OH, OW);
    return tape_of(x).make(std::move(y), {x.node()}, [=](Tape<T>& tp, Node<T>& self) {
        Node<T>* p = self.parents[0];
        if (!tp.wants_grad(p)) return;
        kernels::maxpool_backward(self.adj.data(), tp.adj(p), argmax->data(), N, C, H * W,
                                  OH * OW);
    });
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
    const auto& sh = x.shape();
    CAMFIT_CHECK(sh.size() == 4, ArgumentError, "global_avg_pool: 4-d input expected");
    const int64_t N = sh[0], C = sh[1], HW = sh[2] * sh[3];
    Tensor<T> y({N, C});
    kernels::gap_forward(x.value().data(), y.data(), N, C, HW);
    return tape_of(x).make(std::move(y), {x.node()}, [=](Tape<T>& tp, Node<T>& self) {
        Node<T>* p = self.parents[0];
        if (!tp.wants_grad(p)) return;
        kernels::gap_backward(self.adj.data(), tp.adj(p), N, C, HW);
    });
}

// x [N,in] * w [in,out] (+ bias[out]) -> [N,out]. Weights are stored
// input-major so both passes run the reduction-free GEMM.
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::type_identity_t<std::optional<Var<T>>> bias) {
    CAMFIT_CHECK(x.shape().size() == 2 && w.shape().size() == 2, ArgumentError,
                 "linear: 2-d operands expected");
    const int64_t N = x.shape()[0], In = x.shape()[1], Out = w.shape()[1];
    CAMFIT_CHECK(w.shape()[0] == In, ArgumentError,
                 "linear: weight expects input " + std::to_string(w.shape()[0]) + ", got " +
                     std::to_string(In));
    Tensor<T> y({N, Out});
    kernels::gemm(x.value().data(), w.value().data(), y.data(), N, In, Out);
    if (bias) {
        CAMFIT_CHECK(bias->value().numel() == Out, ArgumentError, "linear: bias size");
        kernels::add_bias_rows(y.data(), bias->value().data(), N, Out);
    }
    std::vector<Node<T>*> parents = {x.node(), w.node()};
    if (bias) parents.push_back(bias->node());
    return tape_of(x).make(std::move(y), std::move(parents), [=](Tape<T>& tp, Node<T>& self) {
        Node<T>* xn = self.parents[0];
        Node<T>* wn = self.parents[1];
        const T* dy = self.adj.data();
        if (tp.wants_grad(xn)) {
            std::vector<T> wt(size_t(Out * In));
            kernels::transpose(wn->value.data(), wt.data(), In, Out);
            kernels::gemm(dy, wt.data(), tp.adj(xn), N, Out, In, /*accumulate=*/true);
        }
        if (tp.wants_grad(wn)) {
            std::vector<T> xt(size_t(In * N));
            kernels::transpose(xn->value.data(), xt.data(), N, In);
            kernels::gemm(xt.data(), dy, tp.adj(wn), In, N, Out, /*accumulate=*/true);
        }
        if (self.parents.size() > 2 && tp.wants_grad(self.parents[2])) {
            T* db = tp.adj(self.parents[2]);
            for (int64_t n = 0; n < N; ++n)
                for (int64_t j = 0; j < Out; ++j) db[j] += dy[n * Out + j];
        }
    });
}

// Row-wise L2 normalization: y_n = x_n / ||x_n||.
template <typename T>
Var<T> l2_normalize_rows(Var<T> x) {
    CAMFIT_CHECK(x.shape().size() == 2, ArgumentError, "l2_normalize_rows: 2-d input expected");
    const int64_t N = x.shape()[0], D = x.shape()[1];
    Tensor<T> y({N, D});
    auto inv = std::make_shared<std::vector<T>>(size_t(N));
    for (int64_t n = 0; n < N; ++n) {
        const T* xr = x.value().data() + n * D;
        T s = 0;
        for (int64_t j = 0; j < D; ++j) s += xr[j] * xr[j];
        const T norm = std::sqrt(s);
        CAMFIT_CHECK(norm > T(1e-12), NumericError, "l2_normalize_rows: near-zero row norm");
        (*inv)[size_t(n)] = T(1) / norm;
        T* yr = y.data() + n * D;
        for (int64_t j = 0; j < D; ++j) yr[j] = xr[j] * (*inv)[size_t(n)];
    }
    return tape_of(x).make(std::move(y), {x.node()}, [=](Tape<T>& tp, Node<T>& self) {
        Node<T>* p = self.parents[0];
        if (!tp.wants_grad(p)) return;
        T* gx = tp.adj(p);
        const T* yv = self.value.data();
        const T* g = self.adj.data();
        for (int64_t n = 0; n < N; ++n) {
            const T* yr = yv + n * D;
            const T* gr = g + n * D;
            T dot = 0;
            for (int64_t j = 0; j < D; ++j) dot += gr[j] * yr[j];
            const T s = (*inv)[size_t(n)];
            T* gxr = gx + n * D;
            for (int64_t j = 0; j < D; ++j) gxr[j] += s * (gr[j] - dot * yr[j]);
        }
    });
}

// Per-row dot product of two [N,D] vars -> [N].
template <typename T>
Var<T> rows_dot(Var<T> a, Var<T> b) {
    CAMFIT_CHECK(same_shape(a.value(), b.value()) && a.shape().size() == 2, ArgumentError,
                 "rows_dot: matching 2-d operands expected");
    const int64_t N = a.shape()[0], D = a.shape()[1];
    Tensor<T> y({N});
    for (int64_t n = 0; n < N; ++n) {
        const T* ar = a.value().data() + n * D;
        const T* br = b.value().data() + n * D;
        T s = 0;
        for (int64_t j = 0; j < D; ++j) s += ar[j] * br[j];
        y[n] = s;
    }
    return tape_of(a).make(std::move(y), {a.node(), b.node()}, [=](Tape<T>& tp, Node<T>& self) {
        Node<T>* an = self.parents[0];
        Node<T>* bn = self.parents[1];
        const T* g = self.adj.data();
        if (tp.wants_grad(an)) {
            T* ga = tp.adj(an);
            const T* bv = bn->value.data();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t j = 0; j < D; ++j) ga[n * D + j] += g[n] * bv[n * D + j];
        }
        if (tp.wants_grad(bn)) {
            T* gb = tp.adj(bn);
            const T* av = an->value.data();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t j = 0; j < D; ++j) gb[n * D + j] += g[n] * av[n * D + j];
        }
    });
}

// Similarities of each row of z [N,D] against a fixed bank [Q,D] -> [N,Q].
// The bank is a plain tensor: negatives never receive gradient.
template <typename T>
Var<T> bank_logits(Var<T> z, const Tensor<T>& bank) {
    CAMFIT_CHECK(z.shape().size() == 2 && bank.ndim() == 2, ArgumentError,
                 "bank_logits: 2-d operands expected");
    const int64_t N = z.shape()[0], D = z.shape()[1], Q = bank.dim(0);
    CAMFIT_CHECK(bank.dim(1) == D, ArgumentError, "bank_logits: dimension mismatch");
    Tensor<T> bank_t({D, Q});
    kernels::transpose(bank.data(), bank_t.data(), Q, D);
    Tensor<T> y({N, Q});
    kernels::gemm(z.value().data(), bank_t.data(), y.data(), N, D, Q);
    Tensor<T> bank_copy = bank;  // shared storage, kept alive for backward
    return tape_of(z).make(std::move(y), {z.node()}, [=](Tape<T>& tp, Node<T>& self) {
        Node<T>* p = self.parents[0];
        if (!tp.wants_grad(p)) return;
        kernels::gemm(self.adj.data(), bank_copy.data(), tp.adj(p), N, Q, D, /*accumulate=*/true);
    });
}

// InfoNCE over [positive | negatives] with the positive at index 0, averaged
// over the batch. pos: [N], neg: [N,Q].
template <typename T>
Var<T> info_nce(Var<T> pos, Var<T> neg, T temperature) {
    CAMFIT_CHECK(temperature > T(0), ArgumentError, "info_nce: temperature must be positive");
    CAMFIT_CHECK(pos.shape().size() == 1 && neg.shape().size() == 2 &&
                     pos.shape()[0] == neg.shape()[0],
                 ArgumentError, "info_nce: pos [N] and neg [N,Q] expected");
    const int64_t N = pos.shape()[0], Q = neg.shape()[1];
    auto probs = std::make_shared<std::vector<T>>(size_t(N * (Q + 1)));
    T total = 0;
    for (int64_t n = 0; n < N; ++n) {
        const T a0 = pos.value()[n] / temperature;
        const T* nr = neg.value().data() + n * Q;
        T mx = a0;
        for (int64_t j = 0; j < Q; ++j) mx = std::max(mx, nr[j] / temperature);
        T denom = std::exp(a0 - mx);
        T* pr = probs->data() + n * (Q + 1);
        pr[0] = denom;
        for (int64_t j = 0; j < Q; ++j) {
            pr[j + 1] = std::exp(nr[j] / temperature - mx);
            denom += pr[j + 1];
        }
        for (int64_t j = 0; j <= Q; ++j) pr[j] /= denom;
        total += std::log(denom) + mx - a0;  // -log softmax at the positive
    }
    const T loss = total / T(N);
    CAMFIT_CHECK(std::isfinite(loss), NumericError, "info_nce: non-finite loss");
    return tape_of(pos).make(
        Tensor<T>::scalar(loss), {pos.node(), neg.node()},
        [=](Tape<T>& tp, Node<T>& self) {
            const T g = self.adj[0] / (temperature * T(N));
            Node<T>* pn = self.parents[0];
            Node<T>* nn = self.parents[1];
            if (tp.wants_grad(pn)) {
                T* gp = tp.adj(pn);
                for (int64_t n = 0; n < N; ++n)
                    gp[n] += g * ((*probs)[size_t(n * (Q + 1))] - T(1));
            }
            if (tp.wants_grad(nn)) {
                T* gn = tp.adj(nn);
                for (int64_t n = 0; n < N; ++n) {
                    const T* pr = probs->data() + n * (Q + 1);
                    for (int64_t j = 0; j < Q; ++j) gn[n * Q + j] += g * pr[j + 1];
                }
            }
        });
}

// Row-wise softmax with temperature: rows of x scaled by 1/tau.
template <typename T>
Var<T> softmax_rows(Var<T> x, T tau) {
    CAMFIT_CHECK(tau > T(0), ArgumentError, "softmax_rows: tau must be positive");
    CAMFIT_CHECK(x.shape().size() == 2, ArgumentError, "softmax_rows: 2-d input expected");
    const int64_t R = x.shape()[0], S = x.shape()[1];
    Tensor<T> y({R, S});
    kernels::softmax_rows(x.value().data(), y.data(), R, S, tau);
    return tape_of(x).make(std::move(y), {x.node()}, [=](Tape<T>& tp, Node<T>& self) {
        Node<T>* p = self.parents[0];
        if (!tp.wants_grad(p)) return;
        T* gx = tp.adj(p);
        const T* yv = self.value.data();
        const T* g = self.adj.data();
        kernels::parallel_for(R, [&](int64_t r) {
            const T* yr = yv + r * S;
            const T* gr = g + r * S;
            T dot = 0;
            for (int64_t i = 0; i < S; ++i) dot += gr[i] * yr[i];
            T* gxr = gx + r * S;
            for (int64_t i = 0; i < S; ++i) gxr[i] += yr[i] * (gr[i] - dot) / tau;
        });
    });
}

// Mean over rows of sum_s p log(p/q); q is a fixed target distribution.
template <typename T>
Var<T> kl_rows_mean(Var<T> p, const Tensor<T>& q) {
    CAMFIT_CHECK(p.shape().size() == 2 && same_shape(p.value(), q), ArgumentError,
                 "kl_rows_mean: matching 2-d distributions expected");
    const int64_t R = p.shape()[0], S = p.shape()[1];
    const T eps = T(1e-12);
    T total = 0;
    for (int64_t r = 0; r < R; ++r) {
        const T* pr = p.value().data() + r * S;
        const T* qr = q.data() + r * S;
        for (int64_t i = 0; i < S; ++i) {
            if (pr[i] <= T(0)) continue;  // lim p->0 of p log p/q is 0
            total += pr[i] * (std::log(pr[i]) - std::log(std::max(qr[i], eps)));
        }
    }
    const T loss = total / T(R);
    CAMFIT_CHECK(std::isfinite(loss), NumericError, "kl_rows_mean: non-finite divergence");
    Tensor<T> q_copy = q;
    return tape_of(p).make(Tensor<T>::scalar(loss), {p.node()}, [=](Tape<T>& tp, Node<T>& self) {
        Node<T>* pn = self.parents[0];
        if (!tp.wants_grad(pn)) return;
        const T g = self.adj[0] / T(R);
        T* gp = tp.adj(pn);
        const T* pv = pn->value.data();
        const T* qv = q_copy.data();
        for (int64_t i = 0; i < R * S; ++i) {
            if (pv[i] <= T(0)) continue;
            gp[i] += g * (std::log(pv[i]) - std::log(std::max(qv[i], eps)) + T(1));
        }
    });
}

// Channel-wise max over [N,K,H,W] -> [N,H,W], optionally over a subset of
// channels. Saves the winning channel for backward and for diagnostics.
template <typename T>
Var<T> channel_max(Var<T> x, const std::vector<int64_t>& subset = {}) {
    CAMFIT_CHECK(x.shape().size() == 4, ArgumentError, "channel_max: 4-d input expected");
    const int64_t N = x.shape()[0], K = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
    std::vector<int64_t> idx = subset;
    if (idx.empty()) {
        idx.resize(size_t(K));
        for (int64_t k = 0; k < K; ++k) idx[size_t(k)] = k;
    }
    for (int64_t k : idx)
        CAMFIT_CHECK(k >= 0 && k < K, ArgumentError, "channel_max: subset index out of range");
    Tensor<T> y({N, x.shape()[2], x.shape()[3]});
    auto arg = std::make_shared<std::vector<int64_t>>(size_t(N * HW));
    const T* xv = x.value().data();
    kernels::parallel_for(N, [&](int64_t n) {
        for (int64_t i = 0; i < HW; ++i) {
            T best = xv[(n * K + idx[0]) * HW + i];
            int64_t bk = idx[0];
            for (size_t s = 1; s < idx.size(); ++s) {
                const T v = xv[(n * K + idx[s]) * HW + i];
                if (v > best) {
                    best = v;
                    bk = idx[s];
                }
            }
            y.data()[n * HW + i] = best;
            (*arg)[size_t(n * HW + i)] = bk;
        }
    });
    return tape_of(x).make(std::move(y), {x.node()}, [=](Tape<T>& tp, Node<T>& self) {
        Node<T>* p = self.parents[0];
        if (!tp.wants_grad(p)) return;
        T* gx = tp.adj(p);
        const T* g = self.adj.data();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t i = 0; i < HW; ++i)
                gx[(n * K + (*arg)[size_t(n * HW + i)]) * HW + i] += g[n * HW + i];
    });
}

// Attention-weighted sum of feature vectors: feat [N,C,H,W], attn [N,H,W]
// -> [N,C], f[n,c] = sum_s attn[n,s] * feat[n,c,s]. No renormalization.
template <typename T>
Var<T> weighted_pool(Var<T> feat, Var<T> attn) {
    CAMFIT_CHECK(feat.shape().size() == 4 && attn.shape().size() == 3, ArgumentError,
                 "weighted_pool: feat [N,C,H,W] and attn [N,H,W] expected");
    const int64_t N = feat.shape()[0], C = feat.shape()[1], HW = feat.shape()[2] * feat.shape()[3];
    CAMFIT_CHECK(attn.shape()[0] == N && attn.shape()[1] * attn.shape()[2] == HW, ArgumentError,
                 "weighted_pool: grid mismatch");
    Tensor<T> y({N, C});
    const T* fv = feat.value().data();
    const T* av = attn.value().data();
    kernels::parallel_for(N * C, [&](int64_t nc) {
        const int64_t n = nc / C;
        const T* fr = fv + nc * HW;
        const T* ar = av + n * HW;
        T s = 0;
        for (int64_t i = 0; i < HW; ++i) s += ar[i] * fr[i];
        y.data()[nc] = s;
    });
    return tape_of(feat).make(
        std::move(y), {feat.node(), attn.node()}, [=](Tape<T>& tp, Node<T>& self) {
            Node<T>* fn = self.parents[0];
            Node<T>* an = self.parents[1];
            const T* g = self.adj.data();
            if (tp.wants_grad(fn)) {
                T* gf = tp.adj(fn);
                const T* av2 = an->value.data();
                kernels::parallel_for(N * C, [&](int64_t nc) {
                    const int64_t n = nc / C;
                    const T gv = g[nc];
                    const T* ar = av2 + n * HW;
                    T* gfr = gf + nc * HW;
                    for (int64_t i = 0; i < HW; ++i) gfr[i] += gv * ar[i];
                });
            }
            if (tp.wants_grad(an)) {
                T* ga = tp.adj(an);
                const T* fv2 = fn->value.data();
                kernels::parallel_for(N, [&](int64_t n) {
                    T* gar = ga + n * HW;
                    for (int64_t c = 0; c < C; ++c) {
                        const T gv = g[n * C + c];
                        const T* fr = fv2 + (n * C + c) * HW;
                        for (int64_t i = 0; i < HW; ++i) gar[i] += gv * fr[i];
                    }
                });
            }
        });
}

// Per-projection attention pooling: probs [N,K,S], feat flattened [N,C,S]
// -> [N, K*C] with out[n, k*C+c] = sum_s probs[n,k,s] * feat[n,c,s].
template <typename T>
Var<T> attn_pool_multi(Var<T> probs, Var<T> feat_flat) {
    CAMFIT_CHECK(probs.shape().size() == 3 && feat_flat.shape().size() == 3, ArgumentError,
                 "attn_pool_multi: probs [N,K,S] and feat [N,C,S] expected");
    const int64_t N = probs.shape()[0], K = probs.shape()[1], S = probs.shape()[2];
    const int64_t C = feat_flat.shape()[1];
    CAMFIT_CHECK(feat_flat.shape()[0] == N && feat_flat.shape()[2] == S, ArgumentError,
                 "attn_pool_multi: grid mismatch");
    Tensor<T> y({N, K * C});
    const T* pv = probs.value().data();
    const T* fv = feat_flat.value().data();
    kernels::parallel_for(N * K, [&](int64_t nk) {
        const int64_t n = nk / K, k = nk % K;
        const T* pr = pv + (n * K + k) * S;
        T* yr = y.data() + n * K * C + k * C;
        for (int64_t c = 0; c < C; ++c) {
            const T* fr = fv + (n * C + c) * S;
            T s = 0;
            for (int64_t i = 0; i < S; ++i) s += pr[i] * fr[i];
            yr[c] = s;
        }
    });
    return tape_of(probs).make(
        std::move(y), {probs.node(), feat_flat.node()}, [=](Tape<T>& tp, Node<T>& self) {
            Node<T>* pn = self.parents[0];
            Node<T>* fn = self.parents[1];
            const T* g = self.adj.data();
            if (tp.wants_grad(pn)) {
                T* gp = tp.adj(pn);
                const T* fv2 = fn->value.data();
                kernels::parallel_for(N * K, [&](int64_t nk) {
                    const int64_t n = nk / K, k = nk % K;
                    T* gpr = gp + (n * K + k) * S;
                    for (int64_t c = 0; c < C; ++c) {
                        const T gv = g[n * K * C + k * C + c];
                        const T* fr = fv2 + (n * C + c) * S;
                        for (int64_t i = 0; i < S; ++i) gpr[i] += gv * fr[i];
                    }
                });
            }
            if (tp.wants_grad(fn)) {
                T* gf = tp.adj(fn);
                const T* pv2 = pn->value.data();
                kernels::parallel_for(N * C, [&](int64_t nc) {
                    const int64_t n = nc / C, c = nc % C;
                    T* gfr = gf + nc * S;
                    for (int64_t k = 0; k < K; ++k) {
                        const T gv = g[n * K * C + k * C + c];
                        const T* pr = pv2 + (n * K + k) * S;
                        for (int64_t i = 0; i < S; ++i) gfr[i] += gv * pr[i];
                    }
                });
            }
        });
}

// Per-sample min/max rescaling of a map [N,H,W]:
//   y = (a - min a) / (1e-7 + max a)            shift_denom = false
//   y = (a - min a) / (1e-7 + max a - min a)    shift_denom = true
// A flat map (max == min) yields the uniform distribution 1/(H*W) with zero
// gradient. Differentiable a.e. via the saved arg-extrema.
template <typename T>
Var<T> minmax_normalize(Var<T> a, bool shift_denom = false) {
    CAMFIT_CHECK(a.shape().size() == 3, ArgumentError, "minmax_normalize: [N,H,W] expected");
    const int64_t N = a.shape()[0], HW = a.shape()[1] * a.shape()[2];
    Tensor<T> y(a.shape());
    auto argmin = std::make_shared<std::vector<int64_t>>(size_t(N));
    auto argmax = std::make_shared<std::vector<int64_t>>(size_t(N));
    auto flat = std::make_shared<std::vector<char>>(size_t(N));
    const T* av = a.value().data();
    for (int64_t n = 0; n < N; ++n) {
        const T* ar = av + n * HW;
        int64_t imin = 0, imax = 0;
        for (int64_t i = 1; i < HW; ++i) {
            if (ar[i] < ar[imin]) imin = i;
            if (ar[i] > ar[imax]) imax = i;
        }
        (*argmin)[size_t(n)] = imin;
        (*argmax)[size_t(n)] = imax;
        T* yr = y.data() + n * HW;
        if (ar[imax] - ar[imin] < T(1e-12)) {
            (*flat)[size_t(n)] = 1;
            for (int64_t i = 0; i < HW; ++i) yr[i] = T(1) / T(HW);
        } else {
            const T mn = ar[imin];
            const T denom = T(1e-7) + (shift_denom ? ar[imax] - mn : ar[imax]);
            for (int64_t i = 0; i < HW; ++i) yr[i] = (ar[i] - mn) / denom;
        }
    }
    return tape_of(a).make(std::move(y), {a.node()}, [=](Tape<T>& tp, Node<T>& self) {
        Node<T>* p = self.parents[0];
        if (!tp.wants_grad(p)) return;
        T* ga = tp.adj(p);
        const T* g = self.adj.data();
        const T* av2 = p->value.data();
        for (int64_t n = 0; n < N; ++n) {
            if ((*flat)[size_t(n)]) continue;  // constant branch
            const int64_t imin = (*argmin)[size_t(n)], imax = (*argmax)[size_t(n)];
            const T* ar = av2 + n * HW;
            const T* gr = g + n * HW;
            const T mn = ar[imin];
            const T denom = T(1e-7) + (shift_denom ? ar[imax] - mn : ar[imax]);
            T gsum = 0, gdot = 0;
            for (int64_t i = 0; i < HW; ++i) {
                gsum += gr[i];
                gdot += gr[i] * (ar[i] - mn);
            }
            T* gar = ga + n * HW;
            for (int64_t i = 0; i < HW; ++i) gar[i] += gr[i] / denom;
            gar[imin] -= gsum / denom;
            gar[imax] -= gdot / (denom * denom);
            if (shift_denom) gar[imin] += gdot / (denom * denom);  // d(denom)/d(min) = -1
        }
    });
}

}  // namespace ops
}  // namespace camfit
