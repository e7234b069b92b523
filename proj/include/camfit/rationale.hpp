#pragma once

// The attention-fitting machinery: class-activation maps taken from the
// contrastive objective, the K-projection max-out branch that learns to
// mimic them, the KL fitting loss tying the two together, and the
// inference-time attention pooling.
//
// Conventions: maps are [N, H, W]; feature maps [N, C, H, W]. All ops accept
// batches; single-map semantics are the N=1 case.

#include <string>
#include <vector>

#include "camfit/autodiff.hpp"
#include "camfit/nn.hpp"

namespace camfit {

// Which scalar the activation map differentiates. positive_logit follows the
// training pseudocode (sum of raw positive logits over the batch); full_loss
// differentiates the negated contrastive loss itself (proportional per the
// logit/loss gradient relationship); supervised_ce is the classic
// label-driven variant, available to callers that bring their own objective.
enum class GradcamSource { positive_logit, full_loss, supervised_ce };

inline GradcamSource parse_gradcam_source(const std::string& s) {
    if (s == "positive-logit") return GradcamSource::positive_logit;
    if (s == "full-loss") return GradcamSource::full_loss;
    if (s == "supervised-ce") return GradcamSource::supervised_ce;
    throw ConfigError("unknown gradcam source: " + s);
}

inline std::string to_string(GradcamSource s) {
    switch (s) {
        case GradcamSource::positive_logit: return "positive-logit";
        case GradcamSource::full_loss: return "full-loss";
        case GradcamSource::supervised_ce: return "supervised-ce";
    }
    return "?";
}

struct LossWeights {
    double lambda_cl = 1.0;  // contrastive weight
    double nu_kl = 0.01;     // fitting-loss weight

    void validate() const {
        CAMFIT_CHECK(lambda_cl >= 0 && nu_kl >= 0, ConfigError,
                     "loss weights must be non-negative");
        CAMFIT_CHECK(lambda_cl > 0 || nu_kl > 0, ConfigError, "loss weights cannot both be zero");
    }
};

// ---------------------------------------------------------------------------
// gradcam: G[i,j] = ReLU( g[i,j] . phi[i,j] ), detached.
// ---------------------------------------------------------------------------

// Differentiates `objective` w.r.t. `feature_map` on their shared tape via a
// scratch query -- parameter gradients stay untouched -- and contracts the
// channel axis against the activations. The result is a plain tensor: no
// gradient ever flows back through it.
template <typename T>
Tensor<T> gradcam(Var<T> objective, Var<T> feature_map) {
    CAMFIT_CHECK(objective.defined() && feature_map.defined(), UsageError,
                 "gradcam: undefined operands");
    CAMFIT_CHECK(objective.value().numel() == 1, UsageError, "gradcam: objective must be scalar");
    CAMFIT_CHECK(feature_map.shape().size() == 4, ArgumentError,
                 "gradcam: feature map must be [N,C,H,W]");
    auto g = objective.tape()->grad(objective, feature_map);
    CAMFIT_CHECK(g.has_value(), UsageError,
                 "gradcam: objective is not differentiable w.r.t. the feature map");
    const int64_t N = feature_map.shape()[0], C = feature_map.shape()[1];
    const int64_t HW = feature_map.shape()[2] * feature_map.shape()[3];
    const T* gv = g->data();
    const T* fv = feature_map.value().data();
    Tensor<T> out({N, feature_map.shape()[2], feature_map.shape()[3]});
    kernels::parallel_for(N, [&](int64_t n) {
        T* o = out.data() + n * HW;
        for (int64_t i = 0; i < HW; ++i) {
            T s = 0;
            for (int64_t c = 0; c < C; ++c) {
                const int64_t at = (n * C + c) * HW + i;
                s += gv[at] * fv[at];
            }
            o[i] = s > T(0) ? s : T(0);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// The fitting branch: K bias-free projections, channel-wise max-out.
// ---------------------------------------------------------------------------

template <typename T>
class RationaleBranch {
  public:
    RationaleBranch(int64_t k, int64_t channels, uint64_t seed) : k_(k), c_(channels) {
        CAMFIT_CHECK(k >= 1, ConfigError, "rationale branch: K must be >= 1");
        CAMFIT_CHECK(channels >= 1, ConfigError, "rationale branch: C must be >= 1");
        Rng rng(stream_seed(seed, {0x22}));
        weight_ = &params_.add("branch.proj.weight", init::kaiming_normal<T>({k, channels},
                                                                             channels, rng));
    }

    RationaleBranch(const RationaleBranch&) = delete;
    RationaleBranch& operator=(const RationaleBranch&) = delete;

    // Per-projection response maps: [N, K, H, W].
    Var<T> projection_maps(Tape<T>& tape, Var<T> feature_map) const {
        check_channels(feature_map);
        Var<T> w = ops::reshape(tape.param(*weight_), {k_, c_, 1, 1});
        return ops::conv2d(feature_map, w, std::nullopt, 1, 0);
    }

    // Raw attention A[i,j] = max_k ( w_k . phi[i,j] ): [N, H, W]. Gradient
    // flows to both the projections and the feature map. An optional subset
    // restricts the max to selected projections (used by the
    // high-variance-projection analysis).
    Var<T> forward(Tape<T>& tape, Var<T> feature_map,
                   const std::vector<int64_t>& subset = {}) const {
        return ops::channel_max(projection_maps(tape, feature_map), subset);
    }

    int64_t k() const { return k_; }
    int64_t channels() const { return c_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }
    Param<T>& weight() { return *weight_; }

  private:
    void check_channels(Var<T> feature_map) const {
        CAMFIT_CHECK(feature_map.shape().size() == 4, ArgumentError,
                     "rationale branch: feature map must be [N,C,H,W]");
        CAMFIT_CHECK(feature_map.shape()[1] == c_, ConfigError,
                     "rationale branch: feature channels " +
                         std::to_string(feature_map.shape()[1]) + " do not match branch C " +
                         std::to_string(c_));
    }

    int64_t k_, c_;
    ParamStore<T> params_;
    Param<T>* weight_ = nullptr;  // [K, C]
};

template <typename T>
Var<T> gfb_forward(Tape<T>& tape, Var<T> feature_map, const RationaleBranch<T>& branch,
                   const std::vector<int64_t>& subset = {}) {
    return branch.forward(tape, feature_map, subset);
}

// ---------------------------------------------------------------------------
// Normalizations and losses
// ---------------------------------------------------------------------------

// Flatten H*W, softmax at temperature tau, reshape back: a probability
// distribution over grid locations per sample.
template <typename T>
Var<T> softmax_normalize(Var<T> map, T tau) {
    CAMFIT_CHECK(map.shape().size() == 3, ArgumentError, "softmax_normalize: [N,H,W] expected");
    const int64_t N = map.shape()[0], H = map.shape()[1], W = map.shape()[2];
    Var<T> flat = ops::reshape(map, {N, H * W});
    return ops::reshape(ops::softmax_rows(flat, tau), {N, H, W});
}

// Plain-tensor variant for values that are already detached (the fitting
// target): same math, no tape.
template <typename T>
Tensor<T> softmax_normalize(const Tensor<T>& map, T tau) {
    CAMFIT_CHECK(map.ndim() == 3, ArgumentError, "softmax_normalize: [N,H,W] expected");
    CAMFIT_CHECK(tau > T(0), ArgumentError, "softmax_normalize: tau must be positive");
    Tensor<T> out(map.shape());
    kernels::softmax_rows(map.data(), out.data(), map.dim(0), map.dim(1) * map.dim(2), tau);
    return out;
}

// L_KL = mean_n sum_{i,j} A[n,i,j] log(A[n,i,j] / G[n,i,j]); the target G is
// a plain tensor, already detached by construction.
template <typename T>
Var<T> kl_fitting_loss(Var<T> a_norm, const Tensor<T>& g_norm) {
    CAMFIT_CHECK(a_norm.shape().size() == 3, ArgumentError, "kl_fitting_loss: [N,H,W] expected");
    CAMFIT_CHECK(a_norm.value().shape() == g_norm.shape(), ArgumentError,
                 "kl_fitting_loss: shape mismatch " + shape_str(a_norm.shape()) + " vs " +
                     shape_str(g_norm.shape()));
    const int64_t N = a_norm.shape()[0], S = a_norm.shape()[1] * a_norm.shape()[2];
    return ops::kl_rows_mean(ops::reshape(a_norm, {N, S}), g_norm.reshaped({N, S}));
}

// lambda * L_CL + nu * L_KL.
template <typename T>
Var<T> total_loss(Var<T> l_cl, Var<T> l_kl, const LossWeights& w) {
    w.validate();
    CAMFIT_CHECK(l_cl.value().numel() == 1 && l_kl.value().numel() == 1, ArgumentError,
                 "total_loss: scalar inputs expected");
    CAMFIT_CHECK(std::isfinite(l_cl.value()[0]) && std::isfinite(l_kl.value()[0]), NumericError,
                 "total_loss: non-finite loss input");
    return ops::add(ops::scale(l_cl, T(w.lambda_cl)), ops::scale(l_kl, T(w.nu_kl)));
}

// Inference-time rescaling: (A - min A) / (1e-7 + max A) per sample, with the
// degenerate flat-map case mapped to uniform weights. shift_denom switches the
// denominator to max A - min A (a true [0,1] range normalization) for
// comparison runs.
template <typename T>
Var<T> attention_normalize(Var<T> a, bool shift_denom = false) {
    CAMFIT_CHECK(a.shape().size() == 3, ArgumentError, "attention_normalize: [N,H,W] expected");
    const T* av = a.value().data();
    for (int64_t i = 0; i < a.value().numel(); ++i)
        CAMFIT_CHECK(std::isfinite(av[i]), NumericError, "attention_normalize: non-finite input");
    return ops::minmax_normalize(a, shift_denom);
}

// f = sum_{i,j} A'[i,j] * phi[i,j]; no division by the mass.
template <typename T>
Var<T> weighted_pool(Var<T> feature_map, Var<T> a_prime) {
    return ops::weighted_pool(feature_map, a_prime);
}

}  // namespace camfit
