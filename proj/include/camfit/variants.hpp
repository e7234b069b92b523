#pragma once

// The ablation/baseline matrix: every comparison row is instantiated from one
// mode switch plus (K, C). A VariantSpec is immutable after configure_variant
// and fully determines which branches exist, which losses are active, and how
// features are pooled at train and test time.

#include <optional>
#include <string>

#include "camfit/rationale.hpp"

namespace camfit {

enum class VariantMode {
    ours,              // attention-fitted branch; weighted-pool features at test
    ours_multitask,    // same training, but plain GAP features at test
    ours_dualpooling,  // weighted-pool also feeds the projector (collapses by design)
    sam_ssl,           // single-projection branch, GAP at test
    sam_ssl_bilinear,  // per-part bilinear pooling at train and test, with fitting loss
    moco_bilinear,     // bilinear pooling but no fitting loss (branch learns from L_CL only)
    moco_baseline,     // plain contrastive training, no attention branch at all
    mlp_gfb            // two-layer perceptron attention head instead of max-out projections
};

inline const std::vector<std::pair<VariantMode, std::string>>& variant_mode_names() {
    static const std::vector<std::pair<VariantMode, std::string>> names = {
        {VariantMode::ours, "ours"},
        {VariantMode::ours_multitask, "ours-multitask"},
        {VariantMode::ours_dualpooling, "ours-dualpooling"},
        {VariantMode::sam_ssl, "sam-ssl"},
        {VariantMode::sam_ssl_bilinear, "sam-ssl-bilinear"},
        {VariantMode::moco_bilinear, "moco-bilinear"},
        {VariantMode::moco_baseline, "moco-baseline"},
        {VariantMode::mlp_gfb, "mlp-gfb"},
    };
    return names;
}

inline std::string to_string(VariantMode m) {
    for (const auto& [mode, name] : variant_mode_names())
        if (mode == m) return name;
    return "?";
}

inline VariantMode parse_variant_mode(const std::string& s) {
    for (const auto& [mode, name] : variant_mode_names())
        if (name == s) return mode;
    throw ConfigError("unknown variant mode: " + s);
}

enum class Interaction { none, weighted_pool, bilinear_pool };
enum class Aggregation { gap, weighted_pool, bilinear_pool };

inline std::string to_string(Interaction i) {
    switch (i) {
        case Interaction::none: return "none";
        case Interaction::weighted_pool: return "weighted-pool";
        case Interaction::bilinear_pool: return "bilinear-pool";
    }
    return "?";
}

inline std::string to_string(Aggregation a) {
    switch (a) {
        case Aggregation::gap: return "gap";
        case Aggregation::weighted_pool: return "weighted-pool";
        case Aggregation::bilinear_pool: return "bilinear-pool";
    }
    return "?";
}

struct VariantSpec {
    VariantMode mode = VariantMode::ours;
    int64_t k = 32;        // projection count (1 where the mode fixes it)
    int64_t channels = 0;  // feature-map channels C
    Interaction train_interaction = Interaction::none;
    Aggregation test_aggregation = Aggregation::weighted_pool;
    int64_t feature_dim = 0;  // extracted-feature dimension: C, or C*K for bilinear modes

    bool has_branch = true;       // any attention branch exists (false only for the baseline)
    bool mlp_branch = false;      // branch is the two-layer perceptron head
    bool fitting_loss = true;     // KL term active during training
    bool key_has_branch = false;  // momentum-tracked branch copy on the key side
    int64_t mlp_hidden = 32;

    // Width of the vector handed to the projector during training.
    int64_t projector_input() const {
        return train_interaction == Interaction::bilinear_pool ? channels * k : channels;
    }
};

// Builds the spec for a mode. k_override must either be absent or agree with
// any K the mode pins (single-projection and branch-free modes); passing one
// there is a configuration error, not a silent correction.
inline VariantSpec configure_variant(VariantMode mode, std::optional<int64_t> k_override,
                                     int64_t channels, int64_t default_k = 32) {
    CAMFIT_CHECK(channels >= 1, ConfigError, "configure_variant: C must be >= 1");
    CAMFIT_CHECK(default_k >= 1, ConfigError, "configure_variant: default K must be >= 1");
    if (k_override) CAMFIT_CHECK(*k_override >= 1, ConfigError, "configure_variant: K must be >= 1");

    VariantSpec s;
    s.mode = mode;
    s.channels = channels;
    s.k = k_override.value_or(default_k);

    auto pin_k = [&](int64_t forced, const char* why) {
        CAMFIT_CHECK(!k_override || *k_override == forced, ConfigError,
                     std::string("configure_variant: ") + to_string(mode) + " " + why +
                         "; K override " + std::to_string(k_override.value_or(0)) +
                         " is inconsistent");
        s.k = forced;
    };

    switch (mode) {
        case VariantMode::ours:
            s.train_interaction = Interaction::none;
            s.test_aggregation = Aggregation::weighted_pool;
            break;
        case VariantMode::ours_multitask:
            s.train_interaction = Interaction::none;
            s.test_aggregation = Aggregation::gap;
            break;
        case VariantMode::ours_dualpooling:
            s.train_interaction = Interaction::weighted_pool;
            s.test_aggregation = Aggregation::weighted_pool;
            break;
        case VariantMode::sam_ssl:
            pin_k(1, "uses a single projection");
            s.train_interaction = Interaction::none;
            s.test_aggregation = Aggregation::gap;
            break;
        case VariantMode::sam_ssl_bilinear:
            s.train_interaction = Interaction::bilinear_pool;
            s.test_aggregation = Aggregation::bilinear_pool;
            s.key_has_branch = true;
            break;
        case VariantMode::moco_bilinear:
            s.train_interaction = Interaction::bilinear_pool;
            s.test_aggregation = Aggregation::bilinear_pool;
            s.fitting_loss = false;
            s.key_has_branch = true;
            break;
        case VariantMode::moco_baseline:
            pin_k(1, "has no attention branch");
            s.train_interaction = Interaction::none;
            s.test_aggregation = Aggregation::gap;
            s.has_branch = false;
            s.fitting_loss = false;
            break;
        case VariantMode::mlp_gfb:
            pin_k(1, "has a perceptron head, not projections");
            s.train_interaction = Interaction::none;
            s.test_aggregation = Aggregation::weighted_pool;
            s.mlp_branch = true;
            break;
    }
    s.feature_dim = s.test_aggregation == Aggregation::bilinear_pool ? channels * s.k : channels;
    return s;
}

// ---------------------------------------------------------------------------
// Bilinear pooling: per-projection softmax attention, pooled and concatenated.
// ---------------------------------------------------------------------------

// For each projection k: M_k = w_k . phi, normalized over the grid by a
// temperature-tau softmax, then f_k = sum_ij M'_k[i,j] * phi[i,j]. Output is
// [f_1 ... f_K] per sample: [N, K*C]. Gradient flows into both W and phi.
template <typename T>
Var<T> bilinear_pool(Tape<T>& tape, Var<T> feature_map, const RationaleBranch<T>& branch, T tau) {
    CAMFIT_CHECK(feature_map.shape().size() == 4, ArgumentError,
                 "bilinear_pool: feature map must be [N,C,H,W]");
    const int64_t N = feature_map.shape()[0], C = feature_map.shape()[1];
    const int64_t S = feature_map.shape()[2] * feature_map.shape()[3];
    Var<T> maps = branch.projection_maps(tape, feature_map);  // [N,K,H,W]
    const int64_t K = branch.k();
    Var<T> probs = ops::reshape(ops::softmax_rows(ops::reshape(maps, {N * K, S}), tau), {N, K, S});
    return ops::attn_pool_multi(probs, ops::reshape(feature_map, {N, C, S}));
}

// ---------------------------------------------------------------------------
// Perceptron attention head: per-location two-layer MLP (1x1 convolutions).
// ---------------------------------------------------------------------------

template <typename T>
class MlpBranch {
  public:
    MlpBranch(int64_t channels, int64_t hidden, uint64_t seed) : c_(channels), hidden_(hidden) {
        CAMFIT_CHECK(channels >= 1, ConfigError, "mlp branch: C must be >= 1");
        CAMFIT_CHECK(hidden >= 1, ConfigError, "mlp branch: hidden width must be >= 1");
        Rng rng(stream_seed(seed, {0x23}));
        fc1_ = Conv2dLayer<T>(params_, "branch.mlp.fc1", channels, hidden, 1, 1, 0, true, rng);
        fc2_ = Conv2dLayer<T>(params_, "branch.mlp.fc2", hidden, 1, 1, 1, 0, true, rng);
    }

    MlpBranch(const MlpBranch&) = delete;
    MlpBranch& operator=(const MlpBranch&) = delete;

    // phi [N,C,H,W] -> raw attention [N,H,W].
    Var<T> forward(Tape<T>& tape, Var<T> feature_map) const {
        CAMFIT_CHECK(feature_map.shape().size() == 4, ArgumentError,
                     "mlp branch: feature map must be [N,C,H,W]");
        CAMFIT_CHECK(feature_map.shape()[1] == c_, ConfigError,
                     "mlp branch: feature channels " + std::to_string(feature_map.shape()[1]) +
                         " do not match configured C " + std::to_string(c_));
        const int64_t N = feature_map.shape()[0];
        const int64_t H = feature_map.shape()[2], W = feature_map.shape()[3];
        Var<T> h = ops::relu(fc1_.forward(tape, feature_map));
        return ops::reshape(fc2_.forward(tape, h), {N, H, W});
    }

    int64_t channels() const { return c_; }
    int64_t hidden() const { return hidden_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

  private:
    int64_t c_, hidden_;
    ParamStore<T> params_;
    Conv2dLayer<T> fc1_, fc2_;
};

}  // namespace camfit
