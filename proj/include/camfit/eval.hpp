#pragma once
// Downstream evaluation over frozen encoders: feature extraction with the
// per-variant aggregation, leave-one-out retrieval, linear probing at label
// fractions, projection-variance analysis, and collapse detection.
//
// The metric functions work on plain double matrices ([N, D] tensors plus a
// label vector) so they can be oracle-tested without a model in the loop; the
// templated extractors above them bridge from a trained Trainer<T>.

#include <algorithm>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "camfit/data.hpp"
#include "camfit/tensor.hpp"
#include "camfit/trainer.hpp"

namespace camfit {

// ===========================================================================
// Reports
// ===========================================================================

enum class Similarity { cosine, l2 };

std::string to_string(Similarity s);
Similarity parse_similarity(const std::string& s);

struct RetrievalReport {
    double rank1 = 0;  // percentages in [0, 100]
    double rank5 = 0;
    double map = 0;
    int64_t gallery = 0;           // items per query's gallery (N - 1)
    int64_t queries = 0;           // scored queries
    int64_t excluded_queries = 0;  // singleton-class items skipped
    Similarity metric = Similarity::cosine;

    std::string to_json() const;
};

struct ProbeRow {
    double fraction = 1.0;  // of training labels used
    double top1 = 0;        // percentages on the test split
    double top5 = 0;
    double l2_penalty = 0;  // regularization picked on the validation split
};

struct ProbeReport {
    std::vector<ProbeRow> rows;

    std::string to_json() const;
    std::string to_csv() const;
};

struct ProjectionVarianceReport {
    std::vector<double> variance;  // per projection, index-aligned
    std::vector<int64_t> ranking;  // projection indices, variance descending

    std::string to_json() const;
};

struct CollapseReport {
    bool collapsed = false;
    double mean_dim_std = 0;  // of L2-normalized embeddings
    double rank1 = 0;         // cosine retrieval, percent
    double chance = 0;        // 100 / classes, percent
    double std_threshold = 0.01;

    std::string to_json() const;
};

// ===========================================================================
// Metrics on plain feature matrices
// ===========================================================================

// Leave-one-out retrieval: every item queries all others; rank-k counts a
// same-class hit in the top k, mAP averages precision over the full ranked
// gallery. Items whose class has no second member are excluded (one warning
// on `warn` listing the count). Ties rank by lower gallery index.
RetrievalReport retrieval_eval(const Tensor<double>& features,
                               const std::vector<int64_t>& labels,
                               Similarity metric = Similarity::cosine,
                               std::ostream* warn = nullptr);

// Multinomial logistic probe on frozen features: a stratified `fraction` of
// the training labels is kept (empty class -> DataError), the L2 penalty is
// picked from a fixed grid on a held-out fifth of that subsample, and the
// probe is refit on the whole subsample before scoring the test split.
ProbeRow linear_probe(const Tensor<double>& train_features,
                      const std::vector<int64_t>& train_labels,
                      const Tensor<double>& test_features,
                      const std::vector<int64_t>& test_labels, double fraction,
                      uint64_t seed);

// The Table-2 style report: one row per fraction, default {1.0, 0.5, 0.2}.
ProbeReport linear_probe_report(const Tensor<double>& train_features,
                                const std::vector<int64_t>& train_labels,
                                const Tensor<double>& test_features,
                                const std::vector<int64_t>& test_labels,
                                uint64_t seed,
                                const std::vector<double>& fractions = {1.0, 0.5, 0.2});

// Collapse detector: embeddings are L2-normalized, then flagged when the mean
// per-dimension standard deviation falls under 0.01 or, when labels are
// supplied, cosine rank-1 lands within 1.5x of chance (100/classes). Without
// labels only the variance arm runs (rank1/chance report as -1/0). Needs
// >= 50 embeddings.
CollapseReport collapse_check(const Tensor<double>& embeddings,
                              const std::vector<int64_t>& labels = {});

// Feature-matrix cache in the checkpoint container format.
void save_features(const std::string& path, const Tensor<double>& features,
                   const std::vector<int64_t>& labels);
std::pair<Tensor<double>, std::vector<int64_t>> load_features(const std::string& path);

// ===========================================================================
// Dataset -> tensors
// ===========================================================================

struct EvalBatch {
    std::vector<Tensor<float>> images;  // test-transformed [3,S,S]
    std::vector<int64_t> labels;
};

// Loads one split ("train" or "test") and applies the deterministic test
// transform (shorter-side resize, center crop, normalize).
EvalBatch load_eval_split(const DatasetManifest& data, const std::string& split,
                          const AugmentationPolicy& policy);

// ===========================================================================
// Feature extraction
// ===========================================================================

// Per-variant inference aggregation over eval-mode forwards, batched.
//   gap            -> global average pool
//   weighted_pool  -> attention_normalize(branch map) weighted pooling
//   bilinear_pool  -> K*C bilinear aggregation
// `subset` restricts the max-out to those projection indices (Appendix-style
// high-variance analysis); it requires the projection-bank attention path.
// `force_gap` overrides the variant's aggregation with plain pooling.
template <typename T>
Tensor<double> extract_features(Trainer<T>& tr, const std::vector<Tensor<T>>& images,
                                int64_t batch = 64,
                                const std::vector<int64_t>& subset = {},
                                bool force_gap = false) {
    CAMFIT_CHECK(!images.empty(), DataError, "extract_features: no images");
    CAMFIT_CHECK(batch >= 1, ArgumentError, "extract_features: batch must be positive");
    const VariantSpec& spec = tr.variant();
    const EncoderConfig& enc = tr.encoder_config();
    Aggregation agg = force_gap ? Aggregation::gap : spec.test_aggregation;
    if (!subset.empty()) {
        CAMFIT_CHECK(agg == Aggregation::weighted_pool && spec.has_branch && !spec.mlp_branch,
                     ArgumentError,
                     "extract_features: a projection subset needs the max-out attention path");
        for (int64_t k : subset)
            CAMFIT_CHECK(k >= 0 && k < spec.k, ArgumentError,
                         "extract_features: projection index out of range");
    }
    const int64_t n = int64_t(images.size());
    const int64_t dim = force_gap ? spec.channels : spec.feature_dim;
    Tensor<double> out({n, dim});
    for (int64_t lo = 0; lo < n; lo += batch) {
        const int64_t b = std::min(batch, n - lo);
        Tensor<T> block({b, 3, enc.input_size, enc.input_size});
        for (int64_t i = 0; i < b; ++i) {
            const Tensor<float>& img = images[size_t(lo + i)];
            CAMFIT_CHECK(img.ndim() == 3 && img.dim(0) == 3 && img.dim(1) == enc.input_size &&
                             img.dim(2) == enc.input_size,
                         ConfigError,
                         "extract_features: image " + std::to_string(lo + i) + " is " +
                             shape_str(img.shape()) + ", encoder expects [3," +
                             std::to_string(enc.input_size) + "," +
                             std::to_string(enc.input_size) + "]");
            for (int64_t j = 0; j < img.numel(); ++j)
                block[i * img.numel() + j] = T(img[j]);
        }
        Tape<T> tape;
        ForwardCtx ctx{false, false};
        auto enc_out = tr.query().encode(tape, block, ctx);
        Var<T> feats;
        switch (agg) {
            case Aggregation::gap:
                feats = enc_out.pooled;
                break;
            case Aggregation::weighted_pool: {
                Var<T> a_raw = spec.mlp_branch
                                   ? tr.mlp_branch()->forward(tape, enc_out.map)
                                   : tr.branch()->forward(tape, enc_out.map, subset);
                feats = ops::weighted_pool(enc_out.map,
                                           attention_normalize(a_raw, /*shift_denom=*/false));
                break;
            }
            case Aggregation::bilinear_pool:
                feats = bilinear_pool(tape, enc_out.map, *tr.branch(), T(tr.config().tau));
                break;
        }
        const Tensor<T>& fv = feats.value();
        CAMFIT_CHECK(fv.dim(1) == dim, ConfigError,
                     "extract_features: got dimension " + std::to_string(fv.dim(1)) +
                         ", variant promises " + std::to_string(dim));
        for (int64_t i = 0; i < b; ++i)
            for (int64_t d = 0; d < dim; ++d) out.at(lo + i, d) = double(fv.at(i, d));
    }
    return out;
}

// Appendix-style restricted inference: max-out over `subset` only, pooling
// unchanged. subset = all indices reproduces standard inference exactly.
template <typename T>
Tensor<double> subset_projection_inference(Trainer<T>& tr,
                                           const std::vector<Tensor<T>>& images,
                                           const std::vector<int64_t>& subset,
                                           int64_t batch = 64) {
    CAMFIT_CHECK(!subset.empty(), ArgumentError,
                 "subset_projection_inference: empty projection subset");
    return extract_features(tr, images, batch, subset);
}

// Variance of each projection's response w_k . phi over every grid cell of
// every image, with the descending ranking (ties -> lower index first).
template <typename T>
ProjectionVarianceReport projection_variance(Trainer<T>& tr,
                                             const std::vector<Tensor<T>>& images,
                                             int64_t batch = 64) {
    CAMFIT_CHECK(!images.empty(), DataError, "projection_variance: no images");
    const VariantSpec& spec = tr.variant();
    CAMFIT_CHECK(spec.has_branch && !spec.mlp_branch, ConfigError,
                 "projection_variance: variant has no projection bank");
    const EncoderConfig& enc = tr.encoder_config();
    const int64_t k = spec.k;
    std::vector<double> sum(size_t(k), 0.0), sumsq(size_t(k), 0.0);
    int64_t count = 0;
    const int64_t n = int64_t(images.size());
    for (int64_t lo = 0; lo < n; lo += batch) {
        const int64_t b = std::min(batch, n - lo);
        Tensor<T> block({b, 3, enc.input_size, enc.input_size});
        for (int64_t i = 0; i < b; ++i) {
            const Tensor<float>& img = images[size_t(lo + i)];
            CAMFIT_CHECK(img.ndim() == 3 && img.dim(1) == enc.input_size &&
                             img.dim(2) == enc.input_size,
                         ConfigError, "projection_variance: image/encoder size mismatch");
            for (int64_t j = 0; j < img.numel(); ++j)
                block[i * img.numel() + j] = T(img[j]);
        }
        Tape<T> tape;
        ForwardCtx ctx{false, false};
        auto enc_out = tr.query().encode(tape, block, ctx);
        Tensor<T> maps = tr.branch()->projection_maps(tape, enc_out.map).value();  // [b,K,H,W]
        const int64_t cells = maps.dim(2) * maps.dim(3);
        for (int64_t i = 0; i < b; ++i)
            for (int64_t kk = 0; kk < k; ++kk)
                for (int64_t c = 0; c < cells; ++c) {
                    const double v = double(maps[(i * k + kk) * cells + c]);
                    sum[size_t(kk)] += v;
                    sumsq[size_t(kk)] += v * v;
                }
        count += b * cells;
    }
    ProjectionVarianceReport rep;
    rep.variance.resize(size_t(k));
    for (int64_t kk = 0; kk < k; ++kk) {
        const double mean = sum[size_t(kk)] / double(count);
        rep.variance[size_t(kk)] = sumsq[size_t(kk)] / double(count) - mean * mean;
    }
    rep.ranking.resize(size_t(k));
    for (int64_t kk = 0; kk < k; ++kk) rep.ranking[size_t(kk)] = kk;
    std::stable_sort(rep.ranking.begin(), rep.ranking.end(), [&](int64_t a, int64_t b2) {
        return rep.variance[size_t(a)] > rep.variance[size_t(b2)];
    });
    return rep;
}

}  // namespace camfit
