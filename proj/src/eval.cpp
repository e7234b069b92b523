// Metric implementations for the evaluation module: leave-one-out retrieval,
// the multinomial logistic probe, collapse detection, feature caching, and
// dataset-to-tensor plumbing. Everything here is deterministic: fixed seeds,
// stable tie-breaking, no data-dependent thread scheduling.

#include "camfit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <set>

#include <json.hpp>

#include "camfit/checkpoint.hpp"
#include "camfit/image.hpp"
#include "camfit/kernels.hpp"

namespace camfit {

namespace {

// %.9g keeps float32-representable values exact and stays compact for report
// files that are diffed across runs.
std::string fmt_g9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

void check_matrix(const Tensor<double>& features, const std::vector<int64_t>& labels,
                  const char* who) {
    CAMFIT_CHECK(features.ndim() == 2, ArgumentError,
                 std::string(who) + ": features must be [N,D], got " +
                     shape_str(features.shape()));
    CAMFIT_CHECK(int64_t(labels.size()) == features.dim(0), ArgumentError,
                 std::string(who) + ": " + std::to_string(features.dim(0)) +
                     " feature rows vs " + std::to_string(labels.size()) + " labels");
    for (int64_t y : labels)
        CAMFIT_CHECK(y >= 0, ArgumentError, std::string(who) + ": negative label");
}

// Rows scaled to unit L2 norm; all-zero rows stay zero.
Tensor<double> normalize_rows(const Tensor<double>& m) {
    Tensor<double> out = m.clone();
    const int64_t n = m.dim(0), d = m.dim(1);
    for (int64_t i = 0; i < n; ++i) {
        double sq = 0;
        for (int64_t j = 0; j < d; ++j) sq += out.at(i, j) * out.at(i, j);
        if (sq > 1e-300) {
            const double inv = 1.0 / std::sqrt(sq);
            for (int64_t j = 0; j < d; ++j) out.at(i, j) *= inv;
        }
    }
    return out;
}

}  // namespace

// ===========================================================================
// Similarity
// ===========================================================================

std::string to_string(Similarity s) { return s == Similarity::cosine ? "cosine" : "l2"; }

Similarity parse_similarity(const std::string& s) {
    if (s == "cosine") return Similarity::cosine;
    if (s == "l2") return Similarity::l2;
    throw ConfigError("unknown similarity metric: " + s + " (cosine, l2)");
}

// ===========================================================================
// Retrieval
// ===========================================================================

RetrievalReport retrieval_eval(const Tensor<double>& features,
                               const std::vector<int64_t>& labels, Similarity metric,
                               std::ostream* warn) {
    check_matrix(features, labels, "retrieval_eval");
    const int64_t n = features.dim(0), d = features.dim(1);
    CAMFIT_CHECK(n >= 2, DataError, "retrieval_eval: need at least 2 items");

    std::map<int64_t, int64_t> class_count;
    for (int64_t y : labels) ++class_count[y];

    // Cosine ranks on pre-normalized rows; L2 ranks by negative distance.
    Tensor<double> rows = metric == Similarity::cosine ? normalize_rows(features)
                                                       : features.clone();
    auto score = [&](int64_t a, int64_t b) {
        double acc = 0;
        if (metric == Similarity::cosine) {
            for (int64_t j = 0; j < d; ++j) acc += rows.at(a, j) * rows.at(b, j);
        } else {
            for (int64_t j = 0; j < d; ++j) {
                const double diff = rows.at(a, j) - rows.at(b, j);
                acc -= diff * diff;
            }
        }
        return acc;
    };

    RetrievalReport rep;
    rep.metric = metric;
    rep.gallery = n - 1;
    int64_t hits1 = 0, hits5 = 0;
    double ap_sum = 0;
    std::vector<int64_t> order;
    std::vector<double> scores(static_cast<size_t>(n));
    for (int64_t q = 0; q < n; ++q) {
        if (class_count[labels[size_t(q)]] < 2) {
            ++rep.excluded_queries;
            continue;
        }
        order.clear();
        for (int64_t g = 0; g < n; ++g)
            if (g != q) {
                order.push_back(g);
                scores[size_t(g)] = score(q, g);
            }
        // Descending score; stable keeps ties in ascending gallery index.
        std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            return scores[size_t(a)] > scores[size_t(b)];
        });

        const int64_t want = labels[size_t(q)];
        int64_t relevant = class_count[want] - 1;
        int64_t found = 0;
        double ap = 0;
        for (size_t pos = 0; pos < order.size(); ++pos) {
            if (labels[size_t(order[pos])] == want) {
                if (pos < 1) ++hits1;
                if (pos < 5 && found == 0) ++hits5;
                ++found;
                ap += double(found) / double(pos + 1);
            }
        }
        ap_sum += ap / double(relevant);
        ++rep.queries;
    }
    CAMFIT_CHECK(rep.queries > 0, DataError,
                 "retrieval_eval: every class has a single item; nothing to score");
    if (rep.excluded_queries > 0 && warn != nullptr)
        *warn << "retrieval_eval: excluded " << rep.excluded_queries
              << " single-item-class queries\n";
    rep.rank1 = 100.0 * double(hits1) / double(rep.queries);
    rep.rank5 = 100.0 * double(hits5) / double(rep.queries);
    rep.map = 100.0 * ap_sum / double(rep.queries);
    return rep;
}

std::string RetrievalReport::to_json() const {
    nlohmann::json j;
    j["rank1"] = rank1;
    j["rank5"] = rank5;
    j["map"] = map;
    j["gallery"] = gallery;
    j["queries"] = queries;
    j["excluded_queries"] = excluded_queries;
    j["metric"] = camfit::to_string(metric);
    return j.dump(2) + "\n";
}

// ===========================================================================
// Linear probe
// ===========================================================================

namespace {

// Multinomial logistic regression fit by full-batch gradient descent with
// backtracking line search on the (convex) regularized loss. Features are
// standardized internally; the bias column is unpenalized.
struct LogisticModel {
    Tensor<double> w;  // [D+1, C], last row is the bias
    std::vector<double> mu, sigma;

    Tensor<double> logits(const Tensor<double>& x) const {
        const int64_t n = x.dim(0), d = x.dim(1), c = w.dim(1);
        Tensor<double> xs({n, d + 1});
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = 0; j < d; ++j)
                xs.at(i, j) = (x.at(i, j) - mu[size_t(j)]) / sigma[size_t(j)];
            xs.at(i, d) = 1.0;
        }
        Tensor<double> out({n, c});
        kernels::gemm(xs.data(), w.data(), out.data(), n, d + 1, c, false);
        return out;
    }
};

LogisticModel fit_logistic(const Tensor<double>& x, const std::vector<int64_t>& y,
                           int64_t classes, double l2) {
    const int64_t n = x.dim(0), d = x.dim(1);
    LogisticModel m;
    m.mu.assign(size_t(d), 0.0);
    m.sigma.assign(size_t(d), 1.0);
    for (int64_t j = 0; j < d; ++j) {
        double s = 0;
        for (int64_t i = 0; i < n; ++i) s += x.at(i, j);
        m.mu[size_t(j)] = s / double(n);
        double sq = 0;
        for (int64_t i = 0; i < n; ++i) {
            const double dvi = x.at(i, j) - m.mu[size_t(j)];
            sq += dvi * dvi;
        }
        const double sd = std::sqrt(sq / double(n));
        if (sd > 1e-12) m.sigma[size_t(j)] = sd;
    }
    Tensor<double> xs({n, d + 1});
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < d; ++j)
            xs.at(i, j) = (x.at(i, j) - m.mu[size_t(j)]) / m.sigma[size_t(j)];
        xs.at(i, d) = 1.0;
    }
    Tensor<double> xst({d + 1, n});
    kernels::transpose(xs.data(), xst.data(), n, d + 1);

    m.w = Tensor<double>({d + 1, classes});
    auto objective = [&](const Tensor<double>& w, Tensor<double>* probs) {
        Tensor<double> lg({n, classes});
        kernels::gemm(xs.data(), w.data(), lg.data(), n, d + 1, classes, false);
        double loss = 0;
        for (int64_t i = 0; i < n; ++i) {
            double mx = lg.at(i, 0);
            for (int64_t j = 1; j < classes; ++j) mx = std::max(mx, lg.at(i, j));
            double z = 0;
            for (int64_t j = 0; j < classes; ++j) z += std::exp(lg.at(i, j) - mx);
            loss += std::log(z) - (lg.at(i, y[size_t(i)]) - mx);
            if (probs != nullptr)
                for (int64_t j = 0; j < classes; ++j)
                    lg.at(i, j) = std::exp(lg.at(i, j) - mx) / z;
        }
        loss /= double(n);
        for (int64_t j = 0; j < d; ++j)  // bias row unpenalized
            for (int64_t k = 0; k < classes; ++k)
                loss += 0.5 * l2 * w.at(j, k) * w.at(j, k);
        if (probs != nullptr) *probs = std::move(lg);
        return loss;
    };

    double lr = 1.0;
    double loss = objective(m.w, nullptr);
    Tensor<double> grad({d + 1, classes}), trial({d + 1, classes});
    for (int iter = 0; iter < 1000; ++iter) {
        Tensor<double> probs;
        objective(m.w, &probs);
        for (int64_t i = 0; i < n; ++i) probs.at(i, y[size_t(i)]) -= 1.0;
        kernels::gemm(xst.data(), probs.data(), grad.data(), d + 1, n, classes, false);
        double gnorm = 0;
        for (int64_t j = 0; j <= d; ++j)
            for (int64_t k = 0; k < classes; ++k) {
                double g = grad.at(j, k) / double(n);
                if (j < d) g += l2 * m.w.at(j, k);
                grad.at(j, k) = g;
                gnorm += g * g;
            }
        if (std::sqrt(gnorm) < 1e-7) break;

        double new_loss = loss;
        bool accepted = false;
        for (int bt = 0; bt < 40; ++bt) {
            for (int64_t j = 0; j < trial.numel(); ++j)
                trial[j] = m.w[j] - lr * grad[j];
            new_loss = objective(trial, nullptr);
            if (new_loss < loss) {
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if (!accepted) break;
        std::swap(m.w, trial);
        const double drop = loss - new_loss;
        loss = new_loss;
        lr *= 1.5;
        if (drop < 1e-10 * std::max(1.0, loss)) break;
    }
    return m;
}

// Top-1 / top-5 percentages; rank counts strictly-larger logits.
std::pair<double, double> score_topk(const LogisticModel& m, const Tensor<double>& x,
                                     const std::vector<int64_t>& y) {
    Tensor<double> lg = m.logits(x);
    const int64_t n = x.dim(0), c = lg.dim(1);
    int64_t t1 = 0, t5 = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double mine = lg.at(i, y[size_t(i)]);
        int64_t above = 0;
        for (int64_t j = 0; j < c; ++j)
            if (lg.at(i, j) > mine) ++above;
        if (above < 1) ++t1;
        if (above < 5) ++t5;
    }
    return {100.0 * double(t1) / double(n), 100.0 * double(t5) / double(n)};
}

Tensor<double> take_rows(const Tensor<double>& m, const std::vector<int64_t>& idx) {
    Tensor<double> out({int64_t(idx.size()), m.dim(1)});
    for (size_t i = 0; i < idx.size(); ++i)
        for (int64_t j = 0; j < m.dim(1); ++j) out.at(int64_t(i), j) = m.at(idx[i], j);
    return out;
}

std::vector<int64_t> take_labels(const std::vector<int64_t>& y,
                                 const std::vector<int64_t>& idx) {
    std::vector<int64_t> out;
    out.reserve(idx.size());
    for (int64_t i : idx) out.push_back(y[size_t(i)]);
    return out;
}

}  // namespace

ProbeRow linear_probe(const Tensor<double>& train_features,
                      const std::vector<int64_t>& train_labels,
                      const Tensor<double>& test_features,
                      const std::vector<int64_t>& test_labels, double fraction,
                      uint64_t seed) {
    check_matrix(train_features, train_labels, "linear_probe");
    check_matrix(test_features, test_labels, "linear_probe");
    CAMFIT_CHECK(train_features.dim(1) == test_features.dim(1), ArgumentError,
                 "linear_probe: train/test feature dimensions differ");
    CAMFIT_CHECK(fraction > 0 && fraction <= 1.0, ArgumentError,
                 "linear_probe: fraction must be in (0, 1]");
    int64_t classes = 0;
    for (int64_t y : train_labels) classes = std::max(classes, y + 1);
    for (int64_t y : test_labels) classes = std::max(classes, y + 1);
    CAMFIT_CHECK(classes >= 2, DataError, "linear_probe: need at least 2 classes");

    // Stratified subsample of the training labels.
    std::vector<std::vector<int64_t>> by_class(static_cast<size_t>(classes));
    for (size_t i = 0; i < train_labels.size(); ++i)
        by_class[size_t(train_labels[i])].push_back(int64_t(i));
    std::vector<int64_t> keep, val;
    for (int64_t c = 0; c < classes; ++c) {
        auto& members = by_class[size_t(c)];
        if (members.empty()) continue;  // class present only in test
        Rng rng(stream_seed(seed, {0x7B, uint64_t(c)}));
        rng.shuffle(members);
        const int64_t n_keep = int64_t(std::floor(double(members.size()) * fraction + 1e-9));
        CAMFIT_CHECK(n_keep >= 1, DataError,
                     "linear_probe: fraction " + fmt_g9(fraction) + " leaves class " +
                         std::to_string(c) + " with no labels");
        // A fifth of each class's kept labels validates the L2 grid.
        const int64_t n_val = n_keep / 5;
        for (int64_t i = 0; i < n_keep; ++i)
            (i < n_val ? val : keep).push_back(members[size_t(i)]);
    }
    std::sort(keep.begin(), keep.end());
    std::sort(val.begin(), val.end());

    ProbeRow row;
    row.fraction = fraction;
    static const double kGrid[] = {1e-4, 1e-3, 1e-2, 1e-1};
    double best_l2 = 1e-3;
    if (!val.empty()) {
        Tensor<double> fit_x = take_rows(train_features, keep);
        std::vector<int64_t> fit_y = take_labels(train_labels, keep);
        Tensor<double> val_x = take_rows(train_features, val);
        std::vector<int64_t> val_y = take_labels(train_labels, val);
        double best_acc = -1;
        for (double l2 : kGrid) {
            LogisticModel m = fit_logistic(fit_x, fit_y, classes, l2);
            const double acc = score_topk(m, val_x, val_y).first;
            if (acc > best_acc) {
                best_acc = acc;
                best_l2 = l2;
            }
        }
    }
    row.l2_penalty = best_l2;

    // Refit on the full subsample (keep + val) with the chosen penalty.
    std::vector<int64_t> all = keep;
    all.insert(all.end(), val.begin(), val.end());
    std::sort(all.begin(), all.end());
    LogisticModel m = fit_logistic(take_rows(train_features, all),
                                   take_labels(train_labels, all), classes, best_l2);
    auto [t1, t5] = score_topk(m, test_features, test_labels);
    row.top1 = t1;
    row.top5 = t5;
    return row;
}

ProbeReport linear_probe_report(const Tensor<double>& train_features,
                                const std::vector<int64_t>& train_labels,
                                const Tensor<double>& test_features,
                                const std::vector<int64_t>& test_labels, uint64_t seed,
                                const std::vector<double>& fractions) {
    ProbeReport rep;
    for (double f : fractions)
        rep.rows.push_back(linear_probe(train_features, train_labels, test_features,
                                        test_labels, f, seed));
    return rep;
}

std::string ProbeReport::to_json() const {
    nlohmann::json j;
    j["rows"] = nlohmann::json::array();
    for (const ProbeRow& r : rows)
        j["rows"].push_back({{"fraction", r.fraction},
                             {"top1", r.top1},
                             {"top5", r.top5},
                             {"l2_penalty", r.l2_penalty}});
    return j.dump(2) + "\n";
}

std::string ProbeReport::to_csv() const {
    std::string out = "fraction,top1,top5,l2_penalty\n";
    for (const ProbeRow& r : rows)
        out += fmt_g9(r.fraction) + "," + fmt_g9(r.top1) + "," + fmt_g9(r.top5) + "," +
               fmt_g9(r.l2_penalty) + "\n";
    return out;
}

// ===========================================================================
// Projection-variance report serialization
// ===========================================================================

std::string ProjectionVarianceReport::to_json() const {
    nlohmann::json j;
    j["variance"] = variance;
    j["ranking"] = ranking;
    return j.dump(2) + "\n";
}

// ===========================================================================
// Collapse detection
// ===========================================================================

CollapseReport collapse_check(const Tensor<double>& embeddings,
                              const std::vector<int64_t>& labels) {
    const bool labeled = !labels.empty();
    if (labeled) check_matrix(embeddings, labels, "collapse_check");
    CAMFIT_CHECK(embeddings.ndim() == 2, ArgumentError,
                 "collapse_check: embeddings must be [N,D]");
    const int64_t n = embeddings.dim(0), d = embeddings.dim(1);
    CAMFIT_CHECK(n >= 50, DataError,
                 "collapse_check: needs at least 50 embeddings, got " + std::to_string(n));
    if (labeled) {
        std::set<int64_t> classes(labels.begin(), labels.end());
        CAMFIT_CHECK(classes.size() >= 2, DataError,
                     "collapse_check: needs at least 2 classes");
    }

    Tensor<double> unit = normalize_rows(embeddings);
    double std_sum = 0;
    for (int64_t j = 0; j < d; ++j) {
        double mean = 0;
        for (int64_t i = 0; i < n; ++i) mean += unit.at(i, j);
        mean /= double(n);
        double sq = 0;
        for (int64_t i = 0; i < n; ++i) {
            const double dv = unit.at(i, j) - mean;
            sq += dv * dv;
        }
        std_sum += std::sqrt(sq / double(n - 1));
    }

    CollapseReport rep;
    rep.mean_dim_std = std_sum / double(d);
    rep.collapsed = rep.mean_dim_std < rep.std_threshold;
    if (labeled) {
        std::set<int64_t> classes(labels.begin(), labels.end());
        rep.rank1 = retrieval_eval(unit, labels, Similarity::cosine).rank1;
        rep.chance = 100.0 / double(classes.size());
        rep.collapsed = rep.collapsed || rep.rank1 <= 1.5 * rep.chance;
    } else {
        rep.rank1 = -1.0;
        rep.chance = 0.0;
    }
    return rep;
}

std::string CollapseReport::to_json() const {
    nlohmann::json j;
    j["collapsed"] = collapsed;
    j["mean_dim_std"] = mean_dim_std;
    j["rank1"] = rank1;
    j["chance"] = chance;
    j["std_threshold"] = std_threshold;
    return j.dump(2) + "\n";
}

// ===========================================================================
// Feature cache
// ===========================================================================

void save_features(const std::string& path, const Tensor<double>& features,
                   const std::vector<int64_t>& labels) {
    check_matrix(features, labels, "save_features");
    Checkpoint<double> ck;
    CheckpointSection<double> sec;
    sec.name = "features";
    sec.tensors.emplace_back("matrix", features.clone());
    Tensor<double> lab({int64_t(labels.size())});
    for (size_t i = 0; i < labels.size(); ++i) lab[int64_t(i)] = double(labels[i]);
    sec.tensors.emplace_back("labels", std::move(lab));
    ck.sections.push_back(std::move(sec));
    save_checkpoint(path, ck);
}

std::pair<Tensor<double>, std::vector<int64_t>> load_features(const std::string& path) {
    Checkpoint<double> ck = load_checkpoint<double>(path);
    const CheckpointSection<double>* sec = ck.find("features");
    CAMFIT_CHECK(sec != nullptr && sec->tensors.size() == 2 &&
                     sec->tensors[0].first == "matrix" && sec->tensors[1].first == "labels",
                 FormatError, "load_features: " + path + " is not a feature cache");
    const Tensor<double>& lab = sec->tensors[1].second;
    std::vector<int64_t> labels(size_t(lab.numel()));
    for (int64_t i = 0; i < lab.numel(); ++i) labels[size_t(i)] = int64_t(lab[i]);
    return {sec->tensors[0].second, labels};
}

// ===========================================================================
// Dataset plumbing
// ===========================================================================

EvalBatch load_eval_split(const DatasetManifest& data, const std::string& split,
                          const AugmentationPolicy& policy) {
    const std::vector<ImageEntry>* entries = nullptr;
    if (split == "train") entries = &data.train;
    else if (split == "test") entries = &data.test;
    CAMFIT_CHECK(entries != nullptr, ArgumentError,
                 "load_eval_split: split must be \"train\" or \"test\", got \"" + split +
                     "\"");
    CAMFIT_CHECK(!entries->empty(), DataError, "load_eval_split: split \"" + split +
                                                   "\" is empty");
    EvalBatch out;
    out.images.reserve(entries->size());
    out.labels.reserve(entries->size());
    for (const ImageEntry& e : *entries) {
        out.images.push_back(test_transform(load_image(data.path_of(e)), policy));
        out.labels.push_back(e.label);
    }
    return out;
}

}  // namespace camfit
