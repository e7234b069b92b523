#pragma once

// The training step and its configuration. One Trainer owns the query/key
// encoder pair, the optional attention branch (plus its momentum-tracked key
// copy in bilinear modes), the negatives queue, and the SGD state. Each step
// follows the same fixed order:
//
//   forward key view (no gradients, detached)  ->  forward query view
//   -> contrastive loss  ->  activation-map target from the positive logits
//   -> branch attention + fitting loss         ->  backward + SGD update
//   -> momentum update of the key side         ->  enqueue the keys
//
// The fitting loss is computed once, on the query view. All randomness is
// derived from (seed, purpose) streams; the trainer itself stores no RNG
// state, so a checkpoint restore resumes bit-exactly.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "camfit/augment.hpp"
#include "camfit/checkpoint.hpp"
#include "camfit/contrastive.hpp"
#include "camfit/model.hpp"
#include "camfit/queue.hpp"
#include "camfit/rationale.hpp"
#include "camfit/variants.hpp"

namespace camfit {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
    VariantMode mode = VariantMode::ours;
    std::optional<int64_t> k_override;  // absent = the variant's default K

    int64_t batch_size = 128;  // desk runs use 32
    int64_t epochs = 100;
    double lr = 0.03;
    double sgd_momentum = 0.9;
    double weight_decay = 1e-4;
    uint64_t seed = 1;

    LossWeights weights;       // lambda = 1, nu = 0.01
    double tau = 0.4;          // attention softmax temperature
    double temperature = 0.2;  // contrastive temperature
    double key_momentum = 0.999;
    int64_t queue_size = 4096;

    // No schedule by default; the cosine option decays to zero over the run.
    bool cosine_lr = false;
    GradcamSource gradcam_source = GradcamSource::positive_logit;

    // Encoder shape. Empty width lists mean the backbone's defaults.
    std::string backbone = "tiny-conv";
    int64_t image_size = 64;
    std::vector<int64_t> tiny_widths;
    std::vector<int64_t> projector_dims;

    EncoderConfig encoder() const {
        EncoderConfig e = backbone == "resnet50-like" ? EncoderConfig::paper_scale()
                                                      : EncoderConfig::desk();
        e.input_size = image_size;
        if (!tiny_widths.empty()) e.tiny_widths = tiny_widths;
        if (!projector_dims.empty()) e.projector_dims = projector_dims;
        e.validate();
        return e;
    }

    AugmentationPolicy augmentation() const {
        AugmentationPolicy p =
            image_size == 224 ? AugmentationPolicy::paper_scale() : AugmentationPolicy::desk();
        p.out_size = image_size;
        if (image_size != 224)
            p.test_resize = (image_size * 9 + 7) / 8;  // 64 -> 72 style scaling
        p.validate();
        return p;
    }

    void validate() const {
        CAMFIT_CHECK(batch_size >= 2, ConfigError, "batch size must be >= 2");
        CAMFIT_CHECK(epochs >= 1, ConfigError, "epochs must be >= 1");
        CAMFIT_CHECK(lr >= 0, ConfigError, "learning rate must be >= 0");
        CAMFIT_CHECK(sgd_momentum >= 0 && sgd_momentum < 1, ConfigError,
                     "sgd momentum must lie in [0,1)");
        CAMFIT_CHECK(weight_decay >= 0, ConfigError, "weight decay must be >= 0");
        CAMFIT_CHECK(tau > 0, ConfigError, "tau must be positive");
        CAMFIT_CHECK(temperature > 0, ConfigError, "temperature must be positive");
        CAMFIT_CHECK(key_momentum >= 0 && key_momentum <= 1, ConfigError,
                     "key momentum must lie in [0,1]");
        CAMFIT_CHECK(queue_size >= 1, ConfigError, "queue size must be >= 1");
        if (k_override) CAMFIT_CHECK(*k_override >= 1, ConfigError, "K must be >= 1");
        weights.validate();
        (void)encoder();       // validates backbone/image size/width lists
        (void)augmentation();  // validates the derived policy
    }
};

TrainConfig train_config_from_json(const std::string& text);
std::string to_json(const TrainConfig& cfg);

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// Hash of the canonical serialized config; stored in checkpoints so resume
// rejects configuration drift.
uint64_t config_hash(const TrainConfig& cfg);

// Constant lr unless cosine is enabled and a horizon is known.
inline double lr_at(const TrainConfig& cfg, int64_t step, int64_t total_steps) {
    if (!cfg.cosine_lr || total_steps <= 0) return cfg.lr;
    const double t = std::min(1.0, double(step) / double(total_steps));
    return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct StepMetrics {
    int64_t step = 0;
    double l_cl = 0, l_kl = 0, total = 0, lr = 0;
};

template <typename T>
class Trainer {
  public:
    explicit Trainer(TrainConfig cfg)
        : cfg_(std::move(cfg)),
          enc_(resolve_encoder(cfg_)),
          spec_(configure_variant(cfg_.mode, cfg_.k_override, base_channels(cfg_))),
          query_(enc_, cfg_.seed),
          key_(enc_, cfg_.seed),
          queue_(cfg_.queue_size, enc_.embed_dim()),
          hash_(config_hash(cfg_)) {
        CAMFIT_CHECK(cfg_.gradcam_source != GradcamSource::supervised_ce, ConfigError,
                     "self-supervised pretraining has no labels for supervised-ce maps");

        // The key side starts as an exact copy of the query side.
        copy_params(query_.params(), key_.params());
        copy_params(query_.buffers(), key_.buffers());

        if (spec_.has_branch) {
            if (spec_.mlp_branch)
                mlp_branch_.emplace(spec_.channels, spec_.mlp_hidden, cfg_.seed);
            else
                branch_.emplace(spec_.k, spec_.channels, cfg_.seed);
        }
        if (spec_.key_has_branch) {
            key_branch_.emplace(spec_.k, spec_.channels, cfg_.seed);
            copy_params(branch_->params(), key_branch_->params());
        }
        queue_.fill_random_unit(stream_seed(cfg_.seed, {0x51}));

        collect_trainables();
    }

    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    // One optimization step on a pair of augmented view batches [N,3,S,S].
    StepMetrics train_step(const Tensor<T>& view_q, const Tensor<T>& view_k) {
        CAMFIT_CHECK(view_q.ndim() == 4 && same_shape(view_q, view_k), ArgumentError,
                     "train_step: views must be equal-shaped [N,3,S,S]");
        CAMFIT_CHECK(view_q.dim(0) >= 2, ArgumentError, "train_step: batch size must be >= 2");
        const T lr = T(lr_at(cfg_, step_, total_steps_));
        const ForwardCtx train_ctx{/*training=*/true, /*update_running=*/true};

        // Key view on its own tape: values survive (tensor storage is shared),
        // gradients are never wanted. Key batch-norm running stats update
        // through this forward pass, mirroring the query side.
        Tensor<T> zk;
        {
            Tape<T> ktape;
            auto ek = key_.encode(ktape, view_k, train_ctx);
            Var<T> pooled = spec_.train_interaction == Interaction::bilinear_pool
                                ? bilinear_pool(ktape, ek.map, *key_branch_, T(cfg_.tau))
                                : ek.pooled;
            zk = key_.project(ktape, pooled).value();
        }

        Tape<T> tape;
        auto eq = query_.encode(tape, view_q, train_ctx);

        // Branch attention is needed by the fitting loss and, in the
        // dual-pooling variant, by the projector input as well.
        Var<T> a_raw;
        if (spec_.has_branch)
            a_raw = spec_.mlp_branch ? mlp_branch_->forward(tape, eq.map)
                                     : branch_->forward(tape, eq.map);

        Var<T> pooled_q = eq.pooled;
        if (spec_.train_interaction == Interaction::weighted_pool)
            pooled_q = weighted_pool(eq.map, attention_normalize(a_raw));
        else if (spec_.train_interaction == Interaction::bilinear_pool)
            pooled_q = bilinear_pool(tape, eq.map, *branch_, T(cfg_.tau));

        Var<T> zq = query_.project(tape, pooled_q);
        auto [l_cl, pos] = contrastive_loss(zq, tape.leaf(zk), queue_, T(cfg_.temperature));

        Var<T> total;
        double l_kl_value = 0;
        if (spec_.fitting_loss) {
            Var<T> objective = cfg_.gradcam_source == GradcamSource::full_loss
                                   ? ops::scale(l_cl, T(-1))
                                   : ops::sum(pos);
            Tensor<T> g_norm = softmax_normalize(gradcam(objective, eq.map), T(cfg_.tau));
            Var<T> a_norm = softmax_normalize(a_raw, T(cfg_.tau));
            Var<T> l_kl = kl_fitting_loss(a_norm, g_norm);
            l_kl_value = double(l_kl.value()[0]);
            total = total_loss(l_cl, l_kl, cfg_.weights);
        } else {
            total = ops::scale(l_cl, T(cfg_.weights.lambda_cl));
        }
        CAMFIT_CHECK(std::isfinite(double(total.value()[0])), NumericError,
                     "train_step " + std::to_string(step_) +
                         ": non-finite loss (L_CL=" + std::to_string(double(l_cl.value()[0])) +
                         ", L_KL=" + std::to_string(l_kl_value) + ")");

        for (Param<T>* p : trainables_) p->zero_grad();
        tape.backward(total);
        sgd_update(lr);

        momentum_update(query_.params(), key_.params(), T(cfg_.key_momentum));
        if (key_branch_)
            momentum_update(branch_->params(), key_branch_->params(), T(cfg_.key_momentum));
        queue_.push(zk);

        StepMetrics m{step_, double(l_cl.value()[0]), l_kl_value, double(total.value()[0]),
                      double(lr)};
        ++step_;
        return m;
    }

    // ------------------------------------------------------------------
    // Checkpointing
    // ------------------------------------------------------------------

    Checkpoint<T> make_checkpoint() const {
        Checkpoint<T> ck;
        ck.step = step_;
        ck.config_hash = hash_;
        ck.sections.push_back(snapshot_store("query.params", query_.params()));
        ck.sections.push_back(snapshot_store("query.buffers", query_.buffers()));
        ck.sections.push_back(snapshot_store("key.params", key_.params()));
        ck.sections.push_back(snapshot_store("key.buffers", key_.buffers()));
        if (branch_) ck.sections.push_back(snapshot_store("branch.params", branch_->params()));
        if (mlp_branch_)
            ck.sections.push_back(snapshot_store("branch.params", mlp_branch_->params()));
        if (key_branch_)
            ck.sections.push_back(snapshot_store("key_branch.params", key_branch_->params()));
        CheckpointSection<T> opt;
        opt.name = "optimizer.momentum";
        for (size_t i = 0; i < trainables_.size(); ++i)
            opt.tensors.emplace_back(trainables_[i]->name, momentum_[i].clone());
        ck.sections.push_back(std::move(opt));
        ck.queue_capacity = queue_.capacity();
        ck.queue_dim = queue_.dim();
        ck.queue_head = queue_.head();
        ck.queue_size = queue_.size();
        ck.queue_data = queue_.raw();
        return ck;
    }

    void restore(const Checkpoint<T>& ck) {
        CAMFIT_CHECK(ck.config_hash == hash_, ConfigError,
                     "checkpoint was produced by a different configuration (hash mismatch)");
        auto required = [&](const std::string& name) -> const CheckpointSection<T>& {
            const CheckpointSection<T>* s = ck.find(name);
            CAMFIT_CHECK(s != nullptr, FormatError, "checkpoint is missing section " + name);
            return *s;
        };
        restore_store(required("query.params"), query_.params());
        restore_store(required("query.buffers"), query_.buffers());
        restore_store(required("key.params"), key_.params());
        restore_store(required("key.buffers"), key_.buffers());
        if (branch_) restore_store(required("branch.params"), branch_->params());
        if (mlp_branch_) restore_store(required("branch.params"), mlp_branch_->params());
        if (key_branch_) restore_store(required("key_branch.params"), key_branch_->params());
        const CheckpointSection<T>& opt = required("optimizer.momentum");
        CAMFIT_CHECK(opt.tensors.size() == trainables_.size(), FormatError,
                     "checkpoint optimizer state does not match the trainable schema");
        for (size_t i = 0; i < trainables_.size(); ++i) {
            const auto& [name, value] = opt.tensors[i];
            CAMFIT_CHECK(name == trainables_[i]->name && same_shape(value, momentum_[i]),
                         FormatError, "checkpoint optimizer entry mismatch at " + name);
            std::copy(value.data(), value.data() + value.numel(), momentum_[i].data());
        }
        CAMFIT_CHECK(ck.queue_capacity == queue_.capacity() && ck.queue_dim == queue_.dim(),
                     FormatError, "checkpoint queue geometry does not match the configuration");
        queue_.restore(ck.queue_data, ck.queue_head, ck.queue_size);
        step_ = ck.step;
    }

    // ------------------------------------------------------------------
    // Accessors
    // ------------------------------------------------------------------

    const TrainConfig& config() const { return cfg_; }
    const EncoderConfig& encoder_config() const { return enc_; }
    const VariantSpec& variant() const { return spec_; }
    SslModel<T>& query() { return query_; }
    SslModel<T>& key() { return key_; }
    EmbeddingQueue<T>& queue() { return queue_; }
    RationaleBranch<T>* branch() { return branch_ ? &*branch_ : nullptr; }
    MlpBranch<T>* mlp_branch() { return mlp_branch_ ? &*mlp_branch_ : nullptr; }
    RationaleBranch<T>* key_branch() { return key_branch_ ? &*key_branch_ : nullptr; }
    int64_t step() const { return step_; }
    uint64_t hash() const { return hash_; }
    const std::vector<Param<T>*>& trainables() const { return trainables_; }

    // Cosine horizon in steps; 0 keeps the learning rate constant.
    void set_total_steps(int64_t n) { total_steps_ = n; }
    int64_t total_steps() const { return total_steps_; }

  private:
    static EncoderConfig resolve_encoder(const TrainConfig& cfg) {
        cfg.validate();
        EncoderConfig e = cfg.encoder();
        // The variant decides the projector's input width (C, or C*K in the
        // bilinear modes). Width lists are always expressed relative to C.
        CAMFIT_CHECK(e.projector_dims[0] == e.feature_channels(), ConfigError,
                     "projector input width must equal the backbone's channels; "
                     "bilinear widening is applied internally");
        VariantSpec s = configure_variant(cfg.mode, cfg.k_override, e.feature_channels());
        e.projector_dims[0] = s.projector_input();
        return e;
    }

    static int64_t base_channels(const TrainConfig& cfg) {
        return cfg.encoder().feature_channels();
    }

    void collect_trainables() {
        auto take = [&](ParamStore<T>& store) {
            for (size_t i = 0; i < store.size(); ++i)
                if (store[i].trainable) trainables_.push_back(&store[i]);
        };
        take(query_.params());
        if (branch_) take(branch_->params());
        if (mlp_branch_) take(mlp_branch_->params());
        momentum_.reserve(trainables_.size());
        for (Param<T>* p : trainables_) momentum_.emplace_back(p->value.shape());
    }

    // theta -= lr * buf,  buf = mu * buf + (grad + wd * theta).
    void sgd_update(T lr) {
        const T mu = T(cfg_.sgd_momentum), wd = T(cfg_.weight_decay);
        kernels::parallel_for(int64_t(trainables_.size()), [&](int64_t i) {
            Param<T>& p = *trainables_[size_t(i)];
            T* th = p.value.data();
            const T* g = p.grad.data();
            T* buf = momentum_[size_t(i)].data();
            for (int64_t j = 0; j < p.value.numel(); ++j) {
                const T gj = g[j] + wd * th[j];
                buf[j] = mu * buf[j] + gj;
                th[j] -= lr * buf[j];
            }
        });
    }

    TrainConfig cfg_;
    EncoderConfig enc_;  // resolved: projector input already widened
    VariantSpec spec_;
    SslModel<T> query_, key_;
    std::optional<RationaleBranch<T>> branch_;
    std::optional<MlpBranch<T>> mlp_branch_;
    std::optional<RationaleBranch<T>> key_branch_;
    EmbeddingQueue<T> queue_;
    std::vector<Param<T>*> trainables_;
    std::vector<Tensor<T>> momentum_;
    int64_t step_ = 0;
    int64_t total_steps_ = 0;
    uint64_t hash_ = 0;
};

// ---------------------------------------------------------------------------
// Config serialization (strict keys; unknown names are format errors)
// ---------------------------------------------------------------------------

inline std::string to_json(const TrainConfig& cfg) {
    nlohmann::json j;
    j["variant"] = to_string(cfg.mode);
    j["k"] = cfg.k_override ? *cfg.k_override : 0;
    j["batch_size"] = cfg.batch_size;
    j["epochs"] = cfg.epochs;
    j["lr"] = cfg.lr;
    j["momentum"] = cfg.sgd_momentum;
    j["weight_decay"] = cfg.weight_decay;
    j["seed"] = cfg.seed;
    j["lambda"] = cfg.weights.lambda_cl;
    j["nu"] = cfg.weights.nu_kl;
    j["tau"] = cfg.tau;
    j["temperature"] = cfg.temperature;
    j["key_momentum"] = cfg.key_momentum;
    j["queue_size"] = cfg.queue_size;
    j["cosine_lr"] = cfg.cosine_lr;
    j["gradcam_source"] = to_string(cfg.gradcam_source);
    j["backbone"] = cfg.backbone;
    j["image_size"] = cfg.image_size;
    j["tiny_widths"] = cfg.tiny_widths;
    j["projector_dims"] = cfg.projector_dims;
    return j.dump(2);  // keys serialize sorted: canonical for hashing
}

inline uint64_t config_hash(const TrainConfig& cfg) { return fnv1a64(to_json(cfg)); }

inline TrainConfig train_config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("train config is not valid JSON: ") + e.what());
    }
    CAMFIT_CHECK(j.is_object(), FormatError, "train config must be a JSON object");

    TrainConfig cfg;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "variant") cfg.mode = parse_variant_mode(value.get<std::string>());
            else if (key == "k") {
                const int64_t k = value.get<int64_t>();
                if (k != 0) cfg.k_override = k;
            } else if (key == "batch_size") cfg.batch_size = value.get<int64_t>();
            else if (key == "epochs") cfg.epochs = value.get<int64_t>();
            else if (key == "lr") cfg.lr = value.get<double>();
            else if (key == "momentum") cfg.sgd_momentum = value.get<double>();
            else if (key == "weight_decay") cfg.weight_decay = value.get<double>();
            else if (key == "seed") cfg.seed = value.get<uint64_t>();
            else if (key == "lambda") cfg.weights.lambda_cl = value.get<double>();
            else if (key == "nu") cfg.weights.nu_kl = value.get<double>();
            else if (key == "tau") cfg.tau = value.get<double>();
            else if (key == "temperature") cfg.temperature = value.get<double>();
            else if (key == "key_momentum") cfg.key_momentum = value.get<double>();
            else if (key == "queue_size") cfg.queue_size = value.get<int64_t>();
            else if (key == "cosine_lr") cfg.cosine_lr = value.get<bool>();
            else if (key == "gradcam_source")
                cfg.gradcam_source = parse_gradcam_source(value.get<std::string>());
            else if (key == "backbone") cfg.backbone = value.get<std::string>();
            else if (key == "image_size") cfg.image_size = value.get<int64_t>();
            else if (key == "tiny_widths") cfg.tiny_widths = value.get<std::vector<int64_t>>();
            else if (key == "projector_dims")
                cfg.projector_dims = value.get<std::vector<int64_t>>();
            else throw FormatError("train config: unknown key \"" + key + "\"");
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("train config value: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

}  // namespace camfit
