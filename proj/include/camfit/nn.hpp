#pragma once

// Parameter registry and the three layer primitives the models are built
// from. Layers are thin structs binding named parameters to autodiff ops; the
// stores own the parameters and give checkpointing and the momentum update a
// stable name -> tensor view.

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "camfit/autodiff.hpp"
#include "camfit/rng.hpp"
#include "camfit/tensor.hpp"

namespace camfit {

template <typename T>
class ParamStore {
  public:
    Param<T>& add(const std::string& name, Tensor<T> init, bool trainable = true) {
        CAMFIT_CHECK(!index_.count(name), ConfigError, "duplicate parameter name: " + name);
        items_.push_back(std::make_unique<Param<T>>(name, std::move(init), trainable));
        index_[name] = items_.size() - 1;
        return *items_.back();
    }

    Param<T>& at(const std::string& name) {
        auto it = index_.find(name);
        CAMFIT_CHECK(it != index_.end(), StateError, "unknown parameter: " + name);
        return *items_[it->second];
    }
    const Param<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        CAMFIT_CHECK(it != index_.end(), StateError, "unknown parameter: " + name);
        return *items_[it->second];
    }
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    size_t size() const { return items_.size(); }
    Param<T>& operator[](size_t i) { return *items_[i]; }
    const Param<T>& operator[](size_t i) const { return *items_[i]; }

    int64_t total_numel() const {
        int64_t n = 0;
        for (const auto& p : items_) n += p->value.numel();
        return n;
    }

    void zero_grads() {
        for (auto& p : items_) p->zero_grad();
    }

  private:
    std::vector<std::unique_ptr<Param<T>>> items_;  // registration order
    std::unordered_map<std::string, size_t> index_;
};

// Forward-pass behavior switches threaded through every layer.
struct ForwardCtx {
    bool training = false;
    bool update_running = false;  // BN running-stat updates (training only)
};

namespace init {

// He-normal for ReLU stacks, deterministic via the caller's stream.
template <typename T>
Tensor<T> kaiming_normal(Shape shape, int64_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double std = std::sqrt(2.0 / double(fan_in));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = T(rng.normal(0.0, std));
    return t;
}

}  // namespace init

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2dLayer {
    Param<T>* weight = nullptr;  // [OC, IC, k, k]
    Param<T>* bias = nullptr;    // optional [OC]
    int64_t stride = 1, pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(ParamStore<T>& store, const std::string& name, int64_t in_ch, int64_t out_ch,
                int64_t k, int64_t stride_, int64_t pad_, bool with_bias, Rng& rng)
        : stride(stride_), pad(pad_) {
        weight = &store.add(name + ".weight",
                            init::kaiming_normal<T>({out_ch, in_ch, k, k}, in_ch * k * k, rng));
        if (with_bias) bias = &store.add(name + ".bias", Tensor<T>({out_ch}));
    }

    Var<T> forward(Tape<T>& tape, Var<T> x) const {
        std::optional<Var<T>> b;
        if (bias) b = tape.param(*bias);
        return ops::conv2d(x, tape.param(*weight), b, stride, pad);
    }
};

template <typename T>
struct BatchNormLayer {
    Param<T>* gamma = nullptr;
    Param<T>* beta = nullptr;
    ops::BnBuffers<T> bufs;  // storage shared with the buffer store entries

    BatchNormLayer() = default;
    BatchNormLayer(ParamStore<T>& params, ParamStore<T>& buffers, const std::string& name,
                   int64_t c) {
        gamma = &params.add(name + ".gamma", Tensor<T>::full({c}, T(1)));
        beta = &params.add(name + ".beta", Tensor<T>({c}));
        bufs = ops::BnBuffers<T>(c);
        // Register the running stats under the same storage so checkpoint
        // save/load sees live values.
        buffers.add(name + ".running_mean", bufs.running_mean, /*trainable=*/false);
        buffers.add(name + ".running_var", bufs.running_var, /*trainable=*/false);
    }

    Var<T> forward(Tape<T>& tape, Var<T> x, const ForwardCtx& ctx) {
        return ops::batch_norm(x, tape.param(*gamma), tape.param(*beta), bufs, ctx.training,
                               ctx.training && ctx.update_running);
    }
};

template <typename T>
struct LinearLayer {
    Param<T>* weight = nullptr;  // [in, out], input-major (see ops::linear)
    Param<T>* bias = nullptr;

    LinearLayer() = default;
    LinearLayer(ParamStore<T>& store, const std::string& name, int64_t in, int64_t out,
                bool with_bias, Rng& rng) {
        weight = &store.add(name + ".weight", init::kaiming_normal<T>({in, out}, in, rng));
        if (with_bias) bias = &store.add(name + ".bias", Tensor<T>({out}));
    }

    Var<T> forward(Tape<T>& tape, Var<T> x) const {
        std::optional<Var<T>> b;
        if (bias) b = tape.param(*bias);
        return ops::linear(x, tape.param(*weight), b);
    }
};

}  // namespace camfit
