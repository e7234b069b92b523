#pragma once

// Encoder models: a desk-scale 4-block conv net and a ResNet-50-shaped
// backbone, plus the MLP projector onto the unit sphere. A model owns its
// parameters (trainable) and batch-norm running buffers (not trainable) in
// name-indexed stores; the momentum update and checkpointing work purely on
// those stores.
//
// Layout note: feature maps are NCHW in memory; the documented logical shape
// N x H x W x C refers to the same data viewed per grid cell.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "camfit/autodiff.hpp"
#include "camfit/nn.hpp"
#include "camfit/rng.hpp"

namespace camfit {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct EncoderConfig {
    std::string backbone = "tiny-conv";  // or "resnet50-like"
    int64_t input_size = 64;             // square input S
    // tiny-conv: output channels of its four stride-2 blocks.
    std::vector<int64_t> tiny_widths = {16, 32, 64, 64};
    // Projector layer widths, first entry = its input width. The input width
    // normally equals the backbone's C; bilinear variants widen it to C*K.
    std::vector<int64_t> projector_dims = {64, 128, 64};

    int64_t downsample_factor() const { return backbone == "resnet50-like" ? 32 : 16; }

    int64_t feature_channels() const {
        if (backbone == "resnet50-like") return 2048;
        CAMFIT_CHECK(!tiny_widths.empty(), ConfigError, "tiny-conv: no widths");
        return tiny_widths.back();
    }

    std::pair<int64_t, int64_t> grid() const {
        const int64_t g = input_size / downsample_factor();
        return {g, g};
    }

    int64_t embed_dim() const {
        CAMFIT_CHECK(!projector_dims.empty(), ConfigError, "projector: no dims");
        return projector_dims.back();
    }

    void validate() const {
        CAMFIT_CHECK(backbone == "tiny-conv" || backbone == "resnet50-like", ConfigError,
                     "unknown backbone: " + backbone);
        CAMFIT_CHECK(input_size > 0, ConfigError, "input size must be positive");
        CAMFIT_CHECK(input_size % downsample_factor() == 0, ConfigError,
                     "input size must be a multiple of " + std::to_string(downsample_factor()));
        const auto [h, w] = grid();
        CAMFIT_CHECK(h >= 4 && w >= 4, ConfigError,
                     "feature grid " + std::to_string(h) + "x" + std::to_string(w) +
                         " too small; attention maps need >= 4x4");
        CAMFIT_CHECK(feature_channels() > 0, ConfigError, "feature channels must be positive");
        if (backbone == "tiny-conv")
            CAMFIT_CHECK(tiny_widths.size() == 4, ConfigError, "tiny-conv expects 4 widths");
        CAMFIT_CHECK(projector_dims.size() >= 2, ConfigError,
                     "projector needs at least input and output widths");
        for (int64_t d : projector_dims)
            CAMFIT_CHECK(d > 0, ConfigError, "projector widths must be positive");
        CAMFIT_CHECK(embed_dim() > 0, ConfigError, "embedding dim must be positive");
    }

    // Desk-scale default: 64px inputs, C=64 on a 4x4 grid, D=64.
    static EncoderConfig desk() { return EncoderConfig{}; }

    // Paper-scale shape: 224px inputs, C=2048 on a 7x7 grid, projector
    // 2048x2048x256, D=256.
    static EncoderConfig paper_scale() {
        EncoderConfig c;
        c.backbone = "resnet50-like";
        c.input_size = 224;
        c.projector_dims = {2048, 2048, 256};
        return c;
    }
};

// ---------------------------------------------------------------------------
// Backbones
// ---------------------------------------------------------------------------

template <typename T>
struct TinyConvNet {
    std::vector<Conv2dLayer<T>> convs;
    std::vector<BatchNormLayer<T>> bns;

    TinyConvNet(ParamStore<T>& params, ParamStore<T>& buffers, const EncoderConfig& cfg,
                Rng& rng) {
        int64_t in = 3;
        for (size_t i = 0; i < cfg.tiny_widths.size(); ++i) {
            const std::string name = "backbone.block" + std::to_string(i);
            convs.emplace_back(params, name + ".conv", in, cfg.tiny_widths[i], 3, /*stride=*/2,
                               /*pad=*/1, /*bias=*/false, rng);
            bns.emplace_back(params, buffers, name + ".bn", cfg.tiny_widths[i]);
            in = cfg.tiny_widths[i];
        }
    }

    Var<T> forward(Tape<T>& tape, Var<T> x, const ForwardCtx& ctx) {
        for (size_t i = 0; i < convs.size(); ++i) {
            x = convs[i].forward(tape, x);
            x = bns[i].forward(tape, x, ctx);
            x = ops::relu(x);
        }
        return x;
    }
};

template <typename T>
struct Bottleneck {
    Conv2dLayer<T> c1, c2, c3;
    BatchNormLayer<T> b1, b2, b3;
    std::optional<Conv2dLayer<T>> down_c;
    std::optional<BatchNormLayer<T>> down_b;

    Bottleneck(ParamStore<T>& params, ParamStore<T>& buffers, const std::string& name, int64_t in,
               int64_t mid, int64_t out, int64_t stride, Rng& rng) {
        c1 = Conv2dLayer<T>(params, name + ".conv1", in, mid, 1, 1, 0, false, rng);
        b1 = BatchNormLayer<T>(params, buffers, name + ".bn1", mid);
        c2 = Conv2dLayer<T>(params, name + ".conv2", mid, mid, 3, stride, 1, false, rng);
        b2 = BatchNormLayer<T>(params, buffers, name + ".bn2", mid);
        c3 = Conv2dLayer<T>(params, name + ".conv3", mid, out, 1, 1, 0, false, rng);
        b3 = BatchNormLayer<T>(params, buffers, name + ".bn3", out);
        if (stride != 1 || in != out) {
            down_c.emplace(params, name + ".down.conv", in, out, 1, stride, 0, false, rng);
            down_b.emplace(params, buffers, name + ".down.bn", out);
        }
    }

    Var<T> forward(Tape<T>& tape, Var<T> x, const ForwardCtx& ctx) {
        Var<T> idn = x;
        Var<T> y = ops::relu(b1.forward(tape, c1.forward(tape, x), ctx));
        y = ops::relu(b2.forward(tape, c2.forward(tape, y), ctx));
        y = b3.forward(tape, c3.forward(tape, y), ctx);
        if (down_c) idn = down_b->forward(tape, down_c->forward(tape, x), ctx);
        return ops::relu(ops::add(y, idn));
    }
};

template <typename T>
struct ResNet50Backbone {
    Conv2dLayer<T> stem_conv;
    BatchNormLayer<T> stem_bn;
    std::vector<Bottleneck<T>> blocks;

    ResNet50Backbone(ParamStore<T>& params, ParamStore<T>& buffers, Rng& rng) {
        stem_conv = Conv2dLayer<T>(params, "backbone.stem.conv", 3, 64, 7, 2, 3, false, rng);
        stem_bn = BatchNormLayer<T>(params, buffers, "backbone.stem.bn", 64);
        const int64_t counts[4] = {3, 4, 6, 3};
        const int64_t mids[4] = {64, 128, 256, 512};
        int64_t in = 64;
        for (int s = 0; s < 4; ++s) {
            const int64_t out = mids[s] * 4;
            for (int64_t b = 0; b < counts[s]; ++b) {
                const int64_t stride = (s > 0 && b == 0) ? 2 : 1;
                blocks.emplace_back(params, buffers,
                                    "backbone.stage" + std::to_string(s + 1) + ".block" +
                                        std::to_string(b),
                                    in, mids[s], out, stride, rng);
                in = out;
            }
        }
    }

    Var<T> forward(Tape<T>& tape, Var<T> x, const ForwardCtx& ctx) {
        x = ops::relu(stem_bn.forward(tape, stem_conv.forward(tape, x), ctx));
        x = ops::max_pool2d(x, 3, 2, 1);
        for (auto& b : blocks) x = b.forward(tape, x, ctx);
        return x;
    }
};

// ---------------------------------------------------------------------------
// Projector head
// ---------------------------------------------------------------------------

template <typename T>
struct Projector {
    std::vector<LinearLayer<T>> fcs;

    Projector(ParamStore<T>& params, const EncoderConfig& cfg, Rng& rng) {
        for (size_t i = 0; i + 1 < cfg.projector_dims.size(); ++i)
            fcs.emplace_back(params, "projector.fc" + std::to_string(i), cfg.projector_dims[i],
                             cfg.projector_dims[i + 1], /*bias=*/true, rng);
    }

    // Raw projector output, before normalization.
    Var<T> forward(Tape<T>& tape, Var<T> x) const {
        for (size_t i = 0; i < fcs.size(); ++i) {
            x = fcs[i].forward(tape, x);
            if (i + 1 < fcs.size()) x = ops::relu(x);
        }
        return x;
    }
};

// ---------------------------------------------------------------------------
// Encoder model: backbone + projector. (The attention branch is a separate
// module with its own parameters; the key encoder never owns one outside the
// bilinear variants, where a branch copy is momentum-tracked explicitly.)
// ---------------------------------------------------------------------------

template <typename T>
class SslModel {
  public:
    SslModel(EncoderConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(stream_seed(seed, {0x11}));
        if (cfg_.backbone == "tiny-conv")
            tiny_.emplace(params_, buffers_, cfg_, rng);
        else
            resnet_.emplace(params_, buffers_, rng);
        projector_.emplace(params_, cfg_, rng);
    }

    SslModel(const SslModel&) = delete;
    SslModel& operator=(const SslModel&) = delete;

    struct Encoded {
        Var<T> map;     // [N, C, H, W]
        Var<T> pooled;  // [N, C] global average pool
    };

    Encoded encode(Tape<T>& tape, const Tensor<T>& images, const ForwardCtx& ctx) {
        CAMFIT_CHECK(images.ndim() == 4 && images.dim(1) == 3, ConfigError,
                     "encode: expected [N,3,S,S] input, got " + shape_str(images.shape()));
        CAMFIT_CHECK(images.dim(2) == cfg_.input_size && images.dim(3) == cfg_.input_size,
                     ConfigError,
                     "encode: input size " + std::to_string(images.dim(2)) +
                         " does not match configured " + std::to_string(cfg_.input_size));
        Var<T> x = tape.leaf(images);
        Var<T> map = tiny_ ? tiny_->forward(tape, x, ctx) : resnet_->forward(tape, x, ctx);
        const T* mv = map.value().data();
        for (int64_t i = 0; i < map.value().numel(); ++i)
            CAMFIT_CHECK(std::isfinite(mv[i]), NumericError, "encode: non-finite activation");
        return {map, ops::global_avg_pool(map)};
    }

    // Pooled features -> unit-norm embedding.
    Var<T> project(Tape<T>& tape, Var<T> pooled) const {
        return ops::l2_normalize_rows(projector_->forward(tape, pooled));
    }

    const EncoderConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    ParamStore<T>& buffers() { return buffers_; }
    const ParamStore<T>& params() const { return params_; }
    const ParamStore<T>& buffers() const { return buffers_; }

  private:
    EncoderConfig cfg_;
    ParamStore<T> params_;
    ParamStore<T> buffers_;
    std::optional<TinyConvNet<T>> tiny_;
    std::optional<ResNet50Backbone<T>> resnet_;
    std::optional<Projector<T>> projector_;
};

// ---------------------------------------------------------------------------
// Momentum pair plumbing (operates on parameter stores, so the same code
// serves the encoder pair and the bilinear branch pair)
// ---------------------------------------------------------------------------

template <typename T>
void check_same_schema(const ParamStore<T>& a, const ParamStore<T>& b) {
    CAMFIT_CHECK(a.size() == b.size(), StateError, "parameter schema mismatch: different counts");
    for (size_t i = 0; i < a.size(); ++i) {
        CAMFIT_CHECK(a[i].name == b[i].name, StateError,
                     "parameter schema mismatch at " + a[i].name + " vs " + b[i].name);
        CAMFIT_CHECK(same_shape(a[i].value, b[i].value), StateError,
                     "parameter shape mismatch at " + a[i].name);
    }
}

// key <- m * key + (1 - m) * query, elementwise. std::lerp makes the m=0 and
// m=1 endpoints exact.
template <typename T>
void momentum_update(const ParamStore<T>& query, ParamStore<T>& key, T m) {
    CAMFIT_CHECK(m >= T(0) && m <= T(1), ArgumentError, "momentum must lie in [0,1]");
    check_same_schema(query, key);
    for (size_t i = 0; i < key.size(); ++i) {
        const T* q = query[i].value.data();
        T* k = key[i].value.data();
        for (int64_t j = 0; j < key[i].value.numel(); ++j)
            k[j] = std::lerp(k[j], q[j], T(1) - m);
    }
}

// Hard copy (used to initialize the key from the query; also buffers).
template <typename T>
void copy_params(const ParamStore<T>& src, ParamStore<T>& dst) {
    check_same_schema(src, dst);
    for (size_t i = 0; i < dst.size(); ++i)
        std::copy(src[i].value.data(), src[i].value.data() + src[i].value.numel(),
                  dst[i].value.data());
}

}  // namespace camfit
