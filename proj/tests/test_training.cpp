#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "camfit/pretrain.hpp"
#include "camfit/trainer.hpp"

using namespace camfit;
namespace fs = std::filesystem;

namespace {

// Small-but-real config: 4 conv blocks at width 8 (C=8, 4x4 grid), K=4.
TrainConfig tiny_config(VariantMode mode, uint64_t seed,
                        std::optional<int64_t> k = std::nullopt) {
    TrainConfig cfg;
    cfg.mode = mode;
    cfg.k_override = k;
    cfg.batch_size = 4;
    cfg.epochs = 2;
    cfg.lr = 0.05;
    cfg.seed = seed;
    cfg.queue_size = 64;
    cfg.tiny_widths = {8, 8, 8, 8};
    cfg.projector_dims = {8, 16, 8};
    return cfg;
}

template <typename T>
Tensor<T> random_views(int64_t n, int64_t s, uint64_t seed) {
    Tensor<T> t({n, 3, s, s});
    Rng rng(seed);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = T(rng.uniform(-1.0, 1.0));
    return t;
}

template <typename T>
std::vector<Tensor<T>> snapshot(const ParamStore<T>& store) {
    std::vector<Tensor<T>> out;
    for (size_t i = 0; i < store.size(); ++i) out.push_back(store[i].value.clone());
    return out;
}

template <typename T>
bool equals(const ParamStore<T>& store, const std::vector<Tensor<T>>& snap) {
    if (store.size() != snap.size()) return false;
    for (size_t i = 0; i < store.size(); ++i) {
        if (!same_shape(store[i].value, snap[i])) return false;
        for (int64_t j = 0; j < snap[i].numel(); ++j)
            if (store[i].value[j] != snap[i][j]) return false;
    }
    return true;
}

template <typename T>
bool checkpoints_equal(const Checkpoint<T>& a, const Checkpoint<T>& b) {
    if (a.step != b.step || a.config_hash != b.config_hash) return false;
    if (a.sections.size() != b.sections.size()) return false;
    for (size_t s = 0; s < a.sections.size(); ++s) {
        if (a.sections[s].name != b.sections[s].name) return false;
        if (a.sections[s].tensors.size() != b.sections[s].tensors.size()) return false;
        for (size_t t = 0; t < a.sections[s].tensors.size(); ++t) {
            const auto& [an, av] = a.sections[s].tensors[t];
            const auto& [bn, bv] = b.sections[s].tensors[t];
            if (an != bn || !same_shape(av, bv)) return false;
            for (int64_t j = 0; j < av.numel(); ++j)
                if (av[j] != bv[j]) return false;
        }
    }
    return a.queue_head == b.queue_head && a.queue_size == b.queue_size &&
           a.queue_data == b.queue_data;
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("camfit_train_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

PretrainOptions run_opts(const fs::path& dir, int64_t max_steps = 0) {
    PretrainOptions o;
    o.out_dir = dir.string();
    o.max_steps = max_steps;
    return o;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

// ===========================================================================
// Step semantics
// ===========================================================================

TEST_CASE("train_step: lr=0 leaves query and key parameters bit-identical") {
    TrainConfig cfg = tiny_config(VariantMode::ours, 3, 4);
    cfg.lr = 0;
    Trainer<double> tr(cfg);
    auto q0 = snapshot(tr.query().params());
    auto k0 = snapshot(tr.key().params());
    auto b0 = snapshot(tr.branch()->params());

    for (int i = 0; i < 2; ++i) {
        StepMetrics m = tr.train_step(random_views<double>(4, 64, 100 + uint64_t(i)),
                                      random_views<double>(4, 64, 200 + uint64_t(i)));
        CHECK(m.step == i);
        CHECK(std::isfinite(m.total));
        CHECK(m.l_cl > 0);
        CHECK(m.l_kl >= 0);
        CHECK(m.lr == 0.0);
    }
    CHECK(equals(tr.query().params(), q0));
    CHECK(equals(tr.key().params(), k0));
    CHECK(equals(tr.branch()->params(), b0));
    // The queue still advanced: two batches of 4 into the prefilled ring.
    CHECK(tr.queue().head() == 8);
    CHECK(tr.queue().size() == 64);
}

TEST_CASE("train_step: key delta is exactly momentum blending toward the query") {
    TrainConfig cfg = tiny_config(VariantMode::ours, 5, 4);
    Trainer<double> tr(cfg);
    auto k_before = snapshot(tr.key().params());
    tr.train_step(random_views<double>(4, 64, 11), random_views<double>(4, 64, 12));

    const double m = cfg.key_momentum;
    bool query_moved = false;
    const ParamStore<double>& q = tr.query().params();
    const ParamStore<double>& k = tr.key().params();
    for (size_t i = 0; i < k.size(); ++i)
        for (int64_t j = 0; j < k[i].value.numel(); ++j) {
            CHECK(k[i].value[j] == std::lerp(k_before[i][j], q[i].value[j], 1.0 - m));
            if (q[i].value[j] != k_before[i][j]) query_moved = true;
        }
    CHECK(query_moved);
}

// Mean own-pair minus cross-pair cosine between query/key embeddings:
// positive when each query sits closer to its own key than to the others'.
template <typename T>
double pair_margin(Trainer<T>& tr, const Tensor<T>& vq, const Tensor<T>& vk) {
    Tape<T> tape;
    ForwardCtx ctx{true, false};
    auto eq = tr.query().encode(tape, vq, ctx);
    auto ek = tr.key().encode(tape, vk, ctx);
    Tensor<T> zq = tr.query().project(tape, eq.pooled).value();
    Tensor<T> zk = tr.key().project(tape, ek.pooled).value();
    const int64_t n = zq.dim(0);
    double own = 0, cross = 0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double dot = 0;
            for (int64_t d = 0; d < zq.dim(1); ++d) dot += double(zq.at(i, d)) * zk.at(j, d);
            (i == j ? own : cross) += dot;
        }
    return own / double(n) - cross / double(n * (n - 1));
}

TEST_CASE("train_step: 200 repeated steps on one fixed batch overfit it") {
    // The TOTAL loss is not monotone here by construction: every step
    // enqueues the batch's own key embeddings, so the negatives fill with
    // near-copies of the positives and the log-denominator grows. Two
    // signals stay clean: each query separates from the other keys faster
    // than from its own (the pair margin), and the attention-fitting term
    // keeps shrinking as the branch fits the gradient map.
    TrainConfig cfg = tiny_config(VariantMode::ours, 9, 4);
    cfg.queue_size = 4096;  // pushes never wrap into the random prefill
    Trainer<float> tr(cfg);
    Tensor<float> views = random_views<float>(4, 64, 21);
    const double margin0 = pair_margin(tr, views, views);
    std::vector<double> kls;
    for (int i = 0; i < 200; ++i) {
        StepMetrics m = tr.train_step(views, views);
        REQUIRE(std::isfinite(m.total));
        kls.push_back(m.l_kl);
    }
    const double margin1 = pair_margin(tr, views, views);
    INFO("pair margin before ", margin0, " after ", margin1);
    CHECK(margin1 > margin0 + 0.05);
    CHECK(margin1 > 0.1);

    auto window_mean = [&](size_t lo) {
        double s = 0;
        for (size_t i = lo; i < lo + 50; ++i) s += kls[i];
        return s / 50;
    };
    const double w0 = window_mean(0), w1 = window_mean(50), w3 = window_mean(150);
    INFO("fitting-loss windows ", w0, " ", w1, " ", w3);
    CHECK(w1 < w0);
    CHECK(w3 < w1);
}

TEST_CASE("train_step: deterministic replay for 50 steps in double precision") {
    std::vector<Tensor<double>> vq, vk;
    for (int i = 0; i < 50; ++i) {
        vq.push_back(random_views<double>(4, 64, 1000 + uint64_t(i)));
        vk.push_back(random_views<double>(4, 64, 2000 + uint64_t(i)));
    }
    TrainConfig cfg = tiny_config(VariantMode::ours, 17, 4);
    Trainer<double> a(cfg), b(cfg);
    for (int i = 0; i < 50; ++i) {
        StepMetrics ma = a.train_step(vq[size_t(i)], vk[size_t(i)]);
        StepMetrics mb = b.train_step(vq[size_t(i)], vk[size_t(i)]);
        REQUIRE(ma.l_cl == mb.l_cl);
        REQUIRE(ma.l_kl == mb.l_kl);
        REQUIRE(ma.total == mb.total);
    }
    CHECK(checkpoints_equal(a.make_checkpoint(), b.make_checkpoint()));
}

// ===========================================================================
// Checkpointing
// ===========================================================================

TEST_CASE("checkpoint: bitwise round-trip, exact resume, version/schema errors") {
    fs::path dir = fresh_dir("ckpt");
    TrainConfig cfg = tiny_config(VariantMode::ours, 23, 4);
    Trainer<double> a(cfg);
    std::vector<Tensor<double>> vq, vk;
    for (int i = 0; i < 12; ++i) {
        vq.push_back(random_views<double>(4, 64, 3000 + uint64_t(i)));
        vk.push_back(random_views<double>(4, 64, 4000 + uint64_t(i)));
    }
    for (int i = 0; i < 7; ++i) a.train_step(vq[size_t(i)], vk[size_t(i)]);

    const std::string path = (dir / "ck.bin").string();
    Checkpoint<double> ck = a.make_checkpoint();
    save_checkpoint(path, ck);
    Checkpoint<double> back = load_checkpoint<double>(path);
    CHECK(checkpoints_equal(ck, back));
    CHECK(back.step == 7);

    // A fresh trainer restored from the file continues identically.
    Trainer<double> b(cfg);
    b.restore(back);
    CHECK(checkpoints_equal(b.make_checkpoint(), ck));
    for (int i = 7; i < 12; ++i) {
        StepMetrics ma = a.train_step(vq[size_t(i)], vk[size_t(i)]);
        StepMetrics mb = b.train_step(vq[size_t(i)], vk[size_t(i)]);
        CHECK(ma.step == i);
        REQUIRE(ma.total == mb.total);
    }
    CHECK(checkpoints_equal(a.make_checkpoint(), b.make_checkpoint()));

    // Errors: missing file, bumped version, truncation, config mismatch,
    // wrong dtype.
    CHECK_THROWS_AS((void)load_checkpoint<double>((dir / "nope.bin").string()), IoError);
    {
        std::string bytes = read_file(path);
        bytes[8] = 0x02;  // the u32 format version follows the 8-byte magic
        std::ofstream(dir / "ver.bin", std::ios::binary) << bytes;
        CHECK_THROWS_AS((void)load_checkpoint<double>((dir / "ver.bin").string()), FormatError);
        std::ofstream(dir / "trunc.bin", std::ios::binary)
            << bytes.substr(0, bytes.size() - 64);
        CHECK_THROWS_AS((void)load_checkpoint<double>((dir / "trunc.bin").string()),
                        FormatError);
    }
    TrainConfig other = cfg;
    other.lr = 0.01;
    Trainer<double> c(other);
    CHECK_THROWS_AS(c.restore(back), ConfigError);
    CHECK_THROWS_AS((void)load_checkpoint<float>(path), FormatError);
}

// ===========================================================================
// Variant matrix smoke
// ===========================================================================

TEST_CASE("train_step: every variant mode runs with finite losses") {
    for (const auto& [mode, name] : variant_mode_names()) {
        CAPTURE(name);
        TrainConfig cfg = tiny_config(mode, 31);
        Trainer<float> tr(cfg);
        const VariantSpec& spec = tr.variant();
        CHECK(spec.channels == 8);
        CHECK(spec.feature_dim ==
              (spec.test_aggregation == Aggregation::bilinear_pool ? 8 * spec.k : 8));
        for (int i = 0; i < 2; ++i) {
            StepMetrics m = tr.train_step(random_views<float>(4, 64, 500 + uint64_t(i)),
                                          random_views<float>(4, 64, 600 + uint64_t(i)));
            CHECK(std::isfinite(m.total));
            CHECK(std::isfinite(m.l_cl));
            if (spec.fitting_loss) CHECK(m.l_kl >= 0);
            else CHECK(m.l_kl == 0.0);
        }
    }
}

TEST_CASE("trainer: construction guards") {
    // Batch of 1 is rejected at step time.
    TrainConfig cfg = tiny_config(VariantMode::ours, 33, 4);
    Trainer<double> tr(cfg);
    CHECK_THROWS_AS((void)tr.train_step(random_views<double>(1, 64, 1),
                                        random_views<double>(1, 64, 2)),
                    ArgumentError);
    // Mismatched view shapes.
    CHECK_THROWS_AS((void)tr.train_step(random_views<double>(4, 64, 1),
                                        random_views<double>(2, 64, 2)),
                    ArgumentError);
    // The self-supervised loop has no labels.
    TrainConfig ce = tiny_config(VariantMode::ours, 33, 4);
    ce.gradcam_source = GradcamSource::supervised_ce;
    CHECK_THROWS_AS((void)Trainer<double>(ce), ConfigError);
    // K override against a pinning mode propagates the config error.
    CHECK_THROWS_AS((void)Trainer<double>(tiny_config(VariantMode::moco_baseline, 33, 4)),
                    ConfigError);
}

// ===========================================================================
// Config serialization and the lr schedule
// ===========================================================================

TEST_CASE("train config: json round-trip, strict keys, validation") {
    TrainConfig cfg = tiny_config(VariantMode::sam_ssl_bilinear, 41);
    cfg.cosine_lr = true;
    cfg.gradcam_source = GradcamSource::full_loss;
    cfg.k_override = 16;
    TrainConfig back = train_config_from_json(to_json(cfg));
    CHECK(back.mode == cfg.mode);
    CHECK(back.k_override == cfg.k_override);
    CHECK(back.batch_size == cfg.batch_size);
    CHECK(back.lr == cfg.lr);
    CHECK(back.weights.nu_kl == cfg.weights.nu_kl);
    CHECK(back.cosine_lr == cfg.cosine_lr);
    CHECK(back.gradcam_source == cfg.gradcam_source);
    CHECK(back.tiny_widths == cfg.tiny_widths);
    CHECK(config_hash(back) == config_hash(cfg));

    TrainConfig changed = cfg;
    changed.lr = 0.001;
    CHECK(config_hash(changed) != config_hash(cfg));

    CHECK_THROWS_AS((void)train_config_from_json("{"), FormatError);
    CHECK_THROWS_AS((void)train_config_from_json(R"({"learning_rate": 0.1})"), FormatError);
    CHECK_THROWS_AS((void)train_config_from_json(R"({"lr": "fast"})"), FormatError);
    CHECK_THROWS_AS((void)train_config_from_json(R"({"batch_size": 1})"), ConfigError);
    CHECK_THROWS_AS((void)train_config_from_json(R"({"tau": 0})"), ConfigError);
    CHECK_THROWS_AS((void)train_config_from_json(R"({"momentum": 1.0})"), ConfigError);
    CHECK_THROWS_AS((void)train_config_from_json(R"({"variant": "театр"})"), ConfigError);
    // k=0 in a file means "variant default".
    CHECK_FALSE(train_config_from_json(R"({"k": 0})").k_override.has_value());
}

TEST_CASE("lr schedule: constant by default, cosine decays to zero") {
    TrainConfig cfg = tiny_config(VariantMode::ours, 43, 4);
    CHECK(lr_at(cfg, 0, 100) == cfg.lr);
    CHECK(lr_at(cfg, 99, 100) == cfg.lr);
    cfg.cosine_lr = true;
    CHECK(lr_at(cfg, 0, 100) == cfg.lr);
    CHECK(lr_at(cfg, 100, 100) == doctest::Approx(0.0));
    double prev = cfg.lr + 1;
    for (int64_t s = 0; s <= 100; s += 10) {
        const double v = lr_at(cfg, s, 100);
        CHECK(v < prev);
        prev = v;
    }
    // No horizon -> constant even with the flag on.
    CHECK(lr_at(cfg, 50, 0) == cfg.lr);
}

// ===========================================================================
// The pretraining loop
// ===========================================================================

TEST_CASE("pretrain_run: row counts, lr=0 epoch invariance, byte-identical replay") {
    // 2 classes x 4 train images, batch 4 -> 2 steps/epoch, 2 epochs.
    SyntheticSpec spec;
    spec.classes = 2;
    spec.train_per_class = 4;
    spec.test_per_class = 1;
    spec.seed = 51;
    fs::path data_dir = fresh_dir("pre_data");
    DatasetManifest data = generate_synthetic(spec, data_dir.string());

    TrainConfig cfg = tiny_config(VariantMode::ours, 53, 4);
    cfg.lr = 0;

    fs::path run1 = fresh_dir("pre_run1");
    PretrainSummary s1 = pretrain_run(data, cfg, run_opts(run1));
    CHECK(s1.steps_run == 4);
    CHECK(s1.last.step == 3);
    std::string csv = read_file(run1 / "metrics.csv");
    CHECK(csv.substr(0, 25) == "step,l_cl,l_kl,total,lr\n0");
    int rows = 0;
    for (char c : csv)
        if (c == '\n') ++rows;
    CHECK(rows == 5);  // header + 4 steps
    CHECK(fs::exists(run1 / "summary.json"));
    // The resolved config is written alongside and parses back equivalent.
    TrainConfig echoed = train_config_from_json(read_file(run1 / "config.json"));
    CHECK(config_hash(echoed) == config_hash(cfg));

    // lr=0 over full epochs leaves parameters at their init values.
    Checkpoint<float> ck = load_checkpoint<float>(s1.checkpoint_path);
    Trainer<float> fresh(cfg);
    const CheckpointSection<float>* qsec = ck.find("query.params");
    REQUIRE(qsec != nullptr);
    REQUIRE(qsec->tensors.size() == fresh.query().params().size());
    bool params_match = true;
    for (size_t i = 0; i < qsec->tensors.size(); ++i) {
        const Tensor<float>& saved = qsec->tensors[i].second;
        const Tensor<float>& init = fresh.query().params()[i].value;
        for (int64_t j = 0; j < saved.numel(); ++j)
            if (saved[j] != init[j]) params_match = false;
    }
    CHECK(params_match);

    // A second identical run produces a byte-identical metrics file.
    cfg.lr = 0.05;
    fs::path run2 = fresh_dir("pre_run2"), run3 = fresh_dir("pre_run3");
    pretrain_run(data, cfg, run_opts(run2));
    pretrain_run(data, cfg, run_opts(run3));
    CHECK(read_file(run2 / "metrics.csv") == read_file(run3 / "metrics.csv"));

    // max_steps caps the run.
    fs::path run4 = fresh_dir("pre_run4");
    PretrainSummary s4 = pretrain_run(data, cfg, run_opts(run4, 3));
    CHECK(s4.steps_run == 3);

    // Resuming from a partial run reproduces the uninterrupted file.
    PretrainOptions resume = run_opts(run4);
    resume.resume_from = s4.checkpoint_path;
    PretrainSummary s5 = pretrain_run(data, cfg, resume);
    CHECK(s5.steps_run == 1);
    CHECK(read_file(run4 / "metrics.csv") == read_file(run2 / "metrics.csv"));

    // A batch larger than the split is a data error.
    TrainConfig big = cfg;
    big.batch_size = 16;
    fs::path run5 = fresh_dir("pre_run5");
    CHECK_THROWS_AS((void)pretrain_run(data, big, run_opts(run5)), DataError);
}
