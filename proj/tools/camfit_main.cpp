// camfit: one binary exposing the whole pipeline as subcommands. Every
// command writes a run_manifest.json (argv, resolved config, seed, build id,
// wall clock, outputs) into its --out directory, first at start and again on
// completion, so runs are auditable and replayable. Exit codes: 0 success,
// 1 runtime failure, 2 usage error (bad flags or configuration).

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "camfit/data.hpp"
#include "camfit/eval.hpp"
#include "camfit/heatmap.hpp"
#include "camfit/manifest.hpp"
#include "camfit/pretrain.hpp"
#include "camfit/trainer.hpp"

namespace fs = std::filesystem;
using namespace camfit;

namespace {

// ===========================================================================
// Small file helpers
// ===========================================================================

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    CAMFIT_CHECK(in.good(), IoError, "cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    CAMFIT_CHECK(out.good(), IoError, "cannot write " + path);
    out << text;
    out.flush();
    CAMFIT_CHECK(out.good(), IoError, "write failed for " + path);
}

// ===========================================================================
// Shared option blocks
// ===========================================================================

// Dataset source: a directory with a manifest.json (as written by gen-data)
// or a plain class-folder tree that gets a seeded per-class split.
struct DataArgs {
    std::string dir;
    double train_fraction = 2.0 / 3.0;
    uint64_t split_seed = 1;
};

void add_data_flags(CLI::App* sub, DataArgs& a) {
    sub->add_option("--data", a.dir, "dataset directory (manifest.json or class folders)")
        ->required();
    sub->add_option("--train-fraction", a.train_fraction,
                    "per-class train share when scanning a plain folder tree");
    sub->add_option("--split-seed", a.split_seed, "seed for the folder split");
}

DatasetManifest load_dataset(const DataArgs& a) {
    const fs::path mpath = fs::path(a.dir) / "manifest.json";
    if (fs::exists(mpath)) {
        DatasetManifest dm = DatasetManifest::load(mpath.string());
        // The manifest travels with its images; whatever root it was written
        // under, the images now live next to it.
        dm.root = a.dir;
        return dm;
    }
    return load_image_folder(a.dir, SplitRule{a.train_fraction, a.split_seed});
}

// Trained-model source: a pretrain output directory, or an explicit
// checkpoint + config pair.
struct ModelArgs {
    std::string run;
    std::string ckpt;
    std::string config;
};

void add_model_flags(CLI::App* sub, ModelArgs& a) {
    sub->add_option("--from-run", a.run,
                    "pretrain output directory (reads its config.json and checkpoint.bin)");
    sub->add_option("--ckpt", a.ckpt, "checkpoint file (requires --config)");
    sub->add_option("--config", a.config, "training config JSON matching --ckpt");
}

TrainConfig model_config(const ModelArgs& a) {
    if (!a.run.empty()) {
        CAMFIT_CHECK(a.ckpt.empty() && a.config.empty(), UsageError,
                     "pass either --from-run or --ckpt/--config, not both");
        return train_config_from_json(
            read_text_file((fs::path(a.run) / "config.json").string()));
    }
    CAMFIT_CHECK(!a.ckpt.empty() && !a.config.empty(), UsageError,
                 "pass --from-run, or both --ckpt and --config");
    return train_config_from_json(read_text_file(a.config));
}

std::string model_ckpt(const ModelArgs& a) {
    return a.run.empty() ? a.ckpt : (fs::path(a.run) / "checkpoint.bin").string();
}

// Training configuration: optional JSON file, with flags overriding keys.
struct TrainFlags {
    std::string config_path;
    std::string variant;
    int64_t k = 0;
    double lr = 0, weight_decay = 0, sgd_momentum = 0;
    double tau = 0, temperature = 0, key_momentum = 0;
    int64_t epochs = 0, batch = 0, queue = 0, image_size = 0;
    uint64_t seed = 0;
    bool cosine = false;
    std::vector<int64_t> tiny_widths, projector_dims;
};

void add_train_flags(CLI::App* sub, TrainFlags& f) {
    sub->add_option("--config", f.config_path, "training config JSON (flags override its keys)");
    sub->add_option("--variant", f.variant,
                    "model variant (ours, ours-dualpooling, moco-baseline, ...)");
    sub->add_option("--k", f.k, "projection count override");
    sub->add_option("--lr", f.lr, "learning rate");
    sub->add_option("--epochs", f.epochs, "training epochs");
    sub->add_option("--batch", f.batch, "batch size");
    sub->add_option("--seed", f.seed, "training seed");
    sub->add_option("--queue-size", f.queue, "negatives queue size");
    sub->add_option("--tau", f.tau, "attention softmax temperature");
    sub->add_option("--temperature", f.temperature, "contrastive temperature");
    sub->add_option("--key-momentum", f.key_momentum, "key-encoder momentum");
    sub->add_option("--weight-decay", f.weight_decay, "SGD weight decay");
    sub->add_option("--sgd-momentum", f.sgd_momentum, "SGD momentum");
    sub->add_flag("--cosine-lr", f.cosine, "cosine learning-rate decay to zero");
    sub->add_option("--image-size", f.image_size, "input image side length");
    sub->add_option("--tiny-widths", f.tiny_widths, "backbone stage widths")->delimiter(',');
    sub->add_option("--projector-dims", f.projector_dims, "projector layer dims")->delimiter(',');
}

TrainConfig resolve_train_config(const CLI::App* sub, const TrainFlags& f) {
    TrainConfig cfg;
    if (sub->count("--config")) cfg = train_config_from_json(read_text_file(f.config_path));
    if (sub->count("--variant")) cfg.mode = parse_variant_mode(f.variant);
    if (sub->count("--k")) cfg.k_override = f.k;
    if (sub->count("--lr")) cfg.lr = f.lr;
    if (sub->count("--epochs")) cfg.epochs = f.epochs;
    if (sub->count("--batch")) cfg.batch_size = f.batch;
    if (sub->count("--seed")) cfg.seed = f.seed;
    if (sub->count("--queue-size")) cfg.queue_size = f.queue;
    if (sub->count("--tau")) cfg.tau = f.tau;
    if (sub->count("--temperature")) cfg.temperature = f.temperature;
    if (sub->count("--key-momentum")) cfg.key_momentum = f.key_momentum;
    if (sub->count("--weight-decay")) cfg.weight_decay = f.weight_decay;
    if (sub->count("--sgd-momentum")) cfg.sgd_momentum = f.sgd_momentum;
    if (sub->count("--cosine-lr")) cfg.cosine_lr = f.cosine;
    if (sub->count("--image-size")) cfg.image_size = f.image_size;
    if (sub->count("--tiny-widths")) cfg.tiny_widths = f.tiny_widths;
    if (sub->count("--projector-dims")) cfg.projector_dims = f.projector_dims;
    cfg.validate();
    return cfg;
}

// Manifest-wrapped command body: begin, run, finish (ok or failed).
template <typename Body>
int with_manifest(const std::string& command, const std::vector<std::string>& argv,
                  const std::string& config_json, uint64_t seed, const std::string& out_dir,
                  Body&& body) {
    RunManifest man = begin_run(command, argv, config_json, seed, out_dir);
    try {
        std::vector<std::string> outputs = body();
        finish_run(man, out_dir, "ok", "", outputs);
        return 0;
    } catch (const std::exception& e) {
        finish_run(man, out_dir, "failed", e.what(), {});
        throw;
    }
}

// ===========================================================================
// gen-data
// ===========================================================================

struct GenArgs {
    std::string spec = "default";
    std::string out;
    int64_t classes = 0, train_per_class = 0, test_per_class = 0;
    int64_t image_size = 0, patch_size = 0;
    double correlation = 0;
    uint64_t seed = 0;
};

int cmd_gen_data(const CLI::App* sub, const GenArgs& a,
                 const std::vector<std::string>& argv) {
    SyntheticSpec spec;
    if (a.spec != "default") spec = synthetic_spec_from_json(read_text_file(a.spec));
    if (sub->count("--classes")) spec.classes = a.classes;
    if (sub->count("--train-per-class")) spec.train_per_class = a.train_per_class;
    if (sub->count("--test-per-class")) spec.test_per_class = a.test_per_class;
    if (sub->count("--image-size")) spec.image_size = a.image_size;
    if (sub->count("--patch-size")) spec.patch_size = a.patch_size;
    if (sub->count("--correlation")) spec.correlation = a.correlation;
    if (sub->count("--seed")) spec.seed = a.seed;
    spec.validate();

    return with_manifest("gen-data", argv, to_json(spec), spec.seed, a.out, [&] {
        DatasetManifest dm = generate_synthetic(spec, a.out);
        std::printf("generated %zu train + %zu test images across %lld classes into %s\n",
                    dm.train.size(), dm.test.size(),
                    (long long)dm.num_classes(), a.out.c_str());
        return std::vector<std::string>{"manifest.json", "boxes.json", "backgrounds.json"};
    });
}

// ===========================================================================
// pretrain
// ===========================================================================

struct PretrainArgs {
    std::string out;
    int64_t steps = 0;
    std::string resume;
    bool no_checkpoint = false;
    int64_t log_every = 50;
};

int cmd_pretrain(const CLI::App* sub, const TrainFlags& tf, const DataArgs& da,
                 const PretrainArgs& a, const std::vector<std::string>& argv) {
    TrainConfig cfg = resolve_train_config(sub, tf);
    DatasetManifest data = load_dataset(da);

    return with_manifest("pretrain", argv, to_json(cfg), cfg.seed, a.out, [&] {
        PretrainOptions opt;
        opt.out_dir = a.out;
        opt.max_steps = a.steps;
        opt.resume_from = a.resume;
        opt.write_checkpoint = !a.no_checkpoint;
        if (a.log_every > 0) {
            opt.on_step = [&](const StepMetrics& m) {
                if (m.step % a.log_every == 0)
                    std::fprintf(stderr, "step %lld  l_cl %.4f  l_kl %.4f  total %.4f  lr %.3g\n",
                                 (long long)m.step, m.l_cl, m.l_kl, m.total, m.lr);
            };
        }
        PretrainSummary s = pretrain_run(data, cfg, opt);
        std::printf("pretrained %lld steps; final total %.4f; metrics at %s\n",
                    (long long)s.steps_run, s.last.total, s.metrics_path.c_str());
        std::vector<std::string> outputs = {"metrics.csv", "summary.json", "config.json"};
        if (!s.checkpoint_path.empty()) outputs.push_back("checkpoint.bin");
        return outputs;
    });
}

// ===========================================================================
// eval-retrieval
// ===========================================================================

struct RetrievalArgs {
    std::string out;
    std::string metric = "cosine";
    std::string split = "test";
    int64_t batch = 64;
    std::string save_features;  // file name under --out; empty = off
};

int cmd_eval_retrieval(const ModelArgs& ma, const DataArgs& da, const RetrievalArgs& a,
                       const std::vector<std::string>& argv) {
    TrainConfig cfg = model_config(ma);
    const Similarity metric = parse_similarity(a.metric);

    return with_manifest("eval-retrieval", argv, to_json(cfg), cfg.seed, a.out, [&] {
        Trainer<float> tr(cfg);
        tr.restore(load_checkpoint<float>(model_ckpt(ma)));
        DatasetManifest data = load_dataset(da);
        EvalBatch eb = load_eval_split(data, a.split, cfg.augmentation());

        Tensor<double> f = extract_features(tr, eb.images, a.batch);
        std::vector<std::string> outputs = {"retrieval.json"};
        if (!a.save_features.empty()) {
            save_features((fs::path(a.out) / a.save_features).string(), f, eb.labels);
            outputs.push_back(a.save_features);
        }
        RetrievalReport rep = retrieval_eval(f, eb.labels, metric, &std::cerr);
        write_text_file((fs::path(a.out) / "retrieval.json").string(), rep.to_json());
        std::printf("rank1 %.2f  rank5 %.2f  mAP %.2f  (%lld queries, %lld excluded, %s)\n",
                    rep.rank1, rep.rank5, rep.map, (long long)rep.queries,
                    (long long)rep.excluded_queries, to_string(rep.metric).c_str());
        return outputs;
    });
}

// ===========================================================================
// eval-linear
// ===========================================================================

struct LinearArgs {
    std::string out;
    int64_t batch = 64;
    uint64_t probe_seed = 1;
    std::vector<double> fractions = {1.0, 0.5, 0.2};
};

int cmd_eval_linear(const ModelArgs& ma, const DataArgs& da, const LinearArgs& a,
                    const std::vector<std::string>& argv) {
    TrainConfig cfg = model_config(ma);

    return with_manifest("eval-linear", argv, to_json(cfg), cfg.seed, a.out, [&] {
        Trainer<float> tr(cfg);
        tr.restore(load_checkpoint<float>(model_ckpt(ma)));
        DatasetManifest data = load_dataset(da);
        EvalBatch train_eb = load_eval_split(data, "train", cfg.augmentation());
        EvalBatch test_eb = load_eval_split(data, "test", cfg.augmentation());

        Tensor<double> ftr = extract_features(tr, train_eb.images, a.batch);
        Tensor<double> fte = extract_features(tr, test_eb.images, a.batch);
        ProbeReport rep = linear_probe_report(ftr, train_eb.labels, fte, test_eb.labels,
                                              a.probe_seed, a.fractions);
        write_text_file((fs::path(a.out) / "probe.json").string(), rep.to_json());
        write_text_file((fs::path(a.out) / "probe.csv").string(), rep.to_csv());
        for (const ProbeRow& r : rep.rows)
            std::printf("fraction %.2f  top1 %.2f  top5 %.2f  (l2 %.0e)\n", r.fraction,
                        r.top1, r.top5, r.l2_penalty);
        return std::vector<std::string>{"probe.json", "probe.csv"};
    });
}

// ===========================================================================
// analyze-projections
// ===========================================================================

struct AnalyzeArgs {
    std::string out;
    std::string split = "test";
    int64_t top = 8;
    int64_t batch = 64;
    std::string metric = "cosine";
};

int cmd_analyze_projections(const ModelArgs& ma, const DataArgs& da, const AnalyzeArgs& a,
                            const std::vector<std::string>& argv) {
    TrainConfig cfg = model_config(ma);
    CAMFIT_CHECK(a.top >= 1, UsageError, "--top must be positive");
    const Similarity metric = parse_similarity(a.metric);

    return with_manifest("analyze-projections", argv, to_json(cfg), cfg.seed, a.out, [&] {
        Trainer<float> tr(cfg);
        tr.restore(load_checkpoint<float>(model_ckpt(ma)));
        DatasetManifest data = load_dataset(da);
        EvalBatch eb = load_eval_split(data, a.split, cfg.augmentation());

        ProjectionVarianceReport pv = projection_variance(tr, eb.images, a.batch);
        const int64_t keep = std::min<int64_t>(a.top, int64_t(pv.ranking.size()));
        std::vector<int64_t> subset(pv.ranking.begin(), pv.ranking.begin() + keep);

        Tensor<double> full = extract_features(tr, eb.images, a.batch);
        Tensor<double> restricted = subset_projection_inference(tr, eb.images, subset, a.batch);
        RetrievalReport full_rep = retrieval_eval(full, eb.labels, metric, &std::cerr);
        RetrievalReport sub_rep = retrieval_eval(restricted, eb.labels, metric, &std::cerr);

        nlohmann::json j;
        j["variance"] = nlohmann::json::parse(pv.to_json());
        j["top"] = keep;
        j["subset"] = subset;
        j["retrieval_full"] = nlohmann::json::parse(full_rep.to_json());
        j["retrieval_subset"] = nlohmann::json::parse(sub_rep.to_json());
        write_text_file((fs::path(a.out) / "projections.json").string(), j.dump(2) + "\n");

        std::printf("top-%lld projections by response variance:", (long long)keep);
        for (int64_t k : subset) std::printf(" %lld", (long long)k);
        std::printf("\nrank1 full %.2f  vs  top-%lld subset %.2f\n", full_rep.rank1,
                    (long long)keep, sub_rep.rank1);
        return std::vector<std::string>{"projections.json"};
    });
}

// ===========================================================================
// export-heatmaps
// ===========================================================================

struct HeatmapArgs {
    std::string out;
    std::string split = "test";
    int64_t count = 8;
    int64_t batch = 16;
};

int cmd_export_heatmaps(const ModelArgs& ma, const DataArgs& da, const HeatmapArgs& a,
                        const std::vector<std::string>& argv) {
    TrainConfig cfg = model_config(ma);
    CAMFIT_CHECK(a.count >= 1, UsageError, "--count must be positive");

    return with_manifest("export-heatmaps", argv, to_json(cfg), cfg.seed, a.out, [&] {
        Trainer<float> tr(cfg);
        tr.restore(load_checkpoint<float>(model_ckpt(ma)));
        const VariantSpec& spec = tr.variant();
        CAMFIT_CHECK(spec.has_branch, ConfigError,
                     "export-heatmaps: variant " + to_string(spec.mode) +
                         " has no attention branch");
        DatasetManifest data = load_dataset(da);
        EvalBatch eb = load_eval_split(data, a.split, cfg.augmentation());
        const int64_t n = std::min<int64_t>(a.count, int64_t(eb.images.size()));
        const AugmentationPolicy policy = cfg.augmentation();
        const int64_t S = policy.out_size;

        std::vector<Tensor<float>> bases, maps;
        bases.reserve(size_t(n));
        maps.reserve(size_t(n));
        for (int64_t lo = 0; lo < n; lo += a.batch) {
            const int64_t b = std::min(a.batch, n - lo);
            Tensor<float> block({b, 3, S, S});
            for (int64_t i = 0; i < b; ++i)
                for (int64_t j = 0; j < 3 * S * S; ++j)
                    block[i * 3 * S * S + j] = eb.images[size_t(lo + i)][j];
            Tape<float> tape;
            auto enc_out = tr.query().encode(tape, block, ForwardCtx{false, false});
            Var<float> attn = spec.mlp_branch ? tr.mlp_branch()->forward(tape, enc_out.map)
                                              : tr.branch()->forward(tape, enc_out.map);
            const Tensor<float>& av = attn.value();  // [b,H,W]
            const int64_t hw = av.dim(1) * av.dim(2);
            for (int64_t i = 0; i < b; ++i) {
                Tensor<float> m({av.dim(1), av.dim(2)});
                for (int64_t j = 0; j < hw; ++j) m[j] = av[i * hw + j];
                maps.push_back(std::move(m));
                // Undo the test-transform normalization for a viewable base.
                Tensor<float> base = eb.images[size_t(lo + i)].clone();
                for (int64_t j = 0; j < base.numel(); ++j)
                    base[j] = base[j] * policy.norm_std + policy.norm_mean;
                bases.push_back(std::move(base));
            }
        }
        std::vector<std::string> written = export_heatmaps(bases, maps, a.out, "heatmap");
        std::printf("exported %zu heatmaps into %s\n", written.size(), a.out.c_str());
        std::vector<std::string> outputs;
        outputs.reserve(written.size());
        for (const std::string& p : written) outputs.push_back(fs::path(p).filename().string());
        return outputs;
    });
}

// ===========================================================================
// sweep-k
// ===========================================================================

struct SweepArgs {
    std::string out;
    std::vector<int64_t> values = {1, 2, 4, 8, 16, 32, 64, 128, 256};
    std::string split = "test";
    std::string metric = "cosine";
    int64_t steps = 0;
    int64_t batch = 64;
    bool parallel = false;
};

int cmd_sweep_k(const CLI::App* sub, const TrainFlags& tf, const DataArgs& da,
                const SweepArgs& a, const std::vector<std::string>& argv) {
    TrainConfig base = resolve_train_config(sub, tf);
    CAMFIT_CHECK(!a.values.empty(), UsageError, "--values must list at least one K");
    const Similarity metric = parse_similarity(a.metric);
    DatasetManifest data = load_dataset(da);

    return with_manifest("sweep-k", argv, to_json(base), base.seed, a.out, [&] {
        EvalBatch eb = load_eval_split(data, a.split, base.augmentation());
        const int64_t trials = int64_t(a.values.size());
        std::vector<RetrievalReport> rows(static_cast<size_t>(trials));
        std::vector<std::exception_ptr> errors(static_cast<size_t>(trials));

#pragma omp parallel for if (a.parallel) schedule(dynamic, 1)
        for (int64_t t = 0; t < trials; ++t) {
            try {
                const int64_t kv = a.values[size_t(t)];
                TrainConfig cfg = base;
                cfg.k_override = kv;
                cfg.validate();
                const std::string subdir = (fs::path(a.out) / ("k" + std::to_string(kv))).string();
                PretrainOptions opt;
                opt.out_dir = subdir;
                opt.max_steps = a.steps;
                pretrain_run(data, cfg, opt);
                Trainer<float> tr(cfg);
                tr.restore(load_checkpoint<float>(subdir + "/checkpoint.bin"));
                Tensor<double> f = extract_features(tr, eb.images, a.batch);
                rows[size_t(t)] = retrieval_eval(f, eb.labels, metric);
                std::fprintf(stderr, "k=%lld done: rank1 %.2f\n", (long long)kv,
                             rows[size_t(t)].rank1);
            } catch (...) {
                errors[size_t(t)] = std::current_exception();
            }
        }
        for (const std::exception_ptr& e : errors)
            if (e) std::rethrow_exception(e);

        std::string csv = "k,rank1,rank5,map\n";
        std::printf("%8s %8s %8s %8s\n", "k", "rank1", "rank5", "mAP");
        char line[128];
        for (int64_t t = 0; t < trials; ++t) {
            const RetrievalReport& r = rows[size_t(t)];
            std::snprintf(line, sizeof line, "%lld,%.4f,%.4f,%.4f\n",
                          (long long)a.values[size_t(t)], r.rank1, r.rank5, r.map);
            csv += line;
            std::printf("%8lld %8.2f %8.2f %8.2f\n", (long long)a.values[size_t(t)], r.rank1,
                        r.rank5, r.map);
        }
        write_text_file((fs::path(a.out) / "sweep.csv").string(), csv);
        std::vector<std::string> outputs = {"sweep.csv"};
        for (int64_t kv : a.values) outputs.push_back("k" + std::to_string(kv) + "/");
        return outputs;
    });
}

}  // namespace

// ===========================================================================
// Dispatch
// ===========================================================================

int main(int argc, char** argv) {
    std::vector<std::string> full_argv(argv, argv + argc);

    CLI::App app{"contrastive pretraining with attention-guided pooling: full pipeline"};
    app.require_subcommand(1);

    // gen-data
    GenArgs gen;
    CLI::App* sub_gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
    sub_gen->add_option("--spec", gen.spec, "'default' or a spec JSON path");
    sub_gen->add_option("--out", gen.out, "output dataset directory")->required();
    sub_gen->add_option("--classes", gen.classes, "number of classes");
    sub_gen->add_option("--train-per-class", gen.train_per_class, "train images per class");
    sub_gen->add_option("--test-per-class", gen.test_per_class, "test images per class");
    sub_gen->add_option("--image-size", gen.image_size, "image side length");
    sub_gen->add_option("--patch-size", gen.patch_size, "glyph patch side length");
    sub_gen->add_option("--correlation", gen.correlation, "background-class correlation in [0,1]");
    sub_gen->add_option("--seed", gen.seed, "generator seed");

    // pretrain
    TrainFlags pre_tf;
    DataArgs pre_da;
    PretrainArgs pre;
    CLI::App* sub_pre = app.add_subcommand("pretrain", "run self-supervised pretraining");
    add_train_flags(sub_pre, pre_tf);
    add_data_flags(sub_pre, pre_da);
    sub_pre->add_option("--out", pre.out, "output run directory")->required();
    sub_pre->add_option("--steps", pre.steps, "stop after this many steps (0 = full epochs)");
    sub_pre->add_option("--resume", pre.resume, "checkpoint to resume from");
    sub_pre->add_flag("--no-checkpoint", pre.no_checkpoint, "skip writing checkpoint.bin");
    sub_pre->add_option("--log-every", pre.log_every,
                        "progress print stride on stderr (0 = quiet)");

    // eval-retrieval
    ModelArgs ret_ma;
    DataArgs ret_da;
    RetrievalArgs ret;
    CLI::App* sub_ret = app.add_subcommand("eval-retrieval", "leave-one-out retrieval metrics");
    add_model_flags(sub_ret, ret_ma);
    add_data_flags(sub_ret, ret_da);
    sub_ret->add_option("--out", ret.out, "output directory")->required();
    sub_ret->add_option("--metric", ret.metric, "similarity: cosine or l2");
    sub_ret->add_option("--split", ret.split, "dataset split: test or train");
    sub_ret->add_option("--batch", ret.batch, "feature-extraction batch size");
    sub_ret->add_option("--save-features", ret.save_features,
                        "also cache the feature matrix under this file name");

    // eval-linear
    ModelArgs lin_ma;
    DataArgs lin_da;
    LinearArgs lin;
    CLI::App* sub_lin = app.add_subcommand("eval-linear", "linear probe at label fractions");
    add_model_flags(sub_lin, lin_ma);
    add_data_flags(sub_lin, lin_da);
    sub_lin->add_option("--out", lin.out, "output directory")->required();
    sub_lin->add_option("--batch", lin.batch, "feature-extraction batch size");
    sub_lin->add_option("--probe-seed", lin.probe_seed, "stratified-subset seed");
    sub_lin->add_option("--fractions", lin.fractions, "label fractions to probe")
        ->delimiter(',');

    // analyze-projections
    ModelArgs ana_ma;
    DataArgs ana_da;
    AnalyzeArgs ana;
    CLI::App* sub_ana = app.add_subcommand(
        "analyze-projections", "rank projections by response variance; retrieval on the top set");
    add_model_flags(sub_ana, ana_ma);
    add_data_flags(sub_ana, ana_da);
    sub_ana->add_option("--out", ana.out, "output directory")->required();
    sub_ana->add_option("--top", ana.top, "subset size for restricted inference");
    sub_ana->add_option("--split", ana.split, "dataset split: test or train");
    sub_ana->add_option("--batch", ana.batch, "feature-extraction batch size");
    sub_ana->add_option("--metric", ana.metric, "similarity: cosine or l2");

    // export-heatmaps
    ModelArgs hm_ma;
    DataArgs hm_da;
    HeatmapArgs hm;
    CLI::App* sub_hm = app.add_subcommand("export-heatmaps", "attention overlays as PNGs");
    add_model_flags(sub_hm, hm_ma);
    add_data_flags(sub_hm, hm_da);
    sub_hm->add_option("--out", hm.out, "output directory")->required();
    sub_hm->add_option("--count", hm.count, "number of images to export");
    sub_hm->add_option("--split", hm.split, "dataset split: test or train");
    sub_hm->add_option("--batch", hm.batch, "forward batch size");

    // sweep-k
    TrainFlags swp_tf;
    DataArgs swp_da;
    SweepArgs swp;
    CLI::App* sub_swp =
        app.add_subcommand("sweep-k", "train and evaluate across projection counts");
    add_train_flags(sub_swp, swp_tf);
    add_data_flags(sub_swp, swp_da);
    sub_swp->add_option("--out", swp.out, "output directory")->required();
    sub_swp->add_option("--values", swp.values, "projection counts to sweep")
        ->delimiter(',')
        ->capture_default_str();
    sub_swp->add_option("--split", swp.split, "dataset split to evaluate: test or train");
    sub_swp->add_option("--metric", swp.metric, "similarity: cosine or l2");
    sub_swp->add_option("--steps", swp.steps, "per-trial step cap (0 = full epochs)");
    sub_swp->add_option("--eval-batch", swp.batch, "feature-extraction batch size");
    sub_swp->add_flag("--parallel-trials", swp.parallel, "run trials concurrently");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (sub_gen->parsed()) return cmd_gen_data(sub_gen, gen, full_argv);
        if (sub_pre->parsed()) return cmd_pretrain(sub_pre, pre_tf, pre_da, pre, full_argv);
        if (sub_ret->parsed()) return cmd_eval_retrieval(ret_ma, ret_da, ret, full_argv);
        if (sub_lin->parsed()) return cmd_eval_linear(lin_ma, lin_da, lin, full_argv);
        if (sub_ana->parsed()) return cmd_analyze_projections(ana_ma, ana_da, ana, full_argv);
        if (sub_hm->parsed()) return cmd_export_heatmaps(hm_ma, hm_da, hm, full_argv);
        if (sub_swp->parsed()) return cmd_sweep_k(sub_swp, swp_tf, swp_da, swp, full_argv);
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const ArgumentError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const UsageError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
