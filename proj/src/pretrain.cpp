#include "camfit/pretrain.hpp"

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "camfit/augment.hpp"
#include "camfit/image.hpp"

namespace camfit {

namespace fs = std::filesystem;

namespace {

// Fill batch views [N,3,S,S] for the given sample ids. Each sample's
// augmentation stream is keyed by its position in the epoch, never by content.
void fill_batch(const std::vector<Tensor<float>>& cache, const std::vector<int64_t>& order,
                int64_t slot, int64_t batch, const AugmentationPolicy& policy, uint64_t seed,
                int64_t epoch, Tensor<float>& out_q, Tensor<float>& out_k) {
    const int64_t s = policy.out_size, plane = 3 * s * s;
    for (int64_t j = 0; j < batch; ++j) {
        const int64_t pos = slot * batch + j;
        Rng rng(stream_seed(seed, {0xA6, uint64_t(epoch), uint64_t(pos)}));
        auto [vq, vk] = make_views(cache[size_t(order[size_t(pos)])], policy, rng);
        std::copy(vq.data(), vq.data() + plane, out_q.data() + j * plane);
        std::copy(vk.data(), vk.data() + plane, out_k.data() + j * plane);
    }
}

std::string indices_of(const std::vector<int64_t>& order, int64_t slot, int64_t batch) {
    std::ostringstream os;
    os << "[";
    for (int64_t j = 0; j < batch; ++j)
        os << (j ? "," : "") << order[size_t(slot * batch + j)];
    os << "]";
    return os.str();
}

}  // namespace

PretrainSummary pretrain_run(const DatasetManifest& data, const TrainConfig& cfg,
                             const PretrainOptions& opt) {
    cfg.validate();
    CAMFIT_CHECK(!opt.out_dir.empty(), ArgumentError, "pretrain: output directory required");
    std::error_code ec;
    fs::create_directories(opt.out_dir, ec);
    CAMFIT_CHECK(!ec, IoError, "pretrain: cannot create output directory " + opt.out_dir);

    const int64_t n = int64_t(data.train.size());
    CAMFIT_CHECK(n >= cfg.batch_size, DataError,
                 "pretrain: train split has " + std::to_string(n) + " images, need at least one "
                 "batch of " + std::to_string(cfg.batch_size));
    const int64_t steps_per_epoch = n / cfg.batch_size;  // trailing partial batch dropped
    const int64_t horizon = cfg.epochs * steps_per_epoch;
    const int64_t stop = opt.max_steps > 0 ? opt.max_steps : horizon;

    // Desk-scale datasets fit comfortably in memory; decode once.
    std::vector<Tensor<float>> cache;
    cache.reserve(size_t(n));
    for (const auto& e : data.train) cache.push_back(load_image(data.path_of(e)));

    Trainer<float> trainer(cfg);
    trainer.set_total_steps(horizon);
    const bool resuming = !opt.resume_from.empty();
    if (resuming) trainer.restore(load_checkpoint<float>(opt.resume_from));

    // The resolved config rides along with the run so later evaluation
    // commands can rebuild an identical trainer from the directory alone
    // (checkpoints carry only the config hash).
    {
        std::ofstream cf(opt.out_dir + "/config.json");
        CAMFIT_CHECK(cf.good(), IoError, "pretrain: cannot write config.json");
        cf << to_json(cfg) << "\n";
    }

    const std::string metrics_path = opt.out_dir + "/metrics.csv";
    std::ofstream metrics(metrics_path,
                          resuming ? (std::ios::out | std::ios::app) : std::ios::out);
    CAMFIT_CHECK(metrics.good(), IoError, "pretrain: cannot write " + metrics_path);
    if (!resuming) metrics << "step,l_cl,l_kl,total,lr\n";

    const AugmentationPolicy policy = cfg.augmentation();
    const int64_t S = policy.out_size;
    Tensor<float> batch_q({cfg.batch_size, 3, S, S}), batch_k({cfg.batch_size, 3, S, S});

    PretrainSummary summary;
    summary.metrics_path = metrics_path;
    std::vector<int64_t> order;
    int64_t order_epoch = -1;
    char row[160];
    while (trainer.step() < stop) {
        const int64_t s = trainer.step();
        const int64_t epoch = s / steps_per_epoch;
        const int64_t slot = s % steps_per_epoch;
        if (epoch != order_epoch) {
            Rng erng(stream_seed(cfg.seed, {0xE9, uint64_t(epoch)}));
            order = erng.permutation(n);
            order_epoch = epoch;
        }
        fill_batch(cache, order, slot, cfg.batch_size, policy, cfg.seed, epoch, batch_q, batch_k);
        StepMetrics m;
        try {
            m = trainer.train_step(batch_q, batch_k);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + "; batch indices " +
                               indices_of(order, slot, cfg.batch_size));
        }
        std::snprintf(row, sizeof row, "%" PRId64 ",%.9g,%.9g,%.9g,%.9g\n", m.step, m.l_cl,
                      m.l_kl, m.total, m.lr);
        metrics << row;
        summary.last = m;
        ++summary.steps_run;
        if (opt.on_step) opt.on_step(m);
    }
    metrics.flush();
    CAMFIT_CHECK(metrics.good(), IoError, "pretrain: metrics write failed");

    if (opt.write_checkpoint) {
        summary.checkpoint_path = opt.out_dir + "/checkpoint.bin";
        save_checkpoint(summary.checkpoint_path, trainer.make_checkpoint());
    }

    nlohmann::json js;
    js["steps"] = trainer.step();
    js["final"] = {{"l_cl", summary.last.l_cl},
                   {"l_kl", summary.last.l_kl},
                   {"total", summary.last.total},
                   {"lr", summary.last.lr}};
    char hash_hex[19];
    std::snprintf(hash_hex, sizeof hash_hex, "0x%016llx",
                  (unsigned long long)trainer.hash());
    js["config_hash"] = hash_hex;
    std::ofstream sum(opt.out_dir + "/summary.json");
    CAMFIT_CHECK(sum.good(), IoError, "pretrain: cannot write summary.json");
    sum << js.dump(2) << "\n";
    return summary;
}

}  // namespace camfit
