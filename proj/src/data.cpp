#include "camfit/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "camfit/common.hpp"
#include "camfit/image.hpp"
#include "camfit/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace camfit {

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

void DatasetManifest::validate() const {
    CAMFIT_CHECK(!class_names.empty(), DataError, "manifest: no classes");
    std::vector<int64_t> train_count(class_names.size(), 0), test_count(class_names.size(), 0);
    std::set<std::string> seen_train;
    for (const auto& e : train) {
        CAMFIT_CHECK(e.label >= 0 && e.label < num_classes(), DataError,
                     "manifest: train label out of range for " + e.rel_path);
        ++train_count[size_t(e.label)];
        seen_train.insert(e.rel_path);
    }
    for (const auto& e : test) {
        CAMFIT_CHECK(e.label >= 0 && e.label < num_classes(), DataError,
                     "manifest: test label out of range for " + e.rel_path);
        CAMFIT_CHECK(!seen_train.count(e.rel_path), DataError,
                     "manifest: image in both splits: " + e.rel_path);
        ++test_count[size_t(e.label)];
    }
    for (size_t c = 0; c < class_names.size(); ++c) {
        CAMFIT_CHECK(train_count[c] > 0, DataError,
                     "manifest: class has no train images: " + class_names[c]);
        CAMFIT_CHECK(test_count[c] > 0, DataError,
                     "manifest: class has no test images: " + class_names[c]);
    }
}

namespace {

json entries_to_json(const std::vector<ImageEntry>& entries) {
    json arr = json::array();
    for (const auto& e : entries) arr.push_back({{"path", e.rel_path}, {"label", e.label}});
    return arr;
}

std::vector<ImageEntry> entries_from_json(const json& arr) {
    std::vector<ImageEntry> out;
    for (const auto& item : arr)
        out.push_back({item.at("path").get<std::string>(), item.at("label").get<int64_t>()});
    return out;
}

}  // namespace

void DatasetManifest::save(const std::string& path) const {
    json j{{"root", root},
           {"classes", class_names},
           {"train", entries_to_json(train)},
           {"test", entries_to_json(test)},
           {"skipped", skipped}};
    std::ofstream out(path);
    CAMFIT_CHECK(out.good(), IoError, "cannot open manifest for writing: " + path);
    out << j.dump(2) << "\n";
    CAMFIT_CHECK(out.good(), IoError, "manifest write failed: " + path);
}

DatasetManifest DatasetManifest::load(const std::string& path) {
    std::ifstream in(path);
    CAMFIT_CHECK(in.good(), IoError, "cannot open manifest: " + path);
    json j;
    try {
        in >> j;
        DatasetManifest m;
        m.root = j.at("root").get<std::string>();
        m.class_names = j.at("classes").get<std::vector<std::string>>();
        m.train = entries_from_json(j.at("train"));
        m.test = entries_from_json(j.at("test"));
        m.skipped = j.at("skipped").get<std::vector<std::string>>();
        m.validate();
        return m;
    } catch (const json::exception& e) {
        throw FormatError("malformed manifest " + path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Folder ingestion
// ---------------------------------------------------------------------------

DatasetManifest load_image_folder(const std::string& root, const SplitRule& rule) {
    CAMFIT_CHECK(rule.train_fraction > 0 && rule.train_fraction < 1, ConfigError,
                 "split rule: train fraction must lie strictly inside (0,1)");
    CAMFIT_CHECK(fs::is_directory(root), IoError, "dataset root is not a directory: " + root);

    std::vector<std::string> class_dirs;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory()) class_dirs.push_back(entry.path().filename().string());
    std::sort(class_dirs.begin(), class_dirs.end());
    CAMFIT_CHECK(!class_dirs.empty(), DataError, "no class directories under " + root);

    DatasetManifest m;
    m.root = root;
    m.class_names = class_dirs;
    for (size_t c = 0; c < class_dirs.size(); ++c) {
        std::vector<std::string> files;
        for (const auto& entry : fs::directory_iterator(fs::path(root) / class_dirs[c]))
            if (entry.is_regular_file())
                files.push_back(class_dirs[c] + "/" + entry.path().filename().string());
        std::sort(files.begin(), files.end());

        std::vector<std::string> usable;
        for (const auto& rel : files) {
            try {
                (void)load_image(root + "/" + rel);
                usable.push_back(rel);
            } catch (const DataError&) {
                m.skipped.push_back(rel);
            }
        }
        CAMFIT_CHECK(!usable.empty(), DataError,
                     "class directory has no decodable images: " + class_dirs[c]);

        Rng rng(stream_seed(rule.seed, {0xDA7Aull, uint64_t(c)}));
        std::vector<int64_t> order = rng.permutation(int64_t(usable.size()));
        const int64_t n = int64_t(usable.size());
        const int64_t n_train = int64_t(std::llround(rule.train_fraction * double(n)));
        CAMFIT_CHECK(n_train >= 1 && n_train < n, DataError,
                     "split leaves a class empty on one side: " + class_dirs[c] + " (" +
                         std::to_string(n) + " images, fraction " +
                         std::to_string(rule.train_fraction) + ")");
        std::vector<ImageEntry> tr, te;
        for (int64_t i = 0; i < n; ++i) {
            ImageEntry e{usable[size_t(order[size_t(i)])], int64_t(c)};
            (i < n_train ? tr : te).push_back(e);
        }
        auto by_path = [](const ImageEntry& a, const ImageEntry& b) {
            return a.rel_path < b.rel_path;
        };
        std::sort(tr.begin(), tr.end(), by_path);
        std::sort(te.begin(), te.end(), by_path);
        m.train.insert(m.train.end(), tr.begin(), tr.end());
        m.test.insert(m.test.end(), te.begin(), te.end());
    }
    m.validate();
    return m;
}

// ---------------------------------------------------------------------------
// Glyphs
// ---------------------------------------------------------------------------

namespace {

constexpr std::array<const char*, 10> kGlyphNames = {"solid", "ring",   "cross", "xmark", "hbars",
                                                     "vbars", "diag",   "checker", "tee", "corner"};

bool glyph_bit(int64_t g, int64_t y, int64_t x) {
    switch (g) {
        case 0: return true;                                            // filled block
        case 1: return y == 0 || y == 7 || x == 0 || x == 7;            // hollow square
        case 2: return y == 3 || y == 4 || x == 3 || x == 4;            // plus
        case 3: return std::abs(x - y) <= 1 || std::abs(7 - x - y) <= 1;  // X
        case 4: return (y / 2) % 2 == 0;                                // horizontal bars
        case 5: return (x / 2) % 2 == 0;                                // vertical bars
        case 6: return std::abs(x - y) <= 1;                            // diagonal band
        case 7: return ((x / 2) + (y / 2)) % 2 == 0;                    // checkerboard
        case 8: return y < 2 || x == 3 || x == 4;                       // T
        case 9: return x < 2 || y >= 6;                                 // corner L
    }
    return false;
}

}  // namespace

int64_t glyph_count() { return int64_t(kGlyphNames.size()); }

std::string glyph_name(int64_t glyph) {
    CAMFIT_CHECK(glyph >= 0 && glyph < glyph_count(), ArgumentError, "glyph id out of range");
    return kGlyphNames[size_t(glyph)];
}

std::vector<uint8_t> glyph_mask(int64_t glyph, int64_t size) {
    CAMFIT_CHECK(glyph >= 0 && glyph < glyph_count(), ArgumentError, "glyph id out of range");
    CAMFIT_CHECK(size >= 4, ArgumentError, "glyph mask size must be >= 4");
    std::vector<uint8_t> m(size_t(size * size), 0);
    for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x)
            m[size_t(y * size + x)] = glyph_bit(glyph, y * 8 / size, x * 8 / size) ? 1 : 0;
    return m;
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

void SyntheticSpec::validate() const {
    CAMFIT_CHECK(classes >= 2 && classes <= glyph_count(), ConfigError,
                 "synthetic: classes must lie in [2, " + std::to_string(glyph_count()) + "]");
    CAMFIT_CHECK(train_per_class >= 1 && test_per_class >= 1, ConfigError,
                 "synthetic: per-class counts must be >= 1");
    CAMFIT_CHECK(patch_size >= 4, ConfigError, "synthetic: patch too small");
    CAMFIT_CHECK(patch_margin >= 0, ConfigError, "synthetic: negative margin");
    CAMFIT_CHECK(image_size >= patch_size + 2 * patch_margin, ConfigError,
                 "synthetic: patch plus margins does not fit inside the image");
    CAMFIT_CHECK(background_pool >= 2, ConfigError, "synthetic: background pool too small");
    CAMFIT_CHECK(correlation >= 0 && correlation <= 1, ConfigError,
                 "synthetic: correlation must lie in [0,1]");
    if (!glyph_of_class.empty()) {
        CAMFIT_CHECK(int64_t(glyph_of_class.size()) == classes, ConfigError,
                     "synthetic: glyph assignment size must equal class count");
        std::set<int64_t> seen;
        for (int64_t g : glyph_of_class) {
            CAMFIT_CHECK(g >= 0 && g < glyph_count(), ConfigError,
                         "synthetic: glyph id out of range");
            CAMFIT_CHECK(seen.insert(g).second, ConfigError, "synthetic: duplicate glyph id");
        }
    }
}

SyntheticSpec synthetic_spec_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed synthetic spec: ") + e.what());
    }
    static const std::set<std::string> known = {
        "classes",      "train_per_class", "test_per_class", "image_size",
        "patch_size",   "patch_margin",    "background_pool", "correlation",
        "seed",         "glyph_of_class"};
    for (const auto& [key, _] : j.items())
        CAMFIT_CHECK(known.count(key), FormatError, "unknown synthetic spec key: " + key);
    try {
        SyntheticSpec s;
        s.classes = j.value("classes", s.classes);
        s.train_per_class = j.value("train_per_class", s.train_per_class);
        s.test_per_class = j.value("test_per_class", s.test_per_class);
        s.image_size = j.value("image_size", s.image_size);
        s.patch_size = j.value("patch_size", s.patch_size);
        s.patch_margin = j.value("patch_margin", s.patch_margin);
        s.background_pool = j.value("background_pool", s.background_pool);
        s.correlation = j.value("correlation", s.correlation);
        s.seed = j.value("seed", s.seed);
        s.glyph_of_class = j.value("glyph_of_class", s.glyph_of_class);
        s.validate();
        return s;
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad synthetic spec value: ") + e.what());
    }
}

std::string to_json(const SyntheticSpec& spec) {
    json j{{"classes", spec.classes},
           {"train_per_class", spec.train_per_class},
           {"test_per_class", spec.test_per_class},
           {"image_size", spec.image_size},
           {"patch_size", spec.patch_size},
           {"patch_margin", spec.patch_margin},
           {"background_pool", spec.background_pool},
           {"correlation", spec.correlation},
           {"seed", spec.seed},
           {"glyph_of_class", spec.glyph_of_class}};
    return j.dump(2);
}

namespace {

struct PlaneWave {
    double fx, fy, phase, amp;
};

// A pool signature: two gradient endpoint colors plus three plane-wave
// octaves, rendered once per pool id.
Tensor<float> render_signature(uint64_t seed, int64_t bg_id, int64_t s) {
    Rng rng(stream_seed(seed, {0xB6ull, uint64_t(bg_id)}));
    std::array<float, 3> c0, c1;
    for (auto& v : c0) v = float(0.15 + 0.7 * rng.uniform());
    for (auto& v : c1) v = float(0.15 + 0.7 * rng.uniform());
    const double gamma = rng.uniform(0.0, 2 * M_PI);
    const double gx = std::cos(gamma), gy = std::sin(gamma);
    std::array<PlaneWave, 3> oct;
    const double amps[3] = {0.5, 0.3, 0.2};
    for (int o = 0; o < 3; ++o) {
        const double f = 1.5 + 4.5 * rng.uniform();
        const double th = rng.uniform(0.0, 2 * M_PI);
        oct[size_t(o)] = {f * std::cos(th), f * std::sin(th), rng.uniform(0.0, 2 * M_PI),
                          amps[o]};
    }
    Tensor<float> img({3, s, s});
    const int64_t plane = s * s;
    for (int64_t y = 0; y < s; ++y)
        for (int64_t x = 0; x < s; ++x) {
            const double xn = double(x) / double(s), yn = double(y) / double(s);
            double v = 0;
            for (const auto& w : oct) v += w.amp * std::sin(2 * M_PI * (w.fx * xn + w.fy * yn) + w.phase);
            // v in [-1, 1]; gradient coordinate u in [0, 1]
            const double u =
                std::clamp(0.5 + 0.5 * (gx * (2 * xn - 1) + gy * (2 * yn - 1)) / 1.4142, 0.0, 1.0);
            for (int64_t c = 0; c < 3; ++c) {
                const double base = c0[size_t(c)] + (c1[size_t(c)] - c0[size_t(c)]) * u;
                img[c * plane + y * s + x] = float(std::clamp(base * (0.78 + 0.3 * v), 0.0, 1.0));
            }
        }
    return img;
}

}  // namespace

DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir) {
    spec.validate();
    std::vector<int64_t> glyphs = spec.glyph_of_class;
    if (glyphs.empty())
        for (int64_t c = 0; c < spec.classes; ++c) glyphs.push_back(c);

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    CAMFIT_CHECK(!ec && fs::is_directory(out_dir), IoError,
                 "cannot create output directory: " + out_dir);

    // Render the background pool once.
    std::vector<Tensor<float>> pool;
    pool.reserve(size_t(spec.background_pool));
    for (int64_t b = 0; b < spec.background_pool; ++b)
        pool.push_back(render_signature(spec.seed, b, spec.image_size));

    const int64_t s = spec.image_size, p = spec.patch_size, plane = s * s;
    const double noise_amp = 0.3 * (1.0 - spec.correlation) + 0.03;

    DatasetManifest m;
    m.root = out_dir;
    for (int64_t c = 0; c < spec.classes; ++c) m.class_names.push_back(glyph_name(glyphs[size_t(c)]));

    json boxes = json::object();
    json backgrounds = json::object();

    for (int64_t c = 0; c < spec.classes; ++c) {
        const std::string cls_dir = out_dir + "/" + m.class_names[size_t(c)];
        fs::create_directories(cls_dir, ec);
        CAMFIT_CHECK(!ec, IoError, "cannot create class directory: " + cls_dir);
        const std::vector<uint8_t> mask = glyph_mask(glyphs[size_t(c)], p);

        for (int split = 0; split < 2; ++split) {
            const int64_t count = split == 0 ? spec.train_per_class : spec.test_per_class;
            for (int64_t i = 0; i < count; ++i) {
                // All stochastic choices are keyed by (class index, split,
                // index) only — never by the glyph — so permuting the glyph
                // assignment permutes labels while reproducing the identical
                // backgrounds and patch positions.
                Rng rng(stream_seed(spec.seed,
                                    {0xA0ull, uint64_t(c), uint64_t(split), uint64_t(i)}));
                const int64_t bg_id = rng.uniform_int(0, spec.background_pool - 1);
                const int64_t px = rng.uniform_int(spec.patch_margin, s - p - spec.patch_margin);
                const int64_t py = rng.uniform_int(spec.patch_margin, s - p - spec.patch_margin);
                std::array<PlaneWave, 2> noise;
                for (auto& w : noise) {
                    const double f = 2.0 + 6.0 * rng.uniform();
                    const double th = rng.uniform(0.0, 2 * M_PI);
                    w = {f * std::cos(th), f * std::sin(th), rng.uniform(0.0, 2 * M_PI), 0.5};
                }

                Tensor<float> img = pool[size_t(bg_id)].clone();
                for (int64_t y = 0; y < s; ++y)
                    for (int64_t x = 0; x < s; ++x) {
                        const double xn = double(x) / double(s), yn = double(y) / double(s);
                        double nv = 0;
                        for (const auto& w : noise)
                            nv += w.amp *
                                  std::sin(2 * M_PI * (w.fx * xn + w.fy * yn) + w.phase);
                        const float dv = float(noise_amp * nv);
                        for (int64_t ch = 0; ch < 3; ++ch) {
                            float& v = img[ch * plane + y * s + x];
                            v = std::clamp(v + dv, 0.0f, 1.0f);
                        }
                    }
                // Opaque glyph patch: dark base, bright glyph pixels.
                for (int64_t y = 0; y < p; ++y)
                    for (int64_t x = 0; x < p; ++x) {
                        const float v = mask[size_t(y * p + x)] ? 0.95f : 0.08f;
                        for (int64_t ch = 0; ch < 3; ++ch)
                            img[ch * plane + (py + y) * s + (px + x)] = v;
                    }

                char name[32];
                std::snprintf(name, sizeof(name), "%s_%04lld.png", split == 0 ? "train" : "test",
                              static_cast<long long>(i));
                const std::string rel = m.class_names[size_t(c)] + "/" + name;
                save_image_png(out_dir + "/" + rel, img);
                (split == 0 ? m.train : m.test).push_back({rel, c});
                boxes[rel] = {px, py, p, p};
                backgrounds[rel] = bg_id;
            }
        }
    }

    m.validate();
    m.save(out_dir + "/manifest.json");
    for (const auto& [fname, j] : {std::pair<const char*, const json*>{"boxes.json", &boxes},
                                   {"backgrounds.json", &backgrounds}}) {
        std::ofstream out(out_dir + "/" + fname);
        CAMFIT_CHECK(out.good(), IoError, std::string("cannot write ") + fname);
        out << j->dump(2) << "\n";
        CAMFIT_CHECK(out.good(), IoError, std::string("write failed: ") + fname);
    }
    return m;
}

std::map<std::string, PatchBox> load_boxes(const std::string& dataset_dir) {
    std::ifstream in(dataset_dir + "/boxes.json");
    CAMFIT_CHECK(in.good(), IoError, "cannot open boxes.json under " + dataset_dir);
    try {
        json j;
        in >> j;
        std::map<std::string, PatchBox> out;
        for (const auto& [key, val] : j.items()) {
            CAMFIT_CHECK(val.is_array() && val.size() == 4, FormatError,
                         "boxes.json entry is not [x,y,w,h]: " + key);
            out[key] = {val[0].get<int64_t>(), val[1].get<int64_t>(), val[2].get<int64_t>(),
                        val[3].get<int64_t>()};
        }
        return out;
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed boxes.json: ") + e.what());
    }
}

std::map<std::string, int64_t> load_background_ids(const std::string& dataset_dir) {
    std::ifstream in(dataset_dir + "/backgrounds.json");
    CAMFIT_CHECK(in.good(), IoError, "cannot open backgrounds.json under " + dataset_dir);
    try {
        json j;
        in >> j;
        std::map<std::string, int64_t> out;
        for (const auto& [key, val] : j.items()) out[key] = val.get<int64_t>();
        return out;
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed backgrounds.json: ") + e.what());
    }
}

}  // namespace camfit
