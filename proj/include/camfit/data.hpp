#pragma once

// Dataset plumbing: folder ingestion with deterministic splits, and the
// synthetic fine-grained generator. Class identity in the synthetic corpus is
// carried entirely by a small glyph patch; backgrounds are drawn from a shared
// texture pool independently of class, giving contrastive training an easy
// background shortcut whose cost the attention branch is meant to expose.

#include <map>
#include <string>
#include <vector>

#include "camfit/tensor.hpp"

namespace camfit {

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

struct ImageEntry {
    std::string rel_path;  // relative to manifest root
    int64_t label = 0;

    bool operator==(const ImageEntry&) const = default;
};

struct DatasetManifest {
    std::string root;
    std::vector<std::string> class_names;  // index == label
    std::vector<ImageEntry> train;
    std::vector<ImageEntry> test;
    std::vector<std::string> skipped;  // files listed but not usable

    bool operator==(const DatasetManifest&) const = default;

    int64_t num_classes() const { return int64_t(class_names.size()); }
    std::string path_of(const ImageEntry& e) const { return root + "/" + e.rel_path; }

    // Enforces: both splits nonempty per class, no image in both splits.
    void validate() const;

    void save(const std::string& path) const;
    static DatasetManifest load(const std::string& path);
};

struct SplitRule {
    double train_fraction = 2.0 / 3.0;
    uint64_t seed = 1;
};

// Scan root/class-name/images into a manifest with a seeded per-class split.
// Undecodable files land in the skip report; an empty class is a data error.
DatasetManifest load_image_folder(const std::string& root, const SplitRule& rule);

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

struct PatchBox {
    int64_t x = 0, y = 0, w = 0, h = 0;  // x: column, y: row

    bool operator==(const PatchBox&) const = default;
};

struct SyntheticSpec {
    int64_t classes = 10;
    int64_t train_per_class = 100;
    int64_t test_per_class = 50;
    int64_t image_size = 64;
    int64_t patch_size = 8;
    int64_t patch_margin = 4;     // min distance from every image edge
    int64_t background_pool = 16;
    double correlation = 1.0;  // 1: backgrounds are pure pool signatures
    uint64_t seed = 1;
    // glyph id per class; empty means identity assignment
    std::vector<int64_t> glyph_of_class;

    void validate() const;
};

SyntheticSpec synthetic_spec_from_json(const std::string& text);
std::string to_json(const SyntheticSpec& spec);

// Number of distinct glyphs available (the class-count ceiling).
int64_t glyph_count();
// Human-readable glyph name (also used as the class folder name).
std::string glyph_name(int64_t glyph);
// Binary glyph mask rendered at the given side length, row-major 0/1.
std::vector<uint8_t> glyph_mask(int64_t glyph, int64_t size);

// Writes PNGs under out_dir/class-name/, plus manifest.json, boxes.json
// (filename -> [x,y,w,h]) and backgrounds.json (filename -> pool id).
DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir);

std::map<std::string, PatchBox> load_boxes(const std::string& dataset_dir);
std::map<std::string, int64_t> load_background_ids(const std::string& dataset_dir);

}  // namespace camfit
