#pragma once

// Run provenance. Every CLI command drops a run_manifest.json into its output
// directory the moment it starts (status "running") and rewrites it once on
// completion, so a crashed run is distinguishable from a finished one and a
// finished one carries everything needed to replay it: the exact argv, the
// fully resolved configuration, the seed, and the build that produced it.
// Both writes go through a temp file + rename, so readers never observe a
// half-written manifest.

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

namespace camfit {

struct RunManifest {
    std::string command;            // subcommand name
    std::vector<std::string> argv;  // full invocation, argv[0] included
    std::string config_json;        // resolved config echo; empty if none
    uint64_t seed = 0;
    std::string build_id;           // source revision baked in at build time
    std::string started_at;         // UTC, ISO 8601
    std::string finished_at;        // empty while running
    double wall_seconds = -1;       // -1 while running
    std::string status = "running"; // running | ok | failed
    std::string error;              // diagnostic when failed
    std::vector<std::string> outputs;  // artifact paths, relative to out dir

    // Not serialized; anchors wall_seconds at finish_run time.
    std::chrono::steady_clock::time_point t0{};
};

std::string to_json(const RunManifest& m);
RunManifest run_manifest_from_json(const std::string& text);

// Source revision the binary was built from ("untracked" outside a checkout).
std::string build_id();

// Current wall-clock time as an ISO 8601 UTC string.
std::string utc_timestamp();

// Atomic write to <dir>/run_manifest.json (temp file + rename).
void write_manifest(const RunManifest& m, const std::string& dir);

// Creates <out_dir> if needed and writes the initial "running" manifest.
RunManifest begin_run(const std::string& command, const std::vector<std::string>& argv,
                      const std::string& config_json, uint64_t seed,
                      const std::string& out_dir);

// Stamps the end time and rewrites the manifest. `error` only matters for
// status "failed"; `outputs` lists the artifacts the command produced.
void finish_run(RunManifest& m, const std::string& out_dir, const std::string& status,
                const std::string& error, const std::vector<std::string>& outputs);

}  // namespace camfit
