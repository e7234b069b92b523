#include "camfit/manifest.hpp"

#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "camfit/common.hpp"

namespace camfit {

namespace fs = std::filesystem;
using nlohmann::json;

std::string build_id() {
#ifdef CAMFIT_BUILD_ID
    return CAMFIT_BUILD_ID;
#else
    return "untracked";
#endif
}

std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string to_json(const RunManifest& m) {
    json j;
    j["command"] = m.command;
    j["argv"] = m.argv;
    j["config"] = m.config_json.empty() ? json() : json::parse(m.config_json);
    j["seed"] = m.seed;
    j["build_id"] = m.build_id;
    j["started_at"] = m.started_at;
    j["finished_at"] = m.finished_at;
    j["wall_seconds"] = m.wall_seconds;
    j["status"] = m.status;
    j["error"] = m.error;
    j["outputs"] = m.outputs;
    return j.dump(2) + "\n";
}

RunManifest run_manifest_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("manifest: ") + e.what());
    }
    RunManifest m;
    try {
        m.command = j.at("command").get<std::string>();
        m.argv = j.at("argv").get<std::vector<std::string>>();
        m.config_json = j.at("config").is_null() ? "" : j.at("config").dump();
        m.seed = j.at("seed").get<uint64_t>();
        m.build_id = j.at("build_id").get<std::string>();
        m.started_at = j.at("started_at").get<std::string>();
        m.finished_at = j.at("finished_at").get<std::string>();
        m.wall_seconds = j.at("wall_seconds").get<double>();
        m.status = j.at("status").get<std::string>();
        m.error = j.at("error").get<std::string>();
        m.outputs = j.at("outputs").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("manifest: ") + e.what());
    }
    return m;
}

void write_manifest(const RunManifest& m, const std::string& dir) {
    const fs::path final_path = fs::path(dir) / "run_manifest.json";
    const fs::path tmp_path = fs::path(dir) / "run_manifest.json.tmp";
    {
        std::ofstream out(tmp_path);
        CAMFIT_CHECK(out.good(), IoError, "manifest: cannot write " + tmp_path.string());
        out << to_json(m);
        out.flush();
        CAMFIT_CHECK(out.good(), IoError, "manifest: write failed for " + tmp_path.string());
    }
    std::error_code ec;
    fs::rename(tmp_path, final_path, ec);
    CAMFIT_CHECK(!ec, IoError, "manifest: cannot move into place at " + final_path.string());
}

RunManifest begin_run(const std::string& command, const std::vector<std::string>& argv,
                      const std::string& config_json, uint64_t seed,
                      const std::string& out_dir) {
    CAMFIT_CHECK(!out_dir.empty(), ArgumentError, "manifest: output directory required");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    CAMFIT_CHECK(!ec && fs::is_directory(out_dir), IoError,
                 "manifest: cannot create output directory " + out_dir);
    RunManifest m;
    m.command = command;
    m.argv = argv;
    m.config_json = config_json;
    m.seed = seed;
    m.build_id = build_id();
    m.started_at = utc_timestamp();
    m.t0 = std::chrono::steady_clock::now();
    write_manifest(m, out_dir);
    return m;
}

void finish_run(RunManifest& m, const std::string& out_dir, const std::string& status,
                const std::string& error, const std::vector<std::string>& outputs) {
    m.finished_at = utc_timestamp();
    m.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - m.t0).count();
    m.status = status;
    m.error = error;
    m.outputs = outputs;
    write_manifest(m, out_dir);
}

}  // namespace camfit
