#include "rxnseq/manifest.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "rxnseq/error.hpp"
#include "rxnseq/vocab.hpp"

namespace rxnseq {

const char* kToolkitVersion = "0.1.0";

void write_manifest(const RunManifest& manifest, const std::string& path) {
    nlohmann::json j = {{"toolkit_version", manifest.toolkit_version},
                        {"subcommand", manifest.subcommand},
                        {"flags", manifest.flags},
                        {"input_digests", manifest.input_digests},
                        {"seed", manifest.seed},
                        {"started_at", manifest.started_at},
                        {"finished_at", manifest.finished_at},
                        {"status", manifest.status}};
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::IoError, "cannot open '" + path + "' for writing");
    out << j.dump(2) << '\n';
    if (!out) fail(ErrorCode::IoError, "write failed for '" + path + "'");
}

RunManifest read_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
        RunManifest manifest;
        manifest.toolkit_version = j.at("toolkit_version").get<std::string>();
        manifest.subcommand = j.at("subcommand").get<std::string>();
        manifest.flags = j.at("flags").get<std::map<std::string, std::string>>();
        manifest.input_digests = j.at("input_digests").get<std::map<std::string, std::string>>();
        manifest.seed = j.at("seed").get<uint64_t>();
        manifest.started_at = j.at("started_at").get<std::string>();
        manifest.finished_at = j.at("finished_at").get<std::string>();
        manifest.status = j.at("status").get<std::string>();
        return manifest;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::IoError, "malformed manifest '" + path + "': " + e.what());
    }
}

std::string file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open '" + path + "'");
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return fnv1a64_hex(buffer.str());
}

std::string iso8601_utc_now() {
    auto now = std::chrono::system_clock::now();
    std::time_t tt = std::chrono::system_clock::to_time_t(now);
    std::tm tm_utc{};
    gmtime_r(&tt, &tm_utc);
    char buffer[32];
    std::strftime(buffer, sizeof(buffer), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buffer;
}

} // namespace rxnseq
