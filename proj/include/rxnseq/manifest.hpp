#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace rxnseq {

// Written before each CLI run and finalized afterwards, so any output can be
// traced back to the exact command, flags, and input file contents.
struct RunManifest {
    std::string toolkit_version;
    std::string subcommand;
    std::map<std::string, std::string> flags;         // resolved flag -> value
    std::map<std::string, std::string> input_digests; // path -> content hash
    uint64_t seed = 0;
    std::string started_at;  // ISO 8601 UTC
    std::string finished_at; // empty until the run completes
    std::string status;      // "running", "ok", or "failed"
};

void write_manifest(const RunManifest& manifest, const std::string& path);
RunManifest read_manifest(const std::string& path);

// FNV-1a 64 hash of the file contents, as 16 hex digits.
std::string file_digest(const std::string& path);

std::string iso8601_utc_now();

extern const char* kToolkitVersion;

} // namespace rxnseq
