#include "rxnseq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "rxnseq/error.hpp"

namespace rxnseq {

namespace {

constexpr const char* kVersionTag = "rxnseq-ckpt-1";

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian float32; big-endian hosts need byte swaps");

nlohmann::json config_to_json(const ModelConfig& cfg) {
    return {{"vocab_size", cfg.vocab_size},
            {"d_model", cfg.d_model},
            {"n_heads", cfg.n_heads},
            {"d_ff", cfg.d_ff},
            {"n_enc_layers", cfg.n_enc_layers},
            {"n_dec_layers", cfg.n_dec_layers},
            {"max_src_len", cfg.max_src_len},
            {"max_tgt_len", cfg.max_tgt_len},
            {"dropout", cfg.dropout}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<int32_t>();
    cfg.d_model = j.at("d_model").get<int32_t>();
    cfg.n_heads = j.at("n_heads").get<int32_t>();
    cfg.d_ff = j.at("d_ff").get<int32_t>();
    cfg.n_enc_layers = j.at("n_enc_layers").get<int32_t>();
    cfg.n_dec_layers = j.at("n_dec_layers").get<int32_t>();
    cfg.max_src_len = j.at("max_src_len").get<int32_t>();
    cfg.max_tgt_len = j.at("max_tgt_len").get<int32_t>();
    cfg.dropout = j.at("dropout").get<float>();
    return cfg;
}

} // namespace

void save_checkpoint(const std::string& path, const Params& params, const CheckpointMeta& meta) {
    auto refs = tensor_refs(const_cast<Params&>(params));
    nlohmann::json manifest = nlohmann::json::array();
    int64_t offset = 0;
    for (const auto& ref : refs) {
        manifest.push_back({{"name", ref.name},
                            {"shape", ref.rank == 1 ? nlohmann::json::array({ref.rows})
                                                    : nlohmann::json::array({ref.rows, ref.cols})},
                            {"offset", offset},
                            {"bytes", ref.size() * static_cast<int64_t>(sizeof(float))}});
        offset += ref.size() * static_cast<int64_t>(sizeof(float));
    }
    nlohmann::json header = {{"version", kVersionTag},
                             {"config", config_to_json(params.config)},
                             {"vocab_hash", meta.vocab_hash},
                             {"preprocess", strategy_name(meta.preprocess)},
                             {"multi_task", meta.multi_task},
                             {"step", meta.step},
                             {"tensors", manifest}};
    std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::IoError, "cannot open '" + path + "' for writing");
    out << kVersionTag << ' ' << header_text.size() << '\n';
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& ref : refs) {
        out.write(reinterpret_cast<const char*>(ref.data),
                  static_cast<std::streamsize>(ref.size() * sizeof(float)));
    }
    if (!out) fail(ErrorCode::IoError, "write failed for '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open '" + path + "'");
    std::string first_line;
    if (!std::getline(in, first_line)) fail(ErrorCode::BadCheckpoint, "missing header line");
    size_t space = first_line.find(' ');
    if (space == std::string::npos || first_line.substr(0, space) != kVersionTag) {
        fail(ErrorCode::BadCheckpoint, "'" + path + "' is not a " + kVersionTag + " file");
    }
    size_t header_bytes = 0;
    try {
        header_bytes = std::stoull(first_line.substr(space + 1));
    } catch (const std::exception&) {
        fail(ErrorCode::BadCheckpoint, "bad header length");
    }
    std::string header_text(header_bytes, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(header_bytes));
    if (!in) fail(ErrorCode::BadCheckpoint, "truncated header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::BadCheckpoint, std::string("header is not valid JSON: ") + e.what());
    }

    LoadedCheckpoint loaded;
    try {
        ModelConfig cfg = config_from_json(header.at("config"));
        cfg.validate();
        loaded.params = init_params<float>(cfg, 0);
        loaded.meta.vocab_hash = header.at("vocab_hash").get<std::string>();
        loaded.meta.preprocess = parse_strategy(header.value("preprocess", "none"));
        loaded.meta.multi_task = header.value("multi_task", false);
        loaded.meta.step = header.value("step", int64_t{0});

        auto refs = tensor_refs(loaded.params);
        const auto& manifest = header.at("tensors");
        if (manifest.size() != refs.size()) {
            fail(ErrorCode::BadCheckpoint, "tensor manifest size mismatch");
        }
        for (size_t i = 0; i < refs.size(); ++i) {
            const auto& entry = manifest.at(i);
            if (entry.at("name").get<std::string>() != refs[i].name) {
                fail(ErrorCode::BadCheckpoint, "unexpected tensor '" +
                                                   entry.at("name").get<std::string>() +
                                                   "', wanted '" + refs[i].name + "'");
            }
            int64_t bytes = entry.at("bytes").get<int64_t>();
            if (bytes != refs[i].size() * static_cast<int64_t>(sizeof(float))) {
                fail(ErrorCode::BadCheckpoint, "tensor '" + refs[i].name + "' has wrong size");
            }
            in.read(reinterpret_cast<char*>(refs[i].data), static_cast<std::streamsize>(bytes));
            if (!in) fail(ErrorCode::BadCheckpoint, "truncated payload at '" + refs[i].name + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::BadCheckpoint, std::string("malformed header: ") + e.what());
    }
    return loaded;
}

void require_vocab_match(const CheckpointMeta& meta, const std::string& vocab_hash) {
    if (meta.vocab_hash != vocab_hash) {
        fail(ErrorCode::VocabHashMismatch,
             "checkpoint vocabulary hash " + meta.vocab_hash + " != supplied " + vocab_hash);
    }
}

} // namespace rxnseq
