#pragma once

#include <optional>
#include <string>

#include "rxnseq/model.hpp"
#include "rxnseq/smiles.hpp"

namespace rxnseq {

// Kept alongside the weights so downstream commands can reproduce the exact
// data pipeline the model was trained with.
struct CheckpointMeta {
    std::string vocab_hash;
    PreprocessStrategy preprocess = PreprocessStrategy::None;
    bool multi_task = false;
    int64_t step = 0;
};

// Format "rxnseq-ckpt-1": one header line `rxnseq-ckpt-1 <json_bytes>`,
// a JSON map (config fields, vocabulary hash, tensor manifest with
// names/shapes/byte offsets), then raw little-endian float32 data in
// manifest order.
void save_checkpoint(const std::string& path, const Params& params, const CheckpointMeta& meta);

struct LoadedCheckpoint {
    Params params;
    CheckpointMeta meta;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// Throws VocabHashMismatch when the checkpoint was written with a different
// vocabulary than the one supplied.
void require_vocab_match(const CheckpointMeta& meta, const std::string& vocab_hash);

} // namespace rxnseq
