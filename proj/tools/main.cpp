#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "rxnseq/attribution.hpp"
#include "rxnseq/checkpoint.hpp"
#include "rxnseq/corpus.hpp"
#include "rxnseq/decode.hpp"
#include "rxnseq/error.hpp"
#include "rxnseq/eval.hpp"
#include "rxnseq/manifest.hpp"
#include "rxnseq/model.hpp"
#include "rxnseq/optim.hpp"
#include "rxnseq/smiles.hpp"
#include "rxnseq/synthetic.hpp"
#include "rxnseq/vocab.hpp"

namespace {

using namespace rxnseq;

// ----------------------------------------------------------------- plumbing

// Start/finish bracket around every subcommand run.
class ManifestScope {
public:
    ManifestScope(std::string subcommand, std::string path) : path_(std::move(path)) {
        manifest_.toolkit_version = kToolkitVersion;
        manifest_.subcommand = std::move(subcommand);
        manifest_.started_at = iso8601_utc_now();
        manifest_.status = "running";
    }

    void flag(const std::string& name, const std::string& value) { manifest_.flags[name] = value; }
    void flag(const std::string& name, double value) {
        std::ostringstream s;
        s << value;
        manifest_.flags[name] = s.str();
    }
    void flag(const std::string& name, int64_t value) {
        manifest_.flags[name] = std::to_string(value);
    }
    void input(const std::string& path) { manifest_.input_digests[path] = file_digest(path); }
    void seed(uint64_t value) { manifest_.seed = value; }

    void start() { write_manifest(manifest_, path_); }

    void finish(bool ok) {
        manifest_.finished_at = iso8601_utc_now();
        manifest_.status = ok ? "ok" : "failed";
        write_manifest(manifest_, path_);
    }

private:
    RunManifest manifest_;
    std::string path_;
};

std::vector<int32_t> parse_int_list(const std::string& text) {
    std::vector<int32_t> out;
    std::stringstream stream(text);
    std::string item;
    while (std::getline(stream, item, ',')) {
        if (item.empty()) continue;
        size_t dots = item.find("..");
        if (dots != std::string::npos) {
            int lo = std::stoi(item.substr(0, dots));
            int hi = std::stoi(item.substr(dots + 2));
            for (int v = lo; v <= hi; ++v) out.push_back(v);
        } else {
            out.push_back(std::stoi(item));
        }
    }
    if (out.empty()) fail(ErrorCode::BadConfig, "empty list '" + text + "'");
    return out;
}

int32_t env_threads() {
    const char* env = std::getenv("RXNSEQ_THREADS");
    if (env == nullptr) return 1;
    int value = std::atoi(env);
    return value >= 1 ? value : 1;
}

Vocabulary load_vocab_arg(const std::string& vocab_path, bool byte_level) {
    if (byte_level && !vocab_path.empty()) {
        fail(ErrorCode::BadConfig, "--vocab and --byte-level are mutually exclusive");
    }
    if (byte_level) return byte_vocab();
    if (vocab_path.empty()) fail(ErrorCode::BadConfig, "need --vocab FILE or --byte-level");
    return load_vocab(vocab_path);
}

// ---------------------------------------------------------------- commands

struct TokenizeArgs {
    std::string input, output, strategy = "smiles";
};

void cmd_tokenize(const TokenizeArgs& args) {
    ManifestScope manifest("tokenize", args.output + ".manifest.json");
    manifest.flag("input", args.input);
    manifest.flag("strategy", args.strategy);
    manifest.flag("output", args.output);
    manifest.input(args.input);
    manifest.start();

    PreprocessStrategy strat = parse_strategy(args.strategy);
    std::ifstream in(args.input, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open '" + args.input + "'");
    std::ofstream out(args.output, std::ios::binary);
    if (!out) fail(ErrorCode::IoError, "cannot open '" + args.output + "' for writing");
    std::string line;
    uint64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        try {
            out << (line.empty() ? line : preprocess(line, strat)) << '\n';
        } catch (const Error& e) {
            std::cerr << args.input << ":" << line_no << ": " << e.what() << "\n";
            manifest.finish(false);
            throw;
        }
    }
    if (!out) fail(ErrorCode::IoError, "write failed");
    manifest.finish(true);
}

struct TrimArgs {
    std::string base_vocab, corpus, output;
    uint64_t stall = 500000;
};

void cmd_trim_vocab(const TrimArgs& args) {
    ManifestScope manifest("trim-vocab", args.output + ".manifest.json");
    manifest.flag("base-vocab", args.base_vocab);
    manifest.flag("corpus", args.corpus);
    manifest.flag("stall", static_cast<int64_t>(args.stall));
    manifest.flag("output", args.output);
    manifest.input(args.base_vocab);
    manifest.input(args.corpus);
    manifest.start();

    Vocabulary base = load_vocab(args.base_vocab);
    std::ifstream in(args.corpus, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open '" + args.corpus + "'");
    std::string line;
    auto next_line = [&]() -> std::optional<std::string> {
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            return line;
        }
        return std::nullopt;
    };
    TrimResult result = trim_vocab(base, next_line, args.stall);
    result.vocab.save(args.output);

    std::ofstream report(args.output + ".report.txt");
    report << "base_pieces\t" << base.content_size() << "\n"
           << "kept_pieces\t" << result.vocab.content_size() << "\n"
           << "sequences_consumed\t" << result.sequences_consumed << "\n"
           << "stall_counter_at_stop\t" << result.stall_counter_at_stop << "\n"
           << "stopped_by_stall\t" << (result.stalled ? "yes" : "no") << "\n";
    std::cout << "kept " << result.vocab.content_size() << " of " << base.content_size()
              << " pieces after " << result.sequences_consumed << " sequences\n";
    manifest.finish(true);
}

struct MakeMaskedArgs {
    std::string smiles, output, strategy = "smiles";
    double fraction = 0.15;
    uint64_t seed = 42;
};

void cmd_make_masked(const MakeMaskedArgs& args) {
    ManifestScope manifest("make-masked", args.output + ".manifest.json");
    manifest.flag("smiles", args.smiles);
    manifest.flag("fraction", args.fraction);
    manifest.flag("strategy", args.strategy);
    manifest.flag("output", args.output);
    manifest.seed(args.seed);
    manifest.input(args.smiles);
    manifest.start();

    MaskingConfig cfg;
    cfg.mask_fraction = args.fraction;
    cfg.seed = args.seed;
    std::ifstream in(args.smiles, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open '" + args.smiles + "'");
    std::ofstream out(args.output, std::ios::binary);
    if (!out) fail(ErrorCode::IoError, "cannot open '" + args.output + "' for writing");
    uint64_t n = build_pretrain_corpus(in, out, cfg, parse_strategy(args.strategy));
    std::cout << "wrote " << n << " masked pairs\n";
    manifest.finish(true);
}

struct ModelFlags {
    std::string config_file;
    int32_t d_model = 128, n_heads = 4, d_ff = 512, n_enc = 2, n_dec = 2;
    int32_t max_src_len = 144, max_tgt_len = 144;
    double dropout = 0.0;

    void register_on(CLI::App* app) {
        app->add_option("--config", config_file, "JSON file with model architecture fields");
        app->add_option("--d-model", d_model, "model width")->capture_default_str();
        app->add_option("--heads", n_heads, "attention heads")->capture_default_str();
        app->add_option("--d-ff", d_ff, "feed-forward width")->capture_default_str();
        app->add_option("--enc-layers", n_enc, "encoder layers")->capture_default_str();
        app->add_option("--dec-layers", n_dec, "decoder layers")->capture_default_str();
        app->add_option("--max-src-len", max_src_len)->capture_default_str();
        app->add_option("--max-tgt-len", max_tgt_len)->capture_default_str();
        app->add_option("--dropout", dropout)->capture_default_str();
    }

    // config file first, explicitly passed flags override it
    ModelConfig resolve(const CLI::App* app, int32_t vocab_size) const {
        ModelConfig cfg;
        cfg.d_model = d_model;
        cfg.n_heads = n_heads;
        cfg.d_ff = d_ff;
        cfg.n_enc_layers = n_enc;
        cfg.n_dec_layers = n_dec;
        cfg.max_src_len = max_src_len;
        cfg.max_tgt_len = max_tgt_len;
        cfg.dropout = static_cast<float>(dropout);
        if (!config_file.empty()) {
            std::ifstream in(config_file);
            if (!in) fail(ErrorCode::IoError, "cannot open '" + config_file + "'");
            nlohmann::json j;
            try {
                in >> j;
            } catch (const nlohmann::json::exception& e) {
                fail(ErrorCode::BadConfig, std::string("bad config file: ") + e.what());
            }
            auto take = [&](const char* key, const char* flag, auto& field) {
                if (j.contains(key) && app->count(flag) == 0) {
                    field = j.at(key).get<std::decay_t<decltype(field)>>();
                }
            };
            take("d_model", "--d-model", cfg.d_model);
            take("n_heads", "--heads", cfg.n_heads);
            take("d_ff", "--d-ff", cfg.d_ff);
            take("n_enc_layers", "--enc-layers", cfg.n_enc_layers);
            take("n_dec_layers", "--dec-layers", cfg.n_dec_layers);
            take("max_src_len", "--max-src-len", cfg.max_src_len);
            take("max_tgt_len", "--max-tgt-len", cfg.max_tgt_len);
            take("dropout", "--dropout", cfg.dropout);
        }
        cfg.vocab_size = vocab_size;
        cfg.validate();
        return cfg;
    }
};

struct TrainArgs {
    std::string train, dev, vocab, outdir, preprocess = "none", schedule = "warmup-constant";
    bool byte_level = false, multi_task = false;
    double lr = 0.003, weight_decay = 0.01;
    int64_t steps = 0, warmup = 5000, eval_every = 500;
    int32_t batch = 64, grad_accum = 1, threads = 0, dev_max_len = 0;
    uint64_t seed = 42;
    ModelFlags model;
};

void cmd_train(const TrainArgs& args, const CLI::App* app) {
    std::filesystem::create_directories(args.outdir);
    ManifestScope manifest("train", args.outdir + "/manifest.json");
    manifest.flag("train", args.train);
    manifest.flag("dev", args.dev);
    manifest.flag("preprocess", args.preprocess);
    manifest.flag("multi-task", args.multi_task ? "true" : "false");
    manifest.flag("lr", args.lr);
    manifest.flag("batch", static_cast<int64_t>(args.batch));
    manifest.flag("warmup", args.warmup);
    manifest.flag("steps", args.steps);
    manifest.flag("schedule", args.schedule);
    manifest.flag("weight-decay", args.weight_decay);
    manifest.flag("grad-accum", static_cast<int64_t>(args.grad_accum));
    manifest.flag("outdir", args.outdir);
    manifest.seed(args.seed);
    manifest.input(args.train);
    if (!args.dev.empty()) manifest.input(args.dev);
    if (!args.vocab.empty()) manifest.input(args.vocab);
    manifest.start();

    Vocabulary vocab = load_vocab_arg(args.vocab, args.byte_level);
    PreprocessStrategy strat = parse_strategy(args.preprocess);
    Dataset train_set = load_dataset(args.train, Split::Train);
    if (train_set.records.empty()) fail(ErrorCode::EmptyCorpus, "empty training set");
    Dataset dev_set;
    dev_set.split = Split::Dev;
    if (!args.dev.empty()) dev_set = load_dataset(args.dev, Split::Dev);

    TrainConfig tcfg;
    tcfg.lr = args.lr;
    tcfg.batch_size = args.batch;
    tcfg.weight_decay = args.weight_decay;
    tcfg.warmup_steps = args.warmup;
    tcfg.total_steps = args.steps;
    tcfg.schedule = args.schedule == "inverse-sqrt" ? LrSchedule::InverseSqrt
                                                    : LrSchedule::WarmupConstant;
    tcfg.seed = args.seed;
    tcfg.grad_accum = args.grad_accum;
    tcfg.eval_every = args.eval_every;
    tcfg.threads = args.threads > 0 ? args.threads : env_threads();
    tcfg.dev_max_len = args.dev_max_len;

    ModelConfig mcfg = args.model.resolve(app, vocab.size());
    Params init = init_params<float>(mcfg, args.seed);
    std::cout << "model: " << count_params(mcfg) << " parameters, vocab " << vocab.size() << "\n";

    TrainOptions options;
    options.outdir = args.outdir;
    options.meta.vocab_hash = vocab.content_hash();
    options.meta.preprocess = strat;
    options.meta.multi_task = args.multi_task;
    options.progress = &std::cout;

    TrainResult result = train(init, encode_training_set(train_set, vocab, strat, args.multi_task),
                               tcfg, encode_dev_set(dev_set, vocab, strat, args.multi_task), vocab,
                               options);
    std::cout << "best step " << result.best_step << " dev_acc1 " << result.best_acc << "\n";
    manifest.finish(true);
}

struct PredictArgs {
    std::string ckpt, vocab, input, output, strategy = "beam", preprocess;
    bool byte_level = false, multi_task = false;
    int32_t beam = 5, num_return = 0, top_k = 10, max_len = 144, num_samples = 1;
    double top_p = 1.0, temperature = 1.0, alpha = 0.6;
    uint64_t seed = 42;
};

void cmd_predict(const PredictArgs& args, const CLI::App* app) {
    ManifestScope manifest("predict", args.output + ".manifest.json");
    manifest.flag("ckpt", args.ckpt);
    manifest.flag("input", args.input);
    manifest.flag("strategy", args.strategy);
    manifest.flag("beam", static_cast<int64_t>(args.beam));
    manifest.flag("output", args.output);
    manifest.seed(args.seed);
    manifest.input(args.ckpt);
    manifest.input(args.input);
    if (!args.vocab.empty()) manifest.input(args.vocab);
    manifest.start();

    Vocabulary vocab = load_vocab_arg(args.vocab, args.byte_level);
    LoadedCheckpoint loaded = load_checkpoint(args.ckpt);
    require_vocab_match(loaded.meta, vocab.content_hash());

    PreprocessStrategy strat =
        app->count("--preprocess") > 0 ? parse_strategy(args.preprocess) : loaded.meta.preprocess;
    bool multi_task = app->count("--multi-task") > 0 ? args.multi_task : loaded.meta.multi_task;

    DecodeConfig cfg;
    cfg.strategy = parse_decode_strategy(args.strategy);
    cfg.beam_width = args.beam;
    cfg.num_return = args.num_return > 0                    ? args.num_return
                     : cfg.strategy == DecodeStrategy::Beam ? std::min(args.beam, 5)
                                                            : 1;
    cfg.top_k = args.top_k;
    cfg.top_p = args.top_p;
    cfg.temperature = args.temperature;
    cfg.alpha = args.alpha;
    cfg.max_len = args.max_len;
    cfg.seed = args.seed;
    cfg.num_samples = args.num_samples;

    Dataset dataset = load_dataset(args.input, Split::Test);
    std::ofstream out(args.output, std::ios::binary);
    if (!out) fail(ErrorCode::IoError, "cannot open '" + args.output + "' for writing");
    predict_file(loaded.params, vocab, dataset, strat, multi_task, cfg, out);
    manifest.finish(true);
}

struct EvaluateArgs {
    std::string preds, gold, ks = "1,3,5", output;
    bool machine = false;
};

void cmd_evaluate(const EvaluateArgs& args) {
    std::string manifest_path =
        (args.output.empty() ? args.preds + ".eval" : args.output) + ".manifest.json";
    ManifestScope manifest("evaluate", manifest_path);
    manifest.flag("preds", args.preds);
    manifest.flag("gold", args.gold);
    manifest.flag("ks", args.ks);
    manifest.input(args.preds);
    manifest.input(args.gold);
    manifest.start();

    EvalConfig cfg;
    cfg.ks = parse_int_list(args.ks);
    Dataset gold = load_dataset(args.gold, Split::Test);
    EvalReport report = acc_at_k_file(args.preds, gold, cfg);
    std::cout << (args.machine ? render_report_machine(report) : render_report_text(report));
    if (!args.output.empty()) {
        std::ofstream out(args.output, std::ios::binary);
        out << render_report_machine(report);
        if (!out) fail(ErrorCode::IoError, "write failed for '" + args.output + "'");
    }
    manifest.finish(true);
}

struct SweepArgs {
    std::string ckpt, vocab, input, widths = "1..10", ks = "1,5", output;
    bool byte_level = false;
    int32_t max_len = 144;
    uint64_t seed = 42;
};

void cmd_sweep(const SweepArgs& args) {
    ManifestScope manifest("sweep", args.output + ".manifest.json");
    manifest.flag("ckpt", args.ckpt);
    manifest.flag("input", args.input);
    manifest.flag("widths", args.widths);
    manifest.flag("ks", args.ks);
    manifest.flag("output", args.output);
    manifest.seed(args.seed);
    manifest.input(args.ckpt);
    manifest.input(args.input);
    manifest.start();

    Vocabulary vocab = load_vocab_arg(args.vocab, args.byte_level);
    LoadedCheckpoint loaded = load_checkpoint(args.ckpt);
    require_vocab_match(loaded.meta, vocab.content_hash());
    Dataset dataset = load_dataset(args.input, Split::Test);

    EvalConfig ecfg;
    ecfg.ks = parse_int_list(args.ks);
    DecodeConfig base;
    base.max_len = args.max_len;
    base.seed = args.seed;
    auto rows = beam_sweep(loaded.params, vocab, dataset, loaded.meta.preprocess,
                           loaded.meta.multi_task, parse_int_list(args.widths), base, ecfg);
    std::string table = render_sweep_tsv(rows);
    std::cout << table;
    std::ofstream out(args.output, std::ios::binary);
    out << table;
    if (!out) fail(ErrorCode::IoError, "write failed for '" + args.output + "'");
    manifest.finish(true);
}

struct SubsampleArgs {
    std::string input, output;
    uint32_t k = 1;
    uint64_t seed = 42;
};

void cmd_subsample(const SubsampleArgs& args) {
    ManifestScope manifest("subsample", args.output + ".manifest.json");
    manifest.flag("input", args.input);
    manifest.flag("k", static_cast<int64_t>(args.k));
    manifest.flag("output", args.output);
    manifest.seed(args.seed);
    manifest.input(args.input);
    manifest.start();

    Dataset dataset = load_dataset(args.input, Split::Train);
    Dataset subset = subsample_nested(dataset, args.k, args.seed);
    save_dataset(subset, args.output);
    std::cout << "kept " << subset.size() << " of " << dataset.size() << " records (1/"
              << (uint64_t(1) << args.k) << ")\n";
    manifest.finish(true);
}

struct AttributeArgs {
    std::string ckpt, vocab, reaction, estimator = "auto", out_tsv, out_svg;
    bool byte_level = false;
    int64_t permutations = 2000;
    int32_t max_len = 144;
    uint64_t seed = 42;
};

void cmd_attribute(const AttributeArgs& args) {
    std::string primary = args.out_tsv.empty() ? args.out_svg : args.out_tsv;
    if (primary.empty()) fail(ErrorCode::BadConfig, "need --out-tsv and/or --out-svg");
    ManifestScope manifest("attribute", primary + ".manifest.json");
    manifest.flag("ckpt", args.ckpt);
    manifest.flag("reaction", args.reaction);
    manifest.flag("estimator", args.estimator);
    manifest.flag("permutations", args.permutations);
    manifest.seed(args.seed);
    manifest.input(args.ckpt);
    manifest.start();

    Vocabulary vocab = load_vocab_arg(args.vocab, args.byte_level);
    LoadedCheckpoint loaded = load_checkpoint(args.ckpt);
    require_vocab_match(loaded.meta, vocab.content_hash());

    ReactionRecord record = parse_reaction(args.reaction);
    AttributionConfig cfg;
    if (args.estimator == "exact") cfg.estimator = ShapleyEstimator::Exact;
    else if (args.estimator == "sampled") cfg.estimator = ShapleyEstimator::Sampled;
    else if (args.estimator == "auto") cfg.estimator = ShapleyEstimator::Auto;
    else fail(ErrorCode::BadConfig, "unknown estimator '" + args.estimator + "'");
    cfg.n_permutations = args.permutations;
    cfg.seed = args.seed;
    cfg.max_output_len = args.max_len;

    AttributionMatrix matrix = attribute_reaction(loaded.params, vocab, record,
                                                  loaded.meta.preprocess, loaded.meta.multi_task,
                                                  cfg);
    std::cout << "attribution matrix: " << matrix.values.rows() << " input tokens x "
              << matrix.values.cols() << " output tokens\n";
    if (!args.out_tsv.empty()) export_heatmap_tsv(matrix, args.out_tsv);
    if (!args.out_svg.empty()) export_heatmap_svg(matrix, args.out_svg);
    manifest.finish(true);
}

struct BenchArgs {
    std::string ckpt, vocab, input, report;
    bool byte_level = false;
    int32_t steps = 20, batch = 16, grad_accum = 4, n_decode = 16;
    uint64_t seed = 42;
};

void cmd_bench(const BenchArgs& args) {
    ManifestScope manifest("bench", args.report + ".manifest.json");
    manifest.flag("ckpt", args.ckpt);
    manifest.flag("input", args.input);
    manifest.flag("steps", static_cast<int64_t>(args.steps));
    manifest.flag("batch", static_cast<int64_t>(args.batch));
    manifest.flag("grad-accum", static_cast<int64_t>(args.grad_accum));
    manifest.seed(args.seed);
    manifest.input(args.ckpt);
    manifest.input(args.input);
    manifest.start();

    Vocabulary vocab = load_vocab_arg(args.vocab, args.byte_level);
    LoadedCheckpoint loaded = load_checkpoint(args.ckpt);
    require_vocab_match(loaded.meta, vocab.content_hash());
    Dataset dataset = load_dataset(args.input, Split::Train);

    auto examples =
        encode_training_set(dataset, vocab, loaded.meta.preprocess, loaded.meta.multi_task);
    TrainConfig tcfg;
    tcfg.total_steps = args.steps;
    tcfg.batch_size = args.batch;
    tcfg.grad_accum = args.grad_accum;
    tcfg.warmup_steps = std::max<int64_t>(1, args.steps / 2);
    tcfg.eval_every = args.steps + 1; // no dev evals inside the timed region
    tcfg.seed = args.seed;
    tcfg.threads = env_threads();

    using Clock = std::chrono::steady_clock;
    auto t0 = Clock::now();
    train(loaded.params, examples, tcfg, {}, vocab);
    auto train_seconds = std::chrono::duration<double>(Clock::now() - t0).count();

    DecodeConfig greedy_cfg;
    greedy_cfg.max_len = loaded.params.config.max_tgt_len;
    DecodeConfig beam_cfg = greedy_cfg;
    beam_cfg.strategy = DecodeStrategy::Beam;
    beam_cfg.beam_width = 5;
    beam_cfg.num_return = 5;
    size_t n_decode = std::min<size_t>(args.n_decode, dataset.size());

    auto t1 = Clock::now();
    for (size_t i = 0; i < n_decode; ++i) {
        std::string input = build_model_input(dataset.records[i], loaded.meta.preprocess,
                                              loaded.meta.multi_task);
        greedy(loaded.params, vocab, input, greedy_cfg);
    }
    auto greedy_seconds = std::chrono::duration<double>(Clock::now() - t1).count();

    auto t2 = Clock::now();
    for (size_t i = 0; i < n_decode; ++i) {
        std::string input = build_model_input(dataset.records[i], loaded.meta.preprocess,
                                              loaded.meta.multi_task);
        beam(loaded.params, vocab, input, beam_cfg);
    }
    auto beam_seconds = std::chrono::duration<double>(Clock::now() - t2).count();

    std::ostringstream report;
    report << "params\t" << count_params(loaded.params.config) << "\n";
    report << "train_steps\t" << args.steps << "\n";
    report << "effective_batch\t" << args.batch * args.grad_accum << "\n";
    report << "train_seconds\t" << train_seconds << "\n";
    report << "steps_per_second\t" << args.steps / train_seconds << "\n";
    report << "greedy_records\t" << n_decode << "\n";
    report << "greedy_seconds\t" << greedy_seconds << "\n";
    report << "beam5_records\t" << n_decode << "\n";
    report << "beam5_seconds\t" << beam_seconds << "\n";
    std::cout << report.str();
    std::ofstream out(args.report, std::ios::binary);
    out << report.str();
    if (!out) fail(ErrorCode::IoError, "write failed for '" + args.report + "'");
    manifest.finish(true);
}

struct SynthArgs {
    std::string kind = "rewrite", output, vocab_out;
    size_t n = 20000;
    int min_len = 4, max_len = 10;
    uint64_t seed = 42;
};

void cmd_synth(const SynthArgs& args) {
    ManifestScope manifest("synth", args.output + ".manifest.json");
    manifest.flag("kind", args.kind);
    manifest.flag("n", static_cast<int64_t>(args.n));
    manifest.flag("output", args.output);
    manifest.seed(args.seed);
    manifest.start();

    Dataset dataset;
    if (args.kind == "rewrite") {
        dataset = make_rewrite_dataset(args.n, args.seed, args.min_len, args.max_len);
    } else if (args.kind == "copy") {
        dataset = make_copy_dataset(args.n, args.seed, args.min_len, args.max_len);
    } else {
        fail(ErrorCode::BadConfig, "unknown kind '" + args.kind + "'");
    }
    save_dataset(dataset, args.output);
    if (!args.vocab_out.empty()) rewrite_vocab().save(args.vocab_out);
    std::cout << "wrote " << dataset.size() << " records\n";
    manifest.finish(true);
}

struct DataEffArgs {
    std::string train, dev, test, vocab, output, preprocess = "none", ks = "0..7";
    std::string eval_ks = "1,5";
    bool byte_level = false, multi_task = false;
    double lr = 0.003, weight_decay = 0.01;
    int64_t steps = 0, warmup = 5000, eval_every = 500;
    int32_t batch = 64, beam = 5, threads = 0, dev_max_len = 0;
    uint64_t seed = 42;
    ModelFlags model;
};

void cmd_data_efficiency(const DataEffArgs& args, const CLI::App* app) {
    ManifestScope manifest("data-efficiency", args.output + ".manifest.json");
    manifest.flag("train", args.train);
    manifest.flag("test", args.test);
    manifest.flag("ks", args.ks);
    manifest.flag("steps", args.steps);
    manifest.flag("output", args.output);
    manifest.seed(args.seed);
    manifest.input(args.train);
    manifest.input(args.test);
    manifest.start();

    Vocabulary vocab = load_vocab_arg(args.vocab, args.byte_level);
    PreprocessStrategy strat = parse_strategy(args.preprocess);
    Dataset train_set = load_dataset(args.train, Split::Train);
    Dataset dev_set;
    dev_set.split = Split::Dev;
    if (!args.dev.empty()) dev_set = load_dataset(args.dev, Split::Dev);
    Dataset test_set = load_dataset(args.test, Split::Test);

    TrainConfig tcfg;
    tcfg.lr = args.lr;
    tcfg.batch_size = args.batch;
    tcfg.weight_decay = args.weight_decay;
    tcfg.warmup_steps = args.warmup;
    tcfg.total_steps = args.steps;
    tcfg.seed = args.seed;
    tcfg.eval_every = args.eval_every;
    tcfg.threads = args.threads > 0 ? args.threads : env_threads();
    tcfg.dev_max_len = args.dev_max_len;

    DataEfficiencyConfig dcfg;
    dcfg.ks.clear();
    for (int32_t k : parse_int_list(args.ks)) dcfg.ks.push_back(static_cast<uint32_t>(k));
    dcfg.subsample_seed = args.seed;
    dcfg.eval.ks = parse_int_list(args.eval_ks);
    dcfg.decode.beam_width = args.beam;
    dcfg.decode.max_len = args.model.max_tgt_len;

    ModelConfig mcfg = args.model.resolve(app, vocab.size());
    auto rows = data_efficiency_run(mcfg, tcfg, train_set, dev_set, test_set, vocab, strat,
                                    args.multi_task, dcfg, &std::cerr);
    std::string table = render_data_efficiency_tsv(rows);
    std::cout << table;
    std::ofstream out(args.output, std::ios::binary);
    out << table;
    if (!out) fail(ErrorCode::IoError, "write failed for '" + args.output + "'");
    manifest.finish(true);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"SMILES sequence-to-sequence reaction prediction toolkit"};
    app.set_version_flag("--version", kToolkitVersion);
    app.require_subcommand(1);

    TokenizeArgs tokenize_args;
    auto* tokenize = app.add_subcommand("tokenize", "preprocess SMILES lines");
    tokenize->add_option("--input", tokenize_args.input)->required();
    tokenize->add_option("--strategy", tokenize_args.strategy, "none|simple|smiles")
        ->capture_default_str();
    tokenize->add_option("--output", tokenize_args.output)->required();

    TrimArgs trim_args;
    auto* trim = app.add_subcommand("trim-vocab", "restrict a vocabulary to corpus pieces");
    trim->add_option("--base-vocab", trim_args.base_vocab)->required();
    trim->add_option("--corpus", trim_args.corpus)->required();
    trim->add_option("--stall", trim_args.stall)->capture_default_str();
    trim->add_option("--output", trim_args.output)->required();

    MakeMaskedArgs masked_args;
    auto* masked = app.add_subcommand("make-masked", "denoising pretraining pairs from SMILES");
    masked->add_option("--smiles", masked_args.smiles)->required();
    masked->add_option("--seed", masked_args.seed)->capture_default_str();
    masked->add_option("--fraction", masked_args.fraction)->capture_default_str();
    masked->add_option("--strategy", masked_args.strategy)->capture_default_str();
    masked->add_option("--output", masked_args.output)->required();

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "fine-tune or pretrain a model");
    train_cmd->add_option("--train", train_args.train)->required();
    train_cmd->add_option("--dev", train_args.dev);
    train_cmd->add_option("--vocab", train_args.vocab);
    train_cmd->add_flag("--byte-level", train_args.byte_level, "byte-level vocabulary");
    train_cmd->add_option("--preprocess", train_args.preprocess, "none|simple|smiles")
        ->capture_default_str();
    train_cmd->add_flag("--multi-task", train_args.multi_task, "task-prefix formatting");
    train_cmd->add_option("--steps", train_args.steps)->required();
    train_cmd->add_option("--lr", train_args.lr)->capture_default_str();
    train_cmd->add_option("--batch", train_args.batch)->capture_default_str();
    train_cmd->add_option("--warmup", train_args.warmup)->capture_default_str();
    train_cmd->add_option("--schedule", train_args.schedule, "warmup-constant|inverse-sqrt")
        ->capture_default_str();
    train_cmd->add_option("--weight-decay", train_args.weight_decay)->capture_default_str();
    train_cmd->add_option("--grad-accum", train_args.grad_accum)->capture_default_str();
    train_cmd->add_option("--eval-every", train_args.eval_every)->capture_default_str();
    train_cmd->add_option("--seed", train_args.seed)->capture_default_str();
    train_cmd->add_option("--threads", train_args.threads, "0: use RXNSEQ_THREADS or 1");
    train_cmd->add_option("--dev-max-len", train_args.dev_max_len);
    train_cmd->add_option("--outdir", train_args.outdir)->required();
    train_args.model.register_on(train_cmd);

    PredictArgs predict_args;
    auto* predict = app.add_subcommand("predict", "decode a dataset with a checkpoint");
    predict->add_option("--ckpt", predict_args.ckpt)->required();
    predict->add_option("--vocab", predict_args.vocab);
    predict->add_flag("--byte-level", predict_args.byte_level);
    predict->add_option("--input", predict_args.input)->required();
    predict->add_option("--strategy", predict_args.strategy, "greedy|beam|topk|nucleus|contrastive")
        ->capture_default_str();
    predict->add_option("--preprocess", predict_args.preprocess,
                        "override the checkpoint's preprocessing");
    predict->add_flag("--multi-task", predict_args.multi_task);
    predict->add_option("--beam", predict_args.beam)->capture_default_str();
    predict->add_option("--num-return", predict_args.num_return, "0: beam width capped at 5");
    predict->add_option("--top-k", predict_args.top_k)->capture_default_str();
    predict->add_option("--top-p", predict_args.top_p)->capture_default_str();
    predict->add_option("--temperature", predict_args.temperature)->capture_default_str();
    predict->add_option("--alpha", predict_args.alpha)->capture_default_str();
    predict->add_option("--max-len", predict_args.max_len)->capture_default_str();
    predict->add_option("--num-samples", predict_args.num_samples)->capture_default_str();
    predict->add_option("--seed", predict_args.seed)->capture_default_str();
    predict->add_option("--output", predict_args.output)->required();

    EvaluateArgs evaluate_args;
    auto* evaluate = app.add_subcommand("evaluate", "Acc@K against a gold dataset");
    evaluate->add_option("--preds", evaluate_args.preds)->required();
    evaluate->add_option("--gold", evaluate_args.gold)->required();
    evaluate->add_option("--ks", evaluate_args.ks)->capture_default_str();
    evaluate->add_option("--output", evaluate_args.output, "also write machine-readable report");
    evaluate->add_flag("--machine", evaluate_args.machine, "machine format on stdout");

    SweepArgs sweep_args;
    auto* sweep = app.add_subcommand("sweep", "Acc@K across beam widths");
    sweep->add_option("--ckpt", sweep_args.ckpt)->required();
    sweep->add_option("--vocab", sweep_args.vocab);
    sweep->add_flag("--byte-level", sweep_args.byte_level);
    sweep->add_option("--input", sweep_args.input)->required();
    sweep->add_option("--widths", sweep_args.widths)->capture_default_str();
    sweep->add_option("--ks", sweep_args.ks)->capture_default_str();
    sweep->add_option("--max-len", sweep_args.max_len)->capture_default_str();
    sweep->add_option("--output", sweep_args.output)->required();

    SubsampleArgs subsample_args;
    auto* subsample = app.add_subcommand("subsample", "nested fraction of a dataset");
    subsample->add_option("--input", subsample_args.input)->required();
    subsample->add_option("--k", subsample_args.k, "keep ceil(size / 2^k) records")->required();
    subsample->add_option("--seed", subsample_args.seed)->capture_default_str();
    subsample->add_option("--output", subsample_args.output)->required();

    AttributeArgs attribute_args;
    auto* attribute = app.add_subcommand("attribute", "Shapley token attribution heatmap");
    attribute->add_option("--ckpt", attribute_args.ckpt)->required();
    attribute->add_option("--vocab", attribute_args.vocab);
    attribute->add_flag("--byte-level", attribute_args.byte_level);
    attribute->add_option("--reaction", attribute_args.reaction, "reactants>>product")->required();
    attribute->add_option("--estimator", attribute_args.estimator, "auto|exact|sampled")
        ->capture_default_str();
    attribute->add_option("--permutations", attribute_args.permutations)->capture_default_str();
    attribute->add_option("--max-len", attribute_args.max_len)->capture_default_str();
    attribute->add_option("--seed", attribute_args.seed)->capture_default_str();
    attribute->add_option("--out-tsv", attribute_args.out_tsv);
    attribute->add_option("--out-svg", attribute_args.out_svg);

    BenchArgs bench_args;
    auto* bench = app.add_subcommand("bench", "wall-clock training and decoding benchmark");
    bench->add_option("--ckpt", bench_args.ckpt)->required();
    bench->add_option("--vocab", bench_args.vocab);
    bench->add_flag("--byte-level", bench_args.byte_level);
    bench->add_option("--input", bench_args.input)->required();
    bench->add_option("--steps", bench_args.steps)->capture_default_str();
    bench->add_option("--batch", bench_args.batch)->capture_default_str();
    bench->add_option("--grad-accum", bench_args.grad_accum)->capture_default_str();
    bench->add_option("--n-decode", bench_args.n_decode)->capture_default_str();
    bench->add_option("--seed", bench_args.seed)->capture_default_str();
    bench->add_option("--report", bench_args.report)->required();

    SynthArgs synth_args;
    auto* synth = app.add_subcommand("synth", "synthetic rewrite/copy reaction datasets");
    synth->add_option("--kind", synth_args.kind, "rewrite|copy")->capture_default_str();
    synth->add_option("--n", synth_args.n)->capture_default_str();
    synth->add_option("--min-len", synth_args.min_len)->capture_default_str();
    synth->add_option("--max-len", synth_args.max_len)->capture_default_str();
    synth->add_option("--seed", synth_args.seed)->capture_default_str();
    synth->add_option("--output", synth_args.output)->required();
    synth->add_option("--vocab-out", synth_args.vocab_out, "also write the grammar vocabulary");

    DataEffArgs dataeff_args;
    auto* dataeff = app.add_subcommand("data-efficiency", "train on nested fractions, table Acc@K");
    dataeff->add_option("--train", dataeff_args.train)->required();
    dataeff->add_option("--dev", dataeff_args.dev);
    dataeff->add_option("--test", dataeff_args.test)->required();
    dataeff->add_option("--vocab", dataeff_args.vocab);
    dataeff->add_flag("--byte-level", dataeff_args.byte_level);
    dataeff->add_option("--preprocess", dataeff_args.preprocess)->capture_default_str();
    dataeff->add_flag("--multi-task", dataeff_args.multi_task);
    dataeff->add_option("--ks", dataeff_args.ks)->capture_default_str();
    dataeff->add_option("--eval-ks", dataeff_args.eval_ks)->capture_default_str();
    dataeff->add_option("--steps", dataeff_args.steps)->required();
    dataeff->add_option("--lr", dataeff_args.lr)->capture_default_str();
    dataeff->add_option("--batch", dataeff_args.batch)->capture_default_str();
    dataeff->add_option("--warmup", dataeff_args.warmup)->capture_default_str();
    dataeff->add_option("--weight-decay", dataeff_args.weight_decay)->capture_default_str();
    dataeff->add_option("--eval-every", dataeff_args.eval_every)->capture_default_str();
    dataeff->add_option("--beam", dataeff_args.beam)->capture_default_str();
    dataeff->add_option("--seed", dataeff_args.seed)->capture_default_str();
    dataeff->add_option("--threads", dataeff_args.threads);
    dataeff->add_option("--dev-max-len", dataeff_args.dev_max_len);
    dataeff->add_option("--output", dataeff_args.output)->required();
    dataeff_args.model.register_on(dataeff);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (tokenize->parsed()) cmd_tokenize(tokenize_args);
        else if (trim->parsed()) cmd_trim_vocab(trim_args);
        else if (masked->parsed()) cmd_make_masked(masked_args);
        else if (train_cmd->parsed()) cmd_train(train_args, train_cmd);
        else if (predict->parsed()) cmd_predict(predict_args, predict);
        else if (evaluate->parsed()) cmd_evaluate(evaluate_args);
        else if (sweep->parsed()) cmd_sweep(sweep_args);
        else if (subsample->parsed()) cmd_subsample(subsample_args);
        else if (attribute->parsed()) cmd_attribute(attribute_args);
        else if (bench->parsed()) cmd_bench(bench_args);
        else if (synth->parsed()) cmd_synth(synth_args);
        else if (dataeff->parsed()) cmd_data_efficiency(dataeff_args, dataeff);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return (e.code() == ErrorCode::NonFiniteLoss || e.code() == ErrorCode::NonFiniteGradient)
                   ? 3
                   : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
