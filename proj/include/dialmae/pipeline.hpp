#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dialmae/retrieval.hpp"
#include "dialmae/training.hpp"

namespace dialmae {

// Everything a command needs: model + per-stage training configs, data paths,
// and the command-specific knobs. Precedence when assembling one of these is
// CLI flag > config file > preset > built-in default; apply_preset and
// apply_json implement the middle two layers and reject unknown names/keys.
struct RunConfig {
    std::string preset = "desk";
    uint64_t seed = 42;  // master seed; every stage draws named sub-streams

    ModelConfig model;
    TrainConfig post;  // post-training stage
    TrainConfig ft;    // fine-tuning stage

    // Data and artifact paths.
    std::string sessions_file;
    std::string eval_file;
    std::string checkpoint;   // input checkpoint stem
    std::string vocab_file;   // empty -> vocab.json beside the checkpoint
    std::string embeddings;   // input embedding-dump stem for retrieve
    std::string out_dir;

    // gen-synth.
    int n_sessions = 200;
    int n_eval_sessions = 50;
    int turns_per_session = 8;
    bool force = false;

    // eval / embed / retrieve.
    int block_size = 10;
    std::string tower = "fine-tuned";  // or "post-only" for the ablation
    int top_k = 5;
    int query_index = 0;

    // sweep.
    std::vector<std::pair<double, double>> sweep_cells;  // (enc_rate, dec_rate)
    std::vector<int> sweep_layers;                       // decoder-depth mode
    std::vector<uint64_t> seeds{1, 2, 3};

    void validate() const;
    nlohmann::json to_json() const;
    // Partial update: only the keys present are applied; unknown keys throw.
    void apply_json(const nlohmann::json& j);
    static RunConfig from_json_file(const std::string& path);
};

// Named built-ins. "desk" is the default CPU-minutes regime; "ubuntu-style"
// and "ecommerce-style" carry the two reference regimes' mask rates, decoder
// depths and fine-tune optimizer settings at desk scale (the original regimes
// ran batch 1024 for 15k post-training steps on BERT-base; only the shape of
// the recipe transfers here).
const std::vector<std::string>& preset_names();
void apply_preset(RunConfig& config, const std::string& name);
RunConfig make_preset(const std::string& name);

// Out-dir provenance record: command, full config, seed, git-describe string
// (or "unknown"), and an fnv1a64 content hash per artifact. No timestamps, so
// reruns are byte-identical.
void write_run_manifest(const std::string& out_dir, const std::string& command,
                        const RunConfig& config, const std::vector<std::string>& files);
uint64_t hash_file(const std::string& path);
std::string git_describe();

// Commands. Each validates, runs one pipeline stage, writes its artifacts
// under out_dir (plus manifest.json), and returns the primary result.

// sessions.jsonl (training sessions) and eval.jsonl (held-out sessions, one
// block of 1 positive + 9 in-corpus negatives per session, positive position
// shuffled). Existing outputs require force.
void cmd_gen_synth(const RunConfig& config);

// checkpoint.{json,bin}, vocab.json, metrics.{jsonl,csv}.
Checkpoint cmd_post_train(const RunConfig& config);
Checkpoint cmd_fine_tune(const RunConfig& config);

// eval_report.{json,csv}; tower "post-only" routes both sides through the
// post-trained encoder.
EvalReport cmd_eval(const RunConfig& config);

// embeddings.{json,bin}: one response-position utterance per row.
std::vector<DenseVector> cmd_embed(const RunConfig& config);

// Top-k response ids for one held-out context; also written to hits.csv.
std::vector<std::pair<int, double>> cmd_retrieve(const RunConfig& config);

// One post-train + fine-tune + eval per grid cell per seed; sweep.csv rows:
// enc_rate,dec_rate,n_dec_layers,seed,R@1,R@2,R@5,n_queries. A dec rate of 0
// (or 0 layers in layer mode) trains the decoder-free MLM baseline.
struct SweepRow {
    double enc_rate = 0.0;
    double dec_rate = 0.0;
    int n_dec_layers = 0;
    uint64_t seed = 0;
    EvalReport report;
};
std::vector<SweepRow> cmd_sweep(const RunConfig& config);

}  // namespace dialmae
