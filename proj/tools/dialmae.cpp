#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dialmae/pipeline.hpp"

using namespace dialmae;

namespace {

// Layering: built-in defaults < preset < config file < command-line flags.
// The preset is chosen by --preset if given, else by the file's "preset"
// key, else "desk"; the file's remaining keys and then the explicit flags
// override it field by field.
struct ConfigBuilder {
    std::optional<std::string> preset;
    std::optional<std::string> config_file;

    RunConfig build() const {
        nlohmann::json file_json = nlohmann::json::object();
        if (config_file) {
            std::ifstream in(*config_file, std::ios::binary);
            if (!in) throw std::runtime_error("cannot open config file: " + *config_file);
            try {
                file_json = nlohmann::json::parse(in);
            } catch (const nlohmann::json::parse_error& e) {
                throw std::invalid_argument("malformed config file " + *config_file + ": " +
                                            e.what());
            }
            if (!file_json.is_object())
                throw std::invalid_argument("config file must hold a JSON object");
        }

        std::string base = "desk";
        if (file_json.contains("preset")) base = file_json.at("preset").get<std::string>();
        if (preset) base = *preset;
        file_json.erase("preset");

        RunConfig config = make_preset(base);
        config.apply_json(file_json);
        return config;
    }

    void add_to(CLI::App* cmd) {
        cmd->add_option("--config", config_file, "JSON config file (keys override the preset)");
        cmd->add_option("--preset", preset,
                        "named regime: desk, ubuntu-style or ecommerce-style");
    }
};

template <typename T>
void maybe(std::optional<T>& flag, T& field) {
    if (flag) field = *flag;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::stringstream stream(s);
    std::string part;
    while (std::getline(stream, part, sep)) parts.push_back(part);
    return parts;
}

std::vector<std::pair<double, double>> parse_cells(const std::string& spec) {
    std::vector<std::pair<double, double>> cells;
    for (const std::string& cell : split(spec, ',')) {
        const auto rates = split(cell, ':');
        if (rates.size() != 2)
            throw std::invalid_argument("bad sweep cell \"" + cell +
                                        "\"; expected enc_rate:dec_rate");
        cells.emplace_back(std::stod(rates[0]), std::stod(rates[1]));
    }
    return cells;
}

template <typename T>
std::vector<T> parse_list(const std::string& spec) {
    std::vector<T> out;
    for (const std::string& part : split(spec, ','))
        out.push_back(static_cast<T>(std::stoll(part)));
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dialmae: asymmetric masked auto-encoding for dialogue response selection"};
    app.require_subcommand(1);

    // Shared flag storage; each subcommand wires the subset it understands.
    ConfigBuilder builder;
    std::optional<uint64_t> seed;
    std::optional<std::string> out_dir, sessions, eval_file, checkpoint, vocab, embeddings, tower;
    std::optional<int> n_sessions, n_eval_sessions, turns, vocab_size, dec_layers, block_size,
        top_k, query_index, post_batch, ft_batch, pairs_per_session;
    std::optional<long long> post_steps, ft_steps;
    std::optional<double> post_lr, ft_lr, enc_mask, dec_mask, temperature;
    std::optional<std::string> cells_spec, layers_spec, seeds_spec;
    bool force = false, tie_towers = false, bert_masking = false;

    const auto common = [&](CLI::App* cmd) {
        builder.add_to(cmd);
        cmd->add_option("--seed", seed, "master seed; every stage derives named sub-streams");
        cmd->add_option("--out-dir", out_dir, "run directory for artifacts and manifest.json")
            ->required();
    };

    CLI::App* gen = app.add_subcommand("gen-synth", "generate a synthetic dialogue corpus");
    common(gen);
    gen->add_option("--n-sessions", n_sessions, "training sessions to generate");
    gen->add_option("--n-eval-sessions", n_eval_sessions, "held-out sessions for the eval file");
    gen->add_option("--turns", turns, "utterances per session");
    gen->add_option("--vocab-size", vocab_size, "token vocabulary budget");
    gen->add_flag("--force", force, "overwrite existing outputs");

    CLI::App* post = app.add_subcommand("post-train", "masked auto-encoding post-training");
    common(post);
    post->add_option("--sessions", sessions, "training corpus (session JSONL)")->required();
    post->add_option("--steps", post_steps, "optimizer steps");
    post->add_option("--batch-size", post_batch, "examples per step");
    post->add_option("--lr", post_lr, "peak learning rate");
    post->add_option("--enc-mask", enc_mask, "encoder-side mask rate");
    post->add_option("--dec-mask", dec_mask, "decoder-side mask rate");
    post->add_option("--dec-layers", dec_layers, "decoder depth (0 = MLM-only baseline)");
    post->add_option("--pairs-per-session", pairs_per_session,
                     "context/response pairs sampled per session");
    post->add_flag("--bert-masking", bert_masking,
                   "80/10/10 mask/random/keep substitution instead of pure [MASK]");

    CLI::App* ft = app.add_subcommand("fine-tune", "contrastive bi-encoder fine-tuning");
    common(ft);
    ft->add_option("--checkpoint", checkpoint, "post-train checkpoint stem")->required();
    ft->add_option("--sessions", sessions, "training corpus (session JSONL)")->required();
    ft->add_option("--vocab", vocab, "vocab.json (default: beside the checkpoint)");
    ft->add_option("--steps", ft_steps, "optimizer steps");
    ft->add_option("--batch-size", ft_batch, "pairs per step (in-batch negatives)");
    ft->add_option("--lr", ft_lr, "peak learning rate");
    ft->add_option("--temperature", temperature, "softmax temperature over dot products");
    ft->add_flag("--tie-towers", tie_towers, "share one tower for context and response");

    CLI::App* ev = app.add_subcommand("eval", "R_n@k benchmark over an eval file");
    common(ev);
    ev->add_option("--checkpoint", checkpoint, "checkpoint stem")->required();
    ev->add_option("--eval-file", eval_file, "eval JSONL in candidate blocks")->required();
    ev->add_option("--vocab", vocab, "vocab.json (default: beside the checkpoint)");
    ev->add_option("--tower", tower, "fine-tuned (default) or post-only for the ablation");
    ev->add_option("--block-size", block_size, "candidates per query block");

    CLI::App* emb = app.add_subcommand("embed", "dump response embeddings for a corpus");
    common(emb);
    emb->add_option("--checkpoint", checkpoint, "checkpoint stem")->required();
    emb->add_option("--sessions", sessions, "session JSONL to embed")->required();
    emb->add_option("--vocab", vocab, "vocab.json (default: beside the checkpoint)");

    CLI::App* retr = app.add_subcommand("retrieve", "top-k responses for one context");
    common(retr);
    retr->add_option("--checkpoint", checkpoint, "checkpoint stem")->required();
    retr->add_option("--sessions", sessions, "session JSONL supplying the query context")
        ->required();
    retr->add_option("--vocab", vocab, "vocab.json (default: beside the checkpoint)");
    retr->add_option("--embeddings", embeddings, "embedding-dump stem")->required();
    retr->add_option("-k,--top-k", top_k, "rows to return");
    retr->add_option("--query-index", query_index, "session whose context is the query");

    CLI::App* sweep = app.add_subcommand("sweep", "ablation grid: post-train+fine-tune+eval");
    common(sweep);
    sweep->add_option("--sessions", sessions, "training corpus (session JSONL)")->required();
    sweep->add_option("--eval-file", eval_file, "eval JSONL")->required();
    sweep->add_option("--cells", cells_spec,
                      "mask-rate cells enc:dec[,enc:dec...]; dec 0 drops the decoder");
    sweep->add_option("--dec-layers", layers_spec, "decoder depths 0,1,2,...");
    sweep->add_option("--seeds", seeds_spec, "comma-separated seed list");
    sweep->add_option("--steps", post_steps, "post-train steps per cell");
    sweep->add_option("--ft-steps", ft_steps, "fine-tune steps per cell");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        RunConfig config = builder.build();
        maybe(seed, config.seed);
        maybe(out_dir, config.out_dir);
        maybe(sessions, config.sessions_file);
        maybe(eval_file, config.eval_file);
        maybe(checkpoint, config.checkpoint);
        maybe(vocab, config.vocab_file);
        maybe(embeddings, config.embeddings);
        maybe(tower, config.tower);
        maybe(n_sessions, config.n_sessions);
        maybe(n_eval_sessions, config.n_eval_sessions);
        maybe(turns, config.turns_per_session);
        maybe(vocab_size, config.model.vocab_size);
        maybe(dec_layers, config.model.n_dec_layers);
        maybe(block_size, config.block_size);
        maybe(top_k, config.top_k);
        maybe(query_index, config.query_index);
        maybe(post_steps, config.post.max_steps);
        maybe(post_batch, config.post.batch_size);
        maybe(post_lr, config.post.base_lr);
        maybe(enc_mask, config.post.enc_mask_rate);
        maybe(dec_mask, config.post.dec_mask_rate);
        maybe(pairs_per_session, config.post.num_pairs_per_session);
        maybe(ft_steps, config.ft.max_steps);
        maybe(ft_batch, config.ft.batch_size);
        maybe(ft_lr, config.ft.base_lr);
        maybe(temperature, config.ft.temperature);
        if (force) config.force = true;
        if (tie_towers) config.ft.tie_towers = true;
        if (bert_masking) config.post.bert_masking = true;
        if (cells_spec) config.sweep_cells = parse_cells(*cells_spec);
        if (layers_spec) config.sweep_layers = parse_list<int>(*layers_spec);
        if (seeds_spec) config.seeds = parse_list<uint64_t>(*seeds_spec);

        if (gen->parsed()) {
            cmd_gen_synth(config);
            std::cout << "wrote sessions.jsonl and eval.jsonl under " << config.out_dir << "\n";
        } else if (post->parsed()) {
            cmd_post_train(config);
            std::cout << "wrote checkpoint and metrics under " << config.out_dir << "\n";
        } else if (ft->parsed()) {
            cmd_fine_tune(config);
            std::cout << "wrote bi-encoder checkpoint under " << config.out_dir << "\n";
        } else if (ev->parsed()) {
            const EvalReport report = cmd_eval(config);
            std::cout << report.to_json().dump(2) << "\n";
        } else if (emb->parsed()) {
            const auto vectors = cmd_embed(config);
            std::cout << "wrote " << vectors.size() << " embeddings under " << config.out_dir
                      << "\n";
        } else if (retr->parsed()) {
            const auto hits = cmd_retrieve(config);
            for (size_t r = 0; r < hits.size(); ++r)
                std::printf("%zu\t%d\t%.10g\n", r + 1, hits[r].first, hits[r].second);
        } else if (sweep->parsed()) {
            const auto rows = cmd_sweep(config);
            std::cout << "wrote " << rows.size() << " sweep rows to " << config.out_dir
                      << "/sweep.csv\n";
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
