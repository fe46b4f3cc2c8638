#include "dialmae/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dialmae/checkpoint.hpp"

namespace dialmae {

namespace fs = std::filesystem;
using nlohmann::json;

void RunConfig::validate() const {
    bool known = false;
    for (const std::string& name : preset_names()) known = known || name == preset;
    if (!known) {
        std::string valid;
        for (const std::string& name : preset_names()) valid += (valid.empty() ? "" : ", ") + name;
        throw std::invalid_argument("unknown preset \"" + preset + "\"; valid presets: " + valid);
    }
    model.validate();
    post.validate();
    ft.validate();
    if (n_sessions < 1) throw std::invalid_argument("n_sessions must be >= 1");
    if (n_eval_sessions < 1) throw std::invalid_argument("n_eval_sessions must be >= 1");
    if (turns_per_session < 2) throw std::invalid_argument("turns_per_session must be >= 2");
    if (block_size < 2) throw std::invalid_argument("block_size must be >= 2");
    if (top_k < 1) throw std::invalid_argument("top_k must be >= 1");
    if (query_index < 0) throw std::invalid_argument("query_index must be >= 0");
    if (tower != "fine-tuned" && tower != "post-only")
        throw std::invalid_argument("tower must be \"fine-tuned\" or \"post-only\", got \"" +
                                    tower + "\"");
    for (const auto& [enc, dec] : sweep_cells)
        if (enc < 0.0 || enc > 1.0 || dec < 0.0 || dec > 1.0)
            throw std::invalid_argument("sweep mask rates must be in [0, 1]");
    for (int layers : sweep_layers)
        if (layers < 0) throw std::invalid_argument("sweep decoder depths must be >= 0");
}

json RunConfig::to_json() const {
    // The per-stage seeds are owned by the top-level master seed, not the
    // nested configs; drop them from the serialized stage objects.
    json post_j = post.to_json();
    json ft_j = ft.to_json();
    post_j.erase("seed");
    ft_j.erase("seed");

    json cells = json::array();
    for (const auto& [enc, dec] : sweep_cells) cells.push_back({enc, dec});

    return json{{"preset", preset},
                {"seed", seed},
                {"model", model.to_json()},
                {"post_train", post_j},
                {"fine_tune", ft_j},
                {"sessions_file", sessions_file},
                {"eval_file", eval_file},
                {"checkpoint", checkpoint},
                {"vocab_file", vocab_file},
                {"embeddings", embeddings},
                {"out_dir", out_dir},
                {"n_sessions", n_sessions},
                {"n_eval_sessions", n_eval_sessions},
                {"turns_per_session", turns_per_session},
                {"force", force},
                {"block_size", block_size},
                {"tower", tower},
                {"top_k", top_k},
                {"query_index", query_index},
                {"sweep_cells", cells},
                {"sweep_layers", sweep_layers},
                {"seeds", seeds}};
}

namespace {

void update_model_config(ModelConfig& cfg, const json& j) {
    for (const auto& [key, value] : j.items()) {
        if (key == "vocab_size") cfg.vocab_size = value.get<int>();
        else if (key == "hidden_dim") cfg.hidden_dim = value.get<int>();
        else if (key == "n_heads") cfg.n_heads = value.get<int>();
        else if (key == "ffn_dim") cfg.ffn_dim = value.get<int>();
        else if (key == "n_enc_layers") cfg.n_enc_layers = value.get<int>();
        else if (key == "n_dec_layers") cfg.n_dec_layers = value.get<int>();
        else if (key == "max_enc_len") cfg.max_enc_len = value.get<int>();
        else if (key == "max_dec_len") cfg.max_dec_len = value.get<int>();
        else if (key == "dropout_rate") cfg.dropout_rate = value.get<double>();
        else if (key == "layernorm_eps") cfg.layernorm_eps = value.get<double>();
        else throw std::invalid_argument("unknown model config key: " + key);
    }
}

void update_train_config(TrainConfig& cfg, const json& j, const std::string& stage) {
    for (const auto& [key, value] : j.items()) {
        if (key == "seed")
            throw std::invalid_argument("set the top-level \"seed\" instead of " + stage +
                                        ".seed; stage seeds derive from the master seed");
        else if (key == "base_lr") cfg.base_lr = value.get<double>();
        else if (key == "warmup_ratio") cfg.warmup_ratio = value.get<double>();
        else if (key == "max_steps") cfg.max_steps = value.get<long long>();
        else if (key == "batch_size") cfg.batch_size = value.get<int>();
        else if (key == "weight_decay") cfg.weight_decay = value.get<double>();
        else if (key == "beta1") cfg.beta1 = value.get<double>();
        else if (key == "beta2") cfg.beta2 = value.get<double>();
        else if (key == "adam_eps") cfg.adam_eps = value.get<double>();
        else if (key == "enc_mask_rate") cfg.enc_mask_rate = value.get<double>();
        else if (key == "dec_mask_rate") cfg.dec_mask_rate = value.get<double>();
        else if (key == "temperature") cfg.temperature = value.get<double>();
        else if (key == "tie_towers") cfg.tie_towers = value.get<bool>();
        else if (key == "bert_masking") cfg.bert_masking = value.get<bool>();
        else if (key == "num_pairs_per_session") cfg.num_pairs_per_session = value.get<int>();
        else if (key == "max_ctx_turns") cfg.max_ctx_turns = value.get<int>();
        else throw std::invalid_argument("unknown " + stage + " config key: " + key);
    }
}

}  // namespace

void RunConfig::apply_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
    // A preset named in the file is the base layer; the file's other keys
    // override it.
    if (j.contains("preset")) apply_preset(*this, j.at("preset").get<std::string>());
    for (const auto& [key, value] : j.items()) {
        if (key == "preset") continue;
        else if (key == "seed") seed = value.get<uint64_t>();
        else if (key == "model") update_model_config(model, value);
        else if (key == "post_train") update_train_config(post, value, "post_train");
        else if (key == "fine_tune") update_train_config(ft, value, "fine_tune");
        else if (key == "sessions_file") sessions_file = value.get<std::string>();
        else if (key == "eval_file") eval_file = value.get<std::string>();
        else if (key == "checkpoint") checkpoint = value.get<std::string>();
        else if (key == "vocab_file") vocab_file = value.get<std::string>();
        else if (key == "embeddings") embeddings = value.get<std::string>();
        else if (key == "out_dir") out_dir = value.get<std::string>();
        else if (key == "n_sessions") n_sessions = value.get<int>();
        else if (key == "n_eval_sessions") n_eval_sessions = value.get<int>();
        else if (key == "turns_per_session") turns_per_session = value.get<int>();
        else if (key == "force") force = value.get<bool>();
        else if (key == "block_size") block_size = value.get<int>();
        else if (key == "tower") tower = value.get<std::string>();
        else if (key == "top_k") top_k = value.get<int>();
        else if (key == "query_index") query_index = value.get<int>();
        else if (key == "sweep_cells") {
            sweep_cells.clear();
            for (const json& cell : value) {
                if (!cell.is_array() || cell.size() != 2)
                    throw std::invalid_argument("sweep_cells entries must be [enc_rate, dec_rate]");
                sweep_cells.emplace_back(cell[0].get<double>(), cell[1].get<double>());
            }
        } else if (key == "sweep_layers") {
            sweep_layers = value.get<std::vector<int>>();
        } else if (key == "seeds") {
            seeds = value.get<std::vector<uint64_t>>();
        } else {
            throw std::invalid_argument("unknown config key: " + key);
        }
    }
}

RunConfig RunConfig::from_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("malformed config file " + path + ": " + e.what());
    }
    RunConfig config;
    config.apply_json(j);
    return config;
}

const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names{"desk", "ubuntu-style", "ecommerce-style"};
    return names;
}

void apply_preset(RunConfig& config, const std::string& name) {
    // Every preset starts from the desk regime: the CPU-minutes model and
    // schedule sizes.
    ModelConfig model;
    model.vocab_size = 2000;
    model.hidden_dim = 32;
    model.n_heads = 4;
    model.ffn_dim = 128;
    model.n_enc_layers = 2;
    model.n_dec_layers = 1;
    model.max_enc_len = 64;
    model.max_dec_len = 16;

    TrainConfig post;
    post.base_lr = 3e-4;
    post.warmup_ratio = 0.1;
    post.max_steps = 2000;
    post.batch_size = 32;
    post.enc_mask_rate = 0.30;
    post.dec_mask_rate = 0.75;
    post.num_pairs_per_session = 4;
    post.max_ctx_turns = 8;

    TrainConfig ft = post;
    ft.base_lr = 1e-4;
    ft.max_steps = 500;
    ft.batch_size = 32;
    ft.temperature = 1.0;

    if (name == "desk") {
        // baseline as constructed
    } else if (name == "ubuntu-style") {
        // Ubuntu regime: decoder mask 75%, one decoder layer, fine-tune at
        // 5e-5 with batch 64. (The original ran batch 1024 / 15k post-train
        // steps on a full-size encoder; sizes here stay desk-scale.)
        model.n_dec_layers = 1;
        post.dec_mask_rate = 0.75;
        ft.base_lr = 5e-5;
        ft.batch_size = 64;
    } else if (name == "ecommerce-style") {
        // E-commerce regime: decoder mask 45%, two decoder layers, fine-tune
        // at 1e-4 with batch 128.
        model.n_dec_layers = 2;
        post.dec_mask_rate = 0.45;
        ft.base_lr = 1e-4;
        ft.batch_size = 128;
    } else {
        std::string valid;
        for (const std::string& n : preset_names()) valid += (valid.empty() ? "" : ", ") + n;
        throw std::invalid_argument("unknown preset \"" + name + "\"; valid presets: " + valid);
    }

    config.preset = name;
    config.model = model;
    config.post = post;
    config.ft = ft;
}

RunConfig make_preset(const std::string& name) {
    RunConfig config;
    apply_preset(config, name);
    return config;
}

uint64_t hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot hash missing file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string bytes = buf.str();
    return fnv1a64(std::string_view(bytes));
}

std::string git_describe() {
    FILE* pipe = popen("git describe --always --dirty 2>/dev/null", "r");
    if (pipe == nullptr) return "unknown";
    char buf[256];
    std::string out;
    while (fgets(buf, sizeof(buf), pipe) != nullptr) out += buf;
    pclose(pipe);
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
    return out.empty() ? "unknown" : out;
}

void write_run_manifest(const std::string& out_dir, const std::string& command,
                        const RunConfig& config, const std::vector<std::string>& files) {
    json hashes = json::object();
    for (const std::string& file : files) {
        char hex[32];
        std::snprintf(hex, sizeof(hex), "fnv1a64:%016llx",
                      static_cast<unsigned long long>(hash_file((fs::path(out_dir) / file).string())));
        hashes[file] = hex;
    }
    const json manifest{{"format", "dialmae-run"},
                        {"command", command},
                        {"seed", config.seed},
                        {"git_describe", git_describe()},
                        {"config", config.to_json()},
                        {"files", hashes}};
    const fs::path path = fs::path(out_dir) / "manifest.json";
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << manifest.dump(2) << "\n";
    out.close();
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

namespace {

// Resolves the master seed into the per-stage sub-streams and validates.
RunConfig resolved(const RunConfig& in) {
    RunConfig config = in;
    config.validate();
    config.post.seed = config.seed;
    config.ft.seed = derive_seed(config.seed, "fine-tune");
    return config;
}

void require(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument(what);
}

fs::path prepare_out_dir(const RunConfig& config) {
    require(!config.out_dir.empty(), "out_dir is required");
    fs::create_directories(config.out_dir);
    return fs::path(config.out_dir);
}

std::string vocab_path(const RunConfig& config) {
    if (!config.vocab_file.empty()) return config.vocab_file;
    require(!config.checkpoint.empty(), "checkpoint is required");
    return (fs::path(config.checkpoint).parent_path() / "vocab.json").string();
}

std::vector<int> recall_ks_for(int block_size) {
    std::vector<int> ks;
    for (int k : kDefaultRecallKs)
        if (k <= block_size) ks.push_back(k);
    return ks;
}

}  // namespace

void cmd_gen_synth(const RunConfig& in) {
    const RunConfig config = resolved(in);
    const fs::path out = prepare_out_dir(config);
    const fs::path sessions_path = out / "sessions.jsonl";
    const fs::path eval_path = out / "eval.jsonl";
    if (!config.force && (fs::exists(sessions_path) || fs::exists(eval_path)))
        throw std::runtime_error("output exists under " + config.out_dir +
                                 "; pass --force to overwrite");

    const int total = config.n_sessions + config.n_eval_sessions;
    const std::vector<DialogueSession> all =
        gen_synthetic_corpus(config.seed, total, config.model.vocab_size,
                             config.turns_per_session);
    const std::vector<DialogueSession> train(all.begin(), all.begin() + config.n_sessions);
    const std::vector<DialogueSession> held(all.begin() + config.n_sessions, all.end());
    write_sessions_jsonl(sessions_path.string(), train);

    // Negative pool: every response-position utterance in the training split.
    std::vector<const Utterance*> pool;
    for (const DialogueSession& s : train)
        for (size_t j = 1; j < s.utterances.size(); ++j) pool.push_back(&s.utterances[j]);
    const int negatives = config.block_size - 1;
    if (pool.size() < static_cast<size_t>(negatives))
        throw std::runtime_error("training split too small to sample eval negatives");

    Rng rng(derive_seed(config.seed, "eval-negatives"));
    std::vector<LabeledExample> examples;
    examples.reserve(held.size() * static_cast<size_t>(config.block_size));
    for (const DialogueSession& session : held) {
        const std::vector<Utterance> context(session.utterances.begin(),
                                             session.utterances.end() - 1);
        const Utterance& positive = session.utterances.back();

        std::set<size_t> chosen;
        std::vector<const Utterance*> block_negs;
        while (block_negs.size() < static_cast<size_t>(negatives)) {
            const size_t idx = rng.uniform_below(pool.size());
            if (chosen.insert(idx).second) block_negs.push_back(pool[idx]);
        }
        const size_t positive_pos = rng.uniform_below(static_cast<uint64_t>(config.block_size));

        size_t neg_cursor = 0;
        for (int c = 0; c < config.block_size; ++c) {
            LabeledExample ex;
            ex.context = context;
            if (static_cast<size_t>(c) == positive_pos) {
                ex.response = positive;
                ex.label = 1;
            } else {
                ex.response = *block_negs[neg_cursor++];
                ex.label = 0;
            }
            examples.push_back(std::move(ex));
        }
    }
    write_eval_jsonl(eval_path.string(), examples);
    write_run_manifest(config.out_dir, "gen-synth", config, {"sessions.jsonl", "eval.jsonl"});
}

Checkpoint cmd_post_train(const RunConfig& in) {
    const RunConfig config = resolved(in);
    require(!config.sessions_file.empty(), "sessions_file is required");
    const fs::path out = prepare_out_dir(config);

    const std::vector<DialogueSession> sessions = load_sessions_jsonl(config.sessions_file);
    const Vocabulary vocab = build_vocab(sessions, 1, config.model.vocab_size);
    vocab.save_json((out / "vocab.json").string());

    MetricsLog log((out / "metrics.jsonl").string(), (out / "metrics.csv").string(),
                   /*fine_tune_phase=*/false);
    const Checkpoint ckpt = post_train(sessions, vocab, config.model, config.post, log.sink());
    save_checkpoint(ckpt, (out / "checkpoint").string());
    write_run_manifest(config.out_dir, "post-train", config,
                       {"checkpoint.json", "checkpoint.bin", "vocab.json", "metrics.jsonl",
                        "metrics.csv"});
    return ckpt;
}

Checkpoint cmd_fine_tune(const RunConfig& in) {
    const RunConfig config = resolved(in);
    require(!config.checkpoint.empty(), "checkpoint is required");
    require(!config.sessions_file.empty(), "sessions_file is required");
    const fs::path out = prepare_out_dir(config);

    const Checkpoint post_ckpt = load_checkpoint(config.checkpoint);
    const Vocabulary vocab = Vocabulary::load_json(vocab_path(config));
    const std::vector<DialogueSession> sessions = load_sessions_jsonl(config.sessions_file);
    vocab.save_json((out / "vocab.json").string());

    MetricsLog log((out / "metrics.jsonl").string(), (out / "metrics.csv").string(),
                   /*fine_tune_phase=*/true);
    const Checkpoint ckpt = fine_tune(post_ckpt, sessions, vocab, config.ft, log.sink());
    save_checkpoint(ckpt, (out / "checkpoint").string());
    write_run_manifest(config.out_dir, "fine-tune", config,
                       {"checkpoint.json", "checkpoint.bin", "vocab.json", "metrics.jsonl",
                        "metrics.csv"});
    return ckpt;
}

EvalReport cmd_eval(const RunConfig& in) {
    const RunConfig config = resolved(in);
    require(!config.checkpoint.empty(), "checkpoint is required");
    require(!config.eval_file.empty(), "eval_file is required");
    const fs::path out = prepare_out_dir(config);

    const Checkpoint ckpt = load_checkpoint(config.checkpoint);
    if (config.tower == "post-only" && ckpt.phase != "post_train")
        throw std::invalid_argument("--tower post-only needs a post_train checkpoint, got phase " +
                                    ckpt.phase);
    if (config.tower == "fine-tuned" && ckpt.phase != "fine_tune")
        throw std::invalid_argument("evaluating tower \"fine-tuned\" needs a fine_tune "
                                    "checkpoint; pass --tower post-only for a post_train one");
    const BiEncoder encoder = bi_encoder_from_checkpoint(ckpt);
    const Vocabulary vocab = Vocabulary::load_json(vocab_path(config));

    const EvalReport report = evaluate(encoder, config.eval_file, vocab, config.block_size,
                                       recall_ks_for(config.block_size));

    std::ofstream jf(out / "eval_report.json", std::ios::binary);
    if (!jf) throw std::runtime_error("cannot write eval_report.json");
    jf << report.to_json().dump(2) << "\n";
    jf.close();
    std::ofstream cf(out / "eval_report.csv", std::ios::binary);
    if (!cf) throw std::runtime_error("cannot write eval_report.csv");
    cf << report.csv_header() << "\n" << report.csv_row() << "\n";
    cf.close();
    write_run_manifest(config.out_dir, "eval", config, {"eval_report.json", "eval_report.csv"});
    return report;
}

std::vector<DenseVector> cmd_embed(const RunConfig& in) {
    const RunConfig config = resolved(in);
    require(!config.checkpoint.empty(), "checkpoint is required");
    require(!config.sessions_file.empty(), "sessions_file is required");
    const fs::path out = prepare_out_dir(config);

    const Checkpoint ckpt = load_checkpoint(config.checkpoint);
    const BiEncoder encoder = bi_encoder_from_checkpoint(ckpt);
    const Vocabulary vocab = Vocabulary::load_json(vocab_path(config));
    const std::vector<DialogueSession> sessions = load_sessions_jsonl(config.sessions_file);

    const int max_dec_len = encoder.ctx_tower().config.max_dec_len;
    std::vector<DenseVector> vectors;
    int next_id = 0;
    for (const DialogueSession& session : sessions) {
        for (size_t j = 1; j < session.utterances.size(); ++j) {
            DenseVector vec =
                embed(encoder, Side::kResponse,
                      assemble_decoder_input(session.utterances[j], vocab, max_dec_len));
            vec.source_id = next_id++;
            vectors.push_back(std::move(vec));
        }
    }
    if (vectors.empty()) throw std::runtime_error("no response-position utterances to embed");
    save_embeddings(vectors, (out / "embeddings").string());
    write_run_manifest(config.out_dir, "embed", config, {"embeddings.json", "embeddings.bin"});
    return vectors;
}

std::vector<std::pair<int, double>> cmd_retrieve(const RunConfig& in) {
    const RunConfig config = resolved(in);
    require(!config.checkpoint.empty(), "checkpoint is required");
    require(!config.sessions_file.empty(), "sessions_file is required");
    require(!config.embeddings.empty(), "embeddings stem is required");
    const fs::path out = prepare_out_dir(config);

    const Checkpoint ckpt = load_checkpoint(config.checkpoint);
    const BiEncoder encoder = bi_encoder_from_checkpoint(ckpt);
    const Vocabulary vocab = Vocabulary::load_json(vocab_path(config));
    const std::vector<DialogueSession> sessions = load_sessions_jsonl(config.sessions_file);
    if (static_cast<size_t>(config.query_index) >= sessions.size())
        throw std::invalid_argument("query_index " + std::to_string(config.query_index) +
                                    " outside the " + std::to_string(sessions.size()) +
                                    "-session file");

    const DialogueSession& session = sessions[static_cast<size_t>(config.query_index)];
    const std::vector<Utterance> context(session.utterances.begin(),
                                         session.utterances.end() - 1);
    const DenseVector query =
        embed(encoder, Side::kContext,
              assemble_encoder_input(context, vocab, encoder.ctx_tower().config.max_enc_len));

    const Index index = build_index(load_embeddings(config.embeddings));
    const auto hits = query_topk(index, query, config.top_k);

    std::ofstream cf(out / "hits.csv", std::ios::binary);
    if (!cf) throw std::runtime_error("cannot write hits.csv");
    cf << "rank,source_id,score\n";
    for (size_t r = 0; r < hits.size(); ++r) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%zu,%d,%.10g\n", r + 1, hits[r].first, hits[r].second);
        cf << buf;
    }
    cf.close();
    write_run_manifest(config.out_dir, "retrieve", config, {"hits.csv"});
    return hits;
}

std::vector<SweepRow> cmd_sweep(const RunConfig& in) {
    const RunConfig config = resolved(in);
    require(!config.sessions_file.empty(), "sessions_file is required");
    require(!config.eval_file.empty(), "eval_file is required");
    if (config.seeds.empty()) throw std::invalid_argument("sweep needs at least one seed");
    if (config.sweep_cells.empty() && config.sweep_layers.empty())
        throw std::invalid_argument("empty sweep grid: pass mask-rate cells or decoder depths");
    if (!config.sweep_cells.empty() && !config.sweep_layers.empty())
        throw std::invalid_argument("pass either mask-rate cells or decoder depths, not both");
    const fs::path out = prepare_out_dir(config);

    // Cell list: (enc_rate, dec_rate, n_dec_layers). Rate mode varies the
    // rates at the configured depth; layer mode varies the depth at the
    // configured rates. dec_rate 0 (or depth 0) drops the decoder entirely.
    struct Cell {
        double enc, dec;
        int layers;
    };
    std::vector<Cell> cells;
    if (!config.sweep_layers.empty()) {
        for (int layers : config.sweep_layers)
            cells.push_back({config.post.enc_mask_rate,
                             layers == 0 ? 0.0 : config.post.dec_mask_rate, layers});
    } else {
        for (const auto& [enc, dec] : config.sweep_cells)
            cells.push_back({enc, dec, dec == 0.0 ? 0 : config.model.n_dec_layers});
    }

    const std::vector<DialogueSession> sessions = load_sessions_jsonl(config.sessions_file);
    const Vocabulary vocab = build_vocab(sessions, 1, config.model.vocab_size);
    const std::vector<int> ks = recall_ks_for(config.block_size);

    std::vector<SweepRow> rows;
    for (const Cell& cell : cells) {
        for (uint64_t seed : config.seeds) {
            ModelConfig mc = config.model;
            mc.n_dec_layers = cell.layers;
            TrainConfig ptc = config.post;
            ptc.enc_mask_rate = cell.enc;
            ptc.dec_mask_rate = cell.dec;
            ptc.seed = seed;
            TrainConfig ftc = config.ft;
            ftc.seed = derive_seed(seed, "fine-tune");

            const Checkpoint post_ckpt = post_train(sessions, vocab, mc, ptc);
            const Checkpoint ft_ckpt = fine_tune(post_ckpt, sessions, vocab, ftc);
            SweepRow row;
            row.enc_rate = cell.enc;
            row.dec_rate = cell.dec;
            row.n_dec_layers = cell.layers;
            row.seed = seed;
            row.report = evaluate(bi_encoder_from_checkpoint(ft_ckpt), config.eval_file, vocab,
                                  config.block_size, ks);
            rows.push_back(std::move(row));
        }
    }

    std::ofstream cf(out / "sweep.csv", std::ios::binary);
    if (!cf) throw std::runtime_error("cannot write sweep.csv");
    cf << "enc_rate,dec_rate,n_dec_layers,seed," << rows.front().report.csv_header() << "\n";
    for (const SweepRow& row : rows) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%.10g,%.10g,%d,%llu,", row.enc_rate, row.dec_rate,
                      row.n_dec_layers, static_cast<unsigned long long>(row.seed));
        cf << buf << row.report.csv_row() << "\n";
    }
    cf.close();
    write_run_manifest(config.out_dir, "sweep", config, {"sweep.csv"});
    return rows;
}

}  // namespace dialmae
