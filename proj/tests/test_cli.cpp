// End-to-end tests of the dialmae binary: subcommand wiring, config
// layering, exit codes. Each case shells out to the real executable.
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <doctest.h>
#include <json.hpp>

namespace {

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() / ("dialmae_cli_" + tag);
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string sub(const std::string& name) const { return (path / name).string(); }
};

struct CmdResult {
    int exit_code;
    std::string output;  // stdout and stderr interleaved
};

CmdResult run(const std::string& args) {
    const std::string cmd = std::string(DIALMAE_BIN) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::string output;
    std::array<char, 4096> buf;
    size_t got;
    while ((got = fread(buf.data(), 1, buf.size(), pipe)) > 0) output.append(buf.data(), got);
    const int status = pclose(pipe);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, output};
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// A config small enough that post-train + fine-tune finish in a second or two.
std::string write_tiny_config(const TempDir& dir) {
    const std::string path = dir.sub("tiny.json");
    std::ofstream out(path);
    out << R"({
      "model": {"vocab_size": 96, "hidden_dim": 16, "n_heads": 2, "ffn_dim": 32,
                "n_enc_layers": 1, "n_dec_layers": 1, "max_enc_len": 32, "max_dec_len": 16},
      "post_train": {"max_steps": 8, "batch_size": 4, "num_pairs_per_session": 2},
      "fine_tune": {"max_steps": 6, "batch_size": 4}
    })";
    return path;
}

std::string gen_corpus(const TempDir& dir, const std::string& out_name) {
    const std::string out = dir.sub(out_name);
    const CmdResult r = run("gen-synth --out-dir " + out +
                            " --seed 7 --n-sessions 14 --n-eval-sessions 4"
                            " --turns 5 --vocab-size 96");
    REQUIRE(r.exit_code == 0);
    return out;
}

}  // namespace

TEST_CASE("--help exits 0 and lists the subcommands") {
    const CmdResult r = run("--help");
    CHECK(r.exit_code == 0);
    for (const char* sub :
         {"gen-synth", "post-train", "fine-tune", "eval", "embed", "retrieve", "sweep"})
        CHECK(r.output.find(sub) != std::string::npos);
}

TEST_CASE("subcommand --help lists its flags") {
    const CmdResult r = run("post-train --help");
    CHECK(r.exit_code == 0);
    for (const char* flag : {"--config", "--preset", "--seed", "--out-dir", "--sessions",
                             "--steps", "--enc-mask", "--dec-mask", "--dec-layers",
                             "--bert-masking"})
        CHECK(r.output.find(flag) != std::string::npos);
}

TEST_CASE("bad invocations exit 1") {
    CHECK(run("").exit_code == 1);                   // missing subcommand
    CHECK(run("no-such-command").exit_code == 1);    // unknown subcommand
    CHECK(run("gen-synth").exit_code == 1);          // missing required --out-dir
    TempDir dir("badflag");
    const CmdResult r = run("gen-synth --out-dir " + dir.sub("run") + " --bogus 3");
    CHECK(r.exit_code == 1);
}

TEST_CASE("validation failures exit 1, runtime failures exit 2") {
    TempDir dir("codes");
    SUBCASE("unknown preset") {
        const CmdResult r = run("gen-synth --out-dir " + dir.sub("run") + " --preset hpc");
        CHECK(r.exit_code == 1);
        CHECK(r.output.find("unknown preset") != std::string::npos);
    }
    SUBCASE("unknown config key") {
        const std::string cfg = dir.sub("bad.json");
        std::ofstream(cfg) << R"({"learning_rate": 0.1})";
        const CmdResult r = run("gen-synth --out-dir " + dir.sub("run") + " --config " + cfg);
        CHECK(r.exit_code == 1);
        CHECK(r.output.find("unknown config key") != std::string::npos);
    }
    SUBCASE("per-stage seed in config") {
        const std::string cfg = dir.sub("seedy.json");
        std::ofstream(cfg) << R"({"post_train": {"seed": 9}})";
        const CmdResult r = run("gen-synth --out-dir " + dir.sub("run") + " --config " + cfg);
        CHECK(r.exit_code == 1);
        CHECK(r.output.find("master") != std::string::npos);
    }
    SUBCASE("missing checkpoint file") {
        const CmdResult r = run("eval --out-dir " + dir.sub("run") + " --checkpoint " +
                                dir.sub("nope") + " --eval-file " + dir.sub("nope.jsonl"));
        CHECK(r.exit_code == 2);
    }
}

TEST_CASE("gen-synth is deterministic and refuses to overwrite without --force") {
    TempDir dir("gen");
    const std::string a = gen_corpus(dir, "a");
    const std::string b = gen_corpus(dir, "b");
    CHECK(slurp(a + "/sessions.jsonl") == slurp(b + "/sessions.jsonl"));
    CHECK(slurp(a + "/eval.jsonl") == slurp(b + "/eval.jsonl"));

    const std::string again = "gen-synth --out-dir " + a +
                              " --seed 7 --n-sessions 14 --n-eval-sessions 4"
                              " --turns 5 --vocab-size 96";
    const CmdResult refused = run(again);
    CHECK(refused.exit_code == 2);
    CHECK(refused.output.find("--force") != std::string::npos);
    CHECK(run(again + " --force").exit_code == 0);
}

TEST_CASE("full pipeline through the binary: post-train, fine-tune, eval, embed, retrieve") {
    TempDir dir("chain");
    const std::string cfg = write_tiny_config(dir);
    const std::string data = gen_corpus(dir, "data");
    const std::string post = dir.sub("post");
    const std::string ft = dir.sub("ft");

    CHECK(run("post-train --config " + cfg + " --seed 7 --out-dir " + post + " --sessions " +
              data + "/sessions.jsonl")
              .exit_code == 0);
    CHECK(std::filesystem::exists(post + "/checkpoint.bin"));
    CHECK(std::filesystem::exists(post + "/metrics.csv"));

    CHECK(run("fine-tune --config " + cfg + " --seed 7 --out-dir " + ft + " --checkpoint " +
              post + "/checkpoint --sessions " + data + "/sessions.jsonl")
              .exit_code == 0);

    const CmdResult ev = run("eval --config " + cfg + " --seed 7 --out-dir " + ft +
                             " --checkpoint " + ft + "/checkpoint --eval-file " + data +
                             "/eval.jsonl");
    CHECK(ev.exit_code == 0);
    const nlohmann::json report = nlohmann::json::parse(ev.output);
    CHECK(report.at("n_queries").get<int>() == 4);
    CHECK(report.contains("R@1"));
    CHECK(report.contains("R@5"));

    CHECK(run("embed --config " + cfg + " --seed 7 --out-dir " + ft + " --checkpoint " + ft +
              "/checkpoint --sessions " + data + "/sessions.jsonl")
              .exit_code == 0);

    const CmdResult hits = run("retrieve --config " + cfg + " --seed 7 --out-dir " + ft +
                               " --checkpoint " + ft + "/checkpoint --sessions " + data +
                               "/sessions.jsonl --embeddings " + ft +
                               "/embeddings -k 3 --query-index 2");
    CHECK(hits.exit_code == 0);
    int rows = 0;
    for (char c : hits.output) rows += (c == '\n');
    CHECK(rows == 3);
    CHECK(hits.output.rfind("1\t", 0) == 0);  // rank column starts at 1
}

TEST_CASE("flag beats config file beats preset") {
    TempDir dir("layers");
    // The config file overrides the preset's step count; the flag overrides both.
    const std::string cfg = dir.sub("override.json");
    std::ofstream(cfg) << R"({"preset": "ubuntu-style", "post_train": {"max_steps": 8,
        "batch_size": 4, "num_pairs_per_session": 2},
        "model": {"vocab_size": 96, "hidden_dim": 16, "n_heads": 2, "ffn_dim": 32,
                  "n_enc_layers": 1, "n_dec_layers": 1, "max_enc_len": 32, "max_dec_len": 16}})";
    const std::string data = gen_corpus(dir, "data");
    const std::string out = dir.sub("run");
    CHECK(run("post-train --config " + cfg + " --out-dir " + out + " --sessions " + data +
              "/sessions.jsonl --steps 5 --enc-mask 0.45")
              .exit_code == 0);

    const nlohmann::json manifest = nlohmann::json::parse(slurp(out + "/manifest.json"));
    const nlohmann::json& post = manifest.at("config").at("post_train");
    CHECK(post.at("max_steps").get<int>() == 5);          // flag wins over file's 8
    CHECK(post.at("enc_mask_rate").get<double>() == 0.45);  // flag wins over preset's 0.30
    CHECK(post.at("dec_mask_rate").get<double>() == 0.75);  // ubuntu-style preset survives

    // Last metrics row confirms the flag-set step count actually ran.
    std::ifstream metrics(out + "/metrics.csv");
    std::string line, last;
    std::getline(metrics, line);  // header
    while (std::getline(metrics, line))
        if (!line.empty()) last = line;
    CHECK(last.rfind("5,", 0) == 0);  // steps are logged 1-based; 5 steps end at step 5
}

TEST_CASE("--preset flag wins over the file's preset key") {
    TempDir dir("preset");
    const std::string cfg = dir.sub("eco.json");
    std::ofstream(cfg) << R"({"preset": "ecommerce-style"})";
    const std::string out = dir.sub("run");
    CHECK(run("gen-synth --config " + cfg + " --preset ubuntu-style --out-dir " + out)
              .exit_code == 0);
    const nlohmann::json manifest = nlohmann::json::parse(slurp(out + "/manifest.json"));
    // ubuntu-style keeps the 0.75 decoder mask rate; ecommerce-style would be 0.45.
    CHECK(manifest.at("config").at("post_train").at("dec_mask_rate").get<double>() == 0.75);
}

TEST_CASE("sweep writes one csv row per cell per seed") {
    TempDir dir("sweep");
    const std::string cfg = write_tiny_config(dir);
    const std::string data = gen_corpus(dir, "data");
    const std::string out = dir.sub("sw");
    const CmdResult r = run("sweep --config " + cfg + " --seed 7 --out-dir " + out +
                            " --sessions " + data + "/sessions.jsonl --eval-file " + data +
                            "/eval.jsonl --cells 0.15:0.15,0.3:0.75 --seeds 1,2 --steps 4"
                            " --ft-steps 3");
    CHECK(r.exit_code == 0);
    std::ifstream csv(out + "/sweep.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line == "enc_rate,dec_rate,n_dec_layers,seed,R@1,R@2,R@5,n_queries");
    int rows = 0;
    while (std::getline(csv, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 4);
}
