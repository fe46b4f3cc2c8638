#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "dialmae/checkpoint.hpp"

using namespace dialmae;

namespace {

std::string stem_in_temp(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Checkpoint sample_checkpoint() {
    ModelConfig cfg;
    cfg.vocab_size = 24;
    cfg.hidden_dim = 8;
    cfg.n_heads = 2;
    cfg.ffn_dim = 16;
    cfg.n_enc_layers = 2;
    cfg.n_dec_layers = 1;
    cfg.max_enc_len = 12;
    cfg.max_dec_len = 8;

    Checkpoint ckpt;
    ckpt.phase = "post_train";
    ckpt.config = cfg;
    ckpt.seed = 42;
    ckpt.step = 137;
    ckpt.tied_towers = false;

    ModelParams params = init_params(cfg, 7);
    ckpt.groups.emplace_back("model", params.store);
    ParamStore m = params.store.zeros_like();
    ParamStore v = params.store.zeros_like();
    Rng rng(8);
    for (double& x : m.flat()) x = rng.normal() * 1e-3;
    for (double& x : v.flat()) x = rng.uniform() * 1e-6;
    ckpt.groups.emplace_back("opt.m", std::move(m));
    ckpt.groups.emplace_back("opt.v", std::move(v));
    return ckpt;
}

}  // namespace

TEST_CASE("checkpoint round-trip is byte-exact") {
    const Checkpoint ckpt = sample_checkpoint();
    const std::string stem1 = stem_in_temp("dialmae_ckpt_a");
    save_checkpoint(ckpt, stem1);

    const Checkpoint back = load_checkpoint(stem1);
    CHECK(back.phase == ckpt.phase);
    CHECK(back.config == ckpt.config);
    CHECK(back.seed == ckpt.seed);
    CHECK(back.step == ckpt.step);
    CHECK(back.tied_towers == ckpt.tied_towers);
    REQUIRE(back.groups.size() == ckpt.groups.size());
    for (size_t g = 0; g < back.groups.size(); ++g) {
        CHECK(back.groups[g].first == ckpt.groups[g].first);
        CHECK(back.groups[g].second.flat() == ckpt.groups[g].second.flat());
        REQUIRE(back.groups[g].second.specs().size() == ckpt.groups[g].second.specs().size());
    }

    const std::string stem2 = stem_in_temp("dialmae_ckpt_b");
    save_checkpoint(back, stem2);
    CHECK(file_bytes(stem1 + ".json") == file_bytes(stem2 + ".json"));
    CHECK(file_bytes(stem1 + ".bin") == file_bytes(stem2 + ".bin"));
}

TEST_CASE("group lookup") {
    const Checkpoint ckpt = sample_checkpoint();
    CHECK(ckpt.has_group("model"));
    CHECK(ckpt.has_group("opt.m"));
    CHECK_FALSE(ckpt.has_group("opt.z"));
    CHECK(ckpt.group("model").has("tok_emb"));
    CHECK_THROWS_AS(ckpt.group("opt.z"), std::invalid_argument);
}

TEST_CASE("encoder outputs survive a round-trip unchanged") {
    const Checkpoint ckpt = sample_checkpoint();
    const std::string stem = stem_in_temp("dialmae_ckpt_c");
    save_checkpoint(ckpt, stem);
    const Checkpoint back = load_checkpoint(stem);

    TokenSeq seq;
    seq.ids = {Vocabulary::kCls, 7, 9, 11, Vocabulary::kSeg, Vocabulary::kPad};
    seq.attention_len = 5;
    const ModelParams before{ckpt.config, ckpt.group("model")};
    const ModelParams after{back.config, back.group("model")};
    CHECK(encode(before, seq).hidden == encode(after, seq).hidden);
}

TEST_CASE("save validates the phase tag") {
    Checkpoint ckpt = sample_checkpoint();
    ckpt.phase = "pretrain";
    CHECK_THROWS_AS(save_checkpoint(ckpt, stem_in_temp("dialmae_ckpt_bad")), std::invalid_argument);
}

TEST_CASE("load rejects missing or corrupted files") {
    CHECK_THROWS_AS(load_checkpoint(stem_in_temp("dialmae_ckpt_missing")), std::runtime_error);

    const Checkpoint ckpt = sample_checkpoint();
    const std::string stem = stem_in_temp("dialmae_ckpt_d");
    save_checkpoint(ckpt, stem);

    {  // not a manifest
        std::ofstream out(stem + ".json", std::ios::binary);
        out << "{\"format\":\"something-else\",\"version\":1}\n";
    }
    CHECK_THROWS_AS(load_checkpoint(stem), std::runtime_error);

    save_checkpoint(ckpt, stem);
    {  // truncated blob
        const std::string blob = file_bytes(stem + ".bin");
        std::ofstream out(stem + ".bin", std::ios::binary);
        out << blob.substr(0, blob.size() / 2);
    }
    CHECK_THROWS_AS(load_checkpoint(stem), std::runtime_error);
}
