#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "dialmae/retrieval.hpp"
#include "support/oracles.hpp"

using namespace dialmae;

namespace {

DenseVector dv(std::vector<double> values, int source_id = 0) {
    return DenseVector{std::move(values), source_id};
}

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.vocab_size = 64;
    cfg.hidden_dim = 16;
    cfg.n_heads = 2;
    cfg.n_enc_layers = 1;
    cfg.n_dec_layers = 1;
    cfg.ffn_dim = 32;
    cfg.max_enc_len = 32;
    cfg.max_dec_len = 16;
    return cfg;
}

BiEncoder random_bi_encoder(uint64_t seed, bool tied = true) {
    const ModelConfig cfg = small_config();
    BiEncoder be;
    be.tied = tied;
    be.ctx = ModelParams{cfg, build_param_store(cfg, /*encoder_only=*/true)};
    Rng rng(seed);
    for (double& w : be.ctx.store.flat()) w = rng.normal() * 0.05;
    if (!tied) {
        be.resp = ModelParams{cfg, build_param_store(cfg, true)};
        for (double& w : be.resp.store.flat()) w = rng.normal() * 0.05;
    }
    return be;
}

// A block of 10 labeled examples sharing one context, positive at the given
// position, all candidate texts distinct.
std::vector<LabeledExample> make_block(int block_id, int positive_pos) {
    std::vector<LabeledExample> block;
    const std::vector<Utterance> context{{"hello there b" + std::to_string(block_id), 0},
                                         {"how are you", 1}};
    for (int c = 0; c < 10; ++c) {
        LabeledExample ex;
        ex.context = context;
        ex.response = {"candidate b" + std::to_string(block_id) + " c" + std::to_string(c), 1};
        ex.label = c == positive_pos ? 1 : 0;
        block.push_back(std::move(ex));
    }
    return block;
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() / ("dialmae_retr_" + tag);
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

Vocabulary eval_vocab(const std::vector<LabeledExample>& examples) {
    // Tokens come from the corpus tokenizer; build the vocabulary from a
    // synthetic session holding every utterance.
    DialogueSession all;
    for (const LabeledExample& ex : examples) {
        for (const Utterance& u : ex.context) all.utterances.push_back(u);
        all.utterances.push_back(ex.response);
    }
    return build_vocab({all}, 1, 4096);
}

}  // namespace

TEST_CASE("embedding the same input twice is identical and has hidden_dim values") {
    const BiEncoder be = random_bi_encoder(1);
    const TokenSeq input{{2, 8, 9, 3, 10, 11}, 6};
    const DenseVector a = embed(be, Side::kContext, input);
    const DenseVector b = embed(be, Side::kContext, input);
    CHECK(a.values.size() == static_cast<size_t>(be.ctx.config.hidden_dim));
    CHECK(a.values == b.values);
    // Tied towers agree on every side.
    const DenseVector r = embed(be, Side::kResponse, input);
    CHECK(a.values == r.values);
}

TEST_CASE("untied towers desynchronize after fine-tuning") {
    const auto sessions = gen_synthetic_corpus(50, 10, 80, 6);
    const Vocabulary vocab = build_vocab(sessions, 1, 64);
    TrainConfig tc;
    tc.max_steps = 5;
    tc.batch_size = 4;
    tc.num_pairs_per_session = 2;
    tc.base_lr = 1e-3;
    const Checkpoint post = post_train(sessions, vocab, small_config(), tc);
    const Checkpoint ft = fine_tune(post, sessions, vocab, tc);

    const BiEncoder be = bi_encoder_from_checkpoint(ft);
    REQUIRE_FALSE(be.tied);
    const TokenSeq input{{2, 8, 9, 3, 10, 11}, 6};
    const DenseVector c = embed(be, Side::kContext, input);
    const DenseVector r = embed(be, Side::kResponse, input);
    CHECK(c.values != r.values);
}

TEST_CASE("score is the dot product with symmetry and dim checking") {
    CHECK(score(dv({1.0, 0.0}), dv({0.0, 1.0})) == 0.0);
    CHECK(score(dv({1.0, 2.0}), dv({3.0, 4.0})) == 11.0);
    const DenseVector a = dv({0.5, -1.5, 2.0});
    const DenseVector b = dv({-0.25, 0.75, 1.0});
    CHECK(score(a, b) == score(b, a));
    CHECK_THROWS_AS(score(dv({1.0}), dv({1.0, 2.0})), std::invalid_argument);
}

TEST_CASE("rank_candidates sorts by descending score with index tie-breaks") {
    const DenseVector query = dv({1.0});
    CHECK(rank_candidates(query, {dv({0.1}), dv({0.9}), dv({0.5})}) ==
          std::vector<int>{1, 2, 0});
    CHECK(rank_candidates(query, {dv({0.4}), dv({0.4}), dv({0.4})}) ==
          std::vector<int>{0, 1, 2});
    CHECK_THROWS_AS(rank_candidates(query, {}), std::invalid_argument);
}

TEST_CASE("ranking is invariant to a shared additive shift and to positive scaling") {
    Rng rng(3);
    const int dim = 4, n = 8;
    std::vector<double> qv(dim);
    for (double& x : qv) x = rng.normal();
    const DenseVector query = dv(qv);
    std::vector<DenseVector> cands;
    for (int i = 0; i < n; ++i) {
        std::vector<double> v(dim);
        for (double& x : v) x = rng.normal();
        cands.push_back(dv(std::move(v), i));
    }
    const std::vector<int> base = rank_candidates(query, cands);

    // Bijectivity: the output is a permutation of 0..n-1.
    std::vector<int> sorted = base;
    std::sort(sorted.begin(), sorted.end());
    std::vector<int> iota(n);
    std::iota(iota.begin(), iota.end(), 0);
    CHECK(sorted == iota);

    // Append one component shared by every candidate: every score shifts by
    // the same amount, so the order is unchanged.
    DenseVector query2 = query;
    query2.values.push_back(0.37);
    std::vector<DenseVector> shifted = cands;
    for (DenseVector& v : shifted) v.values.push_back(2.5);
    CHECK(rank_candidates(query2, shifted) == base);

    // Scaling every candidate by the same positive constant does not reorder.
    std::vector<DenseVector> scaled = cands;
    for (DenseVector& v : scaled)
        for (double& x : v.values) x *= 3.0;
    CHECK(rank_candidates(query, scaled) == base);
}

namespace {

// A ranked record with the given positive rank out of n candidates; vectors
// are placeholders since recall_at_k only reads labels and ranks.
QueryRecord ranked_record(int rank, int n = 10) {
    QueryRecord rec;
    for (int c = 0; c < n; ++c) rec.candidates.emplace_back(DenseVector{}, c == 0 ? 1 : 0);
    rec.rank_of_positive = rank;
    return rec;
}

}  // namespace

TEST_CASE("recall_at_k counts queries whose positive lands in the top k") {
    std::vector<QueryRecord> one{ranked_record(1)};
    CHECK(recall_at_k(one, 1) == 1.0);

    std::vector<QueryRecord> two{ranked_record(1), ranked_record(3)};
    CHECK(recall_at_k(two, 2) == 0.5);
    CHECK(recall_at_k(two, 3) == 1.0);

    CHECK_THROWS_AS(recall_at_k(two, 0), std::invalid_argument);
    std::vector<QueryRecord> unranked{ranked_record(0)};
    CHECK_THROWS_AS(recall_at_k(unranked, 1), std::invalid_argument);

    std::vector<QueryRecord> bad{ranked_record(1)};
    bad[0].candidates[3].second = 1;  // second positive
    CHECK_THROWS_WITH_AS(recall_at_k(bad, 1),
                         "query record 0 has 2 positive candidates; expected 1",
                         std::invalid_argument);
}

TEST_CASE("recall at 1 over uniformly random scores concentrates near 1/10") {
    Rng rng(20260823);
    const int n_queries = 10000, n = 10;
    std::vector<QueryRecord> records;
    records.reserve(n_queries);
    for (int q = 0; q < n_queries; ++q) {
        std::vector<double> scores(n);
        for (double& s : scores) s = rng.uniform();
        QueryRecord rec = ranked_record(0, n);
        rec.rank_of_positive = oracle::naive_rank_of(scores, 0);
        records.push_back(std::move(rec));
    }
    CHECK(recall_at_k(records, 1) == doctest::Approx(0.1).epsilon(0.1));  // +-0.01 absolute
}

TEST_CASE("an oracle scorer that reproduces the label ranks every positive first") {
    // Candidate vectors equal to their label with a unit query: score = label.
    std::vector<QueryRecord> records;
    for (int q = 0; q < 7; ++q) {
        QueryRecord rec;
        rec.context_vec = dv({1.0});
        for (int c = 0; c < 10; ++c) {
            const int label = c == (q % 10) ? 1 : 0;
            rec.candidates.emplace_back(dv({static_cast<double>(label)}, c), label);
        }
        records.push_back(std::move(rec));
    }
    const EvalReport report = aggregate_report(records);
    CHECK(report.r_at.at(1) == 1.0);
    CHECK(report.r_at.at(2) == 1.0);
    CHECK(report.r_at.at(5) == 1.0);
    CHECK(report.n_queries == 7);
    CHECK(report.n_candidates_per_query == 10);
}

TEST_CASE("aggregated metrics match an independent recomputation from stored scores") {
    Rng rng(55);
    std::vector<QueryRecord> records;
    for (int q = 0; q < 40; ++q) {
        QueryRecord rec;
        std::vector<double> qv(6);
        for (double& x : qv) x = rng.normal();
        rec.context_vec = dv(std::move(qv));
        const int pos = static_cast<int>(rng.uniform_below(10));
        for (int c = 0; c < 10; ++c) {
            std::vector<double> v(6);
            for (double& x : v) x = rng.normal();
            rec.candidates.emplace_back(dv(std::move(v), c), c == pos ? 1 : 0);
        }
        records.push_back(std::move(rec));
    }
    const EvalReport report = aggregate_report(records, {1, 2, 5, 10});

    for (int k : {1, 2, 5, 10}) {
        int hits = 0;
        for (const QueryRecord& rec : records) {
            int pos = -1;
            for (size_t c = 0; c < rec.candidates.size(); ++c)
                if (rec.candidates[c].second == 1) pos = static_cast<int>(c);
            REQUIRE(rec.scores.size() == 10);
            if (oracle::naive_rank_of(rec.scores, pos) <= k) ++hits;
        }
        CHECK(report.r_at.at(k) == static_cast<double>(hits) / 40.0);
    }
    // R_n@k is non-decreasing in k and R_n@n = 1.
    CHECK(report.r_at.at(1) <= report.r_at.at(2));
    CHECK(report.r_at.at(2) <= report.r_at.at(5));
    CHECK(report.r_at.at(5) <= report.r_at.at(10));
    CHECK(report.r_at.at(10) == 1.0);
}

TEST_CASE("eval report serializes to the fixed json and csv shapes") {
    EvalReport report;
    report.r_at = {{1, 0.5}, {2, 0.75}, {5, 1.0}};
    report.n_queries = 4;
    report.n_candidates_per_query = 10;
    const nlohmann::json j = report.to_json();
    CHECK(j.size() == 4);
    CHECK(j.at("R@1").get<double>() == 0.5);
    CHECK(j.at("R@2").get<double>() == 0.75);
    CHECK(j.at("R@5").get<double>() == 1.0);
    CHECK(j.at("n_queries").get<int>() == 4);
    CHECK(report.csv_header() == "R@1,R@2,R@5,n_queries");
    CHECK(report.csv_row() == "0.5,0.75,1,4");
}

TEST_CASE("file evaluation embeds each block once and is invariant to in-block shuffles") {
    TempDir dir("eval");
    std::vector<LabeledExample> examples;
    for (int b = 0; b < 6; ++b) {
        const auto block = make_block(b, b % 10);
        examples.insert(examples.end(), block.begin(), block.end());
    }
    const Vocabulary vocab = eval_vocab(examples);
    const std::string path = (dir.path / "eval.jsonl").string();
    write_eval_jsonl(path, examples);

    const BiEncoder be = random_bi_encoder(77);
    const EvalReport report = evaluate(be, path, vocab);
    CHECK(report.n_queries == 6);
    CHECK(report.n_candidates_per_query == 10);
    CHECK(report.r_at.at(1) <= report.r_at.at(2));
    CHECK(report.r_at.at(2) <= report.r_at.at(5));

    // Shuffle candidates inside each block; labels travel with their rows.
    Rng rng(9);
    std::vector<LabeledExample> shuffled = examples;
    for (int b = 0; b < 6; ++b) {
        std::vector<size_t> order(10);
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        for (int c = 0; c < 10; ++c) shuffled[b * 10 + c] = examples[b * 10 + order[c]];
    }
    const std::string path2 = (dir.path / "eval_shuffled.jsonl").string();
    write_eval_jsonl(path2, shuffled);
    const EvalReport report2 = evaluate(be, path2, vocab);
    CHECK(report2.r_at == report.r_at);

    // R_n@n = 1 on a well-formed set.
    const EvalReport full = evaluate(be, path, vocab, 10, {1, 2, 5, 10});
    CHECK(full.r_at.at(10) == 1.0);
}

TEST_CASE("malformed eval blocks are rejected with their block index") {
    TempDir dir("badeval");
    const BiEncoder be = random_bi_encoder(78);

    auto write_and_eval = [&](const std::vector<LabeledExample>& examples,
                              const std::string& name) {
        const std::string path = (dir.path / name).string();
        write_eval_jsonl(path, examples);
        return evaluate(be, path, eval_vocab(examples));
    };

    std::vector<LabeledExample> two_pos;
    for (int b = 0; b < 2; ++b) {
        auto block = make_block(b, 0);
        if (b == 1) block[4].label = 1;  // second positive in block 1
        two_pos.insert(two_pos.end(), block.begin(), block.end());
    }
    CHECK_THROWS_WITH_AS(write_and_eval(two_pos, "two_pos.jsonl"),
                         "block 1 has 2 positive labels; expected 1", std::invalid_argument);

    auto ragged = make_block(0, 0);
    ragged.pop_back();
    CHECK_THROWS_AS(write_and_eval(ragged, "ragged.jsonl"), std::invalid_argument);

    auto mixed = make_block(0, 0);
    mixed[3].context[0].text = "a different context";
    CHECK_THROWS_WITH_AS(write_and_eval(mixed, "mixed.jsonl"),
                         "block 0: candidates do not share one context", std::invalid_argument);
}

TEST_CASE("brute-force index returns exact top-k in deterministic order") {
    // Pool of one: always returned.
    const Index single = build_index({dv({0.5, 0.5}, 42)});
    const auto hit = query_topk(single, dv({1.0, 0.0}), 1);
    REQUIRE(hit.size() == 1);
    CHECK(hit[0].first == 42);
    CHECK(hit[0].second == 0.5);

    // Orthogonal pool: the matching unit vector ranks first.
    const Index ortho = build_index({dv({1.0, 0.0, 0.0}, 0), dv({0.0, 1.0, 0.0}, 1),
                                     dv({0.0, 0.0, 1.0}, 2)});
    CHECK(query_topk(ortho, dv({0.0, 1.0, 0.0}), 1)[0].first == 1);

    CHECK_THROWS_AS(query_topk(ortho, dv({1.0, 0.0, 0.0}), 4), std::invalid_argument);
    CHECK_THROWS_AS(build_index({}), std::invalid_argument);
    CHECK_THROWS_AS(build_index({dv({1.0}), dv({1.0, 2.0})}), std::invalid_argument);
}

TEST_CASE("query_topk agrees with a full ranking and ignores insertion order") {
    Rng rng(8);
    const int n = 12, dim = 5;
    std::vector<DenseVector> pool;
    for (int i = 0; i < n; ++i) {
        std::vector<double> v(dim);
        for (double& x : v) x = rng.normal();
        pool.push_back(dv(std::move(v), i));
    }
    std::vector<double> qv(dim);
    for (double& x : qv) x = rng.normal();
    const DenseVector query = dv(qv);

    // source_id == insertion index here, so the index tie rule and the
    // rank_candidates tie rule coincide.
    const std::vector<int> full = rank_candidates(query, pool);
    const Index index = build_index(pool);
    for (int k : {1, 3, n}) {
        const auto top = query_topk(index, query, k);
        REQUIRE(top.size() == static_cast<size_t>(k));
        for (int i = 0; i < k; ++i) CHECK(top[i].first == full[static_cast<size_t>(i)]);
    }

    std::vector<DenseVector> reversed(pool.rbegin(), pool.rend());
    const auto a = query_topk(index, query, 5);
    const auto b = query_topk(build_index(reversed), query, 5);
    CHECK(a == b);
}

TEST_CASE("embedding dumps round-trip bitwise through manifest and blob") {
    TempDir dir("embdump");
    Rng rng(14);
    std::vector<DenseVector> vectors;
    for (int i = 0; i < 9; ++i) {
        std::vector<double> v(7);
        for (double& x : v) x = rng.normal();
        vectors.push_back(dv(std::move(v), 100 + i));
    }
    const std::string stem = (dir.path / "emb").string();
    save_embeddings(vectors, stem);
    const auto back = load_embeddings(stem);
    REQUIRE(back.size() == vectors.size());
    for (size_t i = 0; i < vectors.size(); ++i) {
        CHECK(back[i].source_id == vectors[i].source_id);
        CHECK(back[i].values == vectors[i].values);
    }

    const nlohmann::json manifest =
        nlohmann::json::parse(std::ifstream(stem + ".json"));
    CHECK(manifest.at("format").get<std::string>() == "dialmae-embeddings");
    CHECK(manifest.at("rows").size() == 9);
    CHECK(manifest.at("rows")[1].at("byte_offset").get<size_t>() == 7 * sizeof(double));

    CHECK_THROWS_AS(load_embeddings((dir.path / "missing").string()), std::runtime_error);
    std::filesystem::resize_file(stem + ".bin", 16);
    CHECK_THROWS_AS(load_embeddings(stem), std::runtime_error);
    CHECK_THROWS_AS(save_embeddings({}, stem), std::invalid_argument);
}
