#include "dialmae/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "dialmae/checkpoint.hpp"

namespace dialmae {

using nlohmann::json;

DenseVector embed(const BiEncoder& encoder, Side side, const TokenSeq& input) {
    const ModelParams& tower = side == Side::kContext ? encoder.ctx_tower() : encoder.resp_tower();
    if (tower.store.total_size() == 0) throw std::invalid_argument("embed: tower has no parameters");
    DenseVector out;
    out.values = encode(tower, input).cls_embedding;
    return out;
}

double score(const DenseVector& c_vec, const DenseVector& r_vec) {
    if (c_vec.values.size() != r_vec.values.size())
        throw std::invalid_argument("score: dimension mismatch (" +
                                    std::to_string(c_vec.values.size()) + " vs " +
                                    std::to_string(r_vec.values.size()) + ")");
    double s = 0.0;
    for (size_t i = 0; i < c_vec.values.size(); ++i) s += c_vec.values[i] * r_vec.values[i];
    return s;
}

std::vector<int> rank_candidates(const DenseVector& c_vec,
                                 const std::vector<DenseVector>& candidates) {
    if (candidates.empty()) throw std::invalid_argument("rank_candidates: empty candidate list");
    std::vector<double> scores(candidates.size());
    for (size_t i = 0; i < candidates.size(); ++i) scores[i] = score(c_vec, candidates[i]);
    std::vector<int> order(candidates.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;  // ties by ascending original index
    });
    return order;
}

namespace {

int positive_index(const QueryRecord& rec, size_t record_idx) {
    int pos = -1, count = 0;
    for (size_t c = 0; c < rec.candidates.size(); ++c) {
        if (rec.candidates[c].second == 1) {
            ++count;
            pos = static_cast<int>(c);
        }
    }
    if (count != 1)
        throw std::invalid_argument("query record " + std::to_string(record_idx) + " has " +
                                    std::to_string(count) + " positive candidates; expected 1");
    return pos;
}

}  // namespace

double recall_at_k(const std::vector<QueryRecord>& records, int k) {
    if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
    if (records.empty()) throw std::invalid_argument("recall_at_k: no query records");
    int hits = 0;
    for (size_t i = 0; i < records.size(); ++i) {
        positive_index(records[i], i);
        if (records[i].rank_of_positive < 1)
            throw std::invalid_argument("query record " + std::to_string(i) +
                                        " has not been ranked");
        if (records[i].rank_of_positive <= k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(records.size());
}

json EvalReport::to_json() const {
    json j;
    for (const auto& [k, v] : r_at) j["R@" + std::to_string(k)] = v;
    j["n_queries"] = n_queries;
    return j;
}

std::string EvalReport::csv_header() const {
    std::string h;
    for (const auto& [k, v] : r_at) {
        (void)v;
        h += "R@" + std::to_string(k) + ",";
    }
    h += "n_queries";
    return h;
}

std::string EvalReport::csv_row() const {
    std::string row;
    char buf[64];
    for (const auto& [k, v] : r_at) {
        (void)k;
        std::snprintf(buf, sizeof(buf), "%.10g,", v);
        row += buf;
    }
    row += std::to_string(n_queries);
    return row;
}

EvalReport aggregate_report(std::vector<QueryRecord>& records, const std::vector<int>& ks) {
    if (records.empty()) throw std::invalid_argument("aggregate_report: no query records");
    const size_t n = records[0].candidates.size();
    for (size_t i = 0; i < records.size(); ++i) {
        QueryRecord& rec = records[i];
        if (rec.candidates.size() != n)
            throw std::invalid_argument("query record " + std::to_string(i) +
                                        " has a different candidate-pool size");
        const int pos = positive_index(rec, i);

        std::vector<DenseVector> cand_vecs;
        cand_vecs.reserve(n);
        for (const auto& [vec, label] : rec.candidates) {
            (void)label;
            cand_vecs.push_back(vec);
        }
        rec.scores.resize(n);
        for (size_t c = 0; c < n; ++c) rec.scores[c] = score(rec.context_vec, cand_vecs[c]);
        const std::vector<int> order = rank_candidates(rec.context_vec, cand_vecs);
        for (size_t r = 0; r < order.size(); ++r) {
            if (order[r] == pos) {
                rec.rank_of_positive = static_cast<int>(r) + 1;
                break;
            }
        }
    }

    EvalReport report;
    report.n_queries = static_cast<int>(records.size());
    report.n_candidates_per_query = static_cast<int>(n);
    for (int k : ks) {
        if (k < 1 || static_cast<size_t>(k) > n)
            throw std::invalid_argument("recall k=" + std::to_string(k) +
                                        " outside the candidate-pool size " + std::to_string(n));
        report.r_at[k] = recall_at_k(records, k);
    }
    return report;
}

namespace {

bool same_context(const std::vector<Utterance>& a, const std::vector<Utterance>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i].text != b[i].text || a[i].speaker_id != b[i].speaker_id) return false;
    return true;
}

}  // namespace

std::vector<QueryRecord> build_query_records(const BiEncoder& encoder,
                                             const std::vector<LabeledExample>& examples,
                                             const Vocabulary& vocab, int block_size) {
    if (block_size < 2) throw std::invalid_argument("block_size must be >= 2");
    if (examples.empty()) throw std::invalid_argument("no eval examples");
    if (examples.size() % static_cast<size_t>(block_size) != 0)
        throw std::invalid_argument("eval set size " + std::to_string(examples.size()) +
                                    " is not a multiple of block_size " +
                                    std::to_string(block_size));

    const int max_enc_len = encoder.ctx_tower().config.max_enc_len;
    const int max_dec_len = encoder.ctx_tower().config.max_dec_len;

    std::vector<QueryRecord> records;
    const size_t n_blocks = examples.size() / static_cast<size_t>(block_size);
    records.reserve(n_blocks);
    for (size_t b = 0; b < n_blocks; ++b) {
        const size_t base = b * static_cast<size_t>(block_size);
        int positives = 0;
        for (int c = 0; c < block_size; ++c) {
            const LabeledExample& ex = examples[base + static_cast<size_t>(c)];
            if (ex.label == 1) ++positives;
            if (!same_context(ex.context, examples[base].context))
                throw std::invalid_argument("block " + std::to_string(b) +
                                            ": candidates do not share one context");
        }
        if (positives != 1)
            throw std::invalid_argument("block " + std::to_string(b) + " has " +
                                        std::to_string(positives) +
                                        " positive labels; expected 1");

        QueryRecord rec;
        rec.context_vec = embed(encoder, Side::kContext,
                                assemble_encoder_input(examples[base].context, vocab, max_enc_len));
        rec.context_vec.source_id = static_cast<int>(b);
        for (int c = 0; c < block_size; ++c) {
            const LabeledExample& ex = examples[base + static_cast<size_t>(c)];
            DenseVector vec = embed(encoder, Side::kResponse,
                                    assemble_decoder_input(ex.response, vocab, max_dec_len));
            vec.source_id = c;
            rec.candidates.emplace_back(std::move(vec), ex.label);
        }
        records.push_back(std::move(rec));
    }
    return records;
}

EvalReport evaluate(const BiEncoder& encoder, const std::string& eval_path,
                    const Vocabulary& vocab, int block_size, const std::vector<int>& ks) {
    const std::vector<LabeledExample> examples = load_eval_jsonl(eval_path);
    std::vector<QueryRecord> records = build_query_records(encoder, examples, vocab, block_size);
    return aggregate_report(records, ks);
}

Index build_index(std::vector<DenseVector> vectors) {
    if (vectors.empty()) throw std::invalid_argument("build_index: empty vector pool");
    Index index;
    index.dim = static_cast<int>(vectors[0].values.size());
    for (const DenseVector& v : vectors) {
        if (static_cast<int>(v.values.size()) != index.dim)
            throw std::invalid_argument("build_index: inconsistent vector dimensions");
        for (double x : v.values)
            if (!std::isfinite(x)) throw std::invalid_argument("build_index: non-finite value");
    }
    index.pool = std::move(vectors);
    return index;
}

std::vector<std::pair<int, double>> query_topk(const Index& index, const DenseVector& c_vec,
                                               int k) {
    if (k < 1 || static_cast<size_t>(k) > index.pool.size())
        throw std::invalid_argument("query_topk: k=" + std::to_string(k) +
                                    " outside pool size " + std::to_string(index.pool.size()));
    std::vector<std::pair<int, double>> scored;
    scored.reserve(index.pool.size());
    for (const DenseVector& v : index.pool) scored.emplace_back(v.source_id, score(c_vec, v));
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;  // ties by ascending source_id
    });
    scored.resize(static_cast<size_t>(k));
    return scored;
}

void save_embeddings(const std::vector<DenseVector>& vectors, const std::string& stem) {
    if (vectors.empty()) throw std::invalid_argument("save_embeddings: nothing to write");
    const size_t dim = vectors[0].values.size();

    json rows = json::array();
    size_t offset = 0;
    for (const DenseVector& v : vectors) {
        if (v.values.size() != dim)
            throw std::invalid_argument("save_embeddings: inconsistent vector dimensions");
        rows.push_back({{"source_id", v.source_id},
                        {"byte_offset", offset * sizeof(double)},
                        {"n_elements", dim}});
        offset += dim;
    }
    json manifest{{"format", kEmbeddingFormat},
                  {"version", 1},
                  {"dim", dim},
                  {"count", vectors.size()},
                  {"rows", rows}};

    std::ofstream mf(stem + ".json", std::ios::binary);
    if (!mf) throw std::runtime_error("cannot write " + stem + ".json");
    mf << manifest.dump(2) << "\n";
    mf.close();
    if (!mf) throw std::runtime_error("failed writing " + stem + ".json");

    std::ofstream bf(stem + ".bin", std::ios::binary);
    if (!bf) throw std::runtime_error("cannot write " + stem + ".bin");
    for (const DenseVector& v : vectors) detail::write_doubles_le(bf, v.values);
    bf.close();
    if (!bf) throw std::runtime_error("failed writing " + stem + ".bin");
}

std::vector<DenseVector> load_embeddings(const std::string& stem) {
    std::ifstream mf(stem + ".json", std::ios::binary);
    if (!mf) throw std::runtime_error("cannot open " + stem + ".json");
    json manifest;
    try {
        manifest = json::parse(mf);
    } catch (const json::parse_error& e) {
        throw std::runtime_error("malformed embedding manifest " + stem + ".json: " + e.what());
    }
    if (manifest.at("format").get<std::string>() != kEmbeddingFormat)
        throw std::runtime_error("not an embedding dump: " + stem + ".json");
    if (manifest.at("version").get<int>() != 1)
        throw std::runtime_error("unsupported embedding dump version");

    const size_t dim = manifest.at("dim").get<size_t>();
    const size_t count = manifest.at("count").get<size_t>();
    const json& rows = manifest.at("rows");
    if (rows.size() != count)
        throw std::runtime_error("embedding manifest row count mismatch");

    std::ifstream bf(stem + ".bin", std::ios::binary);
    if (!bf) throw std::runtime_error("cannot open " + stem + ".bin");

    std::vector<DenseVector> vectors;
    vectors.reserve(count);
    size_t expect_offset = 0;
    for (const json& row : rows) {
        if (row.at("n_elements").get<size_t>() != dim ||
            row.at("byte_offset").get<size_t>() != expect_offset * sizeof(double))
            throw std::runtime_error("embedding manifest layout mismatch");
        DenseVector v;
        v.source_id = row.at("source_id").get<int>();
        v.values.resize(dim);
        detail::read_doubles_le(bf, v.values);
        if (!bf) throw std::runtime_error("truncated embedding blob " + stem + ".bin");
        vectors.push_back(std::move(v));
        expect_offset += dim;
    }
    return vectors;
}

}  // namespace dialmae
