#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dialmae/corpus.hpp"
#include "dialmae/training.hpp"

namespace dialmae {

struct DenseVector {
    std::vector<double> values;
    int source_id = 0;
};

enum class Side { kContext, kResponse };

// Runs the matching tower on an unmasked input and returns its cls embedding.
DenseVector embed(const BiEncoder& encoder, Side side, const TokenSeq& input);

// Eq.-9 similarity: the plain dot product.
double score(const DenseVector& c_vec, const DenseVector& r_vec);

// Candidate indices sorted by descending score; ties broken by ascending
// original index.
std::vector<int> rank_candidates(const DenseVector& c_vec,
                                 const std::vector<DenseVector>& candidates);

struct QueryRecord {
    DenseVector context_vec;
    std::vector<std::pair<DenseVector, int>> candidates;  // (vector, label)
    std::vector<double> scores;
    int rank_of_positive = 0;  // 1-based
};

// Fraction of records whose positive candidate ranks within the top k.
double recall_at_k(const std::vector<QueryRecord>& records, int k);

struct EvalReport {
    std::map<int, double> r_at;  // k -> R_n@k
    int n_queries = 0;
    int n_candidates_per_query = 0;

    nlohmann::json to_json() const;  // {"R@1":..., "R@2":..., "R@5":..., "n_queries":...}
    std::string csv_header() const;
    std::string csv_row() const;
};

inline const std::vector<int> kDefaultRecallKs{1, 2, 5};

// Scores and ranks each record, then aggregates R_n@k for the given ks.
// Records must share one candidate-pool size; rank_of_positive and scores are
// filled in as a side effect of evaluation, so pre-built records pass through
// the identical ranking path the file-based evaluation uses.
EvalReport aggregate_report(std::vector<QueryRecord>& records,
                            const std::vector<int>& ks = kDefaultRecallKs);

// Embeds labeled examples grouped in consecutive blocks of block_size lines
// (one positive per block, shared context embedded once).
std::vector<QueryRecord> build_query_records(const BiEncoder& encoder,
                                             const std::vector<LabeledExample>& examples,
                                             const Vocabulary& vocab, int block_size);

// Full benchmark harness over an eval JSONL file.
EvalReport evaluate(const BiEncoder& encoder, const std::string& eval_path,
                    const Vocabulary& vocab, int block_size = 10,
                    const std::vector<int>& ks = kDefaultRecallKs);

// Brute-force exact retrieval over a response pool.
struct Index {
    std::vector<DenseVector> pool;
    int dim = 0;
};

Index build_index(std::vector<DenseVector> vectors);
std::vector<std::pair<int, double>> query_topk(const Index& index, const DenseVector& c_vec,
                                               int k);

// Embedding dump: "<stem>.json" manifest + "<stem>.bin" little-endian blob,
// one row per source_id, mirroring the checkpoint layout.
void save_embeddings(const std::vector<DenseVector>& vectors, const std::string& stem);
std::vector<DenseVector> load_embeddings(const std::string& stem);

inline constexpr const char* kEmbeddingFormat = "dialmae-embeddings";

}  // namespace dialmae
