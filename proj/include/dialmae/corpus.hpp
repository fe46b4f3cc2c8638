#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "dialmae/rng.hpp"

namespace dialmae {

struct Utterance {
    std::string text;
    int speaker_id = -1;  // optional, -1 when absent
};

struct DialogueSession {
    std::vector<Utterance> utterances;
};

// A training pair sampled from a session: the response is the utterance at
// split_index (1-based) and the context is the window of turns before it.
struct ContextResponsePair {
    std::vector<Utterance> context;
    Utterance response;
    int session_id = 0;
    int split_index = 0;
};

struct LabeledExample {
    std::vector<Utterance> context;
    Utterance response;
    int label = 0;
};

class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kCls = 2;
    static constexpr int kSeg = 3;
    static constexpr int kMask = 4;
    static constexpr int kEot = 5;
    static constexpr int kNumSpecials = 6;

    Vocabulary();

    // Appends a non-special token; returns its id.
    int add_token(const std::string& token);

    int id(const std::string& token) const;  // kUnk when absent
    const std::string& token(int id) const;
    bool contains(const std::string& token) const;
    int size() const { return static_cast<int>(id_to_token_.size()); }

    static bool is_special(int id) { return id >= 0 && id < kNumSpecials; }

    const std::vector<std::string>& tokens() const { return id_to_token_; }

    void save_json(const std::string& path) const;
    static Vocabulary load_json(const std::string& path);

private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

struct TokenSeq {
    std::vector<int> ids;
    int attention_len = 0;  // count of leading non-pad positions
};

// JSONL ingestion. One record per line; malformed lines raise with the
// 1-based line number; empty files raise.
std::vector<DialogueSession> load_sessions_jsonl(const std::string& path);
std::vector<LabeledExample> load_eval_jsonl(const std::string& path);

void write_sessions_jsonl(const std::string& path, const std::vector<DialogueSession>& sessions);
void write_eval_jsonl(const std::string& path, const std::vector<LabeledExample>& examples);

// Frequency-ordered vocabulary over lowercased whitespace tokens. Ties break
// lexicographically; max_size counts specials.
Vocabulary build_vocab(const std::vector<DialogueSession>& sessions, int min_freq, int max_size);

// Lowercase whitespace tokenization; OOV maps to [UNK]; "" maps to [].
std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab);
std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab);

// Samples up to num_samples distinct split points (uniform, no replacement;
// stops when the session is exhausted). Response index j is 1-based with
// 2 <= j <= |session|; context is the preceding max_ctx_turns turns.
std::vector<ContextResponsePair> sample_pairs(const DialogueSession& session, Rng& rng,
                                              int num_samples, int max_ctx_turns,
                                              int session_id = 0);

// [CLS] u1 [SEG] u2 [SEG] ... padded to max_len; truncation drops the oldest
// tokens and always keeps [CLS] at position 0.
TokenSeq assemble_encoder_input(const std::vector<Utterance>& context, const Vocabulary& vocab,
                                int max_len);

// [CLS] + response tokens, right-truncated to max_len, padded.
TokenSeq assemble_decoder_input(const Utterance& response, const Vocabulary& vocab, int max_len);

// Seeded topic-grammar corpus: each session draws a latent topic and every
// utterance mixes topic tokens (probability kTopicTokenProb) with shared
// noise tokens, so context and response share a learnable latent. Each
// (topic, phase) state owns a small bank of topic tokens sampled from a
// common pool — banks overlap, so only co-occurrence identifies the state —
// and a session advances one phase per turn through the kTopicPhases-long
// cycle: a response draws from the bank after its context's, so selection
// rests on the learned progression, not on surface token overlap.
constexpr double kTopicTokenProb = 0.7;
constexpr int kTopicPhases = 12;

std::vector<DialogueSession> gen_synthetic_corpus(uint64_t seed, int n_sessions, int vocab_size,
                                                  int turns_per_session);

}  // namespace dialmae
