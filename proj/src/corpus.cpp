#include "dialmae/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace dialmae {

using nlohmann::json;

namespace {

const std::vector<std::string> kSpecialTokens = {"[PAD]", "[UNK]", "[CLS]",
                                                 "[SEG]", "[MASK]", "[EOT]"};

std::string normalize_token(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    for (char c : raw) out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    return out;
}

std::vector<std::string> split_whitespace(const std::string& text) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        size_t start = i;
        while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        if (i > start) out.push_back(text.substr(start, i - start));
    }
    return out;
}

[[noreturn]] void line_error(const std::string& path, size_t line_no, const std::string& what) {
    throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + what);
}

}  // namespace

Vocabulary::Vocabulary() {
    for (const auto& tok : kSpecialTokens) {
        token_to_id_[tok] = static_cast<int>(id_to_token_.size());
        id_to_token_.push_back(tok);
    }
}

int Vocabulary::add_token(const std::string& token) {
    auto it = token_to_id_.find(token);
    if (it != token_to_id_.end()) return it->second;
    int id = static_cast<int>(id_to_token_.size());
    token_to_id_[token] = id;
    id_to_token_.push_back(token);
    return id;
}

int Vocabulary::id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size()) throw std::invalid_argument("token id out of range: " + std::to_string(id));
    return id_to_token_[static_cast<size_t>(id)];
}

bool Vocabulary::contains(const std::string& token) const { return token_to_id_.count(token) > 0; }

void Vocabulary::save_json(const std::string& path) const {
    json j;
    j["tokens"] = id_to_token_;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open vocabulary file for writing: " + path);
    out << j.dump() << "\n";
}

Vocabulary Vocabulary::load_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open vocabulary file: " + path);
    json j = json::parse(in, nullptr, /*allow_exceptions=*/true);
    std::vector<std::string> tokens = j.at("tokens").get<std::vector<std::string>>();
    if (tokens.size() < Vocabulary::kNumSpecials)
        throw std::runtime_error("vocabulary file missing special tokens: " + path);
    for (int i = 0; i < Vocabulary::kNumSpecials; ++i) {
        if (tokens[static_cast<size_t>(i)] != kSpecialTokens[static_cast<size_t>(i)])
            throw std::runtime_error("vocabulary file has unexpected special token order: " + path);
    }
    Vocabulary v;
    for (size_t i = Vocabulary::kNumSpecials; i < tokens.size(); ++i) v.add_token(tokens[i]);
    return v;
}

std::vector<DialogueSession> load_sessions_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open session file: " + path);
    std::vector<DialogueSession> sessions;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
        if (j.is_discarded()) line_error(path, line_no, "invalid JSON");
        if (!j.is_object() || !j.contains("utterances") || !j["utterances"].is_array())
            line_error(path, line_no, "missing \"utterances\" array");
        DialogueSession session;
        for (const auto& u : j["utterances"]) {
            if (!u.is_string()) line_error(path, line_no, "utterance is not a string");
            session.utterances.push_back({u.get<std::string>(), -1});
        }
        if (j.contains("speakers")) {
            if (!j["speakers"].is_array() || j["speakers"].size() != session.utterances.size())
                line_error(path, line_no, "\"speakers\" must match \"utterances\" length");
            for (size_t i = 0; i < session.utterances.size(); ++i)
                session.utterances[i].speaker_id = j["speakers"][i].get<int>();
        }
        if (session.utterances.size() < 2)
            line_error(path, line_no, "session needs at least 2 utterances");
        for (const auto& u : session.utterances) {
            if (split_whitespace(u.text).empty())
                line_error(path, line_no, "utterance is empty after whitespace normalization");
        }
        sessions.push_back(std::move(session));
    }
    if (sessions.empty()) throw std::runtime_error(path + ": no session records");
    return sessions;
}

std::vector<LabeledExample> load_eval_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open eval file: " + path);
    std::vector<LabeledExample> examples;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
        if (j.is_discarded()) line_error(path, line_no, "invalid JSON");
        if (!j.is_object() || !j.contains("context") || !j["context"].is_array())
            line_error(path, line_no, "missing \"context\" array");
        if (!j.contains("response") || !j["response"].is_string())
            line_error(path, line_no, "missing \"response\" string");
        if (!j.contains("label") || !j["label"].is_number_integer())
            line_error(path, line_no, "missing integer \"label\"");
        LabeledExample ex;
        for (const auto& u : j["context"]) {
            if (!u.is_string()) line_error(path, line_no, "context utterance is not a string");
            ex.context.push_back({u.get<std::string>(), -1});
        }
        ex.response = {j["response"].get<std::string>(), -1};
        ex.label = j["label"].get<int>();
        if (ex.label != 0 && ex.label != 1) line_error(path, line_no, "label must be 0 or 1");
        if (ex.context.empty()) line_error(path, line_no, "context must be non-empty");
        examples.push_back(std::move(ex));
    }
    if (examples.empty()) throw std::runtime_error(path + ": no eval records");
    return examples;
}

void write_sessions_jsonl(const std::string& path, const std::vector<DialogueSession>& sessions) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open session file for writing: " + path);
    for (const auto& s : sessions) {
        json j;
        std::vector<std::string> texts;
        texts.reserve(s.utterances.size());
        bool have_speakers = false;
        std::vector<int> speakers;
        for (const auto& u : s.utterances) {
            texts.push_back(u.text);
            speakers.push_back(u.speaker_id);
            if (u.speaker_id >= 0) have_speakers = true;
        }
        j["utterances"] = texts;
        if (have_speakers) j["speakers"] = speakers;
        out << j.dump() << "\n";
    }
}

void write_eval_jsonl(const std::string& path, const std::vector<LabeledExample>& examples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open eval file for writing: " + path);
    for (const auto& ex : examples) {
        json j;
        std::vector<std::string> ctx;
        for (const auto& u : ex.context) ctx.push_back(u.text);
        j["context"] = ctx;
        j["response"] = ex.response.text;
        j["label"] = ex.label;
        out << j.dump() << "\n";
    }
}

Vocabulary build_vocab(const std::vector<DialogueSession>& sessions, int min_freq, int max_size) {
    if (min_freq < 1) throw std::invalid_argument("min_freq must be >= 1");
    if (max_size <= Vocabulary::kNumSpecials)
        throw std::invalid_argument("max_size must exceed the special token count");
    std::map<std::string, long long> freq;  // ordered map gives the lexicographic tie order
    for (const auto& s : sessions) {
        for (const auto& u : s.utterances) {
            for (const auto& raw : split_whitespace(u.text)) ++freq[normalize_token(raw)];
        }
    }
    if (freq.empty()) throw std::runtime_error("cannot build vocabulary from an empty corpus");

    std::vector<std::pair<std::string, long long>> types(freq.begin(), freq.end());
    std::stable_sort(types.begin(), types.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });

    Vocabulary vocab;
    const int budget = max_size - Vocabulary::kNumSpecials;
    int kept = 0;
    for (const auto& [tok, count] : types) {
        if (count < min_freq) continue;
        if (kept >= budget) break;
        vocab.add_token(tok);
        ++kept;
    }
    return vocab;
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
    std::vector<int> ids;
    for (const auto& raw : split_whitespace(text)) ids.push_back(vocab.id(normalize_token(raw)));
    return ids;
}

std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i > 0) out.push_back(' ');
        out += vocab.token(ids[i]);
    }
    return out;
}

std::vector<ContextResponsePair> sample_pairs(const DialogueSession& session, Rng& rng,
                                              int num_samples, int max_ctx_turns, int session_id) {
    const int turns = static_cast<int>(session.utterances.size());
    if (turns < 2) throw std::invalid_argument("session needs at least 2 utterances to sample pairs");
    if (num_samples < 1) throw std::invalid_argument("num_samples must be >= 1");
    if (max_ctx_turns < 1) throw std::invalid_argument("max_ctx_turns must be >= 1");

    std::vector<int> split_points;  // 1-based response indices, 2..turns
    split_points.reserve(static_cast<size_t>(turns - 1));
    for (int j = 2; j <= turns; ++j) split_points.push_back(j);
    rng.shuffle(split_points);

    const int take = std::min<int>(num_samples, static_cast<int>(split_points.size()));
    std::vector<ContextResponsePair> pairs;
    pairs.reserve(static_cast<size_t>(take));
    for (int i = 0; i < take; ++i) {
        const int j = split_points[static_cast<size_t>(i)];
        ContextResponsePair pair;
        pair.session_id = session_id;
        pair.split_index = j;
        const int first = std::max(1, j - max_ctx_turns);
        for (int t = first; t <= j - 1; ++t)
            pair.context.push_back(session.utterances[static_cast<size_t>(t - 1)]);
        pair.response = session.utterances[static_cast<size_t>(j - 1)];
        pairs.push_back(std::move(pair));
    }
    return pairs;
}

TokenSeq assemble_encoder_input(const std::vector<Utterance>& context, const Vocabulary& vocab,
                                int max_len) {
    if (context.empty()) throw std::invalid_argument("encoder input needs a non-empty context");
    if (max_len < 2) throw std::invalid_argument("encoder max_len must be >= 2");

    std::vector<int> body;
    for (const auto& u : context) {
        for (int id : tokenize(u.text, vocab)) body.push_back(id);
        body.push_back(Vocabulary::kSeg);
    }
    // Left truncation: keep the most recent max_len-1 body tokens after [CLS].
    const size_t budget = static_cast<size_t>(max_len - 1);
    if (body.size() > budget) body.erase(body.begin(), body.end() - static_cast<long>(budget));

    TokenSeq seq;
    seq.ids.reserve(static_cast<size_t>(max_len));
    seq.ids.push_back(Vocabulary::kCls);
    seq.ids.insert(seq.ids.end(), body.begin(), body.end());
    seq.attention_len = static_cast<int>(seq.ids.size());
    seq.ids.resize(static_cast<size_t>(max_len), Vocabulary::kPad);
    return seq;
}

TokenSeq assemble_decoder_input(const Utterance& response, const Vocabulary& vocab, int max_len) {
    if (max_len < 2) throw std::invalid_argument("decoder max_len must be >= 2");
    std::vector<int> body = tokenize(response.text, vocab);
    const size_t budget = static_cast<size_t>(max_len - 1);
    if (body.size() > budget) body.resize(budget);

    TokenSeq seq;
    seq.ids.reserve(static_cast<size_t>(max_len));
    seq.ids.push_back(Vocabulary::kCls);
    seq.ids.insert(seq.ids.end(), body.begin(), body.end());
    seq.attention_len = static_cast<int>(seq.ids.size());
    seq.ids.resize(static_cast<size_t>(max_len), Vocabulary::kPad);
    return seq;
}

std::vector<DialogueSession> gen_synthetic_corpus(uint64_t seed, int n_sessions, int vocab_size,
                                                  int turns_per_session) {
    if (n_sessions < 1) throw std::invalid_argument("n_sessions must be >= 1");
    if (vocab_size < 20) throw std::invalid_argument("synthetic vocab_size must be >= 20");
    if (turns_per_session < 2) throw std::invalid_argument("turns_per_session must be >= 2");

    // Latent-state grammar. A pool of topic tokens is carved into one small
    // bank per (topic, phase) pair; banks overlap, so a single token belongs
    // to several banks and only token co-occurrence identifies the state. A
    // session fixes a topic and walks the phase cycle one step per turn,
    // drawing each turn's topic tokens from the bank at that phase. The
    // context/response relation is therefore the phase progression between
    // latent states, which has to be learned rather than read off token
    // overlap or per-token association, and an untrained encoder ranks
    // candidates at chance.
    const int n_topics = std::clamp(vocab_size / 30, 2, 24);
    const int phases = kTopicPhases;
    const int pool = std::max(5, vocab_size / 4);
    const int bank_size = std::min(6, pool);
    const int shared_total = std::max(4, vocab_size - pool);

    Rng rng(derive_seed(seed, "synthetic-corpus"));
    std::vector<int> pool_ids(static_cast<size_t>(pool));
    std::iota(pool_ids.begin(), pool_ids.end(), 0);
    std::vector<std::vector<int>> banks;
    banks.reserve(static_cast<size_t>(n_topics * phases));
    for (int b = 0; b < n_topics * phases; ++b) {
        // Partial Fisher-Yates: the first bank_size entries become a uniform
        // sample of the pool without replacement.
        for (int k = 0; k < bank_size; ++k) {
            const size_t j = static_cast<size_t>(k) +
                             static_cast<size_t>(rng.uniform_below(static_cast<uint64_t>(pool - k)));
            std::swap(pool_ids[static_cast<size_t>(k)], pool_ids[j]);
        }
        banks.emplace_back(pool_ids.begin(), pool_ids.begin() + bank_size);
    }

    std::vector<DialogueSession> sessions;
    sessions.reserve(static_cast<size_t>(n_sessions));
    for (int s = 0; s < n_sessions; ++s) {
        const int topic = static_cast<int>(rng.uniform_below(static_cast<uint64_t>(n_topics)));
        const int phase0 = static_cast<int>(rng.uniform_below(static_cast<uint64_t>(phases)));
        DialogueSession session;
        for (int t = 0; t < turns_per_session; ++t) {
            const std::vector<int>& bank =
                banks[static_cast<size_t>(topic * phases + (phase0 + t) % phases)];
            const int len = 9 + static_cast<int>(rng.uniform_below(6));  // 9..14 tokens
            std::string text;
            for (int w = 0; w < len; ++w) {
                if (w > 0) text.push_back(' ');
                if (rng.uniform() < kTopicTokenProb) {
                    const size_t pick = static_cast<size_t>(rng.uniform_below(bank.size()));
                    text += "t" + std::to_string(bank[pick]);
                } else {
                    const int idx = static_cast<int>(rng.uniform_below(static_cast<uint64_t>(shared_total)));
                    text += "c" + std::to_string(idx);
                }
            }
            session.utterances.push_back({std::move(text), t % 2});
        }
        sessions.push_back(std::move(session));
    }
    return sessions;
}

}  // namespace dialmae
