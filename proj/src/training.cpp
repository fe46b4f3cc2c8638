#include "dialmae/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace dialmae {

using nlohmann::json;

void TrainConfig::validate() const {
    if (base_lr <= 0.0) throw std::invalid_argument("base_lr must be positive");
    if (warmup_ratio < 0.0 || warmup_ratio > 1.0)
        throw std::invalid_argument("warmup_ratio must be in [0, 1]");
    if (max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw std::invalid_argument("adam betas must be in [0, 1)");
    if (adam_eps <= 0.0) throw std::invalid_argument("adam_eps must be positive");
    if (enc_mask_rate < 0.0 || enc_mask_rate > 1.0 || dec_mask_rate < 0.0 || dec_mask_rate > 1.0)
        throw std::invalid_argument("mask rates must be in [0, 1]");
    if (temperature <= 0.0) throw std::invalid_argument("temperature must be positive");
    if (num_pairs_per_session < 1) throw std::invalid_argument("num_pairs_per_session must be >= 1");
    if (max_ctx_turns < 1) throw std::invalid_argument("max_ctx_turns must be >= 1");
}

json TrainConfig::to_json() const {
    return json{{"base_lr", base_lr},
                {"warmup_ratio", warmup_ratio},
                {"max_steps", max_steps},
                {"batch_size", batch_size},
                {"weight_decay", weight_decay},
                {"beta1", beta1},
                {"beta2", beta2},
                {"adam_eps", adam_eps},
                {"seed", seed},
                {"enc_mask_rate", enc_mask_rate},
                {"dec_mask_rate", dec_mask_rate},
                {"temperature", temperature},
                {"tie_towers", tie_towers},
                {"bert_masking", bert_masking},
                {"num_pairs_per_session", num_pairs_per_session},
                {"max_ctx_turns", max_ctx_turns}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    c.base_lr = j.at("base_lr").get<double>();
    c.warmup_ratio = j.at("warmup_ratio").get<double>();
    c.max_steps = j.at("max_steps").get<long long>();
    c.batch_size = j.at("batch_size").get<int>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    c.enc_mask_rate = j.at("enc_mask_rate").get<double>();
    c.dec_mask_rate = j.at("dec_mask_rate").get<double>();
    c.temperature = j.at("temperature").get<double>();
    c.tie_towers = j.at("tie_towers").get<bool>();
    c.bert_masking = j.at("bert_masking").get<bool>();
    c.num_pairs_per_session = j.at("num_pairs_per_session").get<int>();
    c.max_ctx_turns = j.at("max_ctx_turns").get<int>();
    c.validate();
    return c;
}

OptimState init_optim(const ParamStore& params) {
    return {params.zeros_like(), params.zeros_like(), 0};
}

double cross_entropy_mlm(const std::vector<double>& logits, int vocab_size,
                         const std::vector<int>& labels, bool* empty_warning) {
    if (empty_warning != nullptr) *empty_warning = labels.empty();
    if (labels.empty()) return 0.0;
    if (logits.size() != labels.size() * static_cast<size_t>(vocab_size))
        throw std::invalid_argument("logits shape does not match labels");

    double total = 0.0;
    for (size_t r = 0; r < labels.size(); ++r) {
        const double* row = logits.data() + r * static_cast<size_t>(vocab_size);
        const int label = labels[r];
        if (label < 0 || label >= vocab_size)
            throw std::invalid_argument("label out of vocab range: " + std::to_string(label));
        double mx = row[0];
        for (int v = 1; v < vocab_size; ++v) mx = std::max(mx, row[v]);
        double z = 0.0;
        for (int v = 0; v < vocab_size; ++v) z += std::exp(row[v] - mx);
        total += std::log(z) + mx - row[label];
    }
    return total / static_cast<double>(labels.size());
}

ContrastiveResult contrastive_loss(const std::vector<double>& ctx_vecs,
                                   const std::vector<double>& resp_vecs, int batch, int dim,
                                   double temperature) {
    if (batch < 1) throw std::invalid_argument("contrastive batch must be >= 1");
    if (temperature <= 0.0) throw std::invalid_argument("temperature must be positive");
    const size_t want = static_cast<size_t>(batch) * static_cast<size_t>(dim);
    if (ctx_vecs.size() != want || resp_vecs.size() != want)
        throw std::invalid_argument("contrastive vector matrices must both be batch x dim");

    const size_t b = static_cast<size_t>(batch);
    std::vector<double> scores(b * b);
    for (size_t i = 0; i < b; ++i) {
        const double* ci = ctx_vecs.data() + i * static_cast<size_t>(dim);
        for (size_t j = 0; j < b; ++j) {
            const double* rj = resp_vecs.data() + j * static_cast<size_t>(dim);
            double s = 0.0;
            for (int k = 0; k < dim; ++k) s += ci[k] * rj[k];
            scores[i * b + j] = s / temperature;
        }
    }

    ContrastiveResult out;
    out.d_ctx.assign(want, 0.0);
    out.d_resp.assign(want, 0.0);
    const double inv_b = 1.0 / static_cast<double>(batch);
    std::vector<double> ds(b);  // dL/ds_ij for one row i
    for (size_t i = 0; i < b; ++i) {
        const double* row = scores.data() + i * b;
        double mx = row[0];
        for (size_t j = 1; j < b; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (size_t j = 0; j < b; ++j) z += std::exp(row[j] - mx);
        out.loss += (std::log(z) + mx - row[i]) * inv_b;

        for (size_t j = 0; j < b; ++j) ds[j] = std::exp(row[j] - mx) / z * inv_b;
        ds[i] -= inv_b;

        const double* ci = ctx_vecs.data() + i * static_cast<size_t>(dim);
        double* dci = out.d_ctx.data() + i * static_cast<size_t>(dim);
        for (size_t j = 0; j < b; ++j) {
            const double w = ds[j] / temperature;
            const double* rj = resp_vecs.data() + j * static_cast<size_t>(dim);
            double* drj = out.d_resp.data() + j * static_cast<size_t>(dim);
            for (int k = 0; k < dim; ++k) {
                dci[k] += w * rj[k];
                drj[k] += w * ci[k];
            }
        }
    }
    return out;
}

void adamw_step(ParamStore& params, const ParamStore& grads, OptimState& state,
                const TrainConfig& config, double lr_t) {
    if (grads.total_size() != params.total_size() || state.m.total_size() != params.total_size())
        throw std::invalid_argument("optimizer buffers do not match the parameter layout");
    for (double g : grads.flat())
        if (!std::isfinite(g)) throw std::runtime_error("non-finite gradient; aborting training");

    state.step += 1;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));

    for (const TensorSpec& spec : params.specs()) {
        auto p = params.tensor(spec.name);
        auto g = grads.tensor(spec.name);
        auto m = state.m.tensor(spec.name);
        auto v = state.v.tensor(spec.name);

        // Decoupled decay: rank >= 2 tensors only (layernorm/bias are rank 1).
        if (spec.shape.size() >= 2 && config.weight_decay > 0.0) {
            const double shrink = 1.0 - lr_t * config.weight_decay;
            for (double& w : p) w *= shrink;
        }
        for (size_t i = 0; i < p.size(); ++i) {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr_t * mhat / (std::sqrt(vhat) + config.adam_eps);
        }
    }
}

double lr_at(long long step, const TrainConfig& config) {
    if (step < 0 || step > config.max_steps)
        throw std::invalid_argument("lr_at step outside [0, max_steps]");
    const double warmup_steps = config.warmup_ratio * static_cast<double>(config.max_steps);
    const double s = static_cast<double>(step);
    if (warmup_steps > 0.0 && s <= warmup_steps) return config.base_lr * s / warmup_steps;
    const double decay_span = static_cast<double>(config.max_steps) - warmup_steps;
    if (decay_span <= 0.0) return 0.0;  // warmup_ratio = 1: peak exactly at the last step
    return config.base_lr * (static_cast<double>(config.max_steps) - s) / decay_span;
}

MetricsLog::MetricsLog(const std::string& jsonl_path, const std::string& csv_path,
                       bool fine_tune_phase)
    : jsonl_(jsonl_path, std::ios::binary),
      csv_(csv_path, std::ios::binary),
      fine_tune_phase_(fine_tune_phase) {
    if (!jsonl_) throw std::runtime_error("cannot open metrics log: " + jsonl_path);
    if (!csv_) throw std::runtime_error("cannot open metrics csv: " + csv_path);
    csv_ << (fine_tune_phase_ ? "step,lr,l_ft\n" : "step,lr,l_enc,l_dec,l_total\n");
}

void MetricsLog::append(const StepMetrics& m) {
    json j;
    j["step"] = m.step;
    j["lr"] = m.lr;
    if (fine_tune_phase_) {
        j["l_ft"] = m.l_ft;
    } else {
        j["l_enc"] = m.l_enc;
        j["l_dec"] = m.l_dec;
        j["l_total"] = m.l_total;
    }
    jsonl_ << j.dump() << "\n";

    char buf[256];
    if (fine_tune_phase_) {
        std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g\n", m.step, m.lr, m.l_ft);
    } else {
        std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g\n", m.step, m.lr, m.l_enc,
                      m.l_dec, m.l_total);
    }
    csv_ << buf;
}

MetricsSink MetricsLog::sink() {
    return [this](const StepMetrics& m) { append(m); };
}

namespace {

// Copies the encoder-owned tensors (token embedding + enc.*) out of a full
// model store.
ParamStore extract_encoder(const ModelConfig& config, const ParamStore& full) {
    ParamStore enc = build_param_store(config, /*encoder_only=*/true);
    for (const TensorSpec& spec : enc.specs()) {
        auto src = full.tensor(spec.name);
        auto dst = enc.tensor(spec.name);
        std::copy(src.begin(), src.end(), dst.begin());
    }
    return enc;
}

struct PairPool {
    std::vector<TokenSeq> enc_inputs;
    std::vector<TokenSeq> dec_inputs;
};

PairPool build_pair_pool(const std::vector<DialogueSession>& sessions, const Vocabulary& vocab,
                         const ModelConfig& model_config, int num_pairs_per_session,
                         int max_ctx_turns, uint64_t pair_seed) {
    PairPool pool;
    Rng pair_rng(pair_seed);
    for (size_t s = 0; s < sessions.size(); ++s) {
        const auto pairs = sample_pairs(sessions[s], pair_rng, num_pairs_per_session, max_ctx_turns,
                                        static_cast<int>(s));
        for (const ContextResponsePair& pair : pairs) {
            pool.enc_inputs.push_back(
                assemble_encoder_input(pair.context, vocab, model_config.max_enc_len));
            pool.dec_inputs.push_back(
                assemble_decoder_input(pair.response, vocab, model_config.max_dec_len));
        }
    }
    if (pool.enc_inputs.empty()) throw std::runtime_error("no training pairs in the corpus");
    return pool;
}

// Deterministic epoch-based batch iterator: a full shuffle per epoch with an
// epoch-derived seed, refilled mid-batch when the pool runs out.
class BatchCursor {
public:
    BatchCursor(size_t pool_size, uint64_t master_seed)
        : order_(pool_size), seed_(master_seed) {
        for (size_t i = 0; i < pool_size; ++i) order_[i] = i;
        reshuffle();
    }

    std::vector<size_t> next(int batch_size) {
        std::vector<size_t> batch;
        batch.reserve(static_cast<size_t>(batch_size));
        while (batch.size() < static_cast<size_t>(batch_size)) {
            if (cursor_ == order_.size()) {
                ++epoch_;
                reshuffle();
                cursor_ = 0;
            }
            batch.push_back(order_[cursor_++]);
        }
        return batch;
    }

private:
    void reshuffle() {
        Rng rng(derive_seed(seed_, "shuffle", static_cast<uint64_t>(epoch_)));
        rng.shuffle(order_);
    }

    std::vector<size_t> order_;
    uint64_t seed_;
    long long epoch_ = 0;
    size_t cursor_ = 0;
};

void check_vocab_fits(const Vocabulary& vocab, const ModelConfig& config) {
    if (vocab.size() > config.vocab_size)
        throw std::invalid_argument("vocabulary size " + std::to_string(vocab.size()) +
                                    " exceeds model vocab_size " +
                                    std::to_string(config.vocab_size));
}

}  // namespace

BiEncoder bi_encoder_from_checkpoint(const Checkpoint& ckpt) {
    BiEncoder be;
    if (ckpt.has_group("ctx")) {
        be.tied = ckpt.tied_towers;
        be.ctx = ModelParams{ckpt.config, ckpt.group("ctx")};
        if (!be.tied) be.resp = ModelParams{ckpt.config, ckpt.group("resp")};
        return be;
    }
    if (ckpt.has_group("model")) {
        // Post-trained (or raw) single encoder: both sides share it.
        be.tied = true;
        be.ctx = ModelParams{ckpt.config, extract_encoder(ckpt.config, ckpt.group("model"))};
        return be;
    }
    throw std::invalid_argument("checkpoint has neither a \"model\" nor a \"ctx\" group");
}

FineTuneGrads fine_tune_forward_backward(const BiEncoder& encoder,
                                         const std::vector<TokenSeq>& ctx_batch,
                                         const std::vector<TokenSeq>& resp_batch,
                                         double temperature) {
    if (ctx_batch.empty() || ctx_batch.size() != resp_batch.size())
        throw std::invalid_argument("fine-tune batches must be aligned and non-empty");
    const int batch = static_cast<int>(ctx_batch.size());
    const int d = encoder.ctx.config.hidden_dim;

    std::vector<double> ctx_vecs(static_cast<size_t>(batch) * d);
    std::vector<double> resp_vecs(static_cast<size_t>(batch) * d);
    for (int i = 0; i < batch; ++i) {
        const EncoderOutput c = encode(encoder.ctx_tower(), ctx_batch[static_cast<size_t>(i)]);
        const EncoderOutput r = encode(encoder.resp_tower(), resp_batch[static_cast<size_t>(i)]);
        std::copy(c.cls_embedding.begin(), c.cls_embedding.end(),
                  ctx_vecs.begin() + static_cast<size_t>(i) * d);
        std::copy(r.cls_embedding.begin(), r.cls_embedding.end(),
                  resp_vecs.begin() + static_cast<size_t>(i) * d);
    }

    const ContrastiveResult con = contrastive_loss(ctx_vecs, resp_vecs, batch, d, temperature);

    FineTuneGrads out;
    out.l_ft = con.loss;
    out.ctx_grads = encoder.ctx.store.zeros_like();
    if (!encoder.tied) out.resp_grads = encoder.resp.store.zeros_like();
    ParamStore& resp_sink = encoder.tied ? out.ctx_grads : out.resp_grads;

    // Second forward per example rebuilds the cache the reverse pass needs;
    // accumulation stays in batch index order.
    for (int i = 0; i < batch; ++i) {
        const StackCache c_cache =
            encoder_forward_cached(encoder.ctx_tower(), ctx_batch[static_cast<size_t>(i)]);
        std::vector<double> d_hidden(c_cache.out.size(), 0.0);
        std::copy(con.d_ctx.begin() + static_cast<size_t>(i) * d,
                  con.d_ctx.begin() + static_cast<size_t>(i + 1) * d, d_hidden.begin());
        encoder_backward(encoder.ctx_tower(), c_cache, d_hidden, out.ctx_grads);

        const StackCache r_cache =
            encoder_forward_cached(encoder.resp_tower(), resp_batch[static_cast<size_t>(i)]);
        std::vector<double> d_hidden_r(r_cache.out.size(), 0.0);
        std::copy(con.d_resp.begin() + static_cast<size_t>(i) * d,
                  con.d_resp.begin() + static_cast<size_t>(i + 1) * d, d_hidden_r.begin());
        encoder_backward(encoder.resp_tower(), r_cache, d_hidden_r, resp_sink);
    }
    return out;
}

Checkpoint post_train(const std::vector<DialogueSession>& sessions, const Vocabulary& vocab,
                      const ModelConfig& model_config, const TrainConfig& train_config,
                      const MetricsSink& metrics) {
    model_config.validate();
    train_config.validate();
    check_vocab_fits(vocab, model_config);
    if (sessions.empty()) throw std::invalid_argument("post_train needs a non-empty corpus");

    const uint64_t seed = train_config.seed;
    const PairPool pool =
        build_pair_pool(sessions, vocab, model_config, train_config.num_pairs_per_session,
                        train_config.max_ctx_turns, derive_seed(seed, "pairs"));

    ModelParams params = init_params(model_config, derive_seed(seed, "init"));
    OptimState state = init_optim(params.store);
    BatchCursor cursor(pool.enc_inputs.size(), seed);

    const bool use_decoder = model_config.n_dec_layers > 0;
    const MaskScheme scheme =
        train_config.bert_masking ? MaskScheme::kBert801010 : MaskScheme::kPureMask;

    for (long long step = 1; step <= train_config.max_steps; ++step) {
        const std::vector<size_t> batch = cursor.next(train_config.batch_size);
        std::vector<MaskingOutcome> enc_batch, dec_batch;
        enc_batch.reserve(batch.size());
        if (use_decoder) dec_batch.reserve(batch.size());
        for (size_t i = 0; i < batch.size(); ++i) {
            Rng mask_rng(derive_seed(seed, "mask", static_cast<uint64_t>(step), i));
            enc_batch.push_back(mask_tokens(pool.enc_inputs[batch[i]], train_config.enc_mask_rate,
                                            mask_rng, scheme, model_config.vocab_size));
            if (use_decoder)
                dec_batch.push_back(mask_tokens(pool.dec_inputs[batch[i]],
                                                train_config.dec_mask_rate, mask_rng, scheme,
                                                model_config.vocab_size));
        }

        const auto [report, grads] = forward_backward(params, enc_batch, dec_batch);
        const double lr = lr_at(step, train_config);
        adamw_step(params.store, grads, state, train_config, lr);

        if (metrics) {
            StepMetrics m;
            m.step = step;
            m.lr = lr;
            m.l_enc = report.l_enc;
            m.l_dec = report.l_dec;
            m.l_total = report.l_total;
            metrics(m);
        }
    }

    Checkpoint ckpt;
    ckpt.phase = "post_train";
    ckpt.config = model_config;
    ckpt.seed = seed;
    ckpt.step = train_config.max_steps;
    ckpt.tied_towers = false;
    ckpt.groups.emplace_back("model", std::move(params.store));
    ckpt.groups.emplace_back("opt.m", std::move(state.m));
    ckpt.groups.emplace_back("opt.v", std::move(state.v));
    return ckpt;
}

Checkpoint fine_tune(const Checkpoint& post_checkpoint,
                     const std::vector<DialogueSession>& sessions, const Vocabulary& vocab,
                     const TrainConfig& train_config, const MetricsSink& metrics) {
    train_config.validate();
    if (!post_checkpoint.has_group("model"))
        throw std::invalid_argument("fine_tune needs a post_train checkpoint with a \"model\" group");
    const ModelConfig model_config = post_checkpoint.config;
    check_vocab_fits(vocab, model_config);
    if (sessions.empty()) throw std::invalid_argument("fine_tune needs a non-empty corpus");
    if (train_config.batch_size < 2)
        std::fprintf(stderr,
                     "warning: fine-tune batch_size < 2 leaves no in-batch negatives; "
                     "the contrastive loss is identically zero\n");

    const uint64_t seed = train_config.seed;

    // Every utterance with a predecessor becomes a response once.
    PairPool pool;
    {
        Rng pair_rng(derive_seed(seed, "pairs"));
        for (size_t s = 0; s < sessions.size(); ++s) {
            const int all_splits = static_cast<int>(sessions[s].utterances.size()) - 1;
            const auto pairs = sample_pairs(sessions[s], pair_rng, all_splits,
                                            train_config.max_ctx_turns, static_cast<int>(s));
            for (const ContextResponsePair& pair : pairs) {
                pool.enc_inputs.push_back(
                    assemble_encoder_input(pair.context, vocab, model_config.max_enc_len));
                pool.dec_inputs.push_back(
                    assemble_decoder_input(pair.response, vocab, model_config.max_dec_len));
            }
        }
    }
    if (pool.enc_inputs.empty()) throw std::runtime_error("no fine-tuning pairs in the corpus");

    BiEncoder encoder;
    encoder.tied = train_config.tie_towers;
    encoder.ctx =
        ModelParams{model_config, extract_encoder(model_config, post_checkpoint.group("model"))};
    if (!encoder.tied) encoder.resp = encoder.ctx;  // deep copy of the post-trained encoder

    OptimState ctx_state = init_optim(encoder.ctx.store);
    OptimState resp_state;
    if (!encoder.tied) resp_state = init_optim(encoder.resp.store);

    BatchCursor cursor(pool.enc_inputs.size(), seed);
    for (long long step = 1; step <= train_config.max_steps; ++step) {
        const std::vector<size_t> batch = cursor.next(train_config.batch_size);
        std::vector<TokenSeq> ctx_batch, resp_batch;
        ctx_batch.reserve(batch.size());
        resp_batch.reserve(batch.size());
        for (size_t idx : batch) {
            ctx_batch.push_back(pool.enc_inputs[idx]);
            resp_batch.push_back(pool.dec_inputs[idx]);
        }

        FineTuneGrads grads =
            fine_tune_forward_backward(encoder, ctx_batch, resp_batch, train_config.temperature);
        const double lr = lr_at(step, train_config);
        adamw_step(encoder.ctx.store, grads.ctx_grads, ctx_state, train_config, lr);
        if (!encoder.tied) adamw_step(encoder.resp.store, grads.resp_grads, resp_state, train_config, lr);

        if (metrics) {
            StepMetrics m;
            m.step = step;
            m.lr = lr;
            m.l_ft = grads.l_ft;
            m.fine_tune_phase = true;
            metrics(m);
        }
    }

    Checkpoint ckpt;
    ckpt.phase = "fine_tune";
    ckpt.config = model_config;
    ckpt.seed = seed;
    ckpt.step = train_config.max_steps;
    ckpt.tied_towers = encoder.tied;
    ckpt.groups.emplace_back("ctx", std::move(encoder.ctx.store));
    if (!encoder.tied) ckpt.groups.emplace_back("resp", std::move(encoder.resp.store));
    ckpt.groups.emplace_back("opt.ctx.m", std::move(ctx_state.m));
    ckpt.groups.emplace_back("opt.ctx.v", std::move(ctx_state.v));
    if (!encoder.tied) {
        ckpt.groups.emplace_back("opt.resp.m", std::move(resp_state.m));
        ckpt.groups.emplace_back("opt.resp.v", std::move(resp_state.v));
    }
    return ckpt;
}

}  // namespace dialmae
