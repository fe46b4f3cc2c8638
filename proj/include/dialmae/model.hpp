#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dialmae/corpus.hpp"
#include "dialmae/masking.hpp"
#include "dialmae/param_store.hpp"
#include "dialmae/rng.hpp"

namespace dialmae {

// Architecture hyperparameters of the asymmetric encoder-decoder stack.
// n_dec_layers may be 0, which disables the decoder entirely (encoder-only
// MLM training, the no-decoder baseline).
struct ModelConfig {
    int vocab_size = 0;
    int hidden_dim = 32;
    int n_heads = 4;
    int ffn_dim = 64;
    int n_enc_layers = 2;
    int n_dec_layers = 1;
    int max_enc_len = 64;
    int max_dec_len = 24;
    double dropout_rate = 0.0;
    double layernorm_eps = 1e-5;

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    bool operator==(const ModelConfig&) const = default;
};

// All learnable tensors in one flat store. Encoder-exclusive tensors are
// prefixed "enc.", decoder-exclusive "dec."; the token embedding and the MLM
// head bias are shared between the two sides (the head is tied to the token
// embedding transpose).
struct ModelParams {
    ModelConfig config;
    ParamStore store;
};

ParamStore build_param_store(const ModelConfig& config, bool encoder_only = false);

// Truncated-normal init (std 0.02, clipped at 2 sigma) for weights and
// embeddings; layernorm scales 1; all biases 0.
ModelParams init_params(const ModelConfig& config, uint64_t seed);

struct EncoderOutput {
    std::vector<double> cls_embedding;  // (d), equals hidden row 0
    std::vector<double> hidden;         // (seq_len, d)
    int seq_len = 0;
};

struct DecoderOutput {
    std::vector<double> cls_slot;  // (d), hidden row 0
    std::vector<double> hidden;    // (seq_len, d)
    int seq_len = 0;
};

// ---------------------------------------------------------------------------
// Forward caches. Everything the reverse pass needs is kept per layer; tests
// also read the attention probabilities from here.
// ---------------------------------------------------------------------------

struct LayerCache {
    std::vector<double> x_in;      // (L,d) residual stream entering the layer
    std::vector<double> ln1_out;   // (L,d)
    std::vector<double> ln1_mean, ln1_rstd;  // (L)
    std::vector<double> q, k, v;   // (L,d), head h occupies columns [h*hd, (h+1)*hd)
    std::vector<double> att;       // (H,L,L) post-softmax attention probabilities
    std::vector<double> att_mix;   // (L,d) concatenated head outputs before the O projection
    std::vector<double> x_mid;     // (L,d) residual stream after the attention block
    std::vector<double> ln2_out;   // (L,d)
    std::vector<double> ln2_mean, ln2_rstd;  // (L)
    std::vector<double> ffn_pre;   // (L,F) pre-activation
    std::vector<double> ffn_act;   // (L,F) after GELU
    std::vector<double> drop_attn, drop_ffn;  // (L,d) inverted-dropout masks, empty when off
};

struct StackCache {
    int seq_len = 0;
    int attn_len = 0;
    std::vector<int> ids;
    bool slot0_injected = false;   // decoder: row 0 of emb came from the context embedding
    std::vector<double> emb;       // (L,d)
    std::vector<double> drop_emb;  // (L,d) dropout mask, empty when off
    std::vector<LayerCache> layers;
    std::vector<double> lnf_in;    // (L,d) residual stream before the final layernorm
    std::vector<double> lnf_mean, lnf_rstd;  // (L)
    std::vector<double> out;       // (L,d) final hidden states
};

// Pre-layernorm bidirectional transformer pass over the encoder tensors.
// Padding positions are excluded from attention with an additive mask; their
// rows are still computed. dropout_rng enables dropout when the config rate
// is nonzero (training only).
StackCache encoder_forward_cached(const ModelParams& params, const TokenSeq& seq,
                                  Rng* dropout_rng = nullptr);

// Decoder pass: the position-0 input embedding is replaced by cls_c (token
// and positional embedding at slot 0 are discarded).
StackCache decoder_forward_cached(const ModelParams& params, std::span<const double> cls_c,
                                  const TokenSeq& seq, Rng* dropout_rng = nullptr);

// Reverse passes. d_hidden is the gradient w.r.t. the final hidden states
// (seq_len, d); parameter gradients accumulate into grads. The decoder
// variant returns the gradient w.r.t. the injected context embedding.
void encoder_backward(const ModelParams& params, const StackCache& cache,
                      const std::vector<double>& d_hidden, ParamStore& grads);
std::vector<double> decoder_backward(const ModelParams& params, const StackCache& cache,
                                     const std::vector<double>& d_hidden, ParamStore& grads);

EncoderOutput encode(const ModelParams& params, const TokenSeq& input);
EncoderOutput encode(const ModelParams& params, const MaskingOutcome& input);
DecoderOutput decode(const ModelParams& params, std::span<const double> cls_c,
                     const MaskingOutcome& input);

// Tied-head logits for the given rows of a (seq_len, d) hidden matrix:
// logits = hidden[positions] * E^T + bias, shape (|positions|, vocab).
std::vector<double> mlm_logits(const ModelParams& params, const std::vector<double>& hidden,
                               int seq_len, const std::vector<int>& positions);

struct LossReport {
    double l_enc = 0.0;
    double l_dec = 0.0;
    double l_total = 0.0;
    double l_ft = 0.0;
    long long enc_masked_tokens = 0;
    long long dec_masked_tokens = 0;
    bool enc_empty_warning = false;
    bool dec_empty_warning = false;
};

struct FwdBwdOptions {
    bool detach_cls = false;  // treat the context embedding as a constant in the decoder path
    bool enc_loss = true;
    bool dec_loss = true;
    Rng* dropout_rng = nullptr;
};

// Joint objective over an aligned batch of (masked context, masked response)
// pairs: per-side cross-entropy over masked tokens (mean over the batch's
// masked-token count), summed. Returns exact gradients for every parameter.
// Per-example gradients accumulate in batch index order (the documented
// reduction order for reproducibility).
std::pair<LossReport, ParamStore> forward_backward(const ModelParams& params,
                                                   const std::vector<MaskingOutcome>& enc_batch,
                                                   const std::vector<MaskingOutcome>& dec_batch,
                                                   const FwdBwdOptions& options = {});

}  // namespace dialmae
