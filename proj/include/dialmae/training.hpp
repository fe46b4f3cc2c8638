#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dialmae/checkpoint.hpp"
#include "dialmae/corpus.hpp"
#include "dialmae/masking.hpp"
#include "dialmae/model.hpp"

namespace dialmae {

struct TrainConfig {
    double base_lr = 3e-4;
    double warmup_ratio = 0.1;
    long long max_steps = 2000;
    int batch_size = 32;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 42;
    double enc_mask_rate = 0.30;
    double dec_mask_rate = 0.75;
    double temperature = 1.0;  // fine-tune only; 1.0 keeps the plain softmax fraction
    bool tie_towers = false;
    bool bert_masking = false;  // 80/10/10 substitution ablation; default is pure [MASK]
    int num_pairs_per_session = 4;
    int max_ctx_turns = 8;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    bool operator==(const TrainConfig&) const = default;
};

struct OptimState {
    ParamStore m;
    ParamStore v;
    long long step = 0;
};

OptimState init_optim(const ParamStore& params);

// Mean over rows of -log softmax(row)[label], max-stabilized. logits is
// row-major (|labels| x vocab_size). Empty labels -> 0 and sets the warning.
double cross_entropy_mlm(const std::vector<double>& logits, int vocab_size,
                         const std::vector<int>& labels, bool* empty_warning = nullptr);

struct ContrastiveResult {
    double loss = 0.0;
    std::vector<double> d_ctx;   // (B,d)
    std::vector<double> d_resp;  // (B,d)
};

// In-batch-negative InfoNCE: s_ij = (ctx_i . resp_j) / temperature, loss =
// mean_i of -log(exp(s_ii) / sum_j exp(s_ij)), with exact gradients for both
// vector matrices.
ContrastiveResult contrastive_loss(const std::vector<double>& ctx_vecs,
                                   const std::vector<double>& resp_vecs, int batch, int dim,
                                   double temperature);

// Decoupled AdamW: weight decay (tensors of rank >= 2 only; layernorm and
// bias tensors are exempt) applied separately from the bias-corrected moment
// update. Throws on non-finite gradients.
void adamw_step(ParamStore& params, const ParamStore& grads, OptimState& state,
                const TrainConfig& config, double lr_t);

// Linear warmup over the first warmup_ratio * max_steps steps, then linear
// decay to zero at max_steps.
double lr_at(long long step, const TrainConfig& config);

struct StepMetrics {
    long long step = 0;
    double lr = 0.0;
    double l_enc = 0.0;
    double l_dec = 0.0;
    double l_total = 0.0;
    double l_ft = 0.0;
    bool fine_tune_phase = false;
};

using MetricsSink = std::function<void(const StepMetrics&)>;

// Writes the per-step metrics stream as JSONL plus a CSV mirror.
class MetricsLog {
public:
    MetricsLog(const std::string& jsonl_path, const std::string& csv_path, bool fine_tune_phase);
    void append(const StepMetrics& m);
    MetricsSink sink();

private:
    std::ofstream jsonl_;
    std::ofstream csv_;
    bool fine_tune_phase_;
};

// The two fine-tuning towers. When tied, ctx is the single shared tower and
// resp is empty.
struct BiEncoder {
    ModelParams ctx;
    ModelParams resp;
    bool tied = false;

    const ModelParams& ctx_tower() const { return ctx; }
    const ModelParams& resp_tower() const { return tied ? ctx : resp; }
};

// Rebuilds a BiEncoder from a fine_tune checkpoint ("ctx"/"resp" groups) or a
// post_train checkpoint (encoder extracted, both towers identical).
BiEncoder bi_encoder_from_checkpoint(const Checkpoint& ckpt);

// One contrastive step's loss and exact gradients over aligned unmasked
// context/response batches. resp_grads stays empty for a tied encoder (all
// gradients accumulate into ctx_grads). Exposed for gradient audits.
struct FineTuneGrads {
    double l_ft = 0.0;
    ParamStore ctx_grads;
    ParamStore resp_grads;
};

FineTuneGrads fine_tune_forward_backward(const BiEncoder& encoder,
                                         const std::vector<TokenSeq>& ctx_batch,
                                         const std::vector<TokenSeq>& resp_batch,
                                         double temperature);

// Dial-MAE post-training: sample pairs, mask both sides asymmetrically, train
// the joint objective with AdamW and the linear schedule. Per-example
// gradients accumulate in batch index order (the fixed reduction order).
// Deterministic in (sessions, vocab, configs): every random draw comes from a
// named sub-stream of train_config.seed.
Checkpoint post_train(const std::vector<DialogueSession>& sessions, const Vocabulary& vocab,
                      const ModelConfig& model_config, const TrainConfig& train_config,
                      const MetricsSink& metrics = nullptr);

// Contrastive fine-tuning from a post_train checkpoint: keeps the encoder,
// discards the decoder, trains f_c/f_r (deep copies unless tie_towers) on
// unmasked pairs with in-batch negatives.
Checkpoint fine_tune(const Checkpoint& post_checkpoint,
                     const std::vector<DialogueSession>& sessions, const Vocabulary& vocab,
                     const TrainConfig& train_config, const MetricsSink& metrics = nullptr);

}  // namespace dialmae
