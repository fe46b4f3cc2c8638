#pragma once

#include <vector>

#include "dialmae/corpus.hpp"
#include "dialmae/rng.hpp"

namespace dialmae {

// A masked sequence together with reconstruction labels. In the default
// scheme masked_ids holds [MASK] at every masked position; under the
// BERT-style 80/10/10 ablation a masked position may instead hold a random
// token or the original one, while masked_positions/original_ids still record
// the prediction targets.
struct MaskingOutcome {
    TokenSeq masked_ids;
    std::vector<int> masked_positions;  // strictly increasing
    std::vector<int> original_ids;      // labels, aligned with masked_positions
};

enum class MaskScheme {
    kPureMask,     // every selected token becomes [MASK]
    kBert801010,   // 80% [MASK], 10% random token, 10% unchanged
};

// Exact-count masking: round(rate * n_maskable) non-special non-pad positions
// are chosen uniformly without replacement (ties round half-up). Special
// tokens and padding are never selected.
MaskingOutcome mask_tokens(const TokenSeq& seq, double rate, Rng& rng,
                           MaskScheme scheme = MaskScheme::kPureMask, int vocab_size = 0);

// Named reference regimes for the asymmetric masking setup.
struct MaskingPreset {
    double enc_rate;
    double dec_rate;
    int n_dec_layers;
};

inline constexpr MaskingPreset kUbuntuStyleMasking{0.30, 0.75, 1};
inline constexpr MaskingPreset kEcommerceStyleMasking{0.30, 0.45, 2};

}  // namespace dialmae
