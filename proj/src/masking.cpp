#include "dialmae/masking.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dialmae {

MaskingOutcome mask_tokens(const TokenSeq& seq, double rate, Rng& rng, MaskScheme scheme,
                           int vocab_size) {
    if (rate < 0.0 || rate > 1.0) throw std::invalid_argument("mask rate must be in [0, 1]");
    if (scheme == MaskScheme::kBert801010 && vocab_size <= Vocabulary::kNumSpecials)
        throw std::invalid_argument("80/10/10 masking needs the vocab size for random replacement");

    std::vector<int> maskable;
    for (int p = 0; p < static_cast<int>(seq.ids.size()); ++p) {
        if (p >= seq.attention_len) break;  // pads sit past attention_len
        if (!Vocabulary::is_special(seq.ids[static_cast<size_t>(p)])) maskable.push_back(p);
    }

    MaskingOutcome out;
    out.masked_ids = seq;
    const auto n_masked =
        static_cast<size_t>(std::llround(rate * static_cast<double>(maskable.size())));
    if (n_masked == 0) return out;

    // Partial Fisher-Yates: the first n_masked entries are the chosen ones.
    for (size_t i = 0; i < n_masked; ++i) {
        const size_t j = i + static_cast<size_t>(rng.uniform_below(maskable.size() - i));
        std::swap(maskable[i], maskable[j]);
    }
    maskable.resize(n_masked);
    std::sort(maskable.begin(), maskable.end());

    out.masked_positions = maskable;
    for (int p : maskable) {
        out.original_ids.push_back(seq.ids[static_cast<size_t>(p)]);
        int replacement = Vocabulary::kMask;
        if (scheme == MaskScheme::kBert801010) {
            const double u = rng.uniform();
            if (u < 0.8) {
                replacement = Vocabulary::kMask;
            } else if (u < 0.9) {
                const int n_regular = vocab_size - Vocabulary::kNumSpecials;
                replacement = Vocabulary::kNumSpecials +
                              static_cast<int>(rng.uniform_below(static_cast<uint64_t>(n_regular)));
            } else {
                replacement = seq.ids[static_cast<size_t>(p)];
            }
        }
        out.masked_ids.ids[static_cast<size_t>(p)] = replacement;
    }
    return out;
}

}  // namespace dialmae
