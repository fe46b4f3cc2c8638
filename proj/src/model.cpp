#include "dialmae/model.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

namespace dialmae {

using nlohmann::json;

void ModelConfig::validate() const {
    if (vocab_size <= Vocabulary::kNumSpecials)
        throw std::invalid_argument("vocab_size must exceed the special token count");
    if (hidden_dim < 1 || n_heads < 1 || hidden_dim % n_heads != 0)
        throw std::invalid_argument("hidden_dim must be a positive multiple of n_heads");
    if (ffn_dim < 1) throw std::invalid_argument("ffn_dim must be >= 1");
    if (n_dec_layers < 0) throw std::invalid_argument("n_dec_layers must be >= 0");
    if (n_enc_layers < 1 || n_enc_layers < n_dec_layers)
        throw std::invalid_argument("need n_enc_layers >= max(1, n_dec_layers)");
    if (max_enc_len < 2 || max_dec_len < 2)
        throw std::invalid_argument("sequence length limits must be >= 2");
    if (max_dec_len > max_enc_len)
        throw std::invalid_argument("max_dec_len must not exceed max_enc_len");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
        throw std::invalid_argument("dropout_rate must be in [0, 1)");
    if (layernorm_eps <= 0.0) throw std::invalid_argument("layernorm_eps must be positive");
}

json ModelConfig::to_json() const {
    return json{{"vocab_size", vocab_size},     {"hidden_dim", hidden_dim},
                {"n_heads", n_heads},           {"ffn_dim", ffn_dim},
                {"n_enc_layers", n_enc_layers}, {"n_dec_layers", n_dec_layers},
                {"max_enc_len", max_enc_len},   {"max_dec_len", max_dec_len},
                {"dropout_rate", dropout_rate}, {"layernorm_eps", layernorm_eps}};
}

ModelConfig ModelConfig::from_json(const json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.n_enc_layers = j.at("n_enc_layers").get<int>();
    c.n_dec_layers = j.at("n_dec_layers").get<int>();
    c.max_enc_len = j.at("max_enc_len").get<int>();
    c.max_dec_len = j.at("max_dec_len").get<int>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.layernorm_eps = j.at("layernorm_eps").get<double>();
    c.validate();
    return c;
}

namespace {

std::string layer_name(const std::string& side, int layer, const char* leaf) {
    return side + ".l" + std::to_string(layer) + "." + leaf;
}

void add_layer_tensors(ParamStore& store, const std::string& side, int layer, int d, int f) {
    store.add(layer_name(side, layer, "ln1.g"), {d});
    store.add(layer_name(side, layer, "ln1.b"), {d});
    store.add(layer_name(side, layer, "attn.wq"), {d, d});
    store.add(layer_name(side, layer, "attn.bq"), {d});
    store.add(layer_name(side, layer, "attn.wk"), {d, d});
    store.add(layer_name(side, layer, "attn.bk"), {d});
    store.add(layer_name(side, layer, "attn.wv"), {d, d});
    store.add(layer_name(side, layer, "attn.bv"), {d});
    store.add(layer_name(side, layer, "attn.wo"), {d, d});
    store.add(layer_name(side, layer, "attn.bo"), {d});
    store.add(layer_name(side, layer, "ln2.g"), {d});
    store.add(layer_name(side, layer, "ln2.b"), {d});
    store.add(layer_name(side, layer, "ffn.w1"), {d, f});
    store.add(layer_name(side, layer, "ffn.b1"), {f});
    store.add(layer_name(side, layer, "ffn.w2"), {f, d});
    store.add(layer_name(side, layer, "ffn.b2"), {d});
}

template <typename Store>
struct LayerRefs {
    using Span = decltype(std::declval<Store&>().tensor(std::string{}));
    Span ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

template <typename Store>
LayerRefs<Store> layer_refs(Store& store, const std::string& side, int layer) {
    return {store.tensor(layer_name(side, layer, "ln1.g")),
            store.tensor(layer_name(side, layer, "ln1.b")),
            store.tensor(layer_name(side, layer, "attn.wq")),
            store.tensor(layer_name(side, layer, "attn.bq")),
            store.tensor(layer_name(side, layer, "attn.wk")),
            store.tensor(layer_name(side, layer, "attn.bk")),
            store.tensor(layer_name(side, layer, "attn.wv")),
            store.tensor(layer_name(side, layer, "attn.bv")),
            store.tensor(layer_name(side, layer, "attn.wo")),
            store.tensor(layer_name(side, layer, "attn.bo")),
            store.tensor(layer_name(side, layer, "ln2.g")),
            store.tensor(layer_name(side, layer, "ln2.b")),
            store.tensor(layer_name(side, layer, "ffn.w1")),
            store.tensor(layer_name(side, layer, "ffn.b1")),
            store.tensor(layer_name(side, layer, "ffn.w2")),
            store.tensor(layer_name(side, layer, "ffn.b2"))};
}

// out (rows,dout) = x (rows,din) * w (din,dout) + b
void linear_fwd(const double* x, const double* w, const double* b, double* out, int rows, int din,
                int dout) {
    for (int r = 0; r < rows; ++r) {
        double* o = out + static_cast<size_t>(r) * dout;
        for (int j = 0; j < dout; ++j) o[j] = b[j];
        const double* xr = x + static_cast<size_t>(r) * din;
        for (int i = 0; i < din; ++i) {
            const double xv = xr[i];
            const double* wrow = w + static_cast<size_t>(i) * dout;
            for (int j = 0; j < dout; ++j) o[j] += xv * wrow[j];
        }
    }
}

// dx += dout * w^T; dw += x^T * dout; db += colsum(dout)
void linear_bwd(const double* x, const double* w, const double* dout, double* dx, double* dw,
                double* db, int rows, int din, int dout_dim) {
    for (int r = 0; r < rows; ++r) {
        const double* dor = dout + static_cast<size_t>(r) * dout_dim;
        const double* xr = x + static_cast<size_t>(r) * din;
        double* dxr = dx + static_cast<size_t>(r) * din;
        for (int j = 0; j < dout_dim; ++j) db[j] += dor[j];
        for (int i = 0; i < din; ++i) {
            const double* wrow = w + static_cast<size_t>(i) * dout_dim;
            double* dwrow = dw + static_cast<size_t>(i) * dout_dim;
            const double xv = xr[i];
            double acc = 0.0;
            for (int j = 0; j < dout_dim; ++j) {
                acc += dor[j] * wrow[j];
                dwrow[j] += xv * dor[j];
            }
            dxr[i] += acc;
        }
    }
}

void layernorm_fwd(const double* x, const double* g, const double* b, double* out, double* mean,
                   double* rstd, int rows, int dim, double eps) {
    for (int r = 0; r < rows; ++r) {
        const double* xr = x + static_cast<size_t>(r) * dim;
        double m = 0.0;
        for (int i = 0; i < dim; ++i) m += xr[i];
        m /= dim;
        double v = 0.0;
        for (int i = 0; i < dim; ++i) {
            const double s = xr[i] - m;
            v += s * s;
        }
        v /= dim;
        const double rs = 1.0 / std::sqrt(v + eps);
        double* o = out + static_cast<size_t>(r) * dim;
        for (int i = 0; i < dim; ++i) o[i] = g[i] * ((xr[i] - m) * rs) + b[i];
        mean[r] = m;
        rstd[r] = rs;
    }
}

void layernorm_bwd(const double* x, const double* g, const double* mean, const double* rstd,
                   const double* dout, double* dx, double* dg, double* db, int rows, int dim) {
    for (int r = 0; r < rows; ++r) {
        const double* xr = x + static_cast<size_t>(r) * dim;
        const double* dor = dout + static_cast<size_t>(r) * dim;
        double* dxr = dx + static_cast<size_t>(r) * dim;
        const double m = mean[r];
        const double rs = rstd[r];

        double dnorm_mean = 0.0, dnorm_norm_mean = 0.0;
        for (int i = 0; i < dim; ++i) {
            const double norm = (xr[i] - m) * rs;
            const double dnorm = g[i] * dor[i];
            dnorm_mean += dnorm;
            dnorm_norm_mean += dnorm * norm;
        }
        dnorm_mean /= dim;
        dnorm_norm_mean /= dim;

        for (int i = 0; i < dim; ++i) {
            const double norm = (xr[i] - m) * rs;
            const double dnorm = g[i] * dor[i];
            dg[i] += dor[i] * norm;
            db[i] += dor[i];
            dxr[i] += rs * (dnorm - dnorm_mean - norm * dnorm_norm_mean);
        }
    }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) * 0.39894228040143267794;  // 1/sqrt(2*pi)
    return cdf + x * pdf;
}

// Padding keys are excluded by giving them zero weight (the additive -inf
// mask); rows past attn_len are still computed so the hidden matrix covers
// every position.
void attention_fwd(const double* q, const double* k, const double* v, double* att, double* mix,
                   int seq_len, int dim, int n_heads, int attn_len) {
    const int hd = dim / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int h = 0; h < n_heads; ++h) {
        const int col = h * hd;
        for (int i = 0; i < seq_len; ++i) {
            double* row = att + (static_cast<size_t>(h) * seq_len + i) * seq_len;
            const double* qi = q + static_cast<size_t>(i) * dim + col;
            double mx = -1e300;
            for (int j = 0; j < attn_len; ++j) {
                const double* kj = k + static_cast<size_t>(j) * dim + col;
                double s = 0.0;
                for (int c = 0; c < hd; ++c) s += qi[c] * kj[c];
                s *= scale;
                row[j] = s;
                if (s > mx) mx = s;
            }
            double z = 0.0;
            for (int j = 0; j < attn_len; ++j) {
                row[j] = std::exp(row[j] - mx);
                z += row[j];
            }
            const double inv_z = 1.0 / z;
            for (int j = 0; j < attn_len; ++j) row[j] *= inv_z;
            for (int j = attn_len; j < seq_len; ++j) row[j] = 0.0;

            double* mi = mix + static_cast<size_t>(i) * dim + col;
            for (int c = 0; c < hd; ++c) mi[c] = 0.0;
            for (int j = 0; j < attn_len; ++j) {
                const double p = row[j];
                const double* vj = v + static_cast<size_t>(j) * dim + col;
                for (int c = 0; c < hd; ++c) mi[c] += p * vj[c];
            }
        }
    }
}

void attention_bwd(const double* q, const double* k, const double* v, const double* att,
                   const double* dmix, double* dq, double* dk, double* dv, int seq_len, int dim,
                   int n_heads, int attn_len) {
    const int hd = dim / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> dp(static_cast<size_t>(attn_len));
    for (int h = 0; h < n_heads; ++h) {
        const int col = h * hd;
        for (int i = 0; i < seq_len; ++i) {
            const double* row = att + (static_cast<size_t>(h) * seq_len + i) * seq_len;
            const double* dmi = dmix + static_cast<size_t>(i) * dim + col;

            double sum_pd = 0.0;
            for (int j = 0; j < attn_len; ++j) {
                const double* vj = v + static_cast<size_t>(j) * dim + col;
                double* dvj = dv + static_cast<size_t>(j) * dim + col;
                double acc = 0.0;
                const double p = row[j];
                for (int c = 0; c < hd; ++c) {
                    acc += dmi[c] * vj[c];
                    dvj[c] += p * dmi[c];
                }
                dp[static_cast<size_t>(j)] = acc;
                sum_pd += p * acc;
            }
            const double* qi = q + static_cast<size_t>(i) * dim + col;
            double* dqi = dq + static_cast<size_t>(i) * dim + col;
            for (int j = 0; j < attn_len; ++j) {
                const double ds = row[j] * (dp[static_cast<size_t>(j)] - sum_pd) * scale;
                if (ds == 0.0) continue;
                const double* kj = k + static_cast<size_t>(j) * dim + col;
                double* dkj = dk + static_cast<size_t>(j) * dim + col;
                for (int c = 0; c < hd; ++c) {
                    dqi[c] += ds * kj[c];
                    dkj[c] += ds * qi[c];
                }
            }
        }
    }
}

void apply_dropout(std::vector<double>& x, std::vector<double>& mask, double rate, Rng* rng) {
    if (rate <= 0.0 || rng == nullptr) return;
    const double keep = 1.0 - rate;
    const double inv = 1.0 / keep;
    mask.resize(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        mask[i] = rng->uniform() < keep ? inv : 0.0;
        x[i] *= mask[i];
    }
}

// d_branch = d ⊙ mask (or a plain copy when dropout was off)
std::vector<double> dropout_bwd(const std::vector<double>& d, const std::vector<double>& mask) {
    std::vector<double> out = d;
    if (!mask.empty()) {
        for (size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    }
    return out;
}

StackCache stack_forward(const ModelParams& params, const TokenSeq& seq, const std::string& side,
                         int n_layers, std::span<const double> slot0, Rng* dropout_rng) {
    const ModelConfig& cfg = params.config;
    const int d = cfg.hidden_dim, heads = cfg.n_heads, f = cfg.ffn_dim;
    const int seq_len = static_cast<int>(seq.ids.size());
    const int max_len = side == "enc" ? cfg.max_enc_len : cfg.max_dec_len;
    if (seq_len < 1 || seq_len > max_len)
        throw std::invalid_argument(side + " sequence length " + std::to_string(seq_len) +
                                    " outside [1, " + std::to_string(max_len) + "]");
    if (seq.attention_len < 1 || seq.attention_len > seq_len)
        throw std::invalid_argument("attention_len out of range");
    if (seq.ids[0] != Vocabulary::kCls) throw std::invalid_argument("position 0 must be [CLS]");
    for (int id : seq.ids) {
        if (id < 0 || id >= cfg.vocab_size)
            throw std::invalid_argument("token id out of range: " + std::to_string(id));
    }
    if (!slot0.empty() && static_cast<int>(slot0.size()) != d)
        throw std::invalid_argument("context embedding dim mismatch");

    StackCache cache;
    cache.seq_len = seq_len;
    cache.attn_len = seq.attention_len;
    cache.ids = seq.ids;
    cache.slot0_injected = !slot0.empty();

    auto tok = params.store.tensor("tok_emb");
    auto pos = params.store.tensor(side + ".pos_emb");
    cache.emb.resize(static_cast<size_t>(seq_len) * d);
    for (int p = 0; p < seq_len; ++p) {
        double* row = cache.emb.data() + static_cast<size_t>(p) * d;
        if (p == 0 && cache.slot0_injected) {
            std::memcpy(row, slot0.data(), sizeof(double) * static_cast<size_t>(d));
        } else {
            const double* te = tok.data() + static_cast<size_t>(seq.ids[static_cast<size_t>(p)]) * d;
            const double* pe = pos.data() + static_cast<size_t>(p) * d;
            for (int i = 0; i < d; ++i) row[i] = te[i] + pe[i];
        }
    }
    apply_dropout(cache.emb, cache.drop_emb, cfg.dropout_rate, dropout_rng);

    std::vector<double> x = cache.emb;
    cache.layers.resize(static_cast<size_t>(n_layers));
    for (int l = 0; l < n_layers; ++l) {
        LayerCache& lc = cache.layers[static_cast<size_t>(l)];
        auto t = layer_refs(params.store, side, l);
        lc.x_in = x;
        lc.ln1_out.resize(x.size());
        lc.ln1_mean.resize(static_cast<size_t>(seq_len));
        lc.ln1_rstd.resize(static_cast<size_t>(seq_len));
        layernorm_fwd(lc.x_in.data(), t.ln1_g.data(), t.ln1_b.data(), lc.ln1_out.data(),
                      lc.ln1_mean.data(), lc.ln1_rstd.data(), seq_len, d, cfg.layernorm_eps);

        lc.q.resize(x.size());
        lc.k.resize(x.size());
        lc.v.resize(x.size());
        linear_fwd(lc.ln1_out.data(), t.wq.data(), t.bq.data(), lc.q.data(), seq_len, d, d);
        linear_fwd(lc.ln1_out.data(), t.wk.data(), t.bk.data(), lc.k.data(), seq_len, d, d);
        linear_fwd(lc.ln1_out.data(), t.wv.data(), t.bv.data(), lc.v.data(), seq_len, d, d);

        lc.att.assign(static_cast<size_t>(heads) * seq_len * seq_len, 0.0);
        lc.att_mix.resize(x.size());
        attention_fwd(lc.q.data(), lc.k.data(), lc.v.data(), lc.att.data(), lc.att_mix.data(),
                      seq_len, d, heads, cache.attn_len);

        std::vector<double> proj(x.size());
        linear_fwd(lc.att_mix.data(), t.wo.data(), t.bo.data(), proj.data(), seq_len, d, d);
        apply_dropout(proj, lc.drop_attn, cfg.dropout_rate, dropout_rng);
        for (size_t i = 0; i < x.size(); ++i) x[i] += proj[i];
        lc.x_mid = x;

        lc.ln2_out.resize(x.size());
        lc.ln2_mean.resize(static_cast<size_t>(seq_len));
        lc.ln2_rstd.resize(static_cast<size_t>(seq_len));
        layernorm_fwd(lc.x_mid.data(), t.ln2_g.data(), t.ln2_b.data(), lc.ln2_out.data(),
                      lc.ln2_mean.data(), lc.ln2_rstd.data(), seq_len, d, cfg.layernorm_eps);

        lc.ffn_pre.resize(static_cast<size_t>(seq_len) * f);
        linear_fwd(lc.ln2_out.data(), t.w1.data(), t.b1.data(), lc.ffn_pre.data(), seq_len, d, f);
        lc.ffn_act.resize(lc.ffn_pre.size());
        for (size_t i = 0; i < lc.ffn_pre.size(); ++i) lc.ffn_act[i] = gelu(lc.ffn_pre[i]);

        std::vector<double> ffn_out(x.size());
        linear_fwd(lc.ffn_act.data(), t.w2.data(), t.b2.data(), ffn_out.data(), seq_len, f, d);
        apply_dropout(ffn_out, lc.drop_ffn, cfg.dropout_rate, dropout_rng);
        for (size_t i = 0; i < x.size(); ++i) x[i] += ffn_out[i];
    }

    cache.lnf_in = x;
    cache.lnf_mean.resize(static_cast<size_t>(seq_len));
    cache.lnf_rstd.resize(static_cast<size_t>(seq_len));
    cache.out.resize(x.size());
    auto gf = params.store.tensor(side + ".lnf.g");
    auto bf = params.store.tensor(side + ".lnf.b");
    layernorm_fwd(cache.lnf_in.data(), gf.data(), bf.data(), cache.out.data(), cache.lnf_mean.data(),
                  cache.lnf_rstd.data(), seq_len, d, cfg.layernorm_eps);
    return cache;
}

// Returns the gradient w.r.t. the slot-0 injected embedding when the cache
// came from a decoder pass; empty otherwise.
std::vector<double> stack_backward(const ModelParams& params, const StackCache& cache,
                                   const std::string& side, int n_layers,
                                   const std::vector<double>& d_out, ParamStore& grads) {
    const ModelConfig& cfg = params.config;
    const int d = cfg.hidden_dim, heads = cfg.n_heads, f = cfg.ffn_dim;
    const int seq_len = cache.seq_len;
    if (d_out.size() != cache.out.size()) throw std::invalid_argument("d_hidden shape mismatch");

    std::vector<double> dx(d_out.size(), 0.0);
    {
        auto gf = params.store.tensor(side + ".lnf.g");
        auto dgf = grads.tensor(side + ".lnf.g");
        auto dbf = grads.tensor(side + ".lnf.b");
        layernorm_bwd(cache.lnf_in.data(), gf.data(), cache.lnf_mean.data(), cache.lnf_rstd.data(),
                      d_out.data(), dx.data(), dgf.data(), dbf.data(), seq_len, d);
    }

    for (int l = n_layers - 1; l >= 0; --l) {
        const LayerCache& lc = cache.layers[static_cast<size_t>(l)];
        auto t = layer_refs(params.store, side, l);
        auto g = layer_refs(grads, side, l);

        // x_out = x_mid + drop(W2 * gelu(W1 * ln2(x_mid)))
        std::vector<double> d_ffn_out = dropout_bwd(dx, lc.drop_ffn);
        std::vector<double> d_ffn_act(static_cast<size_t>(seq_len) * f, 0.0);
        linear_bwd(lc.ffn_act.data(), t.w2.data(), d_ffn_out.data(), d_ffn_act.data(), g.w2.data(),
                   g.b2.data(), seq_len, f, d);
        for (size_t i = 0; i < d_ffn_act.size(); ++i) d_ffn_act[i] *= gelu_grad(lc.ffn_pre[i]);
        std::vector<double> d_ln2_out(dx.size(), 0.0);
        linear_bwd(lc.ln2_out.data(), t.w1.data(), d_ffn_act.data(), d_ln2_out.data(), g.w1.data(),
                   g.b1.data(), seq_len, d, f);
        layernorm_bwd(lc.x_mid.data(), t.ln2_g.data(), lc.ln2_mean.data(), lc.ln2_rstd.data(),
                      d_ln2_out.data(), dx.data(), g.ln2_g.data(), g.ln2_b.data(), seq_len, d);

        // x_mid = x_in + drop(Wo * attention(ln1(x_in)))
        std::vector<double> d_proj = dropout_bwd(dx, lc.drop_attn);
        std::vector<double> d_mix(dx.size(), 0.0);
        linear_bwd(lc.att_mix.data(), t.wo.data(), d_proj.data(), d_mix.data(), g.wo.data(),
                   g.bo.data(), seq_len, d, d);
        std::vector<double> dq(dx.size(), 0.0), dk(dx.size(), 0.0), dv(dx.size(), 0.0);
        attention_bwd(lc.q.data(), lc.k.data(), lc.v.data(), lc.att.data(), d_mix.data(), dq.data(),
                      dk.data(), dv.data(), seq_len, d, heads, cache.attn_len);
        std::vector<double> d_ln1_out(dx.size(), 0.0);
        linear_bwd(lc.ln1_out.data(), t.wq.data(), dq.data(), d_ln1_out.data(), g.wq.data(),
                   g.bq.data(), seq_len, d, d);
        linear_bwd(lc.ln1_out.data(), t.wk.data(), dk.data(), d_ln1_out.data(), g.wk.data(),
                   g.bk.data(), seq_len, d, d);
        linear_bwd(lc.ln1_out.data(), t.wv.data(), dv.data(), d_ln1_out.data(), g.wv.data(),
                   g.bv.data(), seq_len, d, d);
        layernorm_bwd(lc.x_in.data(), t.ln1_g.data(), lc.ln1_mean.data(), lc.ln1_rstd.data(),
                      d_ln1_out.data(), dx.data(), g.ln1_g.data(), g.ln1_b.data(), seq_len, d);
    }

    std::vector<double> d_emb = dropout_bwd(dx, cache.drop_emb);
    auto d_tok = grads.tensor("tok_emb");
    auto d_pos = grads.tensor(side + ".pos_emb");
    std::vector<double> d_slot0;
    int start = 0;
    if (cache.slot0_injected) {
        d_slot0.assign(d_emb.begin(), d_emb.begin() + d);
        start = 1;
    }
    for (int p = start; p < seq_len; ++p) {
        const double* row = d_emb.data() + static_cast<size_t>(p) * d;
        double* te = d_tok.data() + static_cast<size_t>(cache.ids[static_cast<size_t>(p)]) * d;
        double* pe = d_pos.data() + static_cast<size_t>(p) * d;
        for (int i = 0; i < d; ++i) {
            te[i] += row[i];
            pe[i] += row[i];
        }
    }
    return d_slot0;
}

// Stable softmax cross-entropy for one logit row; returns the loss and
// writes (softmax - onehot) * scale into d_logits.
double softmax_ce_row(const double* logits, int vocab, int label, double scale, double* d_logits) {
    double mx = logits[0];
    for (int v = 1; v < vocab; ++v) mx = std::max(mx, logits[v]);
    double z = 0.0;
    for (int v = 0; v < vocab; ++v) z += std::exp(logits[v] - mx);
    const double log_z = std::log(z) + mx;
    if (d_logits != nullptr) {
        const double inv_z = 1.0 / z;
        for (int v = 0; v < vocab; ++v) d_logits[v] = std::exp(logits[v] - mx) * inv_z * scale;
        d_logits[label] -= scale;
    }
    return log_z - logits[label];
}

// Tied-head MLM loss over the masked positions of one example. Accumulates
// head gradients and the d_hidden rows feeding the stack backward.
double mlm_loss_and_grads(const ModelParams& params, const StackCache& cache,
                          const std::vector<int>& positions, const std::vector<int>& labels,
                          double scale, ParamStore& grads, std::vector<double>& d_hidden) {
    const int d = params.config.hidden_dim;
    const int vocab = params.config.vocab_size;
    auto emb = params.store.tensor("tok_emb");
    auto bias = params.store.tensor("mlm.bias");
    auto d_emb = grads.tensor("tok_emb");
    auto d_bias = grads.tensor("mlm.bias");

    std::vector<double> logits(static_cast<size_t>(vocab));
    std::vector<double> d_logits(static_cast<size_t>(vocab));
    double ce_sum = 0.0;
    for (size_t p = 0; p < positions.size(); ++p) {
        const int pos = positions[p];
        if (pos < 0 || pos >= cache.seq_len) throw std::invalid_argument("masked position out of range");
        const double* h = cache.out.data() + static_cast<size_t>(pos) * d;
        for (int v = 0; v < vocab; ++v) {
            const double* ev = emb.data() + static_cast<size_t>(v) * d;
            double s = bias[static_cast<size_t>(v)];
            for (int i = 0; i < d; ++i) s += h[i] * ev[i];
            logits[static_cast<size_t>(v)] = s;
        }
        ce_sum += softmax_ce_row(logits.data(), vocab, labels[p], scale, d_logits.data());

        double* dh = d_hidden.data() + static_cast<size_t>(pos) * d;
        for (int v = 0; v < vocab; ++v) {
            const double dl = d_logits[static_cast<size_t>(v)];
            d_bias[static_cast<size_t>(v)] += dl;
            if (dl == 0.0) continue;
            const double* ev = emb.data() + static_cast<size_t>(v) * d;
            double* dev = d_emb.data() + static_cast<size_t>(v) * d;
            for (int i = 0; i < d; ++i) {
                dh[i] += dl * ev[i];
                dev[i] += dl * h[i];
            }
        }
    }
    return ce_sum;
}

}  // namespace

ParamStore build_param_store(const ModelConfig& config, bool encoder_only) {
    config.validate();
    const int d = config.hidden_dim, f = config.ffn_dim;
    ParamStore store;
    store.add("tok_emb", {config.vocab_size, d});
    store.add("enc.pos_emb", {config.max_enc_len, d});
    for (int l = 0; l < config.n_enc_layers; ++l) add_layer_tensors(store, "enc", l, d, f);
    store.add("enc.lnf.g", {d});
    store.add("enc.lnf.b", {d});
    if (!encoder_only) {
        if (config.n_dec_layers > 0) {
            store.add("dec.pos_emb", {config.max_dec_len, d});
            for (int l = 0; l < config.n_dec_layers; ++l) add_layer_tensors(store, "dec", l, d, f);
            store.add("dec.lnf.g", {d});
            store.add("dec.lnf.b", {d});
        }
        store.add("mlm.bias", {config.vocab_size});
    }
    return store;
}

ModelParams init_params(const ModelConfig& config, uint64_t seed) {
    ModelParams params{config, build_param_store(config)};
    Rng rng(seed);
    for (const TensorSpec& spec : params.store.specs()) {
        auto t = params.store.tensor(spec.name);
        if (spec.shape.size() >= 2) {
            for (double& w : t) w = rng.truncated_normal(0.02);
        } else if (spec.name.ends_with(".g")) {
            for (double& w : t) w = 1.0;
        }  // 1-D biases stay zero
    }
    return params;
}

StackCache encoder_forward_cached(const ModelParams& params, const TokenSeq& seq, Rng* dropout_rng) {
    return stack_forward(params, seq, "enc", params.config.n_enc_layers, {}, dropout_rng);
}

StackCache decoder_forward_cached(const ModelParams& params, std::span<const double> cls_c,
                                  const TokenSeq& seq, Rng* dropout_rng) {
    if (params.config.n_dec_layers < 1)
        throw std::invalid_argument("model has no decoder (n_dec_layers = 0)");
    if (static_cast<int>(cls_c.size()) != params.config.hidden_dim)
        throw std::invalid_argument("context embedding dim mismatch");
    return stack_forward(params, seq, "dec", params.config.n_dec_layers, cls_c, dropout_rng);
}

void encoder_backward(const ModelParams& params, const StackCache& cache,
                      const std::vector<double>& d_hidden, ParamStore& grads) {
    stack_backward(params, cache, "enc", params.config.n_enc_layers, d_hidden, grads);
}

std::vector<double> decoder_backward(const ModelParams& params, const StackCache& cache,
                                     const std::vector<double>& d_hidden, ParamStore& grads) {
    return stack_backward(params, cache, "dec", params.config.n_dec_layers, d_hidden, grads);
}

EncoderOutput encode(const ModelParams& params, const TokenSeq& input) {
    StackCache cache = encoder_forward_cached(params, input);
    EncoderOutput out;
    out.seq_len = cache.seq_len;
    out.hidden = std::move(cache.out);
    out.cls_embedding.assign(out.hidden.begin(), out.hidden.begin() + params.config.hidden_dim);
    return out;
}

EncoderOutput encode(const ModelParams& params, const MaskingOutcome& input) {
    return encode(params, input.masked_ids);
}

DecoderOutput decode(const ModelParams& params, std::span<const double> cls_c,
                     const MaskingOutcome& input) {
    StackCache cache = decoder_forward_cached(params, cls_c, input.masked_ids);
    DecoderOutput out;
    out.seq_len = cache.seq_len;
    out.hidden = std::move(cache.out);
    out.cls_slot.assign(out.hidden.begin(), out.hidden.begin() + params.config.hidden_dim);
    return out;
}

std::vector<double> mlm_logits(const ModelParams& params, const std::vector<double>& hidden,
                               int seq_len, const std::vector<int>& positions) {
    const int d = params.config.hidden_dim;
    const int vocab = params.config.vocab_size;
    if (hidden.size() != static_cast<size_t>(seq_len) * d)
        throw std::invalid_argument("hidden matrix shape mismatch");
    auto emb = params.store.tensor("tok_emb");
    auto bias = params.store.tensor("mlm.bias");
    std::vector<double> logits(positions.size() * static_cast<size_t>(vocab));
    for (size_t p = 0; p < positions.size(); ++p) {
        const int pos = positions[p];
        if (pos < 0 || pos >= seq_len)
            throw std::invalid_argument("logit position out of range: " + std::to_string(pos));
        const double* h = hidden.data() + static_cast<size_t>(pos) * d;
        double* row = logits.data() + p * static_cast<size_t>(vocab);
        for (int v = 0; v < vocab; ++v) {
            const double* ev = emb.data() + static_cast<size_t>(v) * d;
            double s = bias[static_cast<size_t>(v)];
            for (int i = 0; i < d; ++i) s += h[i] * ev[i];
            row[v] = s;
        }
    }
    return logits;
}

std::pair<LossReport, ParamStore> forward_backward(const ModelParams& params,
                                                   const std::vector<MaskingOutcome>& enc_batch,
                                                   const std::vector<MaskingOutcome>& dec_batch,
                                                   const FwdBwdOptions& options) {
    const ModelConfig& cfg = params.config;
    const bool use_decoder = options.dec_loss && cfg.n_dec_layers > 0;
    if (enc_batch.empty()) throw std::invalid_argument("empty encoder batch");
    if (use_decoder && dec_batch.size() != enc_batch.size())
        throw std::invalid_argument("encoder and decoder batches must be aligned");

    long long m_enc = 0, m_dec = 0;
    for (const auto& o : enc_batch) m_enc += static_cast<long long>(o.masked_positions.size());
    if (use_decoder)
        for (const auto& o : dec_batch) m_dec += static_cast<long long>(o.masked_positions.size());

    LossReport report;
    report.enc_masked_tokens = m_enc;
    report.dec_masked_tokens = m_dec;
    report.enc_empty_warning = options.enc_loss && m_enc == 0;
    report.dec_empty_warning = use_decoder && m_dec == 0;

    const double enc_scale = m_enc > 0 ? 1.0 / static_cast<double>(m_enc) : 0.0;
    const double dec_scale = m_dec > 0 ? 1.0 / static_cast<double>(m_dec) : 0.0;

    ParamStore grads = params.store.zeros_like();
    double enc_ce = 0.0, dec_ce = 0.0;
    const int d = cfg.hidden_dim;

    // Per-example gradients accumulate in batch index order.
    for (size_t i = 0; i < enc_batch.size(); ++i) {
        StackCache enc_cache =
            encoder_forward_cached(params, enc_batch[i].masked_ids, options.dropout_rng);
        std::vector<double> d_enc_hidden(enc_cache.out.size(), 0.0);
        bool enc_has_grad = false;

        if (options.enc_loss && !enc_batch[i].masked_positions.empty()) {
            enc_ce += mlm_loss_and_grads(params, enc_cache, enc_batch[i].masked_positions,
                                         enc_batch[i].original_ids, enc_scale, grads, d_enc_hidden);
            enc_has_grad = true;
        }

        if (use_decoder) {
            std::span<const double> cls(enc_cache.out.data(), static_cast<size_t>(d));
            StackCache dec_cache =
                decoder_forward_cached(params, cls, dec_batch[i].masked_ids, options.dropout_rng);
            if (!dec_batch[i].masked_positions.empty()) {
                std::vector<double> d_dec_hidden(dec_cache.out.size(), 0.0);
                dec_ce += mlm_loss_and_grads(params, dec_cache, dec_batch[i].masked_positions,
                                             dec_batch[i].original_ids, dec_scale, grads,
                                             d_dec_hidden);
                std::vector<double> d_cls = decoder_backward(params, dec_cache, d_dec_hidden, grads);
                if (!options.detach_cls) {
                    for (int c = 0; c < d; ++c) d_enc_hidden[static_cast<size_t>(c)] += d_cls[static_cast<size_t>(c)];
                    enc_has_grad = true;
                }
            }
        }

        if (enc_has_grad) encoder_backward(params, enc_cache, d_enc_hidden, grads);
    }

    report.l_enc = enc_ce * enc_scale;
    report.l_dec = dec_ce * dec_scale;
    report.l_total = report.l_enc + report.l_dec;
    return {report, std::move(grads)};
}

}  // namespace dialmae
