// SPDX-License-Identifier: Apache-2.0
#include "mala/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace mala {

using nlohmann::ordered_json;

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInitSigma = 0.02;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

void fill_gaussian(Matrix& m, Rng& rng, double sigma) {
    for (double& v : m.data) v = rng.gaussian(sigma);
}

void layernorm_forward(const Matrix& x, const Param& g, const Param& b, Matrix& out,
                       std::vector<double>& mean, std::vector<double>& rstd) {
    const std::size_t d = x.cols;
    if (out.rows != x.rows || out.cols != d) out = Matrix(x.rows, d);
    mean.resize(x.rows);
    rstd.resize(x.rows);
    for (std::size_t t = 0; t < x.rows; ++t) {
        const double* xr = x.row(t);
        double mu = 0.0;
        for (std::size_t i = 0; i < d; ++i) mu += xr[i];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + kLnEps);
        mean[t] = mu;
        rstd[t] = rs;
        double* outr = out.row(t);
        for (std::size_t i = 0; i < d; ++i)
            outr[i] = (xr[i] - mu) * rs * g.v.data[i] + b.v.data[i];
    }
}

void layernorm_backward(const Matrix& dout, const Matrix& x, Param& g, Param& b,
                        const std::vector<double>& mean, const std::vector<double>& rstd,
                        Matrix& dx) {
    const std::size_t d = x.cols;
    for (std::size_t t = 0; t < x.rows; ++t) {
        const double* xr = x.row(t);
        const double* dr = dout.row(t);
        double* dxr = dx.row(t);
        const double mu = mean[t];
        const double rs = rstd[t];
        // dhat_i = dout_i * g_i ; dx = rs*(dhat - mean(dhat) - xhat*mean(dhat*xhat))
        double mean_dhat = 0.0, mean_dhat_xhat = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double xhat = (xr[i] - mu) * rs;
            const double dhat = dr[i] * g.v.data[i];
            mean_dhat += dhat;
            mean_dhat_xhat += dhat * xhat;
            g.g.data[i] += dr[i] * xhat;
            b.g.data[i] += dr[i];
        }
        mean_dhat /= static_cast<double>(d);
        mean_dhat_xhat /= static_cast<double>(d);
        for (std::size_t i = 0; i < d; ++i) {
            const double xhat = (xr[i] - mu) * rs;
            const double dhat = dr[i] * g.v.data[i];
            dxr[i] += rs * (dhat - mean_dhat - xhat * mean_dhat_xhat);
        }
    }
}

struct LinCache {
    Matrix xd;     // lora-path input after dropout (empty when no lora)
    Matrix a_out;  // T x r
    Matrix dmask;  // elementwise scale used by dropout (empty when unused)
};

void linear_forward(const Linear& lin, double lora_scale, double dropout_p, Rng* rng,
                    const Matrix& x, Matrix& out, LinCache* cache) {
    matmul_wt(x, lin.w.v, out);
    if (!lin.lora) return;
    const Matrix* lx = &x;
    if (cache) {
        if (dropout_p > 0.0 && rng) {
            cache->dmask = Matrix(x.rows, x.cols);
            cache->xd = Matrix(x.rows, x.cols);
            const double keep = 1.0 - dropout_p;
            for (std::size_t i = 0; i < x.data.size(); ++i) {
                const double s = (rng->uniform() < keep) ? 1.0 / keep : 0.0;
                cache->dmask.data[i] = s;
                cache->xd.data[i] = x.data[i] * s;
            }
        } else {
            cache->xd = x;
        }
        lx = &cache->xd;
    }
    Matrix a_out;
    matmul_wt(*lx, lin.lora->a.v, a_out);  // T x r
    Matrix delta;
    matmul_wt(a_out, lin.lora->b.v, delta);  // T x d_out
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += lora_scale * delta.data[i];
    if (cache) cache->a_out = std::move(a_out);
}

void linear_backward(Linear& lin, double lora_scale, const Matrix& x, const LinCache& cache,
                     const Matrix& dout, Matrix& dx) {
    matmul_wt_backward(x, lin.w.v, dout, dx, lin.w.g);
    if (!lin.lora) return;
    auto& lp = *lin.lora;
    // delta = scale * a_out * B^T  -> d a_out = scale * dout * B ; dB += scale * dout^T a_out
    Matrix d_aout(cache.a_out.rows, cache.a_out.cols);
    Matrix scaled_dout = dout;
    for (double& v : scaled_dout.data) v *= lora_scale;
    matmul_wt_backward(cache.a_out, lp.b.v, scaled_dout, d_aout, lp.b.g);
    // a_out = xd * A^T -> dxd, dA
    Matrix dxd(cache.xd.rows, cache.xd.cols);
    matmul_wt_backward(cache.xd, lp.a.v, d_aout, dxd, lp.a.g);
    if (cache.dmask.data.empty()) {
        for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dxd.data[i];
    } else {
        for (std::size_t i = 0; i < dx.data.size(); ++i)
            dx.data[i] += dxd.data[i] * cache.dmask.data[i];
    }
}

struct LayerCache {
    Matrix x_in, ln1_out;
    std::vector<double> m1, r1;
    Matrix q, k, v;
    std::vector<Matrix> probs;  // per head, T x T
    Matrix att_out, o;
    Matrix x_mid, ln2_out;
    std::vector<double> m2, r2;
    Matrix ff_pre, ff_act, ff_out;
    LinCache qc, kc, vc, oc, f1c, f2c;
};

struct Cache {
    Matrix x0;
    std::vector<LayerCache> layers;
    Matrix x_final, lnf_out;
    std::vector<double> mf, rf;
};

void attention_forward(const AdaptedModel& model, LayerCache& lc) {
    const std::size_t T = lc.q.rows;
    const std::size_t d = model.config.d_model;
    const std::size_t nh = model.config.n_heads;
    const std::size_t hd = d / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    lc.att_out = Matrix(T, d);
    lc.probs.assign(nh, Matrix());
    for (std::size_t h = 0; h < nh; ++h) {
        Matrix& p = lc.probs[h];
        p = Matrix(T, T);
        for (std::size_t i = 0; i < T; ++i) {
            double maxv = -1e300;
            for (std::size_t j = 0; j <= i; ++j) {
                double s = 0.0;
                const double* qi = lc.q.row(i) + h * hd;
                const double* kj = lc.k.row(j) + h * hd;
                for (std::size_t m = 0; m < hd; ++m) s += qi[m] * kj[m];
                s *= scale;
                p.at(i, j) = s;
                maxv = std::max(maxv, s);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                const double e = std::exp(p.at(i, j) - maxv);
                p.at(i, j) = e;
                sum += e;
            }
            for (std::size_t j = 0; j <= i; ++j) p.at(i, j) /= sum;
            double* outr = lc.att_out.row(i) + h * hd;
            for (std::size_t j = 0; j <= i; ++j) {
                const double pij = p.at(i, j);
                const double* vj = lc.v.row(j) + h * hd;
                for (std::size_t m = 0; m < hd; ++m) outr[m] += pij * vj[m];
            }
        }
    }
}

void attention_backward(const AdaptedModel& model, const LayerCache& lc, const Matrix& d_att_out,
                        Matrix& dq, Matrix& dk, Matrix& dv) {
    const std::size_t T = lc.q.rows;
    const std::size_t d = model.config.d_model;
    const std::size_t nh = model.config.n_heads;
    const std::size_t hd = d / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t h = 0; h < nh; ++h) {
        const Matrix& p = lc.probs[h];
        for (std::size_t i = 0; i < T; ++i) {
            const double* dor = d_att_out.row(i) + h * hd;
            // dp_ij = <dout_i, v_j>
            std::vector<double> dp(i + 1, 0.0);
            for (std::size_t j = 0; j <= i; ++j) {
                const double* vj = lc.v.row(j) + h * hd;
                double acc = 0.0;
                for (std::size_t m = 0; m < hd; ++m) acc += dor[m] * vj[m];
                dp[j] = acc;
                double* dvj = dv.row(j) + h * hd;
                const double pij = p.at(i, j);
                for (std::size_t m = 0; m < hd; ++m) dvj[m] += pij * dor[m];
            }
            double dot = 0.0;
            for (std::size_t j = 0; j <= i; ++j) dot += dp[j] * p.at(i, j);
            for (std::size_t j = 0; j <= i; ++j) {
                const double ds = p.at(i, j) * (dp[j] - dot) * scale;
                double* dqi = dq.row(i) + h * hd;
                double* dkj = dk.row(j) + h * hd;
                const double* kj = lc.k.row(j) + h * hd;
                const double* qi = lc.q.row(i) + h * hd;
                for (std::size_t m = 0; m < hd; ++m) {
                    dqi[m] += ds * kj[m];
                    dkj[m] += ds * qi[m];
                }
            }
        }
    }
}

Matrix run_forward(const AdaptedModel& model, std::span<const std::uint32_t> ids, Cache* cache,
                   Rng* dropout_rng, std::size_t stop_after_layer = static_cast<std::size_t>(-1),
                   Matrix* hidden_out = nullptr) {
    const std::size_t T = ids.size();
    const std::size_t d = model.config.d_model;
    if (T == 0) throw std::invalid_argument("empty input sequence");
    if (T > model.config.context_len)
        throw std::invalid_argument("sequence length " + std::to_string(T) +
                                    " exceeds context_len " +
                                    std::to_string(model.config.context_len));
    for (std::uint32_t id : ids)
        if (id >= model.config.vocab_size)
            throw std::out_of_range("token id out of vocabulary: " + std::to_string(id));

    const double lora_scale = model.lora ? model.lora->scale() : 0.0;
    const double dropout_p = model.lora ? model.lora->dropout : 0.0;

    Matrix x(T, d);
    for (std::size_t t = 0; t < T; ++t) {
        const double* er = model.tok_emb.v.row(ids[t]);
        const double* pr = model.pos_emb.v.row(t);
        double* xr = x.row(t);
        for (std::size_t i = 0; i < d; ++i) xr[i] = er[i] + pr[i];
    }
    if (cache) cache->x0 = x;
    if (cache) cache->layers.resize(model.config.n_layers);

    for (std::size_t l = 0; l < model.config.n_layers; ++l) {
        const LayerParams& lp = model.layers[l];
        LayerCache local;
        LayerCache& lc = cache ? cache->layers[l] : local;
        lc.x_in = x;
        layernorm_forward(lc.x_in, lp.ln1_g, lp.ln1_b, lc.ln1_out, lc.m1, lc.r1);
        linear_forward(lp.wq, lora_scale, dropout_p, dropout_rng, lc.ln1_out, lc.q, &lc.qc);
        linear_forward(lp.wk, lora_scale, dropout_p, dropout_rng, lc.ln1_out, lc.k, &lc.kc);
        linear_forward(lp.wv, lora_scale, dropout_p, dropout_rng, lc.ln1_out, lc.v, &lc.vc);
        attention_forward(model, lc);
        linear_forward(lp.wo, lora_scale, dropout_p, dropout_rng, lc.att_out, lc.o, &lc.oc);
        lc.x_mid = Matrix(T, d);
        for (std::size_t i = 0; i < x.data.size(); ++i)
            lc.x_mid.data[i] = lc.x_in.data[i] + lc.o.data[i];

        layernorm_forward(lc.x_mid, lp.ln2_g, lp.ln2_b, lc.ln2_out, lc.m2, lc.r2);
        linear_forward(lp.ff1, lora_scale, dropout_p, dropout_rng, lc.ln2_out, lc.ff_pre, &lc.f1c);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t i = 0; i < model.config.d_ff; ++i)
                lc.ff_pre.at(t, i) += lp.ff1_b.v.data[i];
        lc.ff_act = Matrix(T, model.config.d_ff);
        for (std::size_t i = 0; i < lc.ff_pre.data.size(); ++i)
            lc.ff_act.data[i] = gelu(lc.ff_pre.data[i]);
        linear_forward(lp.ff2, lora_scale, dropout_p, dropout_rng, lc.ff_act, lc.ff_out, &lc.f2c);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t i = 0; i < d; ++i) lc.ff_out.at(t, i) += lp.ff2_b.v.data[i];

        x = Matrix(T, d);
        for (std::size_t i = 0; i < x.data.size(); ++i)
            x.data[i] = lc.x_mid.data[i] + lc.ff_out.data[i];

        if (stop_after_layer == l + 1 && hidden_out) {
            *hidden_out = x;
            return {};
        }
    }

    if (cache) cache->x_final = x;
    Matrix lnf_out;
    std::vector<double> mf_local, rf_local;
    auto& mf = cache ? cache->mf : mf_local;
    auto& rf = cache ? cache->rf : rf_local;
    layernorm_forward(x, model.lnf_g, model.lnf_b, lnf_out, mf, rf);
    if (cache) cache->lnf_out = lnf_out;

    Matrix logits;
    matmul_wt(lnf_out, model.lm_head.v, logits);
    return logits;
}

/// Softmax cross-entropy over logits rows; fills dlogits when given.
double ce_loss(const Matrix& logits, std::span<const std::uint32_t> targets,
               std::span<const std::uint8_t> mask, Matrix* dlogits) {
    const std::size_t T = logits.rows;
    const std::size_t V = logits.cols;
    std::size_t n_scored = 0;
    for (std::size_t t = 0; t < T; ++t)
        if (mask.empty() || mask[t]) ++n_scored;
    if (n_scored == 0) throw std::invalid_argument("all positions masked");

    double loss = 0.0;
    if (dlogits) *dlogits = Matrix(T, V);
    for (std::size_t t = 0; t < T; ++t) {
        if (!mask.empty() && !mask[t]) continue;
        const double* lr = logits.row(t);
        double maxv = *std::max_element(lr, lr + V);
        double sum = 0.0;
        for (std::size_t i = 0; i < V; ++i) sum += std::exp(lr[i] - maxv);
        const double logz = maxv + std::log(sum);
        const std::uint32_t tgt = targets[t];
        if (tgt >= V) throw std::out_of_range("target id out of vocabulary");
        loss += logz - lr[tgt];
        if (dlogits) {
            double* dr = dlogits->row(t);
            for (std::size_t i = 0; i < V; ++i)
                dr[i] = std::exp(lr[i] - logz) / static_cast<double>(n_scored);
            dr[tgt] -= 1.0 / static_cast<double>(n_scored);
        }
    }
    return loss / static_cast<double>(n_scored);
}

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0)
        throw std::invalid_argument("model dimensions must be positive");
    if (d_model % n_heads != 0)
        throw std::invalid_argument("d_model must be divisible by n_heads");
    if (context_len < 2) throw std::invalid_argument("context_len must be >= 2");
}

std::string to_string(LoraTarget t) {
    switch (t) {
        case LoraTarget::query: return "query";
        case LoraTarget::key: return "key";
        case LoraTarget::value: return "value";
        case LoraTarget::output: return "output";
        case LoraTarget::ff: return "ff";
    }
    throw std::logic_error("bad LoraTarget");
}

LoraTarget lora_target_from_string(std::string_view s) {
    if (s == "query") return LoraTarget::query;
    if (s == "key") return LoraTarget::key;
    if (s == "value") return LoraTarget::value;
    if (s == "output") return LoraTarget::output;
    if (s == "ff") return LoraTarget::ff;
    throw std::invalid_argument("unknown LoRA target: " + std::string(s));
}

std::string to_string(ResizePolicy p) {
    switch (p) {
        case ResizePolicy::mean_noise: return "mean_noise";
        case ResizePolicy::zeros: return "zeros";
        case ResizePolicy::gaussian: return "gaussian";
    }
    throw std::logic_error("bad ResizePolicy");
}

ResizePolicy resize_policy_from_string(std::string_view s) {
    if (s == "mean_noise") return ResizePolicy::mean_noise;
    if (s == "zeros") return ResizePolicy::zeros;
    if (s == "gaussian") return ResizePolicy::gaussian;
    throw std::invalid_argument("unknown resize policy: " + std::string(s));
}

std::vector<std::pair<std::string, Param*>> AdaptedModel::params() {
    std::vector<std::pair<std::string, Param*>> out;
    out.emplace_back("tok_emb", &tok_emb);
    out.emplace_back("pos_emb", &pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        LayerParams& lp = layers[l];
        out.emplace_back(p + "ln1_g", &lp.ln1_g);
        out.emplace_back(p + "ln1_b", &lp.ln1_b);
        auto add_linear = [&](const std::string& name, Linear& lin) {
            out.emplace_back(p + name + ".w", &lin.w);
            if (lin.lora) {
                out.emplace_back(p + name + ".lora_a", &lin.lora->a);
                out.emplace_back(p + name + ".lora_b", &lin.lora->b);
            }
        };
        add_linear("attn_q", lp.wq);
        add_linear("attn_k", lp.wk);
        add_linear("attn_v", lp.wv);
        add_linear("attn_o", lp.wo);
        out.emplace_back(p + "ln2_g", &lp.ln2_g);
        out.emplace_back(p + "ln2_b", &lp.ln2_b);
        add_linear("ff1", lp.ff1);
        out.emplace_back(p + "ff1_b", &lp.ff1_b);
        add_linear("ff2", lp.ff2);
        out.emplace_back(p + "ff2_b", &lp.ff2_b);
    }
    out.emplace_back("lnf_g", &lnf_g);
    out.emplace_back("lnf_b", &lnf_b);
    out.emplace_back("lm_head", &lm_head);
    return out;
}

std::vector<std::pair<std::string, const Param*>> AdaptedModel::params() const {
    auto mut = const_cast<AdaptedModel*>(this)->params();
    std::vector<std::pair<std::string, const Param*>> out;
    out.reserve(mut.size());
    for (auto& [n, p] : mut) out.emplace_back(n, p);
    return out;
}

ParamCounts AdaptedModel::count_params() const {
    ParamCounts c;
    for (const auto& [name, p] : params()) {
        c.total += p->v.size();
        if (!p->frozen) c.trainable += p->v.size();
    }
    return c;
}

void AdaptedModel::zero_grads() {
    for (auto& [name, p] : params()) p->g.zero();
}

std::uint64_t AdaptedModel::frozen_digest() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, p] : params()) {
        if (!p->frozen) continue;
        h ^= fnv1a64(name);
        h *= 0x100000001b3ull;
        const auto* bytes = reinterpret_cast<const char*>(p->v.data.data());
        h ^= fnv1a64(std::string_view(bytes, p->v.data.size() * sizeof(double)));
        h *= 0x100000001b3ull;
    }
    return h;
}

AdaptedModel build_model(const ModelConfig& config) {
    config.validate();
    AdaptedModel model;
    model.config = config;
    Rng rng(config.seed);

    model.tok_emb.init_shape(config.vocab_size, config.d_model);
    fill_gaussian(model.tok_emb.v, rng, kInitSigma);
    model.pos_emb.init_shape(config.context_len, config.d_model);
    fill_gaussian(model.pos_emb.v, rng, kInitSigma);

    model.layers.resize(config.n_layers);
    for (auto& lp : model.layers) {
        auto init_ln = [&](Param& g, Param& b) {
            g.init_shape(1, config.d_model);
            std::fill(g.v.data.begin(), g.v.data.end(), 1.0);
            b.init_shape(1, config.d_model);
        };
        init_ln(lp.ln1_g, lp.ln1_b);
        init_ln(lp.ln2_g, lp.ln2_b);
        auto init_lin = [&](Linear& lin, std::size_t d_out, std::size_t d_in) {
            lin.w.init_shape(d_out, d_in);
            fill_gaussian(lin.w.v, rng, kInitSigma);
        };
        init_lin(lp.wq, config.d_model, config.d_model);
        init_lin(lp.wk, config.d_model, config.d_model);
        init_lin(lp.wv, config.d_model, config.d_model);
        init_lin(lp.wo, config.d_model, config.d_model);
        init_lin(lp.ff1, config.d_ff, config.d_model);
        lp.ff1_b.init_shape(1, config.d_ff);
        init_lin(lp.ff2, config.d_model, config.d_ff);
        lp.ff2_b.init_shape(1, config.d_model);
    }
    model.lnf_g.init_shape(1, config.d_model);
    std::fill(model.lnf_g.v.data.begin(), model.lnf_g.v.data.end(), 1.0);
    model.lnf_b.init_shape(1, config.d_model);
    model.lm_head.init_shape(config.vocab_size, config.d_model);
    fill_gaussian(model.lm_head.v, rng, kInitSigma);
    return model;
}

void resize_embeddings(AdaptedModel& model, std::size_t new_vocab_size, ResizePolicy policy,
                       std::uint64_t seed, double noise_sigma) {
    const std::size_t old_v = model.config.vocab_size;
    if (new_vocab_size < old_v)
        throw std::invalid_argument("shrinking the vocabulary is not supported");
    if (new_vocab_size == old_v) return;

    Rng rng(seed);
    const std::size_t d = model.config.d_model;
    auto grow = [&](Param& table) {
        Matrix next(new_vocab_size, d);
        std::copy(table.v.data.begin(), table.v.data.end(), next.data.begin());
        std::vector<double> mean(d, 0.0);
        for (std::size_t r = 0; r < old_v; ++r)
            for (std::size_t c = 0; c < d; ++c) mean[c] += table.v.at(r, c);
        for (double& m : mean) m /= static_cast<double>(old_v);
        for (std::size_t r = old_v; r < new_vocab_size; ++r) {
            for (std::size_t c = 0; c < d; ++c) {
                switch (policy) {
                    case ResizePolicy::mean_noise:
                        next.at(r, c) = mean[c] + rng.gaussian(noise_sigma);
                        break;
                    case ResizePolicy::zeros:
                        next.at(r, c) = 0.0;
                        break;
                    case ResizePolicy::gaussian:
                        next.at(r, c) = rng.gaussian(kInitSigma);
                        break;
                }
            }
        }
        const bool was_frozen = table.frozen;
        table.v = std::move(next);
        table.g = Matrix(new_vocab_size, d);
        table.adam_m = Matrix();
        table.adam_v = Matrix();
        table.frozen = was_frozen;
    };
    grow(model.tok_emb);
    grow(model.lm_head);
    model.config.vocab_size = new_vocab_size;
}

void attach_lora(AdaptedModel& model, const LoraConfig& config, std::uint64_t seed) {
    if (model.lora) throw std::logic_error("LoRA adapters already attached");
    if (config.rank == 0) throw std::invalid_argument("LoRA rank must be positive");
    Rng rng(seed);

    auto attach = [&](Linear& lin) {
        const std::size_t d_out = lin.w.v.rows;
        const std::size_t d_in = lin.w.v.cols;
        if (config.rank > std::min(d_in, d_out))
            throw std::invalid_argument("LoRA rank exceeds min(d_in, d_out)");
        LoraPair pair;
        pair.a.init_shape(config.rank, d_in);
        fill_gaussian(pair.a.v, rng, kInitSigma);
        pair.b.init_shape(d_out, config.rank);  // zero: adapter delta starts at 0
        lin.lora = std::move(pair);
    };

    for (auto& lp : model.layers) {
        for (LoraTarget t : config.targets) {
            switch (t) {
                case LoraTarget::query: attach(lp.wq); break;
                case LoraTarget::key: attach(lp.wk); break;
                case LoraTarget::value: attach(lp.wv); break;
                case LoraTarget::output: attach(lp.wo); break;
                case LoraTarget::ff:
                    attach(lp.ff1);
                    attach(lp.ff2);
                    break;
            }
        }
    }
    model.lora = config;

    // Freeze the base transformer; embeddings, head, and adapters stay live.
    for (auto& [name, p] : model.params()) {
        const bool adapter = name.ends_with(".lora_a") || name.ends_with(".lora_b");
        const bool live = adapter || name == "tok_emb" || name == "lm_head";
        p->frozen = !live;
    }
}

Matrix forward_logits(const AdaptedModel& model, std::span<const std::uint32_t> ids) {
    return run_forward(model, ids, nullptr, nullptr);
}

Matrix hidden_states(const AdaptedModel& model, std::span<const std::uint32_t> ids,
                     std::size_t layer_index) {
    if (layer_index > model.config.n_layers)
        throw std::out_of_range("layer index out of range");
    if (ids.empty()) throw std::invalid_argument("empty input sequence");
    if (layer_index == 0) {
        Matrix out(ids.size(), model.config.d_model);
        for (std::size_t t = 0; t < ids.size(); ++t) {
            if (ids[t] >= model.config.vocab_size)
                throw std::out_of_range("token id out of vocabulary");
            std::copy(model.tok_emb.v.row(ids[t]), model.tok_emb.v.row(ids[t]) + model.config.d_model,
                      out.row(t));
        }
        return out;
    }
    Matrix hidden;
    run_forward(model, ids, nullptr, nullptr, layer_index, &hidden);
    return hidden;
}

double forward_loss(const AdaptedModel& model, std::span<const std::uint32_t> input_ids,
                    std::span<const std::uint32_t> target_ids,
                    std::span<const std::uint8_t> mask) {
    Matrix logits = run_forward(model, input_ids, nullptr, nullptr);
    return ce_loss(logits, target_ids, mask, nullptr);
}

double forward_backward(AdaptedModel& model, std::span<const std::uint32_t> input_ids,
                        std::span<const std::uint32_t> target_ids,
                        std::span<const std::uint8_t> mask, Rng* dropout_rng) {
    if (target_ids.size() != input_ids.size())
        throw std::invalid_argument("targets must align with inputs");

    Cache cache;
    Matrix logits = run_forward(model, input_ids, &cache, dropout_rng);
    Matrix dlogits;
    const double loss = ce_loss(logits, target_ids, mask, &dlogits);

    const std::size_t T = input_ids.size();
    const std::size_t d = model.config.d_model;
    const double lora_scale = model.lora ? model.lora->scale() : 0.0;

    // lm head
    Matrix d_lnf(T, d);
    matmul_wt_backward(cache.lnf_out, model.lm_head.v, dlogits, d_lnf, model.lm_head.g);

    Matrix dx(T, d);
    layernorm_backward(d_lnf, cache.x_final, model.lnf_g, model.lnf_b, cache.mf, cache.rf, dx);

    for (std::size_t l = model.config.n_layers; l-- > 0;) {
        LayerParams& lp = model.layers[l];
        LayerCache& lc = cache.layers[l];

        // x_out = x_mid + ff_out
        Matrix& d_ffout = dx;  // alias: same gradient flows into the ff branch
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t i = 0; i < d; ++i) lp.ff2_b.g.data[i] += d_ffout.at(t, i);

        Matrix d_ffact(T, model.config.d_ff);
        linear_backward(lp.ff2, lora_scale, lc.ff_act, lc.f2c, d_ffout, d_ffact);

        Matrix d_ffpre(T, model.config.d_ff);
        for (std::size_t i = 0; i < d_ffpre.data.size(); ++i)
            d_ffpre.data[i] = d_ffact.data[i] * gelu_grad(lc.ff_pre.data[i]);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t i = 0; i < model.config.d_ff; ++i)
                lp.ff1_b.g.data[i] += d_ffpre.at(t, i);

        Matrix d_ln2(T, d);
        linear_backward(lp.ff1, lora_scale, lc.ln2_out, lc.f1c, d_ffpre, d_ln2);

        Matrix d_xmid = dx;  // residual path
        layernorm_backward(d_ln2, lc.x_mid, lp.ln2_g, lp.ln2_b, lc.m2, lc.r2, d_xmid);

        // x_mid = x_in + o
        Matrix d_attout(T, d);
        linear_backward(lp.wo, lora_scale, lc.att_out, lc.oc, d_xmid, d_attout);

        Matrix dq(T, d), dk(T, d), dv(T, d);
        attention_backward(model, lc, d_attout, dq, dk, dv);

        Matrix d_ln1(T, d);
        linear_backward(lp.wq, lora_scale, lc.ln1_out, lc.qc, dq, d_ln1);
        linear_backward(lp.wk, lora_scale, lc.ln1_out, lc.kc, dk, d_ln1);
        linear_backward(lp.wv, lora_scale, lc.ln1_out, lc.vc, dv, d_ln1);

        Matrix d_xin = d_xmid;  // residual path
        layernorm_backward(d_ln1, lc.x_in, lp.ln1_g, lp.ln1_b, lc.m1, lc.r1, d_xin);
        dx = std::move(d_xin);
    }

    for (std::size_t t = 0; t < T; ++t) {
        double* er = model.tok_emb.g.row(input_ids[t]);
        double* pr = model.pos_emb.g.row(t);
        const double* dr = dx.row(t);
        for (std::size_t i = 0; i < d; ++i) {
            er[i] += dr[i];
            pr[i] += dr[i];
        }
    }
    return loss;
}

void save_checkpoint(const AdaptedModel& model, const std::filesystem::path& dir,
                     std::size_t step) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    ordered_json manifest;
    manifest["version"] = std::string(kToolkitVersion);
    manifest["step"] = step;
    manifest["config"] = {{"vocab_size", model.config.vocab_size},
                          {"d_model", model.config.d_model},
                          {"n_layers", model.config.n_layers},
                          {"n_heads", model.config.n_heads},
                          {"d_ff", model.config.d_ff},
                          {"context_len", model.config.context_len},
                          {"seed", model.config.seed}};
    if (model.lora) {
        ordered_json targets = ordered_json::array();
        for (LoraTarget t : model.lora->targets) targets.push_back(to_string(t));
        manifest["lora"] = {{"rank", model.lora->rank},
                            {"alpha", model.lora->alpha},
                            {"dropout", model.lora->dropout},
                            {"targets", targets}};
    } else {
        manifest["lora"] = nullptr;
    }

    manifest["tensors"] = ordered_json::array();
    for (const auto& [name, p] : model.params()) {
        std::string file = name;
        std::replace(file.begin(), file.end(), '.', '_');
        file += ".bin";
        manifest["tensors"].push_back({{"name", name},
                                       {"rows", p->v.rows},
                                       {"cols", p->v.cols},
                                       {"frozen", p->frozen},
                                       {"file", file}});
        std::ofstream out(dir / file, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write tensor blob " + (dir / file).string());
        std::vector<float> buf(p->v.data.begin(), p->v.data.end());
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    std::ofstream mout(dir / "manifest.json", std::ios::binary);
    mout << manifest.dump(2) << '\n';
}

AdaptedModel load_checkpoint(const std::filesystem::path& dir, std::size_t* step_out) {
    std::ifstream min(dir / "manifest.json", std::ios::binary);
    if (!min) throw std::runtime_error("checkpoint manifest missing in " + dir.string());
    nlohmann::json manifest = nlohmann::json::parse(min);

    ModelConfig cfg;
    const auto& jc = manifest.at("config");
    cfg.vocab_size = jc.at("vocab_size").get<std::size_t>();
    cfg.d_model = jc.at("d_model").get<std::size_t>();
    cfg.n_layers = jc.at("n_layers").get<std::size_t>();
    cfg.n_heads = jc.at("n_heads").get<std::size_t>();
    cfg.d_ff = jc.at("d_ff").get<std::size_t>();
    cfg.context_len = jc.at("context_len").get<std::size_t>();
    cfg.seed = jc.at("seed").get<std::uint64_t>();

    AdaptedModel model = build_model(cfg);
    if (!manifest.at("lora").is_null()) {
        const auto& jl = manifest.at("lora");
        LoraConfig lc;
        lc.rank = jl.at("rank").get<std::size_t>();
        lc.alpha = jl.at("alpha").get<double>();
        lc.dropout = jl.at("dropout").get<double>();
        lc.targets.clear();
        for (const auto& t : jl.at("targets"))
            lc.targets.push_back(lora_target_from_string(t.get<std::string>()));
        attach_lora(model, lc, cfg.seed);
    }

    auto named = model.params();
    for (const auto& jt : manifest.at("tensors")) {
        const std::string name = jt.at("name").get<std::string>();
        Param* p = nullptr;
        for (auto& [n, ptr] : named)
            if (n == name) { p = ptr; break; }
        if (!p) throw std::runtime_error("unknown tensor in checkpoint: " + name);
        const auto rows = jt.at("rows").get<std::size_t>();
        const auto cols = jt.at("cols").get<std::size_t>();
        if (rows != p->v.rows || cols != p->v.cols)
            throw std::runtime_error("tensor shape mismatch for " + name);
        p->frozen = jt.at("frozen").get<bool>();
        std::ifstream in(dir / jt.at("file").get<std::string>(), std::ios::binary);
        if (!in) throw std::runtime_error("missing tensor blob for " + name);
        std::vector<float> buf(rows * cols);
        in.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (in.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float)))
            throw std::runtime_error("short tensor blob for " + name);
        std::copy(buf.begin(), buf.end(), p->v.data.begin());
    }
    if (step_out) *step_out = manifest.at("step").get<std::size_t>();
    return model;
}

}  // namespace mala
