#ifndef CSTY_DENOISER_HPP
#define CSTY_DENOISER_HPP

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "csty/rng.hpp"
#include "csty/schemes.hpp"
#include "csty/tensor.hpp"

namespace csty {

// Miniature two-level latent denoiser: seeded random weights, never trained.
// It exists to host realistic attention data flow, not to produce images.
struct DenoiserConfig {
    int grid_h = 16;
    int grid_w = 16;
    int latent_channels = 4;
    std::vector<int> channels = {32, 64}; // per level: high-res, low-res
    int heads = 4;
    int embed_dim = 32;
    uint64_t weight_seed = 0x5eed0001u;

    // stress knob: additively shifts one image's value projections at the
    // high-res attention layer by vshift_amount times their own std
    int vshift_image = -1;
    float vshift_amount = 0.0f;

    void validate() const {
        auto pow2 = [](int v) { return v >= 8 && (v & (v - 1)) == 0; };
        if (!pow2(grid_h) || !pow2(grid_w))
            throw std::invalid_argument("denoiser config: grid sides must be powers of two >= 8");
        if (channels.size() != 2) throw std::invalid_argument("denoiser config: expected two channel levels");
        for (int c : channels)
            if (heads < 1 || c % heads != 0)
                throw std::invalid_argument("denoiser config: channels " + std::to_string(c) +
                                            " not divisible by heads " + std::to_string(heads));
        if (latent_channels < 1 || embed_dim < 1)
            throw std::invalid_argument("denoiser config: channel counts must be positive");
    }
};

struct PromptEmbedding {
    std::vector<int> tokens;
    Mat vectors; // tokens x embed_dim
    int subject_token_pos = 0;
};

// Hash-to-Gaussian embedding table: a token's vector depends only on
// (token id, seed), standing in for a text encoder.
inline PromptEmbedding embed_prompt(const std::vector<int>& tokens, int subject_pos, uint64_t seed, int embed_dim) {
    if (tokens.empty()) throw std::invalid_argument("embed_prompt: empty token list");
    if (subject_pos < 0 || subject_pos >= static_cast<int>(tokens.size()))
        throw std::invalid_argument("embed_prompt: subject position " + std::to_string(subject_pos) +
                                    " outside token list of length " + std::to_string(tokens.size()));
    PromptEmbedding e;
    e.tokens = tokens;
    e.subject_token_pos = subject_pos;
    e.vectors = Mat(static_cast<int>(tokens.size()), embed_dim);
    const uint64_t table_seed = mix_seed(seed, 0x70ebedu);
    for (size_t t = 0; t < tokens.size(); ++t)
        for (int c = 0; c < embed_dim; ++c)
            e.vectors.at(static_cast<int>(t), c) =
                gaussian_at(table_seed, static_cast<uint64_t>(tokens[t]), static_cast<uint64_t>(c));
    return e;
}

// Receives every capturable tensor the forward pass produces; implementations
// filter by (step, layer, kind). post_hook distinguishes values captured
// before the intervention chain from values entering the attention product.
struct CaptureSink {
    virtual ~CaptureSink() = default;
    virtual void on_value(int /*step*/, const LayerInfo& /*layer*/, int /*image*/, bool /*guided*/,
                          bool /*post_hook*/, const Mat& /*v*/) {}
    virtual void on_xattn_map(int /*step*/, const LayerInfo& /*layer*/, int /*image*/,
                              const std::vector<float>& /*subject_map*/) {}
    virtual void on_hidden_features(int /*step*/, const LayerInfo& /*layer*/, int /*image*/, bool /*guided*/,
                                    const char* /*kind*/, const Mat& /*h*/) {}
};

namespace detail {

struct LinearW {
    Mat w; // in x out
    std::vector<float> b;
};

struct ConvW {
    int cin = 0, cout = 0, stride = 1;
    std::vector<float> w; // [tap][cin][cout], tap = ky*3+kx
    std::vector<float> b;
};

struct SelfAttnW {
    LinearW wq, wk, wv, wo;
};

struct XAttnW {
    LinearW wq, wk, wv, wo;
};

inline LinearW make_linear(Rng& rng, int in, int out, float gain = 1.0f) {
    LinearW l;
    l.w = Mat(in, out);
    const float stdev = gain * std::sqrt(2.0f / static_cast<float>(in));
    for (auto& v : l.w.data) v = stdev * rng.gaussian();
    l.b.assign(out, 0.0f);
    return l;
}

inline ConvW make_conv(Rng& rng, int cin, int cout, int stride, float gain = 1.0f) {
    ConvW c;
    c.cin = cin;
    c.cout = cout;
    c.stride = stride;
    c.w.resize(static_cast<size_t>(9) * cin * cout);
    const float stdev = gain * std::sqrt(2.0f / (9.0f * cin));
    for (auto& v : c.w) v = stdev * rng.gaussian();
    c.b.assign(cout, 0.0f);
    return c;
}

inline Mat linear(const Mat& x, const LinearW& l) {
    Mat y = matmul(x, l.w);
    for (int r = 0; r < y.rows; ++r) {
        float* row = y.row(r).data();
        for (int c = 0; c < y.cols; ++c) row[c] += l.b[c];
    }
    return y;
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

inline Mat silu(const Mat& x) {
    Mat y = x;
    for (auto& v : y.data) v = silu(v);
    return y;
}

// 3x3 zero-padded convolution on a patch-major (N x C) feature map.
inline Mat conv3x3(const Mat& x, const ConvW& cw, int h, int w) {
    if (x.rows != h * w || x.cols != cw.cin) throw std::invalid_argument("conv3x3: shape mismatch");
    const int oh = h / cw.stride, ow = w / cw.stride;
    Mat y(oh * ow, cw.cout);
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            float* orow = y.row(oy * ow + ox).data();
            for (int c = 0; c < cw.cout; ++c) orow[c] = cw.b[c];
            for (int tap = 0; tap < 9; ++tap) {
                const int iy = oy * cw.stride + tap / 3 - 1;
                const int ix = ox * cw.stride + tap % 3 - 1;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                const float* irow = x.row(iy * w + ix).data();
                const float* wtap = cw.w.data() + static_cast<size_t>(tap) * cw.cin * cw.cout;
                for (int ci = 0; ci < cw.cin; ++ci) {
                    const float iv = irow[ci];
                    const float* wrow = wtap + static_cast<size_t>(ci) * cw.cout;
                    for (int co = 0; co < cw.cout; ++co) orow[co] += iv * wrow[co];
                }
            }
        }
    }
    return y;
}

inline Mat upsample2x(const Mat& x, int h, int w) {
    Mat y(h * 2 * w * 2, x.cols);
    for (int oy = 0; oy < h * 2; ++oy)
        for (int ox = 0; ox < w * 2; ++ox) {
            auto src = x.row((oy / 2) * w + ox / 2);
            auto dst = y.row(oy * w * 2 + ox);
            std::copy(src.begin(), src.end(), dst.begin());
        }
    return y;
}

} // namespace detail

inline Mat cfg_combine(const Mat& uncond_pred, const Mat& cond_pred, float scale) {
    if (!uncond_pred.same_shape(cond_pred)) throw std::invalid_argument("cfg_combine: shape mismatch");
    Mat out = uncond_pred;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += scale * (cond_pred.data[i] - out.data[i]);
    return out;
}

class Denoiser {
  public:
    explicit Denoiser(const DenoiserConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        const int c0 = cfg_.channels[0], c1 = cfg_.channels[1];
        auto layer_rng = [&](const char* name) { return Rng(mix_seed(cfg_.weight_seed, fnv1a64(name))); };
        Rng r = layer_rng("temb");
        temb_ = detail::make_linear(r, kTimeFeatures, c0);
        r = layer_rng("enc0");
        enc0_ = detail::make_conv(r, cfg_.latent_channels, c0, 1);
        r = layer_rng("down");
        down_ = detail::make_conv(r, c0, c1, 2);
        r = layer_rng("mid.res");
        mid_res_ = detail::make_conv(r, c1, c1, 1, 0.5f);
        r = layer_rng("mid.self");
        mid_self_ = {detail::make_linear(r, c1, c1), detail::make_linear(r, c1, c1), detail::make_linear(r, c1, c1),
                     detail::make_linear(r, c1, c1, 0.5f)};
        r = layer_rng("mid.xattn");
        mid_x_ = {detail::make_linear(r, c1, c1), detail::make_linear(r, cfg_.embed_dim, c1),
                  detail::make_linear(r, cfg_.embed_dim, c1), detail::make_linear(r, c1, c1, 0.5f)};
        r = layer_rng("up");
        up_ = detail::make_conv(r, c1, c0, 1);
        r = layer_rng("dec0.res");
        dec_res_ = detail::make_conv(r, c0, c0, 1, 0.5f);
        r = layer_rng("dec0.self");
        dec_self_ = {detail::make_linear(r, c0, c0), detail::make_linear(r, c0, c0), detail::make_linear(r, c0, c0),
                     detail::make_linear(r, c0, c0, 0.5f)};
        r = layer_rng("dec0.xattn");
        dec_x_ = {detail::make_linear(r, c0, c0), detail::make_linear(r, cfg_.embed_dim, c0),
                  detail::make_linear(r, cfg_.embed_dim, c0), detail::make_linear(r, c0, c0, 0.5f)};
        r = layer_rng("out");
        out_ = detail::make_conv(r, c0, cfg_.latent_channels, 1);

        mid_self_info_ = {"mid.self", cfg_.grid_h / 2, cfg_.grid_w / 2, false};
        dec_self_info_ = {"dec0.self", cfg_.grid_h, cfg_.grid_w, true};
        mid_x_info_ = {"mid.xattn", cfg_.grid_h / 2, cfg_.grid_w / 2, false};
        dec_x_info_ = {"dec0.xattn", cfg_.grid_h, cfg_.grid_w, true};
    }

    const DenoiserConfig& config() const { return cfg_; }
    const LayerInfo& high_res_self_layer() const { return dec_self_info_; }

    // Noise prediction for one guidance half of the whole batch. Latents are
    // expected pre-scaled for the current noise level.
    std::vector<Mat> forward(std::span<const Mat> latents, float sigma, std::span<const PromptEmbedding> prompts,
                             bool guided, int step, int total_steps, AttentionHook* hook,
                             CaptureSink* sink = nullptr) const {
        const int b = static_cast<int>(latents.size());
        if (prompts.size() != latents.size()) throw std::invalid_argument("forward: prompt count != batch size");
        const int h = cfg_.grid_h, w = cfg_.grid_w;
        const int n0 = h * w;

        const std::vector<float> tbias = time_bias(sigma);
        std::vector<Mat> x(b), skip(b);
        for (int i = 0; i < b; ++i) {
            if (latents[i].rows != n0 || latents[i].cols != cfg_.latent_channels)
                throw std::invalid_argument("forward: latent shape mismatch for image " + std::to_string(i));
            x[i] = detail::conv3x3(latents[i], enc0_, h, w);
            for (int r = 0; r < x[i].rows; ++r) {
                float* row = x[i].row(r).data();
                for (int c = 0; c < x[i].cols; ++c) row[c] += tbias[c];
            }
            skip[i] = x[i];
            x[i] = detail::conv3x3(detail::silu(x[i]), down_, h, w);
        }

        res_block(x, mid_res_, h / 2, w / 2);
        self_attention(x, mid_self_, mid_self_info_, guided, step, total_steps, hook, sink);
        cross_attention(x, mid_x_, mid_x_info_, prompts, guided, step, sink);

        for (int i = 0; i < b; ++i) {
            Mat up = detail::conv3x3(detail::upsample2x(x[i], h / 2, w / 2), up_, h, w);
            for (size_t n = 0; n < up.data.size(); ++n) up.data[n] += skip[i].data[n];
            x[i] = std::move(up);
        }

        res_block(x, dec_res_, h, w);
        if (sink)
            for (int i = 0; i < b; ++i) sink->on_hidden_features(step, dec_self_info_, i, guided, "hidden_in", x[i]);
        self_attention(x, dec_self_, dec_self_info_, guided, step, total_steps, hook, sink);
        cross_attention(x, dec_x_, dec_x_info_, prompts, guided, step, sink);
        if (sink)
            for (int i = 0; i < b; ++i) sink->on_hidden_features(step, dec_self_info_, i, guided, "hidden_out", x[i]);

        std::vector<Mat> eps(b);
        for (int i = 0; i < b; ++i) eps[i] = detail::conv3x3(detail::silu(x[i]), out_, h, w);
        return eps;
    }

  private:
    static constexpr int kTimeFeatures = 16;

    std::vector<float> time_bias(float sigma) const {
        Mat feats(1, kTimeFeatures);
        const float t = std::log(sigma);
        for (int f = 0; f < kTimeFeatures / 2; ++f) {
            const float freq = std::ldexp(1.0f, f); // 2^f
            feats.at(0, 2 * f) = std::sin(t * freq);
            feats.at(0, 2 * f + 1) = std::cos(t * freq);
        }
        const Mat out = detail::linear(feats, temb_);
        return out.data;
    }

    void res_block(std::vector<Mat>& x, const detail::ConvW& conv, int h, int w) const {
        for (auto& xi : x) {
            const Mat hmat = detail::conv3x3(detail::silu(xi), conv, h, w);
            for (size_t n = 0; n < xi.data.size(); ++n) xi.data[n] += hmat.data[n];
        }
    }

    template <typename Fn>
    static void with_layer_context(const LayerInfo& layer, int step, Fn&& fn) {
        try {
            fn();
        } catch (const artifact_error&) {
            throw;
        } catch (const std::exception& e) {
            throw std::runtime_error("step " + std::to_string(step) + " layer " + layer.id + ": " + e.what());
        }
    }

    void self_attention(std::vector<Mat>& x, const detail::SelfAttnW& wts, const LayerInfo& layer, bool guided,
                        int step, int total_steps, AttentionHook* hook, CaptureSink* sink) const {
        const int b = static_cast<int>(x.size());
        AttentionState st;
        st.q.resize(b);
        st.k.resize(b);
        st.v.resize(b);
        for (int i = 0; i < b; ++i) {
            st.q[i] = detail::linear(x[i], wts.wq);
            st.k[i] = detail::linear(x[i], wts.wk);
            st.v[i] = detail::linear(x[i], wts.wv);
            if (i == cfg_.vshift_image && layer.highest_res && cfg_.vshift_amount != 0.0f) {
                const ChannelStats stats = channel_stats(st.v[i]);
                double pooled = 0.0;
                for (float s : stats.stdev) pooled += s;
                const float shift = cfg_.vshift_amount * static_cast<float>(pooled / stats.stdev.size());
                for (auto& v : st.v[i].data) v += shift;
            }
        }
        if (sink)
            for (int i = 0; i < b; ++i) sink->on_value(step, layer, i, guided, false, st.v[i]);
        if (hook)
            with_layer_context(layer, step, [&] { hook->on_attention(st, layer, step, total_steps, guided); });
        if (sink)
            for (int i = 0; i < b; ++i) sink->on_value(step, layer, i, guided, true, st.v[i]);
        std::vector<Mat> hidden(b);
        for (int i = 0; i < b; ++i)
            hidden[i] = multi_head_attention(st.q[i], st.keys_for(i), st.values_for(i), cfg_.heads);
        if (hook)
            with_layer_context(layer, step, [&] { hook->on_hidden(hidden, layer, step, total_steps, guided); });
        for (int i = 0; i < b; ++i) {
            const Mat proj = detail::linear(hidden[i], wts.wo);
            for (size_t n = 0; n < x[i].data.size(); ++n) x[i].data[n] += proj.data[n];
        }
    }

    void cross_attention(std::vector<Mat>& x, const detail::XAttnW& wts, const LayerInfo& layer,
                         std::span<const PromptEmbedding> prompts, bool guided, int step, CaptureSink* sink) const {
        const int b = static_cast<int>(x.size());
        for (int i = 0; i < b; ++i) {
            const Mat q = detail::linear(x[i], wts.wq);
            const Mat k = detail::linear(prompts[i].vectors, wts.wk);
            const Mat v = detail::linear(prompts[i].vectors, wts.wv);
            const int d = q.cols, hc = d / cfg_.heads;
            const int n = q.rows, t = k.rows;
            Mat hidden(n, d);
            std::vector<double> subject_acc(sink ? n : 0, 0.0);
            const float scale = 1.0f / std::sqrt(static_cast<float>(hc));
            for (int hd = 0; hd < cfg_.heads; ++hd) {
                Mat logits(n, t);
                for (int r = 0; r < n; ++r) {
                    float* lrow = logits.row(r).data();
                    const float* qrow = q.row(r).data() + hd * hc;
                    for (int c = 0; c < hc; ++c) {
                        const float qc = qrow[c] * scale;
                        for (int j = 0; j < t; ++j) lrow[j] += qc * k.at(j, hd * hc + c);
                    }
                }
                const Mat attn = softmax_rows(logits);
                for (int r = 0; r < n; ++r) {
                    float* hrow = hidden.row(r).data() + hd * hc;
                    const float* arow = attn.row(r).data();
                    for (int j = 0; j < t; ++j) {
                        const float a = arow[j];
                        const float* vrow = v.row(j).data() + hd * hc;
                        for (int c = 0; c < hc; ++c) hrow[c] += a * vrow[c];
                    }
                    if (sink) subject_acc[r] += attn.at(r, prompts[i].subject_token_pos);
                }
            }
            if (sink && guided) {
                std::vector<float> map(n);
                for (int r = 0; r < n; ++r) map[r] = static_cast<float>(subject_acc[r] / cfg_.heads);
                sink->on_xattn_map(step, layer, i, map);
            }
            const Mat proj = detail::linear(hidden, wts.wo);
            for (size_t m = 0; m < x[i].data.size(); ++m) x[i].data[m] += proj.data[m];
        }
    }

    DenoiserConfig cfg_;
    detail::LinearW temb_;
    detail::ConvW enc0_, down_, mid_res_, up_, dec_res_, out_;
    detail::SelfAttnW mid_self_, dec_self_;
    detail::XAttnW mid_x_, dec_x_;
    LayerInfo mid_self_info_, dec_self_info_, mid_x_info_, dec_x_info_;
};

// Fixed linear latent-to-grayscale map for eyeballing artifacts.
inline Mat decode_to_gray(const Mat& latent, const DenoiserConfig& cfg) {
    if (latent.rows != cfg.grid_h * cfg.grid_w || latent.cols != cfg.latent_channels)
        throw std::invalid_argument("decode_to_gray: latent shape mismatch");
    std::vector<float> wts(cfg.latent_channels);
    const uint64_t seed = mix_seed(cfg.weight_seed, 0xdec0de);
    for (int c = 0; c < cfg.latent_channels; ++c) wts[c] = gaussian_at(seed, 0, static_cast<uint64_t>(c));
    Mat gray(cfg.grid_h, cfg.grid_w);
    for (int p = 0; p < latent.rows; ++p) {
        float acc = 0.0f;
        for (int c = 0; c < latent.cols; ++c) acc += wts[c] * latent.at(p, c);
        gray.data[p] = acc;
    }
    return gray;
}

} // namespace csty

#endif // CSTY_DENOISER_HPP
