#ifndef CSTY_SAMPLER_HPP
#define CSTY_SAMPLER_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "csty/denoiser.hpp"
#include "csty/rng.hpp"
#include "csty/schemes.hpp"
#include "csty/tensor.hpp"
#include "csty/value_store.hpp"

namespace csty {

struct SchedulerState {
    int total_steps = 0;
    int step = 0;
    std::vector<float> sigmas;

    void validate() const {
        if (static_cast<int>(sigmas.size()) != total_steps)
            throw std::invalid_argument("scheduler: schedule length != total steps");
        if (step < 0 || step >= total_steps) throw std::invalid_argument("scheduler: step outside [0, n)");
        float prev = std::numeric_limits<float>::infinity();
        for (float s : sigmas) {
            if (!(s > 0.0f) || s >= prev)
                throw std::invalid_argument("scheduler: sigmas must be strictly decreasing and positive");
            prev = s;
        }
    }
};

inline std::vector<float> linear_sigma_schedule(int n, float sigma_max = 10.0f, float sigma_min = 0.1f) {
    if (n < 2) throw std::invalid_argument("sigma schedule: need at least 2 steps");
    if (!(sigma_min > 0.0f) || sigma_min >= sigma_max)
        throw std::invalid_argument("sigma schedule: need 0 < sigma_min < sigma_max");
    std::vector<float> s(n);
    for (int t = 0; t < n; ++t)
        s[t] = sigma_max + (sigma_min - sigma_max) * (static_cast<float>(t) / static_cast<float>(n - 1));
    s.back() = sigma_min; // the interpolation may land a few ulps off the endpoint
    return s;
}

struct SamplerConfig {
    int steps = 50;
    float guidance = 5.0f;
    float sigma_max = 10.0f;
    float sigma_min = 0.1f;
};

// What a sampling run should capture besides final latents.
struct CaptureRequest {
    bool record_vsd = false; // pre-hook values, high-res layer, inside vsd_window
    StepWindow vsd_window;
    bool trace_v = false;  // pre/post-hook value pairs at every step (instrumentation)
    bool xattn_maps = false; // subject-token maps, guided half, inside mask_window
    StepWindow mask_window;
    int dift_step = -1; // hidden features entering dift_layer at this step
    std::string dift_layer;
    bool style_features = false; // post-attention hidden at the final step
};

struct CaptureLog {
    ValueStore vsd;

    struct VPair {
        Mat pre, post;
    };
    // (step, image, guided) -> value pair at the high-res self-attention layer
    std::map<std::tuple<int, int, int>, VPair> v_trace;

    std::vector<std::vector<std::vector<float>>> xattn; // per image, maps in step order
    std::vector<Mat> dift;                              // per image
    std::vector<Mat> style;                             // per image
};

namespace detail {

class LogSink final : public CaptureSink {
  public:
    LogSink(const CaptureRequest& req, CaptureLog* log, int total_steps)
        : req_(req), log_(log), total_steps_(total_steps) {}

    void on_value(int step, const LayerInfo& layer, int image, bool guided, bool post_hook, const Mat& v) override {
        if (!layer.highest_res) return;
        if (req_.record_vsd && !post_hook && req_.vsd_window.contains(step)) {
            if (!guided) {
                pending_uncond_[{step, image}] = v;
            } else {
                auto it = pending_uncond_.find({step, image});
                if (it == pending_uncond_.end())
                    throw std::logic_error("capture: guided half arrived before unguided half");
                log_->vsd.record(step, layer.id, image, std::move(it->second), v);
                pending_uncond_.erase(it);
            }
        }
        if (req_.trace_v) {
            auto& pair = log_->v_trace[{step, image, guided ? 1 : 0}];
            (post_hook ? pair.post : pair.pre) = v;
        }
    }

    void on_xattn_map(int step, const LayerInfo& layer, int image, const std::vector<float>& map) override {
        if (!req_.xattn_maps || !layer.highest_res || !req_.mask_window.contains(step)) return;
        if (log_->xattn.size() <= static_cast<size_t>(image)) log_->xattn.resize(image + 1);
        log_->xattn[image].push_back(map);
    }

    void on_hidden_features(int step, const LayerInfo& layer, int image, bool guided, const char* kind,
                            const Mat& h) override {
        if (!guided) return;
        const std::string_view k(kind);
        if (step == req_.dift_step && layer.id == req_.dift_layer && k == "hidden_in") {
            if (log_->dift.size() <= static_cast<size_t>(image)) log_->dift.resize(image + 1);
            log_->dift[image] = h;
        }
        if (req_.style_features && layer.highest_res && step == total_steps_ - 1 && k == "hidden_out") {
            if (log_->style.size() <= static_cast<size_t>(image)) log_->style.resize(image + 1);
            log_->style[image] = h;
        }
    }

  private:
    CaptureRequest req_;
    CaptureLog* log_;
    int total_steps_;
    std::map<std::pair<int, int>, Mat> pending_uncond_;
};

} // namespace detail

struct SampleResult {
    std::vector<Mat> latents;
    CaptureLog log;
};

// Deterministic denoising loop: Euler updates over a strictly decreasing
// sigma schedule, classifier-free guidance with the unguided half evaluated
// first, hooks invoked around every self-attention layer.
inline SampleResult sample(const Denoiser& den, const SamplerConfig& sc, std::span<const PromptEmbedding> prompts,
                           const PromptEmbedding& null_prompt, uint64_t sample_seed, AttentionHook* hook,
                           const CaptureRequest& req = {}) {
    if (sc.steps < 10) throw std::invalid_argument("sample: need at least 10 steps (gating windows degenerate)");
    const int b = static_cast<int>(prompts.size());
    if (b < 1) throw std::invalid_argument("sample: empty batch");
    const DenoiserConfig& cfg = den.config();
    const int n0 = cfg.grid_h * cfg.grid_w;

    SchedulerState sched;
    sched.total_steps = sc.steps;
    sched.sigmas = linear_sigma_schedule(sc.steps, sc.sigma_max, sc.sigma_min);
    sched.validate();

    SampleResult result;
    if (req.record_vsd)
        result.log.vsd = ValueStore(den.high_res_self_layer().id, req.vsd_window.lo, req.vsd_window.hi);
    result.log.xattn.resize(b);
    result.log.dift.resize(b);
    result.log.style.resize(b);
    detail::LogSink sink(req, &result.log, sc.steps);

    std::vector<Mat> z(b);
    const uint64_t noise_seed = mix_seed(sample_seed, 0x1a7e47u);
    for (int i = 0; i < b; ++i) {
        z[i] = Mat(n0, cfg.latent_channels);
        const uint64_t image_seed = mix_seed(noise_seed, static_cast<uint64_t>(i));
        for (int p = 0; p < n0; ++p)
            for (int c = 0; c < cfg.latent_channels; ++c)
                z[i].at(p, c) =
                    sched.sigmas[0] * gaussian_at(image_seed, static_cast<uint64_t>(p), static_cast<uint64_t>(c));
    }

    const std::vector<PromptEmbedding> uncond(b, null_prompt);
    for (int step = 0; step < sc.steps; ++step) {
        sched.step = step;
        const float sigma = sched.sigmas[step];
        const float sigma_next = step + 1 < sc.steps ? sched.sigmas[step + 1] : 0.0f;
        if (hook) {
            try {
                hook->on_latents(z, step, sc.steps);
            } catch (const std::exception& e) {
                throw std::runtime_error("step " + std::to_string(step) + " latents: " + e.what());
            }
        }
        const float input_scale = 1.0f / std::sqrt(sigma * sigma + 1.0f);
        std::vector<Mat> x_in(b);
        for (int i = 0; i < b; ++i) {
            x_in[i] = z[i];
            for (auto& v : x_in[i].data) v *= input_scale;
        }
        const std::vector<Mat> eps_u = den.forward(x_in, sigma, uncond, false, step, sc.steps, hook, &sink);
        const std::vector<Mat> eps_c = den.forward(x_in, sigma, prompts, true, step, sc.steps, hook, &sink);
        const float dsigma = sigma_next - sigma;
        for (int i = 0; i < b; ++i) {
            const Mat eps = cfg_combine(eps_u[i], eps_c[i], sc.guidance);
            for (size_t m = 0; m < z[i].data.size(); ++m) z[i].data[m] += dsigma * eps.data[m];
        }
    }
    for (int i = 0; i < b; ++i)
        if (!all_finite(z[i]))
            throw std::runtime_error("sample: non-finite latent for image " + std::to_string(i));
    result.latents = std::move(z);
    return result;
}

} // namespace csty

#endif // CSTY_SAMPLER_HPP
