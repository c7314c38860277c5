#ifndef CSTY_SCHEMES_HPP
#define CSTY_SCHEMES_HPP

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "csty/correspondence.hpp"
#include "csty/tensor.hpp"
#include "csty/value_store.hpp"

namespace csty {

enum class Scheme { vanilla, consistyle, consistory, cross_image, style_aligned, illusign };

inline const char* scheme_token(Scheme s) {
    switch (s) {
        case Scheme::vanilla: return "vanilla";
        case Scheme::consistyle: return "consistyle";
        case Scheme::consistory: return "consistory";
        case Scheme::cross_image: return "cross-image";
        case Scheme::style_aligned: return "style-aligned";
        case Scheme::illusign: return "illusign";
    }
    throw std::logic_error("scheme_token: bad enum");
}

inline Scheme parse_scheme(const std::string& token) {
    for (Scheme s : {Scheme::vanilla, Scheme::consistyle, Scheme::consistory, Scheme::cross_image,
                     Scheme::style_aligned, Scheme::illusign})
        if (token == scheme_token(s)) return s;
    throw std::invalid_argument("unknown scheme '" + token +
                                "' (expected vanilla|consistyle|consistory|cross-image|style-aligned|illusign)");
}

// Per-component switches. Query/key substitution can be narrowed to one of
// the two tensors for the ablation grid.
struct Toggles {
    bool qk_inject = true;
    bool qk_queries = true;
    bool qk_keys = true;
    bool vsd_inject = true;
    bool crossing = true;
    bool adain_in_crossing = true;

    bool inject_q() const { return qk_inject && qk_queries; }
    bool inject_k() const { return qk_inject && qk_keys; }
};

// Half-open step interval resolved from fractions of the step count.
struct StepWindow {
    int lo = 0;
    int hi = 0;

    bool contains(int step) const { return step >= lo && step < hi; }

    static StepWindow from_fractions(double lo_frac, double hi_frac, int total_steps) {
        // epsilon guards the exact-product case (e.g. 50 * 0.1) against
        // upward rounding of the float multiply
        StepWindow w;
        w.lo = static_cast<int>(std::ceil(lo_frac * total_steps - 1e-9));
        w.hi = static_cast<int>(std::ceil(hi_frac * total_steps - 1e-9));
        w.lo = std::clamp(w.lo, 0, total_steps);
        w.hi = std::clamp(w.hi, 0, total_steps);
        return w;
    }
};

struct SchemeSpec {
    Scheme scheme = Scheme::vanilla;
    std::vector<int> anchor_indices; // non-empty for non-vanilla schemes

    bool is_anchor(int image) const {
        return std::find(anchor_indices.begin(), anchor_indices.end(), image) != anchor_indices.end();
    }

    void validate(int batch) const {
        if (scheme == Scheme::vanilla) return;
        if (anchor_indices.empty()) throw std::invalid_argument("scheme spec: anchor list empty");
        int prev = -1;
        for (int a : anchor_indices) {
            if (a < 0 || a >= batch)
                throw std::invalid_argument("scheme spec: anchor " + std::to_string(a) + " outside batch of " +
                                            std::to_string(batch));
            if (a <= prev) throw std::invalid_argument("scheme spec: anchors not strictly ascending");
            prev = a;
        }
    }
};

struct LayerInfo {
    std::string id;
    int grid_h = 0;
    int grid_w = 0;
    bool highest_res = false;
};

// Everything an intervention needs to know about the point it fires at.
// masks/corr are indexed by image; corr holds nullptr for anchor images.
struct InterventionContext {
    int step = 0;
    int total_steps = 0;
    LayerInfo layer;
    bool guided = false;
    StepWindow qk_window;
    StepWindow vsd_window;
    Toggles toggles;
    std::span<const SubjectMask> masks;
    std::span<const CorrespondenceMap* const> corr;
    std::span<const int> anchors;
    const ValueStore* store = nullptr;

    const CorrespondenceMap* corr_for(int image) const {
        if (image < 0 || image >= static_cast<int>(corr.size())) return nullptr;
        return corr[image];
    }
};

// Per-image Q/K/V of one guidance half at one self-attention layer. k_ext and
// v_ext, when non-empty, are the extended dictionaries attention should use
// instead of k/v.
struct AttentionState {
    std::vector<Mat> q, k, v;
    std::vector<Mat> k_ext, v_ext;

    int batch() const { return static_cast<int>(q.size()); }

    const Mat& keys_for(int i) const { return k_ext.size() > static_cast<size_t>(i) && k_ext[i].rows ? k_ext[i] : k[i]; }
    const Mat& values_for(int i) const {
        return v_ext.size() > static_cast<size_t>(i) && v_ext[i].rows ? v_ext[i] : v[i];
    }
};

namespace detail {

inline void substitute_rows(Mat& dst, const CorrespondenceMap& map, std::span<const Mat* const> anchor_sources) {
    for (const auto& e : map.entries) {
        if (e.anchor_index < 0 || e.anchor_index >= static_cast<int>(anchor_sources.size()))
            throw std::invalid_argument("row substitution: anchor index outside anchor list");
        const Mat& a = *anchor_sources[e.anchor_index];
        if (e.target_patch >= dst.rows || e.anchor_patch >= a.rows)
            throw std::invalid_argument("row substitution: correspondence index outside tensor");
        auto d = dst.row(e.target_patch);
        auto s = a.row(e.anchor_patch);
        std::copy(s.begin(), s.end(), d.begin());
    }
}

} // namespace detail

// Replaces the subject rows of Q_i and K_i by the anchor rows the
// correspondence selects. Fires only on the guided half inside the Q/K
// window at the layer whose grid the masks live on. Returns whether any row
// changed.
inline bool inject_qk(AttentionState& state, const InterventionContext& ctx, int image_i) {
    if (!(ctx.toggles.inject_q() || ctx.toggles.inject_k())) return false;
    if (!ctx.guided || !ctx.qk_window.contains(ctx.step) || !ctx.layer.highest_res) return false;
    if (ctx.masks.size() > static_cast<size_t>(image_i) && ctx.masks[image_i].empty()) return false; // warned upstream
    const CorrespondenceMap* map = ctx.corr_for(image_i);
    if (!map)
        throw std::runtime_error("inject_qk: no correspondence for image " + std::to_string(image_i));
    std::vector<const Mat*> anchor_q, anchor_k;
    for (int a : ctx.anchors) {
        anchor_q.push_back(&state.q[a]);
        anchor_k.push_back(&state.k[a]);
    }
    if (ctx.toggles.inject_q()) detail::substitute_rows(state.q[image_i], *map, anchor_q);
    if (ctx.toggles.inject_k()) detail::substitute_rows(state.k[image_i], *map, anchor_k);
    return true;
}

// Replaces V_i wholesale by the recorded vanilla-pass values. Fires on both
// guidance halves, inside the value window, at the recorded layer only.
inline bool inject_vsd(AttentionState& state, const InterventionContext& ctx, int image_i) {
    if (!ctx.toggles.vsd_inject) return false;
    if (!ctx.vsd_window.contains(ctx.step) || !ctx.layer.highest_res) return false;
    if (!ctx.store) throw std::runtime_error("inject_vsd: no value store attached");
    state.v[image_i] = ctx.store->lookup(ctx.step, ctx.layer.id, image_i, ctx.guided);
    return true;
}

// Extended attention dictionary for image i: every other image contributes
// its subject rows, keys raw and values renormalized to V_i's channel
// statistics (unless the guard is toggled off). Image i's own full block sits
// at position i of the concatenation.
inline std::pair<Mat, Mat> cross_attention_components(const AttentionState& state, const InterventionContext& ctx,
                                                      int image_i) {
    const int b = state.batch();
    std::vector<Mat> k_parts, v_parts;
    k_parts.reserve(b);
    v_parts.reserve(b);
    for (int j = 0; j < b; ++j) {
        if (j == image_i) {
            k_parts.push_back(state.k[j]);
            v_parts.push_back(state.v[j]);
            continue;
        }
        if (ctx.masks.size() <= static_cast<size_t>(j))
            throw std::invalid_argument("cross_attention_components: no mask for image " + std::to_string(j));
        const SubjectMask& mask = ctx.masks[j];
        if (mask.empty()) continue;
        mask.validate(state.k[j].rows);
        k_parts.push_back(select_rows(state.k[j], mask.patch_indices));
        Mat vblock = select_rows(state.v[j], mask.patch_indices);
        if (ctx.toggles.adain_in_crossing) vblock = adain(vblock, state.v[image_i]);
        v_parts.push_back(std::move(vblock));
    }
    std::vector<const Mat*> kp, vp;
    for (const auto& m : k_parts) kp.push_back(&m);
    for (const auto& m : v_parts) vp.push_back(&m);
    return {vstack(kp), vstack(vp)};
}

namespace detail {

// Appends rows of src to dst (same column count).
inline Mat append_rows(const Mat& a, const Mat& b) {
    const Mat* parts[2] = {&a, &b};
    return vstack(parts);
}

inline Mat masked_rows(const Mat& m, const SubjectMask& mask) {
    mask.validate(m.rows);
    return select_rows(m, mask.patch_indices);
}

} // namespace detail

// Component-modification sweep for one image under the selected scheme.
// Touches only image_i's tensors so a batch of images can be modified in any
// order before any crossing reads them.
inline void modify_components(const SchemeSpec& spec, AttentionState& state, const InterventionContext& ctx,
                              int image_i) {
    switch (spec.scheme) {
        case Scheme::vanilla:
            return;
        case Scheme::consistyle: {
            inject_vsd(state, ctx, image_i);
            if (!spec.is_anchor(image_i)) inject_qk(state, ctx, image_i);
            return;
        }
        case Scheme::consistory:
            return; // consistory modifies hidden states, not Q/K/V
        case Scheme::cross_image: {
            if (spec.is_anchor(image_i)) return;
            const int a = spec.anchor_indices[0];
            state.k[image_i] = state.k[a];
            state.v[image_i] = state.v[a];
            return;
        }
        case Scheme::style_aligned: {
            if (spec.is_anchor(image_i)) return;
            const int a = spec.anchor_indices[0];
            state.q[image_i] = adain(state.q[image_i], state.q[a]);
            state.k[image_i] = adain(state.k[image_i], state.k[a]);
            return;
        }
        case Scheme::illusign: {
            if (spec.is_anchor(image_i)) return;
            const int a = spec.anchor_indices[0];
            Mat& q = state.q[image_i];
            const Mat& qa = state.q[a];
            if (!q.same_shape(qa)) throw std::invalid_argument("illusign: anchor Q shape mismatch");
            for (size_t n = 0; n < q.data.size(); ++n) q.data[n] += 0.5f * qa.data[n];
            state.k[image_i] = state.k[a];
            state.v[image_i] = state.v[a];
            return;
        }
    }
}

// Component-crossing sweep for one image. Reads the (already modified) batch
// and writes only image_i's extended dictionaries.
inline void cross_components(const SchemeSpec& spec, AttentionState& state, const InterventionContext& ctx,
                             int image_i) {
    if (state.k_ext.size() != state.q.size()) state.k_ext.resize(state.q.size());
    if (state.v_ext.size() != state.q.size()) state.v_ext.resize(state.q.size());
    switch (spec.scheme) {
        case Scheme::vanilla:
        case Scheme::cross_image:
        case Scheme::illusign:
            return;
        case Scheme::consistyle: {
            if (!ctx.toggles.crossing || !ctx.layer.highest_res) return;
            auto [k_ext, v_ext] = cross_attention_components(state, ctx, image_i);
            state.k_ext[image_i] = std::move(k_ext);
            state.v_ext[image_i] = std::move(v_ext);
            return;
        }
        case Scheme::consistory: {
            // own block first, then every other image's raw subject rows
            if (!ctx.layer.highest_res) return;
            Mat k_ext = state.k[image_i];
            Mat v_ext = state.v[image_i];
            for (int j = 0; j < state.batch(); ++j) {
                if (j == image_i) continue;
                if (ctx.masks.size() <= static_cast<size_t>(j))
                    throw std::invalid_argument("consistory crossing: no mask for image " + std::to_string(j));
                const SubjectMask& mask = ctx.masks[j];
                if (mask.empty()) continue;
                k_ext = detail::append_rows(k_ext, detail::masked_rows(state.k[j], mask));
                v_ext = detail::append_rows(v_ext, detail::masked_rows(state.v[j], mask));
            }
            state.k_ext[image_i] = std::move(k_ext);
            state.v_ext[image_i] = std::move(v_ext);
            return;
        }
        case Scheme::style_aligned: {
            if (spec.is_anchor(image_i)) return;
            const int a = spec.anchor_indices[0];
            state.k_ext[image_i] = detail::append_rows(state.k[image_i], state.k[a]);
            state.v_ext[image_i] = detail::append_rows(state.v[image_i], state.v[a]);
            return;
        }
    }
}

// Single-image view of a scheme: modification then crossing for image_i.
// Batch sweeps should call the two stages separately so every image's
// modification lands before any image's crossing reads the batch.
inline void apply_scheme(const SchemeSpec& spec, AttentionState& state, const InterventionContext& ctx, int image_i) {
    modify_components(spec, state, ctx, image_i);
    cross_components(spec, state, ctx, image_i);
}

// Post-attention hidden-state rewrite (consistory only): subject rows of the
// hidden tensor are replaced by the anchor rows the correspondence selects.
inline void apply_hidden_scheme(const SchemeSpec& spec, std::vector<Mat>& hidden, const InterventionContext& ctx,
                                int image_i) {
    if (spec.scheme != Scheme::consistory) return;
    if (!ctx.layer.highest_res || spec.is_anchor(image_i)) return;
    const CorrespondenceMap* map = ctx.corr_for(image_i);
    if (!map)
        throw std::runtime_error("consistory hidden injection: no correspondence for image " +
                                 std::to_string(image_i));
    std::vector<const Mat*> anchor_h;
    for (int a : ctx.anchors) anchor_h.push_back(&hidden[a]);
    detail::substitute_rows(hidden[image_i], *map, anchor_h);
}

// Latent-stage rewrite (cross-image attention only): renormalizes each
// non-anchor latent to the anchor's channel statistics once per step.
inline void apply_latent_scheme(const SchemeSpec& spec, std::vector<Mat>& latents, int /*step*/) {
    if (spec.scheme != Scheme::cross_image) return;
    const int a = spec.anchor_indices.at(0);
    for (size_t i = 0; i < latents.size(); ++i) {
        if (spec.is_anchor(static_cast<int>(i))) continue;
        latents[i] = adain(latents[i], latents[a]);
    }
}

// Hook chain the denoiser invokes around its attention layers. A null hook
// and the vanilla scheme are both transparent.
struct AttentionHook {
    virtual ~AttentionHook() = default;
    virtual void on_latents(std::vector<Mat>& /*latents*/, int /*step*/, int /*total_steps*/) {}
    virtual void on_attention(AttentionState& /*state*/, const LayerInfo& /*layer*/, int /*step*/,
                              int /*total_steps*/, bool /*guided*/) {}
    virtual void on_hidden(std::vector<Mat>& /*hidden*/, const LayerInfo& /*layer*/, int /*step*/,
                           int /*total_steps*/, bool /*guided*/) {}
};

// Drives one scheme over a sampling run. Modification lands on every image
// before any image's crossing reads the batch, so imported blocks always see
// post-modification tensors. Mask/correspondence/store pointers are owned by
// the caller and must outlive the run.
class SchemeProcessor : public AttentionHook {
  public:
    SchemeSpec spec;
    Toggles toggles;
    StepWindow qk_window;
    StepWindow vsd_window;
    std::vector<SubjectMask> masks;
    std::vector<const CorrespondenceMap*> corr;
    const ValueStore* store = nullptr;

    void on_latents(std::vector<Mat>& latents, int step, int /*total_steps*/) override {
        apply_latent_scheme(spec, latents, step);
    }

    void on_attention(AttentionState& state, const LayerInfo& layer, int step, int total_steps,
                      bool guided) override {
        const InterventionContext ctx = context(layer, step, total_steps, guided);
        for (int i = 0; i < state.batch(); ++i) modify_components(spec, state, ctx, i);
        for (int i = 0; i < state.batch(); ++i) cross_components(spec, state, ctx, i);
    }

    void on_hidden(std::vector<Mat>& hidden, const LayerInfo& layer, int step, int total_steps,
                   bool guided) override {
        const InterventionContext ctx = context(layer, step, total_steps, guided);
        for (size_t i = 0; i < hidden.size(); ++i) apply_hidden_scheme(spec, hidden, ctx, static_cast<int>(i));
    }

  private:
    InterventionContext context(const LayerInfo& layer, int step, int total_steps, bool guided) const {
        InterventionContext ctx;
        ctx.step = step;
        ctx.total_steps = total_steps;
        ctx.layer = layer;
        ctx.guided = guided;
        ctx.qk_window = qk_window;
        ctx.vsd_window = vsd_window;
        ctx.toggles = toggles;
        ctx.masks = masks;
        ctx.corr = corr;
        ctx.anchors = spec.anchor_indices;
        ctx.store = store;
        return ctx;
    }
};

} // namespace csty

#endif // CSTY_SCHEMES_HPP
