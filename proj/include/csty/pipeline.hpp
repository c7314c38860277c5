#ifndef CSTY_PIPELINE_HPP
#define CSTY_PIPELINE_HPP

#include <algorithm>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "csty/config.hpp"
#include "csty/correspondence.hpp"
#include "csty/denoiser.hpp"
#include "csty/errors.hpp"
#include "csty/metrics.hpp"
#include "csty/sampler.hpp"
#include "csty/schemes.hpp"
#include "csty/tensor_io.hpp"
#include "csty/value_store.hpp"

namespace csty {

struct Phase1Result {
    ValueStore store;
    std::vector<Mat> latents;
    std::vector<Mat> style_features;
};

struct Phase2Result {
    std::vector<SubjectMask> masks;
    std::vector<CorrespondenceMap> maps; // non-anchor images, ascending image order
    std::vector<Mat> dift;               // per image, mask-grid aligned
};

struct Phase3Result {
    std::vector<Mat> latents;
    std::vector<Mat> style_features;
    CaptureLog log;
};

inline std::vector<PromptEmbedding> embed_batch(const RunConfig& cfg) {
    const uint64_t seed = mix_seed(cfg.seed_weights, 0xe8bed5u);
    std::vector<PromptEmbedding> out;
    for (int i = 0; i < cfg.batch; ++i)
        out.push_back(embed_prompt(cfg.prompts[i], cfg.subject_pos[i], seed, cfg.embed_dim));
    return out;
}

inline PromptEmbedding null_prompt(const RunConfig& cfg) {
    const uint64_t seed = mix_seed(cfg.seed_weights, 0xe8bed5u);
    return embed_prompt({0}, 0, seed, cfg.embed_dim);
}

namespace detail {

template <typename Fn>
auto phase_guard(const char* phase, Fn&& fn) {
    try {
        return fn();
    } catch (const artifact_error&) {
        throw;
    } catch (const config_error&) {
        throw;
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string(phase) + ": " + e.what());
    }
}

} // namespace detail

// Vanilla pass: no interventions, records the value tensors inside the vsd
// window and the final-step style reference features.
inline Phase1Result phase1_vanilla(const RunConfig& cfg) {
    return detail::phase_guard("phase1", [&] {
        const Denoiser den(cfg.denoiser());
        CaptureRequest req;
        req.record_vsd = true;
        req.vsd_window = cfg.vsd_window();
        req.style_features = true;
        const auto prompts = embed_batch(cfg);
        SampleResult res = sample(den, cfg.sampler(), prompts, null_prompt(cfg), cfg.seed_sample, nullptr, req);
        Phase1Result out;
        out.store = std::move(res.log.vsd);
        out.latents = std::move(res.latents);
        out.style_features = std::move(res.log.style);
        return out;
    });
}

// Crossing-only pass bootstrapped with full-image masks (real masks do not
// exist yet). Extracts subject masks from aggregated cross-attention maps and
// builds the patch correspondence from captured features.
inline Phase2Result phase2_correspondence(const RunConfig& cfg) {
    return detail::phase_guard("phase2", [&] {
        const Denoiser den(cfg.denoiser());
        SchemeProcessor proc;
        proc.spec = cfg.scheme_spec();
        proc.spec.scheme = Scheme::consistyle;
        proc.toggles = cfg.toggles;
        proc.toggles.qk_inject = false;
        proc.toggles.vsd_inject = false;
        proc.qk_window = cfg.qk_window();
        proc.vsd_window = cfg.vsd_window();
        for (int i = 0; i < cfg.batch; ++i) proc.masks.push_back(SubjectMask::full(i, cfg.grid_h, cfg.grid_w));

        CaptureRequest req;
        req.xattn_maps = true;
        req.mask_window = cfg.qk_window();
        req.dift_step = cfg.dift_step_resolved();
        req.dift_layer = cfg.dift_layer;
        const auto prompts = embed_batch(cfg);
        SampleResult res = sample(den, cfg.sampler(), prompts, null_prompt(cfg), cfg.seed_sample, &proc, req);

        Phase2Result out;
        for (int i = 0; i < cfg.batch; ++i) {
            if (res.log.xattn[i].empty())
                throw std::runtime_error("no cross-attention maps captured for image " + std::to_string(i));
            const std::vector<float> agg = aggregate_attention(res.log.xattn[i]);
            SubjectMask mask =
                extract_subject_mask(agg, i, cfg.grid_h, cfg.grid_w, static_cast<float>(cfg.tau));
            if (mask.empty()) {
                const float mx = *std::max_element(agg.begin(), agg.end());
                throw std::runtime_error("empty subject mask for image " + std::to_string(i) +
                                         " (max attention weight " + std::to_string(mx) +
                                         "); tau likely too high");
            }
            out.masks.push_back(std::move(mask));
            if (res.log.dift[i].rows == 0)
                throw std::runtime_error("correspondence features not captured for image " + std::to_string(i));
            out.dift.push_back(std::move(res.log.dift[i]));
        }
        std::vector<AnchorFeatures> anchors;
        for (int a : cfg.anchors) anchors.push_back({&out.dift[a], &out.masks[a]});
        const SchemeSpec spec = cfg.scheme_spec();
        for (int i = 0; i < cfg.batch; ++i) {
            if (spec.is_anchor(i)) continue;
            out.maps.push_back(
                build_correspondence(out.dift[i], out.masks[i], anchors, cfg.restrict_to_anchor_mask));
        }
        return out;
    });
}

inline std::vector<const CorrespondenceMap*> correspondence_view(const RunConfig& cfg,
                                                                 std::span<const CorrespondenceMap> maps) {
    std::vector<const CorrespondenceMap*> view(cfg.batch, nullptr);
    for (const auto& m : maps) {
        if (m.image_index < 0 || m.image_index >= cfg.batch)
            throw std::invalid_argument("correspondence map for image " + std::to_string(m.image_index) +
                                        " outside batch");
        view[m.image_index] = &m;
    }
    return view;
}

// Final pass with the configured scheme and every enabled component.
inline Phase3Result phase3_final(const RunConfig& cfg, const ValueStore& store, std::span<const SubjectMask> masks,
                                 std::span<const CorrespondenceMap* const> corr, bool trace_values = false) {
    return detail::phase_guard("phase3", [&] {
        const Denoiser den(cfg.denoiser());
        SchemeProcessor proc;
        proc.spec = cfg.scheme_spec();
        proc.toggles = cfg.toggles;
        proc.qk_window = cfg.qk_window();
        proc.vsd_window = cfg.vsd_window();
        proc.masks.assign(masks.begin(), masks.end());
        proc.corr.assign(corr.begin(), corr.end());
        proc.store = &store;

        CaptureRequest req;
        req.style_features = true;
        req.trace_v = trace_values;
        const auto prompts = embed_batch(cfg);
        SampleResult res = sample(den, cfg.sampler(), prompts, null_prompt(cfg), cfg.seed_sample, &proc, req);
        Phase3Result out;
        out.latents = std::move(res.latents);
        out.style_features = std::move(res.log.style);
        out.log = std::move(res.log);
        return out;
    });
}

struct RunArtifacts {
    Phase1Result p1;
    Phase2Result p2;
    Phase3Result p3;
    MetricsReport metrics;
};

inline RunArtifacts run_all(const RunConfig& cfg) {
    RunArtifacts a;
    a.p1 = phase1_vanilla(cfg);
    a.p2 = phase2_correspondence(cfg);
    const auto corr = correspondence_view(cfg, a.p2.maps);
    a.p3 = phase3_final(cfg, a.p1.store, a.p2.masks, corr);
    a.metrics = compute_metrics(a.p3.style_features, a.p1.style_features, a.p2.masks);
    return a;
}

// ---- output tree ----

struct ManifestRow {
    std::string phase;
    int step = -1;
    std::string layer = "-";
    int image = -1;
    std::string kind;
    std::string path;

    auto key() const { return std::tie(phase, kind, step, image, layer, path); }
    bool operator<(const ManifestRow& o) const { return key() < o.key(); }
};

inline std::filesystem::path tree_root(const RunConfig& cfg, const std::filesystem::path& out_root) {
    return out_root / run_id(cfg);
}

inline void write_tree_base(const RunConfig& cfg, const std::filesystem::path& tree) {
    std::filesystem::create_directories(tree / "store");
    std::filesystem::create_directories(tree / "latents");
    std::filesystem::create_directories(tree / "images");
    write_file(tree / "config.resolved", resolved_config_text(cfg));
}

inline std::vector<ManifestRow> load_manifest(const std::filesystem::path& tree) {
    const auto path = tree / "manifest.tsv";
    std::vector<ManifestRow> rows;
    if (!std::filesystem::exists(path)) return rows;
    const std::string text = read_file(path);
    size_t pos = 0;
    bool header = true;
    while (pos < text.size()) {
        size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        const std::string line = text.substr(pos, nl - pos);
        const size_t at = pos;
        pos = nl + 1;
        if (line.empty()) continue;
        if (header) {
            header = false;
            continue;
        }
        ManifestRow r;
        char phase[64] = {}, layer[64] = {}, kind[64] = {}, file[512] = {};
        if (std::sscanf(line.c_str(), "%63[^\t]\t%d\t%63[^\t]\t%d\t%63[^\t]\t%511[^\t\n]", phase, &r.step, layer,
                        &r.image, kind, file) != 6)
            throw artifact_error(path.string() + ": malformed manifest row", at);
        r.phase = phase;
        r.layer = layer;
        r.kind = kind;
        r.path = file;
        rows.push_back(std::move(r));
    }
    return rows;
}

// Replaces one phase's rows and rewrites the manifest sorted, so separate
// phase invocations and a single full run produce byte-identical files.
inline void merge_manifest(const std::filesystem::path& tree, const std::string& phase,
                           std::vector<ManifestRow> fresh) {
    std::vector<ManifestRow> rows = load_manifest(tree);
    rows.erase(std::remove_if(rows.begin(), rows.end(), [&](const ManifestRow& r) { return r.phase == phase; }),
               rows.end());
    rows.insert(rows.end(), fresh.begin(), fresh.end());
    std::sort(rows.begin(), rows.end());
    std::string text = "phase\tstep\tlayer\timage\tkind\tpath\n";
    for (const auto& r : rows)
        text += r.phase + "\t" + std::to_string(r.step) + "\t" + r.layer + "\t" + std::to_string(r.image) + "\t" +
                r.kind + "\t" + r.path + "\n";
    write_file(tree / "manifest.tsv", text);
}

inline void persist_phase1(const RunConfig& cfg, const Phase1Result& p1, const std::filesystem::path& tree) {
    write_tree_base(cfg, tree);
    p1.store.save(tree / "store");
    const DenoiserConfig den = cfg.denoiser();
    std::vector<ManifestRow> rows;
    for (const auto& [key, halves] : p1.store.entries()) {
        const std::string file =
            "store/v_s" + std::to_string(key.first) + "_i" + std::to_string(key.second) + ".csty";
        rows.push_back({"phase1", key.first, p1.store.layer_id(), key.second, "value", file});
    }
    for (int i = 0; i < cfg.batch; ++i) {
        const std::string latent = "latents/vanilla_" + std::to_string(i) + ".csty";
        const std::string image = "images/vanilla_" + std::to_string(i) + ".pgm";
        const std::string feats = "latents/style_vanilla_" + std::to_string(i) + ".csty";
        save_mat(tree / latent, p1.latents[i]);
        write_pgm(tree / image, decode_to_gray(p1.latents[i], den));
        save_mat(tree / feats, p1.style_features[i]);
        rows.push_back({"phase1", cfg.steps - 1, "-", i, "latent", latent});
        rows.push_back({"phase1", cfg.steps - 1, "-", i, "image", image});
        rows.push_back({"phase1", cfg.steps - 1, "dec0.self", i, "features", feats});
    }
    merge_manifest(tree, "phase1", std::move(rows));
}

inline void persist_phase2(const RunConfig& cfg, const Phase2Result& p2, const std::filesystem::path& tree) {
    write_tree_base(cfg, tree);
    std::string masks_text, maps_text;
    for (const auto& m : p2.masks) masks_text += serialize_mask(m) + "\n";
    for (const auto& m : p2.maps) maps_text += serialize_map(m) + "\n";
    write_file(tree / "masks.txt", masks_text);
    write_file(tree / "maps.txt", maps_text);
    std::vector<ManifestRow> rows;
    rows.push_back({"phase2", -1, "dec0.xattn", -1, "masks", "masks.txt"});
    rows.push_back({"phase2", -1, "-", -1, "maps", "maps.txt"});
    for (int i = 0; i < cfg.batch; ++i) {
        const std::string feats = "latents/dift_" + std::to_string(i) + ".csty";
        save_mat(tree / feats, p2.dift[i]);
        rows.push_back({"phase2", cfg.dift_step_resolved(), cfg.dift_layer, i, "features", feats});
    }
    merge_manifest(tree, "phase2", std::move(rows));
}

inline void persist_phase3(const RunConfig& cfg, const Phase3Result& p3, const MetricsReport& metrics,
                           const std::filesystem::path& tree) {
    write_tree_base(cfg, tree);
    const DenoiserConfig den = cfg.denoiser();
    std::vector<ManifestRow> rows;
    for (int i = 0; i < cfg.batch; ++i) {
        const std::string latent = "latents/final_" + std::to_string(i) + ".csty";
        const std::string image = "images/final_" + std::to_string(i) + ".pgm";
        const std::string feats = "latents/style_final_" + std::to_string(i) + ".csty";
        save_mat(tree / latent, p3.latents[i]);
        write_pgm(tree / image, decode_to_gray(p3.latents[i], den));
        save_mat(tree / feats, p3.style_features[i]);
        rows.push_back({"phase3", cfg.steps - 1, "-", i, "latent", latent});
        rows.push_back({"phase3", cfg.steps - 1, "-", i, "image", image});
        rows.push_back({"phase3", cfg.steps - 1, "dec0.self", i, "features", feats});
    }
    write_file(tree / "metrics.tsv", metrics_tsv(metrics));
    rows.push_back({"phase3", -1, "-", -1, "metrics", "metrics.tsv"});
    merge_manifest(tree, "phase3", std::move(rows));
}

// ---- artifact loading for separately invoked phases ----

inline std::vector<SubjectMask> load_masks(const RunConfig& cfg, const std::filesystem::path& tree) {
    auto masks = parse_masks(read_file(tree / "masks.txt"), cfg.grid_h, cfg.grid_w, (tree / "masks.txt").string());
    if (static_cast<int>(masks.size()) != cfg.batch)
        throw artifact_error((tree / "masks.txt").string() + ": expected " + std::to_string(cfg.batch) + " masks", 0);
    return masks;
}

inline std::vector<CorrespondenceMap> load_maps(const std::filesystem::path& tree) {
    return parse_maps(read_file(tree / "maps.txt"), (tree / "maps.txt").string());
}

inline std::vector<Mat> load_feature_set(const std::filesystem::path& tree, const std::string& prefix, int batch) {
    std::vector<Mat> out;
    for (int i = 0; i < batch; ++i)
        out.push_back(load_mat(tree / "latents" / (prefix + "_" + std::to_string(i) + ".csty")));
    return out;
}

// ---- command-level entry points shared by the CLI and tests ----

inline void cmd_phase1(const RunConfig& cfg, const std::filesystem::path& tree) {
    persist_phase1(cfg, phase1_vanilla(cfg), tree);
}

inline void cmd_phase2(const RunConfig& cfg, const std::filesystem::path& tree) {
    persist_phase2(cfg, phase2_correspondence(cfg), tree);
}

inline void cmd_phase3(const RunConfig& cfg, const std::filesystem::path& tree) {
    const ValueStore store = ValueStore::load(tree / "store");
    const auto masks = load_masks(cfg, tree);
    const auto maps = load_maps(tree);
    const auto corr = correspondence_view(cfg, maps);
    const Phase3Result p3 = phase3_final(cfg, store, masks, corr);
    const auto vanilla_features = load_feature_set(tree, "style_vanilla", cfg.batch);
    const MetricsReport metrics = compute_metrics(p3.style_features, vanilla_features, masks);
    persist_phase3(cfg, p3, metrics, tree);
}

inline MetricsReport cmd_run(const RunConfig& cfg, const std::filesystem::path& tree) {
    const RunArtifacts a = run_all(cfg);
    persist_phase1(cfg, a.p1, tree);
    persist_phase2(cfg, a.p2, tree);
    persist_phase3(cfg, a.p3, a.metrics, tree);
    return a.metrics;
}

struct VariantResult {
    std::string name;
    MetricsReport metrics;
};

inline std::vector<std::pair<std::string, RunConfig>> ablation_grid(const RunConfig& base) {
    std::vector<std::pair<std::string, RunConfig>> grid;
    grid.emplace_back("base", base);
    RunConfig v = base;
    v.toggles.adain_in_crossing = false;
    grid.emplace_back("no-adain", v);
    v = base;
    v.toggles.qk_queries = false;
    grid.emplace_back("keys-only", v);
    v = base;
    v.toggles.qk_keys = false;
    grid.emplace_back("queries-only", v);
    v = base;
    v.toggles.qk_inject = false;
    grid.emplace_back("no-qk", v);
    v = base;
    v.toggles.vsd_inject = false;
    grid.emplace_back("no-vsd", v);
    v = base;
    v.toggles.crossing = false;
    grid.emplace_back("no-crossing", v);
    return grid;
}

inline std::string comparison_tsv(const std::string& label, std::span<const VariantResult> results) {
    std::string s = label + "\tstyle_distance_mean\tstyle_distance_std\tconsistency_mean\tconsistency_std\n";
    for (const auto& r : results)
        s += r.name + "\t" + detail::format_metric(r.metrics.style_mean) + "\t" +
             detail::format_metric(r.metrics.style_std) + "\t" + detail::format_metric(r.metrics.consistency_mean) +
             "\t" + detail::format_metric(r.metrics.consistency_std) + "\n";
    return s;
}

// Base config plus the six single-component ablations, each with a full
// artifact tree, summarized in one comparative table.
inline std::vector<VariantResult> cmd_ablate(const RunConfig& cfg, const std::filesystem::path& tree) {
    std::filesystem::create_directories(tree);
    write_file(tree / "config.resolved", resolved_config_text(cfg));
    std::vector<VariantResult> results;
    for (const auto& [name, variant] : ablation_grid(cfg))
        results.push_back({name, cmd_run(variant, tree / "variants" / name)});
    write_file(tree / "ablate.tsv", comparison_tsv("variant", results));
    return results;
}

inline std::vector<VariantResult> cmd_compare_schemes(const RunConfig& cfg, const std::filesystem::path& tree) {
    std::filesystem::create_directories(tree);
    write_file(tree / "config.resolved", resolved_config_text(cfg));
    std::vector<VariantResult> results;
    for (Scheme s : {Scheme::vanilla, Scheme::consistyle, Scheme::consistory, Scheme::cross_image,
                     Scheme::style_aligned, Scheme::illusign}) {
        RunConfig variant = cfg;
        variant.scheme = s;
        results.push_back({scheme_token(s), cmd_run(variant, tree / "schemes" / scheme_token(s))});
    }
    write_file(tree / "schemes.tsv", comparison_tsv("scheme", results));
    return results;
}

} // namespace csty

#endif // CSTY_PIPELINE_HPP
