#ifndef CSTY_CONFIG_HPP
#define CSTY_CONFIG_HPP

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "csty/denoiser.hpp"
#include "csty/errors.hpp"
#include "csty/rng.hpp"
#include "csty/sampler.hpp"
#include "csty/schemes.hpp"
#include "csty/tensor_io.hpp"

namespace csty {

// Full effective run configuration. Every field has a default so an empty
// config file is valid; numeric text fields are kept as doubles so the
// canonical echo round-trips what the user wrote.
struct RunConfig {
    int steps = 50;
    int batch = 2;
    double guidance = 5.0;
    Scheme scheme = Scheme::consistyle;

    int grid_h = 16, grid_w = 16;
    int latent_channels = 4;
    std::vector<int> channels = {32, 64};
    int heads = 4;
    int embed_dim = 32;

    uint64_t seed_weights = 1234;
    uint64_t seed_sample = 42;

    double qk_lo = 0.1, qk_hi = 0.3;
    double vsd_lo = 0.1, vsd_hi = 0.3;
    double tau = 0.3;

    std::vector<int> anchors = {0};
    Toggles toggles;

    int dift_step = -1; // -1 resolves to steps / 4
    std::string dift_layer = "dec0.self";
    bool restrict_to_anchor_mask = true;

    std::vector<std::vector<int>> prompts;
    std::vector<int> subject_pos;

    int vshift_image = -1;
    double vshift_amount = 0.0;

    StepWindow qk_window() const { return StepWindow::from_fractions(qk_lo, qk_hi, steps); }
    StepWindow vsd_window() const { return StepWindow::from_fractions(vsd_lo, vsd_hi, steps); }
    int dift_step_resolved() const { return dift_step >= 0 ? dift_step : steps / 4; }

    DenoiserConfig denoiser() const {
        DenoiserConfig d;
        d.grid_h = grid_h;
        d.grid_w = grid_w;
        d.latent_channels = latent_channels;
        d.channels = channels;
        d.heads = heads;
        d.embed_dim = embed_dim;
        d.weight_seed = seed_weights;
        d.vshift_image = vshift_image;
        d.vshift_amount = static_cast<float>(vshift_amount);
        return d;
    }

    SamplerConfig sampler() const {
        SamplerConfig s;
        s.steps = steps;
        s.guidance = static_cast<float>(guidance);
        return s;
    }

    SchemeSpec scheme_spec() const { return SchemeSpec{scheme, anchors}; }
};

namespace detail {

inline std::string format_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

inline std::string format_csv(std::span<const int> vals) {
    std::string s;
    for (size_t i = 0; i < vals.size(); ++i) {
        if (i) s.push_back(',');
        s += std::to_string(vals[i]);
    }
    return s;
}

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t z = s.find_last_not_of(" \t\r");
    return s.substr(a, z - a + 1);
}

inline long long to_int(const std::string& key, const std::string& v) {
    char* end = nullptr;
    const long long r = std::strtoll(v.c_str(), &end, 10);
    if (v.empty() || end != v.c_str() + v.size())
        throw config_error(key + ": expected integer, got '" + v + "'");
    return r;
}

inline uint64_t to_u64(const std::string& key, const std::string& v) {
    char* end = nullptr;
    const unsigned long long r = std::strtoull(v.c_str(), &end, 10);
    if (v.empty() || end != v.c_str() + v.size() || v[0] == '-')
        throw config_error(key + ": expected unsigned integer, got '" + v + "'");
    return r;
}

inline double to_double(const std::string& key, const std::string& v) {
    char* end = nullptr;
    const double r = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(r))
        throw config_error(key + ": expected finite number, got '" + v + "'");
    return r;
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw config_error(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<int> to_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    size_t pos = 0;
    while (pos <= v.size()) {
        size_t comma = v.find(',', pos);
        if (comma == std::string::npos) comma = v.size();
        const std::string item = trim(v.substr(pos, comma - pos));
        if (item.empty()) throw config_error(key + ": empty list element");
        out.push_back(static_cast<int>(to_int(key, item)));
        pos = comma + 1;
    }
    return out;
}

} // namespace detail

// Applies one key=value assignment; throws config_error for unknown keys or
// unparseable values. Prompt keys are indexed (prompt.<i>, subject_pos.<i>).
inline void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    using namespace detail;
    auto grow = [](auto& vec, size_t n) {
        if (vec.size() < n) vec.resize(n);
    };
    if (key == "steps") cfg.steps = static_cast<int>(to_int(key, value));
    else if (key == "batch") cfg.batch = static_cast<int>(to_int(key, value));
    else if (key == "guidance") cfg.guidance = to_double(key, value);
    else if (key == "scheme") {
        try {
            cfg.scheme = parse_scheme(value);
        } catch (const std::invalid_argument& e) {
            throw config_error(std::string("scheme: ") + e.what());
        }
    } else if (key == "grid_h") cfg.grid_h = static_cast<int>(to_int(key, value));
    else if (key == "grid_w") cfg.grid_w = static_cast<int>(to_int(key, value));
    else if (key == "latent_channels") cfg.latent_channels = static_cast<int>(to_int(key, value));
    else if (key == "channels") cfg.channels = to_int_list(key, value);
    else if (key == "heads") cfg.heads = static_cast<int>(to_int(key, value));
    else if (key == "embed_dim") cfg.embed_dim = static_cast<int>(to_int(key, value));
    else if (key == "seed_weights") cfg.seed_weights = to_u64(key, value);
    else if (key == "seed_sample") cfg.seed_sample = to_u64(key, value);
    else if (key == "qk_lo") cfg.qk_lo = to_double(key, value);
    else if (key == "qk_hi") cfg.qk_hi = to_double(key, value);
    else if (key == "vsd_lo") cfg.vsd_lo = to_double(key, value);
    else if (key == "vsd_hi") cfg.vsd_hi = to_double(key, value);
    else if (key == "tau") cfg.tau = to_double(key, value);
    else if (key == "anchors") cfg.anchors = to_int_list(key, value);
    else if (key == "qk_inject") cfg.toggles.qk_inject = to_bool(key, value);
    else if (key == "qk_queries") cfg.toggles.qk_queries = to_bool(key, value);
    else if (key == "qk_keys") cfg.toggles.qk_keys = to_bool(key, value);
    else if (key == "vsd_inject") cfg.toggles.vsd_inject = to_bool(key, value);
    else if (key == "crossing") cfg.toggles.crossing = to_bool(key, value);
    else if (key == "adain_in_crossing") cfg.toggles.adain_in_crossing = to_bool(key, value);
    else if (key == "dift_step") cfg.dift_step = static_cast<int>(to_int(key, value));
    else if (key == "dift_layer") cfg.dift_layer = value;
    else if (key == "restrict_to_anchor_mask") cfg.restrict_to_anchor_mask = to_bool(key, value);
    else if (key == "vshift_image") cfg.vshift_image = static_cast<int>(to_int(key, value));
    else if (key == "vshift_amount") cfg.vshift_amount = to_double(key, value);
    else if (key.rfind("prompt.", 0) == 0) {
        const size_t i = static_cast<size_t>(to_int(key, key.substr(7)));
        grow(cfg.prompts, i + 1);
        cfg.prompts[i] = to_int_list(key, value);
    } else if (key.rfind("subject_pos.", 0) == 0) {
        const size_t i = static_cast<size_t>(to_int(key, key.substr(12)));
        grow(cfg.subject_pos, i + 1);
        cfg.subject_pos[i] = static_cast<int>(to_int(key, value));
    } else {
        throw config_error("unknown config key '" + key + "'");
    }
}

// Default prompts share the subject token (50) and vary a style token per
// image, so cross-attention geometry differs per image while the subject
// query is common.
inline void fill_prompt_defaults(RunConfig& cfg) {
    const size_t b = static_cast<size_t>(cfg.batch);
    if (cfg.prompts.size() < b) cfg.prompts.resize(b);
    if (cfg.subject_pos.size() < b) cfg.subject_pos.resize(b, -1);
    for (size_t i = 0; i < b; ++i) {
        if (cfg.prompts[i].empty()) cfg.prompts[i] = {2, 50, 10 + static_cast<int>(i)};
        if (cfg.subject_pos[i] < 0) cfg.subject_pos[i] = 1;
    }
}

inline void validate_config(RunConfig& cfg) {
    if (cfg.steps < 10) throw config_error("steps: must be >= 10, got " + std::to_string(cfg.steps));
    if (cfg.batch < 1) throw config_error("batch: must be >= 1");
    if (!(cfg.tau > 0.0 && cfg.tau < 1.0)) throw config_error("tau: must lie in (0,1)");
    auto check_window = [](const char* name, double lo, double hi) {
        if (!(lo >= 0.0 && lo < hi && hi <= 1.0))
            throw config_error(std::string(name) + ": window fractions must satisfy 0 <= lo < hi <= 1");
    };
    check_window("qk window", cfg.qk_lo, cfg.qk_hi);
    check_window("vsd window", cfg.vsd_lo, cfg.vsd_hi);
    if (cfg.anchors.empty()) throw config_error("anchors: must list at least one image");
    int prev = -1;
    for (int a : cfg.anchors) {
        if (a < 0 || a >= cfg.batch)
            throw config_error("anchors: index " + std::to_string(a) + " outside batch of " +
                               std::to_string(cfg.batch));
        if (a <= prev) throw config_error("anchors: indices must be strictly ascending");
        prev = a;
    }
    if (cfg.dift_step >= cfg.steps)
        throw config_error("dift_step: must be -1 or inside [0, steps)");
    if (cfg.dift_step < -1) throw config_error("dift_step: must be -1 or inside [0, steps)");
    if (cfg.dift_layer != "dec0.self")
        throw config_error("dift_layer: only dec0.self carries the mask-aligned grid");
    if (cfg.vshift_image < -1 || cfg.vshift_image >= cfg.batch)
        throw config_error("vshift_image: must be -1 or a batch index");
    fill_prompt_defaults(cfg);
    if (cfg.prompts.size() > static_cast<size_t>(cfg.batch))
        throw config_error("prompt.*: index outside batch of " + std::to_string(cfg.batch));
    if (cfg.subject_pos.size() > static_cast<size_t>(cfg.batch))
        throw config_error("subject_pos.*: index outside batch of " + std::to_string(cfg.batch));
    for (int i = 0; i < cfg.batch; ++i) {
        const auto& toks = cfg.prompts[i];
        if (toks.empty()) throw config_error("prompt." + std::to_string(i) + ": empty token list");
        for (int t : toks)
            if (t < 0) throw config_error("prompt." + std::to_string(i) + ": token ids must be >= 0");
        if (cfg.subject_pos[i] < 0 || cfg.subject_pos[i] >= static_cast<int>(toks.size()))
            throw config_error("subject_pos." + std::to_string(i) + ": outside prompt of length " +
                               std::to_string(toks.size()));
    }
    try {
        cfg.denoiser().validate();
        SchemeSpec spec = cfg.scheme_spec();
        spec.validate(cfg.batch);
    } catch (const std::invalid_argument& e) {
        throw config_error(e.what());
    }
}

// Canonical echo of the full effective configuration: fixed section order,
// keys sorted within each section. Its hash names the output tree.
inline std::string resolved_config_text(const RunConfig& cfg) {
    using namespace detail;
    std::string s;
    s += "[run]\n";
    s += "batch = " + std::to_string(cfg.batch) + "\n";
    s += "guidance = " + format_number(cfg.guidance) + "\n";
    s += "scheme = " + std::string(scheme_token(cfg.scheme)) + "\n";
    s += "steps = " + std::to_string(cfg.steps) + "\n";
    s += "\n[model]\n";
    s += "channels = " + format_csv(cfg.channels) + "\n";
    s += "embed_dim = " + std::to_string(cfg.embed_dim) + "\n";
    s += "grid_h = " + std::to_string(cfg.grid_h) + "\n";
    s += "grid_w = " + std::to_string(cfg.grid_w) + "\n";
    s += "heads = " + std::to_string(cfg.heads) + "\n";
    s += "latent_channels = " + std::to_string(cfg.latent_channels) + "\n";
    s += "\n[seeds]\n";
    s += "seed_sample = " + std::to_string(cfg.seed_sample) + "\n";
    s += "seed_weights = " + std::to_string(cfg.seed_weights) + "\n";
    s += "\n[windows]\n";
    s += "qk_hi = " + format_number(cfg.qk_hi) + "\n";
    s += "qk_lo = " + format_number(cfg.qk_lo) + "\n";
    s += "vsd_hi = " + format_number(cfg.vsd_hi) + "\n";
    s += "vsd_lo = " + format_number(cfg.vsd_lo) + "\n";
    s += "\n[masks]\n";
    s += "tau = " + format_number(cfg.tau) + "\n";
    s += "\n[anchors]\n";
    s += "anchors = " + format_csv(cfg.anchors) + "\n";
    s += "\n[toggles]\n";
    s += std::string("adain_in_crossing = ") + (cfg.toggles.adain_in_crossing ? "true" : "false") + "\n";
    s += std::string("crossing = ") + (cfg.toggles.crossing ? "true" : "false") + "\n";
    s += std::string("qk_inject = ") + (cfg.toggles.qk_inject ? "true" : "false") + "\n";
    s += std::string("qk_keys = ") + (cfg.toggles.qk_keys ? "true" : "false") + "\n";
    s += std::string("qk_queries = ") + (cfg.toggles.qk_queries ? "true" : "false") + "\n";
    s += std::string("vsd_inject = ") + (cfg.toggles.vsd_inject ? "true" : "false") + "\n";
    s += "\n[correspondence]\n";
    s += "dift_layer = " + cfg.dift_layer + "\n";
    s += "dift_step = " + std::to_string(cfg.dift_step) + "\n";
    s += std::string("restrict_to_anchor_mask = ") + (cfg.restrict_to_anchor_mask ? "true" : "false") + "\n";
    s += "\n[prompts]\n";
    for (int i = 0; i < cfg.batch; ++i)
        s += "prompt." + std::to_string(i) + " = " + format_csv(cfg.prompts[i]) + "\n";
    for (int i = 0; i < cfg.batch; ++i)
        s += "subject_pos." + std::to_string(i) + " = " + std::to_string(cfg.subject_pos[i]) + "\n";
    s += "\n[stress]\n";
    s += "vshift_amount = " + format_number(cfg.vshift_amount) + "\n";
    s += "vshift_image = " + std::to_string(cfg.vshift_image) + "\n";
    return s;
}

inline std::string run_id(const RunConfig& cfg) { return hex64(fnv1a64(resolved_config_text(cfg))); }

// Flat key=value text with optional [section] headers and # comments.
// Sections group keys visually; key names address values globally.
inline RunConfig parse_config_text(const std::string& text, std::span<const std::pair<std::string, std::string>> overrides,
                                   const std::string& origin = "config") {
    RunConfig cfg;
    size_t pos = 0;
    int line_no = 0;
    while (pos < text.size()) {
        size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        const std::string line = detail::trim(text.substr(pos, nl - pos));
        pos = nl + 1;
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        if (line[0] == '[') {
            if (line.back() != ']')
                throw config_error(origin + ":" + std::to_string(line_no) + ": unterminated section header");
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error(origin + ":" + std::to_string(line_no) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw config_error(origin + ":" + std::to_string(line_no) + ": empty key");
        apply_config_key(cfg, key, value);
    }
    for (const auto& [key, value] : overrides) apply_config_key(cfg, key, value);
    validate_config(cfg);
    return cfg;
}

inline RunConfig parse_config(const std::filesystem::path& path,
                              std::span<const std::pair<std::string, std::string>> overrides) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const artifact_error&) {
        throw config_error("cannot read config file " + path.string());
    }
    return parse_config_text(text, overrides, path.string());
}

} // namespace csty

#endif // CSTY_CONFIG_HPP
