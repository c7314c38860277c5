#ifndef CSTY_CORRESPONDENCE_HPP
#define CSTY_CORRESPONDENCE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "csty/errors.hpp"
#include "csty/tensor.hpp"

namespace csty {

// Patch indices of one image's subject region, strictly ascending.
struct SubjectMask {
    int image_index = 0;
    int grid_h = 0;
    int grid_w = 0;
    std::vector<int> patch_indices;

    bool empty() const { return patch_indices.empty(); }

    void validate(int n_patches) const {
        int prev = -1;
        for (int p : patch_indices) {
            if (p <= prev) throw std::invalid_argument("subject mask: indices not strictly ascending");
            if (p < 0 || p >= n_patches)
                throw std::invalid_argument("subject mask: index " + std::to_string(p) + " outside [0, " +
                                            std::to_string(n_patches) + ")");
            prev = p;
        }
    }

    static SubjectMask full(int image_index, int grid_h, int grid_w) {
        SubjectMask m;
        m.image_index = image_index;
        m.grid_h = grid_h;
        m.grid_w = grid_w;
        m.patch_indices.resize(static_cast<size_t>(grid_h) * grid_w);
        for (size_t i = 0; i < m.patch_indices.size(); ++i) m.patch_indices[i] = static_cast<int>(i);
        return m;
    }
};

// For each subject patch of an image (mask order), the best-matching anchor
// patch and the cosine similarity of the match.
struct CorrespondenceMap {
    struct Entry {
        int target_patch = 0;
        int anchor_index = 0;
        int anchor_patch = 0;
        float similarity = 0.0f;
    };
    int image_index = 0;
    std::vector<Entry> entries;
};

// Elementwise mean of attention maps gathered across steps and heads.
inline std::vector<float> aggregate_attention(std::span<const std::vector<float>> maps) {
    if (maps.empty()) throw std::invalid_argument("aggregate_attention: no maps");
    const size_t n = maps[0].size();
    std::vector<double> acc(n, 0.0);
    for (const auto& m : maps) {
        if (m.size() != n) throw std::invalid_argument("aggregate_attention: length mismatch");
        for (size_t i = 0; i < n; ++i) acc[i] += m[i];
    }
    std::vector<float> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = static_cast<float>(acc[i] / maps.size());
    return out;
}

// Max-normalizes the map to [0,1] and keeps patches at or above tau.
inline SubjectMask extract_subject_mask(std::span<const float> attn_map, int image_index, int grid_h, int grid_w,
                                        float tau) {
    if (!(tau > 0.0f && tau < 1.0f))
        throw std::invalid_argument("extract_subject_mask: tau must lie in (0,1), got " + std::to_string(tau));
    if (attn_map.size() != static_cast<size_t>(grid_h) * grid_w)
        throw std::invalid_argument("extract_subject_mask: map length does not match grid");
    float mx = 0.0f;
    for (float v : attn_map) {
        if (v < 0.0f) throw std::invalid_argument("extract_subject_mask: negative attention weight");
        mx = std::max(mx, v);
    }
    if (mx == 0.0f) throw std::invalid_argument("extract_subject_mask: no subject signal (all-zero map)");
    SubjectMask m;
    m.image_index = image_index;
    m.grid_h = grid_h;
    m.grid_w = grid_w;
    for (size_t i = 0; i < attn_map.size(); ++i)
        if (attn_map[i] / mx >= tau) m.patch_indices.push_back(static_cast<int>(i));
    return m;
}

struct AnchorFeatures {
    const Mat* features = nullptr; // N_a x d, one row per patch
    const SubjectMask* mask = nullptr;
};

namespace detail {

inline double patch_norm(const Mat& f, int p, const char* who) {
    double s = 0.0;
    for (int c = 0; c < f.cols; ++c) {
        const double v = f.at(p, c);
        s += v * v;
    }
    const double n = std::sqrt(s);
    if (n == 0.0)
        throw std::invalid_argument(std::string(who) + " patch " + std::to_string(p) + " has zero-norm feature");
    return n;
}

} // namespace detail

// Maps every target subject patch to the most cosine-similar patch across the
// anchors' subject regions. Ties break to the lower anchor index, then the
// lower anchor patch. When restrict_to_mask is false the search widens to all
// anchor patches.
inline CorrespondenceMap build_correspondence(const Mat& target_features, const SubjectMask& target_mask,
                                              std::span<const AnchorFeatures> anchors,
                                              bool restrict_to_mask = true) {
    if (anchors.empty()) throw std::invalid_argument("build_correspondence: no anchors");
    const int d = target_features.cols;
    for (const auto& a : anchors) {
        if (a.features->cols != d) throw std::invalid_argument("build_correspondence: feature dim mismatch");
        if (restrict_to_mask && a.mask->empty())
            throw std::invalid_argument("build_correspondence: anchor " + std::to_string(a.mask->image_index) +
                                        " has empty subject mask");
    }
    CorrespondenceMap out;
    out.image_index = target_mask.image_index;
    for (int p : target_mask.patch_indices) {
        const double tn = detail::patch_norm(target_features, p, "target");
        CorrespondenceMap::Entry best;
        best.target_patch = p;
        double best_sim = -2.0;
        for (size_t ai = 0; ai < anchors.size(); ++ai) {
            const Mat& af = *anchors[ai].features;
            const auto candidates = [&]() -> std::vector<int> {
                if (restrict_to_mask) return anchors[ai].mask->patch_indices;
                std::vector<int> all(af.rows);
                for (int i = 0; i < af.rows; ++i) all[i] = i;
                return all;
            }();
            for (int ap : candidates) {
                const double an = detail::patch_norm(af, ap, "anchor");
                double dot = 0.0;
                for (int c = 0; c < d; ++c) dot += static_cast<double>(target_features.at(p, c)) * af.at(ap, c);
                const double sim = dot / (tn * an);
                if (sim > best_sim) {
                    best_sim = sim;
                    best.anchor_index = static_cast<int>(ai);
                    best.anchor_patch = ap;
                }
            }
        }
        best.similarity = static_cast<float>(std::clamp(best_sim, -1.0, 1.0));
        out.entries.push_back(best);
    }
    return out;
}

// --- text serialization: one record per image, human-diffable ---

inline std::string serialize_mask(const SubjectMask& m) {
    std::string s = "image=" + std::to_string(m.image_index) + " mask=";
    for (size_t i = 0; i < m.patch_indices.size(); ++i) {
        if (i) s.push_back(',');
        s += std::to_string(m.patch_indices[i]);
    }
    return s;
}

inline std::string serialize_map(const CorrespondenceMap& m) {
    std::string s = "image=" + std::to_string(m.image_index) + " map=";
    for (size_t i = 0; i < m.entries.size(); ++i) {
        if (i) s.push_back(',');
        const auto& e = m.entries[i];
        s += std::to_string(e.target_patch) + ":" + std::to_string(e.anchor_index) + "/" +
             std::to_string(e.anchor_patch);
    }
    return s;
}

namespace detail {

struct LineScanner {
    const std::string& text;
    std::string path;
    size_t pos = 0;

    bool next(std::string& line, size_t& line_start) {
        if (pos >= text.size()) return false;
        line_start = pos;
        const size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) {
            line = text.substr(pos);
            pos = text.size();
        } else {
            line = text.substr(pos, nl - pos);
            pos = nl + 1;
        }
        return true;
    }
};

inline long parse_int(const std::string& s, size_t& i, const std::string& path, size_t offset) {
    size_t start = i;
    bool neg = false;
    if (i < s.size() && s[i] == '-') {
        neg = true;
        ++i;
    }
    long v = 0;
    while (i < s.size() && s[i] >= '0' && s[i] <= '9') {
        v = v * 10 + (s[i] - '0');
        ++i;
    }
    if (i == start + (neg ? 1 : 0)) throw artifact_error(path + ": expected integer", offset + start);
    return neg ? -v : v;
}

inline void expect(const std::string& s, size_t& i, const char* token, const std::string& path, size_t offset) {
    const size_t len = std::strlen(token);
    if (s.compare(i, len, token) != 0)
        throw artifact_error(path + ": expected '" + token + "'", offset + i);
    i += len;
}

} // namespace detail

inline std::vector<SubjectMask> parse_masks(const std::string& text, int grid_h, int grid_w,
                                            const std::string& path = "masks") {
    std::vector<SubjectMask> out;
    detail::LineScanner sc{text, path};
    std::string line;
    size_t at = 0;
    while (sc.next(line, at)) {
        if (line.empty()) continue;
        size_t i = 0;
        detail::expect(line, i, "image=", path, at);
        SubjectMask m;
        m.image_index = static_cast<int>(detail::parse_int(line, i, path, at));
        m.grid_h = grid_h;
        m.grid_w = grid_w;
        detail::expect(line, i, " mask=", path, at);
        while (i < line.size()) {
            m.patch_indices.push_back(static_cast<int>(detail::parse_int(line, i, path, at)));
            if (i < line.size()) detail::expect(line, i, ",", path, at);
        }
        try {
            m.validate(grid_h * grid_w);
        } catch (const std::invalid_argument& e) {
            throw artifact_error(path + ": " + e.what(), at);
        }
        out.push_back(std::move(m));
    }
    return out;
}

inline std::vector<CorrespondenceMap> parse_maps(const std::string& text, const std::string& path = "maps") {
    std::vector<CorrespondenceMap> out;
    detail::LineScanner sc{text, path};
    std::string line;
    size_t at = 0;
    while (sc.next(line, at)) {
        if (line.empty()) continue;
        size_t i = 0;
        detail::expect(line, i, "image=", path, at);
        CorrespondenceMap m;
        m.image_index = static_cast<int>(detail::parse_int(line, i, path, at));
        detail::expect(line, i, " map=", path, at);
        while (i < line.size()) {
            CorrespondenceMap::Entry e;
            e.target_patch = static_cast<int>(detail::parse_int(line, i, path, at));
            detail::expect(line, i, ":", path, at);
            e.anchor_index = static_cast<int>(detail::parse_int(line, i, path, at));
            detail::expect(line, i, "/", path, at);
            e.anchor_patch = static_cast<int>(detail::parse_int(line, i, path, at));
            m.entries.push_back(e);
            if (i < line.size()) detail::expect(line, i, ",", path, at);
        }
        out.push_back(std::move(m));
    }
    return out;
}

} // namespace csty

#endif // CSTY_CORRESPONDENCE_HPP
