#ifndef CSTY_METRICS_HPP
#define CSTY_METRICS_HPP

#include <cmath>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "csty/correspondence.hpp"
#include "csty/tensor.hpp"

namespace csty {

// Desk-scale proxies: Gram-matrix distance against the vanilla pass for
// style drift, masked-feature cosine for subject consistency. Neither claims
// agreement with perceptual metrics; columns are labeled proxy for a reason.
struct MetricsReport {
    std::vector<double> style_distance; // per image vs vanilla reference
    Mat consistency;                    // B x B cosine matrix, unit diagonal
    double style_mean = 0.0, style_std = 0.0;
    double consistency_mean = 1.0, consistency_std = 0.0; // over off-diagonal pairs
};

inline double style_distance(const Mat& final_features, const Mat& vanilla_features) {
    return gram_l2(final_features, vanilla_features);
}

// entry (i,j) = cosine of mean-pooled masked features of images i and j
inline Mat subject_consistency(std::span<const Mat> features, std::span<const SubjectMask> masks) {
    const int b = static_cast<int>(features.size());
    if (masks.size() != features.size()) throw std::invalid_argument("subject_consistency: mask count mismatch");
    std::vector<std::vector<double>> pooled(b);
    for (int i = 0; i < b; ++i) {
        if (masks[i].empty())
            throw std::invalid_argument("subject_consistency: empty mask for image " + std::to_string(i));
        masks[i].validate(features[i].rows);
        const int d = features[i].cols;
        pooled[i].assign(d, 0.0);
        for (int p : masks[i].patch_indices)
            for (int c = 0; c < d; ++c) pooled[i][c] += features[i].at(p, c);
        double norm = 0.0;
        for (int c = 0; c < d; ++c) {
            pooled[i][c] /= static_cast<double>(masks[i].patch_indices.size());
            norm += pooled[i][c] * pooled[i][c];
        }
        if (norm == 0.0)
            throw std::invalid_argument("subject_consistency: zero pooled feature for image " + std::to_string(i));
    }
    Mat out(b, b);
    for (int i = 0; i < b; ++i) {
        out.at(i, i) = 1.0f;
        for (int j = i + 1; j < b; ++j) {
            if (static_cast<int>(pooled[j].size()) != static_cast<int>(pooled[i].size()))
                throw std::invalid_argument("subject_consistency: channel mismatch between images");
            double dot = 0.0, ni = 0.0, nj = 0.0;
            for (size_t c = 0; c < pooled[i].size(); ++c) {
                dot += pooled[i][c] * pooled[j][c];
                ni += pooled[i][c] * pooled[i][c];
                nj += pooled[j][c] * pooled[j][c];
            }
            const float sim = static_cast<float>(dot / (std::sqrt(ni) * std::sqrt(nj)));
            out.at(i, j) = sim;
            out.at(j, i) = sim;
        }
    }
    return out;
}

inline MetricsReport compute_metrics(std::span<const Mat> final_features, std::span<const Mat> vanilla_features,
                                     std::span<const SubjectMask> masks) {
    if (final_features.size() != vanilla_features.size())
        throw std::invalid_argument("compute_metrics: feature batch mismatch");
    MetricsReport r;
    const int b = static_cast<int>(final_features.size());
    for (int i = 0; i < b; ++i) r.style_distance.push_back(style_distance(final_features[i], vanilla_features[i]));
    r.consistency = subject_consistency(final_features, masks);

    double sum = 0.0;
    for (double v : r.style_distance) sum += v;
    r.style_mean = sum / b;
    double var = 0.0;
    for (double v : r.style_distance) var += (v - r.style_mean) * (v - r.style_mean);
    r.style_std = std::sqrt(var / b);

    if (b > 1) {
        double csum = 0.0;
        int count = 0;
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < b; ++j)
                if (i != j) {
                    csum += r.consistency.at(i, j);
                    ++count;
                }
        r.consistency_mean = csum / count;
        double cvar = 0.0;
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < b; ++j)
                if (i != j) cvar += (r.consistency.at(i, j) - r.consistency_mean) *
                                    (r.consistency.at(i, j) - r.consistency_mean);
        r.consistency_std = std::sqrt(cvar / count);
    }
    return r;
}

namespace detail {

inline std::string format_metric(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

} // namespace detail

// One row per image plus a batch-summary row with mean+-std cells.
inline std::string metrics_tsv(const MetricsReport& r) {
    std::string s = "image\tstyle_distance_proxy\tsubject_consistency_proxy\n";
    const int b = static_cast<int>(r.style_distance.size());
    for (int i = 0; i < b; ++i) {
        double cmean = 1.0;
        if (b > 1) {
            double acc = 0.0;
            for (int j = 0; j < b; ++j)
                if (j != i) acc += r.consistency.at(i, j);
            cmean = acc / (b - 1);
        }
        s += std::to_string(i) + "\t" + detail::format_metric(r.style_distance[i]) + "\t" +
             detail::format_metric(cmean) + "\n";
    }
    s += "batch\t" + detail::format_metric(r.style_mean) + "+-" + detail::format_metric(r.style_std) + "\t" +
         detail::format_metric(r.consistency_mean) + "+-" + detail::format_metric(r.consistency_std) + "\n";
    return s;
}

} // namespace csty

#endif // CSTY_METRICS_HPP
