#ifndef CSTY_TENSOR_HPP
#define CSTY_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace csty {

// Dense row-major float32 matrix; rows index patches, cols index channels.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0f) {}

    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    std::span<float> row(int r) { return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)}; }
    std::span<const float> row(int r) const {
        return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
    }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
    bool bitwise_equal(const Mat& o) const { return same_shape(o) && data == o.data; }
};

inline std::string shape_str(const Mat& m) {
    return "(" + std::to_string(m.rows) + "x" + std::to_string(m.cols) + ")";
}

// Per-channel mean and population standard deviation over the patch axis.
struct ChannelStats {
    std::vector<float> mean;
    std::vector<float> stdev;
};

inline constexpr float kAdainEps = 1e-5f;

inline bool all_finite(const Mat& m) {
    for (float v : m.data)
        if (!std::isfinite(v)) return false;
    return true;
}

// Row-stabilized softmax: subtracts the per-row max, accumulates the
// denominator in double so row sums land within 1e-6 of 1 even for wide rows.
inline Mat softmax_rows(const Mat& m) {
    Mat out(m.rows, m.cols);
    for (int i = 0; i < m.rows; ++i) {
        auto in = m.row(i);
        float mx = -std::numeric_limits<float>::infinity();
        for (int j = 0; j < m.cols; ++j) {
            if (!std::isfinite(in[j]))
                throw std::invalid_argument("softmax_rows: non-finite entry at row " + std::to_string(i));
            mx = std::max(mx, in[j]);
        }
        auto o = out.row(i);
        double sum = 0.0;
        for (int j = 0; j < m.cols; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        const float inv = static_cast<float>(1.0 / sum);
        for (int j = 0; j < m.cols; ++j) o[j] *= inv;
    }
    return out;
}

inline Mat transpose(const Mat& m) {
    Mat out(m.cols, m.rows);
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) out.at(j, i) = m.at(i, j);
    return out;
}

// a (m x k) * b (k x n); accumulation over k in ascending order.
inline Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols != b.rows)
        throw std::invalid_argument("matmul: inner dims differ " + shape_str(a) + " vs " + shape_str(b));
    Mat out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        float* orow = out.row(i).data();
        for (int k = 0; k < a.cols; ++k) {
            const float s = a.at(i, k);
            const float* brow = b.row(k).data();
            for (int j = 0; j < b.cols; ++j) orow[j] += s * brow[j];
        }
    }
    return out;
}

// softmax(Q K^T / sqrt(d)) V
inline Mat scaled_dot_attention(const Mat& q, const Mat& k, const Mat& v) {
    if (q.cols != k.cols)
        throw std::invalid_argument("scaled_dot_attention: Q/K channel mismatch " + shape_str(q) + " vs " +
                                    shape_str(k));
    if (k.rows != v.rows)
        throw std::invalid_argument("scaled_dot_attention: K/V row mismatch " + shape_str(k) + " vs " + shape_str(v));
    const int d = q.cols;
    const float scale = 1.0f / std::sqrt(static_cast<float>(d));
    const Mat kt = transpose(k);
    Mat logits(q.rows, k.rows);
    for (int i = 0; i < q.rows; ++i) {
        float* lrow = logits.row(i).data();
        for (int c = 0; c < d; ++c) {
            const float qc = q.at(i, c) * scale;
            const float* krow = kt.row(c).data();
            for (int j = 0; j < k.rows; ++j) lrow[j] += qc * krow[j];
        }
    }
    const Mat attn = softmax_rows(logits);
    Mat out(q.rows, v.cols);
    for (int i = 0; i < q.rows; ++i) {
        float* orow = out.row(i).data();
        const float* arow = attn.row(i).data();
        for (int j = 0; j < v.rows; ++j) {
            const float w = arow[j];
            const float* vrow = v.row(j).data();
            for (int c = 0; c < v.cols; ++c) orow[c] += w * vrow[c];
        }
    }
    return out;
}

inline ChannelStats channel_stats(const Mat& x) {
    if (x.rows < 1) throw std::invalid_argument("channel_stats: empty tensor (0 patches)");
    ChannelStats st;
    st.mean.resize(x.cols);
    st.stdev.resize(x.cols);
    for (int c = 0; c < x.cols; ++c) {
        double sum = 0.0;
        for (int p = 0; p < x.rows; ++p) sum += x.at(p, c);
        const double mu = sum / x.rows;
        double var = 0.0;
        for (int p = 0; p < x.rows; ++p) {
            const double dlt = x.at(p, c) - mu;
            var += dlt * dlt;
        }
        st.mean[c] = static_cast<float>(mu);
        st.stdev[c] = static_cast<float>(std::sqrt(var / x.rows));
    }
    return st;
}

// Renormalizes x per channel to y's mean/std (adaptive instance normalization).
inline Mat adain(const Mat& x, const Mat& y) {
    if (x.cols != y.cols)
        throw std::invalid_argument("adain: channel count mismatch " + shape_str(x) + " vs " + shape_str(y));
    const ChannelStats sx = channel_stats(x);
    const ChannelStats sy = channel_stats(y);
    Mat out(x.rows, x.cols);
    for (int c = 0; c < x.cols; ++c) {
        const float scale = sy.stdev[c] / (sx.stdev[c] + kAdainEps);
        const float mu_x = sx.mean[c];
        const float mu_y = sy.mean[c];
        for (int p = 0; p < x.rows; ++p) out.at(p, c) = (x.at(p, c) - mu_x) * scale + mu_y;
    }
    return out;
}

// G = F^T F / N
inline Mat gram_matrix(const Mat& f) {
    if (f.rows < 1) throw std::invalid_argument("gram_matrix: empty tensor (0 patches)");
    Mat g(f.cols, f.cols);
    std::vector<double> acc(static_cast<size_t>(f.cols) * f.cols, 0.0);
    for (int p = 0; p < f.rows; ++p) {
        const float* row = f.row(p).data();
        for (int a = 0; a < f.cols; ++a) {
            const double fa = row[a];
            double* arow = acc.data() + static_cast<size_t>(a) * f.cols;
            for (int b = 0; b < f.cols; ++b) arow[b] += fa * row[b];
        }
    }
    for (int a = 0; a < f.cols; ++a)
        for (int b = 0; b < f.cols; ++b) g.at(a, b) = static_cast<float>(acc[static_cast<size_t>(a) * f.cols + b] / f.rows);
    return g;
}

// Frobenius norm of gram(F1) - gram(F2).
inline double gram_l2(const Mat& f1, const Mat& f2) {
    if (f1.cols != f2.cols)
        throw std::invalid_argument("gram_l2: channel count mismatch " + shape_str(f1) + " vs " + shape_str(f2));
    const Mat g1 = gram_matrix(f1);
    const Mat g2 = gram_matrix(f2);
    double sum = 0.0;
    for (size_t i = 0; i < g1.data.size(); ++i) {
        const double d = static_cast<double>(g1.data[i]) - static_cast<double>(g2.data[i]);
        sum += d * d;
    }
    return std::sqrt(sum);
}

inline Mat select_rows(const Mat& m, std::span<const int> indices) {
    Mat out(static_cast<int>(indices.size()), m.cols);
    for (size_t i = 0; i < indices.size(); ++i) {
        const int r = indices[i];
        if (r < 0 || r >= m.rows)
            throw std::invalid_argument("select_rows: index " + std::to_string(r) + " outside " + shape_str(m));
        auto src = m.row(r);
        auto dst = out.row(static_cast<int>(i));
        for (int c = 0; c < m.cols; ++c) dst[c] = src[c];
    }
    return out;
}

inline Mat vstack(std::span<const Mat* const> parts) {
    int rows = 0;
    int cols = -1;
    for (const Mat* p : parts) {
        if (p->rows == 0) continue;
        if (cols < 0) cols = p->cols;
        if (p->cols != cols) throw std::invalid_argument("vstack: column mismatch");
        rows += p->rows;
    }
    Mat out(rows, cols < 0 ? 0 : cols);
    int r = 0;
    for (const Mat* p : parts) {
        for (int i = 0; i < p->rows; ++i, ++r) {
            auto src = p->row(i);
            auto dst = out.row(r);
            for (int c = 0; c < cols; ++c) dst[c] = src[c];
        }
    }
    return out;
}

// Splits d into `heads` column groups and runs scaled-dot attention per group.
inline Mat multi_head_attention(const Mat& q, const Mat& k, const Mat& v, int heads) {
    if (q.cols != k.cols || k.cols != v.cols)
        throw std::invalid_argument("multi_head_attention: channel mismatch");
    if (heads < 1 || q.cols % heads != 0)
        throw std::invalid_argument("multi_head_attention: d=" + std::to_string(q.cols) +
                                    " not divisible by heads=" + std::to_string(heads));
    const int hc = q.cols / heads;
    Mat out(q.rows, q.cols);
    for (int h = 0; h < heads; ++h) {
        Mat qh(q.rows, hc), kh(k.rows, hc), vh(v.rows, hc);
        for (int r = 0; r < q.rows; ++r)
            for (int c = 0; c < hc; ++c) qh.at(r, c) = q.at(r, h * hc + c);
        for (int r = 0; r < k.rows; ++r)
            for (int c = 0; c < hc; ++c) {
                kh.at(r, c) = k.at(r, h * hc + c);
                vh.at(r, c) = v.at(r, h * hc + c);
            }
        const Mat oh = scaled_dot_attention(qh, kh, vh);
        for (int r = 0; r < q.rows; ++r)
            for (int c = 0; c < hc; ++c) out.at(r, h * hc + c) = oh.at(r, c);
    }
    return out;
}

// Batched feature tensor: B images of N = H*W patches with d channels each.
struct FeatureTensor {
    int batch = 0;
    int grid_h = 0;
    int grid_w = 0;
    int channels = 0;
    std::vector<float> data;

    FeatureTensor() = default;
    FeatureTensor(int b, int h, int w, int c)
        : batch(b), grid_h(h), grid_w(w), channels(c),
          data(static_cast<size_t>(b) * h * w * c, 0.0f) {
        if (b < 0 || h < 1 || w < 1 || c < 1)
            throw std::invalid_argument("FeatureTensor: bad shape");
    }

    int patches() const { return grid_h * grid_w; }

    Mat image(int b) const {
        Mat m(patches(), channels);
        const size_t off = static_cast<size_t>(b) * patches() * channels;
        std::copy(data.begin() + off, data.begin() + off + m.data.size(), m.data.begin());
        return m;
    }

    void set_image(int b, const Mat& m) {
        if (m.rows != patches() || m.cols != channels)
            throw std::invalid_argument("FeatureTensor::set_image: shape mismatch");
        const size_t off = static_cast<size_t>(b) * patches() * channels;
        std::copy(m.data.begin(), m.data.end(), data.begin() + off);
    }

    static FeatureTensor from_images(std::span<const Mat> images, int grid_h, int grid_w) {
        if (images.empty()) throw std::invalid_argument("FeatureTensor::from_images: empty batch");
        FeatureTensor t(static_cast<int>(images.size()), grid_h, grid_w, images[0].cols);
        for (size_t b = 0; b < images.size(); ++b) t.set_image(static_cast<int>(b), images[b]);
        return t;
    }
};

} // namespace csty

#endif // CSTY_TENSOR_HPP
