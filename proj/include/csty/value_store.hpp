#ifndef CSTY_VALUE_STORE_HPP
#define CSTY_VALUE_STORE_HPP

#include <array>
#include <cstdio>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>

#include "csty/errors.hpp"
#include "csty/tensor.hpp"
#include "csty/tensor_io.hpp"

namespace csty {

// Recorded vanilla-pass self-attention values, keyed by (step, layer, image).
// Each entry keeps both classifier-free-guidance halves so the final pass can
// inject on either half. Entries are write-once; the store persists between
// phases as one rank-3 [2, N, d] tensor file per key plus an index.
class ValueStore {
  public:
    ValueStore() = default;
    ValueStore(std::string layer_id, int window_lo, int window_hi)
        : layer_id_(std::move(layer_id)), window_lo_(window_lo), window_hi_(window_hi) {
        if (window_lo_ < 0 || window_hi_ <= window_lo_)
            throw std::invalid_argument("value store: empty or negative step window");
    }

    const std::string& layer_id() const { return layer_id_; }
    int window_lo() const { return window_lo_; }
    int window_hi() const { return window_hi_; }
    size_t size() const { return entries_.size(); }

    void record(int step, const std::string& layer, int image, Mat uncond, Mat cond) {
        check_key(step, layer);
        if (!uncond.same_shape(cond))
            throw std::invalid_argument("value store: half shapes differ at step " + std::to_string(step));
        const auto key = std::make_pair(step, image);
        if (entries_.count(key))
            throw std::logic_error("value store: duplicate write for step " + std::to_string(step) + " image " +
                                   std::to_string(image));
        entries_[key] = {std::move(uncond), std::move(cond)};
    }

    bool contains(int step, const std::string& layer, int image) const {
        return layer == layer_id_ && entries_.count({step, image}) > 0;
    }

    // guided selects the text-conditioned half.
    const Mat& lookup(int step, const std::string& layer, int image, bool guided) const {
        check_key(step, layer);
        const auto it = entries_.find({step, image});
        if (it == entries_.end())
            throw std::runtime_error("value store: missing entry for step " + std::to_string(step) + " image " +
                                     std::to_string(image) + " (recording/injection config mismatch)");
        return it->second[guided ? 1 : 0];
    }

    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        std::string index = "# vsd value store\n";
        index += "# window = [" + std::to_string(window_lo_) + ", " + std::to_string(window_hi_) + ")\n";
        index += "# layer = " + layer_id_ + "\n";
        index += "step\timage\trows\tcols\tfile\n";
        for (const auto& [key, halves] : entries_) {
            const std::string file = "v_s" + std::to_string(key.first) + "_i" + std::to_string(key.second) + ".csty";
            const Mat& u = halves[0];
            std::vector<float> payload;
            payload.reserve(u.data.size() * 2);
            payload.insert(payload.end(), u.data.begin(), u.data.end());
            payload.insert(payload.end(), halves[1].data.begin(), halves[1].data.end());
            const uint64_t dims[3] = {2, static_cast<uint64_t>(u.rows), static_cast<uint64_t>(u.cols)};
            save_tensor(dir / file, dims, payload);
            index += std::to_string(key.first) + "\t" + std::to_string(key.second) + "\t" + std::to_string(u.rows) +
                     "\t" + std::to_string(u.cols) + "\t" + file + "\n";
        }
        write_file(dir / "index.tsv", index);
    }

    static ValueStore load(const std::filesystem::path& dir) {
        const auto index_path = dir / "index.tsv";
        const std::string text = read_file(index_path);
        ValueStore store;
        size_t pos = 0;
        bool saw_header = false;
        while (pos < text.size()) {
            const size_t nl = text.find('\n', pos);
            const std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
            const size_t line_at = pos;
            pos = nl == std::string::npos ? text.size() : nl + 1;
            if (line.empty()) continue;
            if (line[0] == '#') {
                parse_meta(store, line, index_path.string(), line_at);
                continue;
            }
            if (!saw_header) { // column header row
                saw_header = true;
                continue;
            }
            int step = 0, image = 0, rows = 0, cols = 0;
            char file[256] = {};
            if (std::sscanf(line.c_str(), "%d\t%d\t%d\t%d\t%255s", &step, &image, &rows, &cols, file) != 5)
                throw artifact_error(index_path.string() + ": malformed index row", line_at);
            const DecodedTensor t = load_tensor(dir / file);
            if (t.dims.size() != 3 || t.dims[0] != 2 || t.dims[1] != static_cast<uint64_t>(rows) ||
                t.dims[2] != static_cast<uint64_t>(cols))
                throw artifact_error(std::string(file) + ": dims disagree with index", 8);
            Mat uncond(rows, cols), cond(rows, cols);
            const size_t half = uncond.data.size();
            std::copy(t.payload.begin(), t.payload.begin() + half, uncond.data.begin());
            std::copy(t.payload.begin() + half, t.payload.end(), cond.data.begin());
            store.record(step, store.layer_id_, image, std::move(uncond), std::move(cond));
        }
        if (store.layer_id_.empty() || store.window_hi_ <= store.window_lo_)
            throw artifact_error(index_path.string() + ": missing window/layer metadata", 0);
        return store;
    }

    // deterministic iteration for manifests and inspect
    const std::map<std::pair<int, int>, std::array<Mat, 2>>& entries() const { return entries_; }

  private:
    void check_key(int step, const std::string& layer) const {
        if (layer != layer_id_)
            throw std::invalid_argument("value store: layer '" + layer + "' not covered (store holds '" + layer_id_ +
                                        "')");
        if (step < window_lo_ || step >= window_hi_)
            throw std::invalid_argument("value store: step " + std::to_string(step) + " outside window [" +
                                        std::to_string(window_lo_) + ", " + std::to_string(window_hi_) + ")");
    }

    static void parse_meta(ValueStore& store, const std::string& line, const std::string& path, size_t at) {
        int lo = 0, hi = 0;
        char layer[128] = {};
        if (std::sscanf(line.c_str(), "# window = [%d, %d)", &lo, &hi) == 2) {
            if (hi <= lo) throw artifact_error(path + ": empty window in metadata", at);
            store.window_lo_ = lo;
            store.window_hi_ = hi;
        } else if (std::sscanf(line.c_str(), "# layer = %127s", layer) == 1) {
            store.layer_id_ = layer;
        }
    }

    std::string layer_id_;
    int window_lo_ = 0;
    int window_hi_ = 0;
    std::map<std::pair<int, int>, std::array<Mat, 2>> entries_;
};

} // namespace csty

#endif // CSTY_VALUE_STORE_HPP
