// Command-line front end: phase execution, ablations, scheme comparison and
// artifact inspection over the output-tree layout the pipeline defines.

#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "csty/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

constexpr const char* kUsage =
    "usage: csty <command> --config <path> [--out <dir>] [--set key=value]...\n"
    "       csty inspect <path>\n"
    "\n"
    "commands:\n"
    "  run              all three phases: record values, build masks and\n"
    "                   correspondences, generate with interventions\n"
    "  phase1           vanilla pass, records the value store\n"
    "  phase2           crossing-only pass, extracts masks and correspondences\n"
    "  phase3           final pass from previously persisted artifacts\n"
    "  ablate           base run plus six single-component ablations\n"
    "  compare-schemes  all six scheme tokens with shared seeds\n"
    "  inspect          human-readable dump of a tensor, store, mask, map,\n"
    "                   manifest or resolved-config file\n"
    "\n"
    "exit codes: 0 success, 1 runtime error, 2 config error, 3 corrupt artifact\n";

struct CliArgs {
    std::string command;
    std::string config_path;
    std::string out_dir = "out";
    std::vector<std::pair<std::string, std::string>> overrides;
    std::string inspect_path;
};

CliArgs parse_args(int argc, char** argv) {
    if (argc < 2) throw csty::config_error("missing command\n" + std::string(kUsage));
    CliArgs args;
    args.command = argv[1];
    if (args.command == "--help" || args.command == "-h" || args.command == "help") {
        std::fputs(kUsage, stdout);
        std::exit(0);
    }
    static const std::set<std::string> known = {"run",    "phase1", "phase2",          "phase3",
                                               "ablate", "inspect", "compare-schemes"};
    if (!known.count(args.command)) throw csty::config_error("unknown command '" + args.command + "'");
    for (int i = 2; i < argc; ++i) {
        const std::string a = argv[i];
        auto next = [&](const char* flag) -> std::string {
            if (i + 1 >= argc) throw csty::config_error(std::string(flag) + " requires an argument");
            return argv[++i];
        };
        if (a == "--config") {
            args.config_path = next("--config");
        } else if (a == "--out") {
            args.out_dir = next("--out");
        } else if (a == "--set") {
            const std::string kv = next("--set");
            const size_t eq = kv.find('=');
            if (eq == std::string::npos) throw csty::config_error("--set expects key=value, got '" + kv + "'");
            args.overrides.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
        } else if (a == "--help" || a == "-h") {
            std::fputs(kUsage, stdout);
            std::exit(0);
        } else if (args.command == "inspect" && a.rfind("--", 0) != 0 && args.inspect_path.empty()) {
            args.inspect_path = a;
        } else {
            throw csty::config_error("unknown flag '" + a + "'");
        }
    }
    if (args.command == "inspect") {
        if (args.inspect_path.empty()) throw csty::config_error("inspect requires a path argument");
    } else if (args.config_path.empty()) {
        throw csty::config_error("--config is required for '" + args.command + "'");
    }
    return args;
}

void print_metrics(const csty::MetricsReport& m) {
    std::printf("style_distance mean %.6f std %.6f\n", m.style_mean, m.style_std);
    std::printf("consistency    mean %.6f std %.6f\n", m.consistency_mean, m.consistency_std);
}

void inspect_tensor(const fs::path& path) {
    const csty::DecodedTensor t = csty::load_tensor(path);
    std::printf("tensor %s\n", path.string().c_str());
    std::string dims;
    size_t count = 1;
    for (size_t i = 0; i < t.dims.size(); ++i) {
        if (i) dims += " x ";
        dims += std::to_string(t.dims[i]);
        count *= t.dims[i];
    }
    std::printf("dims = %s\n", dims.c_str());
    std::printf("elements = %zu\n", count);
    std::printf("checksum = %s\n", csty::hex64(csty::file_digest(path)).c_str());
}

void inspect_store(const fs::path& dir) {
    const csty::ValueStore store = csty::ValueStore::load(dir);
    std::printf("value store %s\n", dir.string().c_str());
    std::printf("layer = %s\n", store.layer_id().c_str());
    std::printf("window = [%d, %d)\n", store.window_lo(), store.window_hi());
    std::printf("entries = %zu\n", store.size());
    if (!store.entries().empty()) {
        int smin = 1 << 30, smax = -1, imin = 1 << 30, imax = -1;
        for (const auto& [key, halves] : store.entries()) {
            smin = std::min(smin, key.first);
            smax = std::max(smax, key.first);
            imin = std::min(imin, key.second);
            imax = std::max(imax, key.second);
        }
        const auto& first = store.entries().begin()->second[0];
        std::printf("steps %d..%d, images %d..%d, value shape %d x %d\n", smin, smax, imin, imax, first.rows,
                    first.cols);
    }
    std::printf("index checksum = %s\n", csty::hex64(csty::file_digest(dir / "index.tsv")).c_str());
}

void inspect_path(const fs::path& path) {
    if (fs::is_directory(path)) {
        if (fs::exists(path / "index.tsv")) return inspect_store(path);
        throw csty::config_error("directory " + path.string() + " is not a value store (no index.tsv)");
    }
    const std::string name = path.filename().string();
    if (name == "index.tsv") return inspect_store(path.parent_path());
    if (path.extension() == ".csty") return inspect_tensor(path);
    if (name == "masks.txt") {
        const auto text = csty::read_file(path);
        // grid unknown here; parse with a permissive bound for display only
        const auto masks = csty::parse_masks(text, 1 << 12, 1, path.string());
        std::printf("masks %s\n", path.string().c_str());
        for (const auto& m : masks)
            std::printf("image %d: %zu patches\n", m.image_index, m.patch_indices.size());
        std::printf("checksum = %s\n", csty::hex64(csty::file_digest(path)).c_str());
        return;
    }
    if (name == "maps.txt") {
        const auto maps = csty::parse_maps(csty::read_file(path), path.string());
        std::printf("correspondence maps %s\n", path.string().c_str());
        for (const auto& m : maps) std::printf("image %d: %zu entries\n", m.image_index, m.entries.size());
        std::printf("checksum = %s\n", csty::hex64(csty::file_digest(path)).c_str());
        return;
    }
    if (name == "manifest.tsv") {
        const auto rows = csty::load_manifest(path.parent_path());
        std::printf("manifest %s\n", path.string().c_str());
        std::map<std::string, int> per_phase;
        for (const auto& r : rows) per_phase[r.phase]++;
        for (const auto& [phase, count] : per_phase) std::printf("%s: %d artifacts\n", phase.c_str(), count);
        std::printf("checksum = %s\n", csty::hex64(csty::file_digest(path)).c_str());
        return;
    }
    if (name == "config.resolved") {
        const std::string text = csty::read_file(path);
        std::printf("resolved config %s\n", path.string().c_str());
        std::printf("run id = %s\n", csty::hex64(csty::fnv1a64(text)).c_str());
        std::printf("checksum = %s\n", csty::hex64(csty::file_digest(path)).c_str());
        return;
    }
    throw csty::config_error("don't know how to inspect " + path.string() +
                             " (expected a tensor, store, mask, map, manifest or config file)");
}

int run_command(const CliArgs& args) {
    if (args.command == "inspect") {
        inspect_path(args.inspect_path);
        return 0;
    }
    const csty::RunConfig cfg = csty::parse_config(args.config_path, args.overrides);
    const fs::path tree = csty::tree_root(cfg, args.out_dir);
    if (args.command == "run") {
        const csty::MetricsReport m = csty::cmd_run(cfg, tree);
        std::printf("run %s\ntree %s\n", csty::run_id(cfg).c_str(), tree.string().c_str());
        print_metrics(m);
    } else if (args.command == "phase1") {
        csty::cmd_phase1(cfg, tree);
        std::printf("phase1 complete: %s\n", tree.string().c_str());
    } else if (args.command == "phase2") {
        csty::cmd_phase2(cfg, tree);
        std::printf("phase2 complete: %s\n", tree.string().c_str());
    } else if (args.command == "phase3") {
        csty::cmd_phase3(cfg, tree);
        std::printf("phase3 complete: %s\n", tree.string().c_str());
    } else if (args.command == "ablate") {
        const auto results = csty::cmd_ablate(cfg, tree);
        std::fputs(csty::comparison_tsv("variant", results).c_str(), stdout);
    } else if (args.command == "compare-schemes") {
        const auto results = csty::cmd_compare_schemes(cfg, tree);
        std::fputs(csty::comparison_tsv("scheme", results).c_str(), stdout);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run_command(parse_args(argc, argv));
    } catch (const csty::config_error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const csty::artifact_error& e) {
        std::fprintf(stderr, "artifact error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
