#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "relmatch/config.hpp"
#include "relmatch/data.hpp"
#include "relmatch/evaluation.hpp"
#include "relmatch/taxonomy.hpp"
#include "relmatch/training.hpp"

namespace relmatch {

// Documented exit codes, one per failure family.
namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int usage = 2;          // bad invocation or unknown config key
inline constexpr int missing_file = 3;   // an input file could not be opened
inline constexpr int invalid_input = 4;  // parse or validation failure
inline constexpr int run_failure = 5;    // a run aborted (non-finite loss, consistency violations)
inline constexpr int already_exists = 6; // output present and --force not given
}  // namespace exit_code

inline std::string exit_code_help() {
    return "Exit codes:\n"
           "  0  success\n"
           "  2  bad invocation or unknown config key\n"
           "  3  missing input file\n"
           "  4  parse or validation failure\n"
           "  5  run failure (non-finite loss, consistency violations)\n"
           "  6  output already exists (pass --force to overwrite)\n";
}

struct CliInvocation {
    enum class Command { generate, train, evaluate, verify_tree, ablate };

    Command command = Command::generate;
    std::string config_path;             // optional key=value file
    std::vector<std::string> overrides;  // --set key=value, applied after the file
    std::string out_dir;
    std::string data_dir;
    std::string checkpoint_path;
    std::string tree_path;
    std::string resume_path;
    std::string axis = "variant";  // ablate: variant | tree-depth
    long verify_samples = 100000;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> variant;
    std::optional<int> tree_depth;
    int num_seeds = 3;
    bool force = false;
    bool quality_protocol = false;
};

namespace detail {

inline KeyValueConfig build_config(const CliInvocation& inv) {
    KeyValueConfig kv = inv.config_path.empty() ? KeyValueConfig()
                                                : KeyValueConfig::load_file(inv.config_path);
    for (const std::string& o : inv.overrides) kv.apply_override(o);
    if (inv.seed.has_value()) {
        kv.set("seed", std::to_string(*inv.seed));
        kv.set("gen.seed", std::to_string(*inv.seed));
    }
    if (inv.variant.has_value()) kv.set("variant", *inv.variant);
    if (inv.tree_depth.has_value()) kv.set("tree_depth", std::to_string(*inv.tree_depth));
    return kv;
}

inline void require(bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
}

inline void check_overwrite(const std::filesystem::path& path, bool force) {
    if (!force && std::filesystem::exists(path)) {
        throw IoError("output " + path.string() + " already exists (pass --force to overwrite)");
    }
}

inline std::vector<std::pair<long, double>> read_series_csv(const std::filesystem::path& path) {
    std::vector<std::pair<long, double>> series;
    std::ifstream in(path);
    if (!in) return series;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        const std::size_t comma = line.find(',');
        if (comma == std::string::npos) continue;
        series.emplace_back(std::stol(line.substr(0, comma)), std::stod(line.substr(comma + 1)));
    }
    return series;
}

inline int run_generate(const CliInvocation& inv, std::ostream& out) {
    require(!inv.out_dir.empty(), "generate: --out is required");
    const KeyValueConfig kv = build_config(inv);
    const GeneratorConfig cfg = generator_config_from(kv);
    const std::filesystem::path dir(inv.out_dir);
    check_overwrite(dir / "manifest.json", inv.force);
    const DatasetSplit split = generate_synthetic(cfg);
    save_dataset(split, dir, cfg.seed);
    out << "dataset written to " << dir.string() << ": " << split.labeled.size() << " labeled, "
        << split.unlabeled_in.size() << " unlabeled in-distribution, " << split.unlabeled_out.size()
        << " unlabeled out-of-distribution, " << split.categories.size() << " categories, "
        << split.tree.num_levels() << " tree levels\n";
    return exit_code::ok;
}

inline int run_train(const CliInvocation& inv, std::ostream& out) {
    require(!inv.data_dir.empty(), "train: --data is required");
    require(!inv.out_dir.empty(), "train: --out is required");
    const KeyValueConfig kv = build_config(inv);
    const TrainConfig cfg = train_config_from(kv);
    const DatasetSplit data = load_dataset_dir(inv.data_dir);
    const std::filesystem::path dir(inv.out_dir);

    const bool resuming = !inv.resume_path.empty();
    if (!resuming) {
        check_overwrite(dir / "checkpoint.json", inv.force);
        check_overwrite(dir / "metrics.jsonl", inv.force);
    }
    std::filesystem::create_directories(dir);

    std::ofstream metrics(dir / "metrics.jsonl", resuming ? std::ios::app : std::ios::out);
    if (!metrics) throw IoError("cannot write " + (dir / "metrics.jsonl").string());

    std::vector<std::pair<long, double>> series;
    TrainSinks sinks;
    sinks.metrics = &metrics;
    sinks.out_dir = &dir;
    if (cfg.eval_every > 0 && !data.eval_in.empty()) {
        sinks.eval_series = &series;
        sinks.eval_fn = [&data](const ModelParams& p) { return topk_accuracy(p, data.eval_in, data, 1); };
    }

    Trainer trainer(cfg, data);
    Checkpoint final_ck;
    if (resuming) {
        final_ck = trainer.resume(Checkpoint::load(inv.resume_path), sinks);
    } else {
        final_ck = trainer.run(sinks);
    }
    final_ck.save(dir / "checkpoint.json");

    nlohmann::json manifest;
    manifest["format_version"] = 1;
    manifest["config"] = cfg.to_json();
    manifest["config_hash"] = cfg.hash();
    manifest["dataset"] = inv.data_dir;
    manifest["final_step"] = final_ck.step;
    std::ofstream mf(dir / "manifest.json");
    if (!mf) throw IoError("cannot write " + (dir / "manifest.json").string());
    mf << manifest.dump(2) << "\n";

    if (!series.empty()) {
        std::ofstream sf(dir / "accuracy_series.csv");
        sf << "step,top1\n";
        for (const auto& [step, top1] : series) sf << step << ',' << detail::format_double(top1) << "\n";
    }
    out << "trained " << final_ck.step << " steps; checkpoint at "
        << (dir / "checkpoint.json").string() << "\n";
    return exit_code::ok;
}

inline int run_evaluate(const CliInvocation& inv, std::ostream& out) {
    require(!inv.data_dir.empty(), "evaluate: --data is required");
    require(!inv.checkpoint_path.empty(), "evaluate: --checkpoint is required");
    require(!inv.out_dir.empty(), "evaluate: --out is required");
    const KeyValueConfig kv = build_config(inv);
    const TrainConfig cfg = train_config_from(kv);
    const DatasetSplit data = load_dataset_dir(inv.data_dir);
    const Checkpoint ck = Checkpoint::load(inv.checkpoint_path);
    const std::filesystem::path dir(inv.out_dir);
    check_overwrite(dir / "report.json", inv.force);

    Rng rng(cfg.seed ^ 0xe7a1ULL);
    const EvalReport report = evaluate_model(ck.params, data, cfg.pseudo, rng);

    // Pass through any accuracy curve logged next to the checkpoint.
    auto series_path = std::filesystem::path(inv.checkpoint_path).parent_path() / "accuracy_series.csv";
    emit_report(report, dir, read_series_csv(series_path));

    if (inv.quality_protocol) {
        const QualityTable table = run_quality_protocol(data, cfg, cfg.seed);
        std::ofstream qf(dir / "quality_protocol.json");
        if (!qf) throw IoError("cannot write " + (dir / "quality_protocol.json").string());
        qf << table.to_json().dump(2) << "\n";
    }
    out << "top1 " << report.top1 << ", top5 " << report.top5 << "; report at "
        << (dir / "report.json").string() << "\n";
    return exit_code::ok;
}

inline int run_verify_tree(const CliInvocation& inv, std::ostream& out) {
    require(!inv.tree_path.empty(), "verify-tree: --tree is required");
    std::ifstream in(inv.tree_path);
    if (!in) throw IoError("cannot read " + inv.tree_path);
    std::stringstream buf;
    buf << in.rdbuf();
    std::string text = buf.str();
    while (!text.empty() && (text.back() == '\n' || text.back() == '\r' || text.back() == ' ')) {
        text.pop_back();
    }
    const TaxonomyTree tree = TaxonomyTree::parse_newick(text);
    const std::uint64_t seed = inv.seed.value_or(1);
    const TripletConsistencyReport report = verify_triplet_consistency(tree, inv.verify_samples, seed);

    nlohmann::json j = report.to_json();
    j["leaves"] = tree.num_leaves();
    j["levels"] = tree.num_levels();
    std::map<std::string, long> uniform;
    for (const std::string& name : tree.species_names()) uniform[name] = 1;
    j["relation_weights_uniform_histogram"] = relation_weights(tree, uniform).to_json();
    out << j.dump(2) << "\n";
    if (!inv.out_dir.empty()) {
        std::filesystem::create_directories(inv.out_dir);
        std::ofstream rf(std::filesystem::path(inv.out_dir) / "verify_report.json");
        if (rf) rf << j.dump(2) << "\n";
    }
    if (!report.violations.empty()) {
        throw RunError("triplet consistency violated " + std::to_string(report.violations.size()) +
                       " times");
    }
    out << report.violations.size() << " violations\n";
    return exit_code::ok;
}

inline int run_ablate(const CliInvocation& inv, std::ostream& out) {
    require(!inv.data_dir.empty(), "ablate: --data is required");
    require(!inv.out_dir.empty(), "ablate: --out is required");
    require(inv.num_seeds >= 1, "ablate: --num-seeds must be >= 1");
    require(inv.axis == "variant" || inv.axis == "tree-depth",
            "ablate: --axis must be variant or tree-depth");
    const KeyValueConfig kv = build_config(inv);
    const TrainConfig base_cfg = train_config_from(kv);
    const DatasetSplit data = load_dataset_dir(inv.data_dir);
    const std::filesystem::path dir(inv.out_dir);
    check_overwrite(dir / "summary.csv", inv.force);
    std::filesystem::create_directories(dir);

    struct Cell { std::string value; TrainConfig cfg; };
    std::vector<Cell> cells;
    if (inv.axis == "variant") {
        for (Variant v : {Variant::baseline_supervised, Variant::relation_pl, Variant::triplet_cr,
                          Variant::label_transfer}) {
            TrainConfig cfg = base_cfg;
            cfg.variant = v;
            cells.push_back({to_string(v), cfg});
        }
    } else {
        for (int depth = 2; depth <= data.tree.num_levels(); ++depth) {
            TrainConfig cfg = base_cfg;
            cfg.tree_depth = depth;
            cells.push_back({std::to_string(depth), cfg});
        }
    }

    std::ofstream summary(dir / "summary.csv");
    if (!summary) throw IoError("cannot write " + (dir / "summary.csv").string());
    summary << "axis,value,seed,top1,top5\n";
    for (const Cell& cell : cells) {
        double mean_top1 = 0.0;
        for (int s = 0; s < inv.num_seeds; ++s) {
            TrainConfig cfg = cell.cfg;
            cfg.seed = base_cfg.seed + static_cast<std::uint64_t>(s);
            const std::filesystem::path cell_dir =
                dir / (inv.axis + "_" + cell.value + "_seed" + std::to_string(cfg.seed));
            std::filesystem::create_directories(cell_dir);
            std::ofstream metrics(cell_dir / "metrics.jsonl");
            TrainSinks sinks;
            sinks.metrics = &metrics;
            sinks.out_dir = &cell_dir;
            Trainer trainer(cfg, data);
            const Checkpoint ck = trainer.run(sinks);
            ck.save(cell_dir / "checkpoint.json");
            const double top1 = topk_accuracy(ck.params, data.eval_in, data, 1);
            const double top5 = topk_accuracy(ck.params, data.eval_in, data,
                                              std::min(5, static_cast<int>(data.categories.size())));
            summary << inv.axis << ',' << cell.value << ',' << cfg.seed << ','
                    << detail::format_double(top1) << ',' << detail::format_double(top5) << "\n";
            mean_top1 += top1;
        }
        out << inv.axis << "=" << cell.value << ": mean top1 "
            << mean_top1 / static_cast<double>(inv.num_seeds) << " over " << inv.num_seeds
            << " seeds\n";
    }
    out << "summary at " << (dir / "summary.csv").string() << "\n";
    return exit_code::ok;
}

}  // namespace detail

// Dispatch a parsed invocation; maps every failure family to its exit code.
inline int run_cli(const CliInvocation& inv, std::ostream& out, std::ostream& err) {
    try {
        switch (inv.command) {
            case CliInvocation::Command::generate: return detail::run_generate(inv, out);
            case CliInvocation::Command::train: return detail::run_train(inv, out);
            case CliInvocation::Command::evaluate: return detail::run_evaluate(inv, out);
            case CliInvocation::Command::verify_tree: return detail::run_verify_tree(inv, out);
            case CliInvocation::Command::ablate: return detail::run_ablate(inv, out);
        }
        err << "error: unknown subcommand\n";
        return exit_code::usage;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return exit_code::usage;
    } catch (const IoError& e) {
        err << "error: " << e.what() << "\n";
        const std::string what = e.what();
        return what.find("already exists") != std::string::npos ? exit_code::already_exists
                                                                : exit_code::missing_file;
    } catch (const ParseError& e) {
        err << "error: " << e.what() << "\n";
        return exit_code::invalid_input;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return exit_code::invalid_input;
    } catch (const RunError& e) {
        err << "error: " << e.what() << "\n";
        return exit_code::run_failure;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_code::run_failure;
    }
}

}  // namespace relmatch
