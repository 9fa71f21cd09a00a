#include <cstdint>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "relmatch/cli.hpp"
#include "relmatch/config.hpp"

int main(int argc, char** argv) {
    CLI::App app{"relmatch: relation-based semi-supervised classification over a taxonomy"};
    app.require_subcommand(1);
    app.footer(relmatch::config_help_text() + "\n" + relmatch::exit_code_help());

    relmatch::CliInvocation inv;
    std::string seed_str;
    std::string variant_str;
    int tree_depth = 0;

    const auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("-c,--config", inv.config_path, "key=value config file");
        cmd->add_option("--set", inv.overrides, "config override key=value (repeatable, wins over the file)");
        cmd->add_option("--seed", seed_str, "seed override (sets both seed and gen.seed)");
        cmd->add_flag("--force", inv.force, "overwrite existing outputs");
    };

    CLI::App* generate = app.add_subcommand("generate", "generate a synthetic dataset");
    add_common(generate);
    generate->add_option("-o,--out", inv.out_dir, "output dataset directory")->required();

    CLI::App* train = app.add_subcommand("train", "train a model on a dataset");
    add_common(train);
    train->add_option("--data", inv.data_dir, "dataset directory (from generate)")->required();
    train->add_option("-o,--out", inv.out_dir, "run output directory")->required();
    train->add_option("--resume", inv.resume_path, "checkpoint to resume from");
    train->add_option("--variant", variant_str,
                      "objective variant (baseline_supervised|relation_pl|triplet_cr|label_transfer)");
    train->add_option("--tree-depth", tree_depth, "truncate the taxonomy to this many levels");

    CLI::App* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint");
    add_common(evaluate);
    evaluate->add_option("--data", inv.data_dir, "dataset directory")->required();
    evaluate->add_option("--checkpoint", inv.checkpoint_path, "checkpoint file")->required();
    evaluate->add_option("-o,--out", inv.out_dir, "report output directory")->required();
    evaluate->add_flag("--quality-protocol", inv.quality_protocol,
                       "also run the halved-label-space pseudo-label quality protocol (trains a model)");

    CLI::App* verify = app.add_subcommand("verify-tree", "check a Newick tree and its triplet consistency");
    add_common(verify);
    verify->add_option("--tree", inv.tree_path, "Newick tree file")->required();
    verify->add_option("--samples", inv.verify_samples, "triples to sample (exhaustive when fewer exist)");
    verify->add_option("-o,--out", inv.out_dir, "optional directory for the JSON report");

    CLI::App* ablate = app.add_subcommand("ablate", "grid of train+evaluate runs along one axis");
    add_common(ablate);
    ablate->add_option("--data", inv.data_dir, "dataset directory")->required();
    ablate->add_option("-o,--out", inv.out_dir, "grid output directory")->required();
    ablate->add_option("--axis", inv.axis, "variant | tree-depth")->required();
    ablate->add_option("--num-seeds", inv.num_seeds, "independent seeds per cell (default 3)");
    ablate->add_option("--variant", variant_str, "base variant for the tree-depth axis");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : relmatch::exit_code::usage;
    }

    if (generate->parsed()) inv.command = relmatch::CliInvocation::Command::generate;
    if (train->parsed()) inv.command = relmatch::CliInvocation::Command::train;
    if (evaluate->parsed()) inv.command = relmatch::CliInvocation::Command::evaluate;
    if (verify->parsed()) inv.command = relmatch::CliInvocation::Command::verify_tree;
    if (ablate->parsed()) inv.command = relmatch::CliInvocation::Command::ablate;

    if (!seed_str.empty()) {
        try {
            inv.seed = std::stoull(seed_str);
        } catch (const std::exception&) {
            std::cerr << "error: --seed expects an unsigned integer\n";
            return relmatch::exit_code::usage;
        }
    }
    if (!variant_str.empty()) inv.variant = variant_str;
    if (tree_depth != 0) inv.tree_depth = tree_depth;

    return relmatch::run_cli(inv, std::cout, std::cerr);
}
