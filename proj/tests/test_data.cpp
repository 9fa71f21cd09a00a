#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "relmatch/data.hpp"

using namespace relmatch;

namespace {

std::filesystem::path temp_dir(const std::string& tag) {
    const auto dir = std::filesystem::temp_directory_path() /
                     ("relmatch_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

GeneratorConfig tiny_config() {
    GeneratorConfig cfg;
    cfg.branching = {2, 2, 2};
    cfg.sigma_level = {2.0, 1.0, 0.5};
    cfg.d_in = 4;
    cfg.labeled_per_species = 3;
    cfg.unlabeled_per_species = 4;
    cfg.ood_unlabeled_per_species = 5;
    cfg.eval_per_species = 2;
    cfg.ood_fraction = 0.25;
    cfg.seed = 42;
    return cfg;
}

double sq_distance(const Vec& a, const Vec& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
    return d;
}

}  // namespace

TEST_CASE("generator is deterministic given the seed") {
    const GeneratorConfig cfg = tiny_config();
    const DatasetSplit a = generate_synthetic(cfg);
    const DatasetSplit b = generate_synthetic(cfg);
    CHECK(a.labeled == b.labeled);
    CHECK(a.unlabeled_in == b.unlabeled_in);
    CHECK(a.unlabeled_out == b.unlabeled_out);
    CHECK(a.eval_in == b.eval_in);
    CHECK(a.in_label_space == b.in_label_space);
    CHECK(a.tree.to_newick() == b.tree.to_newick());

    GeneratorConfig other = cfg;
    other.seed = 43;
    const DatasetSplit c = generate_synthetic(other);
    CHECK_FALSE(a.labeled == c.labeled);
}

TEST_CASE("zero leaf noise collapses every species to one point") {
    GeneratorConfig cfg = tiny_config();
    cfg.sigma_leaf = 0.0;
    const DatasetSplit split = generate_synthetic(cfg);
    for (const Sample& s : split.labeled) {
        for (const Sample& t : split.unlabeled_in) {
            if (t.latent_species == s.latent_species) CHECK(t.features == s.features);
        }
    }
}

TEST_CASE("generated pools respect the label-space split") {
    const DatasetSplit split = generate_synthetic(tiny_config());
    CHECK(split.categories.size() == 6);  // 8 species, 2 held out
    for (const Sample& s : split.unlabeled_out) {
        CHECK(split.in_label_space.count(s.latent_species) == 0);
        CHECK(split.tree.has_species(s.latent_species));
    }
    for (const Sample& s : split.unlabeled_in) {
        CHECK(split.in_label_space.count(s.latent_species) == 1);
    }
    CHECK(split.labeled.size() == 6 * 3);
    CHECK(split.unlabeled_out.size() == 2 * 5);
}

TEST_CASE("hierarchical geometry: intra-genus distances fall below inter-order distances") {
    GeneratorConfig cfg;
    cfg.branching = {4, 3, 3, 3};
    cfg.sigma_level = {2.0, 1.2, 0.7, 0.4};
    cfg.d_in = 16;
    cfg.labeled_per_species = 2;
    cfg.unlabeled_per_species = 0;
    cfg.ood_unlabeled_per_species = 0;
    cfg.eval_per_species = 0;
    cfg.ood_fraction = 0.0;
    cfg.seed = 7;
    const DatasetSplit split = generate_synthetic(cfg);

    Rng rng(11);
    double intra_genus = 0.0, inter_order = 0.0;
    long n_genus = 0, n_order = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const Sample& a = split.labeled[rng.uniform_index(split.labeled.size())];
        const Sample& b = split.labeled[rng.uniform_index(split.labeled.size())];
        if (a.latent_species == b.latent_species) continue;
        const int rel = split.tree.relation_depth(a.latent_species, b.latent_species);
        if (rel == 3) {  // same genus
            intra_genus += std::sqrt(sq_distance(a.features, b.features));
            ++n_genus;
        } else if (rel == 0) {  // different order
            inter_order += std::sqrt(sq_distance(a.features, b.features));
            ++n_order;
        }
    }
    REQUIRE(n_genus > 10);
    REQUIRE(n_order > 10);
    CHECK(intra_genus / n_genus < inter_order / n_order);
}

TEST_CASE("save and load round-trips the whole split") {
    const auto dir = temp_dir("roundtrip");
    const GeneratorConfig cfg = tiny_config();
    const DatasetSplit split = generate_synthetic(cfg);
    save_dataset(split, dir, cfg.seed);
    const DatasetSplit loaded = load_dataset_dir(dir);
    CHECK(loaded.labeled == split.labeled);
    CHECK(loaded.unlabeled_in == split.unlabeled_in);
    CHECK(loaded.unlabeled_out == split.unlabeled_out);
    CHECK(loaded.eval_in == split.eval_in);
    CHECK(loaded.eval_out == split.eval_out);
    CHECK(loaded.in_label_space == split.in_label_space);
    CHECK(loaded.categories == split.categories);
    CHECK(loaded.tree.to_newick() == split.tree.to_newick());
    std::filesystem::remove_all(dir);
}

TEST_CASE("loading rejects labeled rows with species outside the tree") {
    const auto dir = temp_dir("badspecies");
    {
        std::ofstream tree(dir / "tree.nwk");
        tree << "((A,B),(C,D));\n";
        std::ofstream labeled(dir / "labeled.csv");
        labeled << "id,species,f_0\nx0,A,1.0\nx1,Zebra,2.0\n";
    }
    try {
        load_dataset(dir / "tree.nwk", dir / "labeled.csv", dir / "unlabeled.csv");
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("Zebra") != std::string::npos);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("loading reports malformed numbers with their line") {
    const auto dir = temp_dir("badnumber");
    {
        std::ofstream tree(dir / "tree.nwk");
        tree << "((A,B),(C,D));\n";
        std::ofstream labeled(dir / "labeled.csv");
        labeled << "id,species,f_0\nx0,A,1.0\nx1,B,oops\n";
    }
    try {
        load_dataset(dir / "tree.nwk", dir / "labeled.csv", dir / "unlabeled.csv");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.position == 3);  // third line of the file
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("an absent unlabeled file degrades to a supervised dataset") {
    const auto dir = temp_dir("sup_only");
    {
        std::ofstream tree(dir / "tree.nwk");
        tree << "((A,B),(C,D));\n";
        std::ofstream labeled(dir / "labeled.csv");
        labeled << "id,species,f_0\nx0,A,1.0\nx1,B,2.0\nx2,C,0.5\n";
    }
    const DatasetSplit split =
        load_dataset(dir / "tree.nwk", dir / "labeled.csv", dir / "unlabeled.csv");
    CHECK(split.unlabeled_in.empty());
    CHECK(split.unlabeled_out.empty());
    Rng rng(3);
    const Batch batch = sample_batch(split, 2, 3, rng);
    CHECK(batch.labeled.size() == 2);
    CHECK(batch.unlabeled.empty());
    std::filesystem::remove_all(dir);
}

TEST_CASE("batch arithmetic: N labeled plus mu*N unlabeled") {
    const DatasetSplit split = generate_synthetic(tiny_config());
    Rng rng(5);
    const Batch batch = sample_batch(split, 2, 3, rng);
    CHECK(batch.labeled.size() == 2);
    CHECK(batch.unlabeled.size() == 6);
    CHECK_THROWS_AS(sample_batch(split, 1000, 1, rng), ValidationError);

    // No duplicates within a batch.
    std::set<const Sample*> seen(batch.unlabeled.begin(), batch.unlabeled.end());
    CHECK(seen.size() == batch.unlabeled.size());
}

TEST_CASE("default-scale batch matches the reference shape: 32 labeled, 320 unlabeled") {
    GeneratorConfig cfg;  // default desk-scale dataset: 108 species
    cfg.seed = 3;
    const DatasetSplit split = generate_synthetic(cfg);
    CHECK(split.tree.num_levels() == 5);
    CHECK(split.tree.num_leaves() == 108);
    CHECK(split.categories.size() == 81);
    Rng rng(5);
    const Batch batch = sample_batch(split, 32, 10, rng);
    CHECK(batch.labeled.size() == 32);
    CHECK(batch.unlabeled.size() == 320);
}

TEST_CASE("in_only batches never touch the out-of-distribution pool") {
    const DatasetSplit split = generate_synthetic(tiny_config());
    std::set<const Sample*> out_pool;
    for (const Sample& s : split.unlabeled_out) out_pool.insert(&s);
    Rng rng(9);
    for (int t = 0; t < 20; ++t) {
        const Batch batch = sample_batch(split, 3, 2, rng, /*in_only=*/true);
        for (const Sample* s : batch.unlabeled) CHECK(out_pool.count(s) == 0);
    }
}

TEST_CASE("repeated batches cover the whole pool") {
    GeneratorConfig cfg = tiny_config();
    cfg.unlabeled_per_species = 2;
    cfg.ood_unlabeled_per_species = 2;
    const DatasetSplit split = generate_synthetic(cfg);
    Rng rng(13);
    std::set<const Sample*> seen_labeled, seen_unlabeled;
    // Enough draws that missing any element has probability well under 1e-6
    // if sampling were uniform; a miss therefore fails a 1%-level test too.
    for (int t = 0; t < 200; ++t) {
        const Batch batch = sample_batch(split, 4, 2, rng);
        for (const Sample* s : batch.labeled) seen_labeled.insert(s);
        for (const Sample* s : batch.unlabeled) seen_unlabeled.insert(s);
    }
    CHECK(seen_labeled.size() == split.labeled.size());
    CHECK(seen_unlabeled.size() == split.unlabeled_in.size() + split.unlabeled_out.size());
}

TEST_CASE("halving the label space re-partitions every pool") {
    const DatasetSplit split = generate_synthetic(tiny_config());
    const DatasetSplit half = repartition_half_label_space(split);
    CHECK(half.categories.size() == split.categories.size() / 2);
    for (const Sample& s : half.labeled) CHECK(half.in_label_space.count(*s.species) == 1);
    for (const Sample& s : half.unlabeled_out) {
        CHECK(half.in_label_space.count(s.latent_species) == 0);
    }
    // The dropped half's eval samples became the OOD eval pool.
    bool found_dropped = false;
    for (const Sample& s : half.eval_out) {
        if (split.in_label_space.count(s.latent_species) > 0) found_dropped = true;
        CHECK_FALSE(s.species.has_value());
    }
    CHECK(found_dropped);
}
