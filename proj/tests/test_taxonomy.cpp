#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <map>
#include <set>
#include <string>

#include "relmatch/taxonomy.hpp"

#include "oracles.hpp"

using namespace relmatch;

TEST_CASE("parse_newick builds the expected four-leaf tree") {
    const TaxonomyTree tree = TaxonomyTree::parse_newick("((A,B),(C,D));");
    CHECK(tree.num_levels() == 3);
    CHECK(tree.num_leaves() == 4);
    CHECK(tree.node(tree.root()).depth == 0);
    int depth1 = 0, depth2 = 0;
    for (const auto& n : tree.nodes()) {
        if (n.depth == 1) ++depth1;
        if (n.depth == 2) ++depth2;
    }
    CHECK(depth1 == 2);
    CHECK(depth2 == 4);
    // Left-to-right Newick order
    CHECK(tree.node(tree.leaves()[0]).name == "A");
    CHECK(tree.node(tree.leaves()[3]).name == "D");
}

TEST_CASE("parse_newick accepts the degenerate single-leaf chain") {
    const TaxonomyTree tree = TaxonomyTree::parse_newick("(A);");
    CHECK(tree.num_levels() == 2);
    CHECK(tree.num_leaves() == 1);
    CHECK(tree.node(tree.leaf_id("A")).depth == 1);
}

TEST_CASE("parse_newick rejects bad inputs") {
    CHECK_THROWS_AS(TaxonomyTree::parse_newick("((A,B),C);"), ValidationError);  // ragged depths
    CHECK_THROWS_AS(TaxonomyTree::parse_newick("((A,B),(A,D));"), ValidationError);  // duplicate leaf
    CHECK_THROWS_AS(TaxonomyTree::parse_newick("((A,B),(C,D))"), ParseError);  // missing ';'
    CHECK_THROWS_AS(TaxonomyTree::parse_newick("((A,B),(C,D)); junk"), ParseError);
    CHECK_THROWS_AS(TaxonomyTree::parse_newick("((A:1,B),(C,D));"), ParseError);  // branch lengths
    CHECK_THROWS_AS(TaxonomyTree::parse_newick("(()A,B);"), ParseError);
    CHECK_THROWS_AS(TaxonomyTree::parse_newick("A;"), ValidationError);  // single node, one level

    try {
        TaxonomyTree::parse_newick("((A,B),(C,D)];");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.position == 12);  // byte offset of ']'
    }
}

TEST_CASE("internal names survive a parse round-trip") {
    const std::string text = "((A,B)ab,(C,D)cd)root;";
    const TaxonomyTree tree = TaxonomyTree::parse_newick(text);
    CHECK(tree.to_newick() == text);
}

TEST_CASE("lca handles reflexive and forced cases") {
    const TaxonomyTree tree = TaxonomyTree::parse_newick("((A,B),(C,D));");
    const int a = tree.leaf_id("A");
    const int b = tree.leaf_id("B");
    const int c = tree.leaf_id("C");
    CHECK(tree.lca(a, a) == a);
    CHECK(tree.node(tree.lca(a, b)).depth == 1);
    CHECK(tree.lca(a, c) == tree.root());
    CHECK_THROWS_AS(tree.lca(a, 999), ValidationError);
}

TEST_CASE("lca matches the ancestor-list oracle on a random 200-leaf tree") {
    Rng rng(7);
    int leaves = 0;
    std::string newick;
    while (leaves < 200) {
        leaves = 0;
        newick = oracles::random_uniform_newick(rng, 5, 5, &leaves, 3);
    }
    const TaxonomyTree tree = TaxonomyTree::parse_newick(newick);
    REQUIRE(tree.num_leaves() >= 200);
    for (int trial = 0; trial < 500; ++trial) {
        const int a = tree.leaves()[rng.uniform_index(tree.leaves().size())];
        const int b = tree.leaves()[rng.uniform_index(tree.leaves().size())];
        CHECK(tree.lca(a, b) == oracles::lca_by_ancestor_lists(tree, a, b));
    }
}

TEST_CASE("relation_depth: same species map to the deepest level") {
    const TaxonomyTree tree = TaxonomyTree::parse_newick("((A,B),(C,D));");
    CHECK(tree.relation_depth("A", "A") == tree.num_levels() - 1);
    CHECK(tree.relation_depth("A", "B") == 1);
    CHECK(tree.relation_depth("A", "C") == 0);
    CHECK_THROWS_AS(tree.relation_depth("A", "Z"), ValidationError);
}

TEST_CASE("a five-level tree partitions pairs into exactly five relation classes") {
    // Class -> Order -> Family -> Genus -> Species, like the Aves hierarchy.
    const TaxonomyTree tree = TaxonomyTree::parse_newick(
        "((((s1,s2)g1,(s3,s4)g2)f1,((s5,s6)g3)f2)o1,(((s7,s8)g4)f3)o2)aves;");
    CHECK(tree.num_levels() == 5);
    std::set<int> seen;
    const auto species = tree.species_names();
    for (const auto& x : species)
        for (const auto& y : species) seen.insert(tree.relation_depth(x, y));
    CHECK(seen == std::set<int>{0, 1, 2, 3, 4});
}

TEST_CASE("relation_depth is symmetric and matches the oracle on random trees") {
    Rng rng(11);
    for (int t = 0; t < 10; ++t) {
        const int levels = 3 + static_cast<int>(rng.uniform_index(3));
        const TaxonomyTree tree =
            TaxonomyTree::parse_newick(oracles::random_uniform_newick(rng, levels, 3));
        for (int trial = 0; trial < 100; ++trial) {
            const int a = tree.leaves()[rng.uniform_index(tree.leaves().size())];
            const int b = tree.leaves()[rng.uniform_index(tree.leaves().size())];
            const int rel = tree.relation_between_leaves(a, b);
            CHECK(rel == tree.relation_between_leaves(b, a));
            CHECK(rel == tree.node(oracles::lca_by_ancestor_lists(tree, a, b)).depth);
        }
        for (int leaf : tree.leaves()) {
            CHECK(tree.relation_between_leaves(leaf, leaf) == tree.num_levels() - 1);
        }
    }
}

TEST_CASE("triplet consistency holds exhaustively on small trees") {
    const char* corpus[] = {
        "((A,B),(C,D));",
        "(A,B,C);",
        "((A,B),(C,D),(E,F));",
        "(((a,b),(c,d)),((e,f),(g,h)));",
        "((((s1,s2)g1,(s3,s4)g2)f1,((s5,s6)g3)f2)o1,(((s7,s8)g4)f3)o2)aves;",
        "((a,b,c,d,e),(f,g,h,i,j));",
    };
    for (const char* text : corpus) {
        const TaxonomyTree tree = TaxonomyTree::parse_newick(text);
        const auto report = verify_triplet_consistency(tree, 1'000'000, 1);
        CHECK(report.exhaustive);
        CHECK(report.violations.empty());
        const long long n = tree.num_leaves();
        CHECK(report.triples_examined == n * (n - 1) * (n - 2));
    }
}

TEST_CASE("triplet consistency holds on a sampled random 100-leaf tree") {
    Rng rng(23);
    int leaves = 0;
    std::string newick;
    while (leaves < 100) {
        leaves = 0;
        newick = oracles::random_uniform_newick(rng, 5, 5, &leaves, 3);
    }
    const TaxonomyTree tree = TaxonomyTree::parse_newick(newick);
    const auto report = verify_triplet_consistency(tree, 10'000, 99);
    CHECK_FALSE(report.exhaustive);
    CHECK(report.triples_examined == 10'000);
    CHECK(report.violations.empty());
}

TEST_CASE("triplet consistency on fewer than three leaves checks nothing") {
    const TaxonomyTree tree = TaxonomyTree::parse_newick("(A);");
    const auto report = verify_triplet_consistency(tree, 100, 1);
    CHECK(report.triples_examined == 0);
    CHECK(report.violations.empty());
}

TEST_CASE("relation weights: four-leaf one-sample case") {
    const TaxonomyTree tree = TaxonomyTree::parse_newick("((A,B),(C,D));");
    std::map<std::string, long> hist{{"A", 1}, {"B", 1}, {"C", 1}, {"D", 1}};
    const RelationWeights w = relation_weights(tree, hist);
    // Oracle: enumerate all 16 ordered sample pairs and tally LCA depths.
    const auto species = tree.species_names();
    std::vector<double> freq(3, 0.0);
    for (const auto& x : species)
        for (const auto& y : species) freq[static_cast<std::size_t>(tree.relation_depth(x, y))] += 1.0;
    for (double& f : freq) f /= 16.0;
    CHECK(freq[0] == doctest::Approx(8.0 / 16.0));
    CHECK(freq[1] == doctest::Approx(4.0 / 16.0));
    CHECK(freq[2] == doctest::Approx(4.0 / 16.0));
    double norm = 0.0;
    for (double f : freq) norm += 1.0 - f;
    CHECK(w.frequencies == freq);
    CHECK(w.w[0] == (1.0 - freq[0]) / norm);
    CHECK(w.w[1] == (1.0 - freq[1]) / norm);
    CHECK(w.w[2] == (1.0 - freq[2]) / norm);
    CHECK(w.w[0] == 0.25);
    CHECK(w.w[1] == 0.375);
    CHECK(w.w[2] == 0.375);
}

TEST_CASE("relation weights: uniform pair frequencies give uniform weights") {
    // Direct check of the rule: equal frequencies leave nothing to correct.
    const TaxonomyTree tree = TaxonomyTree::parse_newick("((A,B),(C,D));");
    std::map<std::string, long> hist{{"A", 1}, {"B", 1}, {"C", 1}, {"D", 1}};
    RelationWeights w = relation_weights(tree, hist);
    const std::size_t realizable = 3;
    double sum = 0.0;
    for (double v : w.w) sum += v;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    // Uniform-frequency construction: weights collapse to 1/R.
    std::vector<double> uniform_freq(realizable, 1.0 / 3.0);
    double norm = 0.0;
    for (double f : uniform_freq) norm += 1.0 - f;
    for (double f : uniform_freq) CHECK((1.0 - f) / norm == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("relation weights sum to one on random trees") {
    Rng rng(31);
    for (int t = 0; t < 100; ++t) {
        const int levels = 2 + static_cast<int>(rng.uniform_index(4));
        const TaxonomyTree tree =
            TaxonomyTree::parse_newick(oracles::random_uniform_newick(rng, levels, 3));
        std::map<std::string, long> hist;
        for (const auto& name : tree.species_names()) {
            hist[name] = 1 + static_cast<long>(rng.uniform_index(4));
        }
        const RelationWeights w = relation_weights(tree, hist);
        double sum = 0.0;
        for (double v : w.w) sum += v;
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("relation weights are permutation-equivariant under species relabeling") {
    const TaxonomyTree tree =
        TaxonomyTree::parse_newick("(((a,b),(c,d)),((e,f),(g,h)));");
    std::map<std::string, long> hist{{"a", 3}, {"b", 1}, {"c", 2}, {"d", 1},
                                     {"e", 1}, {"f", 4}, {"g", 1}, {"h", 2}};
    // Swap counts between leaves occupying symmetric positions; the weight
    // vector only sees pair-relation frequencies, so it cannot change.
    std::map<std::string, long> swapped{{"a", 1}, {"b", 4}, {"c", 1}, {"d", 2},
                                        {"e", 3}, {"f", 1}, {"g", 2}, {"h", 1}};
    const RelationWeights w1 = relation_weights(tree, hist);
    const RelationWeights w2 = relation_weights(tree, swapped);
    REQUIRE(w1.w.size() == w2.w.size());
    for (std::size_t i = 0; i < w1.w.size(); ++i) {
        CHECK(w1.w[i] == doctest::Approx(w2.w[i]).epsilon(1e-12));
    }
}

TEST_CASE("relation weights: degenerate single-relation histogram is one-hot") {
    const TaxonomyTree tree = TaxonomyTree::parse_newick("((A,B),(C,D));");
    std::map<std::string, long> hist{{"A", 3}};  // only same-species pairs realizable
    const RelationWeights w = relation_weights(tree, hist);
    CHECK(w.degenerate_one_hot);
    CHECK(w.w[2] == 1.0);
    CHECK(w.w[0] == 0.0);
    CHECK(w.w[1] == 0.0);
}

TEST_CASE("relation weights reject empty or undersized histograms") {
    const TaxonomyTree tree = TaxonomyTree::parse_newick("((A,B),(C,D));");
    CHECK_THROWS_AS(relation_weights(tree, {}), ValidationError);
    CHECK_THROWS_AS(relation_weights(tree, {{"A", 1}}), ValidationError);
    CHECK_THROWS_AS(relation_weights(tree, {{"Z", 2}}), ValidationError);
}

TEST_CASE("truncate to the full depth is the identity") {
    const TaxonomyTree tree = TaxonomyTree::parse_newick(
        "((((s1,s2)g1,(s3,s4)g2)f1,((s5,s6)g3)f2)o1,(((s7,s8)g4)f3)o2)aves;");
    const TaxonomyTree same = tree.truncated(tree.num_levels());
    CHECK(same.to_newick() == tree.to_newick());
    CHECK(same.num_levels() == tree.num_levels());
}

TEST_CASE("truncate to two levels makes a star") {
    const TaxonomyTree tree = TaxonomyTree::parse_newick("((A,B),(C,D));");
    const TaxonomyTree star = tree.truncated(2);
    CHECK(star.num_levels() == 2);
    CHECK(star.num_leaves() == 2);
    // Species still resolve, routed to their surviving ancestors.
    CHECK(star.relation_depth("A", "B") == 1);  // same depth-1 clade
    CHECK(star.relation_depth("A", "C") == 0);
    CHECK(star.relation_depth("A", "A") == 1);
}

TEST_CASE("truncation clamps relations, verified against recomputation") {
    Rng rng(41);
    const TaxonomyTree tree =
        TaxonomyTree::parse_newick(oracles::random_uniform_newick(rng, 5, 3));
    const auto species = tree.species_names();
    for (int depth = 2; depth <= 5; ++depth) {
        const TaxonomyTree cut = tree.truncated(depth);
        CHECK(cut.num_levels() == depth);
        for (int trial = 0; trial < 200; ++trial) {
            const auto& x = species[rng.uniform_index(species.size())];
            const auto& y = species[rng.uniform_index(species.size())];
            const int expected = std::min(tree.relation_depth(x, y), depth - 1);
            CHECK(cut.relation_depth(x, y) == expected);
            // Independent recomputation on the truncated tree itself.
            CHECK(cut.relation_depth(x, y) ==
                  cut.node(oracles::lca_by_ancestor_lists(cut, cut.leaf_id(x), cut.leaf_id(y))).depth);
        }
    }
    CHECK_THROWS_AS(tree.truncated(1), ValidationError);
    CHECK_THROWS_AS(tree.truncated(6), ValidationError);
}

TEST_CASE("newick serialization round-trips to an isomorphic tree") {
    Rng rng(53);
    for (int t = 0; t < 20; ++t) {
        const int levels = 2 + static_cast<int>(rng.uniform_index(4));
        const TaxonomyTree tree =
            TaxonomyTree::parse_newick(oracles::random_uniform_newick(rng, levels, 3));
        const TaxonomyTree reparsed = TaxonomyTree::parse_newick(tree.to_newick());
        CHECK(reparsed.num_levels() == tree.num_levels());
        CHECK(reparsed.num_leaves() == tree.num_leaves());
        CHECK(reparsed.to_newick() == tree.to_newick());
        const auto species = tree.species_names();
        for (int trial = 0; trial < 50; ++trial) {
            const auto& x = species[rng.uniform_index(species.size())];
            const auto& y = species[rng.uniform_index(species.size())];
            CHECK(reparsed.relation_depth(x, y) == tree.relation_depth(x, y));
        }
    }
}

TEST_CASE("triplet report serializes to JSON") {
    const TaxonomyTree tree = TaxonomyTree::parse_newick("((A,B),(C,D));");
    const auto report = verify_triplet_consistency(tree, 1000, 1);
    const auto j = report.to_json();
    CHECK(j.at("violation_count").get<int>() == 0);
    CHECK(j.at("exhaustive").get<bool>());
}
