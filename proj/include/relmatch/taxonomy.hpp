#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "relmatch/errors.hpp"
#include "relmatch/rng.hpp"

namespace relmatch {

class TaxonomyTree;

namespace detail {
struct NewickParser;
}

// A cladogram over species: rooted, no branch lengths, every leaf at the
// same depth. Relations between two species are identified with the depth
// of their lowest common ancestor, so a tree with R levels induces R
// relation classes 0..R-1, where R-1 means "same species".
//
// Immutable after construction; all queries are const and safe for
// concurrent readers.
class TaxonomyTree {
public:
    struct Node {
        int parent = -1;  // -1 for the root
        int depth = 0;
        std::string name;  // may be empty for internal nodes
        std::vector<int> children;
        bool is_leaf() const { return children.empty(); }
    };

    // Grammar: tree := subtree ';'  subtree := '(' subtree (',' subtree)* ')'
    // [name] | name. Leaves must be named, internal names are optional.
    // Branch lengths, quoting and comments are not part of this dialect and
    // are rejected with the byte offset of the offending character.
    static TaxonomyTree parse_newick(std::string_view text);

    std::string to_newick() const {
        std::string out;
        write_newick(root(), out);
        out += ';';
        return out;
    }

    int root() const { return 0; }
    int num_nodes() const { return static_cast<int>(nodes_.size()); }
    int num_levels() const { return num_levels_; }  // R
    int num_leaves() const { return static_cast<int>(leaves_.size()); }

    const Node& node(int id) const {
        if (id < 0 || id >= num_nodes()) throw ValidationError("unknown node id " + std::to_string(id));
        return nodes_[static_cast<std::size_t>(id)];
    }
    const std::vector<Node>& nodes() const { return nodes_; }

    // Leaf ids in left-to-right Newick order.
    const std::vector<int>& leaves() const { return leaves_; }

    bool has_species(std::string_view name) const {
        return leaf_index_.find(std::string(name)) != leaf_index_.end();
    }

    int leaf_id(std::string_view name) const {
        const auto it = leaf_index_.find(std::string(name));
        if (it == leaf_index_.end()) {
            throw ValidationError("unknown species \"" + std::string(name) + "\"");
        }
        return it->second;
    }

    // Species names in leaf order. For truncated trees this still lists the
    // original species (several may share a surviving leaf).
    std::vector<std::string> species_names() const {
        std::vector<std::pair<int, std::string>> ranked;
        ranked.reserve(leaf_index_.size());
        for (const auto& [species, id] : leaf_index_) {
            ranked.emplace_back(leaf_rank_.at(id), species);
        }
        std::sort(ranked.begin(), ranked.end());
        std::vector<std::string> names;
        names.reserve(ranked.size());
        for (auto& [rank, name] : ranked) names.push_back(std::move(name));
        return names;
    }

    // Deepest node that is an ancestor-or-self of both arguments.
    int lca(int a, int b) const {
        check_id(a);
        check_id(b);
        while (nodes_[static_cast<std::size_t>(a)].depth > nodes_[static_cast<std::size_t>(b)].depth) {
            a = nodes_[static_cast<std::size_t>(a)].parent;
        }
        while (nodes_[static_cast<std::size_t>(b)].depth > nodes_[static_cast<std::size_t>(a)].depth) {
            b = nodes_[static_cast<std::size_t>(b)].parent;
        }
        while (a != b) {
            a = nodes_[static_cast<std::size_t>(a)].parent;
            b = nodes_[static_cast<std::size_t>(b)].parent;
        }
        return a;
    }

    // Relation class of a species pair: depth of the LCA of their leaves.
    // Same species means the deepest class, R-1.
    int relation_depth(std::string_view species_a, std::string_view species_b) const {
        return relation_between_leaves(leaf_id(species_a), leaf_id(species_b));
    }

    int relation_between_leaves(int leaf_a, int leaf_b) const {
        return nodes_[static_cast<std::size_t>(lca(leaf_a, leaf_b))].depth;
    }

    // Collapse everything below depth new_depth-1. Former internal nodes at
    // that depth become leaves; every original species keeps an entry in the
    // species index, routed to its surviving ancestor. The result has
    // new_depth levels.
    TaxonomyTree truncated(int new_depth) const {
        if (new_depth < 2 || new_depth > num_levels_) {
            throw ValidationError("truncation depth " + std::to_string(new_depth) +
                                  " outside [2, " + std::to_string(num_levels_) + "]");
        }
        if (new_depth == num_levels_) return *this;

        const int leaf_depth = new_depth - 1;
        TaxonomyTree out;
        std::vector<int> old_to_new(nodes_.size(), -1);
        std::unordered_map<std::string, int> used_leaf_names;
        for (std::size_t id = 0; id < nodes_.size(); ++id) {
            const Node& n = nodes_[id];
            if (n.depth > leaf_depth) continue;
            const int new_parent = n.parent < 0 ? -1 : old_to_new[static_cast<std::size_t>(n.parent)];
            Node copy;
            copy.depth = n.depth;
            copy.parent = new_parent;
            copy.name = n.name;
            if (n.depth == leaf_depth) {
                if (copy.name.empty() || used_leaf_names.count(copy.name) > 0) {
                    copy.name += "clade" + std::to_string(id);
                }
                used_leaf_names.emplace(copy.name, 1);
            }
            const int new_id = static_cast<int>(out.nodes_.size());
            old_to_new[id] = new_id;
            out.nodes_.push_back(std::move(copy));
            if (new_parent >= 0) {
                out.nodes_[static_cast<std::size_t>(new_parent)].children.push_back(new_id);
            }
        }
        for (std::size_t id = 0; id < out.nodes_.size(); ++id) {
            if (out.nodes_[id].is_leaf()) out.leaves_.push_back(static_cast<int>(id));
        }
        // Route each original species to its ancestor at the new leaf depth.
        for (const auto& [species, leaf] : leaf_index_) {
            int cur = leaf;
            while (nodes_[static_cast<std::size_t>(cur)].depth > leaf_depth) {
                cur = nodes_[static_cast<std::size_t>(cur)].parent;
            }
            out.leaf_index_[species] = old_to_new[static_cast<std::size_t>(cur)];
        }
        out.num_levels_ = new_depth;
        out.finish_indexing();
        out.validate();
        return out;
    }

private:
    friend struct detail::NewickParser;

    void check_id(int id) const {
        if (id < 0 || id >= num_nodes()) {
            throw ValidationError("unknown node id " + std::to_string(id));
        }
    }

    void write_newick(int id, std::string& out) const {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.is_leaf()) {
            out += '(';
            for (std::size_t c = 0; c < n.children.size(); ++c) {
                if (c > 0) out += ',';
                write_newick(n.children[c], out);
            }
            out += ')';
        }
        out += n.name;
    }

    void finish_indexing() {
        leaf_rank_.clear();
        for (std::size_t i = 0; i < leaves_.size(); ++i) {
            leaf_rank_[leaves_[i]] = static_cast<int>(i);
        }
    }

    void validate() const {
        if (nodes_.empty()) throw ValidationError("empty tree");
        if (leaves_.empty()) throw ValidationError("tree has no leaves");
        if (num_levels_ < 2) {
            throw ValidationError("tree must have at least 2 levels, got " +
                                  std::to_string(num_levels_));
        }
        const int leaf_depth = num_levels_ - 1;
        for (int leaf : leaves_) {
            const Node& n = nodes_[static_cast<std::size_t>(leaf)];
            if (n.depth != leaf_depth) {
                throw ValidationError("ragged tree: leaf \"" + n.name + "\" at depth " +
                                      std::to_string(n.depth) + ", expected " +
                                      std::to_string(leaf_depth));
            }
        }
    }

    std::vector<Node> nodes_;
    std::vector<int> leaves_;
    std::unordered_map<std::string, int> leaf_index_;
    std::unordered_map<int, int> leaf_rank_;
    int num_levels_ = 0;
};

namespace detail {

struct NewickParser {
    std::string_view text;
    std::size_t pos = 0;
    TaxonomyTree tree;

    using Node = TaxonomyTree::Node;

    [[noreturn]] void fail(const std::string& what) const {
        throw ParseError("newick: " + what + " at byte " + std::to_string(pos), pos);
    }

    void skip_ws() {
        while (pos < text.size() && (text[pos] == ' ' || text[pos] == '\t' ||
                                     text[pos] == '\n' || text[pos] == '\r')) {
            ++pos;
        }
    }

    static bool is_name_char(char c) {
        return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') ||
               (c >= '0' && c <= '9') || c == '_' || c == '-' || c == '.';
    }

    std::string read_name() {
        const std::size_t start = pos;
        while (pos < text.size() && is_name_char(text[pos])) ++pos;
        return std::string(text.substr(start, pos - start));
    }

    int new_node(int parent) {
        Node n;
        n.parent = parent;
        n.depth = parent < 0 ? 0 : tree.nodes_[static_cast<std::size_t>(parent)].depth + 1;
        tree.nodes_.push_back(std::move(n));
        const int id = static_cast<int>(tree.nodes_.size()) - 1;
        if (parent >= 0) tree.nodes_[static_cast<std::size_t>(parent)].children.push_back(id);
        return id;
    }

    void subtree(int parent) {
        skip_ws();
        if (pos >= text.size()) fail("unexpected end of input");
        const int id = new_node(parent);
        if (text[pos] == '(') {
            ++pos;
            subtree(id);
            skip_ws();
            while (pos < text.size() && text[pos] == ',') {
                ++pos;
                subtree(id);
                skip_ws();
            }
            if (pos >= text.size() || text[pos] != ')') fail("expected ',' or ')'");
            ++pos;
            skip_ws();
            tree.nodes_[static_cast<std::size_t>(id)].name = read_name();
        } else if (is_name_char(text[pos])) {
            tree.nodes_[static_cast<std::size_t>(id)].name = read_name();
        } else if (text[pos] == ':') {
            fail("branch lengths are not supported");
        } else {
            fail(std::string("unexpected character '") + text[pos] + "'");
        }
        skip_ws();
        if (pos < text.size() && text[pos] == ':') fail("branch lengths are not supported");
    }

    TaxonomyTree run() {
        skip_ws();
        subtree(-1);
        skip_ws();
        if (pos >= text.size() || text[pos] != ';') fail("expected ';'");
        ++pos;
        skip_ws();
        if (pos != text.size()) fail("trailing characters after ';'");

        int leaf_depth = -1;
        for (std::size_t id = 0; id < tree.nodes_.size(); ++id) {
            const Node& n = tree.nodes_[id];
            if (!n.is_leaf()) continue;
            tree.leaves_.push_back(static_cast<int>(id));
            if (n.name.empty()) {
                pos = 0;
                fail("unnamed leaf");
            }
            if (leaf_depth < 0) leaf_depth = n.depth;
            if (n.depth != leaf_depth) {
                throw ValidationError("ragged tree: leaf \"" + n.name + "\" at depth " +
                                      std::to_string(n.depth) + ", expected " +
                                      std::to_string(leaf_depth));
            }
            const auto [it, inserted] = tree.leaf_index_.emplace(n.name, static_cast<int>(id));
            (void)it;
            if (!inserted) throw ValidationError("duplicate leaf name \"" + n.name + "\"");
        }
        tree.num_levels_ = leaf_depth + 1;
        tree.finish_indexing();
        tree.validate();
        return std::move(tree);
    }
};

}  // namespace detail

inline TaxonomyTree TaxonomyTree::parse_newick(std::string_view text) {
    detail::NewickParser parser{text};
    return parser.run();
}

// ---------------------------------------------------------------------------
// Rooted-triplet consistency check.
//
// For leaves (a, b, c) with relation(a,b) > relation(a,c), the tree structure
// forces relation(a,c) == relation(b,c). Any violation is an implementation
// bug, so this doubles as a self-test of the LCA machinery.
// ---------------------------------------------------------------------------

struct TripletViolation {
    std::string a, b, c;
    int rel_ab = 0, rel_ac = 0, rel_bc = 0;
};

struct TripletConsistencyReport {
    long long triples_examined = 0;   // ordered distinct triples visited
    long long premise_count = 0;      // triples where relation(a,b) > relation(a,c)
    bool exhaustive = false;
    std::vector<TripletViolation> violations;

    nlohmann::json to_json() const {
        nlohmann::json out;
        out["triples_examined"] = triples_examined;
        out["premise_count"] = premise_count;
        out["exhaustive"] = exhaustive;
        out["violation_count"] = violations.size();
        auto arr = nlohmann::json::array();
        for (const auto& v : violations) {
            arr.push_back({{"a", v.a}, {"b", v.b}, {"c", v.c},
                           {"rel_ab", v.rel_ab}, {"rel_ac", v.rel_ac}, {"rel_bc", v.rel_bc}});
        }
        out["violations"] = arr;
        return out;
    }
};

inline TripletConsistencyReport verify_triplet_consistency(const TaxonomyTree& tree,
                                                           long long sample_count,
                                                           std::uint64_t seed) {
    if (sample_count < 1) throw ValidationError("sample_count must be >= 1");
    TripletConsistencyReport report;
    const auto& leaves = tree.leaves();
    const long long n = static_cast<long long>(leaves.size());
    if (n < 3) {
        report.exhaustive = true;
        return report;
    }

    const auto check = [&](int la, int lb, int lc) {
        ++report.triples_examined;
        const int rel_ab = tree.relation_between_leaves(la, lb);
        const int rel_ac = tree.relation_between_leaves(la, lc);
        if (rel_ab <= rel_ac) return;
        ++report.premise_count;
        const int rel_bc = tree.relation_between_leaves(lb, lc);
        if (rel_ac != rel_bc) {
            report.violations.push_back({tree.node(la).name, tree.node(lb).name,
                                         tree.node(lc).name, rel_ab, rel_ac, rel_bc});
        }
    };

    const long long total_ordered = n * (n - 1) * (n - 2);
    if (total_ordered <= sample_count) {
        report.exhaustive = true;
        for (long long i = 0; i < n; ++i)
            for (long long j = 0; j < n; ++j)
                for (long long k = 0; k < n; ++k) {
                    if (i == j || i == k || j == k) continue;
                    check(leaves[static_cast<std::size_t>(i)],
                          leaves[static_cast<std::size_t>(j)],
                          leaves[static_cast<std::size_t>(k)]);
                }
    } else {
        Rng rng(seed);
        for (long long s = 0; s < sample_count; ++s) {
            const std::size_t i = rng.uniform_index(static_cast<std::size_t>(n));
            std::size_t j = rng.uniform_index(static_cast<std::size_t>(n));
            while (j == i) j = rng.uniform_index(static_cast<std::size_t>(n));
            std::size_t k = rng.uniform_index(static_cast<std::size_t>(n));
            while (k == i || k == j) k = rng.uniform_index(static_cast<std::size_t>(n));
            check(leaves[i], leaves[j], leaves[k]);
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Relation re-weighting.
//
// Random pairs from a leveled taxonomy are badly skewed toward the shallow
// relations, so per-relation losses are re-weighted against the empirical
// pair-relation frequencies: w_k proportional to (1 - f_k) over the
// realizable levels, normalized to sum to one. Levels that cannot occur in
// the labeled set get weight zero.
// ---------------------------------------------------------------------------

struct RelationWeights {
    std::vector<double> w;
    std::vector<double> frequencies;
    bool degenerate_one_hot = false;  // all pairs share a single relation level

    nlohmann::json to_json() const {
        return nlohmann::json{{"weights", w},
                              {"frequencies", frequencies},
                              {"degenerate_one_hot", degenerate_one_hot}};
    }
};

inline RelationWeights relation_weights(const TaxonomyTree& tree,
                                        const std::map<std::string, long>& labeled_histogram) {
    if (labeled_histogram.empty()) throw ValidationError("relation_weights: empty histogram");
    long total = 0;
    std::vector<std::pair<int, long>> leaf_counts;
    leaf_counts.reserve(labeled_histogram.size());
    for (const auto& [species, count] : labeled_histogram) {
        if (count < 0) throw ValidationError("relation_weights: negative count for " + species);
        if (count == 0) continue;
        leaf_counts.emplace_back(tree.leaf_id(species), count);
        total += count;
    }
    if (total < 2) throw ValidationError("relation_weights: need at least 2 labeled samples");

    const int levels = tree.num_levels();
    RelationWeights out;
    out.frequencies.assign(static_cast<std::size_t>(levels), 0.0);

    // Ordered sample pairs, self-pairs included (a sample paired with itself
    // realizes the same-species relation).
    for (const auto& [leaf_a, count_a] : leaf_counts) {
        for (const auto& [leaf_b, count_b] : leaf_counts) {
            const int rel = tree.relation_between_leaves(leaf_a, leaf_b);
            out.frequencies[static_cast<std::size_t>(rel)] +=
                static_cast<double>(count_a) * static_cast<double>(count_b);
        }
    }
    const double pair_total = static_cast<double>(total) * static_cast<double>(total);
    for (double& f : out.frequencies) f /= pair_total;

    int realizable = 0;
    int last_realizable = -1;
    for (int k = 0; k < levels; ++k) {
        if (out.frequencies[static_cast<std::size_t>(k)] > 0.0) {
            ++realizable;
            last_realizable = k;
        }
    }
    out.w.assign(static_cast<std::size_t>(levels), 0.0);
    if (realizable == 1) {
        out.w[static_cast<std::size_t>(last_realizable)] = 1.0;
        out.degenerate_one_hot = true;
        return out;
    }
    double norm = 0.0;
    for (int k = 0; k < levels; ++k) {
        const double f = out.frequencies[static_cast<std::size_t>(k)];
        if (f > 0.0) norm += 1.0 - f;
    }
    for (int k = 0; k < levels; ++k) {
        const double f = out.frequencies[static_cast<std::size_t>(k)];
        if (f > 0.0) out.w[static_cast<std::size_t>(k)] = (1.0 - f) / norm;
    }
    return out;
}

}  // namespace relmatch
