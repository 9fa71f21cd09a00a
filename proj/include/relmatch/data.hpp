#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "relmatch/errors.hpp"
#include "relmatch/model.hpp"
#include "relmatch/rng.hpp"
#include "relmatch/taxonomy.hpp"

namespace relmatch {

struct Sample {
    Vec features;
    std::optional<std::string> species;  // absent for unlabeled samples
    std::string latent_species;          // generator ground truth; evaluation only

    bool operator==(const Sample&) const = default;
};

// A dataset: a small labeled pool over the in-distribution label space, plus
// unlabeled pools whose latent species are inside (U_in) or outside (U_out)
// that space but always inside the tree. Held-out eval pools mirror the same
// split.
struct DatasetSplit {
    TaxonomyTree tree;
    std::vector<Sample> labeled;
    std::vector<Sample> unlabeled_in;
    std::vector<Sample> unlabeled_out;
    std::vector<Sample> eval_in;
    std::vector<Sample> eval_out;
    std::set<std::string> in_label_space;

    // Category index space: the in-distribution species in leaf order.
    std::vector<std::string> categories;

    void rebuild_categories() {
        categories.clear();
        for (const std::string& name : tree.species_names()) {
            if (in_label_space.count(name) > 0) categories.push_back(name);
        }
    }

    int category_index(const std::string& species) const {
        for (std::size_t i = 0; i < categories.size(); ++i) {
            if (categories[i] == species) return static_cast<int>(i);
        }
        throw ValidationError("species \"" + species + "\" not in label space");
    }

    void validate() const {
        const int d = dimension();
        const auto check_pool = [&](const std::vector<Sample>& pool, bool labeled_pool, const char* what) {
            for (const Sample& s : pool) {
                if (static_cast<int>(s.features.size()) != d) {
                    throw ValidationError(std::string(what) + ": inconsistent feature dimension");
                }
                if (!all_finite(s.features)) throw ValidationError(std::string(what) + ": non-finite features");
                if (labeled_pool) {
                    if (!s.species.has_value()) throw ValidationError(std::string(what) + ": missing species");
                    if (!tree.has_species(*s.species)) {
                        throw ValidationError(std::string(what) + ": species \"" + *s.species + "\" not in tree");
                    }
                    if (in_label_space.count(*s.species) == 0) {
                        throw ValidationError(std::string(what) + ": species \"" + *s.species +
                                              "\" outside the label space");
                    }
                }
                if (!s.latent_species.empty() && !tree.has_species(s.latent_species)) {
                    throw ValidationError(std::string(what) + ": latent species \"" + s.latent_species +
                                          "\" not in tree");
                }
            }
        };
        check_pool(labeled, true, "labeled");
        check_pool(unlabeled_in, false, "unlabeled_in");
        check_pool(unlabeled_out, false, "unlabeled_out");
        check_pool(eval_in, true, "eval_in");
        check_pool(eval_out, false, "eval_out");
        for (const Sample& s : unlabeled_out) {
            if (!s.latent_species.empty() && in_label_space.count(s.latent_species) > 0) {
                throw ValidationError("unlabeled_out sample with in-distribution latent species " +
                                      s.latent_species);
            }
        }
    }

    int dimension() const {
        if (!labeled.empty()) return static_cast<int>(labeled.front().features.size());
        if (!unlabeled_in.empty()) return static_cast<int>(unlabeled_in.front().features.size());
        if (!unlabeled_out.empty()) return static_cast<int>(unlabeled_out.front().features.size());
        throw ValidationError("empty dataset");
    }

    std::map<std::string, long> labeled_histogram() const {
        std::map<std::string, long> hist;
        for (const Sample& s : labeled) ++hist[*s.species];
        return hist;
    }
};

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

struct GeneratorConfig {
    std::vector<int> branching = {4, 3, 3, 3};          // children per level, root downward
    int d_in = 16;
    std::vector<double> sigma_level = {2.0, 1.2, 0.7, 0.4};  // mean perturbation per level
    double sigma_leaf = 0.25;                           // per-sample noise
    int labeled_per_species = 5;
    int unlabeled_per_species = 20;
    int ood_unlabeled_per_species = 25;
    int eval_per_species = 10;
    double ood_fraction = 0.25;
    // false: hold out species spread across the genera, so most held-out
    // species keep an in-distribution sibling. true: hold out whole genera,
    // so held-out samples have no close in-distribution relative, the way a
    // large novel-category pool behaves.
    bool ood_whole_genera = false;
    std::uint64_t seed = 1;

    void validate() const {
        if (branching.empty()) throw ValidationError("generator: branching must be nonempty");
        for (int b : branching) {
            if (b < 1) throw ValidationError("generator: branching factors must be >= 1");
        }
        if (sigma_level.size() != branching.size()) {
            throw ValidationError("generator: sigma_level must match branching length");
        }
        for (double s : sigma_level) {
            if (!(s >= 0.0)) throw ValidationError("generator: sigma_level must be >= 0");
        }
        if (d_in < 1) throw ValidationError("generator: d_in must be >= 1");
        if (!(sigma_leaf >= 0.0)) throw ValidationError("generator: sigma_leaf must be >= 0");
        if (labeled_per_species < 1 || unlabeled_per_species < 0 || ood_unlabeled_per_species < 0 ||
            eval_per_species < 0) {
            throw ValidationError("generator: negative sample counts");
        }
        if (!(ood_fraction >= 0.0 && ood_fraction < 1.0)) {
            throw ValidationError("generator: ood_fraction must be in [0,1)");
        }
    }

    int species_count() const {
        int n = 1;
        for (int b : branching) n *= b;
        return n;
    }
};

inline DatasetSplit generate_synthetic(const GeneratorConfig& cfg) {
    cfg.validate();
    const int total_species = cfg.species_count();
    const int ood_count = static_cast<int>(cfg.ood_fraction * total_species + 0.5);
    if (total_species - ood_count < 2) {
        throw ValidationError("generator: OOD fraction leaves fewer than 2 in-distribution species");
    }

    // Build the cladogram as Newick text, then parse it back through the
    // validated path.
    std::string newick;
    int species_counter = 0;
    int internal_counter = 0;
    const std::function<void(int)> emit = [&](int depth) {
        if (depth == static_cast<int>(cfg.branching.size())) {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "sp%04d", species_counter++);
            newick += buf;
            return;
        }
        newick += '(';
        for (int c = 0; c < cfg.branching[static_cast<std::size_t>(depth)]; ++c) {
            if (c > 0) newick += ',';
            emit(depth + 1);
        }
        newick += ')';
        if (depth > 0) {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "n%d_%d", depth, internal_counter++);
            newick += buf;
        } else {
            newick += "root";
        }
    };
    emit(0);
    newick += ';';

    DatasetSplit split;
    split.tree = TaxonomyTree::parse_newick(newick);

    Rng rng(cfg.seed);
    const auto gaussian_vec = [&](double sigma) {
        Vec v(static_cast<std::size_t>(cfg.d_in));
        for (double& x : v) x = sigma * rng.gaussian();
        return v;
    };

    // Node means drift from the root outward; node ids are in preorder so
    // parents are assigned before children.
    std::vector<Vec> means(static_cast<std::size_t>(split.tree.num_nodes()));
    means[0].assign(static_cast<std::size_t>(cfg.d_in), 0.0);
    for (int id = 1; id < split.tree.num_nodes(); ++id) {
        const auto& node = split.tree.node(id);
        const double sigma = cfg.sigma_level[static_cast<std::size_t>(node.depth - 1)];
        Vec mean = means[static_cast<std::size_t>(node.parent)];
        const Vec offset = gaussian_vec(sigma);
        for (int i = 0; i < cfg.d_in; ++i) mean[static_cast<std::size_t>(i)] += offset[static_cast<std::size_t>(i)];
        means[static_cast<std::size_t>(id)] = std::move(mean);
    }

    const std::vector<std::string> species = split.tree.species_names();
    std::set<std::string> ood;
    if (cfg.ood_whole_genera && ood_count > 0) {
        // Hold out evenly spaced whole genera (leaf parents) until the
        // quota is covered.
        std::vector<std::vector<std::string>> genera;
        int last_parent = -1;
        for (const std::string& name : species) {
            const int parent = split.tree.node(split.tree.leaf_id(name)).parent;
            if (parent != last_parent) {
                genera.emplace_back();
                last_parent = parent;
            }
            genera.back().push_back(name);
        }
        const int genus_count = static_cast<int>(genera.size());
        const int take = std::min(genus_count,
                                  static_cast<int>(std::ceil(static_cast<double>(ood_count) /
                                                             genera.front().size())));
        for (int i = 0; i < take; ++i) {
            const int idx = static_cast<int>((static_cast<double>(i) + 0.5) * genus_count / take);
            for (const std::string& name : genera[static_cast<std::size_t>(std::min(idx, genus_count - 1))]) {
                ood.insert(name);
            }
        }
    } else {
        // Hold out evenly spaced species, so the held-out set spreads across
        // the genera instead of dropping whole clades.
        for (int i = 0; i < ood_count; ++i) {
            const int idx = static_cast<int>((static_cast<double>(i) + 0.5) * total_species / ood_count);
            ood.insert(species[static_cast<std::size_t>(std::min(idx, total_species - 1))]);
        }
    }
    for (const std::string& name : species) {
        if (ood.count(name) == 0) split.in_label_space.insert(name);
    }

    const auto draw_sample = [&](const std::string& name, bool labeled) {
        Sample s;
        const Vec& mean = means[static_cast<std::size_t>(split.tree.leaf_id(name))];
        s.features = mean;
        const Vec noise = gaussian_vec(cfg.sigma_leaf);
        for (int i = 0; i < cfg.d_in; ++i) {
            s.features[static_cast<std::size_t>(i)] += noise[static_cast<std::size_t>(i)];
        }
        s.latent_species = name;
        if (labeled) s.species = name;
        return s;
    };

    for (const std::string& name : species) {
        if (ood.count(name) > 0) {
            for (int i = 0; i < cfg.ood_unlabeled_per_species; ++i) {
                split.unlabeled_out.push_back(draw_sample(name, false));
            }
            for (int i = 0; i < cfg.eval_per_species; ++i) {
                split.eval_out.push_back(draw_sample(name, false));
            }
        } else {
            for (int i = 0; i < cfg.labeled_per_species; ++i) {
                split.labeled.push_back(draw_sample(name, true));
            }
            for (int i = 0; i < cfg.unlabeled_per_species; ++i) {
                split.unlabeled_in.push_back(draw_sample(name, false));
            }
            for (int i = 0; i < cfg.eval_per_species; ++i) {
                Sample s = draw_sample(name, true);
                split.eval_in.push_back(std::move(s));
            }
        }
    }

    split.rebuild_categories();
    split.validate();
    return split;
}

// ---------------------------------------------------------------------------
// On-disk format
//
// Samples are CSV with a header: id, species (empty when unlabeled), then
// f_0..f_{D-1}. Latent species of unlabeled/eval pools travel in a sidecar
// CSV (id, latent_species) that training never reads. The manifest records
// the seed, pool sizes, label space and file names.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline double parse_double(const std::string& field, std::size_t line_no) {
    double value = 0.0;
    const char* begin = field.data();
    const char* end = begin + field.size();
    const auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc{} || ptr != end) {
        throw ParseError("csv line " + std::to_string(line_no) + ": bad number \"" + field + "\"",
                         line_no);
    }
    return value;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

inline void write_sample_csv(const std::filesystem::path& path, const std::vector<Sample>& pool,
                             const std::string& id_prefix, bool with_species) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    const int d = pool.empty() ? 0 : static_cast<int>(pool.front().features.size());
    out << "id,species";
    for (int i = 0; i < d; ++i) out << ",f_" << i;
    out << "\n";
    for (std::size_t i = 0; i < pool.size(); ++i) {
        out << id_prefix << i << ',';
        if (with_species && pool[i].species.has_value()) out << *pool[i].species;
        for (double v : pool[i].features) out << ',' << format_double(v);
        out << "\n";
    }
}

inline void write_latent_csv(const std::filesystem::path& path, const std::vector<Sample>& pool,
                             const std::string& id_prefix) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "id,latent_species\n";
    for (std::size_t i = 0; i < pool.size(); ++i) {
        out << id_prefix << i << ',' << pool[i].latent_species << "\n";
    }
}

inline std::vector<Sample> read_sample_csv(const std::filesystem::path& path, bool expect_species) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) throw ParseError(path.string() + ": empty file", 0);
    ++line_no;
    const auto header = split_csv_line(line);
    if (header.size() < 3 || header[0] != "id" || header[1] != "species") {
        throw ParseError(path.string() + ": bad header", line_no);
    }
    const std::size_t d = header.size() - 2;
    std::vector<Sample> pool;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != header.size()) {
            throw ParseError(path.string() + " line " + std::to_string(line_no) +
                                 ": expected " + std::to_string(header.size()) + " fields, got " +
                                 std::to_string(fields.size()),
                             line_no);
        }
        Sample s;
        if (!fields[1].empty()) {
            s.species = fields[1];
            s.latent_species = fields[1];
        } else if (expect_species) {
            throw ParseError(path.string() + " line " + std::to_string(line_no) + ": missing species",
                             line_no);
        }
        s.features.reserve(d);
        for (std::size_t i = 0; i < d; ++i) {
            s.features.push_back(parse_double(fields[i + 2], line_no));
        }
        pool.push_back(std::move(s));
    }
    return pool;
}

inline void apply_latent_csv(const std::filesystem::path& path, std::vector<Sample>& pool,
                             const std::string& id_prefix) {
    std::ifstream in(path);
    if (!in) return;  // sidecar is optional
    std::string line;
    std::size_t line_no = 0;
    std::getline(in, line);  // header
    ++line_no;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != 2) {
            throw ParseError(path.string() + " line " + std::to_string(line_no) + ": expected 2 fields",
                             line_no);
        }
        if (fields[0].rfind(id_prefix, 0) != 0) continue;
        const std::size_t idx = static_cast<std::size_t>(
            std::stoll(fields[0].substr(id_prefix.size())));
        if (idx >= pool.size()) {
            throw ParseError(path.string() + " line " + std::to_string(line_no) + ": id out of range",
                             line_no);
        }
        pool[idx].latent_species = fields[1];
    }
}

}  // namespace detail

inline nlohmann::json dataset_manifest(const DatasetSplit& split, std::uint64_t seed) {
    nlohmann::json m;
    m["format_version"] = 1;
    m["seed"] = seed;
    m["d_in"] = split.dimension();
    m["num_levels"] = split.tree.num_levels();
    m["num_species"] = split.tree.species_names().size();
    m["counts"] = {{"labeled", split.labeled.size()},
                   {"unlabeled_in", split.unlabeled_in.size()},
                   {"unlabeled_out", split.unlabeled_out.size()},
                   {"eval_in", split.eval_in.size()},
                   {"eval_out", split.eval_out.size()}};
    m["in_label_space"] = std::vector<std::string>(split.in_label_space.begin(), split.in_label_space.end());
    std::set<std::string> ood;
    for (const Sample& s : split.unlabeled_out) ood.insert(s.latent_species);
    for (const Sample& s : split.eval_out) ood.insert(s.latent_species);
    m["ood_species"] = std::vector<std::string>(ood.begin(), ood.end());
    m["files"] = {{"tree", "tree.nwk"},          {"labeled", "labeled.csv"},
                  {"unlabeled", "unlabeled.csv"}, {"unlabeled_latent", "unlabeled.latent.csv"},
                  {"eval_in", "eval_in.csv"},     {"eval_out", "eval_out.csv"},
                  {"eval_out_latent", "eval_out.latent.csv"}};
    return m;
}

inline void save_dataset(const DatasetSplit& split, const std::filesystem::path& dir,
                         std::uint64_t seed) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream tree_out(dir / "tree.nwk");
        if (!tree_out) throw IoError("cannot write " + (dir / "tree.nwk").string());
        tree_out << split.tree.to_newick() << "\n";
    }
    detail::write_sample_csv(dir / "labeled.csv", split.labeled, "x", true);
    std::vector<Sample> unlabeled = split.unlabeled_in;
    unlabeled.insert(unlabeled.end(), split.unlabeled_out.begin(), split.unlabeled_out.end());
    detail::write_sample_csv(dir / "unlabeled.csv", unlabeled, "u", false);
    detail::write_latent_csv(dir / "unlabeled.latent.csv", unlabeled, "u");
    detail::write_sample_csv(dir / "eval_in.csv", split.eval_in, "ei", true);
    detail::write_sample_csv(dir / "eval_out.csv", split.eval_out, "eo", false);
    detail::write_latent_csv(dir / "eval_out.latent.csv", split.eval_out, "eo");
    std::ofstream mf(dir / "manifest.json");
    if (!mf) throw IoError("cannot write " + (dir / "manifest.json").string());
    mf << dataset_manifest(split, seed).dump(2) << "\n";
}

// Load from explicit paths. The label space defaults to the species present
// in the labeled file; pass `label_space` (e.g. from a manifest) to widen it.
inline DatasetSplit load_dataset(const std::filesystem::path& tree_path,
                                 const std::filesystem::path& labeled_path,
                                 const std::filesystem::path& unlabeled_path,
                                 const std::set<std::string>* label_space = nullptr,
                                 const std::filesystem::path* eval_in_path = nullptr,
                                 const std::filesystem::path* eval_out_path = nullptr) {
    DatasetSplit split;
    {
        std::ifstream in(tree_path);
        if (!in) throw IoError("cannot read " + tree_path.string());
        std::stringstream buf;
        buf << in.rdbuf();
        std::string text = buf.str();
        while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
        split.tree = TaxonomyTree::parse_newick(text);
    }
    split.labeled = detail::read_sample_csv(labeled_path, true);
    if (label_space != nullptr) {
        split.in_label_space = *label_space;
    } else {
        for (const Sample& s : split.labeled) split.in_label_space.insert(*s.species);
    }

    std::vector<Sample> unlabeled;
    if (std::filesystem::exists(unlabeled_path)) {
        unlabeled = detail::read_sample_csv(unlabeled_path, false);
        auto latent_path = unlabeled_path;
        latent_path.replace_extension(".latent.csv");
        detail::apply_latent_csv(latent_path, unlabeled, "u");
    }
    for (Sample& s : unlabeled) {
        if (!s.latent_species.empty() && split.in_label_space.count(s.latent_species) == 0) {
            split.unlabeled_out.push_back(std::move(s));
        } else {
            split.unlabeled_in.push_back(std::move(s));
        }
    }
    if (eval_in_path != nullptr && std::filesystem::exists(*eval_in_path)) {
        split.eval_in = detail::read_sample_csv(*eval_in_path, true);
    }
    if (eval_out_path != nullptr && std::filesystem::exists(*eval_out_path)) {
        split.eval_out = detail::read_sample_csv(*eval_out_path, false);
        auto latent_path = *eval_out_path;
        latent_path.replace_extension(".latent.csv");
        detail::apply_latent_csv(latent_path, split.eval_out, "eo");
    }
    split.rebuild_categories();
    split.validate();
    return split;
}

inline DatasetSplit load_dataset_dir(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::set<std::string> label_space;
    const std::set<std::string>* label_space_ptr = nullptr;
    if (std::filesystem::exists(manifest_path)) {
        std::ifstream in(manifest_path);
        nlohmann::json m = nlohmann::json::parse(in);
        for (const auto& name : m.at("in_label_space")) label_space.insert(name.get<std::string>());
        label_space_ptr = &label_space;
    }
    const auto eval_in = dir / "eval_in.csv";
    const auto eval_out = dir / "eval_out.csv";
    return load_dataset(dir / "tree.nwk", dir / "labeled.csv", dir / "unlabeled.csv",
                        label_space_ptr, &eval_in, &eval_out);
}

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

struct Batch {
    std::vector<const Sample*> labeled;
    std::vector<const Sample*> unlabeled;
};

// N labeled plus mu*N unlabeled without replacement. The unlabeled pool is
// U_in together with U_out unless `in_only` restricts it; an empty pool
// degrades the batch to labeled-only.
inline Batch sample_batch(const DatasetSplit& split, int n, int mu, Rng& rng, bool in_only = false) {
    if (n < 2) throw ValidationError("sample_batch: N must be >= 2");
    if (mu < 1) throw ValidationError("sample_batch: mu must be >= 1");
    if (n > static_cast<int>(split.labeled.size())) {
        throw ValidationError("sample_batch: N exceeds labeled pool");
    }
    Batch batch;
    for (std::size_t idx : rng.sample_without_replacement(split.labeled.size(), static_cast<std::size_t>(n))) {
        batch.labeled.push_back(&split.labeled[idx]);
    }
    const std::size_t in_size = split.unlabeled_in.size();
    const std::size_t pool_size = in_size + (in_only ? 0 : split.unlabeled_out.size());
    if (pool_size == 0) return batch;
    const std::size_t want = static_cast<std::size_t>(mu) * static_cast<std::size_t>(n);
    if (want > pool_size) {
        throw ValidationError("sample_batch: unlabeled pool smaller than mu*N");
    }
    for (std::size_t idx : rng.sample_without_replacement(pool_size, want)) {
        batch.unlabeled.push_back(idx < in_size ? &split.unlabeled_in[idx]
                                                : &split.unlabeled_out[idx - in_size]);
    }
    return batch;
}

// Protocol split for pseudo-label quality measurement: keep every other
// in-distribution species as the new label space and treat the dropped half
// as out-of-distribution. Eval pools are re-partitioned the same way.
inline DatasetSplit repartition_half_label_space(const DatasetSplit& split) {
    std::vector<std::string> id_species;
    for (const std::string& name : split.tree.species_names()) {
        if (split.in_label_space.count(name) > 0) id_species.push_back(name);
    }
    if (id_species.size() < 4) throw ValidationError("label space too small to halve");
    std::set<std::string> kept;
    for (std::size_t i = 0; i < id_species.size(); i += 2) kept.insert(id_species[i]);

    DatasetSplit out;
    out.tree = split.tree;
    out.in_label_space = kept;
    for (const Sample& s : split.labeled) {
        if (kept.count(*s.species) > 0) out.labeled.push_back(s);
    }
    const auto to_unlabeled = [](Sample s) {
        s.species.reset();
        return s;
    };
    for (const Sample& s : split.unlabeled_in) {
        if (s.latent_species.empty() || kept.count(s.latent_species) > 0) {
            out.unlabeled_in.push_back(s);
        } else {
            out.unlabeled_out.push_back(s);
        }
    }
    for (const Sample& s : split.unlabeled_out) out.unlabeled_out.push_back(s);
    for (const Sample& s : split.eval_in) {
        if (kept.count(*s.species) > 0) {
            out.eval_in.push_back(s);
        } else {
            out.eval_out.push_back(to_unlabeled(s));
        }
    }
    out.rebuild_categories();
    out.validate();
    return out;
}

}  // namespace relmatch
