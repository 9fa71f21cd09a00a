#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "relmatch/data.hpp"
#include "relmatch/losses.hpp"
#include "relmatch/model.hpp"
#include "relmatch/training.hpp"

namespace relmatch {

// Fraction of samples whose true category appears among the k most probable
// predictions. Ties are broken toward the smaller category index.
inline double topk_accuracy(const ModelParams& params, const std::vector<Sample>& samples,
                            const DatasetSplit& data, int k) {
    const int c = static_cast<int>(data.categories.size());
    if (k < 1 || k > c) throw ValidationError("topk_accuracy: k outside [1, C]");
    if (samples.empty()) throw ValidationError("topk_accuracy: empty sample set");
    long hits = 0;
    std::vector<int> order(static_cast<std::size_t>(c));
    for (const Sample& s : samples) {
        if (!s.species.has_value()) throw ValidationError("topk_accuracy: unlabeled sample");
        const int truth = data.category_index(*s.species);
        const Vec p = category_forward(params, s.features);
        for (int i = 0; i < c; ++i) order[static_cast<std::size_t>(i)] = i;
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)];
        });
        for (int i = 0; i < k; ++i) {
            if (order[static_cast<std::size_t>(i)] == truth) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Prediction dispersion
// ---------------------------------------------------------------------------

using SampleGroups = std::map<std::string, std::vector<const Sample*>>;

inline SampleGroups group_by_latent_species(const std::vector<Sample>& pool) {
    SampleGroups groups;
    for (const Sample& s : pool) {
        if (!s.latent_species.empty()) groups[s.latent_species].push_back(&s);
    }
    return groups;
}

// Group by the ancestor at `depth` (e.g. R-2 for the genus level).
inline SampleGroups group_by_latent_ancestor(const std::vector<Sample>& pool,
                                             const TaxonomyTree& tree, int depth) {
    SampleGroups groups;
    for (const Sample& s : pool) {
        if (s.latent_species.empty()) continue;
        int node = tree.leaf_id(s.latent_species);
        while (tree.node(node).depth > depth) node = tree.node(node).parent;
        groups["d" + std::to_string(depth) + "_" + std::to_string(node)].push_back(&s);
    }
    return groups;
}

// Mean over groups of the mean KL divergence from each member's prediction
// to the group's mean prediction. High values mean the model scatters its
// predictions across a group that should look alike. Groups with fewer than
// two samples are skipped.
inline double kl_dispersion(const ModelParams& params, const SampleGroups& groups,
                            long* skipped_groups = nullptr) {
    double total = 0.0;
    long used = 0;
    long skipped = 0;
    for (const auto& [name, members] : groups) {
        if (members.size() < 2) {
            ++skipped;
            continue;
        }
        std::vector<Vec> preds;
        preds.reserve(members.size());
        Vec center(static_cast<std::size_t>(params.shape.categories), 0.0);
        for (const Sample* s : members) {
            preds.push_back(category_forward(params, s->features));
            for (std::size_t i = 0; i < center.size(); ++i) center[i] += preds.back()[i];
        }
        for (double& v : center) v /= static_cast<double>(members.size());
        double group_kl = 0.0;
        for (const Vec& p : preds) {
            double kl = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) {
                if (p[i] <= 0.0) continue;
                kl += p[i] * (safe_log(p[i]) - safe_log(center[i]));
            }
            group_kl += kl;
        }
        total += group_kl / static_cast<double>(members.size());
        ++used;
    }
    if (skipped_groups != nullptr) *skipped_groups = skipped;
    if (used == 0) return 0.0;
    return total / static_cast<double>(used);
}

// ---------------------------------------------------------------------------
// Pseudo-label quality
// ---------------------------------------------------------------------------

struct QualityCell {
    std::optional<double> accuracy;  // exact relation match; empty when nothing was selected
    std::optional<double> within_one;  // |predicted - true| <= 1
    long count = 0;

    nlohmann::json to_json() const {
        nlohmann::json out;
        out["count"] = count;
        if (accuracy.has_value()) out["accuracy"] = *accuracy; else out["accuracy"] = nullptr;
        if (within_one.has_value()) out["within_one"] = *within_one; else out["within_one"] = nullptr;
        return out;
    }
};

struct QualityRow {
    QualityCell id;
    QualityCell ood;

    nlohmann::json to_json() const {
        return nlohmann::json{{"id", id.to_json()}, {"ood", ood.to_json()}};
    }
};

struct QualityTable {
    QualityRow u_vs_u_prediction;
    QualityRow x_vs_u_prediction;
    QualityRow x_vs_u_transfer;

    nlohmann::json to_json() const {
        return nlohmann::json{{"u_vs_u_prediction", u_vs_u_prediction.to_json()},
                              {"x_vs_u_prediction", x_vs_u_prediction.to_json()},
                              {"x_vs_u_transfer", x_vs_u_transfer.to_json()}};
    }
};

struct QualityLimits {
    long long max_pairs = 200000;    // per strategy and pool; sampled beyond this
    long long max_triples = 300000;  // label-transfer triples per pool
};

// Measures how often each pseudo-labeling strategy produces the true
// relation, judged against the generator's latent species. Rows:
//   - u_vs_u_prediction: argmax relation predicted between two pool samples;
//   - x_vs_u_prediction: argmax relation predicted between a pool sample and
//     a labeled reference;
//   - x_vs_u_transfer: the label-transfer rule; only gate-selected triples
//     count, and an empty selection leaves the cell undefined.
inline QualityTable pseudo_label_quality(const ModelParams& params, const TaxonomyTree& tree,
                                         const PseudoLabelConfig& cfg,
                                         const std::vector<Sample>& id_pool,
                                         const std::vector<Sample>& ood_pool,
                                         const std::vector<Sample>& labeled_reference,
                                         Rng& rng, const QualityLimits& limits = {}) {
    const int c = params.shape.categories;
    const int r = params.shape.relations;

    struct Tally {
        long selected = 0;
        long exact = 0;
        long close = 0;
        void add(int produced, int truth) {
            ++selected;
            if (produced == truth) ++exact;
            if (std::abs(produced - truth) <= 1) ++close;
        }
        QualityCell cell() const {
            QualityCell out;
            out.count = selected;
            if (selected > 0) {
                out.accuracy = static_cast<double>(exact) / static_cast<double>(selected);
                out.within_one = static_cast<double>(close) / static_cast<double>(selected);
            }
            return out;
        }
    };

    const auto evaluate_pool = [&](const std::vector<Sample>& pool, Tally& uu, Tally& xu,
                                   Tally& transfer) {
        if (pool.empty() || labeled_reference.empty()) return;
        std::vector<Vec> pool_p;
        pool_p.reserve(pool.size());
        std::vector<int> pool_leaf;
        for (const Sample& s : pool) {
            pool_p.push_back(category_forward(params, s.features));
            pool_leaf.push_back(tree.leaf_id(s.latent_species));
        }
        std::vector<Vec> ref_p;
        std::vector<int> ref_leaf;
        for (const Sample& s : labeled_reference) {
            ref_p.push_back(category_forward(params, s.features));
            ref_leaf.push_back(tree.leaf_id(*s.species));
        }
        std::vector<const Vec*> all;
        for (const Vec& p : pool_p) all.push_back(&p);
        for (const Vec& p : ref_p) all.push_back(&p);
        ModelShape shape;
        shape.categories = c;
        shape.relations = r;
        RelationBatchCache cache(params.wt, shape, std::move(all));
        const int np = static_cast<int>(pool.size());
        const int nx = static_cast<int>(labeled_reference.size());

        // Pool versus pool.
        {
            const long long total = static_cast<long long>(np) * (np - 1);
            if (total <= limits.max_pairs) {
                for (int i = 0; i < np; ++i)
                    for (int j = 0; j < np; ++j) {
                        if (i == j) continue;
                        const int produced = argmax(cache.probs(i, j));
                        uu.add(produced, tree.relation_between_leaves(pool_leaf[static_cast<std::size_t>(i)],
                                                                      pool_leaf[static_cast<std::size_t>(j)]));
                    }
            } else {
                for (long long s = 0; s < limits.max_pairs; ++s) {
                    const int i = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(np)));
                    int j = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(np)));
                    while (j == i) j = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(np)));
                    const int produced = argmax(cache.probs(i, j));
                    uu.add(produced, tree.relation_between_leaves(pool_leaf[static_cast<std::size_t>(i)],
                                                                  pool_leaf[static_cast<std::size_t>(j)]));
                }
            }
        }

        // Pool versus labeled references: the relation distributions and
        // expectations feed both the direct prediction row and the gates.
        std::vector<double> expect(static_cast<std::size_t>(np) * static_cast<std::size_t>(nx), 0.0);
        std::vector<int> predicted(expect.size(), 0);
        for (int u = 0; u < np; ++u) {
            for (int a = 0; a < nx; ++a) {
                const Vec probs = cache.probs(u, np + a);
                const std::size_t idx =
                    static_cast<std::size_t>(u) * static_cast<std::size_t>(nx) + static_cast<std::size_t>(a);
                expect[idx] = relation_expectation(probs);
                predicted[idx] = argmax(probs);
                xu.add(predicted[idx], tree.relation_between_leaves(pool_leaf[static_cast<std::size_t>(u)],
                                                                    ref_leaf[static_cast<std::size_t>(a)]));
            }
        }

        // Label transfer triples (u, a, b).
        const long long total_triples = static_cast<long long>(np) * nx * (nx - 1);
        const auto consider = [&](int u, int a, int b) {
            const std::size_t ua = static_cast<std::size_t>(u) * static_cast<std::size_t>(nx) +
                                   static_cast<std::size_t>(a);
            const std::size_t ub = static_cast<std::size_t>(u) * static_cast<std::size_t>(nx) +
                                   static_cast<std::size_t>(b);
            if (expect[ua] - expect[ub] < cfg.expectation_margin) return;
            const int produced = tree.relation_between_leaves(ref_leaf[static_cast<std::size_t>(a)],
                                                              ref_leaf[static_cast<std::size_t>(b)]);
            const int truth = tree.relation_between_leaves(pool_leaf[static_cast<std::size_t>(u)],
                                                           ref_leaf[static_cast<std::size_t>(b)]);
            transfer.add(produced, truth);
        };
        if (total_triples <= limits.max_triples) {
            for (int u = 0; u < np; ++u)
                for (int a = 0; a < nx; ++a)
                    for (int b = 0; b < nx; ++b) {
                        if (a == b) continue;
                        consider(u, a, b);
                    }
        } else {
            for (long long s = 0; s < limits.max_triples; ++s) {
                const int u = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(np)));
                const int a = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(nx)));
                int b = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(nx)));
                while (b == a) b = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(nx)));
                consider(u, a, b);
            }
        }
    };

    QualityTable table;
    Tally uu_id, xu_id, tr_id, uu_ood, xu_ood, tr_ood;
    evaluate_pool(id_pool, uu_id, xu_id, tr_id);
    evaluate_pool(ood_pool, uu_ood, xu_ood, tr_ood);
    table.u_vs_u_prediction = {uu_id.cell(), uu_ood.cell()};
    table.x_vs_u_prediction = {xu_id.cell(), xu_ood.cell()};
    table.x_vs_u_transfer = {tr_id.cell(), tr_ood.cell()};
    return table;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct EvalReport {
    double top1 = 0.0;
    double top5 = 0.0;
    double kl_dispersion_id = 0.0;
    double kl_dispersion_ood = 0.0;
    double kl_dispersion_id_genus = 0.0;
    double kl_dispersion_ood_genus = 0.0;
    QualityTable quality;
    long eval_in_count = 0;
    long eval_out_count = 0;

    nlohmann::json to_json() const {
        return nlohmann::json{{"top1", top1},
                              {"top5", top5},
                              {"kl_dispersion_id", kl_dispersion_id},
                              {"kl_dispersion_ood", kl_dispersion_ood},
                              {"kl_dispersion_id_genus", kl_dispersion_id_genus},
                              {"kl_dispersion_ood_genus", kl_dispersion_ood_genus},
                              {"pseudo_label_quality", quality.to_json()},
                              {"eval_in_count", eval_in_count},
                              {"eval_out_count", eval_out_count}};
    }

    void validate() const {
        if (!(top1 >= 0.0 && top1 <= 1.0 && top5 >= 0.0 && top5 <= 1.0)) {
            throw ValidationError("eval report: accuracy outside [0,1]");
        }
        if (top5 < top1) throw ValidationError("eval report: top5 < top1");
        if (kl_dispersion_id < 0.0 || kl_dispersion_ood < 0.0) {
            throw ValidationError("eval report: negative dispersion");
        }
    }
};

// Full evaluation of a trained model against a dataset's natural pools:
// held-out ID samples for accuracy, ID/OOD pools for dispersion and
// pseudo-label quality.
inline EvalReport evaluate_model(const ModelParams& params, const DatasetSplit& data,
                                 const PseudoLabelConfig& cfg, Rng& rng,
                                 const QualityLimits& limits = {}) {
    if (data.eval_in.empty()) throw ValidationError("evaluate_model: dataset has no eval_in pool");
    EvalReport report;
    const int c = static_cast<int>(data.categories.size());
    report.top1 = topk_accuracy(params, data.eval_in, data, 1);
    report.top5 = topk_accuracy(params, data.eval_in, data, std::min(5, c));
    report.eval_in_count = static_cast<long>(data.eval_in.size());
    report.eval_out_count = static_cast<long>(data.eval_out.size());

    report.kl_dispersion_id = kl_dispersion(params, group_by_latent_species(data.eval_in));
    if (!data.eval_out.empty()) {
        report.kl_dispersion_ood = kl_dispersion(params, group_by_latent_species(data.eval_out));
    }
    const int genus_depth = std::max(0, data.tree.num_levels() - 2);
    report.kl_dispersion_id_genus =
        kl_dispersion(params, group_by_latent_ancestor(data.eval_in, data.tree, genus_depth));
    if (!data.eval_out.empty()) {
        report.kl_dispersion_ood_genus =
            kl_dispersion(params, group_by_latent_ancestor(data.eval_out, data.tree, genus_depth));
    }
    report.quality = pseudo_label_quality(params, data.tree, cfg, data.eval_in, data.eval_out,
                                          data.labeled, rng, limits);
    report.validate();
    return report;
}

// Writes report.json plus a plot-ready CSV of logged (step, top1) points.
inline void emit_report(const EvalReport& report, const std::filesystem::path& dir,
                        const std::vector<std::pair<long, double>>& accuracy_series = {}) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "report.json");
        if (!out) throw IoError("cannot write " + (dir / "report.json").string());
        out << report.to_json().dump(2) << "\n";
    }
    {
        std::ofstream out(dir / "accuracy_series.csv");
        if (!out) throw IoError("cannot write " + (dir / "accuracy_series.csv").string());
        out << "step,top1\n";
        for (const auto& [step, top1] : accuracy_series) {
            out << step << ',' << detail::format_double(top1) << "\n";
        }
    }
}

// ---------------------------------------------------------------------------
// Halved-label-space quality protocol: split the labeled categories in two,
// train on one half, measure pseudo-label quality with the dropped half as
// the out-of-distribution pool.
// ---------------------------------------------------------------------------

inline QualityTable run_quality_protocol(const DatasetSplit& full, const TrainConfig& base_cfg,
                                         std::uint64_t seed, const QualityLimits& limits = {}) {
    DatasetSplit protocol = repartition_half_label_space(full);
    TrainConfig cfg = base_cfg;
    cfg.seed = seed;
    Trainer trainer(cfg, protocol);
    const Checkpoint ck = trainer.run();
    Rng rng(seed ^ 0x5eed5eedULL);
    return pseudo_label_quality(ck.params, trainer.tree(), cfg.pseudo, protocol.eval_in,
                                protocol.eval_out, protocol.labeled, rng, limits);
}

}  // namespace relmatch
