#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "relmatch/data.hpp"
#include "relmatch/losses.hpp"
#include "relmatch/model.hpp"

namespace relmatch {

enum class Variant { baseline_supervised, relation_pl, triplet_cr, label_transfer };

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::baseline_supervised: return "baseline_supervised";
        case Variant::relation_pl: return "relation_pl";
        case Variant::triplet_cr: return "triplet_cr";
        case Variant::label_transfer: return "label_transfer";
    }
    throw ValidationError("bad variant");
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "baseline_supervised") return Variant::baseline_supervised;
    if (s == "relation_pl") return Variant::relation_pl;
    if (s == "triplet_cr") return Variant::triplet_cr;
    if (s == "label_transfer") return Variant::label_transfer;
    throw ConfigError("unknown variant \"" + s + "\" (expected baseline_supervised, relation_pl, "
                      "triplet_cr or label_transfer)");
}

// Which parameters each loss updates. `split` keeps the published
// assignment: the supervised relation loss shapes only the transfer tensor,
// the unlabeled loss shapes only the extractor and category head. `all`
// lets every loss update everything.
enum class LossRouting { split, all };

inline std::string to_string(LossRouting r) {
    return r == LossRouting::split ? "split" : "all";
}

inline LossRouting routing_from_string(const std::string& s) {
    if (s == "split") return LossRouting::split;
    if (s == "all") return LossRouting::all;
    throw ConfigError("unknown loss_routing \"" + s + "\" (expected split or all)");
}

struct TrainConfig {
    Variant variant = Variant::label_transfer;
    long total_steps = 5000;
    double base_lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int batch_labeled = 32;  // N; each step also draws mu*N unlabeled samples
    int mu = 4;
    PseudoLabelConfig pseudo;
    long triplet_sample_count = 4096;
    long transfer_enumeration_cap = 1L << 18;
    bool transfer_gate_uses_ground_truth = false;
    int tree_depth = 0;  // 0 keeps the full tree; otherwise truncate to this many levels
    LossRouting routing = LossRouting::split;
    long warmup_steps = 0;  // unlabeled losses start after this many steps
    // Learning-rate multiplier for the transfer tensor. The outer product
    // spreads each pair's gradient over C*C cells, so at a few hundred steps
    // the tensor would stay flat where the reference schedule gives it 100k
    // iterations; the multiplier compresses that schedule to desk scale.
    double relation_lr_scale = 50.0;
    int hidden_dim = 64;
    int feat_dim = 64;
    std::uint64_t seed = 1;
    long checkpoint_every = 0;  // 0 = final checkpoint only
    bool unlabeled_in_only = false;  // restrict the unlabeled pool to U_in
    long eval_every = 0;  // 0 = no periodic held-out evaluation

    void validate() const {
        if (total_steps < 0) throw ConfigError("total_steps must be >= 0");
        if (!(base_lr > 0.0)) throw ConfigError("base_lr must be > 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0,1)");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
        if (batch_labeled < 2) throw ConfigError("batch_labeled must be >= 2");
        if (mu < 1) throw ConfigError("mu must be >= 1");
        if (hidden_dim < 1 || feat_dim < 1) throw ConfigError("layer widths must be >= 1");
        if (triplet_sample_count < 1) throw ConfigError("triplet_sample_count must be >= 1");
        if (transfer_enumeration_cap < 1) throw ConfigError("transfer_enumeration_cap must be >= 1");
        if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
        if (!(relation_lr_scale > 0.0)) throw ConfigError("relation_lr_scale must be > 0");
        if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
        if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
        if (tree_depth != 0 && tree_depth < 2) throw ConfigError("tree_depth must be 0 or >= 2");
        pseudo.validate();
    }

    nlohmann::json to_json() const {
        return nlohmann::json{
            {"variant", to_string(variant)},
            {"total_steps", total_steps},
            {"base_lr", base_lr},
            {"momentum", momentum},
            {"weight_decay", weight_decay},
            {"batch_labeled", batch_labeled},
            {"mu", mu},
            {"confidence_threshold", pseudo.confidence_threshold},
            {"expectation_margin", pseudo.expectation_margin},
            {"triplet_sample_count", triplet_sample_count},
            {"transfer_enumeration_cap", transfer_enumeration_cap},
            {"transfer_gate_uses_ground_truth", transfer_gate_uses_ground_truth},
            {"tree_depth", tree_depth},
            {"loss_routing", to_string(routing)},
            {"warmup_steps", warmup_steps},
            {"relation_lr_scale", relation_lr_scale},
            {"hidden_dim", hidden_dim},
            {"feat_dim", feat_dim},
            {"seed", seed},
            {"checkpoint_every", checkpoint_every},
            {"unlabeled_in_only", unlabeled_in_only},
            {"eval_every", eval_every}};
    }

    std::string hash() const;
};

inline std::string fnv1a_hex(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

inline std::string TrainConfig::hash() const { return fnv1a_hex(to_json().dump()); }

// ---------------------------------------------------------------------------
// One optimization step: forwards, losses, routed gradients
// ---------------------------------------------------------------------------

struct StepResult {
    LossReport report;
    GradientSet grads;
};

// Evaluates L_c + L_r + L_u for one batch and accumulates gradients
// according to the routing. `unlabeled_enabled` implements the warm-up
// window; `freeze` replays a captured selection set instead of re-gating.
inline StepResult compute_step_losses(const ModelParams& params, const Batch& batch,
                                      const DatasetSplit& data, const TaxonomyTree& tree,
                                      const Vec& weights, const TrainConfig& cfg,
                                      bool unlabeled_enabled, Rng& rng,
                                      FrozenSelections* freeze = nullptr, bool want_grads = true) {
    const int n = static_cast<int>(batch.labeled.size());
    const int m = static_cast<int>(batch.unlabeled.size());
    const ModelShape& shape = params.shape;
    const bool relational = cfg.variant != Variant::baseline_supervised;

    StepResult result;
    result.grads = GradientSet::zeros(shape);

    std::vector<SampleForward> forwards;
    forwards.reserve(static_cast<std::size_t>(n + (relational ? m : 0)));
    std::vector<int> labels(static_cast<std::size_t>(n));
    std::vector<int> leaf_ids(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const Sample& s = *batch.labeled[static_cast<std::size_t>(i)];
        forwards.push_back(category_forward_cached(params, s.features));
        labels[static_cast<std::size_t>(i)] = data.category_index(*s.species);
        leaf_ids[static_cast<std::size_t>(i)] = tree.leaf_id(*s.species);
    }
    if (relational) {
        for (int j = 0; j < m; ++j) {
            forwards.push_back(category_forward_cached(params, batch.unlabeled[static_cast<std::size_t>(j)]->features));
        }
    }

    // Per-sample gradient sinks: direct logit gradients (category CE) and
    // softmax-output gradients (relation head terms).
    std::vector<Vec> dlogits_direct;
    std::vector<Vec> dp;
    if (want_grads) {
        dlogits_direct.assign(forwards.size(), Vec());
        dp.assign(forwards.size(), Vec(static_cast<std::size_t>(shape.categories), 0.0));
    }

    // Supervised category loss: mean cross-entropy over the labeled batch.
    double l_c = 0.0;
    const double log_floor = std::log(kProbFloor);
    for (int i = 0; i < n; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        const double logp = forwards[static_cast<std::size_t>(i)].logp[static_cast<std::size_t>(y)];
        l_c += -std::max(logp, log_floor);
        if (want_grads && logp >= log_floor) {
            Vec d = forwards[static_cast<std::size_t>(i)].p;
            d[static_cast<std::size_t>(y)] -= 1.0;
            for (double& v : d) v /= static_cast<double>(n);
            dlogits_direct[static_cast<std::size_t>(i)] = std::move(d);
        }
    }
    l_c /= static_cast<double>(n);

    double l_r = 0.0;
    double l_u = 0.0;
    PairLossOutcome pseudo_outcome;
    PairLossOutcome triple_outcome;

    if (relational) {
        std::vector<const Vec*> distributions;
        distributions.reserve(forwards.size());
        for (const SampleForward& f : forwards) distributions.push_back(&f.p);
        RelationBatchCache cache(params.wt, shape, std::move(distributions));

        const bool l_r_into_p = cfg.routing == LossRouting::all;
        const bool l_u_into_wt = cfg.routing == LossRouting::all;

        // Supervised relation loss: the labeled batch zipped with its own
        // reverse. When N is odd the middle element pairs with itself and
        // realizes the same-species relation.
        std::vector<SupervisedPair> pairs;
        pairs.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const int j = n - 1 - i;
            pairs.push_back({i, j,
                             tree.relation_between_leaves(leaf_ids[static_cast<std::size_t>(i)],
                                                          leaf_ids[static_cast<std::size_t>(j)])});
        }
        l_r = supervised_relation_step(cache, pairs, weights,
                                       want_grads && l_r_into_p ? &dp : nullptr,
                                       want_grads ? &result.grads.wt : nullptr)
                  .loss;

        if (unlabeled_enabled && m > 0) {
            std::vector<Vec>* dp_sink = want_grads ? &dp : nullptr;
            Vec* dwt_sink = want_grads && l_u_into_wt ? &result.grads.wt : nullptr;
            switch (cfg.variant) {
                case Variant::relation_pl:
                    pseudo_outcome = relation_pseudo_label_step(cache, n, m, cfg.pseudo, weights,
                                                                dp_sink, dwt_sink, freeze);
                    l_u = pseudo_outcome.loss;
                    break;
                case Variant::triplet_cr:
                    triple_outcome = triplet_consistency_step(cache, n, m, cfg.triplet_sample_count,
                                                              weights, rng, dp_sink, dwt_sink, freeze);
                    l_u = triple_outcome.loss;
                    break;
                case Variant::label_transfer: {
                    std::vector<int> labeled_relation(static_cast<std::size_t>(n) * static_cast<std::size_t>(n));
                    for (int a = 0; a < n; ++a)
                        for (int b = 0; b < n; ++b) {
                            labeled_relation[static_cast<std::size_t>(a) * static_cast<std::size_t>(n) +
                                             static_cast<std::size_t>(b)] =
                                tree.relation_between_leaves(leaf_ids[static_cast<std::size_t>(a)],
                                                             leaf_ids[static_cast<std::size_t>(b)]);
                        }
                    triple_outcome = label_transfer_step(cache, n, m, n, labeled_relation, cfg.pseudo,
                                                         weights, cfg.transfer_enumeration_cap,
                                                         cfg.transfer_gate_uses_ground_truth, rng,
                                                         dp_sink, dwt_sink, freeze);
                    l_u = triple_outcome.loss;
                    break;
                }
                default:
                    break;
            }
        }
    }

    result.report = total_loss(l_c, l_r, l_u);
    result.report.selected_pair_count = pseudo_outcome.selected;
    result.report.selected_triplet_count = triple_outcome.selected;
    result.report.selection_histogram.assign(weights.size(), 0);
    const PairLossOutcome& active =
        cfg.variant == Variant::relation_pl ? pseudo_outcome : triple_outcome;
    if (!active.histogram.empty()) result.report.selection_histogram = active.histogram;
    result.report.transfer_warning = triple_outcome.warning;

    if (want_grads) {
        for (std::size_t i = 0; i < forwards.size(); ++i) {
            const bool has_direct = !dlogits_direct[i].empty();
            bool has_dp = false;
            for (double v : dp[i]) {
                if (v != 0.0) {
                    has_dp = true;
                    break;
                }
            }
            if (!has_direct && !has_dp) continue;
            accumulate_category_backward(params, forwards[i],
                                         has_direct ? &dlogits_direct[i] : nullptr,
                                         has_dp ? &dp[i] : nullptr, result.grads);
        }
        result.grads.check_finite("compute_step_losses");
    }
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
    ModelParams params;
    GradientSet velocity;
    long step = 0;
    Rng::State rng_state{};
    std::string config_hash;

    nlohmann::json to_json() const {
        const auto arrays_to_json = [](const ParameterArrays& a) {
            nlohmann::json out;
            a.for_each_array([&](const char* name, const Vec& v) { out[name] = v; });
            return out;
        };
        nlohmann::json shape{{"d_in", params.shape.d_in},
                             {"hidden", params.shape.hidden},
                             {"d_feat", params.shape.d_feat},
                             {"categories", params.shape.categories},
                             {"relations", params.shape.relations}};
        std::vector<std::string> rng_words;
        for (std::uint64_t w : rng_state) {
            char buf[17];
            std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(w));
            rng_words.emplace_back(buf);
        }
        return nlohmann::json{{"format_version", 1},
                              {"config_hash", config_hash},
                              {"step", step},
                              {"rng_state", rng_words},
                              {"shape", shape},
                              {"params", arrays_to_json(params)},
                              {"velocity", arrays_to_json(velocity)}};
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw IoError("cannot write checkpoint " + path.string());
        out << to_json().dump() << "\n";
    }

    static Checkpoint load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot read checkpoint " + path.string());
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("corrupt checkpoint " + path.string() + ": " + e.what(), 0);
        }
        try {
            Checkpoint ck;
            const auto& shape = j.at("shape");
            ModelShape s;
            s.d_in = shape.at("d_in").get<int>();
            s.hidden = shape.at("hidden").get<int>();
            s.d_feat = shape.at("d_feat").get<int>();
            s.categories = shape.at("categories").get<int>();
            s.relations = shape.at("relations").get<int>();
            ck.params.allocate(s);
            ck.velocity.allocate(s);
            const auto arrays_from_json = [](const nlohmann::json& src, ParameterArrays& dst) {
                dst.for_each_array([&](const char* name, Vec& v) {
                    const auto& arr = src.at(name);
                    if (arr.size() != v.size()) {
                        throw ValidationError(std::string("checkpoint array ") + name + " has wrong size");
                    }
                    v = arr.get<Vec>();
                });
            };
            arrays_from_json(j.at("params"), ck.params);
            arrays_from_json(j.at("velocity"), ck.velocity);
            ck.step = j.at("step").get<long>();
            ck.config_hash = j.at("config_hash").get<std::string>();
            const auto& rng_words = j.at("rng_state");
            if (rng_words.size() != 4) throw ValidationError("checkpoint rng_state must have 4 words");
            for (std::size_t i = 0; i < 4; ++i) {
                ck.rng_state[i] = std::stoull(rng_words[i].get<std::string>(), nullptr, 16);
            }
            return ck;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("corrupt checkpoint " + path.string() + ": " + e.what(), 0);
        }
    }
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainSinks {
    std::ostream* metrics = nullptr;                 // JSON lines, one per step
    const std::filesystem::path* out_dir = nullptr;  // periodic checkpoints + diagnostics
    std::vector<std::pair<long, double>>* eval_series = nullptr;  // (step, eval_fn result)
    std::function<double(const ModelParams&)> eval_fn;  // periodic held-out metric
};

namespace detail {

inline void dump_diagnostic(const std::filesystem::path& dir, long step, const Batch& batch,
                            const std::string& what) {
    nlohmann::json dump;
    dump["step"] = step;
    dump["error"] = what;
    auto pool = nlohmann::json::array();
    for (const Sample* s : batch.labeled) {
        pool.push_back({{"species", s->species.value_or("")}, {"features", s->features}});
    }
    dump["labeled"] = pool;
    auto upool = nlohmann::json::array();
    for (const Sample* s : batch.unlabeled) upool.push_back({{"features", s->features}});
    dump["unlabeled"] = upool;
    std::ofstream out(dir / "diagnostic_dump.json");
    if (out) out << dump.dump(2) << "\n";
}

}  // namespace detail

class Trainer {
public:
    Trainer(TrainConfig cfg, const DatasetSplit& data) : cfg_(std::move(cfg)), data_(data) {
        cfg_.validate();
        tree_ = cfg_.tree_depth == 0 ? data_.tree : data_.tree.truncated(cfg_.tree_depth);
        weights_ = relation_weights(tree_, data_.labeled_histogram());
        shape_.d_in = data_.dimension();
        shape_.hidden = cfg_.hidden_dim;
        shape_.d_feat = cfg_.feat_dim;
        shape_.categories = static_cast<int>(data_.categories.size());
        shape_.relations = tree_.num_levels();
        shape_.validate();
    }

    const TaxonomyTree& tree() const { return tree_; }
    const RelationWeights& weights() const { return weights_; }
    const ModelShape& shape() const { return shape_; }

    Checkpoint run(const TrainSinks& sinks = {}) {
        Rng rng(cfg_.seed);
        Checkpoint ck;
        ck.params = ModelParams::initialized(shape_, rng);
        ck.velocity = GradientSet::zeros(shape_);
        ck.step = 0;
        ck.rng_state = rng.state();
        ck.config_hash = cfg_.hash();
        return continue_from(ck, sinks);
    }

    Checkpoint resume(const Checkpoint& ck, const TrainSinks& sinks = {}) {
        if (ck.config_hash != cfg_.hash()) {
            throw ConfigError("checkpoint config hash " + ck.config_hash +
                              " does not match supplied config " + cfg_.hash());
        }
        if (ck.params.shape != shape_) throw ValidationError("checkpoint shape mismatch");
        if (ck.step > cfg_.total_steps) throw ValidationError("checkpoint step beyond total_steps");
        return continue_from(ck, sinks);
    }

private:
    Checkpoint continue_from(Checkpoint state, const TrainSinks& sinks) {
        Rng rng(0);
        rng.set_state(state.rng_state);

        for (long step = state.step; step < cfg_.total_steps; ++step) {
            const double lr = cosine_lr(step, cfg_.total_steps, cfg_.base_lr);
            Batch batch;
            try {
                const bool need_unlabeled = cfg_.variant != Variant::baseline_supervised;
                batch.labeled.clear();
                if (need_unlabeled) {
                    batch = sample_batch(data_, cfg_.batch_labeled, cfg_.mu, rng, cfg_.unlabeled_in_only);
                } else {
                    for (std::size_t idx : rng.sample_without_replacement(
                             data_.labeled.size(), static_cast<std::size_t>(cfg_.batch_labeled))) {
                        batch.labeled.push_back(&data_.labeled[idx]);
                    }
                }
                const bool unlabeled_enabled = step >= cfg_.warmup_steps;
                StepResult step_result = compute_step_losses(state.params, batch, data_, tree_,
                                                             weights_.w, cfg_, unlabeled_enabled, rng);
                if (!std::isfinite(step_result.report.total)) {
                    throw RunError("non-finite loss at step " + std::to_string(step));
                }
                if (cfg_.relation_lr_scale != 1.0) {
                    for (double& g : step_result.grads.wt) g *= cfg_.relation_lr_scale;
                }
                sgd_momentum_step(state.params, step_result.grads, state.velocity, lr, cfg_.momentum,
                                  cfg_.weight_decay);

                if (sinks.metrics != nullptr) {
                    nlohmann::json line = step_result.report.to_json();
                    line["step"] = step;
                    line["lr"] = lr;
                    (*sinks.metrics) << line.dump() << "\n";
                }
            } catch (const RunError& e) {
                if (sinks.out_dir != nullptr) {
                    detail::dump_diagnostic(*sinks.out_dir, step, batch, e.what());
                }
                throw;
            }

            state.step = step + 1;
            state.rng_state = rng.state();
            if (sinks.out_dir != nullptr && cfg_.checkpoint_every > 0 &&
                state.step % cfg_.checkpoint_every == 0 && state.step < cfg_.total_steps) {
                state.save(*sinks.out_dir / ("checkpoint_step" + std::to_string(state.step) + ".json"));
            }
            if (sinks.eval_series != nullptr && sinks.eval_fn && cfg_.eval_every > 0 &&
                (state.step % cfg_.eval_every == 0 || state.step == cfg_.total_steps)) {
                sinks.eval_series->emplace_back(state.step, sinks.eval_fn(state.params));
            }
        }
        return state;
    }

    TrainConfig cfg_;
    const DatasetSplit& data_;
    TaxonomyTree tree_;
    RelationWeights weights_;
    ModelShape shape_;
};

inline Checkpoint train(const TrainConfig& cfg, const DatasetSplit& data, const TrainSinks& sinks = {}) {
    Trainer trainer(cfg, data);
    return trainer.run(sinks);
}

inline Checkpoint resume(const Checkpoint& ck, const TrainConfig& cfg, const DatasetSplit& data,
                         const TrainSinks& sinks = {}) {
    Trainer trainer(cfg, data);
    return trainer.resume(ck, sinks);
}

}  // namespace relmatch
