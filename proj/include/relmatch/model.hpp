#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "relmatch/errors.hpp"
#include "relmatch/rng.hpp"

namespace relmatch {

using Vec = std::vector<double>;

// Floor applied inside every log of a probability.
inline constexpr double kProbFloor = 1e-12;

inline double safe_log(double p) { return std::log(p < kProbFloor ? kProbFloor : p); }

inline bool all_finite(const Vec& v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

inline Vec log_softmax(const Vec& logits) {
    double max_logit = logits[0];
    for (double z : logits) max_logit = std::max(max_logit, z);
    double sum = 0.0;
    for (double z : logits) sum += std::exp(z - max_logit);
    const double lse = max_logit + std::log(sum);
    Vec out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

inline Vec softmax(const Vec& logits) {
    Vec out = log_softmax(logits);
    for (double& v : out) v = std::exp(v);
    return out;
}

inline int argmax(const Vec& v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i) {
        if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
    }
    return best;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct ModelShape {
    int d_in = 0;        // input feature dimension
    int hidden = 64;     // extractor hidden width
    int d_feat = 64;     // extractor output width
    int categories = 0;  // C
    int relations = 0;   // R

    bool operator==(const ModelShape&) const = default;

    void validate() const {
        if (d_in < 1 || hidden < 1 || d_feat < 1) throw ValidationError("model shape: non-positive layer width");
        if (categories < 2) throw ValidationError("model shape: need at least 2 categories");
        if (relations < 2) throw ValidationError("model shape: need at least 2 relation levels");
    }
};

// Dense parameter arrays. Layouts are row-major:
//   w1: hidden x d_in    w2: d_feat x hidden    wc: categories x d_feat
//   wt: categories x categories x relations, flattened a*(C*R) + b*R + n.
struct ParameterArrays {
    ModelShape shape;
    Vec w1, b1, w2, b2, wc, bc, wt;

    void allocate(const ModelShape& s) {
        shape = s;
        const std::size_t C = static_cast<std::size_t>(s.categories);
        const std::size_t R = static_cast<std::size_t>(s.relations);
        w1.assign(static_cast<std::size_t>(s.hidden) * static_cast<std::size_t>(s.d_in), 0.0);
        b1.assign(static_cast<std::size_t>(s.hidden), 0.0);
        w2.assign(static_cast<std::size_t>(s.d_feat) * static_cast<std::size_t>(s.hidden), 0.0);
        b2.assign(static_cast<std::size_t>(s.d_feat), 0.0);
        wc.assign(C * static_cast<std::size_t>(s.d_feat), 0.0);
        bc.assign(C, 0.0);
        wt.assign(C * C * R, 0.0);
    }

    template <class F>
    void for_each_array(F&& f) {
        f("w1", w1); f("b1", b1); f("w2", w2); f("b2", b2);
        f("wc", wc); f("bc", bc); f("wt", wt);
    }
    template <class F>
    void for_each_array(F&& f) const {
        f("w1", w1); f("b1", b1); f("w2", w2); f("b2", b2);
        f("wc", wc); f("bc", bc); f("wt", wt);
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for_each_array([&](const char*, const Vec& v) { n += v.size(); });
        return n;
    }

    void fill(double value) {
        for_each_array([&](const char*, Vec& v) { v.assign(v.size(), value); });
    }

    void check_finite(const std::string& where) const {
        bool ok = true;
        std::string bad;
        for_each_array([&](const char* name, const Vec& v) {
            if (ok && !all_finite(v)) {
                ok = false;
                bad = name;
            }
        });
        if (!ok) throw RunError(where + ": non-finite values in " + bad);
    }
};

struct GradientSet : ParameterArrays {
    static GradientSet zeros(const ModelShape& s) {
        GradientSet g;
        g.allocate(s);
        return g;
    }
};

struct ModelParams : ParameterArrays {
    // Extractor and category head get fan-in scaled uniform init; the
    // relation transfer tensor starts at zero so relation predictions open
    // uniform and the pseudo-label gates stay closed until the supervised
    // relation loss has shaped them.
    static ModelParams initialized(const ModelShape& s, Rng& rng) {
        s.validate();
        ModelParams p;
        p.allocate(s);
        const auto fill_fan_in = [&](Vec& w, int fan_in) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (double& x : w) x = rng.uniform(-bound, bound);
        };
        fill_fan_in(p.w1, s.d_in);
        fill_fan_in(p.w2, s.hidden);
        fill_fan_in(p.wc, s.d_feat);
        return p;
    }
};

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

// Cached per-sample forward state, enough to replay the backward pass.
struct SampleForward {
    Vec x;        // input
    Vec hidden;   // tanh(w1 x + b1)
    Vec feat;     // w2 hidden + b2
    Vec logits;   // wc feat + bc
    Vec logp;     // log softmax
    Vec p;        // softmax
};

inline SampleForward category_forward_cached(const ModelParams& params, const Vec& x) {
    const ModelShape& s = params.shape;
    if (static_cast<int>(x.size()) != s.d_in) {
        throw ValidationError("category_forward: input dimension " + std::to_string(x.size()) +
                              " != " + std::to_string(s.d_in));
    }
    SampleForward f;
    f.x = x;
    f.hidden.assign(static_cast<std::size_t>(s.hidden), 0.0);
    for (int h = 0; h < s.hidden; ++h) {
        double acc = params.b1[static_cast<std::size_t>(h)];
        const double* row = params.w1.data() + static_cast<std::size_t>(h) * static_cast<std::size_t>(s.d_in);
        for (int i = 0; i < s.d_in; ++i) acc += row[i] * x[static_cast<std::size_t>(i)];
        f.hidden[static_cast<std::size_t>(h)] = std::tanh(acc);
    }
    f.feat.assign(static_cast<std::size_t>(s.d_feat), 0.0);
    for (int k = 0; k < s.d_feat; ++k) {
        double acc = params.b2[static_cast<std::size_t>(k)];
        const double* row = params.w2.data() + static_cast<std::size_t>(k) * static_cast<std::size_t>(s.hidden);
        for (int h = 0; h < s.hidden; ++h) acc += row[h] * f.hidden[static_cast<std::size_t>(h)];
        f.feat[static_cast<std::size_t>(k)] = acc;
    }
    f.logits.assign(static_cast<std::size_t>(s.categories), 0.0);
    for (int c = 0; c < s.categories; ++c) {
        double acc = params.bc[static_cast<std::size_t>(c)];
        const double* row = params.wc.data() + static_cast<std::size_t>(c) * static_cast<std::size_t>(s.d_feat);
        for (int k = 0; k < s.d_feat; ++k) acc += row[k] * f.feat[static_cast<std::size_t>(k)];
        f.logits[static_cast<std::size_t>(c)] = acc;
    }
    if (!all_finite(f.logits)) throw RunError("category_forward: non-finite logits");
    f.logp = log_softmax(f.logits);
    f.p.resize(f.logp.size());
    for (std::size_t i = 0; i < f.logp.size(); ++i) f.p[i] = std::exp(f.logp[i]);
    return f;
}

// Category prediction probabilities only.
inline Vec category_forward(const ModelParams& params, const Vec& x) {
    return category_forward_cached(params, x).p;
}

// Relation head: correlate two category distributions through the transfer
// tensor. logits[n] = sum_{a,b} p_left[a] * p_right[b] * wt[a,b,n]. The head
// is order-sensitive; callers fix the orientation.
inline Vec relation_logits(const Vec& p_left, const Vec& p_right, const Vec& wt, int C, int R) {
    if (static_cast<int>(p_left.size()) != C || static_cast<int>(p_right.size()) != C) {
        throw ValidationError("relation_logits: distribution size mismatch");
    }
    if (wt.size() != static_cast<std::size_t>(C) * static_cast<std::size_t>(C) * static_cast<std::size_t>(R)) {
        throw ValidationError("relation_logits: transfer tensor size mismatch");
    }
    Vec logits(static_cast<std::size_t>(R), 0.0);
    for (int a = 0; a < C; ++a) {
        const double pa = p_left[static_cast<std::size_t>(a)];
        if (pa == 0.0) continue;
        for (int b = 0; b < C; ++b) {
            const double pab = pa * p_right[static_cast<std::size_t>(b)];
            if (pab == 0.0) continue;
            const double* slice = wt.data() +
                (static_cast<std::size_t>(a) * static_cast<std::size_t>(C) + static_cast<std::size_t>(b)) *
                    static_cast<std::size_t>(R);
            for (int n = 0; n < R; ++n) logits[static_cast<std::size_t>(n)] += pab * slice[n];
        }
    }
    return logits;
}

inline Vec relation_forward(const Vec& p_left, const Vec& p_right, const Vec& wt, int C, int R) {
    return softmax(relation_logits(p_left, p_right, wt, C, R));
}

// ---------------------------------------------------------------------------
// Relation batch cache
//
// A training step evaluates the relation head for thousands of pairs drawn
// from one batch. Contracting the transfer tensor against each sample once
// (from the left and from the right) turns every pair query into R dot
// products of length C instead of a C*C*R contraction.
// ---------------------------------------------------------------------------

class RelationBatchCache {
public:
    RelationBatchCache(const Vec& wt, const ModelShape& shape, std::vector<const Vec*> distributions)
        : wt_(wt), c_(shape.categories), r_(shape.relations), ps_(std::move(distributions)) {
        const std::size_t C = static_cast<std::size_t>(c_);
        const std::size_t R = static_cast<std::size_t>(r_);
        const std::size_t ctx = R * C;
        left_ctx_.assign(ps_.size() * ctx, 0.0);
        right_ctx_.assign(ps_.size() * ctx, 0.0);
        for (std::size_t s = 0; s < ps_.size(); ++s) {
            const Vec& p = *ps_[s];
            double* lv = left_ctx_.data() + s * ctx;   // [n*C + b] = sum_a wt[a,b,n] p[a]
            double* rv = right_ctx_.data() + s * ctx;  // [n*C + a] = sum_b wt[a,b,n] p[b]
            for (std::size_t a = 0; a < C; ++a) {
                const double pa = p[a];
                const double* wa = wt_.data() + a * C * R;
                for (std::size_t b = 0; b < C; ++b) {
                    const double* slice = wa + b * R;
                    const double pb = p[b];
                    for (std::size_t n = 0; n < R; ++n) {
                        lv[n * C + b] += pa * slice[n];
                        rv[n * C + a] += pb * slice[n];
                    }
                }
            }
        }
    }

    int size() const { return static_cast<int>(ps_.size()); }
    const Vec& distribution(int s) const { return *ps_[static_cast<std::size_t>(s)]; }

    Vec logits(int left, int right) const {
        const std::size_t C = static_cast<std::size_t>(c_);
        const std::size_t R = static_cast<std::size_t>(r_);
        const Vec& pl = *ps_[static_cast<std::size_t>(left)];
        const double* rv = right_ctx_.data() + static_cast<std::size_t>(right) * R * C;
        Vec out(R, 0.0);
        for (std::size_t n = 0; n < R; ++n) {
            double acc = 0.0;
            const double* row = rv + n * C;
            for (std::size_t a = 0; a < C; ++a) acc += pl[a] * row[a];
            out[n] = acc;
        }
        return out;
    }

    Vec probs(int left, int right) const { return softmax(logits(left, right)); }

    // Accumulate the vector-Jacobian products of d(logits) into the category
    // distributions of both members and, optionally, the transfer tensor.
    void pair_backward(int left, int right, const Vec& dlogits,
                       Vec* dp_left, Vec* dp_right, Vec* dwt) const {
        const std::size_t C = static_cast<std::size_t>(c_);
        const std::size_t R = static_cast<std::size_t>(r_);
        const Vec& pl = *ps_[static_cast<std::size_t>(left)];
        const Vec& pr = *ps_[static_cast<std::size_t>(right)];
        if (dp_left != nullptr) {
            const double* rv = right_ctx_.data() + static_cast<std::size_t>(right) * R * C;
            for (std::size_t n = 0; n < R; ++n) {
                const double d = dlogits[n];
                if (d == 0.0) continue;
                const double* row = rv + n * C;
                for (std::size_t a = 0; a < C; ++a) (*dp_left)[a] += d * row[a];
            }
        }
        if (dp_right != nullptr) {
            const double* lv = left_ctx_.data() + static_cast<std::size_t>(left) * R * C;
            for (std::size_t n = 0; n < R; ++n) {
                const double d = dlogits[n];
                if (d == 0.0) continue;
                const double* row = lv + n * C;
                for (std::size_t b = 0; b < C; ++b) (*dp_right)[b] += d * row[b];
            }
        }
        if (dwt != nullptr) {
            for (std::size_t a = 0; a < C; ++a) {
                const double pa = pl[a];
                if (pa == 0.0) continue;
                double* wa = dwt->data() + a * C * R;
                for (std::size_t b = 0; b < C; ++b) {
                    const double pab = pa * pr[b];
                    if (pab == 0.0) continue;
                    double* slice = wa + b * R;
                    for (std::size_t n = 0; n < R; ++n) slice[n] += pab * dlogits[n];
                }
            }
        }
    }

private:
    const Vec& wt_;
    int c_;
    int r_;
    std::vector<const Vec*> ps_;
    Vec left_ctx_;
    Vec right_ctx_;
};

// ---------------------------------------------------------------------------
// Backward through the per-sample category path
// ---------------------------------------------------------------------------

// Gradient of the softmax output w.r.t. its logits, applied to dp.
inline void softmax_vjp(const Vec& p, const Vec& dp, Vec& dlogits) {
    double inner = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) inner += p[i] * dp[i];
    for (std::size_t i = 0; i < p.size(); ++i) dlogits[i] += p[i] * (dp[i] - inner);
}

// Propagate accumulated upstream gradients of one sample into the parameter
// gradients. `dlogits_direct` is a gradient already expressed w.r.t. the
// category logits (cross-entropy terms land there); `dp` is a gradient
// w.r.t. the softmax output (relation-head terms land there).
inline void accumulate_category_backward(const ModelParams& params, const SampleForward& f,
                                         const Vec* dlogits_direct, const Vec* dp,
                                         GradientSet& grads) {
    const ModelShape& s = params.shape;
    Vec dlogits(static_cast<std::size_t>(s.categories), 0.0);
    if (dlogits_direct != nullptr) {
        for (std::size_t i = 0; i < dlogits.size(); ++i) dlogits[i] = (*dlogits_direct)[i];
    }
    if (dp != nullptr) softmax_vjp(f.p, *dp, dlogits);

    Vec dfeat(static_cast<std::size_t>(s.d_feat), 0.0);
    for (int c = 0; c < s.categories; ++c) {
        const double d = dlogits[static_cast<std::size_t>(c)];
        if (d == 0.0) continue;
        grads.bc[static_cast<std::size_t>(c)] += d;
        double* grow = grads.wc.data() + static_cast<std::size_t>(c) * static_cast<std::size_t>(s.d_feat);
        const double* prow = params.wc.data() + static_cast<std::size_t>(c) * static_cast<std::size_t>(s.d_feat);
        for (int k = 0; k < s.d_feat; ++k) {
            grow[k] += d * f.feat[static_cast<std::size_t>(k)];
            dfeat[static_cast<std::size_t>(k)] += d * prow[k];
        }
    }
    Vec dhidden(static_cast<std::size_t>(s.hidden), 0.0);
    for (int k = 0; k < s.d_feat; ++k) {
        const double d = dfeat[static_cast<std::size_t>(k)];
        if (d == 0.0) continue;
        grads.b2[static_cast<std::size_t>(k)] += d;
        double* grow = grads.w2.data() + static_cast<std::size_t>(k) * static_cast<std::size_t>(s.hidden);
        const double* prow = params.w2.data() + static_cast<std::size_t>(k) * static_cast<std::size_t>(s.hidden);
        for (int h = 0; h < s.hidden; ++h) {
            grow[h] += d * f.hidden[static_cast<std::size_t>(h)];
            dhidden[static_cast<std::size_t>(h)] += d * prow[h];
        }
    }
    for (int h = 0; h < s.hidden; ++h) {
        const double act = f.hidden[static_cast<std::size_t>(h)];
        const double d = dhidden[static_cast<std::size_t>(h)] * (1.0 - act * act);
        if (d == 0.0) continue;
        grads.b1[static_cast<std::size_t>(h)] += d;
        double* grow = grads.w1.data() + static_cast<std::size_t>(h) * static_cast<std::size_t>(s.d_in);
        for (int i = 0; i < s.d_in; ++i) grow[i] += d * f.x[static_cast<std::size_t>(i)];
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v
inline void sgd_momentum_step(ModelParams& params, const GradientSet& grads, GradientSet& velocity,
                              double lr, double momentum, double weight_decay) {
    if (!(lr > 0.0)) throw ValidationError("sgd: lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("sgd: momentum must be in [0,1)");
    if (!(weight_decay >= 0.0)) throw ValidationError("sgd: weight_decay must be >= 0");
    if (params.shape != grads.shape || params.shape != velocity.shape) {
        throw ValidationError("sgd: shape mismatch");
    }
    const auto update = [&](Vec& p, const Vec& g, Vec& v) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            v[i] = momentum * v[i] + g[i] + weight_decay * p[i];
            p[i] -= lr * v[i];
        }
    };
    update(params.w1, grads.w1, velocity.w1);
    update(params.b1, grads.b1, velocity.b1);
    update(params.w2, grads.w2, velocity.w2);
    update(params.b2, grads.b2, velocity.b2);
    update(params.wc, grads.wc, velocity.wc);
    update(params.bc, grads.bc, velocity.bc);
    update(params.wt, grads.wt, velocity.wt);
    params.check_finite("sgd_momentum_step");
}

// Half-cosine decay to zero, no restarts.
inline double cosine_lr(long step, long total_steps, double base_lr) {
    if (total_steps < 1) throw ValidationError("cosine_lr: total_steps must be >= 1");
    if (step < 0 || step > total_steps) {
        throw ValidationError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                              std::to_string(total_steps) + "]");
    }
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace relmatch
