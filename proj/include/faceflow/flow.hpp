#pragma once

#include <cmath>
#include <functional>

#include "core/rng.hpp"
#include "core/tensor.hpp"

namespace faceflow {

// Straight-line flow between a noise draw x0 and a data sample x1:
// x_t = (1-t) x0 + t x1, regression target v = x1 - x0.

template <typename T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& x1, double t) {
    check_same_shape("interpolate", x0, x1);
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("interpolate: t out of [0,1]");
    if (t == 0.0) return x0;  // endpoint identities hold bit-exactly
    if (t == 1.0) return x1;
    Tensor<T> out(x0.shape());
    const T a = static_cast<T>(1.0 - t), b = static_cast<T>(t);
    const T* p0 = x0.data();
    const T* p1 = x1.data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * p0[i] + b * p1[i];
    return out;
}

template <typename T>
T rf_loss(const Tensor<T>& v_pred, const Tensor<T>& x0, const Tensor<T>& x1) {
    check_same_shape("rf_loss", v_pred, x0);
    check_same_shape("rf_loss", v_pred, x1);
    const T* vp = v_pred.data();
    const T* p0 = x0.data();
    const T* p1 = x1.data();
    T acc = 0;
    for (int64_t i = 0; i < v_pred.numel(); ++i) {
        T d = vp[i] - (p1[i] - p0[i]);
        acc += d * d;
    }
    return acc / static_cast<T>(v_pred.numel());
}

// x1 estimate from a point on the trajectory; exact when v is the true
// straight-line velocity. t = 1 is allowed and returns xt unchanged.
template <typename T>
Tensor<T> one_step_estimate(const Tensor<T>& xt, const Tensor<T>& v, double t) {
    check_same_shape("one_step_estimate", xt, v);
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("one_step_estimate: t out of [0,1]");
    if (xt.has_nonfinite() || v.has_nonfinite())
        throw NumericError("one_step_estimate: non-finite input");
    if (t == 1.0) return xt;
    Tensor<T> out = xt;
    const T c = static_cast<T>(1.0 - t);
    const T* vd = v.data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += c * vd[i];
    return out;
}

template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& v_uncond, const Tensor<T>& v_cond, double scale) {
    check_same_shape("cfg_combine", v_uncond, v_cond);
    if (scale == 1.0) return v_cond;
    if (scale == 0.0) return v_uncond;
    Tensor<T> out(v_uncond.shape());
    const T s = static_cast<T>(scale);
    const T* u = v_uncond.data();
    const T* c = v_cond.data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = u[i] + s * (c[i] - u[i]);
    return out;
}

struct TimeDistribution {
    enum class Kind { uniform, logit_normal };
    Kind kind = Kind::uniform;
    double mean = 0.0;  // logit_normal only
    double std = 1.0;

    // always in the open interval (0,1)
    double sample(Rng& rng) const {
        if (kind == Kind::uniform) return rng.uniform_open();
        double z = mean + std * rng.normal();
        double t = 1.0 / (1.0 + std::exp(-z));
        return std::min(std::max(t, 1e-12), 1.0 - 1e-12);
    }
};

struct GuidanceConfig {
    double scale = 5.0;
    int steps = 50;
};

// Two-axis combine over nested conditionals: the adapter-conditioned velocity
// v_cond sits between the unconditioned v_uncond and the fully conditioned
// v_full, and each gap gets its own scale. Equal scales telescope to the
// single-axis rule.
template <typename T>
Tensor<T> dual_cfg_combine(const Tensor<T>& v_uncond, const Tensor<T>& v_cond,
                           const Tensor<T>& v_full, double cond_scale, double text_scale) {
    check_same_shape("dual_cfg_combine", v_uncond, v_cond);
    check_same_shape("dual_cfg_combine", v_uncond, v_full);
    Tensor<T> out(v_uncond.shape());
    const T sc = static_cast<T>(cond_scale), st = static_cast<T>(text_scale);
    const T* u = v_uncond.data();
    const T* c = v_cond.data();
    const T* f = v_full.data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = u[i] + sc * (c[i] - u[i]) + st * (f[i] - c[i]);
    return out;
}

struct DualGuidanceConfig {
    double cond_scale = 5.0;
    double text_scale = 5.0;
    int steps = 50;
};

// Explicit Euler over a uniform grid; velocity_fn(x, t, conditioned).
// Cost contract: one evaluation per step at scale == 1 (conditional branch
// only), exactly two otherwise.
template <typename T>
Tensor<T> euler_sample(const std::function<Tensor<T>(const Tensor<T>&, double, bool)>& velocity_fn,
                       const Tensor<T>& x0, const GuidanceConfig& guidance) {
    if (guidance.steps < 1) throw DomainError("euler_sample: steps must be >= 1");
    Tensor<T> x = x0;
    const double dt = 1.0 / guidance.steps;
    for (int n = 0; n < guidance.steps; ++n) {
        double t = static_cast<double>(n) * dt;
        Tensor<T> v;
        if (guidance.scale == 1.0) {
            v = velocity_fn(x, t, true);
            if (!v.same_shape(x)) throw ShapeError("euler_sample: velocity shape mismatch");
        } else {
            Tensor<T> vu = velocity_fn(x, t, false);
            Tensor<T> vc = velocity_fn(x, t, true);
            if (!vu.same_shape(x) || !vc.same_shape(x))
                throw ShapeError("euler_sample: velocity shape mismatch");
            v = cfg_combine(vu, vc, guidance.scale);
        }
        const T h = static_cast<T>(dt);
        const T* vd = v.data();
        for (int64_t i = 0; i < x.numel(); ++i) x[i] += h * vd[i];
    }
    return x;
}

// Euler integration with separate scales for the adapter and text conditioning
// gaps; velocity_fn(x, t, branch) with branch 0 = unconditioned, 1 = adapter
// conditioning only, 2 = adapter + text. Equal scales delegate to the
// two-branch sampler (bit-identical, same cost); distinct scales cost three
// evaluations per step.
template <typename T>
Tensor<T> euler_sample_dual(
    const std::function<Tensor<T>(const Tensor<T>&, double, int)>& velocity_fn,
    const Tensor<T>& x0, const DualGuidanceConfig& guidance) {
    if (guidance.steps < 1) throw DomainError("euler_sample_dual: steps must be >= 1");
    if (guidance.cond_scale == guidance.text_scale) {
        std::function<Tensor<T>(const Tensor<T>&, double, bool)> two_branch =
            [&](const Tensor<T>& x, double t, bool cond) { return velocity_fn(x, t, cond ? 2 : 0); };
        return euler_sample<T>(two_branch, x0, {guidance.cond_scale, guidance.steps});
    }
    Tensor<T> x = x0;
    const double dt = 1.0 / guidance.steps;
    for (int n = 0; n < guidance.steps; ++n) {
        double t = static_cast<double>(n) * dt;
        Tensor<T> vu = velocity_fn(x, t, 0);
        Tensor<T> vc = velocity_fn(x, t, 1);
        Tensor<T> vf = velocity_fn(x, t, 2);
        if (!vu.same_shape(x) || !vc.same_shape(x) || !vf.same_shape(x))
            throw ShapeError("euler_sample_dual: velocity shape mismatch");
        Tensor<T> v = dual_cfg_combine(vu, vc, vf, guidance.cond_scale, guidance.text_scale);
        const T h = static_cast<T>(dt);
        const T* vd = v.data();
        for (int64_t i = 0; i < x.numel(); ++i) x[i] += h * vd[i];
    }
    return x;
}

}  // namespace faceflow
