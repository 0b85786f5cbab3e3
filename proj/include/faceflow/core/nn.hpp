#pragma once

#include <string>
#include <utility>
#include <vector>

#include "autograd.hpp"
#include "rng.hpp"

namespace faceflow {

// Named parameter list. Var has shared-pointer semantics, so entries alias the
// module's own members; optimizers and checkpoints both work off this view.
template <typename T>
using Params = std::vector<std::pair<std::string, Var<T>>>;

template <typename T>
inline void zero_grads(Params<T>& params) {
    for (auto& [name, p] : params) p.zero_grad();
}

template <typename T>
struct Linear {
    Var<T> w;  // [in, out]
    Var<T> b;  // [out]

    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng, bool zero_init = false) {
        if (zero_init)
            w = Var<T>(Tensor<T>::zeros({in, out}), true);
        else
            w = Var<T>(Tensor<T>::randn({in, out}, rng, T(1) / std::sqrt(static_cast<T>(in))), true);
        b = Var<T>(Tensor<T>::zeros({out}), true);
    }

    Var<T> forward(const Var<T>& x) const { return add_bias(matmul(x, w), b); }

    void collect(const std::string& prefix, Params<T>& out) {
        out.push_back({prefix + ".w", w});
        out.push_back({prefix + ".b", b});
    }
};

// layer norm with learned elementwise affine terms
template <typename T>
struct LayerNormAffine {
    Var<T> gamma;  // [d]
    Var<T> beta;   // [d]

    LayerNormAffine() = default;
    explicit LayerNormAffine(int64_t d) {
        gamma = Var<T>(Tensor<T>::full({d}, T(1)), true);
        beta = Var<T>(Tensor<T>::zeros({d}), true);
    }

    Var<T> forward(const Var<T>& x) const { return add_bias(mul_bias(layer_norm(x), gamma), beta); }

    void collect(const std::string& prefix, Params<T>& out) {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }
};

enum class Act { silu, gelu };

template <typename T>
struct Mlp {
    Linear<T> fc1, fc2;
    Act act = Act::silu;

    Mlp() = default;
    Mlp(int64_t in, int64_t hidden, int64_t out, Rng& rng, Act a = Act::silu)
        : fc1(in, hidden, rng), fc2(hidden, out, rng), act(a) {}

    Var<T> forward(const Var<T>& x) const {
        Var<T> h = fc1.forward(x);
        h = act == Act::silu ? silu(h) : gelu(h);
        return fc2.forward(h);
    }

    void collect(const std::string& prefix, Params<T>& out) {
        fc1.collect(prefix + ".fc1", out);
        fc2.collect(prefix + ".fc2", out);
    }
};

template <typename T>
struct Conv2dLayer {
    Var<T> w;  // [k, k, in, out]
    Var<T> b;  // [out]
    int64_t stride = 1, pad = 1;

    Conv2dLayer() = default;
    Conv2dLayer(int64_t in, int64_t out, int64_t k, int64_t stride_, int64_t pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        T scale = T(1) / std::sqrt(static_cast<T>(k * k * in));
        w = Var<T>(Tensor<T>::randn({k, k, in, out}, rng, scale), true);
        b = Var<T>(Tensor<T>::zeros({out}), true);
    }

    Var<T> forward(const Var<T>& x) const { return conv2d(x, w, b, stride, pad); }

    void collect(const std::string& prefix, Params<T>& out) {
        out.push_back({prefix + ".w", w});
        out.push_back({prefix + ".b", b});
    }
};

// AdamW with decoupled weight decay. Moment slots align with the param list by
// index, so the list order must be stable across steps (and across save/load).
template <typename T>
struct AdamW {
    T lr = T(1e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(1e-2);
    int64_t step_count = 0;

    std::vector<Tensor<T>> m, v;

    void step(Params<T>& params) {
        if (m.empty()) {
            m.resize(params.size());
            v.resize(params.size());
            for (size_t i = 0; i < params.size(); ++i) {
                m[i] = Tensor<T>::zeros(params[i].second.shape());
                v[i] = Tensor<T>::zeros(params[i].second.shape());
            }
        }
        if (m.size() != params.size()) throw ConfigError("AdamW: param count changed mid-run");
        ++step_count;
        T bc1 = T(1) - std::pow(beta1, static_cast<T>(step_count));
        T bc2 = T(1) - std::pow(beta2, static_cast<T>(step_count));
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i].second;
            if (!p.grad().defined()) continue;
            T* pd = p.value().data();
            const T* gd = p.grad().data();
            T* md = m[i].data();
            T* vd = v[i].data();
            for (int64_t j = 0; j < p.value().numel(); ++j) {
                md[j] = beta1 * md[j] + (T(1) - beta1) * gd[j];
                vd[j] = beta2 * vd[j] + (T(1) - beta2) * gd[j] * gd[j];
                T mhat = md[j] / bc1;
                T vhat = vd[j] / bc2;
                pd[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * pd[j]);
            }
        }
    }
};

}  // namespace faceflow
