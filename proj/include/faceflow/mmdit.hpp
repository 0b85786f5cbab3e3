#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "core/nn.hpp"
#include "core/serialize.hpp"

namespace faceflow {

// Two-stream diffusion transformer. Image and text tokens carry separate
// projection weights but share one softmax; a decoupled branch with its own
// zero-initialized key/value weights injects fused identity-expression tokens
// into the image stream, scaled by alpha.

struct MMDiTConfig {
    int64_t d = 128;
    int64_t depth = 6;
    int64_t heads = 4;
    int64_t patch = 4;
    int64_t image_size = 32;
    int64_t channels = 3;
    int64_t vocab = 10;       // null + class names + style names
    int64_t text_len = 2;     // [class token, style token]
    int64_t cond_tokens = 4;  // fused identity-expression tokens
    double alpha = 0.5;

    int64_t image_tokens() const { return (image_size / patch) * (image_size / patch); }
    int64_t head_dim() const { return d / heads; }

    void validate() const {
        if (d % heads != 0) throw ConfigError("model width not divisible by head count");
        if (image_size % patch != 0) throw ConfigError("image size not divisible by patch");
        if (d % 4 != 0) throw ConfigError("model width must be divisible by 4");
        if (!(alpha >= 0.0 && alpha <= 2.0)) throw ConfigError("alpha out of [0,2]");
        if (vocab < 1 || text_len < 1 || cond_tokens < 1 || depth < 1)
            throw ConfigError("degenerate model configuration");
    }

    json to_json() const {
        return {{"d", d},          {"depth", depth},         {"heads", heads},
                {"patch", patch},  {"image_size", image_size}, {"channels", channels},
                {"vocab", vocab},  {"text_len", text_len},   {"cond_tokens", cond_tokens},
                {"alpha", alpha}};
    }

    static MMDiTConfig from_json(const json& j) {
        MMDiTConfig c;
        c.d = j.at("d");
        c.depth = j.at("depth");
        c.heads = j.at("heads");
        c.patch = j.at("patch");
        c.image_size = j.at("image_size");
        c.channels = j.at("channels");
        c.vocab = j.at("vocab");
        c.text_len = j.at("text_len");
        c.cond_tokens = j.at("cond_tokens");
        c.alpha = j.at("alpha");
        return c;
    }
};

// ---------------------------------------------------------------------------
// token vocabulary
// ---------------------------------------------------------------------------

struct TextVocab {
    std::vector<std::string> classes;
    std::vector<std::string> styles;

    int64_t size() const { return 1 + static_cast<int64_t>(classes.size() + styles.size()); }
    int64_t null_id() const { return 0; }
    int64_t class_token(int64_t c) const {
        if (c < 0 || c >= static_cast<int64_t>(classes.size()))
            throw VocabError("class index " + std::to_string(c) + " out of range");
        return 1 + c;
    }
    int64_t style_token(int64_t s) const {
        if (s < 0 || s >= static_cast<int64_t>(styles.size()))
            throw VocabError("style index " + std::to_string(s) + " out of range");
        return 1 + static_cast<int64_t>(classes.size()) + s;
    }
    int64_t class_by_name(const std::string& name) const {
        for (size_t i = 0; i < classes.size(); ++i)
            if (classes[i] == name) return class_token(static_cast<int64_t>(i));
        std::string valid;
        for (const auto& c : classes) valid += (valid.empty() ? "" : ", ") + c;
        throw VocabError("unknown class name '" + name + "'; valid names: " + valid);
    }
    int64_t style_by_name(const std::string& name) const {
        for (size_t i = 0; i < styles.size(); ++i)
            if (styles[i] == name) return style_token(static_cast<int64_t>(i));
        std::string valid;
        for (const auto& s : styles) valid += (valid.empty() ? "" : ", ") + s;
        throw VocabError("unknown style name '" + name + "'; valid names: " + valid);
    }

    json to_json() const { return {{"classes", classes}, {"styles", styles}}; }
    static TextVocab from_json(const json& j) {
        TextVocab v;
        v.classes = j.at("classes").get<std::vector<std::string>>();
        v.styles = j.at("styles").get<std::vector<std::string>>();
        return v;
    }
};

// ---------------------------------------------------------------------------
// patch <-> token reshuffling (pure layout, exact inverse pair)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> extract_patches(const Var<T>& img, int64_t p) {
    const auto& s = img.shape();
    if (s.size() != 4 || s[1] % p != 0 || s[2] % p != 0)
        throw ShapeError("extract_patches: " + shape_str(s) + " with patch " + std::to_string(p));
    int64_t b = s[0], gh = s[1] / p, gw = s[2] / p, c = s[3];
    auto x = reshape(img, {b, gh, p, gw, p, c});
    x = permute(x, {0, 1, 3, 2, 4, 5});
    return reshape(x, {b, gh * gw, p * p * c});
}

template <typename T>
Var<T> assemble_patches(const Var<T>& tokens, int64_t p, int64_t h, int64_t w, int64_t c) {
    const auto& s = tokens.shape();
    if (s.size() != 3 || s[1] != (h / p) * (w / p) || s[2] != p * p * c)
        throw ShapeError("assemble_patches: " + shape_str(s));
    int64_t b = s[0], gh = h / p, gw = w / p;
    auto x = reshape(tokens, {b, gh, gw, p, p, c});
    x = permute(x, {0, 1, 3, 2, 4, 5});
    return reshape(x, {b, h, w, c});
}

// fixed 2D sin-cos positional table for a g x g grid
template <typename T>
Tensor<T> position_table(int64_t grid, int64_t d) {
    Tensor<T> out({grid * grid, d});
    int64_t quarter = d / 4;
    for (int64_t gy = 0; gy < grid; ++gy)
        for (int64_t gx = 0; gx < grid; ++gx) {
            T* row = out.data() + (gy * grid + gx) * d;
            for (int64_t k = 0; k < quarter; ++k) {
                double omega = std::pow(10000.0, -static_cast<double>(k) / quarter);
                row[k] = static_cast<T>(std::sin(gx * omega));
                row[quarter + k] = static_cast<T>(std::cos(gx * omega));
                row[2 * quarter + k] = static_cast<T>(std::sin(gy * omega));
                row[3 * quarter + k] = static_cast<T>(std::cos(gy * omega));
            }
        }
    return out;
}

template <typename T>
Tensor<T> time_features(const std::vector<double>& t, int64_t d) {
    int64_t b = static_cast<int64_t>(t.size());
    int64_t half = d / 2;
    Tensor<T> out({b, d});
    for (int64_t i = 0; i < b; ++i) {
        T* row = out.data() + i * d;
        for (int64_t k = 0; k < half; ++k) {
            double freq = std::pow(10000.0, -static_cast<double>(k) / half);
            double arg = t[static_cast<size_t>(i)] * 1000.0 * freq;
            row[k] = static_cast<T>(std::cos(arg));
            row[half + k] = static_cast<T>(std::sin(arg));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// consistent attention augmentation (inference-only, raw tensors)
// ---------------------------------------------------------------------------

struct ConsistentAttentionConfig {
    bool enabled = false;
    double rho = 0.5;
    uint64_t seed = 0;
    // one seed per batch item; defaults to mix_seed(seed, tag, position).
    // Attaching seeds to items (not positions) makes batch order irrelevant.
    std::vector<uint64_t> sample_seeds;

    uint64_t seed_for(int64_t j) const {
        if (!sample_seeds.empty()) return sample_seeds[static_cast<size_t>(j)];
        return mix_seed(seed, 0x5A3D, static_cast<uint64_t>(j));
    }

    void validate() const {
        if (!(rho >= 0.0 && rho <= 1.0)) throw DomainError("consistent attention rho out of [0,1]");
    }
};

// For each item, append round(rho * L) tokens drawn without replacement from
// every other item. Draws are sorted and foreign blocks ordered by source
// seed, so outputs are invariant to batch permutation (given permuted seeds).
template <typename T>
Tensor<T> consistent_attention_augment(const Tensor<T>& tokens,
                                       const ConsistentAttentionConfig& cfg, int64_t block_index,
                                       uint64_t step_key) {
    cfg.validate();
    const auto& s = tokens.shape();
    if (s.size() != 3) throw ShapeError("consistent_attention_augment: expected [B,L,d]");
    int64_t b = s[0], l = s[1], d = s[2];
    if (!cfg.sample_seeds.empty() && static_cast<int64_t>(cfg.sample_seeds.size()) != b)
        throw ConfigError("consistent attention sample_seeds size mismatch");
    int64_t m = std::min<int64_t>(std::llround(cfg.rho * static_cast<double>(l)), l);
    if (b <= 1 || m == 0) return tokens;
    int64_t l_aug = l + (b - 1) * m;
    Tensor<T> out({b, l_aug, d});
    std::vector<int64_t> idx(static_cast<size_t>(l));
    for (int64_t j = 0; j < b; ++j) {
        std::memcpy(out.data() + j * l_aug * d, tokens.data() + j * l * d,
                    sizeof(T) * static_cast<size_t>(l * d));
        std::vector<std::pair<uint64_t, int64_t>> sources;
        for (int64_t k = 0; k < b; ++k)
            if (k != j) sources.push_back({cfg.seed_for(k), k});
        std::sort(sources.begin(), sources.end());
        int64_t off = l;
        for (const auto& [seed_k, k] : sources) {
            Rng rng(mix_seed(cfg.seed_for(j), seed_k, static_cast<uint64_t>(block_index), step_key));
            for (int64_t i = 0; i < l; ++i) idx[static_cast<size_t>(i)] = i;
            for (int64_t i = 0; i < m; ++i) {  // partial Fisher-Yates
                int64_t r = i + static_cast<int64_t>(rng.below(static_cast<uint64_t>(l - i)));
                std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(r)]);
            }
            std::sort(idx.begin(), idx.begin() + m);
            for (int64_t i = 0; i < m; ++i)
                std::memcpy(out.data() + (j * l_aug + off + i) * d,
                            tokens.data() + (k * l + idx[static_cast<size_t>(i)]) * d,
                            sizeof(T) * static_cast<size_t>(d));
            off += m;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// joint attention
// ---------------------------------------------------------------------------

template <typename T>
struct JointAttentionWeights {
    Var<T> w_qi, w_ki, w_vi;    // image stream
    Var<T> w_qp, w_kp, w_vp;    // text stream
    Var<T> w_kie, w_vie;        // condition branch, zero at start

    JointAttentionWeights() = default;
    JointAttentionWeights(int64_t d, Rng& rng) {
        T sc = T(1) / std::sqrt(static_cast<T>(d));
        w_qi = Var<T>(Tensor<T>::randn({d, d}, rng, sc), true);
        w_ki = Var<T>(Tensor<T>::randn({d, d}, rng, sc), true);
        w_vi = Var<T>(Tensor<T>::randn({d, d}, rng, sc), true);
        w_qp = Var<T>(Tensor<T>::randn({d, d}, rng, sc), true);
        w_kp = Var<T>(Tensor<T>::randn({d, d}, rng, sc), true);
        w_vp = Var<T>(Tensor<T>::randn({d, d}, rng, sc), true);
        w_kie = Var<T>(Tensor<T>::zeros({d, d}), true);
        w_vie = Var<T>(Tensor<T>::zeros({d, d}), true);
    }

    void collect_base(const std::string& prefix, Params<T>& out) {
        out.push_back({prefix + ".w_qi", w_qi});
        out.push_back({prefix + ".w_ki", w_ki});
        out.push_back({prefix + ".w_vi", w_vi});
        out.push_back({prefix + ".w_qp", w_qp});
        out.push_back({prefix + ".w_kp", w_kp});
        out.push_back({prefix + ".w_vp", w_vp});
    }
    void collect_adapters(const std::string& prefix, Params<T>& out) {
        out.push_back({prefix + ".w_kie", w_kie});
        out.push_back({prefix + ".w_vie", w_vie});
    }
};

template <typename T>
struct AttnTrace {
    // post-softmax attention tensors, in evaluation order
    std::vector<Tensor<T>> rows;
};

template <typename T>
Var<T> split_heads(const Var<T>& x, int64_t heads) {
    const auto& s = x.shape();  // [B,L,d] -> [B,H,L,Dh]
    auto y = reshape(x, {s[0], s[1], heads, s[2] / heads});
    return permute(y, {0, 2, 1, 3});
}

template <typename T>
Var<T> merge_heads(const Var<T>& x) {
    const auto& s = x.shape();  // [B,H,L,Dh] -> [B,L,H*Dh]
    auto y = permute(x, {0, 2, 1, 3});
    return reshape(y, {s[0], s[2], s[1] * s[3]});
}

template <typename T>
struct JointAttentionOut {
    Var<T> img, txt;
};

// Base branch: one softmax over the concatenated image+text sequence, outputs
// split per stream. Condition branch: image queries against [image ; cond]
// keys/values with the dedicated weights, added to the image output as
// img += alpha * branch. cond == nullptr or alpha == 0 skips the branch
// entirely. img_kv_override supplies consistent-attention-augmented image
// tokens for base-branch keys/values only.
template <typename T>
JointAttentionOut<T> joint_attention(const Var<T>& img, const Var<T>& txt,
                                     std::type_identity_t<const Var<T>*> cond,
                                     const JointAttentionWeights<T>& w, int64_t heads, double alpha,
                                     std::type_identity_t<const Var<T>*> img_kv_override = nullptr,
                                     std::type_identity_t<AttnTrace<T>*> trace = nullptr) {
    const auto& si = img.shape();
    const auto& sp = txt.shape();
    if (si.size() != 3 || sp.size() != 3 || si[2] != sp[2])
        throw ShapeError("joint_attention: stream widths differ");
    int64_t li = si[1], lp = sp[1];
    int64_t dh = si[2] / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    const Var<T>& img_kv = img_kv_override ? *img_kv_override : img;
    auto qi = split_heads(matmul(img, w.w_qi), heads);
    auto ki = split_heads(matmul(img_kv, w.w_ki), heads);
    auto vi = split_heads(matmul(img_kv, w.w_vi), heads);
    auto qp = split_heads(matmul(txt, w.w_qp), heads);
    auto kp = split_heads(matmul(txt, w.w_kp), heads);
    auto vp = split_heads(matmul(txt, w.w_vp), heads);

    auto q = concat<T>({qi, qp}, 2);
    auto k = concat<T>({ki, kp}, 2);
    auto v = concat<T>({vi, vp}, 2);
    auto attn = softmax_last(mul_scalar(bmm(q, k, true), scale));
    if (trace) trace->rows.push_back(attn.value());
    auto joint = merge_heads(bmm(attn, v));  // [B, Li+Lp, d]
    auto out_img = slice(joint, 1, 0, li);
    auto out_txt = slice(joint, 1, li, lp);

    if (cond && alpha != 0.0) {
        auto ki_own = img_kv_override ? split_heads(matmul(img, w.w_ki), heads) : ki;
        auto vi_own = img_kv_override ? split_heads(matmul(img, w.w_vi), heads) : vi;
        auto kc = concat<T>({ki_own, split_heads(matmul(*cond, w.w_kie), heads)}, 2);
        auto vc = concat<T>({vi_own, split_heads(matmul(*cond, w.w_vie), heads)}, 2);
        auto attn_c = softmax_last(mul_scalar(bmm(qi, kc, true), scale));
        if (trace) trace->rows.push_back(attn_c.value());
        auto branch = merge_heads(bmm(attn_c, vc));
        out_img = add(out_img, mul_scalar(branch, static_cast<T>(alpha)));
    }
    return {out_img, out_txt};
}

// ---------------------------------------------------------------------------
// transformer block (adaptive modulation, zero-initialized gates)
// ---------------------------------------------------------------------------

template <typename T>
struct MMDiTBlock {
    Linear<T> img_mod, txt_mod;  // d -> 6d, zero-init: blocks start as identity
    JointAttentionWeights<T> attn;
    Linear<T> img_proj, txt_proj;  // attention output projections
    Mlp<T> img_mlp, txt_mlp;

    MMDiTBlock() = default;
    MMDiTBlock(int64_t d, Rng& rng)
        : img_mod(d, 6 * d, rng, true),
          txt_mod(d, 6 * d, rng, true),
          attn(d, rng),
          img_proj(d, d, rng),
          txt_proj(d, d, rng),
          img_mlp(d, 4 * d, d, rng, Act::gelu),
          txt_mlp(d, 4 * d, d, rng, Act::gelu) {}

    struct Mod {
        Var<T> s1, b1, g1, s2, b2, g2;
    };

    Mod modulation(const Linear<T>& lin, const Var<T>& tact, int64_t d) const {
        auto m = lin.forward(tact);  // [B, 6d]
        return {slice(m, 1, 0, d),     slice(m, 1, d, d),     slice(m, 1, 2 * d, d),
                slice(m, 1, 3 * d, d), slice(m, 1, 4 * d, d), slice(m, 1, 5 * d, d)};
    }

    void forward(Var<T>& xi, Var<T>& xp, const Var<T>* cond, const Var<T>& tact, int64_t heads,
                 double alpha, const Var<T>* xi_aug, AttnTrace<T>* trace) const {
        int64_t d = xi.shape()[2];
        Mod mi = modulation(img_mod, tact, d);
        Mod mp = modulation(txt_mod, tact, d);
        auto ai = scale_shift(layer_norm(xi), mi.s1, mi.b1);
        auto ap = scale_shift(layer_norm(xp), mp.s1, mp.b1);
        std::optional<Var<T>> aug;
        if (xi_aug) {
            // modulate the augmented tokens with their source item's scale/shift
            aug = scale_shift_gather(*xi_aug, mi.s1, mi.b1);
        }
        auto o = joint_attention(ai, ap, cond, attn, heads, alpha, aug ? &*aug : nullptr, trace);
        xi = add(xi, gate_mul(img_proj.forward(o.img), mi.g1));
        xp = add(xp, gate_mul(txt_proj.forward(o.txt), mp.g1));
        xi = add(xi, gate_mul(img_mlp.forward(scale_shift(layer_norm(xi), mi.s2, mi.b2)), mi.g2));
        xp = add(xp, gate_mul(txt_mlp.forward(scale_shift(layer_norm(xp), mp.s2, mp.b2)), mp.g2));
    }

    // Normalize/modulate an augmented sequence with the consumer item's
    // vectors. Token sharing runs only at inference where all items share one
    // timestep, so consumer and source modulation coincide.
    static Var<T> scale_shift_gather(const Var<T>& x_aug, const Var<T>& s, const Var<T>& b) {
        return scale_shift(layer_norm(x_aug), s, b);
    }

    void collect_backbone(const std::string& p, Params<T>& out) {
        img_mod.collect(p + ".img_mod", out);
        txt_mod.collect(p + ".txt_mod", out);
        attn.collect_base(p + ".attn", out);
        img_proj.collect(p + ".img_proj", out);
        txt_proj.collect(p + ".txt_proj", out);
        img_mlp.collect(p + ".img_mlp", out);
        txt_mlp.collect(p + ".txt_mlp", out);
    }
    void collect_adapters(const std::string& p, Params<T>& out) {
        attn.collect_adapters(p + ".attn", out);
    }
};

// ---------------------------------------------------------------------------
// full model
// ---------------------------------------------------------------------------

template <typename T>
struct MMDiT {
    MMDiTConfig cfg;
    Linear<T> patch_proj;  // p*p*C -> d
    Var<T> text_emb;       // [vocab, d]
    Tensor<T> pos;         // [L_i, d], fixed
    Mlp<T> time_mlp;
    std::vector<MMDiTBlock<T>> blocks;
    Linear<T> final_mod;   // d -> 2d, zero-init
    Linear<T> final_proj;  // d -> p*p*C, zero-init

    MMDiT() = default;
    MMDiT(MMDiTConfig c, Rng& rng) : cfg(c) {
        cfg.validate();
        int64_t pc = cfg.patch * cfg.patch * cfg.channels;
        patch_proj = Linear<T>(pc, cfg.d, rng);
        text_emb = Var<T>(Tensor<T>::randn({cfg.vocab, cfg.d}, rng,
                                           T(1) / std::sqrt(static_cast<T>(cfg.d))),
                          true);
        pos = position_table<T>(cfg.image_size / cfg.patch, cfg.d);
        time_mlp = Mlp<T>(cfg.d, cfg.d, cfg.d, rng, Act::silu);
        for (int64_t i = 0; i < cfg.depth; ++i) blocks.emplace_back(cfg.d, rng);
        final_mod = Linear<T>(cfg.d, 2 * cfg.d, rng, true);
        final_proj = Linear<T>(cfg.d, pc, rng, true);
    }

    // noisy: [B,H,W,C]; t: one entry per item; text_ids: B * text_len ids;
    // cond: optional [B, N, d]; cc applies to base-branch image K/V only.
    Var<T> forward(const Var<T>& noisy, const std::vector<double>& t,
                   const std::vector<int64_t>& text_ids, const Var<T>* cond,
                   const ConsistentAttentionConfig& cc = {}, AttnTrace<T>* trace = nullptr) const {
        const auto& s = noisy.shape();
        if (s.size() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size ||
            s[3] != cfg.channels)
            throw ShapeError("forward: image shape " + shape_str(s));
        int64_t b = s[0];
        if (static_cast<int64_t>(t.size()) != b) throw ShapeError("forward: t count != batch");
        if (static_cast<int64_t>(text_ids.size()) != b * cfg.text_len)
            throw ShapeError("forward: text id count != batch * text_len");
        for (double tv : t)
            if (!(tv >= 0.0 && tv <= 1.0)) throw DomainError("forward: t out of [0,1]");
        for (int64_t id : text_ids)
            if (id < 0 || id >= cfg.vocab)
                throw VocabError("text token id " + std::to_string(id) + " outside vocabulary of " +
                                 std::to_string(cfg.vocab));
        if (cond && (cond->shape() != Shape{b, cfg.cond_tokens, cfg.d}))
            throw ShapeError("forward: condition token shape " + shape_str(cond->shape()));

        auto xi = patch_proj.forward(extract_patches(noisy, cfg.patch));
        Tensor<T> pos_b({b, cfg.image_tokens(), cfg.d});
        for (int64_t i = 0; i < b; ++i)
            std::memcpy(pos_b.data() + i * pos.numel(), pos.data(),
                        sizeof(T) * static_cast<size_t>(pos.numel()));
        xi = add(xi, Var<T>(std::move(pos_b)));
        auto xp = reshape(rows(text_emb, text_ids), {b, cfg.text_len, cfg.d});
        auto tact = silu(time_mlp.forward(Var<T>(time_features<T>(t, cfg.d))));

        uint64_t step_key = 0;
        std::memcpy(&step_key, &t[0], sizeof(double));
        bool augment = cc.enabled && b > 1 && cc.rho > 0.0;
        for (size_t bi = 0; bi < blocks.size(); ++bi) {
            std::optional<Var<T>> aug;
            if (augment) {
                aug = Var<T>(consistent_attention_augment(xi.value(), cc,
                                                          static_cast<int64_t>(bi), step_key));
                if (aug->shape()[1] == xi.shape()[1]) aug.reset();  // rounded to zero draws
            }
            blocks[bi].forward(xi, xp, cond, tact, cfg.heads, cfg.alpha, aug ? &*aug : nullptr,
                               trace);
        }

        auto fm = final_mod.forward(tact);
        auto out = scale_shift(layer_norm(xi), slice(fm, 1, 0, cfg.d), slice(fm, 1, cfg.d, cfg.d));
        out = final_proj.forward(out);
        return assemble_patches(out, cfg.patch, cfg.image_size, cfg.image_size, cfg.channels);
    }

    void collect_backbone(Params<T>& out) {
        patch_proj.collect("patch_proj", out);
        out.push_back({"text_emb", text_emb});
        time_mlp.collect("time_mlp", out);
        for (size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect_backbone("block" + std::to_string(i), out);
        final_mod.collect("final_mod", out);
        final_proj.collect("final_proj", out);
    }
    void collect_adapters(Params<T>& out) {
        for (size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect_adapters("block" + std::to_string(i), out);
    }
    Params<T> all_params() {
        Params<T> out;
        collect_backbone(out);
        collect_adapters(out);
        return out;
    }

    void set_trainable(bool backbone, bool adapters) {
        Params<T> bp, ap;
        collect_backbone(bp);
        collect_adapters(ap);
        for (auto& [n, v] : bp) v.node->requires_grad = backbone;
        for (auto& [n, v] : ap) v.node->requires_grad = adapters;
    }
};

template <typename T>
void save_mmdit(const std::string& dir, MMDiT<T>& model, const TextVocab& vocab,
                json extra_meta = json::object()) {
    extra_meta["config"] = model.cfg.to_json();
    extra_meta["vocab"] = vocab.to_json();
    auto params = model.all_params();
    save_tensors(dir, params, extra_meta);
}

template <typename T>
struct LoadedMMDiT {
    MMDiT<T> model;
    TextVocab vocab;
    json meta;
};

template <typename T>
LoadedMMDiT<T> load_mmdit(const std::string& dir) {
    Rng rng(0);
    json manifest = read_json_file(dir + "/manifest.json");
    MMDiTConfig cfg = MMDiTConfig::from_json(manifest.at("meta").at("config"));
    LoadedMMDiT<T> out{MMDiT<T>(cfg, rng), TextVocab::from_json(manifest.at("meta").at("vocab")),
                       json{}};
    auto params = out.model.all_params();
    out.meta = load_into(params, dir);
    return out;
}

}  // namespace faceflow
