#pragma once

#include <algorithm>
#include <cstring>
#include <set>
#include <string>
#include <vector>

#include "core/nn.hpp"
#include "core/serialize.hpp"
#include "toyfaces.hpp"

namespace faceflow {

// Frozen perceptual encoders for conditioning and metrics: a face-parameter
// regressor whose penultimate features act as the identity embedding, a
// mirror-image expression regressor with a class head, and a generic
// autoencoder whose bottleneck serves as a neutral semantic embedding.
// Embeddings are centered on the training mean and L2-normalized.

constexpr int64_t kEmbedDim = 64;

template <typename T>
struct EncoderOutput {
    Tensor<T> embedding;  // [D_e]
    bool normalized = true;
};

template <typename T>
struct ConvEncoder {
    Conv2dLayer<T> c1, c2, c3, c4;  // 3 -> 16 -> 32 -> 64 -> 64, all k3 s2 p1

    ConvEncoder() = default;
    explicit ConvEncoder(Rng& rng)
        : c1(3, 16, 3, 2, 1, rng),
          c2(16, 32, 3, 2, 1, rng),
          c3(32, 64, 3, 2, 1, rng),
          c4(64, kEmbedDim, 3, 2, 1, rng) {}

    // [B,R,R,3] -> [B, D_e] pooled features
    Var<T> forward(const Var<T>& x) const {
        auto h = silu(c1.forward(x));
        h = silu(c2.forward(h));
        h = silu(c3.forward(h));
        h = silu(c4.forward(h));
        return avg_pool_all(h);
    }

    void collect(const std::string& p, Params<T>& out) {
        c1.collect(p + ".c1", out);
        c2.collect(p + ".c2", out);
        c3.collect(p + ".c3", out);
        c4.collect(p + ".c4", out);
    }
};

namespace detail {

template <typename T>
Var<T> centered_normalized(const Var<T>& features, const Tensor<T>& center) {
    Tensor<T> neg = center;
    for (int64_t i = 0; i < neg.numel(); ++i) neg.data()[i] = -neg.data()[i];
    return normalize_rows(add_bias(features, Var<T>(std::move(neg))));
}

}  // namespace detail

template <typename T>
struct FaceEncoder {
    std::string kind;          // "identity" or "expression"
    int64_t target_dim = 5;
    int64_t num_classes = 0;   // expression encoder only
    ConvEncoder<T> trunk;
    Linear<T> head;            // D_e -> target_dim
    Linear<T> class_head;      // D_e -> K classes (expression only)
    Tensor<T> center;          // [D_e] training-set feature mean
    json stats = json::object();

    FaceEncoder() = default;
    FaceEncoder(std::string kind_, int64_t target_dim_, int64_t num_classes_, Rng& rng)
        : kind(std::move(kind_)), target_dim(target_dim_), num_classes(num_classes_), trunk(rng) {
        head = Linear<T>(kEmbedDim, target_dim, rng);
        if (num_classes > 0) class_head = Linear<T>(kEmbedDim, num_classes, rng);
        center = Tensor<T>::zeros({kEmbedDim});
    }

    Var<T> features(const Var<T>& images) const { return trunk.forward(images); }
    // differentiable w.r.t. images; weights stay frozen
    Var<T> embed(const Var<T>& images) const {
        return detail::centered_normalized(features(images), center);
    }
    Var<T> regress(const Var<T>& images) const { return head.forward(features(images)); }
    Var<T> classify(const Var<T>& images) const {
        if (num_classes == 0) throw ConfigError(kind + " encoder has no class head");
        return class_head.forward(features(images));
    }

    EncoderOutput<T> embed_one(const Tensor<T>& image) const {
        NoGradGuard ng;
        Tensor<T> batch(Shape{1, image.shape()[0], image.shape()[1], image.shape()[2]});
        std::memcpy(batch.data(), image.data(), sizeof(T) * static_cast<size_t>(image.numel()));
        auto e = embed(Var<T>(std::move(batch)));
        Tensor<T> out({kEmbedDim});
        std::memcpy(out.data(), e.value().data(), sizeof(T) * kEmbedDim);
        return {std::move(out), true};
    }

    void collect(Params<T>& out) {
        trunk.collect("trunk", out);
        head.collect("head", out);
        if (num_classes > 0) class_head.collect("class_head", out);
    }

    void freeze() {
        Params<T> p;
        collect(p);
        for (auto& [n, v] : p) v.node->requires_grad = false;
    }
};

// autoencoder; the bottleneck is the embedding used by neutral metrics
template <typename T>
struct GenericEmbedder {
    ConvEncoder<T> trunk;
    Linear<T> dec_fc;               // D_e -> 2*2*64
    Conv2dLayer<T> d1, d2, d3, d4;  // 64 -> 64 -> 32 -> 16 -> 3, k3 s1 p1
    Tensor<T> center;
    json stats = json::object();

    GenericEmbedder() = default;
    explicit GenericEmbedder(Rng& rng)
        : trunk(rng),
          dec_fc(kEmbedDim, 2 * 2 * 64, rng),
          d1(64, 64, 3, 1, 1, rng),
          d2(64, 32, 3, 1, 1, rng),
          d3(32, 16, 3, 1, 1, rng),
          d4(16, 3, 3, 1, 1, rng) {
        center = Tensor<T>::zeros({kEmbedDim});
    }

    Var<T> features(const Var<T>& images) const { return trunk.forward(images); }
    Var<T> embed(const Var<T>& images) const {
        return detail::centered_normalized(features(images), center);
    }

    // [B,R,R,3] -> [B,32,32,3] in (0,1)
    Var<T> reconstruct(const Var<T>& images) const {
        auto h = dec_fc.forward(features(images));
        auto x = reshape(h, {images.shape()[0], 2, 2, 64});
        x = silu(d1.forward(upsample2x(x)));
        x = silu(d2.forward(upsample2x(x)));
        x = silu(d3.forward(upsample2x(x)));
        return sigmoid(d4.forward(upsample2x(x)));
    }

    void collect(Params<T>& out) {
        trunk.collect("trunk", out);
        dec_fc.collect("dec_fc", out);
        d1.collect("d1", out);
        d2.collect("d2", out);
        d3.collect("d3", out);
        d4.collect("d4", out);
    }

    void freeze() {
        Params<T> p;
        collect(p);
        for (auto& [n, v] : p) v.node->requires_grad = false;
    }
};

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

struct EncoderTrainConfig {
    int64_t steps = 3000;
    int64_t batch = 32;
    double lr = 1e-3;
    double holdout_fraction = 0.1;
    uint64_t seed = 7;
};

namespace detail {

template <typename T>
Tensor<T> gather_images(const Tensor<float>& images, const std::vector<int64_t>& idx) {
    const auto& s = images.shape();
    int64_t stride = s[1] * s[2] * s[3];
    Tensor<T> out({static_cast<int64_t>(idx.size()), s[1], s[2], s[3]});
    for (size_t i = 0; i < idx.size(); ++i) {
        const float* src = images.data() + idx[i] * stride;
        T* dst = out.data() + static_cast<int64_t>(i) * stride;
        for (int64_t j = 0; j < stride; ++j) dst[j] = static_cast<T>(src[j]);
    }
    return out;
}

// identity-level split so held-out identities are never seen in training
inline std::vector<char> holdout_identities(int64_t n_ids, double fraction, uint64_t seed) {
    std::vector<int64_t> order(static_cast<size_t>(n_ids));
    for (int64_t i = 0; i < n_ids; ++i) order[static_cast<size_t>(i)] = i;
    Rng rng(mix_seed(seed, 0x501D));
    for (int64_t i = n_ids - 1; i > 0; --i) {
        int64_t j = static_cast<int64_t>(rng.below(static_cast<uint64_t>(i + 1)));
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    int64_t n_hold = std::max<int64_t>(1, std::llround(fraction * static_cast<double>(n_ids)));
    std::vector<char> flags(static_cast<size_t>(n_ids), 0);
    for (int64_t i = 0; i < n_hold; ++i) flags[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
    return flags;
}

template <typename T>
Tensor<T> regression_targets(const ToyDataset& ds, const std::vector<int64_t>& idx, bool identity) {
    Tensor<T> out({static_cast<int64_t>(idx.size()), identity ? 5 : 3});
    for (size_t i = 0; i < idx.size(); ++i) {
        const auto& item = ds.items[static_cast<size_t>(idx[i])];
        if (identity) {
            auto t = id_target(ds.identities[static_cast<size_t>(item.identity)]);
            for (int64_t j = 0; j < 5; ++j)
                out.at(static_cast<int64_t>(i), j) = static_cast<T>(t[static_cast<size_t>(j)]);
        } else {
            auto t = exp_target(item.expression);
            for (int64_t j = 0; j < 3; ++j)
                out.at(static_cast<int64_t>(i), j) = static_cast<T>(t[static_cast<size_t>(j)]);
        }
    }
    return out;
}

// mean pooled feature over the given items, computed in batches
template <typename T, typename Net>
Tensor<T> feature_mean(const Net& net, const ToyDataset& ds, const std::vector<int64_t>& idx,
                       int64_t batch) {
    NoGradGuard ng;
    Tensor<T> mean = Tensor<T>::zeros({kEmbedDim});
    for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(batch)) {
        std::vector<int64_t> chunk(idx.begin() + static_cast<int64_t>(start),
                                   idx.begin() + static_cast<int64_t>(std::min(
                                                     idx.size(), start + static_cast<size_t>(batch))));
        auto f = net.features(Var<T>(gather_images<T>(ds.images, chunk)));
        for (int64_t r = 0; r < f.shape()[0]; ++r)
            for (int64_t j = 0; j < kEmbedDim; ++j) mean.data()[j] += f.value().at(r, j);
    }
    for (int64_t j = 0; j < kEmbedDim; ++j)
        mean.data()[j] /= static_cast<T>(static_cast<int64_t>(idx.size()));
    return mean;
}

template <typename T, typename Net>
Tensor<T> embed_items(const Net& net, const ToyDataset& ds, const std::vector<int64_t>& idx,
                      int64_t batch) {
    NoGradGuard ng;
    Tensor<T> out({static_cast<int64_t>(idx.size()), kEmbedDim});
    for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(batch)) {
        std::vector<int64_t> chunk(idx.begin() + static_cast<int64_t>(start),
                                   idx.begin() + static_cast<int64_t>(std::min(
                                                     idx.size(), start + static_cast<size_t>(batch))));
        auto e = net.embed(Var<T>(gather_images<T>(ds.images, chunk)));
        std::memcpy(out.data() + static_cast<int64_t>(start) * kEmbedDim, e.value().data(),
                    sizeof(T) * static_cast<size_t>(e.value().numel()));
    }
    return out;
}

// mean within-identity cosine minus mean cross-identity cosine over all pairs
template <typename T>
double embedding_separation(const Tensor<T>& emb, const std::vector<int32_t>& identity_of) {
    int64_t m = emb.shape()[0];
    Tensor<T> gram({m, m});
    gemm(false, true, m, m, kEmbedDim, T(1), emb.data(), kEmbedDim, emb.data(), kEmbedDim, T(0),
         gram.data(), m);
    double within = 0.0, cross = 0.0;
    int64_t nw = 0, nc = 0;
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = i + 1; j < m; ++j) {
            if (identity_of[static_cast<size_t>(i)] == identity_of[static_cast<size_t>(j)]) {
                within += gram.at(i, j);
                ++nw;
            } else {
                cross += gram.at(i, j);
                ++nc;
            }
        }
    if (nw == 0 || nc == 0) return 0.0;
    return within / static_cast<double>(nw) - cross / static_cast<double>(nc);
}

inline void split_items(const ToyDataset& ds, const std::vector<char>& hold,
                        std::vector<int64_t>& train_idx, std::vector<int64_t>& hold_idx) {
    for (int64_t i = 0; i < ds.size(); ++i) {
        if (hold[static_cast<size_t>(ds.items[static_cast<size_t>(i)].identity)])
            hold_idx.push_back(i);
        else
            train_idx.push_back(i);
    }
}

inline void check_pretrain_inputs(const ToyDataset& ds, const EncoderTrainConfig& cfg) {
    if (static_cast<int64_t>(ds.identities.size()) < 50)
        throw ConfigError("encoder pretraining needs at least 50 identities, got " +
                          std::to_string(ds.identities.size()));
    if (static_cast<int64_t>(ds.identities.size()) < cfg.batch)
        throw ConfigError("fewer identities (" + std::to_string(ds.identities.size()) +
                          ") than batch size (" + std::to_string(cfg.batch) + ")");
}

}  // namespace detail

inline FaceEncoder<float> train_face_encoder(const ToyDataset& ds, const EncoderTrainConfig& cfg,
                                             bool identity) {
    detail::check_pretrain_inputs(ds, cfg);
    std::vector<int64_t> train_idx, hold_idx;
    auto hold = detail::holdout_identities(static_cast<int64_t>(ds.identities.size()),
                                           cfg.holdout_fraction, cfg.seed);
    detail::split_items(ds, hold, train_idx, hold_idx);
    if (train_idx.empty() || hold_idx.empty())
        throw ConfigError("identity split produced an empty partition");

    int64_t k = static_cast<int64_t>(ds.classes.size());
    Rng mrng(mix_seed(cfg.seed, identity ? 0x1DE0 : 0xE420));
    FaceEncoder<float> enc(identity ? "identity" : "expression", identity ? 5 : 3,
                           identity ? 0 : k, mrng);
    Params<float> params;
    enc.collect(params);
    AdamW<float> opt;
    opt.lr = static_cast<float>(cfg.lr);

    Rng brng(mix_seed(cfg.seed, 0xBA7C));
    std::vector<int64_t> batch_idx(static_cast<size_t>(cfg.batch));
    for (int64_t step = 0; step < cfg.steps; ++step) {
        for (auto& b : batch_idx)
            b = train_idx[static_cast<size_t>(brng.below(train_idx.size()))];
        auto images = Var<float>(detail::gather_images<float>(ds.images, batch_idx));
        auto targets = Var<float>(detail::regression_targets<float>(ds, batch_idx, identity));
        auto feats = enc.features(images);
        auto loss = mse_loss(enc.head.forward(feats), targets);
        if (!identity) {
            std::vector<int64_t> labels(batch_idx.size());
            for (size_t i = 0; i < batch_idx.size(); ++i)
                labels[i] = ds.items[static_cast<size_t>(batch_idx[i])].class_id;
            loss = add(loss, mul_scalar(cross_entropy_logits(enc.class_head.forward(feats), labels),
                                        0.2f));
        }
        zero_grads(params);
        loss.backward();
        opt.step(params);
    }

    enc.center = detail::feature_mean<float>(enc, ds, train_idx, cfg.batch);

    // held-out validation statistics, stored with the checkpoint
    {
        NoGradGuard ng;
        double mse = 0.0;
        int64_t correct = 0;
        for (size_t start = 0; start < hold_idx.size(); start += static_cast<size_t>(cfg.batch)) {
            std::vector<int64_t> chunk(
                hold_idx.begin() + static_cast<int64_t>(start),
                hold_idx.begin() +
                    static_cast<int64_t>(std::min(hold_idx.size(), start + static_cast<size_t>(cfg.batch))));
            auto images = Var<float>(detail::gather_images<float>(ds.images, chunk));
            auto feats = enc.features(images);
            auto pred = enc.head.forward(feats);
            auto targets = detail::regression_targets<float>(ds, chunk, identity);
            for (int64_t i = 0; i < pred.value().numel(); ++i)
                mse += static_cast<double>(pred.value().data()[i] - targets.data()[i]) *
                       static_cast<double>(pred.value().data()[i] - targets.data()[i]);
            if (!identity) {
                auto logits = enc.class_head.forward(feats);
                for (int64_t r = 0; r < logits.shape()[0]; ++r) {
                    int64_t best = 0;
                    for (int64_t c = 1; c < k; ++c)
                        if (logits.value().at(r, c) > logits.value().at(r, best)) best = c;
                    if (best == ds.items[static_cast<size_t>(chunk[static_cast<size_t>(r)])].class_id)
                        ++correct;
                }
            }
        }
        mse /= static_cast<double>(static_cast<int64_t>(hold_idx.size()) * enc.target_dim);

        auto emb = detail::embed_items<float>(enc, ds, hold_idx, cfg.batch);
        std::vector<int32_t> ids(hold_idx.size());
        for (size_t i = 0; i < hold_idx.size(); ++i)
            ids[i] = ds.items[static_cast<size_t>(hold_idx[i])].identity;
        double separation = detail::embedding_separation(emb, ids);

        enc.stats = {{"holdout_mse", mse},
                     {"separation", separation},
                     {"holdout_items", hold_idx.size()},
                     {"train_items", train_idx.size()}};
        if (!identity)
            enc.stats["holdout_accuracy"] =
                static_cast<double>(correct) / static_cast<double>(hold_idx.size());
    }
    enc.freeze();
    return enc;
}

inline FaceEncoder<float> train_identity_encoder(const ToyDataset& ds,
                                                 const EncoderTrainConfig& cfg) {
    return train_face_encoder(ds, cfg, true);
}
inline FaceEncoder<float> train_expression_encoder(const ToyDataset& ds,
                                                   const EncoderTrainConfig& cfg) {
    return train_face_encoder(ds, cfg, false);
}

inline GenericEmbedder<float> train_generic_embedder(const ToyDataset& ds,
                                                     const EncoderTrainConfig& cfg) {
    detail::check_pretrain_inputs(ds, cfg);
    if (ds.resolution != 32)
        throw ConfigError("generic embedder decoder is fixed to 32x32 input");
    std::vector<int64_t> train_idx, hold_idx;
    auto hold = detail::holdout_identities(static_cast<int64_t>(ds.identities.size()),
                                           cfg.holdout_fraction, cfg.seed);
    detail::split_items(ds, hold, train_idx, hold_idx);

    Rng mrng(mix_seed(cfg.seed, 0x6E7E));
    GenericEmbedder<float> emb(mrng);
    Params<float> params;
    emb.collect(params);
    AdamW<float> opt;
    opt.lr = static_cast<float>(cfg.lr);

    Rng brng(mix_seed(cfg.seed, 0xBA7D));
    std::vector<int64_t> batch_idx(static_cast<size_t>(cfg.batch));
    for (int64_t step = 0; step < cfg.steps; ++step) {
        for (auto& b : batch_idx)
            b = train_idx[static_cast<size_t>(brng.below(train_idx.size()))];
        auto images = Var<float>(detail::gather_images<float>(ds.images, batch_idx));
        auto loss = mse_loss(emb.reconstruct(images), images);
        zero_grads(params);
        loss.backward();
        opt.step(params);
    }

    emb.center = detail::feature_mean<float>(emb, ds, train_idx, cfg.batch);
    {
        NoGradGuard ng;
        double mse = 0.0;
        int64_t count = 0;
        for (size_t start = 0; start < hold_idx.size(); start += static_cast<size_t>(cfg.batch)) {
            std::vector<int64_t> chunk(
                hold_idx.begin() + static_cast<int64_t>(start),
                hold_idx.begin() +
                    static_cast<int64_t>(std::min(hold_idx.size(), start + static_cast<size_t>(cfg.batch))));
            auto images = Var<float>(detail::gather_images<float>(ds.images, chunk));
            auto rec = emb.reconstruct(images);
            for (int64_t i = 0; i < rec.value().numel(); ++i)
                mse += static_cast<double>(rec.value().data()[i] - images.value().data()[i]) *
                       static_cast<double>(rec.value().data()[i] - images.value().data()[i]);
            count += rec.value().numel();
        }
        emb.stats = {{"holdout_recon_mse", mse / static_cast<double>(count)},
                     {"holdout_items", hold_idx.size()},
                     {"train_items", train_idx.size()}};
    }
    emb.freeze();
    return emb;
}

// ---------------------------------------------------------------------------
// checkpoints (validation stats ride along in the manifest)
// ---------------------------------------------------------------------------

template <typename T>
void save_face_encoder(const std::string& dir, FaceEncoder<T>& enc) {
    Params<T> params;
    enc.collect(params);
    json center = json::array();
    for (int64_t i = 0; i < enc.center.numel(); ++i) center.push_back(enc.center.data()[i]);
    save_tensors(dir, params,
                 {{"kind", enc.kind},
                  {"target_dim", enc.target_dim},
                  {"num_classes", enc.num_classes},
                  {"center", center},
                  {"stats", enc.stats}});
}

template <typename T>
FaceEncoder<T> load_face_encoder(const std::string& dir) {
    json manifest = read_json_file(dir + "/manifest.json");
    const json& meta = manifest.at("meta");
    Rng rng(0);
    FaceEncoder<T> enc(meta.at("kind"), meta.at("target_dim"), meta.at("num_classes"), rng);
    Params<T> params;
    enc.collect(params);
    load_into(params, dir);
    const json& center = meta.at("center");
    for (int64_t i = 0; i < enc.center.numel(); ++i)
        enc.center.data()[i] = static_cast<T>(center.at(static_cast<size_t>(i)).get<double>());
    enc.stats = meta.at("stats");
    if (enc.kind == "identity") {
        double sep = enc.stats.value("separation", 0.0);
        if (!(sep > 0.3))
            throw ConfigError("identity encoder checkpoint separation " + std::to_string(sep) +
                              " below required 0.3");
    }
    enc.freeze();
    return enc;
}

template <typename T>
void save_generic_embedder(const std::string& dir, GenericEmbedder<T>& emb) {
    Params<T> params;
    emb.collect(params);
    json center = json::array();
    for (int64_t i = 0; i < emb.center.numel(); ++i) center.push_back(emb.center.data()[i]);
    save_tensors(dir, params, {{"kind", "generic"}, {"center", center}, {"stats", emb.stats}});
}

template <typename T>
GenericEmbedder<T> load_generic_embedder(const std::string& dir) {
    json manifest = read_json_file(dir + "/manifest.json");
    const json& meta = manifest.at("meta");
    if (meta.value("kind", "") != "generic")
        throw IoError(dir + ": not a generic embedder checkpoint");
    Rng rng(0);
    GenericEmbedder<T> emb(rng);
    Params<T> params;
    emb.collect(params);
    load_into(params, dir);
    const json& center = meta.at("center");
    for (int64_t i = 0; i < emb.center.numel(); ++i)
        emb.center.data()[i] = static_cast<T>(center.at(static_cast<size_t>(i)).get<double>());
    emb.stats = meta.at("stats");
    emb.freeze();
    return emb;
}

// ---------------------------------------------------------------------------
// projection and fusion
// ---------------------------------------------------------------------------

template <typename T>
struct ProjectionNet {
    Linear<T> fc1;  // D_e -> hidden
    Linear<T> fc2;  // hidden -> N*d
    LayerNormAffine<T> ln;
    int64_t n_tokens = 4;
    int64_t d = 128;

    ProjectionNet() = default;
    ProjectionNet(int64_t in_dim, int64_t hidden, int64_t n, int64_t width, Rng& rng)
        : fc1(in_dim, hidden, rng), fc2(hidden, n * width, rng), ln(width), n_tokens(n), d(width) {}

    // [B, D_e] -> [B, N, d]
    Var<T> forward(const Var<T>& e) const {
        if (e.shape().size() != 2 || e.shape()[1] != fc1.w.shape()[0])
            throw ShapeError("project: embedding shape " + shape_str(e.shape()) + ", expected [B," +
                             std::to_string(fc1.w.shape()[0]) + "]");
        auto h = fc2.forward(gelu(fc1.forward(e)));
        return ln.forward(reshape(h, {e.shape()[0], n_tokens, d}));
    }

    void collect(const std::string& p, Params<T>& out) {
        fc1.collect(p + ".fc1", out);
        fc2.collect(p + ".fc2", out);
        ln.collect(p + ".ln", out);
    }
};

// [D_e] -> [N, d], or [B, D_e] -> [B, N, d]
template <typename T>
Var<T> project(const Var<T>& embedding, const ProjectionNet<T>& net) {
    if (embedding.shape().size() == 1) {
        auto out = net.forward(reshape(embedding, {1, embedding.shape()[0]}));
        return reshape(out, {net.n_tokens, net.d});
    }
    return net.forward(embedding);
}

template <typename T>
struct FusionNet {
    Linear<T> fc1, fc2;  // d -> hidden -> d
    LayerNormAffine<T> ln;

    FusionNet() = default;
    FusionNet(int64_t d, int64_t hidden, Rng& rng)
        : fc1(d, hidden, rng), fc2(hidden, d, rng), ln(d) {}

    Var<T> forward_sum(const Var<T>& sum) const {
        return ln.forward(fc2.forward(gelu(fc1.forward(sum))));
    }

    void collect(const std::string& p, Params<T>& out) {
        fc1.collect(p + ".fc1", out);
        fc2.collect(p + ".fc2", out);
        ln.collect(p + ".ln", out);
    }
};

// token-wise additive fusion, then the two-layer MLP with layer norm
template <typename T>
Var<T> fuse(const Var<T>& id_tokens, const Var<T>& exp_tokens, const FusionNet<T>& net) {
    check_same_shape("fuse", id_tokens.value(), exp_tokens.value());
    return net.forward_sum(add(id_tokens, exp_tokens));
}

// identity image + expression exemplar -> N fused condition tokens
template <typename T>
struct ConditionPipeline {
    ProjectionNet<T> id_proj, exp_proj;
    FusionNet<T> fusion;

    ConditionPipeline() = default;
    ConditionPipeline(int64_t n, int64_t d, Rng& rng)
        : id_proj(kEmbedDim, 256, n, d, rng),
          exp_proj(kEmbedDim, 256, n, d, rng),
          fusion(d, d, rng) {}

    // [B, D_e] x [B, D_e] -> [B, N, d]
    Var<T> tokens(const Var<T>& id_emb, const Var<T>& exp_emb) const {
        return fuse(id_proj.forward(id_emb), exp_proj.forward(exp_emb), fusion);
    }

    void collect(const std::string& p, Params<T>& out) {
        id_proj.collect(p + ".id_proj", out);
        exp_proj.collect(p + ".exp_proj", out);
        fusion.collect(p + ".fusion", out);
    }
};

}  // namespace faceflow
