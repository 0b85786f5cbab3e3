#pragma once

#include <algorithm>
#include <chrono>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "encoders.hpp"
#include "flow.hpp"
#include "mmdit.hpp"

namespace faceflow {

// Composite objective: velocity regression plus identity-cosine and
// expression-MSE penalties evaluated on the decoded one-step estimate.
// Gradients reach the model through the estimate; encoder weights stay
// frozen.

struct LossWeights {
    double beta1 = 0.1;  // identity term
    double beta2 = 0.1;  // expression term
};

inline double combine_terms(const LossWeights& w, double rf, double id, double exp) {
    return rf + w.beta1 * id + w.beta2 * exp;
}

struct DropoutPolicy {
    double p_text = 0.05;
    double p_cond = 0.05;
    double p_both = 0.05;

    void validate() const {
        if (p_text < 0 || p_cond < 0 || p_both < 0 || p_text + p_cond + p_both > 1.0)
            throw ConfigError("dropout probabilities must be nonnegative and sum to at most 1");
    }

    // one uniform draw decides the sample's fate: (drop_text, drop_cond)
    std::pair<bool, bool> sample(Rng& rng) const {
        double u = rng.uniform();
        if (u < p_text) return {true, false};
        if (u < p_text + p_cond) return {false, true};
        if (u < p_text + p_cond + p_both) return {true, true};
        return {false, false};
    }
};

// backbone + condition pipeline + vocabulary: everything generation needs
template <typename T>
struct GenSystem {
    MMDiT<T> backbone;
    ConditionPipeline<T> cond;
    TextVocab vocab;

    GenSystem() = default;
    GenSystem(MMDiTConfig cfg, TextVocab v, Rng& rng)
        : backbone(cfg, rng), cond(cfg.cond_tokens, cfg.d, rng), vocab(std::move(v)) {
        if (static_cast<int64_t>(vocab.size()) != cfg.vocab)
            throw ConfigError("vocabulary size does not match model configuration");
    }

    Params<T> all_params() {
        Params<T> out = backbone.all_params();
        cond.collect("cond", out);
        return out;
    }
};

template <typename T>
void save_system(const std::string& dir, GenSystem<T>& sys, json extra_meta = json::object()) {
    extra_meta["config"] = sys.backbone.cfg.to_json();
    extra_meta["vocab"] = sys.vocab.to_json();
    auto params = sys.all_params();
    save_tensors(dir, params, extra_meta);
}

template <typename T>
struct LoadedSystem {
    GenSystem<T> sys;
    json meta;
};

template <typename T>
LoadedSystem<T> load_system(const std::string& dir) {
    json manifest = read_json_file(dir + "/manifest.json");
    MMDiTConfig cfg = MMDiTConfig::from_json(manifest.at("meta").at("config"));
    TextVocab vocab = TextVocab::from_json(manifest.at("meta").at("vocab"));
    Rng rng(0);
    LoadedSystem<T> out{GenSystem<T>(cfg, vocab, rng), json{}};
    auto params = out.sys.all_params();
    out.meta = load_into(params, dir);
    return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// 1 - cosine similarity of two embeddings; range [0, 2]
template <typename T>
double identity_loss_from_embeddings(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape("identity_loss", a, b);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        dot += static_cast<double>(a.data()[i]) * b.data()[i];
        na += static_cast<double>(a.data()[i]) * a.data()[i];
        nb += static_cast<double>(b.data()[i]) * b.data()[i];
    }
    return 1.0 - dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
}

template <typename T>
double expression_loss_from_embeddings(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape("expression_loss", a, b);
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        double d = static_cast<double>(a.data()[i]) - b.data()[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.numel());
}

inline double identity_loss(const FaceImage& ref, const Tensor<float>& gen,
                            const FaceEncoder<float>& enc) {
    check_same_shape("identity_loss images", ref.pixels, gen);
    auto ea = enc.embed_one(ref.pixels).embedding;
    auto eb = enc.embed_one(gen).embedding;
    if (ea.has_nonfinite() || eb.has_nonfinite())
        throw NumericError("identity embedding is non-finite");
    return identity_loss_from_embeddings(ea, eb);
}

inline double expression_loss(const FaceImage& ref_exp, const Tensor<float>& gen,
                              const FaceEncoder<float>& enc) {
    check_same_shape("expression_loss images", ref_exp.pixels, gen);
    auto ea = enc.embed_one(ref_exp.pixels).embedding;
    auto eb = enc.embed_one(gen).embedding;
    if (ea.has_nonfinite() || eb.has_nonfinite())
        throw NumericError("expression embedding is non-finite");
    return expression_loss_from_embeddings(ea, eb);
}

// ---------------------------------------------------------------------------
// composite loss
// ---------------------------------------------------------------------------

// one training batch: all images in [0,1] dataset space
struct TrainBatch {
    Tensor<float> identity_images;  // [B,R,R,3] neutral reference render per item
    Tensor<float> exemplars;        // [B,R,R,3] retrieved expression exemplar
    Tensor<float> targets;          // [B,R,R,3] target render (flow endpoint source)
    std::vector<int64_t> text_ids;  // [B * text_len]

    int64_t size() const { return identity_images.shape()[0]; }
};

struct LossTerms {
    double total = 0.0, rf = 0.0, id = 0.0, exp = 0.0;
    int64_t cond_present = 0;  // samples that kept their condition tokens
};

namespace detail {

template <typename T>
Tensor<T> cast_rows(const Tensor<float>& src, const std::vector<int64_t>& idx) {
    Shape s = src.shape();
    int64_t stride = 1;
    for (size_t i = 1; i < s.size(); ++i) stride *= s[i];
    s[0] = static_cast<int64_t>(idx.size());
    Tensor<T> out(s);
    for (size_t i = 0; i < idx.size(); ++i)
        for (int64_t j = 0; j < stride; ++j)
            out.data()[static_cast<int64_t>(i) * stride + j] =
                static_cast<T>(src.data()[idx[i] * stride + j]);
    return out;
}

template <typename T>
void require_finite(const Var<T>& term, const char* name) {
    if (term.value().has_nonfinite())
        throw NumericError(std::string(name) + " loss is non-finite");
}

}  // namespace detail

// Velocity callback signature mirrors the backbone forward; the production
// overload below binds it to a GenSystem. RNG consumption order is fixed:
// per-sample t, then the noise tensor, then per-sample dropout draws.
template <typename T, typename VelocityFn>
std::pair<Var<T>, LossTerms> composite_loss_fn(const TrainBatch& batch, VelocityFn&& velocity,
                                               ConditionPipeline<T>* cond_pipe,
                                               const FaceEncoder<T>* id_enc,
                                               const FaceEncoder<T>* exp_enc,
                                               const LossWeights& weights,
                                               const DropoutPolicy& policy,
                                               const TimeDistribution& tdist, Rng& rng) {
    policy.validate();
    int64_t b = batch.size();
    if (b < 1) throw ShapeError("composite loss: empty batch");
    check_same_shape("composite batch", batch.identity_images, batch.exemplars);
    check_same_shape("composite batch", batch.identity_images, batch.targets);
    if (cond_pipe && (!id_enc || !exp_enc))
        throw ConfigError("conditioned loss requires both encoders");

    std::vector<double> t(static_cast<size_t>(b));
    for (auto& ti : t) ti = tdist.sample(rng);
    int64_t r = batch.targets.shape()[1];
    Tensor<T> x0 = Tensor<T>::randn({b, r, r, 3}, rng);
    std::vector<char> drop_text(static_cast<size_t>(b), 0), drop_cond(static_cast<size_t>(b), 0);
    for (int64_t i = 0; i < b; ++i) {
        auto [dt, dc] = policy.sample(rng);
        drop_text[static_cast<size_t>(i)] = dt ? 1 : 0;
        drop_cond[static_cast<size_t>(i)] = cond_pipe ? (dc ? 1 : 0) : 1;
    }

    // x1 = 2*img - 1; x_t = (1-t) x0 + t x1 per sample
    Tensor<T> x1({b, r, r, 3});
    Tensor<T> xt({b, r, r, 3});
    int64_t stride = r * r * 3;
    for (int64_t i = 0; i < b; ++i) {
        T ti = static_cast<T>(t[static_cast<size_t>(i)]);
        for (int64_t j = 0; j < stride; ++j) {
            T one = T(2) * static_cast<T>(batch.targets.data()[i * stride + j]) - T(1);
            x1.data()[i * stride + j] = one;
            xt.data()[i * stride + j] = (T(1) - ti) * x0.data()[i * stride + j] + ti * one;
        }
    }

    int64_t text_len = static_cast<int64_t>(batch.text_ids.size()) / b;
    std::vector<int64_t> present, absent;
    for (int64_t i = 0; i < b; ++i)
        (drop_cond[static_cast<size_t>(i)] ? absent : present).push_back(i);

    auto subset_ids = [&](const std::vector<int64_t>& idx) {
        std::vector<int64_t> out(idx.size() * static_cast<size_t>(text_len));
        for (size_t i = 0; i < idx.size(); ++i)
            for (int64_t j = 0; j < text_len; ++j)
                out[i * static_cast<size_t>(text_len) + static_cast<size_t>(j)] =
                    drop_text[static_cast<size_t>(idx[i])] ? 0
                                                           : batch.text_ids[static_cast<size_t>(
                                                                 idx[i] * text_len + j)];
        return out;
    };
    auto subset_rows = [&](const Tensor<T>& src, const std::vector<int64_t>& idx) {
        Shape s = src.shape();
        s[0] = static_cast<int64_t>(idx.size());
        Tensor<T> out(s);
        for (size_t i = 0; i < idx.size(); ++i)
            std::memcpy(out.data() + static_cast<int64_t>(i) * stride, src.data() + idx[i] * stride,
                        sizeof(T) * static_cast<size_t>(stride));
        return out;
    };
    auto subset_t = [&](const std::vector<int64_t>& idx) {
        std::vector<double> out(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) out[i] = t[static_cast<size_t>(idx[i])];
        return out;
    };

    Var<T> rf, id_term, exp_term;
    bool have_rf = false;

    auto accumulate_rf = [&](const Var<T>& v, const Tensor<T>& sub_x1, const Tensor<T>& sub_x0,
                             int64_t count) {
        Tensor<T> target = sub_x1;
        for (int64_t i = 0; i < target.numel(); ++i) target.data()[i] -= sub_x0.data()[i];
        auto term = mul_scalar(mse_loss(v, Var<T>(std::move(target))),
                               static_cast<T>(static_cast<double>(count) / static_cast<double>(b)));
        rf = have_rf ? add(rf, term) : term;
        have_rf = true;
    };

    // conditioned subset
    if (!present.empty()) {
        auto sub_idx = present;
        auto xt_sub = Var<T>(subset_rows(xt, sub_idx));
        auto id_imgs = Var<T>(detail::cast_rows<T>(batch.identity_images, sub_idx));
        auto ex_imgs = Var<T>(detail::cast_rows<T>(batch.exemplars, sub_idx));
        auto id_emb = id_enc->embed(id_imgs);
        auto exp_emb = exp_enc->embed(ex_imgs);
        auto tokens = cond_pipe->tokens(id_emb, exp_emb);
        auto v = velocity(xt_sub, subset_t(sub_idx), subset_ids(sub_idx), &tokens);
        accumulate_rf(v, subset_rows(x1, sub_idx), subset_rows(x0, sub_idx),
                      static_cast<int64_t>(sub_idx.size()));

        // one-step estimate, decoded (no clamp: gradients must pass)
        std::vector<T> coef(sub_idx.size());
        for (size_t i = 0; i < sub_idx.size(); ++i)
            coef[i] = static_cast<T>(1.0 - t[static_cast<size_t>(sub_idx[i])]);
        auto est = axpy_rows(xt_sub, v, coef);
        auto gen = add_scalar(mul_scalar(est, T(0.5)), T(0.5));
        auto gen_id_emb = id_enc->embed(gen);
        auto gen_exp_emb = exp_enc->embed(gen);
        id_term = mean_all(rsub_scalar(T(1), cosine_sim_rows(gen_id_emb, id_emb)));
        exp_term = mse_loss(gen_exp_emb, exp_emb);
    }

    // unconditioned subset
    if (!absent.empty()) {
        auto xt_sub = Var<T>(subset_rows(xt, absent));
        auto v = velocity(xt_sub, subset_t(absent), subset_ids(absent), nullptr);
        accumulate_rf(v, subset_rows(x1, absent), subset_rows(x0, absent),
                      static_cast<int64_t>(absent.size()));
    }

    detail::require_finite(rf, "rf");
    LossTerms terms;
    terms.rf = static_cast<double>(rf.value().data()[0]);
    terms.cond_present = static_cast<int64_t>(present.size());

    Var<T> total = rf;
    if (id_term.defined()) {
        detail::require_finite(id_term, "identity");
        detail::require_finite(exp_term, "expression");
        terms.id = static_cast<double>(id_term.value().data()[0]);
        terms.exp = static_cast<double>(exp_term.value().data()[0]);
        total = add(total, add(mul_scalar(id_term, static_cast<T>(weights.beta1)),
                               mul_scalar(exp_term, static_cast<T>(weights.beta2))));
    }
    detail::require_finite(total, "total");
    terms.total = static_cast<double>(total.value().data()[0]);
    return {total, terms};
}

template <typename T>
std::pair<Var<T>, LossTerms> composite_loss(const TrainBatch& batch, GenSystem<T>& sys,
                                            const FaceEncoder<T>& id_enc,
                                            const FaceEncoder<T>& exp_enc,
                                            const LossWeights& weights,
                                            const DropoutPolicy& policy,
                                            const TimeDistribution& tdist, bool conditioned,
                                            Rng& rng) {
    auto velocity = [&sys](const Var<T>& xt, const std::vector<double>& t,
                           const std::vector<int64_t>& ids, const Var<T>* cond) {
        return sys.backbone.forward(xt, t, ids, cond);
    };
    return composite_loss_fn<T>(batch, velocity, conditioned ? &sys.cond : nullptr,
                                &id_enc, &exp_enc, weights, policy, tdist, rng);
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

struct TrainConfig {
    int64_t steps = 20000;
    int64_t batch = 32;
    double lr = 1e-4;
    double weight_decay = 1e-2;
    LossWeights weights;
    DropoutPolicy dropout;
    TimeDistribution tdist;
    bool adapter_only = false;  // freeze backbone, train adapters + pipeline
    bool conditioned = false;   // build and feed condition tokens
    uint64_t seed = 1;
    int64_t checkpoint_every = 0;  // 0 disables periodic checkpoints
    std::string out_dir;           // empty: keep logs in memory only

    json to_json() const {
        return {{"steps", steps},
                {"batch", batch},
                {"lr", lr},
                {"weight_decay", weight_decay},
                {"beta1", weights.beta1},
                {"beta2", weights.beta2},
                {"p_text", dropout.p_text},
                {"p_cond", dropout.p_cond},
                {"p_both", dropout.p_both},
                {"adapter_only", adapter_only},
                {"conditioned", conditioned},
                {"seed", seed}};
    }
};

struct LossRow {
    int64_t step = 0;
    double total = 0, rf = 0, id = 0, exp = 0, lr = 0, wall = 0;
};

class Trainer {
public:
    Trainer(GenSystem<float>& sys, const ToyDataset& ds, const ExemplarBank& bank,
            const FaceEncoder<float>& id_enc, const FaceEncoder<float>& exp_enc, TrainConfig cfg)
        : sys_(sys),
          ds_(ds),
          bank_(bank),
          id_enc_(id_enc),
          exp_enc_(exp_enc),
          cfg_(std::move(cfg)),
          rng_(mix_seed(cfg_.seed, 0x7EA1)) {
        if (ds_.resolution != sys_.backbone.cfg.image_size)
            throw ConfigError("dataset resolution does not match model image size");
        cfg_.dropout.validate();

        // stage-dependent trainable set; list order is the serialization order
        if (cfg_.adapter_only) {
            sys_.backbone.set_trainable(false, true);
            sys_.backbone.collect_adapters(trainable_);
            sys_.cond.collect("cond", trainable_);
            for (auto& [n, v] : trainable_) v.node->requires_grad = true;
        } else {
            sys_.backbone.set_trainable(true, true);
            trainable_ = sys_.backbone.all_params();
            if (cfg_.conditioned) sys_.cond.collect("cond", trainable_);
        }
        opt_.lr = static_cast<float>(cfg_.lr);
        opt_.weight_decay = static_cast<float>(cfg_.weight_decay);

        // identity reference renders, one per dataset identity
        int64_t n = static_cast<int64_t>(ds_.identities.size());
        int64_t px = static_cast<int64_t>(ds_.resolution) * ds_.resolution * 3;
        id_refs_ = Tensor<float>({n, ds_.resolution, ds_.resolution, 3});
        for (int64_t i = 0; i < n; ++i) {
            auto ref = identity_reference(ds_.identities[static_cast<size_t>(i)], ds_.resolution);
            std::memcpy(id_refs_.data() + i * px, ref.pixels.data(),
                        sizeof(float) * static_cast<size_t>(px));
        }
        start_ = std::chrono::steady_clock::now();
    }

    TrainBatch next_batch() {
        int64_t bsz = cfg_.batch;
        int64_t px = static_cast<int64_t>(ds_.resolution) * ds_.resolution * 3;
        TrainBatch batch;
        batch.identity_images = Tensor<float>({bsz, ds_.resolution, ds_.resolution, 3});
        batch.exemplars = Tensor<float>({bsz, ds_.resolution, ds_.resolution, 3});
        batch.targets = Tensor<float>({bsz, ds_.resolution, ds_.resolution, 3});
        batch.text_ids.resize(static_cast<size_t>(bsz) * 2);
        for (int64_t i = 0; i < bsz; ++i) {
            int64_t item = static_cast<int64_t>(rng_.below(static_cast<uint64_t>(ds_.size())));
            const auto& it = ds_.items[static_cast<size_t>(item)];
            std::memcpy(batch.targets.data() + i * px, ds_.images.data() + item * px,
                        sizeof(float) * static_cast<size_t>(px));
            std::memcpy(batch.identity_images.data() + i * px,
                        id_refs_.data() + static_cast<int64_t>(it.identity) * px,
                        sizeof(float) * static_cast<size_t>(px));
            const auto& ex = retrieve_exemplar(bank_, it.class_id, rng_.next());
            std::memcpy(batch.exemplars.data() + i * px, ex.pixels.data(),
                        sizeof(float) * static_cast<size_t>(px));
            batch.text_ids[static_cast<size_t>(2 * i)] = sys_.vocab.class_token(it.class_id);
            batch.text_ids[static_cast<size_t>(2 * i + 1)] = sys_.vocab.style_token(it.style);
        }
        return batch;
    }

    // one optimizer step; throws after 10 consecutive non-finite losses
    LossRow step() {
        TrainBatch batch = next_batch();
        try {
            auto [total, terms] = composite_loss(batch, sys_, id_enc_, exp_enc_, cfg_.weights,
                                                 cfg_.dropout, cfg_.tdist, cfg_.conditioned, rng_);
            zero_grads(trainable_);
            total.backward();
            opt_.step(trainable_);
            consecutive_bad_ = 0;
            ++step_;
            LossRow row{step_, terms.total, terms.rf, terms.id, terms.exp, cfg_.lr, elapsed()};
            log_.push_back(row);
            append_log_row(row);
            return row;
        } catch (const NumericError&) {
            ++step_;
            if (++consecutive_bad_ >= 10)
                throw Error("training aborted: 10 consecutive non-finite losses at step " +
                            std::to_string(step_));
            throw;
        }
    }

    void run() {
        while (step_ < cfg_.steps) {
            try {
                step();
            } catch (const NumericError&) {
                continue;  // skip the poisoned step; the 10-in-a-row guard rethrows as Error
            }
            if (cfg_.checkpoint_every > 0 && !cfg_.out_dir.empty() &&
                step_ % cfg_.checkpoint_every == 0)
                save_state(cfg_.out_dir + "/state");
        }
        if (!cfg_.out_dir.empty()) save_state(cfg_.out_dir + "/state");
    }

    const std::vector<LossRow>& log() const { return log_; }
    int64_t current_step() const { return step_; }
    const TrainConfig& config() const { return cfg_; }

    void save_state(const std::string& dir) {
        ensure_dir(dir);
        save_system(dir + "/model", sys_, {{"step", step_}});
        Params<float> moments;
        for (size_t i = 0; i < opt_.m.size(); ++i) {
            moments.push_back({"m:" + trainable_[i].first, Var<float>(opt_.m[i])});
            moments.push_back({"v:" + trainable_[i].first, Var<float>(opt_.v[i])});
        }
        save_tensors(dir + "/optim", moments, {{"step_count", opt_.step_count}});
        write_json_file(dir + "/state.json", {{"step", step_},
                                              {"rng_state", rng_.state()},
                                              {"consecutive_bad", consecutive_bad_},
                                              {"config", cfg_.to_json()}});
    }

    void load_state(const std::string& dir) {
        auto params = sys_.all_params();
        load_into(params, dir + "/model");
        auto loaded = load_tensors<float>(dir + "/optim");
        opt_.m.resize(trainable_.size());
        opt_.v.resize(trainable_.size());
        for (size_t i = 0; i < trainable_.size(); ++i) {
            auto mi = loaded.tensors.find("m:" + trainable_[i].first);
            auto vi = loaded.tensors.find("v:" + trainable_[i].first);
            if (mi == loaded.tensors.end() || vi == loaded.tensors.end())
                throw LookupError("optimizer state missing moments for " + trainable_[i].first);
            opt_.m[i] = mi->second;
            opt_.v[i] = vi->second;
        }
        opt_.step_count = loaded.meta.at("step_count").get<int64_t>();
        json st = read_json_file(dir + "/state.json");
        step_ = st.at("step").get<int64_t>();
        rng_.set_state(st.at("rng_state").get<uint64_t>());
        consecutive_bad_ = st.at("consecutive_bad").get<int>();
    }

private:
    double elapsed() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

    void append_log_row(const LossRow& row) {
        if (cfg_.out_dir.empty()) return;
        ensure_dir(cfg_.out_dir);
        std::string path = cfg_.out_dir + "/loss_log.csv";
        bool fresh = !path_exists(path);
        std::ofstream out(path, std::ios::app);
        if (fresh) out << "step,total,rf,id,exp,lr,wall\n";
        out << row.step << ',' << row.total << ',' << row.rf << ',' << row.id << ',' << row.exp
            << ',' << row.lr << ',' << row.wall << '\n';
    }

    GenSystem<float>& sys_;
    const ToyDataset& ds_;
    const ExemplarBank& bank_;
    const FaceEncoder<float>& id_enc_;
    const FaceEncoder<float>& exp_enc_;
    TrainConfig cfg_;
    Params<float> trainable_;
    AdamW<float> opt_;
    Rng rng_;
    Tensor<float> id_refs_;
    int64_t step_ = 0;
    int consecutive_bad_ = 0;
    std::vector<LossRow> log_;
    std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------
// gradient verification on a tiny double-precision system
// ---------------------------------------------------------------------------

struct GradCheckResult {
    int64_t checked = 0;
    int64_t passed = 0;
    double worst_rel = 0.0;
    double fraction() const {
        return checked ? static_cast<double>(passed) / static_cast<double>(checked) : 0.0;
    }
};

// Central finite differences of the composite loss on a d=16 depth-1 model
// over 8x8 images, sampled across all trainable parameters.
inline GradCheckResult check_composite_gradients(int64_t coords, uint64_t seed) {
    MMDiTConfig cfg;
    cfg.d = 16;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.patch = 4;
    cfg.image_size = 8;
    cfg.vocab = 10;
    TextVocab vocab;
    vocab.classes = {"happy", "sad", "surprised", "angry", "neutral"};
    vocab.styles = {"photo", "lego", "clay", "crayon"};

    Rng mrng(mix_seed(seed, 0x6C));
    GenSystem<double> sys(cfg, vocab, mrng);
    // nonzero weights everywhere so no gradient path is trivially silent
    auto params = sys.all_params();
    Rng wrng(mix_seed(seed, 0x6D));
    for (auto& [n, p] : params) p.value() = Tensor<double>::randn(p.shape(), wrng, 0.1);

    FaceEncoder<double> id_enc("identity", 5, 0, mrng);
    FaceEncoder<double> exp_enc("expression", 3, 5, mrng);

    TrainBatch batch;
    Rng brng(mix_seed(seed, 0x6E));
    batch.identity_images = Tensor<float>::uniform({2, 8, 8, 3}, brng);
    batch.exemplars = Tensor<float>::uniform({2, 8, 8, 3}, brng);
    batch.targets = Tensor<float>::uniform({2, 8, 8, 3}, brng);
    batch.text_ids = {1, 6, 2, 7};

    LossWeights weights;
    DropoutPolicy policy;  // defaults; draws replayed identically via rng copy
    TimeDistribution tdist;
    Rng loss_rng(mix_seed(seed, 0x6F));

    auto eval = [&]() {
        Rng r = loss_rng;
        auto [total, terms] =
            composite_loss(batch, sys, id_enc, exp_enc, weights, policy, tdist, true, r);
        return total;
    };

    auto total = eval();
    zero_grads(params);
    total.backward();

    int64_t total_coords = 0;
    for (auto& [n, p] : params) total_coords += p.value().numel();

    GradCheckResult res;
    Rng pick(mix_seed(seed, 0x70));
    const double eps = 1e-3;
    for (int64_t c = 0; c < coords; ++c) {
        int64_t flat = static_cast<int64_t>(pick.below(static_cast<uint64_t>(total_coords)));
        size_t pi = 0;
        while (flat >= params[pi].second.value().numel()) {
            flat -= params[pi].second.value().numel();
            ++pi;
        }
        auto& value = params[pi].second.value();
        double saved = value.data()[flat];
        double analytic = params[pi].second.grad().defined()
                              ? params[pi].second.grad().data()[flat]
                              : 0.0;
        value.data()[flat] = saved + eps;
        double up = eval().value().data()[0];
        value.data()[flat] = saved - eps;
        double down = eval().value().data()[0];
        value.data()[flat] = saved;
        double fd = (up - down) / (2 * eps);
        double rel = std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-8});
        res.worst_rel = std::max(res.worst_rel, rel);
        ++res.checked;
        if (rel < 1e-3) ++res.passed;
    }
    return res;
}

}  // namespace faceflow
