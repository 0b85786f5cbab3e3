#pragma once

#include <algorithm>
#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include "core/image.hpp"
#include "flow.hpp"
#include "metrics.hpp"
#include "training.hpp"

namespace faceflow {

// Inference and evaluation drivers: one identity's expression set is sampled
// as a single batch so consistent attention can share tokens across it.

struct SampleConfig {
    GuidanceConfig guidance;             // scale 5.0, 50 Euler steps
    double text_scale = -1.0;            // class/style token scale; < 0 follows guidance.scale
    bool consistent = true;              // share tokens across the batch
    double rho = 0.5;                    // shared-token fraction
    int style = 0;                       // style token index
    uint64_t seed = 0;                   // noise + token-draw seed
    bool conditioned = true;             // false: unconditional baseline
    bool null_class_token = false;       // ablation: drop the class token

    double effective_text_scale() const { return text_scale < 0 ? guidance.scale : text_scale; }

    json to_json() const {
        return {{"guidance_scale", guidance.scale}, {"guidance_steps", guidance.steps},
                {"text_guidance_scale", effective_text_scale()},
                {"consistent", consistent},         {"rho", rho},
                {"style", style},                   {"seed", seed},
                {"conditioned", conditioned},       {"null_class_token", null_class_token}};
    }
};

// sample one set: a batch of |class_ids| images for a single reference identity
inline GeneratedSet generate_set(GenSystem<float>& sys, const FaceEncoder<float>& id_enc,
                                 const FaceEncoder<float>& exp_enc, const ExemplarBank& bank,
                                 const FaceImage& identity_ref, const std::vector<int>& class_ids,
                                 const SampleConfig& cfg) {
    NoGradGuard ng;
    const MMDiTConfig& mc = sys.backbone.cfg;
    int64_t k = static_cast<int64_t>(class_ids.size());
    if (k < 1) throw DomainError("generate_set: empty class list");
    if (identity_ref.pixels.shape()[0] != mc.image_size)
        throw ShapeError("generate_set: identity image resolution does not match the model");
    int64_t px = mc.image_size * mc.image_size * mc.channels;

    GeneratedSet set;
    set.identity_ref = identity_ref;

    // exemplars, condition tokens, and text ids are fixed across Euler steps
    Tensor<float> id_imgs({k, mc.image_size, mc.image_size, mc.channels});
    Tensor<float> ex_imgs({k, mc.image_size, mc.image_size, mc.channels});
    std::vector<int64_t> text_ids(static_cast<size_t>(k) * 2);
    std::vector<int64_t> null_ids(static_cast<size_t>(k) * 2, sys.vocab.null_id());
    for (int64_t i = 0; i < k; ++i) {
        int cid = class_ids[static_cast<size_t>(i)];
        const FaceImage& ex =
            retrieve_exemplar(bank, cid, mix_seed(cfg.seed, 0xE8, static_cast<uint64_t>(i)));
        GeneratedItem item;
        item.class_id = cid;
        item.exemplar = ex;
        set.items.push_back(std::move(item));
        std::memcpy(id_imgs.data() + i * px, identity_ref.pixels.data(),
                    sizeof(float) * static_cast<size_t>(px));
        std::memcpy(ex_imgs.data() + i * px, ex.pixels.data(),
                    sizeof(float) * static_cast<size_t>(px));
        text_ids[static_cast<size_t>(2 * i)] =
            cfg.null_class_token ? sys.vocab.null_id() : sys.vocab.class_token(cid);
        text_ids[static_cast<size_t>(2 * i + 1)] = sys.vocab.style_token(cfg.style);
    }

    Var<float> cond;
    if (cfg.conditioned) {
        auto id_emb = id_enc.embed(Var<float>(id_imgs));
        auto exp_emb = exp_enc.embed(Var<float>(ex_imgs));
        cond = sys.cond.tokens(id_emb, exp_emb);
    }

    ConsistentAttentionConfig cc;
    cc.enabled = cfg.consistent && k > 1;
    cc.rho = cfg.rho;
    cc.seed = mix_seed(cfg.seed, 0xCC);

    // branch 0: no conditioning; 1: adapter tokens only; 2: adapter + text
    auto velocity = [&](const Tensor<float>& x, double t, int branch) {
        std::vector<double> tv(static_cast<size_t>(k), t);
        Var<float> xv(x);
        if (branch > 0 && cfg.conditioned)
            return sys.backbone
                .forward(xv, tv, branch > 1 ? text_ids : null_ids, &cond, cc)
                .value();
        return sys.backbone.forward(xv, tv, null_ids, nullptr, cc).value();
    };

    Rng noise_rng(mix_seed(cfg.seed, 0xD06E));
    Tensor<float> x0 = Tensor<float>::randn({k, mc.image_size, mc.image_size, mc.channels},
                                            noise_rng);
    DualGuidanceConfig guidance{cfg.guidance.scale, cfg.effective_text_scale(),
                                cfg.guidance.steps};
    if (!cfg.conditioned) guidance = {1.0, 1.0, cfg.guidance.steps};  // single branch
    Tensor<float> x1 = euler_sample_dual<float>(velocity, x0, guidance);

    for (int64_t i = 0; i < k; ++i) {
        Tensor<float> img({mc.image_size, mc.image_size, mc.channels});
        for (int64_t j = 0; j < px; ++j)
            img.data()[j] = std::clamp((x1.data()[i * px + j] + 1.0f) * 0.5f, 0.0f, 1.0f);
        set.items[static_cast<size_t>(i)].image = std::move(img);
    }
    return set;
}

inline void save_generated_set(const std::string& dir, const GeneratedSet& set,
                               const TextVocab& vocab) {
    ensure_dir(dir);
    write_png(dir + "/identity_ref.png", set.identity_ref.pixels);
    std::vector<Tensor<float>> cells;
    std::vector<std::string> labels;
    json index = json::array();
    for (size_t i = 0; i < set.items.size(); ++i) {
        const auto& item = set.items[i];
        std::string name = vocab.classes[static_cast<size_t>(item.class_id)];
        write_png(dir + "/gen_" + name + ".png", item.image);
        write_png(dir + "/exemplar_" + name + ".png", item.exemplar.pixels);
        cells.push_back(item.image);
        labels.push_back(name);
        index.push_back({{"class_id", item.class_id}, {"class", name}});
    }
    write_json_file(dir + "/set.json", {{"items", index}});
    write_png(dir + "/grid.png", make_grid(cells, labels, static_cast<int64_t>(cells.size())));
}

// ---------------------------------------------------------------------------
// held-out evaluation
// ---------------------------------------------------------------------------

struct EvalConfig {
    int n_identities = 50;
    int reals_per_identity = 8;  // renders for the distance distribution
    SampleConfig sample;
    uint64_t seed = 405;

    json to_json() const {
        json j = sample.to_json();
        j["n_identities"] = n_identities;
        j["reals_per_identity"] = reals_per_identity;
        j["eval_seed"] = seed;
        return j;
    }
};

struct EvalResult {
    std::vector<MetricReport> per_identity;
    MetricReport mean;
    IdentityDistanceSummary distances;
    double baseline_id_sim = 0.0;  // unconditional generation, same seeds
};

// identities drawn from a stream disjoint from any dataset seed
inline std::vector<IdentityParams> held_out_identities(int n, uint64_t seed) {
    Rng rng(mix_seed(seed, 0x1DEA));
    std::vector<IdentityParams> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(sample_identity(rng));
    return out;
}

// dataset-like renders of one identity: jittered expressions, mixed styles
inline Tensor<float> render_identity_variants(const IdentityParams& id,
                                              const std::vector<ExpressionClass>& classes, int n,
                                              int resolution, int n_styles, uint64_t seed) {
    Rng rng(mix_seed(seed, 0x4EA1));
    Tensor<float> out({n, resolution, resolution, 3});
    int64_t px = static_cast<int64_t>(resolution) * resolution * 3;
    for (int i = 0; i < n; ++i) {
        const auto& cls = classes[rng.below(classes.size())];
        auto exp = sample_expression(cls, rng);
        int style = static_cast<int>(rng.below(static_cast<uint64_t>(n_styles)));
        auto img = render(id, exp, resolution, style);
        std::memcpy(out.data() + static_cast<int64_t>(i) * px, img.pixels.data(),
                    sizeof(float) * static_cast<size_t>(px));
    }
    return out;
}

template <typename ProgressFn>
EvalResult run_evaluation(GenSystem<float>& sys, const FaceEncoder<float>& id_enc,
                          const FaceEncoder<float>& exp_enc, const GenericEmbedder<float>& embedder,
                          const ExemplarBank& bank, const std::vector<ExpressionClass>& classes,
                          const EvalConfig& cfg, ProgressFn&& progress) {
    if (cfg.n_identities < 1) throw DomainError("run_evaluation: needs at least one identity");
    auto identities = held_out_identities(cfg.n_identities, cfg.seed);
    std::vector<int> class_ids;
    for (const auto& c : classes) class_ids.push_back(c.class_id);

    EvalResult out;
    std::vector<Tensor<float>> real_groups;
    std::vector<GeneratedSet> sets;
    double baseline_acc = 0.0;
    for (size_t i = 0; i < identities.size(); ++i) {
        const auto& id = identities[i];
        FaceImage ref = identity_reference(id, sys.backbone.cfg.image_size);

        SampleConfig sc = cfg.sample;
        sc.seed = mix_seed(cfg.seed, 0x5E7, static_cast<uint64_t>(i));
        GeneratedSet set = generate_set(sys, id_enc, exp_enc, bank, ref, class_ids, sc);
        out.per_identity.push_back(compute_metrics(set, id_enc, exp_enc, embedder));

        SampleConfig bc = sc;
        bc.conditioned = false;
        GeneratedSet base = generate_set(sys, id_enc, exp_enc, bank, ref, class_ids, bc);
        baseline_acc += clamp_unit(identity_similarity(base, id_enc));

        real_groups.push_back(render_identity_variants(
            id, classes, cfg.reals_per_identity, sys.backbone.cfg.image_size,
            static_cast<int>(sys.vocab.styles.size()),
            mix_seed(cfg.seed, 0x4EA, static_cast<uint64_t>(i))));
        sets.push_back(std::move(set));
        progress(static_cast<int>(i) + 1, static_cast<int>(identities.size()));
    }
    out.mean = mean_report(out.per_identity);
    out.distances = identity_distance_distribution(real_groups, sets, id_enc);
    out.baseline_id_sim = baseline_acc / static_cast<double>(identities.size());
    return out;
}

inline EvalResult run_evaluation(GenSystem<float>& sys, const FaceEncoder<float>& id_enc,
                                 const FaceEncoder<float>& exp_enc,
                                 const GenericEmbedder<float>& embedder, const ExemplarBank& bank,
                                 const std::vector<ExpressionClass>& classes,
                                 const EvalConfig& cfg) {
    return run_evaluation(sys, id_enc, exp_enc, embedder, bank, classes, cfg, [](int, int) {});
}

inline void save_eval_result(const std::string& dir, const EvalResult& res) {
    ensure_dir(dir);
    json per = json::array();
    for (const auto& r : res.per_identity) per.push_back(r.to_json());
    json dist = json::array();
    std::vector<BoxStats> boxes;
    std::vector<double> marks;
    for (const auto& row : res.distances.rows) {
        dist.push_back({{"identity", row.identity},
                        {"min", row.dmin},
                        {"q1", row.q1},
                        {"median", row.q2},
                        {"q3", row.q3},
                        {"max", row.dmax},
                        {"gen_mean", row.gen_mean},
                        {"within", row.within}});
        boxes.push_back({row.dmin, row.q1, row.q2, row.q3, row.dmax});
        marks.push_back(row.gen_mean);
    }
    write_json_file(dir + "/report.json",
                    {{"mean", res.mean.to_json()},
                     {"per_identity", per},
                     {"baseline_id_sim", res.baseline_id_sim},
                     {"distance_rows", dist},
                     {"distance_within_fraction", res.distances.within_fraction},
                     {"distance_skipped", res.distances.skipped}});
    std::ofstream txt(dir + "/report.txt");
    txt << format_report(res.mean) << "baseline_id_sim:  " << res.baseline_id_sim << "\n"
        << "distance_within:  " << res.distances.within_fraction << "\n";
    if (!boxes.empty()) write_png(dir + "/distance_boxplot.png", render_box_plot(boxes, marks));
}

// ---------------------------------------------------------------------------
// ablation: full model vs consistent-attention off vs null class token
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string name;
    MetricReport report;
    double distance_within = 0.0;
};

struct AblationReport {
    std::vector<AblationRow> rows;  // full, no_consistent, no_class_token
    bool cc_decreases_id_con = false;
    bool cc_decreases_dino_con = false;
    bool text_increases_exp_error = false;
    bool text_increases_id_con = false;

    json to_json() const {
        json rows_j = json::array();
        for (const auto& r : rows)
            rows_j.push_back({{"name", r.name},
                              {"report", r.report.to_json()},
                              {"distance_within", r.distance_within}});
        return {{"rows", rows_j},
                {"cc_decreases_id_con", cc_decreases_id_con},
                {"cc_decreases_dino_con", cc_decreases_dino_con},
                {"text_increases_exp_error", text_increases_exp_error},
                {"text_increases_id_con", text_increases_id_con}};
    }
};

template <typename ProgressFn>
AblationReport run_ablation(GenSystem<float>& sys, const FaceEncoder<float>& id_enc,
                            const FaceEncoder<float>& exp_enc,
                            const GenericEmbedder<float>& embedder, const ExemplarBank& bank,
                            const std::vector<ExpressionClass>& classes, const EvalConfig& cfg,
                            ProgressFn&& progress) {
    AblationReport out;
    struct Variant {
        const char* name;
        bool consistent;
        bool null_class;
    };
    const Variant variants[3] = {
        {"full", true, false}, {"no_consistent", false, false}, {"no_class_token", true, true}};
    for (const auto& v : variants) {
        EvalConfig vc = cfg;
        vc.sample.consistent = v.consistent;
        vc.sample.null_class_token = v.null_class;
        auto res = run_evaluation(sys, id_enc, exp_enc, embedder, bank, classes, vc,
                                  [&](int i, int n) { progress(v.name, i, n); });
        out.rows.push_back({v.name, res.mean, res.distances.within_fraction});
    }
    const MetricReport& full = out.rows[0].report;
    const MetricReport& no_cc = out.rows[1].report;
    const MetricReport& no_txt = out.rows[2].report;
    out.cc_decreases_id_con = no_cc.id_con < full.id_con;
    out.cc_decreases_dino_con = no_cc.dino_con < full.dino_con;
    out.text_increases_exp_error = no_txt.exp_error > full.exp_error;
    out.text_increases_id_con = no_txt.id_con > full.id_con;
    return out;
}

inline AblationReport run_ablation(GenSystem<float>& sys, const FaceEncoder<float>& id_enc,
                                   const FaceEncoder<float>& exp_enc,
                                   const GenericEmbedder<float>& embedder, const ExemplarBank& bank,
                                   const std::vector<ExpressionClass>& classes,
                                   const EvalConfig& cfg) {
    return run_ablation(sys, id_enc, exp_enc, embedder, bank, classes, cfg,
                        [](const char*, int, int) {});
}

inline std::string format_ablation(const AblationReport& rep) {
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(4);
    out << "variant           exp_error clip_like id_sim  dino_like dino_con id_con\n";
    for (const auto& r : rep.rows) {
        out << r.name;
        for (size_t pad = r.name.size(); pad < 18; ++pad) out << ' ';
        out << r.report.exp_error << "    " << r.report.clip_like << "   " << r.report.id_sim
            << "  " << r.report.dino_like << "    " << r.report.dino_con << "   "
            << r.report.id_con << "\n";
    }
    out << "direction checks:\n"
        << "  consistent attention off decreases id_con:    "
        << (rep.cc_decreases_id_con ? "pass" : "fail") << "\n"
        << "  consistent attention off decreases dino_con:  "
        << (rep.cc_decreases_dino_con ? "pass" : "fail") << "\n"
        << "  class token removed increases exp_error:      "
        << (rep.text_increases_exp_error ? "pass" : "fail") << "\n"
        << "  class token removed increases id_con:         "
        << (rep.text_increases_id_con ? "pass" : "fail") << "\n";
    return out.str();
}

}  // namespace faceflow
