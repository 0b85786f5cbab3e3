// faceflow command-line driver: dataset generation, encoder pretraining,
// two-stage model training, sampling, evaluation, and the ablation runner.
#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "faceflow/pipeline.hpp"

using namespace faceflow;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

void check_device() {
    const char* dev = std::getenv("FACEFLOW_DEVICE");
    if (dev == nullptr || std::string(dev) == "cpu") return;
    throw ConfigError("device '" + std::string(dev) +
                      "' is not available in this build; set FACEFLOW_DEVICE=cpu or unset it");
}

void require_set(const char* flag, const std::string& value) {
    if (value.empty())
        throw ConfigError(std::string(flag) + " is required (flag or config file)");
}

// refuse to write into a non-empty directory unless forced
void prepare_out_dir(const std::string& dir, bool force) {
    if (fs::exists(dir) && !fs::is_empty(fs::path(dir))) {
        if (!force)
            throw ConfigError("output directory '" + dir +
                              "' is not empty; pass --force to replace it");
        fs::remove_all(dir);
    }
    ensure_dir(dir);
}

// every command records its resolved parameters next to its outputs
void write_run_config(const std::string& dir, const json& resolved) {
    write_json_file(dir + "/run_config.json", resolved);
}

// a previously written run_config.json can seed the defaults of a re-run
json config_file_values(int argc, char** argv) {
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--config") return read_json_file(argv[i + 1]);
    return json::object();
}

void check_config_command(const json& j, const std::string& command) {
    if (j.contains("command") && j.at("command") != command)
        throw ConfigError("config file was written by '" +
                          j.at("command").get<std::string>() + "', not '" + command + "'");
}

TextVocab vocab_from_dataset(const ToyDataset& ds) {
    TextVocab v;
    for (const auto& c : ds.classes) v.classes.push_back(c.name);
    for (int s = 0; s < ds.n_styles; ++s)
        v.styles.push_back(style_names()[static_cast<size_t>(s)]);
    return v;
}

ExemplarBank load_bank_for(const std::string& data_root, bool ood, int64_t image_size) {
    std::string dir = data_root + (ood ? "/bank_ood" : "/bank");
    ExemplarBank bank = load_bank(dir);
    if (bank.resolution != image_size)
        throw ConfigError("exemplar bank resolution " + std::to_string(bank.resolution) +
                          " does not match model image size " + std::to_string(image_size));
    return bank;
}

std::vector<ExpressionClass> eval_classes(const std::string& data_root, const TextVocab& vocab) {
    auto classes = load_bank_classes(data_root + "/bank");
    if (classes.size() != vocab.classes.size())
        throw ConfigError("bank lists " + std::to_string(classes.size()) +
                          " classes but the model was trained with " +
                          std::to_string(vocab.classes.size()));
    return classes;
}

std::vector<int> parse_class_list(const TextVocab& vocab, const std::string& spec) {
    std::vector<int> ids;
    if (spec == "all") {
        for (size_t i = 0; i < vocab.classes.size(); ++i) ids.push_back(static_cast<int>(i));
        return ids;
    }
    std::stringstream ss(spec);
    std::string name;
    while (std::getline(ss, name, ','))
        if (!name.empty()) ids.push_back(static_cast<int>(vocab.class_by_name(name) - 1));
    if (ids.empty()) throw ConfigError("empty class list");
    return ids;
}

int parse_style(const TextVocab& vocab, const std::string& name) {
    return static_cast<int>(vocab.style_by_name(name) - 1 -
                            static_cast<int64_t>(vocab.classes.size()));
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::string out;
    bool force = false;
    int identities = 500;
    int per_identity = 20;
    int resolution = 32;
    int classes = 5;
    int styles = 4;
    double jitter = 0.08;
    int bank_per_class = 25;
    uint64_t seed = 424242;
    uint64_t bank_seed = 0;  // 0: derived from seed

    void apply(const json& j) {
        out = j.value("out", out);
        identities = j.value("identities", identities);
        per_identity = j.value("per_identity", per_identity);
        resolution = j.value("resolution", resolution);
        classes = j.value("classes", classes);
        styles = j.value("styles", styles);
        jitter = j.value("jitter", jitter);
        bank_per_class = j.value("bank_per_class", bank_per_class);
        seed = j.value("seed", seed);
        bank_seed = j.value("bank_seed", bank_seed);
    }
};

int run_gen_data(GenDataArgs& a) {
    require_set("--out", a.out);
    if (a.classes < 1 || a.classes > 5)
        throw ConfigError("--classes must be in [1,5]; there are 5 expression prototypes");
    if (a.bank_seed == 0) a.bank_seed = mix_seed(a.seed, 0xBA);
    prepare_out_dir(a.out, a.force);

    auto protos = default_classes(a.jitter);
    protos.resize(static_cast<size_t>(a.classes));
    std::cout << "rendering " << a.identities << " identities x " << a.per_identity
              << " images at " << a.resolution << "x" << a.resolution << "\n";
    auto ds = sample_dataset(a.identities, a.per_identity, protos, a.seed, a.resolution,
                             a.styles);
    save_dataset(a.out + "/dataset", ds);

    auto bank = build_exemplar_bank(protos, a.bank_per_class, a.bank_seed, a.resolution);
    save_bank(a.out + "/bank", bank, protos);
    // held-out pool with doubled expression jitter for out-of-distribution checks
    auto ood = build_exemplar_bank(protos, a.bank_per_class, mix_seed(a.bank_seed, 0x0D),
                                   a.resolution, 2.0 * a.jitter);
    save_bank(a.out + "/bank_ood", ood, protos);

    write_run_config(a.out, {{"command", "gen-data"},
                             {"device", "cpu"},
                             {"out", a.out},
                             {"identities", a.identities},
                             {"per_identity", a.per_identity},
                             {"resolution", a.resolution},
                             {"classes", a.classes},
                             {"styles", a.styles},
                             {"jitter", a.jitter},
                             {"bank_per_class", a.bank_per_class},
                             {"seed", a.seed},
                             {"bank_seed", a.bank_seed}});
    std::cout << "wrote " << ds.size() << " images and " << a.classes << " exemplar buckets to "
              << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// pretrain-encoders
// ---------------------------------------------------------------------------

struct PretrainArgs {
    std::string data;
    std::string out;
    bool force = false;
    EncoderTrainConfig cfg;

    void apply(const json& j) {
        data = j.value("data", data);
        out = j.value("out", out);
        cfg.steps = j.value("steps", cfg.steps);
        cfg.batch = j.value("batch", cfg.batch);
        cfg.lr = j.value("lr", cfg.lr);
        cfg.holdout_fraction = j.value("holdout", cfg.holdout_fraction);
        cfg.seed = j.value("seed", cfg.seed);
    }
};

int run_pretrain(PretrainArgs& a) {
    require_set("--data", a.data);
    require_set("--out", a.out);
    prepare_out_dir(a.out, a.force);
    auto ds = load_dataset(a.data + "/dataset");

    std::cout << "training identity encoder (" << a.cfg.steps << " steps)\n";
    auto id_enc = train_identity_encoder(ds, a.cfg);
    save_face_encoder(a.out + "/identity", id_enc);
    std::cout << "training expression encoder\n";
    auto exp_enc = train_expression_encoder(ds, a.cfg);
    save_face_encoder(a.out + "/expression", exp_enc);
    std::cout << "training generic embedder\n";
    auto emb = train_generic_embedder(ds, a.cfg);
    save_generic_embedder(a.out + "/generic", emb);

    json stats = {{"identity", id_enc.stats}, {"expression", exp_enc.stats},
                  {"generic", emb.stats}};
    write_json_file(a.out + "/stats.json", stats);
    write_run_config(a.out, {{"command", "pretrain-encoders"},
                             {"device", "cpu"},
                             {"data", a.data},
                             {"out", a.out},
                             {"steps", a.cfg.steps},
                             {"batch", a.cfg.batch},
                             {"lr", a.cfg.lr},
                             {"holdout", a.cfg.holdout_fraction},
                             {"seed", a.cfg.seed}});
    std::cout << "held-out stats: " << stats.dump() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string data;
    std::string encoders;
    std::string out;
    std::string stage;  // "A" or "B"
    std::string init;   // model directory to start from
    bool resume = false;
    bool force = false;
    // fresh-model shape (stage A without --init)
    int64_t width = 64;
    int64_t depth = 4;
    int64_t heads = 4;
    int64_t patch = 4;
    int64_t cond_tokens = 4;
    double alpha = 0.5;
    std::string time_dist = "uniform";
    double time_mean = 0.0;
    double time_std = 1.0;
    TrainConfig cfg;

    void apply(const json& j) {
        data = j.value("data", data);
        encoders = j.value("encoders", encoders);
        out = j.value("out", out);
        init = j.value("init", init);
        stage = j.value("stage", stage);
        width = j.value("width", width);
        depth = j.value("depth", depth);
        heads = j.value("heads", heads);
        patch = j.value("patch", patch);
        cond_tokens = j.value("cond_tokens", cond_tokens);
        alpha = j.value("alpha", alpha);
        time_dist = j.value("time_dist", time_dist);
        time_mean = j.value("time_mean", time_mean);
        time_std = j.value("time_std", time_std);
        cfg.steps = j.value("steps", cfg.steps);
        cfg.batch = j.value("batch", cfg.batch);
        cfg.lr = j.value("lr", cfg.lr);
        cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
        cfg.weights.beta1 = j.value("beta1", cfg.weights.beta1);
        cfg.weights.beta2 = j.value("beta2", cfg.weights.beta2);
        cfg.dropout.p_text = j.value("p_text", cfg.dropout.p_text);
        cfg.dropout.p_cond = j.value("p_cond", cfg.dropout.p_cond);
        cfg.dropout.p_both = j.value("p_both", cfg.dropout.p_both);
        cfg.seed = j.value("seed", cfg.seed);
        cfg.checkpoint_every = j.value("checkpoint_every", cfg.checkpoint_every);
    }
};

int run_train(TrainArgs& a) {
    require_set("--data", a.data);
    require_set("--encoders", a.encoders);
    require_set("--out", a.out);
    if (a.stage != "A" && a.stage != "B") throw ConfigError("--stage must be A or B");
    a.cfg.adapter_only = a.stage == "B";
    a.cfg.conditioned = a.stage == "B";
    a.cfg.out_dir = a.out;
    if (a.time_dist == "uniform") {
        a.cfg.tdist.kind = TimeDistribution::Kind::uniform;
    } else if (a.time_dist == "logit-normal") {
        a.cfg.tdist.kind = TimeDistribution::Kind::logit_normal;
        a.cfg.tdist.mean = a.time_mean;
        a.cfg.tdist.std = a.time_std;
    } else {
        throw ConfigError("--time-dist must be uniform or logit-normal");
    }
    if (a.stage == "B" && a.init.empty() && !a.resume)
        throw ConfigError("stage B trains adapters on a stage-A model; pass --init");

    if (!a.resume) prepare_out_dir(a.out, a.force);
    auto ds = load_dataset(a.data + "/dataset");
    auto bank = load_bank_for(a.data, false, ds.resolution);
    auto id_enc = load_face_encoder<float>(a.encoders + "/identity");
    auto exp_enc = load_face_encoder<float>(a.encoders + "/expression");

    GenSystem<float> sys;
    if (a.resume) {
        if (!path_exists(a.out + "/state/state.json"))
            throw ConfigError("--resume needs an existing state under " + a.out + "/state");
        sys = load_system<float>(a.out + "/state/model").sys;
    } else if (!a.init.empty()) {
        sys = load_system<float>(a.init).sys;
    } else {
        MMDiTConfig mc;
        mc.d = a.width;
        mc.depth = a.depth;
        mc.heads = a.heads;
        mc.patch = a.patch;
        mc.image_size = ds.resolution;
        mc.cond_tokens = a.cond_tokens;
        mc.alpha = a.alpha;
        TextVocab vocab = vocab_from_dataset(ds);
        mc.vocab = vocab.size();
        Rng rng(mix_seed(a.cfg.seed, 0x5D5));
        sys = GenSystem<float>(mc, vocab, rng);
    }

    Trainer trainer(sys, ds, bank, id_enc, exp_enc, a.cfg);
    if (a.resume) trainer.load_state(a.out + "/state");

    write_run_config(a.out, {{"command", "train"},
                             {"device", "cpu"},
                             {"data", a.data},
                             {"encoders", a.encoders},
                             {"out", a.out},
                             {"stage", a.stage},
                             {"init", a.init},
                             {"model", sys.backbone.cfg.to_json()},
                             {"time_dist", a.time_dist},
                             {"time_mean", a.time_mean},
                             {"time_std", a.time_std},
                             {"train", a.cfg.to_json()},
                             {"checkpoint_every", a.cfg.checkpoint_every}});

    std::cout << "stage " << a.stage << ": " << (a.cfg.steps - trainer.current_step())
              << " steps to run (batch " << a.cfg.batch << ", lr " << a.cfg.lr << ")\n";
    int64_t report_every = std::max<int64_t>(1, a.cfg.steps / 50);
    while (trainer.current_step() < a.cfg.steps) {
        LossRow row{};
        try {
            row = trainer.step();
        } catch (const NumericError&) {
            continue;
        }
        if (row.step % report_every == 0 || row.step == a.cfg.steps)
            std::cout << "step " << row.step << "/" << a.cfg.steps << "  total " << row.total
                      << "  rf " << row.rf << "  id " << row.id << "  exp " << row.exp << "  ("
                      << row.wall << "s)" << std::endl;
        if (a.cfg.checkpoint_every > 0 && row.step % a.cfg.checkpoint_every == 0)
            trainer.save_state(a.out + "/state");
    }
    trainer.save_state(a.out + "/state");
    std::cout << "saved model to " << a.out << "/state/model\n";
    return 0;
}

// ---------------------------------------------------------------------------
// sample / evaluate / ablate share their model bundle and sampling flags
// ---------------------------------------------------------------------------

struct SamplerArgs {
    std::string model;
    std::string encoders;
    std::string data;
    std::string out;
    bool force = false;
    bool ood = false;
    std::string consistent = "on";
    double rho = 0.5;
    double guidance = 5.0;
    int steps = 50;
    std::string style = "photo";
    uint64_t seed = 7;

    void apply(const json& j) {
        model = j.value("model", model);
        encoders = j.value("encoders", encoders);
        data = j.value("data", data);
        out = j.value("out", out);
        ood = j.value("ood_exemplars", ood);
        consistent = j.value("consistent", consistent);
        rho = j.value("rho", rho);
        guidance = j.value("guidance", guidance);
        steps = j.value("steps", steps);
        style = j.value("style", style);
        seed = j.value("seed", seed);
    }

    json resolved() const {
        return {{"device", "cpu"},     {"model", model},   {"encoders", encoders},
                {"data", data},        {"out", out},       {"ood_exemplars", ood},
                {"consistent", consistent},
                {"rho", rho},          {"guidance", guidance}, {"steps", steps},
                {"style", style},      {"seed", seed}};
    }

    SampleConfig sample_config(const TextVocab& vocab) const {
        if (consistent != "on" && consistent != "off")
            throw ConfigError("--consistent must be on or off");
        SampleConfig sc;
        sc.guidance.scale = guidance;
        sc.guidance.steps = steps;
        sc.consistent = consistent == "on";
        sc.rho = rho;
        sc.style = parse_style(vocab, style);
        sc.seed = seed;
        return sc;
    }
};

struct Bundle {
    GenSystem<float> sys;
    json meta;
    FaceEncoder<float> id_enc;
    FaceEncoder<float> exp_enc;
    ExemplarBank bank;
};

Bundle load_bundle(const SamplerArgs& a) {
    require_set("--model", a.model);
    require_set("--encoders", a.encoders);
    require_set("--data", a.data);
    Bundle b;
    auto loaded = load_system<float>(a.model);
    b.sys = std::move(loaded.sys);
    b.meta = std::move(loaded.meta);
    b.id_enc = load_face_encoder<float>(a.encoders + "/identity");
    b.exp_enc = load_face_encoder<float>(a.encoders + "/expression");
    b.bank = load_bank_for(a.data, a.ood, b.sys.backbone.cfg.image_size);
    return b;
}

struct SampleArgs {
    SamplerArgs common;
    uint64_t identity_seed = 1;
    std::string identity_image;  // PNG path; overrides identity-seed
    std::string classes = "all";
    bool null_class_token = false;

    void apply(const json& j) {
        common.apply(j);
        identity_seed = j.value("identity_seed", identity_seed);
        identity_image = j.value("identity_image", identity_image);
        classes = j.value("classes", classes);
        null_class_token = j.value("null_class_token", null_class_token);
    }
};

int run_sample(SampleArgs& a) {
    require_set("--out", a.common.out);
    prepare_out_dir(a.common.out, a.common.force);
    Bundle b = load_bundle(a.common);

    FaceImage ref;
    if (!a.identity_image.empty()) {
        ref.pixels = read_png(a.identity_image);
        if (ref.pixels.shape()[0] != b.sys.backbone.cfg.image_size ||
            ref.pixels.shape()[1] != b.sys.backbone.cfg.image_size)
            throw ShapeError("identity image must be " +
                             std::to_string(b.sys.backbone.cfg.image_size) + "x" +
                             std::to_string(b.sys.backbone.cfg.image_size));
    } else {
        Rng rng(mix_seed(a.identity_seed, 0x1DE7));
        ref = identity_reference(sample_identity(rng),
                                 static_cast<int>(b.sys.backbone.cfg.image_size));
    }

    auto class_ids = parse_class_list(b.sys.vocab, a.classes);
    SampleConfig sc = a.common.sample_config(b.sys.vocab);
    sc.null_class_token = a.null_class_token;
    auto set = generate_set(b.sys, b.id_enc, b.exp_enc, b.bank, ref, class_ids, sc);
    save_generated_set(a.common.out, set, b.sys.vocab);

    json resolved = a.common.resolved();
    resolved["command"] = "sample";
    resolved["identity_seed"] = a.identity_seed;
    resolved["identity_image"] = a.identity_image;
    resolved["classes"] = a.classes;
    resolved["null_class_token"] = a.null_class_token;
    write_run_config(a.common.out, resolved);
    std::cout << "wrote " << set.items.size() << " images and a grid to " << a.common.out
              << "\n";
    return 0;
}

struct EvalArgs {
    SamplerArgs common;
    int identities = 50;
    int reals = 8;
    uint64_t eval_seed = 405;

    void apply(const json& j) {
        common.apply(j);
        identities = j.value("identities", identities);
        reals = j.value("reals", reals);
        eval_seed = j.value("eval_seed", eval_seed);
    }

    EvalConfig eval_config(const TextVocab& vocab) const {
        EvalConfig ec;
        ec.n_identities = identities;
        ec.reals_per_identity = reals;
        ec.sample = common.sample_config(vocab);
        ec.seed = eval_seed;
        return ec;
    }

    json resolved(const char* command) const {
        json j = common.resolved();
        j["command"] = command;
        j["identities"] = identities;
        j["reals"] = reals;
        j["eval_seed"] = eval_seed;
        return j;
    }
};

int run_evaluate(EvalArgs& a) {
    require_set("--out", a.common.out);
    prepare_out_dir(a.common.out, a.common.force);
    Bundle b = load_bundle(a.common);
    auto embedder = load_generic_embedder<float>(a.common.encoders + "/generic");

    auto res = run_evaluation(b.sys, b.id_enc, b.exp_enc, embedder, b.bank,
                              eval_classes(a.common.data, b.sys.vocab),
                              a.eval_config(b.sys.vocab), [](int i, int n) {
                                  if (i % 10 == 0 || i == n)
                                      std::cout << "identity " << i << "/" << n << std::endl;
                              });
    save_eval_result(a.common.out, res);
    write_run_config(a.common.out, a.resolved("evaluate"));
    std::cout << format_report(res.mean) << "baseline_id_sim:  " << res.baseline_id_sim
              << "\ndistance_within:  " << res.distances.within_fraction << "\n";
    return 0;
}

int run_ablate(EvalArgs& a) {
    require_set("--out", a.common.out);
    prepare_out_dir(a.common.out, a.common.force);
    Bundle b = load_bundle(a.common);
    auto embedder = load_generic_embedder<float>(a.common.encoders + "/generic");

    auto rep = run_ablation(b.sys, b.id_enc, b.exp_enc, embedder, b.bank,
                            eval_classes(a.common.data, b.sys.vocab), a.eval_config(b.sys.vocab),
                            [](const char* name, int i, int n) {
                                if (i == n)
                                    std::cout << "variant " << name << " done" << std::endl;
                            });
    write_json_file(a.common.out + "/ablation.json", rep.to_json());
    std::ofstream txt(a.common.out + "/ablation.txt");
    txt << format_ablation(rep);
    write_run_config(a.common.out, a.resolved("ablate"));
    std::cout << format_ablation(rep);
    return 0;
}

void add_sampler_flags(CLI::App* cmd, SamplerArgs& a) {
    cmd->add_option("--model", a.model, "model checkpoint directory");
    cmd->add_option("--encoders", a.encoders, "encoder checkpoint root");
    cmd->add_option("--data", a.data, "gen-data output root (exemplar bank)");
    cmd->add_option("--out", a.out, "output directory");
    cmd->add_flag("--force", a.force, "replace a non-empty output directory");
    cmd->add_flag("--ood-exemplars", a.ood, "retrieve from the doubled-jitter held-out pool");
    cmd->add_option("--consistent", a.consistent, "share tokens across the set: on|off");
    cmd->add_option("--rho", a.rho, "shared-token fraction");
    cmd->add_option("--guidance", a.guidance, "guidance scale");
    cmd->add_option("--steps", a.steps, "ODE steps");
    cmd->add_option("--style", a.style, "style token name");
    cmd->add_option("--seed", a.seed, "sampling seed");
}

std::string error_kind(const Error& e) {
    if (dynamic_cast<const ShapeError*>(&e)) return "shape";
    if (dynamic_cast<const DomainError*>(&e)) return "domain";
    if (dynamic_cast<const LookupError*>(&e)) return "lookup";
    if (dynamic_cast<const NumericError*>(&e)) return "numeric";
    if (dynamic_cast<const VocabError*>(&e)) return "vocab";
    if (dynamic_cast<const IoError*>(&e)) return "io";
    if (dynamic_cast<const ConfigError*>(&e)) return "config";
    return "error";
}

int fail(const std::string& kind, const std::string& message) {
    std::cerr << json{{"error", kind}, {"message", message}}.dump() << "\n";
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"identity-preserving expression generation on procedural faces"};
    app.require_subcommand(1);
    std::string config_path;  // consumed by config_file_values before parsing

    GenDataArgs gen;
    auto* cmd_gen = app.add_subcommand("gen-data", "render a dataset and exemplar banks");
    cmd_gen->add_option("--out", gen.out, "output root");
    cmd_gen->add_flag("--force", gen.force, "replace a non-empty output directory");
    cmd_gen->add_option("--identities", gen.identities, "number of identities");
    cmd_gen->add_option("--per-identity", gen.per_identity, "images per identity");
    cmd_gen->add_option("--resolution", gen.resolution, "image resolution");
    cmd_gen->add_option("--classes", gen.classes, "number of expression prototypes (1-5)");
    cmd_gen->add_option("--styles", gen.styles, "number of render styles (1-4)");
    cmd_gen->add_option("--jitter", gen.jitter, "expression jitter scale");
    cmd_gen->add_option("--bank-per-class", gen.bank_per_class, "exemplars per class");
    cmd_gen->add_option("--seed", gen.seed, "dataset seed");
    cmd_gen->add_option("--bank-seed", gen.bank_seed, "bank seed (0: derived)");
    cmd_gen->add_option("--config", config_path, "seed defaults from a run_config.json");

    PretrainArgs pre;
    auto* cmd_pre = app.add_subcommand("pretrain-encoders", "train the frozen encoders");
    cmd_pre->add_option("--data", pre.data, "gen-data output root");
    cmd_pre->add_option("--out", pre.out, "output root");
    cmd_pre->add_flag("--force", pre.force, "replace a non-empty output directory");
    cmd_pre->add_option("--steps", pre.cfg.steps, "optimization steps per encoder");
    cmd_pre->add_option("--batch", pre.cfg.batch, "batch size");
    cmd_pre->add_option("--lr", pre.cfg.lr, "learning rate");
    cmd_pre->add_option("--holdout", pre.cfg.holdout_fraction, "held-out identity fraction");
    cmd_pre->add_option("--seed", pre.cfg.seed, "training seed");
    cmd_pre->add_option("--config", config_path, "seed defaults from a run_config.json");

    TrainArgs tr;
    auto* cmd_tr = app.add_subcommand("train", "train the generator (stage A or B)");
    cmd_tr->add_option("--data", tr.data, "gen-data output root");
    cmd_tr->add_option("--encoders", tr.encoders, "encoder checkpoint root");
    cmd_tr->add_option("--out", tr.out, "output root");
    cmd_tr->add_option("--stage", tr.stage, "A: backbone, B: adapters");
    cmd_tr->add_option("--init", tr.init, "model directory to initialize from");
    cmd_tr->add_flag("--resume", tr.resume, "continue from <out>/state");
    cmd_tr->add_flag("--force", tr.force, "replace a non-empty output directory");
    cmd_tr->add_option("--width", tr.width, "model width");
    cmd_tr->add_option("--depth", tr.depth, "transformer blocks");
    cmd_tr->add_option("--heads", tr.heads, "attention heads");
    cmd_tr->add_option("--patch", tr.patch, "patch size");
    cmd_tr->add_option("--cond-tokens", tr.cond_tokens, "fused condition tokens");
    cmd_tr->add_option("--alpha", tr.alpha, "condition branch scale");
    cmd_tr->add_option("--time-dist", tr.time_dist, "uniform|logit-normal");
    cmd_tr->add_option("--time-mean", tr.time_mean, "logit-normal mean");
    cmd_tr->add_option("--time-std", tr.time_std, "logit-normal std");
    cmd_tr->add_option("--steps", tr.cfg.steps, "total optimization steps");
    cmd_tr->add_option("--batch", tr.cfg.batch, "batch size");
    cmd_tr->add_option("--lr", tr.cfg.lr, "learning rate");
    cmd_tr->add_option("--weight-decay", tr.cfg.weight_decay, "decoupled weight decay");
    cmd_tr->add_option("--beta1", tr.cfg.weights.beta1, "identity loss weight");
    cmd_tr->add_option("--beta2", tr.cfg.weights.beta2, "expression loss weight");
    cmd_tr->add_option("--p-text", tr.cfg.dropout.p_text, "text dropout probability");
    cmd_tr->add_option("--p-cond", tr.cfg.dropout.p_cond, "condition dropout probability");
    cmd_tr->add_option("--p-both", tr.cfg.dropout.p_both, "joint dropout probability");
    cmd_tr->add_option("--seed", tr.cfg.seed, "training seed");
    cmd_tr->add_option("--checkpoint-every", tr.cfg.checkpoint_every,
                       "periodic checkpoint interval (0: off)");
    cmd_tr->add_option("--config", config_path, "seed defaults from a run_config.json");

    SampleArgs sa;
    auto* cmd_sa = app.add_subcommand("sample", "generate an expression set for one identity");
    add_sampler_flags(cmd_sa, sa.common);
    cmd_sa->add_option("--identity-seed", sa.identity_seed, "procedural identity seed");
    cmd_sa->add_option("--identity-image", sa.identity_image, "reference PNG path");
    cmd_sa->add_option("--classes", sa.classes, "comma-separated class names or 'all'");
    cmd_sa->add_flag("--null-class-token", sa.null_class_token,
                     "replace class tokens with the null token");
    cmd_sa->add_option("--config", config_path, "seed defaults from a run_config.json");

    EvalArgs ev;
    auto* cmd_ev = app.add_subcommand("evaluate", "score held-out identities");
    add_sampler_flags(cmd_ev, ev.common);
    cmd_ev->add_option("--identities", ev.identities, "held-out identity count");
    cmd_ev->add_option("--reals", ev.reals, "real renders per identity for distances");
    cmd_ev->add_option("--eval-seed", ev.eval_seed, "evaluation seed");
    cmd_ev->add_option("--config", config_path, "seed defaults from a run_config.json");

    EvalArgs ab;
    auto* cmd_ab = app.add_subcommand("ablate", "full vs no-consistent vs no-class-token");
    add_sampler_flags(cmd_ab, ab.common);
    cmd_ab->add_option("--identities", ab.identities, "held-out identity count");
    cmd_ab->add_option("--reals", ab.reals, "real renders per identity for distances");
    cmd_ab->add_option("--eval-seed", ab.eval_seed, "evaluation seed");
    cmd_ab->add_option("--config", config_path, "seed defaults from a run_config.json");

    try {
        check_device();
        json file_cfg = config_file_values(argc, argv);
        if (!file_cfg.empty()) {
            // field names overlap across commands, so only the writing command's
            // args may take defaults from the file
            std::string from = file_cfg.value("command", "");
            if (from == "gen-data") gen.apply(file_cfg);
            else if (from == "pretrain-encoders") pre.apply(file_cfg);
            else if (from == "train") tr.apply(file_cfg);
            else if (from == "sample") sa.apply(file_cfg);
            else if (from == "evaluate") ev.apply(file_cfg);
            else if (from == "ablate") ab.apply(file_cfg);
            else throw ConfigError("config file does not name the command that wrote it");
        }
        app.parse(argc, argv);
        const std::string invoked = app.get_subcommands().front()->get_name();
        if (!file_cfg.empty()) check_config_command(file_cfg, invoked);
        if (cmd_gen->parsed()) return run_gen_data(gen);
        if (cmd_pre->parsed()) return run_pretrain(pre);
        if (cmd_tr->parsed()) return run_train(tr);
        if (cmd_sa->parsed()) return run_sample(sa);
        if (cmd_ev->parsed()) return run_evaluate(ev);
        if (cmd_ab->parsed()) return run_ablate(ab);
        return fail("usage", "no subcommand given");
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        if (code != 0) return fail("usage", e.what());
        return 0;
    } catch (const Error& e) {
        return fail(error_kind(e), e.what());
    } catch (const std::exception& e) {
        return fail("internal", e.what());
    }
}
