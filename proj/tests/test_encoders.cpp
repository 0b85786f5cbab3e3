#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "faceflow/encoders.hpp"
#include "test_util.hpp"

using namespace faceflow;

namespace {

// shared across test cases; trained once
const ToyDataset& smoke_dataset() {
    static ToyDataset ds = sample_dataset(60, 4, default_classes(), 404);
    return ds;
}

EncoderTrainConfig smoke_config() {
    EncoderTrainConfig cfg;
    cfg.steps = 300;
    cfg.batch = 16;
    cfg.seed = 11;
    return cfg;
}

const FaceEncoder<float>& trained_identity() {
    static FaceEncoder<float> enc = train_identity_encoder(smoke_dataset(), smoke_config());
    return enc;
}

const FaceEncoder<float>& trained_expression() {
    static FaceEncoder<float> enc = train_expression_encoder(smoke_dataset(), smoke_config());
    return enc;
}

Tensor<float> two_copies(const Tensor<float>& img) {
    Tensor<float> batch({2, img.shape()[0], img.shape()[1], img.shape()[2]});
    std::memcpy(batch.data(), img.data(), sizeof(float) * static_cast<size_t>(img.numel()));
    std::memcpy(batch.data() + img.numel(), img.data(),
                sizeof(float) * static_cast<size_t>(img.numel()));
    return batch;
}

double ref_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

}  // namespace

TEST_CASE("projection produces the contracted token shape", "[encoders]") {
    Rng rng(3);
    ProjectionNet<float> net(kEmbedDim, 256, 4, 128, rng);
    auto batch = Var<float>(Tensor<float>::randn({2, kEmbedDim}, rng));
    auto tokens = net.forward(batch);
    REQUIRE(tokens.shape() == Shape{2, 4, 128});

    auto single = Var<float>(Tensor<float>::randn({kEmbedDim}, rng));
    auto one = project(single, net);
    REQUIRE(one.shape() == Shape{4, 128});

    auto again = project(single, net);
    for (int64_t i = 0; i < one.value().numel(); ++i)
        REQUIRE(again.value().data()[i] == one.value().data()[i]);

    auto bad = Var<float>(Tensor<float>::randn({2, 32}, rng));
    REQUIRE_THROWS_AS(net.forward(bad), ShapeError);
}

TEST_CASE("zero embedding maps to all-zero tokens on a fresh net", "[encoders]") {
    // linear biases and the norm shift start at zero, so zero stays zero
    Rng rng(4);
    ProjectionNet<float> net(kEmbedDim, 256, 4, 128, rng);
    auto zero = Var<float>(Tensor<float>::zeros({1, kEmbedDim}));
    auto tokens = net.forward(zero);
    REQUIRE(tokens.value().max_abs() == 0.0f);
}

TEST_CASE("projection respects an empirical smoothness bound", "[encoders]") {
    Rng rng(5);
    ProjectionNet<float> net(kEmbedDim, 256, 4, 128, rng);
    auto base = Tensor<float>::randn({1, kEmbedDim}, rng);
    auto out_base = net.forward(Var<float>(base));

    auto measure = [&](uint64_t seed, int count, float stddev) {
        Rng drng(seed);
        double worst = 0.0;
        for (int i = 0; i < count; ++i) {
            auto delta = Tensor<float>::randn({1, kEmbedDim}, drng, stddev);
            Tensor<float> shifted = base;
            for (int64_t j = 0; j < kEmbedDim; ++j) shifted.data()[j] += delta.data()[j];
            auto out = net.forward(Var<float>(shifted));
            double dn = 0.0, on = 0.0;
            for (int64_t j = 0; j < kEmbedDim; ++j)
                dn += static_cast<double>(delta.data()[j]) * delta.data()[j];
            for (int64_t j = 0; j < out.value().numel(); ++j) {
                double d = static_cast<double>(out.value().data()[j]) - out_base.value().data()[j];
                on += d * d;
            }
            worst = std::max(worst, std::sqrt(on) / std::sqrt(dn));
        }
        return worst;
    };

    double c = measure(77, 100, 0.1f);
    REQUIRE(c > 0.0);
    REQUIRE(c < 1e4);
    REQUIRE(measure(77, 100, 0.1f) == c);  // stable across runs
    // smaller perturbations stay within a generous multiple of the bound
    REQUIRE(measure(78, 20, 0.01f) < 10.0 * c);
}

TEST_CASE("fusion is commutative and additive in its inputs", "[encoders]") {
    Rng rng(6);
    FusionNet<float> net(128, 128, rng);
    auto a = Var<float>(Tensor<float>::randn({4, 128}, rng));
    auto b = Var<float>(Tensor<float>::randn({4, 128}, rng));

    auto ab = fuse(a, b, net);
    auto ba = fuse(b, a, net);
    for (int64_t i = 0; i < ab.value().numel(); ++i)
        REQUIRE(ab.value().data()[i] == ba.value().data()[i]);

    // zero expression tokens: the net sees exactly the identity tokens
    auto zero = Var<float>(Tensor<float>::zeros({4, 128}));
    auto fused = fuse(a, zero, net);
    auto direct = net.forward_sum(a);
    for (int64_t i = 0; i < fused.value().numel(); ++i)
        REQUIRE(fused.value().data()[i] == direct.value().data()[i]);

    auto bad = Var<float>(Tensor<float>::randn({3, 128}, rng));
    REQUIRE_THROWS_AS(fuse(a, bad, net), ShapeError);
}

TEST_CASE("fusion matches a scalar-loop oracle", "[encoders]") {
    const int64_t d = 6, hidden = 5, n = 3;
    Rng rng(7);
    FusionNet<double> net(d, hidden, rng);
    net.ln.gamma.value() = Tensor<double>::randn({d}, rng);
    net.ln.beta.value() = Tensor<double>::randn({d}, rng);
    auto a = Tensor<double>::randn({n, d}, rng);
    auto b = Tensor<double>::randn({n, d}, rng);

    auto out = fuse(Var<double>(a), Var<double>(b), net);

    for (int64_t r = 0; r < n; ++r) {
        std::vector<double> h1(static_cast<size_t>(hidden), 0.0);
        for (int64_t j = 0; j < hidden; ++j) {
            double s = net.fc1.b.value().data()[j];
            for (int64_t i = 0; i < d; ++i)
                s += (a.at(r, i) + b.at(r, i)) * net.fc1.w.value().at(i, j);
            h1[static_cast<size_t>(j)] = ref_gelu(s);
        }
        std::vector<double> h2(static_cast<size_t>(d), 0.0);
        for (int64_t j = 0; j < d; ++j) {
            double s = net.fc2.b.value().data()[j];
            for (int64_t i = 0; i < hidden; ++i)
                s += h1[static_cast<size_t>(i)] * net.fc2.w.value().at(i, j);
            h2[static_cast<size_t>(j)] = s;
        }
        double mean = 0.0;
        for (double v : h2) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : h2) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        for (int64_t j = 0; j < d; ++j) {
            double expect = (h2[static_cast<size_t>(j)] - mean) / std::sqrt(var + 1e-6) *
                                net.ln.gamma.value().data()[j] +
                            net.ln.beta.value().data()[j];
            REQUIRE(out.value().at(r, j) == Catch::Approx(expect).margin(1e-12));
        }
    }
}

TEST_CASE("condition pipeline emits fused token batches", "[encoders]") {
    Rng rng(8);
    ConditionPipeline<float> pipe(4, 128, rng);
    auto id_emb = Var<float>(Tensor<float>::randn({3, kEmbedDim}, rng));
    auto exp_emb = Var<float>(Tensor<float>::randn({3, kEmbedDim}, rng));
    auto tokens = pipe.tokens(id_emb, exp_emb);
    REQUIRE(tokens.shape() == Shape{3, 4, 128});
    Params<float> params;
    pipe.collect("cond", params);
    REQUIRE(params.size() == 18);
    auto again = pipe.tokens(id_emb, exp_emb);
    for (int64_t i = 0; i < tokens.value().numel(); ++i)
        REQUIRE(again.value().data()[i] == tokens.value().data()[i]);
}

TEST_CASE("conv trunk pools any resolution to the embedding width", "[encoders]") {
    Rng rng(9);
    ConvEncoder<float> trunk(rng);
    auto x32 = Var<float>(Tensor<float>::uniform({2, 32, 32, 3}, rng));
    REQUIRE(trunk.forward(x32).shape() == Shape{2, kEmbedDim});
    auto x16 = Var<float>(Tensor<float>::uniform({1, 16, 16, 3}, rng));
    REQUIRE(trunk.forward(x16).shape() == Shape{1, kEmbedDim});
}

TEST_CASE("embeddings are unit-norm and identical inputs coincide", "[encoders]") {
    Rng rng(10);
    FaceEncoder<float> enc("identity", 5, 0, rng);
    auto img = render(IdentityParams{0.3, 1.05, 0.33, 0.12},
                      ExpressionParams{0.5, 0.7, -0.2}, 32);
    auto batch = Var<float>(two_copies(img.pixels));
    auto emb = enc.embed(batch);
    for (int64_t r = 0; r < 2; ++r) {
        double norm = 0.0;
        for (int64_t j = 0; j < kEmbedDim; ++j)
            norm += static_cast<double>(emb.value().at(r, j)) * emb.value().at(r, j);
        REQUIRE(std::sqrt(norm) == Catch::Approx(1.0).margin(1e-6));
    }
    double dot = 0.0, dist = 0.0;
    for (int64_t j = 0; j < kEmbedDim; ++j) {
        dot += static_cast<double>(emb.value().at(0, j)) * emb.value().at(1, j);
        double dd = static_cast<double>(emb.value().at(0, j)) - emb.value().at(1, j);
        dist += dd * dd;
    }
    REQUIRE(dot == Catch::Approx(1.0).margin(1e-6));
    REQUIRE(dist == 0.0);  // bit-identical rows

    auto one = enc.embed_one(img.pixels);
    REQUIRE(one.normalized);
    REQUIRE(one.embedding.shape() == Shape{kEmbedDim});
    for (int64_t j = 0; j < kEmbedDim; ++j)
        REQUIRE(one.embedding.data()[j] == emb.value().at(0, j));
}

TEST_CASE("pretraining rejects inadequate datasets", "[encoders]") {
    auto tiny = sample_dataset(10, 2, default_classes(), 5);
    REQUIRE_THROWS_AS(train_identity_encoder(tiny, smoke_config()), ConfigError);

    EncoderTrainConfig big_batch = smoke_config();
    big_batch.batch = 100;
    REQUIRE_THROWS_AS(train_identity_encoder(smoke_dataset(), big_batch), ConfigError);

    auto wide = sample_dataset(50, 1, default_classes(), 6, 48);
    EncoderTrainConfig cfg = smoke_config();
    cfg.batch = 8;
    REQUIRE_THROWS_AS(train_generic_embedder(wide, cfg), ConfigError);
}

TEST_CASE("identity pretraining learns and freezes", "[encoders]") {
    const auto& enc = trained_identity();
    REQUIRE(enc.kind == "identity");
    REQUIRE(enc.stats.at("holdout_mse").get<double>() < 0.15);
    REQUIRE(enc.stats.at("separation").get<double>() > 0.3);

    Params<float> params;
    const_cast<FaceEncoder<float>&>(enc).collect(params);
    for (auto& [name, p] : params) REQUIRE_FALSE(p.requires_grad());

    // frozen: repeat embedding calls agree bit-exactly
    auto img = smoke_dataset().face(0);
    auto a = enc.embed_one(img.pixels);
    auto b = enc.embed_one(img.pixels);
    for (int64_t j = 0; j < kEmbedDim; ++j)
        REQUIRE(a.embedding.data()[j] == b.embedding.data()[j]);
}

TEST_CASE("expression pretraining learns the class structure", "[encoders]") {
    const auto& enc = trained_expression();
    REQUIRE(enc.kind == "expression");
    REQUIRE(enc.num_classes == 5);
    REQUIRE(enc.stats.at("holdout_mse").get<double>() < 0.2);
    REQUIRE(enc.stats.at("holdout_accuracy").get<double>() > 0.5);

    auto img = smoke_dataset().face(3);
    NoGradGuard ng;
    Tensor<float> batch({1, 32, 32, 3});
    std::memcpy(batch.data(), img.pixels.data(), sizeof(float) * 32 * 32 * 3);
    auto logits = const_cast<FaceEncoder<float>&>(enc).classify(Var<float>(std::move(batch)));
    REQUIRE(logits.shape() == Shape{1, 5});
}

TEST_CASE("face encoder checkpoints round-trip bit-exactly", "[encoders]") {
    auto enc = trained_identity();  // copy
    std::string dir = "/tmp/faceflow_test_idenc";
    std::filesystem::remove_all(dir);
    save_face_encoder(dir, enc);
    auto back = load_face_encoder<float>(dir);
    REQUIRE(back.kind == enc.kind);
    REQUIRE(back.stats.at("separation") == enc.stats.at("separation"));

    auto img = smoke_dataset().face(1);
    auto a = enc.embed_one(img.pixels);
    auto b = back.embed_one(img.pixels);
    for (int64_t j = 0; j < kEmbedDim; ++j)
        REQUIRE(a.embedding.data()[j] == b.embedding.data()[j]);

    // a checkpoint whose stored separation is too weak must be refused
    json manifest = read_json_file(dir + "/manifest.json");
    manifest["meta"]["stats"]["separation"] = 0.1;
    write_json_file(dir + "/manifest.json", manifest);
    REQUIRE_THROWS_AS(load_face_encoder<float>(dir), ConfigError);
}

TEST_CASE("expression checkpoints carry the class head", "[encoders]") {
    auto enc = trained_expression();
    std::string dir = "/tmp/faceflow_test_expenc";
    std::filesystem::remove_all(dir);
    save_face_encoder(dir, enc);
    auto back = load_face_encoder<float>(dir);
    REQUIRE(back.num_classes == 5);

    NoGradGuard ng;
    auto img = smoke_dataset().face(2);
    Tensor<float> batch({1, 32, 32, 3});
    std::memcpy(batch.data(), img.pixels.data(), sizeof(float) * 32 * 32 * 3);
    auto v = Var<float>(std::move(batch));
    auto la = enc.classify(v);
    auto lb = back.classify(v);
    for (int64_t j = 0; j < 5; ++j)
        REQUIRE(la.value().data()[j] == lb.value().data()[j]);
}

TEST_CASE("generic embedder reconstructs and optimizes", "[encoders]") {
    Rng rng(12);
    GenericEmbedder<float> emb(rng);
    Rng drng(13);
    auto images = Var<float>(Tensor<float>::uniform({4, 32, 32, 3}, drng));
    auto rec = emb.reconstruct(images);
    REQUIRE(rec.shape() == Shape{4, 32, 32, 3});
    for (int64_t i = 0; i < rec.value().numel(); ++i) {
        REQUIRE(rec.value().data()[i] > 0.0f);
        REQUIRE(rec.value().data()[i] < 1.0f);
    }
    auto e = emb.embed(images);
    REQUIRE(e.shape() == Shape{4, kEmbedDim});
    for (int64_t r = 0; r < 4; ++r) {
        double norm = 0.0;
        for (int64_t j = 0; j < kEmbedDim; ++j)
            norm += static_cast<double>(e.value().at(r, j)) * e.value().at(r, j);
        REQUIRE(std::sqrt(norm) == Catch::Approx(1.0).margin(1e-6));
    }

    Params<float> params;
    emb.collect(params);
    AdamW<float> opt;
    opt.lr = 1e-3f;
    float first = mse_loss(emb.reconstruct(images), images).value().data()[0];
    for (int i = 0; i < 5; ++i) {
        auto loss = mse_loss(emb.reconstruct(images), images);
        zero_grads(params);
        loss.backward();
        opt.step(params);
    }
    float after = mse_loss(emb.reconstruct(images), images).value().data()[0];
    REQUIRE(after < first);

    std::string dir = "/tmp/faceflow_test_genemb";
    std::filesystem::remove_all(dir);
    emb.stats = {{"holdout_recon_mse", 0.01}};
    save_generic_embedder(dir, emb);
    auto back = load_generic_embedder<float>(dir);
    auto trained = emb.embed(images);
    auto e2 = back.embed(images);
    for (int64_t i = 0; i < trained.value().numel(); ++i)
        REQUIRE(e2.value().data()[i] == trained.value().data()[i]);
}
