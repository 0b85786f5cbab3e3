#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include "encoders.hpp"
#include "toyfaces.hpp"

namespace faceflow {

// Evaluation metrics over one identity's generated expression set: matched
// reference errors, embedding similarities, cross-item consistency, the
// identity-distance distribution check, and ground-truth oracle scores.

struct GeneratedItem {
    int class_id = -1;
    FaceImage exemplar;    // retrieved expression reference
    Tensor<float> image;   // generated pixels [R,R,3] in [0,1]
};

struct GeneratedSet {
    FaceImage identity_ref;
    std::vector<GeneratedItem> items;

    void validate() const {
        const Shape& s = identity_ref.pixels.shape();
        for (const auto& it : items) {
            if (it.exemplar.pixels.shape() != s || it.image.shape() != s)
                throw ShapeError("generated set mixes image resolutions");
        }
    }
};

enum class Pairing { matched, cross };
enum class SimilarityTarget { exemplar, identity_ref };

namespace detail {

// [n,R,R,3] -> [n,D] without touching autograd state
template <typename Enc>
Tensor<float> embed_rows(const Enc& enc, const Tensor<float>& images) {
    NoGradGuard ng;
    return enc.embed(Var<float>(images)).value();
}

inline Tensor<float> stack_images(const GeneratedSet& set, bool generated) {
    const Shape& s = set.identity_ref.pixels.shape();
    int64_t n = static_cast<int64_t>(set.items.size());
    int64_t px = s[0] * s[1] * s[2];
    Tensor<float> out({n, s[0], s[1], s[2]});
    for (int64_t i = 0; i < n; ++i) {
        const Tensor<float>& src =
            generated ? set.items[static_cast<size_t>(i)].image
                      : set.items[static_cast<size_t>(i)].exemplar.pixels;
        std::memcpy(out.data() + i * px, src.data(), sizeof(float) * static_cast<size_t>(px));
    }
    return out;
}

inline double row_norm(const Tensor<float>& e, int64_t row) {
    int64_t d = e.shape()[1];
    double acc = 0.0;
    for (int64_t k = 0; k < d; ++k) {
        double x = e.data()[row * d + k];
        acc += x * x;
    }
    return std::sqrt(acc);
}

inline double row_cosine(const Tensor<float>& a, int64_t i, const Tensor<float>& b, int64_t j) {
    int64_t d = a.shape()[1];
    double na = row_norm(a, i), nb = row_norm(b, j);
    if (na < 1e-12 || nb < 1e-12) throw NumericError("zero-norm embedding in similarity metric");
    double dot = 0.0;
    for (int64_t k = 0; k < d; ++k)
        dot += static_cast<double>(a.data()[i * d + k]) * b.data()[j * d + k];
    return dot / (na * nb);
}

inline double row_distance(const Tensor<float>& a, int64_t i, const Tensor<float>& b, int64_t j) {
    int64_t d = a.shape()[1];
    double acc = 0.0;
    for (int64_t k = 0; k < d; ++k) {
        double diff = static_cast<double>(a.data()[i * d + k]) - b.data()[j * d + k];
        acc += diff * diff;
    }
    return std::sqrt(acc);
}

// Euclidean distance after projecting both rows to the unit sphere
inline double normalized_distance(const Tensor<float>& a, int64_t i, const Tensor<float>& b,
                                  int64_t j) {
    int64_t d = a.shape()[1];
    double na = row_norm(a, i), nb = row_norm(b, j);
    if (na < 1e-12 || nb < 1e-12) throw NumericError("zero-norm embedding in distance metric");
    double acc = 0.0;
    for (int64_t k = 0; k < d; ++k) {
        double diff = a.data()[i * d + k] / na - b.data()[j * d + k] / nb;
        acc += diff * diff;
    }
    return std::sqrt(acc);
}

// linear-interpolated quantile of an already-sorted sample
inline double sorted_quantile(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) throw DomainError("quantile of empty sample");
    double pos = p * static_cast<double>(sorted.size() - 1);
    size_t lo = static_cast<size_t>(pos);
    if (lo + 1 >= sorted.size()) return sorted.back();
    double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace detail

// mean distance between generated and reference expression embeddings;
// matched pairs by default, full cross product on request
template <typename Enc>
double expression_error(const GeneratedSet& set, const Enc& enc_exp,
                        Pairing pairing = Pairing::matched) {
    set.validate();
    int64_t n = static_cast<int64_t>(set.items.size());
    if (n < 1) throw DomainError("expression_error: empty set");
    auto gen = detail::embed_rows(enc_exp, detail::stack_images(set, true));
    auto ref = detail::embed_rows(enc_exp, detail::stack_images(set, false));
    double acc = 0.0;
    if (pairing == Pairing::matched) {
        for (int64_t i = 0; i < n; ++i) acc += detail::row_distance(gen, i, ref, i);
        return acc / static_cast<double>(n);
    }
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) acc += detail::row_distance(gen, i, ref, j);
    return acc / static_cast<double>(n * n);
}

// mean cosine similarity between each generated image and its target image
template <typename Enc>
double embedding_similarity(const GeneratedSet& set, const Enc& enc, SimilarityTarget target) {
    set.validate();
    int64_t n = static_cast<int64_t>(set.items.size());
    if (n < 1) throw DomainError("embedding_similarity: empty set");
    auto gen = detail::embed_rows(enc, detail::stack_images(set, true));
    double acc = 0.0;
    if (target == SimilarityTarget::exemplar) {
        auto ref = detail::embed_rows(enc, detail::stack_images(set, false));
        for (int64_t i = 0; i < n; ++i) acc += detail::row_cosine(gen, i, ref, i);
    } else {
        Tensor<float> ref_img({1, set.identity_ref.pixels.shape()[0],
                               set.identity_ref.pixels.shape()[1],
                               set.identity_ref.pixels.shape()[2]});
        std::memcpy(ref_img.data(), set.identity_ref.pixels.data(),
                    sizeof(float) * static_cast<size_t>(set.identity_ref.pixels.numel()));
        auto ref = detail::embed_rows(enc, ref_img);
        for (int64_t i = 0; i < n; ++i) acc += detail::row_cosine(gen, i, ref, 0);
    }
    return acc / static_cast<double>(n);
}

template <typename Enc>
double identity_similarity(const GeneratedSet& set, const Enc& enc_id) {
    return embedding_similarity(set, enc_id, SimilarityTarget::identity_ref);
}

// mean cosine over all n(n-1)/2 unordered pairs of generated embeddings
template <typename Enc>
double consistency(const GeneratedSet& set, const Enc& enc) {
    set.validate();
    int64_t n = static_cast<int64_t>(set.items.size());
    if (n < 2) throw DomainError("consistency: needs at least 2 items");
    auto gen = detail::embed_rows(enc, detail::stack_images(set, true));
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i + 1; j < n; ++j) acc += detail::row_cosine(gen, i, gen, j);
    return acc / (static_cast<double>(n) * static_cast<double>(n - 1) / 2.0);
}

// ---------------------------------------------------------------------------
// identity-distance distribution
// ---------------------------------------------------------------------------

struct IdentityDistanceRow {
    int identity = -1;
    double dmin = 0, dmax = 0;      // real-vs-real distance range
    double q1 = 0, q2 = 0, q3 = 0;  // quartiles of real-vs-real distances
    double gen_mean = 0;            // mean generated-vs-reference distance
    bool within = false;            // gen_mean in [q1, q3]
};

struct IdentityDistanceSummary {
    std::vector<IdentityDistanceRow> rows;
    int skipped = 0;
    double within_fraction = 0.0;
    std::vector<std::string> warnings;
};

// real_groups[i] holds the real images of the identity evaluated by sets[i];
// groups with fewer than two real images are skipped with a warning
template <typename Enc>
IdentityDistanceSummary identity_distance_distribution(
    const std::vector<Tensor<float>>& real_groups, const std::vector<GeneratedSet>& sets,
    const Enc& enc_id) {
    if (real_groups.size() != sets.size())
        throw ShapeError("identity_distance_distribution: group/set count mismatch");
    IdentityDistanceSummary out;
    int within_count = 0;
    for (size_t g = 0; g < real_groups.size(); ++g) {
        const Tensor<float>& reals = real_groups[g];
        if (reals.shape().size() != 4)
            throw ShapeError("identity_distance_distribution: real images must be [n,R,R,3]");
        int64_t n_real = reals.shape()[0];
        if (n_real < 2) {
            ++out.skipped;
            out.warnings.push_back("identity " + std::to_string(g) +
                                   " has fewer than 2 real images; skipped");
            continue;
        }
        auto real_emb = detail::embed_rows(enc_id, reals);
        std::vector<double> dists;
        dists.reserve(static_cast<size_t>(n_real * (n_real - 1) / 2));
        for (int64_t i = 0; i < n_real; ++i)
            for (int64_t j = i + 1; j < n_real; ++j)
                dists.push_back(detail::normalized_distance(real_emb, i, real_emb, j));
        std::sort(dists.begin(), dists.end());

        const GeneratedSet& set = sets[g];
        set.validate();
        if (set.items.empty()) throw DomainError("identity_distance_distribution: empty set");
        auto gen_emb = detail::embed_rows(enc_id, detail::stack_images(set, true));
        Tensor<float> ref_img({1, set.identity_ref.pixels.shape()[0],
                               set.identity_ref.pixels.shape()[1],
                               set.identity_ref.pixels.shape()[2]});
        std::memcpy(ref_img.data(), set.identity_ref.pixels.data(),
                    sizeof(float) * static_cast<size_t>(set.identity_ref.pixels.numel()));
        auto ref_emb = detail::embed_rows(enc_id, ref_img);
        double gen_acc = 0.0;
        for (int64_t i = 0; i < gen_emb.shape()[0]; ++i)
            gen_acc += detail::normalized_distance(gen_emb, i, ref_emb, 0);

        IdentityDistanceRow row;
        row.identity = static_cast<int>(g);
        row.dmin = dists.front();
        row.dmax = dists.back();
        row.q1 = detail::sorted_quantile(dists, 0.25);
        row.q2 = detail::sorted_quantile(dists, 0.50);
        row.q3 = detail::sorted_quantile(dists, 0.75);
        row.gen_mean = gen_acc / static_cast<double>(gen_emb.shape()[0]);
        row.within = row.gen_mean >= row.q1 && row.gen_mean <= row.q3;
        within_count += row.within ? 1 : 0;
        out.rows.push_back(row);
    }
    if (!out.rows.empty())
        out.within_fraction = static_cast<double>(within_count) / static_cast<double>(out.rows.size());
    return out;
}

// ---------------------------------------------------------------------------
// oracle scores from the synthetic ground truth
// ---------------------------------------------------------------------------

struct OracleScores {
    double class_acc = 0.0;
    double id_mse = 0.0;
};

// classifier predicts the expression class of each generated image; the
// regressor's identity factors are scored against the reference's true ones
template <typename Classifier, typename Regressor>
OracleScores oracle_scores(const GeneratedSet& set, const Classifier& oracle_classifier,
                           const Regressor& oracle_id_regressor) {
    set.validate();
    int64_t n = static_cast<int64_t>(set.items.size());
    if (n < 1) throw DomainError("oracle_scores: empty set");
    NoGradGuard ng;
    auto gen = detail::stack_images(set, true);

    auto logits = oracle_classifier.classify(Var<float>(gen)).value();
    int64_t k = logits.shape()[1];
    int hits = 0;
    for (int64_t i = 0; i < n; ++i) {
        int64_t best = 0;
        for (int64_t c = 1; c < k; ++c)
            if (logits.data()[i * k + c] > logits.data()[i * k + best]) best = c;
        if (best == set.items[static_cast<size_t>(i)].class_id) ++hits;
    }

    auto pred = oracle_id_regressor.regress(Var<float>(gen)).value();
    auto truth = id_target(set.identity_ref.identity);
    if (pred.shape()[1] != static_cast<int64_t>(truth.size()))
        throw ShapeError("oracle_scores: identity regressor dimension mismatch");
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i)
        for (size_t d = 0; d < truth.size(); ++d) {
            double diff = pred.data()[i * static_cast<int64_t>(truth.size()) +
                                      static_cast<int64_t>(d)] -
                          truth[d];
            acc += diff * diff;
        }

    OracleScores out;
    out.class_acc = static_cast<double>(hits) / static_cast<double>(n);
    out.id_mse = acc / (static_cast<double>(n) * static_cast<double>(truth.size()));
    return out;
}

// ---------------------------------------------------------------------------
// report assembly
// ---------------------------------------------------------------------------

struct MetricReport {
    double exp_error = 0.0;
    double clip_like = 0.0;
    double id_sim = 0.0;
    double dino_like = 0.0;
    double dino_con = 0.0;
    double id_con = 0.0;
    double oracle_class_acc = 0.0;
    double oracle_id_mse = 0.0;
    int64_t n_items = 0;

    void validate() const {
        auto in_unit = [](double v) { return v >= -1.0 && v <= 1.0; };
        if (exp_error < 0.0) throw NumericError("metric report: negative expression error");
        if (!in_unit(clip_like) || !in_unit(id_sim) || !in_unit(dino_like) || !in_unit(dino_con) ||
            !in_unit(id_con))
            throw NumericError("metric report: similarity outside [-1, 1]");
    }

    json to_json() const {
        return {{"exp_error", exp_error},
                {"clip_like", clip_like},
                {"id_sim", id_sim},
                {"dino_like", dino_like},
                {"dino_con", dino_con},
                {"id_con", id_con},
                {"oracle_class_acc", oracle_class_acc},
                {"oracle_id_mse", oracle_id_mse},
                {"n_items", n_items}};
    }

    static MetricReport from_json(const json& j) {
        MetricReport r;
        r.exp_error = j.at("exp_error");
        r.clip_like = j.at("clip_like");
        r.id_sim = j.at("id_sim");
        r.dino_like = j.at("dino_like");
        r.dino_con = j.at("dino_con");
        r.id_con = j.at("id_con");
        r.oracle_class_acc = j.at("oracle_class_acc");
        r.oracle_id_mse = j.at("oracle_id_mse");
        r.n_items = j.at("n_items");
        return r;
    }
};

// cosine means can drift past 1 by float rounding; the report stores exact
// unit-interval values
inline double clamp_unit(double v) { return std::clamp(v, -1.0, 1.0); }

template <typename IdEnc, typename ExpEnc, typename Embedder>
MetricReport compute_metrics(const GeneratedSet& set, const IdEnc& enc_id, const ExpEnc& enc_exp,
                             const Embedder& embedder, Pairing pairing = Pairing::matched) {
    MetricReport r;
    r.n_items = static_cast<int64_t>(set.items.size());
    r.exp_error = expression_error(set, enc_exp, pairing);
    r.clip_like = clamp_unit(embedding_similarity(set, embedder, SimilarityTarget::exemplar));
    r.id_sim = clamp_unit(identity_similarity(set, enc_id));
    r.dino_like = clamp_unit(embedding_similarity(set, embedder, SimilarityTarget::identity_ref));
    r.dino_con = clamp_unit(consistency(set, embedder));
    r.id_con = clamp_unit(consistency(set, enc_id));
    auto oracle = oracle_scores(set, enc_exp, enc_id);
    r.oracle_class_acc = oracle.class_acc;
    r.oracle_id_mse = oracle.id_mse;
    r.validate();
    return r;
}

inline MetricReport mean_report(const std::vector<MetricReport>& reports) {
    if (reports.empty()) throw DomainError("mean_report: no reports");
    MetricReport m;
    for (const auto& r : reports) {
        m.exp_error += r.exp_error;
        m.clip_like += r.clip_like;
        m.id_sim += r.id_sim;
        m.dino_like += r.dino_like;
        m.dino_con += r.dino_con;
        m.id_con += r.id_con;
        m.oracle_class_acc += r.oracle_class_acc;
        m.oracle_id_mse += r.oracle_id_mse;
        m.n_items += r.n_items;
    }
    double k = static_cast<double>(reports.size());
    m.exp_error /= k;
    m.clip_like /= k;
    m.id_sim /= k;
    m.dino_like /= k;
    m.dino_con /= k;
    m.id_con /= k;
    m.oracle_class_acc /= k;
    m.oracle_id_mse /= k;
    return m;
}

inline std::string format_report(const MetricReport& r) {
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(4);
    out << "items:            " << r.n_items << "\n"
        << "exp_error:        " << r.exp_error << "\n"
        << "clip_like:        " << r.clip_like << "\n"
        << "id_sim:           " << r.id_sim << "\n"
        << "dino_like:        " << r.dino_like << "\n"
        << "dino_con:         " << r.dino_con << "\n"
        << "id_con:           " << r.id_con << "\n"
        << "oracle_class_acc: " << r.oracle_class_acc << "\n"
        << "oracle_id_mse:    " << r.oracle_id_mse << "\n";
    return out.str();
}

}  // namespace faceflow
