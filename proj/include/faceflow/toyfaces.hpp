#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "core/rng.hpp"
#include "core/serialize.hpp"
#include "core/tensor.hpp"

namespace faceflow {

// Procedural face dataset: every image is a deterministic function of a small
// identity parameter vector, an expression parameter vector, and a style
// palette index. Ground-truth factors make oracle evaluation possible.

struct IdentityParams {
    double hue = 0.0;          // [0,1) color angle
    double aspect = 1.0;       // [0.7,1.3] face ellipse width/height
    double eye_spacing = 0.35; // [0.25,0.45] fraction of image width
    double hair_height = 0.15; // [0,0.3] fraction of image height

    void validate() const {
        if (!(hue >= 0.0 && hue < 1.0)) throw DomainError("identity field hue out of [0,1)");
        if (!(aspect >= 0.7 && aspect <= 1.3))
            throw DomainError("identity field aspect out of [0.7,1.3]");
        if (!(eye_spacing >= 0.25 && eye_spacing <= 0.45))
            throw DomainError("identity field eye_spacing out of [0.25,0.45]");
        if (!(hair_height >= 0.0 && hair_height <= 0.3))
            throw DomainError("identity field hair_height out of [0,0.3]");
    }
};

struct ExpressionParams {
    double mouth_curve = 0.0; // [-1,1] negative = frown
    double eye_open = 0.6;    // [0.2,1.0]
    double brow_angle = 0.0;  // [-1,1]

    void validate() const {
        if (!(mouth_curve >= -1.0 && mouth_curve <= 1.0))
            throw DomainError("expression field mouth_curve out of [-1,1]");
        if (!(eye_open >= 0.2 && eye_open <= 1.0))
            throw DomainError("expression field eye_open out of [0.2,1.0]");
        if (!(brow_angle >= -1.0 && brow_angle <= 1.0))
            throw DomainError("expression field brow_angle out of [-1,1]");
    }
};

struct ExpressionClass {
    int class_id = 0;
    std::string name;
    ExpressionParams prototype;
    double jitter_scale = 0.08;
};

inline std::vector<ExpressionClass> default_classes(double jitter_scale = 0.08) {
    return {
        {0, "happy", {0.80, 0.70, 0.30}, jitter_scale},
        {1, "sad", {-0.80, 0.50, -0.20}, jitter_scale},
        {2, "surprised", {0.10, 1.00, 0.80}, jitter_scale},
        {3, "angry", {-0.50, 0.35, -0.95}, jitter_scale},
        {4, "neutral", {0.00, 0.60, 0.00}, jitter_scale},
    };
}

constexpr int kNumStyles = 4;

inline const std::array<std::string, kNumStyles>& style_names() {
    static const std::array<std::string, kNumStyles> names = {"photo", "lego", "clay", "crayon"};
    return names;
}

struct FaceImage {
    Tensor<float> pixels;  // [R,R,3] in [0,1]
    IdentityParams identity;
    ExpressionParams expression;
    int class_id = -1;
    int style_id = 0;
};

// ---------------------------------------------------------------------------
// renderer
// ---------------------------------------------------------------------------

namespace detail {

enum class FaceElement { bg, face, hair, eye, brow, mouth };

// Luma is constant per element and style; identity hue rotates only the
// chroma angle, so hue changes are invisible in the luma channel.
struct Palette {
    double bg_y;
    double face_y, face_rho;
    double hair_y, hair_rho;
};

inline const std::array<Palette, kNumStyles>& palettes() {
    static const std::array<Palette, kNumStyles> p = {{
        {0.93, 0.72, 0.14, 0.42, 0.11},  // photo
        {0.88, 0.66, 0.18, 0.38, 0.16},  // lego
        {0.85, 0.63, 0.07, 0.45, 0.09},  // clay
        {0.97, 0.75, 0.14, 0.50, 0.13},  // crayon
    }};
    return p;
}

constexpr double kTau = 6.283185307179586476925287;

inline std::array<double, 3> ycbcr_to_rgb(double y, double cb, double cr) {
    return {y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb};
}

// geometry constants, normalized image coordinates (y down)
constexpr double kFaceCx = 0.5, kFaceCy = 0.54, kFaceR = 0.36;
constexpr double kEyeY = 0.46, kEyeRx = 0.050, kEyeRyMax = 0.062;
constexpr double kBrowY = 0.36, kBrowHalfLen = 0.058, kBrowHalfThick = 0.009, kBrowMaxRot = 0.35;
constexpr double kMouthYFrac = 0.72, kMouthHalfWidth = 0.11, kMouthAmp = 0.05;

// The mouth band is one base-resolution pixel thick and anchored to a pixel
// row center, so a flat mouth occupies exactly one row of the final image.
inline double mouth_row_center(int resolution) {
    return (std::floor(kMouthYFrac * resolution) + 0.5) / resolution;
}

inline bool in_ellipse(double x, double y, double cx, double cy, double rx, double ry) {
    double dx = (x - cx) / rx, dy = (y - cy) / ry;
    return dx * dx + dy * dy <= 1.0;
}

inline FaceElement classify(double x, double y, const IdentityParams& id,
                            const ExpressionParams& exp, int resolution) {
    double rx = kFaceR * std::sqrt(id.aspect);
    double ry = kFaceR / std::sqrt(id.aspect);

    // mouth: quadratic bend, half-open band of one base pixel height
    double mouth_y0 = mouth_row_center(resolution);
    double u = (x - kFaceCx) / kMouthHalfWidth;
    if (u >= -1.0 && u <= 1.0) {
        double yc = mouth_y0 + kMouthAmp * exp.mouth_curve * (1.0 - u * u);
        double half = 0.5 / resolution;
        if (y >= yc - half && y < yc + half) return FaceElement::mouth;
    }

    // brows: mirrored rotated bars
    for (int side = 0; side < 2; ++side) {
        double cx = kFaceCx + (side == 0 ? -1.0 : 1.0) * id.eye_spacing / 2.0;
        double phi = (side == 0 ? 1.0 : -1.0) * kBrowMaxRot * exp.brow_angle;
        double c = std::cos(phi), s = std::sin(phi);
        double dx = x - cx, dy = y - kBrowY;
        double lu = c * dx + s * dy, lv = -s * dx + c * dy;
        if (std::abs(lu) <= kBrowHalfLen && std::abs(lv) <= kBrowHalfThick)
            return FaceElement::brow;
    }

    // eyes: height scales with eye_open
    for (int side = 0; side < 2; ++side) {
        double cx = kFaceCx + (side == 0 ? -1.0 : 1.0) * id.eye_spacing / 2.0;
        if (in_ellipse(x, y, cx, kEyeY, kEyeRx, kEyeRyMax * exp.eye_open))
            return FaceElement::eye;
    }

    if (in_ellipse(x, y, kFaceCx, kFaceCy, rx, ry)) {
        double y_top = kFaceCy - ry;
        if (y < y_top + id.hair_height) return FaceElement::hair;
        return FaceElement::face;
    }
    return FaceElement::bg;
}

inline std::array<double, 3> element_rgb(FaceElement e, const IdentityParams& id, int style) {
    const Palette& p = palettes()[static_cast<size_t>(style)];
    switch (e) {
        case FaceElement::bg: return ycbcr_to_rgb(p.bg_y, 0.0, 0.0);
        case FaceElement::face: {
            double a = kTau * id.hue;
            return ycbcr_to_rgb(p.face_y, p.face_rho * std::cos(a), p.face_rho * std::sin(a));
        }
        case FaceElement::hair: {
            double a = kTau * id.hue + 0.8;
            return ycbcr_to_rgb(p.hair_y, p.hair_rho * std::cos(a), p.hair_rho * std::sin(a));
        }
        case FaceElement::eye: return ycbcr_to_rgb(0.14, 0.0, 0.0);
        case FaceElement::brow: return ycbcr_to_rgb(0.22, 0.0, 0.0);
        case FaceElement::mouth: return ycbcr_to_rgb(0.30, -0.03, 0.14);
    }
    return {0, 0, 0};
}

}  // namespace detail

constexpr int kSupersample = 4;

inline FaceImage render(const IdentityParams& id, const ExpressionParams& exp, int resolution,
                        int style = 0) {
    id.validate();
    exp.validate();
    if (resolution < 16) throw DomainError("resolution must be >= 16");
    if (style < 0 || style >= kNumStyles) throw DomainError("style index out of [0,4)");
    const int ss = kSupersample;
    const int rs = resolution * ss;
    Tensor<float> img({resolution, resolution, 3});
    for (int py = 0; py < resolution; ++py)
        for (int px = 0; px < resolution; ++px) {
            double acc[3] = {0, 0, 0};
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx) {
                    double x = (px * ss + sx + 0.5) / rs;
                    double y = (py * ss + sy + 0.5) / rs;
                    auto rgb = detail::element_rgb(detail::classify(x, y, id, exp, resolution), id,
                                                  style);
                    acc[0] += rgb[0];
                    acc[1] += rgb[1];
                    acc[2] += rgb[2];
                }
            for (int c = 0; c < 3; ++c)
                img.at(py, px, c) = static_cast<float>(acc[c] / (ss * ss));
        }
    FaceImage out;
    out.pixels = std::move(img);
    out.identity = id;
    out.expression = exp;
    out.style_id = style;
    return out;
}

// canonical identity reference: neutral expression, photo palette
inline FaceImage identity_reference(const IdentityParams& id, int resolution) {
    return render(id, ExpressionParams{0.0, 0.6, 0.0}, resolution, 0);
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

inline IdentityParams sample_identity(Rng& rng) {
    IdentityParams p;
    p.hue = rng.uniform();
    p.aspect = rng.uniform(0.7, 1.3);
    p.eye_spacing = rng.uniform(0.25, 0.45);
    p.hair_height = rng.uniform(0.0, 0.3);
    return p;
}

// truncated Gaussian jitter: clamp back into the interval rather than reject
inline ExpressionParams sample_expression(const ExpressionClass& cls, Rng& rng) {
    auto clampd = [](double v, double lo, double hi) { return std::min(std::max(v, lo), hi); };
    ExpressionParams e;
    e.mouth_curve = clampd(cls.prototype.mouth_curve + cls.jitter_scale * rng.normal(), -1.0, 1.0);
    e.eye_open = clampd(cls.prototype.eye_open + cls.jitter_scale * rng.normal(), 0.2, 1.0);
    e.brow_angle = clampd(cls.prototype.brow_angle + cls.jitter_scale * rng.normal(), -1.0, 1.0);
    return e;
}

struct DatasetItem {
    int32_t identity = 0;
    int32_t class_id = 0;
    int32_t style = 0;
    ExpressionParams expression;
};

struct ToyDataset {
    int resolution = 32;
    int n_styles = kNumStyles;
    uint64_t seed = 0;
    std::vector<ExpressionClass> classes;
    std::vector<IdentityParams> identities;
    std::vector<DatasetItem> items;
    Tensor<float> images;  // [N, R, R, 3]

    int64_t size() const { return static_cast<int64_t>(items.size()); }

    FaceImage face(int64_t i) const {
        const auto& it = items[static_cast<size_t>(i)];
        FaceImage f;
        f.pixels = Tensor<float>({resolution, resolution, 3});
        std::memcpy(f.pixels.data(), images.data() + i * f.pixels.numel(),
                    sizeof(float) * static_cast<size_t>(f.pixels.numel()));
        f.identity = identities[static_cast<size_t>(it.identity)];
        f.expression = it.expression;
        f.class_id = it.class_id;
        f.style_id = it.style;
        return f;
    }
};

namespace detail {
// distinct stream tags for the master-seed split
constexpr uint64_t kSeedIdentity = 0x1D;
constexpr uint64_t kSeedItems = 0x17E3;
constexpr uint64_t kSeedBank = 0xBA2C;
}  // namespace detail

// Per-identity sub-seeds: identity i's parameters and items never depend on
// n_identities or on any other identity, so sharded generation agrees.
inline ToyDataset sample_dataset(int n_identities, int per_identity,
                                 const std::vector<ExpressionClass>& classes, uint64_t seed,
                                 int resolution = 32, int n_styles = kNumStyles) {
    if (classes.empty()) throw DomainError("sample_dataset: empty class list");
    if (n_identities < 1 || per_identity < 1)
        throw DomainError("sample_dataset: counts must be >= 1");
    if (n_styles < 1 || n_styles > kNumStyles)
        throw DomainError("sample_dataset: n_styles out of [1,4]");
    ToyDataset ds;
    ds.resolution = resolution;
    ds.n_styles = n_styles;
    ds.seed = seed;
    ds.classes = classes;
    ds.identities.reserve(static_cast<size_t>(n_identities));
    ds.items.reserve(static_cast<size_t>(n_identities) * static_cast<size_t>(per_identity));
    ds.images = Tensor<float>({static_cast<int64_t>(n_identities) * per_identity, resolution,
                               resolution, 3});
    int64_t img_numel = static_cast<int64_t>(resolution) * resolution * 3;
    for (int i = 0; i < n_identities; ++i) {
        Rng id_rng(mix_seed(seed, detail::kSeedIdentity, static_cast<uint64_t>(i)));
        ds.identities.push_back(sample_identity(id_rng));
        Rng item_rng(mix_seed(seed, detail::kSeedItems, static_cast<uint64_t>(i)));
        for (int j = 0; j < per_identity; ++j) {
            DatasetItem it;
            it.identity = i;
            it.class_id = static_cast<int32_t>(item_rng.below(classes.size()));
            it.style = static_cast<int32_t>(item_rng.below(static_cast<uint64_t>(n_styles)));
            it.expression = sample_expression(classes[static_cast<size_t>(it.class_id)], item_rng);
            auto img = render(ds.identities.back(), it.expression, resolution, it.style);
            std::memcpy(ds.images.data() + static_cast<int64_t>(ds.items.size()) * img_numel,
                        img.pixels.data(), sizeof(float) * static_cast<size_t>(img_numel));
            ds.items.push_back(it);
        }
    }
    for (size_t a = 0; a < ds.identities.size(); ++a)
        for (size_t b = a + 1; b < ds.identities.size(); ++b) {
            const auto &pa = ds.identities[a], &pb = ds.identities[b];
            if (pa.hue == pb.hue && pa.aspect == pb.aspect && pa.eye_spacing == pb.eye_spacing &&
                pa.hair_height == pb.hair_height)
                throw DomainError("sample_dataset: duplicate identity parameter vector");
        }
    return ds;
}

// ---------------------------------------------------------------------------
// exemplar bank
// ---------------------------------------------------------------------------

struct ExemplarBank {
    int resolution = 32;
    uint64_t seed = 0;
    std::map<int, std::vector<FaceImage>> buckets;
};

// Bank identities are drawn from their own seed stream, so exemplars never
// coincide with dataset identities (the retrieval database is external data).
inline ExemplarBank build_exemplar_bank(const std::vector<ExpressionClass>& classes,
                                        int per_class, uint64_t seed, int resolution = 32,
                                        double jitter_override = -1.0) {
    if (classes.empty()) throw DomainError("build_exemplar_bank: empty class list");
    if (per_class < 1) throw DomainError("build_exemplar_bank: per_class must be >= 1");
    ExemplarBank bank;
    bank.resolution = resolution;
    bank.seed = seed;
    for (const auto& cls : classes) {
        Rng rng(mix_seed(seed, detail::kSeedBank, static_cast<uint64_t>(cls.class_id)));
        ExpressionClass eff = cls;
        if (jitter_override > 0.0) eff.jitter_scale = jitter_override;
        auto& bucket = bank.buckets[cls.class_id];
        for (int m = 0; m < per_class; ++m) {
            IdentityParams id = sample_identity(rng);
            ExpressionParams exp = sample_expression(eff, rng);
            FaceImage img = render(id, exp, resolution, 0);
            img.class_id = cls.class_id;
            bucket.push_back(std::move(img));
        }
    }
    return bank;
}

inline const FaceImage& retrieve_exemplar(const ExemplarBank& bank, int class_id, uint64_t seed) {
    auto it = bank.buckets.find(class_id);
    if (it == bank.buckets.end())
        throw LookupError("retrieve_exemplar: unknown class_id " + std::to_string(class_id));
    Rng rng(mix_seed(bank.seed, 0x9E7A, static_cast<uint64_t>(class_id), seed));
    return it->second[rng.below(it->second.size())];
}

// ---------------------------------------------------------------------------
// ground-truth factor encodings (regression targets for the oracle encoders)
// ---------------------------------------------------------------------------

// identity: circular hue as (cos, sin); linear factors scaled to [0,1]
inline std::array<double, 5> id_target(const IdentityParams& p) {
    return {std::cos(detail::kTau * p.hue), std::sin(detail::kTau * p.hue),
            (p.aspect - 0.7) / 0.6, (p.eye_spacing - 0.25) / 0.2, p.hair_height / 0.3};
}

inline std::array<double, 3> exp_target(const ExpressionParams& p) {
    return {p.mouth_curve, (p.eye_open - 0.2) / 0.8, p.brow_angle};
}

// ---------------------------------------------------------------------------
// disk layout: manifest.json + images.bin (f32 little-endian NHWC)
// ---------------------------------------------------------------------------

namespace detail {

inline json classes_to_json(const std::vector<ExpressionClass>& classes) {
    json out = json::array();
    for (const auto& c : classes)
        out.push_back({{"id", c.class_id},
                       {"name", c.name},
                       {"prototype",
                        {c.prototype.mouth_curve, c.prototype.eye_open, c.prototype.brow_angle}},
                       {"jitter_scale", c.jitter_scale}});
    return out;
}

inline std::vector<ExpressionClass> classes_from_json(const json& j) {
    std::vector<ExpressionClass> out;
    for (const auto& c : j) {
        ExpressionClass cls;
        cls.class_id = c.at("id").get<int>();
        cls.name = c.at("name").get<std::string>();
        cls.prototype.mouth_curve = c.at("prototype")[0].get<double>();
        cls.prototype.eye_open = c.at("prototype")[1].get<double>();
        cls.prototype.brow_angle = c.at("prototype")[2].get<double>();
        cls.jitter_scale = c.at("jitter_scale").get<double>();
        out.push_back(cls);
    }
    return out;
}

}  // namespace detail

inline void save_dataset(const std::string& dir, const ToyDataset& ds) {
    ensure_dir(dir);
    json m;
    m["format"] = "faceflow-dataset-v1";
    m["resolution"] = ds.resolution;
    m["n_styles"] = ds.n_styles;
    m["seed"] = ds.seed;
    m["classes"] = detail::classes_to_json(ds.classes);
    json ids = json::array();
    for (const auto& p : ds.identities)
        ids.push_back({p.hue, p.aspect, p.eye_spacing, p.hair_height});
    m["identities"] = ids;
    json items = json::array();
    for (const auto& it : ds.items)
        items.push_back({it.identity, it.class_id, it.style, it.expression.mouth_curve,
                         it.expression.eye_open, it.expression.brow_angle});
    m["items"] = items;
    write_json_file(dir + "/manifest.json", m);
    write_blob(dir + "/images.bin", ds.images.data(), ds.images.numel());
}

inline ToyDataset load_dataset(const std::string& dir) {
    json m = read_json_file(dir + "/manifest.json");
    if (m.value("format", "") != "faceflow-dataset-v1")
        throw IoError(dir + ": not a dataset directory");
    ToyDataset ds;
    ds.resolution = m.at("resolution").get<int>();
    ds.n_styles = m.at("n_styles").get<int>();
    ds.seed = m.at("seed").get<uint64_t>();
    ds.classes = detail::classes_from_json(m.at("classes"));
    for (const auto& p : m.at("identities"))
        ds.identities.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>(),
                                 p[3].get<double>()});
    for (const auto& it : m.at("items")) {
        DatasetItem d;
        d.identity = it[0].get<int32_t>();
        d.class_id = it[1].get<int32_t>();
        d.style = it[2].get<int32_t>();
        d.expression = {it[3].get<double>(), it[4].get<double>(), it[5].get<double>()};
        ds.items.push_back(d);
    }
    ds.images = Tensor<float>({static_cast<int64_t>(ds.items.size()), ds.resolution,
                               ds.resolution, 3});
    read_blob(dir + "/images.bin", ds.images.data(), ds.images.numel());
    return ds;
}

inline void save_bank(const std::string& dir, const ExemplarBank& bank,
                      const std::vector<ExpressionClass>& classes) {
    ensure_dir(dir);
    json m;
    m["format"] = "faceflow-bank-v1";
    m["resolution"] = bank.resolution;
    m["seed"] = bank.seed;
    m["classes"] = detail::classes_to_json(classes);
    write_json_file(dir + "/manifest.json", m);
    char sub[32];
    for (const auto& [cid, bucket] : bank.buckets) {
        std::snprintf(sub, sizeof(sub), "/class_%02d", cid);
        std::string cdir = dir + sub;
        ensure_dir(cdir);
        json cm;
        cm["class_id"] = cid;
        cm["count"] = bucket.size();
        json ids = json::array(), exps = json::array();
        for (const auto& f : bucket) {
            ids.push_back({f.identity.hue, f.identity.aspect, f.identity.eye_spacing,
                           f.identity.hair_height});
            exps.push_back({f.expression.mouth_curve, f.expression.eye_open,
                            f.expression.brow_angle});
        }
        cm["identities"] = ids;
        cm["expressions"] = exps;
        write_json_file(cdir + "/manifest.json", cm);
        int64_t numel = static_cast<int64_t>(bank.resolution) * bank.resolution * 3;
        std::vector<float> blob;
        blob.reserve(static_cast<size_t>(numel) * bucket.size());
        for (const auto& f : bucket)
            blob.insert(blob.end(), f.pixels.vec().begin(), f.pixels.vec().end());
        write_blob(cdir + "/images.bin", blob.data(), static_cast<int64_t>(blob.size()));
    }
}

inline ExemplarBank load_bank(const std::string& dir) {
    json m = read_json_file(dir + "/manifest.json");
    if (m.value("format", "") != "faceflow-bank-v1") throw IoError(dir + ": not a bank directory");
    ExemplarBank bank;
    bank.resolution = m.at("resolution").get<int>();
    bank.seed = m.at("seed").get<uint64_t>();
    auto classes = detail::classes_from_json(m.at("classes"));
    char sub[32];
    for (const auto& cls : classes) {
        std::snprintf(sub, sizeof(sub), "/class_%02d", cls.class_id);
        std::string cdir = dir + sub;
        json cm = read_json_file(cdir + "/manifest.json");
        size_t count = cm.at("count").get<size_t>();
        int64_t numel = static_cast<int64_t>(bank.resolution) * bank.resolution * 3;
        std::vector<float> blob(count * static_cast<size_t>(numel));
        read_blob(cdir + "/images.bin", blob.data(), static_cast<int64_t>(blob.size()));
        auto& bucket = bank.buckets[cls.class_id];
        for (size_t i = 0; i < count; ++i) {
            FaceImage f;
            f.class_id = cls.class_id;
            const auto& ip = cm.at("identities")[i];
            const auto& ep = cm.at("expressions")[i];
            f.identity = {ip[0].get<double>(), ip[1].get<double>(), ip[2].get<double>(),
                          ip[3].get<double>()};
            f.expression = {ep[0].get<double>(), ep[1].get<double>(), ep[2].get<double>()};
            f.pixels = Tensor<float>({bank.resolution, bank.resolution, 3},
                                     std::vector<float>(blob.begin() + static_cast<int64_t>(i) * numel,
                                                        blob.begin() + static_cast<int64_t>(i + 1) * numel));
            bucket.push_back(std::move(f));
        }
    }
    return bank;
}

// class prototypes recorded with a saved bank, without loading the images
inline std::vector<ExpressionClass> load_bank_classes(const std::string& dir) {
    json m = read_json_file(dir + "/manifest.json");
    if (m.value("format", "") != "faceflow-bank-v1") throw IoError(dir + ": not a bank directory");
    return detail::classes_from_json(m.at("classes"));
}

}  // namespace faceflow
