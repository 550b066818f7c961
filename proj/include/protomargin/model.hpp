#pragma once

// The prototype-part classifier: a small convolutional backbone producing a
// c x 14 x 14 latent grid, a prototype layer converting patch distances to
// similarities pooled by top-k averaging, a linear margin head on the pooled
// scores, and an affine logistic malignancy head on the unnormalized margin
// logits. One set of graph builders serves training, evaluation and
// explanation, so every consumer sees identical numbers.

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <vector>

#include <json.hpp>

#include "protomargin/image.hpp"
#include "protomargin/ops.hpp"
#include "protomargin/rng.hpp"
#include "protomargin/tape.hpp"

namespace protomargin::model {

constexpr int kImageSize = 112;
constexpr int kLatentGrid = 14;
constexpr int kNumClasses = 3;
constexpr std::array<int, 3> kBlockChannels = {8, 16, 64};
constexpr int kCheckpointVersion = 1;

struct ProtoProvenance {
    bool valid = false;
    int image_id = -1;
    int row = -1;
    int col = -1;
};

struct ConvBlock {
    Tensor weight;  // [out,in,3,3]
    Tensor bias;    // [out]
};

struct ModelParams {
    std::array<ConvBlock, 3> blocks;
    Tensor prototypes;                        // [m, c]
    std::vector<int> proto_class;             // size m
    std::vector<ProtoProvenance> provenance;  // size m
    Tensor w1;                                // [3, m], no bias
    Tensor w2;                                // [3]
    double b2 = 0.0;
    int k = 5;
    double epsilon = 1e-4;

    int num_prototypes() const { return prototypes.dim(0); }
    int latent_channels() const { return prototypes.dim(1); }

    int prototypes_of_class(int cls) const {
        int n = 0;
        for (int c : proto_class) n += c == cls ? 1 : 0;
        return n;
    }

    std::vector<double> prototype_vector(int j) const {
        const int c = latent_channels();
        const auto* base = prototypes.values.data() + static_cast<std::size_t>(j) * c;
        return {base, base + c};
    }

    void set_prototype_vector(int j, const std::vector<double>& v) {
        std::copy(v.begin(), v.end(),
                  prototypes.values.begin() + static_cast<std::ptrdiff_t>(j) * latent_channels());
    }
};

/// The +1/-1 margin-head pattern: +1 where the prototype belongs to the row's
/// class, -1 otherwise.
inline Tensor signed_init_w1(const std::vector<int>& proto_class) {
    const int m = static_cast<int>(proto_class.size());
    Tensor w1 = Tensor::zeros({kNumClasses, m});
    for (int cls = 0; cls < kNumClasses; ++cls)
        for (int j = 0; j < m; ++j)
            w1.values[static_cast<std::size_t>(cls) * m + j] =
                proto_class[static_cast<std::size_t>(j)] == cls ? 1.0 : -1.0;
    return w1;
}

/// Fresh model: conv weights uniform in +-sqrt(6/fan_in), prototypes uniform
/// over the unit hypercube (the backbone output lives in [0,1]), margin head
/// at the signed pattern, malignancy head at zero until its training stage.
inline ModelParams init_model(Rng& rng, int per_class = 5, int k = 5,
                              double epsilon = 1e-4) {
    ModelParams p;
    int in_ch = 1;
    for (int b = 0; b < 3; ++b) {
        const int out_ch = kBlockChannels[static_cast<std::size_t>(b)];
        p.blocks[static_cast<std::size_t>(b)].weight = Tensor::zeros({out_ch, in_ch, 3, 3});
        const double bound = 1.5 * std::sqrt(6.0 / (in_ch * 9));
        for (double& v : p.blocks[static_cast<std::size_t>(b)].weight.values)
            v = uniform_double(rng, -bound, bound);
        p.blocks[static_cast<std::size_t>(b)].bias = Tensor::zeros({out_ch});
        in_ch = out_ch;
    }
    const int m = per_class * kNumClasses;
    const int c = kBlockChannels[2];
    p.prototypes = Tensor::zeros({m, c});
    for (double& v : p.prototypes.values) v = uniform_double(rng);
    p.proto_class.resize(static_cast<std::size_t>(m));
    for (int j = 0; j < m; ++j) p.proto_class[static_cast<std::size_t>(j)] = j / per_class;
    p.provenance.assign(static_cast<std::size_t>(m), ProtoProvenance{});
    p.w1 = signed_init_w1(p.proto_class);
    p.w2 = Tensor::zeros({kNumClasses});
    p.b2 = 0.0;
    p.k = k;
    p.epsilon = epsilon;
    return p;
}

// ---- graph builders -----------------------------------------------------

struct ParamVars {
    std::array<Var, 3> conv_w;
    std::array<Var, 3> conv_b;
    std::vector<Var> prototypes;  // one [c] var per prototype
    Var w1;
};

inline ParamVars make_param_vars(Tape& tape, const ModelParams& p, bool train_backbone,
                                 bool train_prototypes, bool train_w1) {
    ParamVars v;
    for (int b = 0; b < 3; ++b) {
        v.conv_w[static_cast<std::size_t>(b)] =
            tape.leaf(p.blocks[static_cast<std::size_t>(b)].weight, train_backbone);
        v.conv_b[static_cast<std::size_t>(b)] =
            tape.leaf(p.blocks[static_cast<std::size_t>(b)].bias, train_backbone);
    }
    const int m = p.num_prototypes();
    const int c = p.latent_channels();
    v.prototypes.reserve(static_cast<std::size_t>(m));
    for (int j = 0; j < m; ++j)
        v.prototypes.push_back(
            tape.leaf(Tensor(Shape{c}, p.prototype_vector(j)), train_prototypes));
    v.w1 = tape.leaf(p.w1, train_w1);
    return v;
}

inline Tensor image_tensor(const Image& img) {
    if (img.width != kImageSize || img.height != kImageSize)
        throw std::invalid_argument("model expects a " + std::to_string(kImageSize) + "x" +
                                    std::to_string(kImageSize) + " image, got " +
                                    std::to_string(img.width) + "x" +
                                    std::to_string(img.height));
    Tensor t(Shape{1, 1, kImageSize, kImageSize}, img.px);
    for (double& v : t.values) v -= 0.5;  // center pixel values
    return t;
}

/// Backbone: conv(3x3, pad 1) + relu + 2x maxpool twice, then a final
/// conv + 2x maxpool block whose nonlinearity is the sigmoid squash, so
/// latent patches fill (0,1)^c. A relu in front of that sigmoid would fold
/// the latents into [0.5,1) and flatten every patch distance.
/// 112 -> 56 -> 28 -> 14.
inline Var build_backbone(Tape& tape, const ParamVars& pv, Var image) {
    Var x = image;
    for (int b = 0; b < 2; ++b)
        x = maxpool2x2(relu(conv2d(x, pv.conv_w[static_cast<std::size_t>(b)],
                                   pv.conv_b[static_cast<std::size_t>(b)], 1, 1)));
    x = sigmoid(maxpool2x2(conv2d(x, pv.conv_w[2], pv.conv_b[2], 1, 1)));
    return reshape(x, {kBlockChannels[2], kLatentGrid, kLatentGrid});
}

struct ImageGraph {
    Var latent;                  // [c,14,14]
    std::vector<Var> dist_maps;  // m x [14,14]
    std::vector<Var> sim_maps;   // m x [14,14]
    std::vector<Var> pooled;     // m scalars s_j
    Var scores;                  // [m]
    Var logits;                  // [3] margin logits
};

inline ImageGraph build_image_graph(Tape& tape, const ParamVars& pv,
                                    const ModelParams& p, const Image& img) {
    ImageGraph g;
    Var x = tape.constant(image_tensor(img));
    g.latent = build_backbone(tape, pv, x);
    const int m = p.num_prototypes();
    g.dist_maps.reserve(static_cast<std::size_t>(m));
    g.sim_maps.reserve(static_cast<std::size_t>(m));
    g.pooled.reserve(static_cast<std::size_t>(m));
    for (int j = 0; j < m; ++j) {
        Var d = l2_distance_map(g.latent, pv.prototypes[static_cast<std::size_t>(j)]);
        Var s = dist_to_sim(d, p.epsilon);
        g.dist_maps.push_back(d);
        g.sim_maps.push_back(s);
        g.pooled.push_back(topk_avg_pool(s, p.k));
    }
    g.scores = stack_scalars(g.pooled);
    g.logits = linear(g.scores, pv.w1);
    return g;
}

// ---- evaluation-time forward ---------------------------------------------

inline std::array<double, 3> softmax3(const std::array<double, 3>& z) {
    const double m = std::max({z[0], z[1], z[2]});
    std::array<double, 3> e{};
    double denom = 0.0;
    for (int i = 0; i < 3; ++i) {
        e[static_cast<std::size_t>(i)] = std::exp(z[static_cast<std::size_t>(i)] - m);
        denom += e[static_cast<std::size_t>(i)];
    }
    for (double& v : e) v /= denom;
    return e;
}

/// h2: sigma(w2 . margin_logits + b2) on the unnormalized margin scores.
inline double malignancy_probability(const ModelParams& p,
                                     const std::array<double, 3>& margin_logits) {
    double z = p.b2;
    for (int i = 0; i < 3; ++i)
        z += p.w2.values[static_cast<std::size_t>(i)] * margin_logits[static_cast<std::size_t>(i)];
    return detail::sigmoid_stable(z);
}

/// Backbone-only latent map for one image, without gradients. Bit-identical
/// to the latent inside any full forward pass over the same parameters.
inline Tensor compute_latent(const ModelParams& p, const Image& img) {
    Tape tape;
    const ParamVars pv = make_param_vars(tape, p, false, false, false);
    Var latent = build_backbone(tape, pv, tape.constant(image_tensor(img)));
    return Tensor(tape.shape(latent), tape.val(latent));
}

struct ForwardResult {
    Tensor latent;                  // [c,14,14]
    std::vector<Tensor> dist_maps;  // m x [14,14]
    std::vector<Tensor> sim_maps;   // m x [14,14]
    std::vector<double> scores;     // pooled s_j
    std::array<double, 3> margin_logits{};
    std::array<double, 3> margin_probs{};
    double malignancy_prob = 0.0;
};

inline ForwardResult forward(const ModelParams& p, const Image& img) {
    Tape tape;
    const ParamVars pv = make_param_vars(tape, p, false, false, false);
    const ImageGraph g = build_image_graph(tape, pv, p, img);
    ForwardResult r;
    r.latent = Tensor(tape.shape(g.latent), tape.val(g.latent));
    const int m = p.num_prototypes();
    for (int j = 0; j < m; ++j) {
        r.dist_maps.emplace_back(tape.shape(g.dist_maps[static_cast<std::size_t>(j)]),
                                 tape.val(g.dist_maps[static_cast<std::size_t>(j)]));
        r.sim_maps.emplace_back(tape.shape(g.sim_maps[static_cast<std::size_t>(j)]),
                                tape.val(g.sim_maps[static_cast<std::size_t>(j)]));
        r.scores.push_back(tape.scalar(g.pooled[static_cast<std::size_t>(j)]));
    }
    const auto& logits = tape.val(g.logits);
    for (int i = 0; i < 3; ++i) r.margin_logits[static_cast<std::size_t>(i)] = logits[static_cast<std::size_t>(i)];
    r.margin_probs = softmax3(r.margin_logits);
    r.malignancy_prob = malignancy_probability(p, r.margin_logits);
    if (!r.latent.all_finite())
        throw std::runtime_error("forward produced non-finite latent values");
    return r;
}

/// Prototype activation map: the similarity map bilinearly upsampled to
/// image resolution, raw (not normalized).
inline Tensor compute_pam(const ForwardResult& r, int j) {
    if (j < 0 || static_cast<std::size_t>(j) >= r.sim_maps.size())
        throw std::invalid_argument("compute_pam: prototype index " + std::to_string(j) +
                                    " out of range");
    return upsample_tensor(r.sim_maps[static_cast<std::size_t>(j)], kImageSize, kImageSize);
}

// ---- checkpoint ----------------------------------------------------------
//
// Layout: 8-byte magic "PMCKPT01", 8-byte little-endian header length, JSON
// header, then all parameter tensors as little-endian 64-bit floats in the
// header's "tensors" order: block1..3 weight+bias, prototypes, w1, w2, b2.

namespace detail_ckpt {

inline void put_u64_le(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64_le(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void append_doubles_le(std::vector<unsigned char>& out,
                              const std::vector<double>& vs) {
    for (double d : vs) {
        std::uint64_t bits;
        std::memcpy(&bits, &d, 8);
        for (int i = 0; i < 8; ++i)
            out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xff));
    }
}

inline std::vector<double> read_doubles_le(const unsigned char* p, std::size_t n) {
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
            bits |= static_cast<std::uint64_t>(p[i * 8 + b]) << (8 * b);
        std::memcpy(&out[i], &bits, 8);
    }
    return out;
}

}  // namespace detail_ckpt

inline void save_checkpoint(const ModelParams& p, const std::filesystem::path& path) {
    using nlohmann::ordered_json;
    std::vector<std::pair<std::string, const Tensor*>> fields;
    for (int b = 0; b < 3; ++b) {
        fields.emplace_back("block" + std::to_string(b + 1) + ".weight",
                            &p.blocks[static_cast<std::size_t>(b)].weight);
        fields.emplace_back("block" + std::to_string(b + 1) + ".bias",
                            &p.blocks[static_cast<std::size_t>(b)].bias);
    }
    const Tensor b2t = Tensor::scalar(p.b2);
    fields.emplace_back("prototypes", &p.prototypes);
    fields.emplace_back("w1", &p.w1);
    fields.emplace_back("w2", &p.w2);
    fields.emplace_back("b2", &b2t);

    std::vector<unsigned char> payload;
    ordered_json tensors = ordered_json::array();
    for (const auto& [name, t] : fields) {
        ordered_json e;
        e["name"] = name;
        e["shape"] = t->shape;
        tensors.push_back(std::move(e));
        detail_ckpt::append_doubles_le(payload, t->values);
    }

    ordered_json header;
    header["version"] = kCheckpointVersion;
    header["image_size"] = kImageSize;
    header["latent_grid"] = kLatentGrid;
    header["latent_channels"] = p.latent_channels();
    header["k"] = p.k;
    header["epsilon"] = p.epsilon;
    header["classes"] = {"circumscribed", "indistinct", "spiculated"};
    header["proto_class"] = p.proto_class;
    ordered_json prov = ordered_json::array();
    for (const auto& pr : p.provenance) {
        if (pr.valid)
            prov.push_back({{"image_id", pr.image_id}, {"row", pr.row}, {"col", pr.col}});
        else
            prov.push_back(nullptr);
    }
    header["provenance"] = std::move(prov);
    header["tensors"] = std::move(tensors);
    header["payload_bytes"] = payload.size();
    header["payload_fnv1a"] = fnv1a64(payload.data(), payload.size());

    const std::string header_str = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out.write("PMCKPT01", 8);
    detail_ckpt::put_u64_le(out, header_str.size());
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    if (!out) throw std::runtime_error("short write to checkpoint " + path.string());
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
    using nlohmann::ordered_json;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (in.gcount() != 8 || std::memcmp(magic, "PMCKPT01", 8) != 0)
        throw std::runtime_error(path.string() + ": not a protomargin checkpoint");
    const std::uint64_t header_len = detail_ckpt::get_u64_le(in);
    std::string header_str(header_len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (static_cast<std::uint64_t>(in.gcount()) != header_len)
        throw std::runtime_error(path.string() + ": truncated checkpoint header");
    const ordered_json header = ordered_json::parse(header_str);
    if (header.at("version").get<int>() != kCheckpointVersion)
        throw std::runtime_error(path.string() + ": unsupported checkpoint version " +
                                 std::to_string(header.at("version").get<int>()));

    const std::size_t payload_bytes = header.at("payload_bytes").get<std::size_t>();
    std::vector<unsigned char> payload(payload_bytes);
    in.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(payload_bytes));
    if (static_cast<std::size_t>(in.gcount()) != payload_bytes)
        throw std::runtime_error(path.string() + ": truncated checkpoint payload");
    const std::uint64_t checksum = fnv1a64(payload.data(), payload.size());
    if (checksum != header.at("payload_fnv1a").get<std::uint64_t>())
        throw std::runtime_error(path.string() + ": checkpoint payload checksum mismatch");

    ModelParams p;
    p.k = header.at("k").get<int>();
    p.epsilon = header.at("epsilon").get<double>();
    p.proto_class = header.at("proto_class").get<std::vector<int>>();
    p.provenance.clear();
    for (const auto& e : header.at("provenance")) {
        ProtoProvenance pr;
        if (!e.is_null()) {
            pr.valid = true;
            pr.image_id = e.at("image_id").get<int>();
            pr.row = e.at("row").get<int>();
            pr.col = e.at("col").get<int>();
        }
        p.provenance.push_back(pr);
    }

    std::size_t off = 0;
    auto take = [&](const ordered_json& spec) {
        const Shape shape = spec.at("shape").get<Shape>();
        const std::size_t n = shape_numel(shape);
        if (off + n * 8 > payload.size())
            throw std::runtime_error(path.string() + ": checkpoint payload too short");
        Tensor t(shape, detail_ckpt::read_doubles_le(payload.data() + off, n));
        off += n * 8;
        return t;
    };
    const auto& tensors = header.at("tensors");
    std::size_t ti = 0;
    for (int b = 0; b < 3; ++b) {
        p.blocks[static_cast<std::size_t>(b)].weight = take(tensors.at(ti++));
        p.blocks[static_cast<std::size_t>(b)].bias = take(tensors.at(ti++));
    }
    p.prototypes = take(tensors.at(ti++));
    p.w1 = take(tensors.at(ti++));
    p.w2 = take(tensors.at(ti++));
    const Tensor b2t = take(tensors.at(ti++));
    p.b2 = b2t.values[0];
    if (off != payload.size())
        throw std::runtime_error(path.string() + ": checkpoint payload has trailing bytes");
    return p;
}

/// Order-insensitive content hash of all parameters, for stage-isolation
/// assertions.
inline std::uint64_t params_hash(const ModelParams& p) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const Tensor& t) {
        h = fnv1a64(t.values.data(), t.values.size() * sizeof(double), h);
    };
    for (const auto& b : p.blocks) {
        mix(b.weight);
        mix(b.bias);
    }
    mix(p.prototypes);
    mix(p.w1);
    mix(p.w2);
    h = fnv1a64(&p.b2, sizeof(double), h);
    return h;
}

inline std::uint64_t backbone_hash(const ModelParams& p) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& b : p.blocks) {
        h = fnv1a64(b.weight.values.data(), b.weight.values.size() * sizeof(double), h);
        h = fnv1a64(b.bias.values.data(), b.bias.values.size() * sizeof(double), h);
    }
    return h;
}

inline std::uint64_t prototypes_hash(const ModelParams& p) {
    return fnv1a64(p.prototypes.values.data(),
                   p.prototypes.values.size() * sizeof(double));
}

inline std::uint64_t w1_hash(const ModelParams& p) {
    return fnv1a64(p.w1.values.data(), p.w1.values.size() * sizeof(double));
}

inline std::uint64_t h2_hash(const ModelParams& p) {
    std::uint64_t h = fnv1a64(p.w2.values.data(), p.w2.values.size() * sizeof(double));
    return fnv1a64(&p.b2, sizeof(double), h);
}

}  // namespace protomargin::model
