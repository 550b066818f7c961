#pragma once

// Run configuration: one flat JSON object with dotted section keys
// ("data.per_class", "train.k", ...). Every key has a default; unknown keys
// are rejected; the whole config round-trips through serialization
// unchanged. One master seed feeds every named randomness stream.

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>

#include <json.hpp>

#include "protomargin/dataset.hpp"
#include "protomargin/metrics.hpp"
#include "protomargin/trainer.hpp"

namespace protomargin::config {

using nlohmann::ordered_json;

struct RunConfig {
    std::string data_dir = "dataset";
    synth::GenerateConfig data;
    trainer::TrainConfig train;
    metrics::EvalConfig eval;
    std::string eval_split = "test";
    int explain_top_n = 3;
    std::string out_dir = "out";
    std::uint64_t seed = 7;

    /// Pushes the master seed into every component configuration.
    void propagate_seed() {
        data.seed = seed;
        train.seed = seed;
        eval.seed = seed;
    }
};

namespace detail {

struct Field {
    std::string description;
    std::function<ordered_json(const RunConfig&)> get;
    std::function<void(RunConfig&, const ordered_json&)> set;
};

inline const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> table = [] {
        std::map<std::string, Field> f;
        auto add = [&f](const std::string& key, const std::string& desc, auto getter,
                        auto setter) {
            f[key] = Field{desc,
                           [getter](const RunConfig& c) { return ordered_json(getter(c)); },
                           [setter, key](RunConfig& c, const ordered_json& v) {
                               try {
                                   setter(c, v);
                               } catch (const nlohmann::json::exception& e) {
                                   throw std::invalid_argument("config key '" + key +
                                                               "': " + e.what());
                               }
                           }};
        };
        add("seed", "master seed; all randomness streams derive from it",
            [](const RunConfig& c) { return c.seed; },
            [](RunConfig& c, const ordered_json& v) { c.seed = v.get<std::uint64_t>(); });
        add("data.dir", "dataset directory (written by generate, read elsewhere)",
            [](const RunConfig& c) { return c.data_dir; },
            [](RunConfig& c, const ordered_json& v) { c.data_dir = v.get<std::string>(); });
        add("data.per_class", "synthetic samples generated per margin class",
            [](const RunConfig& c) { return c.data.per_class; },
            [](RunConfig& c, const ordered_json& v) { c.data.per_class = v.get<int>(); });
        add("data.fine_count", "training samples carrying fine annotation masks",
            [](const RunConfig& c) { return c.data.fine_count; },
            [](RunConfig& c, const ordered_json& v) { c.data.fine_count = v.get<int>(); });
        add("data.confounder_strength",
            "probability that a sample carries its class-correlated corner tag",
            [](const RunConfig& c) { return c.data.confounder_strength; },
            [](RunConfig& c, const ordered_json& v) {
                c.data.confounder_strength = v.get<double>();
            });
        add("data.ratio_train", "train split fraction",
            [](const RunConfig& c) { return c.data.split_ratios[0]; },
            [](RunConfig& c, const ordered_json& v) {
                c.data.split_ratios[0] = v.get<double>();
            });
        add("data.ratio_val", "validation split fraction",
            [](const RunConfig& c) { return c.data.split_ratios[1]; },
            [](RunConfig& c, const ordered_json& v) {
                c.data.split_ratios[1] = v.get<double>();
            });
        add("data.ratio_test", "test split fraction",
            [](const RunConfig& c) { return c.data.split_ratios[2]; },
            [](RunConfig& c, const ordered_json& v) {
                c.data.split_ratios[2] = v.get<double>();
            });
        add("data.malignancy_circumscribed", "P(malignant | circumscribed)",
            [](const RunConfig& c) { return c.data.malignancy_rates[0]; },
            [](RunConfig& c, const ordered_json& v) {
                c.data.malignancy_rates[0] = v.get<double>();
            });
        add("data.malignancy_indistinct", "P(malignant | indistinct)",
            [](const RunConfig& c) { return c.data.malignancy_rates[1]; },
            [](RunConfig& c, const ordered_json& v) {
                c.data.malignancy_rates[1] = v.get<double>();
            });
        add("data.malignancy_spiculated", "P(malignant | spiculated)",
            [](const RunConfig& c) { return c.data.malignancy_rates[2]; },
            [](RunConfig& c, const ordered_json& v) {
                c.data.malignancy_rates[2] = v.get<double>();
            });
        add("train.lambda_cluster", "cluster cost coefficient",
            [](const RunConfig& c) { return c.train.coefficients.cluster; },
            [](RunConfig& c, const ordered_json& v) {
                c.train.coefficients.cluster = v.get<double>();
            });
        add("train.lambda_separation", "separation cost coefficient",
            [](const RunConfig& c) { return c.train.coefficients.separation; },
            [](RunConfig& c, const ordered_json& v) {
                c.train.coefficients.separation = v.get<double>();
            });
        add("train.lambda_fine", "fine-annotation loss coefficient",
            [](const RunConfig& c) { return c.train.coefficients.fine; },
            [](RunConfig& c, const ordered_json& v) {
                c.train.coefficients.fine = v.get<double>();
            });
        add("train.k", "top-k pooling count (also the relaxed-min k)",
            [](const RunConfig& c) { return c.train.k; },
            [](RunConfig& c, const ordered_json& v) { c.train.k = v.get<int>(); });
        add("train.prototypes_per_class", "prototypes per margin class at init",
            [](const RunConfig& c) { return c.train.prototypes_per_class; },
            [](RunConfig& c, const ordered_json& v) {
                c.train.prototypes_per_class = v.get<int>();
            });
        add("train.epsilon", "similarity epsilon in log((d+1)/(d+eps))",
            [](const RunConfig& c) { return c.train.epsilon; },
            [](RunConfig& c, const ordered_json& v) { c.train.epsilon = v.get<double>(); });
        add("train.a1_epochs_per_cycle", "joint-stage epochs per A-cycle",
            [](const RunConfig& c) { return c.train.a1_epochs_per_cycle; },
            [](RunConfig& c, const ordered_json& v) {
                c.train.a1_epochs_per_cycle = v.get<int>();
            });
        add("train.a3_steps_per_cycle", "margin-head tuning steps per A-cycle",
            [](const RunConfig& c) { return c.train.a3_steps_per_cycle; },
            [](RunConfig& c, const ordered_json& v) {
                c.train.a3_steps_per_cycle = v.get<int>();
            });
        add("train.num_cycles", "maximum number of A-cycles",
            [](const RunConfig& c) { return c.train.num_cycles; },
            [](RunConfig& c, const ordered_json& v) { c.train.num_cycles = v.get<int>(); });
        add("train.cycle_tolerance", "relative loss improvement that ends the A-cycles",
            [](const RunConfig& c) { return c.train.cycle_tolerance; },
            [](RunConfig& c, const ordered_json& v) {
                c.train.cycle_tolerance = v.get<double>();
            });
        add("train.coarse_per_batch", "coarse-annotated samples per batch",
            [](const RunConfig& c) { return c.train.coarse_per_batch; },
            [](RunConfig& c, const ordered_json& v) {
                c.train.coarse_per_batch = v.get<int>();
            });
        add("train.fine_per_batch", "fine-annotated samples per batch",
            [](const RunConfig& c) { return c.train.fine_per_batch; },
            [](RunConfig& c, const ordered_json& v) {
                c.train.fine_per_batch = v.get<int>();
            });
        add("train.lr_a1", "learning rate for the joint stage",
            [](const RunConfig& c) { return c.train.lr_a1; },
            [](RunConfig& c, const ordered_json& v) { c.train.lr_a1 = v.get<double>(); });
        add("train.lr_a3", "learning rate for margin-head tuning",
            [](const RunConfig& c) { return c.train.lr_a3; },
            [](RunConfig& c, const ordered_json& v) { c.train.lr_a3 = v.get<double>(); });
        add("train.lr_b", "learning rate for the malignancy head",
            [](const RunConfig& c) { return c.train.lr_b; },
            [](RunConfig& c, const ordered_json& v) { c.train.lr_b = v.get<double>(); });
        add("train.b_iterations", "full-batch iterations for the malignancy fit",
            [](const RunConfig& c) { return c.train.b_iterations; },
            [](RunConfig& c, const ordered_json& v) {
                c.train.b_iterations = v.get<int>();
            });
        add("train.prune", "prune duplicate prototypes after the final cycle",
            [](const RunConfig& c) { return c.train.prune_enabled; },
            [](RunConfig& c, const ordered_json& v) {
                c.train.prune_enabled = v.get<bool>();
            });
        add("train.augment", "random flip/rotate/crop on training batches",
            [](const RunConfig& c) { return c.train.augment; },
            [](RunConfig& c, const ordered_json& v) { c.train.augment = v.get<bool>(); });
        add("train.crop_fraction", "augmentation crop size as a fraction of the image",
            [](const RunConfig& c) { return c.train.crop_fraction; },
            [](RunConfig& c, const ordered_json& v) {
                c.train.crop_fraction = v.get<double>();
            });
        add("train.threads", "worker threads (0 = hardware, PROTO_MARGIN_THREADS caps)",
            [](const RunConfig& c) { return c.train.threads; },
            [](RunConfig& c, const ordered_json& v) { c.train.threads = v.get<int>(); });
        add("eval.tau", "activation-precision threshold quantile",
            [](const RunConfig& c) { return c.eval.tau; },
            [](RunConfig& c, const ordered_json& v) { c.eval.tau = v.get<double>(); });
        add("eval.bootstrap_resamples", "bootstrap resamples for confidence intervals",
            [](const RunConfig& c) { return c.eval.bootstrap_resamples; },
            [](RunConfig& c, const ordered_json& v) {
                c.eval.bootstrap_resamples = v.get<int>();
            });
        add("eval.ci_level", "confidence level for the intervals",
            [](const RunConfig& c) { return c.eval.ci_level; },
            [](RunConfig& c, const ordered_json& v) { c.eval.ci_level = v.get<double>(); });
        add("eval.split", "dataset split evaluated by default",
            [](const RunConfig& c) { return c.eval_split; },
            [](RunConfig& c, const ordered_json& v) { c.eval_split = v.get<std::string>(); });
        add("explain.top_n", "prototype rows per case report",
            [](const RunConfig& c) { return c.explain_top_n; },
            [](RunConfig& c, const ordered_json& v) { c.explain_top_n = v.get<int>(); });
        add("out.dir", "output directory for checkpoints, logs and reports",
            [](const RunConfig& c) { return c.out_dir; },
            [](RunConfig& c, const ordered_json& v) { c.out_dir = v.get<std::string>(); });
        return f;
    }();
    return table;
}

}  // namespace detail

inline ordered_json to_json(const RunConfig& cfg) {
    ordered_json j;
    for (const auto& [key, field] : detail::fields()) j[key] = field.get(cfg);
    return j;
}

/// Applies a flat JSON object onto the config; unknown keys are rejected.
inline void apply_json(RunConfig& cfg, const ordered_json& j) {
    if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
    const auto& table = detail::fields();
    for (const auto& [key, value] : j.items()) {
        const auto it = table.find(key);
        if (it == table.end())
            throw std::invalid_argument("unknown config key '" + key + "'");
        it->second.set(cfg, value);
    }
    cfg.propagate_seed();
}

inline RunConfig load_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    RunConfig cfg;
    apply_json(cfg, ordered_json::parse(in));
    return cfg;
}

inline std::string describe_keys() {
    std::string out;
    RunConfig defaults;
    for (const auto& [key, field] : detail::fields()) {
        out += "  " + key + " = " + field.get(defaults).dump() + "\n      " +
               field.description + "\n";
    }
    return out;
}

}  // namespace protomargin::config
