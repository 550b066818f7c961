// protomargin command-line interface: dataset generation, four-stage
// training, metric evaluation and explanation artifacts, all driven by one
// flat JSON config plus overriding flags.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "protomargin/config.hpp"
#include "protomargin/explain.hpp"
#include "protomargin/metrics.hpp"
#include "protomargin/trainer.hpp"

namespace fs = std::filesystem;
using namespace protomargin;

namespace {

struct CommonFlags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--config", flags.config_path, "flat JSON config file");
    cmd->add_option("--seed", flags.seed, "master seed (overrides config)");
    cmd->add_option("--out", flags.out, "output directory (overrides config)");
}

config::RunConfig resolve(const CommonFlags& flags) {
    config::RunConfig cfg;
    if (!flags.config_path.empty()) cfg = config::load_file(flags.config_path);
    if (flags.seed) {
        cfg.seed = *flags.seed;
        cfg.propagate_seed();
    }
    if (flags.out) cfg.out_dir = *flags.out;
    cfg.propagate_seed();
    return cfg;
}

int cmd_generate(const config::RunConfig& cfg) {
    const fs::path dir = cfg.data_dir;
    const fs::path manifest = synth::generate_dataset(cfg.data, dir);
    const synth::Dataset ds = synth::read_dataset(manifest);
    std::array<std::array<int, 3>, 3> counts{};  // [split][class]
    std::array<int, 3> fine_counts{};
    for (const auto& s : ds.samples) {
        const int split = s.meta.split == "train" ? 0 : (s.meta.split == "val" ? 1 : 2);
        ++counts[static_cast<std::size_t>(split)][static_cast<std::size_t>(s.meta.y_margin)];
        if (s.meta.has_fine_mask) ++fine_counts[static_cast<std::size_t>(split)];
    }
    std::cout << "dataset written to " << dir.string() << "\n";
    const char* split_names[3] = {"train", "val", "test"};
    for (int sp = 0; sp < 3; ++sp) {
        int total = 0;
        std::cout << "  " << split_names[sp] << ":";
        for (int c = 0; c < 3; ++c) {
            std::cout << " " << synth::kMarginClassNames[static_cast<std::size_t>(c)] << "="
                      << counts[static_cast<std::size_t>(sp)][static_cast<std::size_t>(c)];
            total += counts[static_cast<std::size_t>(sp)][static_cast<std::size_t>(c)];
        }
        std::cout << " total=" << total << " fine_masks="
                  << fine_counts[static_cast<std::size_t>(sp)] << "\n";
    }
    std::cout << "manifest fnv1a " << std::hex << synth::file_fnv1a(manifest) << std::dec
              << "\n";
    return 0;
}

int cmd_train(const config::RunConfig& cfg) {
    const fs::path manifest = fs::path(cfg.data_dir) / "manifest.json";
    if (!fs::exists(manifest)) {
        std::cerr << "error: dataset manifest " << manifest.string()
                  << " not found (run generate first)\n";
        return 1;
    }
    const synth::Dataset ds = synth::read_dataset(manifest);
    const trainer::TrainResult result = trainer::train(ds, cfg.train, cfg.out_dir, manifest);
    if (result.diverged) {
        std::cerr << "error: training diverged (non-finite loss); last good checkpoint at "
                  << result.final_checkpoint.string() << "\n";
        return 2;
    }
    std::cout << "training finished: " << result.cycles_run << " cycle(s), "
              << (result.converged ? "converged" : "cycle budget reached") << ", "
              << result.params.num_prototypes() << " prototypes survive\n";
    std::cout << "final checkpoint " << result.final_checkpoint.string() << "\n";
    return 0;
}

int cmd_eval(const config::RunConfig& cfg, const std::string& checkpoint,
             const std::string& split) {
    const model::ModelParams params = model::load_checkpoint(checkpoint);
    const synth::Dataset ds = synth::read_dataset(fs::path(cfg.data_dir) / "manifest.json");
    metrics::EvalConfig ecfg = cfg.eval;
    const metrics::SplitEvaluation ev = metrics::evaluate_split(params, ds, split, ecfg);
    fs::create_directories(cfg.out_dir);
    const fs::path report_path = fs::path(cfg.out_dir) / ("eval_" + split + ".json");
    {
        std::ofstream out(report_path, std::ios::binary);
        out << ev.report.dump(2) << "\n";
        if (!out) throw std::runtime_error("cannot write " + report_path.string());
    }
    const fs::path csv_path = fs::path(cfg.out_dir) / ("eval_" + split + "_records.csv");
    {
        std::ofstream out(csv_path, std::ios::binary);
        out << ev.csv;
        if (!out) throw std::runtime_error("cannot write " + csv_path.string());
    }
    std::cout << "split " << split << " (n=" << ev.records.size() << ")\n"
              << "  avg margin AUROC    " << ev.avg_margin_auroc << "\n"
              << "  malignancy AUROC    " << ev.malignancy_auroc << "\n"
              << "  Cohen's kappa       " << ev.kappa << "\n"
              << "  act. prec. (lesion) " << ev.ap_lesion << "\n"
              << "  act. prec. (fine)   " << ev.ap_fine << "\n"
              << "report " << report_path.string() << "\n";
    return 0;
}

int cmd_explain(const config::RunConfig& cfg, const std::string& checkpoint,
                const std::string& image_path, const std::string& split, bool gallery) {
    const model::ModelParams params = model::load_checkpoint(checkpoint);
    const synth::Dataset ds = synth::read_dataset(fs::path(cfg.data_dir) / "manifest.json");
    const fs::path out_dir = cfg.out_dir;
    fs::create_directories(out_dir);
    int reports = 0;
    if (!image_path.empty()) {
        const Image img = read_pgm(image_path);
        const std::string case_id = fs::path(image_path).stem().string();
        explain::write_case_report(params, ds, img, case_id, out_dir, cfg.explain_top_n);
        ++reports;
    } else if (!split.empty()) {
        for (const auto& s : ds.samples) {
            if (s.meta.split != split) continue;
            explain::write_case_report(params, ds, s.image,
                                       "case" + std::to_string(s.meta.id), out_dir,
                                       cfg.explain_top_n);
            ++reports;
        }
        if (reports == 0) {
            std::cerr << "error: split '" << split << "' is empty\n";
            return 1;
        }
    }
    if (gallery) {
        explain::write_prototype_gallery(params, ds, out_dir);
        std::cout << "gallery written to " << (out_dir / "gallery.html").string() << "\n";
    }
    if (reports > 0)
        std::cout << reports << " case report(s) written to " << out_dir.string() << "\n";
    else if (!gallery) {
        std::cerr << "error: nothing to do (pass --image, --split or --gallery)\n";
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"prototype-based margin classification on synthetic lesions"};
    app.require_subcommand(1);
    app.footer("Config keys and defaults (flat JSON, dotted sections):\n" +
               config::describe_keys());

    CommonFlags gen_flags, train_flags, eval_flags, explain_flags;
    std::optional<double> confounder;
    std::optional<double> lambda_fine;
    std::optional<int> k;
    std::string checkpoint, image_path, split, eval_split;
    bool gallery = false;

    CLI::App* gen = app.add_subcommand("generate", "generate the synthetic dataset");
    add_common(gen, gen_flags);
    gen->add_option("--confounder", confounder,
                    "confounder strength in [0,1] (overrides config)");

    CLI::App* train = app.add_subcommand("train", "run the four-stage training protocol");
    add_common(train, train_flags);
    train->add_option("--lambda-f", lambda_fine,
                      "fine-annotation loss coefficient (overrides config)");
    train->add_option("--k", k, "top-k pooling count (overrides config)");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    add_common(eval, eval_flags);
    eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    eval->add_option("--split", eval_split, "dataset split (default from config)");

    CLI::App* explain_cmd =
        app.add_subcommand("explain", "write case reports and the prototype gallery");
    add_common(explain_cmd, explain_flags);
    explain_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    explain_cmd->add_option("--image", image_path, "single input image (PGM)");
    explain_cmd->add_option("--split", split, "explain every image of this split");
    explain_cmd->add_flag("--gallery", gallery, "also write the prototype gallery");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            config::RunConfig cfg = resolve(gen_flags);
            if (gen_flags.out) cfg.data_dir = *gen_flags.out;
            if (confounder) cfg.data.confounder_strength = *confounder;
            return cmd_generate(cfg);
        }
        if (train->parsed()) {
            config::RunConfig cfg = resolve(train_flags);
            if (lambda_fine) cfg.train.coefficients.fine = *lambda_fine;
            if (k) cfg.train.k = *k;
            return cmd_train(cfg);
        }
        if (eval->parsed()) {
            config::RunConfig cfg = resolve(eval_flags);
            return cmd_eval(cfg, checkpoint, eval_split.empty() ? cfg.eval_split : eval_split);
        }
        if (explain_cmd->parsed()) {
            config::RunConfig cfg = resolve(explain_flags);
            return cmd_explain(cfg, checkpoint, image_path, split, gallery);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
