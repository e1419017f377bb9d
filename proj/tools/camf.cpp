// Command-line front end: synthetic dataset emission, pre-training, cross-
// validated training, evaluation, gradient verification and the shape table.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "camf/checkpoint.hpp"
#include "camf/gradsuite.hpp"
#include "camf/harness.hpp"

namespace fs = std::filesystem;
using Scalar = float;

namespace {

struct CommonFlags {
    camf::RunConfig cfg;
    std::string manifest;
    std::string out_dir = "out";
    std::string config_path;
    int threads = 1;
    std::string task = "ad_cn";
    std::string ablation = "full";
};

void add_run_flags(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--task", f.task, "classification task label (ad_cn, cn_mci, ad_mci)");
    cmd->add_option("--epochs", f.cfg.epochs, "fusion training epochs per fold");
    cmd->add_option("--pretrain-epochs", f.cfg.pretrain_epochs, "single-modality pre-training epochs");
    cmd->add_option("--batch-size", f.cfg.batch_size, "mini-batch size");
    cmd->add_option("--lr", f.cfg.lr, "Adam learning rate");
    cmd->add_option("--lambda", f.cfg.lambda, "weight of the alignment loss");
    cmd->add_option("--seed", f.cfg.seed, "rng seed");
    cmd->add_option("--volume-size", f.cfg.volume_size, "working cube extent");
    cmd->add_option("--folds", f.cfg.folds, "cross-validation folds");
    cmd->add_flag("--freeze-specific,!--no-freeze-specific", f.cfg.freeze_specific,
                  "freeze FE_m/FE_p after pre-training");
    cmd->add_flag("--mse-paper-exact", f.cfg.mse_paper_exact, "divide the alignment loss by spatial size only");
    cmd->add_option("--ablation", f.ablation, "full, tca_only or ccfe_only");
    cmd->add_option("--threads", f.threads, "kernel worker threads (0 = hardware)");
    cmd->add_option("--config", f.config_path, "flat key = value config file; flags override");
}

// Fill non-flagged fields from the config file; explicit flags win.
void merge_config_file(CLI::App* cmd, CommonFlags& f) {
    if (f.config_path.empty()) return;
    std::ifstream in(f.config_path);
    if (!in) throw std::runtime_error("cannot open config '" + f.config_path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    const camf::RunConfig file_cfg = camf::config_from_text(ss.str());
    auto absent = [&](const char* flag) { return cmd->count(flag) == 0; };
    if (absent("--task")) f.task = camf::task_name(file_cfg.task);
    if (absent("--epochs")) f.cfg.epochs = file_cfg.epochs;
    if (absent("--pretrain-epochs")) f.cfg.pretrain_epochs = file_cfg.pretrain_epochs;
    if (absent("--batch-size")) f.cfg.batch_size = file_cfg.batch_size;
    if (absent("--lr")) f.cfg.lr = file_cfg.lr;
    if (absent("--lambda")) f.cfg.lambda = file_cfg.lambda;
    if (absent("--seed")) f.cfg.seed = file_cfg.seed;
    if (absent("--volume-size")) f.cfg.volume_size = file_cfg.volume_size;
    if (absent("--folds")) f.cfg.folds = file_cfg.folds;
    if (absent("--freeze-specific") && absent("--no-freeze-specific"))
        f.cfg.freeze_specific = file_cfg.freeze_specific;
    if (absent("--mse-paper-exact")) f.cfg.mse_paper_exact = file_cfg.mse_paper_exact;
    if (absent("--ablation")) {
        f.cfg.use_tca = file_cfg.use_tca;
        f.cfg.use_ccfe = file_cfg.use_ccfe;
    }
}

void apply_flags(CLI::App* cmd, CommonFlags& f) {
    merge_config_file(cmd, f);
    f.cfg.task = camf::task_from(f.task);
    if (cmd->count("--ablation") != 0 || f.config_path.empty()) {
        if (f.ablation == "full") {
            f.cfg.use_tca = true;
            f.cfg.use_ccfe = true;
        } else if (f.ablation == "tca_only") {
            f.cfg.use_tca = true;
            f.cfg.use_ccfe = false;
        } else if (f.ablation == "ccfe_only") {
            f.cfg.use_tca = false;
            f.cfg.use_ccfe = true;
        } else {
            throw CLI::ValidationError("--ablation must be full, tca_only or ccfe_only");
        }
    }
}

void print_metrics_line(const std::string& tag, const camf::Metrics& m) {
    std::cout << tag << "  acc=" << m.acc << " auc=" << m.auc << " pre=" << m.pre << " spe=" << m.spe
              << " sen=" << m.sen << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"collaborative-attention MRI+PET fusion at desk scale"};
    app.require_subcommand(1);

    // ---- synth ----
    camf::SynthConfig synth_cfg;
    std::string synth_out = "data";
    int synth_threads = 1;
    auto* synth = app.add_subcommand("synth", "emit a synthetic MRI+PET cohort with a manifest");
    synth->add_option("--out", synth_out, "output directory");
    synth->add_option("--n-subjects", synth_cfg.n_subjects, "cohort size");
    synth->add_option("--volume-size", synth_cfg.volume_size, "cube extent of emitted volumes");
    synth->add_option("--seed", synth_cfg.seed, "rng seed");
    synth->add_option("--atrophy-delta", synth_cfg.atrophy_radius_delta, "class-1 blob shrink, voxels");
    synth->add_option("--hypo-delta", synth_cfg.hypometabolism_delta, "class-1 hotspot dimming, relative");
    synth->add_option("--noise-sigma", synth_cfg.noise_sigma, "additive gaussian noise");
    synth->add_option("--threads", synth_threads, "unused; accepted for uniformity");

    // ---- pretrain ----
    CommonFlags pre;
    auto* pretrain = app.add_subcommand("pretrain", "phase A only: single-modality extractors on a manifest");
    pretrain->add_option("--manifest", pre.manifest, "dataset manifest")->required();
    pretrain->add_option("--out", pre.out_dir, "output directory");
    add_run_flags(pretrain, pre);

    // ---- train ----
    CommonFlags tr;
    auto* train = app.add_subcommand("train", "stratified cross-validated training (phase A per fold + phase B)");
    train->add_option("--manifest", tr.manifest, "dataset manifest")->required();
    train->add_option("--out", tr.out_dir, "output directory");
    add_run_flags(train, tr);

    // ---- eval ----
    CommonFlags ev;
    ev.out_dir.clear();
    std::string eval_ckpt;
    auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint over a manifest");
    evalc->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
    evalc->add_option("--manifest", ev.manifest, "dataset manifest")->required();
    evalc->add_option("--out", ev.out_dir, "optional directory for eval_metrics.csv");
    evalc->add_option("--threads", ev.threads, "kernel worker threads (0 = hardware)");

    // ---- gradcheck ----
    int gc_seeds = 20;
    double gc_tol = 1e-5;
    auto* gradc = app.add_subcommand("gradcheck", "64-bit finite-difference check of every operator");
    gradc->add_option("--seeds", gc_seeds, "random seeds per operator");
    gradc->add_option("--tol", gc_tol, "max relative error allowed");

    // ---- shapes ----
    int shape_size = 32;
    auto* shapes = app.add_subcommand("shapes", "print the pipeline shape table for a volume size");
    shapes->add_option("--volume-size", shape_size, "input cube extent");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) {
            auto manifest = camf::write_synth_dataset<Scalar>(synth_cfg, synth_out);
            std::cout << "wrote " << synth_cfg.n_subjects << " subjects to " << synth_out << "\n"
                      << "manifest: " << manifest << "\n";
            return 0;
        }

        if (*pretrain) {
            apply_flags(pretrain, pre);
            camf::set_num_threads(pre.threads);
            auto subjects = camf::load_dataset<Scalar>(pre.manifest, pre.cfg.volume_size);
            auto model = camf::ModelParams<Scalar>::make(pre.cfg.seed);
            std::vector<std::size_t> ids(subjects.size());
            for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
            camf::Rng order(pre.cfg.seed);
            camf::pretrain_specific(model, subjects, ids, pre.cfg, order);
            fs::create_directories(pre.out_dir);
            auto path = (fs::path(pre.out_dir) / "pretrain.ckpt").string();
            camf::save_checkpoint(model, pre.cfg, order.state(), path);
            std::cout << "pre-trained on " << subjects.size() << " subjects; wrote " << path << "\n";
            return 0;
        }

        if (*train) {
            apply_flags(train, tr);
            camf::set_num_threads(tr.threads);
            tr.cfg.validate();
            auto subjects = camf::load_dataset<Scalar>(tr.manifest, tr.cfg.volume_size);
            fs::create_directories(tr.out_dir);
            std::cout << "training " << tr.cfg.folds << "-fold CV on " << subjects.size() << " subjects (volume "
                      << tr.cfg.volume_size << ", " << tr.cfg.pretrain_epochs << "+" << tr.cfg.epochs
                      << " epochs)\n";
            auto report = camf::cross_validate<Scalar>(
                subjects, tr.cfg, [&](int fold, camf::ModelParams<Scalar>& model) {
                    auto path = (fs::path(tr.out_dir) / ("fold" + std::to_string(fold) + ".ckpt")).string();
                    camf::save_checkpoint(model, tr.cfg, tr.cfg.seed, path);
                    std::cout << "fold " << fold << " trained; checkpoint " << path << "\n";
                });
            camf::write_metrics_csv(report, (fs::path(tr.out_dir) / "metrics.csv").string());
            camf::write_loss_trace_csv(report.traces, (fs::path(tr.out_dir) / "loss_trace.csv").string());
            for (std::size_t f = 0; f < report.per_fold.size(); ++f)
                print_metrics_line("fold " + std::to_string(f), report.per_fold[f]);
            std::cout << "mean  acc=" << report.acc.mean << "±" << report.acc.stddev << " auc=" << report.auc.mean
                      << "±" << report.auc.stddev << " pre=" << report.pre.mean << "±" << report.pre.stddev
                      << " spe=" << report.spe.mean << "±" << report.spe.stddev << " sen=" << report.sen.mean << "±"
                      << report.sen.stddev << "\n";
            const int dropped = report.acc.excluded + report.auc.excluded + report.pre.excluded +
                                report.spe.excluded + report.sen.excluded;
            if (dropped > 0)
                std::cerr << "warning: " << dropped
                          << " fold metric(s) undefined (zero denominator); excluded from the aggregate\n";
            std::cout << "outputs in " << tr.out_dir << "\n";
            return 0;
        }

        if (*evalc) {
            camf::set_num_threads(ev.threads);
            auto loaded = camf::load_checkpoint<Scalar>(eval_ckpt);
            auto subjects = camf::load_dataset<Scalar>(ev.manifest, loaded.config.volume_size);
            std::vector<std::size_t> ids(subjects.size());
            for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
            auto result = camf::evaluate(loaded.model, subjects, ids, loaded.config);
            print_metrics_line("eval", result.metrics);
            if (!ev.out_dir.empty()) {
                fs::create_directories(ev.out_dir);
                camf::CvReport rep;
                rep.per_fold.push_back(result.metrics);
                rep.aggregate();
                camf::write_metrics_csv(rep, (fs::path(ev.out_dir) / "eval_metrics.csv").string());
            }
            return 0;
        }

        if (*gradc) {
            const bool ok = camf::run_gradient_suite(gc_seeds, gc_tol, std::cout);
            return ok ? 0 : 1;
        }

        if (*shapes) {
            camf::set_num_threads(0);
            if (shape_size < 16 || shape_size % 4 != 0)
                throw std::invalid_argument("volume size must be a multiple of 4, at least 16");
            auto model = camf::ModelParams<Scalar>::make(1);
            const std::size_t S = std::size_t(shape_size);
            auto vol = camf::Tensor<Scalar>::zeros({1, 1, S, S, S});
            std::cout << "input              " << camf::shape_str(vol.shape) << "\n";
            auto f = camf::shared_forward_stage1(vol, model.shared_pfe);
            std::cout << "PFE (stage 1)      " << camf::shape_str(f.shape) << "\n";
            auto f1 = camf::ff_fuse(f, f, model.ff, false);
            std::cout << "FF fused F1        " << camf::shape_str(f1.shape) << "\n";
            auto fprime = camf::lpr_enhance(f, model.lpr_p);
            std::cout << "LPR enhanced       " << camf::shape_str(fprime.shape) << "\n";
            auto deep = camf::afe_forward(fprime, model.shared_afe);
            std::cout << "AFE (stage 2)      " << camf::shape_str(deep.shape) << "\n";
            auto attended = camf::tca_forward(deep, model.fe_m.tca);
            std::cout << "TCA                " << camf::shape_str(attended.shape) << "\n";
            auto sf = camf::fe_forward(vol, model.fe_m);
            std::cout << "SF / F_sh vector   " << camf::shape_str(sf.shape) << "\n";
            auto joint = camf::joint_fuse(sf, sf, sf);
            std::cout << "joint vector       " << camf::shape_str(joint.shape) << "\n";
            auto logits = camf::classify(joint, model.classifier);
            std::cout << "logits             " << camf::shape_str(logits.shape) << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
