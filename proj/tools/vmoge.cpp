// Command-line front end: synthetic data generation, feature extraction,
// cross-validated training, evaluation of saved weights, report tables, the
// lambda sweep, and the numerical self-checks.

#include <CLI11.hpp>

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "vmoge/config.hpp"
#include "vmoge/gradcheck.hpp"
#include "vmoge/klcheck.hpp"
#include "vmoge/model.hpp"
#include "vmoge/synthgen.hpp"
#include "vmoge/trainer.hpp"

namespace {

namespace fs = std::filesystem;
using namespace vmoge;

// Resolution order for every knob: built-in defaults, then the config file,
// then explicit flags. Flag values are staged and applied only when actually
// given on the command line.
class Knobs {
public:
    explicit Knobs(CLI::App* cmd) : cmd_(cmd) {
        cmd_->add_option("--config", config_path_, "key=value config file");
    }

    template <typename T>
    void field(const std::string& flag, T RunConfig::* member, const std::string& help) {
        auto slot = std::make_shared<T>();
        CLI::Option* opt = cmd_->add_option(flag, *slot, help);
        setters_.push_back([opt, slot, member](RunConfig& cfg) {
            if (opt->count() > 0) cfg.*member = *slot;
        });
    }

    void flag(const std::string& name, bool RunConfig::* member, const std::string& help) {
        auto slot = std::make_shared<bool>(false);
        CLI::Option* opt = cmd_->add_flag(name, *slot, help);
        setters_.push_back([opt, slot, member](RunConfig& cfg) {
            if (opt->count() > 0) cfg.*member = *slot;
        });
    }

    RunConfig resolve() const {
        RunConfig cfg;
        if (!config_path_.empty()) cfg = load_config(config_path_, cfg);
        for (const auto& s : setters_) s(cfg);
        return cfg;
    }

private:
    CLI::App* cmd_;
    std::string config_path_;
    std::vector<std::function<void(RunConfig&)>> setters_;
};

void add_model_knobs(Knobs& k) {
    k.field("--granularity", &RunConfig::granularity,
            "token granularity (fine, medium, coarse, mixed-1, mixed-2, single-fine, "
            "single-medium, single-coarse)");
    k.field("--token-dim", &RunConfig::token_dim, "token embedding width");
    k.field("--heads", &RunConfig::heads, "attention heads");
    k.field("--layers", &RunConfig::layers, "encoder layers");
    k.field("--d-h", &RunConfig::d_h, "graph hidden width");
    k.field("--d-g", &RunConfig::d_g, "expert hidden width");
    k.field("--d-z", &RunConfig::d_z, "latent dimension per node");
    k.field("--aggregation", &RunConfig::aggregation, "token aggregation (mean, max)");
    k.field("--mixture", &RunConfig::mixture, "mixture rule (prob, logit)");
    k.flag("--self-loops", &RunConfig::add_self_loops, "add self loops before normalization");
}

void add_train_knobs(Knobs& k) {
    k.field("--prior", &RunConfig::prior, "prior variant (none, l-shift, lnorm-shift, pure)");
    k.field("--lambda-kl", &RunConfig::lambda_kl, "divergence weight");
    k.field("--lambda-shift", &RunConfig::lambda_shift, "diagonal shift for the prior");
    k.flag("--paper-kl-sign", &RunConfig::paper_kl_sign,
           "use the reversed log-determinant sign in the divergence");
    k.field("--folds", &RunConfig::folds, "cross-validation folds");
    k.field("--seed", &RunConfig::seed, "run seed");
    k.field("--epochs", &RunConfig::epochs, "training epochs");
    k.field("--batch", &RunConfig::batch, "mini-batch size");
    k.field("--lr", &RunConfig::lr, "Adam learning rate");
    k.field("--eval-samples", &RunConfig::eval_samples, "latent draws per evaluation");
    add_model_knobs(k);
}

std::vector<RawRecording> load_inputs(const std::vector<std::string>& inputs) {
    std::vector<RawRecording> recs;
    for (const auto& in : inputs) {
        if (fs::is_directory(in)) {
            auto batch = read_dataset(in);
            recs.insert(recs.end(), batch.begin(), batch.end());
        } else {
            recs.push_back(read_raw_csv(in));
        }
    }
    return recs;
}

void print_cv_summary(const CvOutcome& cv) {
    for (const auto& f : cv.folds)
        std::printf("fold %d: epoch auc %.4f acc %.4f | subject auc %.4f acc %.4f\n", f.fold,
                    f.auc_epoch, f.acc_epoch, f.auc_subject, f.acc_subject);
    std::printf("pooled: epoch auc %.4f acc %.4f | subject auc %.4f acc %.4f\n",
                cv.auc_epoch_pooled, cv.acc_epoch_pooled, cv.auc_subject_pooled,
                cv.acc_subject_pooled);
    std::printf("mean gating: delta %.4f theta %.4f alpha %.4f beta %.4f\n",
                cv.mean_pi_pooled[0], cv.mean_pi_pooled[1], cv.mean_pi_pooled[2],
                cv.mean_pi_pooled[3]);
    if (cv.skipped_steps > 0)
        std::printf("warning: %ld optimizer steps skipped on non-finite gradients\n",
                    cv.skipped_steps);
}

struct EvalSummary {
    double auc_epoch = 0.0, acc_epoch = 0.0;
    double auc_subject = 0.0, acc_subject = 0.0;
    std::array<double, kNumBands> mean_pi_class0{}, mean_pi_class1{};
    size_t n_epochs = 0, n_subjects = 0;
};

EvalSummary summarize_eval(const std::vector<EvalRecord>& recs) {
    EvalSummary s;
    s.n_epochs = recs.size();
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<const EvalRecord*> ptrs;
    std::array<double, kNumBands> pi0{}, pi1{};
    size_t n0 = 0, n1 = 0;
    for (const auto& r : recs) {
        scores.push_back(r.phat);
        labels.push_back(r.label);
        ptrs.push_back(&r);
        auto& acc = r.label == 0 ? pi0 : pi1;
        (r.label == 0 ? n0 : n1) += 1;
        for (int k = 0; k < kNumBands; ++k) acc[static_cast<size_t>(k)] += r.pi[static_cast<size_t>(k)];
    }
    s.auc_epoch = auc(scores, labels).value_or(std::numeric_limits<double>::quiet_NaN());
    s.acc_epoch = accuracy(scores, labels);
    auto subj = detail_cv::per_subject(ptrs);
    s.n_subjects = subj.scores.size();
    s.auc_subject =
        auc(subj.scores, subj.labels).value_or(std::numeric_limits<double>::quiet_NaN());
    s.acc_subject = accuracy(subj.scores, subj.labels);
    for (int k = 0; k < kNumBands; ++k) {
        s.mean_pi_class0[static_cast<size_t>(k)] = n0 ? pi0[static_cast<size_t>(k)] / n0 : 0.0;
        s.mean_pi_class1[static_cast<size_t>(k)] = n1 ? pi1[static_cast<size_t>(k)] / n1 : 0.0;
    }
    return s;
}

nlohmann::json eval_json(const EvalSummary& s) {
    return nlohmann::json{{"auc_epoch", s.auc_epoch},
                          {"acc_epoch", s.acc_epoch},
                          {"auc_subject", s.auc_subject},
                          {"acc_subject", s.acc_subject},
                          {"mean_pi_class0", s.mean_pi_class0},
                          {"mean_pi_class1", s.mean_pi_class1},
                          {"n_epochs", s.n_epochs},
                          {"n_subjects", s.n_subjects}};
}

constexpr uint64_t kFinalModelStream = 0x66696e616cULL;
constexpr uint64_t kEvalStream = 0x6576616cULL;

void cmd_train(const RunConfig& cfg, const std::string& features, const std::string& out,
               bool skip_final) {
    FeatureSet set = read_container(features);
    TrainConfig tc = train_config(cfg, set.channels, set.t_prime, set.fs);
    CvOutcome cv = run_cv(set, tc);
    write_run_artifacts(out, set, cv);
    detail_io::write_file((fs::path(out) / "config.txt").string(), serialize_config(cfg));
    print_cv_summary(cv);
    if (!skip_final) {
        PreparedData data = prepare_data(set, tc.prior, tc.model.add_self_loops);
        std::vector<size_t> all_idx(set.epochs.size());
        for (size_t i = 0; i < all_idx.size(); ++i) all_idx[i] = i;
        uint64_t final_seed = Rng(cfg.seed).derive(kFinalModelStream).seed();
        TrainOutcome final_fit = train_model(data, all_idx, tc, final_seed);
        save_weights((fs::path(out) / "weights.bin").string(), final_fit.model);
        std::printf("final model trained on all %zu epochs -> weights.bin\n", set.epochs.size());
    }
    std::printf("run artifacts in %s\n", out.c_str());
}

void cmd_eval(const std::string& run_dir, const std::string& features,
              const std::string& out_path) {
    RunConfig cfg = load_config((fs::path(run_dir) / "config.txt").string());
    std::string weights = (fs::path(run_dir) / "weights.bin").string();
    if (!fs::exists(weights))
        throw ValidationError("eval: " + weights +
                              " not found (train without --no-final to produce it)");
    FeatureSet set = read_container(features);
    TrainConfig tc = train_config(cfg, set.channels, set.t_prime, set.fs);
    VmogeModel model = VmogeModel::init(tc.model, 0);
    load_weights(weights, model);
    PreparedData data = prepare_data(set, tc.prior, tc.model.add_self_loops);
    std::vector<size_t> idx(set.epochs.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    uint64_t noise_seed = Rng(cfg.seed).derive(kEvalStream).seed();
    auto recs = evaluate(model, data, idx, cfg.eval_samples, noise_seed);
    auto summary = summarize_eval(recs);
    std::string text = eval_json(summary).dump(2) + "\n";
    std::fputs(text.c_str(), stdout);
    if (!out_path.empty()) detail_io::write_file(out_path, text);
}

void cmd_report(const std::string& run_dir) {
    auto rows = read_gating_csv((fs::path(run_dir) / "gating.csv").string());
    std::string quart = gating_quartile_csv(rows);
    std::string corr = gating_correlation_csv(rows);
    if (corr.empty()) corr = "band,covariate,n,r,p\n";
    detail_io::write_file((fs::path(run_dir) / "report_quartiles.csv").string(), quart);
    detail_io::write_file((fs::path(run_dir) / "report_correlations.csv").string(), corr);
    std::printf("== gating weight quartiles by class ==\n%s", quart.c_str());
    std::printf("\n== gating weight correlations with covariates ==\n%s", corr.c_str());
    std::string attr = (fs::path(run_dir) / "channel_attribution.csv").string();
    if (fs::exists(attr))
        std::printf("\n== per-channel attribution ==\n%s", detail_io::read_file(attr).c_str());
}

void cmd_sweep(const RunConfig& base, const std::string& features, const std::string& out) {
    const std::vector<std::string> priors{"none", "l-shift", "lnorm-shift", "pure"};
    const std::vector<double> lambdas{0.1, 0.2, 0.6, 0.8, 1.0};
    FeatureSet set = read_container(features);

    std::string csv = "prior,lambda,auc_epoch,acc_epoch,auc_subject,acc_subject\n";
    int cell = 0;
    for (const auto& prior : priors) {
        // the no-prior objective has no divergence term, so its metrics do not
        // depend on lambda; compute that row once
        std::unique_ptr<CvOutcome> cached;
        for (double lam : lambdas) {
            ++cell;
            RunConfig cfg = base;
            cfg.prior = prior;
            cfg.lambda_kl = lam;
            const CvOutcome* cv;
            CvOutcome fresh;
            if (prior == "none" && cached) {
                cv = cached.get();
            } else {
                fresh = run_cv(set, train_config(cfg, set.channels, set.t_prime, set.fs));
                if (prior == "none") {
                    cached = std::make_unique<CvOutcome>(fresh);
                }
                cv = prior == "none" ? cached.get() : &fresh;
            }
            csv += prior + "," + detail_run::fmt(lam) + "," + detail_run::fmt(cv->auc_epoch_pooled) +
                   "," + detail_run::fmt(cv->acc_epoch_pooled) + "," +
                   detail_run::fmt(cv->auc_subject_pooled) + "," +
                   detail_run::fmt(cv->acc_subject_pooled) + "\n";
            std::printf("[%2d/20] prior=%-11s lambda=%.1f subject auc %.4f\n", cell,
                        prior.c_str(), lam, cv->auc_subject_pooled);
            std::fflush(stdout);
        }
    }
    detail_io::write_file(out, csv);
    std::printf("sweep table -> %s\n", out.c_str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"variational mixture of graph experts for multichannel time series"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset of raw CSVs");
    Knobs synth_k(synth);
    std::string synth_out;
    synth->add_option("--out", synth_out, "output dataset directory")->required();
    synth_k.field("--subjects-per-class", &RunConfig::subjects_per_class, "subjects per class");
    synth_k.field("--fs", &RunConfig::fs, "sampling rate in Hz");
    synth_k.field("--duration-sec", &RunConfig::duration_sec, "recording length in seconds");
    synth_k.field("--channels", &RunConfig::channels, "channel count");
    synth_k.field("--target-band", &RunConfig::target_band,
                  "band carrying the class effect (delta, theta, alpha, beta)");
    synth_k.field("--target-channels", &RunConfig::target_channels,
                  "1-based channels carrying the effect, e.g. 1-6 or 2,5,9");
    synth_k.field("--effect-size", &RunConfig::effect_size, "amplitude ratio for class 1");
    synth_k.field("--noise-amp", &RunConfig::noise_amp, "pink noise RMS amplitude");
    synth_k.field("--seed", &RunConfig::seed, "generator seed");

    // featurize
    auto* feat = app.add_subcommand("featurize", "extract band features into a container");
    Knobs feat_k(feat);
    std::vector<std::string> feat_inputs;
    std::string feat_out;
    feat->add_option("inputs", feat_inputs, "raw CSV files or dataset directories")
        ->required()
        ->expected(-1);
    feat->add_option("--out", feat_out, "output container path")->required();
    double feat_fs = 0.0;
    CLI::Option* feat_fs_opt =
        feat->add_option("--fs", feat_fs, "expected sampling rate; other rates are rejected");
    feat_k.field("--epoch-sec", &RunConfig::epoch_sec, "epoch length in seconds");
    feat_k.field("--density", &RunConfig::density, "adjacency edge density");
    feat_k.field("--graph-scope", &RunConfig::graph_scope, "adjacency scope (epoch, subject)");

    // train
    auto* train = app.add_subcommand("train", "cross-validated training from a container");
    Knobs train_k(train);
    std::string train_features, train_out;
    bool train_no_final = false;
    train->add_option("--features", train_features, "feature container")->required();
    train->add_option("--out", train_out, "run directory")->required();
    train->add_flag("--no-final", train_no_final,
                    "skip training the final all-data model (no weights.bin)");
    add_train_knobs(train_k);

    // eval
    auto* eval = app.add_subcommand("eval", "apply a trained run's weights to a container");
    std::string eval_run, eval_features, eval_out;
    eval->add_option("--run", eval_run, "run directory holding config.txt and weights.bin")
        ->required();
    eval->add_option("--features", eval_features, "feature container")->required();
    eval->add_option("--out", eval_out, "also write the metrics JSON here");

    // report
    auto* report = app.add_subcommand("report", "gating and attribution tables for a run");
    std::string report_run;
    report->add_option("--run", report_run, "run directory")->required();

    // sweep-lambda
    auto* sweep = app.add_subcommand("sweep-lambda",
                                     "grid over prior variants and divergence weights");
    Knobs sweep_k(sweep);
    std::string sweep_features, sweep_out;
    sweep->add_option("--features", sweep_features, "feature container")->required();
    sweep->add_option("--out", sweep_out, "output CSV path")->required();
    add_train_knobs(sweep_k);

    // kl-check
    auto* klc = app.add_subcommand("kl-check", "closed-form divergence vs Monte-Carlo");
    int kl_trials = 100;
    int kl_samples = 100000;
    uint64_t kl_seed = 424242;
    klc->add_option("--trials", kl_trials, "number of random instances");
    klc->add_option("--samples", kl_samples, "Monte-Carlo draws per instance");
    klc->add_option("--seed", kl_seed, "noise seed");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "central-difference check of a tiny model");
    uint64_t gc_model_seed = 35;
    uint64_t gc_noise_seed = 3;
    double gc_eps = 1e-5;
    gc->add_option("--seed", gc_model_seed, "model init seed");
    gc->add_option("--noise-seed", gc_noise_seed, "latent noise seed");
    gc->add_option("--eps", gc_eps, "central difference step");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) {
            RunConfig cfg = synth_k.resolve();
            write_dataset(synth_out, synth_config(cfg));
            detail_io::write_file((fs::path(synth_out) / "config.txt").string(),
                                  serialize_config(cfg));
            std::printf("wrote %d subjects to %s\n", 2 * cfg.subjects_per_class,
                        synth_out.c_str());
        } else if (feat->parsed()) {
            RunConfig cfg = feat_k.resolve();
            FeaturizeOptions opt = featurize_options(cfg);
            if (feat_fs_opt->count() > 0) opt.expect_fs = feat_fs;
            auto recs = load_inputs(feat_inputs);
            FeatureSet set = featurize(recs, opt);
            write_container(feat_out, set);
            std::printf("featurized %zu subjects, %zu epochs (C=%d, T'=%d) -> %s\n",
                        set.subjects.size(), set.epochs.size(), set.channels, set.t_prime,
                        feat_out.c_str());
        } else if (train->parsed()) {
            cmd_train(train_k.resolve(), train_features, train_out, train_no_final);
        } else if (eval->parsed()) {
            cmd_eval(eval_run, eval_features, eval_out);
        } else if (report->parsed()) {
            cmd_report(report_run);
        } else if (sweep->parsed()) {
            cmd_sweep(sweep_k.resolve(), sweep_features, sweep_out);
        } else if (klc->parsed()) {
            auto res = run_kl_check(kl_trials, kl_samples, kl_seed);
            std::printf("%s\n", res.summary().c_str());
            return res.passed() ? 0 : 2;
        } else if (gc->parsed()) {
            auto res = run_grad_probe(gc_model_seed, gc_noise_seed, gc_eps);
            std::printf("gradcheck: %zu parameters, max relative error %.3e\n", res.parameters,
                        res.worst_rel_err);
            return res.worst_rel_err < 1e-4 ? 0 : 2;
        }
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 2;
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
