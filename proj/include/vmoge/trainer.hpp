#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vmoge/common.hpp"
#include "vmoge/model.hpp"

namespace vmoge {

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int epochs = 30;
    int batch = 16;
    double lambda_kl = kDefaultLambdaKl;
    PriorSpec prior;
    bool paper_kl_sign = false;
    uint64_t seed = 1;
    int folds = 5;
    int eval_samples = 8;
    ModelConfig model;

    void validate() const {
        if (lr <= 0.0 || beta1 <= 0.0 || beta2 <= 0.0)
            throw ValidationError("train: rates must be positive");
        if (beta1 >= 1.0 || beta2 >= 1.0)
            throw ValidationError("train: betas must be below 1");
        if (folds < 2) throw ValidationError("train: folds must be >= 2");
        if (epochs < 0) throw ValidationError("train: epochs must be >= 0");
        if (batch < 1) throw ValidationError("train: batch must be >= 1");
        if (lambda_kl < 0.0) throw ValidationError("train: lambda_kl must be >= 0");
        if (eval_samples < 1) throw ValidationError("train: eval samples must be >= 1");
    }
};

// ---- optimizer --------------------------------------------------------------

class Adam {
public:
    Adam(const ParameterStore& ps, double lr, double b1, double b2, double eps)
        : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {
        m_.resize(ps.count());
        v_.resize(ps.count());
        for (size_t i = 0; i < ps.count(); ++i) {
            size_t n = ps.var_at(i).numel();
            m_[i].assign(n, 0.0);
            v_[i].assign(n, 0.0);
        }
    }

    // One bias-corrected update from the gradients currently on the store.
    // A non-finite gradient anywhere skips the whole step.
    bool step(ParameterStore& ps) {
        for (size_t i = 0; i < ps.count(); ++i)
            for (double g : ps.var_at(i).grads())
                if (!std::isfinite(g)) {
                    ++skipped_;
                    warn("adam: non-finite gradient in '" + ps.name_at(i) + "', step skipped");
                    return false;
                }
        ++t_;
        double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (size_t i = 0; i < ps.count(); ++i) {
            auto var = ps.var_at(i);
            auto& x = var.mutable_values();
            const auto& g = var.grads();
            for (size_t j = 0; j < x.size(); ++j) {
                m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * g[j];
                v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * g[j] * g[j];
                double mhat = m_[i][j] / c1;
                double vhat = v_[i][j] / c2;
                x[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
        return true;
    }

    long steps() const { return t_; }
    long skipped() const { return skipped_; }

private:
    double lr_, b1_, b2_, eps_;
    long t_ = 0;
    long skipped_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// ---- splits and metrics -----------------------------------------------------

// Stratified subject-level fold assignment: every epoch of a subject shares
// that subject's fold.
inline std::vector<int> subject_kfold(const std::vector<int>& subject_labels, int folds,
                                      uint64_t seed) {
    if (folds < 2) throw ValidationError("subject_kfold: folds must be >= 2");
    std::array<std::vector<size_t>, 2> by_class;
    for (size_t i = 0; i < subject_labels.size(); ++i) {
        int y = subject_labels[i];
        if (y != 0 && y != 1) throw ValidationError("subject_kfold: labels must be 0/1");
        by_class[static_cast<size_t>(y)].push_back(i);
    }
    for (int y = 0; y < 2; ++y)
        if (by_class[static_cast<size_t>(y)].size() < static_cast<size_t>(folds))
            throw ValidationError("subject_kfold: class " + std::to_string(y) + " has " +
                                  std::to_string(by_class[static_cast<size_t>(y)].size()) +
                                  " subjects, fewer than " + std::to_string(folds) + " folds");
    std::vector<int> fold(subject_labels.size(), -1);
    for (int y = 0; y < 2; ++y) {
        auto order = by_class[static_cast<size_t>(y)];
        Rng rng = Rng(seed).derive(0x6b666f6cULL + static_cast<uint64_t>(y));
        rng.shuffle(order);
        for (size_t i = 0; i < order.size(); ++i)
            fold[order[i]] = static_cast<int>(i % static_cast<size_t>(folds));
    }
    return fold;
}

// Mann-Whitney AUC with ties counted half; absent when only one class is there.
inline std::optional<double> auc(const std::vector<double>& scores,
                                 const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("auc: scores and labels differ in length");
    double wins = 0.0;
    size_t pairs = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j])
                wins += 1.0;
            else if (scores[i] == scores[j])
                wins += 0.5;
        }
    }
    if (pairs == 0) return std::nullopt;
    return wins / static_cast<double>(pairs);
}

inline double accuracy(const std::vector<double>& scores, const std::vector<int>& labels,
                       double threshold = 0.5) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("accuracy: scores and labels differ in length");
    if (scores.empty()) return 0.0;
    size_t hits = 0;
    for (size_t i = 0; i < scores.size(); ++i)
        if ((scores[i] >= threshold ? 1 : 0) == labels[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(scores.size());
}

namespace detail_stat {

// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
inline double betacf(double a, double b, double x) {
    const int max_iter = 200;
    const double tiny = 1e-300, eps = 3e-14;
    double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_iter; ++m) {
        int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) break;
    }
    return h;
}

inline double betai(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    double ln = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                b * std::log(1.0 - x);
    double front = std::exp(ln);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace detail_stat

struct PearsonResult {
    double r = 0.0;
    double p = 1.0;
};

// Sample correlation with a two-sided p from the t transform (n-2 dof).
inline std::optional<PearsonResult> pearson_r(const std::vector<double>& x,
                                              const std::vector<double>& y) {
    if (x.size() != y.size()) throw std::invalid_argument("pearson_r: length mismatch");
    size_t n = x.size();
    if (n < 3) return std::nullopt;
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
    double r = sxy / std::sqrt(sxx * syy);
    r = std::clamp(r, -1.0, 1.0);
    double nu = static_cast<double>(n) - 2.0;
    double one_minus = 1.0 - r * r;
    PearsonResult out;
    out.r = r;
    if (one_minus <= 0.0) {
        out.p = 0.0;
    } else {
        double t2 = r * r * nu / one_minus;
        out.p = detail_stat::betai(0.5 * nu, 0.5, nu / (nu + t2));
    }
    return out;
}

// ---- training ---------------------------------------------------------------

// Per-epoch constants shared by every fold: normalized adjacencies and, when
// the prior is active, per-band precision matrices.
struct PreparedData {
    const FeatureSet* set = nullptr;
    bool use_prior = false;
    std::vector<std::array<Mat, kNumBands>> ahat;
    std::vector<std::array<PrecisionMatrix, kNumBands>> priors;
};

inline PreparedData prepare_data(const FeatureSet& set, const PriorSpec& prior,
                                 bool add_self_loops) {
    PreparedData out;
    out.set = &set;
    out.use_prior = prior.variant != PriorVariant::none;
    out.ahat.resize(set.epochs.size());
    if (out.use_prior) out.priors.resize(set.epochs.size());
    parallel_for(static_cast<int>(set.epochs.size()), [&](int idx) {
        size_t i = static_cast<size_t>(idx);
        out.ahat[i] = normalized_adjacencies(set.epochs[i], add_self_loops);
        if (out.use_prior)
            for (int k = 0; k < kNumBands; ++k)
                out.priors[i][static_cast<size_t>(k)] =
                    PrecisionMatrix::build(set.epochs[i].adjacency[static_cast<size_t>(k)], prior);
    });
    return out;
}

struct TrainOutcome {
    VmogeModel model;
    std::vector<LossBreakdown> trace;        // one entry per optimizer step
    std::vector<double> epoch_total_means;   // mean total per training epoch
    long skipped_steps = 0;
};

// Mini-batch Adam on the total loss over the given epoch indices.
inline TrainOutcome train_model(const PreparedData& data, const std::vector<size_t>& train_idx,
                                const TrainConfig& cfg, uint64_t fold_seed) {
    cfg.validate();
    if (train_idx.empty()) throw ValidationError("train_model: empty training split");
    TrainOutcome out{VmogeModel::init(cfg.model, Rng(fold_seed).derive(1).seed()), {}, {}, 0};
    Adam adam(out.model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    Rng shuffle_rng = Rng(fold_seed).derive(2);
    Rng noise_rng = Rng(fold_seed).derive(3);

    auto order = train_idx;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double total_acc = 0.0;
        int batches = 0;
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch)) {
            size_t hi = std::min(order.size(), at + static_cast<size_t>(cfg.batch));
            std::vector<const EpochFeatures*> batch;
            std::vector<const std::array<Mat, kNumBands>*> ahat;
            std::vector<const std::array<PrecisionMatrix, kNumBands>*> priors;
            for (size_t i = at; i < hi; ++i) {
                batch.push_back(&data.set->epochs[order[i]]);
                ahat.push_back(&data.ahat[order[i]]);
                priors.push_back(data.use_prior ? &data.priors[order[i]] : nullptr);
            }
            auto loss = batch_loss(out.model, batch, ahat, priors, cfg.lambda_kl,
                                   data.use_prior, cfg.paper_kl_sign, noise_rng);
            if (!std::isfinite(loss.values.total)) {
                size_t from = out.trace.size() > 10 ? out.trace.size() - 10 : 0;
                for (size_t i = from; i < out.trace.size(); ++i)
                    warn("trace step " + std::to_string(i + 1) + ": total " +
                         std::to_string(out.trace[i].total));
                throw NumericalError("train_model: total loss diverged at step " +
                                     std::to_string(out.trace.size() + 1));
            }
            out.model.params.zero_grad();
            backward(loss.total);
            adam.step(out.model.params);
            out.trace.push_back(loss.values);
            total_acc += loss.values.total;
            ++batches;
        }
        out.epoch_total_means.push_back(batches ? total_acc / batches : 0.0);
    }
    out.skipped_steps = adam.skipped();
    return out;
}

// ---- evaluation and cross-validation ---------------------------------------

struct EvalRecord {
    size_t epoch_index = 0;
    uint32_t subject_index = 0;
    int label = 0;
    std::array<double, kNumBands> pi{};
    double phat = 0.0;
    Mat mu_norms;  // kNumBands x C
};

inline std::vector<EvalRecord> evaluate(const VmogeModel& model, const PreparedData& data,
                                        const std::vector<size_t>& idx, int samples,
                                        uint64_t noise_seed) {
    std::vector<EvalRecord> out(idx.size());
    parallel_for(static_cast<int>(idx.size()), [&](int ii) {
        size_t i = static_cast<size_t>(ii);
        size_t e = idx[i];
        const auto& ep = data.set->epochs[e];
        Rng rng = Rng(noise_seed).derive(e);
        auto pred = predict_epoch(model, ep, data.ahat[e], rng, samples);
        out[i] = {e, ep.subject_index, static_cast<int>(ep.label), pred.pi, pred.phat,
                  std::move(pred.mu_norms)};
    });
    return out;
}

struct FoldMetrics {
    int fold = 0;
    double auc_epoch = 0.0;
    double acc_epoch = 0.0;
    double auc_subject = 0.0;
    double acc_subject = 0.0;
    std::array<double, kNumBands> mean_pi_class0{};
    std::array<double, kNumBands> mean_pi_class1{};
    std::vector<double> epoch_total_means;
};

struct CvOutcome {
    std::vector<int> fold_of_subject;
    std::vector<FoldMetrics> folds;
    std::vector<std::vector<EvalRecord>> records;          // per fold
    std::vector<std::vector<LossBreakdown>> traces;        // per fold
    double auc_epoch_pooled = 0.0;
    double acc_epoch_pooled = 0.0;
    double auc_subject_pooled = 0.0;
    double acc_subject_pooled = 0.0;
    std::array<double, kNumBands> mean_pi_pooled{};
    Mat attribution;  // kNumBands x C, max-normalized per band
    long skipped_steps = 0;
};

namespace detail_cv {

struct SubjectScores {
    std::vector<double> scores;
    std::vector<int> labels;
};

// Mean epoch score per subject, in first-appearance order.
inline SubjectScores per_subject(const std::vector<const EvalRecord*>& recs) {
    std::vector<uint32_t> ids;
    std::vector<double> sums;
    std::vector<int> counts, labels;
    for (const auto* r : recs) {
        size_t at = ids.size();
        for (size_t i = 0; i < ids.size(); ++i)
            if (ids[i] == r->subject_index) {
                at = i;
                break;
            }
        if (at == ids.size()) {
            ids.push_back(r->subject_index);
            sums.push_back(0.0);
            counts.push_back(0);
            labels.push_back(r->label);
        }
        sums[at] += r->phat;
        counts[at] += 1;
    }
    SubjectScores out;
    for (size_t i = 0; i < ids.size(); ++i) {
        out.scores.push_back(sums[i] / counts[i]);
        out.labels.push_back(labels[i]);
    }
    return out;
}

}  // namespace detail_cv

// Full stratified subject-level cross-validation run.
inline CvOutcome run_cv(const FeatureSet& set, const TrainConfig& cfg) {
    cfg.validate();
    if (set.epochs.empty()) throw ValidationError("run_cv: feature set has no epochs");

    std::vector<int> subject_labels;
    for (const auto& s : set.subjects) subject_labels.push_back(s.label);

    CvOutcome out;
    out.fold_of_subject = subject_kfold(subject_labels, cfg.folds, cfg.seed);
    PreparedData data = prepare_data(set, cfg.prior, cfg.model.add_self_loops);

    for (int f = 0; f < cfg.folds; ++f) {
        std::vector<size_t> train_idx, test_idx;
        for (size_t e = 0; e < set.epochs.size(); ++e) {
            if (out.fold_of_subject[set.epochs[e].subject_index] == f)
                test_idx.push_back(e);
            else
                train_idx.push_back(e);
        }
        uint64_t fold_seed = Rng(cfg.seed).derive(0x666f6c64ULL + static_cast<uint64_t>(f)).seed();
        auto trained = train_model(data, train_idx, cfg, fold_seed);
        auto records = evaluate(trained.model, data, test_idx, cfg.eval_samples,
                                Rng(fold_seed).derive(4).seed());
        out.skipped_steps += trained.skipped_steps;

        FoldMetrics fm;
        fm.fold = f;
        fm.epoch_total_means = trained.epoch_total_means;
        std::vector<double> scores;
        std::vector<int> labels;
        std::vector<const EvalRecord*> recp;
        std::array<double, kNumBands> pi0{}, pi1{};
        int n0 = 0, n1 = 0;
        for (const auto& r : records) {
            scores.push_back(r.phat);
            labels.push_back(r.label);
            recp.push_back(&r);
            auto& acc = r.label == 0 ? pi0 : pi1;
            (r.label == 0 ? n0 : n1)++;
            for (int k = 0; k < kNumBands; ++k) acc[static_cast<size_t>(k)] += r.pi[static_cast<size_t>(k)];
        }
        for (int k = 0; k < kNumBands; ++k) {
            fm.mean_pi_class0[static_cast<size_t>(k)] = n0 ? pi0[static_cast<size_t>(k)] / n0 : 0.0;
            fm.mean_pi_class1[static_cast<size_t>(k)] = n1 ? pi1[static_cast<size_t>(k)] / n1 : 0.0;
        }
        fm.auc_epoch = auc(scores, labels).value_or(0.5);
        fm.acc_epoch = accuracy(scores, labels);
        auto subj = detail_cv::per_subject(recp);
        fm.auc_subject = auc(subj.scores, subj.labels).value_or(0.5);
        fm.acc_subject = accuracy(subj.scores, subj.labels);
        out.folds.push_back(std::move(fm));
        out.traces.push_back(std::move(trained.trace));
        out.records.push_back(std::move(records));
    }

    // pooled metrics and attribution over every test record
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<const EvalRecord*> recp;
    int C = set.channels;
    Mat attr(kNumBands, C);
    size_t total_records = 0;
    std::array<double, kNumBands> pi_acc{};
    for (const auto& fold_records : out.records)
        for (const auto& r : fold_records) {
            scores.push_back(r.phat);
            labels.push_back(r.label);
            recp.push_back(&r);
            for (int k = 0; k < kNumBands; ++k) {
                pi_acc[static_cast<size_t>(k)] += r.pi[static_cast<size_t>(k)];
                for (int c = 0; c < C; ++c)
                    attr(k, c) += r.pi[static_cast<size_t>(k)] * r.mu_norms(k, c);
            }
            ++total_records;
        }
    out.auc_epoch_pooled = auc(scores, labels).value_or(0.5);
    out.acc_epoch_pooled = accuracy(scores, labels);
    auto subj = detail_cv::per_subject(recp);
    out.auc_subject_pooled = auc(subj.scores, subj.labels).value_or(0.5);
    out.acc_subject_pooled = accuracy(subj.scores, subj.labels);
    for (int k = 0; k < kNumBands; ++k) {
        pi_acc[static_cast<size_t>(k)] /= static_cast<double>(total_records);
        out.mean_pi_pooled[static_cast<size_t>(k)] = pi_acc[static_cast<size_t>(k)];
        double mx = 0.0;
        for (int c = 0; c < C; ++c) {
            attr(k, c) /= static_cast<double>(total_records);
            mx = std::max(mx, attr(k, c));
        }
        if (mx > 0.0)
            for (int c = 0; c < C; ++c) attr(k, c) /= mx;
    }
    out.attribution = std::move(attr);
    return out;
}

// ---- run artifacts ----------------------------------------------------------

namespace detail_run {

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail_run

inline nlohmann::json metrics_json(const CvOutcome& cv) {
    nlohmann::json folds = nlohmann::json::array();
    double mean_ae = 0.0, mean_as = 0.0;
    for (const auto& f : cv.folds) {
        folds.push_back({{"fold", f.fold},
                         {"auc_epoch", f.auc_epoch},
                         {"acc_epoch", f.acc_epoch},
                         {"auc_subject", f.auc_subject},
                         {"acc_subject", f.acc_subject},
                         {"mean_pi_class0", f.mean_pi_class0},
                         {"mean_pi_class1", f.mean_pi_class1},
                         {"epoch_total_means", f.epoch_total_means}});
        mean_ae += f.auc_epoch;
        mean_as += f.auc_subject;
    }
    size_t n = cv.folds.size();
    mean_ae /= static_cast<double>(n);
    mean_as /= static_cast<double>(n);
    double sd_ae = 0.0, sd_as = 0.0;
    for (const auto& f : cv.folds) {
        sd_ae += (f.auc_epoch - mean_ae) * (f.auc_epoch - mean_ae);
        sd_as += (f.auc_subject - mean_as) * (f.auc_subject - mean_as);
    }
    sd_ae = std::sqrt(sd_ae / static_cast<double>(n));
    sd_as = std::sqrt(sd_as / static_cast<double>(n));
    return nlohmann::json{
        {"folds", std::move(folds)},
        {"aggregate",
         {{"auc_epoch_mean", mean_ae},
          {"auc_epoch_std", sd_ae},
          {"auc_subject_mean", mean_as},
          {"auc_subject_std", sd_as},
          {"auc_epoch_pooled", cv.auc_epoch_pooled},
          {"acc_epoch_pooled", cv.acc_epoch_pooled},
          {"auc_subject_pooled", cv.auc_subject_pooled},
          {"acc_subject_pooled", cv.acc_subject_pooled},
          {"mean_pi_pooled", cv.mean_pi_pooled}}},
        {"skipped_steps", cv.skipped_steps}};
}

inline void write_run_artifacts(const std::string& run_dir, const FeatureSet& set,
                                const CvOutcome& cv) {
    namespace fs = std::filesystem;
    fs::create_directories(run_dir);
    detail_io::write_file((fs::path(run_dir) / "metrics.json").string(),
                          metrics_json(cv).dump(2) + "\n");

    std::string gating = "subject,epoch,label,pi_delta,pi_theta,pi_alpha,pi_beta,p_hat,age,score\n";
    for (const auto& fold_records : cv.records)
        for (const auto& r : fold_records) {
            const auto& s = set.subjects[r.subject_index];
            gating += s.id + "," + std::to_string(r.epoch_index) + "," + std::to_string(r.label);
            for (int k = 0; k < kNumBands; ++k)
                gating += "," + detail_run::fmt(r.pi[static_cast<size_t>(k)]);
            gating += "," + detail_run::fmt(r.phat);
            gating += ",";
            if (s.age) gating += detail_run::fmt(*s.age);
            gating += ",";
            if (s.score) gating += detail_run::fmt(*s.score);
            gating += "\n";
        }
    detail_io::write_file((fs::path(run_dir) / "gating.csv").string(), gating);

    std::string attr = "band,channel,value\n";
    for (int k = 0; k < kNumBands; ++k)
        for (int c = 0; c < set.channels; ++c)
            attr += std::string(band_name(k)) + "," + std::to_string(c + 1) + "," +
                    detail_run::fmt(cv.attribution(k, c)) + "\n";
    detail_io::write_file((fs::path(run_dir) / "channel_attribution.csv").string(), attr);

    std::string trace;
    for (const auto& fold_trace : cv.traces) {
        int step = 0;
        for (const auto& t : fold_trace) {
            nlohmann::json line{{"step", ++step},
                                {"nll", t.nll},
                                {"kl", t.kl},
                                {"total", t.total}};
            trace += line.dump() + "\n";
        }
    }
    detail_io::write_file((fs::path(run_dir) / "trace.jsonl").string(), trace);
}

// ---- reports ----------------------------------------------------------------

struct GatingRow {
    std::string subject;
    long epoch = 0;
    int label = 0;
    std::array<double, kNumBands> pi{};
    double phat = 0.0;
    std::optional<double> age;
    std::optional<double> score;
};

inline std::vector<GatingRow> read_gating_csv(const std::string& path) {
    auto text = detail_io::read_file(path);
    std::vector<GatingRow> rows;
    size_t start = 0;
    bool header = true;
    while (start < text.size()) {
        size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(start, end - start);
        start = end + 1;
        if (line.empty()) continue;
        if (header) {
            header = false;
            continue;
        }
        auto f = detail_io::split(line, ',');
        if (f.size() != 10) throw ValidationError(path + ": expected 10 columns, got " +
                                                  std::to_string(f.size()));
        GatingRow r;
        r.subject = f[0];
        r.epoch = std::stol(f[1]);
        r.label = std::stoi(f[2]);
        for (int k = 0; k < kNumBands; ++k)
            r.pi[static_cast<size_t>(k)] = detail_io::parse_double(f[static_cast<size_t>(3 + k)], "pi");
        r.phat = detail_io::parse_double(f[7], "p_hat");
        if (!f[8].empty()) r.age = detail_io::parse_double(f[8], "age");
        if (!f[9].empty()) r.score = detail_io::parse_double(f[9], "score");
        rows.push_back(std::move(r));
    }
    return rows;
}

// Linear-interpolation quantile of a copy of the values.
inline double quantile(std::vector<double> v, double q) {
    if (v.empty()) throw std::invalid_argument("quantile: empty");
    std::sort(v.begin(), v.end());
    double pos = q * static_cast<double>(v.size() - 1);
    size_t lo = static_cast<size_t>(pos);
    if (lo + 1 >= v.size()) return v.back();
    double frac = pos - static_cast<double>(lo);
    return v[lo] * (1.0 - frac) + v[lo + 1] * frac;
}

// Per-class band-weight quartiles: class,band,mean,q25,q50,q75.
inline std::string gating_quartile_csv(const std::vector<GatingRow>& rows) {
    std::string out = "class,band,mean,q25,q50,q75\n";
    for (int y = 0; y < 2; ++y)
        for (int k = 0; k < kNumBands; ++k) {
            std::vector<double> v;
            for (const auto& r : rows)
                if (r.label == y) v.push_back(r.pi[static_cast<size_t>(k)]);
            if (v.empty()) continue;
            double mean = 0.0;
            for (double x : v) mean += x;
            mean /= static_cast<double>(v.size());
            out += std::to_string(y) + "," + band_name(k) + "," + detail_run::fmt(mean) + "," +
                   detail_run::fmt(quantile(v, 0.25)) + "," + detail_run::fmt(quantile(v, 0.5)) +
                   "," + detail_run::fmt(quantile(v, 0.75)) + "\n";
        }
    return out;
}

// Band-weight vs covariate correlations at the subject level (epoch gating
// weights averaged per subject first): band,covariate,n,r,p. Empty when no
// covariates were recorded.
inline std::string gating_correlation_csv(const std::vector<GatingRow>& rows) {
    struct Subject {
        std::string id;
        std::array<double, kNumBands> pi_sum{};
        int n = 0;
        std::optional<double> age, score;
    };
    std::vector<Subject> subjects;
    for (const auto& r : rows) {
        Subject* s = nullptr;
        for (auto& cand : subjects)
            if (cand.id == r.subject) {
                s = &cand;
                break;
            }
        if (!s) {
            subjects.push_back({r.subject, {}, 0, r.age, r.score});
            s = &subjects.back();
        }
        for (int k = 0; k < kNumBands; ++k) s->pi_sum[static_cast<size_t>(k)] += r.pi[static_cast<size_t>(k)];
        s->n += 1;
    }
    std::string out = "band,covariate,n,r,p\n";
    bool any = false;
    for (const char* cov : {"age", "score"}) {
        for (int k = 0; k < kNumBands; ++k) {
            std::vector<double> x, y;
            for (const auto& s : subjects) {
                auto v = std::string(cov) == "age" ? s.age : s.score;
                if (!v) continue;
                x.push_back(s.pi_sum[static_cast<size_t>(k)] / s.n);
                y.push_back(*v);
            }
            auto res = pearson_r(x, y);
            if (!res) continue;
            any = true;
            out += std::string(band_name(k)) + "," + cov + "," + std::to_string(x.size()) + "," +
                   detail_run::fmt(res->r) + "," + detail_run::fmt(res->p) + "\n";
        }
    }
    return any ? out : std::string();
}

}  // namespace vmoge
