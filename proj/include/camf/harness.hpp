#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "camf/data.hpp"
#include "camf/metrics.hpp"
#include "camf/model.hpp"

namespace camf {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <class T>
struct AdamState {
    T lr = T(1e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    long step = 0;
    std::vector<std::vector<T>> m, v;

    void init(const std::vector<Tensor<T>*>& params) {
        m.clear();
        v.clear();
        for (auto* p : params) {
            m.emplace_back(p->numel(), T(0));
            v.emplace_back(p->numel(), T(0));
        }
        step = 0;
    }
};

// Standard Adam with bias correction; parameters without grads are skipped.
template <class T>
void adam_step(const std::vector<Tensor<T>*>& params, AdamState<T>& st) {
    if (st.m.size() != params.size())
        throw std::invalid_argument("adam_step: state tracks " + std::to_string(st.m.size()) + " tensors, got " +
                                    std::to_string(params.size()));
    ++st.step;
    const double bc1 = 1.0 - std::pow(double(st.beta1), double(st.step));
    const double bc2 = 1.0 - std::pow(double(st.beta2), double(st.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T>& p = *params[i];
        if (!p.has_grad()) continue;
        if (st.m[i].size() != p.numel()) throw std::invalid_argument("adam_step: moment shape mismatch");
        const T* g = p.grad();
        T* w = p.data();
        T* mi = st.m[i].data();
        T* vi = st.v[i].data();
        for (std::size_t j = 0; j < p.numel(); ++j) {
            mi[j] = st.beta1 * mi[j] + (T(1) - st.beta1) * g[j];
            vi[j] = st.beta2 * vi[j] + (T(1) - st.beta2) * g[j] * g[j];
            const double mhat = double(mi[j]) / bc1;
            const double vhat = double(vi[j]) / bc2;
            w[j] = T(double(w[j]) - double(st.lr) * mhat / (std::sqrt(vhat) + double(st.eps)));
        }
    }
}

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

enum class Task { ad_cn, cn_mci, ad_mci };

inline std::string task_name(Task t) {
    switch (t) {
        case Task::ad_cn: return "ad_cn";
        case Task::cn_mci: return "cn_mci";
        case Task::ad_mci: return "ad_mci";
    }
    return "ad_cn";
}

inline Task task_from(const std::string& s) {
    if (s == "ad_cn") return Task::ad_cn;
    if (s == "cn_mci") return Task::cn_mci;
    if (s == "ad_mci") return Task::ad_mci;
    throw std::invalid_argument("unknown task '" + s + "' (ad_cn, cn_mci, ad_mci)");
}

struct RunConfig {
    Task task = Task::ad_cn;
    int epochs = 40;           // phase B
    int pretrain_epochs = 20;  // phase A
    int batch_size = 4;
    double lr = 1e-4;
    double lambda = 0.5;
    std::uint64_t seed = 1;
    int volume_size = 32;
    int folds = 10;
    bool freeze_specific = true;
    bool mse_paper_exact = false;
    bool use_tca = true;
    bool use_ccfe = true;

    void validate() const {
        if (epochs <= 0 || pretrain_epochs < 0 || batch_size <= 0 || folds < 2)
            throw std::invalid_argument("RunConfig: epochs/batch_size/folds must be positive (folds >= 2)");
        if (lr < 0) throw std::invalid_argument("RunConfig: lr must be non-negative");
        if (lambda < 0) throw std::invalid_argument("RunConfig: lambda must be non-negative");
        if (volume_size < 16 || volume_size % 4 != 0)
            throw std::invalid_argument("RunConfig: volume_size must be a multiple of 4, at least 16");
    }
};

inline std::string config_text(const RunConfig& c) {
    std::ostringstream os;
    os << "task = " << task_name(c.task) << "\n";
    os << "epochs = " << c.epochs << "\n";
    os << "pretrain_epochs = " << c.pretrain_epochs << "\n";
    os << "batch_size = " << c.batch_size << "\n";
    os << std::setprecision(17) << "lr = " << c.lr << "\n";
    os << std::setprecision(17) << "lambda = " << c.lambda << "\n";
    os << "seed = " << c.seed << "\n";
    os << "volume_size = " << c.volume_size << "\n";
    os << "folds = " << c.folds << "\n";
    os << "freeze_specific = " << (c.freeze_specific ? 1 : 0) << "\n";
    os << "mse_paper_exact = " << (c.mse_paper_exact ? 1 : 0) << "\n";
    os << "use_tca = " << (c.use_tca ? 1 : 0) << "\n";
    os << "use_ccfe = " << (c.use_ccfe ? 1 : 0) << "\n";
    return os.str();
}

inline RunConfig config_from_text(const std::string& text) {
    RunConfig c;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const char* ws = " \t\r";
            auto b = s.find_first_not_of(ws);
            auto e = s.find_last_not_of(ws);
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        if (key.empty() || key[0] == '#') continue;
        for (auto& ch : key)
            if (ch == '-') ch = '_';
        if (key == "task")
            c.task = task_from(val);
        else if (key == "epochs")
            c.epochs = std::stoi(val);
        else if (key == "pretrain_epochs")
            c.pretrain_epochs = std::stoi(val);
        else if (key == "batch_size")
            c.batch_size = std::stoi(val);
        else if (key == "lr")
            c.lr = std::stod(val);
        else if (key == "lambda")
            c.lambda = std::stod(val);
        else if (key == "seed")
            c.seed = std::stoull(val);
        else if (key == "volume_size")
            c.volume_size = std::stoi(val);
        else if (key == "folds")
            c.folds = std::stoi(val);
        else if (key == "freeze_specific")
            c.freeze_specific = std::stoi(val) != 0;
        else if (key == "mse_paper_exact")
            c.mse_paper_exact = std::stoi(val) != 0;
        else if (key == "use_tca")
            c.use_tca = std::stoi(val) != 0;
        else if (key == "use_ccfe")
            c.use_ccfe = std::stoi(val) != 0;
        else
            throw std::invalid_argument("unknown config key '" + key + "'");
    }
    return c;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct EpochLoss {
    double total = 0, consi = 0, mse = 0, ce = 0;
};

namespace harness_detail {

template <class T>
Tensor<T> gather_batch(const std::vector<VolumePair<T>>& subjects, const std::vector<std::size_t>& ids,
                       std::size_t lo, std::size_t hi, bool mri) {
    std::vector<Tensor<T>> vols;
    vols.reserve(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) vols.push_back(mri ? subjects[ids[i]].mri : subjects[ids[i]].pet);
    return stack0(vols);
}

inline std::string diag_stats(const char* name, double v) {
    std::ostringstream os;
    os << name << "=" << v;
    return os.str();
}

}  // namespace harness_detail

template <class T>
FusionOptions<T> fusion_options(const RunConfig& cfg) {
    FusionOptions<T> o;
    o.lambda = T(cfg.lambda);
    o.use_tca = cfg.use_tca;
    o.use_ccfe = cfg.use_ccfe;
    o.mse_paper_exact = cfg.mse_paper_exact;
    return o;
}

// Phase A: pre-train FE_m + head_m on MRI and FE_p + head_p on PET with
// plain cross-entropy. The two paths are parameter-disjoint, so one combined
// backward equals two independent trainings.
template <class T>
void pretrain_specific(ModelParams<T>& model, const std::vector<VolumePair<T>>& subjects,
                       std::vector<std::size_t> train_ids, const RunConfig& cfg, Rng& order_rng) {
    model.set_specific_trainable(true);
    auto params = model.specific_params();
    AdamState<T> adam;
    adam.lr = T(cfg.lr);
    adam.init(params);
    for (int epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
        shuffle(train_ids, order_rng);
        for (std::size_t lo = 0; lo < train_ids.size(); lo += std::size_t(cfg.batch_size)) {
            const std::size_t hi = std::min(train_ids.size(), lo + std::size_t(cfg.batch_size));
            auto mri = harness_detail::gather_batch(subjects, train_ids, lo, hi, true);
            auto pet = harness_detail::gather_batch(subjects, train_ids, lo, hi, false);
            std::vector<int> labels;
            for (std::size_t i = lo; i < hi; ++i) labels.push_back(subjects[train_ids[i]].label);

            GradTape<T> tape;
            auto loss_m = cross_entropy_logits(specific_logits(model, true, mri, cfg.use_tca, true, &tape), labels,
                                               &tape);
            auto loss_p = cross_entropy_logits(specific_logits(model, false, pet, cfg.use_tca, true, &tape), labels,
                                               &tape);
            auto loss = add(loss_m, loss_p, &tape);
            if (!std::isfinite(double(loss.item())))
                throw std::runtime_error("pretrain: non-finite loss at epoch " + std::to_string(epoch));
            zero_grads(params);
            backward(loss, tape);
            adam_step(params, adam);
        }
    }
    zero_grads(params);
}

// Phase B: train the shared stack, FF, prototypes and classifier against the
// combined objective. Returns the per-epoch loss trace.
template <class T>
std::vector<EpochLoss> train_fusion(ModelParams<T>& model, const std::vector<VolumePair<T>>& subjects,
                                    std::vector<std::size_t> train_ids, const RunConfig& cfg, Rng& order_rng) {
    auto opts = fusion_options<T>(cfg);
    auto params = model.fusion_params();
    if (!cfg.freeze_specific)
        for (auto* t : model.specific_params()) params.push_back(t);
    AdamState<T> adam;
    adam.lr = T(cfg.lr);
    adam.init(params);

    // Frozen extractors emit the same SF rows every epoch; compute them once.
    std::vector<SpecificFeatures<T>> sf_cache;
    if (cfg.freeze_specific) {
        sf_cache.resize(subjects.size());
        for (std::size_t lo = 0; lo < train_ids.size(); lo += std::size_t(cfg.batch_size)) {
            const std::size_t hi = std::min(train_ids.size(), lo + std::size_t(cfg.batch_size));
            auto mri = harness_detail::gather_batch(subjects, train_ids, lo, hi, true);
            auto pet = harness_detail::gather_batch(subjects, train_ids, lo, hi, false);
            auto sf_m = fe_forward(mri, model.fe_m, (GradTape<T>*)nullptr, cfg.use_tca);
            auto sf_p = fe_forward(pet, model.fe_p, (GradTape<T>*)nullptr, cfg.use_tca);
            for (std::size_t i = lo; i < hi; ++i) {
                sf_cache[train_ids[i]].sf_m = reshape(select0(sf_m, i - lo), {1, sf_m.shape[1]});
                sf_cache[train_ids[i]].sf_p = reshape(select0(sf_p, i - lo), {1, sf_p.shape[1]});
            }
        }
    }
    auto gather_sf = [&](const std::vector<std::size_t>& ids, std::size_t lo, std::size_t hi) {
        SpecificFeatures<T> batch;
        std::vector<Tensor<T>> ms, ps;
        for (std::size_t i = lo; i < hi; ++i) {
            ms.push_back(reshape(sf_cache[ids[i]].sf_m, {sf_cache[ids[i]].sf_m.shape[1]}));
            ps.push_back(reshape(sf_cache[ids[i]].sf_p, {sf_cache[ids[i]].sf_p.shape[1]}));
        }
        batch.sf_m = stack0(ms);
        batch.sf_p = stack0(ps);
        return batch;
    };

    std::vector<EpochLoss> trace;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle(train_ids, order_rng);
        EpochLoss acc;
        std::size_t batches = 0;
        for (std::size_t lo = 0; lo < train_ids.size(); lo += std::size_t(cfg.batch_size)) {
            const std::size_t hi = std::min(train_ids.size(), lo + std::size_t(cfg.batch_size));
            auto mri = harness_detail::gather_batch(subjects, train_ids, lo, hi, true);
            auto pet = harness_detail::gather_batch(subjects, train_ids, lo, hi, false);
            std::vector<int> labels;
            for (std::size_t i = lo; i < hi; ++i) labels.push_back(subjects[train_ids[i]].label);

            GradTape<T> tape;
            SpecificFeatures<T> sf_batch;
            const SpecificFeatures<T>* pre = nullptr;
            if (cfg.freeze_specific) {
                sf_batch = gather_sf(train_ids, lo, hi);
                pre = &sf_batch;
            }
            auto out = fusion_forward(model, mri, pet, labels, opts, /*training=*/true, &tape, pre);
            const double lt = double(out.l_total.item());
            if (!std::isfinite(lt)) {
                std::ostringstream os;
                os << "train_fusion: non-finite loss at epoch " << epoch << " batch " << batches << " (subjects";
                for (std::size_t i = lo; i < hi; ++i) os << " " << subjects[train_ids[i]].subject_id;
                os << "; l_consi=" << double(out.l_consi.item()) << " l_mse=" << double(out.l_mse.item())
                   << " l_c=" << double(out.l_c.item()) << ")";
                throw std::runtime_error(os.str());
            }
            acc.total += lt;
            acc.consi += double(out.l_consi.item());
            acc.mse += double(out.l_mse.item());
            acc.ce += double(out.l_c.item());
            ++batches;
            zero_grads(params);
            backward(out.l_total, tape);
            adam_step(params, adam);
        }
        acc.total /= double(batches);
        acc.consi /= double(batches);
        acc.mse /= double(batches);
        acc.ce /= double(batches);
        trace.push_back(acc);
    }
    zero_grads(params);
    return trace;
}

// Pre-training (when frozen specifics are requested) followed by fusion
// training; deterministic given cfg.seed and the fold index.
template <class T>
std::vector<EpochLoss> train_fold(ModelParams<T>& model, const std::vector<VolumePair<T>>& subjects,
                                  const std::vector<std::size_t>& train_ids, const RunConfig& cfg, int fold) {
    cfg.validate();
    Rng order_rng(cfg.seed * 0x9e3779b97f4a7c15ull + std::uint64_t(fold) + 1);
    pretrain_specific(model, subjects, train_ids, cfg, order_rng);
    if (cfg.freeze_specific) model.set_specific_trainable(false);
    return train_fusion(model, subjects, train_ids, cfg, order_rng);
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

template <class T>
struct EvalResult {
    Metrics metrics;
    std::vector<double> scores;  // P(class 1)
    std::vector<int> preds;
    std::vector<int> labels;
};

template <class T>
EvalResult<T> evaluate(ModelParams<T>& model, const std::vector<VolumePair<T>>& subjects,
                       const std::vector<std::size_t>& ids, const RunConfig& cfg) {
    auto opts = fusion_options<T>(cfg);
    EvalResult<T> r;
    for (std::size_t lo = 0; lo < ids.size(); lo += std::size_t(cfg.batch_size)) {
        const std::size_t hi = std::min(ids.size(), lo + std::size_t(cfg.batch_size));
        auto mri = harness_detail::gather_batch(subjects, ids, lo, hi, true);
        auto pet = harness_detail::gather_batch(subjects, ids, lo, hi, false);
        auto out = fusion_forward(model, mri, pet, std::vector<int>{}, opts, /*training=*/false);
        auto probs = class_probabilities(out.logits);
        for (std::size_t i = lo; i < hi; ++i) {
            const std::size_t row = i - lo;
            r.scores.push_back(double(probs.data()[row * 2 + 1]));
            r.preds.push_back(probs.data()[row * 2 + 1] > probs.data()[row * 2] ? 1 : 0);
            r.labels.push_back(subjects[ids[i]].label);
        }
    }
    r.metrics = metrics_from(confusion_from(r.preds, r.labels), roc_auc(r.scores, r.labels));
    return r;
}

// ---------------------------------------------------------------------------
// cross validation
// ---------------------------------------------------------------------------

struct FoldTrace {
    int fold = 0;
    std::vector<EpochLoss> losses;
};

struct CvReport {
    std::vector<Metrics> per_fold;
    std::vector<FoldTrace> traces;
    MeanStd acc, auc, pre, spe, sen;

    void aggregate() {
        auto col = [&](double Metrics::*field) {
            std::vector<double> xs;
            for (const auto& m : per_fold) xs.push_back(m.*field);
            return mean_std(xs);
        };
        acc = col(&Metrics::acc);
        auc = col(&Metrics::auc);
        pre = col(&Metrics::pre);
        spe = col(&Metrics::spe);
        sen = col(&Metrics::sen);
    }
};

inline void write_metrics_csv(const CvReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot create '" + path + "'");
    out << "fold,acc,auc,pre,spe,sen\n";
    out << std::setprecision(10);
    for (std::size_t f = 0; f < report.per_fold.size(); ++f) {
        const auto& m = report.per_fold[f];
        out << f << ',' << m.acc << ',' << m.auc << ',' << m.pre << ',' << m.spe << ',' << m.sen << '\n';
    }
    out << "mean," << report.acc.mean << ',' << report.auc.mean << ',' << report.pre.mean << ',' << report.spe.mean
        << ',' << report.sen.mean << '\n';
    out << "std," << report.acc.stddev << ',' << report.auc.stddev << ',' << report.pre.stddev << ','
        << report.spe.stddev << ',' << report.sen.stddev << '\n';
}

inline void write_loss_trace_csv(const std::vector<FoldTrace>& traces, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot create '" + path + "'");
    out << "fold,epoch,l_total,l_consi,l_mse,l_c\n";
    out << std::setprecision(10);
    for (const auto& t : traces)
        for (std::size_t e = 0; e < t.losses.size(); ++e)
            out << t.fold << ',' << e << ',' << t.losses[e].total << ',' << t.losses[e].consi << ','
                << t.losses[e].mse << ',' << t.losses[e].ce << '\n';
}

// Train one model per fold on the other folds' subjects, evaluate on the
// held-out fold. A per-fold callback receives the trained model (used by the
// CLI for checkpointing).
template <class T>
CvReport cross_validate(
    const std::vector<VolumePair<T>>& subjects, const RunConfig& cfg,
    const std::function<void(int, ModelParams<T>&)>& per_fold_sink = {}) {
    cfg.validate();
    std::vector<std::pair<std::string, int>> roster;
    for (const auto& s : subjects) roster.push_back({s.subject_id, s.label});
    FoldPlan plan = make_folds(roster, cfg.folds, cfg.seed);

    CvReport report;
    for (int fold = 0; fold < cfg.folds; ++fold) {
        std::vector<std::size_t> train_ids, test_ids;
        for (std::size_t i = 0; i < subjects.size(); ++i)
            (plan.fold_of(subjects[i].subject_id) == fold ? test_ids : train_ids).push_back(i);
        for (std::size_t t : test_ids)
            for (std::size_t tr : train_ids)
                if (t == tr) throw std::logic_error("cross_validate: fold leakage");

        auto model = ModelParams<T>::make(cfg.seed + std::uint64_t(fold) * 0x51ed2701d3aa71c5ull);
        FoldTrace trace;
        trace.fold = fold;
        trace.losses = train_fold(model, subjects, train_ids, cfg, fold);
        report.traces.push_back(std::move(trace));
        report.per_fold.push_back(evaluate(model, subjects, test_ids, cfg).metrics);
        if (per_fold_sink) per_fold_sink(fold, model);
    }
    report.aggregate();
    return report;
}

}  // namespace camf
