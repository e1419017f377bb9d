#pragma once

#include <string>
#include <utility>

#include "camf/ccfe.hpp"
#include "camf/encoders.hpp"
#include "camf/ssff.hpp"

namespace camf {

// The complete learnable state: frozen-after-pretraining specific extractors
// FE_m / FE_p with their single-modality heads, the shared PFE/AFE stack, the
// FF fusion block, the two prototype banks, and the joint classifier.
template <class T>
struct ModelParams {
    static constexpr int kStage1Channels = 16;
    static constexpr int kFeatureWidth = 128;
    static constexpr int kPrototypes = 64;
    static constexpr int kClasses = 2;

    EncoderParams<T> fe_m, fe_p;
    ClassifierParams<T> head_m, head_p;  // phase-A single-modality heads

    PfeParams<T> shared_pfe;
    AfeParams<T> shared_afe;
    FFParams<T> ff;
    LprParams<T> lpr_m, lpr_p;
    ClassifierParams<T> classifier;  // joint 384 -> 2

    static ModelParams make(std::uint64_t seed) {
        Rng rng(seed);
        ModelParams m;
        m.fe_m = EncoderParams<T>::make(rng);
        m.fe_p = EncoderParams<T>::make(rng);
        m.head_m = ClassifierParams<T>::make(kFeatureWidth, kClasses, rng);
        m.head_p = ClassifierParams<T>::make(kFeatureWidth, kClasses, rng);
        m.shared_pfe = PfeParams<T>::make(rng);
        m.shared_afe = AfeParams<T>::make(rng);
        m.ff = FFParams<T>::make(kStage1Channels, rng);
        m.lpr_m = LprParams<T>::make(kPrototypes, kStage1Channels, rng);
        m.lpr_p = LprParams<T>::make(kPrototypes, kStage1Channels, rng);
        m.classifier = ClassifierParams<T>::make(3 * kFeatureWidth, kClasses, rng);
        return m;
    }

    std::vector<Tensor<T>*> specific_params() {
        std::vector<Tensor<T>*> r;
        for (auto* t : fe_m.params()) r.push_back(t);
        for (auto* t : fe_p.params()) r.push_back(t);
        for (auto* t : head_m.params()) r.push_back(t);
        for (auto* t : head_p.params()) r.push_back(t);
        return r;
    }

    std::vector<Tensor<T>*> fusion_params() {
        std::vector<Tensor<T>*> r;
        for (auto* t : shared_pfe.params()) r.push_back(t);
        for (auto* t : shared_afe.params()) r.push_back(t);
        for (auto* t : ff.params()) r.push_back(t);
        for (auto* t : lpr_m.params()) r.push_back(t);
        for (auto* t : lpr_p.params()) r.push_back(t);
        for (auto* t : classifier.params()) r.push_back(t);
        return r;
    }

    std::vector<Tensor<T>*> all_params() {
        auto r = specific_params();
        for (auto* t : fusion_params()) r.push_back(t);
        return r;
    }

    void set_specific_trainable(bool on) {
        for (auto* t : specific_params()) t->set_requires_grad(on);
    }

    // Stable name -> tensor table for checkpoints.
    std::vector<std::pair<std::string, Tensor<T>*>> named_params() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        auto add_conv = [&](const std::string& p, Conv3dParams<T>& c) {
            out.push_back({p + ".w", &c.weight});
            if (c.has_bias()) out.push_back({p + ".b", &c.bias});
        };
        auto add_norm = [&](const std::string& p, NormParams<T>& n) {
            out.push_back({p + ".gamma", &n.gamma});
            out.push_back({p + ".beta", &n.beta});
            if (n.kind == NormKind::batch) {
                out.push_back({p + ".rmean", &n.running_mean});
                out.push_back({p + ".rvar", &n.running_var});
            }
        };
        auto add_block = [&](const std::string& p, ResBasicBlockParams<T>& b) {
            add_conv(p + ".conv1", b.conv1);
            add_norm(p + ".norm1", b.norm1);
            add_conv(p + ".conv2", b.conv2);
            add_norm(p + ".norm2", b.norm2);
            if (b.has_downsample) {
                add_conv(p + ".ds", b.ds_conv);
                add_norm(p + ".dsnorm", b.ds_norm);
            }
        };
        auto add_tca = [&](const std::string& p, TcaParams<T>& t) {
            add_conv(p + ".ca1", t.ca_fc1);
            add_conv(p + ".ca2", t.ca_fc2);
            for (std::size_t b = 0; b < t.sa_branches.size(); ++b)
                for (std::size_t s = 0; s < t.sa_branches[b].strips.size(); ++s)
                    add_conv(p + ".sa" + std::to_string(b) + "_" + std::to_string(s), t.sa_branches[b].strips[s]);
            add_conv(p + ".safuse", t.sa_fuse);
            add_conv(p + ".pa1", t.pa_conv1);
            add_conv(p + ".pa2", t.pa_conv2);
        };
        auto add_encoder = [&](const std::string& p, EncoderParams<T>& e) {
            add_conv(p + ".pfe.conv", e.pfe.conv);
            add_norm(p + ".pfe.norm", e.pfe.norm);
            for (int i = 0; i < 4; ++i) add_block(p + ".afe.b" + std::to_string(i), e.afe.blocks[std::size_t(i)]);
            add_tca(p + ".tca", e.tca);
        };
        auto add_head = [&](const std::string& p, ClassifierParams<T>& c) {
            out.push_back({p + ".w", &c.w});
            out.push_back({p + ".b", &c.b});
        };
        auto add_lpr = [&](const std::string& p, LprParams<T>& l) {
            out.push_back({p + ".R", &l.R});
            out.push_back({p + ".wq", &l.wq});
            out.push_back({p + ".wk", &l.wk});
            out.push_back({p + ".wv", &l.wv});
        };
        add_encoder("fe_m", fe_m);
        add_encoder("fe_p", fe_p);
        add_head("head_m", head_m);
        add_head("head_p", head_p);
        add_conv("shared.pfe.conv", shared_pfe.conv);
        add_norm("shared.pfe.norm", shared_pfe.norm);
        for (int i = 0; i < 4; ++i) add_block("shared.afe.b" + std::to_string(i), shared_afe.blocks[std::size_t(i)]);
        add_conv("ff.conv", ff.conv);
        add_norm("ff.bn", ff.bn);
        add_lpr("lpr_m", lpr_m);
        add_lpr("lpr_p", lpr_p);
        add_head("clf", classifier);
        return out;
    }
};

template <class T>
struct FusionOptions {
    T lambda = T(0.5);
    bool use_tca = true;
    bool use_ccfe = true;
    bool mse_paper_exact = false;
};

template <class T>
struct FusionOutput {
    Tensor<T> logits;
    Tensor<T> l_total, l_consi, l_mse, l_c;
};

// Precomputed SF_m / SF_p rows for a batch ([N x 128] each), valid while the
// specific extractors stay frozen.
template <class T>
struct SpecificFeatures {
    Tensor<T> sf_m, sf_p;
};

// Single-modality phase-A pass: specific extractor plus its own head.
template <class T>
Tensor<T> specific_logits(ModelParams<T>& model, bool mri_branch, const Tensor<T>& x, bool use_tca,
                          bool training = false, GradTape<T>* tape = nullptr) {
    auto& enc = mri_branch ? model.fe_m : model.fe_p;
    auto& head = mri_branch ? model.head_m : model.head_p;
    return classify(fe_forward(x, enc, tape, use_tca, training), head, tape);
}

// Full fusion pass: shared stage-1 on both modalities, CCFE enhancement and
// losses, shared stage-2, specific features, joint classification. The
// shared feature is the mean of the two pooled stage-2 outputs.
template <class T>
FusionOutput<T> fusion_forward(ModelParams<T>& model, const Tensor<T>& mri, const Tensor<T>& pet,
                               const std::vector<int>& labels, const FusionOptions<T>& opt, bool training,
                               GradTape<T>* tape = nullptr, const SpecificFeatures<T>* precomputed = nullptr) {
    auto f_m = shared_forward_stage1(mri, model.shared_pfe, tape);
    auto f_p = shared_forward_stage1(pet, model.shared_pfe, tape);

    FusionOutput<T> out;
    Tensor<T> enhanced_m = f_m, enhanced_p = f_p;
    if (opt.use_ccfe) {
        auto f1 = ff_fuse(f_m, f_p, model.ff, training, tape);
        enhanced_m = lpr_enhance(f_m, model.lpr_p, tape);
        enhanced_p = lpr_enhance(f_p, model.lpr_m, tape);
        out.l_consi = consistency_loss(model.lpr_m, model.lpr_p, f1, tape);
        out.l_mse = mse_alignment_loss(enhanced_m, enhanced_p, opt.mse_paper_exact, tape);
    } else {
        out.l_consi = Tensor<T>::scalar(T(0));
        out.l_mse = Tensor<T>::scalar(T(0));
    }

    auto pool_stage2 = [&](const Tensor<T>& f) {
        auto deep = afe_forward(f, model.shared_afe, training, tape);
        auto pooled = global_pool(deep, PoolKind::avg, tape);
        return reshape(pooled, {pooled.shape[0], pooled.shape[1]}, tape);
    };
    auto f_sh = scale(add(pool_stage2(enhanced_m), pool_stage2(enhanced_p), tape), T(0.5), tape);

    // Frozen specific extractors keep their running statistics fixed and run
    // in eval mode even while the fusion stack trains.
    Tensor<T> sf_m, sf_p;
    if (precomputed) {
        sf_m = precomputed->sf_m;
        sf_p = precomputed->sf_p;
    } else {
        const bool specific_training = training && model.fe_m.pfe.conv.weight.requires_grad;
        sf_m = fe_forward(mri, model.fe_m, tape, opt.use_tca, specific_training);
        sf_p = fe_forward(pet, model.fe_p, tape, opt.use_tca, specific_training);
    }

    out.logits = classify(joint_fuse(f_sh, sf_m, sf_p, tape), model.classifier, tape);
    if (!labels.empty()) {
        out.l_c = cross_entropy_logits(out.logits, labels, tape);
        out.l_total = total_loss(out.l_consi, out.l_mse, out.l_c, opt.lambda, tape);
    }
    return out;
}

}  // namespace camf
