#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "camf/nifti.hpp"
#include "camf/random.hpp"
#include "camf/tensor.hpp"

namespace camf {

// One subject's co-registered pair. Volumes are [1 x S x S x S].
template <class T>
struct VolumePair {
    std::string subject_id;
    Tensor<T> mri;
    Tensor<T> pet;
    int label = 0;
};

// Synthetic phantom knobs. Class 1 shrinks the bright MRI blob by
// atrophy_radius_delta voxels and dims the PET hotspot by
// hypometabolism_delta relative to its background, so the class signal is
// structural / relative and survives per-volume z-scoring.
struct SynthConfig {
    int n_subjects = 120;
    int volume_size = 32;
    double atrophy_radius_delta = 2.0;
    double hypometabolism_delta = 0.6;
    double noise_sigma = 0.05;
    std::uint64_t seed = 7;
};

// Trilinear resize, align-corners-false, edge clamped.
template <class T>
Tensor<T> resize_volume(const Tensor<T>& x, int target) {
    if (x.rank() != 4 || x.shape[0] != 1)
        throw std::invalid_argument("resize_volume expects [1xDxHxW], got " + shape_str(x.shape));
    const long D = long(x.shape[1]), H = long(x.shape[2]), W = long(x.shape[3]);
    const long S = target;
    if (D == S && H == S && W == S) return x.clone();
    Tensor<T> out = Tensor<T>::zeros({1, std::size_t(S), std::size_t(S), std::size_t(S)});
    auto src = [&](long d, long h, long w) { return double(x.data()[(d * H + h) * W + w]); };
    auto clampf = [](double v, long n) { return std::min(std::max(v, 0.0), double(n - 1)); };
    for (long d = 0; d < S; ++d)
        for (long h = 0; h < S; ++h)
            for (long w = 0; w < S; ++w) {
                const double sd = clampf((d + 0.5) * double(D) / double(S) - 0.5, D);
                const double sh = clampf((h + 0.5) * double(H) / double(S) - 0.5, H);
                const double sw = clampf((w + 0.5) * double(W) / double(S) - 0.5, W);
                const long d0 = long(sd), h0 = long(sh), w0 = long(sw);
                const long d1 = std::min(d0 + 1, D - 1), h1 = std::min(h0 + 1, H - 1),
                           w1 = std::min(w0 + 1, W - 1);
                const double fd = sd - double(d0), fh = sh - double(h0), fw = sw - double(w0);
                const double c00 = src(d0, h0, w0) * (1 - fw) + src(d0, h0, w1) * fw;
                const double c01 = src(d0, h1, w0) * (1 - fw) + src(d0, h1, w1) * fw;
                const double c10 = src(d1, h0, w0) * (1 - fw) + src(d1, h0, w1) * fw;
                const double c11 = src(d1, h1, w0) * (1 - fw) + src(d1, h1, w1) * fw;
                const double c0 = c00 * (1 - fh) + c01 * fh;
                const double c1 = c10 * (1 - fh) + c11 * fh;
                out.data()[(d * S + h) * S + w] = T(c0 * (1 - fd) + c1 * fd);
            }
    return out;
}

// Per-volume z-score; constant volumes map to zero.
template <class T>
Tensor<T> normalize_volume(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    double mean = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) mean += double(x.data()[i]);
    mean /= double(x.numel());
    double var = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        double d = double(x.data()[i]) - mean;
        var += d * d;
    }
    var /= double(x.numel());
    const double inv = 1.0 / std::sqrt(var + 1e-8);
    for (std::size_t i = 0; i < x.numel(); ++i) out.data()[i] = T((double(x.data()[i]) - mean) * inv);
    return out;
}

namespace phantom {

// soft sphere membership: 1 inside, 0 outside, ~1.5-voxel shoulder
inline double soft_ball(double dist, double radius) {
    double t = (radius - dist) / 1.5 + 0.5;
    return std::min(std::max(t, 0.0), 1.0);
}

}  // namespace phantom

// Deterministic two-class phantom cohort: a centred ellipsoid "brain" with a
// bright inner blob in MRI and a smooth metabolic field with a hotspot in
// PET. Labels alternate, so cohorts are balanced.
template <class T>
std::vector<VolumePair<T>> synth_generate(const SynthConfig& cfg) {
    if (cfg.n_subjects <= 0) throw std::invalid_argument("synth_generate: n_subjects must be positive");
    if (cfg.volume_size < 16) throw std::invalid_argument("synth_generate: volume_size must be at least 16");
    if (cfg.atrophy_radius_delta < 0 || cfg.hypometabolism_delta < 0 || cfg.noise_sigma < 0)
        throw std::invalid_argument("synth_generate: effect sizes and noise must be non-negative");

    const double S = double(cfg.volume_size);
    const double blob_radius = 0.16 * S;
    if (blob_radius - cfg.atrophy_radius_delta <= 0.75)
        throw std::invalid_argument("synth_generate: atrophy_radius_delta erases the blob");
    if (cfg.hypometabolism_delta >= 1.0)
        throw std::invalid_argument("synth_generate: hypometabolism_delta erases the hotspot");

    Rng root(cfg.seed);
    std::vector<VolumePair<T>> subjects;
    subjects.reserve(std::size_t(cfg.n_subjects));
    const double cx = (S - 1.0) / 2.0;

    for (int i = 0; i < cfg.n_subjects; ++i) {
        Rng rng = root.fork(std::uint64_t(i));
        const int label = i % 2;

        const double jx = rng.uniform(-0.8, 0.8), jy = rng.uniform(-0.8, 0.8), jz = rng.uniform(-0.8, 0.8);
        const double r_jitter = rng.uniform(-0.25, 0.25);
        const double bx = cx + 0.12 * S + jx, by = cx + jy, bz = cx + jz;
        const double r_mri = blob_radius + r_jitter - (label == 1 ? cfg.atrophy_radius_delta : 0.0);
        const double hotspot_gain = label == 1 ? 1.0 - cfg.hypometabolism_delta : 1.0;

        VolumePair<T> vp;
        std::ostringstream id;
        id << "s" << std::setw(4) << std::setfill('0') << i;
        vp.subject_id = id.str();
        vp.label = label;
        vp.mri = Tensor<T>::zeros({1, std::size_t(cfg.volume_size), std::size_t(cfg.volume_size),
                                   std::size_t(cfg.volume_size)});
        vp.pet = Tensor<T>::zeros(vp.mri.shape);

        const double ax = 0.42 * S, ay = 0.38 * S, az = 0.40 * S;
        std::size_t idx = 0;
        for (int d = 0; d < cfg.volume_size; ++d)
            for (int h = 0; h < cfg.volume_size; ++h)
                for (int w = 0; w < cfg.volume_size; ++w, ++idx) {
                    const double dz = (d - cx) / az, dy = (h - cx) / ay, dx = (w - cx) / ax;
                    const double ell = std::sqrt(dz * dz + dy * dy + dx * dx);
                    const double brain = phantom::soft_ball(ell * 0.4 * S, 0.4 * S);
                    const double bd = std::sqrt((d - bz) * (d - bz) + (h - by) * (h - by) + (w - bx) * (w - bx));

                    const double mri_v = brain * (1.0 + 1.2 * phantom::soft_ball(bd, r_mri)) +
                                         cfg.noise_sigma * rng.normal();
                    const double metab = brain * (0.8 + 0.3 * std::cos(ell * 2.2));
                    const double pet_v = metab + hotspot_gain * phantom::soft_ball(bd, blob_radius) +
                                         cfg.noise_sigma * rng.normal();
                    vp.mri.data()[idx] = T(mri_v);
                    vp.pet.data()[idx] = T(pet_v);
                }
        subjects.push_back(std::move(vp));
    }
    return subjects;
}

// Stratified k-fold plan over subject ids.
struct FoldPlan {
    int k = 10;
    std::map<std::string, int> assignments;

    int fold_of(const std::string& id) const {
        auto it = assignments.find(id);
        if (it == assignments.end()) throw std::invalid_argument("fold plan does not cover subject '" + id + "'");
        return it->second;
    }
};

// Deal each class round-robin, carrying the fold cursor across classes so
// fold sizes stay within one subject of each other.
inline FoldPlan make_folds(const std::vector<std::pair<std::string, int>>& subjects, int k, std::uint64_t seed) {
    if (k < 2) throw std::invalid_argument("make_folds: k must be at least 2");
    if (int(subjects.size()) < k) throw std::invalid_argument("make_folds: fewer subjects than folds");
    FoldPlan plan;
    plan.k = k;
    std::map<int, std::vector<std::string>> by_class;
    for (const auto& [id, label] : subjects) {
        if (plan.assignments.count(id)) throw std::invalid_argument("make_folds: duplicate subject '" + id + "'");
        plan.assignments[id] = -1;
        by_class[label].push_back(id);
    }
    Rng rng(seed);
    int cursor = 0;
    for (auto& [label, ids] : by_class) {
        shuffle(ids, rng);
        for (const auto& id : ids) {
            plan.assignments[id] = cursor;
            cursor = (cursor + 1) % k;
        }
    }
    return plan;
}

// ---------------------------------------------------------------------------
// manifest + on-disk dataset
// ---------------------------------------------------------------------------

struct ManifestEntry {
    std::string subject_id;
    std::string mri_path;
    std::string pet_path;
    int label = 0;
};

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot create manifest '" + path + "'");
    for (const auto& e : entries)
        out << e.subject_id << '\t' << e.mri_path << '\t' << e.pet_path << '\t' << e.label << '\n';
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest '" + path + "'");
    std::vector<ManifestEntry> entries;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ss(line);
        ManifestEntry e;
        std::string label;
        if (!std::getline(ss, e.subject_id, '\t') || !std::getline(ss, e.mri_path, '\t') ||
            !std::getline(ss, e.pet_path, '\t') || !std::getline(ss, label))
            throw std::runtime_error("manifest '" + path + "' line " + std::to_string(line_no) +
                                     ": expected subject_id<TAB>mri_path<TAB>pet_path<TAB>label");
        e.label = std::stoi(label);
        entries.push_back(std::move(e));
    }
    return entries;
}

// Emit one .nii pair per subject plus manifest.tsv; returns the manifest path.
template <class T>
std::string write_synth_dataset(const SynthConfig& cfg, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    auto subjects = synth_generate<T>(cfg);
    std::vector<ManifestEntry> entries;
    for (const auto& s : subjects) {
        ManifestEntry e;
        e.subject_id = s.subject_id;
        e.mri_path = s.subject_id + "_mri.nii";
        e.pet_path = s.subject_id + "_pet.nii";
        e.label = s.label;
        write_nifti((fs::path(out_dir) / e.mri_path).string(), s.mri);
        write_nifti((fs::path(out_dir) / e.pet_path).string(), s.pet);
        entries.push_back(std::move(e));
    }
    const std::string manifest = (fs::path(out_dir) / "manifest.tsv").string();
    write_manifest(manifest, entries);
    return manifest;
}

// Load, resize to the working extent, z-score. Relative manifest paths are
// resolved against the manifest's directory.
template <class T>
std::vector<VolumePair<T>> load_dataset(const std::string& manifest_path, int volume_size) {
    namespace fs = std::filesystem;
    const fs::path base = fs::path(manifest_path).parent_path();
    auto resolve = [&](const std::string& p) {
        fs::path fp(p);
        return fp.is_absolute() ? fp.string() : (base / fp).string();
    };
    std::vector<VolumePair<T>> out;
    for (const auto& e : read_manifest(manifest_path)) {
        VolumePair<T> vp;
        vp.subject_id = e.subject_id;
        vp.label = e.label;
        vp.mri = normalize_volume(resize_volume(read_nifti<T>(resolve(e.mri_path)).data, volume_size));
        vp.pet = normalize_volume(resize_volume(read_nifti<T>(resolve(e.pet_path)).data, volume_size));
        if (vp.mri.shape != vp.pet.shape)
            throw std::runtime_error("subject '" + e.subject_id + "': mri and pet shapes disagree");
        out.push_back(std::move(vp));
    }
    return out;
}

// In-memory variant of the load pipeline for already-generated cohorts.
template <class T>
void normalize_pairs(std::vector<VolumePair<T>>& subjects) {
    for (auto& s : subjects) {
        s.mri = normalize_volume(s.mri);
        s.pet = normalize_volume(s.pet);
    }
}

}  // namespace camf
