#include <catch2/catch.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "camf/data.hpp"
#include "helpers.hpp"
#include "nifti_golden.hpp"
#include "oracles.hpp"

using namespace camf;
using F = Tensor<float>;
namespace fs = std::filesystem;

namespace {

using golden::golden_bytes;
using golden::GoldenSpec;

std::string write_bytes(const std::string& name, const std::vector<unsigned char>& b) {
    return golden::write_bytes((fs::temp_directory_path() / "camf_data_tests").string(), name, b);
}

// best single-threshold accuracy over a scalar feature (either direction)
double best_threshold_accuracy(const std::vector<double>& feat, const std::vector<int>& labels) {
    double best = 0;
    for (double cut : feat) {
        int right_lo = 0, right_hi = 0;
        for (std::size_t i = 0; i < feat.size(); ++i) {
            const bool above = feat[i] > cut;
            right_lo += (above == (labels[i] == 0)) ? 1 : 0;
            right_hi += (above == (labels[i] == 1)) ? 1 : 0;
        }
        best = std::max({best, double(right_lo) / feat.size(), double(right_hi) / feat.size()});
    }
    return best;
}

// mean intensity inside the nominal blob sphere
template <class T>
double blob_mean(const Tensor<T>& vol, double frac_offset = 0.12, double frac_radius = 0.16) {
    const long S = long(vol.shape[1]);
    const double c = (S - 1.0) / 2.0;
    const double bx = c + frac_offset * S;
    const double r = frac_radius * S;
    double acc = 0;
    long cnt = 0;
    for (long d = 0; d < S; ++d)
        for (long h = 0; h < S; ++h)
            for (long w = 0; w < S; ++w) {
                const double dist = std::sqrt((d - c) * (d - c) + (h - c) * (h - c) + (w - bx) * (w - bx));
                if (dist <= r) {
                    acc += double(vol.data()[(d * S + h) * S + w]);
                    ++cnt;
                }
            }
    return acc / double(cnt);
}

}  // namespace

TEST_CASE("nifti float32 golden parses verbatim") {
    std::vector<double> vox{0, 1, 2, 3, 4, 5, 6, 7};
    auto path = write_bytes("gold_f32.nii", golden_bytes(GoldenSpec{}, vox));
    auto vol = read_nifti<float>(path);
    REQUIRE(vol.data.shape == Shape{1, 2, 2, 2});
    for (int i = 0; i < 8; ++i) CHECK(vol.data.data()[i] == float(vox[i]));
    CHECK(vol.voxel.x == 1.5f);
    CHECK(vol.voxel.y == 2.0f);
    CHECK(vol.voxel.z == 2.5f);
}

TEST_CASE("nifti slope and intercept round-trip the affine") {
    // value v stored as (v-1)/2 with slope 2, inter 1
    std::vector<double> want{3, 5, 7, 9, 11, 13, 15, 17};
    std::vector<double> stored;
    for (double v : want) stored.push_back((v - 1) / 2);
    GoldenSpec g;
    g.scl_slope = 2.0f;
    g.scl_inter = 1.0f;
    auto path = write_bytes("gold_slope.nii", golden_bytes(g, stored));
    auto vol = read_nifti<float>(path);
    for (int i = 0; i < 8; ++i) CHECK(vol.data.data()[i] == Approx(want[i]));
}

TEST_CASE("nifti int16 and uint8 payloads") {
    GoldenSpec g16;
    g16.datatype = 4;
    g16.bitpix = 16;
    auto p16 = write_bytes("gold_i16.nii", golden_bytes(g16, {-3, -2, -1, 0, 1, 2, 3, 4}));
    auto v16 = read_nifti<float>(p16);
    CHECK(v16.data.data()[0] == -3.0f);
    CHECK(v16.data.data()[7] == 4.0f);

    GoldenSpec g8;
    g8.datatype = 2;
    g8.bitpix = 8;
    auto p8 = write_bytes("gold_u8.nii", golden_bytes(g8, {0, 10, 20, 30, 40, 50, 60, 255}));
    auto v8 = read_nifti<float>(p8);
    CHECK(v8.data.data()[7] == 255.0f);
}

TEST_CASE("nifti big-endian detection via sizeof_hdr byte order") {
    GoldenSpec g;
    g.byteswap = true;
    g.datatype = 4;
    g.bitpix = 16;
    auto path = write_bytes("gold_be.nii", golden_bytes(g, {7, -7, 100, -100, 0, 1, 2, 3}));
    auto vol = read_nifti<float>(path);
    CHECK(vol.data.data()[0] == 7.0f);
    CHECK(vol.data.data()[3] == -100.0f);
    CHECK(vol.voxel.x == 1.5f);
}

TEST_CASE("nifti rejects bad magic, unsupported datatype, truncation distinctly") {
    GoldenSpec bad;
    bad.magic = "xxx";
    auto p1 = write_bytes("gold_badmagic.nii", golden_bytes(bad, std::vector<double>(8, 0)));
    CHECK_THROWS_AS(read_nifti<float>(p1), NiftiFormatError);

    GoldenSpec f64;
    f64.datatype = 64;
    f64.bitpix = 64;
    auto p2 = write_bytes("gold_f64.nii", golden_bytes(f64, {}));
    CHECK_THROWS_AS(read_nifti<float>(p2), NiftiUnsupportedError);

    auto bytes = golden_bytes(GoldenSpec{}, {0, 1, 2, 3, 4, 5, 6, 7});
    bytes.resize(bytes.size() - 8);  // cut two voxels
    auto p3 = write_bytes("gold_trunc.nii", bytes);
    CHECK_THROWS_AS(read_nifti<float>(p3), NiftiTruncatedError);

    GoldenSpec two;
    two.magic = "ni1";
    auto p4 = write_bytes("gold_ni1.nii", golden_bytes(two, std::vector<double>(8, 0)));
    CHECK_THROWS_AS(read_nifti<float>(p4), NiftiUnsupportedError);
}

TEST_CASE("nifti write then read round-trips voxel-exactly") {
    Rng rng(3);
    auto vol = testutil::rand_tensor<float>({1, 3, 4, 5}, rng, -10, 10);
    auto dir = fs::temp_directory_path() / "camf_data_tests";
    fs::create_directories(dir);
    auto path = (dir / "roundtrip.nii").string();
    write_nifti(path, vol, VoxelSize{1.0f, 1.25f, 1.5f});
    auto back = read_nifti<float>(path);
    REQUIRE(back.data.shape == vol.shape);
    for (std::size_t i = 0; i < vol.numel(); ++i) CHECK(back.data.data()[i] == vol.data()[i]);
    CHECK(back.voxel.y == 1.25f);
}

TEST_CASE("resize volume") {
    Rng rng(5);
    auto x = testutil::rand_tensor<float>({1, 3, 3, 3}, rng);
    auto same = resize_volume(x, 3);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(same.data()[i] == x.data()[i]);

    auto c = F::full({1, 2, 2, 2}, 3.25f);
    auto up = resize_volume(c, 5);
    for (std::size_t i = 0; i < up.numel(); ++i) CHECK(up.data()[i] == Approx(3.25f).margin(1e-6));

    std::vector<float> rampv(8);
    for (int i = 0; i < 8; ++i) rampv[i] = float(i);
    auto ramp = F::from({1, 2, 2, 2}, rampv);
    auto out = resize_volume(ramp, 4);
    auto ref = oracle::resize_trilinear(testutil::to_doubles(ramp), 2, 2, 2, 4, 4, 4);
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(double(out.data()[i]) == Approx(ref[i]).margin(1e-5));
}

TEST_CASE("normalize volume") {
    Rng rng(7);
    auto x = testutil::rand_tensor<float>({1, 4, 4, 4}, rng, -3, 9);
    auto z = normalize_volume(x);
    double mean = 0;
    for (std::size_t i = 0; i < z.numel(); ++i) mean += z.data()[i];
    mean /= double(z.numel());
    CHECK(std::abs(mean) < 1e-6);

    auto zz = normalize_volume(z);
    for (std::size_t i = 0; i < z.numel(); ++i) CHECK(zz.data()[i] == Approx(z.data()[i]).margin(1e-6));

    auto c = normalize_volume(F::full({1, 2, 2, 2}, 42.0f));
    for (std::size_t i = 0; i < c.numel(); ++i) CHECK(c.data()[i] == 0.0f);
}

TEST_CASE("synthetic cohort is bit-reproducible under a fixed seed") {
    SynthConfig cfg;
    cfg.n_subjects = 6;
    cfg.volume_size = 16;
    cfg.atrophy_radius_delta = 1.0;
    auto a = synth_generate<float>(cfg);
    auto b = synth_generate<float>(cfg);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].subject_id == b[i].subject_id);
        CHECK(a[i].label == b[i].label);
        CHECK(*a[i].mri.store == *b[i].mri.store);
        CHECK(*a[i].pet.store == *b[i].pet.store);
    }
    int ones = 0;
    for (const auto& s : a) ones += s.label;
    CHECK(ones == 3);
}

TEST_CASE("null effect sizes leave classes indistinguishable") {
    SynthConfig cfg;
    cfg.n_subjects = 100;
    cfg.volume_size = 16;
    cfg.atrophy_radius_delta = 0;
    cfg.hypometabolism_delta = 0;
    cfg.noise_sigma = 0;
    auto subjects = synth_generate<float>(cfg);
    std::vector<double> feat;
    std::vector<int> labels;
    for (const auto& s : subjects) {
        feat.push_back(blob_mean(s.pet));
        labels.push_back(s.label);
    }
    double auc = oracle::auc_pairs(feat, labels);
    CHECK(auc > 0.4);
    CHECK(auc < 0.6);
}

TEST_CASE("strong effect sizes are perfectly separable by a blob-intensity threshold") {
    SynthConfig cfg;
    cfg.n_subjects = 40;
    cfg.volume_size = 16;
    cfg.atrophy_radius_delta = 1.6;
    cfg.hypometabolism_delta = 0.6;
    cfg.noise_sigma = 0;
    auto subjects = synth_generate<float>(cfg);
    std::vector<double> mri_feat, pet_feat;
    std::vector<int> labels;
    for (const auto& s : subjects) {
        mri_feat.push_back(blob_mean(s.mri));
        pet_feat.push_back(blob_mean(s.pet));
        labels.push_back(s.label);
    }
    CHECK(best_threshold_accuracy(mri_feat, labels) == 1.0);
    CHECK(best_threshold_accuracy(pet_feat, labels) == 1.0);
}

TEST_CASE("larger deltas never decrease oracle threshold accuracy") {
    double prev = 0;
    for (double delta : {0.0, 0.8, 1.6}) {
        SynthConfig cfg;
        cfg.n_subjects = 40;
        cfg.volume_size = 16;
        cfg.atrophy_radius_delta = delta;
        cfg.hypometabolism_delta = delta / 4.0;
        cfg.noise_sigma = 0.05;
        auto subjects = synth_generate<float>(cfg);
        std::vector<double> feat;
        std::vector<int> labels;
        for (const auto& s : subjects) {
            feat.push_back(blob_mean(s.mri));
            labels.push_back(s.label);
        }
        double acc = best_threshold_accuracy(feat, labels);
        CHECK(acc >= prev);
        prev = acc;
    }
    CHECK(prev == 1.0);
}

TEST_CASE("oversized deltas are rejected") {
    SynthConfig cfg;
    cfg.volume_size = 16;
    cfg.atrophy_radius_delta = 3.0;  // blob radius at 16 is 2.56 voxels
    CHECK_THROWS_AS(synth_generate<float>(cfg), std::invalid_argument);
    SynthConfig cfg2;
    cfg2.hypometabolism_delta = 1.0;
    CHECK_THROWS_AS(synth_generate<float>(cfg2), std::invalid_argument);
}

TEST_CASE("stratified folds partition and balance") {
    std::vector<std::pair<std::string, int>> subjects;
    for (int i = 0; i < 100; ++i) subjects.push_back({"s" + std::to_string(i), i % 2});
    auto plan = make_folds(subjects, 10, 42);
    std::vector<int> size(10, 0);
    std::vector<int> ones(10, 0);
    for (const auto& [id, label] : subjects) {
        int f = plan.fold_of(id);
        REQUIRE(f >= 0);
        REQUIRE(f < 10);
        ++size[f];
        ones[f] += label;
    }
    for (int f = 0; f < 10; ++f) {
        CHECK(size[f] == 10);
        CHECK(ones[f] == 5);
    }

    // deterministic under the seed
    auto plan2 = make_folds(subjects, 10, 42);
    CHECK(plan.assignments == plan2.assignments);
    auto plan3 = make_folds(subjects, 10, 43);
    CHECK(plan.assignments != plan3.assignments);
}

TEST_CASE("93 subjects spread with fold sizes within one") {
    std::vector<std::pair<std::string, int>> subjects;
    for (int i = 0; i < 93; ++i) subjects.push_back({"s" + std::to_string(i), i < 47 ? 0 : 1});
    auto plan = make_folds(subjects, 10, 9);
    std::vector<int> size(10, 0);
    for (const auto& [id, _] : subjects) ++size[plan.fold_of(id)];
    int lo = *std::min_element(size.begin(), size.end());
    int hi = *std::max_element(size.begin(), size.end());
    CHECK(hi - lo <= 1);

    CHECK_THROWS_AS(make_folds({{"a", 0}}, 2, 1), std::invalid_argument);
    std::vector<std::pair<std::string, int>> dup{{"a", 0}, {"a", 1}, {"b", 0}};
    CHECK_THROWS_AS(make_folds(dup, 2, 1), std::invalid_argument);
}

TEST_CASE("dataset written to disk loads back through the manifest") {
    SynthConfig cfg;
    cfg.n_subjects = 4;
    cfg.volume_size = 16;
    cfg.atrophy_radius_delta = 1.0;
    auto dir = (fs::temp_directory_path() / "camf_synth_out").string();
    fs::remove_all(dir);
    auto manifest = write_synth_dataset<float>(cfg, dir);
    auto entries = read_manifest(manifest);
    REQUIRE(entries.size() == 4);
    CHECK(entries[0].subject_id == "s0000");

    auto loaded = load_dataset<float>(manifest, 16);
    REQUIRE(loaded.size() == 4);
    auto direct = synth_generate<float>(cfg);
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded[i].label == direct[i].label);
        REQUIRE(loaded[i].mri.shape == Shape{1, 16, 16, 16});
        auto expect = normalize_volume(direct[i].mri);
        for (std::size_t v = 0; v < expect.numel(); v += 97)
            CHECK(loaded[i].mri.data()[v] == Approx(expect.data()[v]).margin(1e-5));
    }

    // resize path: load the 16-cube files at working size 20
    auto resized = load_dataset<float>(manifest, 20);
    CHECK(resized[0].mri.shape == Shape{1, 20, 20, 20});
}
