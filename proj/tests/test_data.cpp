#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "punet/data.hpp"

using namespace punet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("punet_test_" + tag);
    fs::remove_all(p);
    return p;
}

data::ViewRecord identity_record(int fov, double orow, double ocol) {
    data::ViewRecord r;
    r.fov = fov;
    r.tr = orow;
    r.tc = ocol;
    return r;
}

}  // namespace

TEST_CASE("dataset generation is deterministic in the seed", "[data]") {
    auto spec = data::PhantomSpec::defaults();
    spec.subjects = 3;
    spec.slices_per_subject = 2;
    auto a = data::generate_dataset(spec, 11);
    auto b = data::generate_dataset(spec, 11);
    auto c = data::generate_dataset(spec, 12);
    REQUIRE(a.slices.size() == 6);
    for (std::size_t i = 0; i < a.slices.size(); ++i) {
        CHECK(max_abs_diff(a.slices[i].image, b.slices[i].image) == 0.0);
        CHECK(max_abs_diff(a.slices[i].mask, b.slices[i].mask) == 0.0);
    }
    double diff = 0.0;
    for (std::size_t i = 0; i < a.slices.size(); ++i)
        diff = std::max(diff, max_abs_diff(a.slices[i].image, c.slices[i].image));
    CHECK(diff > 1e-3);
}

TEST_CASE("subject split is 70/10/20 and disjoint", "[data]") {
    auto spec = data::PhantomSpec::defaults();
    auto ds = data::generate_dataset(spec, 5);
    std::map<data::Split, int> counts;
    for (auto sp : ds.subject_split) counts[sp]++;
    CHECK(counts[data::Split::train] == 14);
    CHECK(counts[data::Split::val] == 2);
    CHECK(counts[data::Split::test] == 4);

    // every slice lands in exactly the split of its subject
    std::set<int> train_subj, test_subj;
    for (const auto* s : ds.split(data::Split::train)) train_subj.insert(s->subject);
    for (const auto* s : ds.split(data::Split::test)) test_subj.insert(s->subject);
    for (int s : train_subj) CHECK(test_subj.count(s) == 0);
    CHECK(ds.split(data::Split::train).size() == 14u * 6u);
}

TEST_CASE("rendered slices contain every class with plausible intensities", "[data]") {
    auto spec = data::PhantomSpec::defaults();
    spec.subjects = 4;
    spec.slices_per_subject = 3;
    auto ds = data::generate_dataset(spec, 211);
    CHECK(ds.class_ids("A") == std::vector<int>{1, 2});
    CHECK(ds.class_ids("B") == std::vector<int>{3, 4});

    for (const auto& s : ds.slices) {
        REQUIRE(s.image.all_finite());
        std::map<int, std::pair<double, int>> sums;  // class -> (sum, count)
        for (std::int64_t i = 0; i < s.mask.numel(); ++i) {
            int cls = static_cast<int>(s.mask.data[static_cast<std::size_t>(i)]);
            REQUIRE(cls >= 0);
            REQUIRE(cls <= static_cast<int>(spec.classes.size()));
            auto& acc = sums[cls];
            acc.first += s.image.data[static_cast<std::size_t>(i)];
            acc.second += 1;
        }
        for (std::size_t c = 1; c <= spec.classes.size(); ++c) {
            INFO("class " << c << " subject " << s.subject << " slice " << s.index);
            REQUIRE(sums.count(static_cast<int>(c)) == 1);
            CHECK(sums[static_cast<int>(c)].second > 30);
            const auto& cs = spec.classes[c - 1];
            double mean = sums[static_cast<int>(c)].first / sums[static_cast<int>(c)].second;
            CHECK(mean > cs.intensity_lo - 0.1);
            CHECK(mean < cs.intensity_hi + 0.1);
        }
        // background stays well below the dimmest structure
        double bg_mean = sums[0].first / sums[0].second;
        CHECK(bg_mean < 0.25);
    }
}

TEST_CASE("ring and bright ellipse share an intensity band", "[data]") {
    auto spec = data::PhantomSpec::defaults();
    CHECK(spec.classes[0].intensity_lo == spec.classes[2].intensity_lo);
    CHECK(spec.classes[0].intensity_hi == spec.classes[2].intensity_hi);
    CHECK(spec.classes[0].group == "A");
    CHECK(spec.classes[2].group == "B");
}

TEST_CASE("container round trip preserves bytes and detects corruption", "[data]") {
    auto spec = data::PhantomSpec::defaults();
    spec.subjects = 2;
    spec.slices_per_subject = 2;
    auto ds = data::generate_dataset(spec, 77);
    auto dir = temp_dir("container");
    data::write_dataset(dir.string(), ds);

    auto back = data::load_dataset(dir.string());
    REQUIRE(back.slices.size() == ds.slices.size());
    CHECK(back.seed == 77ull);
    for (std::size_t i = 0; i < ds.slices.size(); ++i) {
        // image went through float32, so compare at float precision
        CHECK(max_abs_diff(ds.slices[i].image, back.slices[i].image) < 1e-6);
        CHECK(max_abs_diff(ds.slices[i].mask, back.slices[i].mask) == 0.0);
        CHECK(back.slices[i].subject == ds.slices[i].subject);
    }
    CHECK(back.subject_split == ds.subject_split);

    // flip one byte in a slice payload: the checksum must catch it
    fs::path victim = dir / "s000_00.bin";
    std::fstream f(victim, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(100);
    char b;
    f.seekg(100);
    f.get(b);
    f.seekp(100);
    f.put(static_cast<char>(b ^ 0x40));
    f.close();
    CHECK_THROWS_AS(data::load_dataset(dir.string()), io_error);
    fs::remove_all(dir);
}

TEST_CASE("slice payload encodes float32 little-endian then uint8 labels", "[data]") {
    data::Slice s;
    s.subject = 0;
    s.index = 0;
    s.image = Tensor::from({1, 2}, {1.0, -2.5});
    s.mask = Tensor::from({1, 2}, {0.0, 3.0});
    auto dir = temp_dir("endian");
    data::Dataset ds;
    ds.spec = data::PhantomSpec::defaults();
    ds.spec.image_size = 1;  // not used by encode path below
    ds.spec.subjects = 1;
    ds.spec.slices_per_subject = 1;
    ds.subject_split = {data::Split::train};
    ds.slices.push_back(s);
    data::write_dataset(dir.string(), ds);

    std::ifstream f(dir / "s000_00.bin", std::ios::binary);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    REQUIRE(bytes.size() == 10);  // 2 * 4 image bytes + 2 mask bytes
    // 1.0f = 0x3f800000, -2.5f = 0xc0200000, both little-endian
    std::vector<unsigned char> golden = {0x00, 0x00, 0x80, 0x3f, 0x00, 0x00,
                                         0x20, 0xc0, 0x00, 0x03};
    CHECK(bytes == golden);
    fs::remove_all(dir);
}

TEST_CASE("identity view reproduces the crop exactly", "[data]") {
    auto spec = data::PhantomSpec::defaults();
    spec.subjects = 1;
    spec.slices_per_subject = 1;
    auto ds = data::generate_dataset(spec, 3);
    const auto& s = ds.slices[0];

    auto v = data::apply_view(s, identity_record(32, 8, 12));
    for (int i = 0; i < 32; ++i)
        for (int j = 0; j < 32; ++j) {
            REQUIRE(v.image.at2(i, j) == Catch::Approx(s.image.at2(8 + i, 12 + j)).margin(1e-12));
            REQUIRE(v.mask.at2(i, j) == s.mask.at2(8 + i, 12 + j));
            REQUIRE(v.grid.data[(static_cast<std::int64_t>(i) * 32 + j) * 2] == 8.0 + i);
            REQUIRE(v.grid.data[(static_cast<std::int64_t>(i) * 32 + j) * 2 + 1] == 12.0 + j);
        }
}

TEST_CASE("view grid reports true source positions under affine warps", "[data]") {
    // blank slice with four bright dots; after warping, the brightest view
    // pixel near each dot must carry a grid entry within a pixel of the dot
    data::Slice s;
    s.subject = 0;
    s.index = 0;
    s.image = Tensor({96, 96});
    s.mask = Tensor({96, 96});
    std::vector<std::pair<int, int>> dots = {{34, 34}, {34, 58}, {58, 34}, {58, 58}};
    for (auto [r, c] : dots) s.image.at2(r, c) = 10.0;

    Rng rng(99);
    for (int trial = 0; trial < 6; ++trial) {
        data::CropRange range{14, 18, 14, 18};
        auto rec = data::sample_view(rng, 64, range, false);
        rec.gamma_exp = 1.0;  // keep dot magnitudes comparable
        rec.intensity_scale = 1.0;
        rec.intensity_shift = 0.0;
        auto v = data::apply_view(s, rec);

        for (auto [r, c] : dots) {
            double best = -1;
            int bi = -1, bj = -1;
            for (int i = 0; i < 64; ++i)
                for (int j = 0; j < 64; ++j) {
                    double gr = v.grid.data[(static_cast<std::int64_t>(i) * 64 + j) * 2];
                    double gc = v.grid.data[(static_cast<std::int64_t>(i) * 64 + j) * 2 + 1];
                    if (std::hypot(gr - r, gc - c) < 2.0 && v.image.at2(i, j) > best) {
                        best = v.image.at2(i, j);
                        bi = i;
                        bj = j;
                    }
                }
            INFO("trial " << trial << " dot " << r << "," << c);
            REQUIRE(bi >= 0);
            // dot energy must actually appear there (bilinear spreads it)
            CHECK(best > 1.0);
            double gr = v.grid.data[(static_cast<std::int64_t>(bi) * 64 + bj) * 2];
            double gc = v.grid.data[(static_cast<std::int64_t>(bi) * 64 + bj) * 2 + 1];
            CHECK(std::hypot(gr - r, gc - c) < 1.0);
        }
    }
}

TEST_CASE("weak views stay inside the slice and keep labels valid", "[data]") {
    auto spec = data::PhantomSpec::defaults();
    spec.subjects = 1;
    spec.slices_per_subject = 1;
    auto ds = data::generate_dataset(spec, 8);
    Rng rng(5);
    for (int t = 0; t < 8; ++t) {
        auto v = data::augment_weak(ds.slices[0], 64, rng);
        CHECK(v.rec.block == 0);
        CHECK(v.image.all_finite());
        for (double m : v.mask.data) {
            int cls = static_cast<int>(m);
            CHECK(cls >= 0);
            CHECK(cls <= 4);
            CHECK(m == static_cast<double>(cls));
        }
        // translation stays within the slack the affine terms allow
        CHECK(v.rec.tr >= -20.0);
        CHECK(v.rec.tc >= -20.0);
    }
}

TEST_CASE("strong views corrupt within the masked fraction band", "[data]") {
    auto spec = data::PhantomSpec::defaults();
    spec.subjects = 1;
    spec.slices_per_subject = 1;
    auto ds = data::generate_dataset(spec, 8);
    Rng rng(17);
    for (int t = 0; t < 10; ++t) {
        data::CropRange range{0, 32, 0, 32};
        auto v = data::augment_strong(ds.slices[0], 64, rng, range);
        REQUIRE(v.rec.block == 8);
        CHECK(v.rec.masked_fraction >= 0.1);
        CHECK(v.rec.masked_fraction <= 0.4);
        std::size_t touched = v.rec.dropped_blocks.size() + 2 * v.rec.shuffled_pairs.size();
        int n_blocks = (64 / 8) * (64 / 8);
        CHECK(touched >= 1u);
        CHECK(static_cast<double>(touched) <= 0.4 * n_blocks + 1.0);

        // dropped blocks are exactly zero
        for (int id : v.rec.dropped_blocks) {
            int by = (id / 8) * 8, bx = (id % 8) * 8;
            for (int i = 0; i < 8; ++i)
                for (int j = 0; j < 8; ++j) CHECK(v.image.at2(by + i, bx + j) == 0.0);
        }

        // shuffling preserves the multiset of pixels: rebuild the uncorrupted
        // view and compare sorted values outside dropped blocks
        auto clean_rec = v.rec;
        clean_rec.block = 0;
        clean_rec.dropped_blocks.clear();
        clean_rec.shuffled_pairs.clear();
        auto clean = data::apply_view(ds.slices[0], clean_rec);
        std::vector<double> got, want;
        auto in_dropped = [&](int i, int j) {
            for (int id : v.rec.dropped_blocks)
                if (i / 8 == id / 8 && j / 8 == id % 8) return true;
            return false;
        };
        for (int i = 0; i < 64; ++i)
            for (int j = 0; j < 64; ++j)
                if (!in_dropped(i, j)) {
                    got.push_back(v.image.at2(i, j));
                    want.push_back(clean.image.at2(i, j));
                }
        std::sort(got.begin(), got.end());
        std::sort(want.begin(), want.end());
        REQUIRE(got.size() == want.size());
        double md = 0;
        for (std::size_t i = 0; i < got.size(); ++i) md = std::max(md, std::fabs(got[i] - want[i]));
        CHECK(md == 0.0);

        // corruption never moves the grid or labels
        CHECK(max_abs_diff(v.grid, clean.grid) == 0.0);
        CHECK(max_abs_diff(v.mask, clean.mask) == 0.0);
    }
}

TEST_CASE("augmentation draws are reproducible per stream", "[data]") {
    auto spec = data::PhantomSpec::defaults();
    spec.subjects = 1;
    spec.slices_per_subject = 1;
    auto ds = data::generate_dataset(spec, 8);
    Rng a(123), b(123);
    auto va = data::augment_weak(ds.slices[0], 48, a);
    auto vb = data::augment_weak(ds.slices[0], 48, b);
    CHECK(max_abs_diff(va.image, vb.image) == 0.0);
    CHECK(va.rec.a11 == vb.rec.a11);
    CHECK(va.rec.gamma_exp == vb.rec.gamma_exp);
}

TEST_CASE("oversized views are rejected", "[data]") {
    auto spec = data::PhantomSpec::defaults();
    spec.subjects = 1;
    spec.slices_per_subject = 1;
    auto ds = data::generate_dataset(spec, 8);
    Rng rng(1);
    CHECK_THROWS_AS(data::augment_weak(ds.slices[0], 128, rng), validation_error);
}
