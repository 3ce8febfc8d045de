#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>

#include "normlab/dataset.hpp"
#include "normlab/nn.hpp"
#include "normlab/tape.hpp"

using namespace normlab;
using namespace normlab::data;
namespace fs = std::filesystem;

namespace {

fs::path tmpdir() {
    auto p = fs::temp_directory_path() / "normlab_data_tests";
    fs::create_directories(p);
    return p;
}

Dataset tiny_dataset(int n, int classes, unsigned seed) {
    SyntheticSpec spec;
    spec.class_count = classes;
    spec.samples_per_class = (n + classes - 1) / classes;
    spec.seed = seed;
    Dataset ds = make_synthetic(spec);
    ds.n = n;
    ds.images.resize(static_cast<std::size_t>(n) * Dataset::kImageBytes);
    ds.labels.resize(static_cast<std::size_t>(n));
    return ds;
}

void write_be32(std::ofstream& os, std::uint32_t v) {
    for (int i = 3; i >= 0; --i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

void write_idx_pair(const fs::path& images, const fs::path& labels, int n, unsigned seed) {
    std::mt19937 rng(seed);
    std::uniform_int_distribution<int> pix(0, 255), lab(0, 9);
    std::ofstream io(images, std::ios::binary | std::ios::trunc);
    write_be32(io, 0x00000803u);
    write_be32(io, static_cast<std::uint32_t>(n));
    write_be32(io, 28);
    write_be32(io, 28);
    for (int i = 0; i < n * 784; ++i) io.put(static_cast<char>(pix(rng)));
    std::ofstream lo(labels, std::ios::binary | std::ios::trunc);
    write_be32(lo, 0x00000801u);
    write_be32(lo, static_cast<std::uint32_t>(n));
    for (int i = 0; i < n; ++i) lo.put(static_cast<char>(lab(rng)));
}

}  // namespace

TEST_CASE("cifar file round-trip is byte-identical and byte offsets line up") {
    Dataset ds = tiny_dataset(7, 10, 1);
    auto path = tmpdir() / "toy_c10.bin";
    write_cifar_file(path, ds, CifarVariant::c10);

    Dataset back = load_cifar_file(path, CifarVariant::c10);
    CHECK(back.n == 7);
    CHECK(back.class_count == 10);
    CHECK(back.labels == ds.labels);
    CHECK(back.images == ds.images);

    // independent byte-level reference: record i starts at i*3073, label first
    std::ifstream is(path, std::ios::binary);
    std::vector<std::uint8_t> raw(7 * 3073);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    CHECK(back.labels[0] == raw[0]);
    for (int j = 0; j < 16; ++j) CHECK(back.image(0)[static_cast<std::size_t>(j)] == raw[1 + j]);
    CHECK(back.labels[3] == raw[3 * 3073]);

    // re-serialize: bytes identical
    auto again = tmpdir() / "toy_c10_rt.bin";
    write_cifar_file(again, back, CifarVariant::c10);
    std::ifstream is2(again, std::ios::binary);
    std::vector<std::uint8_t> raw2(7 * 3073);
    is2.read(reinterpret_cast<char*>(raw2.data()), static_cast<std::streamsize>(raw2.size()));
    CHECK(raw == raw2);
}

TEST_CASE("cifar100 records carry the coarse byte and 100 classes") {
    Dataset ds = tiny_dataset(5, 10, 2);
    ds.class_count = 100;
    for (int i = 0; i < 5; ++i) {
        ds.labels[static_cast<std::size_t>(i)] = 90 + i;
        ds.coarse_labels.push_back(static_cast<std::uint8_t>(i));
    }
    auto path = tmpdir() / "toy_c100.bin";
    write_cifar_file(path, ds, CifarVariant::c100);
    Dataset back = load_cifar_file(path, CifarVariant::c100);
    CHECK(back.class_count == 100);
    CHECK(back.labels == ds.labels);
    CHECK(back.coarse_labels == ds.coarse_labels);
    CHECK(back.images == ds.images);
}

TEST_CASE("truncated cifar file reports the byte offset") {
    auto path = tmpdir() / "trunc.bin";
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    for (int i = 0; i < 3073 + 100; ++i) os.put(char(i & 0x7f));
    os.close();
    try {
        load_cifar_file(path, CifarVariant::c10);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("byte offset 3073") != std::string::npos);
    }
}

TEST_CASE("standard cifar10 directory layout loads train and test splits") {
    auto dir = tmpdir() / "cifar10_layout";
    fs::create_directories(dir);
    for (int i = 1; i <= 5; ++i) write_cifar_file(dir / ("data_batch_" + std::to_string(i) + ".bin"), tiny_dataset(4, 10, static_cast<unsigned>(i)), CifarVariant::c10);
    write_cifar_file(dir / "test_batch.bin", tiny_dataset(3, 10, 9), CifarVariant::c10);
    CHECK(load_cifar(dir, CifarVariant::c10, true).n == 20);
    CHECK(load_cifar(dir, CifarVariant::c10, false).n == 3);
    CHECK_THROWS_AS(load_cifar(tmpdir() / "missing_dir", CifarVariant::c10, true), DataError);
}

TEST_CASE("idx loading pads, replicates channels and scales exactly") {
    auto images = tmpdir() / "toy-images-idx3-ubyte";
    auto labels = tmpdir() / "toy-labels-idx1-ubyte";
    write_idx_pair(images, labels, 6, 3);
    Dataset ds = load_idx(images, labels);
    CHECK(ds.n == 6);
    CHECK(ds.class_count == 10);

    std::ifstream is(images, std::ios::binary);
    is.seekg(16);
    std::vector<std::uint8_t> raw(6 * 784);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    // pixel (r,c) of image 0 lands at (r+2, c+2) on every channel
    for (int r : {0, 13, 27})
        for (int c : {0, 9, 27}) {
            std::uint8_t expected = raw[static_cast<std::size_t>(r) * 28 + c];
            for (int ch = 0; ch < 3; ++ch)
                CHECK(ds.image(0)[static_cast<std::size_t>((ch * 32 + r + 2) * 32 + c + 2)] == expected);
        }
    // border stays zero padding
    CHECK(ds.image(0)[0] == 0);
    CHECK(ds.image(0)[31] == 0);

    // float materialization is exactly pixel/255 with unit stats
    std::vector<int> idx{0};
    auto batch = normalize_batch(gather_bytes(ds, idx), 1, {0.f, 0.f, 0.f}, {1.f, 1.f, 1.f});
    CHECK(batch.at(0, 0, 2, 2) == raw[0] / 255.0f);
}

TEST_CASE("idx magic and size mismatches raise format errors") {
    auto bad = tmpdir() / "bad-images";
    auto labels = tmpdir() / "ok-labels";
    {
        std::ofstream os(bad, std::ios::binary | std::ios::trunc);
        write_be32(os, 0x00000107u);
        write_be32(os, 1);
        write_be32(os, 28);
        write_be32(os, 28);
        for (int i = 0; i < 784; ++i) os.put(0);
    }
    {
        std::ofstream os(labels, std::ios::binary | std::ios::trunc);
        write_be32(os, 0x00000801u);
        write_be32(os, 1);
        os.put(0);
    }
    try {
        load_idx(bad, labels);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("0x00000803") != std::string::npos);
    }
}

TEST_CASE("augmentation: center crop is the identity, flips involute, seeds reproduce") {
    std::mt19937 rng(5);
    Dataset ds = make_synthetic({2, 4, 0.3, 0.05, 7});
    std::vector<int> idx{0, 1, 2};
    auto ref = gather_bytes(ds, idx);

    auto img = ref;
    crop_shift({img.data(), Dataset::kImageBytes}, 4, 4);
    CHECK(std::equal(img.begin(), img.begin() + Dataset::kImageBytes, ref.begin()));

    flip_horizontal({img.data(), Dataset::kImageBytes});
    flip_horizontal({img.data(), Dataset::kImageBytes});
    CHECK(std::equal(img.begin(), img.begin() + Dataset::kImageBytes, ref.begin()));

    auto a = ref;
    auto b = ref;
    std::mt19937 r1(11), r2(11);
    augment_batch(a, 3, r1);
    augment_batch(b, 3, r2);
    CHECK(a == b);
}

TEST_CASE("batch iteration partitions eval and drops ragged train tails") {
    BatchIter train(10, 3, 0, true, true);
    CHECK(train.batches_per_epoch() == 3);
    auto tb = train.epoch_batches(0);
    CHECK(tb.size() == 3);
    for (auto& b : tb) CHECK(b.size() == 3);
    CHECK(train.epoch_batches(0) == tb);        // same seed, same epoch
    CHECK(train.epoch_batches(1) != tb);        // new epoch reshuffles

    BatchIter eval(10, 3, 0, false, false);
    auto eb = eval.epoch_batches(0);
    CHECK(eb.size() == 4);
    std::vector<int> seen;
    for (auto& b : eb) seen.insert(seen.end(), b.begin(), b.end());
    std::sort(seen.begin(), seen.end());
    std::vector<int> want(10);
    std::iota(want.begin(), want.end(), 0);
    CHECK(seen == want);

    CHECK_THROWS_AS(BatchIter(4, 5, 0, true, true), ConfigError);
}

TEST_CASE("synthetic data is deterministic and degenerate at zero covariance") {
    SyntheticSpec spec{3, 5, 0.2, 0.0, 42};
    Dataset a = make_synthetic(spec);
    Dataset b = make_synthetic(spec);
    CHECK(a.images == b.images);
    CHECK(a.labels == b.labels);
    // zero covariance: all samples of a class equal its mean image
    for (int k = 0; k < 3; ++k)
        for (int s = 1; s < 5; ++s) {
            auto first = a.image(k * 5);
            auto other = a.image(k * 5 + s);
            CHECK(std::equal(first.begin(), first.end(), other.begin()));
        }
    SyntheticSpec bad = spec;
    bad.noise_std = -0.1;
    CHECK_THROWS_AS(make_synthetic(bad), ConfigError);
}

TEST_CASE("two separated synthetic classes are linearly separable in one epoch") {
    SyntheticSpec spec{2, 100, 0.3, 0.05, 3};
    Dataset ds = make_synthetic(spec);
    compute_norm_stats(ds);

    auto w = TensorF::zeros(Shape{2, static_cast<int>(Dataset::kImageBytes)});
    auto bias = TensorF::zeros(Shape{2});
    w.set_requires_grad();
    bias.set_requires_grad();
    std::vector<float> vw, vb;

    BatchIter iter(ds.n, 20, 0, true, true);
    for (auto& batch : iter.epoch_batches(0)) {
        TapeScope<float> scope;
        auto x = reshape(make_batch(ds, batch), Shape{static_cast<int>(batch.size()), static_cast<int>(Dataset::kImageBytes)});
        std::vector<int> labels;
        for (int i : batch) labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
        auto loss = cross_entropy(linear(x, w, &bias), labels);
        scope.tape().backward(loss);
        sgd_step(w, vw, 0.1f, 0.9f, 0.0f);
        sgd_step(bias, vb, 0.1f, 0.9f, 0.0f);
        w.zero_grad();
        bias.zero_grad();
    }
    std::vector<int> all(static_cast<std::size_t>(ds.n));
    std::iota(all.begin(), all.end(), 0);
    auto x = reshape(make_batch(ds, all), Shape{ds.n, static_cast<int>(Dataset::kImageBytes)});
    NoGradScope<float> ng;
    double acc = accuracy(linear(x, w, &bias), ds.labels);
    CHECK(acc > 95.0);
}

TEST_CASE("train-split normalization statistics whiten the split") {
    Dataset ds = make_synthetic({4, 50, 0.25, 0.1, 9});
    compute_norm_stats(ds);
    std::vector<int> all(static_cast<std::size_t>(ds.n));
    std::iota(all.begin(), all.end(), 0);
    auto batch = make_batch(ds, all);
    auto v = batch.values();
    const std::size_t plane = 32 * 32;
    for (int ch = 0; ch < 3; ++ch) {
        double acc = 0.0, sq = 0.0;
        for (int i = 0; i < ds.n; ++i)
            for (std::size_t p = 0; p < plane; ++p) {
                double x = v[(static_cast<std::size_t>(i) * 3 + ch) * plane + p];
                acc += x;
                sq += x * x;
            }
        double count = static_cast<double>(ds.n) * plane;
        double mean = acc / count;
        CHECK(std::abs(mean) < 1e-3);
        CHECK(std::abs(std::sqrt(sq / count - mean * mean) - 1.0) < 1e-2);
    }
}

TEST_CASE("subset takes a seeded-shuffle prefix deterministically") {
    Dataset ds = make_synthetic({5, 20, 0.2, 0.05, 1});
    Dataset s1 = subset(ds, 30, 0);
    Dataset s2 = subset(ds, 30, 0);
    CHECK(s1.images == s2.images);
    CHECK(s1.labels == s2.labels);
    Dataset s3 = subset(ds, 30, 1);
    CHECK(s1.labels != s3.labels);
    CHECK_THROWS_AS(subset(ds, 1000, 0), ConfigError);
}
