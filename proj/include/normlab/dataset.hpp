#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "normlab/tensor.hpp"

namespace normlab::data {

// Images are kept as raw bytes in [N,3,32,32] CHW layout and materialized to
// normalized floats per batch. Byte storage keeps CIFAR round-trips exact and
// the float value is always pixel/255.
struct Dataset {
    static constexpr int kChannels = 3;
    static constexpr int kSide = 32;
    static constexpr std::size_t kImageBytes = static_cast<std::size_t>(kChannels) * kSide * kSide;

    std::string name;
    int n = 0;
    int class_count = 0;
    std::vector<std::uint8_t> images;
    std::vector<int> labels;
    std::vector<std::uint8_t> coarse_labels;  // CIFAR-100 superclass byte, kept for exact re-serialization
    std::array<float, 3> norm_mean{0.0f, 0.0f, 0.0f};
    std::array<float, 3> norm_std{1.0f, 1.0f, 1.0f};

    std::span<const std::uint8_t> image(int i) const { return {images.data() + static_cast<std::size_t>(i) * kImageBytes, kImageBytes}; }
};

enum class CifarVariant { c10, c100 };

// Single binary file in the original CIFAR record layout (3073-byte records
// for CIFAR-10, 3074 with a leading coarse label for CIFAR-100).
Dataset load_cifar_file(const std::filesystem::path& path, CifarVariant variant);

// Standard directory layouts: cifar-10 data_batch_1..5.bin / test_batch.bin,
// cifar-100 train.bin / test.bin.
Dataset load_cifar(const std::filesystem::path& dir, CifarVariant variant, bool train);

void write_cifar_file(const std::filesystem::path& path, const Dataset& ds, CifarVariant variant);

// IDX-format images + labels (MNIST / FashionMNIST). 28x28 grayscale inputs
// are zero-padded to 32x32 and replicated to three channels.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

struct SyntheticSpec {
    int class_count = 10;
    int samples_per_class = 500;
    double mean_spread = 0.18;  // amplitude of the per-class smooth pattern around mid-gray
    double noise_std = 0.06;    // isotropic Gaussian covariance scale per pixel
    unsigned seed = 0;

    void validate() const;
};

// Gaussian-blob image classes around smooth per-class mean patterns;
// linearly separable at a margin controlled by mean_spread/noise_std.
Dataset make_synthetic(const SyntheticSpec& spec);

// Per-channel mean/std of pixel/255 over this dataset's images.
void compute_norm_stats(Dataset& ds);
void copy_norm_stats(const Dataset& from, Dataset& to);

// Deterministic prefix after a seeded shuffle.
Dataset subset(const Dataset& ds, int count, unsigned seed);

// Pad-4 random crop plus horizontal flip, drawn per image from rng in a
// fixed order (dx, dy, flip). Operates on a [count,3,32,32] byte buffer.
void augment_batch(std::vector<std::uint8_t>& images, int count, std::mt19937& rng);
void flip_horizontal(std::span<std::uint8_t> image);
void crop_shift(std::span<std::uint8_t> image, int dx, int dy);

// Gather indices into a byte buffer; normalize to a float tensor.
std::vector<std::uint8_t> gather_bytes(const Dataset& ds, std::span<const int> indices);
Tensor<float> normalize_batch(const std::vector<std::uint8_t>& bytes, int count,
                              const std::array<float, 3>& mean, const std::array<float, 3>& stddev);
Tensor<float> make_batch(const Dataset& ds, std::span<const int> indices);

// Seeded epoch permutations. Train mode drops the last partial batch (batch
// statistics need at least two samples); eval keeps it.
class BatchIter {
public:
    BatchIter(int n, int batch_size, unsigned seed, bool shuffle, bool drop_last);
    std::vector<std::vector<int>> epoch_batches(int epoch) const;
    int batches_per_epoch() const;

private:
    int n_, batch_, seed_;
    bool shuffle_, drop_last_;
};

}  // namespace normlab::data
