#include "normlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "normlab/error.hpp"

namespace normlab::data {

namespace {

std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    std::vector<std::uint8_t> buf(std::filesystem::file_size(path));
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!is) throw DataError("short read from " + path.string());
    return buf;
}

std::uint32_t be32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

void append_cifar_records(Dataset& ds, const std::filesystem::path& path, CifarVariant variant) {
    const std::size_t record = variant == CifarVariant::c10 ? 3073 : 3074;
    auto buf = read_all(path);
    if (buf.empty() || buf.size() % record != 0)
        throw FormatError(path.string() + ": size " + std::to_string(buf.size()) +
                          " is not a whole number of " + std::to_string(record) +
                          "-byte records (truncated at byte offset " +
                          std::to_string(buf.size() - buf.size() % record) + ")");
    const int count = static_cast<int>(buf.size() / record);
    const int classes = variant == CifarVariant::c10 ? 10 : 100;
    ds.images.reserve(ds.images.size() + static_cast<std::size_t>(count) * Dataset::kImageBytes);
    for (int i = 0; i < count; ++i) {
        const std::uint8_t* rec = buf.data() + static_cast<std::size_t>(i) * record;
        int label, offset;
        if (variant == CifarVariant::c10) {
            label = rec[0];
            offset = 1;
        } else {
            ds.coarse_labels.push_back(rec[0]);
            label = rec[1];
            offset = 2;
        }
        if (label >= classes)
            throw FormatError(path.string() + ": label " + std::to_string(label) + " out of range at byte offset " +
                              std::to_string(static_cast<std::size_t>(i) * record));
        ds.labels.push_back(label);
        ds.images.insert(ds.images.end(), rec + offset, rec + record);
    }
    ds.n += count;
    ds.class_count = classes;
}

}  // namespace

Dataset load_cifar_file(const std::filesystem::path& path, CifarVariant variant) {
    Dataset ds;
    ds.name = path.stem().string();
    append_cifar_records(ds, path, variant);
    return ds;
}

Dataset load_cifar(const std::filesystem::path& dir, CifarVariant variant, bool train) {
    Dataset ds;
    if (variant == CifarVariant::c10) {
        ds.name = train ? "cifar10-train" : "cifar10-test";
        if (train) {
            for (int i = 1; i <= 5; ++i)
                append_cifar_records(ds, dir / ("data_batch_" + std::to_string(i) + ".bin"), variant);
        } else {
            append_cifar_records(ds, dir / "test_batch.bin", variant);
        }
    } else {
        ds.name = train ? "cifar100-train" : "cifar100-test";
        append_cifar_records(ds, dir / (train ? "train.bin" : "test.bin"), variant);
    }
    return ds;
}

void write_cifar_file(const std::filesystem::path& path, const Dataset& ds, CifarVariant variant) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    for (int i = 0; i < ds.n; ++i) {
        if (variant == CifarVariant::c100) {
            std::uint8_t coarse = i < static_cast<int>(ds.coarse_labels.size()) ? ds.coarse_labels[static_cast<std::size_t>(i)] : 0;
            os.put(static_cast<char>(coarse));
        }
        os.put(static_cast<char>(ds.labels[static_cast<std::size_t>(i)]));
        auto img = ds.image(i);
        os.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
    }
    if (!os) throw DataError("short write to " + path.string());
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
    auto ibuf = read_all(images_path);
    if (ibuf.size() < 16) throw FormatError(images_path.string() + ": too short for an IDX image header");
    if (be32(ibuf.data()) != 0x00000803u)
        throw FormatError(images_path.string() + ": bad IDX magic, expected 0x00000803");
    const std::uint32_t n = be32(ibuf.data() + 4);
    const std::uint32_t rows = be32(ibuf.data() + 8);
    const std::uint32_t cols = be32(ibuf.data() + 12);
    if (rows != 28 || cols != 28)
        throw FormatError(images_path.string() + ": expected 28x28 images, got " + std::to_string(rows) + "x" +
                          std::to_string(cols));
    if (ibuf.size() != 16 + static_cast<std::size_t>(n) * rows * cols)
        throw FormatError(images_path.string() + ": payload truncated at byte offset " + std::to_string(ibuf.size()));

    auto lbuf = read_all(labels_path);
    if (lbuf.size() < 8) throw FormatError(labels_path.string() + ": too short for an IDX label header");
    if (be32(lbuf.data()) != 0x00000801u)
        throw FormatError(labels_path.string() + ": bad IDX magic, expected 0x00000801");
    if (be32(lbuf.data() + 4) != n)
        throw FormatError(labels_path.string() + ": label count differs from image count");
    if (lbuf.size() != 8 + static_cast<std::size_t>(n))
        throw FormatError(labels_path.string() + ": payload truncated at byte offset " + std::to_string(lbuf.size()));

    Dataset ds;
    ds.name = images_path.stem().string();
    ds.n = static_cast<int>(n);
    ds.class_count = 10;
    ds.images.assign(static_cast<std::size_t>(n) * Dataset::kImageBytes, 0);
    ds.labels.resize(n);
    // zero-pad 28x28 to 32x32 at offset (2,2), replicate across channels
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint8_t* src = ibuf.data() + 16 + static_cast<std::size_t>(i) * 784;
        std::uint8_t* dst = ds.images.data() + static_cast<std::size_t>(i) * Dataset::kImageBytes;
        for (int r = 0; r < 28; ++r)
            for (int c = 0; c < 28; ++c) {
                std::uint8_t v = src[r * 28 + c];
                for (int ch = 0; ch < 3; ++ch) dst[(ch * 32 + r + 2) * 32 + c + 2] = v;
            }
        int label = lbuf[8 + i];
        if (label > 9) throw FormatError(labels_path.string() + ": label " + std::to_string(label) + " out of range");
        ds.labels[i] = label;
    }
    return ds;
}

void SyntheticSpec::validate() const {
    if (class_count < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
    if (samples_per_class < 1) throw ConfigError("synthetic dataset needs at least 1 sample per class");
    if (noise_std < 0.0) throw ConfigError("synthetic covariance scale must be non-negative");
    if (mean_spread < 0.0) throw ConfigError("synthetic mean spread must be non-negative");
}

Dataset make_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    std::mt19937 rng(spec.seed);
    std::normal_distribution<double> nd;

    // smooth per-class mean patterns: coarse 4x4 noise upsampled bilinearly
    const int side = Dataset::kSide;
    std::vector<std::vector<double>> means(static_cast<std::size_t>(spec.class_count));
    for (auto& m : means) {
        m.resize(Dataset::kImageBytes);
        for (int ch = 0; ch < 3; ++ch) {
            double coarse[4][4];
            for (auto& row : coarse)
                for (double& v : row) v = 0.5 + spec.mean_spread * nd(rng);
            for (int r = 0; r < side; ++r)
                for (int c = 0; c < side; ++c) {
                    double fr = r / static_cast<double>(side - 1) * 3.0;
                    double fc = c / static_cast<double>(side - 1) * 3.0;
                    int r0 = std::min(static_cast<int>(fr), 2), c0 = std::min(static_cast<int>(fc), 2);
                    double ar = fr - r0, ac = fc - c0;
                    double v = coarse[r0][c0] * (1 - ar) * (1 - ac) + coarse[r0 + 1][c0] * ar * (1 - ac) +
                               coarse[r0][c0 + 1] * (1 - ar) * ac + coarse[r0 + 1][c0 + 1] * ar * ac;
                    m[static_cast<std::size_t>(ch * side * side + r * side + c)] = v;
                }
        }
    }

    Dataset ds;
    ds.name = "synthetic";
    ds.class_count = spec.class_count;
    ds.n = spec.class_count * spec.samples_per_class;
    ds.images.resize(static_cast<std::size_t>(ds.n) * Dataset::kImageBytes);
    ds.labels.resize(static_cast<std::size_t>(ds.n));
    int idx = 0;
    for (int k = 0; k < spec.class_count; ++k)
        for (int s = 0; s < spec.samples_per_class; ++s, ++idx) {
            ds.labels[static_cast<std::size_t>(idx)] = k;
            std::uint8_t* dst = ds.images.data() + static_cast<std::size_t>(idx) * Dataset::kImageBytes;
            for (std::size_t p = 0; p < Dataset::kImageBytes; ++p) {
                double v = means[static_cast<std::size_t>(k)][p] + spec.noise_std * nd(rng);
                v = std::clamp(v, 0.0, 1.0);
                dst[p] = static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
        }
    return ds;
}

void compute_norm_stats(Dataset& ds) {
    if (ds.n == 0) throw DataError("cannot compute statistics of an empty dataset");
    const std::size_t plane = static_cast<std::size_t>(Dataset::kSide) * Dataset::kSide;
    for (int ch = 0; ch < 3; ++ch) {
        double acc = 0.0, sq = 0.0;
        for (int i = 0; i < ds.n; ++i) {
            const std::uint8_t* img = ds.images.data() + static_cast<std::size_t>(i) * Dataset::kImageBytes + ch * plane;
            for (std::size_t p = 0; p < plane; ++p) {
                double v = img[p] / 255.0;
                acc += v;
                sq += v * v;
            }
        }
        double count = static_cast<double>(ds.n) * plane;
        double mean = acc / count;
        double var = sq / count - mean * mean;
        ds.norm_mean[static_cast<std::size_t>(ch)] = static_cast<float>(mean);
        ds.norm_std[static_cast<std::size_t>(ch)] = static_cast<float>(std::sqrt(std::max(var, 1e-12)));
    }
}

void copy_norm_stats(const Dataset& from, Dataset& to) {
    to.norm_mean = from.norm_mean;
    to.norm_std = from.norm_std;
}

Dataset subset(const Dataset& ds, int count, unsigned seed) {
    if (count > ds.n) throw ConfigError("subset larger than dataset (" + std::to_string(count) + " > " + std::to_string(ds.n) + ")");
    std::vector<int> order(static_cast<std::size_t>(ds.n));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    Dataset out;
    out.name = ds.name + "-subset" + std::to_string(count);
    out.n = count;
    out.class_count = ds.class_count;
    out.norm_mean = ds.norm_mean;
    out.norm_std = ds.norm_std;
    out.images.resize(static_cast<std::size_t>(count) * Dataset::kImageBytes);
    out.labels.resize(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        int src = order[static_cast<std::size_t>(i)];
        std::memcpy(out.images.data() + static_cast<std::size_t>(i) * Dataset::kImageBytes,
                    ds.images.data() + static_cast<std::size_t>(src) * Dataset::kImageBytes, Dataset::kImageBytes);
        out.labels[static_cast<std::size_t>(i)] = ds.labels[static_cast<std::size_t>(src)];
        if (!ds.coarse_labels.empty()) out.coarse_labels.push_back(ds.coarse_labels[static_cast<std::size_t>(src)]);
    }
    return out;
}

void flip_horizontal(std::span<std::uint8_t> image) {
    const int side = Dataset::kSide;
    for (int ch = 0; ch < 3; ++ch)
        for (int r = 0; r < side; ++r) {
            std::uint8_t* row = image.data() + (ch * side + r) * side;
            std::reverse(row, row + side);
        }
}

void crop_shift(std::span<std::uint8_t> image, int dx, int dy) {
    const int side = Dataset::kSide;
    std::array<std::uint8_t, Dataset::kImageBytes> src;
    std::copy(image.begin(), image.end(), src.begin());
    for (int ch = 0; ch < 3; ++ch)
        for (int r = 0; r < side; ++r)
            for (int c = 0; c < side; ++c) {
                int sr = r + dy - 4, sc = c + dx - 4;
                bool in = sr >= 0 && sr < side && sc >= 0 && sc < side;
                image[static_cast<std::size_t>((ch * side + r) * side + c)] =
                    in ? src[static_cast<std::size_t>((ch * side + sr) * side + sc)] : 0;
            }
}

void augment_batch(std::vector<std::uint8_t>& images, int count, std::mt19937& rng) {
    std::uniform_int_distribution<int> offset(0, 8);
    std::bernoulli_distribution coin(0.5);
    for (int i = 0; i < count; ++i) {
        std::span<std::uint8_t> img{images.data() + static_cast<std::size_t>(i) * Dataset::kImageBytes,
                                    Dataset::kImageBytes};
        int dx = offset(rng);
        int dy = offset(rng);
        bool flip = coin(rng);
        if (dx != 4 || dy != 4) crop_shift(img, dx, dy);
        if (flip) flip_horizontal(img);
    }
}

std::vector<std::uint8_t> gather_bytes(const Dataset& ds, std::span<const int> indices) {
    std::vector<std::uint8_t> out(indices.size() * Dataset::kImageBytes);
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::memcpy(out.data() + i * Dataset::kImageBytes,
                    ds.images.data() + static_cast<std::size_t>(indices[i]) * Dataset::kImageBytes,
                    Dataset::kImageBytes);
    return out;
}

Tensor<float> normalize_batch(const std::vector<std::uint8_t>& bytes, int count,
                              const std::array<float, 3>& mean, const std::array<float, 3>& stddev) {
    const std::size_t plane = static_cast<std::size_t>(Dataset::kSide) * Dataset::kSide;
    std::vector<float> vals(static_cast<std::size_t>(count) * Dataset::kImageBytes);
    for (int i = 0; i < count; ++i)
        for (int ch = 0; ch < 3; ++ch) {
            const std::uint8_t* src = bytes.data() + static_cast<std::size_t>(i) * Dataset::kImageBytes + ch * plane;
            float* dst = vals.data() + static_cast<std::size_t>(i) * Dataset::kImageBytes + ch * plane;
            const float m = mean[static_cast<std::size_t>(ch)], inv = 1.0f / stddev[static_cast<std::size_t>(ch)];
            for (std::size_t p = 0; p < plane; ++p) dst[p] = (static_cast<float>(src[p]) / 255.0f - m) * inv;
        }
    return Tensor<float>::from(Shape{count, 3, Dataset::kSide, Dataset::kSide}, std::move(vals));
}

Tensor<float> make_batch(const Dataset& ds, std::span<const int> indices) {
    return normalize_batch(gather_bytes(ds, indices), static_cast<int>(indices.size()), ds.norm_mean, ds.norm_std);
}

BatchIter::BatchIter(int n, int batch_size, unsigned seed, bool shuffle, bool drop_last)
    : n_(n), batch_(batch_size), seed_(static_cast<int>(seed)), shuffle_(shuffle), drop_last_(drop_last) {
    if (batch_size < 1) throw ConfigError("batch size must be positive");
    if (batch_size > n) throw ConfigError("batch size " + std::to_string(batch_size) + " exceeds dataset size " + std::to_string(n));
}

std::vector<std::vector<int>> BatchIter::epoch_batches(int epoch) const {
    std::vector<int> order(static_cast<std::size_t>(n_));
    std::iota(order.begin(), order.end(), 0);
    if (shuffle_) {
        std::seed_seq seq{seed_, epoch};
        std::mt19937 rng(seq);
        std::shuffle(order.begin(), order.end(), rng);
    }
    std::vector<std::vector<int>> batches;
    for (int start = 0; start < n_; start += batch_) {
        int end = std::min(start + batch_, n_);
        if (drop_last_ && end - start < batch_) break;
        batches.emplace_back(order.begin() + start, order.begin() + end);
    }
    return batches;
}

int BatchIter::batches_per_epoch() const { return drop_last_ ? n_ / batch_ : (n_ + batch_ - 1) / batch_; }

}  // namespace normlab::data
