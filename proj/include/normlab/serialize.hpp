#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "normlab/tensor.hpp"

namespace normlab::io {

// Flat binary tensor file: u32 rank, u32 dims[rank], then raw little-endian
// scalars. Element width (4 or 8 bytes) is implied by the payload size.
void write_tensor_file(const std::filesystem::path& path, const Shape& shape, const float* data);
void write_tensor_file(const std::filesystem::path& path, const Shape& shape, const double* data);

template <typename T>
void write_tensor_file(const std::filesystem::path& path, const Tensor<T>& t) {
    write_tensor_file(path, t.shape(), t.values().data());
}

struct LoadedTensor {
    Shape shape;
    std::vector<double> values;  // widened on load regardless of stored width
    int element_size = 0;
};

LoadedTensor read_tensor_file(const std::filesystem::path& path);

// name -> relative file path, one "name = file" line each
void write_manifest(const std::filesystem::path& path, const std::vector<std::pair<std::string, std::string>>& entries);
std::vector<std::pair<std::string, std::string>> read_manifest(const std::filesystem::path& path);

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ull);
std::uint64_t hash_file(const std::filesystem::path& path, std::uint64_t seed = 0xcbf29ce484222325ull);

// Chained hash over the manifest and every tensor file it lists, in manifest order.
std::uint64_t checkpoint_hash(const std::filesystem::path& dir);

}  // namespace normlab::io
