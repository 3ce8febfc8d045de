#include "normlab/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "normlab/error.hpp"

static_assert(std::endian::native == std::endian::little, "tensor files are little-endian");

namespace normlab::io {

namespace {

void write_header(std::ofstream& os, const Shape& shape) {
    std::uint32_t rank = static_cast<std::uint32_t>(shape.rank());
    os.write(reinterpret_cast<const char*>(&rank), 4);
    for (int i = 0; i < shape.rank(); ++i) {
        std::uint32_t d = static_cast<std::uint32_t>(shape[i]);
        os.write(reinterpret_cast<const char*>(&d), 4);
    }
}

}  // namespace

void write_tensor_file(const std::filesystem::path& path, const Shape& shape, const float* data) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    write_header(os, shape);
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(shape.numel() * 4));
    if (!os) throw DataError("short write to " + path.string());
}

void write_tensor_file(const std::filesystem::path& path, const Shape& shape, const double* data) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    write_header(os, shape);
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(shape.numel() * 8));
    if (!os) throw DataError("short write to " + path.string());
}

LoadedTensor read_tensor_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    std::uint32_t rank = 0;
    is.read(reinterpret_cast<char*>(&rank), 4);
    if (!is || rank < 1 || rank > 4)
        throw FormatError("bad tensor file rank in " + path.string() + ": " + std::to_string(rank));
    std::vector<int> dims(rank);
    for (auto& d : dims) {
        std::uint32_t v = 0;
        is.read(reinterpret_cast<char*>(&v), 4);
        if (!is || v == 0) throw FormatError("bad tensor dimension in " + path.string());
        d = static_cast<int>(v);
    }
    LoadedTensor out;
    out.shape = Shape(dims);
    std::int64_t n = out.shape.numel();
    std::uintmax_t payload = std::filesystem::file_size(path) - 4 - 4 * rank;
    if (payload == static_cast<std::uintmax_t>(n) * 4) {
        out.element_size = 4;
        std::vector<float> buf(static_cast<std::size_t>(n));
        is.read(reinterpret_cast<char*>(buf.data()), n * 4);
        if (!is) throw FormatError("truncated tensor payload in " + path.string());
        out.values.assign(buf.begin(), buf.end());
    } else if (payload == static_cast<std::uintmax_t>(n) * 8) {
        out.element_size = 8;
        out.values.resize(static_cast<std::size_t>(n));
        is.read(reinterpret_cast<char*>(out.values.data()), n * 8);
        if (!is) throw FormatError("truncated tensor payload in " + path.string());
    } else {
        throw FormatError("tensor payload size " + std::to_string(payload) + " does not match shape " +
                          out.shape.str() + " in " + path.string());
    }
    return out;
}

void write_manifest(const std::filesystem::path& path,
                    const std::vector<std::pair<std::string, std::string>>& entries) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    for (const auto& [name, file] : entries) os << name << " = " << file << "\n";
}

std::vector<std::pair<std::string, std::string>> read_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path.string());
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto eq = line.find(" = ");
        if (eq == std::string::npos)
            throw FormatError("manifest line " + std::to_string(lineno) + " is not 'name = file'");
        out.emplace_back(line.substr(0, eq), line.substr(eq + 3));
    }
    return out;
}

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t hash_file(const std::filesystem::path& path, std::uint64_t seed) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    char buf[1 << 16];
    std::uint64_t h = seed;
    while (is) {
        is.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<std::size_t>(is.gcount()), h);
    }
    return h;
}

std::uint64_t checkpoint_hash(const std::filesystem::path& dir) {
    auto manifest = dir / "manifest.txt";
    std::uint64_t h = hash_file(manifest);
    for (const auto& [name, file] : read_manifest(manifest)) {
        h = fnv1a64(name.data(), name.size(), h);
        h = hash_file(dir / file, h);
    }
    return h;
}

}  // namespace normlab::io
