#include "vssm/tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace vssm {

static_assert(std::endian::native == std::endian::little,
              "MATD serialization assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'A', 'T', 'D'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& is, const char* what) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw IoError(std::string("MATD: truncated while reading ") + what);
    return v;
}

}  // namespace

void matd_write(std::ostream& os, const Tensor& t, MatdType dtype) {
    os.write(kMagic, 4);
    write_u32(os, kVersion);
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d = 0; d < t.rank(); ++d) {
        write_u32(os, static_cast<std::uint32_t>(t.extent(d)));
    }
    const unsigned char tag = static_cast<unsigned char>(dtype);
    os.write(reinterpret_cast<const char*>(&tag), 1);
    if (dtype == MatdType::f64) {
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)));
    } else {
        for (std::size_t i = 0; i < t.size(); ++i) {
            const float f = static_cast<float>(t[i]);
            os.write(reinterpret_cast<const char*>(&f), sizeof f);
        }
    }
    if (!os) throw IoError("MATD: write failed");
}

Tensor matd_read(std::istream& is) {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw IoError("MATD: bad magic bytes");
    }
    const std::uint32_t version = read_u32(is, "version");
    if (version != kVersion) {
        throw IoError("MATD: unsupported version " + std::to_string(version));
    }
    const std::uint32_t rank = read_u32(is, "rank");
    if (rank == 0 || rank > 8) throw IoError("MATD: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d) {
        shape[d] = read_u32(is, "extent");
        if (shape[d] == 0) throw IoError("MATD: zero extent");
    }
    unsigned char tag = 0;
    is.read(reinterpret_cast<char*>(&tag), 1);
    if (!is) throw IoError("MATD: truncated while reading dtype");
    const std::size_t n = shape_product(shape);
    std::vector<double> data(n);
    if (tag == static_cast<unsigned char>(MatdType::f64)) {
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        if (!is) throw IoError("MATD: truncated payload");
    } else if (tag == static_cast<unsigned char>(MatdType::f32)) {
        for (std::size_t i = 0; i < n; ++i) {
            float f = 0.0f;
            is.read(reinterpret_cast<char*>(&f), sizeof f);
            if (!is) throw IoError("MATD: truncated payload");
            data[i] = static_cast<double>(f);
        }
    } else {
        throw IoError("MATD: unknown dtype byte " + std::to_string(tag));
    }
    return Tensor(std::move(shape), std::move(data));
}

void matd_save(const std::string& path, const Tensor& t, MatdType dtype) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    matd_write(f, t, dtype);
}

Tensor matd_load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    return matd_read(f);
}

}  // namespace vssm
