#include "dp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace dp {

namespace {

constexpr char kMagic[8] = {'D', 'P', 'T', 'C', '0', '0', '0', '1'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big,
              "mixed-endian platforms unsupported");

std::uint64_t to_le(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::big) return __builtin_bswap64(v);
    return v;
}

void write_u64(std::ofstream& os, std::uint64_t v) {
    const std::uint64_t le = to_le(v);
    os.write(reinterpret_cast<const char*>(&le), sizeof(le));
}

double f64_from_le(std::uint64_t le) {
    const std::uint64_t v = to_le(le);
    double d;
    std::memcpy(&d, &v, sizeof(d));
    return d;
}

std::uint64_t f64_to_le(double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, sizeof(v));
    return to_le(v);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const NamedParams& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path.string());
    os.write(kMagic, sizeof(kMagic));
    for (const auto& [name, tensor] : params) {
        write_u64(os, name.size());
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        const Shape& shape = tensor.shape();
        write_u64(os, shape.size());
        for (std::int64_t d : shape) write_u64(os, static_cast<std::uint64_t>(d));
        for (double v : tensor.data()) {
            const std::uint64_t le = f64_to_le(v);
            os.write(reinterpret_cast<const char*>(&le), sizeof(le));
        }
    }
    if (!os) throw DataError("write failure on checkpoint: " + path.string());
}

NamedParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path.string());
    char magic[8];
    if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw DataError("bad checkpoint magic in " + path.string());

    auto read_u64 = [&](std::uint64_t& v) -> bool {
        std::uint64_t le;
        if (!is.read(reinterpret_cast<char*>(&le), sizeof(le))) return false;
        v = to_le(le);
        return true;
    };

    NamedParams out;
    for (;;) {
        std::uint64_t name_len;
        if (!read_u64(name_len)) {
            if (is.eof() && is.gcount() == 0) break;
            throw DataError("truncated checkpoint: " + path.string());
        }
        std::string name(name_len, '\0');
        if (!is.read(name.data(), static_cast<std::streamsize>(name_len)))
            throw DataError("truncated checkpoint name in " + path.string());
        std::uint64_t rank;
        if (!read_u64(rank)) throw DataError("truncated checkpoint record in " + path.string());
        Shape shape(rank);
        std::uint64_t numel = 1;
        for (std::uint64_t i = 0; i < rank; ++i) {
            std::uint64_t d;
            if (!read_u64(d)) throw DataError("truncated checkpoint dims in " + path.string());
            shape[i] = static_cast<std::int64_t>(d);
            numel *= d;
        }
        std::vector<double> data(numel);
        for (std::uint64_t i = 0; i < numel; ++i) {
            std::uint64_t le;
            if (!is.read(reinterpret_cast<char*>(&le), sizeof(le)))
                throw DataError("truncated checkpoint data for '" + name + "' in " + path.string());
            data[i] = f64_from_le(le);
        }
        out.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
    }
    return out;
}

}  // namespace dp
