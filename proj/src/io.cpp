#include "phoenix/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace phoenix {

namespace {

constexpr std::array<char, 4> kTensorMagic{'P', 'H', 'X', 'T'};
constexpr std::array<char, 4> kCheckpointMagic{'P', 'H', 'X', 'C'};
constexpr std::uint16_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

template <typename U>
void put(std::ostream& out, U value) {
    std::array<char, sizeof(U)> bytes{};
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        bytes[i] = static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xffu);
    }
    out.write(bytes.data(), bytes.size());
}

template <typename U>
U get(std::istream& in, const char* what) {
    std::array<unsigned char, sizeof(U)> bytes{};
    if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
        throw FormatError(std::string("truncated input while reading ") + what);
    }
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return static_cast<U>(v);
}

void expect_magic(std::istream& in, const std::array<char, 4>& magic) {
    std::array<char, 4> got{};
    if (!in.read(got.data(), got.size()) || got != magic) {
        throw FormatError(std::string("bad magic, expected ") + std::string(magic.data(), 4));
    }
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& tensor) {
    out.write(kTensorMagic.data(), kTensorMagic.size());
    put<std::uint16_t>(out, kVersion);
    put<std::uint8_t>(out, kDtypeF32);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) put<std::uint64_t>(out, d);
    for (float v : tensor.data()) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
}

Tensor read_tensor(std::istream& in) {
    expect_magic(in, kTensorMagic);
    const auto version = get<std::uint16_t>(in, "tensor version");
    if (version != kVersion) throw FormatError("unsupported tensor version " + std::to_string(version));
    const auto dtype = get<std::uint8_t>(in, "tensor dtype");
    if (dtype != kDtypeF32) throw FormatError("unsupported tensor dtype " + std::to_string(dtype));
    const auto rank = get<std::uint8_t>(in, "tensor rank");
    if (rank == 0) throw FormatError("tensor rank 0");
    Shape shape(rank);
    std::uint64_t total = 1;
    for (auto& d : shape) {
        d = get<std::uint64_t>(in, "tensor dims");
        if (d == 0) throw FormatError("tensor dimension 0");
        total *= d;
        if (total > (std::uint64_t{1} << 34)) throw FormatError("tensor too large");
    }
    std::vector<float> data(total);
    std::vector<unsigned char> raw(total * 4);
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
        throw FormatError("truncated tensor payload");
    }
    for (std::size_t i = 0; i < total; ++i) {
        const std::uint32_t bits = static_cast<std::uint32_t>(raw[4 * i]) | (static_cast<std::uint32_t>(raw[4 * i + 1]) << 8) |
                                   (static_cast<std::uint32_t>(raw[4 * i + 2]) << 16) |
                                   (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
        data[i] = std::bit_cast<float>(bits);
    }
    return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& tensor) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    write_tensor(out, tensor);
    if (!out) throw Error("failed writing " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    try {
        return read_tensor(in);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_checkpoint(std::ostream& out, const std::vector<CheckpointEntry>& entries) {
    out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    put<std::uint16_t>(out, kVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        if (e.name.size() > 0xffff) throw ArgumentError("parameter name too long: " + e.name);
        put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        put<std::uint8_t>(out, e.personal ? 1 : 0);
        write_tensor(out, e.tensor);
    }
}

std::vector<CheckpointEntry> read_checkpoint(std::istream& in) {
    expect_magic(in, kCheckpointMagic);
    const auto version = get<std::uint16_t>(in, "checkpoint version");
    if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto count = get<std::uint32_t>(in, "checkpoint count");
    std::vector<CheckpointEntry> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string label = "record " + std::to_string(i);
        try {
            CheckpointEntry e;
            const auto len = get<std::uint16_t>(in, "name length");
            e.name.resize(len);
            if (!in.read(e.name.data(), len)) throw FormatError("truncated name");
            label += " '" + e.name + "'";
            const auto flags = get<std::uint8_t>(in, "flags");
            e.personal = (flags & 1u) != 0;
            e.tensor = read_tensor(in);
            entries.push_back(std::move(e));
        } catch (const FormatError& err) {
            throw FormatError("checkpoint " + label + ": " + err.what());
        }
    }
    return entries;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    write_checkpoint(out, entries);
    if (!out) throw Error("failed writing " + path.string());
}

std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint " + path.string());
    try {
        return read_checkpoint(in);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void save_netpbm(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
        throw ShapeError("netpbm image must be [1,H,W] or [3,H,W], got " + shape_string(image.shape()));
    }
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << (c == 1 ? "P5" : "P6") << "\n" << w << " " << h << "\n255\n";
    std::vector<char> bytes(c * h * w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double v = std::round((static_cast<double>(image[(ch * h + y) * w + x]) + 1.0) * 127.5);
                bytes[(y * w + x) * c + ch] = static_cast<char>(static_cast<unsigned char>(std::clamp(v, 0.0, 255.0)));
            }
        }
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing " + path.string());
}

}  // namespace phoenix
