#include "ikd/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ikd/errors.hpp"

namespace ikd {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

namespace {

constexpr char kMagic[4] = {'T', 'N', 'S', 'R'};

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.insert(out.end(), buf, buf + sizeof(T));
}

template <class T>
T take(const std::vector<std::uint8_t>& in, std::size_t& pos, const std::string& origin) {
    if (pos + sizeof(T) > in.size()) throw FormatError(origin + ": truncated tensor file");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t, TensorPrecision precision) {
    std::vector<std::uint8_t> out;
    const std::size_t width = precision == TensorPrecision::Float32 ? 4 : 8;
    out.reserve(9 + 4 * t.rank() + width * t.numel());
    out.insert(out.end(), kMagic, kMagic + 4);
    out.push_back(static_cast<std::uint8_t>(precision));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) {
        if (precision == TensorPrecision::Float32)
            put<float>(out, static_cast<float>(v));
        else
            put<double>(out, v);
    }
    return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
    if (bytes.size() < 9 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw FormatError(origin + ": missing TNSR magic");
    std::size_t pos = 4;
    const auto version = take<std::uint8_t>(bytes, pos, origin);
    if (version != 1 && version != 2)
        throw FormatError(origin + ": unsupported tensor version " + std::to_string(version));
    const auto rank = take<std::uint32_t>(bytes, pos, origin);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) {
        auto d = take<std::uint32_t>(bytes, pos, origin);
        if (d == 0) throw FormatError(origin + ": zero-sized dimension");
        shape.push_back(d);
    }
    const std::size_t n = shape_numel(shape);
    const std::size_t width = version == 1 ? 4 : 8;
    if (bytes.size() - pos != n * width)
        throw FormatError(origin + ": payload of " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                          std::to_string(n * width));
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i)
        data[i] = version == 1 ? static_cast<double>(take<float>(bytes, pos, origin)) : take<double>(bytes, pos, origin);
    return Tensor::from(std::move(shape), std::move(data));
}

void write_tensor(const std::filesystem::path& path, const Tensor& t, TensorPrecision precision) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    auto bytes = encode_tensor(t, precision);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("failed writing " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return decode_tensor(bytes, path.string());
}

}  // namespace ikd
