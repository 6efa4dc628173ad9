#include "ipck/safetensors.hpp"

#include "ipck/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace ipck {
namespace {

float half_to_float(std::uint16_t h)
{
    const std::uint32_t sign = (h >> 15) & 1u;
    const std::uint32_t exp = (h >> 10) & 0x1fu;
    const std::uint32_t mant = h & 0x3ffu;
    float v;
    if (exp == 0)
        v = std::ldexp(static_cast<float>(mant), -24);
    else if (exp == 31)
        v = mant ? std::numeric_limits<float>::quiet_NaN() : std::numeric_limits<float>::infinity();
    else
        v = std::ldexp(static_cast<float>(mant | 0x400u), static_cast<int>(exp) - 25);
    return sign ? -v : v;
}

std::size_t dtype_size(const std::string& dtype)
{
    if (dtype == "F64")
        return 8;
    if (dtype == "F32")
        return 4;
    if (dtype == "F16" || dtype == "BF16")
        return 2;
    return 0;
}

} // namespace

SafeTensorsFile::SafeTensorsFile(const std::filesystem::path& path) : path_(path)
{
    static_assert(std::endian::native == std::endian::little, "safetensors reader assumes a little-endian host");
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open " + path.string());
    std::uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
    if (!in || header_len == 0 || header_len > (100u << 20))
        throw DataError(path.string() + ": not a safetensors file");
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    if (!in)
        throw DataError(path.string() + ": truncated header");
    data_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": malformed header: " + e.what());
    }
    for (const auto& [name, desc] : j.items()) {
        if (name == "__metadata__")
            continue;
        TensorInfo info;
        info.dtype = desc.at("dtype").get<std::string>();
        info.shape = desc.at("shape").get<std::vector<std::int64_t>>();
        const auto offsets = desc.at("data_offsets").get<std::vector<std::size_t>>();
        if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > data_.size())
            throw DataError(path.string() + ": bad data offsets for " + name);
        info.begin = offsets[0];
        info.end = offsets[1];
        std::int64_t count = 1;
        for (auto d : info.shape)
            count *= d;
        info.rows = info.shape.empty() ? 1 : (info.shape.size() == 1 ? 1 : info.shape[0]);
        info.cols = info.rows == 0 ? 0 : count / std::max<std::int64_t>(info.rows, 1);
        if (dtype_size(info.dtype) == 0)
            throw DataError(path.string() + ": unsupported dtype " + info.dtype + " for " + name);
        if (static_cast<std::size_t>(count) * dtype_size(info.dtype) != info.end - info.begin)
            throw DataError(path.string() + ": size mismatch for " + name);
        tensors_.emplace(name, std::move(info));
    }
}

std::vector<std::string> SafeTensorsFile::names() const
{
    std::vector<std::string> out;
    for (const auto& [name, info] : tensors_)
        out.push_back(name);
    return out;
}

const std::vector<std::int64_t>& SafeTensorsFile::shape(const std::string& name) const { return lookup(name).shape; }

const SafeTensorsFile::TensorInfo& SafeTensorsFile::lookup(const std::string& name) const
{
    auto it = tensors_.find(name);
    if (it == tensors_.end())
        throw DataError(path_.string() + ": missing tensor " + name);
    return it->second;
}

std::vector<double> SafeTensorsFile::decode(const TensorInfo& info) const
{
    const std::size_t width = dtype_size(info.dtype);
    const std::size_t n = (info.end - info.begin) / width;
    std::vector<double> out(n);
    const char* p = data_.data() + info.begin;
    for (std::size_t i = 0; i < n; ++i, p += width) {
        if (info.dtype == "F64") {
            double v;
            std::memcpy(&v, p, 8);
            out[i] = v;
        } else if (info.dtype == "F32") {
            float v;
            std::memcpy(&v, p, 4);
            out[i] = v;
        } else {
            std::uint16_t h;
            std::memcpy(&h, p, 2);
            if (info.dtype == "F16") {
                out[i] = half_to_float(h);
            } else {
                const std::uint32_t bits = static_cast<std::uint32_t>(h) << 16;
                float v;
                std::memcpy(&v, &bits, 4);
                out[i] = v;
            }
        }
    }
    return out;
}

void write_safetensors(const std::filesystem::path& path, std::vector<TensorToWrite> tensors,
                       const std::map<std::string, std::string>& metadata)
{
    std::sort(tensors.begin(), tensors.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    nlohmann::ordered_json header;
    if (!metadata.empty())
        header["__metadata__"] = metadata;
    std::size_t offset = 0;
    for (const auto& t : tensors) {
        std::int64_t count = 1;
        for (auto d : t.shape)
            count *= d;
        if (static_cast<std::size_t>(count) != t.values.size())
            throw RuntimeError("tensor " + t.name + ": shape does not match value count");
        const std::size_t bytes = t.values.size() * sizeof(float);
        header[t.name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    std::string text = header.dump();
    while (text.size() % 8 != 0)
        text.push_back(' ');
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw RuntimeError("cannot write " + path.string());
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : tensors)
        out.write(reinterpret_cast<const char*>(t.values.data()),
                  static_cast<std::streamsize>(t.values.size() * sizeof(float)));
}

} // namespace ipck
