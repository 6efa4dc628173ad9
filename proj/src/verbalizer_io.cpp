#include "ipck/verbalizer.hpp"

#include <nlohmann/json.hpp>
#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace ipck {
namespace {

std::vector<unsigned char> matrix_bytes(const Matrix<double>& m)
{
    static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");
    std::vector<unsigned char> bytes(static_cast<std::size_t>(m.size()) * sizeof(double));
    std::size_t off = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            const double v = m(r, c);
            std::memcpy(bytes.data() + off, &v, sizeof v);
            off += sizeof v;
        }
    return bytes;
}

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix)
{
    return stem.string() + suffix;
}

} // namespace

ManualVerbalizer build_manual(const LabelSpace& labels, const std::map<std::string, std::vector<std::string>>& mapping)
{
    for (const auto& [cls, words] : mapping)
        if (!labels.contains(cls))
            throw ConfigError("verbalizer.label_words: class '" + cls + "' is not in the label space");
    ManualVerbalizer v;
    std::map<std::string, std::string> owner;
    for (const auto& cls : labels.classes()) {
        auto it = mapping.find(cls);
        if (it == mapping.end() || it->second.empty())
            throw ConfigError("verbalizer.label_words: class '" + cls + "' needs at least one label word");
        std::vector<std::string> words;
        for (const auto& w : it->second) {
            const std::string word = trim(w);
            if (word.empty())
                throw ConfigError("verbalizer.label_words: empty label word for class '" + cls + "'");
            auto [pos, inserted] = owner.emplace(word, cls);
            if (!inserted && pos->second != cls)
                throw ConfigError("verbalizer.label_words: word '" + word + "' is assigned to both '" + pos->second +
                                  "' and '" + cls + "'");
            if (inserted)
                words.push_back(word);
        }
        v.classes.push_back(cls);
        v.label_words.push_back(std::move(words));
    }
    return v;
}

void save_manual(const std::filesystem::path& path, const ManualVerbalizer& v)
{
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (std::size_t c = 0; c < v.num_classes(); ++c)
        j[v.classes[c]] = v.label_words[c];
    std::ofstream out(path);
    if (!out)
        throw RuntimeError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

ManualVerbalizer load_manual(const std::filesystem::path& path, const LabelSpace& labels)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open manual verbalizer " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed verbalizer file " + path.string() + ": " + e.what());
    }
    return build_manual(labels, j.get<std::map<std::string, std::vector<std::string>>>());
}

std::string matrix_checksum(const Matrix<double>& m)
{
    const auto bytes = matrix_bytes(m);
    const uLong crc = crc32(crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size()));
    std::ostringstream os;
    os << "crc32:" << std::hex << std::setw(8) << std::setfill('0') << crc;
    return os.str();
}

void save_prototype(const std::filesystem::path& stem, const PrototypeVerbalizer<double>& v)
{
    if (!v.prototypes.allFinite())
        throw RuntimeError("refusing to save a prototype matrix with NaN/Inf entries");
    const auto bytes = matrix_bytes(v.prototypes);
    {
        std::ofstream out(with_suffix(stem, ".bin"), std::ios::binary);
        if (!out)
            throw RuntimeError("cannot write " + with_suffix(stem, ".bin").string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    nlohmann::ordered_json j;
    j["kind"] = "prototype";
    j["classes"] = v.classes;
    j["D"] = v.prototypes.cols();
    j["rows"] = v.prototypes.rows();
    j["dtype"] = "float64-le";
    j["checksum"] = matrix_checksum(v.prototypes);
    j["trainable"] = v.trainable;
    j["source"] = nlohmann::ordered_json::array();
    for (const auto& s : v.sources) {
        nlohmann::ordered_json cs;
        cs["class"] = s.class_name;
        cs["n_kg"] = s.size_limit;
        cs["candidates"] = nlohmann::ordered_json::array();
        for (const auto& c : s.candidates)
            cs["candidates"].push_back({c.word, c.score});
        j["source"].push_back(cs);
    }
    std::ofstream out(with_suffix(stem, ".json"));
    if (!out)
        throw RuntimeError("cannot write " + with_suffix(stem, ".json").string());
    out << j.dump(2) << '\n';
}

PrototypeVerbalizer<double> load_prototype(const std::filesystem::path& stem)
{
    std::ifstream side(with_suffix(stem, ".json"));
    if (!side)
        throw DataError("cannot open " + with_suffix(stem, ".json").string());
    nlohmann::json j;
    try {
        side >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed prototype sidecar: " + std::string(e.what()));
    }
    PrototypeVerbalizer<double> v;
    v.classes = j.at("classes").get<std::vector<std::string>>();
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto dim = j.at("D").get<Eigen::Index>();
    v.trainable = j.value("trainable", true);
    if (rows != static_cast<Eigen::Index>(v.classes.size()))
        throw DataError("prototype sidecar: row count does not match class count");
    for (const auto& s : j.value("source", nlohmann::json::array())) {
        CandidateSet cs;
        cs.class_name = s.at("class").get<std::string>();
        cs.size_limit = s.value("n_kg", default_kg_size);
        for (const auto& c : s.at("candidates"))
            cs.candidates.push_back({c.at(0).get<std::string>(), c.at(1).get<double>()});
        v.sources.push_back(std::move(cs));
    }

    std::ifstream bin(with_suffix(stem, ".bin"), std::ios::binary);
    if (!bin)
        throw DataError("cannot open " + with_suffix(stem, ".bin").string());
    std::vector<char> bytes{std::istreambuf_iterator<char>(bin), std::istreambuf_iterator<char>()};
    if (bytes.size() != static_cast<std::size_t>(rows * dim) * sizeof(double))
        throw DataError("prototype matrix file has " + std::to_string(bytes.size()) + " bytes, expected " +
                        std::to_string(static_cast<std::size_t>(rows * dim) * sizeof(double)));
    v.prototypes.resize(rows, dim);
    std::size_t off = 0;
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < dim; ++c) {
            double x;
            std::memcpy(&x, bytes.data() + off, sizeof x);
            v.prototypes(r, c) = x;
            off += sizeof x;
        }
    if (matrix_checksum(v.prototypes) != j.at("checksum").get<std::string>())
        throw DataError("prototype matrix checksum mismatch for " + stem.string());
    return v;
}

} // namespace ipck
