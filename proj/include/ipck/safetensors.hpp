#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ipck {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Read-only view of a .safetensors file (F64, F32, F16 and BF16 tensors).
class SafeTensorsFile {
public:
    explicit SafeTensorsFile(const std::filesystem::path& path);

    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    std::vector<std::string> names() const;
    const std::vector<std::int64_t>& shape(const std::string& name) const;

    /// The tensor as rows = shape[0], cols = product of the remaining dims (1-D tensors are 1 x n).
    template <typename Scalar>
    RowMatrix<Scalar> matrix(const std::string& name) const
    {
        const auto& info = lookup(name);
        RowMatrix<Scalar> m(info.rows, info.cols);
        const auto values = decode(info);
        for (Eigen::Index i = 0; i < m.size(); ++i)
            m.data()[i] = static_cast<Scalar>(values[static_cast<std::size_t>(i)]);
        return m;
    }

private:
    struct TensorInfo {
        std::string dtype;
        std::vector<std::int64_t> shape;
        std::size_t begin = 0, end = 0;
        Eigen::Index rows = 0, cols = 0;
    };
    const TensorInfo& lookup(const std::string& name) const;
    std::vector<double> decode(const TensorInfo& info) const;

    std::filesystem::path path_;
    std::vector<char> data_;
    std::map<std::string, TensorInfo> tensors_;
};

struct TensorToWrite {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<float> values; ///< row-major
};

/// Write F32 tensors. Names are emitted in sorted order, as the reference implementation does.
void write_safetensors(const std::filesystem::path& path, std::vector<TensorToWrite> tensors,
                       const std::map<std::string, std::string>& metadata = {});

} // namespace ipck
