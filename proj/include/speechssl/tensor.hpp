#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace speechssl {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using MatF = Mat<float>;
using MatD = Mat<double>;

/// A trainable tensor. The logical shape is kept for serialization; storage
/// is a 2-D matrix whose column count is the last dim and whose row count is
/// the product of the leading dims (1 for vectors).
template <typename T>
struct Param {
    std::string name;
    std::vector<int> shape;
    Mat<T> value;
    Mat<T> grad;

    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
};

/// Name and shape of a parameter, without storage.
struct ParamShape {
    std::string name;
    std::vector<int> shape;

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (int d : shape) n *= d;
        return n;
    }
};

inline std::pair<int, int> storage_dims(const std::vector<int>& shape) {
    int rows = 1;
    for (std::size_t i = 0; i + 1 < shape.size(); ++i) rows *= shape[i];
    return {rows, shape.empty() ? 1 : shape.back()};
}

}  // namespace speechssl
