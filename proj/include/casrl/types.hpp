#pragma once

#include <Eigen/Core>

#include <stdexcept>
#include <string>

namespace casrl {

// Dense row-major doubles everywhere. Desk-scale sizes make 64-bit precision
// cheaper than speed tuning.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using Arr = Eigen::ArrayXd;
using Index = Eigen::Index;

// Violated operation precondition (caller bug).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

// Incompatible shapes fed to a numeric operation.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

// NaN/Inf where a finite value is required.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

inline std::string shape_str(const Mat& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace casrl
