#pragma once

#include <Eigen/Core>
#include <string>

namespace unilex {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// A named trainable tensor. Gradients accumulate into `grad` when the tape
/// that used it runs backward; the optimizer owns zeroing them.
struct Parameter {
    std::string name;
    Mat value;
    Mat grad;

    Parameter() = default;
    Parameter(std::string n, Mat v) : name(std::move(n)), value(std::move(v)) {
        grad = Mat::Zero(value.rows(), value.cols());
    }

    Eigen::Index size() const { return value.size(); }
};

}  // namespace unilex
