#pragma once

#include <Eigen/Dense>

namespace pcd {

using Matrix = Eigen::MatrixXd;

}  // namespace pcd
