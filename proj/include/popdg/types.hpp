#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace popdg {

using Scalar = double;
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
using Mat3 = Eigen::Matrix<Scalar, 3, 3>;

// Pose layout: 3 root translation + 24 joints * 6d rotation + 9 contact bits.
inline constexpr int kNumJoints = 24;
inline constexpr int kNumContacts = 9;
inline constexpr int kRootDim = 3;
inline constexpr int kRotDim = 6;
inline constexpr int kPoseDim = kRootDim + kNumJoints * kRotDim + kNumContacts;  // 156
inline constexpr int kContactOffset = kRootDim + kNumJoints * kRotDim;          // 147

// Thrown on contract violations: bad shapes, invalid configs, malformed files.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

}  // namespace popdg
