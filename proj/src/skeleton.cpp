#include "popdg/skeleton.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace popdg::skeleton {

namespace {

constexpr std::array<int, kNumJoints> kSmplParents = {
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21};

// Canonical humanoid rest offsets (meters), z up, y forward. Mirrors
// data/smpl_rest_offsets.json.
constexpr double kRestOffsets[kNumJoints][3] = {
    {0.000, 0.000, 0.000},    // 0  hip (root)
    {0.091, 0.000, -0.066},   // 1  left hip
    {-0.091, 0.000, -0.066},  // 2  right hip
    {0.000, 0.012, 0.105},    // 3  spine1
    {0.000, 0.000, -0.384},   // 4  left knee
    {0.000, 0.000, -0.384},   // 5  right knee
    {0.000, -0.008, 0.135},   // 6  spine2
    {0.000, 0.000, -0.400},   // 7  left ankle
    {0.000, 0.000, -0.400},   // 8  right ankle
    {0.000, 0.002, 0.055},    // 9  spine3
    {0.000, 0.135, -0.055},   // 10 left foot
    {0.000, 0.135, -0.055},   // 11 right foot
    {0.000, -0.012, 0.212},   // 12 neck
    {0.085, -0.005, 0.115},   // 13 left collar
    {-0.085, -0.005, 0.115},  // 14 right collar
    {0.000, 0.008, 0.095},    // 15 head
    {0.105, 0.000, 0.028},    // 16 left shoulder
    {-0.105, 0.000, 0.028},   // 17 right shoulder
    {0.260, 0.000, 0.000},    // 18 left elbow
    {-0.260, 0.000, 0.000},   // 19 right elbow
    {0.250, 0.000, 0.000},    // 20 left wrist
    {-0.250, 0.000, 0.000},   // 21 right wrist
    {0.085, 0.000, 0.000},    // 22 left hand
    {-0.085, 0.000, 0.000},   // 23 right hand
};

}  // namespace

JointTree JointTree::make(const std::array<int, kNumJoints>& parent,
                          const Eigen::Matrix<Scalar, kNumJoints, 3>& rest_offset) {
  check(parent[0] == -1 || parent[0] == 0, "JointTree: joint 0 must be the root");
  JointTree tree;
  tree.parent = parent;
  tree.parent[0] = -1;
  tree.rest_offset = rest_offset;
  tree.level[0] = 0;
  for (int j = 1; j < kNumJoints; ++j) {
    check(parent[j] >= 0 && parent[j] < j,
          "JointTree: parent of joint " + std::to_string(j) + " must precede it");
    tree.level[j] = tree.level[parent[j]] + 1;
  }
  return tree;
}

const JointTree& default_tree() {
  static const JointTree tree = [] {
    Eigen::Matrix<Scalar, kNumJoints, 3> offsets;
    for (int j = 0; j < kNumJoints; ++j)
      for (int c = 0; c < 3; ++c) offsets(j, c) = kRestOffsets[j][c];
    return JointTree::make(kSmplParents, offsets);
  }();
  return tree;
}

Eigen::Matrix<Scalar, kNumJoints, 3> load_rest_offsets(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "cannot open rest-offset file: " + path);
  nlohmann::json j;
  in >> j;
  check(j.is_array() && j.size() == kNumJoints,
        "rest-offset file must hold exactly 24 rows: " + path);
  Eigen::Matrix<Scalar, kNumJoints, 3> offsets;
  for (int r = 0; r < kNumJoints; ++r) {
    check(j[r].is_array() && j[r].size() == 3, "rest-offset row " + std::to_string(r) +
                                                   " must hold 3 numbers: " + path);
    for (int c = 0; c < 3; ++c) offsets(r, c) = j[r][c].get<double>();
  }
  return offsets;
}

PoseFrame PoseFrame::rest() {
  PoseFrame f;
  for (int j = 0; j < kNumJoints; ++j) {
    f.joint_rot6d(j, 0) = 1.0;  // identity rotation: columns (1,0,0), (0,1,0)
    f.joint_rot6d(j, 4) = 1.0;
  }
  return f;
}

Vec PoseFrame::flatten() const {
  Vec x(kPoseDim);
  x.head<3>() = root_translation;
  for (int j = 0; j < kNumJoints; ++j)
    x.segment<kRotDim>(kRootDim + j * kRotDim) = joint_rot6d.row(j).transpose();
  x.tail<kNumContacts>() = contacts;
  return x;
}

PoseFrame PoseFrame::unflatten(const Vec& x) {
  check(x.size() == kPoseDim,
        "PoseFrame::unflatten expects 156 values, got " + std::to_string(x.size()));
  PoseFrame f;
  f.root_translation = x.head<3>();
  for (int j = 0; j < kNumJoints; ++j)
    f.joint_rot6d.row(j) = x.segment<kRotDim>(kRootDim + j * kRotDim).transpose();
  f.contacts = x.tail<kNumContacts>();
  return f;
}

Mat MotionSequence::as_matrix() const {
  Mat m(length(), kPoseDim);
  for (int i = 0; i < length(); ++i) m.row(i) = frames[i].flatten().transpose();
  return m;
}

MotionSequence MotionSequence::from_matrix(const Mat& m, Scalar fps) {
  check(m.cols() == kPoseDim, "motion matrix must have 156 columns");
  check(fps > 0, "fps must be positive");
  MotionSequence seq;
  seq.fps = fps;
  seq.frames.reserve(m.rows());
  for (int i = 0; i < m.rows(); ++i)
    seq.frames.push_back(PoseFrame::unflatten(m.row(i).transpose()));
  return seq;
}

Mat3 rot6d_to_matrix(const Eigen::Matrix<Scalar, 6, 1>& r) {
  constexpr Scalar kEps = 1e-12;
  const Vec3 a1 = r.head<3>();
  const Vec3 a2 = r.tail<3>();
  const Scalar n1 = a1.norm();
  if (n1 < kEps) throw Error("degenerate 6d rotation: first column has zero norm");
  const Vec3 b1 = a1 / n1;
  const Vec3 res = a2 - b1.dot(a2) * b1;
  const Scalar n2 = res.norm();
  if (n2 < kEps)
    throw Error("degenerate 6d rotation: columns are parallel or second column is zero");
  const Vec3 b2 = res / n2;
  Mat3 R;
  R.col(0) = b1;
  R.col(1) = b2;
  R.col(2) = b1.cross(b2);
  return R;
}

Eigen::Matrix<Scalar, 6, 1> matrix_to_rot6d(const Mat3& R) {
  Eigen::Matrix<Scalar, 6, 1> r;
  r.head<3>() = R.col(0);
  r.tail<3>() = R.col(1);
  return r;
}

Eigen::Matrix<Scalar, kNumJoints, 3> forward_kinematics_frame(const PoseFrame& frame,
                                                              const JointTree& tree) {
  std::array<Mat3, kNumJoints> global;
  Eigen::Matrix<Scalar, kNumJoints, 3> pos;
  global[0] = rot6d_to_matrix(frame.joint_rot6d.row(0).transpose());
  // Accumulate positions relative to the root, then translate once at the
  // end: root shifts then commute bitwise with the kinematic chain.
  pos.row(0).setZero();
  for (int j = 1; j < kNumJoints; ++j) {
    const int p = tree.parent[j];
    const Mat3 local = rot6d_to_matrix(frame.joint_rot6d.row(j).transpose());
    global[j] = global[p] * local;
    pos.row(j) = pos.row(p) + (global[p] * tree.rest_offset.row(j).transpose()).transpose();
  }
  pos.rowwise() += frame.root_translation.transpose();
  return pos;
}

Mat forward_kinematics(const MotionSequence& seq, const JointTree& tree) {
  Mat positions(seq.length(), kNumJoints * 3);
  for (int i = 0; i < seq.length(); ++i) {
    try {
      const auto pos = forward_kinematics_frame(seq.frames[i], tree);
      for (int j = 0; j < kNumJoints; ++j) positions.block<1, 3>(i, 3 * j) = pos.row(j);
    } catch (const Error& e) {
      // Re-run joint by joint to pin down which rotation failed.
      int bad = -1;
      for (int j = 0; j < kNumJoints; ++j) {
        try {
          rot6d_to_matrix(seq.frames[i].joint_rot6d.row(j).transpose());
        } catch (const Error&) {
          bad = j;
          break;
        }
      }
      throw Error("forward_kinematics: frame " + std::to_string(i) + ", joint " +
                  std::to_string(bad) + ": " + e.what());
    }
  }
  return positions;
}

Mat compute_contacts(const Mat& positions, Scalar fps, Scalar vel_eps, Scalar height_eps,
                     const ContactMap& map) {
  const int n = static_cast<int>(positions.rows());
  check(n >= 2, "compute_contacts needs at least 2 frames");
  check(fps > 0, "fps must be positive");
  Mat contacts = Mat::Zero(n, kNumContacts);
  for (int i = 0; i < n; ++i) {
    const int d = (i < n - 1) ? i : n - 2;  // last frame reuses previous difference
    for (int s = 0; s < kNumContacts; ++s) {
      const int j = map.joint[s];
      const Vec3 v = (joint_position(positions, d + 1, j) - joint_position(positions, d, j)) * fps;
      bool contact = v.norm() < vel_eps;
      if (map.height_gated[s]) contact = contact && positions(i, 3 * j + 2) < height_eps;
      contacts(i, s) = contact ? 1.0 : 0.0;
    }
  }
  return contacts;
}

Mat velocities(const Mat& per_frame, Scalar fps) {
  check(per_frame.rows() >= 2, "velocities need at least 2 frames");
  check(fps > 0, "fps must be positive");
  return (per_frame.bottomRows(per_frame.rows() - 1) - per_frame.topRows(per_frame.rows() - 1)) *
         fps;
}

Mat accelerations(const Mat& per_frame, Scalar fps) {
  check(per_frame.rows() >= 3, "accelerations need at least 3 frames");
  return velocities(velocities(per_frame, fps), fps);
}

}  // namespace popdg::skeleton
