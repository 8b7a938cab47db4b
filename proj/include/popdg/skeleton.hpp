#pragma once

#include <array>
#include <string>
#include <vector>

#include "popdg/types.hpp"

namespace popdg::skeleton {

// 24-joint SMPL-style body. Joint 0 (hip) is the root; parents are listed in
// topological order so parent[j] < j for every non-root joint.
struct JointTree {
  std::array<int, kNumJoints> parent{};                // -1 for the root
  Eigen::Matrix<Scalar, kNumJoints, 3> rest_offset;    // meters, from parent
  std::array<int, kNumJoints> level{};                 // distance from root

  static JointTree make(const std::array<int, kNumJoints>& parent,
                        const Eigen::Matrix<Scalar, kNumJoints, 3>& rest_offset);
};

// Canonical humanoid: SMPL topology with rest offsets from data/smpl_rest_offsets.json.
const JointTree& default_tree();

// Loads a 24x3 offset table (meters) from a JSON file holding [[x,y,z],...].
Eigen::Matrix<Scalar, kNumJoints, 3> load_rest_offsets(const std::string& path);

struct PoseFrame {
  Vec3 root_translation = Vec3::Zero();
  Eigen::Matrix<Scalar, kNumJoints, kRotDim> joint_rot6d =
      Eigen::Matrix<Scalar, kNumJoints, kRotDim>::Zero();
  Eigen::Matrix<Scalar, kNumContacts, 1> contacts =
      Eigen::Matrix<Scalar, kNumContacts, 1>::Zero();

  // Rest pose: identity rotations, zero translation, zero contacts.
  static PoseFrame rest();

  Vec flatten() const;                       // -> R^156
  static PoseFrame unflatten(const Vec& x);  // <- R^156
};

struct MotionSequence {
  std::vector<PoseFrame> frames;
  Scalar fps = 30.0;

  int length() const { return static_cast<int>(frames.size()); }
  Mat as_matrix() const;  // N x 156
  static MotionSequence from_matrix(const Mat& m, Scalar fps);
};

// First two columns of a rotation matrix -> full rotation via Gram-Schmidt.
// r = (a1, a2): b1 = a1/|a1|, b2 = normalize(a2 - (b1.a2) b1), b3 = b1 x b2.
// Throws on zero or parallel columns.
Mat3 rot6d_to_matrix(const Eigen::Matrix<Scalar, 6, 1>& r);

// Inverse embedding: first two columns of R, stacked.
Eigen::Matrix<Scalar, 6, 1> matrix_to_rot6d(const Mat3& R);

// Joint positions for every frame, row i = [p0 | p1 | ... | p23] (N x 72).
// position(root) = root_translation;
// position(j)    = position(parent) + R_global(parent) * rest_offset(j).
Mat forward_kinematics(const MotionSequence& seq, const JointTree& tree);
Eigen::Matrix<Scalar, kNumJoints, 3> forward_kinematics_frame(const PoseFrame& frame,
                                                              const JointTree& tree);

inline Vec3 joint_position(const Mat& positions, int frame, int joint) {
  return positions.block<1, 3>(frame, 3 * joint).transpose();
}

// Contact slot -> tracked joint. Default assignment:
// [L-heel, L-toe, R-heel, R-toe, L-hand, R-hand, head, neck, root];
// the four foot slots are additionally gated on height above ground (z).
struct ContactMap {
  std::array<int, kNumContacts> joint{7, 10, 8, 11, 22, 23, 15, 12, 0};
  std::array<bool, kNumContacts> height_gated{true, true, true, true,
                                              false, false, false, false, false};
};

// Binary contact flags per frame (N x 9). A bit is 1 iff the tracked point's
// speed < vel_eps and, for height-gated slots, its z < height_eps. The last
// frame reuses the previous forward difference.
Mat compute_contacts(const Mat& positions, Scalar fps, Scalar vel_eps, Scalar height_eps,
                     const ContactMap& map = ContactMap{});

// Forward differences: v_i = (p_{i+1} - p_i) * fps, length N-1.
Mat velocities(const Mat& per_frame, Scalar fps);
// a_i = (v_{i+1} - v_i) * fps, length N-2.
Mat accelerations(const Mat& per_frame, Scalar fps);

}  // namespace popdg::skeleton
