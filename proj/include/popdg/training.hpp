#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "popdg/ad.hpp"
#include "popdg/diffusion.hpp"
#include "popdg/popnet.hpp"
#include "popdg/skeleton.hpp"
#include "popdg/types.hpp"

namespace popdg::training {

// Objective weights: total = simple + lambda_vlb * vlb_t / (T p_t)
//                          + lambda_fk * fk + lambda_va * va + lambda_body * body.
struct LossWeights {
  Scalar lambda_vlb = 0.001;
  Scalar lambda_fk = 1.0;
  Scalar lambda_va = 1.0;
  Scalar lambda_body = 1.0;
  void validate() const;  // all weights must be >= 0
};

// Differentiable forward kinematics on a flat pose batch: N x 156 -> N x 72
// joint positions, same joint layout as skeleton::forward_kinematics.
// Degenerate rotation columns are length-clamped instead of throwing, so the
// zero-initialized network is trainable from its first step.
ad::Var fk_positions(ad::Tape& tape, ad::Var pose, const skeleton::JointTree& tree);
Mat fk_positions(const Mat& pose, const skeleton::JointTree& tree);

// Speed and acceleration match on the flat 156-d representation:
//   mean_i ||x'_i - xh'_i||^2 + mean_i ||x''_i - xh''_i||^2
// with forward differences scaled by fps. Sequences too short for a
// difference contribute zero for that term.
ad::Var loss_va(ad::Tape& tape, ad::Var x_hat, const Mat& x, Scalar fps);
Scalar loss_va(const Mat& x, const Mat& x_hat, Scalar fps);

// Mean over frames and joints of the squared joint-position error after
// forward kinematics (the 3 coordinates of each joint are summed).
ad::Var loss_fk(ad::Tape& tape, ad::Var x_hat, const Mat& x, const skeleton::JointTree& tree);
Scalar loss_fk(const Mat& x, const Mat& x_hat, const skeleton::JointTree& tree);

// Contact-consistency penalty on the model's own prediction: mean over the
// N-1 frame transitions and 9 contact slots of the squared displacement of
// each tracked joint, scaled by the (raw, unthresholded) predicted contact
// value of the earlier frame. Parts predicted to be in contact must not move.
ad::Var loss_body(ad::Tape& tape, ad::Var x_hat, const skeleton::JointTree& tree,
                  const skeleton::ContactMap& map = skeleton::ContactMap{});
Scalar loss_body(const Mat& x_hat, const skeleton::JointTree& tree,
                 const skeleton::ContactMap& map = skeleton::ContactMap{});

// Per-step component values for logging. The weighted fields are the actual
// contributions, so simple + vlb_weighted + fk_weighted + va_weighted +
// body_weighted reproduces total.
struct LossBreakdown {
  Scalar total = 0.0;
  Scalar simple = 0.0;
  Scalar vlb = 0.0;  // raw variational term for this t, before importance weighting
  Scalar vlb_weighted = 0.0;
  Scalar fk = 0.0;
  Scalar va = 0.0;
  Scalar body = 0.0;
  Scalar fk_weighted = 0.0;
  Scalar va_weighted = 0.0;
  Scalar body_weighted = 0.0;
};

struct TotalLoss {
  ad::Var value;        // differentiable total, 1 x 1
  LossBreakdown parts;  // scalar snapshot of every component
};

// Builds the full training objective on the tape. p_t is the sampling
// probability of timestep t (for the unbiased variational weight) and must be
// positive. Components with zero weight are skipped entirely, so no gradient
// flows through them.
TotalLoss total_loss(ad::Tape& tape, ad::Var x_hat, ad::Var v, const Mat& x, const Mat& z_t,
                     int t, Scalar p_t, const diffusion::NoiseSchedule& s,
                     const LossWeights& w, const skeleton::JointTree& tree, Scalar fps,
                     bool detach_mean = true);

enum class OptimizerKind { adan, adam };

// Decay-style smoothing factors: each state keeps beta of its history per
// step. The Adan defaults below correspond to the common (0.02, 0.08, 0.01)
// increment weights. Adam reads only the first two entries (set them to the
// usual 0.9 / 0.999 explicitly, or start from adam_defaults()).
struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adan;
  Scalar lr = 0.001;
  std::array<Scalar, 3> betas{0.98, 0.92, 0.99};
  Scalar eps = 1e-8;

  static OptimizerConfig adam_defaults();
  void validate() const;
};

// Adan (gradient-difference momentum) with an Adam fallback. Keeps one state
// tensor set per parameter; update order follows the store's declaration
// order. Bias-corrected throughout; the first step treats the previous
// gradient as equal to the current one.
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg, const popnet::ParamStore& params);

  int steps() const { return step_; }
  const OptimizerConfig& config() const { return cfg_; }

  // grads[i] pairs with params.names()[i]; every shape must match.
  void step(popnet::ParamStore& params, const std::vector<Mat>& grads);

 private:
  OptimizerConfig cfg_;
  std::vector<std::string> names_;
  std::vector<Mat> m_;       // first moment
  std::vector<Mat> d_;       // gradient-difference moment
  std::vector<Mat> n_;       // second moment
  std::vector<Mat> g_prev_;  // previous gradient (Adan only)
  int step_ = 0;
};

struct TrainSample {
  Mat motion;  // N x 156
  Mat music;   // N x music_dim, rows aligned with motion frames
};

struct TrainDataset {
  std::vector<TrainSample> items;
  Scalar fps = 30.0;
};

struct TrainConfig {
  int steps = 2000;
  int window = 150;  // frames per training window (random crop of longer clips)
  int timesteps = 1000;
  diffusion::ScheduleKind schedule = diffusion::ScheduleKind::cosine;
  LossWeights weights;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  std::string log_path;         // JSON-lines component log; empty disables
  int log_every = 1;
  std::string checkpoint_path;  // weight file; empty disables checkpointing
  int checkpoint_every = 0;     // intermediate saves; 0 means final only
  bool detach_mean = true;      // cut the mean path inside the variational term
  void validate() const;
};

struct TrainResult {
  popnet::ParamStore params;
  diffusion::NoiseSchedule schedule;
  std::vector<LossBreakdown> history;  // one entry per optimization step
};

// Runs the full loop: crop a window, draw a timestep from the importance
// sampler, noise it, run the network in training mode, build the objective,
// back-propagate, and apply one optimizer step. Deterministic given the seed.
// Aborts with step diagnostics when the loss turns non-finite.
TrainResult train(const popnet::AttentionConfig& cfg, const TrainDataset& data,
                  const TrainConfig& tc);

}  // namespace popdg::training
