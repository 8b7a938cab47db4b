#include "popdg/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "popdg/rng.hpp"

namespace popdg::training {

namespace {

Scalar value_of(ad::Tape& tape, const ad::Var& v) { return tape.value(v)(0, 0); }

ad::Var zero_scalar(ad::Tape& tape) { return tape.constant(Mat::Zero(1, 1)); }

// Forward differences between consecutive rows, scaled to per-second units.
ad::Var row_rates(ad::Tape& tape, ad::Var x, Scalar fps) {
  (void)tape;
  const int n = x.rows();
  return ad::scale(ad::sub(ad::slice(x, 1, n - 1, 0, x.cols()),
                           ad::slice(x, 0, n - 1, 0, x.cols())),
                   fps);
}

// Lifts a constant parent-relative offset o into the 9 x 3 matrix L with
// (R_rowmajor9 * L) == R * o for rows storing a 3x3 matrix column-major.
Mat offset_lift(const Eigen::Matrix<Scalar, 1, 3>& o) {
  Mat lift = Mat::Zero(9, 3);
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < 3; ++r) lift(3 * c + r, r) = o(c);
  return lift;
}

}  // namespace

void LossWeights::validate() const {
  check(lambda_vlb >= 0 && lambda_fk >= 0 && lambda_va >= 0 && lambda_body >= 0,
        "loss weights must be non-negative");
  check(std::isfinite(lambda_vlb) && std::isfinite(lambda_fk) && std::isfinite(lambda_va) &&
            std::isfinite(lambda_body),
        "loss weights must be finite");
}

ad::Var fk_positions(ad::Tape& tape, ad::Var pose, const skeleton::JointTree& tree) {
  check(pose.cols() == kPoseDim,
        "fk_positions: pose must have 156 columns, got " + std::to_string(pose.cols()));
  check(pose.rows() >= 1, "fk_positions: need at least one frame");
  const int n = pose.rows();

  // Per-joint rotation from its 6d coordinates via row-wise Gram-Schmidt;
  // each result row stores the 3x3 matrix column-major.
  std::vector<ad::Var> local(kNumJoints);
  for (int j = 0; j < kNumJoints; ++j) {
    ad::Var a1 = ad::slice(pose, 0, n, kRootDim + kRotDim * j, 3);
    ad::Var a2 = ad::slice(pose, 0, n, kRootDim + kRotDim * j + 3, 3);
    ad::Var b1 = ad::normalize_rows(a1);
    ad::Var along = ad::rowsum(ad::cmul(b1, a2));  // N x 1 projection coefficients
    ad::Var b2 = ad::normalize_rows(ad::sub(a2, ad::mul_colvec(b1, along)));
    ad::Var b3 = ad::cross3(b1, b2);
    local[j] = ad::concat_cols({b1, b2, b3});
  }

  std::vector<ad::Var> global(kNumJoints);
  std::vector<ad::Var> position(kNumJoints);
  global[0] = local[0];
  position[0] = ad::slice(pose, 0, n, 0, 3);
  for (int j = 1; j < kNumJoints; ++j) {
    const int p = tree.parent[j];
    global[j] = ad::matmul3_rows(global[p], local[j]);
    ad::Var offset = ad::matmul(global[p], tape.constant(offset_lift(tree.rest_offset.row(j))));
    position[j] = ad::add(position[p], offset);
  }
  return ad::concat_cols(position);  // N x 72
}

Mat fk_positions(const Mat& pose, const skeleton::JointTree& tree) {
  ad::Tape tape(false);
  return tape.value(fk_positions(tape, tape.constant(pose), tree));
}

ad::Var loss_va(ad::Tape& tape, ad::Var x_hat, const Mat& x, Scalar fps) {
  check(x.rows() == x_hat.rows() && x.cols() == x_hat.cols(),
        "loss_va: x and x_hat shapes differ");
  check(fps > 0, "loss_va: fps must be positive");
  const int n = static_cast<int>(x.rows());
  if (n < 2) return zero_scalar(tape);

  ad::Var vx = row_rates(tape, tape.constant(x), fps);
  ad::Var vh = row_rates(tape, x_hat, fps);
  ad::Var loss = ad::scale(ad::sum(ad::square(ad::sub(vh, vx))), 1.0 / (n - 1));
  if (n >= 3) {
    ad::Var ax = row_rates(tape, vx, fps);
    ad::Var ah = row_rates(tape, vh, fps);
    loss = ad::add(loss, ad::scale(ad::sum(ad::square(ad::sub(ah, ax))), 1.0 / (n - 2)));
  }
  return loss;
}

Scalar loss_va(const Mat& x, const Mat& x_hat, Scalar fps) {
  ad::Tape tape(false);
  return value_of(tape, loss_va(tape, tape.constant(x_hat), x, fps));
}

ad::Var loss_fk(ad::Tape& tape, ad::Var x_hat, const Mat& x, const skeleton::JointTree& tree) {
  check(x.rows() == x_hat.rows() && x.cols() == x_hat.cols(),
        "loss_fk: x and x_hat shapes differ");
  const int n = static_cast<int>(x.rows());
  ad::Var px = fk_positions(tape, tape.constant(x), tree);
  ad::Var ph = fk_positions(tape, x_hat, tree);
  return ad::scale(ad::sum(ad::square(ad::sub(ph, px))),
                   1.0 / (static_cast<Scalar>(n) * kNumJoints));
}

Scalar loss_fk(const Mat& x, const Mat& x_hat, const skeleton::JointTree& tree) {
  ad::Tape tape(false);
  return value_of(tape, loss_fk(tape, tape.constant(x_hat), x, tree));
}

ad::Var loss_body(ad::Tape& tape, ad::Var x_hat, const skeleton::JointTree& tree,
                  const skeleton::ContactMap& map) {
  check(x_hat.cols() == kPoseDim, "loss_body: x_hat must have 156 columns");
  const int n = x_hat.rows();
  if (n < 2) return zero_scalar(tape);

  ad::Var positions = fk_positions(tape, x_hat, tree);
  std::vector<ad::Var> tracked;
  tracked.reserve(kNumContacts);
  for (int s = 0; s < kNumContacts; ++s)
    tracked.push_back(ad::slice(positions, 0, n, 3 * map.joint[s], 3));
  ad::Var p = ad::concat_cols(tracked);  // N x 27
  ad::Var dp = ad::sub(ad::slice(p, 1, n - 1, 0, 3 * kNumContacts),
                       ad::slice(p, 0, n - 1, 0, 3 * kNumContacts));

  // Spread each contact channel of the earlier frame over its slot's 3
  // displacement coordinates.
  ad::Var contacts = ad::slice(x_hat, 0, n - 1, kContactOffset, kNumContacts);
  Mat spread = Mat::Zero(kNumContacts, 3 * kNumContacts);
  for (int s = 0; s < kNumContacts; ++s) spread.block(s, 3 * s, 1, 3).setOnes();
  ad::Var gated = ad::cmul(dp, ad::matmul(contacts, tape.constant(spread)));
  return ad::scale(ad::sum(ad::square(gated)),
                   1.0 / (static_cast<Scalar>(n - 1) * kNumContacts));
}

Scalar loss_body(const Mat& x_hat, const skeleton::JointTree& tree,
                 const skeleton::ContactMap& map) {
  ad::Tape tape(false);
  return value_of(tape, loss_body(tape, tape.constant(x_hat), tree, map));
}

TotalLoss total_loss(ad::Tape& tape, ad::Var x_hat, ad::Var v, const Mat& x, const Mat& z_t,
                     int t, Scalar p_t, const diffusion::NoiseSchedule& s,
                     const LossWeights& w, const skeleton::JointTree& tree, Scalar fps,
                     bool detach_mean) {
  w.validate();
  check(x.rows() == x_hat.rows() && x.cols() == x_hat.cols(),
        "total_loss: x and x_hat shapes differ");
  check(z_t.rows() == x.rows() && z_t.cols() == x.cols(),
        "total_loss: z_t shape differs from x");
  check(t >= 1 && t <= s.T, "total_loss: t out of range");
  check(fps > 0, "total_loss: fps must be positive");

  TotalLoss out;
  ad::Var total = ad::mse(x_hat, tape.constant(x));
  out.parts.simple = value_of(tape, total);

  if (w.lambda_vlb > 0) {
    check(p_t > 0, "total_loss: p_t must be positive when the variational term is active");
    ad::Var vlb = diffusion::loss_vlb_term(tape, x_hat, v, x, z_t, t, s, detach_mean);
    out.parts.vlb = value_of(tape, vlb);
    ad::Var weighted = ad::scale(vlb, w.lambda_vlb / (static_cast<Scalar>(s.T) * p_t));
    out.parts.vlb_weighted = value_of(tape, weighted);
    total = ad::add(total, weighted);
  }
  if (w.lambda_fk > 0) {
    ad::Var fk = loss_fk(tape, x_hat, x, tree);
    out.parts.fk = value_of(tape, fk);
    ad::Var weighted = ad::scale(fk, w.lambda_fk);
    out.parts.fk_weighted = value_of(tape, weighted);
    total = ad::add(total, weighted);
  }
  if (w.lambda_va > 0) {
    ad::Var va = loss_va(tape, x_hat, x, fps);
    out.parts.va = value_of(tape, va);
    ad::Var weighted = ad::scale(va, w.lambda_va);
    out.parts.va_weighted = value_of(tape, weighted);
    total = ad::add(total, weighted);
  }
  if (w.lambda_body > 0) {
    ad::Var body = loss_body(tape, x_hat, tree);
    out.parts.body = value_of(tape, body);
    ad::Var weighted = ad::scale(body, w.lambda_body);
    out.parts.body_weighted = value_of(tape, weighted);
    total = ad::add(total, weighted);
  }
  out.value = total;
  out.parts.total = value_of(tape, total);
  return out;
}

OptimizerConfig OptimizerConfig::adam_defaults() {
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::adam;
  cfg.betas = {0.9, 0.999, 0.0};
  return cfg;
}

void OptimizerConfig::validate() const {
  check(lr > 0, "optimizer: lr must be positive");
  check(eps > 0, "optimizer: eps must be positive");
  const int used = kind == OptimizerKind::adan ? 3 : 2;
  for (int i = 0; i < used; ++i)
    check(betas[i] > 0 && betas[i] < 1, "optimizer: betas must lie strictly inside (0,1)");
}

Optimizer::Optimizer(const OptimizerConfig& cfg, const popnet::ParamStore& params)
    : cfg_(cfg), names_(params.names()) {
  cfg_.validate();
  m_.reserve(names_.size());
  n_.reserve(names_.size());
  d_.reserve(names_.size());
  g_prev_.reserve(names_.size());
  for (const std::string& name : names_) {
    const Mat& w = params.at(name);
    m_.push_back(Mat::Zero(w.rows(), w.cols()));
    n_.push_back(Mat::Zero(w.rows(), w.cols()));
    d_.push_back(Mat::Zero(w.rows(), w.cols()));
    g_prev_.push_back(Mat::Zero(w.rows(), w.cols()));
  }
}

void Optimizer::step(popnet::ParamStore& params, const std::vector<Mat>& grads) {
  check(grads.size() == names_.size(),
        "optimizer: expected " + std::to_string(names_.size()) + " gradients, got " +
            std::to_string(grads.size()));
  for (std::size_t i = 0; i < names_.size(); ++i) {
    const Mat& w = params.at(names_[i]);
    check(grads[i].rows() == w.rows() && grads[i].cols() == w.cols(),
          "optimizer: gradient shape mismatch for " + names_[i]);
  }
  ++step_;
  const Scalar b1 = cfg_.betas[0];
  const Scalar b2 = cfg_.betas[1];
  const Scalar b3 = cfg_.betas[2];
  const Scalar cm = 1.0 - std::pow(b1, step_);
  const Scalar cd = 1.0 - std::pow(b2, step_);
  const Scalar cn = 1.0 - std::pow(cfg_.kind == OptimizerKind::adan ? b3 : b2, step_);

  for (std::size_t i = 0; i < names_.size(); ++i) {
    Mat& w = params.at(names_[i]);
    const Mat& g = grads[i];
    if (cfg_.kind == OptimizerKind::adam) {
      m_[i] = b1 * m_[i] + (1.0 - b1) * g;
      n_[i] = (b2 * n_[i]).eval() + (1.0 - b2) * g.array().square().matrix();
      w.array() -=
          cfg_.lr * (m_[i].array() / cm) / ((n_[i].array() / cn).sqrt() + cfg_.eps);
    } else {
      // First step: no previous gradient yet, so the difference term is zero.
      const Mat diff =
          step_ == 1 ? Mat::Zero(g.rows(), g.cols()).eval() : (g - g_prev_[i]).eval();
      m_[i] = b1 * m_[i] + (1.0 - b1) * g;
      d_[i] = b2 * d_[i] + (1.0 - b2) * diff;
      const Mat update_direction = g + b2 * diff;
      n_[i] = (b3 * n_[i]).eval() + (1.0 - b3) * update_direction.array().square().matrix();
      w.array() -= cfg_.lr * (m_[i].array() / cm + b2 * (d_[i].array() / cd)) /
                   ((n_[i].array() / cn).sqrt() + cfg_.eps);
      g_prev_[i] = g;
    }
  }
}

void TrainConfig::validate() const {
  check(steps > 0, "train: steps must be positive");
  check(window >= 1, "train: window must be at least 1 frame");
  check(timesteps >= 1, "train: timesteps must be at least 1");
  check(log_every >= 1, "train: log_every must be at least 1");
  check(checkpoint_every >= 0, "train: checkpoint_every must be non-negative");
  check(checkpoint_every == 0 || !checkpoint_path.empty(),
        "train: periodic checkpoints need a checkpoint path");
  weights.validate();
  optimizer.validate();
}

TrainResult train(const popnet::AttentionConfig& cfg, const TrainDataset& data,
                  const TrainConfig& tc) {
  cfg.validate();
  tc.validate();
  check(!data.items.empty(), "train: dataset is empty");
  check(data.fps > 0, "train: fps must be positive");
  for (std::size_t i = 0; i < data.items.size(); ++i) {
    const TrainSample& item = data.items[i];
    const std::string tag = "train: item " + std::to_string(i);
    check(item.motion.cols() == kPoseDim, tag + " motion must have 156 columns");
    check(item.music.rows() == item.motion.rows(), tag + " music/motion frame counts differ");
    check(item.music.cols() == cfg.music_dim, tag + " music width differs from the model's");
    check(item.motion.rows() >= tc.window, tag + " is shorter than the training window");
  }

  const skeleton::JointTree& tree = skeleton::default_tree();
  TrainResult result;
  result.schedule = diffusion::make_schedule(tc.timesteps, tc.schedule);
  result.params = popnet::make_params(cfg);
  popnet::init_weights(result.params, cfg, tc.seed);
  result.history.reserve(tc.steps);

  Optimizer opt(tc.optimizer, result.params);
  diffusion::VlbSampler sampler(tc.timesteps);
  Rng pick = Rng::stream(tc.seed, "train-pick");
  Rng tdraw = Rng::stream(tc.seed, "train-t");

  std::ofstream log;
  if (!tc.log_path.empty()) {
    log.open(tc.log_path);
    check(log.good(), "train: cannot open log file " + tc.log_path);
  }

  const auto started = std::chrono::steady_clock::now();
  for (int step = 0; step < tc.steps; ++step) {
    const TrainSample& item = data.items[pick.below(data.items.size())];
    const int n = static_cast<int>(item.motion.rows());
    const int start =
        n == tc.window
            ? 0
            : static_cast<int>(pick.below(static_cast<std::uint64_t>(n - tc.window) + 1));
    const Mat x = item.motion.middleRows(start, tc.window);
    const Mat music = item.music.middleRows(start, tc.window);

    const int t = sampler.sample(tdraw);
    const Scalar p_t = sampler.probability(t);
    Rng noise_rng = Rng::stream(tc.seed, "train-noise", static_cast<std::uint64_t>(step));
    Mat noise(tc.window, kPoseDim);
    for (int r = 0; r < noise.rows(); ++r)
      for (int c = 0; c < noise.cols(); ++c) noise(r, c) = noise_rng.normal();
    const Mat z_t = diffusion::q_sample(x, t, noise, result.schedule);

    LossBreakdown parts;
    {
      ad::Tape tape;
      popnet::BoundParams bound(tape, result.params);
      Rng mask_rng = Rng::stream(tc.seed, "train-mask", static_cast<std::uint64_t>(step));
      popnet::ForwardOutput fwd =
          popnet::popdg_forward(tape, bound, cfg, z_t, t, music, true, &mask_rng);
      TotalLoss loss = total_loss(tape, fwd.x_hat, fwd.v, x, z_t, t, p_t, result.schedule,
                                  tc.weights, tree, data.fps, tc.detach_mean);
      parts = loss.parts;
      if (!std::isfinite(parts.total))
        throw Error("train: non-finite loss at step " + std::to_string(step) +
                    " (t=" + std::to_string(t) + ", simple=" + std::to_string(parts.simple) +
                    ", vlb=" + std::to_string(parts.vlb) + ", fk=" + std::to_string(parts.fk) +
                    ", va=" + std::to_string(parts.va) +
                    ", body=" + std::to_string(parts.body) + ")");
      tape.backward(loss.value);
      std::vector<Mat> grads;
      grads.reserve(result.params.names().size());
      for (const std::string& name : result.params.names())
        grads.push_back(tape.grad(bound.at(name)));
      opt.step(result.params, grads);
    }
    if (tc.weights.lambda_vlb > 0) sampler.record(t, parts.vlb);
    result.history.push_back(parts);

    if (log.is_open() && (step % tc.log_every == 0 || step + 1 == tc.steps)) {
      const double wall_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started)
              .count();
      const nlohmann::json line = {{"step", step},
                                   {"t", t},
                                   {"total", parts.total},
                                   {"simple", parts.simple},
                                   {"vlb", parts.vlb},
                                   {"fk", parts.fk},
                                   {"va", parts.va},
                                   {"body", parts.body},
                                   {"wall_ms", wall_ms}};
      log << line.dump() << "\n";
      check(log.good(), "train: failed writing log " + tc.log_path);
    }
    if (tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0)
      popnet::save_checkpoint(tc.checkpoint_path, cfg, result.params);
  }
  if (!tc.checkpoint_path.empty())
    popnet::save_checkpoint(tc.checkpoint_path, cfg, result.params);
  return result;
}

}  // namespace popdg::training
