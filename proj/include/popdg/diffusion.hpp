#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "popdg/ad.hpp"
#include "popdg/rng.hpp"
#include "popdg/skeleton.hpp"
#include "popdg/types.hpp"

namespace popdg::diffusion {

enum class ScheduleKind { linear, cosine };

ScheduleKind schedule_kind_from_string(const std::string& name);
std::string to_string(ScheduleKind kind);

// Per-timestep noise tables, 1-based access for t in [1, T].
// beta_tilde_t = ((1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)) * beta_t, with
// beta_tilde_1 := beta_1 (the t=1 posterior is degenerate).
struct NoiseSchedule {
  int T = 0;
  Vec beta;
  Vec alpha_bar;
  Vec beta_tilde;

  Scalar beta_at(int t) const;
  Scalar alpha_bar_at(int t) const;
  Scalar alpha_bar_before(int t) const;  // alpha_bar_{t-1}; defined as 1 at t=1
  Scalar beta_tilde_at(int t) const;

  void save_json(const std::string& path) const;
  static NoiseSchedule load_json(const std::string& path);
};

NoiseSchedule make_schedule(int T, ScheduleKind kind);

// Network prediction for one noisy sequence.
struct ModelOutput {
  Mat x_hat;  // N x 156 denoised pose estimate
  Mat v;      // variance coefficients in [0,1]: N x 156, or N x 1 per-frame
};

// z_t = sqrt(alpha_bar_t) x + sqrt(1 - alpha_bar_t) noise
Mat q_sample(const Mat& x, int t, const Mat& noise, const NoiseSchedule& s);

// Sigma = exp(v log beta_t + (1 - v) log beta_tilde_t), elementwise in v.
Scalar interp_variance(Scalar v, int t, const NoiseSchedule& s);
Mat interp_variance(const Mat& v, int t, const NoiseSchedule& s);

// Mean of q(z_{t-1} | z_t, x):
//   mu = sqrt(alpha_bar_{t-1}) beta_t / (1 - alpha_bar_t) * x
//      + sqrt(alpha_t) (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * z_t
Mat posterior_mean(const Mat& x, const Mat& z_t, int t, const NoiseSchedule& s);

// Mean squared error over every element.
Scalar loss_simple(const Mat& x, const Mat& x_hat);

// Variational-bound term for one timestep, in nats, averaged over elements.
// t > 1: KL(q(z_{t-1}|z_t,x) || p(z_{t-1}|z_t)) between Gaussians whose means
// come from the posterior-mean formula (x vs x_hat) and whose variances are
// beta_tilde_t vs interp_variance(v).  t = 1: Gaussian NLL of x under the
// model's (mean, variance).
Scalar loss_vlb_term(const Mat& x, const Mat& z_t, int t, const ModelOutput& out,
                     const NoiseSchedule& s);

// Tape version for training. detach_mean follows the usual learned-variance
// recipe: the x_hat path is cut inside this term so the VLB trains only the
// variance head while L_simple trains the mean.
ad::Var loss_vlb_term(ad::Tape& tape, ad::Var x_hat, ad::Var v, const Mat& x, const Mat& z_t,
                      int t, const NoiseSchedule& s, bool detach_mean = true);

// L_hybrid = L_simple + lambda * L_t / (T * p_t); the importance weight makes
// uniform-, or any-, p_t estimates unbiased for the mean VLB term.
Scalar loss_hybrid(Scalar simple, Scalar vlb_t, Scalar p_t, int T, Scalar lambda_vlb);

// Importance sampler over timesteps: p_t proportional to sqrt(E[L_t^2]) over
// a rolling window of 10 recorded values per t, uniform until every t has a
// full window, with a small uniform floor mixed in so every p_t stays > 0.
class VlbSampler {
 public:
  static constexpr int kHistory = 10;
  static constexpr Scalar kUniformMix = 0.001;

  explicit VlbSampler(int T);

  int T() const { return T_; }
  bool warm() const { return warm_count_ == T_; }
  // Current sampling distribution over t = 1..T (snapshot; sums to 1).
  Vec probabilities() const;
  Scalar probability(int t) const;
  int sample(Rng& rng);
  void record(int t, Scalar loss_t);

 private:
  int T_;
  std::vector<std::deque<Scalar>> history_;
  int warm_count_ = 0;
};

// One DDIM update from t to t_prev (t_prev may be 0, meaning the final x_hat):
//   eps_hat = (z_t - sqrt(abar_t) x_hat) / sqrt(1 - abar_t)
//   sigma   = eta sqrt((1-abar_prev)/(1-abar_t)) sqrt(1 - abar_t/abar_prev)
//   z_prev  = sqrt(abar_prev) x_hat + sqrt(1 - abar_prev - sigma^2) eps_hat
//          + sigma xi
// Noise is drawn from rng only when sigma > 0.
Mat ddim_step(const Mat& z_t, const ModelOutput& out, int t, int t_prev,
              const NoiseSchedule& s, Scalar eta, Rng& rng);

// Denoiser bound to its conditioning (music, weights); t in [1, T].
using Denoiser = std::function<ModelOutput(const Mat& z_t, int t)>;

// Full DDIM sampling loop over an evenly strided timestep ladder ending at 0.
// Contacts in the decoded sequence are thresholded at 0.5.
skeleton::MotionSequence sample(const Denoiser& model, int frames, const NoiseSchedule& s,
                                int n_ddim_steps, std::uint64_t seed, Scalar eta = 0.0,
                                Scalar fps = 30.0);

// The ascending, duplicate-free timestep ladder used by sample(); the loop
// walks it from the back and finishes with t_prev = 0.
std::vector<int> ddim_ladder(int T, int n_ddim_steps);

}  // namespace popdg::diffusion
