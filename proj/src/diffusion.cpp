#include "popdg/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace popdg::diffusion {

namespace {

constexpr Scalar kPi = 3.14159265358979323846;
constexpr Scalar kLog2Pi = 1.8378770664093454836;

void check_t(int t, const NoiseSchedule& s, const char* where) {
  check(t >= 1 && t <= s.T,
        std::string(where) + ": timestep " + std::to_string(t) + " outside [1, " +
            std::to_string(s.T) + "]");
}

void check_same_shape(const Mat& a, const Mat& b, const char* where) {
  check(a.rows() == b.rows() && a.cols() == b.cols(),
        std::string(where) + ": shape mismatch");
}

// Variance coefficients may be per frame-channel (N x C) or per frame (N x 1).
void check_v_shape(const Mat& v, const Mat& x, const char* where) {
  check(v.rows() == x.rows() && (v.cols() == x.cols() || v.cols() == 1),
        std::string(where) + ": v must be N x C or N x 1");
}

}  // namespace

ScheduleKind schedule_kind_from_string(const std::string& name) {
  if (name == "linear") return ScheduleKind::linear;
  if (name == "cosine") return ScheduleKind::cosine;
  throw Error("unknown schedule kind: " + name);
}

std::string to_string(ScheduleKind kind) {
  return kind == ScheduleKind::linear ? "linear" : "cosine";
}

Scalar NoiseSchedule::beta_at(int t) const {
  check_t(t, *this, "beta_at");
  return beta(t - 1);
}

Scalar NoiseSchedule::alpha_bar_at(int t) const {
  check_t(t, *this, "alpha_bar_at");
  return alpha_bar(t - 1);
}

Scalar NoiseSchedule::alpha_bar_before(int t) const {
  check_t(t, *this, "alpha_bar_before");
  return t == 1 ? 1.0 : alpha_bar(t - 2);
}

Scalar NoiseSchedule::beta_tilde_at(int t) const {
  check_t(t, *this, "beta_tilde_at");
  return beta_tilde(t - 1);
}

void NoiseSchedule::save_json(const std::string& path) const {
  nlohmann::json j;
  j["T"] = T;
  j["beta"] = std::vector<Scalar>(beta.data(), beta.data() + T);
  j["alpha_bar"] = std::vector<Scalar>(alpha_bar.data(), alpha_bar.data() + T);
  j["beta_tilde"] = std::vector<Scalar>(beta_tilde.data(), beta_tilde.data() + T);
  std::ofstream out(path);
  check(out.good(), "cannot write schedule file: " + path);
  out << j.dump(2) << "\n";
}

NoiseSchedule NoiseSchedule::load_json(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "cannot open schedule file: " + path);
  nlohmann::json j;
  in >> j;
  NoiseSchedule s;
  s.T = j.at("T").get<int>();
  check(s.T >= 1, "schedule file has T < 1: " + path);
  const auto read = [&](const char* key) {
    const auto vals = j.at(key).get<std::vector<Scalar>>();
    check(static_cast<int>(vals.size()) == s.T,
          std::string("schedule file field ") + key + " has wrong length: " + path);
    return Eigen::Map<const Vec>(vals.data(), s.T).eval();
  };
  s.beta = read("beta");
  s.alpha_bar = read("alpha_bar");
  s.beta_tilde = read("beta_tilde");
  return s;
}

NoiseSchedule make_schedule(int T, ScheduleKind kind) {
  check(T >= 1, "schedule needs T >= 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  if (kind == ScheduleKind::linear) {
    const Scalar lo = 1e-4, hi = 0.02;
    for (int i = 0; i < T; ++i)
      s.beta(i) = (T == 1) ? lo : lo + (hi - lo) * static_cast<Scalar>(i) / (T - 1);
  } else {
    // Squared-cosine alpha_bar curve; betas derived from consecutive ratios
    // and capped, then alpha_bar rebuilt from the capped betas so that the
    // cumulative-product identity holds exactly.
    const Scalar offset = 0.008;
    const auto f = [&](Scalar u) {
      const Scalar c = std::cos((u + offset) / (1.0 + offset) * kPi / 2.0);
      return c * c;
    };
    const Scalar f0 = f(0.0);
    Scalar prev = 1.0;
    for (int i = 0; i < T; ++i) {
      const Scalar cur = f(static_cast<Scalar>(i + 1) / T) / f0;
      s.beta(i) = std::min(1.0 - cur / prev, 0.999);
      prev = cur;
    }
  }
  s.alpha_bar.resize(T);
  Scalar prod = 1.0;
  for (int i = 0; i < T; ++i) {
    check(s.beta(i) > 0.0 && s.beta(i) < 1.0, "schedule beta outside (0,1)");
    prod *= 1.0 - s.beta(i);
    s.alpha_bar(i) = prod;
  }
  s.beta_tilde.resize(T);
  s.beta_tilde(0) = s.beta(0);
  for (int i = 1; i < T; ++i)
    s.beta_tilde(i) = (1.0 - s.alpha_bar(i - 1)) / (1.0 - s.alpha_bar(i)) * s.beta(i);
  return s;
}

Mat q_sample(const Mat& x, int t, const Mat& noise, const NoiseSchedule& s) {
  check_t(t, s, "q_sample");
  check_same_shape(x, noise, "q_sample");
  const Scalar ab = s.alpha_bar_at(t);
  return std::sqrt(ab) * x + std::sqrt(1.0 - ab) * noise;
}

Scalar interp_variance(Scalar v, int t, const NoiseSchedule& s) {
  check_t(t, s, "interp_variance");
  // Endpoints are returned verbatim so v = 0/1 recover the table entries
  // bitwise rather than through an exp/log round trip.
  if (v == 0.0) return s.beta_tilde_at(t);
  if (v == 1.0) return s.beta_at(t);
  return std::exp(v * std::log(s.beta_at(t)) + (1.0 - v) * std::log(s.beta_tilde_at(t)));
}

Mat interp_variance(const Mat& v, int t, const NoiseSchedule& s) {
  check_t(t, s, "interp_variance");
  Mat out(v.rows(), v.cols());
  for (int i = 0; i < v.rows(); ++i)
    for (int j = 0; j < v.cols(); ++j) out(i, j) = interp_variance(v(i, j), t, s);
  return out;
}

Mat posterior_mean(const Mat& x, const Mat& z_t, int t, const NoiseSchedule& s) {
  check_t(t, s, "posterior_mean");
  check_same_shape(x, z_t, "posterior_mean");
  const Scalar ab = s.alpha_bar_at(t);
  const Scalar ab_prev = s.alpha_bar_before(t);
  const Scalar beta = s.beta_at(t);
  const Scalar alpha = 1.0 - beta;
  const Scalar cx = std::sqrt(ab_prev) * beta / (1.0 - ab);
  const Scalar cz = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
  return cx * x + cz * z_t;
}

Scalar loss_simple(const Mat& x, const Mat& x_hat) {
  check_same_shape(x, x_hat, "loss_simple");
  return (x - x_hat).squaredNorm() / (static_cast<Scalar>(x.rows()) * x.cols());
}

Scalar loss_vlb_term(const Mat& x, const Mat& z_t, int t, const ModelOutput& out,
                     const NoiseSchedule& s) {
  check_t(t, s, "loss_vlb_term");
  check_same_shape(x, z_t, "loss_vlb_term");
  check_same_shape(x, out.x_hat, "loss_vlb_term");
  check_v_shape(out.v, x, "loss_vlb_term");
  const Mat v = out.v.cwiseMax(0.0).cwiseMin(1.0);
  Mat sigma2 = interp_variance(v, t, s);
  if (sigma2.cols() == 1) sigma2 = sigma2.replicate(1, x.cols()).eval();
  const Mat log_sigma2 = sigma2.array().log();
  const Scalar n = static_cast<Scalar>(x.rows()) * x.cols();
  if (t == 1) {
    // Gaussian log-likelihood of the clean sequence; the model mean at t=1 is
    // exactly x_hat (the posterior formula degenerates to it).
    const Mat d = x - out.x_hat;
    return (0.5 * (kLog2Pi + log_sigma2.array()) +
            d.array().square() / (2.0 * sigma2.array()))
               .sum() /
           n;
  }
  const Scalar bt = s.beta_tilde_at(t);
  const Scalar cx = std::sqrt(s.alpha_bar_before(t)) * s.beta_at(t) / (1.0 - s.alpha_bar_at(t));
  // Means differ only through the x coefficient: mu_q - mu_p = cx (x - x_hat).
  const Mat dmu = cx * (x - out.x_hat);
  return (0.5 * (log_sigma2.array() - std::log(bt)) +
          (bt + dmu.array().square()) / (2.0 * sigma2.array()) - 0.5)
             .sum() /
         n;
}

ad::Var loss_vlb_term(ad::Tape& tape, ad::Var x_hat, ad::Var v, const Mat& x, const Mat& z_t,
                      int t, const NoiseSchedule& s, bool detach_mean) {
  check_t(t, s, "loss_vlb_term");
  check_same_shape(x, z_t, "loss_vlb_term");
  check(x_hat.rows() == x.rows() && x_hat.cols() == x.cols(), "loss_vlb_term: x_hat shape");
  check(v.rows() == x.rows() && (v.cols() == x.cols() || v.cols() == 1),
        "loss_vlb_term: v must be N x C or N x 1");
  const Scalar lb = std::log(s.beta_at(t));
  const Scalar lbt = std::log(s.beta_tilde_at(t));
  const bool per_frame = v.cols() == 1;
  // log Sigma = v log beta + (1 - v) log beta_tilde
  ad::Var log_sigma2 = ad::add_scalar(ad::scale(v, lb - lbt), lbt);
  ad::Var sigma2 = ad::vexp(log_sigma2);
  ad::Var mean_src = detach_mean ? ad::detach(x_hat) : x_hat;
  ad::Var diff = ad::sub(tape.constant(x), mean_src);
  if (t == 1) {
    ad::Var quad = per_frame ? ad::div_colvec(ad::square(diff), ad::scale(sigma2, 2.0))
                             : ad::cdiv(ad::square(diff), ad::scale(sigma2, 2.0));
    // Broadcasting a per-frame term across channels leaves its mean unchanged.
    ad::Var total = ad::add(ad::scale(ad::mean(log_sigma2), 0.5), ad::mean(quad));
    return ad::add_scalar(total, 0.5 * kLog2Pi);
  }
  const Scalar bt = s.beta_tilde_at(t);
  const Scalar cx = std::sqrt(s.alpha_bar_before(t)) * s.beta_at(t) / (1.0 - s.alpha_bar_at(t));
  ad::Var num = ad::add_scalar(ad::square(ad::scale(diff, cx)), bt);
  ad::Var quad = per_frame ? ad::div_colvec(num, ad::scale(sigma2, 2.0))
                           : ad::cdiv(num, ad::scale(sigma2, 2.0));
  ad::Var total =
      ad::add(ad::scale(ad::add_scalar(ad::mean(log_sigma2), -lbt), 0.5), ad::mean(quad));
  return ad::add_scalar(total, -0.5);
}

Scalar loss_hybrid(Scalar simple, Scalar vlb_t, Scalar p_t, int T, Scalar lambda_vlb) {
  check(T >= 1, "loss_hybrid: T must be >= 1");
  check(p_t > 0.0, "loss_hybrid: sampling probability must be positive");
  return simple + lambda_vlb * vlb_t / (static_cast<Scalar>(T) * p_t);
}

VlbSampler::VlbSampler(int T) : T_(T), history_(static_cast<std::size_t>(T)) {
  check(T >= 1, "VlbSampler needs T >= 1");
}

Vec VlbSampler::probabilities() const {
  Vec p = Vec::Constant(T_, 1.0 / T_);
  if (!warm()) return p;
  Vec w(T_);
  for (int t = 0; t < T_; ++t) {
    Scalar m = 0.0;
    for (Scalar l : history_[t]) m += l * l;
    w(t) = std::sqrt(m / history_[t].size());
  }
  const Scalar total = w.sum();
  if (total <= 0.0) return p;
  // Mix a uniform floor into the importance weights so no timestep starves.
  return (w / total) * (1.0 - kUniformMix) + Vec::Constant(T_, kUniformMix / T_);
}

Scalar VlbSampler::probability(int t) const {
  check(t >= 1 && t <= T_, "VlbSampler::probability: t out of range");
  return probabilities()(t - 1);
}

int VlbSampler::sample(Rng& rng) {
  const Vec p = probabilities();
  const Scalar u = rng.uniform();
  Scalar acc = 0.0;
  for (int t = 0; t < T_; ++t) {
    acc += p(t);
    if (u < acc) return t + 1;
  }
  return T_;
}

void VlbSampler::record(int t, Scalar loss_t) {
  check(t >= 1 && t <= T_, "VlbSampler::record: t out of range");
  check(std::isfinite(loss_t), "VlbSampler::record: non-finite loss");
  auto& h = history_[t - 1];
  const bool was_full = h.size() >= kHistory;
  h.push_back(loss_t);
  if (h.size() > kHistory) h.pop_front();
  if (!was_full && h.size() >= kHistory) ++warm_count_;
}

Mat ddim_step(const Mat& z_t, const ModelOutput& out, int t, int t_prev,
              const NoiseSchedule& s, Scalar eta, Rng& rng) {
  check_t(t, s, "ddim_step");
  check(t_prev >= 0 && t_prev < t, "ddim_step: need 0 <= t_prev < t");
  check_same_shape(z_t, out.x_hat, "ddim_step");
  const Scalar ab = s.alpha_bar_at(t);
  const Scalar ab_prev = t_prev == 0 ? 1.0 : s.alpha_bar_at(t_prev);
  const Mat eps_hat = (z_t - std::sqrt(ab) * out.x_hat) / std::sqrt(1.0 - ab);
  const Scalar sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) *
                       std::sqrt(std::max(0.0, 1.0 - ab / ab_prev));
  const Scalar dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  Mat z_prev = std::sqrt(ab_prev) * out.x_hat + dir * eps_hat;
  if (sigma > 0.0) {
    Mat xi(z_t.rows(), z_t.cols());
    for (int i = 0; i < xi.rows(); ++i)
      for (int j = 0; j < xi.cols(); ++j) xi(i, j) = rng.normal();
    z_prev += sigma * xi;
  }
  return z_prev;
}

std::vector<int> ddim_ladder(int T, int n_ddim_steps) {
  check(T >= 1 && n_ddim_steps >= 1, "ddim_ladder: T and step count must be >= 1");
  std::vector<int> ts;
  ts.reserve(std::min(T, n_ddim_steps));
  const int n = std::min(T, n_ddim_steps);
  for (int i = 0; i < n; ++i) {
    const int t = std::max(
        1, static_cast<int>(std::lround(static_cast<double>(i + 1) * T / n)));
    if (ts.empty() || ts.back() != t) ts.push_back(t);
  }
  return ts;  // ascending; iterate from the back when denoising
}

skeleton::MotionSequence sample(const Denoiser& model, int frames, const NoiseSchedule& s,
                                int n_ddim_steps, std::uint64_t seed, Scalar eta, Scalar fps) {
  check(frames >= 1, "sample: need at least one frame");
  Rng init = Rng::stream(seed, "ddim-init");
  Rng step_noise = Rng::stream(seed, "ddim-noise");
  Mat z(frames, kPoseDim);
  for (int i = 0; i < frames; ++i)
    for (int j = 0; j < kPoseDim; ++j) z(i, j) = init.normal();
  const std::vector<int> ladder = ddim_ladder(s.T, n_ddim_steps);
  for (int k = static_cast<int>(ladder.size()) - 1; k >= 0; --k) {
    const int t = ladder[k];
    const int t_prev = k > 0 ? ladder[k - 1] : 0;
    const ModelOutput out = model(z, t);
    z = ddim_step(z, out, t, t_prev, s, eta, step_noise);
  }
  for (int i = 0; i < frames; ++i)
    for (int c = kContactOffset; c < kPoseDim; ++c) z(i, c) = z(i, c) >= 0.5 ? 1.0 : 0.0;
  return skeleton::MotionSequence::from_matrix(z, fps);
}

}  // namespace popdg::diffusion
