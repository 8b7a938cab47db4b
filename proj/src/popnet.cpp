#include "popdg/popnet.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string_view>

#include <json.hpp>

namespace popdg::popnet {

namespace {

// Spine-chain enhancement pairs, applied in this order so parent updates
// cascade into their children.
struct CascadePair {
  int src;
  int tgt;
};
constexpr CascadePair kCascade[] = {{0, 3},  {3, 6},   {6, 9},   {9, 12},  {9, 13},
                                    {9, 14}, {12, 15}, {13, 16}, {14, 17}};
// Rows the cascade writes to (row 0 plus every target).
constexpr int kTouchedRows[] = {0, 3, 6, 9, 12, 13, 14, 15, 16, 17};

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() &&
         std::string_view(s).substr(s.size() - suffix.size()) == suffix;
}

ad::Var layer_norm(ad::Tape& tape, ad::Var x, ad::Var gain, ad::Var bias) {
  (void)tape;
  ad::Var centered = ad::add_colvec(x, ad::neg(ad::rowmean(x)));
  ad::Var variance = ad::rowmean(ad::square(centered));
  ad::Var unit = ad::div_colvec(centered, ad::vsqrt(ad::add_scalar(variance, 1e-5)));
  return ad::add_rowvec(ad::mul_rowvec(unit, gain), bias);
}

ad::Var layer_norm(ad::Tape& tape, const BoundParams& p, const std::string& prefix,
                   ad::Var x) {
  return layer_norm(tape, x, p.at(prefix + ".g"), p.at(prefix + ".b"));
}

ad::Var linear(const BoundParams& p, const std::string& prefix, ad::Var x) {
  return ad::add_rowvec(ad::matmul(x, p.at(prefix + ".w")), p.at(prefix + ".b"));
}

// Pre-norm feed-forward residual: x + W2 gelu(W1 ln(x) + b1) + b2.
ad::Var feed_forward(ad::Tape& tape, const BoundParams& p, const std::string& prefix,
                     ad::Var x) {
  ad::Var normed = layer_norm(tape, p, prefix + ".ln", x);
  ad::Var inner =
      ad::gelu(ad::add_rowvec(ad::matmul(normed, p.at(prefix + ".w1")), p.at(prefix + ".b1")));
  ad::Var out = ad::add_rowvec(ad::matmul(inner, p.at(prefix + ".w2")), p.at(prefix + ".b2"));
  return ad::add(x, out);
}

// Kernel-3 same-padded temporal convolution over the frame axis:
// y_i = x_{i-1} Wm + x_i W0 + x_{i+1} Wp + b, zero-padded at both ends.
ad::Var conv1d_same3(ad::Tape& tape, ad::Var x, ad::Var wm, ad::Var w0, ad::Var wp,
                     ad::Var bias) {
  const int n = x.rows();
  const int c = x.cols();
  ad::Var acc = ad::matmul(x, w0);
  if (n > 1) {
    ad::Var zero = tape.constant(Mat::Zero(1, c));
    ad::Var prev = ad::concat_rows({zero, ad::slice(x, 0, n - 1, 0, c)});
    ad::Var next = ad::concat_rows({ad::slice(x, 1, n - 1, 0, c), zero});
    acc = ad::add(acc, ad::add(ad::matmul(prev, wm), ad::matmul(next, wp)));
  }
  return ad::add_rowvec(acc, bias);
}

template <typename Fn>
auto run_stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(name + ": " + e.what());
  }
}

nlohmann::json config_json(const AttentionConfig& c) {
  return {{"hidden", c.hidden},
          {"mlp", c.mlp},
          {"heads", c.heads},
          {"stacks", c.stacks},
          {"token_width", c.token_width},
          {"music_tokens", c.music_tokens},
          {"music_dim", c.music_dim},
          {"mask_ratio", c.mask_ratio},
          {"halve_after_enhance", c.halve_after_enhance},
          {"space_augmentation", c.space_augmentation},
          {"ds_before_dt", c.ds_before_dt},
          {"per_frame_variance", c.per_frame_variance}};
}

AttentionConfig config_from_json(const nlohmann::json& j) {
  AttentionConfig d;
  AttentionConfig c;
  c.hidden = j.value("hidden", d.hidden);
  c.mlp = j.value("mlp", d.mlp);
  c.heads = j.value("heads", d.heads);
  c.stacks = j.value("stacks", d.stacks);
  c.token_width = j.value("token_width", d.token_width);
  c.music_tokens = j.value("music_tokens", d.music_tokens);
  c.music_dim = j.value("music_dim", d.music_dim);
  c.mask_ratio = j.value("mask_ratio", d.mask_ratio);
  c.halve_after_enhance = j.value("halve_after_enhance", d.halve_after_enhance);
  c.space_augmentation = j.value("space_augmentation", d.space_augmentation);
  c.ds_before_dt = j.value("ds_before_dt", d.ds_before_dt);
  c.per_frame_variance = j.value("per_frame_variance", d.per_frame_variance);
  return c;
}

void add_ln(ParamStore& s, const std::string& prefix, int width) {
  s.add(prefix + ".g", 1, width);
  s.add(prefix + ".b", 1, width);
}

void add_attn(ParamStore& s, const std::string& prefix, int width) {
  s.add(prefix + ".wq", width, width);
  s.add(prefix + ".wk", width, width);
  s.add(prefix + ".wv", width, width);
  s.add(prefix + ".wo", width, width);
}

void add_ff(ParamStore& s, const std::string& prefix, int hidden, int mlp) {
  add_ln(s, prefix + ".ln", hidden);
  s.add(prefix + ".w1", hidden, mlp);
  s.add(prefix + ".b1", 1, mlp);
  s.add(prefix + ".w2", mlp, hidden);
  s.add(prefix + ".b2", 1, hidden);
}

void add_conv(ParamStore& s, const std::string& prefix, int width) {
  s.add(prefix + ".wm", width, width);
  s.add(prefix + ".w0", width, width);
  s.add(prefix + ".wp", width, width);
  s.add(prefix + ".b", 1, width);
}

}  // namespace

void AttentionConfig::validate() const {
  check(hidden >= 2 && hidden % 2 == 0, "config: hidden must be a positive even number");
  check(mlp >= 1, "config: mlp width must be positive");
  check(heads >= 1, "config: heads must be positive");
  check(stacks >= 1, "config: stacks must be positive");
  check(token_width >= 1, "config: token width must be positive");
  check(music_tokens >= 1, "config: music token count must be positive");
  check(music_dim >= 1, "config: music feature width must be positive");
  check(hidden % heads == 0, "config: hidden must be divisible by heads");
  check(token_width % heads == 0, "config: token width must be divisible by heads");
  check(hidden % music_tokens == 0,
        "config: music feature tokens must tile the hidden width exactly");
  check((hidden / music_tokens) % heads == 0,
        "config: music token channels must be divisible by heads");
  check(mask_ratio >= 0.0 && mask_ratio < 1.0, "config: mask ratio must lie in [0, 1)");
}

std::string to_json_string(const AttentionConfig& cfg) { return config_json(cfg).dump(2); }

AttentionConfig config_from_json_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("config: invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

Mat& ParamStore::add(const std::string& name, int rows, int cols) {
  check(rows >= 1 && cols >= 1, "parameter " + name + " must have a positive shape");
  check(values_.find(name) == values_.end(), "duplicate parameter: " + name);
  names_.push_back(name);
  return values_[name] = Mat::Zero(rows, cols);
}

bool ParamStore::has(const std::string& name) const {
  return values_.find(name) != values_.end();
}

Mat& ParamStore::at(const std::string& name) {
  auto it = values_.find(name);
  check(it != values_.end(), "unknown parameter: " + name);
  return it->second;
}

const Mat& ParamStore::at(const std::string& name) const {
  auto it = values_.find(name);
  check(it != values_.end(), "unknown parameter: " + name);
  return it->second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& name : names_) n += static_cast<std::size_t>(at(name).size());
  return n;
}

BoundParams::BoundParams(ad::Tape& tape, const ParamStore& store) {
  entries_.reserve(store.names().size());
  for (const std::string& name : store.names()) {
    index_[name] = static_cast<int>(entries_.size());
    entries_.emplace_back(name, tape.leaf(store.at(name)));
  }
}

ad::Var BoundParams::at(const std::string& name) const {
  auto it = index_.find(name);
  check(it != index_.end(), "unknown parameter: " + name);
  return entries_[it->second].second;
}

Mat sinusoidal_embedding(int positions, int dim) {
  check(positions >= 1, "sinusoidal embedding needs at least one position");
  check(dim >= 2 && dim % 2 == 0, "sinusoidal embedding needs an even dimension");
  Mat pe(positions, dim);
  for (int i = 0; i < dim / 2; ++i) {
    const Scalar freq = std::pow(10000.0, -2.0 * i / dim);
    for (int pos = 0; pos < positions; ++pos) {
      pe(pos, 2 * i) = std::sin(pos * freq);
      pe(pos, 2 * i + 1) = std::cos(pos * freq);
    }
  }
  return pe;
}

Mat timestep_embedding(int t, int dim) {
  check(t >= 0, "timestep embedding needs t >= 0");
  check(dim >= 2 && dim % 2 == 0, "timestep embedding needs an even dimension");
  Mat pe(1, dim);
  for (int i = 0; i < dim / 2; ++i) {
    const Scalar freq = std::pow(10000.0, -2.0 * i / dim);
    pe(0, 2 * i) = std::sin(t * freq);
    pe(0, 2 * i + 1) = std::cos(t * freq);
  }
  return pe;
}

Mat make_frame_mask(int frames, Scalar mask_ratio, Rng& rng) {
  check(frames >= 1, "frame mask needs at least one frame");
  check(mask_ratio >= 0.0 && mask_ratio < 1.0, "mask ratio must lie in [0, 1)");
  Mat m = Mat::Zero(frames, frames);
  for (int j = 0; j < frames; ++j)
    if (rng.uniform() < mask_ratio) m.col(j).setConstant(kMaskValue);
  return m;
}

ad::Var masked_attention(ad::Tape& tape, ad::Var q, ad::Var k, ad::Var v, const Mat& m,
                         int heads) {
  const int width = q.cols();
  check(heads >= 1 && width % heads == 0, "masked_attention: width not divisible by heads");
  check(k.cols() == width && v.cols() == width, "masked_attention: Q/K/V width mismatch");
  check(k.rows() == v.rows(), "masked_attention: K/V token count mismatch");
  const bool masked = m.size() > 0;
  if (masked)
    check(m.rows() == q.rows() && m.cols() == k.rows(), "masked_attention: mask shape");
  const int dh = width / heads;
  const Scalar inv_sqrt = 1.0 / std::sqrt(static_cast<Scalar>(dh));
  ad::Var mask_const;
  if (masked) mask_const = tape.constant(m);
  std::vector<ad::Var> context;
  context.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    ad::Var qh = ad::slice(q, 0, q.rows(), h * dh, dh);
    ad::Var kh = ad::slice(k, 0, k.rows(), h * dh, dh);
    ad::Var vh = ad::slice(v, 0, v.rows(), h * dh, dh);
    ad::Var scores = ad::matmul(qh, ad::transpose(kh));
    if (masked) scores = ad::add(scores, mask_const);
    ad::Var probs = ad::softmax_rows(ad::scale(scores, inv_sqrt));
    context.push_back(ad::matmul(probs, vh));
  }
  return heads == 1 ? context[0] : ad::concat_cols(context);
}

Mat space_augment(Mat attn, bool halve) {
  check(attn.rows() >= 18 && attn.cols() >= 18, "space_augment: map must be at least 18 x 18");
  const Scalar h = halve ? 0.5 : 1.0;
  for (const CascadePair& pr : kCascade) {
    attn(0, pr.tgt) = (attn(0, pr.tgt) + attn(0, pr.src)) * h;
    attn(pr.tgt, 0) = (attn(pr.tgt, 0) + attn(pr.src, 0)) * h;
  }
  if (!halve) {
    // Without the damping of the halving step the touched rows grow, so they
    // are renormalized back to a probability simplex; all-zero rows stay put.
    for (int r : kTouchedRows) {
      const Scalar sum = attn.row(r).sum();
      if (sum > 0.0) attn.row(r) /= sum;
    }
  }
  return attn;
}

ad::Var space_augment(ad::Tape& tape, ad::Var attn, bool halve) {
  const Mat& in = tape.value(attn);
  Mat out_val = space_augment(in, halve);
  if (!(tape.grad_enabled() && tape.requires_grad(attn)))
    return tape.emplace(std::move(out_val), false, nullptr);

  // The renormalization adjoint needs each touched row's pre-division sum;
  // zero marks a row the forward pass left unnormalized.
  std::vector<Scalar> sums;
  if (!halve) {
    Mat cascaded = in;
    for (const CascadePair& pr : kCascade) {
      cascaded(0, pr.tgt) += cascaded(0, pr.src);
      cascaded(pr.tgt, 0) += cascaded(pr.src, 0);
    }
    sums.reserve(std::size(kTouchedRows));
    for (int r : kTouchedRows) {
      const Scalar s = cascaded.row(r).sum();
      sums.push_back(s > 0.0 ? s : 0.0);
    }
  }

  ad::Var out = tape.emplace(std::move(out_val), true, nullptr);
  const int io = out.index();
  const int ia = attn.index();
  tape.set_backprop(io, [io, ia, halve, sums](ad::Tape& tp) {
    Mat g = tp.grad_ref(io);
    if (!halve) {
      const Mat& y = tp.val(io);
      std::size_t k = 0;
      for (int r : kTouchedRows) {
        const Scalar s = sums[k++];
        if (s <= 0.0) continue;
        // y = a / sum(a)  =>  da = (g - <g, y>) / sum(a)
        const Scalar dot = g.row(r).dot(y.row(r));
        g.row(r) = (g.row(r).array() - dot) / s;
      }
    }
    const Scalar h = halve ? 0.5 : 1.0;
    for (int i = static_cast<int>(std::size(kCascade)) - 1; i >= 0; --i) {
      const int src = kCascade[i].src;
      const int tgt = kCascade[i].tgt;
      g(0, src) += h * g(0, tgt);
      g(0, tgt) *= h;
      g(src, 0) += h * g(tgt, 0);
      g(tgt, 0) *= h;
    }
    tp.accum(ia, g);
  });
  return out;
}

ad::Var tokenize(ad::Tape& tape, const BoundParams& p, const std::string& prefix,
                 const Mat& pose, const AttentionConfig& cfg) {
  check(pose.cols() == kPoseDim, "tokenize: pose must have 156 channels per frame");
  check(pose.rows() >= 1, "tokenize: need at least one frame");
  const int n = static_cast<int>(pose.rows());
  const int c = cfg.token_width;
  ad::Var x = tape.constant(pose);
  std::vector<ad::Var> tokens;
  tokens.reserve(kPoseTokens);
  tokens.push_back(ad::matmul(ad::slice(x, 0, n, 0, kRootDim), p.at(prefix + ".root")));
  for (int j = 0; j < kNumJoints; ++j)
    tokens.push_back(ad::matmul(ad::slice(x, 0, n, kRootDim + j * kRotDim, kRotDim),
                                p.at(prefix + ".joint")));
  tokens.push_back(
      ad::matmul(ad::slice(x, 0, n, kContactOffset, kNumContacts), p.at(prefix + ".contact")));
  // Column-concatenating the per-token projections puts each frame's 26 tokens
  // contiguously in its row, so the row-major reshape yields frame-major
  // tokens of shape (n * 26) x c.
  ad::Var stacked = ad::reshape_rowmajor(ad::concat_cols(tokens), n * kPoseTokens, c);
  ad::Var ids = p.at(prefix + ".ids");
  ad::Var tiled = n == 1 ? ids : ad::concat_rows(std::vector<ad::Var>(n, ids));
  return ad::add(stacked, tiled);
}

ad::Var ds_attention(ad::Tape& tape, const BoundParams& p, const std::string& prefix,
                     ad::Var tokens, int frames, const AttentionConfig& cfg) {
  const int c = cfg.token_width;
  check(frames >= 1, "ds_attention: need at least one frame");
  check(tokens.cols() == c, "ds_attention: token width mismatch");
  check(tokens.rows() == frames * kPoseTokens, "ds_attention: token count mismatch");
  check(c % cfg.heads == 0, "ds_attention: token width not divisible by heads");
  ad::Var q = ad::matmul(tokens, p.at(prefix + ".wq"));
  ad::Var k = ad::matmul(tokens, p.at(prefix + ".wk"));
  ad::Var v = ad::matmul(tokens, p.at(prefix + ".wv"));
  const int dh = c / cfg.heads;
  const Scalar inv_sqrt = 1.0 / std::sqrt(static_cast<Scalar>(dh));
  std::vector<ad::Var> frame_rows;
  frame_rows.reserve(frames);
  for (int f = 0; f < frames; ++f) {
    const int r0 = f * kPoseTokens;
    std::vector<ad::Var> head_cols;
    head_cols.reserve(cfg.heads);
    for (int h = 0; h < cfg.heads; ++h) {
      ad::Var qh = ad::slice(q, r0, kPoseTokens, h * dh, dh);
      ad::Var kh = ad::slice(k, r0, kPoseTokens, h * dh, dh);
      ad::Var vh = ad::slice(v, r0, kPoseTokens, h * dh, dh);
      ad::Var probs = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt));
      if (cfg.space_augmentation) {
        // Rebuild the 26 x 26 map around the augmented 24 x 24 joint sub-map;
        // root-translation and contact rows/columns pass through untouched.
        ad::Var joint_map = ad::slice(probs, 1, kNumJoints, 1, kNumJoints);
        ad::Var augmented = space_augment(tape, joint_map, cfg.halve_after_enhance);
        ad::Var top = ad::slice(probs, 0, 1, 0, kPoseTokens);
        ad::Var left = ad::slice(probs, 1, kNumJoints, 0, 1);
        ad::Var right = ad::slice(probs, 1, kNumJoints, kPoseTokens - 1, 1);
        ad::Var bottom = ad::slice(probs, kPoseTokens - 1, 1, 0, kPoseTokens);
        probs = ad::concat_rows({top, ad::concat_cols({left, augmented, right}), bottom});
      }
      head_cols.push_back(ad::matmul(probs, vh));
    }
    frame_rows.push_back(cfg.heads == 1 ? head_cols[0] : ad::concat_cols(head_cols));
  }
  ad::Var ctx = frames == 1 ? frame_rows[0] : ad::concat_rows(frame_rows);
  return ad::matmul(ctx, p.at(prefix + ".wo"));
}

ad::Var dt_attention(ad::Tape& tape, const BoundParams& p, const std::string& prefix,
                     ad::Var x, const Mat& mask, const AttentionConfig& cfg) {
  check(x.cols() == cfg.hidden, "dt_attention: feature width mismatch");
  ad::Var pe = tape.constant(sinusoidal_embedding(x.rows(), cfg.hidden));
  ad::Var x_pe = ad::add(x, pe);
  ad::Var q = ad::matmul(x_pe, p.at(prefix + ".wq"));
  ad::Var k = ad::matmul(x_pe, p.at(prefix + ".wk"));
  ad::Var v = ad::matmul(x, p.at(prefix + ".wv"));
  ad::Var ctx = masked_attention(tape, q, k, v, mask, cfg.heads);
  return ad::matmul(ctx, p.at(prefix + ".wo"));
}

ad::Var mt_attention(ad::Tape& tape, const BoundParams& p, const std::string& prefix,
                     ad::Var x, const AttentionConfig& cfg) {
  return dt_attention(tape, p, prefix, x, Mat(), cfg);
}

ad::Var mf_attention(ad::Tape& tape, const BoundParams& p, const std::string& prefix,
                     ad::Var x, const AttentionConfig& cfg) {
  check(x.cols() == cfg.hidden, "mf_attention: feature width mismatch");
  const int n = x.rows();
  const int f = cfg.music_tokens;
  const int cm = cfg.hidden / f;
  ad::Var tokens = ad::reshape_rowmajor(x, n * f, cm);
  ad::Var q = ad::matmul(tokens, p.at(prefix + ".wq"));
  ad::Var k = ad::matmul(tokens, p.at(prefix + ".wk"));
  ad::Var v = ad::matmul(tokens, p.at(prefix + ".wv"));
  std::vector<ad::Var> frame_rows;
  frame_rows.reserve(n);
  for (int i = 0; i < n; ++i) {
    ad::Var qf = ad::slice(q, i * f, f, 0, cm);
    ad::Var kf = ad::slice(k, i * f, f, 0, cm);
    ad::Var vf = ad::slice(v, i * f, f, 0, cm);
    frame_rows.push_back(masked_attention(tape, qf, kf, vf, Mat(), cfg.heads));
  }
  ad::Var ctx = n == 1 ? frame_rows[0] : ad::concat_rows(frame_rows);
  ad::Var projected = ad::matmul(ctx, p.at(prefix + ".wo"));
  return ad::reshape_rowmajor(projected, n, cfg.hidden);
}

ad::Var cross_attention(ad::Tape& tape, const BoundParams& p, const std::string& prefix,
                        ad::Var x, ad::Var context, const AttentionConfig& cfg) {
  check(x.cols() == cfg.hidden && context.cols() == cfg.hidden,
        "cross_attention: feature width mismatch");
  ad::Var q = ad::matmul(x, p.at(prefix + ".wq"));
  ad::Var k = ad::matmul(context, p.at(prefix + ".wk"));
  ad::Var v = ad::matmul(context, p.at(prefix + ".wv"));
  ad::Var ctx = masked_attention(tape, q, k, v, Mat(), cfg.heads);
  return ad::matmul(ctx, p.at(prefix + ".wo"));
}

ad::Var alignment_module(ad::Tape& tape, const BoundParams& p, const std::string& prefix,
                         ad::Var dance, ad::Var music, int t, const AttentionConfig& cfg) {
  check(dance.rows() == music.rows(),
        "alignment_module: dance and music frame counts differ");
  check(dance.cols() == cfg.hidden && music.cols() == cfg.hidden,
        "alignment_module: feature width mismatch");
  ad::Var conv_d =
      conv1d_same3(tape, dance, p.at(prefix + ".conv_d.wm"), p.at(prefix + ".conv_d.w0"),
                   p.at(prefix + ".conv_d.wp"), p.at(prefix + ".conv_d.b"));
  ad::Var conv_m =
      conv1d_same3(tape, music, p.at(prefix + ".conv_m.wm"), p.at(prefix + ".conv_m.w0"),
                   p.at(prefix + ".conv_m.wp"), p.at(prefix + ".conv_m.b"));
  ad::Var temb = tape.constant(timestep_embedding(t, cfg.hidden));
  ad::Var summed = ad::add_rowvec(ad::add(conv_d, conv_m), temb);
  ad::Var inner = ad::gelu(
      ad::add_rowvec(ad::matmul(summed, p.at(prefix + ".mlp.w1")), p.at(prefix + ".mlp.b1")));
  ad::Var scale_shift =
      ad::add_rowvec(ad::matmul(inner, p.at(prefix + ".mlp.w2")), p.at(prefix + ".mlp.b2"));
  const int n = dance.rows();
  ad::Var gamma = ad::slice(scale_shift, 0, n, 0, cfg.hidden);
  ad::Var beta = ad::slice(scale_shift, 0, n, cfg.hidden, cfg.hidden);
  return ad::add(ad::cmul(gamma, dance), beta);
}

ForwardOutput popdg_forward(ad::Tape& tape, const BoundParams& p, const AttentionConfig& cfg,
                            const Mat& z_t, int t, const Mat& music, bool training,
                            Rng* mask_rng) {
  cfg.validate();
  check(z_t.cols() == kPoseDim, "popdg_forward: z_t must be N x 156");
  const int n = static_cast<int>(z_t.rows());
  check(n >= 1, "popdg_forward: need at least one frame");
  check(music.rows() == n, "popdg_forward: music and motion frame counts differ");
  check(music.cols() == cfg.music_dim, "popdg_forward: music feature width mismatch");
  check(t >= 1, "popdg_forward: timestep must be >= 1");

  // Music encoder.
  ad::Var m = run_stage("music projection", [&] {
    return ad::add_rowvec(ad::matmul(tape.constant(music), p.at("music.input.w")),
                          p.at("music.input.b"));
  });
  for (int i = 0; i < cfg.stacks; ++i) {
    const std::string pre = "music.stack" + std::to_string(i);
    m = run_stage(pre, [&] {
      ad::Var s = m;
      s = ad::add(s, mf_attention(tape, p, pre + ".mf",
                                  layer_norm(tape, p, pre + ".mf.ln", s), cfg));
      s = ad::add(s, mt_attention(tape, p, pre + ".mt",
                                  layer_norm(tape, p, pre + ".mt.ln", s), cfg));
      return feed_forward(tape, p, pre + ".ff", s);
    });
  }
  m = layer_norm(tape, p, "music.final_ln", m);

  // Dance decoder. The frame mask is drawn once per call and shared by every
  // temporal-attention layer.
  Mat mask;
  if (training && mask_rng != nullptr && cfg.mask_ratio > 0.0)
    mask = make_frame_mask(n, cfg.mask_ratio, *mask_rng);

  ad::Var x = run_stage("dance tokenize", [&] {
    ad::Var tokens = tokenize(tape, p, "dance.tokenize", z_t, cfg);
    ad::Var flat = ad::reshape_rowmajor(tokens, n, kPoseTokens * cfg.token_width);
    return linear(p, "dance.input", flat);
  });
  for (int i = 0; i < cfg.stacks; ++i) {
    const std::string pre = "dance.stack" + std::to_string(i);
    x = run_stage(pre, [&] {
      ad::Var s = x;
      const auto ds_block = [&](ad::Var in) {
        ad::Var normed = layer_norm(tape, p, pre + ".ds.ln", in);
        ad::Var unpooled = ad::matmul(normed, p.at(pre + ".ds.unpool.w"));
        ad::Var tokens =
            ad::reshape_rowmajor(unpooled, n * kPoseTokens, cfg.token_width);
        ad::Var attended = ds_attention(tape, p, pre + ".ds", tokens, n, cfg);
        ad::Var pooled = ad::matmul(
            ad::reshape_rowmajor(attended, n, kPoseTokens * cfg.token_width),
            p.at(pre + ".ds.pool.w"));
        return ad::add(in, pooled);
      };
      const auto dt_block = [&](ad::Var in) {
        ad::Var normed = layer_norm(tape, p, pre + ".dt.ln", in);
        return ad::add(in, dt_attention(tape, p, pre + ".dt", normed, mask, cfg));
      };
      s = cfg.ds_before_dt ? dt_block(ds_block(s)) : ds_block(dt_block(s));
      ad::Var normed = layer_norm(tape, p, pre + ".cross.ln", s);
      s = ad::add(s, cross_attention(tape, p, pre + ".cross", normed, m, cfg));
      s = alignment_module(tape, p, pre + ".align", s, m, t, cfg);
      return feed_forward(tape, p, pre + ".ff", s);
    });
  }
  x = layer_norm(tape, p, "dance.final_ln", x);

  return run_stage("output heads", [&]() -> ForwardOutput {
    ad::Var x_hat = linear(p, "head.x", x);
    ad::Var v = ad::sigmoid(linear(p, "head.v", x));
    return {x_hat, v};
  });
}

ParamStore make_params(const AttentionConfig& cfg) {
  cfg.validate();
  ParamStore s;
  const int h = cfg.hidden;
  const int c = cfg.token_width;
  const int tok = kPoseTokens * c;

  s.add("music.input.w", cfg.music_dim, h);
  s.add("music.input.b", 1, h);
  for (int i = 0; i < cfg.stacks; ++i) {
    const std::string pre = "music.stack" + std::to_string(i);
    add_ln(s, pre + ".mf.ln", h);
    add_attn(s, pre + ".mf", h / cfg.music_tokens);
    add_ln(s, pre + ".mt.ln", h);
    add_attn(s, pre + ".mt", h);
    add_ff(s, pre + ".ff", h, cfg.mlp);
  }
  add_ln(s, "music.final_ln", h);

  s.add("dance.tokenize.root", kRootDim, c);
  s.add("dance.tokenize.joint", kRotDim, c);
  s.add("dance.tokenize.contact", kNumContacts, c);
  s.add("dance.tokenize.ids", kPoseTokens, c);
  s.add("dance.input.w", tok, h);
  s.add("dance.input.b", 1, h);
  for (int i = 0; i < cfg.stacks; ++i) {
    const std::string pre = "dance.stack" + std::to_string(i);
    add_ln(s, pre + ".ds.ln", h);
    s.add(pre + ".ds.unpool.w", h, tok);
    add_attn(s, pre + ".ds", c);
    s.add(pre + ".ds.pool.w", tok, h);
    add_ln(s, pre + ".dt.ln", h);
    add_attn(s, pre + ".dt", h);
    add_ln(s, pre + ".cross.ln", h);
    add_attn(s, pre + ".cross", h);
    add_conv(s, pre + ".align.conv_d", h);
    add_conv(s, pre + ".align.conv_m", h);
    s.add(pre + ".align.mlp.w1", h, cfg.mlp);
    s.add(pre + ".align.mlp.b1", 1, cfg.mlp);
    s.add(pre + ".align.mlp.w2", cfg.mlp, 2 * h);
    s.add(pre + ".align.mlp.b2", 1, 2 * h);
    add_ff(s, pre + ".ff", h, cfg.mlp);
  }
  add_ln(s, "dance.final_ln", h);

  const int vdim = cfg.per_frame_variance ? 1 : kPoseDim;
  s.add("head.x.w", h, kPoseDim);
  s.add("head.x.b", 1, kPoseDim);
  s.add("head.v.w", h, vdim);
  s.add("head.v.b", 1, vdim);
  return s;
}

void init_weights(ParamStore& params, const AttentionConfig& cfg, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "weight-init");
  for (const std::string& name : params.names()) {
    Mat& w = params.at(name);
    if (name.rfind("head.", 0) == 0) {
      w.setZero();  // x_hat starts at 0 and v at sigmoid(0) = 0.5
      continue;
    }
    if (ends_with(name, ".align.mlp.w2")) {
      w.setZero();  // modulation starts as identity
      continue;
    }
    if (ends_with(name, ".align.mlp.b2")) {
      w.setZero();
      w.leftCols(cfg.hidden).setOnes();  // scale 1, shift 0
      continue;
    }
    if (ends_with(name, "ln.g")) {
      w.setOnes();
      continue;
    }
    if (ends_with(name, ".b") || ends_with(name, ".b1") || ends_with(name, ".b2")) {
      w.setZero();
      continue;
    }
    const Scalar std_dev = std::sqrt(2.0 / static_cast<Scalar>(w.rows() + w.cols()));
    for (int i = 0; i < w.rows(); ++i)
      for (int j = 0; j < w.cols(); ++j) w(i, j) = std_dev * rng.normal();
  }
}

diffusion::ModelOutput popdg_infer(const ParamStore& params, const AttentionConfig& cfg,
                                   const Mat& z_t, int t, const Mat& music) {
  ad::Tape tape(false);
  BoundParams bound(tape, params);
  ForwardOutput out = popdg_forward(tape, bound, cfg, z_t, t, music, false, nullptr);
  return {tape.value(out.x_hat), tape.value(out.v)};
}

diffusion::Denoiser make_denoiser(const ParamStore& params, const AttentionConfig& cfg,
                                  const Mat& music) {
  return [&params, &cfg, &music](const Mat& z_t, int t) {
    return popdg_infer(params, cfg, z_t, t, music);
  };
}

void save_checkpoint(const std::string& path, const AttentionConfig& cfg,
                     const ParamStore& params) {
  nlohmann::json manifest;
  manifest["config"] = config_json(cfg);
  nlohmann::json arrays = nlohmann::json::array();
  for (const std::string& name : params.names()) {
    const Mat& m = params.at(name);
    arrays.push_back({{"name", name},
                      {"rows", static_cast<int>(m.rows())},
                      {"cols", static_cast<int>(m.cols())}});
  }
  manifest["arrays"] = std::move(arrays);
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  check(out.good(), "cannot write checkpoint: " + path);
  out.write("POPW", 4);
  const std::uint32_t len = static_cast<std::uint32_t>(text.size());
  const unsigned char lenb[4] = {
      static_cast<unsigned char>(len & 0xff), static_cast<unsigned char>((len >> 8) & 0xff),
      static_cast<unsigned char>((len >> 16) & 0xff),
      static_cast<unsigned char>((len >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(lenb), 4);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  std::vector<float> buffer;
  for (const std::string& name : params.names()) {
    const Mat& m = params.at(name);
    buffer.resize(static_cast<std::size_t>(m.size()));
    std::size_t k = 0;
    for (int i = 0; i < m.rows(); ++i)
      for (int j = 0; j < m.cols(); ++j) buffer[k++] = static_cast<float>(m(i, j));
    out.write(reinterpret_cast<const char*>(buffer.data()),
              static_cast<std::streamsize>(buffer.size() * sizeof(float)));
  }
  check(out.good(), "failed writing checkpoint payload: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "cannot open checkpoint: " + path);
  char magic[4] = {};
  in.read(magic, 4);
  check(in.gcount() == 4 && std::string_view(magic, 4) == "POPW",
        "not a weight checkpoint (bad magic): " + path);
  unsigned char lenb[4] = {};
  in.read(reinterpret_cast<char*>(lenb), 4);
  check(in.gcount() == 4, "truncated checkpoint header: " + path);
  const std::uint32_t len = static_cast<std::uint32_t>(lenb[0]) |
                            (static_cast<std::uint32_t>(lenb[1]) << 8) |
                            (static_cast<std::uint32_t>(lenb[2]) << 16) |
                            (static_cast<std::uint32_t>(lenb[3]) << 24);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  check(in.gcount() == static_cast<std::streamsize>(len),
        "truncated checkpoint manifest: " + path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error("corrupt checkpoint manifest in " + path + ": " + e.what());
  }
  Checkpoint ck;
  ck.config = config_from_json(manifest.at("config"));
  std::vector<float> buffer;
  for (const auto& entry : manifest.at("arrays")) {
    const std::string name = entry.at("name").get<std::string>();
    const int rows = entry.at("rows").get<int>();
    const int cols = entry.at("cols").get<int>();
    Mat& m = ck.params.add(name, rows, cols);
    buffer.resize(static_cast<std::size_t>(rows) * cols);
    in.read(reinterpret_cast<char*>(buffer.data()),
            static_cast<std::streamsize>(buffer.size() * sizeof(float)));
    check(in.gcount() == static_cast<std::streamsize>(buffer.size() * sizeof(float)),
          "truncated checkpoint payload for " + name + ": " + path);
    std::size_t k = 0;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = static_cast<Scalar>(buffer[k++]);
  }
  return ck;
}

}  // namespace popdg::popnet
