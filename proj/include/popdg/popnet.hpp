#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "popdg/ad.hpp"
#include "popdg/diffusion.hpp"
#include "popdg/rng.hpp"
#include "popdg/types.hpp"

namespace popdg::popnet {

// Pose tokens per frame: 0 = root translation, 1..24 = SMPL joints (joint id
// + 1), 25 = contact flags.
inline constexpr int kPoseTokens = 26;
inline constexpr Scalar kMaskValue = -1e9;

struct AttentionConfig {
  int hidden = 512;        // model width of the pooled per-frame features
  int mlp = 1024;          // feed-forward inner width
  int heads = 8;           // attention heads, shared by every attention op
  int stacks = 4;          // block repetitions in both encoder and decoder
  int token_width = 64;    // channel width c of each of the 26 pose tokens
  int music_tokens = 32;   // feature tokens F in MF-attention; hidden = F * c
  int music_dim = 4800;    // raw per-frame music feature width
  Scalar mask_ratio = 0.1; // fraction of frames hidden from temporal attention
  bool halve_after_enhance = true;   // the "/2" of the augmentation cascade
  bool space_augmentation = true;    // apply the cascade inside DS-attention
  bool ds_before_dt = true;          // sub-block order inside a decoder stack
  bool per_frame_variance = false;   // v head emits N x 1 instead of N x 156

  // Throws Error on any violated invariant (divisibility, ranges).
  void validate() const;
};

std::string to_json_string(const AttentionConfig& cfg);
AttentionConfig config_from_json_string(const std::string& text);

// Ordered collection of named dense parameter matrices. References returned
// by at() stay valid while the store lives (required by BoundParams).
class ParamStore {
 public:
  Mat& add(const std::string& name, int rows, int cols);  // zero-filled
  bool has(const std::string& name) const;
  Mat& at(const std::string& name);
  const Mat& at(const std::string& name) const;
  const std::vector<std::string>& names() const { return names_; }
  std::size_t scalar_count() const;

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, Mat> values_;
};

// Binds every parameter of a store as a tape leaf; the store must outlive
// both this object and the tape.
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, const ParamStore& store);
  ad::Var at(const std::string& name) const;
  const std::vector<std::pair<std::string, ad::Var>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, ad::Var>> entries_;
  std::unordered_map<std::string, int> index_;
};

// Sinusoidal position table: row p holds [sin(p/10000^(0/d)), cos(p/10000^(0/d)),
// sin(p/10000^(2/d)), ...]; dim must be even.
Mat sinusoidal_embedding(int positions, int dim);
// Row of the same table at position t (1 x dim).
Mat timestep_embedding(int t, int dim);

// Additive N x N frame mask: each frame is hidden (its key column set to
// kMaskValue) independently with probability mask_ratio.
Mat make_frame_mask(int frames, Scalar mask_ratio, Rng& rng);

// softmax((Q_h K_h^T + M) / sqrt(d_h)) V_h per head, heads concatenated.
// M is an additive mask (query rows x key rows), or an empty matrix for none.
// No output projection: a single token yields V itself.
ad::Var masked_attention(ad::Tape& tape, ad::Var q, ad::Var k, ad::Var v, const Mat& m,
                         int heads);

// The spine-chain enhancement cascade applied to a joint attention map
// (indexed by SMPL joint ids, so the map must be at least 18 x 18):
// for (src, tgt) in {0:3, 3:6, 6:9, 9:12, 9:13, 9:14, 12:15, 13:16, 14:17},
// attn(0,tgt) += attn(0,src) and attn(tgt,0) += attn(src,0), each optionally
// halved. Without halving, every touched row is renormalized to sum 1
// afterward; untouched entries are never modified.
Mat space_augment(Mat attn, bool halve);
ad::Var space_augment(ad::Tape& tape, ad::Var attn, bool halve);

// Embeds an N x 156 pose matrix into (N * 26) x token_width tokens using the
// per-type projections and the learned token-identity table under `prefix`.
ad::Var tokenize(ad::Tape& tape, const BoundParams& p, const std::string& prefix,
                 const Mat& pose, const AttentionConfig& cfg);

// Per-frame multi-head attention over the 26 pose tokens; the 24 x 24 joint
// sub-map of each head's post-softmax probabilities passes through
// space_augment (root and contact tokens attend unmodified). Input and output
// are (frames * 26) x token_width.
ad::Var ds_attention(ad::Tape& tape, const BoundParams& p, const std::string& prefix,
                     ad::Var tokens, int frames, const AttentionConfig& cfg);

// Attention over the frame axis with the sinusoidal position table added to
// the Q and K inputs only; `mask` is an additive N x N mask or empty.
ad::Var dt_attention(ad::Tape& tape, const BoundParams& p, const std::string& prefix,
                     ad::Var x, const Mat& mask, const AttentionConfig& cfg);
// The music-block mirror of dt_attention (no training mask).
ad::Var mt_attention(ad::Tape& tape, const BoundParams& p, const std::string& prefix,
                     ad::Var x, const AttentionConfig& cfg);

// Per-frame attention over music_tokens feature tokens obtained by splitting
// the hidden width into F tokens x (hidden / F) channels.
ad::Var mf_attention(ad::Tape& tape, const BoundParams& p, const std::string& prefix,
                     ad::Var x, const AttentionConfig& cfg);

// Queries from `x`, keys and values from `context` (same width).
ad::Var cross_attention(ad::Tape& tape, const BoundParams& p, const std::string& prefix,
                        ad::Var x, ad::Var context, const AttentionConfig& cfg);

// FiLM modulation: a kernel-3 same-padded temporal convolution runs over each
// stream, both conv outputs and the timestep embedding are summed, a
// two-layer MLP emits per-channel scale and shift, and the result modulates
// the dance features: out = gamma .* dance + beta.
ad::Var alignment_module(ad::Tape& tape, const BoundParams& p, const std::string& prefix,
                         ad::Var dance, ad::Var music, int t, const AttentionConfig& cfg);

struct ForwardOutput {
  ad::Var x_hat;  // N x 156
  ad::Var v;      // N x 156, or N x 1 when per_frame_variance
};

// The full conditional denoiser. Music path: project -> stacks x (MF -> MT ->
// feed-forward). Dance path: tokenize -> stacks x (DS -> DT -> cross-attention
// to the music context -> alignment -> feed-forward) -> output heads.
// Pure given (params, inputs, training, mask_rng); the training-mode frame
// mask is the only stochastic element and is drawn once per call.
ForwardOutput popdg_forward(ad::Tape& tape, const BoundParams& p, const AttentionConfig& cfg,
                            const Mat& z_t, int t, const Mat& music, bool training = false,
                            Rng* mask_rng = nullptr);

// Declares every parameter of the network in a fixed order (all zero-filled).
ParamStore make_params(const AttentionConfig& cfg);

// Standard initialization: Xavier-normal projections, zero biases, unit
// layer-norm gains, zero output heads (so x_hat = 0 and v = 0.5 initially),
// and an identity-at-start alignment MLP (scale bias 1, zero last layer).
void init_weights(ParamStore& params, const AttentionConfig& cfg, std::uint64_t seed);

// Inference on an internal value-only tape; safe to call concurrently on the
// same immutable params.
diffusion::ModelOutput popdg_infer(const ParamStore& params, const AttentionConfig& cfg,
                                   const Mat& z_t, int t, const Mat& music);

// Denoiser closure over fixed weights and conditioning; captures references,
// so params, cfg, and music must outlive it.
diffusion::Denoiser make_denoiser(const ParamStore& params, const AttentionConfig& cfg,
                                  const Mat& music);

// Checkpoint container: config plus every named array (little-endian f32
// payload behind a JSON manifest).
struct Checkpoint {
  AttentionConfig config;
  ParamStore params;
};

void save_checkpoint(const std::string& path, const AttentionConfig& cfg,
                     const ParamStore& params);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace popdg::popnet
