#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdfsl/rng.hpp"
#include "cdfsl/tensor.hpp"

namespace cdfsl {

// Geometry of one video clip and its tube patches.
struct ClipSpec {
  int frames = 8;
  int channels = 3;
  int height = 16;
  int width = 16;
  int patch_t = 2;
  int patch_h = 4;
  int patch_w = 4;

  void validate() const;
  int token_count() const {
    return (frames / patch_t) * (height / patch_h) * (width / patch_w);
  }
  int patch_dim() const { return patch_t * channels * patch_h * patch_w; }
  std::size_t clip_numel() const {
    return static_cast<std::size_t>(frames) * channels * height * width;
  }
};

struct EncoderConfig {
  int embed_dim = 32;
  int depth = 2;
  int heads = 4;
  double mlp_ratio = 2.0;
  int decoder_dim = 16;
  int decoder_depth = 1;

  void validate() const;
  int mlp_hidden(int dim) const { return static_cast<int>(dim * mlp_ratio); }
};

// Which tokens an MAE step hides. masked_count == round(mask_ratio * L) exactly.
struct MaskPlan {
  std::vector<char> masked;  // one flag per token
  double mask_ratio = 0.75;

  static MaskPlan sample(int token_count, double mask_ratio, RngStream& rng);
  void validate(int token_count) const;
  int masked_count() const;
  std::vector<int> masked_indices() const;
  std::vector<int> visible_indices() const;
};

// Parameter factories. Encoder params cover the patch embedding, positional
// table, transformer blocks, final norm, and the MAE decoder ("enc.*" and
// "dec.*" groups). The source classifier head lives in its own "head" group
// so its learning rate can be scaled independently.
ModelParams init_encoder_params(const ClipSpec& spec, const EncoderConfig& cfg,
                                std::uint64_t seed);
ModelParams init_head_params(const EncoderConfig& cfg, int n_classes, std::uint64_t seed);

// Clip [T x C x H x W] -> flattened tube patches [L x P], plain data (no grad).
Tensor extract_patches(const Tensor& clip, const ClipSpec& spec);

// Patch embedding + positional table: [L x embed_dim].
Tensor tokenize(const Tensor& clip, const ClipSpec& spec, const ModelParams& params);

struct EncodeResult {
  Tensor tokens;  // [L_keep x embed_dim], post final norm
  Tensor pooled;  // [embed_dim], mean over output tokens
};

// Runs the encoder over the given tokens. When keep is supplied only the
// unmasked tokens enter the blocks (MAE style).
EncodeResult encode(const Tensor& tokens, const EncoderConfig& cfg, const ModelParams& params,
                    const MaskPlan* keep = nullptr);

// Affine head over a pooled feature vector: [M] logits, no softmax.
Tensor classify(const Tensor& pooled, const ModelParams& params);

// Masked-reconstruction loss for one clip: MSE between decoder output and
// per-patch normalized pixels, over masked patches only.
Tensor mae_forward(const Tensor& clip, const ClipSpec& spec, const EncoderConfig& cfg,
                   const ModelParams& params, const MaskPlan& plan);

// ---- batched paths ----------------------------------------------------------
// Identical math to mapping the single-clip functions over the batch (each
// output row is the same dot-product accumulation), but large enough GEMMs to
// vectorize well. Trainers and the feature extractor use these.

Tensor tokenize_batch(const std::vector<Tensor>& clips, const ClipSpec& spec,
                      const ModelParams& params);  // [B*L x D]

struct BatchEncodeResult {
  Tensor tokens;  // [B*L_keep x D]
  Tensor pooled;  // [B x D]
  int batch = 0;
  int rows_per_clip = 0;
};

BatchEncodeResult encode_batch(const Tensor& tokens, int batch, const EncoderConfig& cfg,
                               const ModelParams& params);

Tensor classify_batch(const Tensor& pooled, const ModelParams& params);  // [B x M]

Tensor mae_loss_batch(const std::vector<Tensor>& clips, const ClipSpec& spec,
                      const EncoderConfig& cfg, const ModelParams& params,
                      const std::vector<MaskPlan>& plans);

}  // namespace cdfsl
