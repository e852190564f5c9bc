#include "cdfsl/model.hpp"

#include <cmath>

namespace cdfsl {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInitStd = 0.02;
constexpr double kPatchNormEps = 1e-6;

Tensor init_weight(Shape shape, RngStream stream) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& v : t.raw()) v = stream.trunc_normal(kInitStd);
  return t;
}

void add_block_params(ModelParams& p, const std::string& prefix, int dim, int hidden,
                      const RngStream& root) {
  auto w = [&](const std::string& name, Shape shape) {
    p.insert(name, init_weight(std::move(shape), root.split(name)));
  };
  auto zero = [&](const std::string& name, Shape shape) {
    p.insert(name, Tensor::zeros(std::move(shape), true));
  };
  auto one = [&](const std::string& name, Shape shape) {
    p.insert(name, Tensor::full(std::move(shape), 1.0, true));
  };
  one(prefix + ".ln1.g", {dim});
  zero(prefix + ".ln1.b", {dim});
  w(prefix + ".attn.wq", {dim, dim});
  zero(prefix + ".attn.bq", {dim});
  w(prefix + ".attn.wk", {dim, dim});
  zero(prefix + ".attn.bk", {dim});
  w(prefix + ".attn.wv", {dim, dim});
  zero(prefix + ".attn.bv", {dim});
  w(prefix + ".attn.wo", {dim, dim});
  zero(prefix + ".attn.bo", {dim});
  one(prefix + ".ln2.g", {dim});
  zero(prefix + ".ln2.b", {dim});
  w(prefix + ".mlp.w1", {dim, hidden});
  zero(prefix + ".mlp.b1", {hidden});
  w(prefix + ".mlp.w2", {hidden, dim});
  zero(prefix + ".mlp.b2", {dim});
}

// Multi-head self-attention over per-clip row blocks of a batched token
// matrix. Each clip attends only within its own rows.
Tensor mha(const Tensor& x, int batch, int heads, const ModelParams& p,
           const std::string& prefix) {
  Tensor q = add(matmul(x, p.at(prefix + ".wq")), p.at(prefix + ".bq"));
  Tensor k = add(matmul(x, p.at(prefix + ".wk")), p.at(prefix + ".bk"));
  Tensor v = add(matmul(x, p.at(prefix + ".wv")), p.at(prefix + ".bv"));
  Tensor o = multihead_attention(q, k, v, batch, heads);
  return add(matmul(o, p.at(prefix + ".wo")), p.at(prefix + ".bo"));
}

Tensor transformer_block(const Tensor& x, int batch, int heads,
                         const ModelParams& p, const std::string& prefix) {
  Tensor normed = layer_norm(x, p.at(prefix + ".ln1.g"), p.at(prefix + ".ln1.b"), kLnEps);
  Tensor h = add(x, mha(normed, batch, heads, p, prefix + ".attn"));
  Tensor m = layer_norm(h, p.at(prefix + ".ln2.g"), p.at(prefix + ".ln2.b"), kLnEps);
  m = add(matmul(m, p.at(prefix + ".mlp.w1")), p.at(prefix + ".mlp.b1"));
  m = gelu(m);
  m = add(matmul(m, p.at(prefix + ".mlp.w2")), p.at(prefix + ".mlp.b2"));
  return add(h, m);
}

Tensor run_blocks(Tensor x, int batch, int depth, int heads, const ModelParams& p,
                  const std::string& group) {
  for (int b = 0; b < depth; ++b) {
    x = transformer_block(x, batch, heads, p, group + ".blk" + std::to_string(b));
  }
  return layer_norm(x, p.at(group + ".norm.g"), p.at(group + ".norm.b"), kLnEps);
}

// Per-patch pixel normalization: (p - mean) / sqrt(var + eps), rows of [m x P].
std::vector<double> normalized_patch_rows(const Tensor& patches, const std::vector<int>& rows) {
  const std::size_t pdim = static_cast<std::size_t>(patches.dim(1));
  std::vector<double> out(rows.size() * pdim);
  const double* pp = patches.values().data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const double* src = pp + static_cast<std::size_t>(rows[r]) * pdim;
    double mean = 0.0;
    for (std::size_t j = 0; j < pdim; ++j) mean += src[j];
    mean /= static_cast<double>(pdim);
    double var = 0.0;
    for (std::size_t j = 0; j < pdim; ++j) {
      double d = src[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(pdim);
    const double inv = 1.0 / std::sqrt(var + kPatchNormEps);
    for (std::size_t j = 0; j < pdim; ++j) out[r * pdim + j] = (src[j] - mean) * inv;
  }
  return out;
}

// Decoder over a full token sequence assembled from projected visible tokens
// and the learned mask token, returning per-token pixel predictions.
Tensor decode_full_sequence(const Tensor& visible_encoded, const std::vector<MaskPlan>& plans,
                            const ClipSpec& spec, const EncoderConfig& cfg,
                            const ModelParams& p) {
  const int L = spec.token_count();
  const int batch = static_cast<int>(plans.size());
  Tensor proj = add(matmul(visible_encoded, p.at("dec.proj.w")), p.at("dec.proj.b"));
  Tensor base = broadcast_row(p.at("dec.mask"), batch * L);
  // Flattened visible positions across the batch, aligned with proj's rows.
  std::vector<int> flat_visible;
  for (int c = 0; c < batch; ++c) {
    for (int i : plans[static_cast<std::size_t>(c)].visible_indices()) {
      flat_visible.push_back(c * L + i);
    }
  }
  Tensor seq = scatter_rows(base, flat_visible, proj);
  Tensor pos = batch == 1 ? p.at("dec.pos") : tile_rows(p.at("dec.pos"), batch);
  seq = add(seq, pos);
  seq = run_blocks(seq, batch, cfg.decoder_depth, cfg.heads, p, "dec");
  return add(matmul(seq, p.at("dec.pred.w")), p.at("dec.pred.b"));
}

Tensor mae_loss_impl(const std::vector<Tensor>& clips, const ClipSpec& spec,
                     const EncoderConfig& cfg, const ModelParams& params,
                     const std::vector<MaskPlan>& plans) {
  const int L = spec.token_count();
  const int batch = static_cast<int>(clips.size());
  if (batch == 0) throw ValidationError("mae loss: empty batch");
  if (plans.size() != clips.size()) throw ConsistencyError("mae loss: one plan per clip required");
  for (const MaskPlan& plan : plans) plan.validate(L);

  std::vector<Tensor> patch_mats;
  patch_mats.reserve(clips.size());
  for (const Tensor& clip : clips) patch_mats.push_back(extract_patches(clip, spec));

  Tensor tokens = tokenize_batch(clips, spec, params);
  const int masked0 = plans[0].masked_count();
  for (const MaskPlan& plan : plans) {
    if (plan.masked_count() != masked0) {
      throw ConsistencyError("mae loss: plans in one batch must mask the same token count");
    }
  }
  std::vector<int> flat_visible;
  std::vector<int> flat_masked;
  std::vector<double> target;
  const std::size_t pdim = static_cast<std::size_t>(spec.patch_dim());
  for (int c = 0; c < batch; ++c) {
    const MaskPlan& plan = plans[static_cast<std::size_t>(c)];
    for (int i : plan.visible_indices()) flat_visible.push_back(c * L + i);
    std::vector<int> masked = plan.masked_indices();
    for (int i : masked) flat_masked.push_back(c * L + i);
    std::vector<double> rows = normalized_patch_rows(patch_mats[static_cast<std::size_t>(c)], masked);
    target.insert(target.end(), rows.begin(), rows.end());
  }
  Tensor visible = gather_rows(tokens, flat_visible);
  Tensor encoded = run_blocks(visible, batch, cfg.depth, cfg.heads, params, "enc");
  Tensor pred = decode_full_sequence(encoded, plans, spec, cfg, params);
  Tensor pred_masked = gather_rows(pred, flat_masked);
  Tensor target_t = Tensor::from({static_cast<int>(flat_masked.size()), static_cast<int>(pdim)},
                                 std::move(target));
  Tensor diff = sub(pred_masked, target_t);
  return mean_all(mul(diff, diff));
}

}  // namespace

void ClipSpec::validate() const {
  if (frames < 1 || channels < 1 || height < 1 || width < 1 || patch_t < 1 || patch_h < 1 ||
      patch_w < 1) {
    throw ValidationError("ClipSpec: all dimensions must be positive");
  }
  if (frames % patch_t != 0 || height % patch_h != 0 || width % patch_w != 0) {
    throw ValidationError("ClipSpec: frames/height/width must be divisible by patch sizes");
  }
  if (token_count() < 4) {
    throw ValidationError("ClipSpec: token count must be >= 4, got " +
                          std::to_string(token_count()));
  }
}

void EncoderConfig::validate() const {
  if (embed_dim < 2 || decoder_dim < 2) {
    throw ValidationError("EncoderConfig: embed/decoder dims must be >= 2");
  }
  if (depth < 1 || decoder_depth < 1) {
    throw ValidationError("EncoderConfig: depth and decoder_depth must be >= 1");
  }
  if (heads < 1 || embed_dim % heads != 0 || decoder_dim % heads != 0) {
    throw ValidationError("EncoderConfig: heads must divide embed_dim and decoder_dim");
  }
  if (mlp_ratio <= 0.0) throw ValidationError("EncoderConfig: mlp_ratio must be positive");
}

MaskPlan MaskPlan::sample(int token_count, double mask_ratio, RngStream& rng) {
  if (mask_ratio <= 0.0 || mask_ratio >= 1.0) {
    throw ValidationError("MaskPlan: mask_ratio must lie in (0, 1)");
  }
  const int m = static_cast<int>(std::lround(mask_ratio * token_count));
  MaskPlan plan;
  plan.mask_ratio = mask_ratio;
  plan.masked.assign(static_cast<std::size_t>(token_count), 0);
  for (int i : rng.sample_without_replacement(token_count, m)) {
    plan.masked[static_cast<std::size_t>(i)] = 1;
  }
  plan.validate(token_count);
  return plan;
}

void MaskPlan::validate(int token_count) const {
  if (static_cast<int>(masked.size()) != token_count) {
    throw ValidationError("MaskPlan: flag count does not match token count");
  }
  const int m = masked_count();
  if (m < 1 || m >= token_count) {
    throw ValidationError("MaskPlan: plan must mask at least one and keep at least one token");
  }
}

int MaskPlan::masked_count() const {
  int m = 0;
  for (char c : masked) m += c ? 1 : 0;
  return m;
}

std::vector<int> MaskPlan::masked_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < masked.size(); ++i) {
    if (masked[i]) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::vector<int> MaskPlan::visible_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < masked.size(); ++i) {
    if (!masked[i]) out.push_back(static_cast<int>(i));
  }
  return out;
}

ModelParams init_encoder_params(const ClipSpec& spec, const EncoderConfig& cfg,
                                std::uint64_t seed) {
  spec.validate();
  cfg.validate();
  ModelParams p;
  RngStream root = derive_stream(seed, {stream_tag::kInitEncoder});
  auto w = [&](const std::string& name, Shape shape) {
    p.insert(name, init_weight(std::move(shape), root.split(name)));
  };
  const int L = spec.token_count();
  const int P = spec.patch_dim();
  w("enc.embed.w", {P, cfg.embed_dim});
  p.insert("enc.embed.b", Tensor::zeros({cfg.embed_dim}, true));
  w("enc.pos", {L, cfg.embed_dim});
  for (int b = 0; b < cfg.depth; ++b) {
    add_block_params(p, "enc.blk" + std::to_string(b), cfg.embed_dim,
                     cfg.mlp_hidden(cfg.embed_dim), root);
  }
  p.insert("enc.norm.g", Tensor::full({cfg.embed_dim}, 1.0, true));
  p.insert("enc.norm.b", Tensor::zeros({cfg.embed_dim}, true));

  w("dec.proj.w", {cfg.embed_dim, cfg.decoder_dim});
  p.insert("dec.proj.b", Tensor::zeros({cfg.decoder_dim}, true));
  w("dec.mask", {cfg.decoder_dim});
  w("dec.pos", {L, cfg.decoder_dim});
  for (int b = 0; b < cfg.decoder_depth; ++b) {
    add_block_params(p, "dec.blk" + std::to_string(b), cfg.decoder_dim,
                     cfg.mlp_hidden(cfg.decoder_dim), root);
  }
  p.insert("dec.norm.g", Tensor::full({cfg.decoder_dim}, 1.0, true));
  p.insert("dec.norm.b", Tensor::zeros({cfg.decoder_dim}, true));
  w("dec.pred.w", {cfg.decoder_dim, P});
  p.insert("dec.pred.b", Tensor::zeros({P}, true));
  return p;
}

ModelParams init_head_params(const EncoderConfig& cfg, int n_classes, std::uint64_t seed) {
  cfg.validate();
  if (n_classes < 2) throw ValidationError("head: at least two classes required");
  ModelParams p;
  RngStream root = derive_stream(seed, {stream_tag::kInitHead});
  p.insert("head.w", init_weight({cfg.embed_dim, n_classes}, root.split("head.w")));
  p.insert("head.b", Tensor::zeros({n_classes}, true));
  return p;
}

Tensor extract_patches(const Tensor& clip, const ClipSpec& spec) {
  spec.validate();
  Shape expect = {spec.frames, spec.channels, spec.height, spec.width};
  if (clip.shape() != expect) {
    throw ValidationError("extract_patches: clip shape " + shape_str(clip.shape()) +
                          " does not match spec " + shape_str(expect));
  }
  const int gt = spec.frames / spec.patch_t;
  const int gh = spec.height / spec.patch_h;
  const int gw = spec.width / spec.patch_w;
  const int P = spec.patch_dim();
  std::vector<double> out(static_cast<std::size_t>(spec.token_count()) * P);
  const double* pc = clip.values().data();
  const auto at = [&](int t, int c, int y, int x) {
    return pc[((static_cast<std::size_t>(t) * spec.channels + c) * spec.height + y) * spec.width +
              x];
  };
  std::size_t o = 0;
  for (int tt = 0; tt < gt; ++tt) {
    for (int hh = 0; hh < gh; ++hh) {
      for (int ww = 0; ww < gw; ++ww) {
        for (int dt = 0; dt < spec.patch_t; ++dt) {
          for (int c = 0; c < spec.channels; ++c) {
            for (int dy = 0; dy < spec.patch_h; ++dy) {
              for (int dx = 0; dx < spec.patch_w; ++dx) {
                out[o++] = at(tt * spec.patch_t + dt, c, hh * spec.patch_h + dy,
                              ww * spec.patch_w + dx);
              }
            }
          }
        }
      }
    }
  }
  return Tensor::from({spec.token_count(), P}, std::move(out));
}

Tensor tokenize(const Tensor& clip, const ClipSpec& spec, const ModelParams& params) {
  Tensor patches = extract_patches(clip, spec);
  Tensor projected = add(matmul(patches, params.at("enc.embed.w")), params.at("enc.embed.b"));
  return add(projected, params.at("enc.pos"));
}

EncodeResult encode(const Tensor& tokens, const EncoderConfig& cfg, const ModelParams& params,
                    const MaskPlan* keep) {
  cfg.validate();
  if (tokens.rank() != 2 || tokens.dim(1) != cfg.embed_dim) {
    throw ValidationError("encode: tokens must be [L x embed_dim]");
  }
  Tensor x = tokens;
  if (keep != nullptr) {
    keep->validate(tokens.dim(0));
    std::vector<int> visible = keep->visible_indices();
    if (visible.empty()) throw ValidationError("encode: no visible tokens");
    x = gather_rows(x, visible);
  }
  Tensor out = run_blocks(x, 1, cfg.depth, cfg.heads, params, "enc");
  return EncodeResult{out, mean_rows(out)};
}

Tensor classify(const Tensor& pooled, const ModelParams& params) {
  const Tensor& w = params.at("head.w");
  if (pooled.rank() != 1 || pooled.dim(0) != w.dim(0)) {
    throw ConsistencyError("classify: pooled width " + shape_str(pooled.shape()) +
                           " does not match head " + shape_str(w.shape()));
  }
  Tensor row = reshape(pooled, {1, pooled.dim(0)});
  Tensor logits = add(matmul(row, w), params.at("head.b"));
  return reshape(logits, {w.dim(1)});
}

Tensor mae_forward(const Tensor& clip, const ClipSpec& spec, const EncoderConfig& cfg,
                   const ModelParams& params, const MaskPlan& plan) {
  return mae_loss_impl({clip}, spec, cfg, params, {plan});
}

Tensor tokenize_batch(const std::vector<Tensor>& clips, const ClipSpec& spec,
                      const ModelParams& params) {
  if (clips.empty()) throw ValidationError("tokenize_batch: empty batch");
  const int L = spec.token_count();
  const int P = spec.patch_dim();
  std::vector<double> all;
  all.reserve(clips.size() * static_cast<std::size_t>(L) * P);
  for (const Tensor& clip : clips) {
    Tensor patches = extract_patches(clip, spec);
    all.insert(all.end(), patches.values().begin(), patches.values().end());
  }
  Tensor patch_mat =
      Tensor::from({static_cast<int>(clips.size()) * L, P}, std::move(all));
  Tensor projected = add(matmul(patch_mat, params.at("enc.embed.w")), params.at("enc.embed.b"));
  Tensor pos = clips.size() == 1 ? params.at("enc.pos")
                                 : tile_rows(params.at("enc.pos"), static_cast<int>(clips.size()));
  return add(projected, pos);
}

BatchEncodeResult encode_batch(const Tensor& tokens, int batch, const EncoderConfig& cfg,
                               const ModelParams& params) {
  cfg.validate();
  if (batch < 1 || tokens.dim(0) % batch != 0) {
    throw ValidationError("encode_batch: token rows not divisible by batch");
  }
  const int rows_per_clip = tokens.dim(0) / batch;
  Tensor out = run_blocks(tokens, batch, cfg.depth, cfg.heads, params, "enc");
  return BatchEncodeResult{out, block_mean_rows(out, rows_per_clip), batch, rows_per_clip};
}

Tensor classify_batch(const Tensor& pooled, const ModelParams& params) {
  const Tensor& w = params.at("head.w");
  if (pooled.rank() != 2 || pooled.dim(1) != w.dim(0)) {
    throw ConsistencyError("classify_batch: pooled shape " + shape_str(pooled.shape()) +
                           " does not match head " + shape_str(w.shape()));
  }
  return add(matmul(pooled, w), params.at("head.b"));
}

Tensor mae_loss_batch(const std::vector<Tensor>& clips, const ClipSpec& spec,
                      const EncoderConfig& cfg, const ModelParams& params,
                      const std::vector<MaskPlan>& plans) {
  return mae_loss_impl(clips, spec, cfg, params, plans);
}

}  // namespace cdfsl
