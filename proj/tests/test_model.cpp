#include <cmath>

#include "doctest.h"

#include "cdfsl/gradcheck.hpp"
#include "cdfsl/model.hpp"

using namespace cdfsl;

namespace {

ClipSpec desk_spec() { return ClipSpec{}; }  // 8x3x16x16, patches (2,4,4) -> 64 tokens

EncoderConfig desk_model() { return EncoderConfig{}; }

Tensor random_clip(const ClipSpec& spec, std::uint64_t seed) {
  RngStream rng(seed);
  Tensor clip = Tensor::zeros({spec.frames, spec.channels, spec.height, spec.width});
  for (double& v : clip.raw()) v = rng.uniform();
  return clip;
}

void zero_param(ModelParams& p, const std::string& name) {
  for (double& v : p.at(name).raw()) v = 0.0;
}

}  // namespace

TEST_CASE("clip spec geometry") {
  ClipSpec s;
  s.frames = 4;
  s.height = 8;
  s.width = 8;
  s.patch_t = 2;
  s.patch_h = 2;
  s.patch_w = 2;
  s.validate();
  CHECK(s.token_count() == 2 * 4 * 4);

  ClipSpec bad = s;
  bad.patch_h = 3;
  CHECK_THROWS_AS(bad.validate(), ValidationError);

  // Token-count formula over random divisible specs.
  RngStream rng(77);
  for (int i = 0; i < 60; ++i) {
    ClipSpec r;
    r.patch_t = 1 + rng.uniform_int(3);
    r.patch_h = 1 + rng.uniform_int(4);
    r.patch_w = 1 + rng.uniform_int(4);
    int gt = 1 + rng.uniform_int(4);
    int gh = 1 + rng.uniform_int(4);
    int gw = 1 + rng.uniform_int(4);
    if (gt * gh * gw < 4) continue;
    r.frames = r.patch_t * gt;
    r.height = r.patch_h * gh;
    r.width = r.patch_w * gw;
    r.validate();
    CHECK(r.token_count() == gt * gh * gw);
  }
}

TEST_CASE("encoder config invariants") {
  EncoderConfig c;
  c.depth = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = EncoderConfig{};
  c.heads = 5;  // does not divide 32
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = EncoderConfig{};
  c.decoder_depth = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("mask plan counts are exact") {
  RngStream rng(1);
  for (int i = 0; i < 50; ++i) {
    int tokens = 8 + rng.uniform_int(120);
    double ratio = rng.uniform(0.05, 0.95);
    int expect = static_cast<int>(std::lround(ratio * tokens));
    if (expect < 1 || expect >= tokens) continue;
    MaskPlan plan = MaskPlan::sample(tokens, ratio, rng);
    CHECK(plan.masked_count() == expect);
  }
  MaskPlan none;
  none.masked.assign(8, 0);
  CHECK_THROWS_AS(none.validate(8), ValidationError);
  MaskPlan all;
  all.masked.assign(8, 1);
  CHECK_THROWS_AS(all.validate(8), ValidationError);
}

TEST_CASE("tokenize: zero clip with zero positional table gives the bias") {
  ClipSpec spec = desk_spec();
  EncoderConfig cfg = desk_model();
  ModelParams p = init_encoder_params(spec, cfg, 3);
  zero_param(p, "enc.pos");
  for (double& v : p.at("enc.embed.b").raw()) v = 0.25;
  Tensor clip = Tensor::zeros({spec.frames, spec.channels, spec.height, spec.width});
  Tensor tokens = tokenize(clip, spec, p);
  CHECK(tokens.dim(0) == spec.token_count());
  for (double v : tokens.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("tokenize: permuting patches permutes tokens before the positional table") {
  ClipSpec spec = desk_spec();
  EncoderConfig cfg = desk_model();
  ModelParams p = init_encoder_params(spec, cfg, 5);
  zero_param(p, "enc.pos");
  Tensor clip = random_clip(spec, 11);

  Tensor base = tokenize(clip, spec, p);

  // Swap the pixel content of two spatial patches in every frame pair they
  // cover, then check the corresponding token rows swapped.
  Tensor patches = extract_patches(clip, spec);
  const int P = spec.patch_dim();
  std::vector<double> swapped(patches.values().begin(), patches.values().end());
  for (int j = 0; j < P; ++j) {
    std::swap(swapped[static_cast<std::size_t>(0) * P + j],
              swapped[static_cast<std::size_t>(5) * P + j]);
  }
  Tensor patch_mat = Tensor::from(patches.shape(), std::move(swapped));
  Tensor projected = add(matmul(patch_mat, p.at("enc.embed.w")), p.at("enc.embed.b"));
  for (int j = 0; j < cfg.embed_dim; ++j) {
    CHECK(projected.values()[static_cast<std::size_t>(0) * cfg.embed_dim + j] ==
          doctest::Approx(base.values()[static_cast<std::size_t>(5) * cfg.embed_dim + j]));
    CHECK(projected.values()[static_cast<std::size_t>(5) * cfg.embed_dim + j] ==
          doctest::Approx(base.values()[static_cast<std::size_t>(0) * cfg.embed_dim + j]));
  }
}

TEST_CASE("encode: duplicated tokens stay identical and pooled has the right shape") {
  EncoderConfig cfg = desk_model();
  ModelParams p = init_encoder_params(desk_spec(), cfg, 7);
  RngStream rng(9);
  std::vector<double> row(static_cast<std::size_t>(cfg.embed_dim));
  for (double& v : row) v = rng.uniform(-1, 1);
  std::vector<double> tokens;
  for (int i = 0; i < 6; ++i) tokens.insert(tokens.end(), row.begin(), row.end());
  Tensor t = Tensor::from({6, cfg.embed_dim}, std::move(tokens));
  EncodeResult out = encode(t, cfg, p);
  CHECK(out.pooled.rank() == 1);
  CHECK(out.pooled.dim(0) == cfg.embed_dim);
  for (int r = 1; r < 6; ++r) {
    for (int j = 0; j < cfg.embed_dim; ++j) {
      CHECK(out.tokens.values()[static_cast<std::size_t>(r) * cfg.embed_dim + j] ==
            doctest::Approx(out.tokens.values()[static_cast<std::size_t>(j)]).epsilon(1e-12));
    }
  }
}

TEST_CASE("encode is permutation-equivariant with a zero positional table") {
  ClipSpec spec = desk_spec();
  EncoderConfig cfg = desk_model();
  ModelParams p = init_encoder_params(spec, cfg, 13);
  zero_param(p, "enc.pos");
  Tensor clip = random_clip(spec, 21);
  Tensor tokens = tokenize(clip, spec, p);

  const int L = spec.token_count();
  std::vector<int> perm(static_cast<std::size_t>(L));
  for (int i = 0; i < L; ++i) perm[static_cast<std::size_t>(i)] = i;
  RngStream rng(4);
  rng.shuffle(perm);

  EncodeResult base = encode(tokens, cfg, p);
  Tensor permuted = gather_rows(tokens, perm);
  EncodeResult out = encode(permuted, cfg, p);
  const int D = cfg.embed_dim;
  for (int i = 0; i < L; ++i) {
    for (int j = 0; j < D; ++j) {
      CHECK(out.tokens.values()[static_cast<std::size_t>(i) * D + j] ==
            doctest::Approx(
                base.tokens.values()[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]) * D + j])
                .epsilon(1e-9));
    }
  }
}

TEST_CASE("mae loss is zero for a decoder that reproduces the target exactly") {
  ClipSpec spec = desk_spec();
  EncoderConfig cfg = desk_model();
  ModelParams p = init_encoder_params(spec, cfg, 17);
  // Constant clip: per-patch normalized targets are exactly zero. Zeroing the
  // prediction head makes the decoder output zero as well.
  zero_param(p, "dec.pred.w");
  zero_param(p, "dec.pred.b");
  Tensor clip = Tensor::full({spec.frames, spec.channels, spec.height, spec.width}, 0.5);
  RngStream rng(2);
  MaskPlan plan = MaskPlan::sample(spec.token_count(), 0.75, rng);
  CHECK(mae_forward(clip, spec, cfg, p, plan).item() == 0.0);
}

TEST_CASE("mae target term ignores pixels of unmasked patches") {
  ClipSpec spec = desk_spec();
  EncoderConfig cfg = desk_model();
  ModelParams p = init_encoder_params(spec, cfg, 19);
  // Cut the pixel -> encoder path so the loss depends only on the targets.
  zero_param(p, "enc.embed.w");
  RngStream rng(3);
  MaskPlan plan = MaskPlan::sample(spec.token_count(), 0.5, rng);
  Tensor clip = random_clip(spec, 31);
  double base = mae_forward(clip, spec, cfg, p, plan).item();

  // Perturb all pixels of the first visible patch.
  std::vector<int> visible = plan.visible_indices();
  const int gh = spec.height / spec.patch_h;
  const int gw = spec.width / spec.patch_w;
  int token = visible[0];
  int tt = token / (gh * gw), hh = (token / gw) % gh, ww = token % gw;
  Tensor perturbed = clip.clone(false);
  for (int dt = 0; dt < spec.patch_t; ++dt) {
    for (int c = 0; c < spec.channels; ++c) {
      for (int dy = 0; dy < spec.patch_h; ++dy) {
        for (int dx = 0; dx < spec.patch_w; ++dx) {
          int t = tt * spec.patch_t + dt;
          int y = hh * spec.patch_h + dy;
          int x = ww * spec.patch_w + dx;
          std::size_t off =
              ((static_cast<std::size_t>(t) * spec.channels + c) * spec.height + y) * spec.width +
              x;
          perturbed.raw()[off] = 1.0 - perturbed.raw()[off];
        }
      }
    }
  }
  CHECK(mae_forward(perturbed, spec, cfg, p, plan).item() == doctest::Approx(base).epsilon(1e-15));

  // Sanity: perturbing a masked patch does change the loss.
  std::vector<int> masked = plan.masked_indices();
  token = masked[0];
  tt = token / (gh * gw);
  hh = (token / gw) % gh;
  ww = token % gw;
  Tensor perturbed2 = clip.clone(false);
  for (int dt = 0; dt < spec.patch_t; ++dt) {
    for (int dy = 0; dy < spec.patch_h; ++dy) {
      int t = tt * spec.patch_t + dt;
      int y = hh * spec.patch_h + dy;
      std::size_t off =
          ((static_cast<std::size_t>(t) * spec.channels + 0) * spec.height + y) * spec.width +
          ww * spec.patch_w;
      perturbed2.raw()[off] = 1.0 - perturbed2.raw()[off];
    }
  }
  CHECK(mae_forward(perturbed2, spec, cfg, p, plan).item() != doctest::Approx(base));
}

TEST_CASE("mae loss positive for fresh models on random clips") {
  ClipSpec spec = desk_spec();
  EncoderConfig cfg = desk_model();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ModelParams p = init_encoder_params(spec, cfg, seed);
    RngStream rng(seed + 100);
    MaskPlan plan = MaskPlan::sample(spec.token_count(), 0.75, rng);
    CHECK(mae_forward(random_clip(spec, seed + 500), spec, cfg, p, plan).item() > 0.0);
  }
}

TEST_CASE("mae gradient matches finite differences") {
  ClipSpec spec = desk_spec();
  EncoderConfig cfg = desk_model();
  ModelParams p = init_encoder_params(spec, cfg, 23);
  Tensor clip = random_clip(spec, 41);
  RngStream rng(5);
  MaskPlan plan = MaskPlan::sample(spec.token_count(), 0.75, rng);
  auto f = [&]() { return mae_forward(clip, spec, cfg, p, plan); };
  std::vector<Tensor> checked = {p.at("enc.embed.w"), p.at("enc.blk0.attn.wq"),
                                 p.at("enc.blk1.mlp.w1"), p.at("dec.mask"), p.at("dec.pred.w"),
                                 p.at("enc.norm.g")};
  GradCheckOptions opt;
  opt.max_coords_per_tensor = 12;
  opt.analytic_floor = 1e-3;
  GradCheckResult r = finite_diff_check(f, checked, 1e-5, opt);
  CHECK(r.checked > 0);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("classify hand cases and matvec oracle") {
  EncoderConfig cfg = desk_model();
  ModelParams head = init_head_params(cfg, 6, 3);
  ModelParams p;
  for (const auto& [k, v] : head) p.insert(k, v);

  Tensor pooled = Tensor::zeros({cfg.embed_dim});
  RngStream rng(8);
  for (double& v : pooled.raw()) v = rng.uniform(-1, 1);

  // Zero weights: logits equal the bias.
  for (double& v : p.at("head.w").raw()) v = 0.0;
  for (int j = 0; j < 6; ++j) p.at("head.b").raw()[static_cast<std::size_t>(j)] = 0.5 + j;
  Tensor logits = classify(pooled, p);
  for (int j = 0; j < 6; ++j) {
    CHECK(logits.values()[static_cast<std::size_t>(j)] == doctest::Approx(0.5 + j));
  }

  // One-hot pooled vector selects a weight row plus bias.
  ModelParams p2;
  ModelParams head2 = init_head_params(cfg, 6, 5);
  for (const auto& [k, v] : head2) p2.insert(k, v);
  Tensor onehot = Tensor::zeros({cfg.embed_dim});
  onehot.raw()[3] = 1.0;
  Tensor l2 = classify(onehot, p2);
  for (int j = 0; j < 6; ++j) {
    double expect = p2.at("head.w").values()[static_cast<std::size_t>(3) * 6 + j] +
                    p2.at("head.b").values()[static_cast<std::size_t>(j)];
    CHECK(l2.values()[static_cast<std::size_t>(j)] == doctest::Approx(expect).epsilon(1e-15));
  }

  // Random case against a scalar-loop matvec.
  Tensor l3 = classify(pooled, p2);
  for (int j = 0; j < 6; ++j) {
    double acc = p2.at("head.b").values()[static_cast<std::size_t>(j)];
    for (int d = 0; d < cfg.embed_dim; ++d) {
      acc += pooled.values()[static_cast<std::size_t>(d)] *
             p2.at("head.w").values()[static_cast<std::size_t>(d) * 6 + j];
    }
    CHECK(std::fabs(l3.values()[static_cast<std::size_t>(j)] - acc) < 1e-12);
  }

  Tensor wrong = Tensor::zeros({cfg.embed_dim + 1});
  CHECK_THROWS_AS(classify(wrong, p2), ConsistencyError);
}

TEST_CASE("batched paths match the single-clip ops") {
  ClipSpec spec = desk_spec();
  EncoderConfig cfg = desk_model();
  ModelParams p = init_encoder_params(spec, cfg, 29);
  ModelParams head = init_head_params(cfg, 4, 29);
  for (const auto& [k, v] : head) p.insert(k, v);

  std::vector<Tensor> clips = {random_clip(spec, 1), random_clip(spec, 2), random_clip(spec, 3)};
  Tensor batch_tokens = tokenize_batch(clips, spec, p);
  BatchEncodeResult batch = encode_batch(batch_tokens, 3, cfg, p);
  Tensor batch_logits = classify_batch(batch.pooled, p);

  const int L = spec.token_count();
  const int D = cfg.embed_dim;
  for (int c = 0; c < 3; ++c) {
    Tensor tokens = tokenize(clips[static_cast<std::size_t>(c)], spec, p);
    for (int i = 0; i < L * D; ++i) {
      CHECK(tokens.values()[static_cast<std::size_t>(i)] ==
            batch_tokens.values()[static_cast<std::size_t>(c) * L * D + i]);
    }
    EncodeResult single = encode(tokens, cfg, p);
    for (int j = 0; j < D; ++j) {
      CHECK(single.pooled.values()[static_cast<std::size_t>(j)] ==
            batch.pooled.values()[static_cast<std::size_t>(c) * D + j]);
    }
    Tensor logit = classify(single.pooled, p);
    for (int j = 0; j < 4; ++j) {
      CHECK(logit.values()[static_cast<std::size_t>(j)] ==
            batch_logits.values()[static_cast<std::size_t>(c) * 4 + j]);
    }
  }

  // Batched MAE equals the mean of per-clip losses.
  RngStream rng(6);
  std::vector<MaskPlan> plans;
  for (int c = 0; c < 3; ++c) plans.push_back(MaskPlan::sample(L, 0.75, rng));
  double batched = mae_loss_batch(clips, spec, cfg, p, plans).item();
  double mean = 0.0;
  for (int c = 0; c < 3; ++c) {
    mean += mae_forward(clips[static_cast<std::size_t>(c)], spec, cfg, p,
                        plans[static_cast<std::size_t>(c)])
                .item();
  }
  mean /= 3.0;
  CHECK(batched == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("end-to-end gradient check through tokenize, encode, classify, cross entropy") {
  ClipSpec spec = desk_spec();
  EncoderConfig cfg = desk_model();
  ModelParams p = init_encoder_params(spec, cfg, 37);
  ModelParams head = init_head_params(cfg, 5, 37);
  for (const auto& [k, v] : head) p.insert(k, v);

  std::vector<Tensor> clips = {random_clip(spec, 61), random_clip(spec, 62)};
  Tensor target = Tensor::from({2, 5}, {1, 0, 0, 0, 0, 0, 0, 1, 0, 0});
  auto f = [&]() {
    Tensor tokens = tokenize_batch(clips, spec, p);
    BatchEncodeResult enc = encode_batch(tokens, 2, cfg, p);
    return cross_entropy(classify_batch(enc.pooled, p), target);
  };
  std::vector<Tensor> checked = {p.at("enc.embed.w"), p.at("enc.pos"), p.at("enc.blk0.attn.wv"),
                                 p.at("enc.blk1.ln1.g"), p.at("enc.blk0.mlp.w2"), p.at("head.w"),
                                 p.at("head.b")};
  GradCheckOptions opt;
  opt.max_coords_per_tensor = 10;
  GradCheckResult r = finite_diff_check(f, checked, 1e-5, opt);
  CHECK(r.checked > 0);
  CHECK(r.max_rel_error < 1e-5);
}
