#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "cdfsl/data.hpp"
#include "cdfsl/model.hpp"
#include "cdfsl/optim.hpp"

namespace cdfsl {

struct PretrainConfig {
  int epochs = 100;       // paper recipe: 400; desk-scaled run time
  int batch_size = 32;
  double learning_rate = 0.1;
  double mask_ratio = 0.75;
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PretrainEpoch {
  int epoch = 0;  // 1-based in logs
  double mse_loss = 0.0;
  double wall_ms = 0.0;
};

struct PretrainResult {
  ModelParams params;  // encoder + decoder
  std::vector<PretrainEpoch> log;
  std::uint64_t label_reads = 0;  // audit delta across the stage; must stay 0
};

// Mid-stage snapshot for bit-exact resume at an epoch boundary.
struct PretrainState {
  ModelParams params;
  GradMap velocity;
  int next_epoch = 0;
};

using PretrainEpochHook =
    std::function<void(const PretrainEpoch&, const ModelParams&, const GradMap&)>;

// Stage 1: masked-autoencoder training over the pooled source + unlabeled
// target clips. No label is read; the views' audit counter proves it.
PretrainResult run_pretraining(const DatasetViews& views, const ClipSpec& spec,
                               const EncoderConfig& model_cfg, const PretrainConfig& cfg,
                               const PretrainState* resume = nullptr,
                               const PretrainEpochHook& on_epoch = nullptr);

// >= 30% drop from the first to the last logged epoch.
bool pretrain_loss_trend_ok(const std::vector<PretrainEpoch>& log, double min_drop = 0.30);

}  // namespace cdfsl
