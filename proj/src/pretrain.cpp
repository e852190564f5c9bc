#include "cdfsl/pretrain.hpp"

#include <chrono>
#include <cmath>

namespace cdfsl {

void PretrainConfig::validate() const {
  if (epochs < 0) throw ValidationError("PretrainConfig: epochs must be >= 0");
  if (batch_size < 1) throw ValidationError("PretrainConfig: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ValidationError("PretrainConfig: learning_rate must be > 0");
  if (mask_ratio <= 0.0 || mask_ratio >= 1.0) {
    throw ValidationError("PretrainConfig: mask_ratio must lie in (0, 1)");
  }
}

PretrainResult run_pretraining(const DatasetViews& views, const ClipSpec& spec,
                               const EncoderConfig& model_cfg, const PretrainConfig& cfg,
                               const PretrainState* resume, const PretrainEpochHook& on_epoch) {
  cfg.validate();
  model_cfg.validate();
  const std::uint64_t reads_before = views.label_reads();

  ModelParams params = resume ? resume->params.clone(true)
                              : init_encoder_params(spec, model_cfg, cfg.seed);
  SgdOptimizer opt(
      OptimizerConfig{cfg.learning_rate, cfg.weight_decay, cfg.momentum});
  if (resume) opt.velocity() = resume->velocity;

  const SplitView& src = views.source();
  const SplitView& tgt = views.target_unlabeled();
  const int pool = src.size() + tgt.size();
  const int L = spec.token_count();

  PretrainResult result;
  const int start_epoch = resume ? resume->next_epoch : 0;
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    auto batches = epoch_batches(pool, cfg.batch_size, cfg.seed, stream_tag::kPretrainOrder, epoch);
    double loss_sum = 0.0;
    long clip_count = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      RngStream mask_rng = derive_stream(
          cfg.seed, {stream_tag::kPretrainMask, static_cast<std::uint64_t>(epoch),
                     static_cast<std::uint64_t>(bi)});
      std::vector<Tensor> clips;
      std::vector<MaskPlan> plans;
      clips.reserve(batches[bi].size());
      for (int idx : batches[bi]) {
        clips.push_back(idx < src.size() ? src.clip(idx) : tgt.clip(idx - src.size()));
        plans.push_back(MaskPlan::sample(L, cfg.mask_ratio, mask_rng));
      }
      GradTape tape;
      Tensor loss = mae_loss_batch(clips, spec, model_cfg, params, plans);
      const double v = loss.item();
      if (!std::isfinite(v)) {
        throw TrainingError("pretraining diverged (non-finite loss) at epoch " +
                            std::to_string(epoch + 1));
      }
      loss_sum += v * static_cast<double>(clips.size());
      clip_count += static_cast<long>(clips.size());
      tape.backward(loss);
      opt.step(params);
    }
    auto t1 = std::chrono::steady_clock::now();
    PretrainEpoch rec;
    rec.epoch = epoch + 1;
    rec.mse_loss = loss_sum / static_cast<double>(clip_count);
    rec.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec, params, opt.velocity());
  }

  result.params = std::move(params);
  result.label_reads = views.label_reads() - reads_before;
  if (result.label_reads != 0) {
    throw ConsistencyError("pretraining read " + std::to_string(result.label_reads) +
                           " labels; stage 1 must not touch labels");
  }
  return result;
}

bool pretrain_loss_trend_ok(const std::vector<PretrainEpoch>& log, double min_drop) {
  if (log.size() < 2) return false;
  const double first = log.front().mse_loss;
  const double last = log.back().mse_loss;
  return last <= first * (1.0 - min_drop);
}

}  // namespace cdfsl
