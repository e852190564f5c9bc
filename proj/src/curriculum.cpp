#include "cdfsl/curriculum.hpp"

#include <cmath>

namespace cdfsl {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

Tensor one_hot(const std::vector<int>& labels, int n_classes) {
  std::vector<double> data(labels.size() * static_cast<std::size_t>(n_classes), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    data[i * static_cast<std::size_t>(n_classes) + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return Tensor::from({static_cast<int>(labels.size()), n_classes}, std::move(data));
}

constexpr double kFeatureNormEps = 1e-5;

// Training-time logits: pooled features are standardized per dimension over
// the batch before the affine head. Mean-pooled tokens carry a dominant
// clip-independent component, and without this step plain SGD cannot train
// the head at desk scale (the probe path in fewshot_eval fits raw features
// with a line search and stays unnormalized).
Tensor student_logits(const EncoderConfig& model_cfg, const ClipSpec& spec,
                      const ModelParams& params, const std::vector<Tensor>& clips) {
  Tensor tokens = tokenize_batch(clips, spec, params);
  BatchEncodeResult enc = encode_batch(tokens, static_cast<int>(clips.size()), model_cfg, params);
  return classify_batch(batch_standardize(enc.pooled, kFeatureNormEps), params);
}

}  // namespace

void CurriculumConfig::validate() const {
  if (epochs < 1) throw ValidationError("CurriculumConfig: epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("CurriculumConfig: batch_size must be >= 1");
  if (!(student_lr > 0.0)) throw ValidationError("CurriculumConfig: student_lr must be > 0");
  if (teacher_momentum < 0.0 || teacher_momentum >= 1.0) {
    throw ValidationError("CurriculumConfig: teacher_momentum must lie in [0, 1)");
  }
  if (!(tau > 0.0)) throw ValidationError("CurriculumConfig: tau must be > 0");
  if (lambda_override && (*lambda_override < 0.0)) {
    throw ValidationError("CurriculumConfig: lambda_override must be >= 0");
  }
}

double lambda_cons(double x, double slope) {
  if (x < 0.0 || x > 1.0) {
    throw ValidationError("lambda_cons: x must lie in [0, 1], got " + std::to_string(x));
  }
  return std::atan(slope * (x - 0.5)) / kPi + 0.5;
}

double lambda_cls(double x, double slope) {
  if (x < 0.0 || x > 1.0) {
    throw ValidationError("lambda_cls: x must lie in [0, 1], got " + std::to_string(x));
  }
  return std::atan(-slope * (x - 0.5)) / kPi + 0.5;
}

ScheduleState schedule_at(int epoch, int total_epochs, double slope) {
  if (total_epochs < 1) throw ValidationError("schedule_at: total_epochs must be >= 1");
  if (epoch < 0 || epoch >= total_epochs) {
    throw ValidationError("schedule_at: epoch out of range");
  }
  ScheduleState s;
  s.x = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  s.lambda_cons = lambda_cons(s.x, slope);
  s.lambda_cls = lambda_cls(s.x, slope);
  return s;
}

Tensor sharpen(const Tensor& teacher_logits, double tau) {
  if (!(tau > 0.0)) throw ValidationError("sharpen: tau must be > 0");
  TapePause pause;  // stop-grad: never recorded, result detached
  Tensor sharp = softmax(scale(teacher_logits, 1.0 / tau));
  return sharp.detach();
}

void ema_update(TeacherState& teacher, const ModelParams& student, double alpha) {
  if (alpha < 0.0 || alpha >= 1.0) throw ValidationError("ema_update: alpha must lie in [0, 1)");
  if (teacher.params.size() != student.size()) {
    throw ConsistencyError("ema_update: parameter name sets differ");
  }
  auto it = teacher.params.begin();
  auto is = student.begin();
  for (; it != teacher.params.end(); ++it, ++is) {
    if (it->first != is->first) {
      throw ConsistencyError("ema_update: parameter name mismatch: " + it->first + " vs " +
                             is->first);
    }
    std::vector<double>& t = it->second.raw();
    auto s = is->second.values();
    if (t.size() != s.size()) throw ConsistencyError("ema_update: shape mismatch: " + it->first);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = alpha * t[i] + (1.0 - alpha) * s[i];
  }
  ++teacher.update_count;
}

Tensor supervised_loss(const EncoderConfig& model_cfg, const ClipSpec& spec,
                       const ModelParams& student, const std::vector<Tensor>& clips,
                       const std::vector<int>& labels, int n_classes) {
  if (clips.empty() || clips.size() != labels.size()) {
    throw ConsistencyError("supervised_loss: clips and labels must align");
  }
  const int head_width = student.at("head.w").dim(1);
  if (head_width != n_classes) {
    throw ConsistencyError("supervised_loss: head width " + std::to_string(head_width) +
                           " does not match class count " + std::to_string(n_classes));
  }
  for (int y : labels) {
    if (y < 0 || y >= n_classes) {
      throw ConsistencyError("supervised_loss: label " + std::to_string(y) +
                             " outside [0, " + std::to_string(n_classes) + ")");
    }
  }
  Tensor logits = student_logits(model_cfg, spec, student, clips);
  return cross_entropy(logits, one_hot(labels, n_classes));
}

Tensor consistency_core(const EncoderConfig& model_cfg, const ClipSpec& spec,
                        const ModelParams& student, const ModelParams& teacher,
                        const std::vector<Tensor>& weak_clips,
                        const std::vector<Tensor>& strong_clips, double tau) {
  if (weak_clips.size() != strong_clips.size() || weak_clips.empty()) {
    throw ConsistencyError("consistency_core: weak/strong batches must align");
  }
  Tensor pseudo;
  {
    TapePause pause;  // the teacher pass never joins the graph
    Tensor teacher_logits = student_logits(model_cfg, spec, teacher, weak_clips);
    pseudo = sharpen(teacher_logits, tau);
  }
  Tensor logits = student_logits(model_cfg, spec, student, strong_clips);
  return cross_entropy(logits, pseudo);
}

Tensor consistency_loss(const EncoderConfig& model_cfg, const ClipSpec& spec,
                        const ModelParams& student, const ModelParams& teacher,
                        const UnlabeledBatch& batch, double tau, RngStream& weak_rng,
                        RngStream& strong_rng) {
  std::vector<Tensor> weak = weak_augment(batch.clips, spec, weak_rng);
  std::vector<Tensor> strong = strong_augment(batch.clips, spec, strong_rng);
  return consistency_core(model_cfg, spec, student, teacher, weak, strong, tau);
}

Tensor total_loss(const Tensor& l_sup, const Tensor& l_con, double lambda) {
  if (!std::isfinite(l_sup.item()) || !std::isfinite(l_con.item()) || !std::isfinite(lambda)) {
    throw TrainingError("total_loss: non-finite input");
  }
  return add(l_sup, scale(l_con, lambda));
}

CurriculumResult run_curriculum(const ModelParams& encoder_init, const DatasetViews& views,
                                const ClipSpec& spec, const EncoderConfig& model_cfg,
                                const CurriculumConfig& cfg, const CurriculumState* resume,
                                const CurriculumEpochHook& on_epoch) {
  cfg.validate();
  model_cfg.validate();
  const SplitView& source = views.source();
  const SplitView& target = views.target_unlabeled();
  const int n_classes = source.n_classes();

  ModelParams student;
  TeacherState teacher;
  SgdOptimizer opt(OptimizerConfig{cfg.student_lr, cfg.weight_decay, cfg.sgd_momentum});
  int start_epoch = 0;
  if (resume) {
    student = resume->student.clone(true);
    teacher.params = resume->teacher.params.clone(false);
    teacher.update_count = resume->teacher.update_count;
    opt.velocity() = resume->velocity;
    start_epoch = resume->next_epoch;
  } else {
    student = encoder_init.subset_prefix({"enc."}).clone(true);
    if (student.empty()) throw ConsistencyError("run_curriculum: encoder_init has no enc.* params");
    ModelParams head = init_head_params(model_cfg, n_classes, cfg.seed);
    for (const auto& [name, tensor] : head) student.insert(name, tensor);
    teacher.params = student.clone(false);  // exact copy at step 0
    teacher.update_count = 0;
  }

  CurriculumResult result;
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    ScheduleState sched = schedule_at(epoch, cfg.epochs, cfg.schedule_slope);
    const double lam = cfg.lambda_override.value_or(sched.lambda_cons);
    auto batches = sample_batches(source, target, cfg.batch_size, cfg.batch_size, cfg.seed, epoch);
    double sup_sum = 0.0, con_sum = 0.0, tot_sum = 0.0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const LabeledBatch& lb = batches[bi].first;
      const UnlabeledBatch& ub = batches[bi].second;
      RngStream src_rng = derive_stream(cfg.seed, {stream_tag::kAugSource,
                                                   static_cast<std::uint64_t>(epoch),
                                                   static_cast<std::uint64_t>(bi)});
      std::vector<Tensor> src_weak = weak_augment(lb.clips, spec, src_rng);

      GradTape tape;
      Tensor l_sup = supervised_loss(model_cfg, spec, student, src_weak, lb.labels, n_classes);
      Tensor l_con;
      Tensor l_total;
      if (lam != 0.0) {
        RngStream weak_rng = derive_stream(cfg.seed, {stream_tag::kAugWeak,
                                                      static_cast<std::uint64_t>(epoch),
                                                      static_cast<std::uint64_t>(bi)});
        RngStream strong_rng = derive_stream(cfg.seed, {stream_tag::kAugStrong,
                                                        static_cast<std::uint64_t>(epoch),
                                                        static_cast<std::uint64_t>(bi)});
        l_con = consistency_loss(model_cfg, spec, student, teacher.params, ub, cfg.tau, weak_rng,
                                 strong_rng);
        l_total = total_loss(l_sup, l_con, lam);
      } else {
        l_con = Tensor::scalar(0.0);
        l_total = l_sup;
      }
      const double tv = l_total.item();
      if (!std::isfinite(tv)) {
        throw TrainingError("curriculum diverged (non-finite loss) at epoch " +
                            std::to_string(epoch) + ", batch " + std::to_string(bi) +
                            " (l_sup=" + std::to_string(l_sup.item()) +
                            ", l_con=" + std::to_string(l_con.item()) + ")");
      }
      sup_sum += l_sup.item();
      con_sum += l_con.item();
      tot_sum += tv;
      tape.backward(l_total);
      opt.step(student, {{"head", sched.lambda_cls}});
      ema_update(teacher, student, cfg.teacher_momentum);
    }
    const double nb = static_cast<double>(batches.size());
    CurriculumEpochLog rec;
    rec.epoch = epoch;
    rec.x = sched.x;
    rec.lambda_cons = lam;
    rec.lambda_cls = sched.lambda_cls;
    rec.loss_sup = sup_sum / nb;
    rec.loss_con = con_sum / nb;
    rec.loss_total = tot_sum / nb;
    rec.teacher_student_l2 = ModelParams::l2_distance(teacher.params, student);
    result.log.push_back(rec);
    if (on_epoch) {
      CurriculumState state;
      state.student = student;
      state.teacher.params = teacher.params;
      state.teacher.update_count = teacher.update_count;
      state.velocity = opt.velocity();
      state.next_epoch = epoch + 1;
      on_epoch(rec, state);
    }
  }

  student.check_finite("run_curriculum");
  result.student_encoder = student.without_prefix({"head."});
  return result;
}

}  // namespace cdfsl
