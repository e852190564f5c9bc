#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "cdfsl/data.hpp"
#include "cdfsl/model.hpp"
#include "cdfsl/optim.hpp"

namespace cdfsl {

struct CurriculumConfig {
  int epochs = 200;
  int batch_size = 16;
  double student_lr = 0.01;      // beta
  double teacher_momentum = 0.9; // alpha
  double tau = 0.1;              // sharpening temperature
  double schedule_slope = 10.0;
  double sgd_momentum = 0.0;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  // Ablations pin the consistency weight (1 = equal weighting, 0 = supervised only).
  std::optional<double> lambda_override;

  void validate() const;
};

// Complementary arctan weights, x = epoch / total epochs.
double lambda_cons(double x, double slope);
double lambda_cls(double x, double slope);

struct ScheduleState {
  double x = 0.0;
  double lambda_cons = 0.0;
  double lambda_cls = 0.0;
};

ScheduleState schedule_at(int epoch, int total_epochs, double slope);

// softmax(logits / tau), detached from any tape. Rows sum to 1.
Tensor sharpen(const Tensor& teacher_logits, double tau);

struct TeacherState {
  ModelParams params;  // gradient-free copies
  long update_count = 0;
};

// theta_t <- alpha * theta_t + (1 - alpha) * theta_s, elementwise.
void ema_update(TeacherState& teacher, const ModelParams& student, double alpha);

// Mean cross-entropy of student logits vs one-hot labels over a clip batch.
Tensor supervised_loss(const EncoderConfig& model_cfg, const ClipSpec& spec,
                       const ModelParams& student, const std::vector<Tensor>& clips,
                       const std::vector<int>& labels, int n_classes);

// Consistency core on already-augmented views: CE(student(strong), sharpen(teacher(weak))).
Tensor consistency_core(const EncoderConfig& model_cfg, const ClipSpec& spec,
                        const ModelParams& student, const ModelParams& teacher,
                        const std::vector<Tensor>& weak_clips,
                        const std::vector<Tensor>& strong_clips, double tau);

// Full operation: augments the batch (weak for the teacher, strong for the
// student) and evaluates the core.
Tensor consistency_loss(const EncoderConfig& model_cfg, const ClipSpec& spec,
                        const ModelParams& student, const ModelParams& teacher,
                        const UnlabeledBatch& batch, double tau, RngStream& weak_rng,
                        RngStream& strong_rng);

// l_sup + lambda * l_con; rejects non-finite values.
Tensor total_loss(const Tensor& l_sup, const Tensor& l_con, double lambda);

struct CurriculumEpochLog {
  int epoch = 0;  // 0-based, x = epoch / epochs
  double x = 0.0;
  double lambda_cons = 0.0;
  double lambda_cls = 0.0;
  double loss_sup = 0.0;
  double loss_con = 0.0;
  double loss_total = 0.0;
  double teacher_student_l2 = 0.0;
};

struct CurriculumState {
  ModelParams student;  // encoder + head
  TeacherState teacher;
  GradMap velocity;
  int next_epoch = 0;
};

struct CurriculumResult {
  ModelParams student_encoder;  // head discarded
  std::vector<CurriculumEpochLog> log;
};

using CurriculumEpochHook =
    std::function<void(const CurriculumEpochLog&, const CurriculumState&)>;

// Stage 2: the student trains on supervised source loss plus scheduled
// consistency on unlabeled target; the teacher tracks the student by EMA.
// encoder_init provides "enc.*"; a fresh head is created from cfg.seed.
CurriculumResult run_curriculum(const ModelParams& encoder_init, const DatasetViews& views,
                                const ClipSpec& spec, const EncoderConfig& model_cfg,
                                const CurriculumConfig& cfg,
                                const CurriculumState* resume = nullptr,
                                const CurriculumEpochHook& on_epoch = nullptr);

}  // namespace cdfsl
