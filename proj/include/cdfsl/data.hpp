#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cdfsl/model.hpp"
#include "cdfsl/rng.hpp"
#include "cdfsl/tensor.hpp"

namespace cdfsl {

// ---- classes and styles -----------------------------------------------------

enum class MotionProgram { kTranslate, kRotate, kOscillate, kScale };

std::string motion_program_name(MotionProgram p);
MotionProgram motion_program_from_name(const std::string& name);
int motion_program_bins(MotionProgram p);

// One synthetic action class: a motion program plus a parameter bin.
// translate: bin = direction (0-7) * 2 + speed (0=slow, 1=fast)      -> 16 bins
// rotate:    bin = direction (0=cw, 1=ccw) * 2 + speed               ->  4 bins
// oscillate: bin = axis (0=horizontal, 1=vertical) * 2 + frequency   ->  4 bins
// scale:     bin = mode (0=grow, 1=shrink) * 2 + rate                ->  4 bins
struct ClassDef {
  int class_id = 0;
  MotionProgram program = MotionProgram::kTranslate;
  int bin = 0;

  bool same_motion(const ClassDef& other) const {
    return program == other.program && bin == other.bin;
  }
};

// Total distinct (program, bin) pairs available.
int class_pool_size();
// The full pool in canonical order (class_id unset).
std::vector<ClassDef> class_pool();

enum class Texture { kFlat, kChecker, kStripes };

std::string texture_name(Texture t);
Texture texture_from_name(const std::string& name);

struct DomainStyle {
  Texture texture = Texture::kFlat;
  double background_level = 0.3;
  double noise_std = 0.02;
  std::array<double, 9> palette = {1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major 3x3
  double temporal_jitter = 0.0;

  void validate() const;  // palette must be invertible, cond < 1e3
  double palette_condition() const;
};

DomainStyle default_source_style();
DomainStyle default_target_style();

// ---- manifest ----------------------------------------------------------------

struct SplitDef {
  std::vector<ClassDef> classes;
  DomainStyle style;
  int n_per_class = 40;
};

struct DatasetManifest {
  SplitDef source;            // labeled
  SplitDef target_unlabeled;  // same classes as target_test
  SplitDef target_test;
  std::uint64_t seed = 0;

  void validate() const;
  int source_class_count() const { return static_cast<int>(source.classes.size()); }
  int target_class_count() const { return static_cast<int>(target_test.classes.size()); }
};

struct ManifestOptions {
  int n_source_classes = 8;
  int n_target_classes = 5;
  int n_per_class_source = 40;
  int n_per_class_target_unlabeled = 40;
  int n_per_class_target_test = 40;
  DomainStyle source_style = default_source_style();
  DomainStyle target_style = default_target_style();
};

DatasetManifest build_manifest(const ManifestOptions& opt, std::uint64_t seed);

std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const std::string& json_text);

// ---- clip generation ----------------------------------------------------------

// Deterministic render of one clip; pixel values in [0, 1].
Tensor generate_clip(const ClassDef& cls, const DomainStyle& style, std::uint64_t clip_seed,
                     const ClipSpec& spec);

enum class Split { kSource = 0, kTargetUnlabeled = 1, kTargetTest = 2 };

// Seed of the index-th clip of a class within a split. Split tags keep
// unlabeled and test clip seeds disjoint.
std::uint64_t clip_seed_for(const DatasetManifest& m, Split split, int class_index, int index);

// ---- dataset views with label auditing ----------------------------------------

struct ClipRef {
  Split split;
  int class_index;  // index into the split's class list
  int index;        // clip index within the class
};

// Materialized view over one split. Clips are generated once and cached;
// label() increments a shared audit counter so stages can prove they never
// looked. Holds a pointer into the manifest, which must outlive the view;
// DatasetViews below owns both.
class SplitView {
 public:
  SplitView(const DatasetManifest& manifest, Split split, const ClipSpec& spec,
            std::shared_ptr<std::atomic<std::uint64_t>> label_reads);

  int n_classes() const { return static_cast<int>(def_->classes.size()); }
  int n_per_class() const { return def_->n_per_class; }
  int size() const { return n_classes() * n_per_class(); }

  const Tensor& clip(int flat_index) const;
  int label(int flat_index) const;  // counted access
  ClipRef ref(int flat_index) const;
  std::uint64_t clip_seed(int flat_index) const;

  std::uint64_t label_reads() const { return label_reads_->load(); }

 private:
  const SplitDef* def_;
  Split split_;
  std::vector<Tensor> clips_;
  std::vector<std::uint64_t> seeds_;
  std::shared_ptr<std::atomic<std::uint64_t>> label_reads_;
};

// Owns a copy of the manifest, the per-split clip caches, and the label
// audit counter.
class DatasetViews {
 public:
  DatasetViews(DatasetManifest manifest, const ClipSpec& spec);

  const DatasetManifest& manifest() const { return manifest_; }
  const SplitView& source() const { return *source_; }
  const SplitView& target_unlabeled() const { return *target_unlabeled_; }
  const SplitView& target_test() const { return *target_test_; }

  std::uint64_t label_reads() const { return label_reads_->load(); }

 private:
  DatasetManifest manifest_;
  std::shared_ptr<std::atomic<std::uint64_t>> label_reads_;
  std::unique_ptr<SplitView> source_;
  std::unique_ptr<SplitView> target_unlabeled_;
  std::unique_ptr<SplitView> target_test_;
};

// ---- augmentation --------------------------------------------------------------

// One crop window and flip decision, applied identically to every frame.
struct WeakAugParams {
  double scale = 1.0;   // crop side fraction in [0.6, 1.0]
  double offset_y = 0.0;  // window top-left, in pixels
  double offset_x = 0.0;
  bool flip = false;
};

struct StrongAugParams {
  WeakAugParams weak;
  bool color_jitter = false;
  std::array<double, 3> brightness = {1.0, 1.0, 1.0};
  double contrast = 1.0;
  bool grayscale = false;
  bool blur = false;
  double blur_sigma = 0.0;
};

WeakAugParams sample_weak_params(const ClipSpec& spec, RngStream& rng);
StrongAugParams sample_strong_params(const ClipSpec& spec, RngStream& rng);

Tensor apply_weak(const Tensor& clip, const ClipSpec& spec, const WeakAugParams& p);
Tensor apply_strong(const Tensor& clip, const ClipSpec& spec, const StrongAugParams& p);

std::vector<Tensor> weak_augment(const std::vector<Tensor>& clips, const ClipSpec& spec,
                                 RngStream& rng);
std::vector<Tensor> strong_augment(const std::vector<Tensor>& clips, const ClipSpec& spec,
                                   RngStream& rng);

// ---- batch sampling -------------------------------------------------------------

struct LabeledBatch {
  std::vector<Tensor> clips;
  std::vector<int> labels;
  std::vector<int> indices;  // flat indices into the source view
};

struct UnlabeledBatch {
  std::vector<Tensor> clips;
  std::vector<int> indices;
};

// One epoch of paired batches: the labeled split is covered once (its
// permutation defines epoch length); the unlabeled split is permuted
// independently and cycles if shorter.
std::vector<std::pair<LabeledBatch, UnlabeledBatch>> sample_batches(
    const SplitView& labeled, const SplitView& unlabeled, int batch_size_labeled,
    int batch_size_unlabeled, std::uint64_t seed, int epoch);

// Unlabeled-only variant over an arbitrary clip list (pretraining pool).
std::vector<std::vector<int>> epoch_batches(int n_items, int batch_size, std::uint64_t seed,
                                            std::uint64_t order_tag, int epoch);

}  // namespace cdfsl
