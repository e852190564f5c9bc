#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cdfsl/curriculum.hpp"
#include "cdfsl/data.hpp"
#include "cdfsl/fewshot.hpp"
#include "cdfsl/model.hpp"
#include "cdfsl/pretrain.hpp"

namespace cdfsl {

struct ExperimentConfig {
  std::uint64_t seed = 0;
  ManifestOptions manifest;
  ClipSpec clip;
  EncoderConfig model;
  PretrainConfig pretrain;
  CurriculumConfig curriculum;
  EvalConfig eval;

  void validate() const;
};

std::string experiment_config_to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_config_from_json(const std::string& text);
// Applies "a.b.c=value" style overrides onto the JSON form.
ExperimentConfig apply_overrides(const ExperimentConfig& cfg,
                                 const std::vector<std::pair<std::string, std::string>>& sets);

enum class Variant { kFull, kEqualWeighting, kNoSharpening, kSslOnly, kSupervisedOnly };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);
bool variant_has_pretrain(Variant v);
bool variant_has_curriculum(Variant v);
// Effective config: equal_weighting pins lambda to 1, no_sharpening sets
// tau to 1, supervised_only pins lambda to 0.
ExperimentConfig apply_variant(const ExperimentConfig& cfg, Variant v);

// Hex digests for artifact provenance. Stage digests cover exactly the
// inputs that determine the stage's artifact, so shared pretraining stays
// valid across curriculum-only variants.
std::string config_digest(const ExperimentConfig& cfg, Variant v);
std::string pretrain_digest(const ExperimentConfig& cfg);
std::string curriculum_digest(const ExperimentConfig& cfg, Variant v);

struct PipelineOutcome {
  EvalReport report;
  std::filesystem::path run_dir;
};

// Executes generate -> pretrain -> curriculum -> evaluate into run_dir,
// resuming any stage whose checkpoint already exists. shared_pretrain_dir,
// when given, supplies (or receives) the pretrain checkpoint so sweeps that
// only vary curriculum settings do not repeat stage 1.
PipelineOutcome run_pipeline(const ExperimentConfig& cfg, const std::filesystem::path& run_dir,
                             Variant variant = Variant::kFull,
                             const std::filesystem::path* shared_pretrain_dir = nullptr);

// Single stages (CLI --stage / subcommands). Each requires its predecessor's
// artifacts in run_dir and throws MissingDependencyError otherwise.
DatasetManifest stage_manifest(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);

// Debug export: the first `per_split` clips of each split, written as named
// tensors in the checkpoint format (bit-exact float64).
void export_clips(const ExperimentConfig& cfg, const DatasetManifest& manifest,
                  const std::filesystem::path& out_file, int per_split);
void stage_pretrain(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);
void stage_curriculum(const ExperimentConfig& cfg, const std::filesystem::path& run_dir,
                      Variant variant = Variant::kFull);
EvalReport stage_eval(const ExperimentConfig& cfg, const std::filesystem::path& run_dir,
                      Variant variant = Variant::kFull);

std::string eval_report_to_json(const EvalReport& report, const std::string& digest,
                                std::uint64_t seed);
EvalReport eval_report_from_json(const std::string& text);

// ---- sweeps -------------------------------------------------------------------

struct CellResult {
  std::string key;  // variant name, tau, k, or class count
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double mean = 0.0;
  double ci95 = 0.0;
};

struct SweepRow {
  std::string key;
  double mean_over_seeds = 0.0;
  double ci95_over_seeds = 0.0;
  std::vector<double> per_seed;
  bool failed = false;
};

struct SweepTable {
  std::string kind;
  std::vector<SweepRow> rows;
  std::vector<CellResult> cells;
  double spearman = 0.0;  // filled by sweeps with an ordered axis
};

SweepTable run_ablation_matrix(const ExperimentConfig& cfg, const std::vector<Variant>& variants,
                               const std::vector<std::uint64_t>& seeds,
                               const std::filesystem::path& out_dir, int threads);

SweepTable run_temperature_sweep(const ExperimentConfig& cfg, const std::vector<double>& taus,
                                 const std::vector<std::uint64_t>& seeds,
                                 const std::filesystem::path& out_dir, int threads);

SweepTable run_kshot_sweep(const ExperimentConfig& cfg, const std::vector<int>& ks,
                           const std::vector<std::uint64_t>& seeds,
                           const std::filesystem::path& out_dir, int threads);

SweepTable run_source_size_sweep(const ExperimentConfig& cfg, const std::vector<int>& counts,
                                 const std::vector<std::uint64_t>& seeds,
                                 const std::filesystem::path& out_dir, int threads);

void write_sweep_outputs(const SweepTable& table, const std::filesystem::path& out_dir,
                         const std::string& digest, std::uint64_t seed);

// Spearman rank correlation (average ranks for ties).
double spearman_rank_correlation(const std::vector<double>& xs, const std::vector<double>& ys);

// Worker cap: explicit > 0 wins, else CDFSL_THREADS, else hardware.
int resolve_threads(int requested);

// ---- small file helpers ---------------------------------------------------------

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace cdfsl
