#include "cdfsl/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "cdfsl/checkpoint.hpp"

namespace cdfsl {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kCheckpointEvery = 20;

// ---- config <-> json ---------------------------------------------------------

json clip_to_json(const ClipSpec& s) {
  return json{{"frames", s.frames},   {"channels", s.channels}, {"height", s.height},
              {"width", s.width},     {"patch_t", s.patch_t},   {"patch_h", s.patch_h},
              {"patch_w", s.patch_w}};
}

ClipSpec clip_from_json(const json& j) {
  ClipSpec d;
  ClipSpec s;
  s.frames = j.value("frames", d.frames);
  s.channels = j.value("channels", d.channels);
  s.height = j.value("height", d.height);
  s.width = j.value("width", d.width);
  s.patch_t = j.value("patch_t", d.patch_t);
  s.patch_h = j.value("patch_h", d.patch_h);
  s.patch_w = j.value("patch_w", d.patch_w);
  return s;
}

json model_to_json(const EncoderConfig& c) {
  return json{{"embed_dim", c.embed_dim},     {"depth", c.depth},
              {"heads", c.heads},             {"mlp_ratio", c.mlp_ratio},
              {"decoder_dim", c.decoder_dim}, {"decoder_depth", c.decoder_depth}};
}

EncoderConfig model_from_json(const json& j) {
  EncoderConfig d;
  EncoderConfig c;
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.depth = j.value("depth", d.depth);
  c.heads = j.value("heads", d.heads);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.decoder_dim = j.value("decoder_dim", d.decoder_dim);
  c.decoder_depth = j.value("decoder_depth", d.decoder_depth);
  return c;
}

json style_json(const DomainStyle& s) {
  return json{{"texture", texture_name(s.texture)},
              {"background_level", s.background_level},
              {"noise_std", s.noise_std},
              {"palette", s.palette},
              {"temporal_jitter", s.temporal_jitter}};
}

DomainStyle style_from(const json& j, const DomainStyle& dflt) {
  DomainStyle s = dflt;
  if (j.contains("texture")) s.texture = texture_from_name(j.at("texture").get<std::string>());
  s.background_level = j.value("background_level", dflt.background_level);
  s.noise_std = j.value("noise_std", dflt.noise_std);
  if (j.contains("palette")) {
    auto pal = j.at("palette").get<std::vector<double>>();
    if (pal.size() != 9) throw ConfigError("style palette must have 9 entries");
    std::copy(pal.begin(), pal.end(), s.palette.begin());
  }
  s.temporal_jitter = j.value("temporal_jitter", dflt.temporal_jitter);
  return s;
}

json manifest_opt_to_json(const ManifestOptions& m) {
  return json{{"n_source_classes", m.n_source_classes},
              {"n_target_classes", m.n_target_classes},
              {"n_per_class_source", m.n_per_class_source},
              {"n_per_class_target_unlabeled", m.n_per_class_target_unlabeled},
              {"n_per_class_target_test", m.n_per_class_target_test},
              {"source_style", style_json(m.source_style)},
              {"target_style", style_json(m.target_style)}};
}

ManifestOptions manifest_opt_from_json(const json& j) {
  ManifestOptions d;
  ManifestOptions m;
  m.n_source_classes = j.value("n_source_classes", d.n_source_classes);
  m.n_target_classes = j.value("n_target_classes", d.n_target_classes);
  m.n_per_class_source = j.value("n_per_class_source", d.n_per_class_source);
  m.n_per_class_target_unlabeled =
      j.value("n_per_class_target_unlabeled", d.n_per_class_target_unlabeled);
  m.n_per_class_target_test = j.value("n_per_class_target_test", d.n_per_class_target_test);
  if (j.contains("source_style")) m.source_style = style_from(j.at("source_style"), d.source_style);
  if (j.contains("target_style")) m.target_style = style_from(j.at("target_style"), d.target_style);
  return m;
}

json pretrain_to_json(const PretrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"mask_ratio", c.mask_ratio},
              {"momentum", c.momentum},
              {"weight_decay", c.weight_decay}};
}

PretrainConfig pretrain_from_json(const json& j) {
  PretrainConfig d;
  PretrainConfig c;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.mask_ratio = j.value("mask_ratio", d.mask_ratio);
  c.momentum = j.value("momentum", d.momentum);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  return c;
}

json curriculum_to_json(const CurriculumConfig& c) {
  json j{{"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"student_lr", c.student_lr},
         {"teacher_momentum", c.teacher_momentum},
         {"tau", c.tau},
         {"schedule_slope", c.schedule_slope},
         {"sgd_momentum", c.sgd_momentum},
         {"weight_decay", c.weight_decay}};
  if (c.lambda_override) j["lambda_override"] = *c.lambda_override;
  return j;
}

CurriculumConfig curriculum_from_json(const json& j) {
  CurriculumConfig d;
  CurriculumConfig c;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.student_lr = j.value("student_lr", d.student_lr);
  c.teacher_momentum = j.value("teacher_momentum", d.teacher_momentum);
  c.tau = j.value("tau", d.tau);
  c.schedule_slope = j.value("schedule_slope", d.schedule_slope);
  c.sgd_momentum = j.value("sgd_momentum", d.sgd_momentum);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  if (j.contains("lambda_override") && !j.at("lambda_override").is_null()) {
    c.lambda_override = j.at("lambda_override").get<double>();
  }
  return c;
}

json eval_to_json(const EvalConfig& c) {
  return json{{"n_way", c.n_way},
              {"k_shot", c.k_shot},
              {"q_per_class", c.q_per_class},
              {"episodes", c.episodes},
              {"reg_l2", c.reg_l2},
              {"max_iter", c.max_iter},
              {"tol", c.tol},
              {"normalize_features", c.normalize_features}};
}

EvalConfig eval_from_json(const json& j) {
  EvalConfig d;
  EvalConfig c;
  c.n_way = j.value("n_way", d.n_way);
  c.k_shot = j.value("k_shot", d.k_shot);
  c.q_per_class = j.value("q_per_class", d.q_per_class);
  c.episodes = j.value("episodes", d.episodes);
  c.reg_l2 = j.value("reg_l2", d.reg_l2);
  c.max_iter = j.value("max_iter", d.max_iter);
  c.tol = j.value("tol", d.tol);
  c.normalize_features = j.value("normalize_features", d.normalize_features);
  return c;
}

json experiment_to_json_obj(const ExperimentConfig& cfg) {
  return json{{"seed", cfg.seed},
              {"manifest", manifest_opt_to_json(cfg.manifest)},
              {"clip", clip_to_json(cfg.clip)},
              {"model", model_to_json(cfg.model)},
              {"pretrain", pretrain_to_json(cfg.pretrain)},
              {"curriculum", curriculum_to_json(cfg.curriculum)},
              {"eval", eval_to_json(cfg.eval)}};
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

std::uint64_t digest_of_json(const json& j) { return fnv1a64(j.dump()); }

json sweep_table_to_json(const SweepTable& table) {
  json rows = json::array();
  for (const SweepRow& r : table.rows) {
    rows.push_back(json{{"key", r.key},
                        {"mean", r.mean_over_seeds},
                        {"ci95", r.ci95_over_seeds},
                        {"per_seed", r.per_seed},
                        {"failed", r.failed}});
  }
  json cells = json::array();
  for (const CellResult& c : table.cells) {
    cells.push_back(json{{"key", c.key},
                         {"seed", c.seed},
                         {"ok", c.ok},
                         {"error", c.error},
                         {"mean", c.mean},
                         {"ci95", c.ci95}});
  }
  json j{{"kind", table.kind}, {"rows", rows}, {"cells", cells}};
  if (table.kind == "temperature" || table.kind == "kshot" || table.kind == "source_size") {
    j["spearman"] = table.spearman;
  }
  return j;
}

// ---- task pool -----------------------------------------------------------------

void run_tasks(std::vector<std::function<void()>>& tasks, int threads) {
  if (tasks.empty()) return;
  threads = std::min<int>(threads, static_cast<int>(tasks.size()));
  if (threads <= 1) {
    for (auto& t : tasks) t();
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) break;
      tasks[i]();
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
}

// ---- metrics files ---------------------------------------------------------------

void append_jsonl(const fs::path& path, const json& record) {
  std::ofstream os(path, std::ios::app);
  if (!os) throw Error("cannot append to " + path.string());
  os << record.dump() << "\n";
}

void start_metrics_file(const fs::path& path, const std::string& digest, std::uint64_t seed) {
  if (fs::exists(path)) return;
  append_jsonl(path, json{{"type", "header"}, {"config_digest", digest}, {"seed", seed}});
}

// Drops records past the resume point so re-run epochs do not duplicate rows.
void truncate_metrics(const fs::path& path, const std::function<bool(const json&)>& keep) {
  if (!fs::exists(path)) return;
  std::ifstream is(path);
  std::vector<std::string> kept;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) continue;
    if (j.value("type", "") == "header" || keep(j)) kept.push_back(line);
  }
  is.close();
  std::ofstream os(path, std::ios::trunc);
  for (const auto& l : kept) os << l << "\n";
}

// ---- stage internals ---------------------------------------------------------------

struct StagePaths {
  fs::path manifest;
  fs::path pretrain_ckpt;
  fs::path pretrain_metrics;
  fs::path curriculum_ckpt;
  fs::path curriculum_metrics;
  fs::path eval_report;
  fs::path episodes_csv;
  fs::path config_echo;
};

StagePaths stage_paths(const fs::path& dir) {
  return StagePaths{dir / "manifest.json",        dir / "pretrain.ckpt",
                    dir / "pretrain_metrics.jsonl", dir / "curriculum.ckpt",
                    dir / "curriculum_metrics.jsonl", dir / "eval_report.json",
                    dir / "episodes.csv",         dir / "config.json"};
}

DatasetManifest load_or_build_manifest(const ExperimentConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  fs::path path = stage_paths(dir).manifest;
  if (fs::exists(path)) return manifest_from_json(read_text_file(path));
  DatasetManifest m = build_manifest(cfg.manifest, cfg.seed);
  write_text_file(path, manifest_to_json(m));
  return m;
}

// Runs (or resumes, or loads) stage 1 in `dir`; returns encoder+decoder params.
ModelParams ensure_pretrain(const ExperimentConfig& cfg, const fs::path& dir,
                            const DatasetViews& views) {
  fs::create_directories(dir);
  StagePaths paths = stage_paths(dir);
  const std::uint64_t digest = digest_of_json(
      json{{"seed", cfg.seed},
           {"manifest", manifest_opt_to_json(cfg.manifest)},
           {"clip", clip_to_json(cfg.clip)},
           {"model", model_to_json(cfg.model)},
           {"pretrain", pretrain_to_json(cfg.pretrain)}});

  PretrainState state;
  const PretrainState* resume = nullptr;
  if (fs::exists(paths.pretrain_ckpt)) {
    Checkpoint ckpt = load_checkpoint(paths.pretrain_ckpt);
    if (ckpt.config_digest != digest) {
      throw ConsistencyError("pretrain checkpoint in " + dir.string() +
                             " was produced by a different configuration");
    }
    if (static_cast<int>(ckpt.epoch) >= cfg.pretrain.epochs) {
      return ckpt.params.without_prefix({"opt.", "meta."});
    }
    state.params = ckpt.params.without_prefix({"opt.", "meta."});
    for (const auto& [name, tensor] : ckpt.params.subset_prefix({"opt."})) {
      state.velocity[name.substr(4)] =
          std::vector<double>(tensor.values().begin(), tensor.values().end());
    }
    state.next_epoch = static_cast<int>(ckpt.epoch);
    resume = &state;
    truncate_metrics(paths.pretrain_metrics, [&](const json& j) {
      return j.value("epoch", 0) <= state.next_epoch;
    });
  }

  PretrainConfig pc = cfg.pretrain;
  pc.seed = cfg.seed;
  start_metrics_file(paths.pretrain_metrics, hex64(digest), cfg.seed);
  auto save = [&](const ModelParams& params, const GradMap& velocity, int epoch) {
    Checkpoint ckpt;
    ckpt.config_digest = digest;
    ckpt.stage = "pretrain";
    ckpt.epoch = static_cast<std::uint32_t>(epoch);
    ckpt.params = params.clone(false);
    for (const auto& [name, v] : velocity) {
      ckpt.params.insert("opt." + name,
                         Tensor::from({static_cast<int>(v.size())}, std::vector<double>(v)));
    }
    save_checkpoint(paths.pretrain_ckpt, ckpt);
  };
  PretrainResult result = run_pretraining(
      views, cfg.clip, cfg.model, pc, resume,
      [&](const PretrainEpoch& rec, const ModelParams& params, const GradMap& velocity) {
        append_jsonl(paths.pretrain_metrics, json{{"epoch", rec.epoch},
                                                  {"mse_loss", rec.mse_loss},
                                                  {"wall_ms", rec.wall_ms}});
        if (rec.epoch % kCheckpointEvery == 0 || rec.epoch == pc.epochs) {
          save(params, velocity, rec.epoch);
        }
      });
  if (!fs::exists(paths.pretrain_ckpt) || cfg.pretrain.epochs == 0) {
    save(result.params, {}, cfg.pretrain.epochs);
  }
  return result.params;
}

std::uint64_t curriculum_digest_u64(const ExperimentConfig& cfg, Variant v) {
  ExperimentConfig eff = apply_variant(cfg, v);
  json j{{"seed", eff.seed},
         {"manifest", manifest_opt_to_json(eff.manifest)},
         {"clip", clip_to_json(eff.clip)},
         {"model", model_to_json(eff.model)},
         {"curriculum", curriculum_to_json(eff.curriculum)},
         {"pretrained", variant_has_pretrain(v)}};
  if (variant_has_pretrain(v)) j["pretrain"] = pretrain_to_json(eff.pretrain);
  return digest_of_json(j);
}

// Runs (or resumes, or loads) stage 2; returns the post-discard student encoder.
ModelParams ensure_curriculum(const ExperimentConfig& cfg, Variant variant, const fs::path& dir,
                              const ModelParams& encoder_init, const DatasetViews& views) {
  StagePaths paths = stage_paths(dir);
  ExperimentConfig eff = apply_variant(cfg, variant);
  const std::uint64_t digest = curriculum_digest_u64(cfg, variant);

  CurriculumState state;
  const CurriculumState* resume = nullptr;
  if (fs::exists(paths.curriculum_ckpt)) {
    Checkpoint ckpt = load_checkpoint(paths.curriculum_ckpt);
    if (ckpt.config_digest != digest) {
      throw ConsistencyError("curriculum checkpoint in " + dir.string() +
                             " was produced by a different configuration");
    }
    if (static_cast<int>(ckpt.epoch) >= eff.curriculum.epochs) {
      return ckpt.params.subset_prefix({"enc."});
    }
    state.student = ckpt.params.subset_prefix({"enc."});
    for (const auto& [name, tensor] : ckpt.params.subset_prefix({"resume.head."})) {
      state.student.insert(name.substr(7), tensor);
    }
    for (const auto& [name, tensor] : ckpt.params.subset_prefix({"resume.teacher."})) {
      state.teacher.params.insert(name.substr(15), tensor);
    }
    for (const auto& [name, tensor] : ckpt.params.subset_prefix({"resume.opt."})) {
      state.velocity[name.substr(11)] =
          std::vector<double>(tensor.values().begin(), tensor.values().end());
    }
    state.teacher.update_count =
        static_cast<long>(ckpt.params.at("meta.teacher_updates").item());
    state.next_epoch = static_cast<int>(ckpt.epoch);
    resume = &state;
    truncate_metrics(paths.curriculum_metrics, [&](const json& j) {
      return j.value("epoch", 0) < state.next_epoch;
    });
  }

  CurriculumConfig cc = eff.curriculum;
  cc.seed = cfg.seed;
  start_metrics_file(paths.curriculum_metrics, hex64(digest), cfg.seed);
  auto save = [&](const CurriculumState& s) {
    Checkpoint ckpt;
    ckpt.config_digest = digest;
    ckpt.stage = "curriculum";
    ckpt.epoch = static_cast<std::uint32_t>(s.next_epoch);
    ckpt.params = s.student.subset_prefix({"enc."}).clone(false);
    for (const auto& [name, tensor] : s.student.subset_prefix({"head."})) {
      ckpt.params.insert("resume." + name, tensor.clone(false));
    }
    for (const auto& [name, tensor] : s.teacher.params) {
      ckpt.params.insert("resume.teacher." + name, tensor.clone(false));
    }
    for (const auto& [name, v] : s.velocity) {
      ckpt.params.insert("resume.opt." + name,
                         Tensor::from({static_cast<int>(v.size())}, std::vector<double>(v)));
    }
    ckpt.params.insert("meta.teacher_updates",
                       Tensor::scalar(static_cast<double>(s.teacher.update_count)));
    save_checkpoint(paths.curriculum_ckpt, ckpt);
  };
  CurriculumResult result = run_curriculum(
      encoder_init, views, eff.clip, eff.model, cc, resume,
      [&](const CurriculumEpochLog& rec, const CurriculumState& s) {
        append_jsonl(paths.curriculum_metrics,
                     json{{"epoch", rec.epoch},
                          {"x", rec.x},
                          {"lambda_cons", rec.lambda_cons},
                          {"lambda_cls", rec.lambda_cls},
                          {"loss_sup", rec.loss_sup},
                          {"loss_con", rec.loss_con},
                          {"loss_total", rec.loss_total},
                          {"teacher_student_l2", rec.teacher_student_l2}});
        if (s.next_epoch % kCheckpointEvery == 0 || s.next_epoch == cc.epochs) save(s);
      });
  return result.student_encoder;
}

EvalReport ensure_eval(const ExperimentConfig& cfg, Variant variant, const fs::path& dir,
                       const ModelParams& encoder, const DatasetViews& views) {
  StagePaths paths = stage_paths(dir);
  if (fs::exists(paths.eval_report)) {
    return eval_report_from_json(read_text_file(paths.eval_report));
  }
  ExperimentConfig eff = apply_variant(cfg, variant);
  EvalReport report =
      evaluate(eff.model, encoder, eff.clip, views.target_test(), eff.eval, cfg.seed);
  const std::string digest = config_digest(cfg, variant);
  write_text_file(paths.eval_report, eval_report_to_json(report, digest, cfg.seed));
  std::ostringstream csv;
  csv << "# config_digest=" << digest << " seed=" << cfg.seed << "\n";
  csv << "episode_index,accuracy\n";
  for (std::size_t i = 0; i < report.per_episode.size(); ++i) {
    csv << i << "," << report.per_episode[i] << "\n";
  }
  write_text_file(paths.episodes_csv, csv.str());
  return report;
}

ExperimentConfig with_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  ExperimentConfig out = cfg;
  out.seed = seed;
  out.pretrain.seed = seed;
  out.curriculum.seed = seed;
  return out;
}

// Mean/ci aggregation for one sweep row.
SweepRow aggregate_row(const std::string& key, const std::vector<CellResult>& cells) {
  SweepRow row;
  row.key = key;
  for (const CellResult& c : cells) {
    if (c.key != key) continue;
    if (!c.ok) {
      row.failed = true;
      continue;
    }
    row.per_seed.push_back(c.mean);
  }
  if (row.per_seed.empty()) {
    row.failed = true;
    return row;
  }
  double sum = 0.0;
  for (double v : row.per_seed) sum += v;
  row.mean_over_seeds = sum / static_cast<double>(row.per_seed.size());
  if (row.per_seed.size() > 1) {
    double ss = 0.0;
    for (double v : row.per_seed) ss += (v - row.mean_over_seeds) * (v - row.mean_over_seeds);
    double sd = std::sqrt(ss / static_cast<double>(row.per_seed.size() - 1));
    row.ci95_over_seeds = 1.96 * sd / std::sqrt(static_cast<double>(row.per_seed.size()));
  }
  return row;
}

}  // namespace

// ---- public config API -------------------------------------------------------------

void ExperimentConfig::validate() const {
  clip.validate();
  model.validate();
  pretrain.validate();
  curriculum.validate();
  eval.validate();
  if (manifest.n_source_classes < 2) {
    throw ValidationError("ExperimentConfig: need at least two source classes");
  }
  if (eval.n_way > manifest.n_target_classes) {
    throw ValidationError("ExperimentConfig: eval n_way exceeds target class count");
  }
  if (eval.k_shot + eval.q_per_class > manifest.n_per_class_target_test) {
    throw ValidationError("ExperimentConfig: K + Q exceeds target test clips per class");
  }
}

std::string experiment_config_to_json(const ExperimentConfig& cfg) {
  return experiment_to_json_obj(cfg).dump(2);
}

ExperimentConfig experiment_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  try {
    cfg.seed = j.value("seed", static_cast<std::uint64_t>(0));
    if (j.contains("manifest")) cfg.manifest = manifest_opt_from_json(j.at("manifest"));
    if (j.contains("clip")) cfg.clip = clip_from_json(j.at("clip"));
    if (j.contains("model")) cfg.model = model_from_json(j.at("model"));
    if (j.contains("pretrain")) cfg.pretrain = pretrain_from_json(j.at("pretrain"));
    if (j.contains("curriculum")) cfg.curriculum = curriculum_from_json(j.at("curriculum"));
    if (j.contains("eval")) cfg.eval = eval_from_json(j.at("eval"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: bad field: ") + e.what());
  }
  cfg.pretrain.seed = cfg.seed;
  cfg.curriculum.seed = cfg.seed;
  return cfg;
}

ExperimentConfig apply_overrides(const ExperimentConfig& cfg,
                                 const std::vector<std::pair<std::string, std::string>>& sets) {
  json j = experiment_to_json_obj(cfg);
  for (const auto& [path, value] : sets) {
    json* node = &j;
    std::string rest = path;
    std::size_t pos;
    while ((pos = rest.find('.')) != std::string::npos) {
      std::string head = rest.substr(0, pos);
      rest = rest.substr(pos + 1);
      if (!node->contains(head)) (*node)[head] = json::object();
      node = &(*node)[head];
    }
    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded()) {
      (*node)[rest] = value;  // plain string
    } else {
      (*node)[rest] = parsed;
    }
  }
  return experiment_config_from_json(j.dump());
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kEqualWeighting: return "equal_weighting";
    case Variant::kNoSharpening: return "no_sharpening";
    case Variant::kSslOnly: return "ssl_only";
    case Variant::kSupervisedOnly: return "supervised_only";
  }
  return "full";
}

Variant variant_from_name(const std::string& name) {
  if (name == "full") return Variant::kFull;
  if (name == "equal_weighting") return Variant::kEqualWeighting;
  if (name == "no_sharpening") return Variant::kNoSharpening;
  if (name == "ssl_only") return Variant::kSslOnly;
  if (name == "supervised_only") return Variant::kSupervisedOnly;
  throw ConfigError("unknown ablation variant: " + name);
}

bool variant_has_pretrain(Variant v) { return v != Variant::kSupervisedOnly; }

bool variant_has_curriculum(Variant v) { return v != Variant::kSslOnly; }

ExperimentConfig apply_variant(const ExperimentConfig& cfg, Variant v) {
  ExperimentConfig out = cfg;
  switch (v) {
    case Variant::kFull:
    case Variant::kSslOnly:
      break;
    case Variant::kEqualWeighting:
      out.curriculum.lambda_override = 1.0;
      break;
    case Variant::kNoSharpening:
      out.curriculum.tau = 1.0;
      break;
    case Variant::kSupervisedOnly:
      out.curriculum.lambda_override = 0.0;
      break;
  }
  return out;
}

std::string config_digest(const ExperimentConfig& cfg, Variant v) {
  json j = experiment_to_json_obj(apply_variant(cfg, v));
  j["variant"] = variant_name(v);
  return hex64(digest_of_json(j));
}

std::string pretrain_digest(const ExperimentConfig& cfg) {
  return hex64(digest_of_json(json{{"seed", cfg.seed},
                                   {"manifest", manifest_opt_to_json(cfg.manifest)},
                                   {"clip", clip_to_json(cfg.clip)},
                                   {"model", model_to_json(cfg.model)},
                                   {"pretrain", pretrain_to_json(cfg.pretrain)}}));
}

std::string curriculum_digest(const ExperimentConfig& cfg, Variant v) {
  return hex64(curriculum_digest_u64(cfg, v));
}

std::string eval_report_to_json(const EvalReport& report, const std::string& digest,
                                std::uint64_t seed) {
  json j{{"config_digest", digest},
         {"seed", seed},
         {"n_way", report.n_way},
         {"k_shot", report.k_shot},
         {"q_per_class", report.q_per_class},
         {"episodes", report.episodes},
         {"mean", report.mean},
         {"ci95", report.ci95},
         {"per_episode", report.per_episode}};
  return j.dump(2);
}

EvalReport eval_report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("eval report: invalid JSON: ") + e.what());
  }
  EvalReport r;
  r.n_way = j.at("n_way").get<int>();
  r.k_shot = j.at("k_shot").get<int>();
  r.q_per_class = j.at("q_per_class").get<int>();
  r.episodes = j.at("episodes").get<int>();
  r.mean = j.at("mean").get<double>();
  r.ci95 = j.at("ci95").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.per_episode = j.at("per_episode").get<std::vector<double>>();
  return r;
}

// ---- pipeline ----------------------------------------------------------------------

PipelineOutcome run_pipeline(const ExperimentConfig& cfg_in, const fs::path& run_dir,
                             Variant variant, const fs::path* shared_pretrain_dir) {
  ExperimentConfig cfg = with_seed(cfg_in, cfg_in.seed);
  cfg.validate();
  fs::create_directories(run_dir);
  StagePaths paths = stage_paths(run_dir);
  if (!fs::exists(paths.config_echo)) {
    json echo{{"variant", variant_name(variant)},
              {"config_digest", config_digest(cfg, variant)},
              {"seed", cfg.seed},
              {"config", json::parse(experiment_config_to_json(apply_variant(cfg, variant)))}};
    write_text_file(paths.config_echo, echo.dump(2));
  }

  DatasetManifest manifest = load_or_build_manifest(cfg, run_dir);
  DatasetViews views(manifest, cfg.clip);

  ModelParams pretrained;
  if (variant_has_pretrain(variant)) {
    if (shared_pretrain_dir != nullptr) {
      pretrained = ensure_pretrain(cfg, *shared_pretrain_dir, views);
    } else {
      pretrained = ensure_pretrain(cfg, run_dir, views);
    }
  }

  ModelParams encoder;
  if (variant_has_curriculum(variant)) {
    ModelParams encoder_init = variant_has_pretrain(variant)
                                   ? pretrained
                                   : init_encoder_params(cfg.clip, cfg.model, cfg.seed);
    encoder = ensure_curriculum(cfg, variant, run_dir, encoder_init, views);
  } else {
    encoder = pretrained.subset_prefix({"enc."});
  }

  PipelineOutcome outcome;
  outcome.report = ensure_eval(cfg, variant, run_dir, encoder, views);
  outcome.run_dir = run_dir;
  return outcome;
}

DatasetManifest stage_manifest(const ExperimentConfig& cfg, const fs::path& run_dir) {
  return load_or_build_manifest(with_seed(cfg, cfg.seed), run_dir);
}

void export_clips(const ExperimentConfig& cfg, const DatasetManifest& manifest,
                  const fs::path& out_file, int per_split) {
  if (per_split < 1) throw ValidationError("export_clips: per_split must be >= 1");
  DatasetViews views(manifest, cfg.clip);
  Checkpoint ckpt;
  ckpt.stage = "clip_export";
  ckpt.config_digest = fnv1a64(manifest_to_json(manifest));
  auto dump = [&](const SplitView& view, const std::string& tag) {
    const int n = std::min(per_split, view.size());
    for (int i = 0; i < n; ++i) {
      ckpt.params.insert(tag + "." + std::to_string(i), view.clip(i).detach());
    }
  };
  dump(views.source(), "source");
  dump(views.target_unlabeled(), "target_unlabeled");
  dump(views.target_test(), "target_test");
  save_checkpoint(out_file, ckpt);
}

void stage_pretrain(const ExperimentConfig& cfg_in, const fs::path& run_dir) {
  ExperimentConfig cfg = with_seed(cfg_in, cfg_in.seed);
  cfg.validate();
  DatasetManifest manifest = load_or_build_manifest(cfg, run_dir);
  DatasetViews views(manifest, cfg.clip);
  ensure_pretrain(cfg, run_dir, views);
}

void stage_curriculum(const ExperimentConfig& cfg_in, const fs::path& run_dir, Variant variant) {
  ExperimentConfig cfg = with_seed(cfg_in, cfg_in.seed);
  cfg.validate();
  StagePaths paths = stage_paths(run_dir);
  if (!variant_has_curriculum(variant)) {
    throw ConfigError("variant " + variant_name(variant) + " has no curriculum stage");
  }
  DatasetManifest manifest = load_or_build_manifest(cfg, run_dir);
  DatasetViews views(manifest, cfg.clip);
  ModelParams encoder_init;
  if (variant_has_pretrain(variant)) {
    if (!fs::exists(paths.pretrain_ckpt)) {
      throw MissingDependencyError("curriculum stage requires " + paths.pretrain_ckpt.string() +
                                   "; run the pretrain stage first");
    }
    Checkpoint ckpt = load_checkpoint(paths.pretrain_ckpt);
    if (static_cast<int>(ckpt.epoch) < cfg.pretrain.epochs) {
      throw MissingDependencyError("pretrain checkpoint is incomplete (epoch " +
                                   std::to_string(ckpt.epoch) + " of " +
                                   std::to_string(cfg.pretrain.epochs) + ")");
    }
    encoder_init = ckpt.params.without_prefix({"opt.", "meta."});
  } else {
    encoder_init = init_encoder_params(cfg.clip, cfg.model, cfg.seed);
  }
  ensure_curriculum(cfg, variant, run_dir, encoder_init, views);
}

EvalReport stage_eval(const ExperimentConfig& cfg_in, const fs::path& run_dir, Variant variant) {
  ExperimentConfig cfg = with_seed(cfg_in, cfg_in.seed);
  cfg.validate();
  StagePaths paths = stage_paths(run_dir);
  DatasetManifest manifest = load_or_build_manifest(cfg, run_dir);
  DatasetViews views(manifest, cfg.clip);
  ModelParams encoder;
  if (variant_has_curriculum(variant)) {
    if (!fs::exists(paths.curriculum_ckpt)) {
      throw MissingDependencyError("eval stage requires " + paths.curriculum_ckpt.string() +
                                   "; run the curriculum stage first");
    }
    Checkpoint ckpt = load_checkpoint(paths.curriculum_ckpt);
    if (static_cast<int>(ckpt.epoch) < apply_variant(cfg, variant).curriculum.epochs) {
      throw MissingDependencyError("curriculum checkpoint is incomplete");
    }
    encoder = ckpt.params.subset_prefix({"enc."});
  } else {
    if (!fs::exists(paths.pretrain_ckpt)) {
      throw MissingDependencyError("eval stage requires " + paths.pretrain_ckpt.string());
    }
    encoder = load_checkpoint(paths.pretrain_ckpt).params.subset_prefix({"enc."});
  }
  return ensure_eval(cfg, variant, run_dir, encoder, views);
}

// ---- sweeps -------------------------------------------------------------------------

double spearman_rank_correlation(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2) {
    throw ValidationError("spearman: need two aligned samples of size >= 2");
  }
  auto ranks = [](const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
      double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  std::vector<double> rx = ranks(xs), ry = ranks(ys);
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= static_cast<double>(rx.size());
  my /= static_cast<double>(ry.size());
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("CDFSL_THREADS")) {
    int v = std::atoi(env);
    if (v > 0) return v;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

namespace {

// Shared-pretrain provisioning for sweeps whose cells differ only in
// curriculum settings: one stage-1 run per seed.
void provision_shared_pretrain(const ExperimentConfig& cfg,
                               const std::vector<std::uint64_t>& seeds, const fs::path& out_dir,
                               int threads) {
  std::vector<std::function<void()>> tasks;
  for (std::uint64_t s : seeds) {
    tasks.push_back([&, s]() {
      ExperimentConfig c = with_seed(cfg, s);
      stage_pretrain(c, out_dir / "shared" / ("seed_" + std::to_string(s)));
    });
  }
  run_tasks(tasks, threads);
}

SweepTable finish_table(std::string kind, std::vector<std::string> row_keys,
                        std::vector<CellResult> cells) {
  SweepTable table;
  table.kind = std::move(kind);
  table.cells = std::move(cells);
  for (const std::string& key : row_keys) table.rows.push_back(aggregate_row(key, table.cells));
  return table;
}

std::string trim_double(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

SweepTable run_ablation_matrix(const ExperimentConfig& cfg, const std::vector<Variant>& variants,
                               const std::vector<std::uint64_t>& seeds, const fs::path& out_dir,
                               int threads) {
  if (variants.empty() || seeds.empty()) {
    throw ValidationError("run_ablation_matrix: variants and seeds must be nonempty");
  }
  threads = resolve_threads(threads);
  bool any_pretrain = false;
  for (Variant v : variants) any_pretrain = any_pretrain || variant_has_pretrain(v);
  if (any_pretrain) provision_shared_pretrain(cfg, seeds, out_dir, threads);

  std::vector<CellResult> cells;
  std::vector<std::function<void()>> tasks;
  std::mutex mu;
  for (Variant v : variants) {
    for (std::uint64_t s : seeds) {
      tasks.push_back([&, v, s]() {
        CellResult cell;
        cell.key = variant_name(v);
        cell.seed = s;
        try {
          ExperimentConfig c = with_seed(cfg, s);
          fs::path cell_dir = out_dir / "cells" / variant_name(v) / ("seed_" + std::to_string(s));
          fs::path shared = out_dir / "shared" / ("seed_" + std::to_string(s));
          PipelineOutcome out = run_pipeline(
              c, cell_dir, v, variant_has_pretrain(v) ? &shared : nullptr);
          cell.ok = true;
          cell.mean = out.report.mean;
          cell.ci95 = out.report.ci95;
        } catch (const std::exception& e) {
          cell.ok = false;
          cell.error = e.what();
        }
        std::lock_guard<std::mutex> lock(mu);
        cells.push_back(cell);
      });
    }
  }
  run_tasks(tasks, threads);
  std::sort(cells.begin(), cells.end(), [](const CellResult& a, const CellResult& b) {
    return std::tie(a.key, a.seed) < std::tie(b.key, b.seed);
  });
  std::vector<std::string> keys;
  for (Variant v : variants) keys.push_back(variant_name(v));
  return finish_table("ablation", keys, std::move(cells));
}

SweepTable run_temperature_sweep(const ExperimentConfig& cfg, const std::vector<double>& taus,
                                 const std::vector<std::uint64_t>& seeds, const fs::path& out_dir,
                                 int threads) {
  if (taus.empty() || seeds.empty()) {
    throw ValidationError("run_temperature_sweep: taus and seeds must be nonempty");
  }
  for (double t : taus) {
    if (!(t > 0.0)) throw ValidationError("run_temperature_sweep: all taus must be > 0");
  }
  threads = resolve_threads(threads);
  provision_shared_pretrain(cfg, seeds, out_dir, threads);

  std::vector<CellResult> cells;
  std::vector<std::function<void()>> tasks;
  std::mutex mu;
  for (double tau : taus) {
    for (std::uint64_t s : seeds) {
      tasks.push_back([&, tau, s]() {
        CellResult cell;
        cell.key = trim_double(tau);
        cell.seed = s;
        try {
          ExperimentConfig c = with_seed(cfg, s);
          c.curriculum.tau = tau;
          fs::path cell_dir =
              out_dir / "cells" / ("tau_" + trim_double(tau)) / ("seed_" + std::to_string(s));
          fs::path shared = out_dir / "shared" / ("seed_" + std::to_string(s));
          PipelineOutcome out = run_pipeline(c, cell_dir, Variant::kFull, &shared);
          cell.ok = true;
          cell.mean = out.report.mean;
          cell.ci95 = out.report.ci95;
        } catch (const std::exception& e) {
          cell.ok = false;
          cell.error = e.what();
        }
        std::lock_guard<std::mutex> lock(mu);
        cells.push_back(cell);
      });
    }
  }
  run_tasks(tasks, threads);
  std::sort(cells.begin(), cells.end(), [](const CellResult& a, const CellResult& b) {
    return std::tie(a.key, a.seed) < std::tie(b.key, b.seed);
  });
  std::vector<std::string> keys;
  for (double t : taus) keys.push_back(trim_double(t));
  SweepTable table = finish_table("temperature", keys, std::move(cells));
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < taus.size(); ++i) {
    if (!table.rows[i].failed) {
      xs.push_back(taus[i]);
      ys.push_back(table.rows[i].mean_over_seeds);
    }
  }
  if (xs.size() >= 2) table.spearman = spearman_rank_correlation(xs, ys);
  return table;
}

SweepTable run_kshot_sweep(const ExperimentConfig& cfg, const std::vector<int>& ks,
                           const std::vector<std::uint64_t>& seeds, const fs::path& out_dir,
                           int threads) {
  if (ks.empty() || seeds.empty()) {
    throw ValidationError("run_kshot_sweep: ks and seeds must be nonempty");
  }
  for (int k : ks) {
    if (k < 1) throw ValidationError("run_kshot_sweep: K must be >= 1");
    if (k + cfg.eval.q_per_class > cfg.manifest.n_per_class_target_test) {
      throw CapacityError("run_kshot_sweep: K=" + std::to_string(k) +
                          " plus Q exceeds target test clips per class");
    }
  }
  threads = resolve_threads(threads);

  // One trained encoder per seed, reused across all K (evaluation-only sweep).
  std::vector<std::function<void()>> base_tasks;
  for (std::uint64_t s : seeds) {
    base_tasks.push_back([&, s]() {
      ExperimentConfig c = with_seed(cfg, s);
      run_pipeline(c, out_dir / "base" / ("seed_" + std::to_string(s)), Variant::kFull);
    });
  }
  run_tasks(base_tasks, threads);

  std::vector<CellResult> cells;
  std::vector<std::function<void()>> tasks;
  std::mutex mu;
  for (std::uint64_t s : seeds) {
    tasks.push_back([&, s]() {
      std::vector<CellResult> local;
      try {
        ExperimentConfig c = with_seed(cfg, s);
        fs::path base_dir = out_dir / "base" / ("seed_" + std::to_string(s));
        Checkpoint ckpt = load_checkpoint(stage_paths(base_dir).curriculum_ckpt);
        ModelParams encoder = ckpt.params.subset_prefix({"enc."});
        DatasetManifest manifest = load_or_build_manifest(c, base_dir);
        DatasetViews views(manifest, c.clip);
        std::vector<Tensor> clips;
        for (int i = 0; i < views.target_test().size(); ++i) {
          clips.push_back(views.target_test().clip(i));
        }
        FeatureMatrix features = extract_features(c.model, encoder, c.clip, clips);
        for (int k : ks) {
          CellResult cell;
          cell.key = std::to_string(k);
          cell.seed = s;
          EvalConfig ec = c.eval;
          ec.k_shot = k;
          EvalReport report = evaluate_with_features(features, views.target_test(), ec, s);
          cell.ok = true;
          cell.mean = report.mean;
          cell.ci95 = report.ci95;
          fs::path cell_dir = out_dir / "cells" / ("k_" + std::to_string(k)) /
                              ("seed_" + std::to_string(s));
          fs::create_directories(cell_dir);
          write_text_file(cell_dir / "eval_report.json",
                          eval_report_to_json(report, config_digest(c, Variant::kFull), s));
          local.push_back(cell);
        }
      } catch (const std::exception& e) {
        for (int k : ks) {
          CellResult cell;
          cell.key = std::to_string(k);
          cell.seed = s;
          cell.ok = false;
          cell.error = e.what();
          local.push_back(cell);
        }
      }
      std::lock_guard<std::mutex> lock(mu);
      for (auto& cell : local) cells.push_back(cell);
    });
  }
  run_tasks(tasks, threads);
  std::sort(cells.begin(), cells.end(), [](const CellResult& a, const CellResult& b) {
    return std::tie(a.key, a.seed) < std::tie(b.key, b.seed);
  });
  std::vector<std::string> keys;
  for (int k : ks) keys.push_back(std::to_string(k));
  SweepTable table = finish_table("kshot", keys, std::move(cells));
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (!table.rows[i].failed) {
      xs.push_back(static_cast<double>(ks[i]));
      ys.push_back(table.rows[i].mean_over_seeds);
    }
  }
  if (xs.size() >= 2) table.spearman = spearman_rank_correlation(xs, ys);
  return table;
}

SweepTable run_source_size_sweep(const ExperimentConfig& cfg, const std::vector<int>& counts,
                                 const std::vector<std::uint64_t>& seeds, const fs::path& out_dir,
                                 int threads) {
  if (counts.empty() || seeds.empty()) {
    throw ValidationError("run_source_size_sweep: counts and seeds must be nonempty");
  }
  for (int c : counts) {
    if (c + cfg.manifest.n_target_classes > class_pool_size()) {
      throw CapacityError("run_source_size_sweep: " + std::to_string(c) +
                          " source classes exceeds the class pool");
    }
  }
  threads = resolve_threads(threads);
  std::vector<CellResult> cells;
  std::vector<std::function<void()>> tasks;
  std::mutex mu;
  for (int count : counts) {
    for (std::uint64_t s : seeds) {
      tasks.push_back([&, count, s]() {
        CellResult cell;
        cell.key = std::to_string(count);
        cell.seed = s;
        try {
          ExperimentConfig c = with_seed(cfg, s);
          c.manifest.n_source_classes = count;
          fs::path cell_dir = out_dir / "cells" / ("src_" + std::to_string(count)) /
                              ("seed_" + std::to_string(s));
          PipelineOutcome out = run_pipeline(c, cell_dir, Variant::kFull);
          cell.ok = true;
          cell.mean = out.report.mean;
          cell.ci95 = out.report.ci95;
        } catch (const std::exception& e) {
          cell.ok = false;
          cell.error = e.what();
        }
        std::lock_guard<std::mutex> lock(mu);
        cells.push_back(cell);
      });
    }
  }
  run_tasks(tasks, threads);
  std::sort(cells.begin(), cells.end(), [](const CellResult& a, const CellResult& b) {
    if (a.key.size() != b.key.size()) return a.key.size() < b.key.size();
    return std::tie(a.key, a.seed) < std::tie(b.key, b.seed);
  });
  std::vector<std::string> keys;
  for (int c : counts) keys.push_back(std::to_string(c));
  SweepTable table = finish_table("source_size", keys, std::move(cells));
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (!table.rows[i].failed) {
      xs.push_back(static_cast<double>(counts[i]));
      ys.push_back(table.rows[i].mean_over_seeds);
    }
  }
  if (xs.size() >= 2) table.spearman = spearman_rank_correlation(xs, ys);
  return table;
}

void write_sweep_outputs(const SweepTable& table, const fs::path& out_dir,
                         const std::string& digest, std::uint64_t seed) {
  fs::create_directories(out_dir);
  json j = sweep_table_to_json(table);
  j["config_digest"] = digest;
  j["seed"] = seed;
  write_text_file(out_dir / (table.kind + ".json"), j.dump(2));

  std::ostringstream csv;
  csv << "# config_digest=" << digest << " seed=" << seed << "\n";
  csv << "key,mean,ci95,per_seed,failed\n";
  for (const SweepRow& r : table.rows) {
    csv << r.key << "," << r.mean_over_seeds << "," << r.ci95_over_seeds << ",";
    for (std::size_t i = 0; i < r.per_seed.size(); ++i) {
      if (i) csv << ";";
      csv << r.per_seed[i];
    }
    csv << "," << (r.failed ? "yes" : "no") << "\n";
  }
  write_text_file(out_dir / (table.kind + ".csv"), csv.str());
}

// ---- file helpers --------------------------------------------------------------------

std::string read_text_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingDependencyError("cannot read " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
}

}  // namespace cdfsl
