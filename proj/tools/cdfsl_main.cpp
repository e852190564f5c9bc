// Command-line front end for the synthetic cross-domain few-shot video
// benchmark: manifest generation, the three training/eval stages, the
// ablation matrix, and the temperature / k-shot / source-size sweeps.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cdfsl/experiment.hpp"

namespace fs = std::filesystem;
using namespace cdfsl;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir = "runs/default";
  std::int64_t seed = -1;  // -1: keep config seed
  int threads = 0;
  std::string variant = "full";
};

std::vector<std::pair<std::string, std::string>> parse_dot_overrides(
    const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> sets;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string arg = extras[i];
    if (arg.rfind("--", 0) != 0 || arg.find('.') == std::string::npos) {
      throw ConfigError("unrecognized argument: " + arg +
                        " (dot-path overrides look like --curriculum.tau 0.5)");
    }
    arg = arg.substr(2);
    auto eq = arg.find('=');
    if (eq != std::string::npos) {
      sets.emplace_back(arg.substr(0, eq), arg.substr(eq + 1));
    } else {
      if (i + 1 >= extras.size()) {
        throw ConfigError("override --" + arg + " is missing a value");
      }
      sets.emplace_back(arg, extras[++i]);
    }
  }
  return sets;
}

ExperimentConfig load_config(const CommonOpts& opts, const std::vector<std::string>& extras) {
  ExperimentConfig cfg;
  if (!opts.config_path.empty()) {
    cfg = experiment_config_from_json(read_text_file(opts.config_path));
  }
  auto sets = parse_dot_overrides(extras);
  if (!sets.empty()) cfg = apply_overrides(cfg, sets);
  if (opts.seed >= 0) {
    cfg.seed = static_cast<std::uint64_t>(opts.seed);
    cfg.pretrain.seed = cfg.seed;
    cfg.curriculum.seed = cfg.seed;
  }
  cfg.validate();
  return cfg;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) seeds.push_back(std::stoull(item));
  }
  if (seeds.empty()) throw ConfigError("empty seed list");
  return seeds;
}

template <typename T>
std::vector<T> parse_list(const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if constexpr (std::is_same_v<T, int>) {
      out.push_back(std::stoi(item));
    } else {
      out.push_back(std::stod(item));
    }
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

void print_report(const EvalReport& r) {
  std::printf("%d-way %d-shot over %d episodes: mean %.4f ci95 %.4f\n", r.n_way, r.k_shot,
              r.episodes, r.mean, r.ci95);
}

void print_table(const SweepTable& t) {
  std::printf("%-18s %-10s %-10s\n", "key", "mean", "ci95");
  for (const SweepRow& row : t.rows) {
    if (row.failed && row.per_seed.empty()) {
      std::printf("%-18s %-10s %-10s\n", row.key.c_str(), "FAILED", "-");
    } else {
      std::printf("%-18s %-10.4f %-10.4f%s\n", row.key.c_str(), row.mean_over_seeds,
                  row.ci95_over_seeds, row.failed ? "  (some cells failed)" : "");
    }
  }
  for (const CellResult& c : t.cells) {
    if (!c.ok) {
      std::printf("  cell %s/seed %llu failed: %s\n", c.key.c_str(),
                  static_cast<unsigned long long>(c.seed), c.error.c_str());
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cdfsl: curriculum-based cross-domain few-shot video learning on a synthetic benchmark"};
  app.require_subcommand(1);
  app.allow_extras();

  CommonOpts opts;
  std::string stage = "all";
  std::string seeds_text = "0,1,2";
  std::string variants_text = "full,equal_weighting,no_sharpening,ssl_only,supervised_only";
  std::string taus_text = "0.1,0.5,1.5,5,10";
  std::string ks_text = "1,5,20";
  std::string counts_text = "4,8,16";

  auto add_common = [&](CLI::App* cmd, bool with_variant = false) {
    cmd->add_option("--config", opts.config_path, "JSON experiment config");
    cmd->add_option("--out", opts.out_dir, "output directory");
    cmd->add_option("--seed", opts.seed, "global seed override");
    cmd->add_option("--threads", opts.threads, "worker cap (0: CDFSL_THREADS or hardware)");
    if (with_variant) cmd->add_option("--variant", opts.variant, "ablation variant");
    cmd->allow_extras();
  };

  int export_clips_n = 0;
  CLI::App* gen = app.add_subcommand("gen-manifest", "generate and write the dataset manifest");
  add_common(gen);
  gen->add_option("--export-clips", export_clips_n,
                  "also dump the first N clips per split in checkpoint format");
  CLI::App* pre = app.add_subcommand("pretrain", "stage 1: masked-autoencoder pretraining");
  add_common(pre);
  CLI::App* cur = app.add_subcommand("curriculum", "stage 2: curriculum training");
  add_common(cur, true);
  CLI::App* ev = app.add_subcommand("eval", "stage 3: episodic evaluation");
  add_common(ev, true);
  CLI::App* run = app.add_subcommand("run", "full pipeline (resumes completed stages)");
  add_common(run, true);
  run->add_option("--stage", stage, "run a single stage: manifest|pretrain|curriculum|eval|all");
  CLI::App* abl = app.add_subcommand("ablate", "ablation matrix over variants x seeds");
  add_common(abl);
  abl->add_option("--variants", variants_text, "comma-separated variant list");
  abl->add_option("--seeds", seeds_text, "comma-separated seeds");
  CLI::App* st = app.add_subcommand("sweep-temp", "temperature sweep (shared pretraining)");
  add_common(st);
  st->add_option("--taus", taus_text, "comma-separated temperatures");
  st->add_option("--seeds", seeds_text, "comma-separated seeds");
  CLI::App* sk = app.add_subcommand("sweep-kshot", "k-shot sweep on one trained encoder per seed");
  add_common(sk);
  sk->add_option("--ks", ks_text, "comma-separated shot counts");
  sk->add_option("--seeds", seeds_text, "comma-separated seeds");
  CLI::App* ss = app.add_subcommand("sweep-source", "source-class-count sweep");
  add_common(ss);
  ss->add_option("--counts", counts_text, "comma-separated source class counts");
  ss->add_option("--seeds", seeds_text, "comma-separated seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    CLI::App* cmd = app.get_subcommands().front();
    ExperimentConfig cfg = load_config(opts, cmd->remaining());
    fs::path out(opts.out_dir);

    if (cmd == gen) {
      DatasetManifest m = stage_manifest(cfg, out);
      std::printf("manifest: %d source classes, %d target classes -> %s\n",
                  m.source_class_count(), m.target_class_count(),
                  (out / "manifest.json").c_str());
      if (export_clips_n > 0) {
        export_clips(cfg, m, out / "clips.ckpt", export_clips_n);
        std::printf("exported %d clips per split -> %s\n", export_clips_n,
                    (out / "clips.ckpt").c_str());
      }
    } else if (cmd == pre) {
      stage_pretrain(cfg, out);
      std::printf("pretraining complete -> %s\n", (out / "pretrain.ckpt").c_str());
    } else if (cmd == cur) {
      stage_curriculum(cfg, out, variant_from_name(opts.variant));
      std::printf("curriculum complete -> %s\n", (out / "curriculum.ckpt").c_str());
    } else if (cmd == ev) {
      EvalReport r = stage_eval(cfg, out, variant_from_name(opts.variant));
      print_report(r);
    } else if (cmd == run) {
      Variant v = variant_from_name(opts.variant);
      if (stage == "all") {
        PipelineOutcome o = run_pipeline(cfg, out, v);
        print_report(o.report);
      } else if (stage == "manifest") {
        stage_manifest(cfg, out);
      } else if (stage == "pretrain") {
        stage_pretrain(cfg, out);
      } else if (stage == "curriculum") {
        stage_curriculum(cfg, out, v);
      } else if (stage == "eval") {
        print_report(stage_eval(cfg, out, v));
      } else {
        throw ConfigError("unknown stage: " + stage);
      }
    } else if (cmd == abl) {
      std::vector<Variant> variants;
      std::stringstream vs(variants_text);
      std::string item;
      while (std::getline(vs, item, ',')) {
        if (!item.empty()) variants.push_back(variant_from_name(item));
      }
      SweepTable t = run_ablation_matrix(cfg, variants, parse_seeds(seeds_text), out, opts.threads);
      write_sweep_outputs(t, out, config_digest(cfg, Variant::kFull), cfg.seed);
      print_table(t);
    } else if (cmd == st) {
      SweepTable t = run_temperature_sweep(cfg, parse_list<double>(taus_text),
                                           parse_seeds(seeds_text), out, opts.threads);
      write_sweep_outputs(t, out, config_digest(cfg, Variant::kFull), cfg.seed);
      print_table(t);
      std::printf("spearman(tau, accuracy) = %.3f\n", t.spearman);
    } else if (cmd == sk) {
      SweepTable t = run_kshot_sweep(cfg, parse_list<int>(ks_text), parse_seeds(seeds_text), out,
                                     opts.threads);
      write_sweep_outputs(t, out, config_digest(cfg, Variant::kFull), cfg.seed);
      print_table(t);
    } else if (cmd == ss) {
      SweepTable t = run_source_size_sweep(cfg, parse_list<int>(counts_text),
                                           parse_seeds(seeds_text), out, opts.threads);
      write_sweep_outputs(t, out, config_digest(cfg, Variant::kFull), cfg.seed);
      print_table(t);
    }
    return 0;
  } catch (const MissingDependencyError& e) {
    std::cerr << "missing dependency: " << e.what() << "\n";
    return 4;
  } catch (const TrainingError& e) {
    std::cerr << "training failure: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "training failure: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
