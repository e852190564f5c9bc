#include "cdfsl/data.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "json.hpp"

namespace cdfsl {

namespace {

using nlohmann::json;

constexpr double kPi = 3.141592653589793238462643383279502884;

// Largest/smallest eigenvalues of a symmetric 3x3 via Jacobi sweeps.
std::pair<double, double> sym3_eig_extremes(std::array<double, 9> a) {
  for (int sweep = 0; sweep < 32; ++sweep) {
    double off = std::fabs(a[1]) + std::fabs(a[2]) + std::fabs(a[5]);
    if (off < 1e-15) break;
    static const int pairs[3][2] = {{0, 1}, {0, 2}, {1, 2}};
    for (const auto& pr : pairs) {
      int p = pr[0], q = pr[1];
      double apq = a[static_cast<std::size_t>(p * 3 + q)];
      if (std::fabs(apq) < 1e-18) continue;
      double app = a[static_cast<std::size_t>(p * 3 + p)];
      double aqq = a[static_cast<std::size_t>(q * 3 + q)];
      double theta = 0.5 * std::atan2(2.0 * apq, aqq - app);
      double c = std::cos(theta), s = std::sin(theta);
      std::array<double, 9> r = {1, 0, 0, 0, 1, 0, 0, 0, 1};
      r[static_cast<std::size_t>(p * 3 + p)] = c;
      r[static_cast<std::size_t>(q * 3 + q)] = c;
      r[static_cast<std::size_t>(p * 3 + q)] = s;
      r[static_cast<std::size_t>(q * 3 + p)] = -s;
      // a <- r^T a r
      std::array<double, 9> t{};
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          double v = 0;
          for (int k = 0; k < 3; ++k)
            v += r[static_cast<std::size_t>(k * 3 + i)] * a[static_cast<std::size_t>(k * 3 + j)];
          t[static_cast<std::size_t>(i * 3 + j)] = v;
        }
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          double v = 0;
          for (int k = 0; k < 3; ++k)
            v += t[static_cast<std::size_t>(i * 3 + k)] * r[static_cast<std::size_t>(k * 3 + j)];
          a[static_cast<std::size_t>(i * 3 + j)] = v;
        }
    }
  }
  double lo = a[0], hi = a[0];
  for (int i = 1; i < 3; ++i) {
    lo = std::min(lo, a[static_cast<std::size_t>(i * 3 + i)]);
    hi = std::max(hi, a[static_cast<std::size_t>(i * 3 + i)]);
  }
  return {hi, lo};
}

double torus_dist(double a, double b, double period) {
  double d = std::fabs(a - b);
  d = std::fmod(d, period);
  return std::min(d, period - d);
}

struct ObjectState {
  double cy, cx;   // center
  double half;     // half side of the square
};

struct ClipPlan {
  std::vector<ObjectState> per_frame;
  std::array<double, 3> color;
};

ClipPlan plan_motion(const ClassDef& cls, const DomainStyle& style, std::uint64_t clip_seed,
                     const ClipSpec& spec) {
  RngStream rs(clip_seed);
  RngStream obj = rs.split("object");
  RngStream jit = rs.split("jitter");
  const double H = spec.height, W = spec.width;
  const int T = spec.frames;

  ClipPlan plan;
  plan.per_frame.resize(static_cast<std::size_t>(T));
  for (double& c : plan.color) c = obj.uniform(0.60, 0.92);

  double half0 = obj.uniform(1.6, 2.4);
  switch (cls.program) {
    case MotionProgram::kTranslate: {
      const int dir = cls.bin / 2;
      const double speed = (cls.bin % 2 == 0) ? 1.0 : 2.0;
      const double ang = dir * (kPi / 4.0);
      const double vx = speed * std::cos(ang);
      const double vy = speed * std::sin(ang);
      double cy = obj.uniform(0.0, H), cx = obj.uniform(0.0, W);
      for (int t = 0; t < T; ++t) {
        auto& s = plan.per_frame[static_cast<std::size_t>(t)];
        s.cy = std::fmod(cy + vy * t + 4.0 * H, H);
        s.cx = std::fmod(cx + vx * t + 4.0 * W, W);
        s.half = half0;
      }
      break;
    }
    case MotionProgram::kRotate: {
      // Orbit around a uniformly random center (torus rendering handles
      // wrap), so the time-averaged position carries no class signal.
      const double sign = (cls.bin / 2 == 0) ? 1.0 : -1.0;
      const double omega = (cls.bin % 2 == 0) ? kPi / 6.0 : kPi / 3.0;
      const double radius = obj.uniform(3.0, 4.5);
      const double phase = obj.uniform(0.0, 2.0 * kPi);
      const double cy = obj.uniform(0.0, H);
      const double cx = obj.uniform(0.0, W);
      for (int t = 0; t < T; ++t) {
        auto& s = plan.per_frame[static_cast<std::size_t>(t)];
        double a = phase + sign * omega * t;
        s.cy = std::fmod(cy + radius * std::sin(a) + 4.0 * H, H);
        s.cx = std::fmod(cx + radius * std::cos(a) + 4.0 * W, W);
        s.half = half0;
      }
      break;
    }
    case MotionProgram::kOscillate: {
      const bool horizontal = (cls.bin / 2 == 0);
      const double cycles = (cls.bin % 2 == 0) ? 1.0 : 2.0;
      const double amp = obj.uniform(2.5, 4.0);
      const double phase = obj.uniform(0.0, 2.0 * kPi);
      const double cy = obj.uniform(0.0, H);
      const double cx = obj.uniform(0.0, W);
      for (int t = 0; t < T; ++t) {
        auto& s = plan.per_frame[static_cast<std::size_t>(t)];
        double d = amp * std::sin(phase + 2.0 * kPi * cycles * t / T);
        s.cy = std::fmod(cy + (horizontal ? 0.0 : d) + 4.0 * H, H);
        s.cx = std::fmod(cx + (horizontal ? d : 0.0) + 4.0 * W, W);
        s.half = half0;
      }
      break;
    }
    case MotionProgram::kScale: {
      // The ramp is normalized so the clip-averaged size matches the other
      // programs; only the temporal direction of the ramp is distinctive.
      const bool grow = (cls.bin / 2 == 0);
      const double rate = (cls.bin % 2 == 0) ? 0.8 : 1.6;
      const double cy = obj.uniform(0.0, H);
      const double cx = obj.uniform(0.0, W);
      const double norm = 1.0 + 0.5 * rate;
      for (int t = 0; t < T; ++t) {
        auto& s = plan.per_frame[static_cast<std::size_t>(t)];
        double u = (T > 1) ? static_cast<double>(t) / (T - 1) : 0.0;
        double progress = grow ? u : (1.0 - u);
        s.cy = cy;
        s.cx = cx;
        s.half = half0 * (1.0 + rate * progress) / norm;
      }
      break;
    }
  }
  if (style.temporal_jitter > 0.0) {
    for (auto& s : plan.per_frame) {
      s.cy += jit.normal() * style.temporal_jitter;
      s.cx += jit.normal() * style.temporal_jitter;
    }
  }
  return plan;
}

double background_intensity(const DomainStyle& style, int y, int x) {
  const double amp = 0.10;
  switch (style.texture) {
    case Texture::kFlat:
      return style.background_level;
    case Texture::kChecker:
      return style.background_level + ((((y >> 1) + (x >> 1)) & 1) ? amp : -amp);
    case Texture::kStripes:
      return style.background_level + (((x >> 1) & 1) ? amp : -amp);
  }
  return style.background_level;
}

json style_to_json(const DomainStyle& s) {
  return json{{"texture", texture_name(s.texture)},
              {"background_level", s.background_level},
              {"noise_std", s.noise_std},
              {"palette", s.palette},
              {"temporal_jitter", s.temporal_jitter}};
}

DomainStyle style_from_json(const json& j) {
  DomainStyle s;
  s.texture = texture_from_name(j.at("texture").get<std::string>());
  s.background_level = j.at("background_level").get<double>();
  s.noise_std = j.at("noise_std").get<double>();
  auto pal = j.at("palette").get<std::vector<double>>();
  if (pal.size() != 9) throw ConfigError("style palette must have 9 entries");
  std::copy(pal.begin(), pal.end(), s.palette.begin());
  s.temporal_jitter = j.at("temporal_jitter").get<double>();
  return s;
}

json split_to_json(const SplitDef& s) {
  json classes = json::array();
  for (const ClassDef& c : s.classes) {
    classes.push_back(json{{"class_id", c.class_id},
                           {"program", motion_program_name(c.program)},
                           {"bin", c.bin}});
  }
  return json{{"classes", classes}, {"style", style_to_json(s.style)},
              {"n_per_class", s.n_per_class}};
}

SplitDef split_from_json(const json& j) {
  SplitDef s;
  for (const auto& c : j.at("classes")) {
    ClassDef d;
    d.class_id = c.at("class_id").get<int>();
    d.program = motion_program_from_name(c.at("program").get<std::string>());
    d.bin = c.at("bin").get<int>();
    s.classes.push_back(d);
  }
  s.style = style_from_json(j.at("style"));
  s.n_per_class = j.at("n_per_class").get<int>();
  return s;
}

// Bilinear sample of one frame/channel with edge clamping.
double bilinear(const double* frame, int H, int W, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(H - 1));
  x = std::clamp(x, 0.0, static_cast<double>(W - 1));
  int y0 = static_cast<int>(std::floor(y));
  int x0 = static_cast<int>(std::floor(x));
  int y1 = std::min(y0 + 1, H - 1);
  int x1 = std::min(x0 + 1, W - 1);
  double fy = y - y0, fx = x - x0;
  double v00 = frame[y0 * W + x0], v01 = frame[y0 * W + x1];
  double v10 = frame[y1 * W + x0], v11 = frame[y1 * W + x1];
  return v00 * (1 - fy) * (1 - fx) + v01 * (1 - fy) * fx + v10 * fy * (1 - fx) + v11 * fy * fx;
}

}  // namespace

std::string motion_program_name(MotionProgram p) {
  switch (p) {
    case MotionProgram::kTranslate: return "translate";
    case MotionProgram::kRotate: return "rotate";
    case MotionProgram::kOscillate: return "oscillate";
    case MotionProgram::kScale: return "scale";
  }
  return "translate";
}

MotionProgram motion_program_from_name(const std::string& name) {
  if (name == "translate") return MotionProgram::kTranslate;
  if (name == "rotate") return MotionProgram::kRotate;
  if (name == "oscillate") return MotionProgram::kOscillate;
  if (name == "scale") return MotionProgram::kScale;
  throw ConfigError("unknown motion program: " + name);
}

int motion_program_bins(MotionProgram p) {
  switch (p) {
    case MotionProgram::kTranslate: return 16;
    case MotionProgram::kRotate: return 4;
    case MotionProgram::kOscillate: return 4;
    case MotionProgram::kScale: return 4;
  }
  return 0;
}

int class_pool_size() { return 16 + 4 + 4 + 4; }

std::vector<ClassDef> class_pool() {
  std::vector<ClassDef> pool;
  for (MotionProgram p : {MotionProgram::kTranslate, MotionProgram::kRotate,
                          MotionProgram::kOscillate, MotionProgram::kScale}) {
    for (int b = 0; b < motion_program_bins(p); ++b) {
      ClassDef c;
      c.program = p;
      c.bin = b;
      pool.push_back(c);
    }
  }
  return pool;
}

std::string texture_name(Texture t) {
  switch (t) {
    case Texture::kFlat: return "flat";
    case Texture::kChecker: return "checker";
    case Texture::kStripes: return "stripes";
  }
  return "flat";
}

Texture texture_from_name(const std::string& name) {
  if (name == "flat") return Texture::kFlat;
  if (name == "checker") return Texture::kChecker;
  if (name == "stripes") return Texture::kStripes;
  throw ConfigError("unknown texture: " + name);
}

double DomainStyle::palette_condition() const {
  // Condition number of the palette via eigenvalues of P^T P.
  std::array<double, 9> ata{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double v = 0;
      for (int k = 0; k < 3; ++k)
        v += palette[static_cast<std::size_t>(k * 3 + i)] *
             palette[static_cast<std::size_t>(k * 3 + j)];
      ata[static_cast<std::size_t>(i * 3 + j)] = v;
    }
  auto [hi, lo] = sym3_eig_extremes(ata);
  if (lo <= 0.0) return std::numeric_limits<double>::infinity();
  return std::sqrt(hi / lo);
}

void DomainStyle::validate() const {
  if (background_level < 0.0 || background_level > 1.0) {
    throw ValidationError("DomainStyle: background_level must lie in [0, 1]");
  }
  if (noise_std < 0.0 || temporal_jitter < 0.0) {
    throw ValidationError("DomainStyle: noise_std and temporal_jitter must be >= 0");
  }
  double cond = palette_condition();
  if (!(cond < 1e3)) {
    throw ValidationError("DomainStyle: palette condition number " + std::to_string(cond) +
                          " is not < 1e3 (classes would not stay decodable)");
  }
}

DomainStyle default_source_style() {
  DomainStyle s;
  s.texture = Texture::kChecker;
  s.background_level = 0.30;
  s.noise_std = 0.02;
  s.palette = {0.95, 0.05, 0.00, 0.05, 0.95, 0.00, 0.00, 0.05, 0.95};
  s.temporal_jitter = 0.10;
  return s;
}

DomainStyle default_target_style() {
  DomainStyle s;
  s.texture = Texture::kStripes;
  s.background_level = 0.50;
  s.noise_std = 0.08;
  s.palette = {0.55, 0.30, 0.15, 0.10, 0.60, 0.30, 0.30, 0.15, 0.55};
  s.temporal_jitter = 0.40;
  return s;
}

void DatasetManifest::validate() const {
  source.style.validate();
  target_unlabeled.style.validate();
  target_test.style.validate();
  if (source.classes.empty() || target_unlabeled.classes.empty() || target_test.classes.empty()) {
    throw ValidationError("manifest: every split needs at least one class");
  }
  if (source.n_per_class < 1 || target_unlabeled.n_per_class < 1 || target_test.n_per_class < 1) {
    throw ValidationError("manifest: n_per_class must be >= 1");
  }
  auto key = [](const ClassDef& c) { return std::make_pair(static_cast<int>(c.program), c.bin); };
  std::set<std::pair<int, int>> seen;
  for (const ClassDef& c : source.classes) {
    if (c.bin < 0 || c.bin >= motion_program_bins(c.program)) {
      throw ValidationError("manifest: class bin out of range");
    }
    if (!seen.insert(key(c)).second) {
      throw ValidationError("manifest: duplicate class within source split");
    }
  }
  std::set<std::pair<int, int>> target_seen;
  for (const ClassDef& c : target_test.classes) {
    if (c.bin < 0 || c.bin >= motion_program_bins(c.program)) {
      throw ValidationError("manifest: class bin out of range");
    }
    if (seen.count(key(c))) {
      throw ValidationError("manifest: source and target share class (" +
                            motion_program_name(c.program) + ", bin " + std::to_string(c.bin) +
                            "); splits must be disjoint");
    }
    if (!target_seen.insert(key(c)).second) {
      throw ValidationError("manifest: duplicate class within target split");
    }
  }
  if (target_unlabeled.classes.size() != target_test.classes.size()) {
    throw ValidationError("manifest: target splits must share the same class list");
  }
  for (std::size_t i = 0; i < target_test.classes.size(); ++i) {
    if (!target_unlabeled.classes[i].same_motion(target_test.classes[i])) {
      throw ValidationError("manifest: target splits must share the same class list");
    }
  }
}

DatasetManifest build_manifest(const ManifestOptions& opt, std::uint64_t seed) {
  if (opt.n_source_classes < 1 || opt.n_target_classes < 1) {
    throw ValidationError("build_manifest: class counts must be >= 1");
  }
  std::vector<ClassDef> pool = class_pool();
  if (opt.n_source_classes + opt.n_target_classes > static_cast<int>(pool.size())) {
    throw CapacityError("build_manifest: requested " +
                        std::to_string(opt.n_source_classes + opt.n_target_classes) +
                        " classes but only " + std::to_string(pool.size()) + " are available");
  }
  RngStream rng = derive_stream(seed, {stream_tag::kManifest});
  rng.shuffle(pool);

  DatasetManifest m;
  m.seed = seed;
  m.source.style = opt.source_style;
  m.source.n_per_class = opt.n_per_class_source;
  for (int i = 0; i < opt.n_source_classes; ++i) {
    ClassDef c = pool[static_cast<std::size_t>(i)];
    c.class_id = i;
    m.source.classes.push_back(c);
  }
  m.target_unlabeled.style = opt.target_style;
  m.target_unlabeled.n_per_class = opt.n_per_class_target_unlabeled;
  m.target_test.style = opt.target_style;
  m.target_test.n_per_class = opt.n_per_class_target_test;
  for (int i = 0; i < opt.n_target_classes; ++i) {
    ClassDef c = pool[static_cast<std::size_t>(opt.n_source_classes + i)];
    c.class_id = opt.n_source_classes + i;
    m.target_unlabeled.classes.push_back(c);
    m.target_test.classes.push_back(c);
  }
  m.validate();
  return m;
}

std::string manifest_to_json(const DatasetManifest& m) {
  json j{{"seed", m.seed},
         {"source", split_to_json(m.source)},
         {"target_unlabeled", split_to_json(m.target_unlabeled)},
         {"target_test", split_to_json(m.target_test)}};
  return j.dump(2);
}

DatasetManifest manifest_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest: invalid JSON: ") + e.what());
  }
  DatasetManifest m;
  try {
    m.seed = j.at("seed").get<std::uint64_t>();
    m.source = split_from_json(j.at("source"));
    m.target_unlabeled = split_from_json(j.at("target_unlabeled"));
    m.target_test = split_from_json(j.at("target_test"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest: missing or invalid field: ") + e.what());
  }
  m.validate();
  return m;
}

Tensor generate_clip(const ClassDef& cls, const DomainStyle& style, std::uint64_t clip_seed,
                     const ClipSpec& spec) {
  spec.validate();
  style.validate();
  const int T = spec.frames, C = spec.channels, H = spec.height, W = spec.width;
  if (C != 3) throw ValidationError("generate_clip: renderer expects 3 channels");

  ClipPlan plan = plan_motion(cls, style, clip_seed, spec);
  RngStream noise = RngStream(clip_seed).split("noise");

  std::vector<double> out(spec.clip_numel());
  auto at = [&](int t, int c, int y, int x) -> double& {
    return out[((static_cast<std::size_t>(t) * C + c) * H + y) * W + x];
  };
  for (int t = 0; t < T; ++t) {
    const ObjectState& s = plan.per_frame[static_cast<std::size_t>(t)];
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        double dty = torus_dist(static_cast<double>(y), s.cy, static_cast<double>(H));
        double dtx = torus_dist(static_cast<double>(x), s.cx, static_cast<double>(W));
        double cov = std::clamp(s.half + 0.5 - std::max(dty, dtx), 0.0, 1.0);
        double bg = background_intensity(style, y, x);
        double rgb[3];
        for (int c = 0; c < 3; ++c) {
          rgb[c] = bg * (1.0 - cov) + plan.color[static_cast<std::size_t>(c)] * cov;
        }
        for (int c = 0; c < 3; ++c) {
          double v = style.palette[static_cast<std::size_t>(c * 3 + 0)] * rgb[0] +
                     style.palette[static_cast<std::size_t>(c * 3 + 1)] * rgb[1] +
                     style.palette[static_cast<std::size_t>(c * 3 + 2)] * rgb[2];
          if (style.noise_std > 0.0) v += noise.normal() * style.noise_std;
          at(t, c, y, x) = std::clamp(v, 0.0, 1.0);
        }
      }
    }
  }
  return Tensor::from({T, C, H, W}, std::move(out));
}

std::uint64_t clip_seed_for(const DatasetManifest& m, Split split, int class_index, int index) {
  return derive_stream(m.seed, {stream_tag::kClip, static_cast<std::uint64_t>(split),
                                static_cast<std::uint64_t>(class_index),
                                static_cast<std::uint64_t>(index)})
      .key();
}

// ---- views --------------------------------------------------------------------

SplitView::SplitView(const DatasetManifest& manifest, Split split, const ClipSpec& spec,
                     std::shared_ptr<std::atomic<std::uint64_t>> label_reads)
    : split_(split), label_reads_(std::move(label_reads)) {
  switch (split) {
    case Split::kSource: def_ = &manifest.source; break;
    case Split::kTargetUnlabeled: def_ = &manifest.target_unlabeled; break;
    case Split::kTargetTest: def_ = &manifest.target_test; break;
  }
  clips_.reserve(static_cast<std::size_t>(size()));
  seeds_.reserve(static_cast<std::size_t>(size()));
  for (int ci = 0; ci < n_classes(); ++ci) {
    for (int i = 0; i < n_per_class(); ++i) {
      std::uint64_t cs = clip_seed_for(manifest, split, ci, i);
      seeds_.push_back(cs);
      clips_.push_back(generate_clip(def_->classes[static_cast<std::size_t>(ci)], def_->style, cs,
                                     spec));
    }
  }
}

const Tensor& SplitView::clip(int flat_index) const {
  if (flat_index < 0 || flat_index >= size()) throw ValidationError("SplitView: index out of range");
  return clips_[static_cast<std::size_t>(flat_index)];
}

int SplitView::label(int flat_index) const {
  if (flat_index < 0 || flat_index >= size()) throw ValidationError("SplitView: index out of range");
  label_reads_->fetch_add(1, std::memory_order_relaxed);
  return flat_index / n_per_class();
}

ClipRef SplitView::ref(int flat_index) const {
  return ClipRef{split_, flat_index / n_per_class(), flat_index % n_per_class()};
}

std::uint64_t SplitView::clip_seed(int flat_index) const {
  return seeds_[static_cast<std::size_t>(flat_index)];
}

DatasetViews::DatasetViews(DatasetManifest manifest, const ClipSpec& spec)
    : manifest_(std::move(manifest)),
      label_reads_(std::make_shared<std::atomic<std::uint64_t>>(0)) {
  manifest_.validate();
  source_ = std::make_unique<SplitView>(manifest_, Split::kSource, spec, label_reads_);
  target_unlabeled_ =
      std::make_unique<SplitView>(manifest_, Split::kTargetUnlabeled, spec, label_reads_);
  target_test_ = std::make_unique<SplitView>(manifest_, Split::kTargetTest, spec, label_reads_);
}

// ---- augmentation ----------------------------------------------------------------

WeakAugParams sample_weak_params(const ClipSpec& spec, RngStream& rng) {
  WeakAugParams p;
  p.scale = rng.uniform(0.6, 1.0);
  const double side_h = p.scale * spec.height;
  const double side_w = p.scale * spec.width;
  p.offset_y = rng.uniform(0.0, spec.height - side_h);
  p.offset_x = rng.uniform(0.0, spec.width - side_w);
  p.flip = rng.bernoulli(0.5);
  return p;
}

StrongAugParams sample_strong_params(const ClipSpec& spec, RngStream& rng) {
  StrongAugParams p;
  p.weak = sample_weak_params(spec, rng);
  // All fields are drawn unconditionally so the stream layout does not depend
  // on gate outcomes.
  p.color_jitter = rng.bernoulli(0.8);
  for (double& b : p.brightness) b = rng.uniform(0.6, 1.4);
  p.contrast = rng.uniform(0.6, 1.4);
  p.grayscale = rng.bernoulli(0.2);
  p.blur = rng.bernoulli(0.5);
  p.blur_sigma = rng.uniform(0.1, 1.0);
  return p;
}

Tensor apply_weak(const Tensor& clip, const ClipSpec& spec, const WeakAugParams& p) {
  const int T = spec.frames, C = spec.channels, H = spec.height, W = spec.width;
  const double side_h = p.scale * H;
  const double side_w = p.scale * W;
  std::vector<double> out(clip.size());
  const double* src = clip.values().data();
  for (int t = 0; t < T; ++t) {
    for (int c = 0; c < C; ++c) {
      const double* frame = src + (static_cast<std::size_t>(t) * C + c) * H * W;
      double* dst = out.data() + (static_cast<std::size_t>(t) * C + c) * H * W;
      for (int i = 0; i < H; ++i) {
        double sy = p.offset_y + (i + 0.5) * side_h / H - 0.5;
        for (int j = 0; j < W; ++j) {
          int jj = p.flip ? (W - 1 - j) : j;
          double sx = p.offset_x + (jj + 0.5) * side_w / W - 0.5;
          dst[i * W + j] = bilinear(frame, H, W, sy, sx);
        }
      }
    }
  }
  return Tensor::from(clip.shape(), std::move(out));
}

Tensor apply_strong(const Tensor& clip, const ClipSpec& spec, const StrongAugParams& p) {
  Tensor cur = apply_weak(clip, spec, p.weak);
  const int T = spec.frames, C = spec.channels, H = spec.height, W = spec.width;
  const std::size_t frame_px = static_cast<std::size_t>(H) * W;
  std::vector<double>& v = cur.raw();

  if (p.color_jitter) {
    // Per-channel brightness, then contrast around the clip-channel mean.
    for (int c = 0; c < C; ++c) {
      double mean = 0.0;
      for (int t = 0; t < T; ++t) {
        double* f = v.data() + (static_cast<std::size_t>(t) * C + c) * frame_px;
        for (std::size_t i = 0; i < frame_px; ++i) {
          f[i] *= p.brightness[static_cast<std::size_t>(c)];
          mean += f[i];
        }
      }
      mean /= static_cast<double>(T) * frame_px;
      for (int t = 0; t < T; ++t) {
        double* f = v.data() + (static_cast<std::size_t>(t) * C + c) * frame_px;
        for (std::size_t i = 0; i < frame_px; ++i) {
          f[i] = std::clamp(mean + p.contrast * (f[i] - mean), 0.0, 1.0);
        }
      }
    }
  }
  if (p.grayscale) {
    for (int t = 0; t < T; ++t) {
      double* r = v.data() + (static_cast<std::size_t>(t) * C + 0) * frame_px;
      double* g = v.data() + (static_cast<std::size_t>(t) * C + 1) * frame_px;
      double* b = v.data() + (static_cast<std::size_t>(t) * C + 2) * frame_px;
      for (std::size_t i = 0; i < frame_px; ++i) {
        double y = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
        r[i] = g[i] = b[i] = y;
      }
    }
  }
  if (p.blur && p.blur_sigma > 0.0) {
    const double sigma = p.blur_sigma;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int k = -radius; k <= radius; ++k) {
      double w = std::exp(-0.5 * (k * k) / (sigma * sigma));
      kernel[static_cast<std::size_t>(k + radius)] = w;
      sum += w;
    }
    for (double& w : kernel) w /= sum;
    std::vector<double> tmp(frame_px);
    for (int t = 0; t < T; ++t) {
      for (int c = 0; c < C; ++c) {
        double* f = v.data() + (static_cast<std::size_t>(t) * C + c) * frame_px;
        for (int y = 0; y < H; ++y) {
          for (int x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) {
              int xx = std::clamp(x + k, 0, W - 1);
              acc += kernel[static_cast<std::size_t>(k + radius)] * f[y * W + xx];
            }
            tmp[static_cast<std::size_t>(y) * W + x] = acc;
          }
        }
        for (int y = 0; y < H; ++y) {
          for (int x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) {
              int yy = std::clamp(y + k, 0, H - 1);
              acc += kernel[static_cast<std::size_t>(k + radius)] *
                     tmp[static_cast<std::size_t>(yy) * W + x];
            }
            f[y * W + x] = acc;
          }
        }
      }
    }
  }
  return cur;
}

std::vector<Tensor> weak_augment(const std::vector<Tensor>& clips, const ClipSpec& spec,
                                 RngStream& rng) {
  std::vector<Tensor> out;
  out.reserve(clips.size());
  for (const Tensor& clip : clips) {
    WeakAugParams p = sample_weak_params(spec, rng);
    out.push_back(apply_weak(clip, spec, p));
  }
  return out;
}

std::vector<Tensor> strong_augment(const std::vector<Tensor>& clips, const ClipSpec& spec,
                                   RngStream& rng) {
  std::vector<Tensor> out;
  out.reserve(clips.size());
  for (const Tensor& clip : clips) {
    StrongAugParams p = sample_strong_params(spec, rng);
    out.push_back(apply_strong(clip, spec, p));
  }
  return out;
}

// ---- batching -----------------------------------------------------------------

std::vector<std::vector<int>> epoch_batches(int n_items, int batch_size, std::uint64_t seed,
                                            std::uint64_t order_tag, int epoch) {
  if (n_items < 1) throw ValidationError("epoch_batches: empty item set");
  if (batch_size < 1 || batch_size > n_items) {
    throw ValidationError("epoch_batches: batch size must lie in [1, n_items]");
  }
  std::vector<int> perm(static_cast<std::size_t>(n_items));
  for (int i = 0; i < n_items; ++i) perm[static_cast<std::size_t>(i)] = i;
  RngStream rng = derive_stream(seed, {order_tag, static_cast<std::uint64_t>(epoch)});
  rng.shuffle(perm);
  std::vector<std::vector<int>> batches;
  for (int start = 0; start < n_items; start += batch_size) {
    int end = std::min(start + batch_size, n_items);
    batches.emplace_back(perm.begin() + start, perm.begin() + end);
  }
  return batches;
}

std::vector<std::pair<LabeledBatch, UnlabeledBatch>> sample_batches(
    const SplitView& labeled, const SplitView& unlabeled, int batch_size_labeled,
    int batch_size_unlabeled, std::uint64_t seed, int epoch) {
  if (labeled.size() < 1 || unlabeled.size() < 1) {
    throw ValidationError("sample_batches: empty split");
  }
  if (batch_size_labeled > labeled.size() || batch_size_unlabeled > unlabeled.size()) {
    throw ValidationError("sample_batches: batch size exceeds split size");
  }
  auto labeled_batches = epoch_batches(labeled.size(), batch_size_labeled, seed,
                                       stream_tag::kOrderSource, epoch);

  // Unlabeled side: independent permutation, re-permuted per cycle if the
  // labeled epoch needs more items.
  std::vector<int> uperm;
  std::size_t upos = 0;
  int cycle = 0;
  auto refill = [&]() {
    uperm.assign(static_cast<std::size_t>(unlabeled.size()), 0);
    for (int i = 0; i < unlabeled.size(); ++i) uperm[static_cast<std::size_t>(i)] = i;
    RngStream rng = derive_stream(seed, {stream_tag::kOrderTarget,
                                         static_cast<std::uint64_t>(epoch),
                                         static_cast<std::uint64_t>(cycle)});
    rng.shuffle(uperm);
    upos = 0;
    ++cycle;
  };
  refill();

  std::vector<std::pair<LabeledBatch, UnlabeledBatch>> out;
  out.reserve(labeled_batches.size());
  for (const auto& lb : labeled_batches) {
    LabeledBatch L;
    for (int idx : lb) {
      L.clips.push_back(labeled.clip(idx));
      L.labels.push_back(labeled.label(idx));
      L.indices.push_back(idx);
    }
    UnlabeledBatch U;
    for (int k = 0; k < batch_size_unlabeled; ++k) {
      if (upos >= uperm.size()) refill();
      int idx = uperm[upos++];
      U.clips.push_back(unlabeled.clip(idx));
      U.indices.push_back(idx);
    }
    out.emplace_back(std::move(L), std::move(U));
  }
  return out;
}

}  // namespace cdfsl
