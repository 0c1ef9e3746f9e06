#include "cahqp/synthdata.hpp"

#include "cahqp/nn.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>

namespace cahqp {

namespace {

thread_local int g_training_depth = 0;
std::atomic<long> g_violations{0};

struct ClassShape {
  double min_w, max_w, min_h, max_h;
  bool disc;
};

// Pixel extents per class; discs use min_w..max_w as the diameter.
constexpr std::array<ClassShape, kNumSceneClasses> kShapes{
    ClassShape{8, 12, 5, 7, false}, ClassShape{16, 22, 8, 11, false}, ClassShape{9, 13, 9, 13, true}};

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

struct PixelRect {
  int x0, y0, w, h;
};

double rect_iou(const PixelRect& a, const PixelRect& b) {
  const int iw = std::min(a.x0 + a.w, b.x0 + b.w) - std::max(a.x0, b.x0);
  const int ih = std::min(a.y0 + a.h, b.y0 + b.h) - std::max(a.y0, b.y0);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = static_cast<double>(iw) * ih;
  return inter / (static_cast<double>(a.w) * a.h + static_cast<double>(b.w) * b.h - inter);
}

void box_blur(ag::Matrix& img, int size, int radius) {
  if (radius <= 0) return;
  ag::Matrix tmp = img;
  const double norm = 1.0 / (2 * radius + 1);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      Eigen::RowVector3d acc = Eigen::RowVector3d::Zero();
      for (int d = -radius; d <= radius; ++d) {
        const int xx = std::clamp(x + d, 0, size - 1);
        acc += img.row(static_cast<Eigen::Index>(y) * size + xx);
      }
      tmp.row(static_cast<Eigen::Index>(y) * size + x) = acc * norm;
    }
  }
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      Eigen::RowVector3d acc = Eigen::RowVector3d::Zero();
      for (int d = -radius; d <= radius; ++d) {
        const int yy = std::clamp(y + d, 0, size - 1);
        acc += tmp.row(static_cast<Eigen::Index>(yy) * size + x);
      }
      img.row(static_cast<Eigen::Index>(y) * size + x) = acc * norm;
    }
  }
}

}  // namespace

const char* scene_class_name(int class_id) {
  switch (class_id) {
    case 0: return "car";
    case 1: return "bus";
    case 2: return "truck";
    default: return "unknown";
  }
}

std::string DomainSpec::validate() const {
  if (!(brightness > 0.0)) return "brightness must be > 0";
  if (!(noise_std >= 0.0)) return "noise_std must be >= 0";
  if (blur_radius < 0) return "blur_radius must be >= 0";
  if (!(object_density >= 0.0)) return "object_density must be >= 0";
  if (!(palette_jitter >= 0.0)) return "palette_jitter must be >= 0";
  return {};
}

SceneSample render_clean_scene(const DomainSpec& spec, std::uint64_t index, const SceneOptions& options) {
  if (auto err = spec.validate(); !err.empty()) throw std::invalid_argument("DomainSpec: " + err);
  const int size = options.image_size;
  Rng rng = make_rng(spec.seed, "scene:" + std::to_string(index));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SceneSample s;
  s.domain_tag = spec.name;
  s.image.resize(static_cast<Eigen::Index>(size) * size, 3);

  // Road-like background: grey base, two low-frequency ripples, fine grain.
  const Rgb base{0.32 + 0.08 * unit(rng), 0.34 + 0.08 * unit(rng), 0.36 + 0.08 * unit(rng)};
  const double fx = 1.0 + 2.0 * unit(rng), fy = 1.0 + 2.0 * unit(rng);
  const double phx = 2.0 * std::numbers::pi * unit(rng), phy = 2.0 * std::numbers::pi * unit(rng);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double ripple = 0.05 * std::sin(2.0 * std::numbers::pi * fx * x / size + phx) +
                            0.05 * std::sin(2.0 * std::numbers::pi * fy * y / size + phy);
      const double grain = 0.03 * (unit(rng) - 0.5);
      for (int c = 0; c < 3; ++c) {
        s.image(static_cast<Eigen::Index>(y) * size + x, c) = clamp01(base[static_cast<size_t>(c)] + ripple + grain);
      }
    }
  }

  std::poisson_distribution<int> count_dist(spec.object_density);
  int count = 0;
  if (spec.object_density > 0.0) {
    do {
      count = count_dist(rng);
    } while (count > options.max_objects);
  }

  std::vector<PixelRect> placed;
  for (int k = 0; k < count; ++k) {
    const int cls = static_cast<int>(unit(rng) * kNumSceneClasses) % kNumSceneClasses;
    const ClassShape& shape = kShapes[static_cast<size_t>(cls)];
    Rgb color = spec.palette[static_cast<size_t>(cls)];
    for (auto& c : color) c = clamp01(c + spec.palette_jitter * (2.0 * unit(rng) - 1.0));
    for (int attempt = 0; attempt < 20; ++attempt) {
      const int w = static_cast<int>(std::lround(shape.min_w + (shape.max_w - shape.min_w) * unit(rng)));
      const int h = shape.disc ? w : static_cast<int>(std::lround(shape.min_h + (shape.max_h - shape.min_h) * unit(rng)));
      const int x0 = static_cast<int>(unit(rng) * (size - w + 1));
      const int y0 = static_cast<int>(unit(rng) * (size - h + 1));
      const PixelRect r{x0, y0, w, h};
      bool clash = false;
      for (const auto& p : placed) clash = clash || rect_iou(r, p) > 0.1;
      if (clash) continue;
      placed.push_back(r);
      const double rad = 0.5 * w;
      const double ccx = x0 + 0.5 * w, ccy = y0 + 0.5 * h;
      for (int y = y0; y < y0 + h; ++y) {
        for (int x = x0; x < x0 + w; ++x) {
          if (shape.disc) {
            const double dx = x + 0.5 - ccx, dy = y + 0.5 - ccy;
            if (dx * dx + dy * dy > rad * rad) continue;
          }
          for (int c = 0; c < 3; ++c) s.image(static_cast<Eigen::Index>(y) * size + x, c) = color[static_cast<size_t>(c)];
        }
      }
      s.annotations.push_back(BoxLabel{cls, Box{(x0 + 0.5 * w) / size, (y0 + 0.5 * h) / size,
                                                static_cast<double>(w) / size, static_cast<double>(h) / size}});
      break;
    }
  }
  return s;
}

SceneSample generate_scene(const DomainSpec& spec, std::uint64_t index, const SceneOptions& options) {
  SceneSample s = render_clean_scene(spec, index, options);
  if (spec.brightness != 1.0) s.image = (s.image * spec.brightness).cwiseMin(1.0);
  box_blur(s.image, options.image_size, spec.blur_radius);
  if (spec.noise_std > 0.0) {
    Rng rng = make_rng(spec.seed, "noise:" + std::to_string(index));
    std::normal_distribution<double> noise(0.0, spec.noise_std);
    for (Eigen::Index i = 0; i < s.image.size(); ++i) s.image.data()[i] = clamp01(s.image.data()[i] + noise(rng));
  }
  return s;
}

// ---- taint tracking ---------------------------------------------------------------

TrainingScope::TrainingScope() { ++g_training_depth; }
TrainingScope::~TrainingScope() { --g_training_depth; }
bool TrainingScope::active() { return g_training_depth > 0; }

GroundTruth::GroundTruth(std::vector<BoxLabel> boxes, bool evaluation_only)
    : boxes_(std::move(boxes)), evaluation_only_(evaluation_only), present_(true) {}

const std::vector<BoxLabel>& GroundTruth::for_training() const {
  if (!present_) throw std::logic_error("ground truth: sample carries no annotations");
  if (evaluation_only_) {
    ++g_violations;
    throw std::logic_error("ground truth: evaluation-only annotations requested for training");
  }
  return boxes_;
}

const std::vector<BoxLabel>& GroundTruth::for_evaluation() const {
  if (!present_) throw std::logic_error("ground truth: sample carries no annotations");
  if (evaluation_only_ && TrainingScope::active()) {
    ++g_violations;
    throw std::logic_error("ground truth: evaluation-only annotations read inside a training scope");
  }
  return boxes_;
}

long GroundTruth::violations() { return g_violations.load(); }

// ---- benchmark --------------------------------------------------------------------

std::string BenchmarkConfig::validate() const {
  if (auto err = source.validate(); !err.empty()) return "source: " + err;
  if (targets.empty()) return "at least one target spec is required";
  for (size_t i = 0; i < targets.size(); ++i) {
    if (auto err = targets[i].validate(); !err.empty()) return "targets[" + std::to_string(i) + "]: " + err;
  }
  if (source_images < 1 || target_images < 2) return "dataset sizes too small";
  if (!(adaptation_fraction > 0.0 && adaptation_fraction < 1.0)) return "adaptation_fraction must lie in (0, 1)";
  return {};
}

DomainDataset make_dataset(const DomainSpec& spec, DomainRole role, std::uint64_t first_index, int count,
                           const SceneOptions& options, const std::string& name) {
  DomainDataset d;
  d.name = name;
  d.role = role;
  d.samples.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::uint64_t index = first_index + static_cast<std::uint64_t>(i);
    SceneSample s = generate_scene(spec, index, options);
    d.samples.push_back(DomainSample{spec.name + "/" + std::to_string(index), std::move(s.image),
                                     GroundTruth(std::move(s.annotations), role == DomainRole::target)});
  }
  return d;
}

Benchmark build_benchmark(const BenchmarkConfig& config) {
  if (auto err = config.validate(); !err.empty()) throw std::invalid_argument("BenchmarkConfig: " + err);
  Benchmark b;
  b.source = make_dataset(config.source, DomainRole::source, 0, config.source_images, config.scene, config.source.name);
  for (const auto& spec : config.targets) {
    const int adapt = static_cast<int>(std::lround(config.adaptation_fraction * config.target_images));
    const int eval = config.target_images - adapt;
    if (adapt < 1 || eval < 1) throw std::invalid_argument("BenchmarkConfig: empty adaptation or evaluation split");
    TargetStream t;
    t.spec = spec;
    t.adaptation = make_dataset(spec, DomainRole::target, 0, adapt, config.scene, spec.name + "/adapt");
    t.evaluation = make_dataset(spec, DomainRole::target, static_cast<std::uint64_t>(adapt), eval, config.scene,
                                spec.name + "/eval");
    // Index ranges [0, adapt) and [adapt, total) cannot overlap; verify ids anyway.
    for (const auto& a : t.adaptation.samples) {
      for (const auto& e : t.evaluation.samples) {
        if (a.id == e.id) throw std::logic_error("build_benchmark: adaptation/evaluation splits overlap");
      }
    }
    b.targets.push_back(std::move(t));
  }
  return b;
}

DomainSpec default_source_spec() {
  DomainSpec s;
  s.name = "source";
  s.seed = 1001;
  return s;
}

std::vector<DomainSpec> default_target_specs() {
  std::vector<DomainSpec> out;
  int i = 0;
  for (double brightness : {0.7, 0.45}) {
    for (double noise : {0.04, 0.1}) {
      for (double density : {2.0, 4.0}) {
        DomainSpec s;
        s.name = "stream" + std::to_string(i + 1);
        s.brightness = brightness;
        s.noise_std = noise;
        s.object_density = density;
        s.blur_radius = brightness < 0.5 ? 1 : 0;
        s.seed = 2001 + static_cast<std::uint64_t>(i);
        out.push_back(s);
        ++i;
      }
    }
  }
  return out;
}

DomainSpec medium_shift_spec() {
  DomainSpec s;
  s.name = "medium";
  s.brightness = 0.55;
  s.noise_std = 0.08;
  s.blur_radius = 1;
  s.object_density = 3.0;
  s.seed = 3001;
  return s;
}

// ---- persistence ------------------------------------------------------------------

void save_dataset(const DomainDataset& dataset, const std::filesystem::path& directory, const std::string& stem,
                  int image_size) {
  std::filesystem::create_directories(directory);
  const auto image_path = directory / (stem + ".images.f32");
  std::ofstream bin(image_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write " + image_path.string());
  nlohmann::json annotations = nlohmann::json::object();
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& s : dataset.samples) {
    if (s.image.rows() != static_cast<Eigen::Index>(image_size) * image_size || s.image.cols() != 3) {
      throw std::invalid_argument("save_dataset: image shape mismatch for " + s.id);
    }
    for (Eigen::Index i = 0; i < s.image.size(); ++i) {
      auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(s.image.data()[i]));
      unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                            static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
      bin.write(reinterpret_cast<const char*>(b), 4);
    }
    ids.push_back(s.id);
    nlohmann::json boxes = nlohmann::json::array();
    if (s.truth.present()) {
      // Writing is an evaluation-side operation; it never runs inside training.
      for (const auto& l : s.truth.for_evaluation()) {
        boxes.push_back({{"class_id", l.class_id}, {"cx", l.box.cx}, {"cy", l.box.cy}, {"w", l.box.w}, {"h", l.box.h}});
      }
    }
    annotations[s.id] = boxes;
  }
  nlohmann::json manifest{{"format", "cahqp-dataset"},
                          {"version", 1},
                          {"name", dataset.name},
                          {"role", dataset.role == DomainRole::source ? "source" : "target"},
                          {"count", dataset.samples.size()},
                          {"height", image_size},
                          {"width", image_size},
                          {"channels", 3},
                          {"dtype", "float32"},
                          {"byte_order", "little"},
                          {"layout", "sample,row,col,channel"},
                          {"images", stem + ".images.f32"},
                          {"annotations", stem + ".annotations.json"},
                          {"sample_ids", ids}};
  std::ofstream(directory / (stem + ".annotations.json")) << annotations.dump(1) << '\n';
  std::ofstream(directory / (stem + ".manifest.json")) << manifest.dump(1) << '\n';
}

DomainDataset load_dataset(const std::filesystem::path& directory, const std::string& stem) {
  std::ifstream mf(directory / (stem + ".manifest.json"));
  if (!mf) throw std::runtime_error("missing manifest for dataset " + stem);
  const nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.value("format", "") != "cahqp-dataset" || manifest.value("dtype", "") != "float32" ||
      manifest.value("byte_order", "") != "little" || manifest.value("channels", 0) != 3) {
    throw std::runtime_error("dataset manifest " + stem + ": unsupported layout");
  }
  const int height = manifest.at("height").get<int>();
  const int width = manifest.at("width").get<int>();
  const auto count = manifest.at("count").get<std::size_t>();
  const auto& ids = manifest.at("sample_ids");
  if (ids.size() != count || height < 1 || width != height) throw std::runtime_error("dataset manifest " + stem + ": inconsistent");
  const std::size_t floats_per_image = static_cast<std::size_t>(height) * width * 3;

  std::ifstream bin(directory / manifest.at("images").get<std::string>(), std::ios::binary);
  if (!bin) throw std::runtime_error("missing image file for dataset " + stem);
  bin.seekg(0, std::ios::end);
  if (static_cast<std::size_t>(bin.tellg()) != count * floats_per_image * 4) {
    throw std::runtime_error("dataset " + stem + ": image file size does not match manifest");
  }
  bin.seekg(0);
  std::ifstream af(directory / manifest.at("annotations").get<std::string>());
  if (!af) throw std::runtime_error("missing annotation file for dataset " + stem);
  const nlohmann::json annotations = nlohmann::json::parse(af);

  DomainDataset d;
  d.name = manifest.value("name", stem);
  d.role = manifest.value("role", "source") == "target" ? DomainRole::target : DomainRole::source;
  for (std::size_t i = 0; i < count; ++i) {
    DomainSample s;
    s.id = ids[i].get<std::string>();
    s.image.resize(static_cast<Eigen::Index>(height) * width, 3);
    for (std::size_t k = 0; k < floats_per_image; ++k) {
      unsigned char b[4];
      bin.read(reinterpret_cast<char*>(b), 4);
      const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
      s.image.data()[k] = std::bit_cast<float>(bits);
    }
    std::vector<BoxLabel> boxes;
    for (const auto& j : annotations.at(s.id)) {
      BoxLabel l{j.at("class_id").get<int>(),
                 Box{j.at("cx").get<double>(), j.at("cy").get<double>(), j.at("w").get<double>(), j.at("h").get<double>()}};
      if (auto err = validate_box_label(l, kNumSceneClasses); !err.empty()) {
        throw std::runtime_error("dataset " + stem + ", sample " + s.id + ": " + err);
      }
      boxes.push_back(l);
    }
    s.truth = GroundTruth(std::move(boxes), d.role == DomainRole::target);
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace cahqp
