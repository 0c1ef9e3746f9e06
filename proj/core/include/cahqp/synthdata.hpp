#pragma once

// Deterministic synthetic traffic scenes with parametric domain shift.

#include "cahqp/autograd.hpp"
#include "cahqp/boxes.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cahqp {

inline constexpr int kNumSceneClasses = 3;  // car, bus, truck analogues
const char* scene_class_name(int class_id);

using Rgb = std::array<double, 3>;

struct DomainSpec {
  std::string name = "source";
  double brightness = 1.0;
  double noise_std = 0.0;
  int blur_radius = 0;
  double object_density = 3.0;
  std::array<Rgb, kNumSceneClasses> palette{Rgb{0.85, 0.15, 0.15}, Rgb{0.9, 0.8, 0.15}, Rgb{0.15, 0.3, 0.9}};
  double palette_jitter = 0.08;
  std::uint64_t seed = 1;

  std::string validate() const;
};

struct SceneSample {
  ag::Matrix image;  // [size*size x 3], row-major pixels, entries in [0, 1]
  std::vector<BoxLabel> annotations;
  std::string domain_tag;
};

struct SceneOptions {
  int image_size = 64;
  int max_objects = 8;  // rejection bound on the Poisson count
};

SceneSample generate_scene(const DomainSpec& spec, std::uint64_t index, const SceneOptions& options = {});
// The same scene before brightness, blur and noise are applied.
SceneSample render_clean_scene(const DomainSpec& spec, std::uint64_t index, const SceneOptions& options = {});

// While a TrainingScope is alive on this thread, reading evaluation-only truth throws.
class TrainingScope {
 public:
  TrainingScope();
  ~TrainingScope();
  TrainingScope(const TrainingScope&) = delete;
  TrainingScope& operator=(const TrainingScope&) = delete;
  static bool active();
};

// Annotations carrying a taint flag. Evaluation-only truth (target domain) is
// refused inside a TrainingScope and every such attempt is counted.
class GroundTruth {
 public:
  GroundTruth() = default;
  GroundTruth(std::vector<BoxLabel> boxes, bool evaluation_only);

  const std::vector<BoxLabel>& for_training() const;
  const std::vector<BoxLabel>& for_evaluation() const;
  bool evaluation_only() const { return evaluation_only_; }
  bool present() const { return present_; }

  static long violations();

 private:
  std::vector<BoxLabel> boxes_;
  bool evaluation_only_ = false;
  bool present_ = false;
};

enum class DomainRole { source, target };

struct DomainSample {
  std::string id;
  ag::Matrix image;
  GroundTruth truth;
};

struct DomainDataset {
  std::string name;
  DomainRole role = DomainRole::source;
  std::vector<DomainSample> samples;

  bool empty() const { return samples.empty(); }
  std::size_t size() const { return samples.size(); }
};

struct TargetStream {
  DomainSpec spec;
  DomainDataset adaptation;
  DomainDataset evaluation;
};

struct BenchmarkConfig {
  DomainSpec source;
  int source_images = 400;
  std::vector<DomainSpec> targets;
  int target_images = 200;
  double adaptation_fraction = 0.5;
  SceneOptions scene;

  std::string validate() const;
};

struct Benchmark {
  DomainDataset source;
  std::vector<TargetStream> targets;
};

DomainDataset make_dataset(const DomainSpec& spec, DomainRole role, std::uint64_t first_index, int count,
                           const SceneOptions& options, const std::string& name);
Benchmark build_benchmark(const BenchmarkConfig& config);

// Clean bright source domain.
DomainSpec default_source_spec();
// Eight targets: 2 brightness levels x 2 noise levels x 2 densities.
std::vector<DomainSpec> default_target_specs();
// The single mid-severity target used for headline comparisons.
DomainSpec medium_shift_spec();

// On-disk layout: <stem>.images.f32 (little-endian float32, sample-major,
// row-major pixels, RGB interleaved), <stem>.annotations.json and <stem>.manifest.json.
void save_dataset(const DomainDataset& dataset, const std::filesystem::path& directory, const std::string& stem,
                  int image_size);
DomainDataset load_dataset(const std::filesystem::path& directory, const std::string& stem);

}  // namespace cahqp
