#pragma once

// Experiment configuration: every tunable of the detector, prompt generator,
// alignment losses, optimizers and benchmark, with JSON (de)serialization.

#include "cahqp/alignment.hpp"
#include "cahqp/detector.hpp"
#include "cahqp/matching.hpp"
#include "cahqp/synthdata.hpp"
#include "cahqp/vpg.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace cahqp {

struct ComponentFlags {
  bool dqfa = true;
  bool tiafa = true;
  bool vpg = true;

  bool any() const { return dqfa || tiafa || vpg; }
  std::string label() const;
  bool operator==(const ComponentFlags&) const = default;
};

struct OptimConfig {
  int epochs = 10;
  int batch_size = 8;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;  // <= 0 disables clipping
};

struct AdaptationConfig {
  int epochs = 10;
  int batch_size = 8;
  double lr_detector = 1e-4;
  double lr_vpg = 1e-3;
  double lr_discriminator = 1e-3;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;
  double grl_warmup_fraction = 0.2;
  int discriminator_hidden = 64;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string output_dir = "runs";
  std::string cache_dir;  // pretrained-model cache; empty disables caching

  ComponentFlags components;
  DetectorConfig cloud_model;
  DetectorConfig edge_model;
  VpgConfig vpg;
  AdvLossWeights adversarial;
  MatchCostWeights matching;
  DetectionLossWeights loss;

  OptimConfig cloud_pretrain;
  AdaptationConfig adaptation;
  OptimConfig edge_pretrain;
  OptimConfig edge_retrain;

  BenchmarkConfig benchmark;
  double iou_threshold = 0.5;

  ExperimentConfig();
};

// Raised for invalid configuration; field() names the offending key path.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// Checks cross-field invariants; throws ConfigError.
void validate(const ExperimentConfig& config);

ExperimentConfig parse_config_text(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string to_json_text(const ExperimentConfig& config);
std::uint64_t config_hash(const ExperimentConfig& config);
// Digest of one model configuration, recorded in snapshot manifests.
std::uint64_t model_config_hash(const DetectorConfig& config);

// Named flag combinations of the ablation table, in table order.
std::vector<ComponentFlags> ablation_rows();

}  // namespace cahqp
