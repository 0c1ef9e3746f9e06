#pragma once

// Cloud model adaptation, pseudo-label generation, edge retraining and the
// repeating cloud-edge cycle.

#include "cahqp/alignment.hpp"
#include "cahqp/config.hpp"
#include "cahqp/detector.hpp"
#include "cahqp/synthdata.hpp"
#include "cahqp/vpg.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cahqp {

// Raised when a loss becomes non-finite; carries the offending step.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& phase, long step)
      : std::runtime_error(phase + ": non-finite loss at step " + std::to_string(step)), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

struct LabeledImage {
  const ag::Matrix* image = nullptr;
  std::vector<BoxLabel> labels;
};

// Source-domain images with their (training-visible) annotations.
std::vector<LabeledImage> training_view(const DomainDataset& source);

// Index batches for one epoch: ceil(n / batch) batches of exactly `batch`
// indices drawn cyclically from a shuffled permutation.
std::vector<std::vector<int>> epoch_batches(int n, int batch, int steps, Rng& rng);

struct TrainingLog {
  std::vector<double> step_losses;
  long steps = 0;
};

// Supervised set-prediction training with AdamW; one step per batch, each
// image's loss back-propagated separately with weight 1/batch. steps_per_epoch
// of 0 means ceil(n / batch). Records the mean batch loss of every step.
TrainingLog train_supervised(Detector& detector, std::span<const LabeledImage> data, const OptimConfig& optim,
                             const MatchCostWeights& matching, const DetectionLossWeights& loss, std::uint64_t seed,
                             int steps_per_epoch = 0);

struct CloudModelState {
  Detector detector;
  PromptGenerator vpg;
  DiscriminatorSet discriminators;
  std::shared_ptr<AdamW> optimizer;  // created lazily on first adaptation
  ComponentFlags optimizer_flags;
  int cycle = 0;
  std::uint64_t config_hash = 0;

  // Detector + VPG state + discriminators (+ domain queries), for hashing and snapshots.
  ParameterList parameters() const;
};

CloudModelState make_cloud_state(const ExperimentConfig& config, Detector pretrained, std::uint64_t seed);
CloudModelState clone(const CloudModelState& state);

// Components actually switched on: a flag with all its lambdas at zero is off.
ComponentFlags effective_flags(const ExperimentConfig& config);

// Cloud forward pass with the extra tokens the active components inject:
// VPG prompt tokens and encoder/decoder domain queries.
ForwardPass cloud_forward(const CloudModelState& state, const ComponentFlags& flags, const ag::Matrix& image);

struct AdaptationLog {
  std::vector<double> detection_loss;    // per step
  std::vector<double> adversarial_loss;  // per step
  long steps = 0;
};

// The adaptation objective of one source/target image pair, split by the
// domain each part is computed on: source = L_det + L_adv(source), target =
// L_adv(target). The target's foreground queries come from the model's own
// tau-filtered predictions matched back onto the queries. Without DQFA and
// TIAFA the target part is undefined.
struct PairObjective {
  ag::Var source;
  ag::Var target;
  double detection = 0.0;
  double adversarial = 0.0;
};
PairObjective adaptation_pair_objective(const CloudModelState& state, const ComponentFlags& flags,
                                        const ExperimentConfig& config, const LabeledImage& source,
                                        const ag::Matrix& target_image, double grl);

// One adaptation round: joint source/target batches, L_det on source, adversarial
// losses on both domains, optimizer step, then EMA of the prompt bank. The
// cycle index advances by one.
AdaptationLog adapt_cloud_model(const DomainDataset& source, const DomainDataset& target, CloudModelState& state,
                                const ExperimentConfig& config, std::uint64_t seed);

struct PseudoLabeledImage {
  std::string sample_id;
  std::vector<ScoredBox> labels;
};

// Filtered predictions per target image; no parameter is modified.
std::vector<PseudoLabeledImage> generate_pseudo_labels(const CloudModelState& state, const DomainDataset& target,
                                                       double tau, const ComponentFlags& flags);

// Supervised retraining of the edge detector on pseudo-labels. An empty label
// set leaves the model unchanged.
TrainingLog retrain_edge_model(Detector& edge, const DomainDataset& target,
                               std::span<const PseudoLabeledImage> pseudo_labels, const ExperimentConfig& config,
                               std::uint64_t seed);

// Every query's best foreground class and score, per image (no thresholding).
std::vector<std::vector<ScoredBox>> predict(const Detector& detector, const DomainDataset& data);
// Evaluation-side truth of every sample; must not be called while training.
std::vector<std::vector<BoxLabel>> evaluation_truth(const DomainDataset& data);
// mAP of a plain detector on a dataset.
double evaluate_detector(const Detector& detector, const DomainDataset& data, double iou_threshold = 0.5);
// mAP of filtered pseudo-labels (scored by confidence) against the dataset's truth.
double pseudo_label_map(std::span<const PseudoLabeledImage> labels, const DomainDataset& target,
                        double iou_threshold = 0.5);

struct CycleReport {
  int cycle = 0;
  std::string stream;
  std::uint64_t seed = 0;
  ComponentFlags flags;
  double pseudo_label_map = 0.0;
  double edge_map = 0.0;
  long pseudo_label_count = 0;
  double final_detection_loss = 0.0;
  double final_adversarial_loss = 0.0;

  bool operator==(const CycleReport&) const = default;
};

// Source-pretrained cloud and edge models, optionally cached on disk.
Detector pretrain_cloud_model(const ExperimentConfig& config, const DomainDataset& source, std::uint64_t seed);
Detector pretrain_edge_model(const ExperimentConfig& config, const DomainDataset& source, std::uint64_t seed);

struct CycleInputs {
  const DomainDataset* source = nullptr;
  std::span<const TargetStream> streams;
  const Detector* cloud_pretrained = nullptr;
  const Detector* edge_pretrained = nullptr;
};

// Per stream: adapt -> pseudo-label -> retrain edge -> evaluate. The cloud and
// edge states carry over from one stream to the next.
std::vector<CycleReport> run_collaboration_cycle(const CycleInputs& inputs, const ExperimentConfig& config,
                                                 std::uint64_t seed, const std::filesystem::path& snapshot_dir = {});

}  // namespace cahqp
