#include "cahqp/pipeline.hpp"

#include "cahqp/evaluation.hpp"
#include "cahqp/snapshot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace cahqp {

namespace {

constexpr std::uint64_t kEdgeSeedOffset = 0x5eedULL;

void check_finite(double value, const char* phase, long step) {
  if (!std::isfinite(value)) throw TrainingDiverged(phase, step);
}

int default_steps(int n, int batch) { return (n + batch - 1) / batch; }

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

std::vector<LabeledImage> training_view(const DomainDataset& source) {
  std::vector<LabeledImage> out;
  out.reserve(source.size());
  for (const auto& s : source.samples) {
    if (!s.truth.present()) throw std::invalid_argument("training_view: sample " + s.id + " has no annotations");
    out.push_back(LabeledImage{&s.image, s.truth.for_training()});
  }
  return out;
}

std::vector<std::vector<int>> epoch_batches(int n, int batch, int steps, Rng& rng) {
  if (n < 1 || batch < 1) throw std::invalid_argument("epoch_batches: empty dataset or batch");
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int>> out(static_cast<size_t>(steps));
  long k = 0;
  for (auto& b : out) {
    b.resize(static_cast<size_t>(batch));
    for (auto& idx : b) idx = order[static_cast<size_t>(k++ % n)];
  }
  return out;
}

TrainingLog train_supervised(Detector& detector, std::span<const LabeledImage> data, const OptimConfig& optim,
                             const MatchCostWeights& matching, const DetectionLossWeights& loss, std::uint64_t seed,
                             int steps_per_epoch) {
  TrainingLog log;
  if (data.empty() || optim.epochs == 0) return log;
  const int n = static_cast<int>(data.size());
  const int steps = steps_per_epoch > 0 ? steps_per_epoch : default_steps(n, optim.batch_size);
  AdamW opt({AdamW::Group{detector.parameters(), optim.lr, optim.weight_decay}});
  Rng rng = make_rng(seed, "batches:source");
  const double inv_batch = 1.0 / optim.batch_size;
  for (int epoch = 0; epoch < optim.epochs; ++epoch) {
    for (const auto& batch : epoch_batches(n, optim.batch_size, steps, rng)) {
      opt.zero_grad();
      double total = 0.0;
      for (int i : batch) {
        const auto& sample = data[static_cast<size_t>(i)];
        const ForwardPass pass = detector.forward(*sample.image);
        const Assignment a = hungarian_match(pass.detections.values(), sample.labels, matching);
        const DetectionLoss l = detection_loss(pass.detections, sample.labels, a, loss);
        total += l.total.item();
        ag::backward(ag::scale(l.total, inv_batch));
      }
      check_finite(total, "train_supervised", log.steps);
      if (optim.grad_clip > 0.0) opt.clip_grad_norm(optim.grad_clip);
      opt.step();
      log.step_losses.push_back(total * inv_batch);
      ++log.steps;
    }
  }
  return log;
}

// ---- cloud state ------------------------------------------------------------------

ParameterList CloudModelState::parameters() const {
  ParameterList out = detector.all_parameters();
  for (auto& p : vpg.state()) out.push_back(std::move(p));
  for (auto& p : discriminators.parameters()) out.push_back(std::move(p));
  return out;
}

CloudModelState make_cloud_state(const ExperimentConfig& config, Detector pretrained, std::uint64_t seed) {
  CloudModelState s;
  s.detector = std::move(pretrained);
  const auto& mc = s.detector.config();
  s.vpg = PromptGenerator::create(config.vpg, mc.backbone_channels.back(), mc.d_model, seed);
  s.discriminators = DiscriminatorSet::create(mc.d_model, config.adaptation.discriminator_hidden, seed);
  s.config_hash = config_hash(config);
  return s;
}

CloudModelState clone(const CloudModelState& state) {
  CloudModelState c;
  c.detector = clone(state.detector);
  c.vpg = clone(state.vpg);
  c.discriminators = clone(state.discriminators);
  c.cycle = state.cycle;
  c.config_hash = state.config_hash;
  // Optimizer moments are not carried over: the copy starts a fresh optimizer.
  return c;
}

ComponentFlags effective_flags(const ExperimentConfig& config) {
  const auto& w = config.adversarial;
  ComponentFlags f = config.components;
  f.dqfa = f.dqfa && (w.dqfa_encoder > 0.0 || w.dqfa_decoder > 0.0);
  f.tiafa = f.tiafa && (w.tiafa_encoder > 0.0 || w.tiafa_decoder > 0.0);
  return f;
}

ForwardPass cloud_forward(const CloudModelState& state, const ComponentFlags& flags, const ag::Matrix& image) {
  FeatureMap features = state.detector.backbone_forward(image);
  ForwardExtras extras;
  extras.domain_query = flags.dqfa;
  if (flags.vpg) extras.prompt = state.vpg.prompt_tokens(features);
  return state.detector.forward_features(std::move(features), extras);
}

namespace {

std::shared_ptr<AdamW> make_adaptation_optimizer(CloudModelState& state, const ComponentFlags& flags,
                                                 const AdaptationConfig& a) {
  std::vector<AdamW::Group> groups;
  groups.push_back({state.detector.parameters(), a.lr_detector, a.weight_decay});
  if (flags.dqfa) groups.push_back({state.detector.domain_query_parameters(), a.lr_detector, a.weight_decay});
  if (flags.vpg) groups.push_back({state.vpg.parameters(), a.lr_vpg, a.weight_decay});
  if (flags.dqfa || flags.tiafa) groups.push_back({state.discriminators.parameters(), a.lr_discriminator, a.weight_decay});
  return std::make_shared<AdamW>(std::move(groups));
}

// Target images carry no labels: the current model's own tau-filtered
// predictions act as annotations and are matched back onto the queries.
Assignment target_foreground(const DetectionSet& detections, double tau, const MatchCostWeights& matching) {
  const std::vector<BoxLabel> pseudo = filter_pseudo_labels(detections, tau);
  return hungarian_match(detections, pseudo, matching);
}

ag::Var adversarial_terms(const ForwardPass& pass, const Assignment& foreground, DomainLabel label,
                          const CloudModelState& state, const ComponentFlags& flags, const AdvLossWeights& w,
                          double grl) {
  AdversarialParts parts;
  if (flags.dqfa) {
    parts.dqfa = dqfa_loss(pass.encoder_domain_token(), pass.decoder_domain_token(), label, state.discriminators, w, grl);
  }
  if (flags.tiafa) {
    const ag::Var queries = pass.object_query_outputs();
    const ag::Var memory = pass.memory_image_tokens();
    ag::Var enc;
    if (!foreground.empty()) {
      const auto matched = foreground.matched_queries();
      ag::Matrix q(static_cast<Eigen::Index>(matched.size()), queries.cols());
      for (size_t i = 0; i < matched.size(); ++i) q.row(static_cast<Eigen::Index>(i)) = queries.value().row(matched[i]);
      if (auto mask = compute_soft_mask(memory.value(), q)) {
        enc = tiafa_encoder_loss(memory, *mask, label, state.discriminators.encoder_instance, grl);
      }
    }
    const auto weights = decoder_foreground_weights(foreground, static_cast<int>(queries.rows()));
    const ag::Var dec = foreground.empty()
                            ? ag::Var()
                            : tiafa_decoder_loss(queries, weights, label, state.discriminators.decoder_instance, grl);
    parts.tiafa = weighted_tiafa(enc, dec, w);
  }
  return total_adversarial_loss(parts);
}

}  // namespace

PairObjective adaptation_pair_objective(const CloudModelState& state, const ComponentFlags& flags,
                                        const ExperimentConfig& config, const LabeledImage& source,
                                        const ag::Matrix& target_image, double grl) {
  const bool adversarial = flags.dqfa || flags.tiafa;
  PairObjective out;
  const ForwardPass sp = cloud_forward(state, flags, *source.image);
  const Assignment match = hungarian_match(sp.detections.values(), source.labels, config.matching);
  const DetectionLoss det = detection_loss(sp.detections, source.labels, match, config.loss);
  out.source = det.total;
  out.detection = det.total.item();
  if (!adversarial) return out;
  const ag::Var adv_src = adversarial_terms(sp, match, DomainLabel::source, state, flags, config.adversarial, grl);
  out.source = ag::add(out.source, adv_src);

  const ForwardPass tp = cloud_forward(state, flags, target_image);
  const Assignment fg = target_foreground(tp.detections.values(), config.adversarial.tau, config.matching);
  out.target = adversarial_terms(tp, fg, DomainLabel::target, state, flags, config.adversarial, grl);
  out.adversarial = adv_src.item() + out.target.item();
  return out;
}

AdaptationLog adapt_cloud_model(const DomainDataset& source, const DomainDataset& target, CloudModelState& state,
                                const ExperimentConfig& config, std::uint64_t seed) {
  if (source.empty()) throw std::invalid_argument("adapt_cloud_model: empty source dataset");
  if (target.empty()) throw std::invalid_argument("adapt_cloud_model: empty target dataset");
  const TrainingScope scope;
  const ComponentFlags flags = effective_flags(config);
  const auto& a = config.adaptation;
  AdaptationLog log;
  ++state.cycle;
  if (a.epochs == 0) return log;

  if (!state.optimizer || !(state.optimizer_flags == flags)) {
    state.optimizer = make_adaptation_optimizer(state, flags, a);
    state.optimizer_flags = flags;
  }
  AdamW& opt = *state.optimizer;

  const auto src = training_view(source);
  const int n_src = static_cast<int>(src.size());
  const int n_tgt = static_cast<int>(target.size());
  const int steps = default_steps(std::max(n_src, n_tgt), a.batch_size);
  const long total_steps = static_cast<long>(steps) * a.epochs;
  Rng src_rng = make_rng(seed, "batches:source");
  Rng tgt_rng = make_rng(seed, "batches:target");
  const double inv_batch = 1.0 / a.batch_size;

  long step = 0;
  for (int epoch = 0; epoch < a.epochs; ++epoch) {
    const auto src_batches = epoch_batches(n_src, a.batch_size, steps, src_rng);
    const auto tgt_batches = epoch_batches(n_tgt, a.batch_size, steps, tgt_rng);
    for (int b = 0; b < steps; ++b, ++step) {
      const double grl = grl_schedule(step, total_steps, config.adversarial.grl_lambda, a.grl_warmup_fraction);
      opt.zero_grad();
      double det_total = 0.0;
      double adv_total = 0.0;
      for (int j = 0; j < a.batch_size; ++j) {
        const auto& s = src[static_cast<size_t>(src_batches[static_cast<size_t>(b)][static_cast<size_t>(j)])];
        const auto& t = target.samples[static_cast<size_t>(tgt_batches[static_cast<size_t>(b)][static_cast<size_t>(j)])];
        const PairObjective obj = adaptation_pair_objective(state, flags, config, s, t.image, grl);
        det_total += obj.detection;
        adv_total += obj.adversarial;
        ag::backward(ag::scale(obj.source, inv_batch));
        if (obj.target.defined()) ag::backward(ag::scale(obj.target, inv_batch));
      }
      check_finite(det_total + adv_total, "adapt_cloud_model", step);
      if (a.grad_clip > 0.0) opt.clip_grad_norm(a.grad_clip);
      opt.step();
      if (flags.vpg) state.vpg.ema_update();
      log.detection_loss.push_back(det_total * inv_batch);
      log.adversarial_loss.push_back(adv_total * inv_batch);
      ++log.steps;
    }
  }
  return log;
}

std::vector<PseudoLabeledImage> generate_pseudo_labels(const CloudModelState& state, const DomainDataset& target,
                                                       double tau, const ComponentFlags& flags) {
  const ag::NoGradGuard no_grad;
  std::vector<PseudoLabeledImage> out;
  out.reserve(target.size());
  for (const auto& s : target.samples) {
    const ForwardPass pass = cloud_forward(state, flags, s.image);
    out.push_back(PseudoLabeledImage{s.id, filter_scored_pseudo_labels(pass.detections.values(), tau)});
  }
  return out;
}

TrainingLog retrain_edge_model(Detector& edge, const DomainDataset& target,
                               std::span<const PseudoLabeledImage> pseudo_labels, const ExperimentConfig& config,
                               std::uint64_t seed) {
  if (pseudo_labels.size() != target.size()) {
    throw std::invalid_argument("retrain_edge_model: pseudo-labels do not align with the target set");
  }
  const TrainingScope scope;
  std::vector<LabeledImage> data;
  long boxes = 0;
  for (size_t i = 0; i < target.size(); ++i) {
    if (pseudo_labels[i].sample_id != target.samples[i].id) {
      throw std::invalid_argument("retrain_edge_model: sample id mismatch at " + pseudo_labels[i].sample_id);
    }
    LabeledImage li{&target.samples[i].image, {}};
    for (const auto& l : pseudo_labels[i].labels) li.labels.push_back(l.label);
    boxes += static_cast<long>(li.labels.size());
    data.push_back(std::move(li));
  }
  if (boxes == 0) {
    std::fprintf(stderr, "retrain_edge_model: no pseudo-labels above threshold; edge model left unchanged\n");
    return {};
  }
  return train_supervised(edge, data, config.edge_retrain, config.matching, config.loss, seed ^ kEdgeSeedOffset);
}

// ---- evaluation -------------------------------------------------------------------

std::vector<std::vector<ScoredBox>> predict(const Detector& detector, const DomainDataset& data) {
  const ag::NoGradGuard no_grad;
  std::vector<std::vector<ScoredBox>> out;
  out.reserve(data.size());
  for (const auto& s : data.samples) out.push_back(scored_detections(detector.forward(s.image).detections.values()));
  return out;
}

std::vector<std::vector<BoxLabel>> evaluation_truth(const DomainDataset& data) {
  std::vector<std::vector<BoxLabel>> out;
  out.reserve(data.size());
  for (const auto& s : data.samples) out.push_back(s.truth.for_evaluation());
  return out;
}

double evaluate_detector(const Detector& detector, const DomainDataset& data, double iou_threshold) {
  const auto preds = predict(detector, data);
  const auto truth = evaluation_truth(data);
  return evaluate_map(preds, truth, detector.config().num_classes, iou_threshold);
}

double pseudo_label_map(std::span<const PseudoLabeledImage> labels, const DomainDataset& target, double iou_threshold) {
  if (labels.size() != target.size()) throw std::invalid_argument("pseudo_label_map: size mismatch");
  std::vector<std::vector<ScoredBox>> preds;
  preds.reserve(labels.size());
  for (const auto& l : labels) preds.push_back(l.labels);
  return evaluate_map(preds, evaluation_truth(target), kNumSceneClasses, iou_threshold);
}

// ---- pretraining ------------------------------------------------------------------

namespace {

std::string pretrain_key(const char* role, const DetectorConfig& model, const OptimConfig& optim,
                         const ExperimentConfig& config, std::uint64_t seed) {
  std::ostringstream k;
  k << std::setprecision(17) << role << '|' << model_config_hash(model) << '|' << optim.epochs << ',' << optim.batch_size
    << ',' << optim.lr << ',' << optim.weight_decay << ',' << optim.grad_clip << '|';
  const auto& b = config.benchmark;
  const auto& s = b.source;
  k << s.name << ',' << s.brightness << ',' << s.noise_std << ',' << s.blur_radius << ',' << s.object_density << ','
    << s.palette_jitter << ',' << s.seed << ',';
  for (const auto& rgb : s.palette) k << rgb[0] << ',' << rgb[1] << ',' << rgb[2] << ',';
  k << b.source_images << ',' << b.scene.image_size << ',' << b.scene.max_objects << '|';
  k << config.matching.cls << ',' << config.matching.box_l1 << ',' << config.matching.giou << '|' << config.loss.cls
    << ',' << config.loss.box_l1 << ',' << config.loss.giou << ',' << config.loss.background << '|' << seed;
  return k.str();
}

Detector pretrain(const char* role, const DetectorConfig& model, const OptimConfig& optim,
                  const ExperimentConfig& config, const DomainDataset& source, std::uint64_t seed) {
  const std::string key = pretrain_key(role, model, optim, config, seed);
  const std::uint64_t hash = fnv1a(key);
  Detector d = Detector::create(model, seed);
  std::filesystem::path cached;
  if (!config.cache_dir.empty()) {
    cached = std::filesystem::path(config.cache_dir) / (std::string(role) + "-" + hex16(hash) + ".snp");
    if (std::filesystem::exists(cached)) {
      load_snapshot(cached, d.all_parameters(), hash);
      return d;
    }
  }
  const auto data = training_view(source);
  {
    const TrainingScope scope;
    train_supervised(d, data, optim, config.matching, config.loss, seed);
  }
  // Snapshots hold float32; round now so cached and fresh runs agree exactly.
  quantize_to_float(d.all_parameters());
  if (!cached.empty()) save_snapshot(cached, d.all_parameters(), hash, {{"role", role}, {"seed", std::to_string(seed)}});
  return d;
}

}  // namespace

Detector pretrain_cloud_model(const ExperimentConfig& config, const DomainDataset& source, std::uint64_t seed) {
  return pretrain("cloud", config.cloud_model, config.cloud_pretrain, config, source, seed);
}

Detector pretrain_edge_model(const ExperimentConfig& config, const DomainDataset& source, std::uint64_t seed) {
  return pretrain("edge", config.edge_model, config.edge_pretrain, config, source, seed ^ kEdgeSeedOffset);
}

// ---- collaboration cycle -------------------------------------------------------

std::vector<CycleReport> run_collaboration_cycle(const CycleInputs& inputs, const ExperimentConfig& config,
                                                 std::uint64_t seed, const std::filesystem::path& snapshot_dir) {
  if (!inputs.source || !inputs.cloud_pretrained || !inputs.edge_pretrained) {
    throw std::invalid_argument("run_collaboration_cycle: missing source data or pretrained models");
  }
  if (inputs.streams.empty()) throw std::invalid_argument("run_collaboration_cycle: at least one cycle is required");
  const ComponentFlags flags = effective_flags(config);
  CloudModelState cloud = make_cloud_state(config, clone(*inputs.cloud_pretrained), seed);
  Detector edge = clone(*inputs.edge_pretrained);

  std::vector<CycleReport> reports;
  for (const auto& stream : inputs.streams) {
    const std::uint64_t cycle_seed = seed * 1000003ULL + static_cast<std::uint64_t>(cloud.cycle);
    const AdaptationLog alog = adapt_cloud_model(*inputs.source, stream.adaptation, cloud, config, cycle_seed);
    const auto labels = generate_pseudo_labels(cloud, stream.adaptation, config.adversarial.tau, flags);
    retrain_edge_model(edge, stream.adaptation, labels, config, cycle_seed);

    CycleReport r;
    r.cycle = cloud.cycle;
    r.stream = stream.spec.name;
    r.seed = seed;
    r.flags = flags;
    r.pseudo_label_map = pseudo_label_map(labels, stream.adaptation, config.iou_threshold);
    r.edge_map = evaluate_detector(edge, stream.evaluation, config.iou_threshold);
    for (const auto& l : labels) r.pseudo_label_count += static_cast<long>(l.labels.size());
    if (!alog.detection_loss.empty()) r.final_detection_loss = alog.detection_loss.back();
    if (!alog.adversarial_loss.empty()) r.final_adversarial_loss = alog.adversarial_loss.back();
    reports.push_back(r);

    if (!snapshot_dir.empty()) {
      const std::string suffix = "-seed" + std::to_string(seed) + "-cycle" + std::to_string(r.cycle) + ".snp";
      save_snapshot(snapshot_dir / ("cloud" + suffix), cloud.parameters(), cloud.config_hash,
                    {{"cycle", std::to_string(r.cycle)},
                     {"stream", r.stream},
                     {"vpg.bank.beta", std::to_string(cloud.vpg.bank().beta)}});
      save_snapshot(snapshot_dir / ("edge" + suffix), edge.all_parameters(), cloud.config_hash,
                    {{"cycle", std::to_string(r.cycle)}, {"stream", r.stream}});
    }
  }
  return reports;
}

}  // namespace cahqp
