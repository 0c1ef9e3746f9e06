#include "cahqp/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cahqp {

std::string AdvLossWeights::validate() const {
  for (double l : {dqfa_encoder, dqfa_decoder, tiafa_encoder, tiafa_decoder}) {
    if (!(l >= 0.0) || !std::isfinite(l)) return "adversarial loss weights must be finite and non-negative";
  }
  if (!(tau > 0.0 && tau < 1.0)) return "tau must lie in (0, 1)";
  if (!(grl_lambda >= 0.0) || !std::isfinite(grl_lambda)) return "grl_lambda must be finite and non-negative";
  return {};
}

Discriminator Discriminator::create(int width, int hidden, Rng& rng) {
  return Discriminator{FeedForward::create(width, hidden, 1, rng)};
}

DiscriminatorSet DiscriminatorSet::create(int width, int hidden, std::uint64_t seed) {
  Rng rng = make_rng(seed, "discriminators");
  DiscriminatorSet d;
  d.encoder_global = Discriminator::create(width, hidden, rng);
  d.decoder_global = Discriminator::create(width, hidden, rng);
  d.encoder_instance = Discriminator::create(width, hidden, rng);
  d.decoder_instance = Discriminator::create(width, hidden, rng);
  return d;
}

ParameterList DiscriminatorSet::parameters() const {
  ParameterList out;
  encoder_global.collect("disc.encoder_global", out);
  decoder_global.collect("disc.decoder_global", out);
  encoder_instance.collect("disc.encoder_instance", out);
  decoder_instance.collect("disc.decoder_instance", out);
  return out;
}

DiscriminatorSet clone(const DiscriminatorSet& d) {
  DiscriminatorSet copy = DiscriminatorSet::create(d.encoder_global.mlp.hidden.in_features(),
                                                   d.encoder_global.mlp.hidden.out_features(), 0);
  copy_parameter_values(d.parameters(), copy.parameters());
  return copy;
}

ag::Var domain_bce(const ag::Var& prob, DomainLabel label) {
  return ag::binary_cross_entropy(prob, label_value(label), 1e-7);
}

double domain_bce(double prob, DomainLabel label) {
  const double p = std::clamp(prob, 1e-7, 1.0 - 1e-7);
  const double t = label_value(label);
  return -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
}

ag::Var dqfa_loss(const ag::Var& enc_domain_token, const ag::Var& dec_domain_token, DomainLabel label,
                  const DiscriminatorSet& discriminators, const AdvLossWeights& w, double grl_strength) {
  if (!enc_domain_token.defined() || !dec_domain_token.defined()) {
    throw std::invalid_argument("dqfa_loss: missing domain-query token");
  }
  const ag::Var enc = domain_bce(discriminators.encoder_global(ag::gradient_reversal(enc_domain_token, grl_strength)), label);
  const ag::Var dec = domain_bce(discriminators.decoder_global(ag::gradient_reversal(dec_domain_token, grl_strength)), label);
  return ag::add(ag::scale(enc, w.dqfa_encoder), ag::scale(dec, w.dqfa_decoder));
}

std::optional<SoftMask> compute_soft_mask(const ag::Matrix& memory_image_tokens, const ag::Matrix& matched_queries) {
  if (matched_queries.rows() == 0) return std::nullopt;
  if (matched_queries.cols() != memory_image_tokens.cols()) throw std::invalid_argument("soft mask: width mismatch");
  const Eigen::VectorXd qn = matched_queries.rowwise().norm();
  if ((qn.array() <= 0.0).any()) return std::nullopt;
  ag::Matrix q = matched_queries;
  for (Eigen::Index i = 0; i < q.rows(); ++i) q.row(i) /= qn(i);
  ag::Matrix z = memory_image_tokens;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double n = z.row(i).norm();
    if (n > 0.0) z.row(i) /= n;
  }
  const Eigen::VectorXd raw = (z * q.transpose()).rowwise().mean();
  SoftMask mask;
  mask.psi = raw.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return mask;
}

ag::Var tiafa_encoder_loss(const ag::Var& memory_image_tokens, const SoftMask& mask, DomainLabel label,
                           const Discriminator& discriminator, double grl_strength) {
  if (mask.size() != memory_image_tokens.rows()) throw std::invalid_argument("tiafa_encoder_loss: mask length mismatch");
  const ag::Var masked = ag::mul_col(ag::gradient_reversal(memory_image_tokens, grl_strength), ag::Var(mask.psi));
  return domain_bce(discriminator(masked), label);
}

std::vector<double> decoder_foreground_weights(const Assignment& assignment, int n_queries) {
  std::vector<double> w(static_cast<size_t>(n_queries), 0.0);
  for (auto [q, t] : assignment.pairs) {
    if (q < 0 || q >= n_queries) throw std::out_of_range("decoder_foreground_weights: query index");
    w[static_cast<size_t>(q)] = 1.0;
  }
  return w;
}

ag::Var tiafa_decoder_loss(const ag::Var& decoded_queries, std::span<const double> weights, DomainLabel label,
                           const Discriminator& discriminator, double grl_strength) {
  if (static_cast<Eigen::Index>(weights.size()) != decoded_queries.rows()) {
    throw std::invalid_argument("tiafa_decoder_loss: weight length mismatch");
  }
  std::vector<int> selected;
  for (size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] != 0.0) selected.push_back(static_cast<int>(i));
  }
  if (selected.empty()) return ag::Var::scalar(0.0);
  const ag::Var q = ag::gather_rows(ag::gradient_reversal(decoded_queries, grl_strength), selected);
  return domain_bce(discriminator(q), label);
}

ag::Var total_adversarial_loss(const AdversarialParts& parts) {
  if (parts.dqfa.defined() && parts.tiafa.defined()) return ag::add(parts.dqfa, parts.tiafa);
  if (parts.dqfa.defined()) return parts.dqfa;
  if (parts.tiafa.defined()) return parts.tiafa;
  return ag::Var::scalar(0.0);
}

ag::Var weighted_tiafa(const ag::Var& encoder_term, const ag::Var& decoder_term, const AdvLossWeights& w) {
  ag::Var out;
  if (encoder_term.defined()) out = ag::scale(encoder_term, w.tiafa_encoder);
  if (decoder_term.defined()) {
    const ag::Var d = ag::scale(decoder_term, w.tiafa_decoder);
    out = out.defined() ? ag::add(out, d) : d;
  }
  return out;
}

std::vector<ScoredBox> filter_scored_pseudo_labels(const DetectionSet& detections, double tau) {
  const ag::Matrix probs = detections.probabilities();
  const int background = detections.num_classes();
  struct Kept {
    double conf;
    int query;
    int cls;
  };
  std::vector<Kept> kept;
  for (int q = 0; q < detections.num_queries(); ++q) {
    Eigen::Index cls = 0;
    const double conf = probs.row(q).maxCoeff(&cls);
    if (cls != background && conf >= tau) kept.push_back({conf, q, static_cast<int>(cls)});
  }
  std::stable_sort(kept.begin(), kept.end(), [](const Kept& a, const Kept& b) { return a.conf > b.conf; });
  std::vector<ScoredBox> out;
  out.reserve(kept.size());
  for (const auto& k : kept) out.push_back({BoxLabel{k.cls, detections.box(k.query)}, k.conf});
  return out;
}

std::vector<BoxLabel> filter_pseudo_labels(const DetectionSet& detections, double tau) {
  std::vector<BoxLabel> out;
  for (const auto& s : filter_scored_pseudo_labels(detections, tau)) out.push_back(s.label);
  return out;
}

double grl_schedule(long step, long total_steps, double grl_lambda, double warmup_fraction) {
  const double warm = warmup_fraction * static_cast<double>(total_steps);
  if (warm <= 0.0) return grl_lambda;
  return grl_lambda * std::min(1.0, static_cast<double>(step) / warm);
}

}  // namespace cahqp
