#pragma once

// Adversarial feature alignment: domain discriminators behind gradient
// reversal, global alignment on domain-query outputs (DQFA), instance-aware
// alignment on soft-masked encoder tokens and foreground decoder queries
// (TIAFA), and confidence filtering of pseudo-labels.

#include "cahqp/autograd.hpp"
#include "cahqp/boxes.hpp"
#include "cahqp/detector.hpp"
#include "cahqp/matching.hpp"
#include "cahqp/nn.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace cahqp {

enum class DomainLabel : int { source = 0, target = 1 };
inline double label_value(DomainLabel d) { return d == DomainLabel::target ? 1.0 : 0.0; }

struct AdvLossWeights {
  double dqfa_encoder = 1.0;   // lambda_1^DQFA
  double dqfa_decoder = 1.0;   // lambda_2^DQFA
  double tiafa_encoder = 1.0;  // lambda_1^TIAFA
  double tiafa_decoder = 1.0;  // lambda_2^TIAFA
  double tau = 0.7;
  double grl_lambda = 1.0;

  std::string validate() const;
};

// Two-layer feed-forward probability head: embedding -> hidden ReLU -> sigmoid.
struct Discriminator {
  FeedForward mlp;

  static Discriminator create(int width, int hidden, Rng& rng);
  ag::Var operator()(const ag::Var& x) const { return ag::sigmoid(mlp(x)); }  // [rows x 1]
  void collect(std::string_view prefix, ParameterList& out) const { mlp.collect(prefix, out); }
};

struct DiscriminatorSet {
  Discriminator encoder_global;   // D_enc^a
  Discriminator decoder_global;   // D_dec^a
  Discriminator encoder_instance; // D_enc
  Discriminator decoder_instance; // D_dec

  static DiscriminatorSet create(int width, int hidden, std::uint64_t seed);
  ParameterList parameters() const;
};

DiscriminatorSet clone(const DiscriminatorSet& d);

// -(t log p + (1 - t) log(1 - p)) averaged over entries, p clamped to [1e-7, 1 - 1e-7].
ag::Var domain_bce(const ag::Var& prob, DomainLabel label);
double domain_bce(double prob, DomainLabel label);

// lambda1 * bce(D_enc^a(enc_token)) + lambda2 * bce(D_dec^a(dec_token)). Tokens
// are routed through gradient reversal with grl_strength before the heads.
ag::Var dqfa_loss(const ag::Var& enc_domain_token, const ag::Var& dec_domain_token, DomainLabel label,
                  const DiscriminatorSet& discriminators, const AdvLossWeights& w, double grl_strength);

struct SoftMask {
  ag::Matrix psi;  // [N_enc x 1], entries in [0, 1]
  int size() const { return static_cast<int>(psi.rows()); }
};

// psi_k = sigmoid(mean_i <z_k/|z_k|, Q_i/|Q_i|>). Returns nullopt when there
// are no matched queries or any matched query is the zero vector.
std::optional<SoftMask> compute_soft_mask(const ag::Matrix& memory_image_tokens, const ag::Matrix& matched_queries);

// (1/N_enc) sum_i bce(D_enc(psi_i * z_i), t), tokens through gradient reversal.
ag::Var tiafa_encoder_loss(const ag::Var& memory_image_tokens, const SoftMask& mask, DomainLabel label,
                           const Discriminator& discriminator, double grl_strength);

// w_i = 1 exactly for matched query indices.
std::vector<double> decoder_foreground_weights(const Assignment& assignment, int n_queries);

// Mean of bce(D_dec(q_i), t) over queries with w_i = 1; zero when none are set.
ag::Var tiafa_decoder_loss(const ag::Var& decoded_queries, std::span<const double> weights, DomainLabel label,
                           const Discriminator& discriminator, double grl_strength);

struct AdversarialParts {
  ag::Var dqfa;   // already weighted by lambda^DQFA
  ag::Var tiafa;  // already weighted by lambda^TIAFA
};

// L_adv = L_adv^DQFA + L_adv^TIAFA; undefined parts count as zero.
ag::Var total_adversarial_loss(const AdversarialParts& parts);
// L_tiafa = lambda1 * enc + lambda2 * dec; undefined terms count as zero.
ag::Var weighted_tiafa(const ag::Var& encoder_term, const ag::Var& decoder_term, const AdvLossWeights& w);

// Non-background predictions with max-probability confidence >= tau, sorted by
// descending confidence then query index.
std::vector<BoxLabel> filter_pseudo_labels(const DetectionSet& detections, double tau);
std::vector<ScoredBox> filter_scored_pseudo_labels(const DetectionSet& detections, double tau);

// Linear warm-up of the reversal strength over the first warmup_fraction of steps.
double grl_schedule(long step, long total_steps, double grl_lambda, double warmup_fraction = 0.2);

}  // namespace cahqp
