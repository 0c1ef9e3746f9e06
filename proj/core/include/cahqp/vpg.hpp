#pragma once

// Visual prompt generator: attention-refined backbone features are summarized
// into a query vector that softly selects from a bank of prompt components.
// The bank keeps an optimizer-updated copy and an EMA shadow; the forward pass
// reads the shadow while gradients reach the optimizer copy.

#include "cahqp/autograd.hpp"
#include "cahqp/detector.hpp"
#include "cahqp/nn.hpp"

#include <cstdint>

namespace cahqp {

struct PromptComponentBank {
  ag::Var fast;  // [M_c x D_p], optimizer-updated
  ag::Var slow;  // [M_c x D_p], EMA of fast
  double beta = 0.99;

  static PromptComponentBank create(int components, int prompt_dim, double beta, Rng& rng, double init_std = 0.02);
  int components() const { return static_cast<int>(fast.rows()); }
  int prompt_dim() const { return static_cast<int>(fast.cols()); }
  void validate() const;
};

struct PromptQuery {
  ag::Var q;  // [1 x D_p] (one row per prompt token)
};

struct Prompt {
  ag::Var weights;  // [n_p x M_c] softmax weights
  ag::Var vector;   // [n_p x D_p] convex combination of bank rows
};

// slow <- beta * slow + (1 - beta) * fast; fast unchanged.
void ema_update(PromptComponentBank& bank);

// w = softmax(normalize(q) . slow^T / temperature), p = w . slow, evaluated on
// the straight-through bank slow_detached + (fast - fast_detached).
Prompt generate_prompt(const PromptQuery& query, const PromptComponentBank& bank, double temperature = 1.0,
                       bool normalize_query = true);

struct VpgConfig {
  int components = 8;
  int prompt_dim = 64;
  int prompt_tokens = 1;
  double beta = 0.99;
  double temperature = 1.0;
  int cbam_reduction = 4;
  int spatial_kernel = 7;
};

// Channel then spatial attention gating (CBAM).
struct Cbam {
  FeedForward channel_mlp;  // C -> C/r -> C, shared by avg- and max-pooled descriptors
  ag::Var spatial_weight;   // [k*k*2 x 1]
  ag::Var spatial_bias;     // [1 x 1]
  int spatial_kernel = 7;

  static Cbam create(int channels, int reduction, int spatial_kernel, Rng& rng);
  FeatureMap forward(const FeatureMap& x) const;
  void collect(std::string_view prefix, ParameterList& out) const;
};

class PromptGenerator {
 public:
  static PromptGenerator create(const VpgConfig& config, int feature_channels, int d_model, std::uint64_t seed);

  FeatureMap refine(const FeatureMap& x) const { return cbam_.forward(x); }
  // q = linear(global-average-pool(x)); one row per prompt token.
  PromptQuery feature_to_query(const FeatureMap& refined) const;
  Prompt prompt(const PromptQuery& q) const { return generate_prompt(q, bank_, config_.temperature); }
  // Projected prompt tokens [n_p x D_model] with learned positional embeddings.
  ag::Var prompt_tokens(const FeatureMap& backbone_features) const;

  void ema_update() { cahqp::ema_update(bank_); }

  const VpgConfig& config() const { return config_; }
  int feature_channels() const { return feature_channels_; }
  int d_model() const { return d_model_; }
  PromptComponentBank& bank() { return bank_; }
  const PromptComponentBank& bank() const { return bank_; }
  Cbam& cbam() { return cbam_; }
  std::vector<Linear>& query_maps() { return query_maps_; }

  // Optimizer-visible parameters (the slow bank is excluded; it only moves by EMA).
  ParameterList parameters() const;
  // parameters() plus the slow bank, for snapshots and hashing.
  ParameterList state() const;

 private:
  VpgConfig config_;
  int feature_channels_ = 0;
  int d_model_ = 0;
  Cbam cbam_;
  std::vector<Linear> query_maps_;
  PromptComponentBank bank_;
  Linear projection_;
  ag::Var positions_;
};

PromptGenerator clone(const PromptGenerator& vpg);

}  // namespace cahqp
