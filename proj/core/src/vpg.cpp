#include "cahqp/vpg.hpp"

#include <algorithm>
#include <stdexcept>

namespace cahqp {

PromptComponentBank PromptComponentBank::create(int components, int prompt_dim, double beta, Rng& rng,
                                                double init_std) {
  PromptComponentBank bank;
  ag::Matrix init = gaussian(components, prompt_dim, init_std, rng);
  bank.fast = make_parameter(init);
  bank.slow = ag::Var(init);
  bank.beta = beta;
  bank.validate();
  return bank;
}

void PromptComponentBank::validate() const {
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("prompt bank: beta outside [0, 1]");
  if (fast.rows() != slow.rows() || fast.cols() != slow.cols()) {
    throw std::invalid_argument("prompt bank: fast/slow shape mismatch");
  }
  if (!fast.value().allFinite() || !slow.value().allFinite()) throw std::invalid_argument("prompt bank: non-finite entries");
}

void ema_update(PromptComponentBank& bank) {
  if (!(bank.beta >= 0.0 && bank.beta <= 1.0)) throw std::invalid_argument("ema_update: beta outside [0, 1]");
  if (bank.beta == 1.0) return;
  ag::Matrix& slow = bank.slow.mutable_value();
  if (bank.beta == 0.0) {
    slow = bank.fast.value();
    return;
  }
  slow = bank.beta * slow + (1.0 - bank.beta) * bank.fast.value();
}

Prompt generate_prompt(const PromptQuery& query, const PromptComponentBank& bank, double temperature,
                       bool normalize_query) {
  if (bank.components() == 0) throw std::invalid_argument("generate_prompt: empty component bank");
  if (query.q.cols() != bank.prompt_dim()) throw std::invalid_argument("generate_prompt: prompt dimension mismatch");
  // Value equals slow; gradient flows into fast.
  const ag::Var effective = ag::add(ag::detach(bank.slow), ag::sub(bank.fast, ag::detach(bank.fast)));
  const ag::Var q = normalize_query ? ag::l2_normalize_rows(query.q) : query.q;
  ag::Var logits = ag::matmul_nt(q, effective);
  if (temperature != 1.0) logits = ag::scale(logits, 1.0 / temperature);
  const ag::Var w = ag::softmax_rows(logits);
  return Prompt{w, ag::matmul(w, effective)};
}

Cbam Cbam::create(int channels, int reduction, int spatial_kernel, Rng& rng) {
  Cbam c;
  const int hidden = std::max(1, channels / std::max(1, reduction));
  c.channel_mlp = FeedForward::create(channels, hidden, channels, rng);
  c.spatial_weight = make_parameter(xavier_uniform(spatial_kernel * spatial_kernel * 2, 1, rng));
  c.spatial_bias = make_parameter(ag::Matrix::Zero(1, 1));
  c.spatial_kernel = spatial_kernel;
  return c;
}

FeatureMap Cbam::forward(const FeatureMap& x) const {
  x.validate();
  if (x.channels != channel_mlp.hidden.in_features()) throw std::invalid_argument("cbam: channel mismatch");
  const ag::Var channel_gate =
      ag::sigmoid(ag::add(channel_mlp(ag::mean_rows(x.data)), channel_mlp(ag::max_rows(x.data))));
  const ag::Var gated = ag::mul_row(x.data, channel_gate);
  const std::vector<ag::Var> pooled{ag::mean_cols(gated), ag::max_cols(gated)};
  const ag::Var stacked = ag::concat_cols(pooled);
  const ag::Var spatial = ag::add_row(
      ag::conv2d(stacked, x.height, x.width, spatial_weight, spatial_kernel, 1, spatial_kernel / 2), spatial_bias);
  const ag::Var out = ag::mul_col(gated, ag::sigmoid(spatial));
  return FeatureMap{out, x.height, x.width, x.channels};
}

void Cbam::collect(std::string_view prefix, ParameterList& out) const {
  channel_mlp.collect(join_name(prefix, "channel_mlp"), out);
  out.push_back({join_name(prefix, "spatial.weight"), spatial_weight});
  out.push_back({join_name(prefix, "spatial.bias"), spatial_bias});
}

PromptGenerator PromptGenerator::create(const VpgConfig& config, int feature_channels, int d_model,
                                        std::uint64_t seed) {
  if (config.components < 1) throw std::invalid_argument("vpg: components must be >= 1");
  if (config.prompt_dim < 1 || config.prompt_tokens < 1) throw std::invalid_argument("vpg: empty prompt shape");
  if (config.spatial_kernel < 1 || config.spatial_kernel % 2 == 0) throw std::invalid_argument("vpg: spatial kernel must be odd");
  PromptGenerator g;
  g.config_ = config;
  g.feature_channels_ = feature_channels;
  g.d_model_ = d_model;
  Rng rng = make_rng(seed, "vpg");
  g.cbam_ = Cbam::create(feature_channels, config.cbam_reduction, config.spatial_kernel, rng);
  for (int i = 0; i < config.prompt_tokens; ++i) {
    g.query_maps_.push_back(Linear::create(feature_channels, config.prompt_dim, rng));
  }
  g.bank_ = PromptComponentBank::create(config.components, config.prompt_dim, config.beta, rng);
  g.projection_ = Linear::create(config.prompt_dim, d_model, rng);
  g.positions_ = make_parameter(gaussian(config.prompt_tokens, d_model, 0.02, rng));
  return g;
}

PromptQuery PromptGenerator::feature_to_query(const FeatureMap& refined) const {
  const ag::Var pooled = ag::mean_rows(refined.data);
  if (query_maps_.size() == 1) return PromptQuery{query_maps_.front()(pooled)};
  std::vector<ag::Var> rows;
  rows.reserve(query_maps_.size());
  for (const auto& m : query_maps_) rows.push_back(m(pooled));
  return PromptQuery{ag::concat_rows(rows)};
}

ag::Var PromptGenerator::prompt_tokens(const FeatureMap& backbone_features) const {
  const Prompt p = prompt(feature_to_query(refine(backbone_features)));
  return ag::add(projection_(p.vector), positions_);
}

ParameterList PromptGenerator::parameters() const {
  ParameterList out;
  cbam_.collect("vpg.cbam", out);
  for (size_t i = 0; i < query_maps_.size(); ++i) query_maps_[i].collect("vpg.query" + std::to_string(i), out);
  out.push_back({"vpg.bank.fast", bank_.fast});
  projection_.collect("vpg.projection", out);
  out.push_back({"vpg.positions", positions_});
  return out;
}

ParameterList PromptGenerator::state() const {
  ParameterList out = parameters();
  out.push_back({"vpg.bank.slow", bank_.slow});
  return out;
}

PromptGenerator clone(const PromptGenerator& vpg) {
  PromptGenerator copy = PromptGenerator::create(vpg.config(), vpg.feature_channels(), vpg.d_model(), 0);
  copy_parameter_values(vpg.state(), copy.state());
  copy.bank().beta = vpg.bank().beta;
  return copy;
}

}  // namespace cahqp
