#include "cahqp/detector.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <stdexcept>
#include <utility>

namespace cahqp {

const char* to_string(TokenRole role) {
  switch (role) {
    case TokenRole::prompt: return "prompt";
    case TokenRole::domain_query: return "domain_query";
    case TokenRole::image: return "image";
    case TokenRole::object_query: return "object_query";
  }
  return "unknown";
}

FeatureMap FeatureMap::from(ag::Var data, int height, int width) {
  FeatureMap f{std::move(data), height, width, 0};
  f.channels = static_cast<int>(f.data.cols());
  f.validate();
  return f;
}

void FeatureMap::validate() const {
  if (height < 1 || width < 1 || channels < 1) throw std::invalid_argument("FeatureMap: empty extent");
  if (data.rows() != static_cast<Eigen::Index>(height) * width || data.cols() != channels) {
    throw std::invalid_argument("FeatureMap: data shape does not match H*W x C");
  }
  if (!data.value().allFinite()) throw std::invalid_argument("FeatureMap: non-finite entries");
}

// ---- TokenSequence ------------------------------------------------------------

std::vector<int> TokenSequence::indices_of(TokenRole role) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (roles[static_cast<size_t>(i)] == role) out.push_back(i);
  }
  return out;
}

int TokenSequence::count(TokenRole role) const {
  int n = 0;
  for (auto r : roles) n += (r == role);
  return n;
}

std::optional<int> TokenSequence::domain_query_index() const {
  for (int i = 0; i < size(); ++i) {
    if (roles[static_cast<size_t>(i)] == TokenRole::domain_query) return i;
  }
  return std::nullopt;
}

ag::Var TokenSequence::rows_of(TokenRole role) const {
  const auto idx = indices_of(role);
  if (idx.empty()) throw std::invalid_argument(std::string("TokenSequence: no tokens with role ") + to_string(role));
  // Contiguous runs (the common case) become a slice.
  if (idx.back() - idx.front() + 1 == static_cast<int>(idx.size())) {
    if (static_cast<int>(idx.size()) == size()) return tokens;
    return ag::slice_rows(tokens, idx.front(), static_cast<Eigen::Index>(idx.size()));
  }
  return ag::gather_rows(tokens, idx);
}

void TokenSequence::validate() const {
  if (!tokens.defined() || tokens.rows() != size()) {
    throw std::invalid_argument("TokenSequence: token count does not match role count");
  }
  if (count(TokenRole::domain_query) > 1) throw std::invalid_argument("TokenSequence: more than one domain_query token");
  bool seen_image = false;
  for (auto r : roles) {
    if (r == TokenRole::image) seen_image = true;
    if (r == TokenRole::prompt && seen_image) {
      throw std::invalid_argument("TokenSequence: prompt token after image tokens");
    }
  }
  if (!tokens.value().allFinite()) throw std::invalid_argument("TokenSequence: non-finite entries");
}

// ---- DetectorConfig -----------------------------------------------------------

std::string DetectorConfig::validate() const {
  if (image_size < 1) return "image_size must be positive";
  if (num_classes < 1) return "num_classes must be positive";
  if (backbone_channels.empty()) return "backbone_channels must be non-empty";
  for (int c : backbone_channels) {
    if (c < 1) return "backbone_channels entries must be positive";
  }
  if (image_size % stride() != 0) return "image_size must be divisible by the backbone stride";
  if (d_model < 1 || heads < 1 || d_model % heads != 0) return "d_model must be a positive multiple of heads";
  if (d_model % 4 != 0) return "d_model must be divisible by 4 for 2-D positional encodings";
  if (ffn_dim < 1) return "ffn_dim must be positive";
  if (encoder_layers < 0 || decoder_layers < 0) return "layer counts must be non-negative";
  if (num_queries < 1) return "num_queries must be positive";
  return {};
}

// ---- DetectionSet ---------------------------------------------------------------

ag::Matrix DetectionSet::probabilities() const {
  ag::Matrix p(class_logits.rows(), class_logits.cols());
  for (Eigen::Index i = 0; i < class_logits.rows(); ++i) {
    const double m = class_logits.row(i).maxCoeff();
    p.row(i) = (class_logits.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

std::vector<double> DetectionSet::confidences() const {
  const ag::Matrix p = probabilities();
  std::vector<double> out(static_cast<size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) out[static_cast<size_t>(i)] = p.row(i).maxCoeff();
  return out;
}

Box DetectionSet::box(int q) const {
  return clamp_box(Box{boxes(q, 0), boxes(q, 1), boxes(q, 2), boxes(q, 3)});
}

// ---- Backbone -------------------------------------------------------------------

Backbone Backbone::create(const DetectorConfig& config, Rng& rng) {
  Backbone b;
  int in = 3;
  for (int out : config.backbone_channels) {
    const int fan_in = 9 * in;
    b.weights.push_back(make_parameter(gaussian(fan_in, out, std::sqrt(2.0 / fan_in), rng)));
    b.channels.push_back(out);
    in = out;
  }
  return b;
}

FeatureMap Backbone::forward(const ag::Matrix& image, int image_size) const {
  if (image.rows() != static_cast<Eigen::Index>(image_size) * image_size || image.cols() != 3) {
    throw std::invalid_argument("backbone: image must be [size*size x 3]");
  }
  if (!image.allFinite()) throw std::invalid_argument("backbone: non-finite input pixels");
  ag::Var x(image);
  int extent = image_size;
  for (const auto& w : weights) {
    x = ag::relu(ag::conv2d(x, extent, extent, w, 3, 2, 1));
    extent = ag::conv_output_extent(extent, 3, 2, 1);
  }
  return FeatureMap::from(x, extent, extent);
}

void Backbone::collect(std::string_view prefix, ParameterList& out) const {
  for (size_t i = 0; i < weights.size(); ++i) {
    out.push_back({join_name(prefix, "conv" + std::to_string(i) + ".weight"), weights[i]});
  }
}

// ---- Encoder --------------------------------------------------------------------

Encoder Encoder::create(const DetectorConfig& config, Rng& rng) {
  Encoder e;
  for (int i = 0; i < config.encoder_layers; ++i) {
    EncoderLayer l{MultiHeadAttention::create(config.d_model, config.heads, rng), LayerNorm::create(config.d_model),
                   FeedForward::create(config.d_model, config.ffn_dim, config.d_model, rng),
                   LayerNorm::create(config.d_model)};
    e.layers.push_back(std::move(l));
  }
  return e;
}

TokenSequence Encoder::forward(const TokenSequence& seq, bool isolate_extra_tokens) const {
  seq.validate();
  if (seq.count(TokenRole::image) == 0) throw std::invalid_argument("encoder: sequence has no image tokens");
  if (!layers.empty() && seq.width() != layers.front().attention.query.in_features()) {
    throw std::invalid_argument("encoder: token width does not match d_model");
  }
  std::optional<ag::Matrix> mask;
  if (isolate_extra_tokens) {
    const int t = seq.size();
    mask = ag::Matrix::Zero(t, t);
    for (int i = 0; i < t; ++i) {
      for (int j = 0; j < t; ++j) {
        const bool img_i = seq.roles[static_cast<size_t>(i)] == TokenRole::image;
        const bool img_j = seq.roles[static_cast<size_t>(j)] == TokenRole::image;
        if (img_i != img_j) (*mask)(i, j) = -1e300;
      }
    }
  }
  ag::Var x = seq.tokens;
  for (const auto& l : layers) {
    x = l.norm1(ag::add(x, l.attention(x, x, mask ? &*mask : nullptr)));
    x = l.norm2(ag::add(x, l.ffn(x)));
  }
  return TokenSequence{x, seq.roles};
}

void Encoder::collect(std::string_view prefix, ParameterList& out) const {
  for (size_t i = 0; i < layers.size(); ++i) {
    const std::string p = join_name(prefix, "layer" + std::to_string(i));
    layers[i].attention.collect(join_name(p, "attention"), out);
    layers[i].norm1.collect(join_name(p, "norm1"), out);
    layers[i].ffn.collect(join_name(p, "ffn"), out);
    layers[i].norm2.collect(join_name(p, "norm2"), out);
  }
}

// ---- Decoder --------------------------------------------------------------------

Decoder Decoder::create(const DetectorConfig& config, Rng& rng) {
  Decoder d;
  for (int i = 0; i < config.decoder_layers; ++i) {
    DecoderLayer l{MultiHeadAttention::create(config.d_model, config.heads, rng), LayerNorm::create(config.d_model),
                   MultiHeadAttention::create(config.d_model, config.heads, rng), LayerNorm::create(config.d_model),
                   FeedForward::create(config.d_model, config.ffn_dim, config.d_model, rng),
                   LayerNorm::create(config.d_model)};
    d.layers.push_back(std::move(l));
  }
  return d;
}

TokenSequence Decoder::forward(const TokenSequence& queries, const TokenSequence& memory) const {
  if (memory.size() == 0 || !memory.tokens.defined()) throw std::invalid_argument("decoder: empty memory");
  queries.validate();
  if (memory.count(TokenRole::image) == 0) throw std::invalid_argument("decoder: memory has no image tokens");
  if (queries.width() != memory.width()) throw std::invalid_argument("decoder: width mismatch");
  ag::Var x = queries.tokens;
  if (layers.empty()) return TokenSequence{x, queries.roles};
  const ag::Var keys = memory.rows_of(TokenRole::image);
  for (const auto& l : layers) {
    x = l.norm1(ag::add(x, l.self_attention(x, x)));
    x = l.norm2(ag::add(x, l.cross_attention(x, keys)));
    x = l.norm3(ag::add(x, l.ffn(x)));
  }
  return TokenSequence{x, queries.roles};
}

void Decoder::collect(std::string_view prefix, ParameterList& out) const {
  for (size_t i = 0; i < layers.size(); ++i) {
    const std::string p = join_name(prefix, "layer" + std::to_string(i));
    layers[i].self_attention.collect(join_name(p, "self_attention"), out);
    layers[i].norm1.collect(join_name(p, "norm1"), out);
    layers[i].cross_attention.collect(join_name(p, "cross_attention"), out);
    layers[i].norm2.collect(join_name(p, "norm2"), out);
    layers[i].ffn.collect(join_name(p, "ffn"), out);
    layers[i].norm3.collect(join_name(p, "norm3"), out);
  }
}

// ---- Heads ----------------------------------------------------------------------

PredictionHeads PredictionHeads::create(const DetectorConfig& config, Rng& rng) {
  return PredictionHeads{Linear::create(config.d_model, config.num_classes + 1, rng),
                         FeedForward::create(config.d_model, config.d_model, 4, rng)};
}

DetectionOutput PredictionHeads::forward(const TokenSequence& decoded) const {
  if (decoded.count(TokenRole::object_query) == 0) throw std::invalid_argument("heads: no object_query tokens");
  const ag::Var q = decoded.rows_of(TokenRole::object_query);
  return DetectionOutput{classifier(q), ag::sigmoid(box_mlp(q))};
}

void PredictionHeads::collect(std::string_view prefix, ParameterList& out) const {
  classifier.collect(join_name(prefix, "classifier"), out);
  box_mlp.collect(join_name(prefix, "box"), out);
}

// ---- Detector -------------------------------------------------------------------

ag::Matrix sinusoidal_positions(int height, int width, int channels) {
  const int quarter = channels / 4;
  ag::Matrix pe(static_cast<Eigen::Index>(height) * width, channels);
  const double two_pi = 2.0 * std::numbers::pi;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const Eigen::Index r = static_cast<Eigen::Index>(y) * width + x;
      const double py = (y + 0.5) / height * two_pi;
      const double px = (x + 0.5) / width * two_pi;
      for (int i = 0; i < quarter; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / quarter);
        pe(r, 2 * i) = std::sin(py * freq);
        pe(r, 2 * i + 1) = std::cos(py * freq);
        pe(r, 2 * quarter + 2 * i) = std::sin(px * freq);
        pe(r, 2 * quarter + 2 * i + 1) = std::cos(px * freq);
      }
    }
  }
  return pe;
}

Detector Detector::create(const DetectorConfig& config, std::uint64_t seed) {
  if (auto err = config.validate(); !err.empty()) throw std::invalid_argument("DetectorConfig: " + err);
  Detector d;
  d.config_ = config;
  Rng rng = make_rng(seed, "detector");
  d.backbone_ = Backbone::create(config, rng);
  d.input_projection_ = Linear::create(config.backbone_channels.back(), config.d_model, rng);
  d.image_positions_ = sinusoidal_positions(config.feature_extent(), config.feature_extent(), config.d_model);
  d.encoder_ = Encoder::create(config, rng);
  d.decoder_ = Decoder::create(config, rng);
  d.heads_ = PredictionHeads::create(config, rng);
  d.object_queries_ = make_parameter(gaussian(config.num_queries, config.d_model, 1.0, rng));
  Rng extra = make_rng(seed, "detector.domain_query");
  d.encoder_domain_query_ = make_parameter(gaussian(1, config.d_model, 0.02, extra));
  d.decoder_domain_query_ = make_parameter(gaussian(1, config.d_model, 0.02, extra));
  return d;
}

FeatureMap Detector::backbone_forward(const ag::Matrix& image) const {
  return backbone_.forward(image, config_.image_size);
}

TokenSequence Detector::encoder_input(const FeatureMap& features, const ForwardExtras& extras) const {
  ag::Var image_tokens = ag::add_const(input_projection_(features.data), image_positions_);
  std::vector<ag::Var> parts;
  std::vector<TokenRole> roles;
  if (extras.prompt) {
    if (extras.prompt->cols() != config_.d_model) throw std::invalid_argument("prompt width does not match d_model");
    parts.push_back(*extras.prompt);
    roles.insert(roles.end(), static_cast<size_t>(extras.prompt->rows()), TokenRole::prompt);
  }
  if (extras.domain_query) {
    parts.push_back(encoder_domain_query_);
    roles.push_back(TokenRole::domain_query);
  }
  parts.push_back(image_tokens);
  roles.insert(roles.end(), static_cast<size_t>(image_tokens.rows()), TokenRole::image);
  ag::Var tokens = parts.size() == 1 ? image_tokens : ag::concat_rows(parts);
  return TokenSequence{tokens, std::move(roles)};
}

TokenSequence Detector::decoder_input(bool domain_query) const {
  std::vector<TokenRole> roles;
  if (!domain_query) {
    roles.assign(static_cast<size_t>(config_.num_queries), TokenRole::object_query);
    return TokenSequence{object_queries_, std::move(roles)};
  }
  roles.push_back(TokenRole::domain_query);
  roles.insert(roles.end(), static_cast<size_t>(config_.num_queries), TokenRole::object_query);
  const std::vector<ag::Var> parts{decoder_domain_query_, object_queries_};
  return TokenSequence{ag::concat_rows(parts), std::move(roles)};
}

ForwardPass Detector::forward(const ag::Matrix& image, const ForwardExtras& extras) const {
  return forward_features(backbone_forward(image), extras);
}

ForwardPass Detector::forward_features(FeatureMap features, const ForwardExtras& extras) const {
  ForwardPass pass;
  pass.features = std::move(features);
  pass.memory = encoder_.forward(encoder_input(pass.features, extras), extras.isolate_extra_tokens);
  pass.decoded = decoder_.forward(decoder_input(extras.domain_query), pass.memory);
  pass.detections = heads_.forward(pass.decoded);
  return pass;
}

ag::Var ForwardPass::encoder_domain_token() const {
  auto idx = memory.domain_query_index();
  if (!idx) throw std::invalid_argument("forward pass has no encoder domain-query token");
  return ag::slice_rows(memory.tokens, *idx, 1);
}

ag::Var ForwardPass::decoder_domain_token() const {
  auto idx = decoded.domain_query_index();
  if (!idx) throw std::invalid_argument("forward pass has no decoder domain-query token");
  return ag::slice_rows(decoded.tokens, *idx, 1);
}

ParameterList Detector::parameters() const {
  ParameterList out;
  backbone_.collect("detector.backbone", out);
  input_projection_.collect("detector.input_projection", out);
  encoder_.collect("detector.encoder", out);
  decoder_.collect("detector.decoder", out);
  heads_.collect("detector.heads", out);
  out.push_back({"detector.object_queries", object_queries_});
  return out;
}

ParameterList Detector::domain_query_parameters() const {
  return {{"detector.encoder_domain_query", encoder_domain_query_},
          {"detector.decoder_domain_query", decoder_domain_query_}};
}

ParameterList Detector::all_parameters() const {
  ParameterList out = parameters();
  for (auto& p : domain_query_parameters()) out.push_back(std::move(p));
  return out;
}

std::size_t Detector::parameter_count() const { return count_parameters(parameters()); }

// ---- parameter utilities ----------------------------------------------------------

Detector clone(const Detector& detector) {
  Detector copy = Detector::create(detector.config(), 0);
  copy_parameter_values(detector.all_parameters(), copy.all_parameters());
  return copy;
}

void copy_parameter_values(const ParameterList& from, const ParameterList& to) {
  if (from.size() != to.size()) throw std::invalid_argument("copy_parameter_values: list size mismatch");
  for (size_t i = 0; i < from.size(); ++i) {
    if (from[i].name != to[i].name || from[i].var.rows() != to[i].var.rows() ||
        from[i].var.cols() != to[i].var.cols()) {
      throw std::invalid_argument("copy_parameter_values: mismatch at " + from[i].name);
    }
    ag::Var dst = to[i].var;
    dst.mutable_value() = from[i].var.value();
  }
}

void quantize_to_float(const ParameterList& params) {
  for (const auto& p : params) {
    ag::Var v = p.var;
    auto& m = v.mutable_value();
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
  }
}

std::uint64_t parameter_hash(const ParameterList& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : params) {
    mix(p.name.data(), p.name.size());
    const std::int64_t shape[2] = {p.var.rows(), p.var.cols()};
    mix(shape, sizeof(shape));
    mix(p.var.value().data(), static_cast<size_t>(p.var.value().size()) * sizeof(double));
  }
  return h;
}

std::size_t count_parameters(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += static_cast<std::size_t>(p.var.value().size());
  return n;
}

}  // namespace cahqp
