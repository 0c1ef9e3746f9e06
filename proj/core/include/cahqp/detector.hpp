#pragma once

// Miniature DETR-family detector: strided conv backbone, post-norm transformer
// encoder/decoder operating on role-tagged token sequences, and class/box heads.

#include "cahqp/autograd.hpp"
#include "cahqp/boxes.hpp"
#include "cahqp/nn.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace cahqp {

enum class TokenRole { prompt, domain_query, image, object_query };
const char* to_string(TokenRole role);

// Backbone output X with H x W cells of C channels, stored as [H*W x C].
struct FeatureMap {
  ag::Var data;
  int height = 0;
  int width = 0;
  int channels = 0;

  static FeatureMap from(ag::Var data, int height, int width);
  void validate() const;
};

struct TokenSequence {
  ag::Var tokens;  // [T x D_model]
  std::vector<TokenRole> roles;

  int size() const { return static_cast<int>(roles.size()); }
  int width() const { return static_cast<int>(tokens.cols()); }
  std::vector<int> indices_of(TokenRole role) const;
  int count(TokenRole role) const;
  std::optional<int> domain_query_index() const;
  ag::Var rows_of(TokenRole role) const;
  // Throws std::invalid_argument on role-count mismatch, more than one domain
  // query, prompts after image tokens, or non-finite entries.
  void validate() const;
};

struct DetectorConfig {
  int image_size = 64;
  int num_classes = 3;
  std::vector<int> backbone_channels{16, 32, 64};
  int d_model = 64;
  int heads = 4;
  int ffn_dim = 128;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int num_queries = 10;

  int stride() const { return 1 << static_cast<int>(backbone_channels.size()); }
  int feature_extent() const { return image_size / stride(); }
  std::string validate() const;
};

// Raw head outputs detached from any graph.
struct DetectionSet {
  ag::Matrix class_logits;  // [N_q x (K+1)], column K is background
  ag::Matrix boxes;         // [N_q x 4] (cx, cy, w, h) in (0, 1)

  int num_queries() const { return static_cast<int>(class_logits.rows()); }
  int num_classes() const { return static_cast<int>(class_logits.cols()) - 1; }
  ag::Matrix probabilities() const;
  // Max class probability per query over all K+1 columns.
  std::vector<double> confidences() const;
  Box box(int query) const;
};

struct DetectionOutput {
  ag::Var logits;
  ag::Var boxes;
  DetectionSet values() const { return {logits.value(), boxes.value()}; }
};

// Three (by default) bias-free 3x3 stride-2 convolutions with ReLU.
struct Backbone {
  std::vector<ag::Var> weights;
  std::vector<int> channels;

  static Backbone create(const DetectorConfig& config, Rng& rng);
  // image: [H_img * W_img x 3], entries in [0, 1].
  FeatureMap forward(const ag::Matrix& image, int image_size) const;
  void collect(std::string_view prefix, ParameterList& out) const;
};

struct EncoderLayer {
  MultiHeadAttention attention;
  LayerNorm norm1;
  FeedForward ffn;
  LayerNorm norm2;
};

struct Encoder {
  std::vector<EncoderLayer> layers;

  static Encoder create(const DetectorConfig& config, Rng& rng);
  // Full self-attention over every token. With isolate_extra_tokens, image
  // tokens neither attend to nor are attended by prompt/domain-query tokens.
  TokenSequence forward(const TokenSequence& seq, bool isolate_extra_tokens = false) const;
  void collect(std::string_view prefix, ParameterList& out) const;
};

struct DecoderLayer {
  MultiHeadAttention self_attention;
  LayerNorm norm1;
  MultiHeadAttention cross_attention;
  LayerNorm norm2;
  FeedForward ffn;
  LayerNorm norm3;
};

struct Decoder {
  std::vector<DecoderLayer> layers;

  static Decoder create(const DetectorConfig& config, Rng& rng);
  // Cross-attention keys are the image tokens of memory only.
  TokenSequence forward(const TokenSequence& queries, const TokenSequence& memory) const;
  void collect(std::string_view prefix, ParameterList& out) const;
};

struct PredictionHeads {
  Linear classifier;
  FeedForward box_mlp;

  static PredictionHeads create(const DetectorConfig& config, Rng& rng);
  // One logit row and one sigmoid box per object_query token, in order.
  DetectionOutput forward(const TokenSequence& decoded) const;
  void collect(std::string_view prefix, ParameterList& out) const;
};

// Options for the extra tokens the adaptation framework injects.
struct ForwardExtras {
  std::optional<ag::Var> prompt;  // [n_p x D_model], prepended to encoder input
  bool domain_query = false;      // inject encoder and decoder domain-query tokens
  bool isolate_extra_tokens = false;
};

struct ForwardPass {
  FeatureMap features;
  TokenSequence memory;
  TokenSequence decoded;
  DetectionOutput detections;

  ag::Var encoder_domain_token() const;
  ag::Var decoder_domain_token() const;
  ag::Var memory_image_tokens() const { return memory.rows_of(TokenRole::image); }
  ag::Var object_query_outputs() const { return decoded.rows_of(TokenRole::object_query); }
};

class Detector {
 public:
  static Detector create(const DetectorConfig& config, std::uint64_t seed);

  ForwardPass forward(const ag::Matrix& image, const ForwardExtras& extras = {}) const;
  // Same as forward() for backbone features computed by the caller.
  ForwardPass forward_features(FeatureMap features, const ForwardExtras& extras = {}) const;

  FeatureMap backbone_forward(const ag::Matrix& image) const;
  TokenSequence encoder_input(const FeatureMap& features, const ForwardExtras& extras) const;
  TokenSequence decoder_input(bool domain_query) const;

  const DetectorConfig& config() const { return config_; }
  Backbone& backbone() { return backbone_; }
  Encoder& encoder() { return encoder_; }
  Decoder& decoder() { return decoder_; }
  PredictionHeads& heads() { return heads_; }
  const Encoder& encoder() const { return encoder_; }
  const Decoder& decoder() const { return decoder_; }
  const PredictionHeads& heads() const { return heads_; }

  // Parameters on the plain detection path.
  ParameterList parameters() const;
  // Domain-query embeddings, only used when ForwardExtras::domain_query is set.
  ParameterList domain_query_parameters() const;
  ParameterList all_parameters() const;
  std::size_t parameter_count() const;

 private:
  DetectorConfig config_;
  Backbone backbone_;
  Linear input_projection_;
  ag::Matrix image_positions_;
  Encoder encoder_;
  Decoder decoder_;
  PredictionHeads heads_;
  ag::Var object_queries_;
  ag::Var encoder_domain_query_;
  ag::Var decoder_domain_query_;
};

// 2-D sinusoidal encoding for an extent x extent grid, [extent^2 x width].
ag::Matrix sinusoidal_positions(int height, int width, int channels);

// Deep copy of parameter values (new leaves, fresh graph identity).
Detector clone(const Detector& detector);
void copy_parameter_values(const ParameterList& from, const ParameterList& to);
// Rounds every parameter through float32, matching snapshot precision.
void quantize_to_float(const ParameterList& params);
// FNV-1a digest of parameter names, shapes and bytes.
std::uint64_t parameter_hash(const ParameterList& params);
std::size_t count_parameters(const ParameterList& params);

}  // namespace cahqp
