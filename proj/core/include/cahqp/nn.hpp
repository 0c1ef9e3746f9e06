#pragma once

// Layer building blocks shared by the detector, the prompt generator and the
// domain discriminators.

#include "cahqp/autograd.hpp"

#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace cahqp {

struct NamedParameter {
  std::string name;
  ag::Var var;
};
using ParameterList = std::vector<NamedParameter>;

using Rng = std::mt19937_64;

// Derives an independent stream from a base seed and a purpose tag so that
// adding a consumer never shifts another consumer's draws.
Rng make_rng(std::uint64_t seed, std::string_view purpose);

ag::Var make_parameter(ag::Matrix value);
ag::Matrix xavier_uniform(int rows, int cols, Rng& rng);
ag::Matrix gaussian(int rows, int cols, double stddev, Rng& rng);

struct Linear {
  ag::Var weight;  // [in x out]
  ag::Var bias;    // [1 x out], undefined when bias-free

  static Linear create(int in, int out, Rng& rng, bool with_bias = true);
  ag::Var operator()(const ag::Var& x) const;
  void collect(std::string_view prefix, ParameterList& out) const;
  int in_features() const { return static_cast<int>(weight.rows()); }
  int out_features() const { return static_cast<int>(weight.cols()); }
};

struct LayerNorm {
  ag::Var gamma;
  ag::Var beta;

  static LayerNorm create(int width);
  ag::Var operator()(const ag::Var& x) const { return ag::layer_norm(x, gamma, beta); }
  void collect(std::string_view prefix, ParameterList& out) const;
};

// Scaled dot-product multi-head attention with output projection.
struct MultiHeadAttention {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  int heads = 1;

  static MultiHeadAttention create(int width, int heads, Rng& rng);
  // mask, when given, is added to every head's [queries x keys] score matrix.
  ag::Var operator()(const ag::Var& queries, const ag::Var& keys_values, const ag::Matrix* mask = nullptr) const;
  void collect(std::string_view prefix, ParameterList& out) const;
};

// Two-layer ReLU MLP.
struct FeedForward {
  Linear hidden;
  Linear out;

  static FeedForward create(int in, int hidden_width, int out, Rng& rng);
  ag::Var operator()(const ag::Var& x) const { return out(ag::relu(hidden(x))); }
  void collect(std::string_view prefix, ParameterList& out_list) const;
};

std::string join_name(std::string_view prefix, std::string_view name);

// Decoupled-weight-decay Adam. Parameters without a gradient after backward
// (not on the loss path) are skipped entirely, moments included.
class AdamW {
 public:
  struct Group {
    ParameterList params;
    double lr = 1e-4;
    double weight_decay = 1e-4;
  };

  AdamW() = default;
  AdamW(std::vector<Group> groups, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step();
  void zero_grad();
  // Rescales gradients so their global L2 norm is at most max_norm. Returns the pre-clip norm.
  double clip_grad_norm(double max_norm);
  long steps() const { return step_count_; }
  std::vector<Group>& groups() { return groups_; }

 private:
  struct Slot {
    ag::Matrix m;
    ag::Matrix v;
    long t = 0;
  };
  std::vector<Group> groups_;
  std::vector<std::vector<Slot>> slots_;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  long step_count_ = 0;
};

}  // namespace cahqp
