#include "cahqp/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace cahqp {

Rng make_rng(std::uint64_t seed, std::string_view purpose) {
  // FNV-1a over the tag, mixed with the seed through seed_seq.
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : purpose) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return Rng(seq);
}

ag::Var make_parameter(ag::Matrix value) { return ag::Var(std::move(value), true); }

ag::Matrix xavier_uniform(int rows, int cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  ag::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

ag::Matrix gaussian(int rows, int cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  ag::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

std::string join_name(std::string_view prefix, std::string_view name) {
  if (prefix.empty()) return std::string(name);
  std::string s(prefix);
  s += '.';
  s += name;
  return s;
}

Linear Linear::create(int in, int out, Rng& rng, bool with_bias) {
  Linear l;
  l.weight = make_parameter(xavier_uniform(in, out, rng));
  if (with_bias) l.bias = make_parameter(ag::Matrix::Zero(1, out));
  return l;
}

ag::Var Linear::operator()(const ag::Var& x) const {
  ag::Var y = ag::matmul(x, weight);
  return bias.defined() ? ag::add_row(y, bias) : y;
}

void Linear::collect(std::string_view prefix, ParameterList& out) const {
  out.push_back({join_name(prefix, "weight"), weight});
  if (bias.defined()) out.push_back({join_name(prefix, "bias"), bias});
}

LayerNorm LayerNorm::create(int width) {
  LayerNorm ln;
  ln.gamma = make_parameter(ag::Matrix::Ones(1, width));
  ln.beta = make_parameter(ag::Matrix::Zero(1, width));
  return ln;
}

void LayerNorm::collect(std::string_view prefix, ParameterList& out) const {
  out.push_back({join_name(prefix, "gamma"), gamma});
  out.push_back({join_name(prefix, "beta"), beta});
}

MultiHeadAttention MultiHeadAttention::create(int width, int heads, Rng& rng) {
  if (heads < 1 || width % heads != 0) throw std::invalid_argument("attention width must divide by head count");
  MultiHeadAttention a;
  a.query = Linear::create(width, width, rng);
  a.key = Linear::create(width, width, rng);
  a.value = Linear::create(width, width, rng);
  a.output = Linear::create(width, width, rng);
  a.heads = heads;
  return a;
}

ag::Var MultiHeadAttention::operator()(const ag::Var& queries, const ag::Var& keys_values,
                                       const ag::Matrix* mask) const {
  const int width = query.out_features();
  if (queries.cols() != query.in_features() || keys_values.cols() != key.in_features()) {
    throw std::invalid_argument("attention: embedding width mismatch");
  }
  const int head_dim = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  ag::Var q = query(queries);
  ag::Var k = key(keys_values);
  ag::Var v = value(keys_values);
  std::vector<ag::Var> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    ag::Var qh = heads == 1 ? q : ag::slice_cols(q, h * head_dim, head_dim);
    ag::Var kh = heads == 1 ? k : ag::slice_cols(k, h * head_dim, head_dim);
    ag::Var vh = heads == 1 ? v : ag::slice_cols(v, h * head_dim, head_dim);
    ag::Var scores = ag::scale(ag::matmul_nt(qh, kh), inv_sqrt);
    if (mask != nullptr) scores = ag::add_const(scores, *mask);
    outs.push_back(ag::matmul(ag::softmax_rows(scores), vh));
  }
  ag::Var merged = heads == 1 ? outs.front() : ag::concat_cols(outs);
  return output(merged);
}

void MultiHeadAttention::collect(std::string_view prefix, ParameterList& out) const {
  query.collect(join_name(prefix, "query"), out);
  key.collect(join_name(prefix, "key"), out);
  value.collect(join_name(prefix, "value"), out);
  output.collect(join_name(prefix, "output"), out);
}

FeedForward FeedForward::create(int in, int hidden_width, int out, Rng& rng) {
  FeedForward f;
  f.hidden = Linear::create(in, hidden_width, rng);
  f.out = Linear::create(hidden_width, out, rng);
  return f;
}

void FeedForward::collect(std::string_view prefix, ParameterList& out_list) const {
  hidden.collect(join_name(prefix, "hidden"), out_list);
  out.collect(join_name(prefix, "out"), out_list);
}

AdamW::AdamW(std::vector<Group> groups, double beta1, double beta2, double eps)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  slots_.resize(groups_.size());
  for (size_t g = 0; g < groups_.size(); ++g) slots_[g].resize(groups_[g].params.size());
}

void AdamW::step() {
  ++step_count_;
  for (size_t g = 0; g < groups_.size(); ++g) {
    const Group& group = groups_[g];
    for (size_t i = 0; i < group.params.size(); ++i) {
      const ag::Var& p = group.params[i].var;
      if (!p.has_grad()) continue;
      Slot& s = slots_[g][i];
      if (s.t == 0) {
        s.m = ag::Matrix::Zero(p.rows(), p.cols());
        s.v = ag::Matrix::Zero(p.rows(), p.cols());
      }
      ++s.t;
      const ag::Matrix& grad = p.grad();
      s.m = beta1_ * s.m + (1.0 - beta1_) * grad;
      s.v = beta2_ * s.v + (1.0 - beta2_) * grad.cwiseProduct(grad);
      const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(s.t));
      const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(s.t));
      ag::Var param = p;
      ag::Matrix& value = param.mutable_value();
      value *= (1.0 - group.lr * group.weight_decay);
      value.array() -= group.lr * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + eps_);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& group : groups_) {
    for (auto& p : group.params) p.var.zero_grad();
  }
}

double AdamW::clip_grad_norm(double max_norm) {
  double sq = 0.0;
  for (auto& group : groups_) {
    for (auto& p : group.params) {
      if (p.var.has_grad()) sq += p.var.grad().squaredNorm();
    }
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (auto& group : groups_) {
      for (auto& p : group.params) {
        if (p.var.has_grad()) p.var.node()->grad *= s;
      }
    }
  }
  return norm;
}

}  // namespace cahqp
