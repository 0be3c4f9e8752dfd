#include "geniedrive/nn/layers.hpp"

#include <cmath>
#include <cstring>
#include <numbers>

#include "geniedrive/core/errors.hpp"

namespace geniedrive::nn {

Tensor ParamStore::create(const std::string& name, Shape shape, Init init, Rng& rng, double scale) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  Tensor t = Tensor::zeros(shape, true);
  auto data = t.mutable_data();
  switch (init) {
    case Init::Zeros:
      break;
    case Init::Ones:
      for (auto& v : data) v = 1.0;
      break;
    case Init::Normal:
      for (auto& v : data) v = rng.normal() * scale;
      break;
    case Init::XavierUniform: {
      const double fan_in = shape.size() >= 2 ? static_cast<double>(shape[0]) : 1.0;
      const double fan_out = shape.size() >= 2 ? static_cast<double>(shape.back()) : static_cast<double>(shape[0]);
      const double a = scale * std::sqrt(6.0 / (fan_in + fan_out));
      for (auto& v : data) v = rng.uniform(-a, a);
      break;
    }
  }
  index_[name] = entries_.size();
  entries_.emplace_back(name, t);
  return t;
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second].second;
}

int64_t ParamStore::parameter_count() const {
  int64_t n = 0;
  for (const auto& [_, t] : entries_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : entries_) {
    Tensor h = t;
    h.zero_grad();
  }
}

void ParamStore::set_requires_grad(bool on) {
  for (auto& [_, t] : entries_) {
    Tensor h = t;
    h.set_requires_grad(on);
  }
}

uint64_t ParamStore::fingerprint() const {
  uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : entries_) {
    mix(name.data(), name.size());
    for (auto d : t.shape()) mix(&d, sizeof d);
    mix(t.data().data(), t.data().size() * sizeof(double));
  }
  return h;
}

void ParamStore::copy_values_from(const ParamStore& other) {
  for (auto& [name, t] : entries_) {
    const Tensor src = other.get(name);
    if (src.shape() != t.shape()) throw ShapeError("copy_values_from: shape mismatch for " + name);
    Tensor dst = t;
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
}

std::vector<Tensor> parameters_of(const ParamStore& ps) {
  std::vector<Tensor> out;
  out.reserve(ps.entries().size());
  for (const auto& [_, t] : ps.entries()) out.push_back(t);
  return out;
}

Linear::Linear(ParamStore& ps, const std::string& name, int64_t in, int64_t out, Rng& rng, bool with_bias) {
  weight = ps.create(name + ".weight", {in, out}, Init::XavierUniform, rng);
  if (with_bias) bias = ps.create(name + ".bias", {out}, Init::Zeros, rng);
}

void Linear::zero() {
  for (auto& v : weight.mutable_data()) v = 0.0;
  if (bias.defined()) {
    for (auto& v : bias.mutable_data()) v = 0.0;
  }
}

LayerNorm::LayerNorm(ParamStore& ps, const std::string& name, int64_t dim, Rng& rng) {
  gamma = ps.create(name + ".gamma", {dim}, Init::Ones, rng);
  beta = ps.create(name + ".beta", {dim}, Init::Zeros, rng);
}

MultiHeadAttention::MultiHeadAttention(ParamStore& ps, const std::string& name, int64_t dim, int heads_,
                                       Rng& rng)
    : q(ps, name + ".q", dim, dim, rng),
      k(ps, name + ".k", dim, dim, rng),
      v(ps, name + ".v", dim, dim, rng),
      out(ps, name + ".out", dim, dim, rng),
      heads(heads_) {
  if (dim % heads != 0) throw ConfigError(name + ": width not divisible by heads");
}

Tensor MultiHeadAttention::operator()(const Tensor& query, const Tensor& context) const {
  return out(attention(q(query), k(context), v(context), heads));
}

Mlp::Mlp(ParamStore& ps, const std::string& name, int64_t in, int64_t hidden, int64_t out, Rng& rng)
    : fc1(ps, name + ".fc1", in, hidden, rng), fc2(ps, name + ".fc2", hidden, out, rng) {}

TransformerBlock::TransformerBlock(ParamStore& ps, const std::string& name, int64_t dim, int heads,
                                   int64_t hidden, Rng& rng)
    : norm1(ps, name + ".norm1", dim, rng),
      norm2(ps, name + ".norm2", dim, rng),
      attn(ps, name + ".attn", dim, heads, rng),
      mlp(ps, name + ".mlp", dim, hidden, dim, rng) {}

Tensor TransformerBlock::operator()(const Tensor& x, double dropout_p, Rng* rng) const {
  auto h = norm1(x);
  auto a = attn(h, h);
  if (rng && dropout_p > 0) a = dropout(a, dropout_p, *rng);
  auto y = add(x, a);
  auto m = mlp(norm2(y));
  if (rng && dropout_p > 0) m = dropout(m, dropout_p, *rng);
  return add(y, m);
}

Adam::Adam(std::vector<Tensor> params, Options options) : params_(std::move(params)), opt_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
  }
}

double Adam::step(double lr) {
  double sq = 0.0;
  for (const auto& p : params_) {
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double clip = (opt_.clip_norm > 0 && norm > opt_.clip_norm) ? opt_.clip_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * clip;
      m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * gj;
      v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * gj * gj;
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opt_.eps);
    }
  }
  return norm;
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double cosine_lr(double base, int64_t step, int64_t total_steps, int64_t warmup_steps, double floor) {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const double span = static_cast<double>(std::max<int64_t>(1, total_steps - warmup_steps));
  const double progress = std::clamp(static_cast<double>(step - warmup_steps) / span, 0.0, 1.0);
  return base * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

}  // namespace geniedrive::nn
