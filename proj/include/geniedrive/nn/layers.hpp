#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "geniedrive/core/rng.hpp"
#include "geniedrive/nn/ops.hpp"
#include "geniedrive/nn/tensor.hpp"

namespace geniedrive::nn {

enum class Init { Zeros, Ones, Normal, XavierUniform };

/// Ordered collection of named trainable leaves.
class ParamStore {
 public:
  /// Registers a new parameter. `scale` is the std for Normal and a gain for Xavier.
  Tensor create(const std::string& name, Shape shape, Init init, Rng& rng, double scale = 1.0);

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  int64_t parameter_count() const;

  void zero_grad();
  void set_requires_grad(bool on);
  /// FNV-1a over names, shapes and raw values; used to detect mutation.
  uint64_t fingerprint() const;
  /// Copy all values from a store with identical names and shapes.
  void copy_values_from(const ParamStore& other);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, size_t> index_;
};

struct Linear {
  Tensor weight;  // (in, out)
  Tensor bias;    // (out), may be undefined

  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, int64_t in, int64_t out, Rng& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  /// Zero weight and bias (used for residual-branch identity and adaLN-zero init).
  void zero();
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, int64_t dim, Rng& rng);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

/// Projections around the fused attention kernel. Inputs are (B, L, C).
struct MultiHeadAttention {
  Linear q, k, v, out;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& ps, const std::string& name, int64_t dim, int heads, Rng& rng);
  Tensor operator()(const Tensor& query, const Tensor& context) const;
};

struct Mlp {
  Linear fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore& ps, const std::string& name, int64_t in, int64_t hidden, int64_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }
};

/// Pre-norm self-attention + MLP block with optional dropout on both branches.
struct TransformerBlock {
  LayerNorm norm1, norm2;
  MultiHeadAttention attn;
  Mlp mlp;

  TransformerBlock() = default;
  TransformerBlock(ParamStore& ps, const std::string& name, int64_t dim, int heads, int64_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x, double dropout_p, Rng* rng) const;
};

/// Adam with decoupled bias correction and optional global-norm clipping.
class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;  // <= 0 disables clipping
  };

  Adam(std::vector<Tensor> params, Options options);
  explicit Adam(std::vector<Tensor> params) : Adam(std::move(params), Options{}) {}

  /// Applies one update with learning rate `lr`; returns the pre-clip gradient norm.
  double step(double lr);
  void zero_grad();
  int64_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  Options opt_;
  int64_t t_ = 0;
};

/// Linear warmup followed by cosine decay to `floor * base`.
double cosine_lr(double base, int64_t step, int64_t total_steps, int64_t warmup_steps, double floor = 0.05);

std::vector<Tensor> parameters_of(const ParamStore& ps);

}  // namespace geniedrive::nn
