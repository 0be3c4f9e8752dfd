#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <nlohmann/json.hpp>
#include <vector>

#include "geniedrive/core/types.hpp"
#include "geniedrive/nn/layers.hpp"
#include "geniedrive/vae/triplane_vae.hpp"

namespace geniedrive::predictor {

using nn::Tensor;

struct PredictorConfig {
  int h = 8, w = 8, d = 2;  // latent plane sizes
  int channels = 32;
  int heads = 4;
  int layers = 4;           // MCA layers
  int transform_layer = 2;  // m: layer whose control tokens feed the transform head and fusion
  int st_blocks = 2;
  int history = 3;          // k
  int n_waypoints = 3;
  double lambda = 0.1;
  std::vector<double> beta;  // per rollout step; empty means 1 everywhere
  double waypoint_scale = 5.0;  // meters mapped to unit input

  int64_t tokens() const { return static_cast<int64_t>(h) * w + static_cast<int64_t>(w) * d + static_cast<int64_t>(h) * d; }
  double beta_at(size_t t) const { return t < beta.size() ? beta[t] : 1.0; }
  void validate() const;
  nlohmann::json to_json() const;
  static PredictorConfig from_json(const nlohmann::json& j);
  /// Latent sizes and width taken from a VAE configuration.
  static PredictorConfig for_vae(const vae::VaeConfig& v);
};

/// Ordered oldest -> newest; `k` entries once primed, padded by repeating the oldest.
class HistoryBuffer {
 public:
  explicit HistoryBuffer(int k) : k_(k) {}
  void push(const Tensor& z);
  /// Exactly k entries (oldest repeated when fewer were pushed). Throws if empty.
  std::vector<Tensor> window() const;
  size_t size() const { return items_.size(); }
  int capacity() const { return k_; }

 private:
  int k_;
  std::deque<Tensor> items_;
};

/// Homogeneous 3x3 transform assembled from raw head output (cos, sin, tx, ty).
struct TransformPrediction {
  Tensor raw;     // (4)
  Tensor matrix;  // (3, 3), rotation block renormalized
  RigidTransform2D value() const;
};

/// Squared Frobenius distance between a predicted matrix and the ground truth.
Tensor transform_loss(const Tensor& matrix, const RigidTransform2D& gt);
/// Assembles the homogeneous matrix from (cos, sin, tx, ty), renormalizing (cos, sin).
Tensor assemble_transform(const Tensor& raw);

struct StepOutput {
  Tensor next;  // (tokens, C)
  TransformPrediction transform;
};

struct McaLayer {
  nn::LayerNorm norm_z1, norm_c1, norm_z2, norm_c3, norm_z3;
  nn::MultiHeadAttention occ_from_ctrl, occ_self, ctrl_from_occ;
};

struct StBlock {
  nn::LayerNorm norm_attn, norm_temporal, norm_hist, norm_ffn;
  nn::MultiHeadAttention spatial;
  nn::Mlp temporal;  // (k+1)C -> C
  nn::Mlp ffn;
};

class ControlPredictor {
 public:
  ControlPredictor(const PredictorConfig& config, uint64_t init_seed);

  /// (n_waypoints + 1, C): token 0 is the command embedding, then one token per waypoint.
  Tensor embed_control(const ControlSignal& c) const;
  /// One MCA layer: occupancy <- control, occupancy self-attention, control <- occupancy.
  std::pair<Tensor, Tensor> mca_layer(int layer, const Tensor& Z, const Tensor& c) const;
  TransformPrediction transform_head(const Tensor& c_m) const;
  /// Z_t (tokens, C) and k history latents (oldest first) -> Z_hat_{t+1}.
  StepOutput predict_next(const Tensor& Z, const ControlSignal& control, const std::vector<Tensor>& history) const;

  /// Zero every residual-branch output projection (full-network identity).
  void zero_residual_outputs();
  /// Zero only the three MCA output projections of one layer.
  void zero_mca_outputs(int layer);

  const PredictorConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }
  McaLayer& layer(int l) { return layers_[static_cast<size_t>(l)]; }

 private:
  PredictorConfig cfg_;
  nn::ParamStore ps_;
  Tensor command_table_;  // (kCommandCount, C)
  nn::Mlp waypoint_mlp_;
  Tensor waypoint_slot_;  // (n_waypoints, C)
  Tensor token_pos_;      // (tokens, C)
  std::vector<McaLayer> layers_;
  nn::LayerNorm fusion_norm_z_, fusion_norm_c_;
  nn::MultiHeadAttention fusion_;
  nn::LayerNorm trans_norm_;
  nn::Mlp trans_mlp_;
  std::vector<StBlock> st_;
};

struct PredictionLoss {
  Tensor total;
  std::vector<double> latent_mse;  // per step
  Tensor reg;                      // mean over steps
};

/// total = sum_t beta_t * mse(pred_t, target_t) + lambda * mean_t L_reg(t).
PredictionLoss prediction_loss(const std::vector<Tensor>& predicted, const std::vector<Tensor>& targets,
                               const std::vector<Tensor>& transform_matrices,
                               const std::vector<RigidTransform2D>& gt_transforms, const PredictorConfig& cfg);

struct RolloutResult {
  std::vector<OccupancyGrid> grids;
  std::vector<Tensor> latents;
  std::vector<RigidTransform2D> transforms;
};

/// Encodes the initial frames (means), pads the history to k, then predicts one
/// frame per control, feeding predictions back into the history. No graph is recorded.
RolloutResult rollout(const std::vector<OccupancyGrid>& initial, const std::vector<ControlSignal>& controls,
                      const vae::TriplaneVae& vae, const ControlPredictor& pred);

/// Encoder means of a grid as a flat token tensor (no graph).
Tensor encode_tokens(const vae::TriplaneVae& vae, const OccupancyGrid& grid);
/// Decoded logits from a flat token tensor.
Tensor decode_tokens(const vae::TriplaneVae& vae, const Tensor& tokens);

}  // namespace geniedrive::predictor
