#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <vector>

#include "geniedrive/core/types.hpp"
#include "geniedrive/nn/layers.hpp"

namespace geniedrive::vae {

using nn::Tensor;

struct VaeConfig {
  int H = 32, W = 32, D = 8;
  int n_classes = 6;
  int free_id = 0;
  int downsample = 4;  // fixed by the two stride-2 stages
  int channels = 32;   // latent width C
  int heads = 4;
  int axis_layers = 2;
  double dropout = 0.5;
  double kl_weight = 1e-6;

  int h() const { return H / downsample; }
  int w() const { return W / downsample; }
  int d() const { return D / downsample; }
  void validate() const;
  nlohmann::json to_json() const;
  /// Unknown keys are rejected with ConfigError.
  static VaeConfig from_json(const nlohmann::json& j);
};

/// Scalars stored by the tri-plane latent: h*w*C + w*d*C + h*d*C.
int64_t triplane_scalar_count(int64_t h, int64_t w, int64_t d, int64_t C);

/// z_xy (h,w,C), z_yz (w,d,C), z_xz (h,d,C) plus posterior parameters.
struct LatentTriPlane {
  Tensor z_xy, z_yz, z_xz;
  Tensor mean_xy, mean_yz, mean_xz;
  Tensor logvar_xy, logvar_yz, logvar_xz;

  int64_t h() const { return z_xy.dim(0); }
  int64_t w() const { return z_xy.dim(1); }
  int64_t d() const { return z_yz.dim(1); }
  int64_t channels() const { return z_xy.dim(2); }

  /// Throws ShapeError when the three planes disagree on h, w, d or C.
  void check_shapes() const;
  /// Flat token sequence [xy (h*w) ; yz (w*d) ; xz (h*d)] of shape (h*w + w*d + h*d, C).
  Tensor tokens() const;
  /// Unified grid (h, w + 2d, C); requires h == w so the yz plane lines up with the rows.
  Tensor token_grid() const;
  /// Planes from a flat token tensor; posterior fields are left undefined.
  static LatentTriPlane from_tokens(const Tensor& tokens, int64_t h, int64_t w, int64_t d);
};

/// out[i,j,k,c] = z_xy[i,j,c] * z_yz[j,k,c] * z_xz[i,k,c].
Tensor compose_volume(const LatentTriPlane& z);

struct EncodeOptions {
  bool sample = true;    // false: z = mean
  bool train = false;    // dropout in the axis transformers
  uint64_t seed = 0;
};

class TriplaneVae {
 public:
  TriplaneVae(const VaeConfig& config, uint64_t init_seed);

  LatentTriPlane encode(const OccupancyGrid& grid, const EncodeOptions& options) const;
  /// Logits (H, W, D, n_classes).
  Tensor decode(const LatentTriPlane& z) const;
  /// encode (means) then decode then argmax, without recording a graph.
  OccupancyGrid reconstruct(const OccupancyGrid& grid) const;
  OccupancyGrid to_grid(const Tensor& logits, const OccupancyGrid& like) const;

  const VaeConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }

  /// Fixed output layer: zero weights and a bias favoring `favored` class.
  void set_bias_only_output(int favored, double margin);

 private:
  struct AxisProjector {
    Tensor token;  // (C)
    Tensor pos;    // (len + 1, C)
    std::vector<nn::TransformerBlock> blocks;
    nn::Linear posterior;  // C -> 2C
  };

  Tensor project(const AxisProjector& p, const Tensor& seq, bool train, Rng* rng) const;
  void check_grid(const OccupancyGrid& grid) const;

  VaeConfig cfg_;
  nn::ParamStore ps_;
  Tensor embed_;  // (n_classes, C/2)
  Tensor down1_w_, down1_b_, down2_w_, down2_b_;
  AxisProjector proj_xy_, proj_yz_, proj_xz_;
  Tensor pe_x_, pe_y_, pe_z_;
  Tensor dec0_w_, dec0_b_, up1_w_, up1_b_, dec1_w_, dec1_b_, up2_w_, up2_b_, out_w_, out_b_;
};

struct VaeLoss {
  Tensor total, ce, lovasz, kl;
};

/// Mean KL of each plane's posterior against N(0, I), summed over the three planes.
Tensor kl_divergence(const LatentTriPlane& z);
/// Cross-entropy plus Lovasz-softmax (per z-slice) on decoded logits.
Tensor reconstruction_loss(const Tensor& logits, const OccupancyGrid& target, Tensor* ce_out = nullptr,
                           Tensor* lovasz_out = nullptr);
VaeLoss vae_loss(const OccupancyGrid& target, const Tensor& logits, const LatentTriPlane& z, double kl_weight);

}  // namespace geniedrive::vae
