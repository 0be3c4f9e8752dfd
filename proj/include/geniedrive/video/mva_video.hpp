#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "geniedrive/core/rng.hpp"
#include "geniedrive/core/scene_gen.hpp"
#include "geniedrive/nn/layers.hpp"
#include "geniedrive/render/splat.hpp"

namespace geniedrive::train {
class JsonlLog;
}

namespace geniedrive::video {

using nn::Tensor;

/// Statistics used to rescale the cross-view attention output.
/// Group: mean/std over all tokens and channels of a (t*h) group.
/// PerChannel: per channel over the group's tokens. None: raw attention output.
enum class MvaNorm { Group, PerChannel, None };
const char* to_string(MvaNorm n);
MvaNorm mva_norm_from_string(const std::string& s);

struct VideoConfig {
  int views = 2;
  int frames = 8;
  int channels = 3;
  int height = 32;
  int width = 32;
  int patch = 4;
  int dim = 64;
  int cond_dim = 16;  // share of each token embedding that carries the condition
  int heads = 4;
  int blocks = 4;
  int mlp_ratio = 2;
  int mva_stride = 1;  // cross-view block after every mva_stride-th block; 0 disables it
  double eta = 1.0;
  MvaNorm norm = MvaNorm::Group;
  double norm_eps = 1e-5;
  int n_labels = 6;  // semantic classes; background takes one extra one-hot slot
  int sample_steps = 20;

  int grid_h() const { return height / patch; }
  int grid_w() const { return width / patch; }
  nn::Shape video_shape() const { return {views, frames, channels, height, width}; }
  nn::Shape condition_shape() const { return {views, frames, n_labels + 1, height, width}; }
  void validate() const;
  nlohmann::json to_json() const;
  /// Unknown keys are rejected with ConfigError.
  static VideoConfig from_json(const nlohmann::json& j);
};

// ---- cross-view attention ---------------------------------------------------

/// (n, t*h*w, C) -> (t*h, n*w, C): tokens of one time step and image row from
/// every view form one group.
Tensor rearrange_views(const Tensor& z, int t, int h, int w);
/// Inverse of rearrange_views.
Tensor restore_views(const Tensor& z, int n, int t, int h, int w);

struct MvaParams {
  nn::MultiHeadAttention attn;
  double eta = 1.0;
  MvaNorm norm = MvaNorm::Group;
  double eps = 1e-5;
};

/// Attention within each group, renormalized to the group's own statistics:
/// (M - mu_M) / (sigma_M + eps) * sigma_Z + mu_Z. Input is (groups, tokens, C).
Tensor mva_branch(const Tensor& z, const MvaParams& p);
/// z + eta * mva_branch(z); exactly z when eta is 0.
Tensor normalized_mva(const Tensor& z, const MvaParams& p);

// ---- flow matching -------------------------------------------------------------

struct FlowSample {
  Tensor x0, x1, xt, v;
  double time = 0.0;
};

/// x_t = (1 - time) x0 + time x1 and v = x1 - x0.
FlowSample flow_interpolate(const Tensor& x0, const Tensor& x1, double time);

/// Velocity field u(x, condition, time).
using VelocityField = std::function<Tensor(const Tensor& x, const Tensor& condition, double time)>;

/// Mean squared error between u(x_t, condition, time) and x1 - x0, with time
/// uniform in (0, 1) and x1 standard normal per sample, averaged over the batch.
Tensor video_loss(const VelocityField& model, const std::vector<Tensor>& x0, const std::vector<Tensor>& conditions,
                  Rng& rng);

/// Standard-normal starting point of the sampler.
Tensor initial_noise(const nn::Shape& shape, uint64_t seed);

/// Euler integration of dx/dtime = u from time 1 to 0 in `steps` equal steps.
Tensor sample_video(const VelocityField& model, const Tensor& condition, const nn::Shape& shape, int steps,
                    uint64_t seed);

// ---- model ----------------------------------------------------------------------

/// Patch transformer with timestep-modulated (adaLN-zero) blocks, each followed
/// by a cross-view attention block. Conditions are one-hot label patches
/// embedded and concatenated with the video patch embedding.
class VideoModel {
 public:
  explicit VideoModel(const VideoConfig& config, uint64_t seed = 0);

  /// x: (n, t, c, H, W), condition: (n, t, K + 1, H, W). Returns the velocity.
  Tensor velocity(const Tensor& x, const Tensor& condition, double time) const;
  VelocityField field() const;

  /// Standard deviations of each cross-view branch and of the trunk it is
  /// added to, recorded during one forward pass.
  struct BranchStats {
    double branch_std = 0.0;
    double trunk_std = 0.0;
  };
  std::vector<BranchStats> branch_stats(const Tensor& x, const Tensor& condition, double time) const;

  Tensor sample(const Tensor& condition, int steps, uint64_t seed) const;

  const VideoConfig& config() const { return config_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

 private:
  struct Block {
    nn::MultiHeadAttention attn;
    nn::Mlp mlp;
    nn::Linear modulation;  // time embedding -> shift/scale/gate for both branches
    bool has_mva = false;
    MvaParams mva;
  };

  Tensor forward(const Tensor& x, const Tensor& condition, double time, std::vector<BranchStats>* stats) const;
  Tensor patchify(const Tensor& x) const;
  Tensor unpatchify(const Tensor& tokens) const;

  VideoConfig config_;
  nn::ParamStore params_;
  nn::Linear video_embed_, cond_embed_;
  Tensor pos_space_, pos_time_, pos_view_;
  nn::Linear time_fc1_, time_fc2_;
  std::vector<Block> blocks_;
  nn::Linear final_modulation_, final_proj_;
};

void save_video_model(const VideoModel& model, const std::filesystem::path& dir);
VideoModel load_video_model(const std::filesystem::path& dir);

// ---- toy data -------------------------------------------------------------------

/// One-hot labels (n, t, n_labels + 1, H, W); the background label takes the last slot.
Tensor condition_tensor(const render::ConditionStack& stack, int n_labels);

struct VideoExample {
  std::vector<OccupancyGrid> frames;  // source occupancy
  std::vector<Camera> rig;
  render::ConditionStack maps;
  Tensor video;      // (n, t, c, H, W) in [-1, 1] plus style offset
  Tensor condition;  // one-hot maps
  double style = 0.0;
};

/// Pixels are palette colors of the rendered labels scaled to [-1, 1], plus a
/// brightness offset drawn per example from U(-style, style) and shared by all
/// views and frames.
std::vector<VideoExample> make_toy_video_dataset(const VideoConfig& config, int count, uint64_t seed,
                                                 double style = 0.5);
/// Colorizes an existing condition stack the same way (style offset `offset`).
Tensor colorize(const render::ConditionStack& stack, const LabelPalette& palette, double offset);

/// Mean absolute color difference between views at voxels that both views see
/// (per frame, averaged over voxels, channels and view pairs). Lower is more consistent.
double cross_view_discrepancy(const Tensor& video, const VideoExample& example, const LabelPalette& palette);

// ---- training -------------------------------------------------------------------

struct VideoTrainConfig {
  int64_t steps = 300;
  int batch_size = 1;
  double lr = 1e-3;
  int64_t warmup_steps = 20;
  double lr_floor = 0.1;
  uint64_t seed = 0;
  int eval_samples = 16;  // Monte-Carlo draws per example for the fixed-seed loss
  int64_t log_every = 50;

  void validate() const;
  nlohmann::json to_json() const;
  static VideoTrainConfig from_json(const nlohmann::json& j);
};

/// Flow loss averaged over `samples_per_example` fixed-seed draws per example.
double evaluation_loss(const VideoModel& model, const std::vector<VideoExample>& data, int samples_per_example,
                       uint64_t seed);

struct VideoTrainSummary {
  int64_t steps = 0;
  double seconds = 0.0;
  double initial_loss = 0.0;  // evaluation_loss before training
  double final_loss = 0.0;    // evaluation_loss after training
};

/// Adam on the flow loss; throws NumericError on a non-finite loss.
VideoTrainSummary train_toy_video(VideoModel& model, const std::vector<VideoExample>& data,
                                  const VideoTrainConfig& config, train::JsonlLog* log = nullptr);

// ---- export ---------------------------------------------------------------------

/// `dir/video_manifest` (shape, dtype) plus `video.f32` (little-endian float32,
/// row-major (n, t, c, H, W)); with `png`, `frame{t}.png` shows the views side by side.
void export_video(const Tensor& video, const std::filesystem::path& dir, bool png = true);
Tensor import_video(const std::filesystem::path& dir);

}  // namespace geniedrive::video
