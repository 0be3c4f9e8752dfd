#include "geniedrive/video/mva_video.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>

#include "geniedrive/core/errors.hpp"
#include "geniedrive/nn/checkpoint.hpp"
#include "geniedrive/train/trainer.hpp"

namespace geniedrive::video {

using nlohmann::json;
using namespace geniedrive::nn;

namespace {

double now_seconds() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("video config: " + what);
}

// Population std per group: x is (G, N) or (G, L, C) reduced over axis 1 only.
std::pair<Tensor, Tensor> moments(const Tensor& x, int axis) {
  auto mu = mean_axis(x, axis, true);
  auto centered = sub(x, mu);
  auto var = mean_axis(square(centered), axis, true);
  return {mu, nn::sqrt(clamp(var, 1e-24, 1e300))};
}

double global_std(const Tensor& x) {
  double m = 0.0;
  for (double v : x.data()) m += v;
  m /= static_cast<double>(x.numel());
  double s = 0.0;
  for (double v : x.data()) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(x.numel()));
}

// Sinusoidal features of time scaled to [0, 1000].
Tensor time_features(double time, int dim) {
  const int half = dim / 2;
  std::vector<double> f(static_cast<size_t>(dim), 0.0);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    f[static_cast<size_t>(i)] = std::cos(1000.0 * time * freq);
    f[static_cast<size_t>(half + i)] = std::sin(1000.0 * time * freq);
  }
  return Tensor::from({dim}, std::move(f));
}

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale_) {
  return add(mul(x, add_scalar(scale_, 1.0)), shift);
}

}  // namespace

const char* to_string(MvaNorm n) {
  switch (n) {
    case MvaNorm::Group: return "group";
    case MvaNorm::PerChannel: return "per_channel";
    case MvaNorm::None: return "none";
  }
  return "?";
}

MvaNorm mva_norm_from_string(const std::string& s) {
  if (s == "group") return MvaNorm::Group;
  if (s == "per_channel") return MvaNorm::PerChannel;
  if (s == "none") return MvaNorm::None;
  throw ConfigError("unknown MVA normalization '" + s + "'");
}

// ---- config -----------------------------------------------------------------------

void VideoConfig::validate() const {
  require(views >= 1 && frames >= 1 && channels >= 1, "views, frames and channels must be positive");
  require(patch >= 1 && height % patch == 0 && width % patch == 0 && height > 0 && width > 0,
          "image size must be a positive multiple of the patch size");
  require(heads >= 1 && dim >= 2 && dim % heads == 0 && dim % 2 == 0, "dim must be even and divisible by heads");
  require(cond_dim >= 1 && cond_dim < dim, "cond_dim must lie in [1, dim)");
  require(blocks >= 1 && mlp_ratio >= 1 && mva_stride >= 0, "bad block layout");
  require(eta >= 0.0 && std::isfinite(eta), "eta must be >= 0");
  require(norm_eps > 0.0, "norm_eps must be positive");
  require(n_labels >= 1 && n_labels < 255, "n_labels out of range");
  require(sample_steps >= 1, "sample_steps must be >= 1");
}

json VideoConfig::to_json() const {
  return {{"views", views},   {"frames", frames},     {"channels", channels},       {"height", height},
          {"width", width},   {"patch", patch},       {"dim", dim},                 {"cond_dim", cond_dim}, {"heads", heads},
          {"blocks", blocks}, {"mlp_ratio", mlp_ratio}, {"mva_stride", mva_stride}, {"eta", eta},
          {"norm", to_string(norm)}, {"norm_eps", norm_eps}, {"n_labels", n_labels}, {"sample_steps", sample_steps}};
}

VideoConfig VideoConfig::from_json(const json& j) {
  VideoConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "views") c.views = value.get<int>();
    else if (key == "frames") c.frames = value.get<int>();
    else if (key == "channels") c.channels = value.get<int>();
    else if (key == "height") c.height = value.get<int>();
    else if (key == "width") c.width = value.get<int>();
    else if (key == "patch") c.patch = value.get<int>();
    else if (key == "dim") c.dim = value.get<int>();
    else if (key == "cond_dim") c.cond_dim = value.get<int>();
    else if (key == "heads") c.heads = value.get<int>();
    else if (key == "blocks") c.blocks = value.get<int>();
    else if (key == "mlp_ratio") c.mlp_ratio = value.get<int>();
    else if (key == "mva_stride") c.mva_stride = value.get<int>();
    else if (key == "eta") c.eta = value.get<double>();
    else if (key == "norm") c.norm = mva_norm_from_string(value.get<std::string>());
    else if (key == "norm_eps") c.norm_eps = value.get<double>();
    else if (key == "n_labels") c.n_labels = value.get<int>();
    else if (key == "sample_steps") c.sample_steps = value.get<int>();
    else throw ConfigError("video config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

// ---- cross-view attention ------------------------------------------------------------

Tensor rearrange_views(const Tensor& z, int t, int h, int w) {
  if (z.rank() != 3 || t < 1 || h < 1 || w < 1 || z.dim(1) != static_cast<int64_t>(t) * h * w) {
    throw ShapeError("rearrange_views: " + nn::to_string(z.shape()) + " is not (n, t*h*w, C) for t=" + std::to_string(t) +
                     " h=" + std::to_string(h) + " w=" + std::to_string(w));
  }
  const int64_t n = z.dim(0), C = z.dim(2);
  auto x = reshape(z, {n, static_cast<int64_t>(t) * h, w, C});
  return reshape(permute(x, {1, 0, 2, 3}), {static_cast<int64_t>(t) * h, n * w, C});
}

Tensor restore_views(const Tensor& z, int n, int t, int h, int w) {
  if (z.rank() != 3 || n < 1 || z.dim(0) != static_cast<int64_t>(t) * h || z.dim(1) != static_cast<int64_t>(n) * w) {
    throw ShapeError("restore_views: " + nn::to_string(z.shape()) + " is not (t*h, n*w, C)");
  }
  const int64_t C = z.dim(2);
  auto x = reshape(z, {static_cast<int64_t>(t) * h, n, w, C});
  return reshape(permute(x, {1, 0, 2, 3}), {n, static_cast<int64_t>(t) * h * w, C});
}

Tensor mva_branch(const Tensor& z, const MvaParams& p) {
  if (z.rank() != 3) throw ShapeError("mva_branch expects (groups, tokens, C)");
  auto m = p.attn(z, z);
  if (p.norm == MvaNorm::None) return m;
  if (p.norm == MvaNorm::PerChannel) {
    auto [mu_m, sd_m] = moments(m, 1);
    auto [mu_z, sd_z] = moments(z, 1);
    return add(mul(div(sub(m, mu_m), add_scalar(sd_m, p.eps)), sd_z), mu_z);
  }
  const int64_t G = z.dim(0), N = z.dim(1) * z.dim(2);
  auto mf = reshape(m, {G, N});
  auto zf = reshape(z, {G, N});
  auto [mu_m, sd_m] = moments(mf, 1);
  auto [mu_z, sd_z] = moments(zf, 1);
  return reshape(add(mul(div(sub(mf, mu_m), add_scalar(sd_m, p.eps)), sd_z), mu_z), z.shape());
}

Tensor normalized_mva(const Tensor& z, const MvaParams& p) {
  if (p.eta < 0.0) throw ConfigError("eta must be >= 0");
  if (p.eta == 0.0) return z;
  return add(z, scale(mva_branch(z, p), p.eta));
}

// ---- flow matching ----------------------------------------------------------------------

FlowSample flow_interpolate(const Tensor& x0, const Tensor& x1, double time) {
  if (x0.shape() != x1.shape()) {
    throw ShapeError("flow_interpolate: " + nn::to_string(x0.shape()) + " vs " + nn::to_string(x1.shape()));
  }
  if (!(time >= 0.0 && time <= 1.0)) throw ConfigError("flow time must lie in [0, 1]");
  FlowSample s;
  s.x0 = x0;
  s.x1 = x1;
  s.time = time;
  s.xt = add(scale(x0, 1.0 - time), scale(x1, time));
  s.v = sub(x1, x0);
  return s;
}

Tensor video_loss(const VelocityField& model, const std::vector<Tensor>& x0, const std::vector<Tensor>& conditions,
                  Rng& rng) {
  if (x0.empty() || x0.size() != conditions.size()) throw ShapeError("video_loss: batch and conditions differ");
  Tensor total = Tensor::scalar(0.0);
  for (size_t i = 0; i < x0.size(); ++i) {
    double time = rng.uniform();
    while (time <= 0.0) time = rng.uniform();
    std::vector<double> noise(static_cast<size_t>(x0[i].numel()));
    for (auto& v : noise) v = rng.normal();
    auto s = flow_interpolate(x0[i], Tensor::from(x0[i].shape(), std::move(noise)), time);
    auto u = model(s.xt, conditions[i], time);
    if (u.shape() != s.v.shape()) throw ShapeError("velocity shape " + nn::to_string(u.shape()) + " differs from the sample");
    total = add(total, mse(u, s.v));
  }
  total = scale(total, 1.0 / static_cast<double>(x0.size()));
  if (!std::isfinite(total.item())) throw NumericError("video loss is not finite");
  return total;
}

Tensor initial_noise(const Shape& shape, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(shape, std::move(v));
}

Tensor sample_video(const VelocityField& model, const Tensor& condition, const Shape& shape, int steps,
                    uint64_t seed) {
  if (steps < 1) throw ConfigError("sample_video needs at least one step");
  NoGradGuard guard;
  auto x = initial_noise(shape, seed);
  const double dt = 1.0 / steps;
  for (int i = 0; i < steps; ++i) {
    const double time = 1.0 - i * dt;
    auto u = model(x, condition, time);
    if (u.shape() != shape) throw ShapeError("velocity shape differs from the sample");
    auto next = x.clone();
    auto xs = next.mutable_data();
    const auto us = u.data();
    for (size_t k = 0; k < xs.size(); ++k) xs[k] -= dt * us[k];
    x = next;
  }
  return x;
}

// ---- model -----------------------------------------------------------------------------

VideoModel::VideoModel(const VideoConfig& config, uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const auto& c = config_;
  const int64_t pp = static_cast<int64_t>(c.patch) * c.patch;
  video_embed_ = Linear(params_, "video_embed", c.channels * pp, c.dim - c.cond_dim, rng);
  cond_embed_ = Linear(params_, "cond_embed", (c.n_labels + 1) * pp, c.cond_dim, rng);
  pos_space_ = params_.create("pos_space", {1, 1, static_cast<int64_t>(c.grid_h()) * c.grid_w(), c.dim}, Init::Normal,
                              rng, 0.02);
  pos_time_ = params_.create("pos_time", {1, c.frames, 1, c.dim}, Init::Normal, rng, 0.02);
  pos_view_ = params_.create("pos_view", {c.views, 1, 1, c.dim}, Init::Normal, rng, 0.02);
  time_fc1_ = Linear(params_, "time_fc1", c.dim, c.dim, rng);
  time_fc2_ = Linear(params_, "time_fc2", c.dim, c.dim, rng);
  for (int b = 0; b < c.blocks; ++b) {
    const std::string name = "block" + std::to_string(b);
    Block blk;
    blk.attn = MultiHeadAttention(params_, name + ".attn", c.dim, c.heads, rng);
    blk.mlp = Mlp(params_, name + ".mlp", c.dim, static_cast<int64_t>(c.dim) * c.mlp_ratio, c.dim, rng);
    blk.modulation = Linear(params_, name + ".modulation", c.dim, 6 * static_cast<int64_t>(c.dim), rng);
    blk.modulation.zero();
    blk.has_mva = c.mva_stride > 0 && (b + 1) % c.mva_stride == 0;
    if (blk.has_mva) {
      blk.mva.attn = MultiHeadAttention(params_, name + ".mva", c.dim, c.heads, rng);
      blk.mva.eta = c.eta;
      blk.mva.norm = c.norm;
      blk.mva.eps = c.norm_eps;
    }
    blocks_.push_back(std::move(blk));
  }
  final_modulation_ = Linear(params_, "final_modulation", c.dim, 2 * static_cast<int64_t>(c.dim), rng);
  final_modulation_.zero();
  final_proj_ = Linear(params_, "final_proj", c.dim, c.channels * pp, rng);
  final_proj_.zero();
}

Tensor VideoModel::patchify(const Tensor& x) const {
  const int64_t n = x.dim(0), t = x.dim(1), ch = x.dim(2), p = config_.patch;
  const int64_t gh = x.dim(3) / p, gw = x.dim(4) / p;
  auto y = reshape(x, {n, t, ch, gh, p, gw, p});
  y = permute(y, {0, 1, 3, 5, 2, 4, 6});
  return reshape(y, {n, t * gh * gw, ch * p * p});
}

Tensor VideoModel::unpatchify(const Tensor& tokens) const {
  const auto& c = config_;
  const int64_t p = c.patch;
  auto y = reshape(tokens, {c.views, c.frames, c.grid_h(), c.grid_w(), c.channels, p, p});
  y = permute(y, {0, 1, 4, 2, 5, 3, 6});
  return reshape(y, {c.views, c.frames, c.channels, c.height, c.width});
}

Tensor VideoModel::forward(const Tensor& x, const Tensor& condition, double time,
                           std::vector<BranchStats>* stats) const {
  const auto& c = config_;
  if (x.shape() != c.video_shape()) throw ShapeError("video input " + nn::to_string(x.shape()) + " expected " + nn::to_string(c.video_shape()));
  if (condition.shape() != c.condition_shape()) {
    throw ShapeError("condition " + nn::to_string(condition.shape()) + " expected " + nn::to_string(c.condition_shape()));
  }
  const int64_t n = c.views, L = static_cast<int64_t>(c.frames) * c.grid_h() * c.grid_w(), D = c.dim;
  auto h = concat({video_embed_(patchify(x)), cond_embed_(patchify(condition))}, 2);
  h = reshape(h, {n, c.frames, static_cast<int64_t>(c.grid_h()) * c.grid_w(), D});
  h = add(add(add(h, pos_space_), pos_time_), pos_view_);
  h = reshape(h, {n, L, D});

  auto temb = silu(time_fc2_(silu(time_fc1_(time_features(time, c.dim)))));
  const Tensor none;
  for (const auto& blk : blocks_) {
    auto mod = blk.modulation(temb);
    auto part = [&](int i) { return slice(mod, 0, i * D, D); };
    auto a = modulate(layer_norm(h, none, none), part(0), part(1));
    h = add(h, mul(part(2), blk.attn(a, a)));
    auto b = modulate(layer_norm(h, none, none), part(3), part(4));
    h = add(h, mul(part(5), blk.mlp(b)));
    if (!blk.has_mva) continue;
    auto g = rearrange_views(h, c.frames, c.grid_h(), c.grid_w());
    if (stats) {
      auto branch = mva_branch(g, blk.mva);
      stats->push_back({global_std(branch), global_std(g)});
    }
    h = restore_views(normalized_mva(g, blk.mva), c.views, c.frames, c.grid_h(), c.grid_w());
  }
  auto fm = final_modulation_(temb);
  auto o = modulate(layer_norm(h, none, none), slice(fm, 0, 0, D), slice(fm, 0, D, D));
  return unpatchify(final_proj_(o));
}

Tensor VideoModel::velocity(const Tensor& x, const Tensor& condition, double time) const {
  return forward(x, condition, time, nullptr);
}

VelocityField VideoModel::field() const {
  return [this](const Tensor& x, const Tensor& condition, double time) { return velocity(x, condition, time); };
}

std::vector<VideoModel::BranchStats> VideoModel::branch_stats(const Tensor& x, const Tensor& condition,
                                                              double time) const {
  NoGradGuard guard;
  std::vector<BranchStats> out;
  forward(x, condition, time, &out);
  return out;
}

Tensor VideoModel::sample(const Tensor& condition, int steps, uint64_t seed) const {
  return sample_video(field(), condition, config_.video_shape(), steps, seed);
}

void save_video_model(const VideoModel& model, const std::filesystem::path& dir) {
  save_checkpoint(model.params(), dir, {{"kind", "video"}, {"config", model.config().to_json()}});
}

VideoModel load_video_model(const std::filesystem::path& dir) {
  const auto meta = read_checkpoint_meta(dir);
  if (meta.value("kind", "") != "video") throw FormatError(dir.string() + " is not a video checkpoint");
  VideoModel model(VideoConfig::from_json(meta.at("config")));
  load_checkpoint(model.params(), dir);
  return model;
}

// ---- toy data ------------------------------------------------------------------------------

Tensor condition_tensor(const render::ConditionStack& stack, int n_labels) {
  if (stack.maps.empty() || stack.maps.size() != static_cast<size_t>(stack.views) * stack.frames) {
    throw ShapeError("condition stack is empty or incomplete");
  }
  const int64_t H = stack.maps.front().height, W = stack.maps.front().width, K = n_labels + 1;
  std::vector<double> out(static_cast<size_t>(stack.views * stack.frames * K * H * W), 0.0);
  for (int v = 0; v < stack.views; ++v)
    for (int t = 0; t < stack.frames; ++t) {
      const auto& map = stack.at(v, t);
      if (map.height != H || map.width != W) throw ShapeError("condition maps differ in size");
      const int64_t base = (static_cast<int64_t>(v) * stack.frames + t) * K;
      for (int64_t px = 0; px < H * W; ++px) {
        const int label = map.labels[static_cast<size_t>(px)];
        int slot = label;
        if (label == render::kBackground) slot = n_labels;
        else if (label >= n_labels) throw ConfigError("condition label " + std::to_string(label) + " out of range");
        out[static_cast<size_t>((base + slot) * H * W + px)] = 1.0;
      }
    }
  return Tensor::from({stack.views, stack.frames, K, H, W}, std::move(out));
}

Tensor colorize(const render::ConditionStack& stack, const LabelPalette& palette, double offset) {
  if (stack.maps.empty()) throw ShapeError("colorize: empty condition stack");
  const int64_t H = stack.maps.front().height, W = stack.maps.front().width;
  std::vector<double> out(static_cast<size_t>(stack.views * stack.frames * 3 * H * W));
  for (int v = 0; v < stack.views; ++v)
    for (int t = 0; t < stack.frames; ++t) {
      const auto& map = stack.at(v, t);
      const int64_t base = (static_cast<int64_t>(v) * stack.frames + t) * 3;
      for (int64_t px = 0; px < H * W; ++px) {
        const uint8_t l = map.labels[static_cast<size_t>(px)];
        const auto& color = l < palette.colors.size() ? palette.colors[l] : render::kBackgroundColor;
        for (int ch = 0; ch < 3; ++ch) out[static_cast<size_t>((base + ch) * H * W + px)] = color[ch] / 127.5 - 1.0 + offset;
      }
    }
  return Tensor::from({stack.views, stack.frames, 3, H, W}, std::move(out));
}

std::vector<VideoExample> make_toy_video_dataset(const VideoConfig& config, int count, uint64_t seed, double style) {
  config.validate();
  if (config.channels != 3) throw ConfigError("toy videos are RGB (channels = 3)");
  if (count < 1) throw ConfigError("toy video dataset needs at least one example");
  SceneGenConfig sc;
  sc.frames = std::max(2, config.frames);
  sc.n_cameras = config.views;
  sc.image_width = config.width;
  sc.image_height = config.height;
  sc.n_classes = config.n_labels;
  const auto palette = LabelPalette::standard(config.n_labels);
  Rng rng(seed);
  std::vector<VideoExample> out;
  for (int i = 0; i < count; ++i) {
    auto seq = generate_synthetic_sequence(sc, rng.fork());
    seq.frames.resize(static_cast<size_t>(config.frames));
    VideoExample ex;
    ex.frames = seq.frames;
    ex.rig = seq.camera_rig;
    ex.maps = render::render_sequence(ex.frames, ex.rig, palette);
    ex.style = rng.uniform(-style, style);
    ex.video = colorize(ex.maps, palette, ex.style);
    ex.condition = condition_tensor(ex.maps, config.n_labels);
    out.push_back(std::move(ex));
  }
  return out;
}

double cross_view_discrepancy(const Tensor& video, const VideoExample& example, const LabelPalette& palette) {
  if (video.rank() != 5) throw ShapeError("video must be (n, t, c, H, W)");
  const int64_t n = video.dim(0), T = video.dim(1), C = video.dim(2), H = video.dim(3), W = video.dim(4);
  if (n != static_cast<int64_t>(example.rig.size()) || T != static_cast<int64_t>(example.frames.size())) {
    throw ShapeError("video does not match the example's views and frames");
  }
  const auto data = video.data();
  auto pixel = [&](int64_t v, int64_t t, int64_t ch, int64_t px) { return data[static_cast<size_t>(((v * T + t) * C + ch) * H * W + px)]; };
  double total = 0.0;
  int64_t matches = 0;
  for (int64_t t = 0; t < T; ++t) {
    // Mean color per visible voxel, per view.
    std::vector<std::map<int64_t, std::pair<std::vector<double>, int>>> seen(static_cast<size_t>(n));
    for (int64_t v = 0; v < n; ++v) {
      const auto hits = render::first_hits(example.frames[static_cast<size_t>(t)], example.rig[static_cast<size_t>(v)], palette);
      if (static_cast<int64_t>(hits.size()) != H * W) throw ShapeError("camera size differs from the video");
      for (int64_t px = 0; px < H * W; ++px) {
        if (hits[static_cast<size_t>(px)] < 0) continue;
        auto& [sum, cnt] = seen[static_cast<size_t>(v)][hits[static_cast<size_t>(px)]];
        sum.resize(static_cast<size_t>(C), 0.0);
        for (int64_t ch = 0; ch < C; ++ch) sum[static_cast<size_t>(ch)] += pixel(v, t, ch, px);
        ++cnt;
      }
    }
    for (int64_t a = 0; a < n; ++a)
      for (int64_t b = a + 1; b < n; ++b)
        for (const auto& [voxel, sa] : seen[static_cast<size_t>(a)]) {
          auto it = seen[static_cast<size_t>(b)].find(voxel);
          if (it == seen[static_cast<size_t>(b)].end()) continue;
          const auto& sb = it->second;
          double d = 0.0;
          for (int64_t ch = 0; ch < C; ++ch) {
            d += std::abs(sa.first[static_cast<size_t>(ch)] / sa.second - sb.first[static_cast<size_t>(ch)] / sb.second);
          }
          total += d / static_cast<double>(C);
          ++matches;
        }
  }
  if (matches == 0) throw ConsistencyError("views share no visible voxels");
  return total / static_cast<double>(matches);
}

// ---- training ----------------------------------------------------------------------------

void VideoTrainConfig::validate() const {
  if (steps < 0 || batch_size < 1 || !(lr > 0.0) || warmup_steps < 0 || eval_samples < 1 || lr_floor < 0.0) {
    throw ConfigError("invalid video training config");
  }
}

json VideoTrainConfig::to_json() const {
  return {{"steps", steps},       {"batch_size", batch_size}, {"lr", lr},
          {"warmup_steps", warmup_steps}, {"lr_floor", lr_floor}, {"seed", seed},
          {"eval_samples", eval_samples}, {"log_every", log_every}};
}

VideoTrainConfig VideoTrainConfig::from_json(const json& j) {
  VideoTrainConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "steps") c.steps = value.get<int64_t>();
    else if (key == "batch_size") c.batch_size = value.get<int>();
    else if (key == "lr") c.lr = value.get<double>();
    else if (key == "warmup_steps") c.warmup_steps = value.get<int64_t>();
    else if (key == "lr_floor") c.lr_floor = value.get<double>();
    else if (key == "seed") c.seed = value.get<uint64_t>();
    else if (key == "eval_samples") c.eval_samples = value.get<int>();
    else if (key == "log_every") c.log_every = value.get<int64_t>();
    else throw ConfigError("video training config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

double evaluation_loss(const VideoModel& model, const std::vector<VideoExample>& data, int samples_per_example,
                       uint64_t seed) {
  if (data.empty()) throw ConfigError("evaluation_loss: empty dataset");
  NoGradGuard guard;
  Rng rng(seed);
  const auto field = model.field();
  double total = 0.0;
  for (const auto& ex : data)
    for (int s = 0; s < samples_per_example; ++s) total += video_loss(field, {ex.video}, {ex.condition}, rng).item();
  return total / static_cast<double>(data.size() * static_cast<size_t>(samples_per_example));
}

VideoTrainSummary train_toy_video(VideoModel& model, const std::vector<VideoExample>& data,
                                  const VideoTrainConfig& config, train::JsonlLog* log) {
  config.validate();
  if (data.empty()) throw ConfigError("train_toy_video: empty dataset");
  const double t0 = now_seconds();
  const uint64_t eval_seed = config.seed ^ 0x5DEECE66DULL;
  VideoTrainSummary out;
  out.initial_loss = evaluation_loss(model, data, config.eval_samples, eval_seed);
  Adam opt(parameters_of(model.params()));
  Rng rng(config.seed);
  const auto field = model.field();
  std::vector<size_t> order;
  for (int64_t step = 0; step < config.steps; ++step) {
    std::vector<Tensor> x0, cond;
    for (int b = 0; b < config.batch_size; ++b) {
      if (order.empty()) {
        order.resize(data.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
      }
      x0.push_back(data[order.back()].video);
      cond.push_back(data[order.back()].condition);
      order.pop_back();
    }
    opt.zero_grad();
    auto loss = video_loss(field, x0, cond, rng);
    loss.backward();
    opt.step(cosine_lr(config.lr, step, config.steps, config.warmup_steps, config.lr_floor));
    if (log && config.log_every > 0 && step % config.log_every == 0) {
      log->write({{"phase", "video"}, {"step", step}, {"loss", loss.item()}});
    }
    out.steps = step + 1;
  }
  out.final_loss = evaluation_loss(model, data, config.eval_samples, eval_seed);
  out.seconds = now_seconds() - t0;
  if (log) {
    log->write({{"phase", "video"}, {"steps", out.steps}, {"initial_loss", out.initial_loss},
                {"final_loss", out.final_loss}});
  }
  return out;
}

// ---- export -----------------------------------------------------------------------------------

void export_video(const Tensor& video, const std::filesystem::path& dir, bool png) {
  if (video.rank() != 5) throw ShapeError("video must be (n, t, c, H, W)");
  std::filesystem::create_directories(dir);
  const auto& shape = video.shape();
  {
    std::ofstream m(dir / "video_manifest");
    m << json{{"shape", shape}, {"dtype", "float32"}, {"endianness", "little"}, {"layout", "n,t,c,h,w"}}.dump(2) << '\n';
    if (!m) throw Error("cannot write video manifest");
  }
  std::ofstream blob(dir / "video.f32", std::ios::binary);
  for (double v : video.data()) {
    const uint32_t bits = std::bit_cast<uint32_t>(static_cast<float>(v));
    const char bytes[4] = {static_cast<char>(bits & 0xFF), static_cast<char>((bits >> 8) & 0xFF),
                           static_cast<char>((bits >> 16) & 0xFF), static_cast<char>(bits >> 24)};
    blob.write(bytes, 4);
  }
  if (!blob) throw Error("cannot write video blob");
  if (!png) return;
  const int64_t n = shape[0], T = shape[1], C = shape[2], H = shape[3], W = shape[4];
  const auto data = video.data();
  for (int64_t t = 0; t < T; ++t) {
    std::vector<uint8_t> rgb(static_cast<size_t>(n * W * H * 3));
    for (int64_t v = 0; v < n; ++v)
      for (int64_t r = 0; r < H; ++r)
        for (int64_t col = 0; col < W; ++col)
          for (int64_t ch = 0; ch < 3; ++ch) {
            const double x = data[static_cast<size_t>(((v * T + t) * C + std::min(ch, C - 1)) * H * W + r * W + col)];
            rgb[static_cast<size_t>((r * n * W + v * W + col) * 3 + ch)] =
                static_cast<uint8_t>(std::clamp(std::lround((x + 1.0) * 127.5), 0L, 255L));
          }
    render::write_png(dir / ("frame" + std::to_string(t) + ".png"), static_cast<int>(n * W), static_cast<int>(H), rgb);
  }
}

Tensor import_video(const std::filesystem::path& dir) {
  std::ifstream m(dir / "video_manifest");
  if (!m) throw FormatError("missing video_manifest in " + dir.string());
  Shape shape;
  try {
    const auto j = json::parse(m);
    if (j.at("dtype").get<std::string>() != "float32") throw FormatError("unsupported video dtype");
    shape = j.at("shape").get<Shape>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed video manifest: ") + e.what());
  }
  if (shape.size() != 5) throw FormatError("video manifest shape must have 5 axes");
  std::ifstream blob(dir / "video.f32", std::ios::binary);
  if (!blob) throw FormatError("missing video.f32");
  std::vector<double> values(static_cast<size_t>(numel(shape)));
  for (auto& v : values) {
    unsigned char b[4];
    blob.read(reinterpret_cast<char*>(b), 4);
    if (blob.gcount() != 4) throw TruncatedError("video blob is truncated");
    const uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<uint32_t>(b[3]) << 24);
    v = std::bit_cast<float>(bits);
  }
  return Tensor::from(shape, std::move(values));
}

}  // namespace geniedrive::video
