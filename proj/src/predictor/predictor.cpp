#include "geniedrive/predictor/predictor.hpp"

#include <cmath>

#include "geniedrive/core/errors.hpp"

namespace geniedrive::predictor {

using namespace geniedrive::nn;
using nlohmann::json;

void PredictorConfig::validate() const {
  if (h <= 0 || w <= 0 || d <= 0) throw ConfigError("predictor: latent plane sizes must be positive");
  if (channels <= 0 || heads <= 0 || channels % heads) throw ConfigError("predictor: channels must be divisible by heads");
  if (layers < 1) throw ConfigError("predictor: at least one MCA layer is required");
  if (transform_layer < 1 || transform_layer > layers) throw ConfigError("predictor: transform_layer must be in [1, layers]");
  if (st_blocks < 0) throw ConfigError("predictor: st_blocks must be >= 0");
  if (history < 1) throw ConfigError("predictor: history window k must be >= 1");
  if (n_waypoints < 1) throw ConfigError("predictor: at least one waypoint token is required");
  if (lambda < 0) throw ConfigError("predictor: lambda must be >= 0");
  for (double b : beta)
    if (b < 0) throw ConfigError("predictor: beta entries must be >= 0");
  if (waypoint_scale <= 0) throw ConfigError("predictor: waypoint_scale must be positive");
}

json PredictorConfig::to_json() const {
  return {{"h", h},
          {"w", w},
          {"d", d},
          {"channels", channels},
          {"heads", heads},
          {"layers", layers},
          {"transform_layer", transform_layer},
          {"st_blocks", st_blocks},
          {"history", history},
          {"n_waypoints", n_waypoints},
          {"lambda", lambda},
          {"beta", beta},
          {"waypoint_scale", waypoint_scale}};
}

PredictorConfig PredictorConfig::from_json(const json& j) {
  PredictorConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "h") c.h = value.get<int>();
    else if (key == "w") c.w = value.get<int>();
    else if (key == "d") c.d = value.get<int>();
    else if (key == "channels") c.channels = value.get<int>();
    else if (key == "heads") c.heads = value.get<int>();
    else if (key == "layers") c.layers = value.get<int>();
    else if (key == "transform_layer") c.transform_layer = value.get<int>();
    else if (key == "st_blocks") c.st_blocks = value.get<int>();
    else if (key == "history") c.history = value.get<int>();
    else if (key == "n_waypoints") c.n_waypoints = value.get<int>();
    else if (key == "lambda") c.lambda = value.get<double>();
    else if (key == "beta") c.beta = value.get<std::vector<double>>();
    else if (key == "waypoint_scale") c.waypoint_scale = value.get<double>();
    else throw ConfigError("predictor config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

PredictorConfig PredictorConfig::for_vae(const vae::VaeConfig& v) {
  PredictorConfig c;
  c.h = v.h();
  c.w = v.w();
  c.d = v.d();
  c.channels = v.channels;
  c.heads = v.heads;
  return c;
}

void HistoryBuffer::push(const Tensor& z) {
  items_.push_back(z);
  while (items_.size() > static_cast<size_t>(k_)) items_.pop_front();
}

std::vector<Tensor> HistoryBuffer::window() const {
  if (items_.empty()) throw ShapeError("history buffer is empty");
  std::vector<Tensor> out;
  for (size_t pad = items_.size(); pad < static_cast<size_t>(k_); ++pad) out.push_back(items_.front());
  out.insert(out.end(), items_.begin(), items_.end());
  return out;
}

Tensor assemble_transform(const Tensor& raw) {
  if (raw.numel() != 4) throw ShapeError("transform head output must have 4 entries");
  auto flat = reshape(raw, {4});
  auto c = slice(flat, 0, 0, 1), s = slice(flat, 0, 1, 1);
  auto norm = sqrt(clamp(add(square(c), square(s)), 1e-24, 1e300));
  c = div(c, norm);
  s = div(s, norm);
  auto zero = Tensor::zeros({1}), one = Tensor::full({1}, 1.0);
  return reshape(concat({c, neg(s), slice(flat, 0, 2, 1), s, c, slice(flat, 0, 3, 1), zero, zero, one}, 0), {3, 3});
}

RigidTransform2D TransformPrediction::value() const {
  const auto m = matrix.data();
  return {std::atan2(m[3], m[0]), m[2], m[5]};
}

Tensor transform_loss(const Tensor& matrix, const RigidTransform2D& gt) {
  const auto g = gt.as_matrix();
  return sum(square(sub(matrix, Tensor::from({3, 3}, std::vector<double>(g.begin(), g.end())))));
}

ControlPredictor::ControlPredictor(const PredictorConfig& config, uint64_t init_seed) : cfg_(config) {
  cfg_.validate();
  Rng rng(init_seed);
  const int64_t C = cfg_.channels;
  command_table_ = ps_.create("control.command", {kCommandCount, C}, Init::Normal, rng, 1.0);
  waypoint_mlp_ = Mlp(ps_, "control.waypoint", 2, C, C, rng);
  waypoint_slot_ = ps_.create("control.slot", {cfg_.n_waypoints, C}, Init::Normal, rng, 0.1);
  token_pos_ = ps_.create("occ.pos", {cfg_.tokens(), C}, Init::Normal, rng, 0.1);
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "mca" + std::to_string(l);
    McaLayer m;
    m.norm_z1 = LayerNorm(ps_, p + ".norm_z1", C, rng);
    m.norm_c1 = LayerNorm(ps_, p + ".norm_c1", C, rng);
    m.norm_z2 = LayerNorm(ps_, p + ".norm_z2", C, rng);
    m.norm_c3 = LayerNorm(ps_, p + ".norm_c3", C, rng);
    m.norm_z3 = LayerNorm(ps_, p + ".norm_z3", C, rng);
    m.occ_from_ctrl = MultiHeadAttention(ps_, p + ".occ_from_ctrl", C, cfg_.heads, rng);
    m.occ_self = MultiHeadAttention(ps_, p + ".occ_self", C, cfg_.heads, rng);
    m.ctrl_from_occ = MultiHeadAttention(ps_, p + ".ctrl_from_occ", C, cfg_.heads, rng);
    layers_.push_back(std::move(m));
  }
  fusion_norm_z_ = LayerNorm(ps_, "fusion.norm_z", C, rng);
  fusion_norm_c_ = LayerNorm(ps_, "fusion.norm_c", C, rng);
  fusion_ = MultiHeadAttention(ps_, "fusion.attn", C, cfg_.heads, rng);
  trans_norm_ = LayerNorm(ps_, "trans.norm", C, rng);
  trans_mlp_ = Mlp(ps_, "trans.mlp", C, C, 4, rng);
  // Start the head near the identity motion so the renormalization is well-posed.
  for (auto& v : trans_mlp_.fc2.weight.mutable_data()) v *= 0.1;
  trans_mlp_.fc2.bias.mutable_data()[0] = 1.0;
  const int64_t k = cfg_.history;
  for (int s = 0; s < cfg_.st_blocks; ++s) {
    const std::string p = "st" + std::to_string(s);
    StBlock b;
    b.norm_attn = LayerNorm(ps_, p + ".norm_attn", C, rng);
    b.norm_temporal = LayerNorm(ps_, p + ".norm_temporal", C, rng);
    b.norm_hist = LayerNorm(ps_, p + ".norm_hist", C, rng);
    b.norm_ffn = LayerNorm(ps_, p + ".norm_ffn", C, rng);
    b.spatial = MultiHeadAttention(ps_, p + ".spatial", C, cfg_.heads, rng);
    b.temporal = Mlp(ps_, p + ".temporal", (k + 1) * C, 2 * C, C, rng);
    b.ffn = Mlp(ps_, p + ".ffn", C, 2 * C, C, rng);
    st_.push_back(std::move(b));
  }
}

Tensor ControlPredictor::embed_control(const ControlSignal& c) const {
  const auto n = static_cast<int64_t>(c.waypoints.size());
  if (n < 1 || n > cfg_.n_waypoints) {
    throw ShapeError("control has " + std::to_string(n) + " waypoints; the predictor takes 1.." +
                     std::to_string(cfg_.n_waypoints));
  }
  const int64_t cmd = static_cast<int>(c.command);
  std::vector<double> xy;
  for (const auto& p : c.waypoints) {
    xy.push_back(p[0] / cfg_.waypoint_scale);
    xy.push_back(p[1] / cfg_.waypoint_scale);
  }
  auto wp = add(waypoint_mlp_(Tensor::from({n, 2}, std::move(xy))), slice(waypoint_slot_, 0, 0, n));
  return concat({slice(command_table_, 0, cmd, 1), wp}, 0);
}

std::pair<Tensor, Tensor> ControlPredictor::mca_layer(int layer, const Tensor& Z, const Tensor& c) const {
  const auto& m = layers_.at(static_cast<size_t>(layer));
  const bool flat = Z.rank() == 2;
  auto z = flat ? reshape(Z, {1, Z.dim(0), Z.dim(1)}) : Z;
  auto ctrl = c.rank() == 2 ? reshape(c, {1, c.dim(0), c.dim(1)}) : c;
  z = add(z, m.occ_from_ctrl(add(m.norm_z1(z), token_pos_), m.norm_c1(ctrl)));
  auto x = add(m.norm_z2(z), token_pos_);
  z = add(z, m.occ_self(x, x));
  ctrl = add(ctrl, m.ctrl_from_occ(m.norm_c3(ctrl), add(m.norm_z3(z), token_pos_)));
  if (flat) z = reshape(z, Z.shape());
  if (c.rank() == 2) ctrl = reshape(ctrl, c.shape());
  return {z, ctrl};
}

TransformPrediction ControlPredictor::transform_head(const Tensor& c_m) const {
  auto pooled = mean_axis(c_m.rank() == 3 ? reshape(c_m, {c_m.dim(1), c_m.dim(2)}) : c_m, 0, true);
  TransformPrediction out;
  out.raw = reshape(trans_mlp_(trans_norm_(pooled)), {4});
  out.matrix = assemble_transform(out.raw);
  return out;
}

StepOutput ControlPredictor::predict_next(const Tensor& Z, const ControlSignal& control,
                                          const std::vector<Tensor>& history) const {
  const int64_t T = cfg_.tokens(), C = cfg_.channels;
  if (Z.rank() != 2 || Z.dim(0) != T || Z.dim(1) != C) {
    throw ShapeError("latent tokens " + to_string(Z.shape()) + " do not match the predictor's (" +
                     std::to_string(T) + ", " + std::to_string(C) + ")");
  }
  if (history.size() != static_cast<size_t>(cfg_.history)) {
    throw ShapeError("predict_next needs exactly k = " + std::to_string(cfg_.history) + " history latents");
  }
  for (const auto& h : history)
    if (h.shape() != Z.shape()) throw ShapeError("history latent shape differs from the current latent");

  auto z = reshape(Z, {1, T, C});
  auto c = reshape(embed_control(control), {1, -1, C});
  StepOutput out;
  for (int l = 0; l < cfg_.layers; ++l) {
    std::tie(z, c) = mca_layer(l, z, c);
    if (l + 1 == cfg_.transform_layer) {
      out.transform = transform_head(c);
      z = add(z, fusion_(add(fusion_norm_z_(z), token_pos_), fusion_norm_c_(c)));
    }
  }
  std::vector<Tensor> hist;
  for (const auto& h : history) hist.push_back(reshape(h, {1, T, C}));
  for (const auto& b : st_) {
    auto x = add(b.norm_attn(z), token_pos_);
    z = add(z, b.spatial(x, x));
    std::vector<Tensor> parts;
    for (const auto& h : hist) parts.push_back(b.norm_hist(h));
    parts.push_back(b.norm_temporal(z));
    z = add(z, b.temporal(concat(parts, 2)));
    z = add(z, b.ffn(b.norm_ffn(z)));
  }
  out.next = reshape(z, {T, C});
  return out;
}

void ControlPredictor::zero_mca_outputs(int layer) {
  auto& m = layers_.at(static_cast<size_t>(layer));
  m.occ_from_ctrl.out.zero();
  m.occ_self.out.zero();
  m.ctrl_from_occ.out.zero();
}

void ControlPredictor::zero_residual_outputs() {
  for (int l = 0; l < cfg_.layers; ++l) zero_mca_outputs(l);
  fusion_.out.zero();
  for (auto& b : st_) {
    b.spatial.out.zero();
    b.temporal.fc2.zero();
    b.ffn.fc2.zero();
  }
}

PredictionLoss prediction_loss(const std::vector<Tensor>& predicted, const std::vector<Tensor>& targets,
                               const std::vector<Tensor>& transform_matrices,
                               const std::vector<RigidTransform2D>& gt_transforms, const PredictorConfig& cfg) {
  if (predicted.size() != targets.size()) throw ShapeError("prediction_loss: predicted/target length mismatch");
  if (transform_matrices.size() != gt_transforms.size()) {
    throw ShapeError("prediction_loss: transform prediction/ground-truth length mismatch");
  }
  PredictionLoss out;
  out.total = Tensor::scalar(0.0);
  for (size_t t = 0; t < predicted.size(); ++t) {
    auto e = mse(predicted[t], targets[t]);
    out.latent_mse.push_back(e.item());
    out.total = add(out.total, scale(e, cfg.beta_at(t)));
  }
  out.reg = Tensor::scalar(0.0);
  if (!transform_matrices.empty()) {
    for (size_t t = 0; t < transform_matrices.size(); ++t) {
      out.reg = add(out.reg, transform_loss(transform_matrices[t], gt_transforms[t]));
    }
    out.reg = scale(out.reg, 1.0 / static_cast<double>(transform_matrices.size()));
  }
  out.total = add(out.total, scale(out.reg, cfg.lambda));
  if (!std::isfinite(out.total.item())) throw NumericError("prediction_loss is not finite");
  return out;
}

Tensor encode_tokens(const vae::TriplaneVae& vae, const OccupancyGrid& grid) {
  NoGradGuard guard;
  return vae.encode(grid, {.sample = false, .train = false, .seed = 0}).tokens();
}

Tensor decode_tokens(const vae::TriplaneVae& vae, const Tensor& tokens) {
  const auto& c = vae.config();
  return vae.decode(vae::LatentTriPlane::from_tokens(tokens, c.h(), c.w(), c.d()));
}

RolloutResult rollout(const std::vector<OccupancyGrid>& initial, const std::vector<ControlSignal>& controls,
                      const vae::TriplaneVae& vae, const ControlPredictor& pred) {
  if (initial.empty()) throw ConfigError("rollout needs at least one initial frame");
  if (controls.empty()) throw ConfigError("rollout needs at least one control");
  NoGradGuard guard;
  HistoryBuffer history(pred.config().history);
  for (size_t i = 0; i + 1 < initial.size(); ++i) history.push(encode_tokens(vae, initial[i]));
  auto current = encode_tokens(vae, initial.back());
  if (history.size() == 0) history.push(current);

  RolloutResult out;
  for (const auto& control : controls) {
    auto step = pred.predict_next(current, control, history.window());
    history.push(current);
    current = step.next;
    out.latents.push_back(current);
    out.transforms.push_back(step.transform.value());
    out.grids.push_back(vae.to_grid(decode_tokens(vae, current), initial.back()));
  }
  return out;
}

}  // namespace geniedrive::predictor
