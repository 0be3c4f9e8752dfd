#include "geniedrive/vae/triplane_vae.hpp"

#include <algorithm>
#include <cmath>

#include "geniedrive/core/errors.hpp"

namespace geniedrive::vae {

using namespace geniedrive::nn;
using nlohmann::json;

namespace {

constexpr double kLogvarMin = -30.0;
constexpr double kLogvarMax = 20.0;

}  // namespace

void VaeConfig::validate() const {
  if (H <= 0 || W <= 0 || D <= 0) throw ConfigError("vae: grid dims must be positive");
  if (downsample != 4) throw ConfigError("vae: downsample factor is fixed at 4 (two stride-2 stages)");
  if (H % downsample || W % downsample || D % downsample) {
    throw ConfigError("vae: grid dims must be divisible by " + std::to_string(downsample));
  }
  if (n_classes < 2 || free_id < 0 || free_id >= n_classes) throw ConfigError("vae: bad class setup");
  if (channels < 2 || channels % 2) throw ConfigError("vae: channels must be even and >= 2");
  if (heads <= 0 || channels % heads) throw ConfigError("vae: channels must be divisible by heads");
  if (axis_layers < 0) throw ConfigError("vae: axis_layers must be >= 0");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("vae: dropout must be in [0, 1)");
  if (kl_weight < 0.0) throw ConfigError("vae: kl_weight must be >= 0");
}

json VaeConfig::to_json() const {
  return {{"H", H},           {"W", W},         {"D", D},
          {"n_classes", n_classes}, {"free_id", free_id}, {"downsample", downsample},
          {"channels", channels},   {"heads", heads},     {"axis_layers", axis_layers},
          {"dropout", dropout},     {"kl_weight", kl_weight}};
}

VaeConfig VaeConfig::from_json(const json& j) {
  VaeConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "H") c.H = value.get<int>();
    else if (key == "W") c.W = value.get<int>();
    else if (key == "D") c.D = value.get<int>();
    else if (key == "n_classes") c.n_classes = value.get<int>();
    else if (key == "free_id") c.free_id = value.get<int>();
    else if (key == "downsample") c.downsample = value.get<int>();
    else if (key == "channels") c.channels = value.get<int>();
    else if (key == "heads") c.heads = value.get<int>();
    else if (key == "axis_layers") c.axis_layers = value.get<int>();
    else if (key == "dropout") c.dropout = value.get<double>();
    else if (key == "kl_weight") c.kl_weight = value.get<double>();
    else throw ConfigError("vae config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

int64_t triplane_scalar_count(int64_t h, int64_t w, int64_t d, int64_t C) { return (h * w + w * d + h * d) * C; }

void LatentTriPlane::check_shapes() const {
  if (z_xy.rank() != 3 || z_yz.rank() != 3 || z_xz.rank() != 3) throw ShapeError("tri-plane planes must be rank 3");
  const bool ok = z_yz.dim(0) == z_xy.dim(1) && z_xz.dim(0) == z_xy.dim(0) && z_xz.dim(1) == z_yz.dim(1) &&
                  z_yz.dim(2) == z_xy.dim(2) && z_xz.dim(2) == z_xy.dim(2);
  if (!ok) {
    throw ShapeError("inconsistent tri-plane: xy " + to_string(z_xy.shape()) + " yz " + to_string(z_yz.shape()) +
                     " xz " + to_string(z_xz.shape()));
  }
}

Tensor LatentTriPlane::tokens() const {
  check_shapes();
  const int64_t C = channels();
  return concat({reshape(z_xy, {-1, C}), reshape(z_yz, {-1, C}), reshape(z_xz, {-1, C})}, 0);
}

Tensor LatentTriPlane::token_grid() const {
  check_shapes();
  if (h() != w()) throw ShapeError("token grid layout needs h == w");
  return concat({z_xy, z_yz, z_xz}, 1);
}

LatentTriPlane LatentTriPlane::from_tokens(const Tensor& tokens, int64_t h, int64_t w, int64_t d) {
  if (tokens.rank() != 2 || tokens.dim(0) != h * w + w * d + h * d) {
    throw ShapeError("token tensor " + to_string(tokens.shape()) + " does not match planes h=" + std::to_string(h) +
                     " w=" + std::to_string(w) + " d=" + std::to_string(d));
  }
  const int64_t C = tokens.dim(1);
  LatentTriPlane z;
  z.z_xy = reshape(slice(tokens, 0, 0, h * w), {h, w, C});
  z.z_yz = reshape(slice(tokens, 0, h * w, w * d), {w, d, C});
  z.z_xz = reshape(slice(tokens, 0, h * w + w * d, h * d), {h, d, C});
  return z;
}

Tensor compose_volume(const LatentTriPlane& z) {
  z.check_shapes();
  return triplane_product(z.z_xy, z.z_yz, z.z_xz);
}

TriplaneVae::TriplaneVae(const VaeConfig& config, uint64_t init_seed) : cfg_(config) {
  cfg_.validate();
  Rng rng(init_seed);
  const int64_t C = cfg_.channels, C2 = C / 2, K = cfg_.n_classes;
  auto conv = [&](const std::string& name, int64_t cin, int64_t cout, int k, Tensor& w, Tensor& b) {
    w = ps_.create(name + ".weight", {static_cast<int64_t>(k) * k * k * cin, cout}, Init::XavierUniform, rng);
    b = ps_.create(name + ".bias", {cout}, Init::Zeros, rng);
  };
  embed_ = ps_.create("encoder.embed", {K, C2}, Init::Normal, rng, 1.0);
  conv("encoder.down1", C2, C2, 3, down1_w_, down1_b_);
  conv("encoder.down2", C2, C, 3, down2_w_, down2_b_);

  auto make_projector = [&](const std::string& name, int64_t len) {
    AxisProjector p;
    p.token = ps_.create(name + ".token", {C}, Init::Normal, rng, 0.02);
    p.pos = ps_.create(name + ".pos", {len + 1, C}, Init::Normal, rng, 0.02);
    for (int l = 0; l < cfg_.axis_layers; ++l) {
      p.blocks.emplace_back(ps_, name + ".block" + std::to_string(l), C, cfg_.heads, 2 * C, rng);
    }
    p.posterior = Linear(ps_, name + ".posterior", C, 2 * C, rng);
    return p;
  };
  proj_xy_ = make_projector("axis_xy", cfg_.d());
  proj_yz_ = make_projector("axis_yz", cfg_.h());
  proj_xz_ = make_projector("axis_xz", cfg_.w());

  pe_x_ = ps_.create("decoder.pe_x", {cfg_.h(), 1, 1, C}, Init::Normal, rng, 0.02);
  pe_y_ = ps_.create("decoder.pe_y", {1, cfg_.w(), 1, C}, Init::Normal, rng, 0.02);
  pe_z_ = ps_.create("decoder.pe_z", {1, 1, cfg_.d(), C}, Init::Normal, rng, 0.02);
  conv("decoder.conv0", C, C, 3, dec0_w_, dec0_b_);
  up1_w_ = ps_.create("decoder.up1.weight", {C, 8 * C2}, Init::XavierUniform, rng);
  up1_b_ = ps_.create("decoder.up1.bias", {C2}, Init::Zeros, rng);
  conv("decoder.conv1", C2, C2, 3, dec1_w_, dec1_b_);
  up2_w_ = ps_.create("decoder.up2.weight", {C2, 8 * C2}, Init::XavierUniform, rng);
  up2_b_ = ps_.create("decoder.up2.bias", {C2}, Init::Zeros, rng);
  conv("decoder.out", C2, K, 3, out_w_, out_b_);
}

void TriplaneVae::check_grid(const OccupancyGrid& grid) const {
  if (grid.H != cfg_.H || grid.W != cfg_.W || grid.D != cfg_.D) {
    throw ShapeError("grid " + std::to_string(grid.H) + "x" + std::to_string(grid.W) + "x" + std::to_string(grid.D) +
                     " does not match the VAE's " + std::to_string(cfg_.H) + "x" + std::to_string(cfg_.W) + "x" +
                     std::to_string(cfg_.D));
  }
}

Tensor TriplaneVae::project(const AxisProjector& p, const Tensor& seq, bool train, Rng* rng) const {
  const int64_t B = seq.dim(0), C = seq.dim(2);
  auto tok = repeat_leading(reshape(p.token, {1, C}), B);
  auto x = add(concat({tok, seq}, 1), p.pos);
  for (const auto& blk : p.blocks) x = blk(x, train ? cfg_.dropout : 0.0, train ? rng : nullptr);
  return reshape(slice(x, 1, 0, 1), {B, C});
}

LatentTriPlane TriplaneVae::encode(const OccupancyGrid& grid, const EncodeOptions& options) const {
  check_grid(grid);
  Rng rng(options.seed);
  const int64_t h = cfg_.h(), w = cfg_.w(), d = cfg_.d(), C = cfg_.channels;
  std::vector<int64_t> idx(grid.labels.size());
  for (size_t n = 0; n < idx.size(); ++n) {
    if (grid.labels[n] >= cfg_.n_classes) throw ShapeError("grid label exceeds the VAE's class count");
    idx[n] = grid.labels[n];
  }
  auto x = reshape(gather_rows(embed_, idx), {cfg_.H, cfg_.W, cfg_.D, C / 2});
  x = silu(conv3d(x, down1_w_, down1_b_, 3, 2, 1));
  auto S = conv3d(x, down2_w_, down2_b_, 3, 2, 1);  // (h, w, d, C)

  // Each plane collapses one axis: that axis becomes the attention sequence.
  auto f_xy = project(proj_xy_, reshape(S, {h * w, d, C}), options.train, &rng);
  auto f_yz = project(proj_yz_, reshape(permute(S, {1, 2, 0, 3}), {w * d, h, C}), options.train, &rng);
  auto f_xz = project(proj_xz_, reshape(permute(S, {0, 2, 1, 3}), {h * d, w, C}), options.train, &rng);

  LatentTriPlane z;
  auto posterior = [&](const AxisProjector& p, const Tensor& f, Shape shape, Tensor& mean_out, Tensor& logvar_out,
                       Tensor& z_out) {
    auto stats = p.posterior(f);
    mean_out = reshape(slice(stats, 1, 0, C), shape);
    logvar_out = reshape(clamp(slice(stats, 1, C, C), kLogvarMin, kLogvarMax), shape);
    if (!options.sample) {
      z_out = mean_out;
      return;
    }
    std::vector<double> eps(static_cast<size_t>(numel(shape)));
    for (auto& e : eps) e = rng.normal();
    z_out = add(mean_out, mul(exp(scale(logvar_out, 0.5)), Tensor::from(shape, std::move(eps))));
  };
  posterior(proj_xy_, f_xy, {h, w, C}, z.mean_xy, z.logvar_xy, z.z_xy);
  posterior(proj_yz_, f_yz, {w, d, C}, z.mean_yz, z.logvar_yz, z.z_yz);
  posterior(proj_xz_, f_xz, {h, d, C}, z.mean_xz, z.logvar_xz, z.z_xz);
  return z;
}

Tensor TriplaneVae::decode(const LatentTriPlane& z) const {
  z.check_shapes();
  if (z.h() != cfg_.h() || z.w() != cfg_.w() || z.d() != cfg_.d() || z.channels() != cfg_.channels) {
    throw ShapeError("latent planes do not match the VAE configuration");
  }
  auto v = add(compose_volume(z), add(add(pe_x_, pe_y_), pe_z_));
  v = silu(conv3d(v, dec0_w_, dec0_b_, 3, 1, 1));
  v = silu(upconv3d_2x(v, up1_w_, up1_b_));
  v = silu(conv3d(v, dec1_w_, dec1_b_, 3, 1, 1));
  v = silu(upconv3d_2x(v, up2_w_, up2_b_));
  return conv3d(v, out_w_, out_b_, 3, 1, 1);
}

OccupancyGrid TriplaneVae::to_grid(const Tensor& logits, const OccupancyGrid& like) const {
  const int64_t K = cfg_.n_classes;
  if (logits.numel() != static_cast<int64_t>(like.size()) * K) throw ShapeError("logits do not match grid");
  OccupancyGrid out = like;
  const auto lv = logits.data();
  for (size_t n = 0; n < out.size(); ++n) {
    const double* row = lv.data() + n * K;
    out.labels[n] = static_cast<uint8_t>(std::max_element(row, row + K) - row);
  }
  return out;
}

OccupancyGrid TriplaneVae::reconstruct(const OccupancyGrid& grid) const {
  NoGradGuard guard;
  return to_grid(decode(encode(grid, {.sample = false, .train = false, .seed = 0})), grid);
}

void TriplaneVae::set_bias_only_output(int favored, double margin) {
  for (auto& v : out_w_.mutable_data()) v = 0.0;
  auto b = out_b_.mutable_data();
  for (size_t c = 0; c < b.size(); ++c) b[c] = static_cast<int>(c) == favored ? margin : 0.0;
}

Tensor kl_divergence(const LatentTriPlane& z) {
  auto plane = [](const Tensor& mu, const Tensor& logvar) {
    // 0.5 * (mu^2 + sigma^2 - 1 - log sigma^2)
    return scale(nn::mean(add_scalar(sub(add(square(mu), exp(logvar)), logvar), -1.0)), 0.5);
  };
  return add(add(plane(z.mean_xy, z.logvar_xy), plane(z.mean_yz, z.logvar_yz)), plane(z.mean_xz, z.logvar_xz));
}

Tensor reconstruction_loss(const Tensor& logits, const OccupancyGrid& target, Tensor* ce_out, Tensor* lovasz_out) {
  if (logits.rank() != 4 || logits.dim(0) != target.H || logits.dim(1) != target.W || logits.dim(2) != target.D) {
    throw ShapeError("logits " + to_string(logits.shape()) + " do not match the target grid");
  }
  const int64_t K = logits.dim(3);
  const int H = target.H, W = target.W, D = target.D;
  std::vector<int> labels(target.labels.begin(), target.labels.end());
  auto ce = cross_entropy(reshape(logits, {-1, K}), labels);
  // Lovasz groups: one z-slice per group, pixels in (x, y) order.
  std::vector<int> sliced(labels.size());
  for (int k = 0; k < D; ++k)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) sliced[(static_cast<size_t>(k) * H + i) * W + j] = labels[target.index(i, j, k)];
  auto probs = softmax(reshape(permute(logits, {2, 0, 1, 3}), {D, static_cast<int64_t>(H) * W, K}));
  auto lov = lovasz_softmax(probs, sliced);
  if (ce_out) *ce_out = ce;
  if (lovasz_out) *lovasz_out = lov;
  return add(ce, lov);
}

VaeLoss vae_loss(const OccupancyGrid& target, const Tensor& logits, const LatentTriPlane& z, double kl_weight) {
  VaeLoss out;
  auto recon = reconstruction_loss(logits, target, &out.ce, &out.lovasz);
  out.kl = kl_divergence(z);
  out.total = add(recon, scale(out.kl, kl_weight));
  for (double v : {out.ce.item(), out.lovasz.item(), out.kl.item()}) {
    if (!std::isfinite(v)) throw NumericError("vae_loss is not finite");
  }
  return out;
}

}  // namespace geniedrive::vae
