#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "geniedrive/core/errors.hpp"
#include "geniedrive/train/trainer.hpp"

using namespace geniedrive;
using namespace geniedrive::train;
using nn::Tensor;

namespace {

SceneGenConfig tiny_scene() {
  SceneGenConfig c;
  c.H = c.W = 16;
  c.D = 4;
  c.frames = 6;
  return c;
}

vae::VaeConfig tiny_vae(double dropout = 0.0) {
  vae::VaeConfig c;
  c.H = c.W = 16;
  c.D = 4;
  c.channels = 8;
  c.heads = 2;
  c.axis_layers = 1;
  c.dropout = dropout;
  return c;
}

predictor::PredictorConfig tiny_predictor(const vae::VaeConfig& v) {
  auto c = predictor::PredictorConfig::for_vae(v);
  c.layers = 2;
  c.transform_layer = 1;
  c.st_blocks = 1;
  return c;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("geniedrive_train_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

// ---- config -----------------------------------------------------------------------

TEST(TrainConfig, RoundTripAndStrictness) {
  TrainConfig c;
  c.phase = Phase::E2E;
  c.lambda = 0.3;
  c.beta = std::vector<double>{1.0, 0.5};
  c.recon = ReconKind::L2OneHot;
  auto back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());

  auto j = c.to_json();
  j["learning_rate_typo"] = 1.0;
  EXPECT_THROW(TrainConfig::from_json(j), ConfigError);

  TrainConfig bad;
  bad.epochs = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = TrainConfig{};
  bad.lambda = -0.1;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(phase_from_string("warmup"), ConfigError);
}

TEST(JsonlLog, AppendsOneObjectPerLine) {
  auto dir = scratch("log");
  std::filesystem::create_directories(dir);
  {
    JsonlLog log(dir / "run.jsonl");
    log.write({{"step", 0}, {"loss", 1.5}});
    log.write({{"step", 1}, {"loss", 1.25}});
    EXPECT_EQ(log.lines().size(), 2u);
  }
  std::ifstream in(dir / "run.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["step"].get<int>(), n);
    ++n;
  }
  EXPECT_EQ(n, 2);
}

// ---- schedule and horizons -----------------------------------------------------------

TEST(Schedule, HorizonsAtTwoHertz) {
  EXPECT_EQ(horizon_steps({1.0, 2.0, 3.0}, 2.0), (std::vector<int>{2, 4, 6}));
  EXPECT_EQ(horizon_steps({0.5}, 2.0), (std::vector<int>{1}));
}

TEST(Schedule, RampDepthGoesOneToN) {
  EXPECT_EQ(ramp_depth(0, 90, 6, 1.0 / 3.0), 1);
  EXPECT_EQ(ramp_depth(29, 90, 6, 1.0 / 3.0), 5);
  EXPECT_EQ(ramp_depth(30, 90, 6, 1.0 / 3.0), 6);
  EXPECT_EQ(ramp_depth(89, 90, 6, 1.0 / 3.0), 6);
  EXPECT_EQ(ramp_depth(0, 90, 1, 1.0 / 3.0), 1);
  EXPECT_EQ(ramp_depth(0, 90, 6, 0.0), 6);
  int prev = 1;
  for (int s = 0; s < 90; ++s) {
    const int d = ramp_depth(s, 90, 6, 1.0 / 3.0);
    EXPECT_GE(d, prev);
    prev = d;
  }
}

// ---- data and checkpoints --------------------------------------------------------------

TEST(Dataset, GenerateIsDeterministicAndRoundTrips) {
  auto a = generate_dataset(tiny_scene(), 3, 7);
  auto b = generate_dataset(tiny_scene(), 3, 7);
  ASSERT_EQ(a.size(), 3u);
  EXPECT_EQ(a, b);
  EXPECT_NE(a[0], a[1]);
  auto dir = scratch("data");
  save_dataset(a, dir);
  EXPECT_EQ(load_dataset(dir), a);
}

TEST(Checkpoints, VaeAndPredictorRoundTrip) {
  auto vcfg = tiny_vae();
  vae::TriplaneVae v(vcfg, 3);
  predictor::ControlPredictor p(tiny_predictor(vcfg), 4);
  auto dir = scratch("ckpt");
  save_vae(v, dir / "vae");
  save_predictor(p, dir / "pred", v.params().fingerprint());
  auto v2 = load_vae(dir / "vae");
  uint64_t fp = 0;
  auto p2 = load_predictor(dir / "pred", &fp);
  // Stored as float32, so compare against a float round trip of the originals.
  for (size_t i = 0; i < v.params().entries().size(); ++i) {
    const auto a = v.params().entries()[i].second.data();
    const auto b = v2->params().entries()[i].second.data();
    ASSERT_EQ(a.size(), b.size());
    for (size_t k = 0; k < a.size(); ++k) ASSERT_EQ(static_cast<double>(static_cast<float>(a[k])), b[k]);
  }
  EXPECT_EQ(p2->params().parameter_count(), p.params().parameter_count());
  EXPECT_EQ(fp, v.params().fingerprint());
}

TEST(Checkpoints, SnapshotRestore) {
  vae::TriplaneVae v(tiny_vae(), 0);
  auto snap = snapshot(v.params());
  const auto fp = v.params().fingerprint();
  Tensor(v.params().entries()[0].second).mutable_data()[0] += 1.0;
  EXPECT_NE(v.params().fingerprint(), fp);
  restore(v.params(), snap);
  EXPECT_EQ(v.params().fingerprint(), fp);
}

// ---- evaluation ------------------------------------------------------------------------

TEST(Evaluate, InjectedGroundTruthScoresOne) {
  auto scene = tiny_scene();
  scene.frames = 10;
  auto data = generate_dataset(scene, 2, 11);
  EvalOptions o;
  auto windows = forecast_windows(data, o);
  ASSERT_EQ(windows.size(), 2u);
  std::vector<std::vector<OccupancyGrid>> forecasts;
  std::vector<OccupancyGrid> recon;
  for (const auto& w : windows) forecasts.push_back(w.future);
  for (const auto& s : data) recon.insert(recon.end(), s.frames.begin(), s.frames.end());
  auto r = score(windows, forecasts, recon, recon, LabelPalette::standard(scene.n_classes), 2.0, o);
  EXPECT_DOUBLE_EQ(r.recon_miou, 1.0);
  EXPECT_DOUBLE_EQ(r.recon_iou, 1.0);
  ASSERT_EQ(r.horizons.size(), 3u);
  for (const auto& h : r.horizons) {
    EXPECT_DOUBLE_EQ(h.miou, 1.0);
    EXPECT_DOUBLE_EQ(h.iou, 1.0);
  }
  EXPECT_EQ(r.horizons[2].step, 6);
  EXPECT_DOUBLE_EQ(r.avg_forecast_miou, 1.0);
  EXPECT_NO_THROW(r.validate());
}

TEST(Evaluate, ReportsParameterCountsAndValidRange) {
  auto scene = tiny_scene();
  scene.frames = 10;
  auto data = generate_dataset(scene, 1, 5);
  auto vcfg = tiny_vae();
  vae::TriplaneVae v(vcfg, 0);
  predictor::ControlPredictor p(tiny_predictor(vcfg), 1);
  auto r = evaluate(v, p, data, {});
  EXPECT_GT(r.vae_params, 0);
  EXPECT_GT(r.predictor_params, 0);
  EXPECT_GT(r.fps, 0.0);
  EXPECT_EQ(r.windows, 1);
  EXPECT_NO_THROW(r.validate());
  EvalReport bad = r;
  bad.recon_miou = 1.5;
  EXPECT_THROW(bad.validate(), ConsistencyError);
}

// ---- phases ----------------------------------------------------------------------------

TEST(TrainVae, DeterministicWithoutDropout) {
  auto data = generate_dataset(tiny_scene(), 2, 1);
  TrainConfig c;
  c.epochs = 1;
  c.max_steps = 8;
  c.warmup_steps = 2;
  c.seed = 9;
  vae::TriplaneVae a(tiny_vae(0.0), 0), b(tiny_vae(0.0), 0);
  train_vae(a, data, c);
  train_vae(b, data, c);
  EXPECT_EQ(a.params().fingerprint(), b.params().fingerprint());
}

TEST(TrainVae, LossFiniteAndFallsOverFirstHundredSteps) {
  auto data = generate_dataset(tiny_scene(), 4, 2);
  int improved = 0;
  for (uint64_t seed : {0, 1, 2}) {
    TrainConfig c;
    c.epochs = 10;
    c.max_steps = 100;
    c.warmup_steps = 10;
    c.seed = seed;
    c.log_every = 1;
    vae::TriplaneVae v(tiny_vae(0.5), seed);
    JsonlLog log;
    auto s = train_vae(v, data, c, &log);
    EXPECT_TRUE(std::isfinite(s.first_loss));
    // Compare the mean of the first and last ten logged losses.
    std::vector<double> losses;
    for (const auto& l : log.lines())
      if (l.contains("loss")) losses.push_back(l["loss"].get<double>());
    ASSERT_EQ(losses.size(), 100u);
    double head = 0, tail = 0;
    for (int i = 0; i < 10; ++i) {
      head += losses[static_cast<size_t>(i)];
      tail += losses[losses.size() - 1 - static_cast<size_t>(i)];
    }
    if (tail < head) ++improved;
  }
  EXPECT_GE(improved, 2);
}

TEST(TrainVae, RejectsEmptyDataset) {
  vae::TriplaneVae v(tiny_vae(), 0);
  EXPECT_THROW(train_vae(v, {}, TrainConfig{}), ConfigError);
}

TEST(TrainPredictor, LeavesVaeUntouchedAndHalvesRegression) {
  auto data = generate_dataset(tiny_scene(), 4, 3);
  auto vcfg = tiny_vae();
  vae::TriplaneVae v(vcfg, 0);
  predictor::ControlPredictor p(tiny_predictor(vcfg), 1);
  const auto before = v.params().fingerprint();
  TrainConfig c;
  c.phase = Phase::Predictor;
  c.epochs = 15;
  c.lr = 1e-3;
  c.warmup_steps = 10;
  JsonlLog log;
  auto s = train_predictor(p, v, data, c, &log);
  EXPECT_EQ(v.params().fingerprint(), before);
  EXPECT_LE(s.last_reg, 0.5 * s.first_reg) << s.first_reg << " -> " << s.last_reg;
  bool logged_reg = false;
  for (const auto& l : log.lines()) logged_reg |= l.contains("l_reg");
  EXPECT_TRUE(logged_reg);
}

TEST(TrainE2e, LatentSupervisionAtDepthOneMatchesPredictorLoss) {
  auto data = generate_dataset(tiny_scene(), 1, 4);
  auto vcfg = tiny_vae();
  vae::TriplaneVae v(vcfg, 0);
  predictor::ControlPredictor p(tiny_predictor(vcfg), 1);
  std::vector<Tensor> latents;
  for (const auto& f : data[0].frames) latents.push_back(predictor::encode_tokens(v, f));
  TrainConfig c;
  c.latent_supervision = true;
  for (int t = 0; t + 1 < static_cast<int>(data[0].frames.size()); ++t) {
    auto a = e2e_sample_loss(v, p, data[0], t, 1, c, p.config());
    auto b = predictor_sample_loss(p, latents, data[0], t, p.config());
    EXPECT_EQ(a.total.item(), b.total.item()) << "t=" << t;
    EXPECT_EQ(a.reg.item(), b.reg.item()) << "t=" << t;
  }
}

TEST(TrainE2e, EncoderReceivesGradient) {
  auto data = generate_dataset(tiny_scene(), 1, 5);
  auto vcfg = tiny_vae();
  vae::TriplaneVae v(vcfg, 0);
  predictor::ControlPredictor p(tiny_predictor(vcfg), 1);
  TrainConfig c;
  c.lambda = 0.0;
  auto loss_cfg = p.config();
  loss_cfg.lambda = 0.0;
  for (const auto& [name, t] : v.params().entries()) Tensor(t).zero_grad();
  e2e_sample_loss(v, p, data[0], 1, 1, c, loss_cfg).total.backward();

  // Pick the encoder entry with the largest analytic gradient and probe it.
  Tensor probe;
  size_t index = 0;
  double best = 0.0;
  for (const auto& [name, t] : v.params().entries()) {
    if (name.rfind("encoder.", 0) != 0) continue;
    const auto g = t.grad();
    for (size_t i = 0; i < g.size(); ++i) {
      if (std::abs(g[i]) > best) {
        best = std::abs(g[i]);
        probe = t;
        index = i;
      }
    }
  }
  ASSERT_GT(best, 0.0);
  const double analytic = probe.grad()[index];
  nn::NoGradGuard guard;
  auto value = probe.mutable_data();
  const double saved = value[index], h = 1e-5;
  value[index] = saved + h;
  const double up = e2e_sample_loss(v, p, data[0], 1, 1, c, loss_cfg).total.item();
  value[index] = saved - h;
  const double down = e2e_sample_loss(v, p, data[0], 1, 1, c, loss_cfg).total.item();
  value[index] = saved;
  const double numeric = (up - down) / (2 * h);
  // The probe also moves the detached history encodings, so only liveness is
  // compared here, not the value.
  EXPECT_GT(std::abs(numeric), 1e-6);
  EXPECT_GT(std::abs(analytic), 1e-6);
}

TEST(TrainE2e, KeepsBestAndFlagsReconstruction) {
  auto scene = tiny_scene();
  scene.frames = 10;
  auto data = generate_dataset(scene, 2, 6);
  auto val = generate_dataset(scene, 1, 60);
  auto vcfg = tiny_vae();
  vae::TriplaneVae v(vcfg, 0);
  predictor::ControlPredictor p(tiny_predictor(vcfg), 1);
  TrainConfig c;
  c.phase = Phase::E2E;
  c.epochs = 1;
  c.max_steps = 6;
  c.warmup_steps = 1;
  c.eval_every = 3;
  c.rollout_depth = 3;
  JsonlLog log;
  auto s = train_e2e(v, p, data, val, c, {}, &log);
  EXPECT_EQ(s.steps, 6);
  EXPECT_GE(s.after.avg_forecast_miou, s.before.avg_forecast_miou);
  EXPECT_EQ(s.recon_decreased, s.after.recon_miou < s.before.recon_miou);
  // The restored parameters reproduce the reported held-out score.
  auto again = evaluate(v, p, val, {});
  EXPECT_DOUBLE_EQ(again.avg_forecast_miou, s.after.avg_forecast_miou);
  bool flagged = false;
  for (const auto& l : log.lines()) flagged |= l.contains("recon_decreased");
  EXPECT_TRUE(flagged);
}
