#include "geniedrive/train/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "geniedrive/core/errors.hpp"
#include "geniedrive/core/io.hpp"
#include "geniedrive/nn/checkpoint.hpp"

namespace geniedrive::train {

using namespace geniedrive::nn;
using nlohmann::json;
using predictor::ControlPredictor;
using predictor::PredictorConfig;
using vae::TriplaneVae;

namespace {

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

void check_finite(double v, const char* phase, int64_t step) {
  if (!std::isfinite(v)) {
    throw NumericError(std::string(phase) + ": non-finite loss at step " + std::to_string(step));
  }
}

int64_t total_steps(const TrainConfig& cfg, size_t samples) {
  const int64_t per_epoch = (static_cast<int64_t>(samples) + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t t = per_epoch * cfg.epochs;
  return cfg.max_steps > 0 ? std::min(t, cfg.max_steps) : t;
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<size_t>(rng.uniform_int(0, i - 1))]);
}

LabelPalette palette_for(const SceneSequence& s) {
  auto p = LabelPalette::standard(s.n_classes);
  p.free_id = s.free_id;
  return p;
}

PredictorConfig loss_config(const PredictorConfig& base, const TrainConfig& t) {
  PredictorConfig c = base;
  if (t.lambda) c.lambda = *t.lambda;
  if (t.beta) c.beta = *t.beta;
  return c;
}

// Previous k frame indices, clamped at the sequence start (oldest first).
std::vector<int> history_indices(int t, int k) {
  std::vector<int> idx;
  for (int j = k; j >= 1; --j) idx.push_back(std::max(t - j, 0));
  return idx;
}

}  // namespace

const char* to_string(Phase p) {
  switch (p) {
    case Phase::Vae: return "vae";
    case Phase::Predictor: return "predictor";
    case Phase::E2E: return "e2e";
  }
  return "?";
}

Phase phase_from_string(const std::string& s) {
  if (s == "vae") return Phase::Vae;
  if (s == "predictor") return Phase::Predictor;
  if (s == "e2e") return Phase::E2E;
  throw ConfigError("unknown training phase '" + s + "'");
}

void TrainConfig::validate() const {
  if (epochs <= 0) throw ConfigError("train: epochs must be > 0");
  if (batch_size <= 0) throw ConfigError("train: batch_size must be > 0");
  if (!(lr > 0)) throw ConfigError("train: lr must be > 0");
  if (warmup_steps < 0 || max_steps < 0 || eval_every < 0 || log_every < 0) {
    throw ConfigError("train: step counts must be >= 0");
  }
  if (lr_floor < 0 || lr_floor > 1) throw ConfigError("train: lr_floor must be in [0, 1]");
  if (kl_weight && *kl_weight < 0) throw ConfigError("train: kl_weight must be >= 0");
  if (lambda && *lambda < 0) throw ConfigError("train: lambda must be >= 0");
  if (beta)
    for (double b : *beta)
      if (b < 0) throw ConfigError("train: beta entries must be >= 0");
  if (rollout_depth < 1) throw ConfigError("train: rollout_depth must be >= 1");
  if (ramp_fraction < 0 || ramp_fraction > 1) throw ConfigError("train: ramp_fraction must be in [0, 1]");
}

json TrainConfig::to_json() const {
  json j = {{"phase", train::to_string(phase)},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"lr", lr},
            {"warmup_steps", warmup_steps},
            {"lr_floor", lr_floor},
            {"max_steps", max_steps},
            {"seed", seed},
            {"rollout_depth", rollout_depth},
            {"ramp_fraction", ramp_fraction},
            {"recon", recon == ReconKind::CeLovasz ? "ce_lovasz" : "l2_onehot"},
            {"latent_supervision", latent_supervision},
            {"early_stop", early_stop},
            {"eval_every", eval_every},
            {"log_every", log_every},
            {"dataset", dataset},
            {"vae_checkpoint", vae_checkpoint},
            {"predictor_checkpoint", predictor_checkpoint},
            {"out", out},
            {"log", log}};
  if (kl_weight) j["kl_weight"] = *kl_weight;
  if (lambda) j["lambda"] = *lambda;
  if (beta) j["beta"] = *beta;
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "phase") c.phase = phase_from_string(value.get<std::string>());
    else if (key == "epochs") c.epochs = value.get<int>();
    else if (key == "batch_size") c.batch_size = value.get<int>();
    else if (key == "lr") c.lr = value.get<double>();
    else if (key == "warmup_steps") c.warmup_steps = value.get<int>();
    else if (key == "lr_floor") c.lr_floor = value.get<double>();
    else if (key == "max_steps") c.max_steps = value.get<int64_t>();
    else if (key == "seed") c.seed = value.get<uint64_t>();
    else if (key == "kl_weight") c.kl_weight = value.get<double>();
    else if (key == "lambda") c.lambda = value.get<double>();
    else if (key == "beta") c.beta = value.get<std::vector<double>>();
    else if (key == "rollout_depth") c.rollout_depth = value.get<int>();
    else if (key == "ramp_fraction") c.ramp_fraction = value.get<double>();
    else if (key == "recon") {
      const auto s = value.get<std::string>();
      if (s == "ce_lovasz") c.recon = ReconKind::CeLovasz;
      else if (s == "l2_onehot") c.recon = ReconKind::L2OneHot;
      else throw ConfigError("train: recon must be 'ce_lovasz' or 'l2_onehot'");
    } else if (key == "latent_supervision") c.latent_supervision = value.get<bool>();
    else if (key == "early_stop") c.early_stop = value.get<bool>();
    else if (key == "eval_every") c.eval_every = value.get<int64_t>();
    else if (key == "log_every") c.log_every = value.get<int64_t>();
    else if (key == "dataset") c.dataset = value.get<std::string>();
    else if (key == "vae_checkpoint") c.vae_checkpoint = value.get<std::string>();
    else if (key == "predictor_checkpoint") c.predictor_checkpoint = value.get<std::string>();
    else if (key == "out") c.out = value.get<std::string>();
    else if (key == "log") c.log = value.get<std::string>();
    else throw ConfigError("train config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

JsonlLog::JsonlLog(const std::filesystem::path& path) : path_(path) {
  if (!path_.empty() && path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
}

void JsonlLog::write(json line) {
  if (!path_.empty()) {
    std::ofstream out(path_, std::ios::app);
    if (!out) throw Error("cannot append to log " + path_.string());
    out << line.dump() << '\n';
  }
  lines_.push_back(std::move(line));
}

// ---- data --------------------------------------------------------------------

uint64_t sequence_seed(uint64_t base, int index) {
  // splitmix64 of (base, index)
  uint64_t z = base * 0x9E3779B97F4A7C15ULL + static_cast<uint64_t>(index) + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::vector<SceneSequence> generate_dataset(const SceneGenConfig& config, int count, uint64_t seed) {
  if (count < 1) throw ConfigError("dataset needs at least one sequence");
  std::vector<SceneSequence> out;
  for (int i = 0; i < count; ++i) out.push_back(generate_synthetic_sequence(config, sequence_seed(seed, i)));
  return out;
}

void save_dataset(const std::vector<SceneSequence>& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (size_t i = 0; i < data.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "seq_%04zu", i);
    save_sequence(data[i], dir / name);
  }
}

std::vector<SceneSequence> load_dataset(const std::filesystem::path& dir) {
  std::vector<SceneSequence> out;
  for (const auto& p : list_sequences(dir)) out.push_back(load_sequence(p));
  if (out.empty()) throw FormatError("no sequences found under " + dir.string());
  return out;
}

// ---- checkpoints ---------------------------------------------------------------

void save_vae(const TriplaneVae& model, const std::filesystem::path& dir) {
  save_checkpoint(model.params(), dir, {{"kind", "vae"}, {"config", model.config().to_json()}});
}

std::unique_ptr<TriplaneVae> load_vae(const std::filesystem::path& dir) {
  const auto meta = read_checkpoint_meta(dir);
  if (meta.value("kind", "") != "vae") throw FormatError(dir.string() + " is not a VAE checkpoint");
  auto model = std::make_unique<TriplaneVae>(vae::VaeConfig::from_json(meta.at("config")), 0);
  load_checkpoint(model->params(), dir);
  return model;
}

void save_predictor(const ControlPredictor& model, const std::filesystem::path& dir, uint64_t vae_fingerprint) {
  save_checkpoint(model.params(), dir,
                  {{"kind", "predictor"}, {"config", model.config().to_json()},
                   {"vae_fingerprint", std::to_string(vae_fingerprint)}});
}

std::unique_ptr<ControlPredictor> load_predictor(const std::filesystem::path& dir, uint64_t* vae_fingerprint) {
  const auto meta = read_checkpoint_meta(dir);
  if (meta.value("kind", "") != "predictor") throw FormatError(dir.string() + " is not a predictor checkpoint");
  auto model = std::make_unique<ControlPredictor>(PredictorConfig::from_json(meta.at("config")), 0);
  load_checkpoint(model->params(), dir);
  if (vae_fingerprint) *vae_fingerprint = std::stoull(meta.value("vae_fingerprint", "0"));
  return model;
}

Snapshot snapshot(const ParamStore& ps) {
  Snapshot s;
  for (const auto& [name, t] : ps.entries()) s.emplace_back(t.data().begin(), t.data().end());
  return s;
}

void restore(ParamStore& ps, const Snapshot& snap) {
  if (snap.size() != ps.entries().size()) throw ShapeError("snapshot does not match the parameter store");
  for (size_t i = 0; i < snap.size(); ++i) {
    auto t = ps.entries()[i].second;
    auto v = t.mutable_data();
    if (v.size() != snap[i].size()) throw ShapeError("snapshot tensor size mismatch");
    std::copy(snap[i].begin(), snap[i].end(), v.begin());
  }
}

// ---- evaluation ------------------------------------------------------------------

std::vector<int> horizon_steps(const std::vector<double>& horizons_s, double fps) {
  std::vector<int> out;
  for (double h : horizons_s) {
    const int s = static_cast<int>(std::lround(h * fps));
    if (s < 1) throw ConfigError("horizon " + std::to_string(h) + " s is shorter than one frame");
    out.push_back(s);
  }
  return out;
}

void EvalReport::validate() const {
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  bool ok = unit(recon_miou) && unit(recon_iou) && unit(avg_forecast_miou) && unit(avg_forecast_iou);
  for (double v : step_miou) ok &= unit(v);
  for (double v : step_iou) ok &= unit(v);
  if (!ok) throw ConsistencyError("evaluation metric outside [0, 1]");
}

json EvalReport::to_json() const {
  json h = json::array();
  for (const auto& m : horizons) h.push_back({{"seconds", m.seconds}, {"step", m.step}, {"miou", m.miou}, {"iou", m.iou}});
  return {{"recon_miou", recon_miou},
          {"recon_iou", recon_iou},
          {"step_miou", step_miou},
          {"step_iou", step_iou},
          {"horizons", h},
          {"avg_forecast_miou", avg_forecast_miou},
          {"avg_forecast_iou", avg_forecast_iou},
          {"fps", fps},
          {"params", {{"vae", vae_params}, {"predictor", predictor_params}}},
          {"windows", windows},
          {"seconds", seconds}};
}

std::vector<ForecastWindow> forecast_windows(const std::vector<SceneSequence>& data, const EvalOptions& o) {
  if (o.past < 1 || o.future < 1) throw ConfigError("evaluation needs past >= 1 and future >= 1");
  const int stride = o.stride > 0 ? o.stride : o.past + o.future;
  std::vector<ForecastWindow> out;
  for (const auto& seq : data) {
    const int L = static_cast<int>(seq.frames.size());
    for (int s = 0; s + o.past + o.future <= L; s += stride) {
      ForecastWindow w;
      w.past.assign(seq.frames.begin() + s, seq.frames.begin() + s + o.past);
      w.future.assign(seq.frames.begin() + s + o.past, seq.frames.begin() + s + o.past + o.future);
      w.controls.assign(seq.controls.begin() + s + o.past - 1, seq.controls.begin() + s + o.past - 1 + o.future);
      out.push_back(std::move(w));
    }
  }
  return out;
}

EvalReport score(const std::vector<ForecastWindow>& windows, const std::vector<std::vector<OccupancyGrid>>& forecasts,
                 const std::vector<OccupancyGrid>& recon_pred, const std::vector<OccupancyGrid>& recon_gt,
                 const LabelPalette& palette, double fps, const EvalOptions& options) {
  if (forecasts.size() != windows.size()) throw ShapeError("one forecast per window is required");
  if (recon_pred.size() != recon_gt.size()) throw ShapeError("reconstruction lists differ in length");
  EvalReport r;
  if (!recon_gt.empty()) {
    MetricAccumulator acc(palette);
    for (size_t i = 0; i < recon_gt.size(); ++i) acc.add(recon_pred[i], recon_gt[i]);
    r.recon_miou = acc.miou().mean;
    r.recon_iou = acc.iou();
  }
  std::vector<MetricAccumulator> steps(static_cast<size_t>(options.future), MetricAccumulator(palette));
  for (size_t w = 0; w < windows.size(); ++w) {
    if (forecasts[w].size() != windows[w].future.size()) throw ShapeError("forecast length differs from the horizon");
    for (size_t t = 0; t < forecasts[w].size(); ++t) steps[t].add(forecasts[w][t], windows[w].future[t]);
  }
  for (auto& a : steps) {
    r.step_miou.push_back(a.samples() ? a.miou().mean : 1.0);
    r.step_iou.push_back(a.samples() ? a.iou() : 1.0);
  }
  r.windows = static_cast<int>(windows.size());
  double sm = 0, si = 0;
  int used = 0;
  for (size_t i = 0; i < options.horizons_s.size(); ++i) {
    const int step = horizon_steps({options.horizons_s[i]}, fps)[0];
    if (step > options.future) continue;
    HorizonMetric m{options.horizons_s[i], step, r.step_miou[step - 1], r.step_iou[step - 1]};
    r.horizons.push_back(m);
    sm += m.miou;
    si += m.iou;
    ++used;
  }
  if (used) {
    r.avg_forecast_miou = sm / used;
    r.avg_forecast_iou = si / used;
  }
  r.validate();
  return r;
}

double recon_miou(const TriplaneVae& vae, const std::vector<SceneSequence>& data, int max_frames) {
  if (data.empty()) throw ConfigError("recon_miou needs data");
  MetricAccumulator acc(palette_for(data.front()));
  int n = 0;
  for (const auto& seq : data)
    for (const auto& f : seq.frames) {
      if (max_frames > 0 && n >= max_frames) return acc.miou().mean;
      acc.add(vae.reconstruct(f), f);
      ++n;
    }
  return acc.miou().mean;
}

EvalReport evaluate(const TriplaneVae& vae, const ControlPredictor& pred, const std::vector<SceneSequence>& data,
                    const EvalOptions& options) {
  if (data.empty()) throw ConfigError("evaluation needs at least one sequence");
  const double t0 = now_seconds();
  const auto& vc = vae.config();
  const auto& pc = pred.config();
  if (pc.h != vc.h() || pc.w != vc.w() || pc.d != vc.d() || pc.channels != vc.channels) {
    throw ConfigError("predictor latent layout does not match the VAE");
  }
  for (const auto& s : data) {
    if (s.frames.front().H != vc.H || s.frames.front().W != vc.W || s.frames.front().D != vc.D ||
        s.n_classes != vc.n_classes) {
      throw ConfigError("dataset grids do not match the VAE configuration");
    }
  }
  NoGradGuard guard;
  std::vector<OccupancyGrid> rp, rg;
  if (options.recon) {
    for (const auto& s : data)
      for (const auto& f : s.frames) {
        rp.push_back(vae.reconstruct(f));
        rg.push_back(f);
      }
  }
  const auto windows = forecast_windows(data, options);
  std::vector<std::vector<OccupancyGrid>> forecasts;
  const double r0 = now_seconds();
  for (const auto& w : windows) forecasts.push_back(predictor::rollout(w.past, w.controls, vae, pred).grids);
  const double rollout_s = now_seconds() - r0;
  auto r = score(windows, forecasts, rp, rg, palette_for(data.front()), data.front().fps, options);
  r.fps = rollout_s > 0 ? static_cast<double>(windows.size()) * options.future / rollout_s : 0.0;
  r.vae_params = vae.params().parameter_count();
  r.predictor_params = pred.params().parameter_count();
  r.seconds = now_seconds() - t0;
  return r;
}

// ---- losses ------------------------------------------------------------------------

SampleLoss predictor_sample_loss(const ControlPredictor& pred, const std::vector<Tensor>& latents,
                                 const SceneSequence& seq, int t, const PredictorConfig& loss_cfg) {
  std::vector<Tensor> hist;
  for (int i : history_indices(t, pred.config().history)) hist.push_back(latents[static_cast<size_t>(i)]);
  const auto& control = seq.controls[static_cast<size_t>(t)];
  auto step = pred.predict_next(latents[static_cast<size_t>(t)], control, hist);
  auto l = predictor::prediction_loss({step.next}, {latents[static_cast<size_t>(t) + 1]}, {step.transform.matrix},
                                      {control.gt_transform}, loss_cfg);
  return {l.total, l.reg};
}

SampleLoss e2e_sample_loss(const TriplaneVae& vae, const ControlPredictor& pred, const SceneSequence& seq, int t,
                           int depth, const TrainConfig& config, const PredictorConfig& loss_cfg) {
  const int L = static_cast<int>(seq.frames.size());
  if (t < 0 || depth < 1 || t + depth >= L) throw ConfigError("e2e sample exceeds the sequence");
  predictor::HistoryBuffer history(pred.config().history);
  for (int i : history_indices(t, pred.config().history)) {
    history.push(predictor::encode_tokens(vae, seq.frames[static_cast<size_t>(i)]));
  }
  auto z = vae.encode(seq.frames[static_cast<size_t>(t)], {.sample = false, .train = false, .seed = 0}).tokens();
  std::vector<Tensor> predicted, targets, matrices;
  std::vector<RigidTransform2D> gts;
  Tensor recon = Tensor::scalar(0.0);
  for (int s = 0; s < depth; ++s) {
    const auto& control = seq.controls[static_cast<size_t>(t + s)];
    auto step = pred.predict_next(z, control, history.window());
    history.push(z.detach());
    z = step.next;
    matrices.push_back(step.transform.matrix);
    gts.push_back(control.gt_transform);
    const auto& target = seq.frames[static_cast<size_t>(t + s + 1)];
    if (config.latent_supervision) {
      predicted.push_back(z);
      targets.push_back(predictor::encode_tokens(vae, target));
      continue;
    }
    auto logits = predictor::decode_tokens(vae, z);
    Tensor term;
    if (config.recon == ReconKind::CeLovasz) {
      term = vae::reconstruction_loss(logits, target);
    } else {
      const int64_t K = logits.dim(3);
      std::vector<double> onehot(static_cast<size_t>(logits.numel()), 0.0);
      for (size_t n = 0; n < target.labels.size(); ++n) onehot[n * K + target.labels[n]] = 1.0;
      term = mse(softmax(logits), Tensor::from(logits.shape(), std::move(onehot)));
    }
    recon = add(recon, scale(term, loss_cfg.beta_at(static_cast<size_t>(s))));
  }
  if (config.latent_supervision) {
    auto l = predictor::prediction_loss(predicted, targets, matrices, gts, loss_cfg);
    return {l.total, l.reg};
  }
  auto l = predictor::prediction_loss({}, {}, matrices, gts, loss_cfg);
  return {add(recon, l.total), l.reg};
}

int ramp_depth(int64_t step, int64_t total, int depth, double ramp_fraction) {
  if (depth <= 1) return 1;
  const double ramp = ramp_fraction * static_cast<double>(total);
  if (ramp <= 0 || static_cast<double>(step) >= ramp) return depth;
  return 1 + static_cast<int>(std::floor((depth - 1) * static_cast<double>(step) / ramp + 1e-9));
}

// ---- phases -----------------------------------------------------------------------

PhaseSummary train_vae(TriplaneVae& model, const std::vector<SceneSequence>& data, const TrainConfig& cfg,
                       JsonlLog* log) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train_vae: empty dataset");
  const double t0 = now_seconds();
  const double kl_weight = cfg.kl_weight.value_or(model.config().kl_weight);
  std::vector<const OccupancyGrid*> frames;
  for (const auto& s : data)
    for (const auto& f : s.frames) frames.push_back(&f);
  const int64_t total = total_steps(cfg, frames.size());
  Adam opt(parameters_of(model.params()));
  Rng rng(cfg.seed);
  PhaseSummary out;
  out.best_metric = -1.0;
  Snapshot best;
  auto evaluate_now = [&](int64_t step) {
    const double m = recon_miou(model, data);
    if (log) log->write({{"phase", "vae"}, {"step", step}, {"recon_miou", m}});
    if (m > out.best_metric) {
      out.best_metric = m;
      best = snapshot(model.params());
    }
  };
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
    std::vector<size_t> order(frames.size());
    std::iota(order.begin(), order.end(), 0);
    shuffle(order, rng);
    for (size_t b = 0; b < order.size() && step < total; b += static_cast<size_t>(cfg.batch_size)) {
      opt.zero_grad();
      const size_t end = std::min(order.size(), b + static_cast<size_t>(cfg.batch_size));
      double loss = 0, ce = 0, lov = 0, kl = 0;
      for (size_t i = b; i < end; ++i) {
        const auto& g = *frames[order[i]];
        auto z = model.encode(g, {.sample = true, .train = true, .seed = rng.next_u64()});
        auto l = vae::vae_loss(g, model.decode(z), z, kl_weight);
        scale(l.total, 1.0 / static_cast<double>(end - b)).backward();
        loss += l.total.item();
        ce += l.ce.item();
        lov += l.lovasz.item();
        kl += l.kl.item();
      }
      const double n = static_cast<double>(end - b);
      check_finite(loss, "train_vae", step);
      opt.step(cosine_lr(cfg.lr, step, total, cfg.warmup_steps, cfg.lr_floor));
      if (step == 0) out.first_loss = loss / n;
      out.last_loss = loss / n;
      if (log && cfg.log_every > 0 && step % cfg.log_every == 0) {
        log->write({{"phase", "vae"}, {"step", step}, {"epoch", epoch}, {"loss", loss / n}, {"ce", ce / n},
                    {"lovasz", lov / n}, {"kl", kl / n}});
      }
      ++step;
      if (cfg.eval_every > 0 && step % cfg.eval_every == 0) evaluate_now(step);
    }
    if (cfg.eval_every == 0) evaluate_now(step);
  }
  if (cfg.eval_every > 0 && step % cfg.eval_every != 0) evaluate_now(step);
  restore(model.params(), best);
  out.steps = step;
  out.seconds = now_seconds() - t0;
  return out;
}

PhaseSummary train_predictor(ControlPredictor& model, const TriplaneVae& vae, const std::vector<SceneSequence>& data,
                             const TrainConfig& cfg, JsonlLog* log) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train_predictor: empty dataset");
  const double t0 = now_seconds();
  const uint64_t vae_before = vae.params().fingerprint();
  const auto loss_cfg = loss_config(model.config(), cfg);

  std::vector<std::vector<Tensor>> latents;
  std::vector<std::pair<size_t, int>> samples;
  for (size_t s = 0; s < data.size(); ++s) {
    std::vector<Tensor> z;
    for (const auto& f : data[s].frames) z.push_back(predictor::encode_tokens(vae, f));
    latents.push_back(std::move(z));
    for (int t = 0; t + 1 < static_cast<int>(data[s].frames.size()); ++t) samples.emplace_back(s, t);
  }
  const int64_t total = total_steps(cfg, samples.size());
  Adam opt(parameters_of(model.params()));
  Rng rng(cfg.seed);
  PhaseSummary out;
  int64_t step = 0;
  double window_loss = 0, window_reg = 0;
  int64_t window_n = 0;
  for (int epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
    auto order = samples;
    shuffle(order, rng);
    for (size_t b = 0; b < order.size() && step < total; b += static_cast<size_t>(cfg.batch_size)) {
      opt.zero_grad();
      const size_t end = std::min(order.size(), b + static_cast<size_t>(cfg.batch_size));
      double loss = 0, reg = 0;
      for (size_t i = b; i < end; ++i) {
        const auto [s, t] = order[i];
        auto l = predictor_sample_loss(model, latents[s], data[s], t, loss_cfg);
        scale(l.total, 1.0 / static_cast<double>(end - b)).backward();
        loss += l.total.item();
        reg += l.reg.item();
      }
      const double n = static_cast<double>(end - b);
      check_finite(loss, "train_predictor", step);
      opt.step(cosine_lr(cfg.lr, step, total, cfg.warmup_steps, cfg.lr_floor));
      if (step == 0) {
        out.first_loss = loss / n;
        out.first_reg = reg / n;
      }
      window_loss += loss / n;
      window_reg += reg / n;
      ++window_n;
      out.last_loss = loss / n;
      out.last_reg = reg / n;
      if (log && cfg.log_every > 0 && step % cfg.log_every == 0) {
        log->write({{"phase", "predictor"}, {"step", step}, {"epoch", epoch}, {"loss", window_loss / window_n},
                    {"l_reg", window_reg / window_n}});
        window_loss = window_reg = 0;
        window_n = 0;
      }
      ++step;
    }
  }
  if (vae.params().fingerprint() != vae_before) {
    throw ConsistencyError("train_predictor modified the frozen VAE parameters");
  }
  // Final losses averaged over the whole set, so the reported trend is not one sample.
  {
    NoGradGuard guard;
    double loss = 0, reg = 0;
    for (const auto& [s, t] : samples) {
      auto l = predictor_sample_loss(model, latents[s], data[s], t, loss_cfg);
      loss += l.total.item();
      reg += l.reg.item();
    }
    out.last_loss = loss / static_cast<double>(samples.size());
    out.last_reg = reg / static_cast<double>(samples.size());
  }
  if (log) log->write({{"phase", "predictor"}, {"step", step}, {"final_loss", out.last_loss}, {"final_l_reg", out.last_reg}});
  out.steps = step;
  out.seconds = now_seconds() - t0;
  return out;
}

E2eSummary train_e2e(TriplaneVae& vae, ControlPredictor& pred, const std::vector<SceneSequence>& data,
                     const std::vector<SceneSequence>& validation, const TrainConfig& cfg,
                     const EvalOptions& eval_options, JsonlLog* log) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train_e2e: empty dataset");
  const double t0 = now_seconds();
  const auto loss_cfg = loss_config(pred.config(), cfg);
  std::vector<std::pair<size_t, int>> samples;
  for (size_t s = 0; s < data.size(); ++s)
    for (int t = 0; t + 1 < static_cast<int>(data[s].frames.size()); ++t) samples.emplace_back(s, t);
  const int64_t total = total_steps(cfg, samples.size());

  auto params = parameters_of(vae.params());
  for (auto& p : parameters_of(pred.params())) params.push_back(p);
  Adam opt(params);
  Rng rng(cfg.seed);
  E2eSummary out;
  const bool tracking = !validation.empty();
  Snapshot best_vae, best_pred;
  auto evaluate_now = [&](int64_t step) {
    auto r = evaluate(vae, pred, validation, eval_options);
    if (log) {
      log->write({{"phase", "e2e"}, {"step", step}, {"val_forecast_miou", r.avg_forecast_miou},
                  {"val_recon_miou", r.recon_miou}});
    }
    if (step == 0) out.before = r;
    if (step == 0 || r.avg_forecast_miou > out.best_metric || !cfg.early_stop) {
      out.best_metric = r.avg_forecast_miou;
      out.best_step = step;
      out.after = r;
      best_vae = snapshot(vae.params());
      best_pred = snapshot(pred.params());
    }
  };
  if (tracking) evaluate_now(0);

  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
    auto order = samples;
    shuffle(order, rng);
    for (size_t b = 0; b < order.size() && step < total; b += static_cast<size_t>(cfg.batch_size)) {
      const int depth = ramp_depth(step, total, cfg.rollout_depth, cfg.ramp_fraction);
      opt.zero_grad();
      const size_t end = std::min(order.size(), b + static_cast<size_t>(cfg.batch_size));
      double loss = 0, reg = 0;
      for (size_t i = b; i < end; ++i) {
        const auto [s, t] = order[i];
        const int avail = static_cast<int>(data[s].frames.size()) - 1 - t;
        auto l = e2e_sample_loss(vae, pred, data[s], t, std::min(depth, avail), cfg, loss_cfg);
        scale(l.total, 1.0 / static_cast<double>(end - b)).backward();
        loss += l.total.item();
        reg += l.reg.item();
      }
      const double n = static_cast<double>(end - b);
      check_finite(loss, "train_e2e", step);
      opt.step(cosine_lr(cfg.lr, step, total, cfg.warmup_steps, cfg.lr_floor));
      if (step == 0) {
        out.first_loss = loss / n;
        out.first_reg = reg / n;
      }
      out.last_loss = loss / n;
      out.last_reg = reg / n;
      if (log && cfg.log_every > 0 && step % cfg.log_every == 0) {
        log->write({{"phase", "e2e"}, {"step", step}, {"epoch", epoch}, {"depth", depth}, {"loss", loss / n},
                    {"l_reg", reg / n}});
      }
      ++step;
      if (tracking && cfg.eval_every > 0 && step % cfg.eval_every == 0) evaluate_now(step);
    }
    if (tracking && cfg.eval_every == 0) evaluate_now(step);
  }
  if (tracking && cfg.eval_every > 0 && step % cfg.eval_every != 0) evaluate_now(step);
  if (tracking) {
    restore(vae.params(), best_vae);
    restore(pred.params(), best_pred);
    out.recon_decreased = out.after.recon_miou < out.before.recon_miou;
    if (log) {
      log->write({{"phase", "e2e"}, {"best_step", out.best_step}, {"forecast_miou_before", out.before.avg_forecast_miou},
                  {"forecast_miou_after", out.after.avg_forecast_miou}, {"recon_miou_before", out.before.recon_miou},
                  {"recon_miou_after", out.after.recon_miou}, {"recon_decreased", out.recon_decreased}});
    }
  }
  out.steps = step;
  out.seconds = now_seconds() - t0;
  return out;
}

}  // namespace geniedrive::train
