#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "geniedrive/core/occupancy.hpp"
#include "geniedrive/core/scene_gen.hpp"
#include "geniedrive/predictor/predictor.hpp"
#include "geniedrive/vae/triplane_vae.hpp"

namespace geniedrive::train {

enum class Phase { Vae, Predictor, E2E };
const char* to_string(Phase p);
Phase phase_from_string(const std::string& s);

/// Decoded-occupancy discrepancy used by the end-to-end phase.
enum class ReconKind { CeLovasz, L2OneHot };

struct TrainConfig {
  Phase phase = Phase::Vae;
  int epochs = 10;
  int batch_size = 1;
  double lr = 2e-3;
  int warmup_steps = 100;
  double lr_floor = 0.05;  // cosine decays to lr * lr_floor
  int64_t max_steps = 0;   // 0: epochs decide
  uint64_t seed = 0;
  // Loss weights; unset values fall back to the model configuration.
  std::optional<double> kl_weight;
  std::optional<double> lambda;
  std::optional<std::vector<double>> beta;
  // End-to-end phase.
  int rollout_depth = 6;        // N
  double ramp_fraction = 1.0 / 3.0;
  ReconKind recon = ReconKind::CeLovasz;
  bool latent_supervision = false;  // regress encoder means instead of decoded occupancy
  bool early_stop = true;
  // Cadence: evaluation every `eval_every` optimizer steps (0: once per epoch).
  int64_t eval_every = 0;
  int64_t log_every = 50;
  // Artifact paths (used by the command-line front end).
  std::string dataset, vae_checkpoint, predictor_checkpoint, out, log;

  void validate() const;
  nlohmann::json to_json() const;
  /// Unknown keys are rejected with ConfigError.
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Append-only line-delimited JSON log; also kept in memory.
class JsonlLog {
 public:
  JsonlLog() = default;
  explicit JsonlLog(const std::filesystem::path& path);
  void write(nlohmann::json line);
  const std::vector<nlohmann::json>& lines() const { return lines_; }

 private:
  std::filesystem::path path_;
  std::vector<nlohmann::json> lines_;
};

// ---- data ------------------------------------------------------------------

/// Per-sequence seed derived from a base seed and index.
uint64_t sequence_seed(uint64_t base, int index);
std::vector<SceneSequence> generate_dataset(const SceneGenConfig& config, int count, uint64_t seed);
/// Writes `dir/seq_0000`, `dir/seq_0001`, ...
void save_dataset(const std::vector<SceneSequence>& data, const std::filesystem::path& dir);
std::vector<SceneSequence> load_dataset(const std::filesystem::path& dir);

// ---- checkpoints ------------------------------------------------------------

void save_vae(const vae::TriplaneVae& model, const std::filesystem::path& dir);
std::unique_ptr<vae::TriplaneVae> load_vae(const std::filesystem::path& dir);
/// Records the fingerprint of the VAE the predictor was trained against.
void save_predictor(const predictor::ControlPredictor& model, const std::filesystem::path& dir,
                    uint64_t vae_fingerprint);
std::unique_ptr<predictor::ControlPredictor> load_predictor(const std::filesystem::path& dir,
                                                            uint64_t* vae_fingerprint = nullptr);

/// Raw parameter values, used to keep the best model seen during a phase.
using Snapshot = std::vector<std::vector<double>>;
Snapshot snapshot(const nn::ParamStore& ps);
void restore(nn::ParamStore& ps, const Snapshot& snap);

// ---- evaluation --------------------------------------------------------------

struct EvalOptions {
  int past = 4;
  int future = 6;
  std::vector<double> horizons_s{1.0, 2.0, 3.0};
  int stride = 0;  // window start stride; 0: past + future (non-overlapping)
  bool recon = true;
};

/// Seconds to rollout steps at the given frame rate (1 s at 2 Hz is step 2).
std::vector<int> horizon_steps(const std::vector<double>& horizons_s, double fps);

struct HorizonMetric {
  double seconds = 0;
  int step = 0;
  double miou = 0, iou = 0;
};

struct EvalReport {
  double recon_miou = 1.0, recon_iou = 1.0;
  std::vector<double> step_miou, step_iou;  // index 0 is one step ahead
  std::vector<HorizonMetric> horizons;
  double avg_forecast_miou = 1.0, avg_forecast_iou = 1.0;
  double fps = 0.0;  // predicted frames per second of rollout (encode + predict + decode)
  int64_t vae_params = 0, predictor_params = 0;
  int windows = 0;
  double seconds = 0.0;

  /// Throws ConsistencyError when a metric leaves [0, 1].
  void validate() const;
  nlohmann::json to_json() const;
};

/// Forecast windows of one sequence: past frames, future controls and ground truth.
struct ForecastWindow {
  std::vector<OccupancyGrid> past;
  std::vector<ControlSignal> controls;
  std::vector<OccupancyGrid> future;
};
std::vector<ForecastWindow> forecast_windows(const std::vector<SceneSequence>& data, const EvalOptions& options);

/// Scores given forecasts (forecasts[w][t] against windows[w].future[t]) and
/// reconstructions against their ground truth.
EvalReport score(const std::vector<ForecastWindow>& windows, const std::vector<std::vector<OccupancyGrid>>& forecasts,
                 const std::vector<OccupancyGrid>& recon_pred, const std::vector<OccupancyGrid>& recon_gt,
                 const LabelPalette& palette, double fps, const EvalOptions& options);

EvalReport evaluate(const vae::TriplaneVae& vae, const predictor::ControlPredictor& pred,
                    const std::vector<SceneSequence>& data, const EvalOptions& options);

/// Dataset-level reconstruction mIoU (encode means, decode, argmax).
double recon_miou(const vae::TriplaneVae& vae, const std::vector<SceneSequence>& data, int max_frames = 0);

// ---- training phases ---------------------------------------------------------

struct PhaseSummary {
  int64_t steps = 0;
  double seconds = 0.0;
  double best_metric = 0.0;  // recon mIoU (VAE) or held-out forecast mIoU (E2E)
  double first_loss = 0.0, last_loss = 0.0;
  double first_reg = 0.0, last_reg = 0.0;  // transform regression (predictor, E2E)
};

/// Minimizes the VAE objective; keeps the parameters with the best train recon mIoU.
PhaseSummary train_vae(vae::TriplaneVae& model, const std::vector<SceneSequence>& data, const TrainConfig& config,
                       JsonlLog* log = nullptr);

/// Teacher-forced next-latent regression against a frozen VAE. Throws
/// ConsistencyError if the VAE parameters change during the phase.
PhaseSummary train_predictor(predictor::ControlPredictor& model, const vae::TriplaneVae& vae,
                             const std::vector<SceneSequence>& data, const TrainConfig& config,
                             JsonlLog* log = nullptr);

struct E2eSummary : PhaseSummary {
  EvalReport before, after;  // held-out (validation) reports
  bool recon_decreased = false;
  int64_t best_step = 0;
};

/// Joint fine-tuning on decoded multi-step forecasts. With a non-empty
/// `validation` set and early_stop, the parameters with the best held-out
/// average forecast mIoU (including the starting point) are kept.
E2eSummary train_e2e(vae::TriplaneVae& vae, predictor::ControlPredictor& pred, const std::vector<SceneSequence>& data,
                     const std::vector<SceneSequence>& validation, const TrainConfig& config,
                     const EvalOptions& eval_options, JsonlLog* log = nullptr);

struct SampleLoss {
  nn::Tensor total;
  nn::Tensor reg;
};

/// Teacher-forced predictor loss for frame t of `seq` from precomputed latents.
SampleLoss predictor_sample_loss(const predictor::ControlPredictor& pred, const std::vector<nn::Tensor>& latents,
                                 const SceneSequence& seq, int t, const predictor::PredictorConfig& loss_cfg);

/// End-to-end loss for a rollout of `depth` steps starting at frame t. The
/// current frame is encoded with gradient; history frames are not.
SampleLoss e2e_sample_loss(const vae::TriplaneVae& vae, const predictor::ControlPredictor& pred,
                           const SceneSequence& seq, int t, int depth, const TrainConfig& config,
                           const predictor::PredictorConfig& loss_cfg);

/// Rollout depth at `step` of `total` steps: ramps 1 -> N over the first ramp_fraction.
int ramp_depth(int64_t step, int64_t total, int depth, double ramp_fraction);

}  // namespace geniedrive::train
