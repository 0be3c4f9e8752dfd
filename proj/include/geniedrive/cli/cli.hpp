#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "geniedrive/core/scene_gen.hpp"
#include "geniedrive/predictor/predictor.hpp"
#include "geniedrive/train/trainer.hpp"
#include "geniedrive/vae/triplane_vae.hpp"
#include "geniedrive/video/mva_video.hpp"

namespace geniedrive::cli {

struct Splits {
  int train = 32;
  int val = 8;
  int test = 16;
};

struct RenderOptions {
  double alpha = 0.95;
  bool png = true;
};

struct RolloutOptions {
  int sequence = 0;  // index into the test split
  int start = 0;     // first past frame
};

/// Everything a run needs, one JSON object with one section per stage.
/// Sections are merged over the defaults; unknown keys are rejected.
struct RunConfig {
  uint64_t seed = 0;
  SceneGenConfig scene;
  Splits splits;
  vae::VaeConfig vae;
  predictor::PredictorConfig predictor;
  train::TrainConfig train_vae, train_pred, train_e2e;
  train::EvalOptions eval;
  RolloutOptions rollout;
  RenderOptions render;
  video::VideoConfig video;
  video::VideoTrainConfig train_video;
  int video_examples = 16;

  static RunConfig defaults();
  /// Per-section checks plus cross-section agreement (grid dims, classes, latent dims).
  void validate() const;
  /// Sets the run seed and every phase seed derived from it.
  void set_seed(uint64_t s);
  nlohmann::json to_json() const;
  /// Throws ConfigError on unknown keys, wrong types or invalid values.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

/// 16 hex digits of FNV-1a over the compact dump (keys sorted) of `normalized`.
std::string config_hash(const nlohmann::json& normalized);
/// Source revision recorded at configure time ("unknown" outside a checkout).
std::string revision();

struct RunManifest {
  std::string command;
  std::string config_hash;
  uint64_t seed = 0;
  std::string revision;
  std::string started, finished;  // UTC, ISO 8601
  std::map<std::string, std::string> outputs;
  std::string status = "running";  // running | ok | failed
  std::string failed_stage;
  std::string error;
  nlohmann::json stages = nlohmann::json::array();

  nlohmann::json to_json() const;
};

/// Stage order of `pipeline`: occupancy first, then the video stages, then eval.
const std::vector<std::string>& pipeline_stages();

/// Runs one command line. Exit codes: 0 success, 2 configuration or usage
/// error, 1 runtime failure.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace geniedrive::cli
