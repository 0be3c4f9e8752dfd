#include "geniedrive/cli/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <sstream>

#include "geniedrive/core/errors.hpp"
#include "geniedrive/core/io.hpp"
#include "geniedrive/core/occupancy.hpp"
#include "geniedrive/render/splat.hpp"

#ifndef GENIEDRIVE_REVISION
#define GENIEDRIVE_REVISION "unknown"
#endif

namespace geniedrive::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Offsets that derive per-split and per-model seeds from the run seed.
constexpr uint64_t kTrainData = 1000, kValData = 2000, kTestData = 3000, kVideoData = 4000;
constexpr uint64_t kPredInit = 1, kVideoInit = 2, kVideoNoise = 5;

json scene_to_json(const SceneGenConfig& c) {
  return {{"H", c.H},
          {"W", c.W},
          {"D", c.D},
          {"downsample", c.downsample},
          {"n_classes", c.n_classes},
          {"frames", c.frames},
          {"voxel_size", c.voxel_size},
          {"fps", c.fps},
          {"n_dynamic", c.n_dynamic},
          {"static_per_10m", c.static_per_10m},
          {"speed_min", c.speed_min},
          {"speed_max", c.speed_max},
          {"curvature_max", c.curvature_max},
          {"object_speed_min", c.object_speed_min},
          {"object_speed_max", c.object_speed_max},
          {"static_world", c.static_world},
          {"n_waypoints", c.n_waypoints},
          {"n_cameras", c.n_cameras},
          {"image_width", c.image_width},
          {"image_height", c.image_height}};
}

SceneGenConfig scene_from_json(const json& j) {
  SceneGenConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "H") c.H = v.get<int>();
    else if (key == "W") c.W = v.get<int>();
    else if (key == "D") c.D = v.get<int>();
    else if (key == "downsample") c.downsample = v.get<int>();
    else if (key == "n_classes") c.n_classes = v.get<int>();
    else if (key == "frames") c.frames = v.get<int>();
    else if (key == "voxel_size") c.voxel_size = v.get<double>();
    else if (key == "fps") c.fps = v.get<double>();
    else if (key == "n_dynamic") c.n_dynamic = v.get<int>();
    else if (key == "static_per_10m") c.static_per_10m = v.get<double>();
    else if (key == "speed_min") c.speed_min = v.get<double>();
    else if (key == "speed_max") c.speed_max = v.get<double>();
    else if (key == "curvature_max") c.curvature_max = v.get<double>();
    else if (key == "object_speed_min") c.object_speed_min = v.get<double>();
    else if (key == "object_speed_max") c.object_speed_max = v.get<double>();
    else if (key == "static_world") c.static_world = v.get<bool>();
    else if (key == "n_waypoints") c.n_waypoints = v.get<int>();
    else if (key == "n_cameras") c.n_cameras = v.get<int>();
    else if (key == "image_width") c.image_width = v.get<int>();
    else if (key == "image_height") c.image_height = v.get<int>();
    else throw ConfigError("scene config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

json eval_to_json(const train::EvalOptions& o) {
  return {{"past", o.past}, {"future", o.future}, {"horizons_s", o.horizons_s}, {"stride", o.stride},
          {"recon", o.recon}};
}

train::EvalOptions eval_from_json(const json& j) {
  train::EvalOptions o;
  for (const auto& [key, v] : j.items()) {
    if (key == "past") o.past = v.get<int>();
    else if (key == "future") o.future = v.get<int>();
    else if (key == "horizons_s") o.horizons_s = v.get<std::vector<double>>();
    else if (key == "stride") o.stride = v.get<int>();
    else if (key == "recon") o.recon = v.get<bool>();
    else throw ConfigError("eval config: unknown key '" + key + "'");
  }
  return o;
}

// Strict reader for small flat sections: every key must already exist in `defaults`.
json flat_section(const json& defaults, const json& user, const std::string& name) {
  json out = defaults;
  for (const auto& [key, v] : user.items()) {
    if (!defaults.contains(key)) throw ConfigError(name + " config: unknown key '" + key + "'");
    out[key] = v;
  }
  return out;
}

json merged(const json& defaults, const json& user, const std::string& name) {
  if (!user.is_object()) throw ConfigError("section '" + name + "' must be an object");
  json out = defaults;
  for (const auto& [key, v] : user.items()) out[key] = v;
  return out;
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

bool has_checkpoint(const fs::path& dir) { return fs::exists(dir / "manifest") && fs::exists(dir / "weights.bin"); }

std::vector<int> parse_box(const std::string& s) {
  std::vector<int> v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      size_t used = 0;
      v.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--box expects six integers x0,y0,z0,x1,y1,z1");
    }
  }
  if (v.size() != 6) throw ConfigError("--box expects six integers x0,y0,z0,x1,y1,z1");
  return v;
}

LabelPalette palette_of(const SceneSequence& s) {
  auto p = LabelPalette::standard(s.n_classes);
  p.free_id = s.free_id;
  return p;
}

// ---- run context ------------------------------------------------------------------

struct Options {
  std::string config, out = "run", data;
  std::optional<uint64_t> seed;
  // Per-command overrides.
  std::string vae, pred, input, cond, model, op, box;
  int past = -1, future = -1, sequence = -1, start = -1, class_id = -1, steps = -1;
};

class Run {
 public:
  Run(const Options& o, std::ostream& out) : opt_(o), out_(out) {
    cfg_ = o.config.empty() ? RunConfig::defaults() : RunConfig::load(o.config);
    if (o.seed) cfg_.set_seed(*o.seed);
    cfg_.validate();
    dir_ = o.out;
    if (!o.data.empty()) {
      data_root_ = o.data;
    } else if (const char* env = std::getenv("GENIEDRIVE_DATA_DIR"); env && *env) {
      data_root_ = env;
    } else {
      data_root_ = dir_ / "data";
    }
  }

  const RunConfig& config() const { return cfg_; }
  const fs::path& dir() const { return dir_; }
  const fs::path& data_root() const { return data_root_; }
  RunManifest& manifest() { return manifest_; }

  void begin(const std::string& command) {
    manifest_ = RunManifest{};
    manifest_.command = command;
    manifest_.config_hash = config_hash(cfg_.to_json());
    manifest_.seed = cfg_.seed;
    manifest_.revision = revision();
    manifest_.started = utc_now();
    fs::create_directories(dir_);
    write_json(dir_ / "config.json", cfg_.to_json());
    flush();
  }
  void finish(bool ok, const std::string& error = {}) {
    manifest_.finished = utc_now();
    manifest_.status = ok ? "ok" : "failed";
    if (!ok) {
      manifest_.error = error;
      if (manifest_.failed_stage.empty()) manifest_.failed_stage = manifest_.command;
    }
    flush();
  }
  void flush() { write_json(dir_ / "manifests" / (manifest_.command + ".json"), manifest_.to_json()); }

  // ---- artifact locations ----
  fs::path split_dir(const std::string& split) const { return data_root_ / split; }
  fs::path vae_dir() const { return dir_ / "vae"; }
  fs::path pred_dir() const { return dir_ / "pred"; }
  fs::path e2e_dir() const { return dir_ / "e2e"; }
  fs::path rollout_dir() const { return dir_ / "rollout"; }
  fs::path render_dir() const { return dir_ / "render"; }
  fs::path video_dir() const { return dir_ / "video"; }
  fs::path samples_dir() const { return dir_ / "samples"; }
  fs::path eval_dir() const { return dir_ / "eval"; }
  fs::path log_path(const std::string& name) const { return dir_ / "logs" / (name + ".jsonl"); }

  std::vector<SceneSequence> load_split(const std::string& split, const std::string& override_dir = {}) const {
    const fs::path d = override_dir.empty() ? split_dir(split) : fs::path(override_dir);
    if (!fs::exists(d)) throw Error("missing dataset split " + d.string() + " (run gen-data first)");
    auto data = train::load_dataset(d);
    if (data.empty()) throw Error("dataset split " + d.string() + " holds no sequences");
    return data;
  }

  // Models for rollout/eval: explicit flags, else the fine-tuned pair, else the staged pair.
  std::pair<std::unique_ptr<vae::TriplaneVae>, std::unique_ptr<predictor::ControlPredictor>> load_models() const {
    fs::path v = opt_.vae, p = opt_.pred;
    if (v.empty()) v = has_checkpoint(e2e_dir() / "pred") ? e2e_dir() / "vae" : vae_dir();
    if (p.empty()) p = has_checkpoint(e2e_dir() / "pred") ? e2e_dir() / "pred" : pred_dir();
    if (!has_checkpoint(v)) throw Error("missing VAE checkpoint " + v.string());
    if (!has_checkpoint(p)) throw Error("missing predictor checkpoint " + p.string());
    auto vae = train::load_vae(v);
    uint64_t fp = 0;
    auto pred = train::load_predictor(p, &fp);
    if (fp != vae->params().fingerprint()) {
      throw ConsistencyError("predictor " + p.string() + " was trained against a different VAE than " + v.string());
    }
    manifest_outputs_["vae"] = v.string();
    manifest_outputs_["predictor"] = p.string();
    return {std::move(vae), std::move(pred)};
  }

  void check_grid_dims(const SceneSequence& s, const vae::VaeConfig& v) const {
    const auto& g = s.frames.front();
    if (g.H != v.H || g.W != v.W || g.D != v.D || s.n_classes != v.n_classes) {
      throw ConfigError("dataset grids (" + std::to_string(g.H) + "x" + std::to_string(g.W) + "x" +
                        std::to_string(g.D) + ", " + std::to_string(s.n_classes) +
                        " classes) do not match the VAE configuration");
    }
  }

  void output(const std::string& key, const fs::path& p) { manifest_.outputs[key] = p.string(); }
  void adopt_outputs() {
    for (auto& [k, v] : manifest_outputs_) manifest_.outputs[k] = v;
    manifest_outputs_.clear();
  }
  std::ostream& out() { return out_; }
  const Options& options() const { return opt_; }

 private:
  Options opt_;
  std::ostream& out_;
  RunConfig cfg_;
  fs::path dir_, data_root_;
  RunManifest manifest_;
  mutable std::map<std::string, std::string> manifest_outputs_;
};

train::JsonlLog fresh_log(const fs::path& path) {
  fs::create_directories(path.parent_path());
  fs::remove(path);
  return train::JsonlLog(path);
}

// ---- commands ------------------------------------------------------------------------

void cmd_gen_data(Run& run) {
  const auto& c = run.config();
  const std::pair<const char*, std::pair<int, uint64_t>> splits[] = {
      {"train", {c.splits.train, c.seed + kTrainData}},
      {"val", {c.splits.val, c.seed + kValData}},
      {"test", {c.splits.test, c.seed + kTestData}}};
  json summary = json::object();
  for (const auto& [name, spec] : splits) {
    auto data = train::generate_dataset(c.scene, spec.first, spec.second);
    const auto d = run.split_dir(name);
    fs::remove_all(d);
    train::save_dataset(data, d);
    run.output(name, d);
    summary[name] = {{"sequences", spec.first}, {"seed", spec.second}, {"dir", d.string()}};
  }
  run.out() << json{{"gen-data", summary}}.dump(2) << '\n';
}

void cmd_train_vae(Run& run) {
  const auto& c = run.config();
  auto data = run.load_split("train", c.train_vae.dataset);
  run.check_grid_dims(data.front(), c.vae);
  vae::TriplaneVae model(c.vae, c.seed);
  auto log = fresh_log(run.log_path("train_vae"));
  auto s = train::train_vae(model, data, c.train_vae, &log);
  const fs::path out = c.train_vae.out.empty() ? run.vae_dir() : fs::path(c.train_vae.out);
  train::save_vae(model, out);
  run.output("vae", out);
  json j = {{"steps", s.steps}, {"seconds", s.seconds}, {"best_recon_miou", s.best_metric},
            {"first_loss", s.first_loss}, {"last_loss", s.last_loss}};
  write_json(run.dir() / "logs" / "train_vae_summary.json", j);
  run.out() << json{{"train-vae", j}}.dump(2) << '\n';
}

void cmd_train_pred(Run& run) {
  const auto& c = run.config();
  auto data = run.load_split("train", c.train_pred.dataset);
  const fs::path vdir = c.train_pred.vae_checkpoint.empty() ? run.vae_dir() : fs::path(c.train_pred.vae_checkpoint);
  if (!has_checkpoint(vdir)) throw Error("missing VAE checkpoint " + vdir.string() + " (run train-vae first)");
  auto vae = train::load_vae(vdir);
  run.check_grid_dims(data.front(), vae->config());
  auto pc = c.predictor;
  if (pc.h != vae->config().h() || pc.w != vae->config().w() || pc.d != vae->config().d() ||
      pc.channels != vae->config().channels) {
    throw ConfigError("predictor latent dims do not match the VAE checkpoint");
  }
  predictor::ControlPredictor model(pc, c.seed + kPredInit);
  auto log = fresh_log(run.log_path("train_pred"));
  auto s = train::train_predictor(model, *vae, data, c.train_pred, &log);
  const fs::path out = c.train_pred.out.empty() ? run.pred_dir() : fs::path(c.train_pred.out);
  train::save_predictor(model, out, vae->params().fingerprint());
  run.output("predictor", out);
  json j = {{"steps", s.steps}, {"seconds", s.seconds}, {"first_loss", s.first_loss}, {"last_loss", s.last_loss},
            {"first_l_reg", s.first_reg}, {"last_l_reg", s.last_reg}};
  write_json(run.dir() / "logs" / "train_pred_summary.json", j);
  run.out() << json{{"train-pred", j}}.dump(2) << '\n';
}

void cmd_train_e2e(Run& run) {
  const auto& c = run.config();
  auto data = run.load_split("train", c.train_e2e.dataset);
  auto val = run.load_split("val");
  const fs::path vdir = c.train_e2e.vae_checkpoint.empty() ? run.vae_dir() : fs::path(c.train_e2e.vae_checkpoint);
  const fs::path pdir =
      c.train_e2e.predictor_checkpoint.empty() ? run.pred_dir() : fs::path(c.train_e2e.predictor_checkpoint);
  if (!has_checkpoint(vdir)) throw Error("missing VAE checkpoint " + vdir.string());
  if (!has_checkpoint(pdir)) throw Error("missing predictor checkpoint " + pdir.string() + " (run train-pred first)");
  auto vae = train::load_vae(vdir);
  uint64_t fp = 0;
  auto pred = train::load_predictor(pdir, &fp);
  if (fp != vae->params().fingerprint()) throw ConsistencyError("predictor was trained against a different VAE");
  run.check_grid_dims(data.front(), vae->config());
  auto log = fresh_log(run.log_path("train_e2e"));
  auto s = train::train_e2e(*vae, *pred, data, val, c.train_e2e, c.eval, &log);
  const fs::path out = c.train_e2e.out.empty() ? run.e2e_dir() : fs::path(c.train_e2e.out);
  train::save_vae(*vae, out / "vae");
  // Weights are stored as float32, so the link is to the VAE as reloaded.
  train::save_predictor(*pred, out / "pred", train::load_vae(out / "vae")->params().fingerprint());
  json j = {{"steps", s.steps},
            {"seconds", s.seconds},
            {"best_step", s.best_step},
            {"first_loss", s.first_loss},
            {"last_loss", s.last_loss},
            {"val_before", s.before.to_json()},
            {"val_after", s.after.to_json()},
            {"recon_decreased", s.recon_decreased}};
  // Written last: its presence marks the stage as complete.
  write_json(out / "summary.json", j);
  run.output("e2e", out);
  run.out() << json{{"train-e2e",
                     {{"steps", s.steps},
                      {"best_step", s.best_step},
                      {"val_forecast_miou_before", s.before.avg_forecast_miou},
                      {"val_forecast_miou_after", s.after.avg_forecast_miou},
                      {"val_recon_miou_before", s.before.recon_miou},
                      {"val_recon_miou_after", s.after.recon_miou},
                      {"recon_decreased", s.recon_decreased}}}}
                   .dump(2)
            << '\n';
}

void cmd_rollout(Run& run) {
  const auto& c = run.config();
  const auto& o = run.options();
  const int past = o.past > 0 ? o.past : c.eval.past;
  const int future = o.future > 0 ? o.future : c.eval.future;
  const int index = o.sequence >= 0 ? o.sequence : c.rollout.sequence;
  const int start = o.start >= 0 ? o.start : c.rollout.start;
  if (past < 1 || future < 1) throw ConfigError("--past and --future must be >= 1");
  auto data = run.load_split("test");
  if (index >= static_cast<int>(data.size())) throw ConfigError("--sequence is past the end of the test split");
  const auto& seq = data[static_cast<size_t>(index)];
  const int L = static_cast<int>(seq.frames.size());
  if (start + past + future > L) {
    throw ConfigError("sequence has " + std::to_string(L) + " frames; start " + std::to_string(start) + " + past " +
                      std::to_string(past) + " + future " + std::to_string(future) + " do not fit");
  }
  auto [vae, pred] = run.load_models();
  run.adopt_outputs();
  run.check_grid_dims(seq, vae->config());
  const int last = start + past - 1;
  std::vector<OccupancyGrid> initial(seq.frames.begin() + start, seq.frames.begin() + last + 1);
  std::vector<ControlSignal> controls(seq.controls.begin() + last, seq.controls.begin() + last + future);
  auto r = predictor::rollout(initial, controls, *vae, *pred);

  // The forecast is stored as a sequence that starts at the last observed frame.
  SceneSequence forecast;
  forecast.fps = seq.fps;
  forecast.n_classes = seq.n_classes;
  forecast.free_id = seq.free_id;
  forecast.camera_rig = seq.camera_rig;
  forecast.frames.push_back(seq.frames[static_cast<size_t>(last)]);
  forecast.ego_poses.push_back(seq.ego_poses[static_cast<size_t>(last)]);
  const auto palette = palette_of(seq);
  json steps = json::array();
  for (int t = 0; t < future; ++t) {
    auto ctrl = controls[static_cast<size_t>(t)];
    const auto gt = ctrl.gt_transform;
    ctrl.gt_transform = r.transforms[static_cast<size_t>(t)];
    forecast.controls.push_back(ctrl);
    forecast.frames.push_back(r.grids[static_cast<size_t>(t)]);
    forecast.ego_poses.push_back(forecast.ego_poses.back().then(ctrl.gt_transform));
    const auto& truth = seq.frames[static_cast<size_t>(last + 1 + t)];
    const auto& tr = r.transforms[static_cast<size_t>(t)];
    steps.push_back({{"step", t + 1},
                     {"seconds", (t + 1) / seq.fps},
                     {"miou", compute_miou(r.grids[static_cast<size_t>(t)], truth, palette).mean},
                     {"iou", compute_iou(r.grids[static_cast<size_t>(t)], truth, palette.free_id)},
                     {"transform", {{"theta", tr.theta}, {"tx", tr.tx}, {"ty", tr.ty}}},
                     {"gt_transform", {{"theta", gt.theta}, {"tx", gt.tx}, {"ty", gt.ty}}}});
  }
  const auto dir = run.rollout_dir();
  fs::remove_all(dir);
  save_sequence(forecast, dir / "forecast");
  json j = {{"sequence", index}, {"start", start}, {"past", past}, {"future", future}, {"steps", steps}};
  write_json(dir / "rollout.json", j);
  run.output("rollout", dir);
  run.out() << json{{"rollout", j}}.dump(2) << '\n';
}

// Renders the last video.frames frames of `seq` with the video rig.
render::ConditionStack render_tail(const RunConfig& c, const SceneSequence& seq, const fs::path& dir) {
  const int n = std::min<int>(c.video.frames, static_cast<int>(seq.frames.size()));
  std::vector<OccupancyGrid> frames(seq.frames.end() - n, seq.frames.end());
  const auto rig = make_camera_rig(c.video.views, c.video.width, c.video.height);
  const auto palette = palette_of(seq);
  auto stack = render::render_sequence(frames, rig, palette, c.render.alpha);
  fs::remove_all(dir);
  render::export_condition_stack(stack, palette, dir, c.render.png);
  return stack;
}

void cmd_render(Run& run) {
  const fs::path in = run.options().input.empty() ? run.rollout_dir() / "forecast" : fs::path(run.options().input);
  if (!fs::exists(in)) throw Error("missing input sequence " + in.string() + " (run rollout first)");
  auto seq = load_sequence(in);
  auto stack = render_tail(run.config(), seq, run.render_dir());
  run.output("render", run.render_dir());
  run.out() << json{{"render", {{"views", stack.views}, {"frames", stack.frames}, {"dir", run.render_dir().string()}}}}
                   .dump(2)
            << '\n';
}

void cmd_edit(Run& run) {
  const auto& o = run.options();
  if (o.op != "remove" && o.op != "insert") throw ConfigError("--op must be 'remove' or 'insert'");
  if (o.box.empty()) throw ConfigError("--box is required");
  const auto b = parse_box(o.box);
  VoxelBox box{{b[0], b[1], b[2]}, {b[3], b[4], b[5]}};
  const fs::path in = o.input.empty() ? run.rollout_dir() / "forecast" : fs::path(o.input);
  if (!fs::exists(in)) throw Error("missing input sequence " + in.string() + " (run rollout first)");
  auto seq = load_sequence(in);
  const auto palette = palette_of(seq);
  EditSpec spec;
  if (o.op == "remove") {
    spec = EditSpec::remove(box);
  } else {
    if (o.class_id < 0) throw ConfigError("--class is required for insert");
    spec = EditSpec::insert(box, o.class_id);
  }
  int64_t changed = 0;
  for (auto& f : seq.frames) {
    auto edited = edit_grid(f, spec, palette);
    for (size_t i = 0; i < f.labels.size(); ++i) changed += edited.labels[i] != f.labels[i];
    f = std::move(edited);
  }
  const auto dir = run.dir() / "edit";
  fs::remove_all(dir);
  save_sequence(seq, dir / "sequence");
  render_tail(run.config(), seq, dir / "render");
  run.output("edit", dir);
  run.out() << json{{"edit", {{"op", o.op}, {"box", b}, {"changed_voxels", changed}, {"dir", dir.string()}}}}.dump(2)
            << '\n';
}

void cmd_train_video(Run& run) {
  const auto& c = run.config();
  auto data = video::make_toy_video_dataset(c.video, c.video_examples, c.seed + kVideoData);
  video::VideoModel model(c.video, c.seed + kVideoInit);
  auto log = fresh_log(run.log_path("train_video"));
  auto s = video::train_toy_video(model, data, c.train_video, &log);
  video::save_video_model(model, run.video_dir());
  run.output("video", run.video_dir());
  json j = {{"steps", s.steps}, {"seconds", s.seconds}, {"initial_loss", s.initial_loss},
            {"final_loss", s.final_loss}};
  write_json(run.dir() / "logs" / "train_video_summary.json", j);
  run.out() << json{{"train-video", j}}.dump(2) << '\n';
}

void cmd_sample_video(Run& run) {
  const auto& o = run.options();
  const fs::path mdir = o.model.empty() ? run.video_dir() : fs::path(o.model);
  const fs::path cdir = o.cond.empty() ? run.render_dir() : fs::path(o.cond);
  if (!has_checkpoint(mdir)) throw Error("missing video checkpoint " + mdir.string() + " (run train-video first)");
  if (!fs::exists(cdir)) throw Error("missing condition maps " + cdir.string() + " (run render first)");
  auto model = video::load_video_model(mdir);
  const auto& vc = model.config();
  auto stack = render::import_condition_stack(cdir);
  if (stack.views != vc.views || stack.frames != vc.frames || stack.maps.empty() ||
      stack.maps.front().width != vc.width || stack.maps.front().height != vc.height) {
    throw ConfigError("condition maps do not match the video model (views, frames or image size)");
  }
  auto cond = video::condition_tensor(stack, vc.n_labels);
  const int steps = o.steps > 0 ? o.steps : vc.sample_steps;
  auto v = model.sample(cond, steps, run.config().seed + kVideoNoise);
  fs::remove_all(run.samples_dir());
  video::export_video(v, run.samples_dir(), true);
  run.output("samples", run.samples_dir());
  run.out() << json{{"sample-video", {{"steps", steps}, {"shape", v.shape()}, {"dir", run.samples_dir().string()}}}}
                   .dump(2)
            << '\n';
}

// Parameter counts at the full-size latent layout, reported for comparison only.
json full_scale_counts() {
  vae::VaeConfig v;
  v.H = v.W = 200;
  v.D = 16;
  v.channels = 64;
  v.n_classes = 18;
  vae::TriplaneVae model(v, 0);
  predictor::ControlPredictor pred(predictor::PredictorConfig::for_vae(v), 0);
  return {{"vae_params", model.params().parameter_count()},
          {"predictor_params", pred.params().parameter_count()},
          {"reference_total_params_m", 3.47}};
}

void cmd_eval(Run& run) {
  const auto& c = run.config();
  auto data = run.load_split("test");
  auto [vae, pred] = run.load_models();
  run.adopt_outputs();
  run.check_grid_dims(data.front(), vae->config());
  auto report = train::evaluate(*vae, *pred, data, c.eval);
  report.validate();
  json j = report.to_json();
  j["full_scale"] = full_scale_counts();
  write_json(run.eval_dir() / "report.json", j);
  run.output("report", run.eval_dir() / "report.json");
  run.out() << json{{"eval", j}}.dump(2) << '\n';
}

struct Stage {
  std::string name;
  std::function<void(Run&)> fn;
  std::function<bool(const Run&)> done;
};

std::vector<Stage> stages() {
  auto split_ready = [](const Run& r, const char* s, int n) {
    return static_cast<int>(list_sequences(r.split_dir(s)).size()) == n;
  };
  return {
      {"gen-data", cmd_gen_data,
       [=](const Run& r) {
         const auto& sp = r.config().splits;
         return split_ready(r, "train", sp.train) && split_ready(r, "val", sp.val) && split_ready(r, "test", sp.test);
       }},
      {"train-vae", cmd_train_vae, [](const Run& r) { return has_checkpoint(r.vae_dir()); }},
      {"train-pred", cmd_train_pred, [](const Run& r) { return has_checkpoint(r.pred_dir()); }},
      {"train-e2e", cmd_train_e2e, [](const Run& r) { return fs::exists(r.e2e_dir() / "summary.json"); }},
      {"rollout", cmd_rollout, [](const Run& r) { return fs::exists(r.rollout_dir() / "rollout.json"); }},
      {"render", cmd_render, [](const Run& r) { return fs::exists(r.render_dir() / "cond_manifest"); }},
      {"train-video", cmd_train_video, [](const Run& r) { return has_checkpoint(r.video_dir()); }},
      {"sample-video", cmd_sample_video, [](const Run& r) { return fs::exists(r.samples_dir() / "video.f32"); }},
      {"eval", cmd_eval, [](const Run& r) { return fs::exists(r.eval_dir() / "report.json"); }},
  };
}

void cmd_pipeline(Run& run) {
  // Artifacts from another configuration would be silently mixed in on resume.
  const auto hash = config_hash(run.config().to_json());
  const auto stamp = run.dir() / "pipeline_config_hash";
  if (fs::exists(stamp)) {
    std::ifstream f(stamp);
    std::string prev;
    f >> prev;
    if (prev != hash) throw ConfigError("output directory holds a pipeline run with a different config; use a fresh --out");
  } else {
    fs::create_directories(run.dir());
    std::ofstream(stamp) << hash << '\n';
  }
  auto all = stages();
  size_t first = all.size();
  for (size_t i = 0; i < all.size(); ++i) {
    if (!all[i].done(run)) {
      first = i;
      break;
    }
  }
  json report = {{"stages", json::array()}};
  auto& m = run.manifest();
  for (size_t i = 0; i < all.size(); ++i) {
    const auto& st = all[i];
    if (i < first) {
      m.stages.push_back({{"name", st.name}, {"status", "skipped"}});
      continue;
    }
    m.failed_stage = st.name;
    run.flush();
    const auto t0 = std::chrono::steady_clock::now();
    st.fn(run);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    m.stages.push_back({{"name", st.name}, {"status", "ran"}, {"seconds", secs}});
    m.failed_stage.clear();
    run.flush();
  }
  report["stages"] = m.stages;
  auto read = [](const fs::path& p) {
    if (!fs::exists(p)) return json();
    std::ifstream f(p);
    return json::parse(f);
  };
  report["train_vae"] = read(run.dir() / "logs" / "train_vae_summary.json");
  report["train_pred"] = read(run.dir() / "logs" / "train_pred_summary.json");
  report["train_e2e"] = read(run.e2e_dir() / "summary.json");
  report["rollout"] = read(run.rollout_dir() / "rollout.json");
  report["train_video"] = read(run.dir() / "logs" / "train_video_summary.json");
  report["eval"] = read(run.eval_dir() / "report.json");
  write_json(run.dir() / "report.json", report);
  run.output("report", run.dir() / "report.json");
}

std::string stage_of(Run& run, const std::string& command) {
  return run.manifest().failed_stage.empty() ? command : run.manifest().failed_stage;
}

void record_failure(Run& run, const std::string& what, std::ostream& err) {
  try {
    run.finish(false, what);
  } catch (const std::exception& e) {
    err << "could not write the run manifest: " << e.what() << '\n';
  }
}

}  // namespace

// ---- config -----------------------------------------------------------------------

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.vae.dropout = 0.0;  // bit-reproducible runs
  c.predictor = predictor::PredictorConfig::for_vae(c.vae);

  c.train_vae.phase = train::Phase::Vae;
  c.train_vae.epochs = 10;
  c.train_vae.lr = 2e-3;
  c.train_vae.eval_every = 1000;
  c.train_vae.log_every = 500;

  c.train_pred.phase = train::Phase::Predictor;
  c.train_pred.epochs = 10;
  c.train_pred.lr = 1e-3;
  c.train_pred.log_every = 200;

  c.train_e2e.phase = train::Phase::E2E;
  c.train_e2e.epochs = 100;
  c.train_e2e.max_steps = 600;
  c.train_e2e.lr = 1e-4;
  c.train_e2e.warmup_steps = 20;
  c.train_e2e.eval_every = 120;
  c.train_e2e.log_every = 20;

  c.video.frames = c.eval.future;
  c.train_video.lr = 2e-3;
  return c;
}

void RunConfig::set_seed(uint64_t s) {
  seed = s;
  train_vae.seed = train_pred.seed = train_e2e.seed = s;
  train_video.seed = s;
}

void RunConfig::validate() const {
  scene.validate();
  vae.validate();
  predictor.validate();
  train_vae.validate();
  train_pred.validate();
  train_e2e.validate();
  video.validate();
  train_video.validate();
  if (splits.train < 1 || splits.val < 1 || splits.test < 1) throw ConfigError("splits: every split needs >= 1 sequence");
  if (vae.H != scene.H || vae.W != scene.W || vae.D != scene.D || vae.n_classes != scene.n_classes) {
    throw ConfigError("vae grid dims and classes must match the scene");
  }
  if (predictor.h != vae.h() || predictor.w != vae.w() || predictor.d != vae.d() || predictor.channels != vae.channels) {
    throw ConfigError("predictor latent dims must match the vae");
  }
  if (predictor.n_waypoints != scene.n_waypoints) throw ConfigError("predictor and scene waypoint counts differ");
  if (video.n_labels != scene.n_classes) throw ConfigError("video n_labels must equal the scene class count");
  if (eval.past < 1 || eval.future < 1) throw ConfigError("eval: past and future must be >= 1");
  if (eval.stride < 0) throw ConfigError("eval: stride must be >= 0");
  for (double h : eval.horizons_s)
    if (!(h > 0)) throw ConfigError("eval: horizons must be positive");
  if (!(render.alpha > 0 && render.alpha <= 1)) throw ConfigError("render: alpha must be in (0, 1]");
  if (rollout.sequence < 0 || rollout.start < 0) throw ConfigError("rollout: sequence and start must be >= 0");
  if (video_examples < 1) throw ConfigError("video_examples must be >= 1");
}

json RunConfig::to_json() const {
  return {{"seed", seed},
          {"scene", scene_to_json(scene)},
          {"splits", {{"train", splits.train}, {"val", splits.val}, {"test", splits.test}}},
          {"vae", vae.to_json()},
          {"predictor", predictor.to_json()},
          {"train_vae", train_vae.to_json()},
          {"train_pred", train_pred.to_json()},
          {"train_e2e", train_e2e.to_json()},
          {"eval", eval_to_json(eval)},
          {"rollout", {{"sequence", rollout.sequence}, {"start", rollout.start}}},
          {"render", {{"alpha", render.alpha}, {"png", render.png}}},
          {"video", video.to_json()},
          {"train_video", train_video.to_json()},
          {"video_examples", video_examples}};
}

RunConfig RunConfig::from_json(const json& j) {
  try {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    static const std::vector<std::string> known = {"seed",      "scene",     "splits",     "vae",   "predictor",
                                                   "train_vae", "train_pred", "train_e2e", "eval",  "rollout",
                                                   "render",    "video",     "train_video", "video_examples"};
    for (const auto& [key, v] : j.items()) {
      if (std::find(known.begin(), known.end(), key) == known.end()) {
        throw ConfigError("config: unknown key '" + key + "'");
      }
    }
    RunConfig c = defaults();
    if (j.contains("seed")) c.set_seed(j.at("seed").get<uint64_t>());
    const json d = c.to_json();
    auto section = [&](const char* name) { return j.contains(name) ? merged(d[name], j[name], name) : d[name]; };
    c.scene = scene_from_json(section("scene"));
    {
      auto s = flat_section(d["splits"], j.value("splits", json::object()), "splits");
      c.splits = {s["train"].get<int>(), s["val"].get<int>(), s["test"].get<int>()};
    }
    // Grid-derived sections follow the scene unless set explicitly.
    json vae_defaults = d["vae"];
    for (const char* k : {"H", "W", "D", "n_classes"}) vae_defaults[k] = section("scene")[k];
    c.vae = vae::VaeConfig::from_json(j.contains("vae") ? merged(vae_defaults, j["vae"], "vae") : vae_defaults);
    auto pred_defaults = predictor::PredictorConfig::for_vae(c.vae).to_json();
    pred_defaults["n_waypoints"] = c.scene.n_waypoints;
    c.predictor = predictor::PredictorConfig::from_json(
        j.contains("predictor") ? merged(pred_defaults, j["predictor"], "predictor") : pred_defaults);
    c.train_vae = train::TrainConfig::from_json(section("train_vae"));
    c.train_pred = train::TrainConfig::from_json(section("train_pred"));
    c.train_e2e = train::TrainConfig::from_json(section("train_e2e"));
    c.eval = eval_from_json(section("eval"));
    {
      auto r = flat_section(d["rollout"], j.value("rollout", json::object()), "rollout");
      c.rollout = {r["sequence"].get<int>(), r["start"].get<int>()};
      auto rd = flat_section(d["render"], j.value("render", json::object()), "render");
      c.render = {rd["alpha"].get<double>(), rd["png"].get<bool>()};
    }
    json video_defaults = d["video"];
    video_defaults["frames"] = c.eval.future;
    video_defaults["n_labels"] = c.scene.n_classes;
    c.video = video::VideoConfig::from_json(j.contains("video") ? merged(video_defaults, j["video"], "video")
                                                                 : video_defaults);
    c.train_video = video::VideoTrainConfig::from_json(section("train_video"));
    if (j.contains("video_examples")) c.video_examples = j["video_examples"].get<int>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(f, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::string config_hash(const json& normalized) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : normalized.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string revision() { return GENIEDRIVE_REVISION; }

json RunManifest::to_json() const {
  json j = {{"command", command}, {"config_hash", config_hash}, {"seed", seed},       {"revision", revision},
            {"started", started}, {"finished", finished},       {"outputs", outputs}, {"status", status}};
  if (!failed_stage.empty()) j["failed_stage"] = failed_stage;
  if (!error.empty()) j["error"] = error;
  if (!stages.empty()) j["stages"] = stages;
  return j;
}

const std::vector<std::string>& pipeline_stages() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& s : stages()) n.push_back(s.name);
    return n;
  }();
  return names;
}

// ---- dispatch -------------------------------------------------------------------------

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Occupancy world model and multi-view video toolkit", "geniedrive"};
  app.require_subcommand(1, 1);
  Options opt;
  uint64_t seed = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "JSON config file (defaults apply to missing keys)");
    sub->add_option("--seed", seed, "Run seed; overrides every seed in the config");
    sub->add_option("--out", opt.out, "Run directory for artifacts, logs and manifests")->capture_default_str();
    sub->add_option("--data", opt.data, "Dataset root (default: $GENIEDRIVE_DATA_DIR, else <out>/data)");
  };
  auto models = [&](CLI::App* sub) {
    sub->add_option("--vae", opt.vae, "VAE checkpoint directory");
    sub->add_option("--pred", opt.pred, "Predictor checkpoint directory");
  };

  std::map<std::string, std::function<void(Run&)>> commands = {
      {"gen-data", cmd_gen_data},   {"train-vae", cmd_train_vae},     {"train-pred", cmd_train_pred},
      {"train-e2e", cmd_train_e2e}, {"rollout", cmd_rollout},         {"render", cmd_render},
      {"edit", cmd_edit},           {"train-video", cmd_train_video}, {"sample-video", cmd_sample_video},
      {"eval", cmd_eval},           {"pipeline", cmd_pipeline}};
  const std::map<std::string, std::string> help = {
      {"gen-data", "Generate train/val/test synthetic occupancy sequences"},
      {"train-vae", "Train the tri-plane VAE"},
      {"train-pred", "Train the predictor against the frozen VAE"},
      {"train-e2e", "Fine-tune VAE and predictor jointly on decoded forecasts"},
      {"rollout", "Forecast future occupancy from past frames and controls"},
      {"render", "Splat a sequence into per-view semantic condition maps"},
      {"edit", "Remove or insert voxels in a sequence and re-render it"},
      {"train-video", "Train the toy multi-view video model"},
      {"sample-video", "Sample a video conditioned on rendered maps"},
      {"eval", "Score reconstruction and forecasts on the test split"},
      {"pipeline", "Run every stage in order, resuming at the first missing artifact"}};
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, text] : help) {
    auto* sub = app.add_subcommand(name, text);
    common(sub);
    subs[name] = sub;
  }
  models(subs["rollout"]);
  models(subs["eval"]);
  subs["rollout"]->add_option("--past", opt.past, "Observed frames");
  subs["rollout"]->add_option("--future", opt.future, "Forecast steps");
  subs["rollout"]->add_option("--sequence", opt.sequence, "Test-split sequence index");
  subs["rollout"]->add_option("--start", opt.start, "First observed frame");
  subs["render"]->add_option("--input", opt.input, "Sequence directory (default: the rollout forecast)");
  auto* edit = subs["edit"];
  edit->add_option("--op", opt.op, "remove | insert")->required();
  edit->add_option("--box", opt.box, "Voxel box x0,y0,z0,x1,y1,z1 (half-open)")->required();
  edit->add_option("--class", opt.class_id, "Class id stamped by insert");
  edit->add_option("--input", opt.input, "Sequence directory (default: the rollout forecast)");
  subs["sample-video"]->add_option("--model", opt.model, "Video checkpoint directory");
  subs["sample-video"]->add_option("--cond", opt.cond, "Condition stack directory (default: <out>/render)");
  subs["sample-video"]->add_option("--steps", opt.steps, "Euler steps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  std::string name;
  for (const auto& [n, sub] : subs)
    if (sub->parsed()) name = n;
  for (const auto& [n, sub] : subs)
    if (sub->parsed() && sub->count("--seed")) opt.seed = seed;

  // A config that does not load still leaves a manifest behind.
  auto early_failure = [&](const std::string& what) {
    RunManifest m;
    m.command = name;
    m.seed = opt.seed.value_or(0);
    m.revision = revision();
    m.started = m.finished = utc_now();
    m.status = "failed";
    m.failed_stage = "config";
    m.error = what;
    try {
      write_json(fs::path(opt.out) / "manifests" / (name + ".json"), m.to_json());
    } catch (const std::exception& e) {
      err << "could not write the run manifest: " << e.what() << '\n';
    }
  };
  std::unique_ptr<Run> run;
  try {
    run = std::make_unique<Run>(opt, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    early_failure(e.what());
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    early_failure(e.what());
    return 1;
  }
  try {
    run->begin(name);
    commands.at(name)(*run);
    run->finish(true);
    return 0;
  } catch (const ConfigError& e) {
    err << "config error in " << stage_of(*run, name) << ": " << e.what() << '\n';
    record_failure(*run, e.what(), err);
    return 2;
  } catch (const std::exception& e) {
    err << "error in " << stage_of(*run, name) << ": " << e.what() << '\n';
    record_failure(*run, e.what(), err);
    return 1;
  }
}

}  // namespace geniedrive::cli
