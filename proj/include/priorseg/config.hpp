#pragma once

#include <filesystem>
#include <set>
#include <string>

#include <json.hpp>

#include "priorseg/phantom.hpp"
#include "priorseg/registration.hpp"
#include "priorseg/retrieval.hpp"
#include "priorseg/training.hpp"

namespace priorseg {

struct PipelinePaths {
  std::filesystem::path data_root = "data";
  std::filesystem::path index = "index.raw";
  std::filesystem::path checkpoints = "checkpoints";
  std::filesystem::path reports = "reports";
};

/// Synthetic cohort: count subjects with seeds base_seed, base_seed + 1, ...;
/// the last test_count of them form the test split.
struct CohortConfig {
  int count = 7;
  int test_count = 2;
  std::uint64_t base_seed = 1;
  PhantomSpec spec;
};

struct PipelineConfig {
  PipelinePaths paths;
  CohortConfig cohort;
  FeatureConfig retrieval;
  RegistrationConfig registration;
  TrainConfig train;
  StitchConfig stitch;
};

/// Reduced budget for CPU-scale experiments: a 3-level, 8-filter network and
/// 6 epochs of 512 patches.
inline PipelineConfig tiny_preset() {
  PipelineConfig c;
  c.train.network.depth = 3;
  c.train.network.base_filters = 8;
  c.train.epochs = 6;
  c.train.patches_per_epoch = 512;
  c.train.batch_size = 16;
  c.train.adam.learning_rate = 3e-3;
  return c;
}

inline void validate(const PipelineConfig& c) {
  if (c.cohort.count < 0) throw Error("cohort.count must be >= 0");
  if (c.cohort.test_count < 0 || c.cohort.test_count > c.cohort.count)
    throw Error("cohort.test_count must be in [0, cohort.count]");
  detail::check_phantom_spec(c.cohort.spec);
  if (c.retrieval.histogram_bins < 1 || c.retrieval.thumbnail_size < 1)
    throw Error("retrieval histogram_bins and thumbnail_size must be >= 1");
  const auto& r = c.registration;
  if (r.levels < 1 || r.refine_radius < 1 || r.candidates < 1 || !(r.shift_step_px > 0) || !(r.rotation_step_deg > 0) ||
      !(r.max_shift_px >= 0) || !(r.max_rotation_deg >= 0) || !(r.smoothing_sigma >= 0))
    throw Error(
        "registration search ranges must be nonnegative with positive steps; levels, refine_radius and "
        "candidates must be >= 1");
  validate(c.train);
  NetworkConfig net = c.train.network;
  net.in_channels = input_channels(c.train.channel_mode);
  validate(net);
  if (c.stitch.window != kPatchSize) throw Error("stitch.window must equal the patch size 64");
  if (c.stitch.stride < 1 || c.stitch.stride > c.stitch.window)
    throw Error("stitch.stride must be in [1, window]");
}

namespace detail {

/// Applies j[key] to field when present; records the key as consumed.
template <class V>
void take(const nlohmann::json& j, std::string_view key, V& field, std::set<std::string>& seen) {
  const std::string k(key);
  seen.insert(k);
  if (!j.contains(k)) return;
  try {
    field = j.at(k).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw Error("config key '" + k + "': " + e.what());
  }
}

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& seen,
                           std::string_view section) {
  if (!j.is_object()) throw Error("config section '" + std::string(section) + "' must be an object");
  for (const auto& [k, v] : j.items())
    if (!seen.count(k)) throw Error("unknown config key '" + std::string(section) + "." + k + "'");
}

}  // namespace detail

/// Overrides defaults (tiny preset when "preset" is "tiny") with the keys
/// present in j. Unknown keys are errors.
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  using detail::take;
  std::set<std::string> top;
  std::string preset = "default";
  take(j, "preset", preset, top);
  PipelineConfig c;
  if (preset == "tiny") c = tiny_preset();
  else if (preset != "default") throw Error("unknown preset '" + preset + "'");

  const auto section = [&](const char* name, auto&& apply) {
    top.insert(name);
    if (!j.contains(name)) return;
    std::set<std::string> seen;
    apply(j.at(name), seen);
    detail::reject_unknown(j.at(name), seen, name);
  };

  section("paths", [&](const nlohmann::json& s, std::set<std::string>& seen) {
    std::string data = c.paths.data_root.string(), index = c.paths.index.string(),
                ckpt = c.paths.checkpoints.string(), reports = c.paths.reports.string();
    take(s, "data_root", data, seen);
    take(s, "index", index, seen);
    take(s, "checkpoints", ckpt, seen);
    take(s, "reports", reports, seen);
    c.paths = {data, index, ckpt, reports};
  });
  section("cohort", [&](const nlohmann::json& s, std::set<std::string>& seen) {
    auto& p = c.cohort.spec;
    take(s, "count", c.cohort.count, seen);
    take(s, "test_count", c.cohort.test_count, seen);
    take(s, "base_seed", c.cohort.base_seed, seen);
    take(s, "shape", p.shape, seen);
    take(s, "spacing", p.spacing, seen);
    take(s, "noise_std", p.noise_std, seen);
    take(s, "deformation_amplitude", p.deformation_amplitude, seen);
    take(s, "pose_rotation_deg", p.pose_rotation_deg, seen);
    take(s, "pose_shift_px", p.pose_shift_px, seen);
    take(s, "intensity", p.intensity, seen);
  });
  section("retrieval", [&](const nlohmann::json& s, std::set<std::string>& seen) {
    std::string modality(modality_name(c.retrieval.modality));
    take(s, "histogram_bins", c.retrieval.histogram_bins, seen);
    take(s, "thumbnail_size", c.retrieval.thumbnail_size, seen);
    take(s, "min_brain_pixels", c.retrieval.min_brain_pixels, seen);
    take(s, "modality", modality, seen);
    c.retrieval.modality = parse_modality(modality);
  });
  section("registration", [&](const nlohmann::json& s, std::set<std::string>& seen) {
    auto& r = c.registration;
    take(s, "levels", r.levels, seen);
    take(s, "max_shift_px", r.max_shift_px, seen);
    take(s, "shift_step_px", r.shift_step_px, seen);
    take(s, "max_rotation_deg", r.max_rotation_deg, seen);
    take(s, "rotation_step_deg", r.rotation_step_deg, seen);
    take(s, "refine_radius", r.refine_radius, seen);
    take(s, "candidates", r.candidates, seen);
    take(s, "smoothing_sigma", r.smoothing_sigma, seen);
  });
  section("train", [&](const nlohmann::json& s, std::set<std::string>& seen) {
    auto& t = c.train;
    std::string mode(channel_mode_name(t.channel_mode));
    take(s, "epochs", t.epochs, seen);
    take(s, "patches_per_epoch", t.patches_per_epoch, seen);
    take(s, "batch_size", t.batch_size, seen);
    take(s, "learning_rate", t.adam.learning_rate, seen);
    take(s, "beta1", t.adam.beta1, seen);
    take(s, "beta2", t.adam.beta2, seen);
    take(s, "epsilon", t.adam.epsilon, seen);
    take(s, "base_seed", t.base_seed, seen);
    take(s, "repetitions", t.repetitions, seen);
    take(s, "gate_threshold", t.gate_threshold, seen);
    take(s, "foreground_floor", t.foreground_floor, seen);
    take(s, "channel_mode", mode, seen);
    t.channel_mode = parse_channel_mode(mode);
  });
  section("network", [&](const nlohmann::json& s, std::set<std::string>& seen) {
    auto& n = c.train.network;
    take(s, "depth", n.depth, seen);
    take(s, "base_filters", n.base_filters, seen);
    take(s, "kernel_size", n.kernel_size, seen);
    take(s, "bn_momentum", n.bn_momentum, seen);
    take(s, "bn_eps", n.bn_eps, seen);
  });
  section("stitch", [&](const nlohmann::json& s, std::set<std::string>& seen) {
    take(s, "window", c.stitch.window, seen);
    take(s, "stride", c.stitch.stride, seen);
    take(s, "batch", c.stitch.batch, seen);
  });
  detail::reject_unknown(j, top, "");
  validate(c);
  return c;
}

inline nlohmann::json to_json(const PipelineConfig& c) {
  const auto& p = c.cohort.spec;
  const auto& t = c.train;
  const auto& r = c.registration;
  return {
      {"paths",
       {{"data_root", c.paths.data_root.string()},
        {"index", c.paths.index.string()},
        {"checkpoints", c.paths.checkpoints.string()},
        {"reports", c.paths.reports.string()}}},
      {"cohort",
       {{"count", c.cohort.count},
        {"test_count", c.cohort.test_count},
        {"base_seed", c.cohort.base_seed},
        {"shape", p.shape},
        {"spacing", p.spacing},
        {"noise_std", p.noise_std},
        {"deformation_amplitude", p.deformation_amplitude},
        {"pose_rotation_deg", p.pose_rotation_deg},
        {"pose_shift_px", p.pose_shift_px},
        {"intensity", p.intensity}}},
      {"retrieval",
       {{"histogram_bins", c.retrieval.histogram_bins},
        {"thumbnail_size", c.retrieval.thumbnail_size},
        {"min_brain_pixels", c.retrieval.min_brain_pixels},
        {"modality", std::string(modality_name(c.retrieval.modality))}}},
      {"registration",
       {{"levels", r.levels},
        {"max_shift_px", r.max_shift_px},
        {"shift_step_px", r.shift_step_px},
        {"max_rotation_deg", r.max_rotation_deg},
        {"rotation_step_deg", r.rotation_step_deg},
        {"refine_radius", r.refine_radius},
        {"candidates", r.candidates},
        {"smoothing_sigma", r.smoothing_sigma}}},
      {"train",
       {{"epochs", t.epochs},
        {"patches_per_epoch", t.patches_per_epoch},
        {"batch_size", t.batch_size},
        {"learning_rate", t.adam.learning_rate},
        {"beta1", t.adam.beta1},
        {"beta2", t.adam.beta2},
        {"epsilon", t.adam.epsilon},
        {"base_seed", t.base_seed},
        {"repetitions", t.repetitions},
        {"gate_threshold", t.gate_threshold},
        {"foreground_floor", t.foreground_floor},
        {"channel_mode", std::string(channel_mode_name(t.channel_mode))}}},
      {"network",
       {{"depth", t.network.depth},
        {"base_filters", t.network.base_filters},
        {"kernel_size", t.network.kernel_size},
        {"bn_momentum", t.network.bn_momentum},
        {"bn_eps", t.network.bn_eps}}},
      {"stitch", {{"window", c.stitch.window}, {"stride", c.stitch.stride}, {"batch", c.stitch.batch}}},
  };
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  try {
    return pipeline_config_from_json(j);
  } catch (const Error& e) {
    throw Error("config '" + path.string() + "': " + e.what());
  }
}

}  // namespace priorseg
