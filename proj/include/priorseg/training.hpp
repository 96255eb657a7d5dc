#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "priorseg/adam.hpp"
#include "priorseg/core.hpp"
#include "priorseg/evaluation.hpp"
#include "priorseg/inference.hpp"
#include "priorseg/segnet.hpp"

namespace priorseg {

struct TrainConfig {
  int epochs = 20;
  int patches_per_epoch = 2000;
  int batch_size = 16;
  AdamConfig adam;
  std::uint64_t base_seed = 0;
  ChannelMode channel_mode = ChannelMode::FourRetrieved;
  double gate_threshold = 0.70;
  int repetitions = 5;
  /// in_channels and seed are overridden per run from channel_mode and the run seed.
  NetworkConfig network;
  /// Minimum non-background fraction of an eligible 64x64 window.
  double foreground_floor = 0.05;
  /// Where run checkpoints go; empty disables writing them.
  std::filesystem::path checkpoint_dir;
};

inline void validate(const TrainConfig& c) {
  if (c.epochs < 1 || c.patches_per_epoch < 1 || c.batch_size < 1 || c.repetitions < 1)
    throw Error("train config counts (epochs, patches_per_epoch, batch_size, repetitions) must be >= 1");
  if (c.patches_per_epoch < c.batch_size)
    throw Error("patches_per_epoch must be at least batch_size");
  if (!(c.adam.learning_rate >= 0.0)) throw Error("learning rate must be >= 0");
  if (!(c.adam.beta1 >= 0.0 && c.adam.beta1 < 1.0 && c.adam.beta2 >= 0.0 && c.adam.beta2 < 1.0))
    throw Error("Adam decay rates must be in [0, 1)");
  if (!(c.adam.epsilon > 0.0)) throw Error("Adam epsilon must be positive");
  if (!(c.gate_threshold >= 0.0 && c.gate_threshold <= 1.0))
    throw Error("gate threshold must be in [0, 1]");
  if (!(c.foreground_floor >= 0.0 && c.foreground_floor <= 1.0))
    throw Error("foreground floor must be in [0, 1]");
}

struct SampledPatch {
  Patch patch;
  SliceKey source;
  /// The prior channel exists but was zero-filled by a gate rejection.
  bool prior_rejected = false;
};

/// Pre-assembled channel stacks of every training slice together with the
/// window origins eligible for sampling. Gating runs once per slice here.
class PatchSource {
 public:
  struct Slice {
    SliceKey key;
    ChannelStack stack;
    LabelMap target;
    std::optional<GateDecision> decision;
    std::vector<Origin> origins;
  };

  PatchSource(const std::vector<Volume>& volumes, ChannelMode mode, const RetrievalContext* ctx,
              double threshold, double foreground_floor = 0.05)
      : mode_(mode) {
    const auto min_fg = static_cast<std::size_t>(
        std::ceil(foreground_floor * static_cast<double>(kPatchSize * kPatchSize) - 1e-9));
    for (const auto& v : volumes) {
      if (!v.labels) throw Error("training subject " + v.subject_id + " has no labels");
      for (std::size_t z = 0; z < v.num_slices(); ++z) {
        LabelMap target = v.label_slice(z);
        auto origins = eligible_origins(target, min_fg);
        if (origins.empty()) continue;
        const std::optional<std::string> exclude =
            mode == ChannelMode::FourRetrieved ? std::optional<std::string>(v.subject_id) : std::nullopt;
        auto assembled = assemble_channels(v, z, mode, ctx, threshold, exclude);
        slices_.push_back({{v.subject_id, z}, std::move(assembled.stack), std::move(target),
                           std::move(assembled.decision), std::move(origins)});
        total_ += slices_.back().origins.size();
        cumulative_.push_back(total_);
      }
    }
    if (slices_.empty()) throw Error("no training slice has an eligible 64x64 window");
  }

  ChannelMode mode() const { return mode_; }
  const std::vector<Slice>& slices() const { return slices_; }
  std::size_t eligible_positions() const { return total_; }

  /// Patch number `index` of the stream identified by seed; each index gets its
  /// own RNG substream so results do not depend on how draws are grouped.
  SampledPatch draw(std::uint64_t seed, std::uint64_t index) const {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                      0x5eedu};
    std::mt19937_64 rng(seq);
    std::uniform_int_distribution<std::size_t> pick(0, total_ - 1);
    const std::size_t g = pick(rng);
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), g);
    const auto si = static_cast<std::size_t>(it - cumulative_.begin());
    const std::size_t before = si == 0 ? 0 : cumulative_[si - 1];
    const Slice& s = slices_[si];
    SampledPatch out;
    out.patch = extract_patch(s.stack, s.target, s.origins[g - before]);
    out.source = s.key;
    out.prior_rejected = s.stack.prior_rejected;
    return out;
  }

  static std::vector<Origin> eligible_origins(const LabelMap& target, std::size_t min_foreground) {
    std::vector<Origin> out;
    if (target.rows() < kPatchSize || target.cols() < kPatchSize) return out;
    // Integral image of non-background pixels.
    const std::size_t R = target.rows(), C = target.cols();
    std::vector<std::size_t> integral((R + 1) * (C + 1), 0);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c)
        integral[(r + 1) * (C + 1) + c + 1] = integral[r * (C + 1) + c + 1] +
                                              integral[(r + 1) * (C + 1) + c] -
                                              integral[r * (C + 1) + c] + (target(r, c) != 0);
    for (std::size_t r = 0; r + kPatchSize <= R; ++r)
      for (std::size_t c = 0; c + kPatchSize <= C; ++c) {
        const std::size_t r1 = r + kPatchSize, c1 = c + kPatchSize;
        const std::size_t fg = integral[r1 * (C + 1) + c1] - integral[r * (C + 1) + c1] -
                               integral[r1 * (C + 1) + c] + integral[r * (C + 1) + c];
        if (fg >= min_foreground) out.push_back({r, c});
      }
    return out;
  }

 private:
  ChannelMode mode_;
  std::vector<Slice> slices_;
  std::vector<std::size_t> cumulative_;
  std::size_t total_ = 0;
};

/// count patches drawn uniformly over all eligible (slice, origin) positions.
inline std::vector<SampledPatch> sample_patches(const std::vector<Volume>& volumes, std::size_t count,
                                                ChannelMode mode, std::uint64_t rng_seed,
                                                const RetrievalContext* ctx, double threshold) {
  PatchSource source(volumes, mode, ctx, threshold);
  std::vector<SampledPatch> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(source.draw(rng_seed, i));
  return out;
}

template <class T>
void fill_batch(const std::vector<SampledPatch>& patches, BatchTensor<T>& x, BatchTensor<T>& y) {
  const std::size_t n = patches.size();
  const std::size_t nc = patches.front().patch.data.d2;
  x = BatchTensor<T>(n, kPatchSize, kPatchSize, nc);
  y = BatchTensor<T>(n, kPatchSize, kPatchSize, kNumClasses);
  for (std::size_t b = 0; b < n; ++b) {
    const auto& p = patches[b].patch;
    const std::size_t plane = kPatchSize * kPatchSize * nc;
    for (std::size_t i = 0; i < plane; ++i) x.values[b * plane + i] = static_cast<T>(p.data.data[i]);
    for (std::size_t r = 0; r < kPatchSize; ++r)
      for (std::size_t c = 0; c < kPatchSize; ++c) y(b, r, c, p.target(r, c)) = T(1);
  }
}

struct TrainResult {
  RunRecord record;
  NetworkState<float> state;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Adam on mse_loss for epochs x (patches_per_epoch / batch_size) steps.
inline TrainResult train(const TrainConfig& config, const PatchSource& source, int run_index = 0,
                         const ProgressFn& progress = {}) {
  validate(config);
  if (source.mode() != config.channel_mode)
    throw Error("patch source was assembled for mode " + std::string(channel_mode_name(source.mode())) +
                ", config asks for " + std::string(channel_mode_name(config.channel_mode)));
  const std::uint64_t seed = config.base_seed + static_cast<std::uint64_t>(run_index);
  NetworkConfig net = config.network;
  net.in_channels = input_channels(config.channel_mode);
  net.seed = seed;

  TrainResult result{{}, build_network<float>(net)};
  result.record.run_index = run_index;
  result.record.seed = seed;
  Adam<float> adam(result.state, config.adam);

  const auto n = static_cast<std::size_t>(config.batch_size);
  const auto steps = static_cast<std::size_t>(config.patches_per_epoch) / n;
  std::vector<SampledPatch> patches(n);
  BatchTensor<float> x, y;
  std::size_t global_step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const std::uint64_t stream = seed * 1000003ull + static_cast<std::uint64_t>(epoch);
    double sum = 0.0;
    for (std::size_t s = 0; s < steps; ++s, ++global_step) {
      for (std::size_t b = 0; b < n; ++b) patches[b] = source.draw(stream, s * n + b);
      fill_batch(patches, x, y);
      auto grads = backward(result.state, x, y);
      if (!std::isfinite(grads.loss))
        throw Error("non-finite loss at step " + std::to_string(global_step) + " (run " +
                    std::to_string(run_index) + ")");
      adam.step(result.state, grads);
      update_running_statistics(result.state, grads);
      sum += grads.loss;
    }
    result.record.epoch_loss.push_back(sum / static_cast<double>(steps));
    if (progress)
      progress("run " + std::to_string(run_index) + " epoch " + std::to_string(epoch) + " loss " +
               std::to_string(result.record.epoch_loss.back()));
  }
  if (!config.checkpoint_dir.empty()) {
    std::filesystem::create_directories(config.checkpoint_dir);
    const std::string name = "run" + std::to_string(run_index) + ".ckpt";
    save_checkpoint(result.state, config.checkpoint_dir / name);
    result.record.checkpoint = name;
  }
  return result;
}

inline TrainResult train(const TrainConfig& config, const std::vector<Volume>& train_set,
                         const RetrievalContext* ctx, int run_index = 0, const ProgressFn& progress = {}) {
  validate(config);
  PatchSource source(train_set, config.channel_mode, ctx, config.gate_threshold, config.foreground_floor);
  return train(config, source, run_index, progress);
}

/// Mean per-subject DSC of state on the test volumes.
inline DiceScores evaluate_on(const NetworkState<float>& state, const std::vector<Volume>& test_set,
                              ChannelMode mode, const RetrievalContext* ctx, const StitchConfig& stitch,
                              double threshold) {
  std::vector<DiceScores> per_subject;
  for (const auto& v : test_set) {
    if (!v.labels) throw Error("test subject " + v.subject_id + " has no labels");
    auto seg = segment_volume(state, v, mode, ctx, stitch, threshold);
    per_subject.push_back(evaluate_volume(seg.labels, *v.labels));
  }
  return average_scores(per_subject);
}

/// R independent runs with seeds base_seed + run_index, each scored on test_set.
inline std::vector<RunRecord> run_repeated(const TrainConfig& config, const std::vector<Volume>& train_set,
                                           const std::vector<Volume>& test_set,
                                           const RetrievalContext* ctx, const StitchConfig& stitch = {},
                                           const ProgressFn& progress = {}) {
  validate(config);
  PatchSource source(train_set, config.channel_mode, ctx, config.gate_threshold, config.foreground_floor);
  std::vector<RunRecord> records;
  for (int r = 0; r < config.repetitions; ++r) {
    try {
      auto result = train(config, source, r, progress);
      result.record.test_dice =
          evaluate_on(result.state, test_set, config.channel_mode, ctx, stitch, config.gate_threshold);
      records.push_back(std::move(result.record));
    } catch (const Error& e) {
      throw Error("run " + std::to_string(r) + ": " + e.what());
    }
  }
  return records;
}

}  // namespace priorseg
