#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "priorseg/core.hpp"
#include "priorseg/registration.hpp"
#include "priorseg/retrieval.hpp"
#include "priorseg/segnet.hpp"

namespace priorseg {

/// three: modalities only. four_own_gt: the slice's own labels as prior.
/// four_retrieved: the gated, registered labels of the nearest database slice.
enum class ChannelMode { Three, FourOwnGt, FourRetrieved };

inline std::string_view channel_mode_name(ChannelMode m) {
  switch (m) {
    case ChannelMode::Three: return "three";
    case ChannelMode::FourOwnGt: return "four_own_gt";
    case ChannelMode::FourRetrieved: return "four_retrieved";
  }
  return "?";
}

inline ChannelMode parse_channel_mode(std::string_view s) {
  for (auto m : {ChannelMode::Three, ChannelMode::FourOwnGt, ChannelMode::FourRetrieved})
    if (channel_mode_name(m) == s) return m;
  throw Error("unknown channel mode '" + std::string(s) + "'");
}

inline int input_channels(ChannelMode m) { return m == ChannelMode::Three ? 3 : 4; }

/// Everything retrieval-gated prior assembly needs: the feature index and the
/// labeled database volumes it was built from.
struct RetrievalContext {
  const RetrievalIndex* index = nullptr;
  std::map<std::string, const Volume*> database;
  RegistrationConfig registration;

  static RetrievalContext over(const RetrievalIndex& index, const std::vector<Volume>& volumes,
                               RegistrationConfig reg = {}) {
    RetrievalContext ctx;
    ctx.index = &index;
    ctx.registration = reg;
    for (const auto& v : volumes) ctx.database[v.subject_id] = &v;
    return ctx;
  }

  const Volume& subject(const std::string& id) const {
    auto it = database.find(id);
    if (it == database.end()) throw Error("retrieval database has no subject " + id);
    return *it->second;
  }
};

/// Network input channel order for the modalities.
inline constexpr std::array<Modality, 3> kChannelOrder = {Modality::T1, Modality::T2FLAIR, Modality::T1IR};

struct AssembledSlice {
  ChannelStack stack;
  std::optional<GateDecision> decision;
};

/// Normalized modality channels in kChannelOrder plus the prior channel demanded by mode.
inline AssembledSlice assemble_channels(const Volume& volume, std::size_t slice_index, ChannelMode mode,
                                        const RetrievalContext* ctx, double threshold,
                                        const std::optional<std::string>& exclude_subject = {}) {
  if (slice_index >= volume.num_slices())
    throw Error("subject " + volume.subject_id + " has no slice " + std::to_string(slice_index));
  const auto [nz, rows, cols] = volume.shape();
  const std::size_t nc = static_cast<std::size_t>(input_channels(mode));
  AssembledSlice out;
  out.stack.channels = Array3<float>(rows, cols, nc, 0.0f);
  out.stack.has_prior = nc == 4;
  for (std::size_t m = 0; m < kChannelOrder.size(); ++m) {
    const auto img = normalize_intensity(volume.modality(kChannelOrder[m]).plane(slice_index));
    for (std::size_t i = 0; i < img.size(); ++i) out.stack.channels.data[i * nc + m] = img.data[i];
  }
  std::optional<LabelMap> prior;
  if (mode == ChannelMode::FourOwnGt) {
    prior = volume.label_slice(slice_index);
  } else if (mode == ChannelMode::FourRetrieved) {
    if (!ctx || !ctx->index) throw Error("four_retrieved mode needs a retrieval index");
    const auto& fc = ctx->index->config;
    const auto query = normalize_intensity(volume.modality(fc.modality).plane(slice_index));
    const auto features = extract_features(query, fc, {volume.subject_id, slice_index});
    const auto hit = query_top_k(*ctx->index, features, 1, exclude_subject).front();
    const Volume& db = ctx->subject(hit.source.subject_id);
    const auto candidate = normalize_intensity(db.modality(fc.modality).plane(hit.source.slice_index));
    if (!candidate.same_shape(query))
      throw Error("retrieved slice " + hit.source.subject_id + ":" +
                  std::to_string(hit.source.slice_index) + " has a different in-plane shape");
    auto decision = gate_fourth_channel(query, candidate, db.label_slice(hit.source.slice_index),
                                        hit.source, threshold, ctx->registration);
    if (decision.use_prior) prior = *decision.warped_prior;
    else out.stack.prior_rejected = true;
    out.decision = std::move(decision);
  }
  if (prior)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out.stack.channels(r, c, 3) = prior_value((*prior)(r, c));
  return out;
}

struct StitchConfig {
  std::size_t window = kPatchSize;
  std::size_t stride = 32;
  /// Windows per forward call; does not affect results in eval mode.
  std::size_t batch = 8;
};

struct SliceSegmentation {
  LabelMap labels;
  Array3<float> probabilities;  // rows x cols x num_classes
};

namespace detail {

/// Mirror index without repeating the edge sample.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  i %= period;
  if (i < 0) i += period;
  if (i >= static_cast<std::ptrdiff_t>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

inline std::size_t padded_extent(std::size_t n, std::size_t window, std::size_t stride) {
  if (n <= window) return window;
  return window + (n - window + stride - 1) / stride * stride;
}

}  // namespace detail

/// Sliding-window prediction over a reflect-padded slice; overlapping window
/// probabilities are averaged with uniform weights.
template <class T>
SliceSegmentation segment_slice(const NetworkState<T>& state, const ChannelStack& stack,
                                const StitchConfig& stitch = {}) {
  if (stack.num_channels() != static_cast<std::size_t>(state.config.in_channels))
    throw Error("segment_slice: stack has " + std::to_string(stack.num_channels()) +
                " channels, network expects " + std::to_string(state.config.in_channels));
  if (stitch.window < 1 || stitch.stride < 1 || stitch.stride > stitch.window)
    throw Error("segment_slice: stride must be in [1, window]");
  const std::size_t rows = stack.rows(), cols = stack.cols(), nc = stack.num_channels();
  const std::size_t win = stitch.window;
  const std::size_t pr = detail::padded_extent(rows, win, stitch.stride);
  const std::size_t pc = detail::padded_extent(cols, win, stitch.stride);
  const auto off_r = static_cast<std::ptrdiff_t>((pr - rows) / 2);
  const auto off_c = static_cast<std::ptrdiff_t>((pc - cols) / 2);
  const auto classes = static_cast<std::size_t>(state.config.num_classes);

  std::vector<Origin> origins;
  for (std::size_t r = 0; r + win <= pr; r += stitch.stride)
    for (std::size_t c = 0; c + win <= pc; c += stitch.stride) origins.push_back({r, c});

  Array3<double> sum(pr, pc, classes, 0.0);
  Array2<int> count(pr, pc, 0);
  const std::size_t per_call = std::max<std::size_t>(stitch.batch, 1);
  for (std::size_t start = 0; start < origins.size(); start += per_call) {
    const std::size_t nb = std::min(per_call, origins.size() - start);
    BatchTensor<T> batch(nb, win, win, nc);
    for (std::size_t b = 0; b < nb; ++b) {
      const Origin o = origins[start + b];
      for (std::size_t y = 0; y < win; ++y) {
        const std::size_t sr = detail::reflect_index(static_cast<std::ptrdiff_t>(o.row + y) - off_r, rows);
        for (std::size_t x = 0; x < win; ++x) {
          const std::size_t sc =
              detail::reflect_index(static_cast<std::ptrdiff_t>(o.col + x) - off_c, cols);
          for (std::size_t k = 0; k < nc; ++k) batch(b, y, x, k) = static_cast<T>(stack.channels(sr, sc, k));
        }
      }
    }
    const auto out = forward(state, batch, Mode::Eval);
    for (std::size_t b = 0; b < nb; ++b) {
      const Origin o = origins[start + b];
      for (std::size_t y = 0; y < win; ++y)
        for (std::size_t x = 0; x < win; ++x) {
          for (std::size_t k = 0; k < classes; ++k)
            sum(o.row + y, o.col + x, k) += static_cast<double>(out(b, y, x, k));
          count(o.row + y, o.col + x) += 1;
        }
    }
  }

  SliceSegmentation seg;
  seg.probabilities = Array3<float>(rows, cols, classes);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const auto rr = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(r) + off_r);
      const auto cc = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(c) + off_c);
      const double n = count(rr, cc);
      for (std::size_t k = 0; k < classes; ++k)
        seg.probabilities(r, c, k) = static_cast<float>(sum(rr, cc, k) / n);
    }
  seg.labels = onehot_decode(seg.probabilities);
  return seg;
}

struct VolumeSegmentation {
  Array3<std::uint8_t> labels;
  /// One entry per slice; set only in four_retrieved mode.
  std::vector<std::optional<GateDecision>> decisions;
};

template <class T>
VolumeSegmentation segment_volume(const NetworkState<T>& state, const Volume& volume, ChannelMode mode,
                                  const RetrievalContext* ctx, const StitchConfig& stitch,
                                  double threshold) {
  const auto [nz, rows, cols] = volume.shape();
  VolumeSegmentation out;
  out.labels = Array3<std::uint8_t>(nz, rows, cols, 0);
  out.decisions.resize(nz);
  for (std::size_t z = 0; z < nz; ++z) {
    try {
      auto assembled = assemble_channels(volume, z, mode, ctx, threshold);
      auto seg = segment_slice(state, assembled.stack, stitch);
      out.labels.set_plane(z, seg.labels.array());
      out.decisions[z] = std::move(assembled.decision);
    } catch (const Error& e) {
      throw Error("subject " + volume.subject_id + " slice " + std::to_string(z) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace priorseg
