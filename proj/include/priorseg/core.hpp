#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace priorseg {

/// Every rejection raised by the library. The message names the offending
/// input (path, dimension, pixel index, id) so CLI callers can surface it as-is.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kNumClasses = 6;

enum class Tissue : std::uint8_t {
  Background = 0,
  CSF = 1,
  GM = 2,
  WM = 3,
  BrainStem = 4,
  Cerebellum = 5,
};

/// Classes scored in reports.
inline constexpr std::array<Tissue, 3> kEvaluatedTissues = {Tissue::CSF, Tissue::GM, Tissue::WM};

enum class Modality { T1, T1IR, T2FLAIR };

inline constexpr std::array<Modality, 3> kModalities = {Modality::T1, Modality::T1IR,
                                                        Modality::T2FLAIR};

inline std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::T1: return "T1";
    case Modality::T1IR: return "T1IR";
    case Modality::T2FLAIR: return "T2FLAIR";
  }
  return "?";
}

inline Modality parse_modality(std::string_view name) {
  for (auto m : kModalities)
    if (modality_name(m) == name) return m;
  throw Error("unknown modality '" + std::string(name) + "'");
}

/// Row-major 2D array.
template <class T>
struct Array2 {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Array2() = default;
  Array2(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Array2& o) const { return rows == o.rows && cols == o.cols; }
  friend bool operator==(const Array2&, const Array2&) = default;
};

/// Row-major 3D array with extents (d0, d1, d2). Volumes use (slices, rows, cols);
/// channel stacks use (rows, cols, channels).
template <class T>
struct Array3 {
  std::size_t d0 = 0;
  std::size_t d1 = 0;
  std::size_t d2 = 0;
  std::vector<T> data;

  Array3() = default;
  Array3(std::size_t a, std::size_t b, std::size_t c, T fill = T{})
      : d0(a), d1(b), d2(c), data(a * b * c, fill) {}

  T& operator()(std::size_t i, std::size_t j, std::size_t k) { return data[(i * d1 + j) * d2 + k]; }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data[(i * d1 + j) * d2 + k];
  }
  std::array<std::size_t, 3> shape() const { return {d0, d1, d2}; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Array3& o) const { return shape() == o.shape(); }
  friend bool operator==(const Array3&, const Array3&) = default;

  /// Copy of plane i along the first axis.
  Array2<T> plane(std::size_t i) const {
    Array2<T> out(d1, d2);
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(i * d1 * d2), d1 * d2, out.data.begin());
    return out;
  }
  void set_plane(std::size_t i, const Array2<T>& p) {
    std::copy(p.data.begin(), p.data.end(), data.begin() + static_cast<std::ptrdiff_t>(i * d1 * d2));
  }
};

inline std::string shape_string(std::span<const std::size_t> s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out;
}

using Image = Array2<float>;

/// Per-pixel tissue class indices. Every entry is in [0, num_classes).
class LabelMap {
 public:
  static constexpr int num_classes = kNumClasses;

  LabelMap() = default;
  LabelMap(std::size_t rows, std::size_t cols) : classes_(rows, cols, 0) {}
  explicit LabelMap(Array2<std::uint8_t> classes) : classes_(std::move(classes)) {
    for (std::size_t i = 0; i < classes_.size(); ++i) {
      if (classes_.data[i] >= num_classes)
        throw Error("label " + std::to_string(classes_.data[i]) + " out of range at pixel (" +
                    std::to_string(i / classes_.cols) + "," + std::to_string(i % classes_.cols) +
                    ")");
    }
  }

  std::size_t rows() const { return classes_.rows; }
  std::size_t cols() const { return classes_.cols; }
  std::uint8_t operator()(std::size_t r, std::size_t c) const { return classes_(r, c); }
  void set(std::size_t r, std::size_t c, std::uint8_t cls) {
    if (cls >= num_classes) throw Error("label " + std::to_string(cls) + " out of range");
    classes_(r, c) = cls;
  }
  const Array2<std::uint8_t>& array() const { return classes_; }
  friend bool operator==(const LabelMap&, const LabelMap&) = default;

 private:
  Array2<std::uint8_t> classes_;
};

/// Per-slice network input, (rows, cols, C) with C = 3 modality channels plus
/// an optional label-prior channel.
struct ChannelStack {
  Array3<float> channels;
  bool has_prior = false;
  /// Set when the prior channel exists but was zero-filled because gating
  /// rejected the retrieved match.
  bool prior_rejected = false;

  std::size_t rows() const { return channels.d0; }
  std::size_t cols() const { return channels.d1; }
  std::size_t num_channels() const { return channels.d2; }
};

/// Label prior encoding: class index / (num_classes - 1).
inline float prior_value(std::uint8_t cls) {
  return static_cast<float>(cls) / static_cast<float>(kNumClasses - 1);
}

inline constexpr std::size_t kPatchSize = 64;

struct Origin {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const Origin&, const Origin&) = default;
};

struct Patch {
  Array3<float> data;  // 64 x 64 x C
  LabelMap target;     // 64 x 64
  Origin origin;
};

struct PaletteEntry {
  std::string_view name;
  std::uint8_t gray;
};

/// Display names and grays per class: background black, CSF dark gray, GM gray,
/// WM white.
inline constexpr std::array<PaletteEntry, kNumClasses> kPalette = {{
    {"background", 0},
    {"CSF", 85},
    {"GM", 170},
    {"WM", 255},
    {"brain_stem", 45},
    {"cerebellum", 212},
}};

inline std::string_view tissue_name(Tissue t) { return kPalette[static_cast<int>(t)].name; }

/// Stacks a label map into (rows, cols, 6) one-hot channels.
template <class T = float>
Array3<T> onehot_encode(const LabelMap& labels) {
  Array3<T> out(labels.rows(), labels.cols(), kNumClasses, T(0));
  for (std::size_t r = 0; r < labels.rows(); ++r)
    for (std::size_t c = 0; c < labels.cols(); ++c) out(r, c, labels(r, c)) = T(1);
  return out;
}

/// Per-pixel argmax over the class axis; ties go to the lowest class index.
template <class T>
LabelMap onehot_decode(const Array3<T>& probs) {
  if (probs.d2 != static_cast<std::size_t>(kNumClasses))
    throw Error("onehot_decode: expected " + std::to_string(kNumClasses) + " channels, got " +
                std::to_string(probs.d2));
  Array2<std::uint8_t> out(probs.d0, probs.d1);
  for (std::size_t r = 0; r < probs.d0; ++r) {
    for (std::size_t c = 0; c < probs.d1; ++c) {
      std::uint8_t best = 0;
      for (int k = 0; k < kNumClasses; ++k) {
        const T v = probs(r, c, static_cast<std::size_t>(k));
        if (!std::isfinite(static_cast<double>(v)))
          throw Error("onehot_decode: non-finite value at pixel (" + std::to_string(r) + "," +
                      std::to_string(c) + ")");
        if (v > probs(r, c, best)) best = static_cast<std::uint8_t>(k);
      }
      out(r, c) = best;
    }
  }
  return LabelMap(std::move(out));
}

/// Min-max rescale to [0, 1]. A constant slice maps to zeros.
template <class T>
Array2<float> normalize_intensity(const Array2<T>& slice) {
  Array2<float> out(slice.rows, slice.cols, 0.0f);
  if (slice.data.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(slice.data.begin(), slice.data.end());
  const double lo = static_cast<double>(*lo_it);
  const double range = static_cast<double>(*hi_it) - lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < slice.size(); ++i) {
    double v = (static_cast<double>(slice.data[i]) - lo) / range;
    out.data[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

/// Exact 64x64 window of stack and target at origin.
inline Patch extract_patch(const ChannelStack& stack, const LabelMap& target, Origin origin) {
  if (stack.rows() != target.rows() || stack.cols() != target.cols())
    throw Error("extract_patch: stack " + std::to_string(stack.rows()) + "x" +
                std::to_string(stack.cols()) + " vs target " + std::to_string(target.rows()) +
                "x" + std::to_string(target.cols()));
  if (origin.row + kPatchSize > stack.rows() || origin.col + kPatchSize > stack.cols())
    throw Error("extract_patch: origin (" + std::to_string(origin.row) + "," +
                std::to_string(origin.col) + ") puts the window outside a " +
                std::to_string(stack.rows()) + "x" + std::to_string(stack.cols()) + " slice");
  const std::size_t nc = stack.num_channels();
  Patch p;
  p.origin = origin;
  p.data = Array3<float>(kPatchSize, kPatchSize, nc);
  Array2<std::uint8_t> t(kPatchSize, kPatchSize);
  for (std::size_t r = 0; r < kPatchSize; ++r) {
    const float* src = &stack.channels(origin.row + r, origin.col, 0);
    std::copy_n(src, kPatchSize * nc, &p.data(r, 0, 0));
    for (std::size_t c = 0; c < kPatchSize; ++c) t(r, c) = target(origin.row + r, origin.col + c);
  }
  p.target = LabelMap(std::move(t));
  return p;
}

/// A multi-modality scan with optional labels.
struct Volume {
  std::string subject_id;
  std::map<Modality, Array3<float>> modalities;
  std::optional<Array3<std::uint8_t>> labels;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};

  std::array<std::size_t, 3> shape() const {
    if (modalities.empty()) return {0, 0, 0};
    return modalities.begin()->second.shape();
  }
  std::size_t num_slices() const { return shape()[0]; }

  const Array3<float>& modality(Modality m) const {
    auto it = modalities.find(m);
    if (it == modalities.end())
      throw Error("subject " + subject_id + " has no " + std::string(modality_name(m)) + " image");
    return it->second;
  }

  LabelMap label_slice(std::size_t z) const {
    if (!labels) throw Error("subject " + subject_id + " has no labels");
    return LabelMap(labels->plane(z));
  }

  friend bool operator==(const Volume&, const Volume&) = default;
};

/// Throws unless all modality arrays share one shape (labels too), spacing is
/// positive and labels are in range.
inline void validate(const Volume& v) {
  if (v.modalities.empty()) throw Error("subject " + v.subject_id + " has no modalities");
  const auto shape = v.shape();
  for (const auto& [m, arr] : v.modalities) {
    if (arr.shape() != shape)
      throw Error("subject " + v.subject_id + ": " + std::string(modality_name(m)) + " shape " +
                  shape_string(arr.shape()) + " differs from " + shape_string(shape));
  }
  if (v.labels) {
    if (v.labels->shape() != shape)
      throw Error("subject " + v.subject_id + ": label shape " + shape_string(v.labels->shape()) +
                  " differs from " + shape_string(shape));
    for (std::size_t i = 0; i < v.labels->size(); ++i)
      if (v.labels->data[i] >= kNumClasses)
        throw Error("subject " + v.subject_id + ": label out of range at voxel " +
                    std::to_string(i));
  }
  for (double s : v.spacing)
    if (!(s > 0.0)) throw Error("subject " + v.subject_id + ": spacing must be positive");
}

}  // namespace priorseg
