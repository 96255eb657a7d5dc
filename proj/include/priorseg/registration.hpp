#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "priorseg/core.hpp"
#include "priorseg/retrieval.hpp"

namespace priorseg {

/// Rigid in-plane motion about the image centre, applied to the moving image:
/// T(p) = R(rotation) (p - centre) + centre + (dr, dc).
struct RigidTransform2D {
  double rotation = 0.0;  // radians, in (-pi, pi]
  double dr = 0.0;
  double dc = 0.0;

  static RigidTransform2D identity() { return {}; }

  /// The transform undoing this one (same centre).
  RigidTransform2D inverse() const {
    const double c = std::cos(-rotation), s = std::sin(-rotation);
    return {wrap_angle(-rotation), -(c * dr - s * dc), -(s * dr + c * dc)};
  }

  static double wrap_angle(double a) {
    while (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
    while (a > std::numbers::pi) a -= 2.0 * std::numbers::pi;
    return a;
  }
};

/// S = 1 - |A - B|_1 / |A + B|_1, with S = 1 when both images are empty.
template <class T>
double similarity(const Array2<T>& a, const Array2<T>& b) {
  if (!a.same_shape(b))
    throw Error("similarity: shape " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                " vs " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
  double diff = 0.0, total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a.data[i]);
    const double y = static_cast<double>(b.data[i]);
    if (x < 0.0 || y < 0.0) throw Error("similarity: negative value at element " + std::to_string(i));
    diff += std::abs(x - y);
    total += x + y;
  }
  if (total == 0.0) return 1.0;
  return 1.0 - diff / total;
}

struct RegistrationConfig {
  int levels = 3;
  double max_shift_px = 16.0;
  double shift_step_px = 2.0;
  double max_rotation_deg = 15.0;
  double rotation_step_deg = 3.0;
  /// Neighbourhood half-width, in steps, of each hill-climbing move.
  int refine_radius = 1;
  /// Coarse-grid optima carried down the pyramid.
  int candidates = 4;
  /// Gaussian presmoothing (pixels) of both images before the search.
  double smoothing_sigma = 1.0;
};

struct RegistrationResult {
  RigidTransform2D transform;
  Array2<float> warped;
  double similarity = 0.0;
};

namespace detail {

/// Maps output pixel p to its source location in the moving image, T^-1(p).
struct InverseMap {
  double cos_t, sin_t, center_r, center_c, dr, dc;

  InverseMap(const RigidTransform2D& t, double cr, double cc)
      : cos_t(std::cos(t.rotation)), sin_t(std::sin(t.rotation)), center_r(cr), center_c(cc),
        dr(t.dr), dc(t.dc) {}

  void operator()(double r, double c, double& sr, double& sc) const {
    const double y = r - center_r - dr;
    const double x = c - center_c - dc;
    sr = cos_t * y + sin_t * x + center_r;
    sc = -sin_t * y + cos_t * x + center_c;
  }
};

inline constexpr double kFrameTol = 1e-9;

/// Bilinear sample; coordinates outside [0, n-1] take the nearest edge value.
inline float sample_bilinear(const Array2<float>& img, double r, double c) {
  const double maxr = static_cast<double>(img.rows) - 1.0;
  const double maxc = static_cast<double>(img.cols) - 1.0;
  r = std::clamp(r, 0.0, maxr);
  c = std::clamp(c, 0.0, maxc);
  const auto r0 = static_cast<std::size_t>(std::floor(r));
  const auto c0 = static_cast<std::size_t>(std::floor(c));
  const std::size_t r1 = std::min(r0 + 1, img.rows - 1);
  const std::size_t c1 = std::min(c0 + 1, img.cols - 1);
  const double fr = r - static_cast<double>(r0);
  const double fc = c - static_cast<double>(c0);
  const double top = (1.0 - fc) * img(r0, c0) + fc * img(r0, c1);
  const double bot = (1.0 - fc) * img(r1, c0) + fc * img(r1, c1);
  return static_cast<float>((1.0 - fr) * top + fr * bot);
}

inline Array2<float> warp_bilinear(const Array2<float>& moving, const RigidTransform2D& t,
                                   double center_r, double center_c) {
  Array2<float> out(moving.rows, moving.cols, 0.0f);
  InverseMap map(t, center_r, center_c);
  for (std::size_t r = 0; r < moving.rows; ++r)
    for (std::size_t c = 0; c < moving.cols; ++c) {
      double sr, sc;
      map(static_cast<double>(r), static_cast<double>(c), sr, sc);
      out(r, c) = sample_bilinear(moving, sr, sc);
    }
  return out;
}

/// similarity() between fixed and moving warped by t, restricted to pixels
/// whose source lies inside the moving frame, without materializing the
/// warped image. No overlap scores 0.
inline double warped_similarity(const Array2<float>& fixed, const Array2<float>& moving,
                                const RigidTransform2D& t, double center_r, double center_c) {
  InverseMap map(t, center_r, center_c);
  const double maxr = static_cast<double>(moving.rows) - 1.0;
  const double maxc = static_cast<double>(moving.cols) - 1.0;
  double diff = 0.0, total = 0.0;
  std::size_t overlap = 0;
  for (std::size_t r = 0; r < fixed.rows; ++r)
    for (std::size_t c = 0; c < fixed.cols; ++c) {
      double sr, sc;
      map(static_cast<double>(r), static_cast<double>(c), sr, sc);
      if (sr < -kFrameTol || sc < -kFrameTol || sr > maxr + kFrameTol || sc > maxc + kFrameTol) continue;
      const double w = sample_bilinear(moving, sr, sc);
      const double f = fixed(r, c);
      diff += std::abs(f - w);
      total += f + w;
      ++overlap;
    }
  if (overlap == 0) return 0.0;
  return total == 0.0 ? 1.0 : 1.0 - diff / total;
}

inline Array2<float> downsample2(const Array2<float>& img) {
  Array2<float> out(std::max<std::size_t>(img.rows / 2, 1), std::max<std::size_t>(img.cols / 2, 1));
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols; ++c) {
      const std::size_t r0 = std::min(2 * r, img.rows - 1), r1 = std::min(2 * r + 1, img.rows - 1);
      const std::size_t c0 = std::min(2 * c, img.cols - 1), c1 = std::min(2 * c + 1, img.cols - 1);
      out(r, c) = 0.25f * (img(r0, c0) + img(r0, c1) + img(r1, c0) + img(r1, c1));
    }
  return out;
}

/// Separable Gaussian blur with edge clamping; sigma <= 0 returns img.
inline Array2<float> gaussian_blur(const Array2<float>& img, double sigma) {
  if (!(sigma > 0.0)) return img;
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double norm = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i)
    norm += k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
  for (auto& v : k) v /= norm;
  const auto R = static_cast<std::ptrdiff_t>(img.rows), C = static_cast<std::ptrdiff_t>(img.cols);
  const auto clamp = [](std::ptrdiff_t i, std::ptrdiff_t n) { return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, n - 1)); };
  Array2<float> tmp(img.rows, img.cols), out(img.rows, img.cols);
  for (std::ptrdiff_t r = 0; r < R; ++r)
    for (std::ptrdiff_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::ptrdiff_t i = -radius; i <= radius; ++i)
        acc += k[static_cast<std::size_t>(i + radius)] * img(static_cast<std::size_t>(r), clamp(c + i, C));
      tmp(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = static_cast<float>(acc);
    }
  for (std::ptrdiff_t r = 0; r < R; ++r)
    for (std::ptrdiff_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::ptrdiff_t i = -radius; i <= radius; ++i)
        acc += k[static_cast<std::size_t>(i + radius)] * tmp(clamp(r + i, R), static_cast<std::size_t>(c));
      out(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = static_cast<float>(acc);
    }
  return out;
}

inline double center_of(std::size_t n) { return (static_cast<double>(n) - 1.0) / 2.0; }

}  // namespace detail

/// Resamples moving under t (bilinear, zero outside the frame).
inline Array2<float> apply_transform(const Array2<float>& moving, const RigidTransform2D& t) {
  return detail::warp_bilinear(moving, t, detail::center_of(moving.rows), detail::center_of(moving.cols));
}

/// Nearest-neighbour label resampling; out-of-frame pixels become background.
inline LabelMap warp_labels(const LabelMap& labels, const RigidTransform2D& t) {
  Array2<std::uint8_t> out(labels.rows(), labels.cols(), 0);
  detail::InverseMap map(t, detail::center_of(labels.rows()), detail::center_of(labels.cols()));
  const double maxr = static_cast<double>(labels.rows()) - 1.0;
  const double maxc = static_cast<double>(labels.cols()) - 1.0;
  for (std::size_t r = 0; r < labels.rows(); ++r)
    for (std::size_t c = 0; c < labels.cols(); ++c) {
      double sr, sc;
      map(static_cast<double>(r), static_cast<double>(c), sr, sc);
      const double nr = std::floor(sr + 0.5), nc = std::floor(sc + 0.5);
      if (nr < 0.0 || nc < 0.0 || nr > maxr || nc > maxc) continue;
      out(r, c) = labels(static_cast<std::size_t>(nr), static_cast<std::size_t>(nc));
    }
  return LabelMap(std::move(out));
}

/// Rigid registration of moving onto fixed maximizing similarity(): exhaustive
/// grid at the coarsest pyramid level; the best cfg.candidates grid points are
/// hill-climbed with halved steps at each finer level. The identity transform
/// is always a candidate.
inline RegistrationResult register_rigid(const Array2<float>& fixed, const Array2<float>& moving,
                                         const RegistrationConfig& cfg = {}) {
  if (!fixed.same_shape(moving))
    throw Error("register: fixed " + std::to_string(fixed.rows) + "x" + std::to_string(fixed.cols) +
                " vs moving " + std::to_string(moving.rows) + "x" + std::to_string(moving.cols));
  if (cfg.levels < 1) throw Error("register: levels must be >= 1");
  if (!(cfg.shift_step_px > 0.0) || !(cfg.rotation_step_deg > 0.0))
    throw Error("register: search steps must be positive");

  RegistrationResult result;
  result.transform = RigidTransform2D::identity();
  const auto is_zero = [](const Array2<float>& a) {
    return std::all_of(a.data.begin(), a.data.end(), [](float v) { return v == 0.0f; });
  };
  if (is_zero(fixed) || is_zero(moving)) {
    result.warped = moving;
    result.similarity = similarity(fixed, moving);
    return result;
  }
  for (const auto* img : {&fixed, &moving})
    for (std::size_t i = 0; i < img->size(); ++i)
      if (img->data[i] < 0.0f) throw Error("register: negative intensity at element " + std::to_string(i));

  // Presmoothing keeps bilinear interpolation blur from biasing the optimum
  // toward half-pixel offsets on noisy images.
  std::vector<Array2<float>> fixed_pyr{detail::gaussian_blur(fixed, cfg.smoothing_sigma)},
      moving_pyr{detail::gaussian_blur(moving, cfg.smoothing_sigma)};
  for (int l = 1; l < cfg.levels; ++l) {
    fixed_pyr.push_back(detail::downsample2(fixed_pyr.back()));
    moving_pyr.push_back(detail::downsample2(moving_pyr.back()));
  }
  const double full_cr = detail::center_of(fixed.rows), full_cc = detail::center_of(fixed.cols);

  // Full-resolution transform evaluated at pyramid level l.
  const auto score = [&](int l, const RigidTransform2D& t) {
    const double s = std::ldexp(1.0, l);
    const double off = (s - 1.0) / 2.0;
    RigidTransform2D tl{t.rotation, t.dr / s, t.dc / s};
    return detail::warped_similarity(fixed_pyr[static_cast<std::size_t>(l)],
                                     moving_pyr[static_cast<std::size_t>(l)], tl,
                                     (full_cr - off) / s, (full_cc - off) / s);
  };

  constexpr double kDeg = std::numbers::pi / 180.0;
  const int top = cfg.levels - 1;
  using Scored = std::pair<double, RigidTransform2D>;
  std::vector<Scored> grid{{score(top, RigidTransform2D::identity()), RigidTransform2D::identity()}};
  const int n_shift = static_cast<int>(std::floor(cfg.max_shift_px / cfg.shift_step_px + 1e-9));
  const int n_rot = static_cast<int>(std::floor(cfg.max_rotation_deg / cfg.rotation_step_deg + 1e-9));
  for (int ir = -n_rot; ir <= n_rot; ++ir)
    for (int iy = -n_shift; iy <= n_shift; ++iy)
      for (int ix = -n_shift; ix <= n_shift; ++ix) {
        if (ir == 0 && iy == 0 && ix == 0) continue;
        RigidTransform2D t{ir * cfg.rotation_step_deg * kDeg, iy * cfg.shift_step_px,
                           ix * cfg.shift_step_px};
        grid.emplace_back(score(top, t), t);
      }
  // Stable order keeps ties on the earlier grid point.
  std::stable_sort(grid.begin(), grid.end(), [](const Scored& a, const Scored& b) { return a.first > b.first; });
  grid.resize(std::min<std::size_t>(grid.size(), static_cast<std::size_t>(std::max(cfg.candidates, 1))));

  // Pattern search at level l: move to the best neighbour until none improves.
  const auto climb = [&](int l, Scored cur, double shift_step, double rot_step) {
    for (int iter = 0; iter < 64; ++iter) {
      const RigidTransform2D center = cur.second;
      bool moved = false;
      for (int ir = -cfg.refine_radius; ir <= cfg.refine_radius; ++ir)
        for (int iy = -cfg.refine_radius; iy <= cfg.refine_radius; ++iy)
          for (int ix = -cfg.refine_radius; ix <= cfg.refine_radius; ++ix) {
            if (ir == 0 && iy == 0 && ix == 0) continue;
            RigidTransform2D t{center.rotation + ir * rot_step, center.dr + iy * shift_step,
                               center.dc + ix * shift_step};
            const double s = score(l, t);
            if (s > cur.first) {
              cur = {s, t};
              moved = true;
            }
          }
      if (!moved) break;
    }
    return cur;
  };

  RigidTransform2D best = RigidTransform2D::identity();
  double best_score = -1.0;
  for (const auto& start : grid) {
    double shift_step = cfg.shift_step_px;
    double rot_step = cfg.rotation_step_deg * kDeg;
    Scored cur = climb(top, start, shift_step, rot_step);
    for (int l = top - 1; l >= 0; --l) {
      shift_step /= 2.0;
      rot_step /= 2.0;
      cur = climb(l, {score(l, cur.second), cur.second}, shift_step, rot_step);
    }
    cur = climb(0, cur, shift_step / 2.0, rot_step / 2.0);
    if (cur.first > best_score) {
      best_score = cur.first;
      best = cur.second;
    }
  }

  // Guard on the unsmoothed images: never worse than not moving at all.
  best.rotation = RigidTransform2D::wrap_angle(best.rotation);
  result.transform = best;
  result.warped = apply_transform(moving, best);
  result.similarity = similarity(fixed, result.warped);
  const double identity_similarity = similarity(fixed, moving);
  if (!(result.similarity > identity_similarity)) {
    result.transform = RigidTransform2D::identity();
    result.warped = moving;
    result.similarity = identity_similarity;
  }
  return result;
}

struct GateDecision {
  bool use_prior = false;
  double similarity = 0.0;
  double threshold = 0.0;
  RigidTransform2D transform;
  SliceKey matched_source;
  std::optional<LabelMap> warped_prior;
};

/// Registers the retrieved slice to the query and accepts its labels as a prior
/// only when the post-registration similarity exceeds threshold.
inline GateDecision gate_fourth_channel(const Array2<float>& query_slice,
                                        const Array2<float>& retrieved_slice,
                                        const LabelMap& retrieved_labels, SliceKey matched_source,
                                        double threshold, const RegistrationConfig& cfg = {}) {
  if (!(threshold >= 0.0 && threshold <= 1.0))
    throw Error("gate threshold " + std::to_string(threshold) + " outside [0, 1]");
  auto reg = register_rigid(query_slice, retrieved_slice, cfg);
  GateDecision d;
  d.similarity = reg.similarity;
  d.threshold = threshold;
  d.transform = reg.transform;
  d.matched_source = std::move(matched_source);
  d.use_prior = d.similarity > threshold;
  if (d.use_prior) d.warped_prior = warp_labels(retrieved_labels, reg.transform);
  return d;
}

}  // namespace priorseg
