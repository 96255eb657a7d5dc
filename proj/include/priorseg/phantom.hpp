#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <random>

#include "priorseg/core.hpp"

namespace priorseg {

/// Axis-aligned ellipsoid in head-normalized coordinates (z, row, col), where
/// the head boundary is the unit sphere.
struct Ellipsoid {
  std::array<double, 3> center;
  std::array<double, 3> radii;

  double level(double z, double r, double c) const {
    const double a = (z - center[0]) / radii[0];
    const double b = (r - center[1]) / radii[1];
    const double d = (c - center[2]) / radii[2];
    return a * a + b * b + d * d;
  }
};

/// Synthetic head: nested shells (WM core, GM ribbon, outer CSF) plus brain stem
/// and cerebellum blobs, warped per seed by a smooth displacement field and an
/// in-plane pose change.
struct PhantomSpec {
  std::uint64_t seed = 0;
  std::array<std::size_t, 3> shape{16, 128, 128};
  std::array<double, 3> spacing{3.0, 1.0, 1.0};

  /// Head semi-axes as fractions of the volume half-extent (z, row, col).
  std::array<double, 3> head_semi_axes{1.3, 0.84, 0.72};
  /// Outer normalized radius of each shell; must increase strictly.
  double wm_radius = 0.52;
  double gm_radius = 0.76;
  double csf_radius = 1.0;
  Ellipsoid brain_stem{{-0.45, 0.10, 0.0}, {0.45, 0.16, 0.14}};
  Ellipsoid cerebellum{{-0.55, 0.46, 0.0}, {0.40, 0.22, 0.46}};

  /// Mean intensity per [modality][class], modality order T1, T1IR, T2FLAIR.
  std::array<std::array<double, kNumClasses>, 3> intensity{{
      {0.0, 30.0, 70.0, 100.0, 95.0, 72.0},
      {0.0, 20.0, 60.0, 110.0, 100.0, 64.0},
      {0.0, 18.0, 85.0, 62.0, 66.0, 82.0},
  }};
  double noise_std = 10.0;
  /// Peak displacement of the seed-dependent smooth deformation, pixels.
  double deformation_amplitude = 3.0;
  /// Per-subject in-plane pose ranges (uniform in [-x, x]).
  double pose_rotation_deg = 4.0;
  double pose_shift_px = 3.0;
};

namespace detail {

struct DisplacementMode {
  double amp_r, amp_c;
  double fz, fr, fc;
  double phase;
};

inline void check_phantom_spec(const PhantomSpec& s) {
  if (s.shape[0] < 1 || s.shape[1] < kPatchSize || s.shape[2] < kPatchSize)
    throw Error("phantom shape " + shape_string(s.shape) + " must be at least 1x64x64");
  if (!(s.noise_std >= 0.0)) throw Error("phantom noise std must be >= 0");
  if (!(s.deformation_amplitude >= 0.0)) throw Error("phantom deformation amplitude must be >= 0");
  for (double v : s.spacing)
    if (!(v > 0.0)) throw Error("phantom spacing must be positive");
  for (double v : s.head_semi_axes)
    if (!(v > 0.0)) throw Error("phantom head semi-axes must be positive");
  if (!(0.0 < s.wm_radius && s.wm_radius < s.gm_radius && s.gm_radius < s.csf_radius &&
        s.csf_radius <= 1.0))
    throw Error("phantom shells must satisfy 0 < wm < gm < csf <= 1");
  auto center_radius = [](const Ellipsoid& e) {
    return std::sqrt(e.center[0] * e.center[0] + e.center[1] * e.center[1] +
                     e.center[2] * e.center[2]);
  };
  for (const auto* blob : {&s.brain_stem, &s.cerebellum}) {
    for (double r : blob->radii)
      if (!(r > 0.0)) throw Error("phantom blob radii must be positive");
    if (center_radius(*blob) >= s.gm_radius)
      throw Error("phantom blob centre lies outside the tissue shells");
  }
  if (s.brain_stem.level(s.cerebellum.center[0], s.cerebellum.center[1],
                         s.cerebellum.center[2]) <= 1.0 ||
      s.cerebellum.level(s.brain_stem.center[0], s.brain_stem.center[1],
                         s.brain_stem.center[2]) <= 1.0)
    throw Error("phantom brain stem and cerebellum blobs overlap each other's centres");
}

}  // namespace detail

/// Deterministic function of spec: labels plus three modality images.
inline Volume generate_phantom(const PhantomSpec& spec) {
  detail::check_phantom_spec(spec);
  const auto [nz, nr, nc] = spec.shape;

  std::mt19937_64 geo_rng(spec.seed * 0x9E3779B97F4A7C15ull + 1);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);

  const double theta = unit(geo_rng) * spec.pose_rotation_deg * std::numbers::pi / 180.0;
  const double shift_r = unit(geo_rng) * spec.pose_shift_px;
  const double shift_c = unit(geo_rng) * spec.pose_shift_px;

  constexpr int kModes = 3;
  std::array<detail::DisplacementMode, kModes> modes{};
  for (auto& m : modes) {
    m.amp_r = unit(geo_rng);
    m.amp_c = unit(geo_rng);
    m.fz = 0.5 * unit(geo_rng);
    m.fr = 0.5 + 0.5 * std::abs(unit(geo_rng));
    m.fc = 0.5 + 0.5 * std::abs(unit(geo_rng));
    m.phase = phase(geo_rng);
  }
  // Scale so the peak possible displacement equals the requested amplitude.
  double sum_r = 0.0, sum_c = 0.0;
  for (const auto& m : modes) {
    sum_r += std::abs(m.amp_r);
    sum_c += std::abs(m.amp_c);
  }
  const double scale_r = sum_r > 0 ? spec.deformation_amplitude / sum_r : 0.0;
  const double scale_c = sum_c > 0 ? spec.deformation_amplitude / sum_c : 0.0;

  const double cz = (static_cast<double>(nz) - 1.0) / 2.0;
  const double cr = (static_cast<double>(nr) - 1.0) / 2.0;
  const double cc = (static_cast<double>(nc) - 1.0) / 2.0;
  const double hz = std::max(static_cast<double>(nz) / 2.0, 1.0) * spec.head_semi_axes[0];
  const double hr = static_cast<double>(nr) / 2.0 * spec.head_semi_axes[1];
  const double hc = static_cast<double>(nc) / 2.0 * spec.head_semi_axes[2];
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);

  Volume v;
  v.subject_id = "phantom" + std::to_string(spec.seed);
  v.spacing = spec.spacing;
  Array3<std::uint8_t> labels(nz, nr, nc, 0);

  for (std::size_t z = 0; z < nz; ++z) {
    const double zn = (static_cast<double>(z) - cz) / hz;
    for (std::size_t r = 0; r < nr; ++r) {
      for (std::size_t c = 0; c < nc; ++c) {
        // Undo the subject pose, then displace into template space.
        const double pr = static_cast<double>(r) - cr - shift_r;
        const double pc = static_cast<double>(c) - cc - shift_c;
        double qr = cos_t * pr + sin_t * pc;
        double qc = -sin_t * pr + cos_t * pc;
        const double ur = (qr + cr) / static_cast<double>(nr);
        const double uc = (qc + cc) / static_cast<double>(nc);
        const double uz = nz > 1 ? static_cast<double>(z) / static_cast<double>(nz - 1) : 0.0;
        for (const auto& m : modes) {
          const double s =
              std::sin(2.0 * std::numbers::pi * (m.fz * uz + m.fr * ur + m.fc * uc) + m.phase);
          qr += scale_r * m.amp_r * s;
          qc += scale_c * m.amp_c * s;
        }
        const double rn = qr / hr;
        const double cn = qc / hc;
        const double rho = std::sqrt(zn * zn + rn * rn + cn * cn);

        Tissue t = Tissue::Background;
        if (rho <= spec.wm_radius) t = Tissue::WM;
        else if (rho <= spec.gm_radius) t = Tissue::GM;
        else if (rho <= spec.csf_radius) t = Tissue::CSF;
        if (rho <= spec.gm_radius) {
          if (spec.cerebellum.level(zn, rn, cn) <= 1.0) t = Tissue::Cerebellum;
          if (spec.brain_stem.level(zn, rn, cn) <= 1.0) t = Tissue::BrainStem;
        }
        labels(z, r, c) = static_cast<std::uint8_t>(t);
      }
    }
  }

  std::mt19937_64 noise_rng(spec.seed * 0xD1B54A32D192ED03ull + 7);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t mi = 0; mi < kModalities.size(); ++mi) {
    Array3<float> img(nz, nr, nc);
    for (std::size_t i = 0; i < img.size(); ++i) {
      double value = spec.intensity[mi][labels.data[i]];
      if (spec.noise_std > 0.0) value += spec.noise_std * noise(noise_rng);
      img.data[i] = static_cast<float>(value);
    }
    v.modalities.emplace(kModalities[mi], std::move(img));
  }
  v.labels = std::move(labels);
  return v;
}

}  // namespace priorseg
