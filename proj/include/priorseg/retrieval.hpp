#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "priorseg/core.hpp"
#include "priorseg/raw_file.hpp"

namespace priorseg {

struct SliceKey {
  std::string subject_id;
  std::size_t slice_index = 0;

  friend auto operator<=>(const SliceKey&, const SliceKey&) = default;
  friend bool operator==(const SliceKey&, const SliceKey&) = default;
};

struct FeatureConfig {
  std::size_t histogram_bins = 64;
  std::size_t thumbnail_size = 16;
  Modality modality = Modality::T1;
  /// Slices with this many or fewer non-background label pixels are not indexed.
  std::size_t min_brain_pixels = 200;

  std::size_t dimension() const { return histogram_bins + thumbnail_size * thumbnail_size; }
  friend bool operator==(const FeatureConfig&, const FeatureConfig&) = default;
};

struct FeatureVector {
  std::vector<double> values;
  SliceKey source;
  bool empty = false;  // all-zero slice
};

namespace detail {

/// Box-filter downsample with fractional pixel overlap, so every source pixel
/// contributes exactly its covered area.
inline std::vector<double> area_thumbnail(const Array2<float>& img, std::size_t size) {
  std::vector<double> out(size * size, 0.0);
  const double sr = static_cast<double>(img.rows) / static_cast<double>(size);
  const double sc = static_cast<double>(img.cols) / static_cast<double>(size);
  for (std::size_t i = 0; i < size; ++i) {
    const double r0 = static_cast<double>(i) * sr, r1 = r0 + sr;
    for (std::size_t j = 0; j < size; ++j) {
      const double c0 = static_cast<double>(j) * sc, c1 = c0 + sc;
      double acc = 0.0;
      for (auto r = static_cast<std::size_t>(std::floor(r0)); r < img.rows && static_cast<double>(r) < r1; ++r) {
        const double wr = std::min(r1, static_cast<double>(r + 1)) - std::max(r0, static_cast<double>(r));
        if (wr <= 0) continue;
        for (auto c = static_cast<std::size_t>(std::floor(c0)); c < img.cols && static_cast<double>(c) < c1; ++c) {
          const double wc = std::min(c1, static_cast<double>(c + 1)) - std::max(c0, static_cast<double>(c));
          if (wc <= 0) continue;
          acc += wr * wc * static_cast<double>(img(r, c));
        }
      }
      out[i * size + j] = acc / (sr * sc);
    }
  }
  return out;
}

}  // namespace detail

/// Intensity histogram of nonzero pixels (L1-normalized) followed by an
/// area-averaged thumbnail. Expects a slice normalized to [0, 1].
inline FeatureVector extract_features(const Array2<float>& slice, const FeatureConfig& config,
                                      SliceKey source = {}) {
  FeatureVector f;
  f.source = std::move(source);
  f.values.assign(config.dimension(), 0.0);
  const bool all_zero =
      std::all_of(slice.data.begin(), slice.data.end(), [](float v) { return v == 0.0f; });
  if (all_zero) {
    f.empty = true;
    return f;
  }
  const std::size_t bins = config.histogram_bins;
  double counted = 0.0;
  for (float v : slice.data) {
    if (v <= 0.0f) continue;
    auto b = static_cast<std::size_t>(std::floor(static_cast<double>(v) * static_cast<double>(bins)));
    f.values[std::min(b, bins - 1)] += 1.0;
    counted += 1.0;
  }
  if (counted > 0)
    for (std::size_t b = 0; b < bins; ++b) f.values[b] /= counted;
  auto thumb = detail::area_thumbnail(slice, config.thumbnail_size);
  std::copy(thumb.begin(), thumb.end(), f.values.begin() + static_cast<std::ptrdiff_t>(bins));
  return f;
}

/// Exhaustive feature index over labeled database slices.
struct RetrievalIndex {
  FeatureConfig config;
  std::vector<FeatureVector> entries;  // sorted by (subject_id, slice_index)

  std::size_t dimension() const { return config.dimension(); }
};

inline RetrievalIndex build_index(const std::vector<Volume>& database, const FeatureConfig& config) {
  RetrievalIndex index;
  index.config = config;
  std::set<SliceKey> seen;
  for (const auto& vol : database) {
    if (!vol.labels) throw Error("cannot index subject " + vol.subject_id + ": no labels");
    const auto& img = vol.modality(config.modality);
    for (std::size_t z = 0; z < vol.num_slices(); ++z) {
      const auto lab = vol.labels->plane(z);
      const auto brain = static_cast<std::size_t>(
          std::count_if(lab.data.begin(), lab.data.end(), [](std::uint8_t v) { return v != 0; }));
      if (brain <= config.min_brain_pixels) continue;
      SliceKey key{vol.subject_id, z};
      if (!seen.insert(key).second)
        throw Error("duplicate database slice " + vol.subject_id + ":" + std::to_string(z));
      index.entries.push_back(extract_features(normalize_intensity(img.plane(z)), config, key));
    }
  }
  std::sort(index.entries.begin(), index.entries.end(),
            [](const FeatureVector& a, const FeatureVector& b) { return a.source < b.source; });
  return index;
}

struct Match {
  SliceKey source;
  double distance = 0.0;
};

inline double euclidean_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

/// k nearest entries by Euclidean distance, ascending; ties by source key.
inline std::vector<Match> query_top_k(const RetrievalIndex& index, const FeatureVector& query,
                                      std::size_t k,
                                      const std::optional<std::string>& exclude_subject = {}) {
  if (k < 1) throw Error("query_top_k: k must be >= 1");
  if (query.values.size() != index.dimension())
    throw Error("query_top_k: query has dimension " + std::to_string(query.values.size()) +
                ", index has " + std::to_string(index.dimension()));
  std::vector<Match> all;
  all.reserve(index.entries.size());
  for (const auto& e : index.entries) {
    if (exclude_subject && e.source.subject_id == *exclude_subject) continue;
    all.push_back({e.source, euclidean_distance(e.values, query.values)});
  }
  if (all.empty()) throw Error("query_top_k: no index entries left after exclusion");
  const auto less = [](const Match& a, const Match& b) {
    return std::tie(a.distance, a.source) < std::tie(b.distance, b.source);
  };
  const std::size_t n = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(), less);
  all.resize(n);
  return all;
}

inline void save_index(const RetrievalIndex& index, const std::filesystem::path& path) {
  nlohmann::json h;
  h["kind"] = "retrieval_index";
  h["shape"] = {index.entries.size(), index.dimension()};
  h["dtype"] = dtype_name<double>();
  h["feature"] = {{"histogram_bins", index.config.histogram_bins},
                  {"thumbnail_size", index.config.thumbnail_size},
                  {"modality", modality_name(index.config.modality)},
                  {"min_brain_pixels", index.config.min_brain_pixels}};
  nlohmann::json sources = nlohmann::json::array();
  std::vector<double> payload;
  payload.reserve(index.entries.size() * index.dimension());
  for (const auto& e : index.entries) {
    sources.push_back({e.source.subject_id, e.source.slice_index, e.empty});
    payload.insert(payload.end(), e.values.begin(), e.values.end());
  }
  h["sources"] = std::move(sources);
  write_raw(path, h, as_bytes_span(payload));
}

inline RetrievalIndex load_index(const std::filesystem::path& path) {
  RawFile f = read_raw(path);
  RetrievalIndex index;
  try {
    if (f.header.value("kind", "") != "retrieval_index")
      throw Error("'" + path.string() + "' is not a retrieval index");
    const auto& fc = f.header.at("feature");
    index.config.histogram_bins = fc.at("histogram_bins").get<std::size_t>();
    index.config.thumbnail_size = fc.at("thumbnail_size").get<std::size_t>();
    index.config.modality = parse_modality(fc.at("modality").get<std::string>());
    index.config.min_brain_pixels = fc.at("min_brain_pixels").get<std::size_t>();
    const auto shape = f.header.at("shape").get<std::vector<std::size_t>>();
    const std::size_t dim = index.dimension();
    if (shape.size() != 2 || shape[1] != dim)
      throw Error("'" + path.string() + "' has inconsistent index shape");
    const auto& sources = f.header.at("sources");
    if (sources.size() != shape[0]) throw Error("'" + path.string() + "' source table size mismatch");
    if (f.payload.size() != shape[0] * dim * sizeof(double))
      throw Error("'" + path.string() + "' payload size mismatch");
    for (std::size_t i = 0; i < shape[0]; ++i) {
      FeatureVector e;
      e.source = {sources[i].at(0).get<std::string>(), sources[i].at(1).get<std::size_t>()};
      e.empty = sources[i].at(2).get<bool>();
      e.values = f.values<double>(i * dim, dim);
      index.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("corrupt index header in '" + path.string() + "': " + e.what());
  }
  return index;
}

}  // namespace priorseg
