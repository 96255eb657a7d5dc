#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "priorseg/core.hpp"
#include "priorseg/phantom.hpp"

namespace priorseg::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("priorseg_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline LabelMap random_labels(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> cls(0, kNumClasses - 1);
  Array2<std::uint8_t> a(rows, cols);
  for (auto& v : a.data) v = static_cast<std::uint8_t>(cls(rng));
  return LabelMap(std::move(a));
}

/// A short phantom used where the full 16-slice cohort is unnecessary.
inline PhantomSpec small_spec(std::uint64_t seed, std::size_t slices = 4) {
  PhantomSpec s;
  s.seed = seed;
  s.shape = {slices, 128, 128};
  return s;
}

}  // namespace priorseg::testing
