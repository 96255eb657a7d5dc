// End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails. Arguments select a subset, e.g.
// `acceptance 1 2 8`.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "priorseg/allocator.hpp"
#include "priorseg/config.hpp"
#include "priorseg/dataset.hpp"
#include "priorseg/evaluation.hpp"
#include "priorseg/phantom.hpp"
#include "priorseg/registration.hpp"
#include "priorseg/reports.hpp"
#include "priorseg/retrieval.hpp"
#include "priorseg/segnet.hpp"
#include "priorseg/training.hpp"

namespace fs = std::filesystem;
using namespace priorseg;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string sci(double v) {
  std::ostringstream os;
  os.precision(2);
  os << std::scientific << v;
  return os.str();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

fs::path scratch_dir(const std::string& tag) {
  const auto p = fs::temp_directory_path() / ("priorseg_acceptance_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------------------
// 1. Metric oracles.

Outcome metric_oracles() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> cls(0, kNumClasses - 1);
  double worst_dice = 0.0;
  for (int t = 0; t < 1000; ++t) {
    Array2<std::uint8_t> p(32, 32), q(32, 32);
    for (auto& v : p.data) v = static_cast<std::uint8_t>(cls(rng));
    for (auto& v : q.data) v = static_cast<std::uint8_t>(cls(rng));
    for (int k = 0; k < kNumClasses; ++k) {
      double tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        tp += p.data[i] == k && q.data[i] == k;
        fp += p.data[i] == k && q.data[i] != k;
        fn += p.data[i] != k && q.data[i] == k;
      }
      const double oracle = tp + fp + fn == 0 ? 1.0 : 2 * tp / (2 * tp + fp + fn);
      worst_dice = std::max(worst_dice, std::abs(dice(p, q, k).value - oracle));
    }
  }

  std::uniform_real_distribution<float> u(0.0f, 5.0f);
  std::bernoulli_distribution sparse(0.3);
  int violations = 0;
  for (int t = 0; t < 1000; ++t) {
    Array2<float> a(24, 24), b(24, 24);
    for (auto& v : a.data) v = sparse(rng) ? 0.0f : u(rng);
    for (auto& v : b.data) v = sparse(rng) ? 0.0f : u(rng);
    const double s = similarity(a, b);
    violations += similarity(a, a) != 1.0;
    violations += similarity(a, Array2<float>(24, 24, 0.0f)) != 0.0;
    violations += !(s >= 0.0 && s <= 1.0);
    violations += s != similarity(b, a);
  }
  const double secs = seconds_since(t0);
  return {worst_dice <= 1e-12 && violations == 0 && secs < 10.0,
          "max |dice - oracle| " + sci(worst_dice) + ", similarity violations " +
              std::to_string(violations) + ", " + fmt(secs, 2) + " s"};
}

// ---------------------------------------------------------------------------
// 2. Gradient check.

Outcome gradient_check() {
  const auto t0 = Clock::now();
  NetworkConfig cfg;
  cfg.depth = 2;
  cfg.base_filters = 2;
  cfg.in_channels = 4;
  cfg.seed = 7;
  auto state = build_network<double>(cfg);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  BatchTensor<double> x(2, 8, 8, 4);
  for (auto& v : x.values) v = u(rng);
  std::uniform_int_distribution<int> cls(0, kNumClasses - 1);
  std::vector<LabelMap> maps;
  for (int i = 0; i < 2; ++i) {
    Array2<std::uint8_t> a(8, 8);
    for (auto& v : a.data) v = static_cast<std::uint8_t>(cls(rng));
    maps.emplace_back(std::move(a));
  }
  const auto y = onehot_batch<double>(maps);
  const auto g = backward(state, x, y);
  const double h = 1e-5;
  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  for (std::size_t p = 0; p < state.params.size(); ++p)
    for (std::size_t i = 0; i < state.params[p].values.size(); ++i, ++checked) {
      auto& v = state.params[p].values[i];
      const double saved = v;
      v = saved + h;
      const double lp = mse_loss(forward(state, x, Mode::Train), y);
      v = saved - h;
      const double lm = mse_loss(forward(state, x, Mode::Train), y);
      v = saved;
      const double fd = (lp - lm) / (2 * h);
      const double an = g.values[p][i];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-7});
      if (rel > worst) {
        worst = rel;
        worst_name = state.params[p].name;
      }
    }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0, std::to_string(checked) + " parameters, worst relative error " +
                                           sci(worst) + " (" + worst_name + "), " + fmt(secs, 2) + " s"};
}

// ---------------------------------------------------------------------------
// 3 and 4. Phantom experiments with the tiny budget.

struct Experiment {
  std::map<ChannelMode, std::vector<RunRecord>> runs;
  std::map<ChannelMode, double> seconds;
};

const Experiment& phantom_experiment() {
  static const Experiment exp = [] {
    Experiment e;
    const auto cfg = tiny_preset();
    std::vector<Volume> train_set, test_set;
    for (std::uint64_t s : {4, 5, 7, 14, 70}) {
      PhantomSpec spec = cfg.cohort.spec;
      spec.seed = s;
      train_set.push_back(generate_phantom(spec));
    }
    for (std::uint64_t s : {1, 148}) {
      PhantomSpec spec = cfg.cohort.spec;
      spec.seed = s;
      test_set.push_back(generate_phantom(spec));
    }
    const auto index = build_index(train_set, cfg.retrieval);
    const auto ctx = RetrievalContext::over(index, train_set, cfg.registration);
    for (auto mode : {ChannelMode::FourOwnGt, ChannelMode::FourRetrieved, ChannelMode::Three}) {
      TrainConfig tc = cfg.train;
      tc.channel_mode = mode;
      tc.repetitions = 5;
      tc.base_seed = 100;
      const auto t0 = Clock::now();
      e.runs[mode] = run_repeated(tc, train_set, test_set, &ctx, cfg.stitch);
      e.seconds[mode] = seconds_since(t0);
      for (const auto& r : e.runs[mode])
        std::cerr << "  " << channel_mode_name(mode) << " run " << r.run_index << " mean DSC "
                  << fmt(r.test_dice.evaluated_mean()) << "\n";
    }
    return e;
  }();
  return exp;
}

double mean_of(const std::vector<RunRecord>& rs) {
  double s = 0;
  for (const auto& r : rs) s += r.test_dice.evaluated_mean();
  return s / static_cast<double>(rs.size());
}

Outcome basic_experiment() {
  const auto& e = phantom_experiment();
  const auto& own = e.runs.at(ChannelMode::FourOwnGt);
  const auto report = summarize(own);
  const double m = mean_of(own);
  const double secs = e.seconds.at(ChannelMode::FourOwnGt);
  std::string detail = "four_own_gt mean DSC " + fmt(m) + " (";
  for (const auto& c : report.classes) {
    if (detail.back() != '(') detail += ", ";
    detail += std::string(tissue_name(c.tissue)) + " " + format_mean_std(c.mean, c.std);
  }
  detail += "), " + fmt(secs / 60.0, 1) + " min";
  return {m >= 0.95 && secs <= 20 * 60.0, detail};
}

Outcome ordering_experiment() {
  const auto& e = phantom_experiment();
  const auto& own = e.runs.at(ChannelMode::FourOwnGt);
  const auto& ret = e.runs.at(ChannelMode::FourRetrieved);
  const auto& three = e.runs.at(ChannelMode::Three);
  int wins = 0;
  for (std::size_t i = 0; i < ret.size(); ++i)
    wins += ret[i].test_dice.evaluated_mean() >= three[i].test_dice.evaluated_mean();
  const double mo = mean_of(own), mr = mean_of(ret), mt = mean_of(three);
  double secs = 0;
  for (const auto& [m, s] : e.seconds) secs += s;
  return {wins >= 3 && mo >= mr && mr >= mt && secs <= 90 * 60.0,
          "means own " + fmt(mo) + (mo >= mr ? " >= " : " < ") + "retrieved " + fmt(mr) + (mr >= mt ? " >= " : " < ") +
              "three " + fmt(mt) + ", retrieved >= three in " +
              std::to_string(wins) + "/5 seeds, " + fmt(secs / 60.0, 1) + " min"};
}

// ---------------------------------------------------------------------------
// 5. Registration recovery.

Outcome registration_recovery() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(55);
  std::uniform_real_distribution<double> angle(-10.0, 10.0), unit(0.0, 1.0);
  std::map<std::uint64_t, Volume> cache;
  int recovered = 0, monotone = 0;
  double worst_shift = 0, worst_rot = 0;
  for (int t = 0; t < 50; ++t) {
    const std::uint64_t seed = 200 + static_cast<std::uint64_t>(t % 10);
    if (!cache.count(seed)) {
      PhantomSpec spec;
      spec.seed = seed;
      cache.emplace(seed, generate_phantom(spec));
    }
    const auto& v = cache.at(seed);
    const std::size_t z = 3 + static_cast<std::size_t>(t / 10) * 2;
    const auto fixed = normalize_intensity(v.modality(Modality::T1).plane(z));
    const double radius = 5.0 * std::sqrt(unit(rng)), dir = 2 * std::numbers::pi * unit(rng);
    const RigidTransform2D p{angle(rng) * std::numbers::pi / 180.0, radius * std::cos(dir), radius * std::sin(dir)};
    const auto moving = apply_transform(fixed, p);
    const auto r = register_rigid(fixed, moving);
    const auto want = p.inverse();
    const double shift_err = std::hypot(r.transform.dr - want.dr, r.transform.dc - want.dc);
    const double rot_err =
        std::abs(RigidTransform2D::wrap_angle(r.transform.rotation - want.rotation)) * 180.0 / std::numbers::pi;
    worst_shift = std::max(worst_shift, shift_err);
    worst_rot = std::max(worst_rot, rot_err);
    recovered += shift_err <= 1.0 && rot_err <= 2.0;
    monotone += r.similarity >= similarity(fixed, moving);
  }
  const double secs = seconds_since(t0);
  return {recovered == 50 && monotone == 50 && secs < 300.0,
          std::to_string(recovered) + "/50 recovered (worst shift " + fmt(worst_shift, 3) + " px, rotation " +
              fmt(worst_rot, 3) + " deg), similarity non-decreasing in " + std::to_string(monotone) + "/50, " +
              fmt(secs, 1) + " s"};
}

// ---------------------------------------------------------------------------
// 6. Retrieval oracle.

Outcome retrieval_oracle() {
  std::mt19937_64 rng(66);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int mismatches = 0, self_failures = 0;
  for (int t = 0; t < 200; ++t) {
    RetrievalIndex idx;
    idx.config.histogram_bins = 1 + rng() % 8;
    idx.config.thumbnail_size = 1 + rng() % 3;
    const std::size_t n = 1 + rng() % 300, subjects = 1 + rng() % 7;
    for (std::size_t i = 0; i < n; ++i) {
      FeatureVector f;
      f.source = {"subject" + std::to_string(i % subjects), i / subjects};
      for (std::size_t d = 0; d < idx.dimension(); ++d) f.values.push_back(std::round(u(rng) * 3) / 3);
      idx.entries.push_back(std::move(f));
    }
    std::sort(idx.entries.begin(), idx.entries.end(), [](const auto& a, const auto& b) { return a.source < b.source; });
    FeatureVector q;
    for (std::size_t d = 0; d < idx.dimension(); ++d) q.values.push_back(u(rng));
    std::vector<std::pair<double, SliceKey>> oracle;
    for (const auto& e : idx.entries) {
      double s = 0;
      for (std::size_t d = 0; d < q.values.size(); ++d) s += (e.values[d] - q.values[d]) * (e.values[d] - q.values[d]);
      oracle.emplace_back(std::sqrt(s), e.source);
    }
    std::sort(oracle.begin(), oracle.end());
    const std::size_t k = 1 + rng() % (n + 10);
    const auto hits = query_top_k(idx, q, k);
    if (hits.size() != std::min(k, n)) ++mismatches;
    for (std::size_t i = 0; i < hits.size(); ++i)
      if (hits[i].source != oracle[i].second || hits[i].distance != oracle[i].first) {
        ++mismatches;
        break;
      }
    const auto& self = idx.entries[rng() % n];
    const auto top = query_top_k(idx, self, 1);
    self_failures += top[0].distance != 0.0;
  }
  return {mismatches == 0 && self_failures == 0, "200 random indexes: " + std::to_string(mismatches) +
                                                     " oracle mismatches, " + std::to_string(self_failures) +
                                                     " nonzero self-query distances"};
}

// ---------------------------------------------------------------------------
// 7. CLI determinism.

int shell(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> tree_contents(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    out[fs::relative(e.path(), root).generic_string()] = ss.str();
  }
  return out;
}

Outcome cli_determinism() {
  const auto t0 = Clock::now();
  const fs::path base = scratch_dir("determinism");
  const std::string config = R"({
  "preset": "tiny",
  "cohort": {"count": 4, "test_count": 1, "shape": [6, 128, 128]},
  "train": {"epochs": 1, "patches_per_epoch": 64, "repetitions": 2}
})";
  const std::string cli = PRIORSEG_CLI;
  for (const char* name : {"a", "b"}) {
    const fs::path dir = base / name;
    fs::create_directories(dir);
    std::ofstream(dir / "cfg.json") << config;
    std::string script = "cd '" + dir.string() + "' && P='" + cli + " -q --config cfg.json' && " +
                         "$P phantom --out data && $P index --manifest data/manifest.json --out index.raw";
    for (const char* mode : {"three", "four_own_gt", "four_retrieved"}) {
      const std::string m = mode;
      script += " && $P train --manifest data/manifest.json --mode " + m + " --index index.raw --out runs_" + m +
                " && $P segment --checkpoint runs_" + m + "/run1.ckpt --manifest data/manifest.json --mode " + m +
                " --index index.raw --out pred_" + m + " && $P evaluate --pred pred_" + m +
                " --manifest data/manifest.json --out eval_" + m + " && $P boxplot --runs runs_" + m +
                "/runs.json --out box_" + m + ".csv --image box_" + m + ".pgm";
    }
    script += " && $P overlay --manifest data/manifest.json --subject phantom4 --slice 3 "
              "--pred3 pred_three/phantom4_pred.raw --pred4 pred_four_retrieved/phantom4_pred.raw --out overlay.pgm";
    if (const int rc = shell(script + " 2> log.txt"); rc != 0)
      return {false, std::string("pipeline run ") + name + " exited with " + std::to_string(rc)};
  }
  auto a = tree_contents(base / "a"), b = tree_contents(base / "b");
  a.erase("log.txt");
  b.erase("log.txt");
  std::size_t differing = 0, checkpoints = 0, labels = 0, reports = 0;
  std::string first_diff;
  for (const auto& [name, bytes] : a) {
    auto it = b.find(name);
    if (it == b.end() || it->second != bytes) {
      if (first_diff.empty()) first_diff = name;
      ++differing;
    }
    checkpoints += name.ends_with(".ckpt");
    labels += name.ends_with("_pred.raw");
    reports += name.ends_with(".json") || name.ends_with(".csv") || name.ends_with(".txt") || name.ends_with(".pgm");
  }
  differing += a.size() != b.size();
  const double secs = seconds_since(t0);
  const bool ok = differing == 0 && checkpoints == 6 && labels == 3 && reports > 0;
  if (ok) fs::remove_all(base);
  return {ok, std::to_string(a.size()) + " files (" + std::to_string(checkpoints) + " checkpoints, " +
                  std::to_string(labels) + " label volumes, " + std::to_string(reports) + " reports), " +
                  std::to_string(differing) + " differ" + (first_diff.empty() ? "" : " (first: " + first_diff + ")") +
                  ", " + fmt(secs, 1) + " s"};
}

// ---------------------------------------------------------------------------
// 8. Round trips.

Outcome round_trips() {
  const fs::path dir = scratch_dir("roundtrip");
  int failures = 0;
  for (std::uint64_t s : {1, 2, 3}) {
    PhantomSpec spec;
    spec.seed = s;
    const auto v = generate_phantom(spec);
    failures += !(load_volume(save_volume(v, dir / std::to_string(s))) == v);
  }
  NetworkConfig cfg;
  cfg.depth = 3;
  cfg.base_filters = 8;
  cfg.seed = 9;
  auto state = build_network<float>(cfg);
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  BatchTensor<float> x(2, 16, 16, 4);
  for (auto& v : x.values) v = u(rng);
  std::vector<LabelMap> maps;
  std::uniform_int_distribution<int> cls(0, kNumClasses - 1);
  for (int i = 0; i < 2; ++i) {
    Array2<std::uint8_t> a(16, 16);
    for (auto& v : a.data) v = static_cast<std::uint8_t>(cls(rng));
    maps.emplace_back(std::move(a));
  }
  update_running_statistics(state, backward(state, x, onehot_batch<float>(maps)));
  save_checkpoint(state, dir / "a.ckpt");
  const auto back = load_checkpoint<float>(dir / "a.ckpt");
  failures += !(back.params == state.params && back.buffers == state.buffers && back.config == state.config);
  save_checkpoint(back, dir / "b.ckpt");
  std::ifstream fa(dir / "a.ckpt", std::ios::binary), fb(dir / "b.ckpt", std::ios::binary);
  failures += !std::equal(std::istreambuf_iterator<char>(fa), {}, std::istreambuf_iterator<char>(fb), {});

  int onehot_failures = 0;
  for (int t = 0; t < 500; ++t) {
    const std::size_t r = 1 + rng() % 40, c = 1 + rng() % 40;
    Array2<std::uint8_t> a(r, c);
    for (auto& v : a.data) v = static_cast<std::uint8_t>(cls(rng));
    const LabelMap m(a);
    onehot_failures += !(onehot_decode(onehot_encode(m)) == m);
  }
  fs::remove_all(dir);
  return {failures == 0 && onehot_failures == 0,
          "volume/checkpoint mismatches " + std::to_string(failures) + ", one-hot mismatches " +
              std::to_string(onehot_failures) + "/500"};
}

// ---------------------------------------------------------------------------
// 9. Report formats.

Outcome report_formats() {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.5, 1.0);
  int quantile_failures = 0;
  for (int t = 0; t < 100; ++t) {
    std::vector<RunRecord> rs(1 + rng() % 10);
    for (std::size_t i = 0; i < rs.size(); ++i) {
      rs[i].run_index = static_cast<int>(i);
      for (int k = 1; k <= 3; ++k) rs[i].test_dice.value[static_cast<std::size_t>(k)] = u(rng);
    }
    for (const auto& s : boxplot_series(rs)) {
      auto v = s.values;
      std::sort(v.begin(), v.end());
      const auto q = [&](double p) {
        const double h = p * static_cast<double>(v.size() - 1);
        const auto lo = static_cast<std::size_t>(h);
        return lo + 1 < v.size() ? v[lo] + (h - static_cast<double>(lo)) * (v[lo + 1] - v[lo]) : v[lo];
      };
      quantile_failures += std::abs(s.summary.min - q(0)) > 1e-15 || std::abs(s.summary.q1 - q(0.25)) > 1e-15 ||
                           std::abs(s.summary.median - q(0.5)) > 1e-15 ||
                           std::abs(s.summary.q3 - q(0.75)) > 1e-15 || std::abs(s.summary.max - q(1)) > 1e-15;
    }
  }

  const fs::path dir = scratch_dir("reports");
  Array2<std::uint8_t> truth(24, 30);
  for (std::size_t i = 0; i < truth.size(); ++i) truth.data[i] = static_cast<std::uint8_t>(i % kNumClasses);
  Array2<float> input(24, 30);
  for (std::size_t i = 0; i < input.size(); ++i) input.data[i] = static_cast<float>(i);
  const LabelMap t(truth);
  emit_overlay(input, t, t, t, dir / "overlay.pgm");
  const auto img = read_pgm(dir / "overlay.pgm");
  int palette_failures = 0, white_wm = 0;
  for (std::size_t panel = 1; panel < 4; ++panel)
    for (std::size_t r = 0; r < 24; ++r)
      for (std::size_t c = 0; c < 30; ++c) {
        const auto px = img.at(panel * (30 + kPanelGap) + c, r);
        const auto cls = t(r, c);
        palette_failures += px != kPalette[cls].gray;
        if (cls == static_cast<std::uint8_t>(Tissue::WM)) white_wm += px == 255;
        if (cls == static_cast<std::uint8_t>(Tissue::Background)) palette_failures += px != 0;
      }
  fs::remove_all(dir);
  return {quantile_failures == 0 && palette_failures == 0 && white_wm > 0,
          "quantile mismatches " + std::to_string(quantile_failures) + ", palette mismatches " +
              std::to_string(palette_failures) + ", WM pixels rendered white " + std::to_string(white_wm)};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"metric oracles", metric_oracles},
      {"gradient check", gradient_check},
      {"basic experiment (own labels as prior)", basic_experiment},
      {"retrieved prior vs three-channel ordering", ordering_experiment},
      {"registration recovery", registration_recovery},
      {"retrieval oracle", retrieval_oracle},
      {"CLI determinism", cli_determinism},
      {"round trips", round_trips},
      {"report formats", report_formats},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << " " << criteria[i].first << ": "
              << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
