// priorseg: phantom -> index -> train -> segment -> evaluate -> boxplot / overlay.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "priorseg/allocator.hpp"
#include "priorseg/config.hpp"
#include "priorseg/dataset.hpp"
#include "priorseg/evaluation.hpp"
#include "priorseg/inference.hpp"
#include "priorseg/phantom.hpp"
#include "priorseg/reports.hpp"
#include "priorseg/retrieval.hpp"
#include "priorseg/segnet.hpp"
#include "priorseg/training.hpp"

namespace fs = std::filesystem;
using namespace priorseg;

namespace {

struct Common {
  std::string config_file;
  std::string preset = "default";
  bool quiet = false;
};

PipelineConfig resolve_config(const Common& c) {
  if (!c.config_file.empty()) return load_pipeline_config(c.config_file);
  return pipeline_config_from_json({{"preset", c.preset}});
}

void log(const Common& c, const std::string& msg) {
  if (!c.quiet) std::cerr << msg << '\n';
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

fs::path ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw Error("cannot create directory '" + dir.string() + "'");
  return dir;
}

std::vector<Volume> split_volumes(const std::vector<SubjectManifest>& ms, Split s) {
  return load_volumes(with_split(ms, s));
}

// ---------------------------------------------------------------------------

struct PhantomArgs {
  std::optional<int> count, test_count;
  std::optional<std::uint64_t> base_seed;
  std::string out;
};

void cmd_phantom(const Common& common, const PhantomArgs& a) {
  auto cfg = resolve_config(common);
  if (a.count) cfg.cohort.count = *a.count;
  if (a.test_count) cfg.cohort.test_count = *a.test_count;
  else cfg.cohort.test_count = std::min(cfg.cohort.test_count, cfg.cohort.count);
  if (a.base_seed) cfg.cohort.base_seed = *a.base_seed;
  validate(cfg);
  const fs::path out = ensure_dir(a.out.empty() ? cfg.paths.data_root : fs::path(a.out));
  if (cfg.cohort.count == 0) std::cerr << "warning: count is 0, writing an empty manifest\n";
  std::vector<SubjectManifest> manifests;
  for (int i = 0; i < cfg.cohort.count; ++i) {
    PhantomSpec spec = cfg.cohort.spec;
    spec.seed = cfg.cohort.base_seed + static_cast<std::uint64_t>(i);
    const Split split = i >= cfg.cohort.count - cfg.cohort.test_count ? Split::Test : Split::Train;
    manifests.push_back(save_volume(generate_phantom(spec), out, split));
    log(common, "wrote " + manifests.back().subject_id + " (" + std::string(split_name(split)) + ")");
  }
  write_manifest(out / "manifest.json", manifests);
}

// ---------------------------------------------------------------------------

struct IndexArgs {
  std::string manifest, out;
};

void cmd_index(const Common& common, const IndexArgs& a) {
  const auto cfg = resolve_config(common);
  const auto ms = read_manifest(a.manifest);
  const auto index = build_index(split_volumes(ms, Split::Train), cfg.retrieval);
  const fs::path out = a.out.empty() ? cfg.paths.index : fs::path(a.out);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  save_index(index, out);
  log(common, "indexed " + std::to_string(index.entries.size()) + " slices into " + out.string());
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string manifest, index, out, mode;
  std::optional<int> repetitions, epochs, patches_per_epoch;
  std::optional<std::uint64_t> seed;
  std::optional<double> threshold;
};

void write_run_reports(const fs::path& dir, const std::vector<RunRecord>& records) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : records) runs.push_back(to_json(r));
  write_text(dir / "runs.json", runs.dump(2) + "\n");
  write_text(dir / "runs.csv", runs_csv(records));
  const auto report = summarize(records);
  write_text(dir / "summary.json", to_json(report).dump(2) + "\n");
  std::string text;
  for (const auto& c : report.classes)
    text += std::string(tissue_name(c.tissue)) + " " + format_mean_std(c.mean, c.std) + "\n";
  write_text(dir / "summary.txt", text);
}

void cmd_train(const Common& common, const TrainArgs& a) {
  auto cfg = resolve_config(common);
  if (!a.mode.empty()) cfg.train.channel_mode = parse_channel_mode(a.mode);
  if (a.repetitions) cfg.train.repetitions = *a.repetitions;
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.patches_per_epoch) cfg.train.patches_per_epoch = *a.patches_per_epoch;
  if (a.seed) cfg.train.base_seed = *a.seed;
  if (a.threshold) cfg.train.gate_threshold = *a.threshold;
  validate(cfg);
  const fs::path out = ensure_dir(a.out.empty() ? cfg.paths.checkpoints : fs::path(a.out));
  cfg.train.checkpoint_dir = out;

  const auto ms = read_manifest(a.manifest);
  const auto train_set = split_volumes(ms, Split::Train);
  const auto test_set = split_volumes(ms, Split::Test);
  if (train_set.empty()) throw Error("manifest '" + a.manifest + "' has no train subjects");
  if (test_set.empty()) throw Error("manifest '" + a.manifest + "' has no test subjects");

  std::optional<RetrievalIndex> index;
  std::optional<RetrievalContext> ctx;
  if (cfg.train.channel_mode == ChannelMode::FourRetrieved) {
    index = load_index(a.index.empty() ? cfg.paths.index : fs::path(a.index));
    ctx = RetrievalContext::over(*index, train_set, cfg.registration);
  }
  const auto records = run_repeated(cfg.train, train_set, test_set, ctx ? &*ctx : nullptr, cfg.stitch,
                                    [&](const std::string& m) { log(common, m); });
  write_run_reports(out, records);
}

// ---------------------------------------------------------------------------

struct SegmentArgs {
  std::string checkpoint, manifest, index, out, mode, split = "test";
  std::optional<double> threshold;
};

void cmd_segment(const Common& common, const SegmentArgs& a) {
  auto cfg = resolve_config(common);
  if (!a.mode.empty()) cfg.train.channel_mode = parse_channel_mode(a.mode);
  if (a.threshold) cfg.train.gate_threshold = *a.threshold;
  validate(cfg);
  const ChannelMode mode = cfg.train.channel_mode;
  const auto state = load_checkpoint<float>(a.checkpoint);
  if (state.config.in_channels != input_channels(mode))
    throw Error("checkpoint '" + a.checkpoint + "' has " + std::to_string(state.config.in_channels) +
                " input channels, mode " + std::string(channel_mode_name(mode)) + " needs " +
                std::to_string(input_channels(mode)));
  const auto ms = read_manifest(a.manifest);
  std::vector<Volume> database;
  std::optional<RetrievalIndex> index;
  std::optional<RetrievalContext> ctx;
  if (mode == ChannelMode::FourRetrieved) {
    database = split_volumes(ms, Split::Train);
    index = load_index(a.index.empty() ? cfg.paths.index : fs::path(a.index));
    ctx = RetrievalContext::over(*index, database, cfg.registration);
  }
  const fs::path out = ensure_dir(a.out);
  std::string gate_log = "subject,slice,use_prior,similarity,threshold,rotation_deg,dr,dc,matched_subject,matched_slice\n";
  for (const auto& m : with_split(ms, parse_split(a.split))) {
    const Volume v = load_volume(m);
    const auto seg = segment_volume(state, v, mode, ctx ? &*ctx : nullptr, cfg.stitch, cfg.train.gate_threshold);
    write_array(out / (v.subject_id + "_pred.raw"), seg.labels, v.spacing);
    for (std::size_t z = 0; z < seg.decisions.size(); ++z) {
      if (!seg.decisions[z]) continue;
      const auto& d = *seg.decisions[z];
      gate_log += v.subject_id + "," + std::to_string(z) + "," + (d.use_prior ? "1" : "0") + "," +
                  num(d.similarity) + "," + num(d.threshold) + "," +
                  num(d.transform.rotation * 180.0 / std::numbers::pi) + "," + num(d.transform.dr) + "," +
                  num(d.transform.dc) + "," + d.matched_source.subject_id + "," +
                  std::to_string(d.matched_source.slice_index) + "\n";
    }
    log(common, "segmented " + v.subject_id);
  }
  if (mode == ChannelMode::FourRetrieved) write_text(out / "gate_log.csv", gate_log);
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::string pred, manifest, out, split = "test";
};

void cmd_evaluate(const Common& common, const EvaluateArgs& a) {
  const auto ms = with_split(read_manifest(a.manifest), parse_split(a.split));
  if (ms.empty()) throw Error("manifest '" + a.manifest + "' has no " + a.split + " subjects");
  nlohmann::json subjects = nlohmann::json::object();
  std::vector<DiceScores> all;
  std::string csv = "subject";
  for (auto t : kEvaluatedTissues) csv += "," + std::string(tissue_name(t));
  csv += ",mean\n";
  for (const auto& m : ms) {
    const fs::path pred_path = fs::path(a.pred) / (m.subject_id + "_pred.raw");
    if (!fs::exists(pred_path))
      throw Error("no prediction for subject " + m.subject_id + " (expected " + pred_path.string() + ")");
    if (!m.label_path) throw Error("subject " + m.subject_id + " has no labels");
    const auto pred = read_array<std::uint8_t>(pred_path);
    const auto truth = read_array<std::uint8_t>(*m.label_path);
    DiceScores s;
    try {
      s = evaluate_volume(pred, truth);
    } catch (const Error& e) {
      throw Error("subject " + m.subject_id + ": " + e.what());
    }
    subjects[m.subject_id] = to_json(s);
    csv += m.subject_id;
    for (auto t : kEvaluatedTissues) csv += "," + num(s[t]);
    csv += "," + num(s.evaluated_mean()) + "\n";
    all.push_back(s);
  }
  const auto aggregate = average_scores(all);
  nlohmann::json j = {{"subjects", subjects}, {"aggregate", to_json(aggregate)},
                      {"evaluated_mean", aggregate.evaluated_mean()}};
  const fs::path out = ensure_dir(a.out);
  write_text(out / "evaluation.json", j.dump(2) + "\n");
  write_text(out / "evaluation.csv", csv);
  log(common, "mean DSC " + num(aggregate.evaluated_mean()));
}

// ---------------------------------------------------------------------------

struct BoxplotArgs {
  std::string runs, out, image;
  std::optional<std::size_t> best;
};

void cmd_boxplot(const Common&, const BoxplotArgs& a) {
  const auto j = read_json(a.runs);
  std::vector<RunRecord> records;
  try {
    for (const auto& r : j) records.push_back(run_record_from_json(r));
  } catch (const nlohmann::json::exception& e) {
    throw Error("corrupt run records in '" + a.runs + "': " + e.what());
  }
  if (a.best) records = select_best(records, *a.best);
  emit_boxplot(records, a.out, a.image);
}

// ---------------------------------------------------------------------------

struct OverlayArgs {
  std::string manifest, subject, pred3, pred4, out;
  std::size_t slice = 0;
};

void cmd_overlay(const Common&, const OverlayArgs& a) {
  const auto ms = read_manifest(a.manifest);
  const auto it = std::find_if(ms.begin(), ms.end(), [&](const auto& m) { return m.subject_id == a.subject; });
  if (it == ms.end()) throw Error("manifest has no subject " + a.subject);
  const Volume v = load_volume(*it);
  if (a.slice >= v.num_slices()) throw Error("subject " + a.subject + " has no slice " + std::to_string(a.slice));
  const auto p3 = read_array<std::uint8_t>(a.pred3);
  const auto p4 = read_array<std::uint8_t>(a.pred4);
  for (const auto* p : {&p3, &p4})
    if (p->shape() != v.shape()) throw Error("prediction shape differs from subject " + a.subject);
  emit_overlay(v.modality(Modality::T1).plane(a.slice), v.label_slice(a.slice), LabelMap(p3.plane(a.slice)),
               LabelMap(p4.plane(a.slice)), a.out);
}

std::string json_error_line(const std::string& command, const std::string& message) {
  return nlohmann::json{{"status", "error"}, {"command", command}, {"message", message}}.dump();
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Retrieval-gated brain tissue segmentation on synthetic phantoms"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config_file, "Pipeline config JSON")->check(CLI::ExistingFile);
  app.add_option("--preset", common.preset, "Built-in config when --config is absent")
      ->check(CLI::IsMember({"default", "tiny"}));
  app.add_flag("-q,--quiet", common.quiet, "Suppress progress output");

  PhantomArgs phantom;
  auto* sp = app.add_subcommand("phantom", "Generate a synthetic cohort and its manifest");
  sp->add_option("--count", phantom.count, "Number of subjects");
  sp->add_option("--test-count", phantom.test_count, "Trailing subjects assigned to the test split");
  sp->add_option("--base-seed", phantom.base_seed, "Seed of the first subject");
  sp->add_option("--out", phantom.out, "Output directory");

  IndexArgs index;
  auto* si = app.add_subcommand("index", "Build the retrieval index from the train split");
  si->add_option("--manifest", index.manifest)->required();
  si->add_option("--out", index.out, "Index file");

  TrainArgs train;
  auto* st = app.add_subcommand("train", "Train R runs and score them on the test split");
  st->add_option("--manifest", train.manifest)->required();
  st->add_option("--mode", train.mode)->check(CLI::IsMember({"three", "four_own_gt", "four_retrieved"}));
  st->add_option("--index", train.index);
  st->add_option("--out", train.out, "Checkpoint and report directory");
  st->add_option("--repetitions", train.repetitions);
  st->add_option("--epochs", train.epochs);
  st->add_option("--patches-per-epoch", train.patches_per_epoch);
  st->add_option("--seed", train.seed, "Base seed; run i uses seed + i");
  st->add_option("--threshold", train.threshold, "Gate threshold");

  SegmentArgs segment;
  auto* ss = app.add_subcommand("segment", "Segment every subject of a split");
  ss->add_option("--checkpoint", segment.checkpoint)->required()->check(CLI::ExistingFile);
  ss->add_option("--manifest", segment.manifest)->required();
  ss->add_option("--mode", segment.mode)->check(CLI::IsMember({"three", "four_own_gt", "four_retrieved"}));
  ss->add_option("--index", segment.index);
  ss->add_option("--out", segment.out)->required();
  ss->add_option("--split", segment.split)->check(CLI::IsMember({"train", "test"}));
  ss->add_option("--threshold", segment.threshold);

  EvaluateArgs evaluate;
  auto* se = app.add_subcommand("evaluate", "Score predictions against the manifest labels");
  se->add_option("--pred", evaluate.pred)->required();
  se->add_option("--manifest", evaluate.manifest)->required();
  se->add_option("--out", evaluate.out)->required();
  se->add_option("--split", evaluate.split)->check(CLI::IsMember({"train", "test"}));

  BoxplotArgs boxplot;
  auto* sb = app.add_subcommand("boxplot", "Box-plot data from run records");
  sb->add_option("--runs", boxplot.runs)->required()->check(CLI::ExistingFile);
  sb->add_option("--best", boxplot.best, "Keep the k best runs");
  sb->add_option("--out", boxplot.out, "CSV plot data")->required();
  sb->add_option("--image", boxplot.image, "Optional PGM rendering");

  OverlayArgs overlay;
  auto* so = app.add_subcommand("overlay", "Four-panel comparison image of one slice");
  so->add_option("--manifest", overlay.manifest)->required();
  so->add_option("--subject", overlay.subject)->required();
  so->add_option("--slice", overlay.slice)->required();
  so->add_option("--pred3", overlay.pred3)->required()->check(CLI::ExistingFile);
  so->add_option("--pred4", overlay.pred4)->required()->check(CLI::ExistingFile);
  so->add_option("--out", overlay.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json_error_line("parse", e.what()) << '\n';
    return 2;
  }

  const auto* sub = app.get_subcommands().front();
  try {
    if (sub == sp) cmd_phantom(common, phantom);
    else if (sub == si) cmd_index(common, index);
    else if (sub == st) cmd_train(common, train);
    else if (sub == ss) cmd_segment(common, segment);
    else if (sub == se) cmd_evaluate(common, evaluate);
    else if (sub == sb) cmd_boxplot(common, boxplot);
    else if (sub == so) cmd_overlay(common, overlay);
  } catch (const std::exception& e) {
    std::cerr << json_error_line(sub->get_name(), e.what()) << '\n';
    return 1;
  }
  return 0;
}
