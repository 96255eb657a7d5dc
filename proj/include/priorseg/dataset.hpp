#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "priorseg/core.hpp"
#include "priorseg/raw_file.hpp"

namespace priorseg {

enum class Split { Train, Test };

inline std::string_view split_name(Split s) { return s == Split::Train ? "train" : "test"; }

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  throw Error("unknown split tag '" + std::string(s) + "'");
}

struct SubjectManifest {
  std::string subject_id;
  std::map<Modality, std::filesystem::path> modality_paths;
  std::optional<std::filesystem::path> label_path;
  Split split = Split::Train;

  friend bool operator==(const SubjectManifest&, const SubjectManifest&) = default;
};

inline Volume load_volume(const SubjectManifest& m) {
  for (auto mod : kModalities)
    if (!m.modality_paths.contains(mod))
      throw Error("manifest for subject " + m.subject_id + " lacks a " +
                  std::string(modality_name(mod)) + " path");
  if (m.modality_paths.size() != kModalities.size())
    throw Error("manifest for subject " + m.subject_id + " lists unexpected modalities");

  Volume v;
  v.subject_id = m.subject_id;
  std::optional<std::pair<Modality, std::array<std::size_t, 3>>> first;
  for (auto mod : kModalities) {
    const auto& path = m.modality_paths.at(mod);
    std::array<double, 3> spacing{};
    auto arr = read_array<float>(path, &spacing);
    if (!first) {
      first = {mod, arr.shape()};
      v.spacing = spacing;
    } else if (arr.shape() != first->second) {
      throw Error("subject " + m.subject_id + ": " + std::string(modality_name(mod)) + " shape " +
                  shape_string(arr.shape()) + " does not match " +
                  std::string(modality_name(first->first)) + " shape " +
                  shape_string(first->second) + " ('" + path.string() + "')");
    }
    v.modalities.emplace(mod, std::move(arr));
  }
  if (m.label_path) v.labels = read_array<std::uint8_t>(*m.label_path);
  validate(v);
  return v;
}

/// Writes one file per modality plus labels into directory and returns the
/// manifest describing them.
inline SubjectManifest save_volume(const Volume& v, const std::filesystem::path& directory,
                                   Split split = Split::Train) {
  validate(v);
  std::error_code ec;
  std::filesystem::create_directories(directory, ec);
  if (!std::filesystem::is_directory(directory))
    throw Error("cannot write into '" + directory.string() + "': not a directory");
  SubjectManifest m;
  m.subject_id = v.subject_id;
  m.split = split;
  for (const auto& [mod, arr] : v.modalities) {
    auto path = directory / (v.subject_id + "_" + std::string(modality_name(mod)) + ".raw");
    write_array(path, arr, v.spacing);
    m.modality_paths[mod] = path;
  }
  if (v.labels) {
    auto path = directory / (v.subject_id + "_labels.raw");
    write_array(path, *v.labels, v.spacing);
    m.label_path = path;
  }
  return m;
}

namespace detail {
inline std::filesystem::path relative_to(const std::filesystem::path& p,
                                         const std::filesystem::path& base) {
  auto rel = std::filesystem::relative(p, base);
  return rel.empty() ? p : rel;
}
}  // namespace detail

/// Manifest list file: {"subjects":[{subject_id, modalities:{T1:..}, labels, split}]}.
/// Paths are stored relative to the manifest's directory.
inline void write_manifest(const std::filesystem::path& file, const std::vector<SubjectManifest>& ms) {
  const auto base = std::filesystem::absolute(file).parent_path();
  nlohmann::json j;
  j["subjects"] = nlohmann::json::array();
  for (const auto& m : ms) {
    nlohmann::json s;
    s["subject_id"] = m.subject_id;
    for (const auto& [mod, p] : m.modality_paths)
      s["modalities"][std::string(modality_name(mod))] =
          detail::relative_to(std::filesystem::absolute(p), base).generic_string();
    s["labels"] = m.label_path ? nlohmann::json(detail::relative_to(
                                                    std::filesystem::absolute(*m.label_path), base)
                                                    .generic_string())
                               : nlohmann::json(nullptr);
    s["split"] = split_name(m.split);
    j["subjects"].push_back(std::move(s));
  }
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw Error("cannot open '" + file.string() + "' for writing");
  out << j.dump(2) << '\n';
  if (!out) throw Error("write failed for '" + file.string() + "'");
}

inline std::vector<SubjectManifest> read_manifest(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error("cannot open manifest '" + file.string() + "'");
  const auto base = std::filesystem::absolute(file).parent_path();
  std::vector<SubjectManifest> out;
  try {
    auto j = nlohmann::json::parse(in);
    for (const auto& s : j.at("subjects")) {
      SubjectManifest m;
      m.subject_id = s.at("subject_id").get<std::string>();
      for (const auto& [name, p] : s.at("modalities").items())
        m.modality_paths[parse_modality(name)] = base / p.get<std::string>();
      if (s.contains("labels") && !s.at("labels").is_null())
        m.label_path = base / s.at("labels").get<std::string>();
      m.split = parse_split(s.value("split", "train"));
      out.push_back(std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("corrupt manifest '" + file.string() + "': " + e.what());
  }
  return out;
}

struct SplitResult {
  std::vector<SubjectManifest> train;
  std::vector<SubjectManifest> test;
};

/// Partitions manifests by id lists; output order follows the manifest order.
inline SplitResult make_split(const std::vector<SubjectManifest>& manifests,
                              const std::vector<std::string>& train_ids,
                              const std::vector<std::string>& test_ids) {
  std::set<std::string> train(train_ids.begin(), train_ids.end());
  std::set<std::string> test(test_ids.begin(), test_ids.end());
  for (const auto& id : train)
    if (test.contains(id)) throw Error("subject " + id + " is in both train and test ids");
  std::set<std::string> known;
  for (const auto& m : manifests) known.insert(m.subject_id);
  for (const auto* ids : {&train_ids, &test_ids})
    for (const auto& id : *ids)
      if (!known.contains(id)) throw Error("unknown subject id '" + id + "'");

  SplitResult r;
  for (const auto& m : manifests) {
    if (train.contains(m.subject_id)) {
      r.train.push_back(m);
      r.train.back().split = Split::Train;
    } else if (test.contains(m.subject_id)) {
      r.test.push_back(m);
      r.test.back().split = Split::Test;
    }
  }
  return r;
}

/// Manifests tagged with the given split, in file order.
inline std::vector<SubjectManifest> with_split(const std::vector<SubjectManifest>& ms, Split s) {
  std::vector<SubjectManifest> out;
  std::copy_if(ms.begin(), ms.end(), std::back_inserter(out),
               [s](const SubjectManifest& m) { return m.split == s; });
  return out;
}

inline std::vector<Volume> load_volumes(const std::vector<SubjectManifest>& ms) {
  std::vector<Volume> out;
  out.reserve(ms.size());
  for (const auto& m : ms) out.push_back(load_volume(m));
  return out;
}

}  // namespace priorseg
