#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace halludet {

enum class Task { DM, MT, PG };
enum class Track { agnostic, aware };
enum class Label { Hallucination, NotHallucination };
enum class SplitKind { trial, unlabeled_train, validation, test };

inline constexpr Task kAllTasks[] = {Task::DM, Task::MT, Task::PG};

std::string_view to_string(Task t);
std::string_view to_string(Track t);
std::string_view to_string(Label l);  // SHROOM spelling: "Hallucination" / "Not Hallucination"
std::string_view to_string(SplitKind k);

std::optional<Task> parse_task(std::string_view s);
std::optional<Track> parse_track(std::string_view s);
std::optional<Label> parse_label(std::string_view s);
std::optional<SplitKind> parse_split_kind(std::string_view s);

// Majority vote over annotator fractions; exactly one half is not a majority.
inline Label label_from_fraction(double p) {
  return p > 0.5 ? Label::Hallucination : Label::NotHallucination;
}

struct DataPoint {
  std::string id;
  Task task = Task::DM;
  Track track = Track::agnostic;
  std::string src;
  std::string tgt;
  std::string hyp;
  std::optional<std::string> ref_source;
  std::optional<std::string> producer_model;
  std::optional<Label> gold_label;
  std::optional<double> gold_p;

  bool operator==(const DataPoint&) const = default;
};

struct Split {
  SplitKind kind = SplitKind::trial;
  std::vector<DataPoint> points;

  bool operator==(const Split&) const = default;
  const DataPoint* find(std::string_view id) const;
};

struct ParseOptions {
  bool jsonl = false;                  // one record per line instead of a JSON array
  std::optional<Track> track_override;
};

Split parse_dataset_text(std::string_view text, SplitKind kind, const ParseOptions& opts = {});
Split parse_dataset(const std::filesystem::path& path, SplitKind kind, const ParseOptions& opts = {});

// Inverse of parse_dataset: a JSON array with the SHROOM field names.
nlohmann::ordered_json to_json(const DataPoint& p);
DataPoint datapoint_from_json(const nlohmann::json& record, std::size_t index,
                              const std::optional<Track>& track_override = std::nullopt);
std::string serialize_dataset(const Split& split);
void write_dataset(const Split& split, const std::filesystem::path& path);

// Always holds all three tasks; per-task order follows the input.
std::map<Task, std::vector<DataPoint>> split_by_task(const Split& split);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace halludet
