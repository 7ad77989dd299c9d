#include "halludet/data.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include "halludet/error.hpp"
#include "halludet/log.hpp"

namespace halludet {

using nlohmann::json;

std::string_view to_string(Task t) {
  switch (t) {
    case Task::DM: return "DM";
    case Task::MT: return "MT";
    case Task::PG: return "PG";
  }
  return "?";
}

std::string_view to_string(Track t) { return t == Track::aware ? "aware" : "agnostic"; }

std::string_view to_string(Label l) {
  return l == Label::Hallucination ? "Hallucination" : "Not Hallucination";
}

std::string_view to_string(SplitKind k) {
  switch (k) {
    case SplitKind::trial: return "trial";
    case SplitKind::unlabeled_train: return "unlabeled_train";
    case SplitKind::validation: return "validation";
    case SplitKind::test: return "test";
  }
  return "?";
}

std::optional<Task> parse_task(std::string_view s) {
  if (s == "DM") return Task::DM;
  if (s == "MT") return Task::MT;
  if (s == "PG") return Task::PG;
  return std::nullopt;
}

std::optional<Track> parse_track(std::string_view s) {
  if (s == "agnostic" || s == "model-agnostic") return Track::agnostic;
  if (s == "aware" || s == "model-aware") return Track::aware;
  return std::nullopt;
}

std::optional<Label> parse_label(std::string_view s) {
  if (s == "Hallucination") return Label::Hallucination;
  if (s == "Not Hallucination") return Label::NotHallucination;
  return std::nullopt;
}

std::optional<SplitKind> parse_split_kind(std::string_view s) {
  if (s == "trial") return SplitKind::trial;
  if (s == "unlabeled_train" || s == "train") return SplitKind::unlabeled_train;
  if (s == "validation" || s == "val") return SplitKind::validation;
  if (s == "test") return SplitKind::test;
  return std::nullopt;
}

const DataPoint* Split::find(std::string_view id) const {
  for (const auto& p : points) {
    if (p.id == id) return &p;
  }
  return nullptr;
}

namespace {

const std::set<std::string, std::less<>> kKnownFields = {
    "id", "src", "tgt", "hyp", "ref", "task", "model", "label", "p(Hallucination)", "track"};

[[noreturn]] void fail(std::size_t index, std::string_view field, std::string_view why) {
  std::ostringstream os;
  os << "record " << index << ": field '" << field << "': " << why;
  throw ValidationError(os.str());
}

std::string text_field(const json& r, std::size_t index, const char* name) {
  auto it = r.find(name);
  if (it == r.end() || it->is_null()) return {};
  if (!it->is_string()) fail(index, name, "must be a string");
  return it->get<std::string>();
}

std::optional<std::string> optional_text(const json& r, std::size_t index, const char* name) {
  auto s = text_field(r, index, name);
  if (s.empty()) return std::nullopt;
  return s;
}

}  // namespace

DataPoint datapoint_from_json(const json& r, std::size_t index,
                              const std::optional<Track>& track_override) {
  if (!r.is_object()) {
    throw ValidationError("record " + std::to_string(index) + ": not a JSON object");
  }
  DataPoint p;

  if (auto it = r.find("id"); it != r.end() && !it->is_null()) {
    if (it->is_string()) {
      p.id = it->get<std::string>();
    } else if (it->is_number_integer()) {
      p.id = std::to_string(it->get<long long>());
    } else {
      fail(index, "id", "must be a string or integer");
    }
  } else {
    p.id = std::to_string(index);
  }

  auto task_it = r.find("task");
  if (task_it == r.end() || !task_it->is_string()) fail(index, "task", "missing or not a string");
  auto task = parse_task(task_it->get<std::string>());
  if (!task) fail(index, "task", "expected one of DM, MT, PG");
  p.task = *task;

  p.src = text_field(r, index, "src");
  p.tgt = text_field(r, index, "tgt");
  p.hyp = text_field(r, index, "hyp");
  if (p.hyp.empty()) fail(index, "hyp", "must be a non-empty string");
  p.ref_source = optional_text(r, index, "ref");
  p.producer_model = optional_text(r, index, "model");

  if (auto it = r.find("label"); it != r.end() && !it->is_null()) {
    if (!it->is_string()) fail(index, "label", "must be a string");
    auto l = parse_label(it->get<std::string>());
    if (!l) fail(index, "label", "expected \"Hallucination\" or \"Not Hallucination\"");
    p.gold_label = l;
  }
  if (auto it = r.find("p(Hallucination)"); it != r.end() && !it->is_null()) {
    if (!it->is_number()) fail(index, "p(Hallucination)", "must be a number");
    double v = it->get<double>();
    if (!(v >= 0.0 && v <= 1.0)) fail(index, "p(Hallucination)", "must lie in [0, 1]");
    p.gold_p = v;
    if (!p.gold_label) fail(index, "label", "required when p(Hallucination) is present");
    if (*p.gold_label != label_from_fraction(v)) {
      fail(index, "label", "disagrees with the majority implied by p(Hallucination)");
    }
  }

  if (track_override) {
    p.track = *track_override;
  } else if (auto it = r.find("track"); it != r.end() && !it->is_null()) {
    if (!it->is_string()) fail(index, "track", "must be a string");
    auto t = parse_track(it->get<std::string>());
    if (!t) fail(index, "track", "expected \"aware\" or \"agnostic\"");
    p.track = *t;
  } else {
    p.track = p.producer_model ? Track::aware : Track::agnostic;
  }
  if (p.track == Track::aware && !p.producer_model) {
    fail(index, "model", "required for model-aware records");
  }
  return p;
}

namespace {

void check_split(const Split& split) {
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < split.points.size(); ++i) {
    const auto& p = split.points[i];
    if (!seen.insert(p.id).second) fail(i, "id", "duplicate id '" + p.id + "'");
    switch (split.kind) {
      case SplitKind::trial:
      case SplitKind::validation:
        if (!p.gold_label) {
          fail(i, "label", std::string("required in the ") + std::string(to_string(split.kind)) + " split");
        }
        break;
      case SplitKind::unlabeled_train:
        if (p.gold_label) fail(i, "label", "not allowed in the unlabeled_train split");
        break;
      case SplitKind::test:
        break;
    }
  }
}

void warn_unknown(const json& r, std::set<std::string>& warned) {
  if (!r.is_object()) return;
  for (auto it = r.begin(); it != r.end(); ++it) {
    if (!kKnownFields.count(it.key()) && warned.insert(it.key()).second) {
      log::warn("ignoring unknown field '" + it.key() + "'");
    }
  }
}

}  // namespace

Split parse_dataset_text(std::string_view text, SplitKind kind, const ParseOptions& opts) {
  Split split;
  split.kind = kind;
  std::set<std::string> warned;

  auto add = [&](const json& r) {
    warn_unknown(r, warned);
    split.points.push_back(datapoint_from_json(r, split.points.size(), opts.track_override));
  };

  if (opts.jsonl) {
    std::size_t line_start = 0;
    while (line_start <= text.size()) {
      std::size_t end = text.find('\n', line_start);
      if (end == std::string_view::npos) end = text.size();
      auto line = text.substr(line_start, end - line_start);
      if (line.find_first_not_of(" \t\r") != std::string_view::npos) {
        try {
          add(json::parse(line));
        } catch (const json::parse_error& e) {
          throw ParseError("malformed JSON line", line_start + (e.byte > 0 ? e.byte - 1 : 0));
        }
      }
      line_start = end + 1;
    }
  } else {
    json doc;
    try {
      doc = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError("malformed JSON", e.byte > 0 ? e.byte - 1 : 0);
    }
    if (!doc.is_array()) throw ValidationError("dataset must be a JSON array of records");
    split.points.reserve(doc.size());
    for (const auto& r : doc) add(r);
  }
  check_split(split);
  return split;
}

Split parse_dataset(const std::filesystem::path& path, SplitKind kind, const ParseOptions& opts) {
  auto text = read_file(path);
  try {
    return parse_dataset_text(text, kind, opts);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": malformed JSON", e.byte_offset());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

nlohmann::ordered_json to_json(const DataPoint& p) {
  nlohmann::ordered_json r;
  r["id"] = p.id;
  r["task"] = to_string(p.task);
  r["track"] = to_string(p.track);
  r["src"] = p.src;
  r["tgt"] = p.tgt;
  r["hyp"] = p.hyp;
  if (p.ref_source) r["ref"] = *p.ref_source;
  if (p.producer_model) r["model"] = *p.producer_model;
  if (p.gold_label) r["label"] = to_string(*p.gold_label);
  if (p.gold_p) r["p(Hallucination)"] = *p.gold_p;
  return r;
}

std::string serialize_dataset(const Split& split) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& p : split.points) arr.push_back(to_json(p));
  return arr.dump(2) + "\n";
}

void write_dataset(const Split& split, const std::filesystem::path& path) {
  write_file(path, serialize_dataset(split));
}

std::map<Task, std::vector<DataPoint>> split_by_task(const Split& split) {
  std::map<Task, std::vector<DataPoint>> out;
  for (auto t : kAllTasks) out[t];
  for (const auto& p : split.points) out[p.task].push_back(p);
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace halludet
