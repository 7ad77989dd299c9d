#include "halludet/weak_label.hpp"

#include <set>
#include <sstream>

#include "halludet/error.hpp"

namespace halludet {

using nlohmann::json;

void ConsistencyConfig::validate() const {
  if (members.empty()) throw ValidationError("consistency config needs at least one model");
  std::set<std::string> models;
  for (const auto& m : members) {
    if (!models.insert(m.model_id).second) {
      throw ValidationError("consistency config lists model '" + m.model_id + "' twice");
    }
    if (m.param_sets.empty()) {
      throw ValidationError("consistency config: model '" + m.model_id + "' has no parameter sets");
    }
    std::set<std::string> ids;
    for (const auto& p : m.param_sets) {
      p.validate();
      if (!ids.insert(p.id).second) {
        throw ValidationError("consistency config: duplicate pair (" + m.model_id + ", " + p.id + ")");
      }
    }
  }
}

std::optional<Label> param_consistent_label(std::span<const Prediction> preds,
                                            std::span<const std::string> param_ids) {
  if (param_ids.empty()) return std::nullopt;
  std::optional<Label> common;
  for (const auto& id : param_ids) {
    const Prediction* found = nullptr;
    for (const auto& p : preds) {
      if (p.params_id == id) {
        found = &p;
        break;
      }
    }
    if (!found || !found->decided()) return std::nullopt;
    if (!common) {
      common = found->label;
    } else if (*common != *found->label) {
      return std::nullopt;
    }
  }
  return common;
}

std::optional<Label> cross_model_label(const std::map<std::string, std::optional<Label>>& per_model) {
  std::optional<Label> common;
  for (const auto& [model, label] : per_model) {
    if (!label) return std::nullopt;
    if (!common) {
      common = label;
    } else if (*common != *label) {
      return std::nullopt;
    }
  }
  return common;
}

std::vector<WeakEntry> balance(std::vector<WeakEntry> entries, std::uint64_t seed) {
  return balance(std::move(entries), seed, [](const WeakEntry& e) { return e.label; });
}

std::vector<WeakEntry> consolidate(
    std::span<const DataPoint> points,
    const std::map<std::string, std::map<std::string, std::vector<Prediction>>>& predictions,
    const ConsistencyConfig& cfg) {
  // Resolve every column up front so a missing batch fails loudly.
  struct Column {
    std::string model;
    std::string params;
    const std::vector<Prediction>* preds;
  };
  std::vector<std::vector<Column>> by_member;
  for (const auto& m : cfg.members) {
    auto mt = predictions.find(m.model_id);
    if (mt == predictions.end()) {
      throw ValidationError("no predictions for model '" + m.model_id + "'");
    }
    std::vector<Column> cols;
    for (const auto& ps : m.param_sets) {
      auto pt = mt->second.find(ps.id);
      if (pt == mt->second.end()) {
        throw ValidationError("no predictions for (" + m.model_id + ", " + ps.id + ")");
      }
      if (pt->second.size() != points.size()) {
        throw ValidationError("predictions for (" + m.model_id + ", " + ps.id +
                              ") are not aligned with the split");
      }
      cols.push_back({m.model_id, ps.id, &pt->second});
    }
    by_member.push_back(std::move(cols));
  }

  std::vector<WeakEntry> out;
  std::vector<Prediction> row;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < points.size(); ++i) {
    std::map<std::string, std::optional<Label>> per_model;
    std::vector<Vote> votes;
    for (const auto& cols : by_member) {
      row.clear();
      ids.clear();
      for (const auto& c : cols) {
        const auto& p = (*c.preds)[i];
        if (p.point_id != points[i].id) {
          throw ValidationError("prediction order mismatch for (" + c.model + ", " + c.params +
                                ") at point '" + points[i].id + "'");
        }
        row.push_back(p);
        ids.push_back(c.params);
        votes.push_back({c.model, c.params, p.decided() ? p.p_halluc : 0.5});
      }
      per_model[cols.front().model] = param_consistent_label(row, ids);
    }
    if (auto label = cross_model_label(per_model)) {
      out.push_back({points[i], *label, std::move(votes)});
    }
  }
  return out;
}

WeakLabelRun generate_weak_labels(const Split& unlabeled, const ConsistencyConfig& cfg,
                                  const DemoSet& demos, const PromptConfig& prompt,
                                  const std::map<std::string, InferenceClient*>& clients,
                                  std::uint64_t balance_seed, std::size_t concurrency) {
  cfg.validate();
  prompt.validate();
  for (const auto& m : cfg.members) {
    auto it = clients.find(m.model_id);
    if (it == clients.end() || it->second == nullptr) {
      throw ValidationError("no endpoint configured for model '" + m.model_id + "'");
    }
  }
  WeakLabelRun run;
  for (const auto& m : cfg.members) {
    for (const auto& ps : m.param_sets) {
      run.predictions[m.model_id][ps.id] =
          predict_batch(unlabeled.points, demos, prompt, *clients.at(m.model_id), ps, concurrency);
    }
  }
  auto kept = consolidate(unlabeled.points, run.predictions, cfg);
  run.stats.points = unlabeled.points.size();
  run.stats.kept_before_balance = kept.size();
  run.set.entries = balance(std::move(kept), balance_seed);
  run.stats.kept_after_balance = run.set.entries.size();
  return run;
}

nlohmann::ordered_json to_json(const WeakEntry& e) {
  nlohmann::ordered_json j;
  j["point"] = to_json(e.point);
  j["weak_label"] = to_string(e.label);
  auto prov = nlohmann::ordered_json::array();
  for (const auto& v : e.provenance) {
    prov.push_back({{"model_id", v.model_id}, {"params_id", v.params_id}, {"p_halluc", v.p_halluc}});
  }
  j["provenance"] = std::move(prov);
  return j;
}

WeakEntry weak_entry_from_json(const json& j, std::size_t line) {
  const std::string where = "weak label line " + std::to_string(line) + ": ";
  if (!j.is_object() || !j.contains("point") || !j.contains("weak_label")) {
    throw ValidationError(where + "expected {point, weak_label, provenance}");
  }
  WeakEntry e;
  try {
    e.point = datapoint_from_json(j["point"], line);
  } catch (const ValidationError& err) {
    throw ValidationError(where + err.what());
  }
  if (!j["weak_label"].is_string()) throw ValidationError(where + "weak_label must be a string");
  auto l = parse_label(j["weak_label"].get<std::string>());
  if (!l) throw ValidationError(where + "unknown weak_label");
  e.label = *l;
  if (auto it = j.find("provenance"); it != j.end() && it->is_array()) {
    for (const auto& v : *it) {
      e.provenance.push_back({v.value("model_id", std::string()), v.value("params_id", std::string()),
                              v.value("p_halluc", 0.5)});
    }
  }
  return e;
}

std::string weak_set_to_jsonl(const WeakLabeledSet& set) {
  std::string out;
  for (const auto& e : set.entries) {
    out += to_json(e).dump();
    out += '\n';
  }
  return out;
}

WeakLabeledSet parse_weak_set_jsonl(std::string_view text) {
  WeakLabeledSet set;
  std::size_t start = 0, line = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto s = text.substr(start, end - start);
    ++line;
    if (s.find_first_not_of(" \t\r") != std::string_view::npos) {
      json j;
      try {
        j = json::parse(s);
      } catch (const json::parse_error& e) {
        throw ParseError("weak label line " + std::to_string(line) + ": malformed JSON",
                         start + (e.byte > 0 ? e.byte - 1 : 0));
      }
      set.entries.push_back(weak_entry_from_json(j, line));
    }
    start = end + 1;
  }
  return set;
}

void write_weak_set(const WeakLabeledSet& set, const std::filesystem::path& path) {
  write_file(path, weak_set_to_jsonl(set));
}

WeakLabeledSet read_weak_set(const std::filesystem::path& path) {
  return parse_weak_set_jsonl(read_file(path));
}

std::string sft_record(const WeakEntry& e, InstructionVariant variant) {
  nlohmann::ordered_json j;
  j["instruction"] = render_instruction(e.point, variant);
  j["input"] = "";
  j["output"] = answer_word(e.label);
  return j.dump();
}

void export_sft(const WeakLabeledSet& set, InstructionVariant variant,
                const std::filesystem::path& path) {
  std::string out;
  for (const auto& e : set.entries) {
    out += sft_record(e, variant);
    out += '\n';
  }
  write_file(path, out);
}

}  // namespace halludet
