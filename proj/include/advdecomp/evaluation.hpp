#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advdecomp/attack.hpp"
#include "advdecomp/error.hpp"
#include "advdecomp/model.hpp"
#include "advdecomp/parallel.hpp"

namespace advdecomp {

enum class FoolingMode {
  LabelChange,        // prediction on x + delta differs from the clean prediction
  Misclassification,  // prediction on x + delta differs from the ground truth
};

inline const char* metric_name(FoolingMode m) {
  return m == FoolingMode::LabelChange ? "fooling_ratio" : "misclassification_rate";
}

// x + delta, clipped to the data range.
inline Tensor perturbed(const Tensor& x, const Tensor& delta) {
  if (x.shape() != delta.shape())
    throw ShapeError("evaluation", detail::concat("perturbation ", shape_str(delta.shape()), " != input ",
                                                  shape_str(x.shape())));
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i] + delta[i], -1.0f, 1.0f);
  return out;
}

inline double fraction_changed(const std::vector<int>& reference, const std::vector<int>& pred) {
  if (pred.empty()) return 0.0;
  std::size_t k = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) k += pred[i] != reference[i];
  return static_cast<double>(k) / static_cast<double>(pred.size());
}

// Fraction of examples whose argmax (lowest index on ties) on the clipped
// x + delta differs from the clean argmax.
inline double fooling_ratio(const ModelInstance& model, const Tensor& x, const Tensor& delta) {
  return fraction_changed(predict(model, x), predict(model, perturbed(x, delta)));
}

inline double misclassification_rate(const ModelInstance& model, const Tensor& x, const Tensor& delta,
                                     const std::vector<int>& labels) {
  return fraction_changed(labels, predict(model, perturbed(x, delta)));
}

// Named, ordered groups of models.
class ModelCohort {
public:
  void add_group(const std::string& name, std::vector<const ModelInstance*> models) {
    for (const auto& g : groups_)
      if (g.first == name) throw ConfigError("evaluation", "duplicate group name '" + name + "'");
    groups_.emplace_back(name, std::move(models));
  }

  const std::vector<std::pair<std::string, std::vector<const ModelInstance*>>>& groups() const { return groups_; }

  // Throws if two groups share a model (by arch id and seed).
  void check_disjoint() const {
    std::map<std::pair<std::string, std::uint64_t>, std::string> owner;
    for (const auto& [name, models] : groups_)
      for (const auto* m : models) {
        const auto key = std::make_pair(m->arch_id(), m->init_seed);
        const auto it = owner.find(key);
        if (it != owner.end() && it->second != name)
          throw ConfigError("evaluation", detail::concat("model ", m->tag(), " appears in groups '", it->second,
                                                         "' and '", name, "'"));
        owner[key] = name;
      }
  }

private:
  std::vector<std::pair<std::string, std::vector<const ModelInstance*>>> groups_;
};

struct ReportRow {
  std::string kind;
  std::string group;
  std::optional<double> fooling_ratio;  // nullopt marks an absent cell
  std::size_t n_models = 0;
  std::size_t n_examples = 0;

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

struct TransferReport {
  std::vector<ReportRow> rows;
  nlohmann::json metadata = nlohmann::json::object();
  FoolingMode mode = FoolingMode::LabelChange;

  std::optional<double> at(const std::string& kind, const std::string& group) const {
    for (const auto& r : rows)
      if (r.kind == kind && r.group == group) return r.fooling_ratio;
    return std::nullopt;
  }

  double value(const std::string& kind, const std::string& group) const {
    const auto v = at(kind, group);
    if (!v) throw Error("evaluation", "report has no value for (" + kind + ", " + group + ")");
    return *v;
  }
};

struct LabeledPerturbation {
  std::string label;
  const Tensor* delta;
};

// Group ratio = mean of member fooling ratios. Rows are ordered perturbation
// first, then group, in the order given. Empty groups produce absent cells.
inline TransferReport transfer_table(const ModelCohort& cohort, const std::vector<LabeledPerturbation>& perturbations,
                                     const Tensor& x, const std::vector<int>& labels,
                                     FoolingMode mode = FoolingMode::LabelChange, std::size_t jobs = 1) {
  std::vector<const ModelInstance*> models;
  std::map<const ModelInstance*, std::size_t> index;
  for (const auto& [name, ms] : cohort.groups())
    for (const auto* m : ms)
      if (index.emplace(m, models.size()).second) models.push_back(m);

  std::vector<std::vector<int>> reference(models.size());
  if (mode == FoolingMode::LabelChange) {
    parallel_for(models.size(), jobs, [&](std::size_t i) { reference[i] = predict(*models[i], x); });
  } else {
    for (auto& r : reference) r = labels;
  }
  // ratio[p][m]
  std::vector<std::vector<double>> ratio(perturbations.size(), std::vector<double>(models.size()));
  std::vector<Tensor> adv(perturbations.size());
  for (std::size_t p = 0; p < perturbations.size(); ++p) adv[p] = perturbed(x, *perturbations[p].delta);
  parallel_for(perturbations.size() * models.size(), jobs, [&](std::size_t t) {
    const std::size_t p = t / models.size(), m = t % models.size();
    ratio[p][m] = fraction_changed(reference[m], predict(*models[m], adv[p]));
  });

  TransferReport rep;
  rep.mode = mode;
  for (std::size_t p = 0; p < perturbations.size(); ++p) {
    for (const auto& [name, ms] : cohort.groups()) {
      ReportRow row{perturbations[p].label, name, std::nullopt, ms.size(), x.dim(0)};
      if (!ms.empty()) {
        double s = 0.0;
        for (const auto* m : ms) s += ratio[p][index[m]];
        row.fooling_ratio = s / static_cast<double>(ms.size());
      }
      rep.rows.push_back(std::move(row));
    }
  }
  rep.metadata["metric"] = metric_name(mode);
  rep.metadata["examples"] = x.dim(0);
  return rep;
}

// ---- report serialization -------------------------------------------------

inline double round4(double v) { return std::round(v * 1e4) / 1e4; }

inline std::string format_ratio(const std::optional<double>& v) {
  if (!v) return "absent";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

inline std::string emit_csv(const TransferReport& r) {
  std::ostringstream out;
  out << "kind,group," << metric_name(r.mode) << ",n_models,n_examples\n";
  for (const auto& row : r.rows)
    out << row.kind << ',' << row.group << ',' << format_ratio(row.fooling_ratio) << ',' << row.n_models << ','
        << row.n_examples << '\n';
  return out.str();
}

inline std::string emit_json(const TransferReport& r) {
  nlohmann::ordered_json doc;
  doc["metric"] = metric_name(r.mode);
  doc["metadata"] = r.metadata;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : r.rows) {
    nlohmann::ordered_json o;
    o["kind"] = row.kind;
    o["group"] = row.group;
    if (row.fooling_ratio)
      o["fooling_ratio"] = round4(*row.fooling_ratio);
    else
      o["fooling_ratio"] = nullptr;
    o["n_models"] = row.n_models;
    o["n_examples"] = row.n_examples;
    rows.push_back(std::move(o));
  }
  doc["rows"] = std::move(rows);
  return doc.dump(2) + "\n";
}

enum class ReportFormat { Csv, Json };

inline std::string emit_report(const TransferReport& r, ReportFormat f) {
  return f == ReportFormat::Csv ? emit_csv(r) : emit_json(r);
}

inline TransferReport parse_csv_report(const std::string& text) {
  TransferReport r;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("report", "csv: missing header");
  if (line == "kind,group,fooling_ratio,n_models,n_examples")
    r.mode = FoolingMode::LabelChange;
  else if (line == "kind,group,misclassification_rate,n_models,n_examples")
    r.mode = FoolingMode::Misclassification;
  else
    throw FormatError("report", "csv: unexpected header '" + line + "'");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) throw FormatError("report", detail::concat("csv line ", lineno, ": expected 5 fields"));
    ReportRow row;
    row.kind = f[0];
    row.group = f[1];
    try {
      if (f[2] != "absent") row.fooling_ratio = std::stod(f[2]);
      row.n_models = std::stoul(f[3]);
      row.n_examples = std::stoul(f[4]);
    } catch (const std::exception&) {
      throw FormatError("report", detail::concat("csv line ", lineno, ": malformed number"));
    }
    r.rows.push_back(std::move(row));
  }
  return r;
}

inline TransferReport parse_json_report(const std::string& text) {
  TransferReport r;
  nlohmann::ordered_json doc;
  try {
    doc = nlohmann::ordered_json::parse(text);
    r.mode = doc.at("metric").get<std::string>() == "fooling_ratio" ? FoolingMode::LabelChange
                                                                    : FoolingMode::Misclassification;
    r.metadata = nlohmann::json::parse(doc.at("metadata").dump());
    for (const auto& o : doc.at("rows")) {
      ReportRow row;
      row.kind = o.at("kind").get<std::string>();
      row.group = o.at("group").get<std::string>();
      if (!o.at("fooling_ratio").is_null()) row.fooling_ratio = o.at("fooling_ratio").get<double>();
      row.n_models = o.at("n_models").get<std::size_t>();
      row.n_examples = o.at("n_examples").get<std::size_t>();
      r.rows.push_back(std::move(row));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("report", std::string("json: ") + e.what());
  }
  return r;
}

// Plain-text table: one line per kind, one column per group.
inline std::string format_table(const TransferReport& r) {
  std::vector<std::string> kinds, groups;
  for (const auto& row : r.rows) {
    if (std::find(kinds.begin(), kinds.end(), row.kind) == kinds.end()) kinds.push_back(row.kind);
    if (std::find(groups.begin(), groups.end(), row.group) == groups.end()) groups.push_back(row.group);
  }
  std::ostringstream out;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-18s", "kind");
  out << buf;
  for (const auto& g : groups) {
    std::snprintf(buf, sizeof buf, "%12s", g.c_str());
    out << buf;
  }
  out << '\n';
  for (const auto& k : kinds) {
    std::snprintf(buf, sizeof buf, "%-18s", k.c_str());
    out << buf;
    for (const auto& g : groups) {
      const auto v = r.at(k, g);
      if (v)
        std::snprintf(buf, sizeof buf, "%11.1f%%", *v * 100.0);
      else
        std::snprintf(buf, sizeof buf, "%12s", "-");
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace advdecomp
