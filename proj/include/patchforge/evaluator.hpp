#pragma once

#include <nlohmann/json.hpp>

#include <functional>
#include <iomanip>
#include <map>
#include <numeric>

#include "patchforge/datagen.hpp"

namespace patchforge {

/// ROC points ordered by ascending threshold: the first point (every image
/// flagged) is (1,1), the last (threshold above every score) is (0,0).
struct RocCurve {
  std::vector<double> thresholds;  // +inf for the final point
  std::vector<double> fpr, tpr;
  double auc = 0.5;
};

inline void check_scores(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw InputError("scores and labels differ in length");
  std::size_t pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw InputError("labels must be 0 or 1");
    if (!std::isfinite(scores[i])) throw InputError("non-finite score");
    pos += static_cast<std::size_t>(labels[i]);
  }
  if (pos == 0 || pos == labels.size()) throw InputError("AUC needs both positive and negative samples");
}

/// Sweeps every distinct score as a threshold (score >= t flags an image) and
/// integrates the ROC with trapezoids, so tied scores count one half.
inline RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_scores(scores, labels);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double P = 0, N = 0;
  for (int l : labels) (l ? P : N) += 1;
  RocCurve r;
  r.thresholds.push_back(std::numeric_limits<double>::infinity());
  r.fpr.push_back(0);
  r.tpr.push_back(0);
  double tp = 0, fp = 0, area = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double t = scores[order[i]];
    const double fp0 = fp, tp0 = tp;
    for (; i < order.size() && scores[order[i]] == t; ++i) (labels[order[i]] ? tp : fp) += 1;
    area += (fp - fp0) * (tp + tp0) / 2.0;
    r.thresholds.push_back(t);
    r.fpr.push_back(fp / N);
    r.tpr.push_back(tp / P);
  }
  std::reverse(r.thresholds.begin(), r.thresholds.end());
  std::reverse(r.fpr.begin(), r.fpr.end());
  std::reverse(r.tpr.begin(), r.tpr.end());
  r.auc = area / (P * N);
  return r;
}

inline double auc(std::span<const double> scores, std::span<const int> labels) { return roc_auc(scores, labels).auc; }

/// Score fusion across independently trained variants: the arithmetic mean.
inline double fuse_scores(std::span<const double> variant_scores) {
  if (variant_scores.empty()) throw InputError("fusion needs at least one score");
  double s = 0;
  for (double v : variant_scores) s += v;
  return s / static_cast<double>(variant_scores.size());
}

struct ScoredImage {
  std::string id;
  int label = 0;
  double score = 0.0;
  bool operator==(const ScoredImage&) const = default;
};

struct SliceResult {
  std::size_t count = 0;
  std::optional<double> auc;  // absent when the slice holds a single class
  bool operator==(const SliceResult&) const = default;
};

struct MethodReport {
  std::string name;
  std::size_t count = 0;
  double auc = 0.5;
  // slice kind -> slice value -> result
  std::map<std::string, std::map<std::string, SliceResult>> slices;
  std::vector<ScoredImage> scores;
  bool operator==(const MethodReport&) const = default;
};

struct EvalReport {
  std::string split;
  std::vector<MethodReport> methods;
  bool operator==(const EvalReport&) const = default;

  const MethodReport& method(const std::string& name) const {
    for (const auto& m : methods) {
      if (m.name == name) return m;
    }
    throw InputError("no method '" + name + "' in report");
  }
};

inline std::string size_band(double area_fraction) {
  if (area_fraction < 0.04) return "small";
  if (area_fraction < 0.07) return "medium";
  return "large";
}

inline std::string jpeg_band(std::optional<int> q) {
  if (!q) return "uncompressed";
  if (*q < 85) return "q75-84";
  if (*q < 95) return "q85-94";
  return "q95-100";
}

/// Slice values of every record. A pristine image inherits the slices of the
/// forged image it is paired with, so each slice keeps both classes.
inline std::vector<std::map<std::string, std::string>> slice_keys(const std::vector<ManifestRecord>& records) {
  std::map<std::size_t, const ManifestRecord*> forged_of_pair;
  for (const auto& r : records) {
    if (r.label) forged_of_pair[r.pair] = &r;
  }
  std::vector<std::map<std::string, std::string>> keys;
  for (const auto& r : records) {
    const auto it = forged_of_pair.find(r.pair);
    const ManifestRecord& f = it != forged_of_pair.end() ? *it->second : r;
    std::map<std::string, std::string> k;
    k["manipulation"] = f.manipulation ? manipulation_name(*f.manipulation) : "none";
    k["size"] = f.manipulation ? size_band(f.area_fraction) : "none";
    k["jpeg"] = jpeg_band(r.jpeg_quality);
    keys.push_back(std::move(k));
  }
  return keys;
}

inline MethodReport summarize(const std::string& name, const std::vector<ManifestRecord>& records,
                              const std::vector<double>& scores) {
  if (records.size() != scores.size()) throw InputError("one score per record is required");
  MethodReport m;
  m.name = name;
  m.count = records.size();
  std::vector<int> labels;
  for (std::size_t i = 0; i < records.size(); ++i) {
    labels.push_back(records[i].label);
    m.scores.push_back({records[i].id, records[i].label, scores[i]});
  }
  m.auc = auc(scores, labels);
  const auto keys = slice_keys(records);
  std::map<std::string, std::map<std::string, std::pair<std::vector<double>, std::vector<int>>>> groups;
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (const auto& [kind, value] : keys[i]) {
      auto& g = groups[kind][value];
      g.first.push_back(scores[i]);
      g.second.push_back(labels[i]);
    }
  }
  for (const auto& [kind, values] : groups) {
    for (const auto& [value, g] : values) {
      SliceResult s;
      s.count = g.first.size();
      const auto pos = std::count(g.second.begin(), g.second.end(), 1);
      if (pos > 0 && pos < static_cast<long>(g.second.size())) s.auc = auc(g.first, g.second);
      m.slices[kind][value] = s;
    }
  }
  return m;
}

using Scorer = std::function<double(const ImageBuffer&)>;

/// Scores every record of `records` with each named scorer.
inline EvalReport evaluate(const Manifest& manifest, const std::vector<ManifestRecord>& records,
                           const std::vector<std::pair<std::string, Scorer>>& scorers, const std::string& split = "test") {
  if (records.empty()) throw ConfigError("evaluation split is empty");
  std::vector<ImageBuffer> images;
  images.reserve(records.size());
  for (const auto& r : records) images.push_back(read_pnm(manifest.image_path(r)));
  EvalReport report;
  report.split = split;
  for (const auto& [name, scorer] : scorers) {
    std::vector<double> scores;
    for (const auto& img : images) scores.push_back(scorer(img));
    report.methods.push_back(summarize(name, records, scores));
  }
  return report;
}

/// Adds a method whose scores are the per-image mean of existing methods.
inline MethodReport fuse_methods(const std::string& name, const std::vector<ManifestRecord>& records,
                                 const std::vector<const MethodReport*>& parts) {
  if (parts.empty()) throw InputError("fusion needs at least one method");
  std::vector<double> fused;
  for (std::size_t i = 0; i < records.size(); ++i) {
    std::vector<double> s;
    for (const auto* p : parts) s.push_back(p->scores.at(i).score);
    fused.push_back(fuse_scores(s));
  }
  return summarize(name, records, fused);
}

inline nlohmann::json to_json(const MethodReport& m) {
  nlohmann::json slices = nlohmann::json::object();
  for (const auto& [kind, values] : m.slices) {
    for (const auto& [value, s] : values) {
      slices[kind][value] = {{"count", s.count}, {"auc", s.auc ? nlohmann::json(*s.auc) : nlohmann::json(nullptr)}};
    }
  }
  nlohmann::json scores = nlohmann::json::array();
  for (const auto& s : m.scores) scores.push_back({{"id", s.id}, {"label", s.label}, {"score", s.score}});
  return {{"name", m.name}, {"count", m.count}, {"auc", m.auc}, {"slices", slices}, {"scores", scores}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json methods = nlohmann::json::array();
  for (const auto& m : r.methods) methods.push_back(to_json(m));
  return {{"split", r.split}, {"methods", methods}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.split = j.at("split");
  for (const auto& jm : j.at("methods")) {
    MethodReport m;
    m.name = jm.at("name");
    m.count = jm.at("count");
    m.auc = jm.at("auc");
    for (const auto& [kind, values] : jm.at("slices").items()) {
      for (const auto& [value, s] : values.items()) {
        SliceResult sr;
        sr.count = s.at("count");
        if (!s.at("auc").is_null()) sr.auc = s.at("auc").get<double>();
        m.slices[kind][value] = sr;
      }
    }
    for (const auto& s : jm.at("scores")) m.scores.push_back({s.at("id"), s.at("label"), s.at("score")});
    r.methods.push_back(std::move(m));
  }
  return r;
}

/// Comparison matrix: one row per method, one column per slice.
inline std::string render_table(const EvalReport& r) {
  // one row per slice, one column per method
  std::vector<std::pair<std::string, std::string>> rows;
  for (const auto& m : r.methods) {
    for (const auto& [kind, values] : m.slices) {
      for (const auto& [value, s] : values) {
        std::pair<std::string, std::string> row{kind, value};
        if (std::find(rows.begin(), rows.end(), row) == rows.end()) rows.push_back(row);
      }
    }
  }
  std::size_t first = 8;
  for (const auto& [k, v] : rows) first = std::max(first, k.size() + v.size() + 3);
  std::vector<std::size_t> widths;
  for (const auto& m : r.methods) widths.push_back(std::max<std::size_t>(m.name.size() + 2, 8));

  auto cell = [](const std::optional<double>& auc) {
    if (!auc) return std::string("-");
    std::ostringstream cs;
    cs << std::fixed << std::setprecision(3) << *auc;
    return cs.str();
  };
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(first)) << "slice";
  for (std::size_t i = 0; i < r.methods.size(); ++i) os << std::setw(static_cast<int>(widths[i])) << r.methods[i].name;
  os << '\n' << std::setw(static_cast<int>(first)) << "all";
  for (std::size_t i = 0; i < r.methods.size(); ++i) os << std::setw(static_cast<int>(widths[i])) << cell(r.methods[i].auc);
  os << '\n';
  for (const auto& [kind, value] : rows) {
    os << std::setw(static_cast<int>(first)) << (kind + ":" + value);
    for (std::size_t i = 0; i < r.methods.size(); ++i) {
      std::optional<double> auc;
      auto k = r.methods[i].slices.find(kind);
      if (k != r.methods[i].slices.end()) {
        auto v = k->second.find(value);
        if (v != k->second.end()) auc = v->second.auc;
      }
      os << std::setw(static_cast<int>(widths[i])) << cell(auc);
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace patchforge
