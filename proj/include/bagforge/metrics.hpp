#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "bagforge/bag_io.hpp"
#include "bagforge/error.hpp"

namespace bagforge {

/// K x K counts; rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t k = 0) : k_(k), counts_(k * k, 0) {}

  std::size_t classes() const { return k_; }
  std::uint64_t operator()(std::size_t truth, std::size_t pred) const {
    return counts_[truth * k_ + pred];
  }
  std::uint64_t& operator()(std::size_t truth, std::size_t pred) {
    return counts_[truth * k_ + pred];
  }

  void add(std::uint32_t truth, std::uint32_t pred) {
    if (truth >= k_ || pred >= k_) {
      throw DomainError("confusion matrix: label " + std::to_string(std::max(truth, pred)) +
                        " is not below K=" + std::to_string(k_));
    }
    ++counts_[truth * k_ + pred];
  }

  /// Element-wise sum; shards evaluated separately merge exactly.
  ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw ShapeError("confusion matrix: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }
  std::uint64_t trace() const {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < k_; ++i) t += (*this)(i, i);
    return t;
  }
  std::uint64_t row_sum(std::size_t truth) const {
    std::uint64_t t = 0;
    for (std::size_t j = 0; j < k_; ++j) t += (*this)(truth, j);
    return t;
  }
  std::uint64_t col_sum(std::size_t pred) const {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < k_; ++i) t += (*this)(i, pred);
    return t;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

inline ConfusionMatrix confusion_matrix(std::span<const std::uint32_t> truth,
                                        std::span<const std::uint32_t> predicted,
                                        std::size_t k) {
  if (truth.size() != predicted.size()) {
    throw DomainError("confusion matrix: " + std::to_string(truth.size()) +
                      " true labels but " + std::to_string(predicted.size()) + " predictions");
  }
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
  return cm;
}

enum class Averaging { macro, weighted };

inline std::string_view to_string(Averaging a) {
  return a == Averaging::macro ? "macro" : "weighted";
}

inline Averaging parse_averaging(std::string_view s) {
  if (s == "macro") return Averaging::macro;
  if (s == "weighted") return Averaging::weighted;
  throw ConfigError("unknown averaging mode '" + std::string(s) + "'");
}

struct ClassMetrics {
  double sensitivity = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
  std::uint64_t support = 0;
  std::uint64_t predicted = 0;
  bool zero_support = false;    // sensitivity undefined, reported as 0
  bool zero_predicted = false;  // precision undefined, reported as 0

  friend bool operator==(const ClassMetrics&, const ClassMetrics&) = default;
};

struct MetricsReport {
  Averaging averaging = Averaging::macro;
  double sen = 0.0;
  double prec = 0.0;
  double acc = 0.0;
  double f1 = 0.0;
  std::uint64_t total = 0;
  std::vector<ClassMetrics> per_class;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Per-class recall, precision and F1 averaged over classes (uniformly, or
/// by support), plus accuracy = trace / total. Undefined ratios count as 0
/// and are flagged.
inline MetricsReport macro_metrics(const ConfusionMatrix& cm,
                                   Averaging averaging = Averaging::macro) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw DomainError("metrics undefined: confusion matrix is empty");
  MetricsReport r;
  r.averaging = averaging;
  r.total = total;
  r.acc = static_cast<double>(cm.trace()) / static_cast<double>(total);
  const std::size_t k = cm.classes();
  for (std::size_t c = 0; c < k; ++c) {
    ClassMetrics m;
    const auto tp = static_cast<double>(cm(c, c));
    m.support = cm.row_sum(c);
    m.predicted = cm.col_sum(c);
    m.zero_support = m.support == 0;
    m.zero_predicted = m.predicted == 0;
    m.sensitivity = m.zero_support ? 0.0 : tp / static_cast<double>(m.support);
    m.precision = m.zero_predicted ? 0.0 : tp / static_cast<double>(m.predicted);
    const double denom = m.sensitivity + m.precision;
    m.f1 = denom > 0.0 ? 2.0 * m.sensitivity * m.precision / denom : 0.0;
    r.per_class.push_back(m);
  }
  for (const auto& m : r.per_class) {
    const double w = averaging == Averaging::macro
                         ? 1.0 / static_cast<double>(k)
                         : static_cast<double>(m.support) / static_cast<double>(total);
    r.sen += w * m.sensitivity;
    r.prec += w * m.precision;
    r.f1 += w * m.f1;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Report files

inline nlohmann::ordered_json to_json(const MetricsReport& r,
                                      const std::vector<std::string>& class_names = {}) {
  nlohmann::ordered_json j;
  j["averaging"] = std::string(to_string(r.averaging));
  j["sen"] = r.sen;
  j["prec"] = r.prec;
  j["acc"] = r.acc;
  j["f1"] = r.f1;
  j["total"] = r.total;
  auto rows = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& m = r.per_class[c];
    nlohmann::ordered_json row;
    if (c < class_names.size()) row["class"] = class_names[c];
    row["sen"] = m.sensitivity;
    row["prec"] = m.precision;
    row["f1"] = m.f1;
    row["support"] = m.support;
    row["predicted"] = m.predicted;
    row["zero_support"] = m.zero_support;
    row["zero_predicted"] = m.zero_predicted;
    rows.push_back(std::move(row));
  }
  j["per_class"] = std::move(rows);
  return j;
}

inline MetricsReport metrics_from_json(const nlohmann::ordered_json& j) {
  try {
    MetricsReport r;
    r.averaging = parse_averaging(j.at("averaging").get<std::string>());
    r.sen = j.at("sen").get<double>();
    r.prec = j.at("prec").get<double>();
    r.acc = j.at("acc").get<double>();
    r.f1 = j.at("f1").get<double>();
    r.total = j.at("total").get<std::uint64_t>();
    for (const auto& row : j.at("per_class")) {
      ClassMetrics m;
      m.sensitivity = row.at("sen").get<double>();
      m.precision = row.at("prec").get<double>();
      m.f1 = row.at("f1").get<double>();
      m.support = row.at("support").get<std::uint64_t>();
      m.predicted = row.at("predicted").get<std::uint64_t>();
      m.zero_support = row.at("zero_support").get<bool>();
      m.zero_predicted = row.at("zero_predicted").get<bool>();
      r.per_class.push_back(m);
    }
    return r;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(0, std::string("metrics JSON: ") + ex.what());
  }
}

/// Header row "true\pred,<names...>", then one row per true class.
inline std::string confusion_csv(const ConfusionMatrix& cm,
                                 const std::vector<std::string>& names) {
  std::ostringstream out;
  out << "true\\pred";
  for (const auto& n : names) out << ',' << n;
  out << '\n';
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    out << names.at(i);
    for (std::size_t j = 0; j < cm.classes(); ++j) out << ',' << cm(i, j);
    out << '\n';
  }
  return out.str();
}

inline std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

/// Heatmap with one <rect> per cell, shaded by the row-normalised count.
inline std::string confusion_svg(const ConfusionMatrix& cm,
                                 const std::vector<std::string>& names) {
  const std::size_t k = cm.classes();
  const int cell = 64, margin = 120;
  const int size = margin + static_cast<int>(k) * cell + 20;
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\""
      << size << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<text x=\"" << margin << "\" y=\"20\">predicted</text>\n";
  for (std::size_t j = 0; j < k; ++j) {
    out << "<text x=\"" << margin + static_cast<int>(j) * cell + cell / 2 << "\" y=\""
        << margin - 8 << "\" text-anchor=\"middle\">" << xml_escape(names.at(j)) << "</text>\n";
  }
  for (std::size_t i = 0; i < k; ++i) {
    const auto row_total = cm.row_sum(i);
    const int y = margin + static_cast<int>(i) * cell;
    out << "<text x=\"" << margin - 8 << "\" y=\"" << y + cell / 2 + 4
        << "\" text-anchor=\"end\">" << xml_escape(names.at(i)) << "</text>\n";
    for (std::size_t j = 0; j < k; ++j) {
      const double frac = row_total == 0 ? 0.0
                                         : static_cast<double>(cm(i, j)) /
                                               static_cast<double>(row_total);
      const int shade = static_cast<int>(255.0 - 200.0 * frac);
      const int x = margin + static_cast<int>(j) * cell;
      char colour[16];
      std::snprintf(colour, sizeof colour, "#%02x%02xff", shade, shade);
      out << "<rect class=\"cell\" x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell
          << "\" height=\"" << cell << "\" fill=\"" << colour << "\" stroke=\"#333\"/>\n";
      out << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 4
          << "\" text-anchor=\"middle\">" << cm(i, j) << "</text>\n";
    }
  }
  out << "</svg>\n";
  return out.str();
}

struct ReportPaths {
  std::filesystem::path metrics_json;
  std::filesystem::path cm_csv;
  std::filesystem::path cm_svg;
};

/// Writes `<run_id>.metrics.json`, `.cm.csv` and `.cm.svg` into `dir`.
inline ReportPaths emit_report(const ConfusionMatrix& cm, const MetricsReport& report,
                               const std::vector<std::string>& class_names,
                               const std::filesystem::path& dir, const std::string& run_id) {
  if (class_names.size() != cm.classes()) {
    throw ShapeError("emit_report: " + std::to_string(class_names.size()) +
                     " class names for K=" + std::to_string(cm.classes()));
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  ReportPaths paths{dir / (run_id + ".metrics.json"), dir / (run_id + ".cm.csv"),
                    dir / (run_id + ".cm.svg")};
  auto j = to_json(report, class_names);
  auto matrix = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    auto row = nlohmann::ordered_json::array();
    for (std::size_t jx = 0; jx < cm.classes(); ++jx) row.push_back(cm(i, jx));
    matrix.push_back(std::move(row));
  }
  j["confusion_matrix"] = std::move(matrix);
  write_file_atomic(paths.metrics_json, j.dump(2) + "\n");
  write_file_atomic(paths.cm_csv, confusion_csv(cm, class_names));
  write_file_atomic(paths.cm_svg, confusion_svg(cm, class_names));
  return paths;
}

}  // namespace bagforge
