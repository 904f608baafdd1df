#pragma once

// Exact t-SNE over core-level embeddings (each core is the mean of its patch
// embeddings). O(M^2) memory and time per iteration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bagforge/bag.hpp"
#include "bagforge/bag_io.hpp"
#include "bagforge/error.hpp"
#include "bagforge/metrics.hpp"
#include "bagforge/random.hpp"

namespace bagforge {

struct EmbeddingSet {
  std::vector<std::vector<double>> points;
  std::vector<std::uint32_t> labels;
  std::vector<std::string> core_ids;

  std::size_t size() const { return points.size(); }
};

/// Mean patch embedding per bag.
inline EmbeddingSet core_embeddings(const std::vector<Bag>& bags) {
  EmbeddingSet out;
  for (const auto& b : bags) {
    std::vector<double> mean(b.dim(), 0.0);
    for (std::size_t i = 0; i < b.size(); ++i)
      for (std::size_t j = 0; j < b.dim(); ++j) mean[j] += b.instances.at(i, j);
    for (auto& v : mean) v /= static_cast<double>(b.size());
    out.points.push_back(std::move(mean));
    out.labels.push_back(b.label);
    out.core_ids.push_back(b.core_id);
  }
  return out;
}

struct TsneConfig {
  double perplexity = 30.0;
  std::size_t iterations = 1000;
  double learning_rate = 200.0;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  std::size_t momentum_switch = 250;
  double exaggeration = 12.0;
  std::size_t exaggeration_iterations = 250;
  std::uint64_t seed = 0;

  void validate() const {
    if (perplexity < 2.0) throw ConfigError("t-SNE perplexity must be at least 2");
    if (iterations < 1) throw ConfigError("t-SNE needs at least one iteration");
  }
};

/// Perplexity actually used for M points: capped at (M-1)/3, but never
/// below min(2, M-1) so tiny sets stay usable.
inline double effective_perplexity(double requested, std::size_t m) {
  const double cap = std::max((static_cast<double>(m) - 1.0) / 3.0,
                              std::min(2.0, static_cast<double>(m) - 1.0));
  return std::min(requested, cap);
}

/// Symmetric joint probabilities, row-major M x M.
struct Affinities {
  std::size_t n = 0;
  std::vector<double> p;
  std::vector<double> row_perplexity;  // achieved 2^H per conditional row

  double operator()(std::size_t i, std::size_t j) const { return p[i * n + j]; }
};

inline std::vector<double> squared_distances(const std::vector<std::vector<double>>& pts) {
  const std::size_t n = pts.size();
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < pts[i].size(); ++k) {
        const double diff = pts[i][k] - pts[j][k];
        s += diff * diff;
      }
      d[i * n + j] = d[j * n + i] = s;
    }
  }
  return d;
}

/// Per-row Gaussian bandwidths found by bisection on the precision so that
/// exp(H_nats) = 2^(H_bits) matches the target perplexity, then
/// p_ij = (p_j|i + p_i|j) / 2M.
/// `names`, when given, labels points in diagnostics.
inline Affinities affinities(const std::vector<std::vector<double>>& points,
                             double perplexity,
                             const std::vector<std::string>& names = {}) {
  const std::size_t n = points.size();
  if (n < 3) throw DomainError("t-SNE needs at least 3 points, got " + std::to_string(n));
  if (!(perplexity > 1.0) || perplexity > static_cast<double>(n - 1)) {
    throw DomainError("perplexity " + std::to_string(perplexity) + " outside (1, " +
                      std::to_string(n - 1) + "]");
  }
  for (const auto& p : points) {
    if (p.size() != points.front().size()) throw ShapeError("t-SNE points differ in dimension");
  }
  const auto dist = squared_distances(points);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (dist[i * n + j] == 0.0) {
        auto label = [&](std::size_t k) {
          return k < names.size() ? "'" + names[k] + "'" : "#" + std::to_string(k);
        };
        throw DomainError("points " + label(i) + " and " + label(j) +
                          " coincide (all distances between them are 0)");
      }

  Affinities out;
  out.n = n;
  out.row_perplexity.assign(n, 0.0);
  std::vector<double> cond(n * n, 0.0);
  const double target = std::log(perplexity);
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) dmin = std::min(dmin, dist[i * n + j]);
    double mean_shift = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) mean_shift += dist[i * n + j] - dmin;
    mean_shift /= static_cast<double>(n - 1);

    // Perplexity M-1 is only reached by a uniform row (precision 0).
    if (target >= std::log(static_cast<double>(n - 1)) - 1e-12) {
      for (std::size_t j = 0; j < n; ++j) row[j] = j == i ? 0.0 : 1.0 / static_cast<double>(n - 1);
      out.row_perplexity[i] = static_cast<double>(n - 1);
      std::copy(row.begin(), row.end(), cond.begin() + static_cast<std::ptrdiff_t>(i * n));
      continue;
    }
    double beta = mean_shift > 0.0 ? 1.0 / mean_shift : 1.0;
    double lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double entropy = 0.0;
    for (int iter = 0; iter < 1000; ++iter) {
      double sum = 0.0, weighted = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) {
          row[j] = 0.0;
          continue;
        }
        const double shifted = dist[i * n + j] - dmin;
        row[j] = std::exp(-beta * shifted);
        sum += row[j];
        weighted += shifted * row[j];
      }
      entropy = std::log(sum) + beta * weighted / sum;
      for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
      const double diff = entropy - target;
      if (std::abs(diff) < 1e-7) break;
      if (diff > 0.0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
    out.row_perplexity[i] = std::exp(entropy);
    std::copy(row.begin(), row.end(), cond.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  out.p.assign(n * n, 0.0);
  const double norm = 2.0 * static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) out.p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / norm;
  return out;
}

/// KL(P || Q) for 2-D coordinates y (M x 2, row-major) under the Student-t
/// kernel.
inline double kl_divergence(const Affinities& P, const std::vector<double>& y) {
  const std::size_t n = P.n;
  double z = 0.0;
  std::vector<double> num(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double dx = y[2 * i] - y[2 * j], dy = y[2 * i + 1] - y[2 * j + 1];
      num[i * n + j] = 1.0 / (1.0 + dx * dx + dy * dy);
      z += num[i * n + j];
    }
  double kl = 0.0;
  for (std::size_t i = 0; i < n * n; ++i) {
    if (P.p[i] > 0.0) kl += P.p[i] * std::log(P.p[i] / (num[i] / z));
  }
  return kl;
}

/// dKL/dy_i = 4 sum_j (s*p_ij - q_ij) (1 + |y_i - y_j|^2)^-1 (y_i - y_j), with
/// P scaled by `exaggeration`.
inline std::vector<double> kl_gradient(const Affinities& P, const std::vector<double>& y,
                                       double exaggeration = 1.0) {
  const std::size_t n = P.n;
  std::vector<double> num(n * n, 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = y[2 * i] - y[2 * j], dy = y[2 * i + 1] - y[2 * j + 1];
      const double v = 1.0 / (1.0 + dx * dx + dy * dy);
      num[i * n + j] = num[j * n + i] = v;
      z += 2.0 * v;
    }
  std::vector<double> grad(2 * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double v = num[i * n + j];
      const double mult = 4.0 * (exaggeration * P.p[i * n + j] - v / z) * v;
      grad[2 * i] += mult * (y[2 * i] - y[2 * j]);
      grad[2 * i + 1] += mult * (y[2 * i + 1] - y[2 * j + 1]);
    }
  }
  return grad;
}

struct TsneResult {
  std::vector<double> coords;  // M x 2, row-major
  double initial_kl = 0.0;
  double final_kl = 0.0;
};

/// Gradient descent with momentum and per-coordinate gains, early
/// exaggeration, and re-centring every iteration.
inline TsneResult tsne_optimize(const Affinities& P, const TsneConfig& cfg) {
  cfg.validate();
  const std::size_t n = P.n;
  auto rng = SplitMix64::derive(cfg.seed, "tsne");
  TsneResult out;
  out.coords.resize(2 * n);
  for (auto& v : out.coords) v = 1e-4 * rng.gaussian();
  out.initial_kl = kl_divergence(P, out.coords);

  std::vector<double> update(2 * n, 0.0), gains(2 * n, 1.0);
  auto& y = out.coords;
  for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
    const double exaggeration = iter < cfg.exaggeration_iterations ? cfg.exaggeration : 1.0;
    const double momentum = iter < cfg.momentum_switch ? cfg.initial_momentum
                                                       : cfg.final_momentum;
    const auto grad = kl_gradient(P, y, exaggeration);
    for (std::size_t k = 0; k < 2 * n; ++k) {
      gains[k] = (grad[k] > 0.0) != (update[k] > 0.0) ? gains[k] + 0.2 : gains[k] * 0.8;
      gains[k] = std::max(gains[k], 0.01);
      update[k] = momentum * update[k] - cfg.learning_rate * gains[k] * grad[k];
      y[k] += update[k];
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += y[2 * i];
      my += y[2 * i + 1];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[2 * i] -= mx;
      y[2 * i + 1] -= my;
      if (!std::isfinite(y[2 * i]) || !std::isfinite(y[2 * i + 1])) {
        throw NumericError("t-SNE diverged at iteration " + std::to_string(iter));
      }
    }
  }
  out.final_kl = kl_divergence(P, y);
  return out;
}

struct TsneRun {
  EmbeddingSet points;  // sorted by core id
  Affinities affinities;
  TsneResult result;
  double perplexity = 0.0;
};

/// Sorts the set by core id (so the seeded initialisation is keyed to core
/// ids rather than input order), then computes affinities and optimises.
inline TsneRun run_tsne(const EmbeddingSet& input, const TsneConfig& cfg) {
  cfg.validate();
  if (input.size() < 3) throw DomainError("t-SNE needs at least 3 cores");
  std::vector<std::size_t> order(input.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return input.core_ids[a] < input.core_ids[b];
  });
  TsneRun run;
  for (const auto i : order) {
    run.points.points.push_back(input.points[i]);
    run.points.labels.push_back(input.labels[i]);
    run.points.core_ids.push_back(input.core_ids[i]);
  }
  run.perplexity = effective_perplexity(cfg.perplexity, input.size());
  run.affinities = affinities(run.points.points, run.perplexity, run.points.core_ids);
  run.result = tsne_optimize(run.affinities, cfg);
  return run;
}

inline std::string tsne_csv(const EmbeddingSet& pts, const std::vector<double>& coords) {
  std::ostringstream out;
  out << "core_id,x,y,label\n";
  char buf[64];
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::snprintf(buf, sizeof buf, ",%.9g,%.9g,", coords[2 * i], coords[2 * i + 1]);
    out << pts.core_ids[i] << buf << pts.labels[i] << '\n';
  }
  return out.str();
}

/// Scatter plot: one <circle> per core coloured by class, legend listing
/// only the classes that occur.
inline std::string scatter_svg(const std::vector<double>& coords,
                               const std::vector<std::uint32_t>& labels,
                               const std::vector<std::string>& class_names) {
  static constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                             "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                                             "#bcbd22", "#17becf"};
  const std::size_t n = labels.size();
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (n > 0) {
    xmin = xmax = coords[0];
    ymin = ymax = coords[1];
    for (std::size_t i = 0; i < n; ++i) {
      xmin = std::min(xmin, coords[2 * i]);
      xmax = std::max(xmax, coords[2 * i]);
      ymin = std::min(ymin, coords[2 * i + 1]);
      ymax = std::max(ymax, coords[2 * i + 1]);
    }
  }
  const double plot = 560.0, pad = 20.0;
  const double sx = xmax > xmin ? plot / (xmax - xmin) : 1.0;
  const double sy = ymax > ymin ? plot / (ymax - ymin) : 1.0;
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"780\" height=\"600\" "
         "font-family=\"sans-serif\" font-size=\"12\">\n";
  char buf[160];
  for (std::size_t i = 0; i < n; ++i) {
    const double px = pad + (coords[2 * i] - xmin) * sx;
    const double py = pad + (ymax - coords[2 * i + 1]) * sy;
    std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"%s\"/>\n",
                  px, py, kPalette[labels[i] % std::size(kPalette)]);
    out << buf;
  }
  std::set<std::uint32_t> present(labels.begin(), labels.end());
  int row = 0;
  for (const auto c : present) {
    const int y = 30 + 20 * row++;
    const std::string name = c < class_names.size() ? class_names[c] : "class " + std::to_string(c);
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"610\" y=\"%d\" width=\"12\" height=\"12\" fill=\"%s\"/>\n", y - 10,
                  kPalette[c % std::size(kPalette)]);
    out << buf << "<text x=\"628\" y=\"" << y << "\">" << xml_escape(name) << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

inline void emit_scatter(const std::vector<double>& coords,
                         const std::vector<std::uint32_t>& labels,
                         const std::vector<std::string>& class_names,
                         const std::filesystem::path& path) {
  write_file_atomic(path, scatter_svg(coords, labels, class_names));
}

}  // namespace bagforge
