#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "uamix/dataset.hpp"
#include "uamix/encoder.hpp"
#include "uamix/error.hpp"
#include "uamix/parallel.hpp"
#include "uamix/random.hpp"
#include "uamix/tuning.hpp"

namespace uamix {

struct Episode {
  std::size_t way = 0;
  std::size_t shot = 0;
  std::size_t query_per_class = 0;
  std::vector<int> classes;            // sampled class ids, in draw order
  std::vector<std::size_t> support;    // way × shot item indices, class-major
  std::vector<std::size_t> query;      // way × query_per_class item indices, class-major
  std::vector<int> true_labels;        // per query item
  std::vector<int> predicted_labels;   // per query item, filled by the classifier
};

struct EvalReport {
  double mean_accuracy = 0.0;  // percent
  double ci95 = 0.0;           // percent
  std::size_t n_episodes = 0;
  std::size_t way = 0;
  std::size_t shot = 0;
  std::size_t query_per_class = 0;
  std::uint64_t seed = 0;
  std::vector<double> episode_accuracies;  // percent

  std::string summary() const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu-way %zu-shot: %.2f%% +- %.2f%% (95%% CI, %zu episodes)", way, shot,
                  mean_accuracy, ci95, n_episodes);
    return buf;
  }

  nlohmann::json to_json() const {
    return {{"mean_accuracy", mean_accuracy}, {"ci95", ci95},       {"n_episodes", n_episodes},
            {"way", way},                     {"shot", shot},       {"query_per_class", query_per_class},
            {"seed", seed},                   {"episode_accuracies", episode_accuracies}};
  }
};

/// Draws `way` classes without replacement, then shot + query items per class.
inline Episode sample_episode(const std::vector<int>& labels, std::size_t way, std::size_t shot, std::size_t query,
                              Rng& rng) {
  require(way >= 1 && shot >= 1 && query >= 1, ErrorKind::Parameter, "way, shot and query must be >= 1");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::vector<int> eligible;
  for (const auto& [c, items] : by_class)
    if (items.size() >= shot + query) eligible.push_back(c);
  require(eligible.size() >= way, ErrorKind::Capacity,
          "need " + std::to_string(way) + " classes with >= " + std::to_string(shot + query) + " items, have " +
              std::to_string(eligible.size()));

  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.query_per_class = query;
  shuffle(eligible, rng);
  ep.classes.assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(way));
  for (int c : ep.classes) {
    auto items = by_class[c];
    shuffle(items, rng);
    ep.support.insert(ep.support.end(), items.begin(), items.begin() + static_cast<std::ptrdiff_t>(shot));
    ep.query.insert(ep.query.end(), items.begin() + static_cast<std::ptrdiff_t>(shot),
                    items.begin() + static_cast<std::ptrdiff_t>(shot + query));
    ep.true_labels.insert(ep.true_labels.end(), query, c);
  }
  return ep;
}

/// Assigns each query row to the class whose renormalized support mean has
/// the highest cosine similarity. Ties go to the lowest class id.
inline std::vector<int> nearest_centroid(const Matrix<double>& support, const std::vector<int>& support_labels,
                                         const Matrix<double>& queries) {
  require(support.rows() == support_labels.size(), ErrorKind::Input, "one label per support row required");
  require(support.rows() >= 1, ErrorKind::Input, "no support examples");
  require(queries.rows() == 0 || queries.cols() == support.cols(), ErrorKind::Shape, "feature dimension mismatch");
  const std::size_t d = support.cols();
  std::map<int, std::vector<double>> sums;
  for (std::size_t r = 0; r < support.rows(); ++r) {
    auto& s = sums[support_labels[r]];
    s.resize(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) s[j] += support(r, j);
  }
  std::vector<int> classes;
  std::vector<std::vector<double>> centroids;
  for (auto& [c, s] : sums) {
    double n = 0.0;
    for (double v : s) n += v * v;
    n = std::sqrt(n);
    require(n > 0.0, ErrorKind::Numerical, "class centroid is the zero vector");
    for (auto& v : s) v /= n;
    classes.push_back(c);
    centroids.push_back(s);
  }
  std::vector<int> pred(queries.rows());
  for (std::size_t q = 0; q < queries.rows(); ++q) {
    double qn = 0.0;
    for (std::size_t j = 0; j < d; ++j) qn += queries(q, j) * queries(q, j);
    qn = std::sqrt(qn);
    std::size_t best = 0;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.size(); ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += centroids[c][j] * queries(q, j);
      if (qn > 0.0) s /= qn;
      if (s > best_sim) {
        best_sim = s;
        best = c;
      }
    }
    pred[q] = classes[best];
  }
  return pred;
}

/// 1.96 * sample standard deviation / sqrt(n).
inline double ci95(const std::vector<double>& values) {
  require(values.size() >= 2, ErrorKind::Parameter, "confidence interval needs at least two episodes");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  return 1.96 * sd / std::sqrt(static_cast<double>(values.size()));
}

namespace detail {
inline Matrix<double> gather_rows(const Matrix<double>& m, const std::vector<std::size_t>& idx) {
  Matrix<double> out(idx.size(), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) std::copy(m.row(idx[r]).begin(), m.row(idx[r]).end(), out.row(r).begin());
  return out;
}
}  // namespace detail

/// Runs one classified episode on precomputed features.
inline double run_episode(const Matrix<double>& features, Episode& ep) {
  std::vector<int> support_labels;
  for (std::size_t c = 0; c < ep.way; ++c) support_labels.insert(support_labels.end(), ep.shot, ep.classes[c]);
  ep.predicted_labels = nearest_centroid(detail::gather_rows(features, ep.support), support_labels,
                                         detail::gather_rows(features, ep.query));
  std::size_t correct = 0;
  for (std::size_t q = 0; q < ep.query.size(); ++q) correct += ep.predicted_labels[q] == ep.true_labels[q];
  return 100.0 * static_cast<double>(correct) / static_cast<double>(ep.query.size());
}

/// Episode e draws from its own stream derived from (seed, e).
inline EvalReport evaluate_features(const Matrix<double>& features, const std::vector<int>& labels, std::size_t way,
                                    std::size_t shot, std::size_t query, std::size_t episodes, std::uint64_t seed,
                                    std::size_t threads = 1) {
  require(episodes >= 2, ErrorKind::Parameter, "at least two episodes are required");
  require(features.rows() == labels.size(), ErrorKind::Input, "one label per feature row required");
  EvalReport rep;
  rep.n_episodes = episodes;
  rep.way = way;
  rep.shot = shot;
  rep.query_per_class = query;
  rep.seed = seed;
  rep.episode_accuracies.assign(episodes, 0.0);
  {
    Rng probe = make_rng(seed, 0xE915, 0);
    sample_episode(labels, way, shot, query, probe);  // surface capacity errors before fan-out
  }
  parallel_for(episodes, threads, [&](std::size_t e) {
    Rng rng = make_rng(seed, 0xE915, e);
    Episode ep = sample_episode(labels, way, shot, query, rng);
    rep.episode_accuracies[e] = run_episode(features, ep);
  });
  double sum = 0.0;
  for (double a : rep.episode_accuracies) sum += a;
  rep.mean_accuracy = sum / static_cast<double>(episodes);
  rep.ci95 = ci95(rep.episode_accuracies);
  return rep;
}

template <class S>
EvalReport evaluate(const EncoderState<S>& st, const Dataset& ds, std::size_t way, std::size_t shot,
                    std::size_t query, std::size_t episodes, std::uint64_t seed, std::size_t threads = 1) {
  require(ds.labels.has_value(), ErrorKind::Input, "few-shot evaluation needs a labeled dataset");
  return evaluate_features(backbone_features(st, ds, threads), *ds.labels, way, shot, query, episodes, seed, threads);
}

/// CSV with columns item_id, label, feat_0 .. feat_{d-1}; values use 9
/// significant digits so float32 features round-trip exactly.
inline void write_embeddings_csv(const Matrix<double>& features, const std::vector<int>& labels, std::size_t dim,
                                 const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(bool(out), ErrorKind::Io, "cannot write " + path.string());
  out << "item_id,label";
  for (std::size_t j = 0; j < dim; ++j) out << ",feat_" << j;
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < features.rows(); ++i) {
    out << i << ',' << labels[i];
    for (std::size_t j = 0; j < dim; ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(static_cast<float>(features(i, j))));
      out << ',' << buf;
    }
    out << '\n';
  }
  out.close();
  require(!out.fail(), ErrorKind::Io, "write failed: " + path.string());
}

template <class S>
void export_embeddings(const EncoderState<S>& st, const Dataset& ds, const std::filesystem::path& path,
                       std::size_t threads = 1) {
  require(ds.labels.has_value(), ErrorKind::Input, "embedding export needs a labeled dataset");
  write_embeddings_csv(backbone_features(st, ds, threads), *ds.labels, st.config.dim, path);
}

}  // namespace uamix
