// SPDX-License-Identifier: Apache-2.0
#pragma once

// Per-subset evaluation, the parameter-complexity report and the ablation
// drivers. Reports come in two forms: a fixed-width table using "•" for a
// present and "∘" for an absent modality, and a JSON document.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "largo/training.hpp"

namespace largo {

// ---- metrics ------------------------------------------------------------------

/// 100 * 2|P ∩ G| / (|P| + |G|) for one class; 100 when both are empty.
inline double dice_score(const DenseTensor& pred, const DenseTensor& gt, std::size_t cls) {
  if (pred.shape() != gt.shape())
    throw DimensionError("dice_score: shapes " + shape_str(pred.shape()) + " and " + shape_str(gt.shape()));
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = std::size_t(pred[i]) == cls, b = std::size_t(gt[i]) == cls;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 100.0;
  return 100.0 * 2.0 * double(both) / double(p + g);
}

namespace eval_detail {

using Point = std::array<double, 2>;

/// Pixels of class `cls` with a 4-neighbour of another class or on the border.
inline std::vector<Point> boundary(const DenseTensor& mask, std::size_t cls) {
  const std::size_t H = mask.dim(0), W = mask.dim(1);
  auto in = [&](std::size_t y, std::size_t x) { return std::size_t(mask.at(y, x)) == cls; };
  std::vector<Point> out;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      if (!in(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == H || x + 1 == W || !in(y - 1, x) || !in(y + 1, x) ||
                        !in(y, x - 1) || !in(y, x + 1);
      if (edge) out.push_back({double(y), double(x)});
    }
  return out;
}

/// Linear-interpolation percentile (q in [0, 100]) of a non-empty sample.
inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * double(v.size() - 1);
  const std::size_t lo = std::size_t(std::floor(pos)), hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

inline std::vector<double> directed(const std::vector<Point>& a, const std::vector<Point>& b) {
  std::vector<double> d;
  d.reserve(a.size());
  for (const auto& p : a) {
    double best = INFINITY;
    for (const auto& q : b) best = std::min(best, std::hypot(p[0] - q[0], p[1] - q[1]));
    d.push_back(best);
  }
  return d;
}

}  // namespace eval_detail

/// Symmetric 95th-percentile boundary distance in pixels for one class, by
/// exhaustive pairwise distances. Both masks empty gives 0; exactly one
/// empty gives the image diagonal.
inline double hausdorff95(const DenseTensor& pred, const DenseTensor& gt, std::size_t cls) {
  if (pred.shape() != gt.shape() || pred.rank() != 2)
    throw DimensionError("hausdorff95 expects two [H, W] masks of equal shape");
  const auto a = eval_detail::boundary(pred, cls), b = eval_detail::boundary(gt, cls);
  if (a.empty() && b.empty()) return 0.0;
  if (a.empty() || b.empty()) return std::hypot(double(pred.dim(0)), double(pred.dim(1)));
  return std::max(eval_detail::percentile(eval_detail::directed(a, b), 95.0),
                  eval_detail::percentile(eval_detail::directed(b, a), 95.0));
}

/// Argmax over the channel axis of [C, ...] logits.
inline DenseTensor argmax_channels(const DenseTensor& logits) {
  const std::size_t C = logits.dim(0), P = logits.size() / C;
  DenseTensor out(Shape(logits.shape().begin() + 1, logits.shape().end()));
  for (std::size_t i = 0; i < P; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (logits[c * P + i] > logits[best * P + i]) best = c;
    out[i] = double(best);
  }
  return out;
}

// ---- per-subset report ----------------------------------------------------------

struct SubsetRow {
  std::size_t m = 0;               // 0 for the average row
  std::string pattern;             // modality 0 first
  std::vector<double> dice;        // per foreground class (segmentation)
  std::vector<double> hd95;        // per foreground class (segmentation)
  double metric = 0.0;             // mean Dice % or accuracy %
  double hd95_mean = 0.0;
};

struct EvalReport {
  Task task = Task::segmentation;
  std::size_t n_modalities = 0;
  std::vector<SubsetRow> rows;
  SubsetRow average;
  std::size_t params = 0;
  std::size_t samples = 0;
  double chance_floor = 0.0;        // segmentation only
  double samples_per_second = 0.0;  // machine-dependent
  json config = json::object();

  const SubsetRow& row(std::size_t m) const {
    for (const auto& r : rows)
      if (r.m == m) return r;
    throw IndexError("report has no row for subset " + std::to_string(m));
  }

  /// Everything except timing; equal for equal states and data.
  json metrics_json() const {
    json rows_j = json::array();
    auto row_j = [&](const SubsetRow& r) {
      json j{{"subset", r.m}, {"pattern", r.pattern}, {"metric", r.metric}};
      if (task == Task::segmentation) {
        j["dice"] = r.dice;
        j["hd95"] = r.hd95;
        j["hd95_mean"] = r.hd95_mean;
      }
      return j;
    };
    for (const auto& r : rows) rows_j.push_back(row_j(r));
    json j{{"task", task == Task::segmentation ? "segmentation" : "classification"},
           {"metric_name", task == Task::segmentation ? "mean_dice_percent" : "accuracy_percent"},
           {"n_modalities", n_modalities},
           {"rows", rows_j},
           {"average", row_j(average)},
           {"params", params},
           {"samples", samples}};
    if (task == Task::segmentation) j["chance_floor_dice"] = chance_floor;
    return j;
  }

  json to_json() const {
    json j = metrics_json();
    j["throughput"] = {{"samples_per_second", samples_per_second}, {"note", "machine-dependent"}};
    j["config"] = config;
    return j;
  }

  std::string table() const {
    std::ostringstream os;
    char buf[64];
    for (std::size_t n = 0; n < n_modalities; ++n) os << " M" << n;
    const std::size_t classes = rows.empty() ? 0 : rows.front().dice.size();
    if (task == Task::segmentation) {
      for (std::size_t c = 0; c < classes; ++c) os << "   Dice" << c + 1;
      os << "    Mean   HD95\n";
    } else {
      os << "     Acc\n";
    }
    auto line = [&](const SubsetRow& r, bool avg) {
      if (avg) {
        const std::string label = 3 * n_modalities >= 7 ? "Average" : "Avg";
        os << std::string(3 * n_modalities - std::min(label.size(), 3 * n_modalities), ' ') << label;
      } else {
        for (std::size_t n = 0; n < n_modalities; ++n) os << "  " << (r.pattern[n] == '*' ? "•" : "∘");
      }
      if (task == Task::segmentation) {
        for (double d : r.dice) {
          std::snprintf(buf, sizeof buf, " %7.2f", d);
          os << buf;
        }
        std::snprintf(buf, sizeof buf, " %7.2f %6.2f", r.metric, r.hd95_mean);
      } else {
        std::snprintf(buf, sizeof buf, " %7.2f", r.metric);
      }
      os << buf << "\n";
    };
    for (const auto& r : rows) line(r, false);
    line(average, true);
    return os.str();
  }
};

inline SubsetRow average_row(const std::vector<SubsetRow>& rows) {
  SubsetRow a;
  if (rows.empty()) return a;
  a.dice.assign(rows.front().dice.size(), 0.0);
  a.hd95.assign(rows.front().hd95.size(), 0.0);
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < a.dice.size(); ++c) a.dice[c] += r.dice[c];
    for (std::size_t c = 0; c < a.hd95.size(); ++c) a.hd95[c] += r.hd95[c];
    a.metric += r.metric;
    a.hd95_mean += r.hd95_mean;
  }
  const double n = double(rows.size());
  for (auto& v : a.dice) v /= n;
  for (auto& v : a.hd95) v /= n;
  a.metric /= n;
  a.hd95_mean /= n;
  return a;
}

/// Metrics of one subset over the given samples.
inline SubsetRow evaluate_subset(const Network& net, const NetworkState& state, const Dataset& d,
                                 const std::vector<std::size_t>& idx, const ModalityMask& mask) {
  SubsetRow row;
  row.m = mask.index();
  row.pattern = mask.pattern();
  if (d.spec.task == Task::classification) {
    std::size_t correct = 0;
    constexpr std::size_t chunk = 256;
    for (std::size_t start = 0; start < idx.size(); start += chunk) {
      std::span<const std::size_t> b(idx.data() + start, std::min(chunk, idx.size() - start));
      ad::Tape tape;
      ParamBinder p(tape, state, false);
      const DenseTensor pred = argmax_channels(net.forward(p, stack_features(d, b, mask), mask).value());
      for (std::size_t i = 0; i < b.size(); ++i) correct += std::size_t(pred[i]) == d.samples[b[i]].label;
    }
    row.metric = 100.0 * double(correct) / double(idx.size());
    return row;
  }
  const std::size_t fg = d.spec.classes - 1;
  row.dice.assign(fg, 0.0);
  row.hd95.assign(fg, 0.0);
  for (auto i : idx) {
    ad::Tape tape;
    ParamBinder p(tape, state, false);
    const auto& s = d.samples[i];
    const DenseTensor pred = argmax_channels(net.forward(p, apply_subset(s, mask), mask).value());
    for (std::size_t c = 1; c <= fg; ++c) {
      row.dice[c - 1] += dice_score(pred, s.target, c);
      row.hd95[c - 1] += hausdorff95(pred, s.target, c);
    }
  }
  for (std::size_t c = 0; c < fg; ++c) {
    row.dice[c] /= double(idx.size());
    row.hd95[c] /= double(idx.size());
    row.metric += row.dice[c] / double(fg);
    row.hd95_mean += row.hd95[c] / double(fg);
  }
  return row;
}

/// Rows for m = 1..M (or only the listed subsets) plus their average.
inline EvalReport evaluate_all_subsets(const Network& net, const NetworkState& state, const Dataset& d,
                                       const std::vector<std::size_t>& idx,
                                       std::vector<std::size_t> subsets = {}) {
  check_compatible(net, d);
  if (idx.empty()) throw EvaluationError("evaluate: no samples");
  const std::size_t N = net.spec().n_modalities;
  if (subsets.empty()) {
    subsets.resize(net.model_count());
    std::iota(subsets.begin(), subsets.end(), std::size_t{1});
  }
  EvalReport r;
  r.task = d.spec.task;
  r.n_modalities = N;
  r.params = state.total_count();
  r.samples = idx.size();
  const auto t0 = std::chrono::steady_clock::now();
  for (auto m : subsets) r.rows.push_back(evaluate_subset(net, state, d, idx, ModalityMask::from_index(m, N)));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.samples_per_second = secs > 0 ? double(idx.size() * subsets.size()) / secs : 0.0;
  r.average = average_row(r.rows);
  if (d.spec.task == Task::segmentation) r.chance_floor = chance_floor_dice(d, idx);
  r.config = {{"network", to_json(net.spec())}, {"data", to_json(d.spec)}};
  return r;
}

// ---- complexity -----------------------------------------------------------------

/// Parameter side of the efficiency comparison: hypernetwork vs one dense
/// full-subset network vs the dedicated family, plus the per-layer rank table.
inline json complexity_report(NetworkSpec spec) {
  spec.mode = NetworkMode::hyper;
  const auto hyper = make_network(spec);
  const auto single = make_dedicated(spec, ModalityMask::full(spec.n_modalities));
  const auto hr = count_parameters(*hyper), sr = count_parameters(*single);
  NetworkSpec fam_spec = spec;
  fam_spec.mode = NetworkMode::dedicated;
  const auto family = count_parameters(*make_network(fam_spec));
  json layers = json::array();
  for (const auto& l : hyper->layers())
    layers.push_back({{"path", l.path},
                      {"role", l.role},
                      {"decomposition", l.decomp},
                      {"c_in", l.dims.c_in},
                      {"c_out", l.dims.c_out},
                      {"k", l.dims.k_flat},
                      {"rank", l.rank},
                      {"params", l.params}});
  return json{{"hypernetwork_params", hr.total},
              {"dedicated_single_params", sr.total},
              {"dedicated_family_params", family.total},
              {"delta_vs_single_percent", 100.0 * (double(hr.total) - double(sr.total)) / double(sr.total)},
              {"stem_params", hr.groups.stem},
              {"head_params", hr.groups.head},
              {"stem_head_fraction_percent", 100.0 * hr.stem_head_fraction()},
              {"models", spec.model_count()},
              {"layers", layers}};
}

inline std::string complexity_table(const json& c) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "hypernetwork        %12zu\n", c["hypernetwork_params"].get<std::size_t>());
  os << buf;
  std::snprintf(buf, sizeof buf, "dedicated (single)  %12zu\n", c["dedicated_single_params"].get<std::size_t>());
  os << buf;
  std::snprintf(buf, sizeof buf, "dedicated (family)  %12zu\n", c["dedicated_family_params"].get<std::size_t>());
  os << buf;
  std::snprintf(buf, sizeof buf, "delta vs single     %+11.3f%%\n", c["delta_vs_single_percent"].get<double>());
  os << buf;
  std::snprintf(buf, sizeof buf, "stem / head         %zu / %zu (%.3f%% of total)\n", c["stem_params"].get<std::size_t>(),
                c["head_params"].get<std::size_t>(), c["stem_head_fraction_percent"].get<double>());
  os << buf << "\nlayer                    role  decomp   C_in  C_out    K   rank      params\n";
  for (const auto& l : c["layers"]) {
    if (l["role"] == "stem" || l["role"] == "head" || l["role"] == "norm") continue;
    std::snprintf(buf, sizeof buf, "%-24s %-5s %-7s %5zu %6zu %4zu %6zu %11zu\n", l["path"].get<std::string>().c_str(),
                  l["role"].get<std::string>().c_str(), l["decomposition"].get<std::string>().c_str(),
                  l["c_in"].get<std::size_t>(), l["c_out"].get<std::size_t>(), l["k"].get<std::size_t>(),
                  l["rank"].get<std::size_t>(), l["params"].get<std::size_t>());
    os << buf;
  }
  return os.str();
}

// ---- ablations ------------------------------------------------------------------

/// Initial parameters for a network under a training seed.
inline NetworkState initial_state(const Network& net, std::uint64_t seed) {
  RngState rng = RngState(seed).fork(0x1417);
  return net.initial_state(rng);
}

struct AblationRow {
  std::string label;
  NetworkSpec spec;
  std::size_t params = 0;
  double metric = 0.0;  // average over subsets of the validation metric
  EvalReport report;
  std::vector<json> log;
};

using AblationProgress = std::function<void(const AblationRow&)>;

inline AblationRow train_and_evaluate(const std::string& label, const NetworkSpec& spec, const Dataset& d,
                                      const TrainConfig& cfg) {
  const auto net = make_network(spec);
  const Split sp = split(d);
  auto res = train(*net, initial_state(*net, cfg.seed), d, sp.train, cfg);
  AblationRow row;
  row.label = label;
  row.spec = spec;
  row.report = evaluate_all_subsets(*net, res.state, d, sp.validation);
  row.params = res.state.total_count();
  row.metric = row.report.average.metric;
  row.log = std::move(res.log);
  return row;
}

inline std::string multiplier_label(double mult) {
  if (mult == 0.25) return "R/4";
  if (mult == 0.5) return "R/2";
  if (mult == 1.0) return "R";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%gR", mult);
  return buf;
}

/// Trains one hypernetwork per rank multiple of the budget rank, and
/// optionally the dedicated family, under identical data and config.
inline std::vector<AblationRow> ablation_rank_sweep(const NetworkSpec& base, const std::vector<double>& multipliers,
                                                    const Dataset& d, const TrainConfig& cfg,
                                                    bool include_dedicated = true,
                                                    const AblationProgress& progress = {}) {
  std::vector<AblationRow> out;
  for (double mult : multipliers) {
    NetworkSpec s = base;
    s.mode = NetworkMode::hyper;
    s.rank_policy = RankPolicy::multiple;
    s.rank_multiplier = mult;
    // guard against runaway sizes from large multipliers
    if (count_parameters(*make_network(s)).total > 50'000'000)
      throw BuildError("rank multiple " + multiplier_label(mult) + " exceeds the 50M parameter guard");
    out.push_back(train_and_evaluate(multiplier_label(mult), s, d, cfg));
    if (progress) progress(out.back());
  }
  if (include_dedicated) {
    NetworkSpec s = base;
    s.mode = NetworkMode::dedicated;
    out.push_back(train_and_evaluate("Ded.", s, d, cfg));
    if (progress) progress(out.back());
  }
  return out;
}

/// CP vs Tucker at budget ranks, same data, seeds and config.
inline std::vector<AblationRow> ablation_decomposition(const NetworkSpec& base, const Dataset& d,
                                                       const TrainConfig& cfg, const AblationProgress& progress = {}) {
  std::vector<AblationRow> out;
  for (auto dec : {Decomposition::cp, Decomposition::tucker}) {
    NetworkSpec s = base;
    s.mode = NetworkMode::hyper;
    s.decomposition = dec;
    s.rank_policy = RankPolicy::budget;
    out.push_back(train_and_evaluate(decomposition_name(dec), s, d, cfg));
    if (progress) progress(out.back());
  }
  return out;
}

inline json ablation_json(const std::vector<AblationRow>& rows) {
  json j = json::array();
  for (const auto& r : rows)
    j.push_back({{"label", r.label},
                 {"params", r.params},
                 {"metric", r.metric},
                 {"spec", to_json(r.spec)},
                 {"report", r.report.metrics_json()},
                 {"final_loss", r.log.empty() ? json(nullptr) : r.log.back()["loss"]}});
  return j;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  char buf[128];
  os << "variant        params   avg metric\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-8s %12zu   %9.3f\n", r.label.c_str(), r.params, r.metric);
    os << buf;
  }
  return os.str();
}

}  // namespace largo
