// SPDX-License-Identifier: Apache-2.0
#pragma once

// Command-line front end. `run` is the whole program; the executable only
// forwards argv, which keeps every subcommand testable in-process.
//
// Exit codes: 0 success, 1 gradient check above tolerance, 2 usage error,
// 3 any other error (bad config, incompatible checkpoint, I/O, ...).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "largo/container.hpp"
#include "largo/eval.hpp"
#include "largo/experiment.hpp"

namespace largo::cli {

namespace fs = std::filesystem;

inline constexpr const char* kOutDirEnv = "LARGO_OUT_DIR";
inline constexpr const char* kDefaultOutDir = "largo-out";

struct Options {
  std::string spec, data, out, checkpoint, decomp, subset, rank_mult;
  std::optional<std::uint64_t> seed;
};

inline fs::path out_dir(const Options& o) {
  fs::path p;
  if (!o.out.empty())
    p = o.out;
  else if (const char* env = std::getenv(kOutDirEnv); env && *env)
    p = env;
  else
    p = kDefaultOutDir;
  fs::create_directories(p);
  return p;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write '" + path.string() + "'");
  os << text;
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

/// "5", "0b101" and "0x5" all name modalities {0, 2}.
inline std::size_t parse_subset(const std::string& s, std::size_t n_modalities) {
  std::size_t value = 0;
  try {
    std::size_t used = 0;
    if (s.rfind("0b", 0) == 0 || s.rfind("0B", 0) == 0)
      value = std::stoul(s.substr(2), &used, 2), used += 2;
    else
      value = std::stoul(s, &used, 0);
    if (used != s.size()) throw std::invalid_argument(s);
  } catch (const std::exception&) {
    throw ConfigError("--subset expects a bitmask such as 5 or 0b101, got '" + s + "'");
  }
  return ModalityMask(static_cast<std::uint32_t>(value), n_modalities).index();
}

inline double parse_rank_mult(const std::string& s) {
  for (double v : {0.25, 0.5, 1.0, 2.0, 7.0})
    if (s == multiplier_label(v) || std::strtod(s.c_str(), nullptr) == v) return v;
  throw ConfigError("--rank-mult must be one of 0.25, 0.5, 1, 2, 7");
}

/// Config plus command-line overrides.
inline Experiment resolve(const Options& o) {
  if (o.spec.empty()) throw ConfigError("--spec is required");
  Experiment e = load_experiment(o.spec);
  if (!o.decomp.empty()) {
    e.network.decomposition = decomposition_from_name(o.decomp);
    if (e.network.decomposition == Decomposition::dense) throw ConfigError("--decomp must be cp or tucker");
  }
  if (!o.rank_mult.empty()) {
    e.network.rank_policy = RankPolicy::multiple;
    e.network.rank_multiplier = parse_rank_mult(o.rank_mult);
  }
  if (o.seed) e.train.seed = *o.seed;
  e.network.validate();
  return e;
}

inline Dataset dataset_for(const Options& o, const Experiment& e) {
  if (o.data.empty()) return generate(e.data);
  Dataset d = load_dataset(o.data);
  return d;
}

// ---- subcommands ------------------------------------------------------------------

inline int cmd_gen_data(const Options& o) {
  Experiment e = load_experiment(o.spec);
  if (o.seed) e.data.seed = *o.seed;
  const Dataset d = generate(e.data);
  const fs::path path = o.data.empty() ? out_dir(o) / "data.bin" : fs::path(o.data);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_dataset(path, d);
  std::cout << "wrote " << d.size() << " samples to " << path.string() << "\n";
  return 0;
}

inline int cmd_train(const Options& o) {
  const Experiment e = resolve(o);
  const Dataset d = dataset_for(o, e);
  const auto net = make_network(e.network);
  check_compatible(*net, d);
  const Split sp = split(d);
  const fs::path dir = out_dir(o);
  write_json(dir / "config.json", to_json(e));

  std::ofstream log(dir / "metrics.jsonl", std::ios::binary);
  if (!log) throw FormatError("cannot write metrics log in '" + dir.string() + "'");
  auto res = train(*net, initial_state(*net, e.train.seed), d, sp.train, e.train, [&](const json& rec) {
    log << rec.dump() << "\n" << std::flush;
    std::cout << "epoch " << rec["epoch"] << "  loss " << rec["loss"].get<double>() << "\n";
  });

  const EvalReport rep = evaluate_all_subsets(*net, res.state, d, sp.validation);
  write_json(dir / "eval.json", rep.metrics_json());
  write_text(dir / "eval.txt", rep.table());
  save_checkpoint(dir / "checkpoint.bin", res.state, e.network, e.train.epochs,
                  {{"final", res.log.back()}, {"validation", rep.metrics_json()}});
  std::cout << rep.table() << "checkpoint: " << (dir / "checkpoint.bin").string() << "\n";
  return 0;
}

inline int cmd_eval(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  const Experiment e = resolve(o);
  const Dataset d = dataset_for(o, e);
  const auto net = make_network(e.network);
  const Checkpoint ck = load_checkpoint(o.checkpoint, e.network);
  std::vector<std::size_t> subsets;
  if (!o.subset.empty()) subsets.push_back(parse_subset(o.subset, e.network.n_modalities));
  const EvalReport rep = evaluate_all_subsets(*net, ck.state, d, split(d).validation, subsets);
  const fs::path dir = out_dir(o);
  write_json(dir / "eval.json", rep.metrics_json());
  write_text(dir / "eval.txt", rep.table());
  std::cout << rep.table() << "throughput: " << rep.samples_per_second << " samples/s (machine-dependent)\n";
  return 0;
}

inline int cmd_params(const Options& o) {
  const Experiment e = resolve(o);
  const json c = complexity_report(e.network);
  write_json(out_dir(o) / "params.json", c);
  std::cout << complexity_table(c);
  return 0;
}

inline int cmd_gradcheck(const Options& o) {
  const Experiment e = resolve(o);
  const auto& gc = e.gradcheck;
  const Dataset d = generate(e.data);
  const auto net = make_network(e.network);
  check_compatible(*net, d);
  std::size_t m = gc.subset;
  if (!o.subset.empty()) m = parse_subset(o.subset, e.network.n_modalities);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < std::min(gc.samples, d.size()); ++i) idx.push_back(i);
  const std::uint64_t seed = o.seed.value_or(e.train.seed);
  RngState coords(RngState(seed).fork(0x9c));
  const auto r = gradcheck_network(*net, initial_state(*net, seed), d, idx, m, e.train.loss, gc.step, coords,
                                   gc.coordinates);
  json j{{"subset", m}, {"max_rel_err", r.max_rel_err}, {"tolerance", gc.tolerance}, {"groups", json::object()}};
  std::cout << "group   coords   max rel err\n";
  for (const auto& [g, c] : r.groups) {
    j["groups"][g] = {{"coordinates", c.coordinates}, {"max_rel_err", c.max_rel_err}};
    std::printf("%-6s %7zu   %.3e\n", g.c_str(), c.coordinates, c.max_rel_err);
  }
  const bool ok = r.max_rel_err <= gc.tolerance;
  j["pass"] = ok;
  write_json(out_dir(o) / "gradcheck.json", j);
  std::printf("max rel err %.3e (tolerance %.0e): %s\n", r.max_rel_err, gc.tolerance, ok ? "ok" : "FAILED");
  return ok ? 0 : 1;
}

inline int cmd_ablate_rank(const Options& o) {
  const Experiment e = resolve(o);
  const Dataset d = dataset_for(o, e);
  std::vector<double> mults{0.25, 0.5, 1.0, 2.0, 7.0};
  if (!o.rank_mult.empty()) mults = {parse_rank_mult(o.rank_mult)};
  const auto rows = ablation_rank_sweep(e.network, mults, d, e.train, o.rank_mult.empty(), [](const AblationRow& r) {
    std::printf("%-5s params %zu  avg %.3f\n", r.label.c_str(), r.params, r.metric);
    std::fflush(stdout);
  });
  const fs::path dir = out_dir(o);
  write_json(dir / "ablate_rank.json", ablation_json(rows));
  write_text(dir / "ablate_rank.txt", ablation_table(rows));
  std::cout << ablation_table(rows);
  return 0;
}

inline int cmd_ablate_decomp(const Options& o) {
  const Experiment e = resolve(o);
  const Dataset d = dataset_for(o, e);
  const auto rows = ablation_decomposition(e.network, d, e.train, [](const AblationRow& r) {
    std::printf("%-6s params %zu  avg %.3f\n", r.label.c_str(), r.params, r.metric);
    std::fflush(stdout);
  });
  const fs::path dir = out_dir(o);
  write_json(dir / "ablate_decomp.json", ablation_json(rows));
  write_text(dir / "ablate_decomp.txt", ablation_table(rows));
  std::cout << ablation_table(rows);
  return 0;
}

// ---- entry --------------------------------------------------------------------

inline int run(int argc, const char* const* argv) {
  CLI::App app{"Low-rank hypernetworks for missing-modality learning"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--spec", o.spec, "experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--data", o.data, "dataset container (generated from the config when omitted)");
    sub->add_option("--out", o.out, std::string("output directory (default: $") + kOutDirEnv + " or ./" +
                                        kDefaultOutDir + ")");
    sub->add_option("--seed", seed, "training seed (gen-data: data seed)");
    sub->add_option("--checkpoint", o.checkpoint, "checkpoint container");
    sub->add_option("--decomp", o.decomp, "factorization")->check(CLI::IsMember({"cp", "tucker"}));
    sub->add_option("--rank-mult", o.rank_mult, "rank multiple of the budget rank")
        ->check(CLI::IsMember({"0.25", "0.5", "1", "2", "7"}));
    sub->add_option("--subset", o.subset, "modality bitmask, bit n = modality n");
  };
  struct Cmd {
    const char* name;
    const char* help;
    int (*fn)(const Options&);
  };
  const Cmd cmds[] = {
      {"train", "train and evaluate, writing metrics, report and checkpoint", cmd_train},
      {"eval", "evaluate a checkpoint on every (or one) modality subset", cmd_eval},
      {"params", "parameter accounting and per-layer ranks", cmd_params},
      {"gradcheck", "finite-difference check of the training loss", cmd_gradcheck},
      {"gen-data", "generate the configured synthetic dataset", cmd_gen_data},
      {"ablate-rank", "train at rank multiples R/4..7R plus the dedicated family", cmd_ablate_rank},
      {"ablate-decomp", "train CP and Tucker at matched budgets", cmd_ablate_decomp},
  };
  std::vector<std::pair<CLI::App*, const Cmd*>> subs;
  for (const auto& c : cmds) {
    auto* sub = app.add_subcommand(c.name, c.help);
    common(sub);
    if (std::string(c.name) != "gen-data") sub->get_option("--spec")->required();
    subs.emplace_back(sub, &c);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  for (auto* sub : app.get_subcommands())
    if (sub->count("--seed")) o.seed = seed;

  try {
    for (auto& [sub, cmd] : subs)
      if (sub->parsed()) {
        if (std::string(cmd->name) == "gen-data" && o.spec.empty()) throw ConfigError("--spec is required");
        return cmd->fn(o);
      }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}

}  // namespace largo::cli
