// SPDX-License-Identifier: Apache-2.0
#pragma once

// One JSON file describes a whole experiment:
//
//   {
//     "network":   { ...NetworkSpec... },
//     "data":      { ...DatasetSpec... },
//     "train":     { ...TrainConfig... },
//     "gradcheck": { "samples": 2, "subset": 1, "step": 1e-5, "coordinates": 50 }
//   }
//
// Every section except "network" is optional. Missing data fields that the
// network already determines (task, n_modalities, classes, widths) are
// taken from the network section.

#include <filesystem>
#include <fstream>

#include "largo/datagen.hpp"
#include "largo/training.hpp"

namespace largo {

struct GradCheckConfig {
  std::size_t samples = 2;
  std::size_t subset = 1;
  double step = 1e-5;
  std::size_t coordinates = 50;
  double tolerance = 1e-4;
};

struct Experiment {
  NetworkSpec network;
  DatasetSpec data;
  TrainConfig train;
  GradCheckConfig gradcheck;
};

inline json to_json(const GradCheckConfig& g) {
  return {{"samples", g.samples}, {"subset", g.subset}, {"step", g.step},
          {"coordinates", g.coordinates}, {"tolerance", g.tolerance}};
}

inline json to_json(const Experiment& e) {
  return {{"network", to_json(e.network)}, {"data", to_json(e.data)}, {"train", to_json(e.train)},
          {"gradcheck", to_json(e.gradcheck)}};
}

inline Experiment experiment_from_json(const json& j) {
  using detail::get_or;
  if (!j.is_object() || !j.contains("network")) throw ConfigError("experiment needs a \"network\" section");
  Experiment e;
  e.network = network_spec_from_json(j.at("network"));

  json data = j.value("data", json::object());
  if (!data.is_object()) throw ConfigError("\"data\" must be an object");
  const auto& n = e.network;
  if (!data.contains("task")) data["task"] = n.task == Task::segmentation ? "segmentation" : "classification";
  if (!data.contains("n_modalities")) data["n_modalities"] = n.n_modalities;
  if (!data.contains("classes")) data["classes"] = n.classes;
  if (n.task == Task::classification && !data.contains("widths")) data["widths"] = n.modality_widths;
  if (!data.contains("noise")) data["noise"] = std::vector<double>(data["n_modalities"].get<std::size_t>(), 0.3);
  e.data = dataset_spec_from_json(data);
  if (e.data.task != n.task || e.data.n_modalities != n.n_modalities || e.data.classes != n.classes)
    throw ConfigError("\"data\" disagrees with \"network\" on task, modality count or classes");

  if (j.contains("train")) e.train = train_config_from_json(j.at("train"));

  if (j.contains("gradcheck")) {
    const json& g = j.at("gradcheck");
    auto& gc = e.gradcheck;
    gc.samples = get_or<std::size_t>(g, "samples", gc.samples);
    gc.subset = get_or<std::size_t>(g, "subset", gc.subset);
    gc.step = get_or<double>(g, "step", gc.step);
    gc.coordinates = get_or<std::size_t>(g, "coordinates", gc.coordinates);
    gc.tolerance = get_or<double>(g, "tolerance", gc.tolerance);
    if (gc.samples == 0 || gc.coordinates == 0) throw ConfigError("gradcheck: samples and coordinates must be >= 1");
  }
  return e;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config '" + path.string() + "'");
  try {
    return json::parse(is);
  } catch (const json::exception& ex) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + ex.what());
  }
}

inline Experiment load_experiment(const std::filesystem::path& path) {
  return experiment_from_json(read_json_file(path));
}

}  // namespace largo
