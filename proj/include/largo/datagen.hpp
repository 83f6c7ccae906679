// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic multimodal datasets.
//
// Segmentation: every foreground class c is a random disk. The disk is drawn
// (as a bright region) only into the modalities whose visibility entry for c
// is set, and every modality gets its own Gaussian noise. Shapes and noise
// come from separate RNG streams, so removing a class never changes what an
// unrelated modality looks like. A subset without any modality that shows
// class c therefore carries no information about where c is.
//
// Classification: each class has one random prototype per modality; a sample
// is its class prototype plus modality-specific isotropic noise.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "largo/error.hpp"
#include "largo/modality.hpp"
#include "largo/network_spec.hpp"
#include "largo/rng.hpp"
#include "largo/tensor.hpp"

namespace largo {

struct DatasetSpec {
  Task task = Task::segmentation;
  std::size_t n_modalities = 2;
  std::size_t size = 240;
  std::size_t classes = 3;  // segmentation: including background
  std::uint64_t seed = 1;
  double validation_fraction = 0.2;
  std::vector<double> noise{0.3, 0.3};  // per modality

  // segmentation
  std::size_t image_size = 32;
  double radius_min = 4.0, radius_max = 9.0;
  double contrast = 1.0;
  /// visibility[c - 1][n]: foreground class c is drawn into modality n.
  std::vector<std::vector<int>> visibility;

  // classification
  std::vector<std::size_t> widths{160, 320};

  /// Default visibility: class c shows up in modality (c - 1) mod N only.
  std::vector<std::vector<int>> effective_visibility() const {
    if (!visibility.empty()) return visibility;
    std::vector<std::vector<int>> v(classes - 1, std::vector<int>(n_modalities, 0));
    for (std::size_t c = 1; c < classes; ++c) v[c - 1][(c - 1) % n_modalities] = 1;
    return v;
  }

  void validate() const {
    if (n_modalities < 1 || n_modalities > 10) throw ConfigError("data: n_modalities must be in [1, 10]");
    if (size < 2) throw ConfigError("data: size must be >= 2");
    if (classes < 2) throw ConfigError("data: classes must be >= 2");
    if (noise.size() != n_modalities) throw ConfigError("data: need one noise level per modality");
    for (double s : noise)
      if (!(s >= 0.0)) throw ConfigError("data: noise levels must be >= 0");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
      throw ConfigError("data: validation_fraction must be in (0, 1)");
    if (task == Task::segmentation) {
      if (image_size < 4) throw ConfigError("data: image_size must be >= 4");
      if (!(radius_min > 0.0 && radius_max >= radius_min && 2 * radius_max < double(image_size)))
        throw ConfigError("data: radii must satisfy 0 < min <= max < image_size / 2");
      const auto v = effective_visibility();
      if (v.size() != classes - 1) throw ConfigError("data: visibility needs one row per foreground class");
      for (std::size_t c = 0; c < v.size(); ++c) {
        if (v[c].size() != n_modalities)
          throw ConfigError("data: visibility row " + std::to_string(c + 1) + " needs one entry per modality");
        if (std::none_of(v[c].begin(), v[c].end(), [](int x) { return x != 0; }))
          throw ConfigError("data: class " + std::to_string(c + 1) + " is invisible in every modality");
      }
    } else {
      if (widths.size() != n_modalities) throw ConfigError("data: need one feature width per modality");
      for (auto w : widths)
        if (w == 0) throw ConfigError("data: feature widths must be >= 1");
    }
  }
};

inline json to_json(const DatasetSpec& s) {
  json j{{"task", s.task == Task::segmentation ? "segmentation" : "classification"},
         {"n_modalities", s.n_modalities},
         {"size", s.size},
         {"classes", s.classes},
         {"seed", s.seed},
         {"validation_fraction", s.validation_fraction},
         {"noise", s.noise}};
  if (s.task == Task::segmentation) {
    j["image_size"] = s.image_size;
    j["radius"] = {s.radius_min, s.radius_max};
    j["contrast"] = s.contrast;
    j["visibility"] = s.effective_visibility();
  } else {
    j["widths"] = s.widths;
  }
  return j;
}

inline DatasetSpec dataset_spec_from_json(const json& j) {
  using detail::get_or;
  DatasetSpec s;
  const auto task = get_or<std::string>(j, "task", "segmentation");
  if (task == "segmentation")
    s.task = Task::segmentation;
  else if (task == "classification")
    s.task = Task::classification;
  else
    throw ConfigError("data: unknown task '" + task + "'");
  s.n_modalities = get_or<std::size_t>(j, "n_modalities", s.n_modalities);
  s.size = get_or<std::size_t>(j, "size", s.size);
  s.classes = get_or<std::size_t>(j, "classes", s.task == Task::segmentation ? 3 : 10);
  s.seed = get_or<std::uint64_t>(j, "seed", s.seed);
  s.validation_fraction = get_or<double>(j, "validation_fraction", s.validation_fraction);
  s.noise = get_or<std::vector<double>>(j, "noise", std::vector<double>(s.n_modalities, 0.3));
  s.image_size = get_or<std::size_t>(j, "image_size", s.image_size);
  if (j.contains("radius")) {
    const auto r = get_or<std::vector<double>>(j, "radius", {});
    if (r.size() != 2) throw ConfigError("data: radius must be [min, max]");
    s.radius_min = r[0];
    s.radius_max = r[1];
  }
  s.contrast = get_or<double>(j, "contrast", s.contrast);
  s.visibility = get_or<std::vector<std::vector<int>>>(j, "visibility", {});
  s.widths = get_or<std::vector<std::size_t>>(j, "widths", s.widths);
  s.validate();
  return s;
}

struct MultimodalSample {
  std::size_t id = 0;
  std::vector<DenseTensor> modalities;  // [1, H, W] or [width]
  DenseTensor target;                   // [H, W] class ids (segmentation)
  std::size_t label = 0;                // classification
};

struct Dataset {
  DatasetSpec spec;
  std::vector<MultimodalSample> samples;
  std::vector<DenseTensor> prototypes;  // classification: [classes, width] per modality

  std::size_t size() const { return samples.size(); }
};

namespace datagen_detail {

struct Disk {
  double cy, cx, r;
  bool contains(std::size_t y, std::size_t x) const {
    const double dy = double(y) + 0.5 - cy, dx = double(x) + 0.5 - cx;
    return dy * dy + dx * dx <= r * r;
  }
};

/// Geometry stream: one disk per foreground class, fully inside the image.
inline std::vector<Disk> disks_for(const DatasetSpec& s, RngState& rng) {
  std::vector<Disk> out;
  const double side = double(s.image_size);
  for (std::size_t c = 1; c < s.classes; ++c) {
    const double r = rng.uniform(s.radius_min, s.radius_max);
    out.push_back(Disk{rng.uniform(r, side - r), rng.uniform(r, side - r), r});
  }
  return out;
}

}  // namespace datagen_detail

/// Renders modality n of sample `id` from its disks. `skip_class` (1-based,
/// 0 = none) leaves one disk out; used to test information absence.
inline DenseTensor render_modality(const DatasetSpec& s, std::size_t id, std::size_t n,
                                   std::size_t skip_class = 0) {
  RngState base(s.seed);
  RngState geo = base.fork(2 * id);
  const auto disks = datagen_detail::disks_for(s, geo);
  RngState noise = base.fork(2 * id + 1).fork(n);
  const auto vis = s.effective_visibility();
  const std::size_t H = s.image_size;
  DenseTensor img({1, H, H}, 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < H; ++x) {
      double v = 0.0;
      for (std::size_t c = 1; c < s.classes; ++c)
        if (c != skip_class && vis[c - 1][n] && disks[c - 1].contains(y, x)) v = s.contrast;
      img.at(0, y, x) = v + s.noise[n] * noise.normal();
    }
  return img;
}

/// Later classes overwrite earlier ones where disks overlap.
inline DenseTensor render_target(const DatasetSpec& s, std::size_t id) {
  RngState geo = RngState(s.seed).fork(2 * id);
  const auto disks = datagen_detail::disks_for(s, geo);
  const std::size_t H = s.image_size;
  DenseTensor t({H, H}, 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < H; ++x)
      for (std::size_t c = 1; c < s.classes; ++c)
        if (disks[c - 1].contains(y, x)) t.at(y, x) = double(c);
  return t;
}

inline Dataset gen_segmentation(const DatasetSpec& spec) {
  if (spec.task != Task::segmentation) throw ConfigError("gen_segmentation: spec is not segmentation");
  spec.validate();
  Dataset d;
  d.spec = spec;
  for (std::size_t i = 0; i < spec.size; ++i) {
    MultimodalSample s;
    s.id = i;
    for (std::size_t n = 0; n < spec.n_modalities; ++n) s.modalities.push_back(render_modality(spec, i, n));
    s.target = render_target(spec, i);
    d.samples.push_back(std::move(s));
  }
  return d;
}

inline Dataset gen_classification(const DatasetSpec& spec) {
  if (spec.task != Task::classification)
    throw ConfigError("gen_classification: spec is not classification");
  spec.validate();
  Dataset d;
  d.spec = spec;
  RngState base(spec.seed);
  RngState proto = base.fork(0);
  for (std::size_t n = 0; n < spec.n_modalities; ++n) {
    DenseTensor p({spec.classes, spec.widths[n]});
    for (auto& v : p.data()) v = proto.normal();
    d.prototypes.push_back(std::move(p));
  }
  RngState labels = base.fork(1);
  for (std::size_t i = 0; i < spec.size; ++i) {
    MultimodalSample s;
    s.id = i;
    s.label = labels.below(spec.classes);
    RngState noise = base.fork(2 + i);
    for (std::size_t n = 0; n < spec.n_modalities; ++n) {
      RngState nn = noise.fork(n);
      DenseTensor f({spec.widths[n]});
      for (std::size_t k = 0; k < spec.widths[n]; ++k)
        f[k] = d.prototypes[n].at(s.label, k) + spec.noise[n] * nn.normal();
      s.modalities.push_back(std::move(f));
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

inline Dataset generate(const DatasetSpec& spec) {
  return spec.task == Task::segmentation ? gen_segmentation(spec) : gen_classification(spec);
}

/// Only the modalities in `mask`, keyed by modality id. Nothing is imputed.
inline ModalityInputs apply_subset(const MultimodalSample& s, const ModalityMask& mask) {
  if (mask.n_modalities() != s.modalities.size())
    throw ModalityError("mask covers " + std::to_string(mask.n_modalities()) + " modalities, sample has " +
                        std::to_string(s.modalities.size()));
  ModalityInputs out;
  for (auto id : mask.members()) out.emplace(id, s.modalities[id]);
  return out;
}

struct Split {
  std::vector<std::size_t> train, validation;  // sample indices, ascending
};

/// The last ceil(fraction * size) samples form the validation split. Samples
/// are i.i.d. by construction, so a contiguous split is unbiased.
inline Split split(const Dataset& d) {
  const std::size_t n = d.size();
  std::size_t n_val = static_cast<std::size_t>(std::ceil(d.spec.validation_fraction * double(n)));
  n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
  Split s;
  for (std::size_t i = 0; i < n; ++i) (i < n - n_val ? s.train : s.validation).push_back(i);
  return s;
}

/// Mean Dice (%) over foreground classes of the best input-independent
/// predictor that labels each class either everywhere or nowhere.
inline double chance_floor_dice(const Dataset& d, const std::vector<std::size_t>& indices) {
  if (d.spec.task != Task::segmentation) throw ConfigError("chance floor is defined for segmentation");
  double total = 0.0;
  for (std::size_t c = 1; c < d.spec.classes; ++c) {
    double everywhere = 0.0, nowhere = 0.0;
    for (auto i : indices) {
      const auto& t = d.samples[i].target;
      std::size_t g = 0;
      for (double v : t.data()) g += (std::size_t(v) == c);
      everywhere += 100.0 * 2.0 * double(g) / double(g + t.size());
      nowhere += g == 0 ? 100.0 : 0.0;
    }
    total += std::max(everywhere, nowhere) / double(indices.size());
  }
  return total / double(d.spec.classes - 1);
}

}  // namespace largo
