// SPDX-License-Identifier: Apache-2.0
#pragma once

// Binary container shared by checkpoints and datasets:
//
//   bytes 0..7    magic "LARGOCK1"
//   bytes 8..15   manifest length L, unsigned 64-bit little-endian
//   next L bytes  JSON manifest
//   rest          raw little-endian float64 arrays, back to back
//
// Manifest: {"format": "largo-container", "version": 1, "meta": {...},
//            "tensors": [{"path", "kind", "shape", "offset", "count"}, ...]}
// where offset/count are in elements, relative to the start of the data block.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "largo/datagen.hpp"
#include "largo/error.hpp"
#include "largo/network_spec.hpp"
#include "largo/state.hpp"
#include "largo/tensor.hpp"

namespace largo {

inline constexpr char kContainerMagic[8] = {'L', 'A', 'R', 'G', 'O', 'C', 'K', '1'};
inline constexpr int kContainerVersion = 1;

struct NamedTensor {
  std::string path;
  std::string kind;
  DenseTensor value;
};

struct Container {
  json meta = json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor& find(const std::string& path) const {
    for (const auto& t : tensors)
      if (t.path == path) return t;
    throw FormatError("container has no tensor '" + path + "'");
  }
};

namespace container_detail {

inline std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap64(v);
  return v;
}

inline void write_f64(std::ostream& os, const DenseTensor& t) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.raw()), std::streamsize(t.size() * sizeof(double)));
  } else {
    for (double v : t.data()) {
      const std::uint64_t u = to_le(std::bit_cast<std::uint64_t>(v));
      os.write(reinterpret_cast<const char*>(&u), 8);
    }
  }
}

}  // namespace container_detail

inline void write_container(const std::filesystem::path& path, const Container& c) {
  json manifest{{"format", "largo-container"}, {"version", kContainerVersion}, {"meta", c.meta}};
  json list = json::array();
  std::size_t offset = 0;
  for (const auto& t : c.tensors) {
    list.push_back({{"path", t.path}, {"kind", t.kind}, {"shape", t.value.shape()}, {"offset", offset},
                    {"count", t.value.size()}});
    offset += t.value.size();
  }
  manifest["tensors"] = std::move(list);
  const std::string text = manifest.dump(1);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open '" + tmp + "' for writing");
    os.write(kContainerMagic, 8);
    const std::uint64_t len = container_detail::to_le(text.size());
    os.write(reinterpret_cast<const char*>(&len), 8);
    os.write(text.data(), std::streamsize(text.size()));
    for (const auto& t : c.tensors) container_detail::write_f64(os, t.value);
    if (!os) throw FormatError("write to '" + tmp + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

inline Container read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path.string() + "'");
  const std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kContainerMagic, 8) != 0)
    throw FormatError("'" + path.string() + "' is not a container (bad magic or truncated header)");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 8);
  len = container_detail::to_le(len);
  if (len > bytes.size() - 16) throw FormatError("truncated manifest in '" + path.string() + "'");
  json manifest;
  try {
    manifest = json::parse(bytes.begin() + 16, bytes.begin() + 16 + std::ptrdiff_t(len));
  } catch (const json::exception& e) {
    throw FormatError("unreadable manifest in '" + path.string() + "': " + e.what());
  }
  if (manifest.value("format", "") != "largo-container" || manifest.value("version", 0) != kContainerVersion)
    throw FormatError("unsupported container format/version in '" + path.string() + "'");

  const std::size_t data_start = 16 + len;
  const std::size_t available = (bytes.size() - data_start) / sizeof(double);
  Container c;
  c.meta = manifest.value("meta", json::object());
  try {
    for (const auto& e : manifest.at("tensors")) {
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto count = e.at("count").get<std::size_t>();
      if (shape_numel(shape) != count) throw FormatError("tensor '" + e.at("path").get<std::string>() + "' count does not match shape");
      if (offset + count > available)
        throw FormatError("truncated data block in '" + path.string() + "' (tensor '" +
                          e.at("path").get<std::string>() + "')");
      DenseTensor t(shape);
      std::memcpy(t.raw(), bytes.data() + data_start + offset * sizeof(double), count * sizeof(double));
      if constexpr (std::endian::native == std::endian::big)
        for (auto& v : t.data())
          v = std::bit_cast<double>(container_detail::to_le(std::bit_cast<std::uint64_t>(v)));
      c.tensors.push_back(NamedTensor{e.at("path").get<std::string>(), e.value("kind", ""), std::move(t)});
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed tensor list in '" + path.string() + "': " + e.what());
  }
  return c;
}

// ---- checkpoints ------------------------------------------------------------

struct Checkpoint {
  NetworkState state;
  json meta;  // spec, spec_hash, epoch, metrics
};

inline void save_checkpoint(const std::filesystem::path& path, const NetworkState& state,
                            const NetworkSpec& spec, std::size_t epoch = 0,
                            const json& metrics = json::object()) {
  Container c;
  c.meta = {{"type", "checkpoint"},
            {"spec_hash", hex64(spec_hash(spec))},
            {"spec", to_json(spec)},
            {"epoch", epoch},
            {"metrics", metrics}};
  for (const auto& [p, param] : state.params()) c.tensors.push_back({p, kind_name(param.kind), param.value});
  write_container(path, c);
}

/// Loads a checkpoint written for exactly `spec`.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const NetworkSpec& spec) {
  Container c = read_container(path);
  if (c.meta.value("type", "") != "checkpoint")
    throw FormatError("'" + path.string() + "' is not a checkpoint");
  const std::string want = hex64(spec_hash(spec)), got = c.meta.value("spec_hash", "");
  if (got != want)
    throw IncompatibleCheckpointError("checkpoint '" + path.string() + "' was written for spec " + got +
                                      ", current spec is " + want);
  Checkpoint ck;
  ck.meta = std::move(c.meta);
  for (auto& t : c.tensors) ck.state.add(t.path, std::move(t.value), kind_from_name(t.kind));
  return ck;
}

// ---- datasets ---------------------------------------------------------------

/// Stacked layout: "modality{n}" [S, ...], "target" [S, H, W] or "label" [S], "id" [S].
inline void save_dataset(const std::filesystem::path& path, const Dataset& d) {
  Container c;
  c.meta = {{"type", "dataset"}, {"spec", to_json(d.spec)}, {"samples", d.size()}};
  const std::size_t S = d.size();
  for (std::size_t n = 0; n < d.spec.n_modalities; ++n) {
    Shape shape{S};
    for (auto e : d.samples.front().modalities[n].shape()) shape.push_back(e);
    DenseTensor stacked(shape);
    const std::size_t per = d.samples.front().modalities[n].size();
    for (std::size_t i = 0; i < S; ++i)
      std::copy_n(d.samples[i].modalities[n].raw(), per, stacked.raw() + i * per);
    c.tensors.push_back({"modality" + std::to_string(n), "input", std::move(stacked)});
  }
  DenseTensor ids({S});
  for (std::size_t i = 0; i < S; ++i) ids[i] = double(d.samples[i].id);
  if (d.spec.task == Task::segmentation) {
    const auto& t0 = d.samples.front().target;
    DenseTensor t({S, t0.dim(0), t0.dim(1)});
    for (std::size_t i = 0; i < S; ++i) std::copy_n(d.samples[i].target.raw(), t0.size(), t.raw() + i * t0.size());
    c.tensors.push_back({"target", "target", std::move(t)});
  } else {
    DenseTensor l({S});
    for (std::size_t i = 0; i < S; ++i) l[i] = double(d.samples[i].label);
    c.tensors.push_back({"label", "target", std::move(l)});
  }
  c.tensors.push_back({"id", "id", std::move(ids)});
  write_container(path, c);
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.meta.value("type", "") != "dataset") throw FormatError("'" + path.string() + "' is not a dataset");
  Dataset d;
  d.spec = dataset_spec_from_json(c.meta.at("spec"));
  const auto& ids = c.find("id").value;
  const std::size_t S = ids.size();
  d.samples.resize(S);
  for (std::size_t n = 0; n < d.spec.n_modalities; ++n) {
    const auto& st = c.find("modality" + std::to_string(n)).value;
    Shape per_shape(st.shape().begin() + 1, st.shape().end());
    const std::size_t per = shape_numel(per_shape);
    for (std::size_t i = 0; i < S; ++i)
      d.samples[i].modalities.emplace_back(per_shape, std::vector<double>(st.raw() + i * per, st.raw() + (i + 1) * per));
  }
  for (std::size_t i = 0; i < S; ++i) d.samples[i].id = std::size_t(ids[i]);
  if (d.spec.task == Task::segmentation) {
    const auto& t = c.find("target").value;
    const std::size_t per = t.dim(1) * t.dim(2);
    for (std::size_t i = 0; i < S; ++i)
      d.samples[i].target = DenseTensor({t.dim(1), t.dim(2)}, std::vector<double>(t.raw() + i * per, t.raw() + (i + 1) * per));
  } else {
    const auto& l = c.find("label").value;
    for (std::size_t i = 0; i < S; ++i) d.samples[i].label = std::size_t(l[i]);
  }
  return d;
}

}  // namespace largo
