// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>

#include "largo/container.hpp"
#include "largo/networks.hpp"

using namespace largo;
namespace fs = std::filesystem;

namespace {

fs::path tmp(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "largo_container_test";
  fs::create_directories(dir);
  return dir / name;
}

NetworkSpec toy() {
  NetworkSpec s;
  s.n_modalities = 2;
  s.channels = {4, 8};
  s.classes = 3;
  return s;
}

RngState& rng4() {
  static RngState r(4);
  r = RngState(4);
  return r;
}

}  // namespace

TEST(Container, RawRoundTripIsBitwise) {
  Container c;
  c.meta = {{"type", "scratch"}, {"note", "x"}};
  RngState rng(3);
  DenseTensor a({2, 3, 4});
  for (auto& v : a.data()) v = rng.normal() * 1e-300;
  DenseTensor b({5});
  b[0] = -0.0;
  b[1] = std::numeric_limits<double>::infinity();
  b[2] = 1.0 / 3.0;
  c.tensors.push_back({"a/x", "A", a});
  c.tensors.push_back({"b", "bias", b});
  write_container(tmp("raw.bin"), c);
  const Container r = read_container(tmp("raw.bin"));
  EXPECT_EQ(r.meta.at("note"), "x");
  ASSERT_EQ(r.tensors.size(), 2u);
  EXPECT_EQ(std::memcmp(r.find("a/x").value.raw(), a.raw(), a.size() * 8), 0);
  EXPECT_EQ(std::memcmp(r.find("b").value.raw(), b.raw(), b.size() * 8), 0);
  EXPECT_EQ(r.find("a/x").value.shape(), a.shape());
}

TEST(Container, FileStartsWithMagicAndJsonManifest) {
  Container c;
  c.tensors.push_back({"t", "bias", DenseTensor({2}, 1.5)});
  write_container(tmp("magic.bin"), c);
  std::ifstream is(tmp("magic.bin"), std::ios::binary);
  char magic[8];
  is.read(magic, 8);
  EXPECT_EQ(std::string(magic, 8), "LARGOCK1");
  unsigned char len[8];
  is.read(reinterpret_cast<char*>(len), 8);
  std::uint64_t n = 0;
  for (int i = 7; i >= 0; --i) n = (n << 8) | len[i];
  std::string manifest(n, '\0');
  is.read(manifest.data(), std::streamsize(n));
  const json j = json::parse(manifest);
  EXPECT_EQ(j.at("format"), "largo-container");
  EXPECT_EQ(j.at("tensors").at(0).at("shape"), json::array({2}));
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  EXPECT_EQ(v, 1.5);
}

TEST(Container, CheckpointRoundTrip) {
  auto net = make_network(toy());
  const NetworkState st = net->initial_state(rng4());
  save_checkpoint(tmp("ck.bin"), st, toy(), 7, {{"loss", 0.25}});
  const Checkpoint ck = load_checkpoint(tmp("ck.bin"), toy());
  EXPECT_TRUE(ck.state == st);
  EXPECT_EQ(ck.meta.at("epoch"), 7);
  EXPECT_EQ(ck.meta.at("metrics").at("loss"), 0.25);
}

TEST(Container, CheckpointForOtherSpecIsRejected) {
  auto net = make_network(toy());
  save_checkpoint(tmp("ck2.bin"), net->initial_state(rng4()), toy());
  auto other = toy();
  other.channels = {4, 16};
  EXPECT_THROW(load_checkpoint(tmp("ck2.bin"), other), IncompatibleCheckpointError);
  other = toy();
  other.decomposition = Decomposition::tucker;
  EXPECT_THROW(load_checkpoint(tmp("ck2.bin"), other), IncompatibleCheckpointError);
}

TEST(Container, TruncatedFileIsRejected) {
  auto net = make_network(toy());
  save_checkpoint(tmp("ck3.bin"), net->initial_state(rng4()), toy());
  const auto size = fs::file_size(tmp("ck3.bin"));
  for (auto cut : {std::uintmax_t(4), std::uintmax_t(20), size / 2, size - 8}) {
    fs::copy_file(tmp("ck3.bin"), tmp("cut.bin"), fs::copy_options::overwrite_existing);
    fs::resize_file(tmp("cut.bin"), cut);
    EXPECT_THROW(read_container(tmp("cut.bin")), FormatError) << cut;
  }
}

TEST(Container, GarbageIsRejected) {
  std::ofstream(tmp("junk.bin")) << "not a container at all";
  EXPECT_THROW(read_container(tmp("junk.bin")), FormatError);
  EXPECT_THROW(read_container(tmp("missing.bin")), FormatError);
  Container c;
  write_container(tmp("notck.bin"), c);
  EXPECT_THROW(load_checkpoint(tmp("notck.bin"), toy()), FormatError);
  EXPECT_THROW(load_dataset(tmp("notck.bin")), FormatError);
}

TEST(Container, DatasetRoundTrip) {
  DatasetSpec s;
  s.size = 6;
  s.image_size = 16;
  s.radius_min = 2;
  s.radius_max = 5;
  const Dataset d = generate(s);
  save_dataset(tmp("ds.bin"), d);
  const Dataset r = load_dataset(tmp("ds.bin"));
  ASSERT_EQ(r.size(), d.size());
  EXPECT_EQ(to_json(r.spec), to_json(d.spec));
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(r.samples[i].id, d.samples[i].id);
    EXPECT_TRUE(r.samples[i].target == d.samples[i].target);
    for (std::size_t n = 0; n < 2; ++n) EXPECT_TRUE(r.samples[i].modalities[n] == d.samples[i].modalities[n]);
  }

  DatasetSpec c;
  c.task = Task::classification;
  c.size = 9;
  c.widths = {3, 5};
  const Dataset dc = generate(c);
  save_dataset(tmp("dc.bin"), dc);
  const Dataset rc = load_dataset(tmp("dc.bin"));
  for (std::size_t i = 0; i < dc.size(); ++i) {
    EXPECT_EQ(rc.samples[i].label, dc.samples[i].label);
    EXPECT_TRUE(rc.samples[i].modalities[1] == dc.samples[i].modalities[1]);
  }
}
