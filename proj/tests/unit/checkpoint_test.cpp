#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "sicp/checkpoint.hpp"
#include "test_util.hpp"

using namespace sicp;
using namespace sicp::pipeline;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.grid = geom::GridSpec{8, 8, 1.0, {}};
  c.extractor.widths = {4, 4};
  c.dpnet.channels = 4;
  return c;
}

std::vector<double> flat(const Model& m) {
  std::vector<double> v;
  for (const auto& p : m.named_parameters()) v.insert(v.end(), p.tensor.data().begin(), p.tensor.data().end());
  return v;
}

fs::path temp(const std::string& name) { return fs::temp_directory_path() / ("sicp_ckpt_" + name); }

}  // namespace

TEST_CASE("serialisation is deterministic and round-trips every value") {
  Model a = Model::init(tiny(), 1);
  Adam opt;
  opt.state().step = 3;
  for (const auto& p : a.named_parameters()) {
    opt.state().m.emplace_back(p.tensor.numel(), 0.5);
    opt.state().v.emplace_back(p.tensor.numel(), 0.125);
  }
  opt.state().m[0][0] = -1.0;
  a.extractor.blocks[0].bn.running_mean[1] = 0.25;
  const auto bytes = checkpoint::serialize(a, &opt, 42, 7);
  CHECK(bytes == checkpoint::serialize(a, &opt, 42, 7));
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "SICPCKPT");

  Model b = Model::init(tiny(), 2);
  Adam restored;
  const checkpoint::Meta meta = checkpoint::restore(bytes, b, &restored);
  CHECK(meta.config_hash == 42);
  CHECK(meta.seed == 7);
  CHECK(meta.architecture_hash == tiny().architecture_hash());
  CHECK(flat(a) == flat(b));
  CHECK(b.extractor.blocks[0].bn.running_mean[1] == 0.25);
  CHECK(restored.state().step == 3);
  CHECK(restored.state().m == opt.state().m);
  CHECK(restored.state().v == opt.state().v);
  CHECK(checkpoint::serialize(b, &restored, 42, 7) == bytes);
}

TEST_CASE("architecture mismatch is refused before anything is written") {
  Model a = Model::init(tiny(), 1);
  const auto bytes = checkpoint::serialize(a, nullptr, 0, 0);
  ModelConfig other = tiny();
  other.dpnet.layers = 3;
  Model b = Model::init(other, 5);
  const auto before = flat(b);
  CHECK_ERROR_KIND(checkpoint::restore(bytes, b, nullptr), ErrorKind::IncompatibleCheckpoint);
  CHECK(flat(b) == before);
}

TEST_CASE("corruption and truncation are detected") {
  Model a = Model::init(tiny(), 1);
  auto bytes = checkpoint::serialize(a, nullptr, 0, 0);
  Model b = Model::init(tiny(), 3);
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x40;
  CHECK_ERROR_KIND(checkpoint::restore(flipped, b, nullptr), ErrorKind::CorruptPayload);
  CHECK_THROWS_AS(checkpoint::restore(std::span(bytes).first(bytes.size() - 10), b, nullptr), Error);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_ERROR_KIND(checkpoint::restore(bad_magic, b, nullptr), ErrorKind::IncompatibleCheckpoint);
}

TEST_CASE("file save and load") {
  Model a = Model::init(tiny(), 4);
  const fs::path p = temp("roundtrip.ckpt");
  checkpoint::save(p, a, nullptr, 9, 10);
  Model b = Model::init(tiny(), 8);
  CHECK(checkpoint::load(p, b, nullptr).config_hash == 9);
  CHECK(flat(a) == flat(b));
  fs::remove(p);
  CHECK_ERROR_KIND(checkpoint::load(p, b, nullptr), ErrorKind::MissingCheckpoint);
}
