#include "sicp/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "sicp/byteio.hpp"
#include "sicp/comms.hpp"
#include "sicp/error.hpp"

namespace sicp::checkpoint {

namespace {

constexpr char kMagic[8] = {'S', 'I', 'C', 'P', 'C', 'K', 'P', 'T'};

enum class Kind : std::uint8_t { Param = 0, Buffer = 1, AdamM = 2, AdamV = 3 };

void put_blob(ByteWriter& w, const std::string& name, Kind kind, std::span<const double> values) {
  w.str(name);
  w.uint(static_cast<std::uint8_t>(kind));
  w.uint(static_cast<std::uint64_t>(values.size()));
  for (double v : values) w.f64(v);
}

[[noreturn]] void incompatible(const std::string& what) { throw Error(ErrorKind::IncompatibleCheckpoint, what); }

}  // namespace

std::vector<std::uint8_t> serialize(pipeline::Model& model, const pipeline::Adam* adam, std::uint64_t config_hash,
                                    std::uint64_t seed) {
  const auto params = model.named_parameters();
  const auto buffers = model.named_buffers();
  const bool with_adam = adam && adam->state().m.size() == params.size();

  std::vector<std::uint8_t> out;
  ByteWriter w(out);
  w.bytes({reinterpret_cast<const std::uint8_t*>(kMagic), sizeof(kMagic)});
  w.uint(kVersion);
  w.uint(model.config.architecture_hash());
  w.uint(config_hash);
  w.uint(seed);
  w.uint(with_adam ? adam->state().step : std::uint64_t{0});
  w.f64(adam ? adam->state().lr : 0.0);
  w.uint(static_cast<std::uint32_t>(params.size() * (with_adam ? 3 : 1) + buffers.size()));
  for (const auto& p : params) put_blob(w, p.name, Kind::Param, p.tensor.data());
  for (const auto& b : buffers) put_blob(w, b.name, Kind::Buffer, *b.values);
  if (with_adam) {
    for (std::size_t k = 0; k < params.size(); ++k) put_blob(w, params[k].name, Kind::AdamM, adam->state().m[k]);
    for (std::size_t k = 0; k < params.size(); ++k) put_blob(w, params[k].name, Kind::AdamV, adam->state().v[k]);
  }
  w.uint(comms::crc32(out));
  return out;
}

Meta restore(std::span<const std::uint8_t> bytes, pipeline::Model& model, pipeline::Adam* adam) {
  if (bytes.size() < sizeof(kMagic) + 4 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    incompatible("not a checkpoint file");
  }
  const std::span<const std::uint8_t> body = bytes.first(bytes.size() - 4);
  ByteReader tail(bytes.subspan(bytes.size() - 4));
  if (comms::crc32(body) != tail.uint<std::uint32_t>()) throw Error(ErrorKind::CorruptPayload, "checkpoint crc mismatch");

  ByteReader r(body);
  for (std::size_t k = 0; k < sizeof(kMagic); ++k) r.uint<std::uint8_t>();
  const auto version = r.uint<std::uint32_t>();
  if (version != kVersion) incompatible("checkpoint version " + std::to_string(version));
  Meta meta;
  meta.architecture_hash = r.uint<std::uint64_t>();
  meta.config_hash = r.uint<std::uint64_t>();
  meta.seed = r.uint<std::uint64_t>();
  if (meta.architecture_hash != model.config.architecture_hash()) {
    incompatible("architecture hash differs from the configured model");
  }
  const auto step = r.uint<std::uint64_t>();
  const double lr = r.f64();
  const auto count = r.uint<std::uint32_t>();

  const auto params = model.named_parameters();
  const auto buffers = model.named_buffers();
  pipeline::Adam::State state;
  state.lr = lr;
  state.step = step;
  std::vector<std::vector<double>> values;
  std::vector<std::pair<std::string, Kind>> keys;
  for (std::uint32_t b = 0; b < count; ++b) {
    std::string name = r.str();
    const auto kind = static_cast<Kind>(r.uint<std::uint8_t>());
    const auto n = r.uint<std::uint64_t>();
    if (n > r.remaining() / 8) throw Error(ErrorKind::Truncated, "blob '" + name + "' runs past the end");
    std::vector<double> v(n);
    for (auto& x : v) x = r.f64();
    keys.emplace_back(std::move(name), kind);
    values.push_back(std::move(v));
  }
  if (r.remaining() != 0) incompatible("trailing bytes after the last blob");

  // Validate everything before touching the model.
  std::size_t at = 0;
  auto expect = [&](const std::string& name, Kind kind, std::size_t n) -> std::vector<double>& {
    if (at >= keys.size() || keys[at].first != name || keys[at].second != kind) {
      incompatible("expected blob '" + name + "'");
    }
    if (values[at].size() != n) incompatible("blob '" + name + "' has " + std::to_string(values[at].size()) + " values");
    return values[at++];
  };
  std::vector<std::vector<double>*> param_src, buffer_src;
  for (const auto& p : params) param_src.push_back(&expect(p.name, Kind::Param, p.tensor.numel()));
  for (const auto& b : buffers) buffer_src.push_back(&expect(b.name, Kind::Buffer, b.values->size()));
  const bool with_adam = at < keys.size();
  if (with_adam) {
    for (const auto& p : params) state.m.push_back(expect(p.name, Kind::AdamM, p.tensor.numel()));
    for (const auto& p : params) state.v.push_back(expect(p.name, Kind::AdamV, p.tensor.numel()));
  }
  if (at != keys.size()) incompatible("unexpected extra blobs");

  for (std::size_t k = 0; k < params.size(); ++k) {
    ad::Tensor t = params[k].tensor;
    auto dst = t.mutable_data();
    std::copy(param_src[k]->begin(), param_src[k]->end(), dst.begin());
    t.zero_grad();
  }
  for (std::size_t k = 0; k < buffers.size(); ++k) *buffers[k].values = *buffer_src[k];
  if (adam) {
    if (!with_adam) state.step = 0;
    adam->state() = std::move(state);
  }
  return meta;
}

void save(const std::filesystem::path& path, pipeline::Model& model, const pipeline::Adam* adam,
          std::uint64_t config_hash, std::uint64_t seed) {
  const auto bytes = serialize(model, adam, config_hash, seed);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::Io, "cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error(ErrorKind::Io, "short write to " + path.string());
}

Meta load(const std::filesystem::path& path, pipeline::Model& model, pipeline::Adam* adam) {
  if (!std::filesystem::exists(path)) throw Error(ErrorKind::MissingCheckpoint, path.string() + " does not exist");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Io, "cannot read " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return restore(bytes, model, adam);
}

}  // namespace sicp::checkpoint
