#include "sicp/comms.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include "sicp/byteio.hpp"
#include "sicp/error.hpp"

namespace sicp::comms {

namespace {

constexpr std::uint8_t kMagic[4] = {'S', 'I', 'C', 'P'};

std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

}  // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1U << 30);
    c = ::crc32(c, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(c);
}

std::vector<std::uint8_t> encode_message(const geom::BEVFeatureMap& f, std::uint32_t sender_id,
                                         std::uint64_t timestamp_us, DType dtype) {
  const ad::Tensor& t = f.data;
  if (t.rank() != 3) throw Error(ErrorKind::ShapeMismatch, "feature message needs a [C,H,W] map");
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + t.numel() * dtype_size(dtype) + kCrcBytes);
  ByteWriter w(out);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  w.uint(kWireVersion);
  w.uint(sender_id);
  w.uint(timestamp_us);
  w.f64(f.pose.x);
  w.f64(f.pose.y);
  w.f64(f.pose.yaw);
  w.uint(static_cast<std::uint32_t>(f.grid.rows));
  w.uint(static_cast<std::uint32_t>(f.grid.cols));
  w.f64(f.grid.resolution);
  w.f64(f.grid.origin.x);
  w.f64(f.grid.origin.y);
  w.f64(f.grid.origin.yaw);
  for (std::size_t a = 0; a < 3; ++a) w.uint(static_cast<std::uint32_t>(t.dim(a)));
  w.uint(static_cast<std::uint8_t>(dtype));
  for (double v : t.data()) {
    if (dtype == DType::F64) w.f64(v);
    else w.f32(static_cast<float>(v));
  }
  w.uint(crc32(out));
  return out;
}

FeatureMessage decode_message(std::span<const std::uint8_t> bytes) {
  const std::size_t magic_len = std::min<std::size_t>(bytes.size(), 4);
  if (magic_len > 0 && std::memcmp(bytes.data(), kMagic, magic_len) != 0) {
    throw Error(ErrorKind::MalformedMessage, "bad magic");
  }
  if (bytes.size() < kHeaderBytes + kCrcBytes) {
    throw Error(ErrorKind::Truncated, std::to_string(bytes.size()) + " bytes is shorter than a header");
  }
  ByteReader r(bytes);
  r.uint<std::uint32_t>();  // magic
  FeatureMessage m;
  const auto version = r.uint<std::uint16_t>();
  if (version != kWireVersion) {
    throw Error(ErrorKind::MalformedMessage, "unsupported wire version " + std::to_string(version));
  }
  m.sender_id = r.uint<std::uint32_t>();
  m.timestamp_us = r.uint<std::uint64_t>();
  const double px = r.f64(), py = r.f64(), pyaw = r.f64();
  m.pose.x = px;
  m.pose.y = py;
  m.pose.yaw = pyaw;
  m.grid.rows = r.uint<std::uint32_t>();
  m.grid.cols = r.uint<std::uint32_t>();
  m.grid.resolution = r.f64();
  m.grid.origin.x = r.f64();
  m.grid.origin.y = r.f64();
  m.grid.origin.yaw = r.f64();
  m.channels = r.uint<std::uint32_t>();
  m.rows = r.uint<std::uint32_t>();
  m.cols = r.uint<std::uint32_t>();
  const auto tag = r.uint<std::uint8_t>();
  if (tag > static_cast<std::uint8_t>(DType::F64)) {
    throw Error(ErrorKind::MalformedMessage, "unknown dtype tag " + std::to_string(tag));
  }
  m.dtype = static_cast<DType>(tag);

  const std::uint64_t count = static_cast<std::uint64_t>(m.channels) * m.rows * m.cols;
  const std::uint64_t available = bytes.size() - kHeaderBytes - kCrcBytes;
  const std::uint64_t unit = dtype_size(m.dtype);
  if (count > available / unit) {
    throw Error(ErrorKind::Truncated, "payload shorter than declared " + std::to_string(m.channels) + "x" +
                                          std::to_string(m.rows) + "x" + std::to_string(m.cols));
  }
  const std::size_t payload_bytes = static_cast<std::size_t>(count * unit);
  if (payload_bytes != available) {
    throw Error(ErrorKind::MalformedMessage, "trailing bytes after payload");
  }
  const std::size_t body = kHeaderBytes + payload_bytes;
  ByteReader crc_reader(bytes.subspan(body));
  m.crc = crc_reader.uint<std::uint32_t>();
  if (crc32(bytes.first(body)) != m.crc) throw Error(ErrorKind::CorruptPayload, "crc mismatch");
  m.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(kHeaderBytes),
                   bytes.begin() + static_cast<std::ptrdiff_t>(body));
  return m;
}

geom::BEVFeatureMap to_feature_map(const FeatureMessage& msg) {
  const std::size_t n = static_cast<std::size_t>(msg.channels) * msg.rows * msg.cols;
  std::vector<double> values(n);
  ByteReader r(msg.payload);
  for (std::size_t k = 0; k < n; ++k) {
    values[k] = msg.dtype == DType::F64 ? r.f64()
                                        : static_cast<double>(r.f32());
  }
  geom::BEVFeatureMap f;
  f.data = ad::Tensor::from({msg.channels, msg.rows, msg.cols}, std::move(values));
  f.pose = msg.pose;
  f.grid = msg.grid;
  f.source_id = msg.sender_id;
  return f;
}

LossyChannel::LossyChannel(ChannelModel model) : model_(model), rng_(model.seed) {
  if (!(model.drop_prob >= 0.0 && model.drop_prob <= 1.0)) {
    throw Error(ErrorKind::Config, "channel drop_prob must lie in [0,1]");
  }
  if (model.base_latency_ms < 0.0 || model.jitter_ms < 0.0) {
    throw Error(ErrorKind::Config, "channel latency and jitter must be non-negative");
  }
}

void LossyChannel::send(std::vector<std::uint8_t> bytes, std::uint32_t sender_id, std::uint64_t send_time_us) {
  // Always consume both draws so the stream position is independent of outcomes.
  const double u_drop = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
  const double u_jitter = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
  TraceRecord rec;
  rec.seq = next_seq_++;
  rec.sender_id = sender_id;
  rec.send_time_us = send_time_us;
  rec.dropped = u_drop < model_.drop_prob;
  const double latency_ms = model_.base_latency_ms + u_jitter * model_.jitter_ms;
  rec.arrival_us = send_time_us + static_cast<std::uint64_t>(std::llround(latency_ms * 1000.0));
  trace_.push_back(rec);
  if (rec.dropped) return;
  pending_.push_back({Delivery{std::move(bytes), sender_id, send_time_us, rec.arrival_us}, rec.seq});
}

std::vector<Delivery> LossyChannel::step(std::uint64_t now_us) {
  auto due = std::stable_partition(pending_.begin(), pending_.end(),
                                   [now_us](const Pending& p) { return p.delivery.arrival_us > now_us; });
  std::vector<Pending> ready(std::make_move_iterator(due), std::make_move_iterator(pending_.end()));
  pending_.erase(due, pending_.end());
  std::sort(ready.begin(), ready.end(), [](const Pending& a, const Pending& b) {
    if (a.delivery.arrival_us != b.delivery.arrival_us) return a.delivery.arrival_us < b.delivery.arrival_us;
    if (a.delivery.sender_id != b.delivery.sender_id) return a.delivery.sender_id < b.delivery.sender_id;
    return a.seq < b.seq;
  });
  std::vector<Delivery> out;
  out.reserve(ready.size());
  for (auto& p : ready) {
    trace_[p.seq].delivered = true;
    out.push_back(std::move(p.delivery));
  }
  return out;
}

std::optional<FeatureMessage> select_partner_fcfs(const std::vector<Delivery>& delivered, Deadline deadline,
                                                  std::uint64_t ego_frame_time_us, const geom::Pose2D& ego_pose,
                                                  double comm_range_m) {
  const std::uint64_t cutoff =
      ego_frame_time_us + static_cast<std::uint64_t>(std::llround(deadline.budget_ms * 1000.0));
  const Delivery* best = nullptr;
  std::optional<FeatureMessage> chosen;
  for (const auto& d : delivered) {
    if (d.arrival_us > cutoff) continue;
    if (best && (d.arrival_us > best->arrival_us ||
                 (d.arrival_us == best->arrival_us && d.sender_id >= best->sender_id))) {
      continue;
    }
    FeatureMessage msg;
    try {
      msg = decode_message(d.bytes);
    } catch (const Error&) {
      continue;
    }
    if (std::hypot(msg.pose.x - ego_pose.x, msg.pose.y - ego_pose.y) > comm_range_m) continue;
    best = &d;
    chosen = std::move(msg);
  }
  return chosen;
}

void LoopbackTransport::write_frame(std::span<const std::uint8_t> frame) {
  const auto n = static_cast<std::uint32_t>(frame.size());
  for (std::size_t k = 0; k < 4; ++k) stream_.push_back(static_cast<std::uint8_t>(n >> (8 * k)));
  stream_.insert(stream_.end(), frame.begin(), frame.end());
}

std::optional<std::vector<std::uint8_t>> LoopbackTransport::read_frame() {
  if (stream_.size() < 4) return std::nullopt;
  std::uint32_t n = 0;
  for (std::size_t k = 0; k < 4; ++k) n |= static_cast<std::uint32_t>(stream_[k]) << (8 * k);
  if (stream_.size() < 4 + static_cast<std::size_t>(n)) return std::nullopt;
  std::vector<std::uint8_t> frame(stream_.begin() + 4, stream_.begin() + 4 + n);
  stream_.erase(stream_.begin(), stream_.begin() + 4 + n);
  return frame;
}

}  // namespace sicp::comms
