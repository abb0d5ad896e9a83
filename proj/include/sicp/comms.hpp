#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "sicp/geometry.hpp"

namespace sicp::comms {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

inline constexpr std::uint16_t kWireVersion = 1;
/// magic(4) version(2) sender(4) timestamp(8) pose(24) grid(40) shape(12) dtype(1)
inline constexpr std::size_t kHeaderBytes = 95;
inline constexpr std::size_t kCrcBytes = 4;

struct FeatureMessage {
  std::uint32_t sender_id = 0;
  std::uint64_t timestamp_us = 0;
  geom::Pose2D pose;
  geom::GridSpec grid;
  std::uint32_t channels = 0;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  DType dtype = DType::F64;
  std::vector<std::uint8_t> payload;
  std::uint32_t crc = 0;

  friend bool operator==(const FeatureMessage&, const FeatureMessage&) = default;
};

/// IEEE CRC-32.
std::uint32_t crc32(std::span<const std::uint8_t> bytes);

/// Little-endian wire image of a feature map. The layout depends only on the
/// sender's own map and pose, never on who receives it.
std::vector<std::uint8_t> encode_message(const geom::BEVFeatureMap& f, std::uint32_t sender_id,
                                         std::uint64_t timestamp_us, DType dtype = DType::F64);

/// Throws MalformedMessage (bad magic, version, dtype or trailing bytes),
/// Truncated (too short for the declared layout) or CorruptPayload (CRC mismatch).
FeatureMessage decode_message(std::span<const std::uint8_t> bytes);

/// Rebuilds the sender's feature map (untracked tensor) from a decoded message.
geom::BEVFeatureMap to_feature_map(const FeatureMessage& msg);

struct ChannelModel {
  double drop_prob = 0.0;
  double base_latency_ms = 5.0;
  double jitter_ms = 0.0;
  std::uint64_t seed = 0;
};

struct Delivery {
  std::vector<std::uint8_t> bytes;
  std::uint32_t sender_id = 0;
  std::uint64_t send_time_us = 0;
  std::uint64_t arrival_us = 0;
};

struct TraceRecord {
  std::uint64_t seq = 0;
  std::uint32_t sender_id = 0;
  std::uint64_t send_time_us = 0;
  bool dropped = false;
  std::uint64_t arrival_us = 0;
  bool delivered = false;

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

/// Seeded event simulation of a lossy broadcast medium on one logical clock.
/// Drop and jitter are drawn at send time, so the outcome depends only on the
/// seed and the send sequence.
class LossyChannel {
 public:
  explicit LossyChannel(ChannelModel model);

  void send(std::vector<std::uint8_t> bytes, std::uint32_t sender_id, std::uint64_t send_time_us);
  /// Releases every surviving message with arrival <= now, ordered by
  /// arrival time, then sender id, then send order.
  std::vector<Delivery> step(std::uint64_t now_us);

  std::size_t in_flight() const { return pending_.size(); }
  const std::vector<TraceRecord>& trace() const { return trace_; }
  const ChannelModel& model() const { return model_; }

 private:
  struct Pending {
    Delivery delivery;
    std::uint64_t seq;
  };

  ChannelModel model_;
  std::mt19937_64 rng_;
  std::uint64_t next_seq_ = 0;
  std::vector<Pending> pending_;
  std::vector<TraceRecord> trace_;
};

struct Deadline {
  double budget_ms = 100.0;
};

/// First-come-first-serve partner choice for one frame: the earliest delivery
/// that decodes cleanly, arrived by frame time + deadline, and whose sender
/// is within `comm_range_m` of the ego. Empty means individual mode.
std::optional<FeatureMessage> select_partner_fcfs(const std::vector<Delivery>& delivered, Deadline deadline,
                                                  std::uint64_t ego_frame_time_us, const geom::Pose2D& ego_pose,
                                                  double comm_range_m);

/// Length-prefixed framing over an in-memory byte stream, for wiring the
/// codec end to end in integration tests.
class LoopbackTransport {
 public:
  void write_frame(std::span<const std::uint8_t> frame);
  std::optional<std::vector<std::uint8_t>> read_frame();
  std::size_t buffered_bytes() const { return stream_.size(); }

 private:
  std::deque<std::uint8_t> stream_;
};

}  // namespace sicp::comms
