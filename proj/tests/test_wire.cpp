#include "qlio/session.hpp"
#include "qlio/transport.hpp"
#include "qlio/wire.hpp"

#include "qlio/manifold.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <thread>

namespace qlio::wire {
namespace {

using qlio::testing::random_codebook;
using qlio::testing::random_groups;
using qlio::testing::random_vec;

Frame random_frame(std::mt19937_64& rng, std::size_t max_payload = 300) {
  std::uniform_int_distribution<int> type(0, 5);
  std::uniform_int_distribution<std::size_t> len(0, max_payload);
  std::uniform_int_distribution<int> byte(0, 255);
  Frame f;
  f.type = static_cast<FrameType>(type(rng));
  f.timestamp = rng();
  f.payload.resize(len(rng));
  for (auto& b : f.payload) b = static_cast<std::uint8_t>(byte(rng));
  return f;
}

// Bitwise IEEE CRC-32.
std::uint32_t reference_crc(std::span<const std::uint8_t> bytes) {
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::uint8_t byte : bytes) {
    crc ^= byte;
    for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
  }
  return ~crc;
}

// Re-signs a tampered frame so that only the targeted check can fire.
void reseal(Bytes& bytes) {
  const std::uint32_t crc = reference_crc(std::span(bytes).first(bytes.size() - 4));
  for (int i = 0; i < 4; ++i) bytes[bytes.size() - 4 + i] = static_cast<std::uint8_t>(crc >> (8 * i));
}

TEST(Frame, EmptyPayloadIsTwentyBytes) {
  const Bytes b = encode_frame({FrameType::kPoseRequest, 42, {}});
  ASSERT_EQ(b.size(), 20u);
  EXPECT_EQ(b[0], 0x51);
  EXPECT_EQ(b[1], 0x4C);
  EXPECT_EQ(b[2], 1);
  EXPECT_EQ(b[3], 0x01);
  EXPECT_EQ(b[4], 42);
  for (int i = 5; i < 16; ++i) EXPECT_EQ(b[i], 0);
}

TEST(Frame, LittleEndianFieldsAndKnownCrc) {
  const Bytes b = encode_frame({FrameType::kStateUpdate, 0x0102030405060708ULL, {0xAA, 0xBB}});
  const Bytes expect_ts{0x08, 0x07, 0x06, 0x05, 0x04, 0x03, 0x02, 0x01};
  EXPECT_TRUE(std::equal(expect_ts.begin(), expect_ts.end(), b.begin() + 4));
  EXPECT_EQ(b[12], 2);
  EXPECT_EQ(b[13], 0);
  std::uint32_t crc = 0;
  for (int i = 0; i < 4; ++i) crc |= std::uint32_t{b[18 + i]} << (8 * i);
  EXPECT_EQ(crc, reference_crc(std::span(b).first(18)));
  const Bytes check{'1', '2', '3', '4', '5', '6', '7', '8', '9'};
  EXPECT_EQ(reference_crc(check), 0xCBF43926u);
}

TEST(Frame, HeaderChecksBehindValidCrc) {
  const Bytes good = encode_frame({FrameType::kPoseRequest, 9, Bytes(16, 3)});
  Bytes magic = good;
  magic[0] = 0x52;
  reseal(magic);
  EXPECT_EQ(decode_frame(magic).error, DecodeError::kBadMagic);
  Bytes version = good;
  version[2] = 2;
  reseal(version);
  EXPECT_EQ(decode_frame(version).error, DecodeError::kBadVersion);
  Bytes type = good;
  type[3] = 0x06;
  reseal(type);
  EXPECT_EQ(decode_frame(type).error, DecodeError::kUnknownType);
  Bytes length = good;
  length[12] = 15;
  reseal(length);
  EXPECT_EQ(decode_frame(length).error, DecodeError::kLengthMismatch);
}

TEST(Frame, RandomRoundTrip) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 2000; ++i) {
    const Frame f = random_frame(rng);
    const DecodeResult r = decode_frame(encode_frame(f));
    ASSERT_TRUE(r.ok());
    EXPECT_EQ(r.frame, f);
  }
}

TEST(Frame, EverySingleBitFlipFailsCrc) {
  Frame f{FrameType::kObsGroups, 123456789, Bytes(44)};
  for (std::size_t i = 0; i < f.payload.size(); ++i) f.payload[i] = static_cast<std::uint8_t>(i * 37);
  const Bytes good = encode_frame(f);
  ASSERT_EQ(good.size(), 64u);
  for (std::size_t bit = 0; bit < good.size() * 8; ++bit) {
    Bytes bad = good;
    bad[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
    EXPECT_EQ(decode_frame(bad).error, DecodeError::kBadCrc) << "bit " << bit;
  }
}

TEST(Frame, TruncationIsRetriable) {
  const Bytes good = encode_frame({FrameType::kPoseRequest, 1, Bytes(16, 7)});
  EXPECT_EQ(decode_frame(std::span(good).first(10)).error, DecodeError::kTruncated);
  FrameAssembler a;
  a.feed(std::span(good).first(30));
  EXPECT_FALSE(a.next().has_value());
  a.feed(std::span(good).subspan(30));
  const auto f = a.next();
  ASSERT_TRUE(f.has_value());
  EXPECT_EQ(f->payload, Bytes(16, 7));
  EXPECT_EQ(a.buffered(), 0u);
}

TEST(Frame, OversizedPayloadRejected) {
  Frame f{FrameType::kObsGroups, 0, Bytes(kMaxPayload)};
  EXPECT_THROW(encode_frame(f), InvalidArgument);
  f.payload.resize(kMaxPayload - 1);
  EXPECT_EQ(encode_frame(f).size(), kMaxPayload - 1 + kFrameOverhead);
}

TEST(Assembler, SplitsStreamFedByteByByte) {
  std::mt19937_64 rng(2);
  std::vector<Frame> frames;
  Bytes stream;
  for (int i = 0; i < 50; ++i) {
    frames.push_back(random_frame(rng));
    const Bytes b = encode_frame(frames.back());
    stream.insert(stream.end(), b.begin(), b.end());
  }
  FrameAssembler a;
  std::vector<Frame> out;
  for (std::uint8_t byte : stream) {
    a.feed(std::span(&byte, 1));
    while (auto f = a.next()) out.push_back(*f);
  }
  EXPECT_EQ(out, frames);
}

TEST(Assembler, CorruptFrameThrows) {
  Bytes b = encode_frame({FrameType::kStateUpdate, 5, Bytes(8, 1)});
  b[20] ^= 0x10;
  FrameAssembler a;
  a.feed(b);
  EXPECT_THROW(a.next(), ProtocolError);
  FrameAssembler junk;
  const Bytes garbage{0x00, 0x01, 0x02};
  junk.feed(garbage);
  EXPECT_THROW(junk.next(), ProtocolError);
}

TEST(Bits, WriterReaderMsbFirst) {
  BitWriter w;
  w.write(0b101, 3);
  w.write(0b1, 1);
  w.write(0xF0F, 12);
  EXPECT_EQ(w.finish(), 0);
  ASSERT_EQ(w.bytes().size(), 2u);
  EXPECT_EQ(w.bytes()[0], 0b10110000 | 0b1111);
  BitReader r(w.bytes());
  EXPECT_EQ(r.read(3), 0b101u);
  EXPECT_EQ(r.read(1), 1u);
  EXPECT_EQ(r.read(12), 0xF0Fu);
  EXPECT_THROW(r.read(1), ProtocolError);
  BitWriter over;
  EXPECT_THROW(over.write(8, 3), InvalidArgument);
}

Codebook small_book() {
  Codebook cb;
  cb.l_p = 3;
  cb.l_n = 3;
  cb.l_z = 2;
  return cb;
}

TEST(Groups, OneMemberPacksToFiveBitstreamBytes) {
  const Codebook cb = small_book();
  const ObservationGroupSet g{{0x1AB, {{2, {1, 5, 7}}}}};
  const PackedGroups p = pack_groups(g, cb);
  EXPECT_EQ(p.bitstream_bits, 36u);
  EXPECT_EQ(p.pad_bits, 4);
  EXPECT_EQ(p.payload.size(), 7u);
  EXPECT_EQ(p.payload[0], 1);
  EXPECT_EQ(p.payload[1], 0);
  EXPECT_EQ(unpack_groups(p.payload, cb), g);
}

TEST(Groups, EmptySetIsTwoBytes) {
  const PackedGroups p = pack_groups({}, small_book());
  EXPECT_EQ(p.payload, (Bytes{0, 0}));
  EXPECT_TRUE(unpack_groups(p.payload, small_book()).empty());
}

TEST(Groups, RandomSetsRoundTripBitExactly) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const Codebook cb = random_codebook(rng);
    const ObservationGroupSet g = random_groups(rng, cb);
    const PackedGroups p = pack_groups(g, cb);
    EXPECT_EQ(p.bitstream_bits, group_bits(g, cb));
    EXPECT_LE(p.pad_bits, 7);
    EXPECT_EQ(p.payload.size() * 8, 16 + p.bitstream_bits + static_cast<std::size_t>(p.pad_bits));
    const ObservationGroupSet back = unpack_groups(p.payload, cb);
    ASSERT_EQ(back, g);
    EXPECT_EQ(pack_groups(back, cb).payload, p.payload);
  }
}

TEST(Groups, AmortizedBitsPerMeasurement) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 200; ++i) {
    const Codebook cb = random_codebook(rng);
    const ObservationGroupSet g = random_groups(rng, cb);
    if (g.empty()) continue;
    const double members = static_cast<double>(member_count(g));
    const double per_group = members / static_cast<double>(g.size());
    const double formula = cb.l_z + 3.0 * cb.l_p + (3.0 * cb.l_n + 16.0) / per_group;
    EXPECT_NEAR(static_cast<double>(pack_groups(g, cb).bitstream_bits) / members, formula, 1e-12);
  }
}

TEST(Groups, MalformedPayloadsRejected) {
  const Codebook cb = small_book();
  EXPECT_THROW(unpack_groups(Bytes{1}, cb), ProtocolError);
  EXPECT_THROW(unpack_groups(Bytes{1, 0}, cb), ProtocolError);
  PackedGroups p = pack_groups({{3, {{1, {1, 2, 3}}}}}, cb);
  p.payload.push_back(0);
  EXPECT_THROW(unpack_groups(p.payload, cb), ProtocolError);
  ObservationGroupSet overflow{{3, {{4, {1, 2, 3}}}}};  // z index needs 3 bits
  EXPECT_THROW(pack_groups(overflow, cb), InvalidArgument);
}

TEST(Payloads, ConfigRoundTripAndLayout) {
  ConfigPayload c;
  c.codebook = small_book();
  c.codebook.r_max = 150.0;
  c.ds_0 = 0.3;
  c.alpha = 0.02;
  c.sigma = 0.015;
  c.imu_from_lidar = {so3_exp(Vec3(0.1, -0.2, 0.3)), Vec3(0.05, 0.0, 0.1)};
  const Bytes b = encode_config(c);
  EXPECT_EQ(b.size(), 3u + 5 * 8 + 12 * 8);
  EXPECT_EQ(b[0], 3);
  EXPECT_EQ(decode_config(b), c);
  EXPECT_THROW(decode_config(std::span(b).first(10)), ProtocolError);
  Bytes bad = b;
  bad[0] = 0;
  EXPECT_THROW(decode_config(bad), ProtocolError);
}

TEST(Payloads, PoseFramesRoundTrip) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    const PoseRequest req{static_cast<TimestampUs>(i * 100000), static_cast<TimestampUs>(i * 100000 + 99999)};
    const PoseRequest rb = decode_pose_request(encode_pose_request(req));
    EXPECT_EQ(rb.t_prev, req.t_prev);
    EXPECT_EQ(rb.t_curr, req.t_curr);

    const Pose a{so3_exp(random_vec(rng, 3.0)), random_vec(rng, 50.0)};
    const Pose b{so3_exp(random_vec(rng, 3.0)), random_vec(rng, 50.0)};
    const Bytes rb2 = encode_pose_response({a, b});
    EXPECT_EQ(rb2.size(), 2u * 7 * 8);
    const PoseResponse resp = decode_pose_response(rb2);
    EXPECT_LT((resp.delta.rotation - a.rotation).norm(), 1e-14);
    EXPECT_EQ(resp.delta.translation, a.translation);
    EXPECT_LT((resp.prev.rotation - b.rotation).norm(), 1e-14);
    const StateUpdate su = decode_state_update(encode_state_update({b}));
    EXPECT_LT((su.posterior.rotation - b.rotation).norm(), 1e-14);
    EXPECT_EQ(su.posterior.translation, b.translation);
  }
}

TEST(Payloads, FloatObservationsAre28Bytes) {
  std::vector<FloatObservation> obs{{{1.f, 2.f, 3.f}, {0.f, 0.f, 1.f}, 0.01f},
                                    {{-4.f, 5.f, 6.f}, {1.f, 0.f, 0.f}, 0.02f}};
  const Bytes b = encode_float_observations(obs);
  EXPECT_EQ(b.size(), 4u + 2 * kFloatObservationBytes);
  EXPECT_EQ(decode_float_observations(b), obs);
  EXPECT_THROW(decode_float_observations(std::span(b).first(30)), ProtocolError);
}

Frame scan_frame(FrameType t, std::uint64_t ts) { return {t, ts, {}}; }

TEST(Session, StrictOrderPerScan) {
  SessionOrder o;
  EXPECT_THROW(o.accept(scan_frame(FrameType::kPoseRequest, 1)), ProtocolError);
  o.accept(scan_frame(FrameType::kConfig, 0));
  EXPECT_TRUE(o.idle());
  for (std::uint64_t t : {100, 200}) {
    o.accept(scan_frame(FrameType::kPoseRequest, t));
    EXPECT_FALSE(o.idle());
    o.accept(scan_frame(FrameType::kPoseResponse, t));
    o.accept(scan_frame(t == 100 ? FrameType::kObsGroups : FrameType::kObsFloat, t));
    o.accept(scan_frame(FrameType::kStateUpdate, t));
  }
  EXPECT_EQ(o.scans_completed(), 2u);
  EXPECT_THROW(o.accept(scan_frame(FrameType::kConfig, 0)), ProtocolError);
}

TEST(Session, ViolationsAbort) {
  const auto started = [] {
    SessionOrder o;
    o.accept(scan_frame(FrameType::kConfig, 0));
    o.accept(scan_frame(FrameType::kPoseRequest, 100));
    return o;
  };
  {
    SessionOrder o = started();
    EXPECT_THROW(o.accept(scan_frame(FrameType::kObsGroups, 100)), ProtocolError);
  }
  {
    SessionOrder o = started();
    EXPECT_THROW(o.accept(scan_frame(FrameType::kPoseRequest, 200)), ProtocolError);
  }
  {
    SessionOrder o = started();
    EXPECT_THROW(o.accept(scan_frame(FrameType::kPoseResponse, 101)), ProtocolError);
  }
  {
    SessionOrder o = started();
    o.accept(scan_frame(FrameType::kPoseResponse, 100));
    o.accept(scan_frame(FrameType::kObsGroups, 100));
    o.accept(scan_frame(FrameType::kStateUpdate, 100));
    EXPECT_THROW(o.accept(scan_frame(FrameType::kPoseRequest, 100)), ProtocolError);
  }
}

Bytes transcript(int scans) {
  Bytes out;
  const auto put = [&](const Frame& f) {
    const Bytes b = encode_frame(f);
    out.insert(out.end(), b.begin(), b.end());
  };
  put({FrameType::kConfig, 0, encode_config({})});
  for (int k = 1; k <= scans; ++k) {
    const auto t = static_cast<std::uint64_t>(k) * 100000;
    put({FrameType::kPoseRequest, t, encode_pose_request({static_cast<TimestampUs>(t - 100000), static_cast<TimestampUs>(t)})});
    put({FrameType::kPoseResponse, t, encode_pose_response({})});
    put({FrameType::kObsGroups, t, pack_groups({{1, {{1, {2, 3, 4}}}}}, Codebook{}).payload});
    put({FrameType::kStateUpdate, t, encode_state_update({})});
  }
  return out;
}

TEST(Session, TranscriptVerification) {
  const Bytes t = transcript(100);
  const TranscriptSummary s = verify_transcript(t);
  EXPECT_EQ(s.config_frames, 1u);
  EXPECT_EQ(s.scan_frames, 400u);
  EXPECT_EQ(s.scans, 100u);
  EXPECT_THROW(verify_transcript(std::span(t).first(t.size() - 3)), ProtocolError);
  // Cut after a POSE_REQ: the scan is left open.
  const Bytes one = transcript(1);
  const std::size_t cut = encode_frame({FrameType::kConfig, 0, encode_config({})}).size() +
                          encode_frame({FrameType::kPoseRequest, 0, encode_pose_request({})}).size();
  EXPECT_THROW(verify_transcript(std::span(one).first(cut)), ProtocolError);
}

TEST(Session, EveryBitFlipInTranscriptIsCaught) {
  const Bytes good = transcript(3);
  for (std::size_t bit = 0; bit < good.size() * 8; ++bit) {
    Bytes bad = good;
    bad[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
    EXPECT_THROW(verify_transcript(bad), ProtocolError) << "bit " << bit;
  }
}

TEST(Transport, InprocCarriesFramesBothWays) {
  transport::ChannelPair pair = transport::make_inproc_pair();
  transport::Recorder rec;
  transport::Endpoint a(*pair.first, &rec);
  transport::Endpoint b(*pair.second, &rec);
  std::mt19937_64 rng(6);
  std::vector<Frame> sent;
  for (int i = 0; i < 20; ++i) sent.push_back(random_frame(rng, 5000));
  std::thread writer([&] {
    for (const Frame& f : sent) a.send(f);
    a.close();
  });
  std::vector<Frame> got;
  while (auto f = b.receive()) got.push_back(*f);
  writer.join();
  EXPECT_EQ(got, sent);
  b.send(sent.front());
  EXPECT_EQ(a.receive(), sent.front());

  // Capture replay: the recorded bytes decode to the same sequence.
  FrameAssembler replay;
  replay.feed(rec.stream());
  std::vector<Frame> replayed;
  while (auto f = replay.next()) replayed.push_back(*f);
  ASSERT_EQ(replayed.size(), 21u);
  EXPECT_TRUE(std::equal(sent.begin(), sent.end(), replayed.begin()));
  EXPECT_EQ(rec.frames().size(), 21u);
}

TEST(Transport, SocketCarriesFramesAndReportsCleanClose) {
  transport::SocketListener listener(0);
  ASSERT_NE(listener.port(), 0);
  std::unique_ptr<transport::Channel> client = transport::connect_socket(listener.port());
  std::unique_ptr<transport::Channel> server = listener.accept();
  transport::Endpoint a(*client);
  transport::Endpoint b(*server);
  std::mt19937_64 rng(7);
  std::vector<Frame> sent;
  for (int i = 0; i < 20; ++i) sent.push_back(random_frame(rng, 70000));
  std::thread writer([&] {
    for (const Frame& f : sent) a.send(f);
    a.close();
  });
  std::vector<Frame> got;
  while (auto f = b.receive()) got.push_back(*f);
  writer.join();
  EXPECT_EQ(got, sent);
}

TEST(Transport, StreamCutMidFrameIsTransportError) {
  transport::ChannelPair pair = transport::make_inproc_pair();
  const Bytes b = encode_frame({FrameType::kConfig, 0, Bytes(10, 1)});
  pair.first->send(std::span(b).first(12));
  pair.first->close();
  transport::Endpoint reader(*pair.second);
  EXPECT_THROW(reader.receive(), TransportError);
}

}  // namespace
}  // namespace qlio::wire
