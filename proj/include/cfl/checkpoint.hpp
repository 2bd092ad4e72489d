#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfl/config.hpp"
#include "cfl/pipeline.hpp"

namespace cfl {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'C', 'F', 'L', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  TrainState state;
  int stage = 0;  // last completed stage, 0 when mid-stage-1
};

namespace detail {

// Little-endian host layout; the file records the version so a change of
// layout is detected rather than misread.
class ByteWriter {
 public:
  template <class T>
  void put(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) { buf_.append(static_cast<const char*>(data), n); }
  void put_string(const std::string& s) {
    put<std::uint64_t>(s.size());
    buf_ += s;
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}
  template <class T>
  T get() {
    T v;
    get_bytes(&v, sizeof(T));
    return v;
  }
  void get_bytes(void* out, std::size_t n) {
    if (n > data_.size() - pos_) throw CheckpointError("checkpoint is truncated");
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  std::string get_string() {
    const auto n = get<std::uint64_t>();
    if (n > data_.size() - pos_) throw CheckpointError("checkpoint is truncated");
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline void put_params(ByteWriter& w, const DetectorParams& p) {
  for (int i = 0; i < kNumParams; ++i) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p[i].rows()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p[i].cols()));
    w.put_bytes(p[i].data(), sizeof(float) * static_cast<std::size_t>(p[i].size()));
  }
}

inline DetectorParams get_params(ByteReader& r, const DetectorParams& expected_shape) {
  DetectorParams p;
  for (int i = 0; i < kNumParams; ++i) {
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    if (rows != expected_shape[i].rows() || cols != expected_shape[i].cols())
      throw CheckpointError("checkpoint tensor '" + std::string(kParamNames[i]) + "' does not match the configured detector");
    p[i].resize(rows, cols);
    r.get_bytes(p[i].data(), sizeof(float) * static_cast<std::size_t>(p[i].size()));
  }
  return p;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string(to_text(ck.config));
  w.put<std::int32_t>(ck.stage);
  w.put<std::int64_t>(ck.state.iteration);
  w.put<std::uint64_t>(ck.state.rng_state);
  detail::put_params(w, ck.state.student);
  detail::put_params(w, ck.state.teacher);
  detail::put_params(w, ck.state.momentum);
  const auto& pool = ck.state.pool;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(pool.num_classes()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(pool.config().dim));
  for (int c = 0; c < pool.num_classes(); ++c) {
    const auto& entries = pool.entries(c);
    w.put<std::uint64_t>(entries.size());
    for (const auto& e : entries) {
      w.put<double>(e.score);
      w.put_bytes(e.vector.data(), sizeof(double) * static_cast<std::size_t>(e.vector.size()));
    }
  }
  std::string out = w.bytes();
  const std::uint64_t sum = detail::fnv1a(out);
  out.append(reinterpret_cast<const char*>(&sum), sizeof sum);
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < sizeof kCheckpointMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw CheckpointError("not a checkpoint file (bad magic)");
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + sizeof kCheckpointMagic, sizeof version);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version mismatch: file has version " + std::to_string(version) +
                          ", this build reads version " + std::to_string(kCheckpointVersion));
  const std::string_view body = bytes.substr(0, bytes.size() - sizeof(std::uint64_t));
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body.size(), sizeof stored);
  if (detail::fnv1a(body) != stored) throw CheckpointError("checkpoint checksum mismatch (file corrupted)");

  detail::ByteReader r(body.substr(sizeof kCheckpointMagic + sizeof version));
  Checkpoint ck;
  ck.config = parse_config(r.get_string());
  ck.config.validate();
  ck.stage = r.get<std::int32_t>();
  ck.state.iteration = r.get<std::int64_t>();
  ck.state.rng_state = r.get<std::uint64_t>();

  const TrainConfig tc = ck.config.train.normalized();
  const DetectorParams shape = init_params(tc.detector, 0);
  ck.state.student = detail::get_params(r, shape);
  ck.state.teacher = detail::get_params(r, shape);
  ck.state.momentum = detail::get_params(r, shape);

  ck.state.pool = EmbeddingPool(tc.detector.label_space(), tc.pool);
  const auto classes = r.get<std::uint32_t>();
  const auto dim = r.get<std::uint32_t>();
  if (static_cast<int>(classes) != ck.state.pool.num_classes() || static_cast<int>(dim) != tc.pool.dim)
    throw CheckpointError("checkpoint pool layout does not match its config");
  for (int c = 0; c < static_cast<int>(classes); ++c) {
    const auto n = r.get<std::uint64_t>();
    if (n > static_cast<std::uint64_t>(tc.pool.capacity)) throw CheckpointError("checkpoint pool exceeds capacity");
    std::vector<PooledEmbedding> entries(n);
    for (auto& e : entries) {
      e.class_id = c;
      e.score = r.get<double>();
      e.vector.resize(dim);
      r.get_bytes(e.vector.data(), sizeof(double) * dim);
    }
    ck.state.pool.restore(c, std::move(entries));
  }
  if (!r.done()) throw CheckpointError("checkpoint has trailing bytes");
  return ck;
}

/// Writes to a temporary sibling and renames it into place, so readers never
/// observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw std::runtime_error("write failed for '" + tmp.string() + "'");
    }
  }
  fs::rename(tmp, path);
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize_checkpoint(ss.str());
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace cfl
