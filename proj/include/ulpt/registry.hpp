#pragma once

// Prompt checkpoints and the multi-task registry.
//
// Binary checkpoint, version 1, all integers and floats little-endian:
//
//   offset  size  field
//   0       4     magic "ULPT"
//   4       2     version (u16) = 1
//   6       1     mode (u8, ulpt::Mode)
//   7       4     n (u32)
//   11      4     r (u32)
//   15      4     d (u32)
//   19      8     seed (u64) of the frozen random component
//   27      ...   Z   n*r f64   (n*d for vanilla_pt; absent for tune_p_frozen_z)
//                 P   r*d f64   (dpt_learnable_p and tune_p_frozen_z only)
//                 s   d   f64   (modes with scale)
//                 b   d   f64   (modes with shift)
//   end-4   4     CRC-32 (zlib polynomial) of every preceding byte
//
// Version 1 also fixes the generator that turns the seed back into the
// frozen matrix: xoshiro256** seeded by splitmix64, Marsaglia polar normals
// (ulpt::gaussian_matrix), entries N(0, 1/r), row-major. The projection is
// never stored.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ulpt/numerics.hpp"
#include "ulpt/reparam.hpp"

namespace ulpt {

inline constexpr std::array<std::uint8_t, 4> kCheckpointMagic{'U', 'L', 'P', 'T'};
inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointHeaderBytes = 27;
inline constexpr std::size_t kCheckpointTrailerBytes = 4;

struct PromptCheckpoint {
  Mode mode = Mode::ulpt;
  std::uint32_t n = 0, r = 0, d = 0;
  Seed seed{};
  Matrix z;  // empty when Z is frozen
  std::optional<Matrix> p;
  Vector s;  // empty without scale
  Vector b;  // empty without shift

  PromptConfig config() const { return PromptConfig{n, r, d, seed, mode}; }

  friend bool operator==(const PromptCheckpoint&, const PromptCheckpoint&) = default;
};

// Number of f64 values a checkpoint of this shape stores.
inline std::size_t stored_value_count(Mode mode, std::size_t n, std::size_t r, std::size_t d) {
  std::size_t count = 0;
  if (trains_z(mode)) count += n * (is_low_rank(mode) ? r : d);
  if (trains_projection(mode)) count += r * d;
  if (has_scale(mode)) count += d;
  if (has_shift(mode)) count += d;
  return count;
}

inline std::size_t checkpoint_file_size(Mode mode, std::size_t n, std::size_t r, std::size_t d) {
  return kCheckpointHeaderBytes + 8 * stored_value_count(mode, n, r, d) + kCheckpointTrailerBytes;
}

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large buffers.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, bytes.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

// Snapshot of the trainables (and the frozen seed) of a prompt state.
inline PromptCheckpoint make_checkpoint(const PromptState& st) {
  const PromptConfig& c = st.config;
  c.validate();
  auto u32 = [](std::size_t v) {
    if (v > 0xffffffffu) throw ConfigError("checkpoint: dimension exceeds u32");
    return static_cast<std::uint32_t>(v);
  };
  PromptCheckpoint ck;
  ck.mode = c.mode;
  ck.n = u32(c.n);
  ck.r = u32(c.r);
  ck.d = u32(c.d);
  ck.seed = c.mode == Mode::tune_p_frozen_z ? c.seed : (is_low_rank(c.mode) ? st.proj.seed : c.seed);
  if (trains_z(c.mode)) ck.z = st.params.z;
  if (trains_projection(c.mode)) ck.p = st.proj.p;
  if (has_scale(c.mode)) ck.s = st.params.s;
  if (has_shift(c.mode)) ck.b = st.params.b;
  return ck;
}

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void f64s(std::span<const double> vs) {
    for (double v : vs) f64(v);
  }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  void f64s(std::span<double> out) {
    for (double& v : out) v = f64();
  }

 private:
  std::uint64_t get(int n) {
    if (pos_ + static_cast<std::size_t>(n) > b_.size()) throw TruncatedError("checkpoint: unexpected end of data");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

inline void check_checkpoint_shapes(const PromptCheckpoint& ck) {
  const std::size_t zc = is_low_rank(ck.mode) ? ck.r : ck.d;
  auto fail = [](const char* what) { throw DimensionError(std::string("checkpoint: ") + what); };
  if (trains_z(ck.mode) != !ck.z.empty()) fail("Z presence does not match mode");
  if (trains_z(ck.mode) && (ck.z.rows() != ck.n || ck.z.cols() != zc)) fail("Z shape");
  if (trains_projection(ck.mode) != ck.p.has_value()) fail("P presence does not match mode");
  if (ck.p && (ck.p->rows() != ck.r || ck.p->cols() != ck.d)) fail("P shape");
  if (has_scale(ck.mode) ? ck.s.size() != ck.d : !ck.s.empty()) fail("s length");
  if (has_shift(ck.mode) ? ck.b.size() != ck.d : !ck.b.empty()) fail("b length");
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const PromptCheckpoint& ck) {
  ck.config().validate();
  detail::check_checkpoint_shapes(ck);
  detail::ByteWriter w;
  for (auto m : kCheckpointMagic) w.u8(m);
  w.u16(kCheckpointVersion);
  w.u8(static_cast<std::uint8_t>(ck.mode));
  w.u32(ck.n);
  w.u32(ck.r);
  w.u32(ck.d);
  w.u64(ck.seed.value);
  if (trains_z(ck.mode)) w.f64s(ck.z.data());
  if (ck.p) w.f64s(ck.p->data());
  if (has_scale(ck.mode)) w.f64s(ck.s);
  if (has_shift(ck.mode)) w.f64s(ck.b);
  const std::uint32_t crc = crc32_of(w.bytes());
  w.u32(crc);
  return std::move(w.bytes());
}

inline PromptCheckpoint deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kCheckpointMagic.size()) throw TruncatedError("checkpoint: shorter than magic");
  if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin()))
    throw BadMagicError("checkpoint: bad magic");
  if (bytes.size() < kCheckpointHeaderBytes + kCheckpointTrailerBytes)
    throw TruncatedError("checkpoint: shorter than header");
  detail::ByteReader rd(bytes.subspan(kCheckpointMagic.size()));
  const std::uint16_t version = rd.u16();
  if (version != kCheckpointVersion)
    throw VersionMismatchError("checkpoint: version " + std::to_string(version) + ", expected " +
                               std::to_string(kCheckpointVersion));
  PromptCheckpoint ck;
  try {
    ck.mode = mode_from_byte(rd.u8());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  ck.n = rd.u32();
  ck.r = rd.u32();
  ck.d = rd.u32();
  ck.seed = Seed{rd.u64()};
  try {
    ck.config().validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }

  const std::size_t expected = checkpoint_file_size(ck.mode, ck.n, ck.r, ck.d);
  if (bytes.size() < expected)
    throw TruncatedError("checkpoint: " + std::to_string(bytes.size()) + " bytes, expected " +
                         std::to_string(expected));
  if (bytes.size() > expected) throw FormatError("checkpoint: trailing bytes after CRC");
  const std::size_t body = expected - kCheckpointTrailerBytes;
  detail::ByteReader crc_reader(bytes.subspan(body));
  if (crc_reader.u32() != crc32_of(bytes.first(body))) throw CrcMismatchError("checkpoint: CRC mismatch");

  if (trains_z(ck.mode)) {
    ck.z = Matrix(ck.n, is_low_rank(ck.mode) ? ck.r : ck.d);
    rd.f64s(ck.z.data());
  }
  if (trains_projection(ck.mode)) {
    ck.p = Matrix(ck.r, ck.d);
    rd.f64s(ck.p->data());
  }
  if (has_scale(ck.mode)) {
    ck.s.resize(ck.d);
    rd.f64s(ck.s);
  }
  if (has_shift(ck.mode)) {
    ck.b.resize(ck.d);
    rd.f64s(ck.b);
  }
  return ck;
}

// Write to a sibling temp file, then rename over the target.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw FormatError("rename to " + path.string() + " failed: " + ec.message());
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void save(const PromptCheckpoint& ck, const std::filesystem::path& path) {
  write_file_atomic(path, serialize(ck));
}

inline PromptCheckpoint load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

// Trainables plus the projection regenerated from the stored seed.
inline PromptState reconstruct(const PromptCheckpoint& ck) {
  detail::check_checkpoint_shapes(ck);
  const PromptConfig cfg = ck.config();
  cfg.validate();
  PromptState st;
  st.config = cfg;
  st.params.s = has_scale(ck.mode) ? ck.s : Vector(ck.d, 1.0);
  st.params.b = has_shift(ck.mode) ? ck.b : Vector(ck.d, 0.0);
  switch (ck.mode) {
    case Mode::vanilla_pt:
      st.params.z = ck.z;
      break;
    case Mode::dpt_learnable_p:
      st.params.z = ck.z;
      st.proj = ProjectionMatrix{*ck.p, ck.seed, false};
      break;
    case Mode::tune_p_frozen_z:
      st.params.z = gaussian_matrix(ck.seed, ck.n, ck.r, 1.0 / static_cast<double>(ck.r));
      st.proj = ProjectionMatrix{*ck.p, Seed{}, false};
      break;
    default:
      st.params.z = ck.z;
      st.proj = build_projection(cfg);
      break;
  }
  return st;
}

// ---------------------------------------------------------------------------
// Multi-task registry
// ---------------------------------------------------------------------------

inline std::size_t checkpoint_param_count(const PromptCheckpoint& ck) {
  return param_count(ck.mode, ck.n, ck.r, ck.d);
}

struct TaskEntrySummary {
  std::string task_id;
  Mode mode{};
  std::size_t n = 0, r = 0, d = 0;
  std::size_t param_count = 0;
  std::size_t vanilla_param_count = 0;  // n * d
};

struct RegistryReport {
  std::size_t task_count = 0;
  std::size_t total_params = 0;
  std::size_t vanilla_total_params = 0;
  std::optional<double> savings_ratio;  // total / vanilla total; undefined when empty
  std::vector<TaskEntrySummary> tasks;
};

inline bool valid_task_id(std::string_view id) {
  if (id.empty() || id.size() > 128 || id == "." || id == "..") return false;
  for (char c : id)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) return false;
  return true;
}

class TaskRegistry {
 public:
  void add(const std::string& task_id, PromptCheckpoint ck) {
    if (!valid_task_id(task_id)) throw ConfigError("registry: invalid task id '" + task_id + "'");
    detail::check_checkpoint_shapes(ck);
    if (tasks_.contains(task_id)) throw ConfigError("registry: duplicate task id '" + task_id + "'");
    total_ += checkpoint_param_count(ck);
    vanilla_total_ += static_cast<std::size_t>(ck.n) * ck.d;
    tasks_.emplace(task_id, std::move(ck));
  }

  void remove(const std::string& task_id) {
    auto it = tasks_.find(task_id);
    if (it == tasks_.end()) throw ConfigError("registry: unknown task id '" + task_id + "'");
    total_ -= checkpoint_param_count(it->second);
    vanilla_total_ -= static_cast<std::size_t>(it->second.n) * it->second.d;
    tasks_.erase(it);
  }

  const PromptCheckpoint& get(const std::string& task_id) const {
    auto it = tasks_.find(task_id);
    if (it == tasks_.end()) throw ConfigError("registry: unknown task id '" + task_id + "'");
    return it->second;
  }

  bool contains(const std::string& task_id) const { return tasks_.contains(task_id); }
  std::size_t size() const { return tasks_.size(); }
  std::size_t total_params() const { return total_; }
  std::size_t vanilla_total_params() const { return vanilla_total_; }
  const std::map<std::string, PromptCheckpoint>& tasks() const { return tasks_; }

  // One <task_id>.ulpt per task plus manifest.json, each written atomically.
  void save_dir(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json manifest;
    manifest["format_version"] = kCheckpointVersion;
    manifest["tasks"] = nlohmann::ordered_json::array();
    for (const auto& [id, ck] : tasks_) {
      const auto bytes = serialize(ck);
      const std::string file = id + ".ulpt";
      write_file_atomic(dir / file, bytes);
      detail::ByteReader crc_reader(std::span<const std::uint8_t>(bytes).last(4));
      nlohmann::ordered_json e;
      e["task_id"] = id;
      e["mode"] = std::string(to_string(ck.mode));
      e["n"] = ck.n;
      e["r"] = ck.r;
      e["d"] = ck.d;
      e["seed"] = ck.seed.value;
      e["crc"] = crc_reader.u32();
      e["param_count"] = checkpoint_param_count(ck);
      e["file"] = file;
      manifest["tasks"].push_back(std::move(e));
    }
    const std::string text = manifest.dump(2) + "\n";
    write_file_atomic(dir / "manifest.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

  static TaskRegistry load_dir(const std::filesystem::path& dir) {
    const auto raw = read_file(dir / "manifest.json");
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(raw.begin(), raw.end());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("manifest: ") + e.what());
    }
    TaskRegistry reg;
    try {
      if (manifest.at("format_version").get<int>() != kCheckpointVersion)
        throw VersionMismatchError("manifest: unsupported format_version");
      for (const auto& e : manifest.at("tasks")) {
        const auto id = e.at("task_id").get<std::string>();
        const auto bytes = read_file(dir / e.at("file").get<std::string>());
        PromptCheckpoint ck = deserialize(bytes);
        detail::ByteReader crc_reader(std::span<const std::uint8_t>(bytes).last(4));
        if (crc_reader.u32() != e.at("crc").get<std::uint32_t>())
          throw CrcMismatchError("manifest: CRC of '" + id + "' does not match its file");
        if (std::string(to_string(ck.mode)) != e.at("mode").get<std::string>() || ck.n != e.at("n").get<std::uint32_t>() ||
            ck.r != e.at("r").get<std::uint32_t>() || ck.d != e.at("d").get<std::uint32_t>() ||
            ck.seed.value != e.at("seed").get<std::uint64_t>())
          throw FormatError("manifest: entry '" + id + "' disagrees with its checkpoint");
        reg.add(id, std::move(ck));
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("manifest: ") + e.what());
    }
    return reg;
  }

 private:
  std::map<std::string, PromptCheckpoint> tasks_;
  std::size_t total_ = 0;
  std::size_t vanilla_total_ = 0;
};

inline RegistryReport registry_report(const TaskRegistry& reg) {
  RegistryReport rep;
  rep.task_count = reg.size();
  rep.total_params = reg.total_params();
  rep.vanilla_total_params = reg.vanilla_total_params();
  if (rep.vanilla_total_params > 0)
    rep.savings_ratio = static_cast<double>(rep.total_params) / static_cast<double>(rep.vanilla_total_params);
  for (const auto& [id, ck] : reg.tasks())
    rep.tasks.push_back({id, ck.mode, ck.n, ck.r, ck.d, checkpoint_param_count(ck), std::size_t{ck.n} * ck.d});
  return rep;
}

}  // namespace ulpt
