#pragma once

#include <array>
#include <bit>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "chips/curvature.hpp"
#include "chips/endpoint.hpp"
#include "chips/errors.hpp"
#include "chips/scoring.hpp"

namespace chips {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

namespace io {

inline constexpr std::uint32_t kShardVersion = 1;
inline constexpr std::uint32_t kParamsVersion = 1;
inline constexpr std::uint32_t kTrajectoryVersion = 1;
inline constexpr std::uint32_t kScoresVersion = 1;
inline constexpr std::uint32_t kSurrogateVersion = 1;
inline constexpr std::uint32_t kShardFlagTags = 1u;

/// Little-endian writer over an output stream.
class ByteWriter {
 public:
  explicit ByteWriter(std::ostream& os) : os_(os) {}

  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<char, sizeof(T)> buf;
    std::memcpy(buf.data(), &v, sizeof(T));
    os_.write(buf.data(), sizeof(T));
  }
  void bytes(std::string_view s) { os_.write(s.data(), static_cast<std::streamsize>(s.size())); }
  void str(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  void check(const std::string& what) const {
    if (!os_) throw IoError("write failed: " + what);
  }

 private:
  std::ostream& os_;
};

/// Little-endian reader that tracks the byte offset and reports truncation as CorruptShard.
class ByteReader {
 public:
  explicit ByteReader(std::istream& is, std::uint64_t offset = 0) : is_(is), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

  void read(char* dst, std::size_t n, const char* what) {
    is_.read(dst, static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(is_.gcount());
    if (got != n) throw CorruptShard(offset_ + got, std::string("truncated ") + what);
    offset_ += n;
  }

  template <typename T>
  T get(const char* what) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<char, sizeof(T)> buf;
    read(buf.data(), sizeof(T), what);
    T v;
    std::memcpy(&v, buf.data(), sizeof(T));
    return v;
  }

  std::string str(const char* what, std::uint32_t max_len = 1u << 20) {
    const auto n = get<std::uint32_t>(what);
    if (n > max_len) throw CorruptShard(offset_ - 4, std::string("implausible length for ") + what);
    std::string s(n, '\0');
    if (n) read(s.data(), n, what);
    return s;
  }

  void magic(std::string_view expected, const char* what) {
    std::array<char, 4> m{};
    is_.read(m.data(), 4);
    if (is_.gcount() != 4 || std::string_view(m.data(), 4) != expected)
      throw FormatError(std::string("bad magic for ") + what + ", expected " + std::string(expected));
    offset_ += 4;
  }

  void version(std::uint32_t expected, const char* what) {
    const auto v = get<std::uint32_t>(what);
    if (v != expected)
      throw FormatError(std::string("unsupported ") + what + " version " + std::to_string(v));
  }

  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

  /// Skips n bytes of a stream of known total size.
  void skip(std::uint64_t n, std::uint64_t total_size, const char* what) {
    if (offset_ + n > total_size) throw CorruptShard(total_size, std::string("truncated ") + what);
    is_.seekg(static_cast<std::streamoff>(n), std::ios::cur);
    offset_ += n;
  }

 private:
  std::istream& is_;
  std::uint64_t offset_;
};

inline std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open " + p.string());
  return f;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot create " + p.string());
  return f;
}

}  // namespace io

// ---------------------------------------------------------------------------
// CHFS feature shards
//
// header : "CHFS" | version u32 | count u64 | d_v u32 | d_t u32 | flags u32     (28 bytes)
// record : id u64 | h f32[d_v] | t f32[d_t] | [tag_count u32 | (len u32, utf8)*]
// ---------------------------------------------------------------------------

struct FeatureRecord {
  std::uint64_t id = 0;
  std::vector<float> h;
  std::vector<float> t;
  std::vector<std::string> tags;

  friend bool operator==(const FeatureRecord&, const FeatureRecord&) = default;
};

struct ShardHeader {
  std::uint64_t count = 0;
  std::uint32_t d_v = 0;
  std::uint32_t d_t = 0;
  std::uint32_t flags = 0;

  bool has_tags() const noexcept { return (flags & io::kShardFlagTags) != 0; }
  static constexpr std::uint64_t kSize = 28;
};

class ShardWriter {
 public:
  ShardWriter(const std::filesystem::path& path, std::uint32_t d_v, std::uint32_t d_t, bool has_tags)
      : out_(io::open_out(path)), path_(path) {
    header_.d_v = d_v;
    header_.d_t = d_t;
    header_.flags = has_tags ? io::kShardFlagTags : 0u;
    write_header();
  }
  ShardWriter(const ShardWriter&) = delete;
  ShardWriter& operator=(const ShardWriter&) = delete;
  ~ShardWriter() {
    try {
      close();
    } catch (...) {
    }
  }

  void write(const FeatureRecord& r) {
    if (r.h.size() != header_.d_v || r.t.size() != header_.d_t)
      throw ShapeError("record " + std::to_string(r.id) + " does not match shard dims");
    for (float v : r.h)
      if (!std::isfinite(v)) throw FormatError("non-finite image feature in record " + std::to_string(r.id));
    for (float v : r.t)
      if (!std::isfinite(v)) throw FormatError("non-finite text feature in record " + std::to_string(r.id));
    if (!header_.has_tags() && !r.tags.empty())
      throw FormatError("tags given for a shard without the tag flag");
    io::ByteWriter w(out_);
    w.put<std::uint64_t>(r.id);
    for (float v : r.h) w.put<float>(v);
    for (float v : r.t) w.put<float>(v);
    if (header_.has_tags()) {
      w.put<std::uint32_t>(static_cast<std::uint32_t>(r.tags.size()));
      for (const auto& tag : r.tags) w.str(tag);
    }
    w.check(path_.string());
    ++header_.count;
  }

  /// Patches the record count into the header and flushes.
  void close() {
    if (!out_.is_open()) return;
    out_.seekp(0);
    write_header();
    out_.close();
    if (!out_) throw IoError("failed to finalize " + path_.string());
  }

  std::uint64_t count() const noexcept { return header_.count; }

 private:
  void write_header() {
    io::ByteWriter w(out_);
    w.bytes("CHFS");
    w.put<std::uint32_t>(io::kShardVersion);
    w.put<std::uint64_t>(header_.count);
    w.put<std::uint32_t>(header_.d_v);
    w.put<std::uint32_t>(header_.d_t);
    w.put<std::uint32_t>(header_.flags);
    w.check(path_.string());
  }

  std::ofstream out_;
  std::filesystem::path path_;
  ShardHeader header_;
};

/// Streams records from a shard without loading it whole.
class ShardReader {
 public:
  explicit ShardReader(const std::filesystem::path& path) : in_(io::open_in(path)), r_(in_) {
    r_.magic("CHFS", "feature shard");
    r_.version(io::kShardVersion, "feature shard");
    header_.count = r_.get<std::uint64_t>("shard header");
    header_.d_v = r_.get<std::uint32_t>("shard header");
    header_.d_t = r_.get<std::uint32_t>("shard header");
    header_.flags = r_.get<std::uint32_t>("shard header");
    if (header_.flags & ~io::kShardFlagTags) throw FormatError("unknown shard flags");
  }

  const ShardHeader& header() const noexcept { return header_; }
  std::uint64_t offset() const noexcept { return r_.offset(); }

  /// Reads the next record; false once `count` records have been read.
  bool next(FeatureRecord& rec) {
    if (read_ == header_.count) {
      if (!r_.at_end()) throw CorruptShard(r_.offset(), "trailing bytes after declared record count");
      return false;
    }
    rec.id = r_.get<std::uint64_t>("record id");
    rec.h.resize(header_.d_v);
    rec.t.resize(header_.d_t);
    if (header_.d_v) r_.read(reinterpret_cast<char*>(rec.h.data()), header_.d_v * sizeof(float), "image features");
    if (header_.d_t) r_.read(reinterpret_cast<char*>(rec.t.data()), header_.d_t * sizeof(float), "text features");
    rec.tags.clear();
    if (header_.has_tags()) {
      const auto n = r_.get<std::uint32_t>("tag count");
      if (n > (1u << 16)) throw CorruptShard(r_.offset() - 4, "implausible tag count");
      for (std::uint32_t k = 0; k < n; ++k) rec.tags.push_back(r_.str("tag"));
    }
    ++read_;
    return true;
  }

  std::vector<FeatureRecord> read_all() {
    std::vector<FeatureRecord> out;
    out.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(header_.count, 1u << 20)));
    FeatureRecord rec;
    while (next(rec)) out.push_back(rec);
    return out;
  }

 private:
  std::ifstream in_;
  io::ByteReader r_;
  ShardHeader header_;
  std::uint64_t read_ = 0;
};

inline void write_shard(const std::filesystem::path& path, std::uint32_t d_v, std::uint32_t d_t,
                        std::span<const FeatureRecord> records, bool has_tags = false) {
  ShardWriter w(path, d_v, d_t, has_tags);
  for (const auto& r : records) w.write(r);
  w.close();
}

inline std::vector<FeatureRecord> read_shard(const std::filesystem::path& path) {
  return ShardReader(path).read_all();
}

/// Converts records to a float64 batch.
inline FeatureBatch to_batch(std::span<const FeatureRecord> records) {
  FeatureBatch b;
  if (records.empty()) return b;
  const std::size_t dv = records.front().h.size(), dt = records.front().t.size();
  b.h = DenseMatrix(records.size(), dv);
  b.t = DenseMatrix(records.size(), dt);
  for (std::size_t r = 0; r < records.size(); ++r) {
    b.ids.push_back(records[r].id);
    std::copy(records[r].h.begin(), records[r].h.end(), b.h.row(r).begin());
    std::copy(records[r].t.begin(), records[r].t.end(), b.t.row(r).begin());
  }
  return b;
}

// ---------------------------------------------------------------------------
// CHEP endpoint parameters
//
// "CHEP" | version u32 | d_v u32 | d_t u32 | d u32 | W_v f32[d_v*d] | W_t f32[d_t*d] | tau_log f64
// ---------------------------------------------------------------------------

inline void write_params(std::ostream& os, const EndpointParams& p) {
  p.validate();
  io::ByteWriter w(os);
  w.bytes("CHEP");
  w.put<std::uint32_t>(io::kParamsVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.d_v()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.d_t()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.d()));
  for (double v : p.w_v.flat()) w.put<float>(static_cast<float>(v));
  for (double v : p.w_t.flat()) w.put<float>(static_cast<float>(v));
  w.put<double>(p.tau_log);
  w.check("endpoint parameters");
}

inline EndpointParams read_params(std::istream& is, std::uint64_t base_offset = 0) {
  io::ByteReader r(is, base_offset);
  r.magic("CHEP", "endpoint parameters");
  r.version(io::kParamsVersion, "endpoint parameters");
  const auto dv = r.get<std::uint32_t>("params header");
  const auto dt = r.get<std::uint32_t>("params header");
  const auto d = r.get<std::uint32_t>("params header");
  if (static_cast<std::uint64_t>(dv + dt) * d > (1ull << 32))
    throw CorruptShard(r.offset(), "implausible endpoint dimensions");
  EndpointParams p(dv, dt, d);
  for (double& v : p.w_v.flat()) v = r.get<float>("W_v");
  for (double& v : p.w_t.flat()) v = r.get<float>("W_t");
  p.tau_log = r.get<double>("tau_log");
  p.validate();
  return p;
}

inline std::string encode_params(const EndpointParams& p) {
  std::ostringstream os(std::ios::binary);
  write_params(os, p);
  return os.str();
}

inline EndpointParams decode_params(const std::string& blob) {
  std::istringstream is(blob, std::ios::binary);
  return read_params(is);
}

inline void save_params(const std::filesystem::path& path, const EndpointParams& p) {
  auto f = io::open_out(path);
  write_params(f, p);
}

inline EndpointParams load_params(const std::filesystem::path& path) {
  auto f = io::open_in(path);
  return read_params(f);
}

// ---------------------------------------------------------------------------
// CHTJ checkpoint trajectory (append-only)
//
// "CHTJ" | version u32 | count u64 | (eta f64 | blob_len u64 | CHEP blob)*
// ---------------------------------------------------------------------------

struct Checkpoint {
  EndpointParams params;
  double eta = 0.0;
};

using CheckpointTrajectory = std::vector<Checkpoint>;

class CheckpointStore {
 public:
  /// Opens an existing store or creates an empty one.
  explicit CheckpointStore(std::filesystem::path path) : path_(std::move(path)) {
    if (!std::filesystem::exists(path_)) {
      auto f = io::open_out(path_);
      io::ByteWriter w(f);
      w.bytes("CHTJ");
      w.put<std::uint32_t>(io::kTrajectoryVersion);
      w.put<std::uint64_t>(0);
      w.check(path_.string());
    }
    scan();
  }

  std::size_t size() const noexcept { return offsets_.size(); }

  void append(const EndpointParams& params, double eta) {
    if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("learning rate eta must be > 0");
    const std::string blob = encode_params(params);
    std::fstream f(path_, std::ios::binary | std::ios::in | std::ios::out);
    if (!f) throw IoError("cannot open " + path_.string());
    f.seekp(0, std::ios::end);
    const auto at = static_cast<std::uint64_t>(f.tellp());
    io::ByteWriter w(f);
    w.put<double>(eta);
    w.put<std::uint64_t>(blob.size());
    w.bytes(blob);
    f.seekp(8);
    w.put<std::uint64_t>(offsets_.size() + 1);
    w.check(path_.string());
    offsets_.push_back(at);
  }

  Checkpoint get(std::size_t t) const {
    if (t >= offsets_.size())
      throw IndexOutOfRange("checkpoint " + std::to_string(t) + " of " + std::to_string(offsets_.size()));
    auto f = io::open_in(path_);
    f.seekg(static_cast<std::streamoff>(offsets_[t]));
    io::ByteReader r(f, offsets_[t]);
    Checkpoint c;
    c.eta = r.get<double>("checkpoint eta");
    const auto len = r.get<std::uint64_t>("checkpoint length");
    std::string blob(len, '\0');
    r.read(blob.data(), len, "checkpoint blob");
    c.params = decode_params(blob);
    return c;
  }

  /// Raw CHEP bytes of checkpoint t.
  std::string blob(std::size_t t) const { return encode_params(get(t).params); }

  CheckpointTrajectory load_all() const {
    CheckpointTrajectory out;
    for (std::size_t t = 0; t < size(); ++t) out.push_back(get(t));
    return out;
  }

 private:
  void scan() {
    const auto total = std::filesystem::file_size(path_);
    auto f = io::open_in(path_);
    io::ByteReader r(f);
    r.magic("CHTJ", "checkpoint store");
    r.version(io::kTrajectoryVersion, "checkpoint store");
    const auto n = r.get<std::uint64_t>("checkpoint count");
    offsets_.clear();
    for (std::uint64_t t = 0; t < n; ++t) {
      offsets_.push_back(r.offset());
      r.get<double>("checkpoint eta");
      const auto len = r.get<std::uint64_t>("checkpoint length");
      r.skip(len, total, "checkpoint blob");
    }
  }

  std::filesystem::path path_;
  std::vector<std::uint64_t> offsets_;
};

// ---------------------------------------------------------------------------
// Score files: a CSV text form and the binary CHSC form carry the same content.
// ---------------------------------------------------------------------------

struct ScoreFile {
  std::string method = "chips";
  std::uint64_t config_fingerprint = 0;
  std::string sketch;  // describe_sketch() output, or "exact"
  std::uint64_t pool_size = 0;
  std::vector<ScoreRecord> records;

  friend bool operator==(const ScoreFile&, const ScoreFile&) = default;
};

inline std::string describe_sketch(const SketchSpec& s) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "kind=%s k=%u input_dim=%" PRIu64 " seed=%" PRIu64 " sparsity=%u fingerprint=0x%016" PRIx64,
                std::string(to_string(s.kind)).c_str(), s.k, s.input_dim, s.seed, s.sparsity, s.fingerprint());
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "0x%016" PRIx64, v);
  return buf;
}

inline std::uint64_t parse_hex64(const std::string& s) {
  std::size_t pos = 0;
  const auto v = std::stoull(s, &pos, 16);
  if (pos != s.size()) throw FormatError("bad hex value '" + s + "'");
  return v;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_scores_text(std::ostream& os, const ScoreFile& f) {
  os << "# chips-scores v1\n";
  os << "# method: " << f.method << "\n";
  os << "# config_fingerprint: " << hex64(f.config_fingerprint) << "\n";
  os << "# sketch: " << f.sketch << "\n";
  os << "# pool_size: " << f.pool_size << "\n";
  os << "id,alignment,learnability,relevance,utility,batch_fingerprint\n";
  for (const auto& r : f.records)
    os << r.id << ',' << format_double(r.alignment) << ',' << format_double(r.learnability) << ','
       << format_double(r.relevance) << ',' << format_double(r.utility) << ','
       << hex64(r.batch_fingerprint) << '\n';
  if (!os) throw IoError("failed writing score text");
}

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw FormatError("bad number '" + s + "'");
  return v;
}

inline std::uint64_t parse_u64(const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw FormatError("bad integer '" + s + "'");
  return std::stoull(s);
}

/// Splits "# key: value" into (key, value).
inline std::optional<std::pair<std::string, std::string>> header_kv(const std::string& line) {
  if (line.rfind("# ", 0) != 0) return std::nullopt;
  const auto colon = line.find(": ");
  if (colon == std::string::npos) return std::nullopt;
  return std::make_pair(line.substr(2, colon - 2), line.substr(colon + 2));
}

}  // namespace detail

inline ScoreFile read_scores_text(std::istream& is) {
  ScoreFile f;
  std::string line;
  if (!std::getline(is, line) || line != "# chips-scores v1") throw FormatError("not a chips score file");
  bool columns = false;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!columns) {
      if (line == "id,alignment,learnability,relevance,utility,batch_fingerprint") {
        columns = true;
        continue;
      }
      const auto kv = detail::header_kv(line);
      if (!kv) throw FormatError("bad score header line " + std::to_string(lineno));
      const auto& [k, v] = *kv;
      if (k == "method") f.method = v;
      else if (k == "config_fingerprint") f.config_fingerprint = parse_hex64(v);
      else if (k == "sketch") f.sketch = v;
      else if (k == "pool_size") f.pool_size = detail::parse_u64(v);
      else throw FormatError("unknown score header key '" + k + "'");
      continue;
    }
    if (line.empty()) continue;
    const auto cols = detail::split(line, ',');
    if (cols.size() != 6) throw FormatError("score line " + std::to_string(lineno) + " has " + std::to_string(cols.size()) + " fields");
    ScoreRecord r;
    r.id = detail::parse_u64(cols[0]);
    r.alignment = detail::parse_double(cols[1]);
    r.learnability = detail::parse_double(cols[2]);
    r.relevance = detail::parse_double(cols[3]);
    r.utility = detail::parse_double(cols[4]);
    r.batch_fingerprint = parse_hex64(cols[5]);
    f.records.push_back(r);
  }
  if (!columns) throw FormatError("score file has no column line");
  return f;
}

/// "CHSC" | version u32 | method str | config_fp u64 | sketch str | pool_size u64 | count u64
/// | (id u64, alignment f64, learnability f64, relevance f64, utility f64, batch_fp u64)*
inline void write_scores_binary(std::ostream& os, const ScoreFile& f) {
  io::ByteWriter w(os);
  w.bytes("CHSC");
  w.put<std::uint32_t>(io::kScoresVersion);
  w.str(f.method);
  w.put<std::uint64_t>(f.config_fingerprint);
  w.str(f.sketch);
  w.put<std::uint64_t>(f.pool_size);
  w.put<std::uint64_t>(f.records.size());
  for (const auto& r : f.records) {
    w.put<std::uint64_t>(r.id);
    w.put<double>(r.alignment);
    w.put<double>(r.learnability);
    w.put<double>(r.relevance);
    w.put<double>(r.utility);
    w.put<std::uint64_t>(r.batch_fingerprint);
  }
  w.check("binary scores");
}

inline ScoreFile read_scores_binary(std::istream& is) {
  io::ByteReader r(is);
  r.magic("CHSC", "score file");
  r.version(io::kScoresVersion, "score file");
  ScoreFile f;
  f.method = r.str("method");
  f.config_fingerprint = r.get<std::uint64_t>("config fingerprint");
  f.sketch = r.str("sketch");
  f.pool_size = r.get<std::uint64_t>("pool size");
  const auto n = r.get<std::uint64_t>("record count");
  for (std::uint64_t i = 0; i < n; ++i) {
    ScoreRecord rec;
    rec.id = r.get<std::uint64_t>("score id");
    rec.alignment = r.get<double>("alignment");
    rec.learnability = r.get<double>("learnability");
    rec.relevance = r.get<double>("relevance");
    rec.utility = r.get<double>("utility");
    rec.batch_fingerprint = r.get<std::uint64_t>("batch fingerprint");
    f.records.push_back(rec);
  }
  if (!r.at_end()) throw CorruptShard(r.offset(), "trailing bytes after score records");
  return f;
}

/// Reads either form, sniffing the magic.
inline ScoreFile load_scores(const std::filesystem::path& path) {
  auto f = io::open_in(path);
  char m[4] = {};
  f.read(m, 4);
  f.clear();
  f.seekg(0);
  if (std::string_view(m, 4) == "CHSC") return read_scores_binary(f);
  return read_scores_text(f);
}

inline void save_scores_text(const std::filesystem::path& path, const ScoreFile& sf) {
  auto f = io::open_out(path);
  write_scores_text(f, sf);
}

inline void save_scores_binary(const std::filesystem::path& path, const ScoreFile& sf) {
  auto f = io::open_out(path);
  write_scores_binary(f, sf);
}

// ---------------------------------------------------------------------------
// Selection manifest (text): header lines then one id per line in rank order.
// ---------------------------------------------------------------------------

inline void write_manifest(std::ostream& os, const SelectionManifest& m) {
  os << "# chips-manifest v1\n";
  os << "# method: " << m.method << "\n";
  os << "# config_fingerprint: " << hex64(m.config_fingerprint) << "\n";
  os << "# retention: " << format_double(m.retention) << "\n";
  os << "# pool_size: " << m.pool_size << "\n";
  os << "# n: " << m.ids.size() << "\n";
  os << "# drift_kl_upper: " << format_double(m.drift_kl_upper) << "\n";
  for (auto id : m.ids) os << id << '\n';
  if (!os) throw IoError("failed writing manifest");
}

inline SelectionManifest read_manifest(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "# chips-manifest v1") throw FormatError("not a chips manifest");
  SelectionManifest m;
  std::optional<std::uint64_t> n;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto kv = detail::header_kv(line);
      if (!kv) throw FormatError("bad manifest header line");
      const auto& [k, v] = *kv;
      if (k == "method") m.method = v;
      else if (k == "config_fingerprint") m.config_fingerprint = parse_hex64(v);
      else if (k == "retention") m.retention = detail::parse_double(v);
      else if (k == "pool_size") m.pool_size = detail::parse_u64(v);
      else if (k == "n") n = detail::parse_u64(v);
      else if (k == "drift_kl_upper") m.drift_kl_upper = detail::parse_double(v);
      else throw FormatError("unknown manifest header key '" + k + "'");
      continue;
    }
    m.ids.push_back(detail::parse_u64(line));
  }
  if (n && *n != m.ids.size()) throw FormatError("manifest id count does not match header");
  return m;
}

inline void save_manifest(const std::filesystem::path& path, const SelectionManifest& m) {
  auto f = io::open_out(path);
  write_manifest(f, m);
}

inline SelectionManifest load_manifest(const std::filesystem::path& path) {
  auto f = io::open_in(path);
  return read_manifest(f);
}

// ---------------------------------------------------------------------------
// CHCV curvature surrogate
//
// "CHCV" | version u32 | fingerprint u64 | alpha f64 | lambda f64 | dim u64 | M f64[dim*dim]
// | precond_dir f64[dim] | cg_iterations u64 | cg_residual f64
// ---------------------------------------------------------------------------

inline void write_surrogate(std::ostream& os, const CurvatureSurrogate& s) {
  io::ByteWriter w(os);
  w.bytes("CHCV");
  w.put<std::uint32_t>(io::kSurrogateVersion);
  w.put<std::uint64_t>(s.fingerprint);
  w.put<double>(s.alpha);
  w.put<double>(s.lambda_ridge);
  w.put<std::uint64_t>(s.m.rows());
  for (double v : s.m.flat()) w.put<double>(v);
  if (s.precond_dir.size() != s.m.rows()) throw ShapeError("surrogate direction not solved");
  for (double v : s.precond_dir) w.put<double>(v);
  w.put<std::uint64_t>(s.cg_report.iterations);
  w.put<double>(s.cg_report.residual_norm);
  w.check("surrogate");
}

inline CurvatureSurrogate read_surrogate(std::istream& is) {
  io::ByteReader r(is);
  r.magic("CHCV", "curvature surrogate");
  r.version(io::kSurrogateVersion, "curvature surrogate");
  CurvatureSurrogate s;
  s.fingerprint = r.get<std::uint64_t>("fingerprint");
  s.alpha = r.get<double>("alpha");
  s.lambda_ridge = r.get<double>("lambda");
  const auto n = r.get<std::uint64_t>("dim");
  if (n > (1u << 16)) throw CorruptShard(r.offset() - 8, "implausible surrogate dimension");
  s.m = DenseMatrix(n, n);
  for (double& v : s.m.flat()) v = r.get<double>("M");
  s.precond_dir = Vector(n);
  for (double& v : s.precond_dir) v = r.get<double>("direction");
  s.cg_report.iterations = r.get<std::uint64_t>("cg iterations");
  s.cg_report.residual_norm = r.get<double>("cg residual");
  return s;
}

inline void save_surrogate(const std::filesystem::path& path, const CurvatureSurrogate& s) {
  auto f = io::open_out(path);
  write_surrogate(f, s);
}

inline CurvatureSurrogate load_surrogate(const std::filesystem::path& path) {
  auto f = io::open_in(path);
  return read_surrogate(f);
}

}  // namespace chips
