#include "co3/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "co3/error.hpp"
#include "co3/rng.hpp"

namespace co3 {

namespace {

constexpr char kMagic[4] = {'C', 'O', '3', 'K'};
constexpr std::uint8_t kDtypeF64 = 1;

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  void raw(const char* p, std::size_t n) { out_.append(p, n); }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in, std::size_t end) : in_(in), end_(end) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(in_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return end_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) fail(ErrorCode::checkpoint_format, "checkpoint truncated");
  }
  const std::string& in_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

const std::string& Container::meta(const std::string& key) const {
  auto it = metadata.find(key);
  if (it == metadata.end()) fail(ErrorCode::checkpoint_format, "checkpoint lacks metadata key '" + key + "'");
  return it->second;
}

const NamedTensor* Container::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::string serialize_container(const Container& c) {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kContainerVersion);
  w.u32(static_cast<std::uint32_t>(c.metadata.size()));
  for (const auto& [k, v] : c.metadata) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    w.str(t.name);
    w.u32(2);
    w.u64(static_cast<std::uint64_t>(t.value.rows()));
    w.u64(static_cast<std::uint64_t>(t.value.cols()));
    w.u8(kDtypeF64);
  }
  for (const auto& t : c.tensors)
    for (Eigen::Index i = 0; i < t.value.size(); ++i) w.f64(t.value.data()[i]);
  const std::uint64_t sum = fnv1a64(w.bytes());
  w.u64(sum);
  return std::move(w.bytes());
}

Container parse_container(const std::string& bytes) {
  if (bytes.size() < 4 + 4 + 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(ErrorCode::checkpoint_format, "not a CO3K container");
  }
  const std::size_t body = bytes.size() - 8;
  {
    Reader tail(bytes, bytes.size());
    (void)tail;
  }
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[body + i])) << (8 * i);
  if (stored != fnv1a64(std::string_view(bytes.data(), body))) {
    fail(ErrorCode::checkpoint_format, "checksum mismatch (corrupted file)");
  }
  Reader r(bytes, body);
  for (int i = 0; i < 4; ++i) r.u8();
  const std::uint32_t version = r.u32();
  if (version != kContainerVersion) {
    fail(ErrorCode::checkpoint_format, "unsupported container version " + std::to_string(version));
  }
  Container c;
  const std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    c.metadata[k] = r.str();
  }
  const std::uint32_t n_tensors = r.u32();
  struct Entry {
    std::string name;
    std::uint64_t rows, cols;
  };
  std::vector<Entry> manifest;
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    Entry e;
    e.name = r.str();
    if (r.u32() != 2) fail(ErrorCode::checkpoint_format, "tensor " + e.name + ": unsupported rank");
    e.rows = r.u64();
    e.cols = r.u64();
    if (r.u8() != kDtypeF64) fail(ErrorCode::checkpoint_format, "tensor " + e.name + ": unsupported dtype");
    if (e.rows * e.cols * 8 > r.remaining()) fail(ErrorCode::checkpoint_format, "tensor " + e.name + ": truncated");
    manifest.push_back(std::move(e));
  }
  for (const auto& e : manifest) {
    NamedTensor t{e.name, ad::Matrix(static_cast<Eigen::Index>(e.rows), static_cast<Eigen::Index>(e.cols))};
    for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = r.f64();
    c.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) fail(ErrorCode::checkpoint_format, "trailing bytes after payload");
  return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  const std::string bytes = serialize_container(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::io, "short write to " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::checkpoint_missing, "checkpoint not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_container(buf.str());
  } catch (const Error& e) {
    fail(e.code(), path.string() + ": " + e.what());
  }
}

}  // namespace co3
