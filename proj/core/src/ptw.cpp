#include "propih/ptw.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace propih {

namespace {

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}

  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint8_t>(buf_[pos_]) |
                      (static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf_[pos_ + 1])) << 8);
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void f32_block(float* dst, std::size_t count, const char* what) {
    need(count * 4, what);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t v = 0;
      for (int b = 0; b < 4; ++b)
        v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf_[pos_ + 4 * i + b])) << (8 * b);
      dst[i] = std::bit_cast<float>(v);
    }
    pos_ += count * 4;
  }
  bool done() const { return pos_ == buf_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (buf_.size() - pos_ < n)
      fail_validation(path_, ": truncated while reading ", what, " at offset ", pos_);
  }
  const std::string& buf_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_ptw(const std::string& path, const std::vector<PtwEntry>& entries) {
  std::string out;
  out += "PTW1";
  if (entries.size() > std::numeric_limits<std::uint32_t>::max())
    fail_validation("write_ptw: too many entries");
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const PtwEntry& e : entries) {
    if (e.name.size() > std::numeric_limits<std::uint16_t>::max())
      fail_validation("write_ptw: entry name too long: ", e.name.substr(0, 64));
    if (e.shape.size() > 255)
      fail_validation("write_ptw: entry ", e.name, " has rank ", e.shape.size());
    std::int64_t n = shape_numel(e.shape);
    if (n != static_cast<std::int64_t>(e.data.size()))
      fail_validation("write_ptw: entry ", e.name, " shape ", shape_str(e.shape),
                      " vs ", e.data.size(), " values");
    put_u16(out, static_cast<std::uint16_t>(e.name.size()));
    out += e.name;
    out.push_back(static_cast<char>(e.shape.size()));
    for (int d : e.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : e.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail_validation("write_ptw: cannot open ", path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) fail_validation("write_ptw: write failed for ", path);
}

std::vector<PtwEntry> read_ptw(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail_validation("read_ptw: cannot open ", path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(buf, path);
  if (r.bytes(4, "magic") != "PTW1")
    fail_validation(path, ": bad magic, not a PTW file");
  std::uint32_t count = r.u32("entry count");
  std::vector<PtwEntry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    PtwEntry e;
    std::uint16_t name_len = r.u16("name length");
    e.name = r.bytes(name_len, "name");
    std::uint8_t rank = r.u8("rank");
    std::int64_t n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      std::uint32_t dim = r.u32("dimension");
      if (dim > static_cast<std::uint32_t>(std::numeric_limits<int>::max()))
        fail_validation(path, ": entry ", e.name, " has oversized dimension");
      e.shape.push_back(static_cast<int>(dim));
      n *= dim;
    }
    if (n < 0 || n > (std::int64_t(1) << 34))
      fail_validation(path, ": entry ", e.name, " has implausible size");
    e.data.resize(static_cast<std::size_t>(n));
    r.f32_block(e.data.data(), e.data.size(), e.name.empty() ? "values" : e.name.c_str());
    entries.push_back(std::move(e));
  }
  if (!r.done())
    fail_validation(path, ": ", buf.size() - r.pos(), " trailing bytes after last entry");
  return entries;
}

}  // namespace propih
