#pragma once

// Little-endian binary helpers shared by every on-disk format.

#include "ou3d/common.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>

namespace ou3d::binio {

static_assert(std::endian::native == std::endian::little, "only little-endian hosts are supported");

class Writer {
public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const char*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void magic(std::string_view m) { bytes(m.data(), m.size()); }
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    bytes(&v, sizeof(T));
  }
  template <typename T>
  void put_span(std::span<const T> v) {
    bytes(v.data(), v.size_bytes());
  }
  const std::vector<char>& data() const { return buf_; }

  // Writes to a temp file and renames, so readers never see a partial file.
  void save(const std::filesystem::path& path) const {
    auto tmp = path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
      out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
      if (!out) throw Error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
  }

private:
  std::vector<char> buf_;
};

inline std::vector<char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

class Reader {
public:
  Reader(std::vector<char> buf, std::string name) : buf_(std::move(buf)), name_(std::move(name)) {}

  static Reader open(const std::filesystem::path& path) { return Reader(slurp(path), path.string()); }

  void expect_magic(std::string_view m) {
    need(m.size(), "magic");
    std::string found(buf_.data() + pos_, m.size());
    if (found != m) throw Error(name_ + ": bad magic, expected '" + std::string(m) + "' found '" + printable(found) + "'");
    pos_ += m.size();
  }

  template <typename T>
  T get(std::string_view what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  template <typename T>
  void get_into(std::span<T> out, std::string_view what) {
    need(out.size_bytes(), what);
    std::memcpy(out.data(), buf_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }

  std::string get_string(std::size_t n, std::string_view what) {
    need(n, what);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return buf_.size() - pos_; }
  std::size_t offset() const { return pos_; }
  const std::string& name() const { return name_; }

  void expect_end() const {
    if (remaining() != 0)
      throw Error(name_ + ": payload size mismatch, " + std::to_string(remaining()) + " trailing bytes at offset " +
                  std::to_string(pos_));
  }

  // Checks up front that the remaining payload has exactly `bytes` bytes.
  void expect_payload(std::uint64_t bytes, std::string_view what) const {
    if (remaining() != bytes)
      throw Error(name_ + ": payload size mismatch for " + std::string(what) + ", header implies " + std::to_string(bytes) +
                  " bytes but " + std::to_string(remaining()) + " remain at offset " + std::to_string(pos_));
  }

private:
  void need(std::size_t n, std::string_view what) const {
    if (buf_.size() - pos_ < n)
      throw Error(name_ + ": truncated while reading " + std::string(what) + " at offset " + std::to_string(pos_));
  }
  static std::string printable(const std::string& s) {
    std::ostringstream os;
    for (unsigned char c : s) {
      if (c >= 32 && c < 127)
        os << c;
      else
        os << "\\x" << std::hex << static_cast<int>(c) << std::dec;
    }
    return os.str();
  }

  std::vector<char> buf_;
  std::string name_;
  std::size_t pos_ = 0;
};

}  // namespace ou3d::binio
