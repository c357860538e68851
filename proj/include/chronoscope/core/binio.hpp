#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "chronoscope/core/error.hpp"

namespace chronoscope::binio {

// Little-endian byte writer / reader over an in-memory buffer.

template <class T>
T byteswap_if_needed(T v) {
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    std::memcpy(&v, buf, sizeof(T));
  }
  return v;
}

class Writer {
 public:
  template <class T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    v = byteswap_if_needed(v);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void put_string(std::string_view s) {
    put<std::uint64_t>(s.size());
    buf_.append(s.data(), s.size());
  }
  void put_raw(std::string_view s) { buf_.append(s.data(), s.size()); }
  template <class T>
  void put_array(const T* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) put(data[i]);
  }
  const std::string& bytes() const noexcept { return buf_; }
  std::string take() && { return std::move(buf_); }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  template <class T>
    requires std::is_arithmetic_v<T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return byteswap_if_needed(v);
  }
  std::string get_string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view get_raw(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const noexcept { return pos_; }
  bool at_end() const noexcept { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) fail(ErrorKind::Io, "truncated binary stream");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace chronoscope::binio
