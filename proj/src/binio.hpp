#ifndef CLOTHPICK_SRC_BINIO_HPP
#define CLOTHPICK_SRC_BINIO_HPP

#include "clothpick/errors.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

namespace clothpick::binio {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <class T>
void put(std::ostream& out, T value) {
  static_assert(std::is_arithmetic_v<T>);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
void put_array(std::ostream& out, const T* data, std::size_t n) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
}

inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

// Reader that turns short reads into FormatError with a caller-supplied context.
class Reader {
public:
  explicit Reader(std::istream& in) : in_(in) {}

  void context(std::string what) { context_ = std::move(what); }

  void bytes(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError("unexpected end of file in " + context_);
  }

  template <class T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }

  template <class T>
  void get_array(T* dst, std::size_t n) {
    bytes(dst, n * sizeof(T));
  }

  std::string get_string(std::size_t max_len = 1u << 24) {
    const auto n = get<std::uint32_t>();
    if (n > max_len) throw FormatError("implausible string length in " + context_);
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

private:
  std::istream& in_;
  std::string context_ = "header";
};

} // namespace clothpick::binio

#endif
