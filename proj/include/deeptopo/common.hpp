#pragma once

#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace deeptopo {

using i64 = std::int64_t;

// Raised for malformed external data: image files, manifests, checkpoints.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {
inline void append_msg(std::ostringstream&) {}
template <typename A, typename... Rest>
void append_msg(std::ostringstream& os, A&& a, Rest&&... rest) {
  os << a;
  append_msg(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <typename... Parts>
[[noreturn]] void fail(Parts&&... parts) {
  std::ostringstream os;
  detail::append_msg(os, std::forward<Parts>(parts)...);
  throw std::invalid_argument(os.str());
}

template <typename... Parts>
[[noreturn]] void fail_data(Parts&&... parts) {
  std::ostringstream os;
  detail::append_msg(os, std::forward<Parts>(parts)...);
  throw DataError(os.str());
}

#define DT_CHECK(cond, ...) \
  do {                      \
    if (!(cond)) ::deeptopo::fail(__VA_ARGS__); \
  } while (0)

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

}  // namespace deeptopo
