#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace vicregl {

namespace detail {
template <typename... Args>
std::string format_msg(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}
}  // namespace detail

// Precondition failures surface as std::invalid_argument, everything else as
// std::runtime_error.
#define VRL_CHECK_ARG(cond, ...)                                            \
  do {                                                                      \
    if (!(cond))                                                            \
      throw std::invalid_argument(                                          \
          ::vicregl::detail::format_msg("invalid argument: ", __VA_ARGS__)); \
  } while (0)

#define VRL_CHECK(cond, ...)                                            \
  do {                                                                  \
    if (!(cond))                                                        \
      throw std::runtime_error(::vicregl::detail::format_msg(__VA_ARGS__)); \
  } while (0)

}  // namespace vicregl
