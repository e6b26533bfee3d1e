#include "repmech/parallel.hpp"

#include <cstdlib>
#include <string>

namespace repmech {

std::size_t default_workers() {
  if (const char* env = std::getenv("REPMECH_WORKERS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (...) {
    }
  }
  return 1;
}

}  // namespace repmech
