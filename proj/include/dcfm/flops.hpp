#pragma once

#include <cstdint>

namespace dcfm::flops {

// Deterministic operation counter used instead of wall-clock time where tests
// need an exact cost model. Thread-local: meter single-threaded sections only.

namespace detail {
inline thread_local int64_t counter = 0;
inline thread_local bool active = false;
}  // namespace detail

inline void add(int64_t n) {
  if (detail::active) detail::counter += n;
}

inline bool enabled() { return detail::active; }

// RAII scope that resets the counter on entry.
class Meter {
 public:
  Meter() {
    detail::counter = 0;
    detail::active = true;
  }
  ~Meter() { detail::active = false; }
  Meter(const Meter&) = delete;
  Meter& operator=(const Meter&) = delete;
  int64_t count() const { return detail::counter; }
};

}  // namespace dcfm::flops
