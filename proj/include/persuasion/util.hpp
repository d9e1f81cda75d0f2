#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <iostream>
#include <limits>
#include <mutex>
#include <random>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace persuasion {

// 64-bit FNV-1a. Stable across platforms and runs, unlike std::hash, so it is
// safe for node ids, config hashes and scripted-backend dispatch.
class Fnv1a {
 public:
  Fnv1a& update(std::string_view bytes) noexcept {
    for (unsigned char c : bytes) {
      state_ ^= c;
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  // Field separator so ("ab","c") and ("a","bc") hash differently.
  Fnv1a& field(std::string_view bytes) noexcept {
    update(bytes);
    const char sep = '\x1f';
    return update(std::string_view(&sep, 1));
  }
  std::uint64_t value() const noexcept { return state_; }
  std::string hex() const {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    std::uint64_t v = state_;
    for (int i = 15; i >= 0; --i) {
      out[static_cast<std::size_t>(i)] = digits[v & 0xf];
      v >>= 4;
    }
    return out;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string fnv1a_hex(std::string_view bytes) {
  return Fnv1a{}.update(bytes).hex();
}

// Seeded generator with portable draws. std::uniform_int_distribution and
// std::shuffle are implementation-defined, so output files would differ
// between standard libraries; mt19937_64 itself is fully specified.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : engine_(seed) {}

  // Uniform integer in [0, bound) by rejection sampling.
  std::uint64_t below(std::uint64_t bound) {
    if (bound <= 1) return 0;
    const std::uint64_t limit =
        std::numeric_limits<std::uint64_t>::max() -
        std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t draw;
    do {
      draw = engine_();
    } while (draw >= limit);
    return draw % bound;
  }

  // Uniform real in [0, 1) with 53 random bits.
  double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal() {
    // Box-Muller; avoids the implementation-defined std::normal_distribution.
    double u1 = unit();
    while (u1 <= 0.0) u1 = unit();
    const double u2 = unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

inline std::string to_lower_ascii(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::string_view trim(std::string_view s) {
  const auto is_space = [](char c) {
    return std::isspace(static_cast<unsigned char>(c)) != 0;
  };
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find('\n', start);
    if (end == std::string_view::npos) {
      lines.emplace_back(text.substr(start));
      break;
    }
    lines.emplace_back(text.substr(start, end - start));
    start = end + 1;
  }
  return lines;
}

// Process-wide warning sink. Defaults to stderr; tests swap it to capture.
class Warnings {
 public:
  using Sink = std::function<void(const std::string&)>;

  static void emit(const std::string& message) {
    std::lock_guard lock(mutex());
    if (sink()) {
      sink()(message);
    } else {
      std::cerr << "warning: " << message << '\n';
    }
  }

  // Returns the previous sink so callers can restore it.
  static Sink set_sink(Sink s) {
    std::lock_guard lock(mutex());
    std::swap(sink(), s);
    return s;
  }

 private:
  static std::mutex& mutex() {
    static std::mutex m;
    return m;
  }
  static Sink& sink() {
    static Sink s;
    return s;
  }
};

inline void warn(const std::string& message) { Warnings::emit(message); }

// Caps the number of backend requests in flight across the whole process
// (or whatever scope shares the limiter).
class InflightLimiter {
 public:
  explicit InflightLimiter(int max_inflight)
      : slots_(std::max(1, max_inflight)) {}

  class Permit {
   public:
    explicit Permit(InflightLimiter& owner) : owner_(&owner) { owner_->slots_.acquire(); }
    Permit(const Permit&) = delete;
    Permit& operator=(const Permit&) = delete;
    ~Permit() { owner_->slots_.release(); }

   private:
    InflightLimiter* owner_;
  };

  Permit acquire() { return Permit(*this); }

 private:
  std::counting_semaphore<1 << 16> slots_;
};

// Runs fn(i) for i in [0, n) on up to `workers` threads. Results land in
// caller-owned slots indexed by i, so output order never depends on
// scheduling. The first exception thrown by any task is rethrown after all
// workers have joined.
inline void parallel_for(std::size_t n, int workers,
                         const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  const auto threads = static_cast<std::size_t>(std::max(1, workers));
  if (threads == 1 || n == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> pool;
  pool.reserve(std::min(threads, n));
  for (std::size_t t = 0; t < std::min(threads, n); ++t) pool.emplace_back(worker);
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace persuasion
