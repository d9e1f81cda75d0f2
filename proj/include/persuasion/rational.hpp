#pragma once

#include <cstdint>
#include <numeric>
#include <ostream>

#include <nlohmann/json.hpp>

#include "persuasion/error.hpp"

namespace persuasion {

// Exact count/total. Metrics are reported as rationals so that recomputing
// them from transcripts reproduces the report bit-for-bit.
class Rational {
 public:
  constexpr Rational() = default;
  Rational(std::int64_t num, std::int64_t den) : num_(num), den_(den) {
    if (den_ == 0) throw DomainError("rational with zero denominator");
    if (den_ < 0) {
      num_ = -num_;
      den_ = -den_;
    }
  }

  std::int64_t num() const noexcept { return num_; }
  std::int64_t den() const noexcept { return den_; }

  // Value with an empty denominator is reported as 0 rather than NaN.
  double value() const noexcept {
    return den_ == 0 ? 0.0 : static_cast<double>(num_) / static_cast<double>(den_);
  }
  double percent() const noexcept { return 100.0 * value(); }

  // Reduced copy, used for exact arithmetic; reports keep raw counts.
  Rational reduced() const {
    if (den_ == 0) return *this;
    const auto g = std::gcd(num_, den_);
    return g == 0 ? *this : Rational(num_ / g, den_ / g);
  }

  friend Rational operator-(const Rational& a, const Rational& b) {
    return Rational(a.num_ * b.den_ - b.num_ * a.den_, a.den_ * b.den_).reduced();
  }
  friend Rational operator+(const Rational& a, const Rational& b) {
    return Rational(a.num_ * b.den_ + b.num_ * a.den_, a.den_ * b.den_).reduced();
  }
  friend Rational operator/(const Rational& a, const Rational& b) {
    if (b.num_ == 0) throw DomainError("division by zero rational");
    return Rational(a.num_ * b.den_, a.den_ * b.num_).reduced();
  }
  // Compares values, not representations: 1/2 == 2/4.
  friend bool operator==(const Rational& a, const Rational& b) {
    return a.num_ * b.den_ == b.num_ * a.den_;
  }
  friend bool operator<(const Rational& a, const Rational& b) {
    return a.num_ * b.den_ < b.num_ * a.den_;
  }
  friend bool operator>(const Rational& a, const Rational& b) { return b < a; }

  friend std::ostream& operator<<(std::ostream& os, const Rational& r) {
    return os << r.num_ << '/' << r.den_;
  }

 private:
  std::int64_t num_ = 0;
  std::int64_t den_ = 0;
};

inline nlohmann::json to_json_value(const Rational& r) {
  return {{"num", r.num()}, {"den", r.den()}, {"value", r.value()}};
}

}  // namespace persuasion
