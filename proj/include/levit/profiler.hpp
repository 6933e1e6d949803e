#pragma once

#include <array>
#include <chrono>
#include <cstddef>
#include <string_view>
#include <vector>

namespace levit {

// Forward-pass components of an attention + MLP block pair, in the order they
// are reported by the benchmark.
enum class Component : std::size_t {
  Normalization = 0,
  KeysQK,
  ValuesV,
  ProductQKt,
  ProductAV,
  AttentionProjection,
  Mlp,
};

inline constexpr std::size_t kComponentCount = 7;

std::string_view component_name(Component c);

// Exclusive wall-time accumulator. Entering a nested scope pauses the
// enclosing one, so the per-component totals partition the measured time.
class Profiler {
 public:
  using Clock = std::chrono::steady_clock;

  void reset();
  void push(Component c);
  void pop();

  // Microseconds accumulated per component since the last reset.
  const std::array<double, kComponentCount>& totals_us() const { return totals_; }

 private:
  void charge(Clock::time_point now);

  std::array<double, kComponentCount> totals_{};
  std::vector<Component> stack_;
  Clock::time_point started_{};
};

class ProfileScope {
 public:
  ProfileScope(Profiler* profiler, Component c) : profiler_(profiler) {
    if (profiler_) profiler_->push(c);
  }
  ~ProfileScope() {
    if (profiler_) profiler_->pop();
  }
  ProfileScope(const ProfileScope&) = delete;
  ProfileScope& operator=(const ProfileScope&) = delete;

 private:
  Profiler* profiler_;
};

}  // namespace levit
