#include "levit/profiler.hpp"

#include <stdexcept>

namespace levit {

std::string_view component_name(Component c) {
  switch (c) {
    case Component::Normalization:
      return "normalization";
    case Component::KeysQK:
      return "keys_QK";
    case Component::ValuesV:
      return "values_V";
    case Component::ProductQKt:
      return "product_QKt";
    case Component::ProductAV:
      return "product_AV";
    case Component::AttentionProjection:
      return "attention_projection";
    case Component::Mlp:
      return "mlp";
  }
  return "unknown";
}

void Profiler::reset() {
  totals_.fill(0.0);
  stack_.clear();
}

void Profiler::charge(Clock::time_point now) {
  if (!stack_.empty()) {
    totals_[static_cast<std::size_t>(stack_.back())] +=
        std::chrono::duration<double, std::micro>(now - started_).count();
  }
  started_ = now;
}

void Profiler::push(Component c) {
  charge(Clock::now());
  stack_.push_back(c);
}

void Profiler::pop() {
  if (stack_.empty()) throw std::logic_error("Profiler::pop without matching push");
  charge(Clock::now());
  stack_.pop_back();
}

}  // namespace levit
