#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "levit/model.hpp"

namespace levit {

struct BenchConfig {
  int reps = 30;
  int warmup = 5;
  std::int64_t batch = 1;
  std::uint64_t seed = 0;
  void validate() const;  // reps >= 3, warmup >= 0, batch >= 1
};

struct BenchRecord {
  std::string component;
  int reps = 0;
  double median_ms = 0;
  double iqr_ms = 0;  // q75 - q25
};

struct Summary {
  double median = 0;
  double iqr = 0;
};
// Linear-interpolated quartiles of `samples` (at least one value).
Summary summarize_samples(std::vector<double> samples);

// Restricts the process to one CPU. LEVIT_PIN_CPU=<n> picks the CPU,
// LEVIT_PIN_CPU=none skips pinning; otherwise the first allowed CPU is used.
// Returns a short description of what happened.
std::string pin_current_thread();

// Whole-model forward passes on random (batch, 3, S, S) input. Eval mode.
BenchRecord bench_forward(Model& model, const BenchConfig& config, const std::string& label);

// Two models timed in alternation, rep by rep, so slow drifts of the machine
// affect both equally. Both must take the same input size.
std::vector<BenchRecord> bench_interleaved(Model& a, Model& b, const BenchConfig& config,
                                           const std::string& label_a, const std::string& label_b);

// One attention + MLP pair from the first stage of `spec` (default LeViT-256),
// timed per component, followed by a "total" row for the whole pair.
std::vector<BenchRecord> bench_decomposed(const BenchConfig& config, bool fused,
                                          const ModelSpec& spec = preset("LeViT-256"));

void write_bench_csv(std::ostream& out, const std::vector<BenchRecord>& records);

}  // namespace levit
