#include "levit/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ostream>
#include <random>

#include <sched.h>

#include "levit/fusion.hpp"

namespace levit {

void BenchConfig::validate() const {
  if (reps < 3) throw ConfigError("reps: at least 3 repetitions are required");
  if (warmup < 0) throw ConfigError("warmup: must be non-negative");
  if (batch < 1) throw ConfigError("batch: must be at least 1");
}

Summary summarize_samples(std::vector<double> samples) {
  if (samples.empty()) throw std::invalid_argument("summarize_samples: no samples");
  std::sort(samples.begin(), samples.end());
  const auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(samples.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const auto hi = std::min(lo + 1, samples.size() - 1);
    return samples[lo] + (pos - static_cast<double>(lo)) * (samples[hi] - samples[lo]);
  };
  return {quantile(0.5), quantile(0.75) - quantile(0.25)};
}

std::string pin_current_thread() {
  cpu_set_t allowed;
  CPU_ZERO(&allowed);
  if (sched_getaffinity(0, sizeof allowed, &allowed) != 0) return "affinity unavailable";
  int cpu = -1;
  if (const char* env = std::getenv("LEVIT_PIN_CPU")) {
    const std::string v = env;
    if (v == "none" || v == "off") return "unpinned (LEVIT_PIN_CPU=" + v + ")";
    try {
      cpu = std::stoi(v);
    } catch (const std::exception&) {
      throw ConfigError("LEVIT_PIN_CPU: expected a CPU number or 'none', got '" + v + "'");
    }
    if (cpu < 0 || cpu >= CPU_SETSIZE || !CPU_ISSET(cpu, &allowed)) {
      throw ConfigError("LEVIT_PIN_CPU: CPU " + v + " is not available to this process");
    }
  } else {
    for (int c = 0; c < CPU_SETSIZE && cpu < 0; ++c)
      if (CPU_ISSET(c, &allowed)) cpu = c;
    if (cpu < 0) return "no CPU in affinity mask";
  }
  cpu_set_t one;
  CPU_ZERO(&one);
  CPU_SET(cpu, &one);
  if (sched_setaffinity(0, sizeof one, &one) != 0) return "pinning refused by the platform";
  return "pinned to CPU " + std::to_string(cpu);
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

}  // namespace

BenchRecord bench_forward(Model& model, const BenchConfig& config, const std::string& label) {
  config.validate();
  model.eval();
  NoGradGuard no_grad;
  std::mt19937_64 rng(config.seed);
  const std::int64_t s = model.spec().image_size;
  const Tensor x = random_normal({config.batch, 3, s, s}, rng, 1.0, model.dtype());
  for (int i = 0; i < config.warmup; ++i) model.forward(x);
  std::vector<double> times;
  for (int i = 0; i < config.reps; ++i) {
    const auto start = Clock::now();
    model.forward(x);
    times.push_back(elapsed_ms(start));
  }
  const auto stats = summarize_samples(times);
  return {label, config.reps, stats.median, stats.iqr};
}

std::vector<BenchRecord> bench_interleaved(Model& a, Model& b, const BenchConfig& config,
                                           const std::string& label_a, const std::string& label_b) {
  config.validate();
  if (a.spec().image_size != b.spec().image_size || a.dtype() != b.dtype()) {
    throw ConfigError("interleaved bench needs models with the same input size and dtype");
  }
  a.eval();
  b.eval();
  NoGradGuard no_grad;
  std::mt19937_64 rng(config.seed);
  const std::int64_t s = a.spec().image_size;
  const Tensor x = random_normal({config.batch, 3, s, s}, rng, 1.0, a.dtype());
  for (int i = 0; i < config.warmup; ++i) {
    a.forward(x);
    b.forward(x);
  }
  std::vector<double> ta, tb;
  for (int i = 0; i < config.reps; ++i) {
    // Alternate which model goes first so neither always runs on a warm cache.
    Model& first = i % 2 ? b : a;
    Model& second = i % 2 ? a : b;
    auto start = Clock::now();
    first.forward(x);
    const double t1 = elapsed_ms(start);
    start = Clock::now();
    second.forward(x);
    const double t2 = elapsed_ms(start);
    ta.push_back(i % 2 ? t2 : t1);
    tb.push_back(i % 2 ? t1 : t2);
  }
  const auto sa = summarize_samples(ta), sb = summarize_samples(tb);
  return {{label_a, config.reps, sa.median, sa.iqr}, {label_b, config.reps, sb.median, sb.iqr}};
}

std::vector<BenchRecord> bench_decomposed(const BenchConfig& config, bool fused,
                                          const ModelSpec& spec) {
  config.validate();
  Model model = Model::build(spec, config.seed);
  if (fused) model.fuse_in_place();
  Module& attn = model.block("stages.0.0.attn");
  Module& mlp = model.block("stages.0.0.mlp");

  const auto& st = spec.stages.front();
  std::mt19937_64 rng(config.seed + 1);
  const Tensor x =
      random_normal({config.batch, st.channels, st.grid.height, st.grid.width}, rng, 1.0);

  NoGradGuard no_grad;
  Profiler profiler;
  ForwardContext ctx{Mode::Eval, nullptr, &profiler};
  std::vector<std::vector<double>> parts(kComponentCount);
  std::vector<double> totals;
  for (int i = 0; i < config.warmup + config.reps; ++i) {
    profiler.reset();
    const auto start = Clock::now();
    mlp.forward(attn.forward(x, ctx), ctx);
    const double total = elapsed_ms(start);
    if (i < config.warmup) continue;
    totals.push_back(total);
    for (std::size_t c = 0; c < kComponentCount; ++c) parts[c].push_back(profiler.totals_us()[c] / 1e3);
  }

  std::vector<BenchRecord> out;
  for (std::size_t c = 0; c < kComponentCount; ++c) {
    const auto s = summarize_samples(parts[c]);
    out.push_back({std::string(component_name(static_cast<Component>(c))), config.reps, s.median, s.iqr});
  }
  const auto s = summarize_samples(totals);
  out.push_back({"total", config.reps, s.median, s.iqr});
  return out;
}

void write_bench_csv(std::ostream& out, const std::vector<BenchRecord>& records) {
  out << "component,reps,median_ms,iqr_ms\n";
  out.precision(6);
  for (const auto& r : records) {
    out << r.component << "," << r.reps << "," << r.median_ms << "," << r.iqr_ms << "\n";
  }
}

}  // namespace levit
