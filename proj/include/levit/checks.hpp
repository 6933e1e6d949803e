#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "levit/model.hpp"

namespace levit {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerifyOptions {
  std::int64_t image_size = 64;  // reduced input keeps the suite quick
  int inputs = 10;
  std::uint64_t seed = 0;
};

// Property suite run by the verify command: stage shapes, softmax rows,
// bias-table symmetry, identity blocks at init, fusion equivalence, determinism.
std::vector<CheckResult> verify_model(const ModelSpec& spec, const VerifyOptions& options = {});

// Sets every BN's affine and running statistics, and every bias table, to
// random values so that equivalence checks exercise them.
void randomize_norms_and_biases(Model& model, std::uint64_t seed);

using Grid2d = std::vector<std::vector<double>>;

// Offset table of one head, H x W.
Grid2d bias_table(const AttentionBias& bias, std::int64_t head);
// Bias added to the logits of the upper-left query, laid out over the key grid.
Grid2d upper_left_row(const AttentionBias& bias, std::int64_t head);

void write_grid_csv(std::ostream& out, const Grid2d& grid);

struct BiasExport {
  std::string block;
  std::int64_t head = 0;
  std::string table_file;
  std::string upper_left_file;
  double min = 0;
  double max = 0;
};

// Writes <block>.head<h>.table.csv and <block>.head<h>.upper_left.csv for every
// attention block, plus index.csv. Throws ConfigError when the model has no
// bias tables.
std::vector<BiasExport> export_bias(const Model& model, const std::string& dir);

}  // namespace levit
