#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include "levit/bench.hpp"
#include "levit/checks.hpp"
#include "levit/csv.hpp"
#include "levit/fusion.hpp"
#include "levit/trainer.hpp"
#include "test_util.hpp"

using namespace levit;
namespace fs = std::filesystem;

namespace {

struct Run {
  int status = -1;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(LEVIT_CLI) + " " + args + " 2>/dev/null";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf;
  for (std::size_t n; (n = fread(buf.data(), 1, buf.size(), pipe)) > 0;) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.status = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

CsvTable parse(const std::string& text) {
  std::istringstream in(text);
  return read_csv(in);
}

fs::path scratch(const std::string& name) {
  const auto p = fs::path(::testing::TempDir()) / ("cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const std::vector<std::string> kComponents = {"normalization", "keys_QK",  "values_V",
                                              "product_QKt",   "product_AV", "attention_projection",
                                              "mlp"};

}  // namespace

// ---- CSV reader --------------------------------------------------------------------

TEST(CsvTest, QuotedFieldsRoundTrip) {
  std::ostringstream out;
  write_csv_row(out, {"a", "b"});
  write_csv_row(out, {"x,y", "say \"hi\""});
  const auto t = parse(out.str());
  EXPECT_EQ(t.header, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(t.at(0, "a"), "x,y");
  EXPECT_EQ(t.at(0, "b"), "say \"hi\"");
}

TEST(CsvTest, MalformedInputRejected) {
  EXPECT_THROW(parse("a,b\n1\n"), CsvError);
  EXPECT_THROW(parse(""), CsvError);
  EXPECT_THROW(parse("a\n\"open\n"), CsvError);
  const auto t = parse("a\nzz\n");
  EXPECT_THROW(t.number(0, "a"), CsvError);
  EXPECT_THROW(t.column("b"), CsvError);
}

TEST(CsvTest, CostReportRoundTrip) {
  const auto report = count(preset("LeViT-192"));
  std::ostringstream out;
  write_cost_csv(out, report);
  const auto t = parse(out.str());
  ASSERT_EQ(t.rows.size(), report.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    EXPECT_EQ(t.at(i, "name"), report.rows[i].name);
    EXPECT_EQ(t.number(i, "macs"), static_cast<double>(report.rows[i].macs));
    EXPECT_EQ(t.number(i, "params"), static_cast<double>(report.rows[i].params));
    EXPECT_EQ(t.at(i, "out_shape"), shape_csv(report.rows[i].out_shape));
  }
}

TEST(CsvTest, CurveAndBenchRoundTrip) {
  const std::vector<CurvePoint> curve{{0, 1.25, 0.5}, {1, 0.1234567891, 0.75}};
  std::ostringstream c;
  write_curve_csv(c, curve);
  const auto ct = parse(c.str());
  ASSERT_EQ(ct.rows.size(), 2u);
  EXPECT_NEAR(ct.number(1, "loss"), 0.1234567891, 1e-9);
  EXPECT_EQ(ct.number(1, "accuracy"), 0.75);

  const std::vector<BenchRecord> bench{{"mlp", 30, 1.5, 0.25}, {"total", 30, 4.0, 0.5}};
  std::ostringstream b;
  write_bench_csv(b, bench);
  const auto bt = parse(b.str());
  EXPECT_EQ(bt.at(0, "component"), "mlp");
  EXPECT_EQ(bt.number(1, "median_ms"), 4.0);
  EXPECT_EQ(bt.number(1, "reps"), 30);
}

TEST(CsvTest, GridRoundTrip) {
  const Grid2d g{{1.5, -2.0, 0.1}, {3.0, 4.25, -1e-7}};
  std::ostringstream out;
  write_grid_csv(out, g);
  EXPECT_EQ(parse(out.str()).numbers(), g);
}

// ---- bench statistics --------------------------------------------------------------

TEST(BenchStatsTest, QuartilesInterpolate) {
  const auto s = summarize_samples({4, 1, 3, 2, 5});
  EXPECT_EQ(s.median, 3);
  EXPECT_EQ(s.iqr, 2);  // q75 = 4, q25 = 2
  const auto even = summarize_samples({1, 2, 3, 4});
  EXPECT_EQ(even.median, 2.5);
  EXPECT_EQ(even.iqr, 1.5);
  EXPECT_THROW(summarize_samples({}), std::invalid_argument);
}

TEST(BenchStatsTest, MinimumRepetitions) {
  BenchConfig c;
  c.reps = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c.reps = 3;
  EXPECT_NO_THROW(c.validate());
}

// ---- bias export -------------------------------------------------------------------

TEST(BiasExportTest, SingleOffsetExpandsToOneCell) {
  AttentionBias bias(2, Grid{4, 4}, 1, DType::F64);
  bias.table().set_value(1 * 16 + 0, 5.0);  // head 1, offset (0, 0)
  const auto row = upper_left_row(bias, 1);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(row[i][j], i == 0 && j == 0 ? 5.0 : 0.0);
  for (const auto& r : upper_left_row(bias, 0))
    for (double v : r) EXPECT_EQ(v, 0.0);
}

TEST(BiasExportTest, FreshModelExportsZeros) {
  const auto dir = scratch("zeros");
  const auto rows = export_bias(Model::build(toy_spec(), 1), dir.string());
  EXPECT_EQ(rows.size(), 2u * 2 + 3u * 2 + 4u * 2 + 4u + 6u);
  for (const auto& r : rows) {
    for (const auto& file : {r.table_file, r.upper_left_file}) {
      for (const auto& line : read_csv_file((dir / file).string()).numbers())
        for (double v : line) EXPECT_EQ(v, 0.0) << file;
    }
  }
  const auto index = read_csv_file((dir / "index.csv").string());
  EXPECT_EQ(index.rows.size(), rows.size());
}

TEST(BiasExportTest, NoTablesIsNamedError) {
  try {
    export_bias(Model::build(with_image_size(ablation("A5"), 64), 1), scratch("none").string());
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("attention_bias"), std::string::npos);
  }
}

// ---- command line ------------------------------------------------------------------

TEST(CliTest, SummaryPatchEmbedCost) {
  const auto r = cli("summary --model LeViT-256");
  ASSERT_EQ(r.status, 0);
  const auto t = parse(r.out);
  double embed = 0;
  for (std::size_t i = 0; i < t.rows.size(); ++i)
    if (t.at(i, "name").starts_with("patch_embed.")) embed += t.number(i, "macs");
  EXPECT_NEAR(embed, 184e6, 0.01 * 184e6);
}

TEST(CliTest, SummaryTotalsBothConventions) {
  const auto t = parse(cli("summary --model LeViT-128S").out);
  ASSERT_GE(t.rows.size(), 2u);
  const std::size_t last = t.rows.size() - 1;
  EXPECT_EQ(t.at(last - 1, "name"), "all_heads");
  EXPECT_EQ(t.at(last, "name"), "single_head");
  EXPECT_NEAR(t.number(last - 1, "macs"), 305e6, 0.01 * 305e6);
  EXPECT_GT(t.number(last - 1, "params"), t.number(last, "params"));
  // Per-layer rows add up to the total.
  double sum = 0;
  for (std::size_t i = 0; i + 2 < t.rows.size(); ++i) sum += t.number(i, "macs");
  EXPECT_EQ(sum, t.number(last, "macs"));
}

TEST(CliTest, SummaryBlockRowsForOneStageSpec) {
  const auto dir = scratch("spec");
  const auto path = (dir / "one_stage.json").string();
  nlohmann::json j = {{"name", "one-stage"},
                      {"image_size", 64},
                      {"embed_channels", {3, 8, 16, 32, 48}},
                      {"stages", {{{"depth", 3}, {"channels", 48}, {"heads", 3}, {"key_dim", 16}}}},
                      {"subsamples", nlohmann::json::array()},
                      {"num_classes", 10}};
  std::ofstream(path) << j.dump();
  const auto t = parse(cli("summary --blocks --spec " + path).out);
  ASSERT_EQ(t.rows.size(), 3u * 2 + 2 + 2);  // blocks, embed, head, two totals
  EXPECT_EQ(t.at(0, "name"), "patch_embed");
  EXPECT_EQ(t.at(7, "name"), "head");
}

TEST(CliTest, UnknownModelFails) {
  EXPECT_NE(cli("summary --model LeViT-999").status, 0);
  EXPECT_NE(cli("summary").status, 0);
  EXPECT_NE(cli("frobnicate").status, 0);
}

TEST(CliTest, BenchRejectsSingleRep) { EXPECT_NE(cli("bench --reps 1").status, 0); }

TEST(CliTest, BenchDecomposition) {
  const auto r = cli("bench --decompose --reps 10 --warmup 2");
  ASSERT_EQ(r.status, 0);
  const auto t = parse(r.out);
  ASSERT_EQ(t.rows.size(), kComponents.size() + 1);
  double sum = 0;
  for (std::size_t i = 0; i < kComponents.size(); ++i) {
    EXPECT_EQ(t.at(i, "component"), kComponents[i]);
    EXPECT_EQ(t.number(i, "reps"), 10);
    sum += t.number(i, "median_ms");
  }
  EXPECT_EQ(t.at(kComponents.size(), "component"), "total");
  const double total = t.number(kComponents.size(), "median_ms");
  EXPECT_NEAR(sum, total, 0.2 * total);
}

TEST(CliTest, FusedIsNotSlower) {
  // Timings are noisy on a shared core; the models run interleaved and a 2%
  // allowance absorbs scheduler jitter.
  const auto r = cli("bench --model LeViT-128S --image-size 64 --batch 4 --reps 40 --compare-fused");
  ASSERT_EQ(r.status, 0);
  const auto t = parse(r.out);
  ASSERT_EQ(t.at(0, "component"), "forward_unfused");
  ASSERT_EQ(t.at(1, "component"), "forward_fused");
  EXPECT_LE(t.number(1, "median_ms"), 1.02 * t.number(0, "median_ms"));
}

TEST(CliTest, FuseKeepsForwardParity) {
  const auto dir = scratch("fuse");
  const auto in = (dir / "w.lwa").string(), out = (dir / "wf.lwa").string();
  auto m = Model::build(with_image_size(preset("LeViT-128S"), 64), 3);
  randomize_norms_and_biases(m, 3);
  save_weights(m, in);
  ASSERT_EQ(cli("fuse --weights " + in + " --out " + out).status, 0);
  auto fused = load_weights(out);
  EXPECT_TRUE(fused.fused());
  std::mt19937_64 rng(4);
  const Tensor x = random_normal({2, 3, 64, 64}, rng);
  EXPECT_LT(max_abs_diff(fused.forward(x).logits, m.forward(x).logits), 1e-4);
  EXPECT_EQ(cli("fuse --weights " + (dir / "missing.lwa").string() + " --out " + out).status, 3);
}

TEST(CliTest, VerifySmallestPreset) {
  const auto r = cli("verify --model LeViT-128S");
  EXPECT_EQ(r.status, 0) << r.out;
  const auto t = parse(r.out);
  std::set<std::string> names;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    names.insert(t.at(i, "check"));
    EXPECT_EQ(t.at(i, "passed"), "1") << t.at(i, "check") << ": " << t.at(i, "detail");
  }
  for (const char* n : {"shapes", "softmax_rows", "bias_symmetry", "fusion_equivalence"})
    EXPECT_TRUE(names.contains(n)) << n;
}

TEST(CliTest, VerifyAblations) {
  for (const auto& a : ablation_names()) EXPECT_EQ(cli("verify --inputs 2 --model " + a).status, 0) << a;
}

TEST(CliTest, InitValidatesDtype) {
  const auto dir = scratch("init");
  EXPECT_NE(cli("init --model LeViT-128S --dtype f16 --out " + (dir / "w.lwa").string()).status, 0);
  ASSERT_EQ(cli("init --model LeViT-128S --dtype f64 --image-size 64 --out " + (dir / "w.lwa").string()).status, 0);
  EXPECT_EQ(load_weights((dir / "w.lwa").string()).dtype(), DType::F64);
}

TEST(CliTest, TrainWritesCurveAndWeights) {
  const auto dir = scratch("train");
  const auto cfg = (dir / "toy.json").string();
  std::ofstream(cfg) << nlohmann::json{{"model", "toy"},
                                       {"dataset", {{"samples", 64}}},
                                       {"train", {{"steps", 5}, {"batch_size", 8}}}}
                            .dump();
  const auto curve = (dir / "curve.csv").string(), weights = (dir / "w.lwa").string();
  const auto r = cli("train --config " + cfg + " --out " + curve + " --weights " + weights);
  ASSERT_EQ(r.status, 0);
  EXPECT_NE(r.out.find("final_accuracy="), std::string::npos);
  const auto t = read_csv_file(curve);
  ASSERT_EQ(t.rows.size(), 5u);
  EXPECT_EQ(t.header, (std::vector<std::string>{"step", "loss", "accuracy"}));
  EXPECT_TRUE(fs::exists(weights));

  // Same seeds, same curve.
  EXPECT_EQ(cli("train --config " + cfg).out, cli("train --config " + cfg).out);
}

TEST(CliTest, TrainDivergenceIsFailedRun) {
  const auto dir = scratch("diverge");
  const auto cfg = (dir / "bad.json").string();
  std::ofstream(cfg) << nlohmann::json{{"dataset", {{"samples", 32}}},
                                       {"train", {{"steps", 20}, {"batch_size", 8}, {"learning_rate", 1e12}}}}
                            .dump();
  EXPECT_EQ(cli("train --config " + cfg).status, 1);
}

TEST(CliTest, TrainedBiasExportIsFlipSymmetric) {
  const auto dir = scratch("export");
  const auto cfg = (dir / "toy.json").string();
  std::ofstream(cfg) << nlohmann::json{{"dataset", {{"samples", 64}}},
                                       {"train", {{"steps", 20}, {"batch_size", 16}}}}
                            .dump();
  const auto weights = (dir / "w.lwa").string();
  ASSERT_EQ(cli("train --config " + cfg + " --out " + (dir / "c.csv").string() + " --weights " + weights).status, 0);
  ASSERT_EQ(cli("export-bias --weights " + weights + " --out " + (dir / "bias").string()).status, 0);

  // Compare the exported upper-left rows against the lower-right query of the
  // loaded model, which must see the same values mirrored on both axes.
  const Model m = load_weights(weights);
  const auto index = read_csv_file((dir / "bias" / "index.csv").string());
  bool nonzero = false;
  for (std::size_t i = 0; i < index.rows.size(); ++i) {
    const auto& block = index.at(i, "block");
    if (!block.starts_with("stages.")) continue;
    const auto head = static_cast<std::int64_t>(index.number(i, "head"));
    const auto grid = read_csv_file((dir / "bias" / index.at(i, "upper_left_file")).string()).numbers();
    const AttentionBias* bias = nullptr;
    for (const auto& e : m.blocks())
      if (e.name == block) bias = dynamic_cast<const Attention&>(*e.module).bias();
    ASSERT_NE(bias, nullptr);
    const auto h = static_cast<std::int64_t>(grid.size()), w = static_cast<std::int64_t>(grid[0].size());
    for (std::int64_t x = 0; x < h; ++x)
      for (std::int64_t y = 0; y < w; ++y) {
        const double mirrored = bias->lookup(head, {h - 1, w - 1}, {h - 1 - x, w - 1 - y});
        EXPECT_NEAR(grid[x][y], mirrored, 1e-7) << block << " head " << head;
        nonzero = nonzero || grid[x][y] != 0;
      }
  }
  EXPECT_TRUE(nonzero) << "training left every bias at zero";
}
