#include "levit/checks.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <random>
#include <sstream>

#include "levit/csv.hpp"
#include "levit/fusion.hpp"

namespace levit {

void randomize_norms_and_biases(Model& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto fill = [&](Tensor& t, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set_value(i, u(rng));
  };
  for (auto& e : model.state()) {
    const auto& n = e.name;
    if (n.ends_with("bn.weight") || n.ends_with("norm.weight")) fill(e.tensor, 0.5, 1.5);
    if (n.ends_with("bn.bias") || n.ends_with("norm.bias")) fill(e.tensor, -0.2, 0.2);
    if (n.ends_with("running_mean")) fill(e.tensor, -0.2, 0.2);
    if (n.ends_with("running_var")) fill(e.tensor, 0.5, 2.0);
    if (n.ends_with("attention_bias")) fill(e.tensor, -1.0, 1.0);
  }
}

namespace {

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

std::string exact(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

std::vector<Attention*> attentions(const Model& model) {
  std::vector<Attention*> out;
  for (const auto& e : model.blocks())
    if (auto* a = dynamic_cast<Attention*>(e.module.get())) out.push_back(a);
  return out;
}

CheckResult check_shapes(Model& model, const Tensor& x) {
  const auto& spec = model.spec();
  const auto outs = model.forward_stages(x);
  if (outs.size() != spec.stages.size()) return {"shapes", false, "wrong number of stages"};
  for (std::size_t s = 0; s < outs.size(); ++s) {
    const auto& st = spec.stages[s];
    const Shape want{x.dim(0), st.channels, st.grid.height, st.grid.width};
    if (outs[s].shape() != want) {
      return {"shapes", false,
              "stage " + std::to_string(s) + " gave " + shape_str(outs[s].shape()) +
                  ", expected " + shape_str(want)};
    }
  }
  const auto out = model.forward(x);
  const Shape logits{x.dim(0), spec.num_classes};
  if (out.logits.shape() != logits) return {"shapes", false, "logits " + shape_str(out.logits.shape())};
  for (const auto& h : out.head_logits)
    if (h.shape() != logits) return {"shapes", false, "head logits " + shape_str(h.shape())};
  return {"shapes", true, std::to_string(outs.size()) + " stages"};
}

// Walks the blocks on real activations; `visit` sees each block with its input.
template <typename F>
void walk(Model& model, const Tensor& images, F&& visit) {
  ForwardContext ctx;
  Tensor x = model.embed(images);
  for (const auto& e : model.blocks()) {
    visit(e, x, ctx);
    x = e.module->forward(x, ctx);
  }
}

CheckResult check_softmax(Model& model, const Tensor& images) {
  double worst = 0, lowest = 0;
  walk(model, images, [&](const Model::Entry& e, const Tensor& x, ForwardContext& ctx) {
    auto* a = dynamic_cast<Attention*>(e.module.get());
    if (!a) return;
    const Tensor w = a->attention_weights(x, ctx);
    const auto v = w.to_vector();
    const auto tk = static_cast<std::size_t>(w.dim(3));
    for (std::size_t r = 0; r < v.size() / tk; ++r) {
      double sum = 0;
      for (std::size_t k = 0; k < tk; ++k) {
        sum += v[r * tk + k];
        lowest = std::min(lowest, v[r * tk + k]);
      }
      worst = std::max(worst, std::abs(sum - 1));
    }
  });
  const bool ok = worst < 1e-5 && lowest >= 0;
  return {"softmax_rows", ok, "max |row sum - 1| = " + fmt(worst)};
}

CheckResult check_bias(const Model& model) {
  std::int64_t tables = 0;
  std::string failure;
  for (const Attention* a : attentions(model)) {
    const AttentionBias* b = a->bias();
    if (!b) continue;
    ++tables;
    const Tensor e = b->expanded();
    const Grid kg = b->key_grid(), qg = b->query_grid();
    const std::int64_t tq = qg.tokens(), tk = kg.tokens();
    const auto E = [&](std::int64_t h, std::int64_t q, std::int64_t k) {
      return e.value((h * tq + q) * tk + k);
    };
    const int s = b->query_stride();
    for (std::int64_t h = 0; h < b->heads() && failure.empty(); ++h)
      for (std::int64_t q = 0; q < tq && failure.empty(); ++q)
        for (std::int64_t k = 0; k < tk; ++k) {
          const std::int64_t qx = s * (q / qg.width), qy = s * (q % qg.width);
          const std::int64_t kx = k / kg.width, ky = k % kg.width;
          const double want = b->table().value((h * kg.height + std::abs(qx - kx)) * kg.width +
                                               std::abs(qy - ky));
          bool ok = E(h, q, k) == want;
          if (s == 1) {
            const auto flip_rows = [&](std::int64_t t) {
              return (kg.height - 1 - t / kg.width) * kg.width + t % kg.width;
            };
            const auto flip_cols = [&](std::int64_t t) {
              return (t / kg.width) * kg.width + (kg.width - 1 - t % kg.width);
            };
            ok = ok && E(h, q, k) == E(h, k, q) && E(h, flip_rows(q), flip_rows(k)) == E(h, q, k) &&
                 E(h, flip_cols(q), flip_cols(k)) == E(h, q, k);
          }
          if (!ok) {
            failure = "head " + std::to_string(h) + " query " + std::to_string(q) + " key " +
                      std::to_string(k);
            break;
          }
        }
    if (!failure.empty()) return {"bias_symmetry", false, failure};
  }
  return {"bias_symmetry", true, std::to_string(tables) + " tables"};
}

CheckResult check_identity(Model& model, const Tensor& images) {
  std::int64_t blocks = 0;
  double worst = 0;
  walk(model, images, [&](const Model::Entry& e, const Tensor& x, ForwardContext& ctx) {
    if (!e.module->residual()) return;
    ++blocks;
    worst = std::max(worst, max_abs_diff(e.module->forward(x, ctx), x));
  });
  return {"identity_at_init", worst == 0, std::to_string(blocks) + " residual blocks, max diff " + fmt(worst)};
}

}  // namespace

std::vector<CheckResult> verify_model(const ModelSpec& spec, const VerifyOptions& options) {
  const ModelSpec s = with_image_size(spec, options.image_size);
  std::vector<CheckResult> out;
  std::mt19937_64 rng(options.seed + 1);
  const Tensor x = random_normal({2, 3, s.image_size, s.image_size}, rng);

  Model fresh = Model::build(s, options.seed);
  NoGradGuard no_grad;
  out.push_back(check_shapes(fresh, x));
  if (s.norm == NormKind::BatchNorm) out.push_back(check_identity(fresh, x));

  Model perturbed = fresh.clone();
  randomize_norms_and_biases(perturbed, options.seed + 2);
  out.push_back(check_softmax(perturbed, x));
  out.push_back(check_bias(perturbed));

  {
    Model fused = fuse_model(perturbed).model;
    double worst = 0;
    for (int i = 0; i < options.inputs; ++i) {
      const Tensor xi = random_normal({1, 3, s.image_size, s.image_size}, rng);
      worst = std::max(worst, max_abs_diff(fused.forward(xi).logits, perturbed.forward(xi).logits));
    }
    out.push_back({"fusion_equivalence", worst < 1e-4,
                   "max |fused - unfused| = " + fmt(worst) + " over " +
                       std::to_string(options.inputs) + " inputs"});
  }
  {
    Model again = Model::build(s, options.seed);
    const bool same = fresh.forward(x).logits.to_vector() == again.forward(x).logits.to_vector();
    out.push_back({"determinism", same, same ? "identical logits" : "logits differ"});
  }
  return out;
}

Grid2d bias_table(const AttentionBias& bias, std::int64_t head) {
  const Grid g = bias.key_grid();
  Grid2d out(static_cast<std::size_t>(g.height), std::vector<double>(static_cast<std::size_t>(g.width)));
  for (std::int64_t i = 0; i < g.height; ++i)
    for (std::int64_t j = 0; j < g.width; ++j)
      out[i][j] = bias.table().value((head * g.height + i) * g.width + j);
  return out;
}

Grid2d upper_left_row(const AttentionBias& bias, std::int64_t head) {
  const Grid g = bias.key_grid();
  const Tensor e = bias.expanded();
  const std::int64_t tq = bias.query_grid().tokens(), tk = g.tokens();
  Grid2d out(static_cast<std::size_t>(g.height), std::vector<double>(static_cast<std::size_t>(g.width)));
  for (std::int64_t k = 0; k < tk; ++k) out[k / g.width][k % g.width] = e.value(head * tq * tk + k);
  return out;
}

void write_grid_csv(std::ostream& out, const Grid2d& grid) {
  out.precision(9);
  const std::size_t w = grid.empty() ? 0 : grid.front().size();
  for (std::size_t j = 0; j < w; ++j) out << (j ? "," : "") << "c" << j;
  out << "\n";
  for (const auto& row : grid) {
    for (std::size_t j = 0; j < row.size(); ++j) out << (j ? "," : "") << row[j];
    out << "\n";
  }
}

std::vector<BiasExport> export_bias(const Model& model, const std::string& dir) {
  std::vector<std::pair<std::string, const AttentionBias*>> tables;
  for (const auto& e : model.blocks()) {
    if (const auto* a = dynamic_cast<const Attention*>(e.module.get()); a && a->bias()) {
      tables.emplace_back(e.name, a->bias());
    }
  }
  if (tables.empty()) {
    throw ConfigError("model '" + model.spec().name +
                      "' has no attention_bias entries (it uses absolute position embedding)");
  }
  std::filesystem::create_directories(dir);
  const auto write = [&](const std::string& file, const Grid2d& g) {
    std::ofstream out(std::filesystem::path(dir) / file);
    if (!out) throw std::runtime_error("cannot write " + file + " in " + dir);
    write_grid_csv(out, g);
  };
  std::vector<BiasExport> out;
  for (const auto& [block, bias] : tables) {
    for (std::int64_t h = 0; h < bias->heads(); ++h) {
      BiasExport r;
      r.block = block;
      r.head = h;
      r.table_file = block + ".head" + std::to_string(h) + ".table.csv";
      r.upper_left_file = block + ".head" + std::to_string(h) + ".upper_left.csv";
      const auto table = bias_table(*bias, h);
      r.min = INFINITY;
      r.max = -INFINITY;
      for (const auto& row : table)
        for (double v : row) {
          r.min = std::min(r.min, v);
          r.max = std::max(r.max, v);
        }
      write(r.table_file, table);
      write(r.upper_left_file, upper_left_row(*bias, h));
      out.push_back(r);
    }
  }
  std::ofstream index(std::filesystem::path(dir) / "index.csv");
  index << "block,head,table_file,upper_left_file,min,max\n";
  for (const auto& r : out) {
    write_csv_row(index, {r.block, std::to_string(r.head), r.table_file, r.upper_left_file,
                          exact(r.min), exact(r.max)});
  }
  return out;
}

}  // namespace levit
