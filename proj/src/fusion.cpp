#include "levit/fusion.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <vector>

namespace levit {

namespace {

void check_channels(const Tensor& t, std::int64_t channels, const char* what) {
  if (t.ndim() != 1 || t.dim(0) != channels) {
    throw ShapeError(std::string("fusion: ") + what + " must have shape (" +
                     std::to_string(channels) + "), got " + shape_str(t.shape()));
  }
}

}  // namespace

FoldedAffine fuse_conv_bn(const Tensor& weight, const Tensor& bias, const Tensor& gamma,
                          const Tensor& beta, const Tensor& mean, const Tensor& var,
                          double epsilon) {
  const std::int64_t cout = weight.dim(0);
  check_channels(gamma, cout, "gamma");
  check_channels(beta, cout, "beta");
  check_channels(mean, cout, "running mean");
  check_channels(var, cout, "running variance");
  if (bias.defined()) check_channels(bias, cout, "bias");

  const std::int64_t per_channel = weight.numel() / cout;
  std::vector<double> w = weight.to_vector();
  std::vector<double> b(static_cast<std::size_t>(cout));
  for (std::int64_t c = 0; c < cout; ++c) {
    const double factor = gamma.value(c) / std::sqrt(var.value(c) + epsilon);
    for (std::int64_t i = 0; i < per_channel; ++i) w[c * per_channel + i] *= factor;
    const double b0 = bias.defined() ? bias.value(c) : 0.0;
    b[c] = beta.value(c) + (b0 - mean.value(c)) * factor;
  }
  return {Tensor::from_values(weight.shape(), w, weight.dtype()),
          Tensor::from_values({cout}, b, weight.dtype())};
}

FoldedAffine fuse_bn_linear(const Tensor& gamma, const Tensor& beta, const Tensor& mean,
                            const Tensor& var, double epsilon, const Tensor& weight,
                            const Tensor& bias) {
  const std::int64_t k = weight.dim(0), c = weight.dim(1);
  check_channels(gamma, c, "gamma");
  check_channels(beta, c, "beta");
  check_channels(mean, c, "running mean");
  check_channels(var, c, "running variance");
  if (bias.defined()) check_channels(bias, k, "bias");

  std::vector<double> w = weight.to_vector();
  std::vector<double> b(static_cast<std::size_t>(k));
  std::vector<double> factor(static_cast<std::size_t>(c)), shift(static_cast<std::size_t>(c));
  for (std::int64_t j = 0; j < c; ++j) {
    factor[j] = gamma.value(j) / std::sqrt(var.value(j) + epsilon);
    shift[j] = beta.value(j) - mean.value(j) * factor[j];
  }
  for (std::int64_t i = 0; i < k; ++i) {
    double acc = bias.defined() ? bias.value(i) : 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      acc += w[i * c + j] * shift[j];
      w[i * c + j] *= factor[j];
    }
    b[i] = acc;
  }
  return {Tensor::from_values(weight.shape(), w, weight.dtype()),
          Tensor::from_values({k}, b, weight.dtype())};
}

FusionResult fuse_model(const Model& model) {
  if (model.mode() == Mode::Train) {
    throw std::logic_error("fuse_model: model is in train mode; switch to eval first");
  }
  Model copy = model.clone();
  if (model.fused()) return {std::move(copy), true};
  copy.fuse_in_place();
  return {std::move(copy), false};
}

// ---------------------------------------------------------------------------
// Archive
// ---------------------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little,
              "weight archives store raw little-endian element bytes");

constexpr char kMagic[8] = {'L', 'E', 'V', 'I', 'T', 'W', 'A', '\0'};

template <typename T>
void put(std::string& out, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  out.append(bytes, sizeof(T));
}

class Reader {
 public:
  Reader(std::vector<char> bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  template <typename T>
  T get(const char* what) {
    T v;
    std::memcpy(&v, take(sizeof(T), what), sizeof(T));
    return v;
  }
  const char* take(std::size_t n, const char* what) {
    if (n > bytes_.size() - pos_) {
      throw ArchiveError(ArchiveError::Kind::Truncated,
                         path_ + ": truncated while reading " + what + " at byte " +
                             std::to_string(pos_) + " (file has " +
                             std::to_string(bytes_.size()) + " bytes)");
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::vector<char> bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

struct Entry {
  std::string name;
  DType dtype;
  Shape shape;
  const char* data;
  std::size_t bytes;
};

struct Archive {
  std::uint32_t flags = 0;
  ModelSpec spec;
  std::vector<Entry> entries;
};

Archive parse(Reader& r, const std::string& path) {
  using Kind = ArchiveError::Kind;
  Archive a;
  if (std::memcmp(r.take(8, "magic"), kMagic, 8) != 0) {
    throw ArchiveError(Kind::BadMagic, path + ": not a weight archive (bad magic)");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kArchiveVersion) {
    throw ArchiveError(Kind::UnsupportedVersion, path + ": archive version " +
                                                     std::to_string(version) + ", expected " +
                                                     std::to_string(kArchiveVersion));
  }
  a.flags = r.get<std::uint32_t>("flags");
  const auto spec_len = r.get<std::uint64_t>("spec length");
  const char* spec_bytes = r.take(spec_len, "spec");
  try {
    a.spec = spec_from_json(nlohmann::json::parse(std::string(spec_bytes, spec_len)));
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(Kind::Corrupt, path + ": embedded spec is not valid JSON: " + e.what());
  } catch (const ConfigError& e) {
    throw ArchiveError(Kind::Corrupt, path + ": embedded spec is invalid: " + e.what());
  }
  const auto count = r.get<std::uint64_t>("entry count");
  std::map<std::string, bool> seen;
  for (std::uint64_t i = 0; i < count; ++i) {
    Entry e;
    const auto name_len = r.get<std::uint32_t>("entry name length");
    e.name.assign(r.take(name_len, "entry name"), name_len);
    if (seen[e.name]) throw ArchiveError(Kind::Corrupt, path + ": duplicate entry " + e.name);
    seen[e.name] = true;
    const auto tag = r.get<std::uint8_t>("dtype tag");
    if (tag > 1) throw ArchiveError(Kind::Corrupt, path + ": unknown dtype tag for " + e.name);
    e.dtype = tag == 0 ? DType::F32 : DType::F64;
    const auto ndim = r.get<std::uint32_t>("rank");
    for (std::uint32_t d = 0; d < ndim; ++d) {
      e.shape.push_back(static_cast<std::int64_t>(r.get<std::uint64_t>("dimension")));
    }
    e.bytes = r.get<std::uint64_t>("byte length");
    const auto want = static_cast<std::uint64_t>(shape_numel(e.shape)) * dtype_size(e.dtype);
    if (e.bytes != want) {
      throw ArchiveError(Kind::Corrupt, path + ": entry " + e.name + " declares " +
                                            std::to_string(e.bytes) + " bytes, shape needs " +
                                            std::to_string(want));
    }
    e.data = r.take(e.bytes, "tensor data");
    a.entries.push_back(std::move(e));
  }
  if (!r.done()) throw ArchiveError(Kind::Corrupt, path + ": trailing bytes after last entry");
  return a;
}

Tensor entry_tensor(const Entry& e) {
  const std::int64_t n = shape_numel(e.shape);
  std::vector<double> values(static_cast<std::size_t>(n));
  if (e.dtype == DType::F32) {
    std::vector<float> raw(static_cast<std::size_t>(n));
    std::memcpy(raw.data(), e.data, e.bytes);
    std::copy(raw.begin(), raw.end(), values.begin());
  } else {
    std::memcpy(values.data(), e.data, e.bytes);
  }
  return Tensor::from_values(e.shape, values, e.dtype);
}

void check_against(const StateList& expected, const Archive& a, const std::string& path) {
  using Kind = ArchiveError::Kind;
  std::map<std::string, const Entry*> by_name;
  for (const auto& e : a.entries) by_name[e.name] = &e;
  for (const auto& want : expected) {
    auto it = by_name.find(want.name);
    if (it == by_name.end()) {
      throw ArchiveError(Kind::ShapeMismatch, path + ": missing entry " + want.name);
    }
    if (it->second->shape != want.tensor.shape()) {
      throw ArchiveError(Kind::ShapeMismatch,
                         path + ": entry " + want.name + " has shape " +
                             shape_str(it->second->shape) + ", spec expects " +
                             shape_str(want.tensor.shape()));
    }
    by_name.erase(it);
  }
  if (!by_name.empty()) {
    throw ArchiveError(Kind::ShapeMismatch,
                       path + ": unexpected entry " + by_name.begin()->first);
  }
}

Model restore(const std::string& path, const ModelSpec* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError(ArchiveError::Kind::Io, "cannot open " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path);
  const Archive a = parse(r, path);
  const bool fused = a.flags & 1u;
  const DType dtype = a.entries.empty() ? DType::F32 : a.entries.front().dtype;

  auto skeleton = [&](const ModelSpec& spec) {
    Model m = Model::build(spec, 0, dtype);
    if (fused) m.fuse_in_place();
    return m;
  };
  if (expected) check_against(skeleton(*expected).state(), a, path);
  Model m = skeleton(a.spec);
  check_against(m.state(), a, path);

  StateList loaded;
  for (const auto& e : a.entries) loaded.push_back({e.name, entry_tensor(e), true});
  m.load_state(loaded);
  return m;
}

}  // namespace

void save_weights(const Model& model, const std::string& path) {
  std::string out(kMagic, 8);
  put<std::uint32_t>(out, kArchiveVersion);
  put<std::uint32_t>(out, model.fused() ? 1u : 0u);
  const std::string spec = spec_to_json(model.spec()).dump();
  put<std::uint64_t>(out, spec.size());
  out += spec;
  const StateList state = model.state();
  put<std::uint64_t>(out, state.size());
  for (const auto& e : state) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    const Tensor& t = e.tensor;
    put<std::uint8_t>(out, t.dtype() == DType::F32 ? 0 : 1);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
    for (auto d : t.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    const std::size_t bytes = static_cast<std::size_t>(t.numel()) * dtype_size(t.dtype());
    put<std::uint64_t>(out, bytes);
    if (t.dtype() == DType::F32) {
      const auto data = t.data<float>();
      out.append(reinterpret_cast<const char*>(data.data()), bytes);
    } else {
      const auto data = t.data<double>();
      out.append(reinterpret_cast<const char*>(data.data()), bytes);
    }
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw ArchiveError(ArchiveError::Kind::Io, "cannot write " + path);
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw ArchiveError(ArchiveError::Kind::Io, "write failed for " + path);
}

Model load_weights(const std::string& path) { return restore(path, nullptr); }

Model load_weights(const std::string& path, const ModelSpec& expected) {
  return restore(path, &expected);
}

}  // namespace levit
