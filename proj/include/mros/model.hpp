#pragma once

// Multi-resolution overlapping-stripe head.
//
// Two backbone feature maps (t3, t4) are cut into s equal horizontal stripes.
// Adjacent stripes are average-pooled in pairs, giving s-1 vectors per map
// (g3, g4). The descriptor G concatenates the raw pooled rows; each stripe
// vector additionally passes its own batch norm (h) and classifier (logits).

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mros/error.hpp"
#include "mros/tensor.hpp"
#include "mros/tensor_io.hpp"

namespace mros {

// ---------------------------------------------------------------------------
// Stripe pooling

inline void check_stripe_geometry(const Tensor& t, std::size_t s) {
  if (t.rank() != 3) raise<GeometryError>("stripe pooling expects C×H×W, got ", shape_str(t.shape()));
  if (s == 0 || t.dim(1) % s != 0) {
    raise<GeometryError>("feature height H=", t.dim(1), " is not divisible into s=", s, " stripes");
  }
}

// s contiguous, equal-height stripes ordered top to bottom.
inline std::vector<Tensor> partition_stripes(const Tensor& t, std::size_t s) {
  check_stripe_geometry(t, s);
  if (s == 1) return {t};
  const std::size_t hs = t.dim(1) / s;
  std::vector<Tensor> stripes;
  stripes.reserve(s);
  for (std::size_t k = 0; k < s; ++k) stripes.push_back(slice(t, 1, k * hs, (k + 1) * hs));
  return stripes;
}

// Row i = per-channel mean over stripes i and i+1. Result is (s-1)×C.
inline Tensor overlap_pool(const Tensor& t, std::size_t s) {
  check_stripe_geometry(t, s);
  if (s < 2) raise<GeometryError>("overlapping pooling needs s >= 2 (got s=", s, "), no stripe pairs exist");
  const std::size_t hs = t.dim(1) / s;
  std::vector<Tensor> rows;
  rows.reserve(s - 1);
  for (std::size_t i = 0; i + 1 < s; ++i) rows.push_back(mean_over_region(t, i * hs, (i + 2) * hs));
  return stack(rows);
}

// Row k = per-channel mean over stripe k alone. Result is s×C.
inline Tensor non_overlap_pool(const Tensor& t, std::size_t s) {
  check_stripe_geometry(t, s);
  const std::size_t hs = t.dim(1) / s;
  std::vector<Tensor> rows;
  rows.reserve(s);
  for (std::size_t k = 0; k < s; ++k) rows.push_back(mean_over_region(t, k * hs, (k + 1) * hs));
  return stack(rows);
}

// ---------------------------------------------------------------------------
// Head configuration

enum class StripePooling { kNonOverlapping, kOverlapping };

// Model wirings used by the ablation study.
//   I   non-overlapping stripes on t4, all losses per stripe
//   II  overlapping stripes on t4, all losses per stripe
//   III II + triplet/center on the concatenated descriptor
//   IV  III + the t3 resolution
enum class AblationSetting { kI, kII, kIII, kIV };

inline const char* setting_name(AblationSetting s) {
  switch (s) {
    case AblationSetting::kI: return "I";
    case AblationSetting::kII: return "II";
    case AblationSetting::kIII: return "III";
    case AblationSetting::kIV: return "IV";
  }
  return "?";
}

struct HeadConfig {
  std::size_t stripes = 6;
  StripePooling pooling = StripePooling::kOverlapping;
  bool multi_resolution = true;
  bool global_metric = true;
  std::size_t c3 = 1024;
  std::size_t c4 = 2048;
  std::size_t num_classes = 751;
  BatchNormOptions bn{};
  double fc_init_std = 0.001;

  std::size_t rows_per_resolution() const {
    return pooling == StripePooling::kOverlapping ? stripes - 1 : stripes;
  }
  std::size_t num_resolutions() const { return multi_resolution ? 2 : 1; }
  std::size_t num_stripe_heads() const { return rows_per_resolution() * num_resolutions(); }
  std::size_t descriptor_dim() const {
    return rows_per_resolution() * ((multi_resolution ? c3 : 0) + c4);
  }

  void validate() const {
    if (stripes == 0) raise<ConfigError>("stripe count must be positive");
    if (pooling == StripePooling::kOverlapping && stripes < 2) {
      raise<ConfigError>("overlapping stripes need s >= 2, got ", stripes);
    }
    if (c4 == 0 || (multi_resolution && c3 == 0)) raise<ConfigError>("channel counts must be positive");
    if (num_classes < 2) raise<ConfigError>("need at least 2 classes, got ", num_classes);
  }
};

inline HeadConfig apply_setting(HeadConfig cfg, AblationSetting setting) {
  cfg.pooling = setting == AblationSetting::kI ? StripePooling::kNonOverlapping : StripePooling::kOverlapping;
  cfg.global_metric = setting == AblationSetting::kIII || setting == AblationSetting::kIV;
  cfg.multi_resolution = setting == AblationSetting::kIV;
  return cfg;
}

inline Tensor pool_stripes(const Tensor& t, const HeadConfig& cfg) {
  return cfg.pooling == StripePooling::kOverlapping ? overlap_pool(t, cfg.stripes)
                                                    : non_overlap_pool(t, cfg.stripes);
}

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// ---------------------------------------------------------------------------
// Head parameters

struct StripeHead {
  int resolution = 4;  // 3 or 4
  std::size_t row = 0;
  Tensor gamma;
  Tensor beta;
  RunningStats stats;
  Tensor weight;  // C × num_classes
  Tensor bias;    // num_classes
};

struct HeadParams {
  // Resolution-3 stripes first (when present), then resolution 4, each top to bottom.
  std::vector<StripeHead> stripes;

  static HeadParams init(const HeadConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    HeadParams p;
    std::normal_distribution<double> normal(0.0, cfg.fc_init_std);
    auto add_resolution = [&](int res, std::size_t channels) {
      for (std::size_t row = 0; row < cfg.rows_per_resolution(); ++row) {
        StripeHead h;
        h.resolution = res;
        h.row = row;
        h.gamma = Tensor::full({channels}, 1.0, true);
        h.beta = Tensor::zeros({channels}, true);
        h.stats = RunningStats::identity(channels);
        std::vector<double> w(channels * cfg.num_classes);
        for (auto& v : w) v = normal(rng);
        h.weight = Tensor({channels, cfg.num_classes}, std::move(w), true);
        h.bias = Tensor::zeros({cfg.num_classes}, true);
        p.stripes.push_back(std::move(h));
      }
    };
    if (cfg.multi_resolution) add_resolution(3, cfg.c3);
    add_resolution(4, cfg.c4);
    return p;
  }

  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> out;
    for (const auto& h : stripes) {
      const std::string prefix = "head.r" + std::to_string(h.resolution) + ".s" + std::to_string(h.row) + ".";
      out.push_back({prefix + "bn.gamma", h.gamma});
      out.push_back({prefix + "bn.beta", h.beta});
      out.push_back({prefix + "fc.weight", h.weight});
      out.push_back({prefix + "fc.bias", h.bias});
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Forward pass

struct BackboneOutput {
  Tensor t3;  // C3×H3×W3
  Tensor t4;  // C4×H4×W4
};

struct HeadOutput {
  Tensor descriptor;           // G, m × descriptor_dim
  Tensor g3;                   // m × rows × C3 (undefined without resolution 3)
  Tensor g4;                   // m × rows × C4
  std::vector<Tensor> h;       // per stripe head, m × C
  std::vector<Tensor> logits;  // per stripe head, m × num_classes

  // Features the metric losses act on: {G} for a global head, otherwise
  // the individual resolution-4 stripe rows.
  std::vector<Tensor> metric_features(const HeadConfig& cfg) const {
    if (cfg.global_metric) return {descriptor};
    std::vector<Tensor> rows;
    for (std::size_t r = 0; r < g4.dim(1); ++r) rows.push_back(select(g4, 1, r));
    return rows;
  }
};

inline void check_backbone_geometry(const BackboneOutput& bo, const HeadConfig& cfg) {
  if (!bo.t4.defined() || bo.t4.rank() != 3 || bo.t4.dim(0) != cfg.c4) {
    raise<ConfigError>("t4 shape ", bo.t4.defined() ? shape_str(bo.t4.shape()) : "<none>",
                       " does not match configured C4=", cfg.c4);
  }
  if (cfg.multi_resolution && (!bo.t3.defined() || bo.t3.rank() != 3 || bo.t3.dim(0) != cfg.c3)) {
    raise<ConfigError>("t3 shape ", bo.t3.defined() ? shape_str(bo.t3.shape()) : "<none>",
                       " does not match configured C3=", cfg.c3);
  }
}

// Pooled rows and descriptor only; no batch norm or classifier.
inline HeadOutput pool_head(std::span<const BackboneOutput> batch, const HeadConfig& cfg) {
  if (batch.empty()) raise<ContractError>("forward_head: empty batch");
  HeadOutput out;
  std::vector<Tensor> p3, p4;
  for (const auto& bo : batch) {
    check_backbone_geometry(bo, cfg);
    if (cfg.multi_resolution) p3.push_back(pool_stripes(bo.t3, cfg));
    p4.push_back(pool_stripes(bo.t4, cfg));
  }
  const std::size_t m = batch.size(), rows = cfg.rows_per_resolution();
  out.g4 = stack(p4);
  auto flat4 = reshape(out.g4, {m, rows * cfg.c4});
  if (cfg.multi_resolution) {
    out.g3 = stack(p3);
    out.descriptor = concat({reshape(out.g3, {m, rows * cfg.c3}), flat4}, 1);
  } else {
    out.descriptor = flat4;
  }
  return out;
}

inline HeadOutput forward_head(std::span<const BackboneOutput> batch, HeadParams& params,
                               const HeadConfig& cfg, Mode mode) {
  if (params.stripes.size() != cfg.num_stripe_heads()) {
    raise<ConfigError>("head has ", params.stripes.size(), " stripe heads, configuration needs ",
                       cfg.num_stripe_heads());
  }
  HeadOutput out = pool_head(batch, cfg);
  for (auto& head : params.stripes) {
    const Tensor& g = head.resolution == 3 ? out.g3 : out.g4;
    auto x = select(g, 1, head.row);
    if (head.weight.dim(0) != x.dim(1)) {
      raise<ConfigError>("classifier input width ", head.weight.dim(0), " != stripe width ", x.dim(1));
    }
    auto h = batch_norm_1d(x, head.gamma, head.beta, head.stats, mode, cfg.bn);
    out.logits.push_back(add_bias(matmul(h, head.weight), head.bias));
    out.h.push_back(std::move(h));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backbones

// What a backbone gets for one image: the pixels (for convolutional
// backbones) and a stable identifier (for feature lookup).
struct BackboneInput {
  std::string image_id;
  Tensor pixels;
};

class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual BackboneOutput forward(const BackboneInput& input) const = 0;
  virtual std::vector<NamedTensor> parameters() const = 0;
  virtual Shape t3_shape() const = 0;
  virtual Shape t4_shape() const = 0;
  virtual bool needs_pixels() const = 0;
};

struct ToyBackboneConfig {
  std::size_t input_height = 48;
  std::size_t input_width = 24;
  std::size_t input_channels = 3;
  // Output channels per block; t3 is the second-to-last block, t4 the last.
  std::vector<std::size_t> widths{16, 32, 64};
  std::size_t kernel = 2;
  std::size_t stride = 2;
};

// Stack of conv + bias + ReLU blocks standing in for a pretrained CNN.
class ToyBackbone final : public Backbone {
 public:
  ToyBackbone(ToyBackboneConfig cfg, std::size_t stripes, std::mt19937_64& rng) : cfg_(std::move(cfg)) {
    if (cfg_.widths.size() < 2) raise<ConfigError>("toy backbone needs at least two blocks");
    std::size_t h = cfg_.input_height, w = cfg_.input_width, cin = cfg_.input_channels;
    for (std::size_t b = 0; b < cfg_.widths.size(); ++b) {
      if (h < cfg_.kernel || w < cfg_.kernel) {
        raise<GeometryError>("toy backbone block ", b, " receives ", h, "x", w, " map, smaller than kernel ",
                             cfg_.kernel);
      }
      h = (h - cfg_.kernel) / cfg_.stride + 1;
      w = (w - cfg_.kernel) / cfg_.stride + 1;
      const std::size_t cout = cfg_.widths[b];
      const double std = std::sqrt(2.0 / static_cast<double>(cin * cfg_.kernel * cfg_.kernel));
      std::normal_distribution<double> normal(0.0, std);
      std::vector<double> k(cout * cin * cfg_.kernel * cfg_.kernel);
      for (auto& v : k) v = normal(rng);
      kernels_.push_back(Tensor({cout, cin, cfg_.kernel, cfg_.kernel}, std::move(k), true));
      biases_.push_back(Tensor::zeros({cout}, true));
      shapes_.push_back({cout, h, w});
      cin = cout;
    }
    for (const auto& s : {t3_shape(), t4_shape()}) {
      if (s[1] % stripes != 0) {
        raise<GeometryError>("toy backbone output height ", s[1], " is not divisible by s=", stripes);
      }
    }
  }

  BackboneOutput forward(const BackboneInput& input) const override {
    const Tensor& x0 = input.pixels;
    if (!x0.defined() || x0.shape() != Shape{cfg_.input_channels, cfg_.input_height, cfg_.input_width}) {
      raise<DimensionError>("toy backbone expects input ",
                            shape_str({cfg_.input_channels, cfg_.input_height, cfg_.input_width}), ", got ",
                            x0.defined() ? shape_str(x0.shape()) : "<none>");
    }
    BackboneOutput out;
    Tensor x = x0;
    for (std::size_t b = 0; b < kernels_.size(); ++b) {
      x = relu(add_channel_bias(conv2d(x, kernels_[b], cfg_.stride), biases_[b]));
      if (b + 2 == kernels_.size()) out.t3 = x;
    }
    out.t4 = x;
    return out;
  }

  std::vector<NamedTensor> parameters() const override {
    std::vector<NamedTensor> out;
    for (std::size_t b = 0; b < kernels_.size(); ++b) {
      out.push_back({"backbone.block" + std::to_string(b) + ".kernel", kernels_[b]});
      out.push_back({"backbone.block" + std::to_string(b) + ".bias", biases_[b]});
    }
    return out;
  }

  Shape t3_shape() const override { return shapes_[shapes_.size() - 2]; }
  Shape t4_shape() const override { return shapes_.back(); }
  bool needs_pixels() const override { return true; }
  const ToyBackboneConfig& config() const { return cfg_; }

 private:
  ToyBackboneConfig cfg_;
  std::vector<Tensor> kernels_;
  std::vector<Tensor> biases_;
  std::vector<Shape> shapes_;
};

// Serves precomputed (t3, t4) tensors listed in a manifest. Each manifest line
// is `image_id t3_path t4_path`; relative paths resolve against the
// manifest's directory. Blank lines and lines starting with '#' are skipped.
class FeatureFileBackbone final : public Backbone {
 public:
  explicit FeatureFileBackbone(const std::filesystem::path& manifest) {
    std::ifstream in(manifest);
    if (!in) raise<DataError>("cannot open feature manifest ", manifest.string());
    const auto base = manifest.parent_path();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      std::string id, p3, p4;
      if (!(ls >> id >> p3 >> p4)) {
        raise<DataError>(manifest.string(), ":", lineno, ": expected `image_id t3_path t4_path`");
      }
      auto resolve = [&](const std::string& p) {
        std::filesystem::path path(p);
        return path.is_absolute() ? path : base / path;
      };
      entries_[id] = {resolve(p3), resolve(p4)};
    }
    if (entries_.empty()) raise<DataError>("feature manifest ", manifest.string(), " lists no images");
    auto first = load(entries_.begin()->first);
    t3_shape_ = first.t3.shape();
    t4_shape_ = first.t4.shape();
  }

  BackboneOutput forward(const BackboneInput& input) const override {
    auto out = load(input.image_id);
    if (out.t3.shape() != t3_shape_ || out.t4.shape() != t4_shape_) {
      raise<DataError>("features for ", input.image_id, " have shapes ", shape_str(out.t3.shape()), "/",
                       shape_str(out.t4.shape()), ", expected ", shape_str(t3_shape_), "/",
                       shape_str(t4_shape_));
    }
    return out;
  }

  std::vector<NamedTensor> parameters() const override { return {}; }
  Shape t3_shape() const override { return t3_shape_; }
  Shape t4_shape() const override { return t4_shape_; }
  bool needs_pixels() const override { return false; }
  bool contains(const std::string& id) const { return entries_.count(id) > 0; }

 private:
  BackboneOutput load(const std::string& id) const {
    std::lock_guard lock(mutex_);
    if (auto it = cache_.find(id); it != cache_.end()) return it->second;
    auto e = entries_.find(id);
    if (e == entries_.end()) raise<DataError>("no precomputed features for image ", id);
    BackboneOutput out{load_tensor(e->second.first), load_tensor(e->second.second)};
    cache_.emplace(id, out);
    return out;
  }

  std::map<std::string, std::pair<std::filesystem::path, std::filesystem::path>> entries_;
  Shape t3_shape_, t4_shape_;
  mutable std::mutex mutex_;
  mutable std::unordered_map<std::string, BackboneOutput> cache_;
};

// ---------------------------------------------------------------------------
// Model = backbone + head

class Model {
 public:
  Model(std::unique_ptr<Backbone> backbone, HeadConfig cfg, std::mt19937_64& rng)
      : backbone_(std::move(backbone)), cfg_(std::move(cfg)) {
    cfg_.c3 = backbone_->t3_shape()[0];
    cfg_.c4 = backbone_->t4_shape()[0];
    for (const auto& s : {backbone_->t3_shape(), backbone_->t4_shape()}) {
      if (s[1] % cfg_.stripes != 0) {
        raise<GeometryError>("feature height H=", s[1], " is not divisible into s=", cfg_.stripes, " stripes");
      }
    }
    head_ = HeadParams::init(cfg_, rng);
  }

  HeadOutput forward(std::span<const BackboneInput> batch, Mode mode) {
    auto features = run_backbone(batch);
    return forward_head(features, head_, cfg_, mode);
  }

  // Test-time descriptor G of one image, without recording gradients.
  std::vector<float> embed(const BackboneInput& input) const {
    NoGradGuard no_grad;
    BackboneOutput bo = backbone_->forward(input);
    auto out = pool_head(std::span<const BackboneOutput>(&bo, 1), cfg_);
    auto d = out.descriptor.data();
    return std::vector<float>(d.begin(), d.end());
  }

  std::vector<NamedTensor> parameters() const {
    auto out = backbone_->parameters();
    for (auto& p : head_.parameters()) out.push_back(std::move(p));
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  const HeadConfig& config() const { return cfg_; }
  HeadParams& head() { return head_; }
  const HeadParams& head() const { return head_; }
  const Backbone& backbone() const { return *backbone_; }

 private:
  std::vector<BackboneOutput> run_backbone(std::span<const BackboneInput> batch) const {
    std::vector<BackboneOutput> out;
    out.reserve(batch.size());
    for (const auto& in : batch) out.push_back(backbone_->forward(in));
    return out;
  }

  std::unique_ptr<Backbone> backbone_;
  HeadConfig cfg_;
  HeadParams head_;
};

}  // namespace mros
