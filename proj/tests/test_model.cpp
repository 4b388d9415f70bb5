#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mros/model.hpp"
#include "mros/tensor_io.hpp"
#include "support.hpp"

using namespace mros;
using namespace mros::test;

namespace {

Tensor column(std::vector<double> v) {
  const auto h = v.size();
  return Tensor({1, h, 1}, std::move(v));
}

HeadConfig small_head(AblationSetting s, std::size_t c3 = 3, std::size_t c4 = 4, std::size_t classes = 5) {
  HeadConfig h;
  h.c3 = c3;
  h.c4 = c4;
  h.num_classes = classes;
  return apply_setting(h, s);
}

BackboneOutput random_output(const HeadConfig& h, std::size_t height, std::mt19937_64& rng) {
  return {random_tensor({h.c3, height, 2}, rng, false), random_tensor({h.c4, height, 3}, rng, false)};
}

}  // namespace

TEST(Stripes, SixRowsIntoSixStripes) {
  auto parts = partition_stripes(column({1, 2, 3, 4, 5, 6}), 6);
  ASSERT_EQ(parts.size(), 6u);
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_EQ(parts[k].shape(), (Shape{1, 1, 1}));
    EXPECT_EQ(parts[k].item(), static_cast<double>(k + 1));
  }
}

TEST(Stripes, SingleStripeIsInput) {
  std::mt19937_64 rng(1);
  auto t = random_tensor({2, 4, 3}, rng);
  auto parts = partition_stripes(t, 1);
  ASSERT_EQ(parts.size(), 1u);
  EXPECT_TRUE(parts[0].same_node(t));
}

TEST(Stripes, ReassemblyRestoresInput) {
  std::mt19937_64 rng(2);
  auto t = random_tensor({3, 12, 5}, rng);
  auto parts = partition_stripes(t, 6);
  for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(parts[k].dim(1), 2u);
  auto back = concat(parts, 1);
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), back.data().begin()));
  // stripe k covers rows [2k, 2k+2)
  EXPECT_EQ(parts[3].data()[0], t.data()[6 * 5]);
}

TEST(Stripes, IndivisibleHeightRejected) {
  EXPECT_THROW(partition_stripes(Tensor::zeros({1, 7, 1}), 6), GeometryError);
  EXPECT_THROW(overlap_pool(Tensor::zeros({1, 8, 1}), 6), GeometryError);
}

TEST(Pooling, OverlapHandExample) {
  auto g = overlap_pool(column({1, 2, 3, 4, 5, 6}), 6);
  EXPECT_EQ(g.shape(), (Shape{5, 1}));
  const double expected[] = {1.5, 2.5, 3.5, 4.5, 5.5};
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(g.data()[i], expected[i]);
}

TEST(Pooling, OverlapOfConstant) {
  auto g = overlap_pool(Tensor::full({3, 6, 4}, 0.7), 3);
  EXPECT_EQ(g.shape(), (Shape{2, 3}));
  for (double v : g.data()) EXPECT_NEAR(v, 0.7, 1e-15);
}

TEST(Pooling, OverlapNeedsTwoStripes) { EXPECT_THROW(overlap_pool(Tensor::zeros({1, 4, 1}), 1), GeometryError); }

TEST(Pooling, NonOverlapHandExample) {
  auto g = non_overlap_pool(column({1, 2, 3, 4, 5, 6}), 6);
  EXPECT_EQ(g.shape(), (Shape{6, 1}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(g.data()[i], static_cast<double>(i + 1));
}

TEST(Pooling, SingleStripeIsGlobalMean) {
  std::mt19937_64 rng(3);
  auto t = random_tensor({2, 5, 3}, rng);
  auto g = non_overlap_pool(t, 1);
  EXPECT_EQ(g.shape(), (Shape{1, 2}));
  for (std::size_t c = 0; c < 2; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < 15; ++i) acc += t.data()[c * 15 + i];
    EXPECT_NEAR(g.data()[c], acc / 15.0, 1e-14);
  }
}

TEST(Pooling, OverlapRowIsMeanOfAdjacentStripeMeans) {
  std::mt19937_64 rng(4);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = uniform_size(rng, 2, 8), hs = uniform_size(rng, 1, 3);
    const auto c = uniform_size(rng, 1, 5), w = uniform_size(rng, 1, 5);
    auto t = random_tensor({c, s * hs, w}, rng, false, -10.0, 10.0);
    auto over = overlap_pool(t, s);
    auto non = non_overlap_pool(t, s);
    ASSERT_EQ(over.dim(0), s - 1);
    for (std::size_t i = 0; i + 1 < s; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double pair = (non.data()[i * c + ch] + non.data()[(i + 1) * c + ch]) / 2.0;
        worst = std::max(worst, std::abs(over.data()[i * c + ch] - pair));
      }
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(Pooling, WidthMirrorLeavesPoolingUnchanged) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = 3, h = 6, w = uniform_size(rng, 1, 6);
    auto t = random_tensor({c, h, w}, rng, false);
    std::vector<double> mirrored(t.numel());
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) mirrored[(ch * h + y) * w + x] = t.data()[(ch * h + y) * w + (w - 1 - x)];
    auto a = overlap_pool(t, 6), b = overlap_pool(Tensor(t.shape(), mirrored), 6);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
  }
}

TEST(Head, SettingWiring) {
  const auto i = small_head(AblationSetting::kI), ii = small_head(AblationSetting::kII);
  const auto iii = small_head(AblationSetting::kIII), iv = small_head(AblationSetting::kIV);
  EXPECT_EQ(i.num_stripe_heads(), 6u);
  EXPECT_EQ(ii.num_stripe_heads(), 5u);
  EXPECT_EQ(iii.num_stripe_heads(), 5u);
  EXPECT_EQ(iv.num_stripe_heads(), 10u);
  EXPECT_FALSE(i.global_metric);
  EXPECT_FALSE(ii.global_metric);
  EXPECT_TRUE(iii.global_metric);
  EXPECT_TRUE(iv.global_metric);
  EXPECT_EQ(i.descriptor_dim(), 6u * 4);
  EXPECT_EQ(iii.descriptor_dim(), 5u * 4);
  EXPECT_EQ(iv.descriptor_dim(), 5u * (3 + 4));
}

TEST(Head, ReferenceDimensions) {
  HeadConfig h;  // C3=1024, C4=2048, s=6, setting IV
  h.num_classes = 2;
  EXPECT_EQ(h.descriptor_dim(), 15360u);
  EXPECT_EQ(h.num_stripe_heads(), 10u);
  std::mt19937_64 rng(6);
  auto params = HeadParams::init(h, rng);
  ASSERT_EQ(params.stripes.size(), 10u);
  for (const auto& s : params.stripes) {
    EXPECT_EQ(s.weight.dim(0), s.resolution == 3 ? 1024u : 2048u);
    EXPECT_EQ(s.gamma.dim(0), s.weight.dim(0));
  }
  BackboneOutput bo{Tensor::full({1024, 6, 1}, 0.5), Tensor::full({2048, 6, 1}, 0.25)};
  std::vector<BackboneOutput> batch{bo, bo};
  auto out = forward_head(batch, params, h, Mode::kEval);
  EXPECT_EQ(out.descriptor.shape(), (Shape{2, 15360}));
  EXPECT_EQ(out.logits.size(), 10u);
  // layout: g3 rows first, then g4 rows
  EXPECT_EQ(out.descriptor.data()[0], 0.5);
  EXPECT_EQ(out.descriptor.data()[5 * 1024], 0.25);
}

TEST(Head, IdentityBatchNormInEvalPassesFeaturesThrough) {
  std::mt19937_64 rng(7);
  const auto h = small_head(AblationSetting::kIV);
  auto params = HeadParams::init(h, rng);
  std::vector<BackboneOutput> batch{random_output(h, 6, rng), random_output(h, 6, rng)};
  auto out = forward_head(batch, params, h, Mode::kEval);
  ASSERT_EQ(out.h.size(), 10u);
  for (std::size_t k = 0; k < 10; ++k) {
    const auto& head = params.stripes[k];
    auto g = select(head.resolution == 3 ? out.g3 : out.g4, 1, head.row);
    for (std::size_t i = 0; i < g.numel(); ++i) EXPECT_NEAR(out.h[k].data()[i], g.data()[i], 1e-5 * std::abs(g.data()[i]) + 1e-12);
  }
}

TEST(Head, ZeroWeightsGiveBias) {
  std::mt19937_64 rng(8);
  const auto h = small_head(AblationSetting::kIV);
  auto params = HeadParams::init(h, rng);
  const std::vector<double> b{0.1, -0.2, 0.3, 0.0, 5.0};
  for (auto& s : params.stripes) {
    for (auto& v : s.weight.mutable_data()) v = 0.0;
    std::copy(b.begin(), b.end(), s.bias.mutable_data().begin());
  }
  std::vector<BackboneOutput> batch{random_output(h, 6, rng), random_output(h, 6, rng), random_output(h, 6, rng)};
  auto out = forward_head(batch, params, h, Mode::kTrain);
  for (const auto& logits : out.logits)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(logits.data()[i * 5 + c], b[c]);
}

TEST(Head, LocalSettingsExposeStripeRows) {
  std::mt19937_64 rng(9);
  for (auto s : {AblationSetting::kI, AblationSetting::kII}) {
    const auto h = small_head(s);
    auto params = HeadParams::init(h, rng);
    std::vector<BackboneOutput> batch{random_output(h, 6, rng), random_output(h, 6, rng)};
    auto out = forward_head(batch, params, h, Mode::kTrain);
    auto feats = out.metric_features(h);
    ASSERT_EQ(feats.size(), h.rows_per_resolution());
    for (const auto& f : feats) EXPECT_EQ(f.shape(), (Shape{2, 4}));
  }
}

TEST(Head, BackboneShapeMismatchRejected) {
  std::mt19937_64 rng(10);
  const auto h = small_head(AblationSetting::kIV);
  auto params = HeadParams::init(h, rng);
  std::vector<BackboneOutput> batch{{Tensor::zeros({3, 6, 2}), Tensor::zeros({5, 6, 2})}};
  EXPECT_THROW(forward_head(batch, params, h, Mode::kEval), ConfigError);
}

TEST(ToyBackbone, DefaultShapes) {
  std::mt19937_64 rng(11);
  ToyBackbone bb({}, 6, rng);
  EXPECT_EQ(bb.t3_shape(), (Shape{32, 12, 6}));
  EXPECT_EQ(bb.t4_shape(), (Shape{64, 6, 3}));
  EXPECT_EQ(bb.t3_shape()[1] % 6, 0u);
  EXPECT_EQ(bb.t4_shape()[1] % 6, 0u);
  auto out = bb.forward({"x", random_tensor({3, 48, 24}, rng, false)});
  EXPECT_EQ(out.t3.shape(), bb.t3_shape());
  EXPECT_EQ(out.t4.shape(), bb.t4_shape());
}

TEST(ToyBackbone, ZeroInputGivesZeroFeatures) {
  std::mt19937_64 rng(12);
  ToyBackbone bb({}, 6, rng);
  auto out = bb.forward({"x", Tensor::zeros({3, 48, 24})});
  for (double v : out.t3.data()) EXPECT_EQ(v, 0.0);
  for (double v : out.t4.data()) EXPECT_EQ(v, 0.0);
}

TEST(ToyBackbone, GeometryErrors) {
  std::mt19937_64 rng(13);
  ToyBackboneConfig cfg;
  cfg.input_height = 40;  // t4 height 5
  EXPECT_THROW(ToyBackbone(cfg, 6, rng), GeometryError);
  ToyBackbone bb({}, 6, rng);
  EXPECT_THROW(bb.forward({"x", Tensor::zeros({3, 24, 48})}), DimensionError);
}

TEST(ToyBackbone, EveryParameterReceivesGradient) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    HeadConfig h;
    h.num_classes = 4;
    auto model = Model(std::make_unique<ToyBackbone>(ToyBackboneConfig{}, 6, rng), h, rng);
    std::vector<BackboneInput> batch;
    for (int i = 0; i < 2; ++i) batch.push_back({"x", random_tensor({3, 48, 24}, rng, false)});
    auto out = model.forward(batch, Mode::kTrain);
    project(out.descriptor, seed).backward();
    for (const auto& p : model.backbone().parameters()) {
      ASSERT_TRUE(p.tensor.has_grad()) << p.name;
      double norm = 0.0;
      for (double g : p.tensor.grad()) norm += g * g;
      EXPECT_GT(norm, 0.0) << p.name << " seed " << seed;
    }
  }
}

TEST(Model, EmbedMatchesForwardDescriptor) {
  std::mt19937_64 rng(14);
  HeadConfig h;
  h.num_classes = 3;
  Model model(std::make_unique<ToyBackbone>(ToyBackboneConfig{}, 6, rng), h, rng);
  EXPECT_EQ(model.config().c3, 32u);
  EXPECT_EQ(model.config().c4, 64u);
  EXPECT_EQ(model.config().descriptor_dim(), 5u * (32 + 64));
  BackboneInput in{"x", random_tensor({3, 48, 24}, rng, false)};
  std::vector<BackboneInput> batch{in, in};
  auto out = model.forward(batch, Mode::kEval);
  auto e = model.embed(in);
  ASSERT_EQ(e.size(), model.config().descriptor_dim());
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_EQ(e[i], static_cast<float>(out.descriptor.data()[i]));
}

TEST(Model, ParameterCountsDifferAcrossSettings) {
  std::size_t counts[4];
  int k = 0;
  for (auto s : {AblationSetting::kI, AblationSetting::kII, AblationSetting::kIII, AblationSetting::kIV}) {
    std::mt19937_64 rng(15);
    HeadConfig h;
    h.num_classes = 10;
    Model model(std::make_unique<ToyBackbone>(ToyBackboneConfig{}, 6, rng), apply_setting(h, s), rng);
    counts[k++] = model.parameter_count();
  }
  const std::size_t backbone = (16 * 3 * 4 + 16) + (32 * 16 * 4 + 32) + (64 * 32 * 4 + 64);
  EXPECT_EQ(counts[0], backbone + 6 * (64 * 2 + 64 * 10 + 10));
  EXPECT_EQ(counts[1], backbone + 5 * (64 * 2 + 64 * 10 + 10));
  EXPECT_EQ(counts[2], counts[1]);
  EXPECT_EQ(counts[3], counts[1] + 5 * (32 * 2 + 32 * 10 + 10));
}

TEST(FeatureBackbone, ServesImportedTensors) {
  TempDir dir("features");
  std::mt19937_64 rng(16);
  auto t3 = random_tensor({4, 6, 2}, rng, false), t4 = random_tensor({8, 6, 1}, rng, false);
  save_tensor(dir.path / "a3.bin", t3);
  save_tensor(dir.path / "a4.bin", t4);
  {
    std::ofstream m(dir.path / "manifest.txt");
    m << "# id t3 t4\nimg_a a3.bin a4.bin\n";
  }
  FeatureFileBackbone bb(dir.path / "manifest.txt");
  EXPECT_EQ(bb.t3_shape(), (Shape{4, 6, 2}));
  EXPECT_FALSE(bb.needs_pixels());
  auto out = bb.forward({"img_a", {}});
  EXPECT_TRUE(std::equal(t4.data().begin(), t4.data().end(), out.t4.data().begin()));
  EXPECT_THROW(bb.forward({"img_b", {}}), DataError);

  HeadConfig h;
  h.num_classes = 2;
  Model model(std::make_unique<FeatureFileBackbone>(dir.path / "manifest.txt"), h, rng);
  EXPECT_EQ(model.embed({"img_a", {}}).size(), 5u * (4 + 8));
}
