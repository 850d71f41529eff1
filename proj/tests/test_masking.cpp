#include <gtest/gtest.h>

#include <random>

#include "apex/error.hpp"
#include "apex/evaluator.hpp"
#include "apex/synth.hpp"

using namespace apex;

namespace {

using Range = std::pair<std::size_t, std::size_t>;

SpectrogramImage ones(std::size_t f, std::size_t t) {
  SpectrogramImage x;
  x.freq_bins = f;
  x.time_frames = t;
  x.values.assign(f * t, 1.0f);
  return x;
}

MaskSpec spec(Scheme kind, std::optional<Range> f, std::optional<Range> t, double floor = 0.1,
              std::size_t soft = 2) {
  MaskSpec m;
  m.region.kind = kind;
  m.region.f_range = f;
  m.region.t_range = t;
  m.attenuation_floor = floor;
  m.edge_softness = soft;
  return m;
}

}  // namespace

TEST(Mask, FloorOneLeavesInputUnchanged) {
  SpectrogramImage x = ones(32, 32);
  for (std::size_t i = 0; i < x.values.size(); ++i) x.values[i] = static_cast<float>(i % 7);
  for (Scheme s : kAllSchemes) {
    const auto out = apply_mask(x, spec(s, Range{4, 12}, Range{8, 20}, 1.0));
    EXPECT_EQ(out.values, x.values) << to_string(s);
  }
}

TEST(Mask, WholeImageWithZeroFloorIsZero) {
  const auto out = apply_mask(ones(16, 16), spec(Scheme::kSquare, Range{0, 16}, Range{0, 16}, 0.0));
  for (float v : out.values) EXPECT_EQ(v, 0.0f);
}

TEST(Mask, TaperProfile) {
  const MaskSpec m = spec(Scheme::kFrequency, Range{4, 12}, std::nullopt, 0.1, 2);
  EXPECT_DOUBLE_EQ(mask_gain(m, 3, 0, 32, 32), 1.0);
  EXPECT_DOUBLE_EQ(mask_gain(m, 4, 0, 32, 32), 0.55);  // halfway between 1 and the floor
  EXPECT_DOUBLE_EQ(mask_gain(m, 5, 0, 32, 32), 0.1);
  EXPECT_DOUBLE_EQ(mask_gain(m, 8, 0, 32, 32), 0.1);
  EXPECT_DOUBLE_EQ(mask_gain(m, 11, 0, 32, 32), 0.55);
  EXPECT_DOUBLE_EQ(mask_gain(m, 12, 0, 32, 32), 1.0);

  // A border on the image edge gets no ramp.
  const MaskSpec edge = spec(Scheme::kTime, std::nullopt, Range{0, 6}, 0.1, 2);
  EXPECT_DOUBLE_EQ(mask_gain(edge, 0, 0, 32, 32), 0.1);
  EXPECT_DOUBLE_EQ(mask_gain(edge, 0, 5, 32, 32), 0.55);

  const MaskSpec hard = spec(Scheme::kTime, std::nullopt, Range{8, 12}, 0.3, 0);
  EXPECT_DOUBLE_EQ(mask_gain(hard, 0, 8, 32, 32), 0.3);
}

TEST(Mask, TimeFrequencyIsUnionWithMinGain) {
  const MaskSpec m = spec(Scheme::kTimeFrequency, Range{8, 16}, Range{20, 28}, 0.2, 2);
  EXPECT_DOUBLE_EQ(mask_gain(m, 0, 0, 32, 32), 1.0);
  EXPECT_DOUBLE_EQ(mask_gain(m, 10, 0, 32, 32), 0.2);
  EXPECT_DOUBLE_EQ(mask_gain(m, 0, 24, 32, 32), 0.2);
  EXPECT_DOUBLE_EQ(mask_gain(m, 8, 2, 32, 32), 0.6);
  EXPECT_DOUBLE_EQ(mask_gain(m, 8, 24, 32, 32), 0.2);
}

TEST(Mask, IdempotentOnlyAtBinaryGains) {
  const SpectrogramImage x = ones(16, 16);
  const MaskSpec hard = spec(Scheme::kSquare, Range{2, 6}, Range{3, 9}, 0.0, 0);
  const auto once = apply_mask(x, hard);
  EXPECT_EQ(apply_mask(once, hard).values, once.values);
}

TEST(Mask, MonotoneInFloor) {
  const SpectrogramImage x = ones(16, 16);
  double prev = -1.0;
  for (double floor : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    const auto out = apply_mask(x, spec(Scheme::kTimeFrequency, Range{4, 10}, Range{2, 8}, floor));
    double sum = 0.0;
    for (float v : out.values) sum += v;
    EXPECT_GT(sum, prev);
    prev = sum;
  }
}

TEST(Mask, Validation) {
  const SpectrogramImage x = ones(16, 16);
  EXPECT_THROW(apply_mask(x, spec(Scheme::kSquare, Range{0, 4}, Range{0, 4}, 1.5)), ConfigError);
  EXPECT_THROW(apply_mask(x, spec(Scheme::kSquare, Range{0, 4}, Range{0, 4}, 0.1, 3)), ConfigError);
  EXPECT_THROW(apply_mask(x, spec(Scheme::kSquare, Range{0, 4}, std::nullopt)), ValidationError);
  EXPECT_THROW(apply_mask(x, spec(Scheme::kFrequency, Range{10, 20}, std::nullopt)), ValidationError);
}

TEST(RandomMask, KeepsKindAndExtents) {
  std::mt19937_64 rng(1);
  Region r;
  r.kind = Scheme::kTimeFrequency;
  r.f_range = Range{4, 8};
  r.t_range = Range{10, 16};
  for (int i = 0; i < 100; ++i) {
    const Region q = random_mask_like(r, 32, 20, rng);
    EXPECT_EQ(q.kind, r.kind);
    EXPECT_EQ(q.f_range->second - q.f_range->first, 4u);
    EXPECT_EQ(q.t_range->second - q.t_range->first, 6u);
    EXPECT_LE(q.t_range->second, 20u);
  }
  Region t;
  t.kind = Scheme::kTime;
  t.t_range = Range{0, 4};
  EXPECT_FALSE(random_mask_like(t, 32, 32, rng).f_range.has_value());
}

TEST(RandomMask, PlacementIsUniform) {
  std::mt19937_64 rng(2);
  Region r;
  r.kind = Scheme::kTime;
  r.t_range = Range{0, 4};
  const std::size_t slots = 29, draws = 29000;
  std::vector<double> counts(slots, 0.0);
  for (std::size_t i = 0; i < draws; ++i) counts[random_mask_like(r, 32, 32, rng).t_range->first] += 1.0;
  const double expected = static_cast<double>(draws) / slots;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, 56.9);  // 28 degrees of freedom, p = 0.001
}

TEST(MaskStudy, UnitFloorGivesIdenticalMetricsAndReportShape) {
  SynthConfig cfg = SynthConfig::standard(16);
  cfg.num_samples = 48;
  const SynthDataset s = generate(cfg);
  DisentangleConfig dc;
  const DisentangleState state = DisentangleState::identity(16, dc);
  const FoldedHead folded = fold_head(s.head, state);

  MaskStudyInput in;
  in.features = s.dataset.features;
  in.spectrograms = s.dataset.spectrograms;
  in.num_classes = s.head.num_classes;
  for (std::size_t i = 0; i < s.dataset.size(); ++i) {
    in.labels.push_back(s.dataset.manifest.samples[i].labels);
    in.sample_indices.push_back(i);
  }
  const ForwardFn forward = [&](const SpectrogramImage& x, std::size_t i) {
    return s.model.forward(x, i, s.head);
  };
  const StudyScheme schemes[] = {{&state, &folded}};
  MaskStudyConfig mc;
  mc.attenuation_floor = 1.0;
  const auto reports = masking_study(in, forward, schemes, mc);
  ASSERT_EQ(reports.size(), 3u);
  EXPECT_EQ(reports[0].condition, MaskCondition::kNoMask);
  EXPECT_EQ(reports[1].condition, MaskCondition::kRandomMask);
  EXPECT_EQ(reports[1].seeds.size(), 4u);
  EXPECT_EQ(reports[2].condition, MaskCondition::kApexMask);
  for (const auto& r : reports) {
    EXPECT_EQ(r.cmap.mean, reports[0].cmap.mean);
    EXPECT_EQ(r.t1_acc.mean, reports[0].t1_acc.mean);
    EXPECT_EQ(r.cmap.std, 0.0);
    EXPECT_FALSE(r.eer.has_value());
  }
  EXPECT_NE(format_report_table(reports).find("apex_mask"), std::string::npos);
  EXPECT_NE(report_json(reports).find("\"random_mask\""), std::string::npos);

  mc.attenuation_floor = 0.1;
  const auto masked = masking_study(in, forward, schemes, mc);
  EXPECT_LT(masked[2].cmap.mean, masked[0].cmap.mean);
}
