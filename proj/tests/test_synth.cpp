#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "apex/error.hpp"
#include "apex/synth.hpp"

namespace fs = std::filesystem;
using namespace apex;

namespace {

SynthConfig small(std::size_t n = 40) {
  SynthConfig c = SynthConfig::standard(16);
  c.num_samples = n;
  return c;
}

Matrix gauss_jordan_inverse(Matrix a) {
  const std::size_t n = a.rows();
  Matrix x = Matrix::identity(n);
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t p = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a(r, c)) > std::abs(a(p, c))) p = r;
    for (std::size_t j = 0; j < n; ++j) {
      std::swap(a(c, j), a(p, j));
      std::swap(x(c, j), x(p, j));
    }
    const double d = a(c, c);
    for (std::size_t j = 0; j < n; ++j) {
      a(c, j) /= d;
      x(c, j) /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = a(r, c);
      for (std::size_t j = 0; j < n; ++j) {
        a(r, j) -= f * a(c, j);
        x(r, j) -= f * x(c, j);
      }
    }
  }
  return x;
}

}  // namespace

TEST(Synth, StandardLayout) {
  const SynthConfig c = SynthConfig::standard(16);
  ASSERT_EQ(c.num_concepts(), 16u);
  EXPECT_EQ(c.num_classes(), 12u);
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(c.concept_kinds[k], kAllSchemes[k / 4]);
  EXPECT_EQ(c.class_concepts.front(), 4u);
  EXPECT_EQ(c.class_concepts.back(), 15u);
  c.validate();
}

TEST(Synth, GenerationIsDeterministic) {
  const SynthDataset a = generate(small());
  const SynthDataset b = generate(small());
  EXPECT_EQ(a.model.mixing(), b.model.mixing());
  EXPECT_EQ(a.head.weights, b.head.weights);
  for (std::size_t i = 0; i < a.dataset.size(); ++i) {
    EXPECT_EQ(a.dataset.features[i].values, b.dataset.features[i].values);
    EXPECT_EQ(a.dataset.spectrograms[i].values, b.dataset.spectrograms[i].values);
  }
  SynthConfig other = small();
  other.seed = 8;
  EXPECT_NE(generate(other).model.mixing(), a.model.mixing());
}

TEST(Synth, IdentityMixingWithoutNoiseGivesPureMaps) {
  SynthConfig c = small(30);
  c.mixing = Matrix::identity(16);
  c.noise_sigma = 0.0;
  const SynthDataset s = generate(c);
  for (std::size_t i = 0; i < s.dataset.size(); ++i) {
    const FeatureMap& z = s.dataset.features[i];
    for (std::size_t f = 0; f < 8; ++f)
      for (std::size_t t = 0; t < 8; ++t)
        for (std::size_t k = 0; k < 16; ++k) {
          double want = 0.0;
          for (const auto& inst : s.truth[i].instances)
            if (inst.concept_id == k && inst.covers(f, t)) want += inst.amplitude;
          ASSERT_NEAR(z.at(f, t, k), want, 1e-5) << "sample " << i << " cell " << f << "," << t << " ch " << k;
        }
  }
}

TEST(Synth, HeadGivesOneLogitPerUnitAmplitude) {
  SynthConfig c = small(30);
  c.noise_sigma = 0.0;
  const SynthDataset s = generate(c);
  for (std::size_t i = 0; i < s.dataset.size(); ++i) {
    const auto l = logits(s.head, gap(s.dataset.features[i]));
    std::vector<double> want(c.num_classes(), 0.0);
    for (const auto& inst : s.truth[i].instances)
      for (std::size_t n = 0; n < c.num_classes(); ++n)
        if (c.class_concepts[n] == inst.concept_id) want[n] += inst.amplitude;
    for (std::size_t n = 0; n < want.size(); ++n) EXPECT_NEAR(l[n], want[n], 1e-4);
  }
}

TEST(Synth, SampleRolesAndSplit) {
  const SynthDataset s = generate(small(50));
  std::size_t train = 0;
  for (std::size_t i = 0; i < s.dataset.size(); ++i) {
    const auto& t = s.truth[i];
    ASSERT_EQ(t.instances.size(), 3u);
    EXPECT_EQ(t.primary().role, ConceptRole::kPrimary);
    EXPECT_EQ(t.primary().concept_id, s.config.class_concepts[t.primary_class]);
    EXPECT_EQ(s.dataset.manifest.samples[i].labels, std::vector<std::size_t>{t.primary_class});
    EXPECT_GE(t.primary().amplitude, 1.0);
    EXPECT_LE(t.primary().amplitude, 2.0);
    EXPECT_EQ(t.instances[2].role, ConceptRole::kTransient);
    EXPECT_LT(t.instances[2].concept_id, 4u);
    train += s.dataset.manifest.samples[i].split == Split::kTrain;
  }
  EXPECT_EQ(train, 40u);
}

TEST(Recovery, PerfectUnmixingAndItsSymmetries) {
  const SynthDataset s = generate(small(2));
  const Matrix& mix = s.model.mixing();
  EXPECT_LT(recovery_score(Matrix::identity(16), mix), 0.99);
  Matrix perm_scale(16, 16);
  for (std::size_t r = 0; r < 16; ++r) perm_scale(r, (r * 5 + 3) % 16) = (r % 2 ? -2.5 : 0.7);
  const Matrix m_inv = gauss_jordan_inverse(mix);
  EXPECT_NEAR(recovery_score(m_inv, mix), 1.0, 1e-9);
  EXPECT_NEAR(recovery_score(perm_scale * m_inv, mix), 1.0, 1e-9);
  const auto channels = concept_channels(perm_scale * m_inv, mix);
  for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ((channels[c] * 5 + 3) % 16, c) << c;
}

TEST(Synth, WriteReadRoundTrip) {
  const SynthDataset s = generate(small(12));
  const fs::path dir = fs::temp_directory_path() / "apex_synth_rt";
  fs::remove_all(dir);
  write_synth(s, dir);
  const SynthDataset back = read_synth(dir);
  EXPECT_EQ(back.model.mixing(), s.model.mixing());
  EXPECT_EQ(back.config.seed, s.config.seed);
  EXPECT_EQ(back.config.transient_lo, s.config.transient_lo);
  ASSERT_EQ(back.truth.size(), 12u);
  EXPECT_EQ(back.truth[3].primary_class, s.truth[3].primary_class);
  EXPECT_EQ(back.truth[3].instances[1].freq, s.truth[3].instances[1].freq);
  EXPECT_EQ(back.dataset.features[5].values, s.dataset.features[5].values);
  for (std::size_t i = 0; i < back.dataset.size(); ++i) {
    const FeatureMap again = back.model.features(back.dataset.spectrograms[i], i);
    EXPECT_EQ(again.values, s.dataset.features[i].values);
  }
  const auto l = back.model.forward(back.dataset.spectrograms[0], 0, back.head);
  const auto l0 = logits(s.head, gap(s.dataset.features[0]));
  for (std::size_t n = 0; n < l.size(); ++n) EXPECT_NEAR(l[n], l0[n], 1e-9);
}

TEST(Synth, Validation) {
  SynthConfig c = small();
  c.input_freq_bins = 30;
  EXPECT_THROW(generate(c), ValidationError);
  c = small();
  c.input_freq_bins = 16;
  c.input_time_frames = 16;  // 2 x 2 blocks cannot hold 16 orthogonal codes
  EXPECT_THROW(generate(c), ValidationError);
  c = small();
  c.transient_hi = 1.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = small();
  c.mixing = Matrix::identity(3);
  EXPECT_THROW(c.validate(), ValidationError);
}
