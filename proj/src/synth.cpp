#include "apex/synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>

#include "apex/error.hpp"

namespace apex {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index, std::uint64_t stream) {
  return splitmix64(splitmix64(seed ^ (stream * 0x632be59bd9b4e019ULL)) + index);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * std::generate_canonical<double, 53>(rng);
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(rng() % n);
}

std::size_t footprint_cells(Scheme kind, std::size_t f, std::size_t t) {
  switch (kind) {
    case Scheme::kSquare: return 1;
    case Scheme::kTime: return f;
    case Scheme::kFrequency: return t;
    case Scheme::kTimeFrequency: return f + t - 1;
  }
  return 1;
}

// Row h of the Sylvester Hadamard matrix of order n (power of two) at column j.
int hadamard(std::size_t h, std::size_t j) { return (std::popcount(h & j) % 2) ? -1 : 1; }

ConceptInstance place(std::size_t concept_id, Scheme kind, ConceptRole role, double amplitude,
                      const SynthConfig& c, std::mt19937_64& rng) {
  ConceptInstance inst;
  inst.concept_id = concept_id;
  inst.kind = kind;
  inst.role = role;
  inst.amplitude = amplitude;
  switch (kind) {
    case Scheme::kSquare:
      inst.freq = uniform_index(rng, c.freq_bins);
      inst.time = uniform_index(rng, c.time_frames);
      break;
    case Scheme::kTime: inst.time = uniform_index(rng, c.time_frames); break;
    case Scheme::kFrequency: inst.freq = uniform_index(rng, c.freq_bins); break;
    case Scheme::kTimeFrequency:
      inst.freq = uniform_index(rng, c.freq_bins);
      inst.time = uniform_index(rng, c.time_frames);
      break;
  }
  return inst;
}

Matrix sample_mixing(const SynthConfig& c) {
  std::mt19937_64 rng(stream_seed(c.seed, 0, 0));
  std::normal_distribution<double> normal(0.0, c.mixing_scale);
  for (int attempt = 0; attempt < 100; ++attempt) {
    Matrix r(c.channels, c.channels);
    for (double& v : r.data()) v = normal(rng);
    Matrix m = mat_exp(r);
    // ||M||_F ||M^-1||_F bounds the 2-norm condition number from above.
    if (frobenius_norm(m) * frobenius_norm(mat_inverse_via_exp(r)) <= 100.0) return m;
  }
  throw ValidationError("synth: could not draw a mixing matrix with condition number <= 100");
}

// Gauss-Jordan with partial pivoting. Only used on the known synthetic
// mixing; the learned transform is always inverted through exp(-A).
Matrix invert(const Matrix& m) {
  const std::size_t d = m.rows();
  Matrix aug = m;
  Matrix inv = Matrix::identity(d);
  for (std::size_t col = 0; col < d; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < d; ++r)
      if (std::abs(aug(r, col)) > std::abs(aug(piv, col))) piv = r;
    if (std::abs(aug(piv, col)) < 1e-12) throw ValidationError("synth: mixing is singular");
    for (std::size_t j = 0; j < d; ++j) {
      std::swap(aug(col, j), aug(piv, j));
      std::swap(inv(col, j), inv(piv, j));
    }
    const double p = aug(col, col);
    for (std::size_t j = 0; j < d; ++j) {
      aug(col, j) /= p;
      inv(col, j) /= p;
    }
    for (std::size_t r = 0; r < d; ++r) {
      if (r == col) continue;
      const double f = aug(r, col);
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) {
        aug(r, j) -= f * aug(col, j);
        inv(r, j) -= f * inv(col, j);
      }
    }
  }
  return inv;
}

json instance_to_json(const ConceptInstance& inst) {
  const char* role = inst.role == ConceptRole::kPrimary    ? "primary"
                     : inst.role == ConceptRole::kConfuser ? "confuser"
                                                           : "transient";
  return {{"concept", inst.concept_id},
          {"kind", std::string(to_string(inst.kind))},
          {"role", role},
          {"freq", inst.freq ? json(*inst.freq) : json(nullptr)},
          {"time", inst.time ? json(*inst.time) : json(nullptr)},
          {"amplitude", inst.amplitude}};
}

ConceptInstance instance_from_json(const json& j) {
  ConceptInstance inst;
  inst.concept_id = j.at("concept").get<std::size_t>();
  inst.kind = parse_scheme(j.at("kind").get<std::string>());
  const auto role = j.at("role").get<std::string>();
  inst.role = role == "primary"    ? ConceptRole::kPrimary
              : role == "confuser" ? ConceptRole::kConfuser
                                   : ConceptRole::kTransient;
  if (!j.at("freq").is_null()) inst.freq = j.at("freq").get<std::size_t>();
  if (!j.at("time").is_null()) inst.time = j.at("time").get<std::size_t>();
  inst.amplitude = j.at("amplitude").get<double>();
  return inst;
}

}  // namespace

SynthConfig SynthConfig::standard(std::size_t channels) {
  SynthConfig c;
  c.channels = channels;
  for (std::size_t k = 0; k < channels; ++k) {
    c.concept_kinds.push_back(kAllSchemes[k * 4 / channels]);
    if (c.concept_kinds.back() != Scheme::kSquare) c.class_concepts.push_back(k);
  }
  return c;
}

void SynthConfig::validate() const {
  if (channels == 0 || freq_bins == 0 || time_frames == 0) {
    throw ValidationError("synth: D, F and T must be positive");
  }
  if (input_freq_bins % freq_bins != 0 || input_time_frames % time_frames != 0) {
    throw ValidationError("synth: input geometry must be an integer multiple of the latent one");
  }
  const std::size_t block = (input_freq_bins / freq_bins) * (input_time_frames / time_frames);
  if (!std::has_single_bit(block) || block < channels) {
    throw ValidationError("synth: input block of " + std::to_string(block) +
                          " bins must be a power of two >= D");
  }
  if (concept_kinds.empty() || concept_kinds.size() > channels) {
    throw ValidationError("synth: need 1..D concepts");
  }
  if (class_concepts.empty() || class_concepts.size() > concept_kinds.size()) {
    throw ValidationError("synth: need 1..num_concepts classes");
  }
  for (auto c : class_concepts)
    if (c >= concept_kinds.size()) throw ValidationError("synth: class concept out of range");
  if (!(noise_sigma >= 0.0) || !(amplitude_lo > 0.0) || amplitude_hi < amplitude_lo ||
      !(transient_lo > 0.0) || transient_hi < transient_lo || !(confuser_lo > 0.0) ||
      confuser_hi < confuser_lo) {
    throw ValidationError("synth: bad noise or amplitude range");
  }
  if (num_samples == 0) throw ValidationError("synth: num_samples must be positive");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw ValidationError("synth: test_fraction must lie in [0, 1)");
  }
  if (mixing && (mixing->rows() != channels || mixing->cols() != channels)) {
    throw ValidationError("synth: mixing must be D x D");
  }
}

bool ConceptInstance::covers(std::size_t f, std::size_t t) const {
  switch (kind) {
    case Scheme::kSquare: return f == *freq && t == *time;
    case Scheme::kTime: return t == *time;
    case Scheme::kFrequency: return f == *freq;
    case Scheme::kTimeFrequency: return f == *freq || t == *time;
  }
  return false;
}

const ConceptInstance& SynthTruth::primary() const {
  for (const auto& inst : instances)
    if (inst.role == ConceptRole::kPrimary) return inst;
  throw ValidationError("synth: sample has no primary concept");
}

SynthModel::SynthModel(const SynthConfig& config, Matrix mixing)
    : config_(config), mixing_(std::move(mixing)) {
  block_f_ = config.input_freq_bins / config.freq_bins;
  block_t_ = config.input_time_frames / config.time_frames;
  const std::size_t block = block_f_ * block_t_;
  // Skip the constant code when the block leaves room, so concepts are zero-mean.
  const std::size_t first = block > config.num_concepts() ? 1 : 0;
  codes_.resize(config.num_concepts());
  for (std::size_t c = 0; c < codes_.size(); ++c) {
    codes_[c].resize(block);
    for (std::size_t j = 0; j < block; ++j) codes_[c][j] = static_cast<float>(hadamard(first + c, j));
  }
}

float SynthModel::code(std::size_t concept_id, std::size_t i, std::size_t j) const {
  return codes_[concept_id][i * block_t_ + j];
}

LatentMap SynthModel::pure_map(const SpectrogramImage& x) const {
  const auto& c = config_;
  LatentMap pure(c.freq_bins, c.time_frames, c.channels);
  const double inv = 1.0 / static_cast<double>(block_f_ * block_t_);
  for (std::size_t f = 0; f < c.freq_bins; ++f) {
    for (std::size_t t = 0; t < c.time_frames; ++t) {
      for (std::size_t k = 0; k < codes_.size(); ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < block_f_; ++i)
          for (std::size_t j = 0; j < block_t_; ++j)
            acc += static_cast<double>(code(k, i, j)) *
                   static_cast<double>(x.at(f * block_f_ + i, t * block_t_ + j));
        pure.at(f, t, k) = acc * inv;
      }
    }
  }
  return pure;
}

FeatureMap SynthModel::features(const SpectrogramImage& x, std::size_t sample_index) const {
  const auto& c = config_;
  const LatentMap pure = pure_map(x);
  std::mt19937_64 noise_rng(stream_seed(c.seed, sample_index, 2));
  std::normal_distribution<double> noise(0.0, c.noise_sigma > 0.0 ? c.noise_sigma : 1.0);

  FeatureMap z;
  z.sample_id = x.sample_id;
  z.freq_bins = c.freq_bins;
  z.time_frames = c.time_frames;
  z.channels = c.channels;
  z.input_freq_bins = c.input_freq_bins;
  z.input_time_frames = c.input_time_frames;
  z.values.resize(c.freq_bins * c.time_frames * c.channels);
  for (std::size_t cell = 0; cell < pure.cells(); ++cell) {
    const auto mixed = matvec(mixing_, {pure.values.data() + cell * c.channels, c.channels});
    for (std::size_t d = 0; d < c.channels; ++d) {
      const double n = c.noise_sigma > 0.0 ? noise(noise_rng) : 0.0;
      z.values[cell * c.channels + d] = static_cast<float>(mixed[d] + n);
    }
  }
  return z;
}

std::vector<double> SynthModel::forward(const SpectrogramImage& x, std::size_t sample_index,
                                        const ClassifierHead& head) const {
  return logits(head, gap(features(x, sample_index)));
}

SynthDataset generate(const SynthConfig& config) {
  config.validate();
  SynthDataset out;
  out.config = config;
  Matrix mixing = config.mixing ? *config.mixing : sample_mixing(config);
  out.model = SynthModel(config, mixing);
  const auto& c = config;

  std::vector<std::size_t> unlabeled;
  for (std::size_t k = 0; k < c.num_concepts(); ++k)
    if (std::find(c.class_concepts.begin(), c.class_concepts.end(), k) == c.class_concepts.end())
      unlabeled.push_back(k);

  auto& m = out.dataset.manifest;
  for (std::size_t n = 0; n < c.num_classes(); ++n)
    m.class_names.push_back("concept" + std::to_string(c.class_concepts[n]));
  m.task_kind = TaskKind::kMultiLabel;
  m.input_freq_bins = c.input_freq_bins;
  m.input_time_frames = c.input_time_frames;
  m.annotations_json = json({{"source", "synthetic"}, {"tap_point", "pre_pooling"}}).dump();

  const std::size_t n_train = static_cast<std::size_t>(
      std::llround(static_cast<double>(c.num_samples) * (1.0 - c.test_fraction)));
  const std::size_t bf = c.input_freq_bins / c.freq_bins;
  const std::size_t bt = c.input_time_frames / c.time_frames;

  for (std::size_t i = 0; i < c.num_samples; ++i) {
    std::mt19937_64 rng(stream_seed(c.seed, i, 1));
    SynthTruth truth;
    truth.primary_class = uniform_index(rng, c.num_classes());
    const std::size_t primary = c.class_concepts[truth.primary_class];
    truth.instances.push_back(place(primary, c.concept_kinds[primary], ConceptRole::kPrimary,
                                    uniform(rng, c.amplitude_lo, c.amplitude_hi), c, rng));
    if (c.num_classes() > 1 && uniform(rng, 0.0, 1.0) < c.confuser_prob) {
      std::size_t other = uniform_index(rng, c.num_classes() - 1);
      if (other >= truth.primary_class) ++other;
      const std::size_t concept_id = c.class_concepts[other];
      truth.instances.push_back(place(concept_id, c.concept_kinds[concept_id],
                                      ConceptRole::kConfuser,
                                      uniform(rng, c.confuser_lo, c.confuser_hi), c, rng));
    }
    if (!unlabeled.empty() && uniform(rng, 0.0, 1.0) < c.transient_prob) {
      const std::size_t concept_id = unlabeled[uniform_index(rng, unlabeled.size())];
      truth.instances.push_back(place(concept_id, c.concept_kinds[concept_id],
                                      ConceptRole::kTransient,
                                      uniform(rng, c.transient_lo, c.transient_hi), c, rng));
    }

    char id[32];
    std::snprintf(id, sizeof(id), "s%05zu", i);
    SpectrogramImage x;
    x.sample_id = id;
    x.freq_bins = c.input_freq_bins;
    x.time_frames = c.input_time_frames;
    x.values.assign(x.freq_bins * x.time_frames, 0.0f);
    for (const auto& inst : truth.instances) {
      for (std::size_t f = 0; f < c.freq_bins; ++f) {
        for (std::size_t t = 0; t < c.time_frames; ++t) {
          if (!inst.covers(f, t)) continue;
          for (std::size_t a = 0; a < bf; ++a)
            for (std::size_t b = 0; b < bt; ++b)
              x.at(f * bf + a, t * bt + b) +=
                  static_cast<float>(inst.amplitude) * out.model.code(inst.concept_id, a, b);
        }
      }
    }

    ManifestSample s;
    s.sample_id = id;
    s.path = std::string("features/") + id + ".apx";
    s.spectrogram = std::string("spectrograms/") + id + ".apx";
    s.labels = {truth.primary_class};
    s.split = i < n_train ? Split::kTrain : Split::kTest;
    m.samples.push_back(s);
    out.dataset.features.push_back(out.model.features(x, i));
    out.dataset.spectrograms.push_back(std::move(x));
    out.truth.push_back(std::move(truth));
  }

  // Known head: unit logit per unit of class-concept amplitude, expressed in
  // the mixed basis (W_pure * mixing^-1). Rounded to what the container stores.
  const std::size_t cells = c.freq_bins * c.time_frames;
  Matrix w_pure(c.num_classes(), c.channels);
  for (std::size_t n = 0; n < c.num_classes(); ++n) {
    const std::size_t k = c.class_concepts[n];
    w_pure(n, k) = static_cast<double>(cells) /
                   static_cast<double>(footprint_cells(c.concept_kinds[k], c.freq_bins, c.time_frames));
  }
  const Matrix mixing_inv = invert(mixing);
  out.head.num_classes = c.num_classes();
  out.head.channels = c.channels;
  out.head.weights = w_pure * mixing_inv;
  for (double& w : out.head.weights.data()) w = static_cast<float>(w);
  out.head.bias.assign(c.num_classes(), static_cast<float>(c.bias));
  return out;
}

double recovery_score(const Matrix& learned_u, const Matrix& mixing) {
  const Matrix m = learned_u * mixing;
  double total = 0.0;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double sq = 0.0, best = 0.0;
    for (double v : m.row(r)) {
      sq += v * v;
      best = std::max(best, std::abs(v));
    }
    total += sq > 0.0 ? best / std::sqrt(sq) : 0.0;
  }
  return m.rows() ? total / static_cast<double>(m.rows()) : 0.0;
}

std::vector<std::size_t> concept_channels(const Matrix& learned_u, const Matrix& mixing) {
  const Matrix m = learned_u * mixing;
  std::vector<double> row_norm(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (double v : m.row(r)) row_norm[r] += v * v;
    row_norm[r] = std::sqrt(row_norm[r]);
  }
  std::vector<std::size_t> out(m.cols(), 0);
  for (std::size_t c = 0; c < m.cols(); ++c) {
    double best = -1.0;
    for (std::size_t r = 0; r < m.rows(); ++r) {
      const double score = row_norm[r] > 0.0 ? std::abs(m(r, c)) / row_norm[r] : 0.0;
      if (score > best) {
        best = score;
        out[c] = r;
      }
    }
  }
  return out;
}

void write_synth(const SynthDataset& synth, const fs::path& dir) {
  fs::create_directories(dir / "features");
  fs::create_directories(dir / "spectrograms");
  const auto& ds = synth.dataset;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    write_tensor_file(ds.features[i], dir / ds.manifest.samples[i].path);
    write_tensor_file(ds.spectrograms[i], dir / ds.manifest.samples[i].spectrogram);
  }
  write_tensor_file(synth.head, dir / "head.apx");
  save_manifest(ds.manifest, dir / "manifest.jsonl");

  const auto& c = synth.config;
  std::vector<std::string> kinds;
  for (Scheme k : c.concept_kinds) kinds.emplace_back(to_string(k));
  json truth = json::array();
  for (const auto& t : synth.truth) {
    json inst = json::array();
    for (const auto& i : t.instances) inst.push_back(instance_to_json(i));
    truth.push_back({{"primary_class", t.primary_class}, {"instances", inst}});
  }
  const auto& mix = synth.model.mixing();
  json doc = {{"format", "apex-synth-truth"},
              {"config",
               {{"channels", c.channels},
                {"freq_bins", c.freq_bins},
                {"time_frames", c.time_frames},
                {"input_freq_bins", c.input_freq_bins},
                {"input_time_frames", c.input_time_frames},
                {"concept_kinds", kinds},
                {"class_concepts", c.class_concepts},
                {"mixing_scale", c.mixing_scale},
                {"noise_sigma", c.noise_sigma},
                {"amplitude", {c.amplitude_lo, c.amplitude_hi}},
                {"transient_prob", c.transient_prob},
                {"transient_amplitude", {c.transient_lo, c.transient_hi}},
                {"confuser_prob", c.confuser_prob},
                {"confuser_amplitude", {c.confuser_lo, c.confuser_hi}},
                {"bias", c.bias},
                {"num_samples", c.num_samples},
                {"test_fraction", c.test_fraction},
                {"seed", c.seed}}},
              {"mixing", std::vector<double>(mix.data().begin(), mix.data().end())},
              {"truth", truth}};
  std::ofstream out(dir / "ground_truth.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "ground_truth.json").string());
  out << doc.dump(1) << '\n';
}

SynthDataset read_synth(const fs::path& dir) {
  std::ifstream in(dir / "ground_truth.json");
  if (!in) throw IoError("cannot open " + (dir / "ground_truth.json").string());
  SynthDataset out;
  try {
    const json doc = json::parse(in);
    const auto& jc = doc.at("config");
    auto& c = out.config;
    c.channels = jc.at("channels").get<std::size_t>();
    c.freq_bins = jc.at("freq_bins").get<std::size_t>();
    c.time_frames = jc.at("time_frames").get<std::size_t>();
    c.input_freq_bins = jc.at("input_freq_bins").get<std::size_t>();
    c.input_time_frames = jc.at("input_time_frames").get<std::size_t>();
    c.concept_kinds.clear();
    for (const auto& k : jc.at("concept_kinds")) c.concept_kinds.push_back(parse_scheme(k.get<std::string>()));
    c.class_concepts = jc.at("class_concepts").get<std::vector<std::size_t>>();
    c.mixing_scale = jc.at("mixing_scale").get<double>();
    c.noise_sigma = jc.at("noise_sigma").get<double>();
    c.amplitude_lo = jc.at("amplitude")[0].get<double>();
    c.amplitude_hi = jc.at("amplitude")[1].get<double>();
    c.transient_prob = jc.at("transient_prob").get<double>();
    c.transient_lo = jc.at("transient_amplitude")[0].get<double>();
    c.transient_hi = jc.at("transient_amplitude")[1].get<double>();
    c.confuser_prob = jc.at("confuser_prob").get<double>();
    c.confuser_lo = jc.at("confuser_amplitude")[0].get<double>();
    c.confuser_hi = jc.at("confuser_amplitude")[1].get<double>();
    c.bias = jc.at("bias").get<double>();
    c.num_samples = jc.at("num_samples").get<std::size_t>();
    c.test_fraction = jc.at("test_fraction").get<double>();
    c.seed = jc.at("seed").get<std::uint64_t>();
    auto mix = doc.at("mixing").get<std::vector<double>>();
    c.mixing = Matrix(c.channels, c.channels, std::move(mix));
    c.validate();
    out.model = SynthModel(c, *c.mixing);
    for (const auto& jt : doc.at("truth")) {
      SynthTruth t;
      t.primary_class = jt.at("primary_class").get<std::size_t>();
      for (const auto& ji : jt.at("instances")) t.instances.push_back(instance_from_json(ji));
      out.truth.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw FormatError((dir / "ground_truth.json").string() + ": " + e.what());
  }
  out.dataset = load_dataset(dir / "manifest.jsonl", true);
  out.head = read_head(dir / "head.apx");
  if (out.truth.size() != out.dataset.size()) {
    throw ValidationError("synth: ground truth and manifest disagree on sample count");
  }
  return out;
}

}  // namespace apex
