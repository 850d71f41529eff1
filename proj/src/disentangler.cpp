#include "apex/disentangler.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <ostream>
#include <random>

#include "apex/error.hpp"

namespace apex {

using json = nlohmann::json;

namespace {

void shuffle_pairs(std::vector<ProtoPair>& pairs, std::mt19937_64& rng) {
  for (std::size_t i = pairs.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(pairs[i - 1], pairs[j]);
  }
}

json optional_index(const std::optional<std::size_t>& v) {
  return v ? json(*v) : json(nullptr);
}

std::optional<std::size_t> read_optional_index(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<std::size_t>();
}

}  // namespace

void DisentangleConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (recalc_interval < 1) throw ConfigError("recalc_interval must be >= 1");
  if (proto_count_end < 1) throw ConfigError("proto_count_end must be >= 1");
  if (proto_count_start < proto_count_end) {
    throw ConfigError("proto_count_start must be >= proto_count_end");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("betas must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
}

DisentangleState DisentangleState::identity(std::size_t channels,
                                            const DisentangleConfig& config) {
  DisentangleState s;
  s.scheme = config.scheme;
  s.a = Matrix(channels, channels);
  s.u = Matrix::identity(channels);
  s.u_inv = Matrix::identity(channels);
  s.adam = AdamState::for_shape(channels, channels, config.lr, config.beta1, config.beta2,
                                config.weight_decay);
  s.protosets.assign(channels, {});
  return s;
}

void DisentangleState::set_a(Matrix new_a) {
  a = std::move(new_a);
  u = mat_exp(a);
  u_inv = mat_inverse_via_exp(a);
}

std::size_t proto_count_at(std::size_t epoch, const DisentangleConfig& config) {
  if (config.epochs <= 1) return config.proto_count_start;
  const double start = static_cast<double>(config.proto_count_start);
  const double end = static_cast<double>(config.proto_count_end);
  const double e = static_cast<double>(std::min(epoch, config.epochs - 1));
  const double value = start - e * (start - end) / static_cast<double>(config.epochs - 1);
  return static_cast<std::size_t>(std::floor(value + 0.5));
}

bool recalc_due(std::size_t epoch, const DisentangleConfig& config) {
  return epoch % config.recalc_interval == 0;
}

bool recalc_prototype_sets(DisentangleState& state, std::span<const FeatureMap> features,
                           std::size_t m) {
  if (features.empty()) throw ValidationError("recalc_prototype_sets: no training features");
  if (m < 1) throw ConfigError("recalc_prototype_sets: m must be >= 1");
  const std::size_t d = state.channels();
  const std::size_t n = features.size();
  const bool clamped = m > n;
  m = std::min(m, n);

  // activ(U z, k) = U[k, :] . sum_{f,t} z[f, t, :]
  const Matrix sums = kernels::parallel::channel_sums(features);
  if (sums.cols() != d) throw ShapeError("recalc_prototype_sets: channel count mismatch");
  const Matrix activ = sums * state.u.transposed();  // n x D

  state.protosets.assign(d, {});
  std::vector<std::size_t> order(n);
  for (std::size_t k = 0; k < d; ++k) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + m, order.end(),
                      [&](std::size_t x, std::size_t y) {
                        const double ax = activ(x, k), ay = activ(y, k);
                        if (ax != ay) return ax > ay;
                        return features[x].sample_id < features[y].sample_id;
                      });
    auto& set = state.protosets[k];
    set.reserve(m);
    for (std::size_t r = 0; r < m; ++r) {
      const std::size_t i = order[r];
      ProtoSetEntry e;
      e.sample = i;
      e.sample_id = features[i].sample_id;
      e.activation = activ(i, k);
      set.push_back(std::move(e));
    }
  }

  // Cache the scheme coordinates of every member.
  for (std::size_t k = 0; k < d; ++k) {
    for (auto& e : state.protosets[k]) {
      const LatentMap zhat = apply_transform(state.u, features[e.sample]);
      const auto slice = channel_slice(zhat, k);
      const Selection sel = select_coordinates(slice, zhat.freq_bins, zhat.time_frames, state.scheme);
      e.freq = sel.freq;
      e.time = sel.time;
    }
  }
  return !clamped;
}

std::vector<ProtoPair> all_pairs(const DisentangleState& state) {
  std::vector<ProtoPair> pairs;
  for (std::size_t k = 0; k < state.protosets.size(); ++k)
    for (const auto& e : state.protosets[k]) pairs.push_back({e.sample, k});
  return pairs;
}

PurityLoss purity_loss(const DisentangleState& state, std::span<const FeatureMap> features,
                       std::span<const ProtoPair> batch) {
  if (batch.empty()) throw ValidationError("purity_loss: empty batch");
  const auto res = kernels::parallel::purity_batch(state.u, features, batch, state.scheme);
  const double n = static_cast<double>(batch.size());
  PurityLoss out;
  out.loss = 1.0 - res.purity_sum / n;
  out.degenerate = res.degenerate;
  Matrix grad_u = res.grad_u * (-1.0 / n);
  out.grad_a = mat_exp_vjp(state.a, grad_u);
  return out;
}

double mean_protoset_purity(const DisentangleState& state, std::span<const FeatureMap> features) {
  const auto pairs = all_pairs(state);
  if (pairs.empty()) return 0.0;
  const auto res = kernels::parallel::purity_batch(state.u, features, pairs, state.scheme);
  return res.purity_sum / static_cast<double>(pairs.size());
}

FoldedHead fold_head(const ClassifierHead& head, const DisentangleState& state) {
  if (head.channels != state.channels()) {
    throw ShapeError("fold_head: head has " + std::to_string(head.channels) +
                     " channels, transform has " + std::to_string(state.channels()));
  }
  FoldedHead folded;
  folded.num_classes = head.num_classes;
  folded.channels = head.channels;
  folded.weights = head.weights * state.u_inv;
  folded.bias = head.bias;
  return folded;
}

InvarianceReport check_invariance(const ClassifierHead& head, const FoldedHead& folded,
                                  const Matrix& u, std::span<const FeatureMap> features) {
  InvarianceReport rep;
  rep.samples = features.size();
  std::vector<double> worst(features.size(), 0.0);
  std::vector<char> mismatch(features.size(), 0);
  const long long n = static_cast<long long>(features.size());
#pragma omp parallel for schedule(static) num_threads(thread_limit())
  for (long long i = 0; i < n; ++i) {
    const auto old_l = logits(head, gap(features[i]));
    const auto new_l = logits(folded, gap(kernels::serial::apply_transform(u, features[i])));
    double w = 0.0;
    for (std::size_t c = 0; c < old_l.size(); ++c) {
      const double dev = std::abs(new_l[c] - old_l[c]) / std::max(std::abs(old_l[c]), 1e-12);
      w = std::max(w, dev);
    }
    worst[i] = w;
    const auto am_old = std::max_element(old_l.begin(), old_l.end()) - old_l.begin();
    const auto am_new = std::max_element(new_l.begin(), new_l.end()) - new_l.begin();
    mismatch[i] = am_old != am_new;
  }
  for (std::size_t i = 0; i < features.size(); ++i) {
    rep.max_relative_deviation = std::max(rep.max_relative_deviation, worst[i]);
    rep.argmax_mismatches += mismatch[i];
  }
  return rep;
}

FitResult fit(const DisentangleConfig& config, std::span<const FeatureMap> train_features,
              const ClassifierHead& head, std::span<const FeatureMap> invariance_features,
              std::ostream* log) {
  config.validate();
  if (train_features.empty()) throw ValidationError("fit: no training samples");
  const std::size_t d = train_features.front().channels;
  if (head.channels != d) {
    throw ShapeError("fit: head has " + std::to_string(head.channels) + " channels, features " +
                     std::to_string(d));
  }

  FitResult result;
  DisentangleState& state = result.state;
  state = DisentangleState::identity(d, config);

  if (!recalc_prototype_sets(state, train_features, config.proto_count_end) && log) {
    *log << "event=warning what=proto_count_clamped m=" << config.proto_count_end
         << " n=" << train_features.size() << '\n';
  }
  result.initial_purity = mean_protoset_purity(state, train_features);
  if (log) *log << "event=initial mean_purity=" << result.initial_purity << '\n';

  std::mt19937_64 rng(config.seed);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    EpochLog entry;
    entry.epoch = epoch;
    entry.proto_count = proto_count_at(epoch, config);
    if (recalc_due(epoch, config)) {
      entry.recalculated = true;
      if (!recalc_prototype_sets(state, train_features, entry.proto_count) && log) {
        *log << "event=warning what=proto_count_clamped m=" << entry.proto_count
             << " n=" << train_features.size() << '\n';
      }
    }

    auto pairs = all_pairs(state);
    shuffle_pairs(pairs, rng);
    double purity_acc = 0.0;
    std::size_t degenerate = 0;
    for (std::size_t begin = 0; begin < pairs.size(); begin += config.batch_size) {
      const std::size_t end = std::min(pairs.size(), begin + config.batch_size);
      const std::span<const ProtoPair> batch(pairs.data() + begin, end - begin);
      const PurityLoss loss = purity_loss(state, train_features, batch);
      if (!std::isfinite(loss.loss) || !all_finite(loss.grad_a)) {
        throw NumericError("fit: non-finite purity loss at epoch " + std::to_string(epoch) +
                           " step " + std::to_string(entry.steps));
      }
      purity_acc += (1.0 - loss.loss) * static_cast<double>(batch.size());
      degenerate += loss.degenerate;
      state.set_a(adam_step(state.a, loss.grad_a, state.adam));
      ++entry.steps;
    }
    entry.mean_batch_purity = pairs.empty() ? 0.0 : purity_acc / static_cast<double>(pairs.size());
    state.epoch = epoch + 1;

    const FoldedHead folded = fold_head(head, state);
    const auto inv = check_invariance(head, folded, state.u, invariance_features);
    entry.invariance_residual = inv.max_relative_deviation;
    entry.argmax_mismatches = inv.argmax_mismatches;
    if (log) {
      *log << "event=epoch epoch=" << epoch << " proto_count=" << entry.proto_count
           << " recalc=" << (entry.recalculated ? 1 : 0) << " steps=" << entry.steps
           << " mean_purity=" << entry.mean_batch_purity
           << " invariance_residual=" << entry.invariance_residual
           << " argmax_mismatches=" << entry.argmax_mismatches;
      if (degenerate > 0) *log << " degenerate=" << degenerate;
      *log << '\n';
    }
    result.history.push_back(entry);
  }

  // Final prototype sets at the end-of-schedule size.
  recalc_prototype_sets(state, train_features, config.proto_count_end);
  result.final_purity = mean_protoset_purity(state, train_features);
  result.folded = fold_head(head, state);
  if (log) *log << "event=final mean_purity=" << result.final_purity << '\n';
  return result;
}

// ---- persistence ----

void save_state(const StoredState& stored, const std::filesystem::path& path) {
  const auto& s = stored.state;
  const auto& c = stored.config;
  json protosets = json::array();
  for (const auto& set : s.protosets) {
    json entries = json::array();
    for (const auto& e : set) {
      entries.push_back({{"sample_id", e.sample_id},
                         {"activation", e.activation},
                         {"freq", optional_index(e.freq)},
                         {"time", optional_index(e.time)}});
    }
    protosets.push_back(std::move(entries));
  }
  json doc = {
      {"format", "apex-state"},
      {"scheme", std::string(to_string(s.scheme))},
      {"channels", s.channels()},
      {"epoch", s.epoch},
      {"a", std::vector<double>(s.a.data().begin(), s.a.data().end())},
      {"config",
       {{"scheme", std::string(to_string(c.scheme))},
        {"epochs", c.epochs},
        {"recalc_interval", c.recalc_interval},
        {"proto_count_start", c.proto_count_start},
        {"proto_count_end", c.proto_count_end},
        {"batch_size", c.batch_size},
        {"lr", c.lr},
        {"beta1", c.beta1},
        {"beta2", c.beta2},
        {"weight_decay", c.weight_decay},
        {"seed", c.seed}}},
      {"initial_purity", stored.initial_purity},
      {"final_purity", stored.final_purity},
      {"protosets", std::move(protosets)},
  };
  const std::string text = doc.dump();
  Container cont;
  cont.kind = ContainerKind::kState;
  cont.dtype = DType::kBytes;
  cont.dims = {text.size()};
  cont.payload.assign(text.begin(), text.end());
  write_container(cont, path);
}

StoredState load_state(const std::filesystem::path& path) {
  const Container cont = read_container(path);
  if (cont.kind != ContainerKind::kState || cont.dtype != DType::kBytes) {
    throw FormatError(path.string() + ": not a disentangle-state container");
  }
  StoredState out;
  try {
    const json doc = json::parse(cont.payload.begin(), cont.payload.end());
    if (doc.at("format").get<std::string>() != "apex-state") {
      throw FormatError(path.string() + ": unexpected state document format");
    }
    const auto& jc = doc.at("config");
    auto& c = out.config;
    c.scheme = parse_scheme(jc.at("scheme").get<std::string>());
    c.epochs = jc.at("epochs").get<std::size_t>();
    c.recalc_interval = jc.at("recalc_interval").get<std::size_t>();
    c.proto_count_start = jc.at("proto_count_start").get<std::size_t>();
    c.proto_count_end = jc.at("proto_count_end").get<std::size_t>();
    c.batch_size = jc.at("batch_size").get<std::size_t>();
    c.lr = jc.at("lr").get<double>();
    c.beta1 = jc.at("beta1").get<double>();
    c.beta2 = jc.at("beta2").get<double>();
    c.weight_decay = jc.at("weight_decay").get<double>();
    c.seed = jc.at("seed").get<std::uint64_t>();

    const std::size_t d = doc.at("channels").get<std::size_t>();
    out.state = DisentangleState::identity(d, c);
    out.state.scheme = parse_scheme(doc.at("scheme").get<std::string>());
    out.state.epoch = doc.at("epoch").get<std::size_t>();
    auto a = doc.at("a").get<std::vector<double>>();
    if (a.size() != d * d) throw FormatError(path.string() + ": A is not D x D");
    out.state.set_a(Matrix(d, d, std::move(a)));
    out.initial_purity = doc.at("initial_purity").get<double>();
    out.final_purity = doc.at("final_purity").get<double>();

    const auto& jp = doc.at("protosets");
    if (jp.size() != d) throw FormatError(path.string() + ": protoset count != D");
    for (std::size_t k = 0; k < d; ++k) {
      for (const auto& je : jp[k]) {
        ProtoSetEntry e;
        e.sample_id = je.at("sample_id").get<std::string>();
        e.activation = je.at("activation").get<double>();
        e.freq = read_optional_index(je.at("freq"));
        e.time = read_optional_index(je.at("time"));
        out.state.protosets[k].push_back(std::move(e));
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed state document: " + e.what());
  }
  return out;
}

}  // namespace apex
