#include "apex/prototype_bank.hpp"

#include <algorithm>
#include <numeric>

#include <nlohmann/json.hpp>

#include "apex/error.hpp"
#include "apex/kernels.hpp"

namespace apex {

using json = nlohmann::json;

namespace {

json optional_index(const std::optional<std::size_t>& v) {
  return v ? json(*v) : json(nullptr);
}

std::optional<std::size_t> read_optional_index(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<std::size_t>();
}

std::size_t dominant_class(const FoldedHead& folded, std::size_t k) {
  std::size_t best = 0;
  for (std::size_t n = 1; n < folded.num_classes; ++n)
    if (folded.weights(n, k) > folded.weights(best, k)) best = n;
  return best;
}

}  // namespace

const char* to_string(Polarity polarity) {
  return polarity == Polarity::kPositive ? "positive" : "negative";
}

Polarity parse_polarity(std::string_view name) {
  if (name == "positive") return Polarity::kPositive;
  if (name == "negative") return Polarity::kNegative;
  throw ConfigError("unknown polarity '" + std::string(name) + "'");
}

PrototypeBank build_bank(const DisentangleState& state, std::span<const FeatureMap> features,
                         const FoldedHead& folded, std::size_t m, Polarity polarity) {
  if (features.empty()) throw ValidationError("build_bank: no training features");
  if (m < 1) throw ConfigError("build_bank: m must be >= 1");
  const std::size_t d = state.channels();
  if (folded.channels != d) throw ShapeError("build_bank: head channels != state channels");
  const std::size_t n = features.size();
  m = std::min(m, n);

  const Matrix sums = kernels::parallel::channel_sums(features);
  if (sums.cols() != d) throw ShapeError("build_bank: channel count mismatch");
  const Matrix activ = sums * state.u.transposed();

  PrototypeBank bank;
  bank.scheme = state.scheme;
  bank.polarity = polarity;
  bank.m = m;
  bank.freq_bins = features.front().freq_bins;
  bank.time_frames = features.front().time_frames;
  bank.per_channel.assign(d, {});

  const bool positive = polarity == Polarity::kPositive;
  const long long dd = static_cast<long long>(d);
#pragma omp parallel for schedule(dynamic) num_threads(thread_limit())
  for (long long kk = 0; kk < dd; ++kk) {
    const std::size_t k = static_cast<std::size_t>(kk);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + m, order.end(),
                      [&](std::size_t x, std::size_t y) {
                        const double ax = activ(x, k), ay = activ(y, k);
                        if (ax != ay) return positive ? ax > ay : ax < ay;
                        return features[x].sample_id < features[y].sample_id;
                      });
    auto& list = bank.per_channel[k];
    list.reserve(m);
    for (std::size_t r = 0; r < m; ++r) {
      const std::size_t i = order[r];
      const LatentMap zhat = kernels::serial::apply_transform(state.u, features[i]);
      const PrototypeVector p = extract(zhat, k, state.scheme, features[i].sample_id);
      PrototypeEntry e;
      e.sample_id = features[i].sample_id;
      e.activation = activ(i, k);
      e.freq = p.freq;
      e.time = p.time;
      e.prototype_vector = p.vector;
      e.purity = purity(p);
      e.dominant_class = dominant_class(folded, k);
      list.push_back(std::move(e));
    }
  }
  return bank;
}

std::vector<PrototypeEntry> query_bank(const PrototypeBank& bank, std::size_t channel,
                                       std::size_t top) {
  if (channel >= bank.channels()) {
    throw ShapeError("query_bank: channel " + std::to_string(channel) + " out of range (D = " +
                     std::to_string(bank.channels()) + ")");
  }
  const auto& list = bank.per_channel[channel];
  const std::size_t n = std::min(top, list.size());
  return {list.begin(), list.begin() + static_cast<std::ptrdiff_t>(n)};
}

void persist_bank(const PrototypeBank& bank, const std::filesystem::path& path) {
  json channels = json::array();
  for (const auto& list : bank.per_channel) {
    json entries = json::array();
    for (const auto& e : list) {
      entries.push_back({{"sample_id", e.sample_id},
                         {"activation", e.activation},
                         {"freq", optional_index(e.freq)},
                         {"time", optional_index(e.time)},
                         {"prototype_vector", e.prototype_vector},
                         {"purity", e.purity},
                         {"dominant_class", e.dominant_class}});
    }
    channels.push_back(std::move(entries));
  }
  const json doc = {{"format", "apex-bank"},
                    {"scheme", std::string(to_string(bank.scheme))},
                    {"polarity", to_string(bank.polarity)},
                    {"m", bank.m},
                    {"freq_bins", bank.freq_bins},
                    {"time_frames", bank.time_frames},
                    {"channels", std::move(channels)}};
  const std::string text = doc.dump();
  Container c;
  c.kind = ContainerKind::kBank;
  c.dtype = DType::kBytes;
  c.dims = {text.size()};
  c.payload.assign(text.begin(), text.end());
  write_container(c, path);
}

PrototypeBank load_bank(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.kind != ContainerKind::kBank || c.dtype != DType::kBytes) {
    throw FormatError(path.string() + ": not a prototype-bank container");
  }
  PrototypeBank bank;
  try {
    const json doc = json::parse(c.payload.begin(), c.payload.end());
    if (doc.at("format").get<std::string>() != "apex-bank") {
      throw FormatError(path.string() + ": unexpected bank document format");
    }
    bank.scheme = parse_scheme(doc.at("scheme").get<std::string>());
    bank.polarity = parse_polarity(doc.at("polarity").get<std::string>());
    bank.m = doc.at("m").get<std::size_t>();
    bank.freq_bins = doc.at("freq_bins").get<std::size_t>();
    bank.time_frames = doc.at("time_frames").get<std::size_t>();
    for (const auto& jl : doc.at("channels")) {
      std::vector<PrototypeEntry> list;
      for (const auto& je : jl) {
        PrototypeEntry e;
        e.sample_id = je.at("sample_id").get<std::string>();
        e.activation = je.at("activation").get<double>();
        e.freq = read_optional_index(je.at("freq"));
        e.time = read_optional_index(je.at("time"));
        e.prototype_vector = je.at("prototype_vector").get<std::vector<double>>();
        e.purity = je.at("purity").get<double>();
        e.dominant_class = je.at("dominant_class").get<std::size_t>();
        if (e.freq && *e.freq >= bank.freq_bins) throw FormatError(path.string() + ": freq out of range");
        if (e.time && *e.time >= bank.time_frames) throw FormatError(path.string() + ": time out of range");
        list.push_back(std::move(e));
      }
      bank.per_channel.push_back(std::move(list));
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed bank document: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return bank;
}

}  // namespace apex
