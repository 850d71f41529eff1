// apex: command-line front end.
//
// Exit codes: 0 success, 1 check failure, 2 usage or input error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "apex/data_model.hpp"
#include "apex/disentangler.hpp"
#include "apex/error.hpp"
#include "apex/evaluator.hpp"
#include "apex/explainer.hpp"
#include "apex/kernels.hpp"
#include "apex/prototype_bank.hpp"
#include "apex/synth.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

constexpr double kFitInvarianceLimit = 1e-4;
constexpr double kInvarianceLimit = 1e-5;

struct Paths {
  std::string manifest;
  std::string head;
  std::string state;
  std::string bank;
  std::string out;
};

std::vector<apex::FeatureMap> select(const apex::Dataset& ds, apex::Split split) {
  std::vector<apex::FeatureMap> out;
  for (auto i : ds.indices(split)) out.push_back(ds.features[i]);
  return out;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw apex::IoError("cannot write " + path.string());
  out << text;
}

apex::ClassifierHead load_head_for(const std::string& path, const apex::Dataset& ds) {
  auto head = apex::read_head(path);
  if (!ds.features.empty() && head.channels != ds.features.front().channels) {
    throw apex::ShapeError("head has " + std::to_string(head.channels) + " channels, features have " +
                           std::to_string(ds.features.front().channels));
  }
  if (head.num_classes != ds.manifest.num_classes()) {
    throw apex::ShapeError("head has " + std::to_string(head.num_classes) + " classes, manifest has " +
                           std::to_string(ds.manifest.num_classes()));
  }
  return head;
}

// ---- synth ----

struct SynthArgs {
  std::string out;
  std::size_t channels = 16;
  std::size_t samples = 500;
  std::uint64_t seed = 7;
  double mixing_scale = apex::SynthConfig{}.mixing_scale;
  double noise_sigma = apex::SynthConfig{}.noise_sigma;
  double test_fraction = apex::SynthConfig{}.test_fraction;
};

int cmd_synth(const SynthArgs& a) {
  auto cfg = apex::SynthConfig::standard(a.channels);
  cfg.num_samples = a.samples;
  cfg.seed = a.seed;
  cfg.mixing_scale = a.mixing_scale;
  cfg.noise_sigma = a.noise_sigma;
  cfg.test_fraction = a.test_fraction;
  const auto synth = apex::generate(cfg);
  apex::write_synth(synth, a.out);

  std::size_t train = synth.dataset.indices(apex::Split::kTrain).size();
  std::cout << "event=synth out=" << a.out << " samples=" << cfg.num_samples << " train=" << train
            << " channels=" << cfg.channels << " classes=" << cfg.num_classes()
            << " seed=" << cfg.seed << '\n';
  std::cout << "event=ground_truth recovery_at_identity="
            << apex::recovery_score(apex::Matrix::identity(cfg.channels), synth.model.mixing())
            << '\n';
  for (std::size_t c = 0; c < cfg.num_concepts(); ++c) {
    std::cout << "event=concept id=" << c << " kind=" << apex::to_string(cfg.concept_kinds[c]);
    auto it = std::find(cfg.class_concepts.begin(), cfg.class_concepts.end(), c);
    if (it != cfg.class_concepts.end()) std::cout << " class=" << (it - cfg.class_concepts.begin());
    std::cout << '\n';
  }
  return kOk;
}

// ---- fit ----

int cmd_fit(const Paths& p, const apex::DisentangleConfig& cfg, const std::string& scheme,
            const std::string& log_path) {
  apex::DisentangleConfig c = cfg;
  c.scheme = apex::parse_scheme(scheme);
  const auto ds = apex::load_dataset(p.manifest, false);
  const auto head = load_head_for(p.head, ds);
  const auto train = select(ds, apex::Split::kTrain);

  std::ostringstream log;
  const auto result = apex::fit(c, train, head, ds.features, &log);
  std::cout << log.str();
  if (!log_path.empty()) write_file(log_path, log.str());

  apex::StoredState stored{c, result.state, result.initial_purity, result.final_purity};
  apex::save_state(stored, p.out);

  double worst = 0.0;
  for (const auto& h : result.history) worst = std::max(worst, h.invariance_residual);
  std::cout << "event=done state=" << p.out << " initial_purity=" << result.initial_purity
            << " final_purity=" << result.final_purity << " max_invariance_residual=" << worst
            << '\n';
  if (worst > kFitInvarianceLimit) {
    std::cerr << "apex fit: invariance residual " << worst << " exceeds " << kFitInvarianceLimit
              << '\n';
    return kCheckFailed;
  }
  return kOk;
}

// ---- bank ----

int cmd_bank(const Paths& p, std::size_t m, const std::string& polarity) {
  const auto ds = apex::load_dataset(p.manifest, false);
  const auto head = load_head_for(p.head, ds);
  const auto stored = apex::load_state(p.state);
  const auto folded = apex::fold_head(head, stored.state);
  const auto train = select(ds, apex::Split::kTrain);
  const auto bank =
      apex::build_bank(stored.state, train, folded, m, apex::parse_polarity(polarity));
  apex::persist_bank(bank, p.out);
  std::cout << "event=bank out=" << p.out << " scheme=" << apex::to_string(bank.scheme)
            << " polarity=" << apex::to_string(bank.polarity) << " m=" << bank.m
            << " channels=" << bank.channels() << '\n';
  return kOk;
}

// ---- explain ----

int cmd_explain(const Paths& p, std::vector<std::string> samples, std::size_t top_k) {
  const auto ds = apex::load_dataset(p.manifest, true);
  const auto head = load_head_for(p.head, ds);
  const auto stored = apex::load_state(p.state);
  const auto folded = apex::fold_head(head, stored.state);
  std::optional<apex::PrototypeBank> bank;
  if (!p.bank.empty()) bank = apex::load_bank(p.bank);

  std::vector<std::size_t> which;
  if (samples.empty()) {
    which = ds.indices(apex::Split::kTest);
  } else {
    for (const auto& id : samples) {
      std::size_t i = 0;
      while (i < ds.size() && ds.manifest.samples[i].sample_id != id) ++i;
      if (i == ds.size()) throw apex::ValidationError("unknown sample id '" + id + "'");
      which.push_back(i);
    }
  }
  for (auto i : which) {
    const auto ex = apex::explain(ds.features[i], stored.state, folded, bank ? &*bank : nullptr,
                                  top_k);
    const apex::SpectrogramImage* x = ds.spectrograms.empty() ? nullptr : &ds.spectrograms[i];
    apex::render_explanation(ex, x, p.out);
    std::cout << "event=explain sample=" << ex.sample_id << " predicted=" << ex.predicted_class;
    for (const auto& ce : ex.channels)
      std::cout << " c" << ce.channel << '=' << ce.contribution;
    std::cout << '\n';
  }
  return kOk;
}

// ---- invariance ----

int cmd_invariance(const Paths& p) {
  const auto ds = apex::load_dataset(p.manifest, false);
  const auto head = load_head_for(p.head, ds);
  const auto stored = apex::load_state(p.state);
  const auto folded = apex::fold_head(head, stored.state);
  const auto r = apex::check_invariance(head, folded, stored.state.u, ds.features);
  std::cout << "event=invariance samples=" << r.samples
            << " max_relative_deviation=" << r.max_relative_deviation
            << " argmax_mismatches=" << r.argmax_mismatches << '\n';
  if (r.max_relative_deviation > kInvarianceLimit || r.argmax_mismatches > 0) return kCheckFailed;
  return kOk;
}

// ---- mask-eval ----

struct MaskArgs {
  std::string synth_dir;
  std::vector<std::string> states;
  double floor = 0.1;
  std::size_t softness = 2;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3};
  std::string split = "all";
  std::string out_json;
  std::string out_table;
};

int cmd_mask_eval(const MaskArgs& a) {
  const fs::path dir = a.synth_dir;
  if (!fs::exists(dir / "ground_truth.json")) {
    throw apex::ValidationError("mask-eval needs a forward model; " + dir.string() +
                                " has no ground_truth.json (synthetic datasets only)");
  }
  auto synth = apex::read_synth(dir);
  const auto ds = apex::load_dataset(dir / "manifest.jsonl", true);
  const auto head = load_head_for((dir / "head.apx").string(), ds);

  std::vector<apex::StoredState> stored;
  std::vector<apex::FoldedHead> folded;
  for (const auto& s : a.states) {
    stored.push_back(apex::load_state(s));
    folded.push_back(apex::fold_head(head, stored.back().state));
  }
  std::vector<apex::StudyScheme> schemes;
  for (std::size_t i = 0; i < stored.size(); ++i) schemes.push_back({&stored[i].state, &folded[i]});

  std::vector<std::size_t> idx;
  if (a.split == "all") {
    for (std::size_t i = 0; i < ds.size(); ++i) idx.push_back(i);
  } else if (a.split == "train") {
    idx = ds.indices(apex::Split::kTrain);
  } else if (a.split == "val") {
    idx = ds.indices(apex::Split::kVal);
  } else if (a.split == "test") {
    idx = ds.indices(apex::Split::kTest);
  } else {
    throw apex::ConfigError("unknown split '" + a.split + "'");
  }
  if (ds.spectrograms.size() != ds.size()) throw apex::DataError("mask-eval: spectrograms missing");

  std::vector<apex::FeatureMap> f;
  std::vector<apex::SpectrogramImage> x;
  apex::MaskStudyInput in;
  for (auto i : idx) {
    f.push_back(ds.features[i]);
    x.push_back(ds.spectrograms[i]);
    in.labels.push_back(ds.manifest.samples[i].labels);
    in.sample_indices.push_back(i);
  }
  in.features = f;
  in.spectrograms = x;
  in.num_classes = head.num_classes;

  apex::MaskStudyConfig mc;
  mc.attenuation_floor = a.floor;
  mc.edge_softness = a.softness;
  mc.seeds = a.seeds;
  const auto reports = apex::masking_study(
      in,
      [&](const apex::SpectrogramImage& s, std::size_t i) { return synth.model.forward(s, i, head); },
      schemes, mc);
  const auto table = apex::format_report_table(reports);
  std::cout << table;
  if (!a.out_table.empty()) write_file(a.out_table, table);
  if (!a.out_json.empty()) write_file(a.out_json, apex::report_json(reports));
  return kOk;
}

// ---- metrics ----

int cmd_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw apex::IoError("cannot open " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw apex::FormatError(path + ": " + e.what());
  }
  std::cout << std::setprecision(10);
  try {
    const auto& s = doc.at("scores");
    const auto& l = doc.at("labels");
    if (s.empty()) throw apex::ValidationError("metrics: no scores");
    if (s.front().is_number()) {
      const auto scores = s.get<std::vector<double>>();
      const auto labels = l.get<std::vector<int>>();
      std::cout << "eer=" << apex::eer(scores, labels) << " auroc=" << apex::auroc(scores, labels)
                << " average_precision=" << apex::average_precision(scores, labels) << '\n';
      return kOk;
    }
    const auto rows = s.get<std::vector<std::vector<double>>>();
    const auto labels = l.get<std::vector<std::vector<std::size_t>>>();
    const std::size_t cols = rows.front().size();
    apex::Matrix m(rows.size(), cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != cols) throw apex::ShapeError("metrics: ragged score matrix");
      for (std::size_t c = 0; c < cols; ++c) m(i, c) = rows[i][c];
    }
    const auto cm = apex::cmap(m, labels);
    const auto au = apex::macro_auroc(m, labels);
    if (cm.excluded > 0) {
      std::cerr << "apex metrics: warning: " << cm.excluded
                << " class(es) without positives excluded from cmAP\n";
    }
    std::cout << "cmap=" << cm.value << " auroc=" << au.value
              << " t1_acc=" << apex::t1_acc(m, labels) << '\n';
  } catch (const json::exception& e) {
    throw apex::FormatError(path + ": " + e.what());
  }
  return kOk;
}

void apply_threads(int threads) {
  if (threads <= 0) {
    if (const char* env = std::getenv("APEX_THREADS")) threads = std::atoi(env);
  }
  if (threads > 0) apex::set_thread_limit(threads);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"apex: post-hoc prototype explanations for audio classifiers"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker thread cap (falls back to APEX_THREADS)");

  Paths paths;
  apex::DisentangleConfig dc;
  std::string scheme = std::string(apex::to_string(dc.scheme));
  std::string log_path;

  auto add_scheme = [&](CLI::App* sub) {
    sub->add_option("--scheme", scheme, "square | time | frequency | time_frequency")
        ->capture_default_str();
  };

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "Generate the synthetic ground-truth benchmark");
  synth->add_option("--out", synth_args.out, "Output directory")->required();
  synth->add_option("--channels", synth_args.channels)->capture_default_str();
  synth->add_option("--samples", synth_args.samples)->capture_default_str();
  synth->add_option("--seed", synth_args.seed)->capture_default_str();
  synth->add_option("--mixing-scale", synth_args.mixing_scale)->capture_default_str();
  synth->add_option("--noise-sigma", synth_args.noise_sigma)->capture_default_str();
  synth->add_option("--test-fraction", synth_args.test_fraction)->capture_default_str();

  auto* fit = app.add_subcommand("fit", "Learn the disentangling transform");
  fit->add_option("--manifest", paths.manifest)->required()->check(CLI::ExistingFile);
  fit->add_option("--head", paths.head)->required()->check(CLI::ExistingFile);
  fit->add_option("--out", paths.state, "State file to write")->required();
  add_scheme(fit);
  fit->add_option("--epochs", dc.epochs)->capture_default_str();
  fit->add_option("--recalc-interval", dc.recalc_interval)->capture_default_str();
  fit->add_option("--proto-count-start", dc.proto_count_start)->capture_default_str();
  fit->add_option("--proto-count-end", dc.proto_count_end)->capture_default_str();
  fit->add_option("--batch-size", dc.batch_size)->capture_default_str();
  fit->add_option("--lr", dc.lr)->capture_default_str();
  fit->add_option("--beta1", dc.beta1)->capture_default_str();
  fit->add_option("--beta2", dc.beta2)->capture_default_str();
  fit->add_option("--weight-decay", dc.weight_decay)->capture_default_str();
  fit->add_option("--seed", dc.seed)->capture_default_str();
  fit->add_option("--log", log_path, "Also write the training log here");

  std::size_t bank_m = apex::kDefaultBankSize;
  std::string polarity = "positive";
  auto* bank = app.add_subcommand("bank", "Build the prototype bank");
  bank->add_option("--manifest", paths.manifest)->required()->check(CLI::ExistingFile);
  bank->add_option("--head", paths.head)->required()->check(CLI::ExistingFile);
  bank->add_option("--state", paths.state)->required()->check(CLI::ExistingFile);
  bank->add_option("--out", paths.out)->required();
  bank->add_option("--m", bank_m)->capture_default_str();
  bank->add_option("--polarity", polarity)->capture_default_str();

  std::vector<std::string> sample_ids;
  std::size_t top_k = apex::kDefaultTopK;
  auto* explain = app.add_subcommand("explain", "Explain predictions and render overlays");
  explain->add_option("--manifest", paths.manifest)->required()->check(CLI::ExistingFile);
  explain->add_option("--head", paths.head)->required()->check(CLI::ExistingFile);
  explain->add_option("--state", paths.state)->required()->check(CLI::ExistingFile);
  explain->add_option("--bank", paths.bank)->check(CLI::ExistingFile);
  explain->add_option("--sample", sample_ids, "Sample id (repeatable; default: test split)");
  explain->add_option("--top-k", top_k)->capture_default_str();
  explain->add_option("--out", paths.out, "Output directory")->required();

  auto* invariance = app.add_subcommand("invariance", "Check that folding preserves the logits");
  invariance->add_option("--manifest", paths.manifest)->required()->check(CLI::ExistingFile);
  invariance->add_option("--head", paths.head)->required()->check(CLI::ExistingFile);
  invariance->add_option("--state", paths.state)->required()->check(CLI::ExistingFile);

  MaskArgs mask_args;
  auto* mask = app.add_subcommand("mask-eval", "Masking study on a synthetic dataset");
  mask->add_option("--synth", mask_args.synth_dir, "Directory written by `apex synth`")
      ->required()
      ->check(CLI::ExistingDirectory);
  mask->add_option("--state", mask_args.states, "State file per scheme (repeatable)")
      ->required()
      ->check(CLI::ExistingFile);
  mask->add_option("--floor", mask_args.floor)->capture_default_str();
  mask->add_option("--softness", mask_args.softness)->capture_default_str();
  mask->add_option("--seeds", mask_args.seeds)->delimiter(',');
  mask->add_option("--split", mask_args.split, "all | train | val | test")->capture_default_str();
  mask->add_option("--out-json", mask_args.out_json);
  mask->add_option("--out-table", mask_args.out_table);

  std::string scores_path;
  auto* metrics = app.add_subcommand("metrics", "Score metrics from a JSON file");
  metrics->add_option("--scores", scores_path,
                      "{\"scores\": [...], \"labels\": [...]} (binary) or per-class rows")
      ->required()
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    apply_threads(threads);
    if (*synth) return cmd_synth(synth_args);
    if (*fit) {
      Paths p = paths;
      p.out = paths.state;
      return cmd_fit(p, dc, scheme, log_path);
    }
    if (*bank) return cmd_bank(paths, bank_m, polarity);
    if (*explain) return cmd_explain(paths, sample_ids, top_k);
    if (*invariance) return cmd_invariance(paths);
    if (*mask) return cmd_mask_eval(mask_args);
    if (*metrics) return cmd_metrics(scores_path);
  } catch (const apex::Error& e) {
    std::cerr << "apex: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "apex: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
