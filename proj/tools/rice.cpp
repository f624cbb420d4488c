// Copyright (c) 2026, The RICE Authors
// SPDX-License-Identifier: Apache-2.0
//
// rice: synth | cluster | train | check | inspect

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rice/binary_io.hpp"
#include "rice/cluster.hpp"
#include "rice/gradcheck.hpp"
#include "rice/region_data.hpp"
#include "rice/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kConfig = 2, kNumeric = 3 };

struct Globals {
  std::uint64_t seed = 0;
  int threads = 1;
  std::string format = "text";
  bool force = false;
  bool json() const { return format == "json"; }
};

fs::path data_root() {
  const char* env = std::getenv("RICE_DATA_DIR");
  return env && *env ? fs::path(env) : fs::path(".");
}

// Resolves an unset path option against the data root.
fs::path resolve(const std::string& given, const char* default_name) {
  return given.empty() ? data_root() / default_name : fs::path(given);
}

void require_writable(const fs::path& path, const Globals& g) {
  if (fs::exists(path) && !g.force)
    throw rice::ConfigError(path.string() + " already exists (pass --force to overwrite)");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

void require_input(const fs::path& path, const char* what) {
  if (!fs::exists(path)) throw rice::ConfigError(std::string(what) + " not found: " + path.string());
}

void emit(const Globals& g, const json& j, const std::string& text) {
  if (g.json())
    std::cout << j.dump() << "\n";
  else
    std::cout << text;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  rice::SynthConfig config;
  std::string manifest, features;
};

int cmd_synth(const SynthArgs& a, const Globals& g) {
  a.config.validate();
  const auto manifest = resolve(a.manifest, "manifest.jsonl");
  const auto features = resolve(a.features, "features.ricf");
  require_writable(manifest, g);
  require_writable(features, g);
  const auto ds = rice::synth_generate(a.config, g.seed);
  rice::write_manifest(manifest, ds.records);
  rice::write_features(features, ds.features);
  std::size_t regions = 0;
  for (const auto& r : ds.records) regions += r.regions.size();
  json j{{"records", ds.records.size()}, {"regions", regions}, {"manifest", manifest.string()},
         {"features", features.string()}};
  emit(g, j,
       "records " + std::to_string(ds.records.size()) + "\nregions " + std::to_string(regions) + "\nmanifest " +
           manifest.string() + "\nfeatures " + features.string() + "\n");
  return kOk;
}

// ---------------------------------------------------------------------------
// cluster

struct ClusterArgs {
  std::size_t k = 1024;
  std::size_t coarse_k = 0;
  int iters = 25;
  std::string manifest, features, centroids, out_manifest;
};

int cmd_cluster(const ClusterArgs& a, const Globals& g) {
  const auto manifest = resolve(a.manifest, "manifest.jsonl");
  const auto features_path = resolve(a.features, "features.ricf");
  const auto centroids = resolve(a.centroids, "centroids.ricc");
  const auto out_manifest = resolve(a.out_manifest, "labeled.jsonl");
  require_input(manifest, "manifest");
  require_input(features_path, "feature file");
  require_writable(centroids, g);
  require_writable(out_manifest, g);

  auto records = rice::parse_manifest(manifest);
  const auto all = rice::read_features(features_path);
  std::size_t total = 0;
  for (const auto& r : records) total += r.regions.size();
  if (all.rows() != total)
    throw rice::ConfigError("feature file has " + std::to_string(all.rows()) + " rows but the manifest has " +
                            std::to_string(total) + " regions");

  // Only object regions are clustered; OCR regions keep their tokens.
  std::vector<std::size_t> rows;
  std::vector<int> truth;
  bool have_truth = true;
  std::size_t q = 0;
  for (const auto& r : records)
    for (const auto& reg : r.regions) {
      if (reg.kind == rice::RegionKind::Object) {
        rows.push_back(q);
        have_truth = have_truth && reg.latent.has_value();
        truth.push_back(reg.latent.value_or(-1));
      }
      ++q;
    }
  rice::Matrix<float> feats(rows.size(), all.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(all.row(rows[i]).begin(), all.cols(), feats.row(i).begin());
  if (feats.rows() < a.k)
    throw rice::ConfigError("cannot fit K=" + std::to_string(a.k) + " centers to " + std::to_string(feats.rows()) +
                            " object regions");

  rice::KMeansOptions opt;
  opt.k = a.k;
  if (a.coarse_k) opt.coarse_k = a.coarse_k;
  opt.iters = a.iters;
  opt.seed = g.seed;
  const auto fit = rice::kmeans_fit(feats, opt);
  const auto asg = rice::assign_all(feats, fit.table);

  std::size_t at = 0;
  for (auto& r : records)
    for (auto& reg : r.regions)
      if (reg.kind == rice::RegionKind::Object) reg.object_label = static_cast<int>(asg.labels[at++]);
  rice::write_centroids(centroids, fit.table);
  rice::write_manifest(out_manifest, records);

  std::size_t empty = 0;
  for (auto c : asg.histogram) empty += c == 0;
  json j{{"regions", feats.rows()}, {"k", a.k}, {"inertia", asg.inertia}, {"empty_clusters", empty},
         {"centroids", centroids.string()}, {"manifest", out_manifest.string()}};
  std::string text = "regions " + std::to_string(feats.rows()) + "\nk " + std::to_string(a.k) + "\ninertia " +
                     fmt("%.6g", asg.inertia) + "\nempty_clusters " + std::to_string(empty) + "\n";
  if (have_truth && !truth.empty()) {
    const double purity = rice::label_purity(asg.labels, truth);
    j["purity"] = purity;
    text += "purity " + fmt("%.4f", purity) + "\n";
  }
  text += "centroids " + centroids.string() + "\nmanifest " + out_manifest.string() + "\n";
  emit(g, j, text);
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  rice::TrainConfig config;
  std::string negatives = "per-image";
  std::string manifest, checkpoint, metrics, resume;
};

void infer_sizes(const std::vector<rice::ImageRecord>& records, rice::TrainConfig& c) {
  if (records.empty()) throw rice::ConfigError("manifest has no records");
  int max_label = -1, max_token = -1;
  for (const auto& r : records) {
    if (r.height != records.front().height || r.width != records.front().width)
      throw rice::ConfigError("all images must share one size; '" + r.image_id + "' differs");
    for (const auto& reg : r.regions) {
      if (reg.object_label) max_label = std::max(max_label, *reg.object_label);
      for (int t : reg.ocr_labels) max_token = std::max(max_token, t);
    }
  }
  c.encoder.height = records.front().height;
  c.encoder.width = records.front().width;
  if (c.object_classes == 0) c.object_classes = max_label + 1;
  if (c.ocr_classes == 0) c.ocr_classes = max_token + 1;
  if (c.object_classes < 1) throw rice::ConfigError("no object labels in the manifest and --k not given");
}

int cmd_train(TrainArgs a, const Globals& g) {
  auto& c = a.config;
  c.seed = g.seed;
  c.threads = g.threads;
  if (a.negatives == "per-image")
    c.negatives = rice::NegativeScope::PerImage;
  else if (a.negatives == "per-region")
    c.negatives = rice::NegativeScope::PerRegion;
  else
    throw rice::ConfigError("--negatives must be per-image or per-region");

  const auto manifest = resolve(a.manifest, "labeled.jsonl");
  const auto checkpoint = resolve(a.checkpoint, "checkpoint.ricp");
  const auto metrics_path = resolve(a.metrics, "metrics.jsonl");
  require_input(manifest, "manifest");
  const auto records = rice::parse_manifest(manifest);
  infer_sizes(records, c);
  c.validate();
  require_writable(checkpoint, g);
  const bool resuming = !a.resume.empty();
  if (!resuming) require_writable(metrics_path, g);

  rice::TrainState state;
  if (resuming) {
    require_input(a.resume, "checkpoint");
    state = rice::load_checkpoint(a.resume);
    if (!(state.encoder.config == c.encoder) || state.classifier.num_classes() != c.total_classes())
      throw rice::ConfigError("checkpoint " + a.resume + " does not match the configured model");
  } else {
    state = rice::TrainState::init(c, g.seed);
  }

  std::ofstream metrics(metrics_path, resuming ? std::ios::app : std::ios::trunc);
  if (!metrics) throw rice::ConfigError("cannot open " + metrics_path.string());
  std::optional<rice::StepMetrics> first, last;
  const auto t0 = std::chrono::steady_clock::now();
  int code = kOk;
  std::string error;
  try {
    rice::train(records, state, c, c.steps, [&](const rice::StepMetrics& m) {
      metrics << m.to_json_line() << "\n";
      if (!first) first = m;
      last = m;
      if (!g.json() && (m.step % 20 == 0 || m.step == 1))
        std::cerr << "step " << m.step << " object_loss " << fmt("%.4f", m.object_loss) << "\n";
    });
  } catch (const rice::NumericError& e) {
    code = kNumeric;
    error = e.what();
  }
  metrics.close();
  if (code != kOk) {
    std::cerr << "error: " << error << "\n";
    return code;
  }
  rice::save_checkpoint(checkpoint, state);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  json j{{"steps", state.step}, {"checkpoint", checkpoint.string()}, {"metrics", metrics_path.string()},
         {"seconds", secs}};
  std::string text = "steps " + std::to_string(state.step) + "\n";
  if (first) {
    j["first_object_loss"] = first->object_loss;
    j["final_object_loss"] = last->object_loss;
    text += "first_object_loss " + fmt("%.6g", first->object_loss) + "\nfinal_object_loss " +
            fmt("%.6g", last->object_loss) + "\n";
  }
  text += "checkpoint " + checkpoint.string() + "\nmetrics " + metrics_path.string() + "\n";
  emit(g, j, text);
  return kOk;
}

// ---------------------------------------------------------------------------
// check

struct CheckArgs {
  std::vector<std::string> components;
  std::string fault;
};

int cmd_check(const CheckArgs& a, const Globals& g) {
  rice::Fault fault = rice::Fault::None;
  if (a.fault == "margin-sign")
    fault = rice::Fault::MarginSign;
  else if (!a.fault.empty())
    throw rice::ConfigError("unknown fault '" + a.fault + "'");
  const auto suites = a.components.empty() ? rice::check_suites() : a.components;
  const auto known = rice::check_suites();
  for (const auto& s : suites)
    if (std::find(known.begin(), known.end(), s) == known.end())
      throw rice::ConfigError("unknown component '" + s + "'");

  bool ok = true;
  json arr = json::array();
  std::string text;
  for (const auto& s : suites) {
    const auto r = rice::run_check(s, g.seed, fault);
    ok = ok && r.passed();
    arr.push_back({{"component", s},
                   {"max_error", r.value},
                   {"tolerance", r.tolerance},
                   {"trials", r.trials},
                   {"seconds", r.seconds},
                   {"passed", r.passed()}});
    text += std::string(r.passed() ? "PASS " : "FAIL ") + s + " max_error " + fmt("%.3e", r.value) +
            " tolerance " + fmt("%.0e", r.tolerance) + "\n";
  }
  emit(g, json{{"checks", arr}, {"passed", ok}}, text);
  return ok ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------------------
// inspect

struct InspectArgs {
  std::string checkpoint, manifest;
  int images = 8;
  int bins = 20;
};

int cmd_inspect(const InspectArgs& a, const Globals& g) {
  const auto checkpoint = resolve(a.checkpoint, "checkpoint.ricp");
  const auto manifest = resolve(a.manifest, "labeled.jsonl");
  require_input(checkpoint, "checkpoint");
  require_input(manifest, "manifest");
  const auto state = rice::load_checkpoint(checkpoint);
  const auto records = rice::parse_manifest(manifest);
  if (a.images < 1 || a.bins < 1) throw rice::ConfigError("--images and --bins must be >= 1");

  std::vector<std::size_t> counts(static_cast<std::size_t>(a.bins), 0);
  double dist_sum = 0, cross_sum = 0;
  std::size_t pairs = 0, cross_n = 0, used = 0;
  for (const auto& rec : records) {
    if (used == static_cast<std::size_t>(a.images)) break;
    if (rec.regions.empty()) continue;
    const auto img = rice::render_synthetic(rec);
    const auto out = rice::encode(img, rec.regions, state.encoder);
    const auto h = rice::token_distance_histogram(out.tokens, a.bins);
    for (std::size_t b = 0; b < counts.size(); ++b) counts[b] += h.counts[b];
    dist_sum += h.mean * static_cast<double>(h.pairs);
    pairs += h.pairs;
    if (const auto c = rice::cross_class_token_distance(out.tokens, rec)) {
      cross_sum += *c;
      ++cross_n;
    }
    ++used;
  }
  if (used == 0) throw rice::ConfigError("manifest has no image with regions");
  const double mean = dist_sum / static_cast<double>(pairs);

  std::vector<rice::ImageRecord> labeled;
  for (const auto& r : records) {
    bool ok = true;
    for (const auto& reg : r.regions)
      if (reg.object_label && static_cast<std::size_t>(*reg.object_label) >= state.classifier.ocr_offset) ok = false;
    if (ok) labeled.push_back(r);
  }
  const auto acc = rice::nearest_center_accuracy(labeled, state);

  json j{{"step", state.step}, {"images", used}, {"bins", counts}, {"mean_distance", mean}};
  j["cross_class_distance"] = cross_n ? json(cross_sum / static_cast<double>(cross_n)) : json(nullptr);
  j["region_accuracy"] = acc.accuracy();
  j["regions"] = acc.total;

  std::string text = "checkpoint step " + std::to_string(state.step) + "\ntoken distance histogram over [0, 2] (" +
                     std::to_string(used) + " images)\n";
  std::size_t peak = 1;
  for (auto c : counts) peak = std::max(peak, c);
  for (std::size_t b = 0; b < counts.size(); ++b) {
    const double lo = 2.0 * static_cast<double>(b) / a.bins, hi = 2.0 * static_cast<double>(b + 1) / a.bins;
    text += fmt("  [%.2f, ", lo) + fmt("%.2f) ", hi) + fmt("%8.0f ", static_cast<double>(counts[b])) +
            std::string(counts[b] * 40 / peak, '#') + "\n";
  }
  text += "mean_distance " + fmt("%.4f", mean) + "\n";
  text += "cross_class_distance " + (cross_n ? fmt("%.4f", cross_sum / static_cast<double>(cross_n)) : "n/a") + "\n";
  text += "region_accuracy " + fmt("%.4f", acc.accuracy()) + " (" + std::to_string(acc.correct) + "/" +
          std::to_string(acc.total) + ")\n";
  emit(g, j, text);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Region-aware cluster discrimination: data, clustering, training and checks"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "Flat key = value file; keys are <subcommand>.<flag> or global flags");
  app.allow_config_extras(false);
  Globals g;
  app.add_option("--seed", g.seed, "Base seed");
  app.add_option("--threads", g.threads, "Worker cap (results do not depend on it)")->check(CLI::PositiveNumber);
  app.add_option("--format", g.format, "Output format")->check(CLI::IsMember({"text", "json"}));
  app.add_flag("--force", g.force, "Overwrite existing outputs");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic manifest and feature file");
  synth->add_option("--images", sa.config.images);
  synth->add_option("--classes", sa.config.classes);
  synth->add_option("--height", sa.config.height);
  synth->add_option("--width", sa.config.width);
  synth->add_option("--regions", sa.config.regions_per_image, "Object regions per image");
  synth->add_option("--ocr-regions", sa.config.ocr_regions_per_image);
  synth->add_option("--vocab", sa.config.vocab_size);
  synth->add_option("--max-tokens", sa.config.max_ocr_tokens);
  synth->add_option("--feature-dim", sa.config.feature_dim);
  synth->add_option("--feature-noise", sa.config.feature_noise);
  synth->add_option("--pixel-noise", sa.config.pixel_noise);
  synth->add_option("--patch", sa.config.patch_size);
  synth->add_option("--manifest", sa.manifest, "Output manifest (default $RICE_DATA_DIR/manifest.jsonl)");
  synth->add_option("--features", sa.features, "Output features (default $RICE_DATA_DIR/features.ricf)");

  ClusterArgs ca;
  auto* cluster = app.add_subcommand("cluster", "Fit centroids and pseudo-label object regions");
  cluster->add_option("--k", ca.k, "Number of centers");
  cluster->add_option("--coarse-k", ca.coarse_k, "Coarse centers for the two-level fit (0: flat)");
  cluster->add_option("--iters", ca.iters);
  cluster->add_option("--manifest", ca.manifest, "Input manifest (default $RICE_DATA_DIR/manifest.jsonl)");
  cluster->add_option("--features", ca.features, "Input features (default $RICE_DATA_DIR/features.ricf)");
  cluster->add_option("--centroids", ca.centroids, "Output centroids (default $RICE_DATA_DIR/centroids.ricc)");
  cluster->add_option("--out-manifest", ca.out_manifest, "Output manifest (default $RICE_DATA_DIR/labeled.jsonl)");

  TrainArgs ta;
  ta.config.object_classes = 0;
  ta.config.ocr_classes = 0;
  auto& tc = ta.config;
  auto* train = app.add_subcommand("train", "Train the encoder and classifier");
  train->add_option("--steps", tc.steps);
  train->add_option("--regions", tc.regions_per_image, "Regions sampled per image (N)");
  train->add_option("--k", tc.object_classes, "Object classes (default: largest label + 1)");
  train->add_option("--ocr-classes", tc.ocr_classes, "OCR vocabulary size (default: largest token + 1)");
  train->add_option("--rho", tc.rho);
  train->add_option("--margin", tc.margin);
  train->add_option("--scale", tc.scale);
  train->add_option("--lr", tc.lr);
  train->add_option("--weight-decay", tc.weight_decay);
  train->add_option("--batch-size", tc.batch_size);
  train->add_option("--lambda-ocr", tc.lambda_ocr);
  train->add_option("--shards", tc.shards);
  train->add_option("--negatives", ta.negatives, "per-image or per-region");
  train->add_flag("--dedup", tc.dedup_resamples, "Resampled duplicate regions carry no loss");
  train->add_option("--layers", tc.encoder.layers);
  train->add_option("--region-layers", tc.encoder.region_layers);
  train->add_option("--heads", tc.encoder.heads);
  train->add_option("--dim", tc.encoder.dim);
  train->add_option("--patch", tc.encoder.patch);
  train->add_option("--mlp-hidden", tc.encoder.mlp_hidden);
  train->add_option("--manifest", ta.manifest, "Labeled manifest (default $RICE_DATA_DIR/labeled.jsonl)");
  train->add_option("--checkpoint", ta.checkpoint, "Output checkpoint (default $RICE_DATA_DIR/checkpoint.ricp)");
  train->add_option("--metrics", ta.metrics, "Metrics stream (default $RICE_DATA_DIR/metrics.jsonl)");
  train->add_option("--resume", ta.resume, "Continue from this checkpoint, appending to the metrics stream");

  CheckArgs ka;
  auto* check = app.add_subcommand("check", "Run gradient checks and the mask oracle");
  check->add_option("--component", ka.components, "Suite(s) to run (default: all)");
  check->add_option("--inject-fault", ka.fault)->group("");

  InspectArgs ia;
  auto* inspect = app.add_subcommand("inspect", "Token-distance histogram and region accuracy of a checkpoint");
  inspect->add_option("--checkpoint", ia.checkpoint, "Checkpoint (default $RICE_DATA_DIR/checkpoint.ricp)");
  inspect->add_option("--manifest", ia.manifest, "Labeled manifest (default $RICE_DATA_DIR/labeled.jsonl)");
  inspect->add_option("--images", ia.images, "Images used for the histogram");
  inspect->add_option("--bins", ia.bins);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (synth->parsed()) return cmd_synth(sa, g);
    if (cluster->parsed()) return cmd_cluster(ca, g);
    if (train->parsed()) return cmd_train(ta, g);
    if (check->parsed()) return cmd_check(ka, g);
    if (inspect->parsed()) return cmd_inspect(ia, g);
  } catch (const rice::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::logic_error& e) {
    // invalid_argument and friends are input problems; other logic errors
    // come from numeric invariants.
    std::cerr << "error: " << e.what() << "\n";
    return dynamic_cast<const std::invalid_argument*>(&e) || dynamic_cast<const std::out_of_range*>(&e) ? kConfig
                                                                                                       : kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  }
  return kConfig;
}
