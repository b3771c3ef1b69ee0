#include "saliency/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "saliency/analysis.hpp"
#include "saliency/checkpoint_io.hpp"
#include "saliency/dataset.hpp"
#include "saliency/decay.hpp"
#include "saliency/hashing.hpp"
#include "saliency/heatmap.hpp"
#include "saliency/parallel.hpp"
#include "saliency/perturbation.hpp"
#include "saliency/training.hpp"

namespace saliency {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* const kMethodNames =
    "gradient, gxi, activity:l, bias:l, fullgrad:per-feature, fullgrad:per-layer, agg:l0, gradcam:l";

std::size_t parse_layer(const std::string& text, const std::string& arg, std::size_t min_layer, std::size_t depth,
                        const std::string& key) {
  std::size_t v = 0;
  const auto res = std::from_chars(arg.data(), arg.data() + arg.size(), v);
  if (arg.empty() || res.ec != std::errc() || res.ptr != arg.data() + arg.size()) {
    throw ConfigError(key, "method '" + text + "' needs a layer index");
  }
  if (v < min_layer || v > depth) {
    throw ConfigError(key, "method '" + text + "' layer must lie in [" + std::to_string(min_layer) + ", " +
                               std::to_string(depth) + "]");
  }
  return v;
}

}  // namespace

MethodSpec parse_method(const std::string& text, std::size_t depth, bool allow_reference, const std::string& key) {
  MethodSpec m;
  m.name = text;
  const auto colon = text.find(':');
  const std::string head = text.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
  const bool has_arg = colon != std::string::npos;
  m.kind = head;
  if ((head == "gradient" || head == "gxi") && !has_arg) return m;
  if (allow_reference && (head == "oracle" || head == "random" || head == "shuffled-oracle") && !has_arg) return m;
  if (head == "activity" || head == "agg" || head == "gradcam") {
    m.layer = parse_layer(text, arg, 0, depth, key);
    return m;
  }
  if (head == "bias") {
    m.layer = parse_layer(text, arg, 1, depth, key);
    return m;
  }
  if (head == "fullgrad" && (arg == "per-feature" || arg == "per-layer")) {
    m.granularity = arg == "per-feature" ? Granularity::per_feature : Granularity::per_layer;
    return m;
  }
  std::string valid = kMethodNames;
  if (allow_reference) valid += ", oracle, random, shuffled-oracle";
  throw ConfigError(key, "unknown method '" + text + "'; valid methods: " + valid);
}

SaliencyMap method_saliency(const Explanation& e, const MethodSpec& m, std::vector<std::string>* warnings) {
  const PsiConfig psi_config = PsiConfig::aggregation();
  auto warn = [&](const std::string& w) {
    if (warnings) warnings->push_back(w);
  };
  SaliencyMap s;
  if (m.kind == "gradient") {
    s = e.gradient_saliency();
  } else if (m.kind == "gxi") {
    s = psi(e.gradient_times_input(), psi_config, e.height(), e.width());
  } else if (m.kind == "activity") {
    s = psi(e.activity(m.layer), psi_config, e.height(), e.width());
  } else if (m.kind == "bias") {
    const AttributionMap b = e.bias(m.layer);
    if (b.no_bias) {
      warn(m.name + ": layer has no bias-role parameters");
    } else if (b.values.max() == 0.0 && b.values.min() == 0.0) {
      warn(m.name + ": bias attribution is identically zero");
    }
    s = psi(b, psi_config, e.height(), e.width());
  } else if (m.kind == "fullgrad") {
    s = e.fullgrad(m.granularity);
  } else if (m.kind == "agg") {
    s = e.aggregate_activity(m.layer, psi_config);
  } else if (m.kind == "gradcam") {
    s = psi(e.gradcam(m.layer, true), psi_config, e.height(), e.width());
  } else {
    throw std::invalid_argument("method '" + m.name + "' is not an attribution method");
  }
  for (const std::string& w : s.warnings) warn(m.name + ": " + w);
  s.provenance = m.name;
  return s;
}

std::string method_slug(const std::string& name) {
  std::string out = name;
  for (char& c : out) {
    if (c == ':' || c == '/' || c == ' ') c = '-';
  }
  return out;
}

namespace {

// Signed counterpart of an attribution method, resized to the input grid.
std::optional<Tensor> signed_map(const Explanation& e, const MethodSpec& m) {
  std::optional<AttributionMap> a;
  if (m.kind == "gxi") a = e.gradient_times_input();
  if (m.kind == "activity") a = e.activity(m.layer);
  if (m.kind == "bias") a = e.bias(m.layer);
  if (m.kind == "gradcam") a = e.gradcam(m.layer);
  if (!a) return std::nullopt;
  return ops::resize_map(a->values, e.height(), e.width(), ops::ResizeMode::bilinear);
}

std::string utc_stamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

fs::path fresh_run_dir(const fs::path& root, const std::string& command) {
  fs::create_directories(root);
  const std::string base = command + "-" + utc_stamp();
  for (int n = 1;; ++n) {
    const fs::path candidate = root / (n == 1 ? base : base + "-" + std::to_string(n));
    if (fs::create_directory(candidate)) return candidate;
  }
}

// Collects artifacts of one run; every file goes through here.
class RunWriter {
 public:
  RunWriter(fs::path dir) : dir_(std::move(dir)) {}

  const fs::path& dir() const { return dir_; }
  fs::path path(const std::string& name) const { return dir_ / name; }

  void text(const std::string& name, const std::string& content) {
    std::ofstream out(path(name), std::ios::binary);
    if (!out) throw OutputError("cannot write '" + path(name).string() + "'");
    out << content;
    if (!out) throw OutputError("failed while writing '" + path(name).string() + "'");
    add(name);
  }
  void add(const std::string& name) { names_.push_back(name); }

  json checksums() const {
    json out = json::object();
    for (const std::string& n : names_) out[n] = sha256_file(path(n).string());
    return out;
  }

 private:
  fs::path dir_;
  std::vector<std::string> names_;
};

struct Inputs {
  json j = json::object();
  void add(const std::string& key, const std::string& path) { j[key] = {{"path", path}, {"sha256", sha256_file(path)}}; }
};

DatasetPair load_data(const Config& cfg, Inputs& inputs) {
  const std::string path = cfg.get("data", "manifest");
  if (!fs::exists(path)) throw ConfigError("data.manifest", "file '" + path + "' does not exist");
  try {
    DatasetPair pair = load_dataset_manifest(path);
    inputs.add("data.manifest", path);
    return pair;
  } catch (const std::exception& e) {
    throw ConfigError("data.manifest", e.what());
  }
}

Checkpoint load_model(const Config& cfg, const std::string& section, const std::string& key, Inputs& inputs) {
  const std::string path = cfg.get(section, key);
  if (!fs::exists(path)) throw ConfigError(section + "." + key, "file '" + path + "' does not exist");
  Checkpoint ckpt = load_checkpoint(path);
  inputs.add(section + "." + key, path);
  return ckpt;
}

NetworkSpec model_spec(const Config& cfg, const Dataset& train) {
  const std::string arch = cfg.get("model", "arch");
  const ActivationShape in = train.image_shape();
  const bool bias = cfg.get_bool("model", "bias");
  if (arch == "vgg-mini") return vgg_mini_spec(in, train.classes, cfg.get_sizes("model", "channels"), bias,
                                               cfg.get_bool("model", "batchnorm"));
  if (arch == "resnet-mini") return resnet_mini_spec(in, train.classes, cfg.get_sizes("model", "channels"), bias);
  if (arch == "linear") return linear_classifier_spec(in, train.classes, bias);
  throw ConfigError("model.arch", "unknown architecture '" + arch + "' (expected vgg-mini, resnet-mini or linear)");
}

template <class T>
T config_choice(const std::string& key, const std::function<T()>& parse) {
  try {
    return parse();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key, e.what());
  }
}

std::size_t depth_of(const Checkpoint& ckpt) { return attribution_stages(ckpt.spec).size(); }

json decomposition_json(const DecompositionReport& r) {
  return {{"class", r.class_index},
          {"logit", r.logit},
          {"activity_sums", r.activity_sums},
          {"bias_sums", r.bias_sums},
          {"bias_parameter_sums", r.bias_parameter_sums},
          {"residuals", r.residuals}};
}

std::string image_stem(std::size_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img%04zu", id);
  return buf;
}

// ---- commands ---------------------------------------------------------------

void cmd_train(const Config& cfg, const RunSettings& s, RunWriter& w, Inputs& inputs, json& extra, std::ostream& log) {
  const DatasetPair data = load_data(cfg, inputs);
  TrainConfig tc;
  tc.epochs = cfg.get_size("train", "epochs");
  tc.batch_size = cfg.get_size("train", "batch_size");
  tc.optimizer = config_choice<OptimizerKind>("train.optimizer",
                                              [&] { return optimizer_from_string(cfg.get("train", "optimizer")); });
  tc.learning_rate = cfg.get_double("train", "learning_rate");
  tc.max_steps = cfg.get_size("train", "max_steps");
  tc.seed = s.seed;
  const Checkpoint init = build_network(model_spec(cfg, data.train), s.seed);
  const TrainResult r = train_classifier(init, data.train, tc);

  save_checkpoint(r.checkpoint, w.path("checkpoint.bin").string());
  w.add("checkpoint.bin");
  std::ostringstream loss;
  loss << "step,loss\n";
  for (std::size_t i = 0; i < r.loss_history.size(); ++i) loss << i + 1 << ',' << format_number(r.loss_history[i]) << '\n';
  w.text("loss.csv", loss.str());
  const double train_top1 = evaluate_topk(r.checkpoint, data.train, 1);
  const double test_top1 = evaluate_topk(r.checkpoint, data.test, 1);
  const json metrics = {{"train_top1", train_top1}, {"test_top1", test_top1}, {"diverged", r.diverged},
                        {"steps", r.loss_history.size()}, {"parameters", r.checkpoint.parameter_count()}};
  w.text("metrics.json", metrics.dump(2) + "\n");
  extra["metrics"] = metrics;
  log << "train top-1 " << train_top1 << ", test top-1 " << test_top1 << (r.diverged ? " (diverged)" : "") << "\n";
}

void cmd_explain(const Config& cfg, const RunSettings& s, RunWriter& w, Inputs& inputs, json& extra,
                 std::ostream& log) {
  const Checkpoint ckpt = load_model(cfg, "explain", "checkpoint", inputs);
  const DatasetPair data = load_data(cfg, inputs);
  const std::size_t depth = depth_of(ckpt);
  std::vector<MethodSpec> methods;
  for (const std::string& name : cfg.get_list("explain", "methods")) {
    methods.push_back(parse_method(name, depth, false, "explain.methods"));
  }
  if (methods.empty()) throw ConfigError("explain.methods", "no methods given");
  const std::vector<std::size_t> ids = cfg.get_sizes("explain", "images");
  for (std::size_t id : ids) {
    if (id >= data.test.size()) {
      throw ConfigError("explain.images", "index " + std::to_string(id) + " exceeds test split size " +
                                              std::to_string(data.test.size()));
    }
  }
  const std::string format = cfg.get("explain", "format");
  if (format != "ppm" && format != "png") throw ConfigError("explain.format", "expected ppm or png");
  HeatmapOptions sequential{Palette::sequential, cfg.get_size("explain", "zoom"), nullptr};
  HeatmapOptions diverging{Palette::diverging, sequential.zoom, nullptr};
  if (sequential.zoom == 0) throw ConfigError("explain.zoom", "must be at least 1");

  struct ImageResult {
    DecompositionReport report;
    std::vector<SaliencyMap> saliency;
    std::vector<std::optional<Tensor>> signed_maps;
    std::vector<std::string> warnings;
  };
  std::vector<ImageResult> results(ids.size());
  parallel_for(ids.size(), s.workers, [&](std::size_t i) {
    const Explanation e(ckpt, data.test.image(ids[i]));
    ImageResult& r = results[i];
    r.report = e.decomposition();
    for (const MethodSpec& m : methods) {
      r.saliency.push_back(method_saliency(e, m, &r.warnings));
      r.signed_maps.push_back(signed_map(e, m));
    }
  });

  json warnings = json::array();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::string stem = image_stem(ids[i]);
    const ImageResult& r = results[i];
    std::map<std::string, Tensor> dump;
    for (std::size_t k = 0; k < methods.size(); ++k) {
      const std::string slug = method_slug(methods[k].name);
      const std::string file = stem + "_" + slug + "." + format;
      render_heatmap(r.saliency[k].values, w.path(file).string(), sequential);
      w.add(file);
      dump.emplace(methods[k].name, r.saliency[k].values);
      if (r.signed_maps[k]) {
        const std::string signed_file = stem + "_" + slug + "_signed." + format;
        render_heatmap(*r.signed_maps[k], w.path(signed_file).string(), diverging);
        w.add(signed_file);
        dump.emplace(methods[k].name + ".signed", *r.signed_maps[k]);
      }
    }
    save_tensors(dump, w.path(stem + "_maps.bin").string());
    w.add(stem + "_maps.bin");
    w.text(stem + "_decomposition.json", decomposition_json(r.report).dump(2) + "\n");
    for (const std::string& msg : r.warnings) {
      log << "warning: " << stem << " " << msg << "\n";
      warnings.push_back(stem + " " + msg);
    }
  }
  extra["warnings"] = warnings;
  log << "explained " << ids.size() << " image(s) with " << methods.size() << " method(s)\n";
}

void cmd_evaluate(const Config& cfg, const RunSettings& s, RunWriter& w, Inputs& inputs, json& extra,
                  std::ostream& log) {
  const Checkpoint ckpt = load_model(cfg, "evaluate", "checkpoint", inputs);
  const DatasetPair data = load_data(cfg, inputs);
  const Dataset& test = data.test;
  const std::size_t depth = depth_of(ckpt);
  std::vector<MethodSpec> methods;
  for (const std::string& name : cfg.get_list("evaluate", "methods")) {
    methods.push_back(parse_method(name, depth, true, "evaluate.methods"));
    if (methods.back().kind.find("oracle") != std::string::npos && !test.has_masks()) {
      throw ConfigError("evaluate.methods", name + " needs a dataset with ground-truth masks");
    }
  }
  if (methods.empty()) throw ConfigError("evaluate.methods", "no methods given");
  std::vector<Metric> metrics;
  for (const std::string& name : cfg.get_list("evaluate", "metrics")) {
    metrics.push_back(config_choice<Metric>("evaluate.metrics", [&] { return metric_from_string(name); }));
  }
  EvalOptions opt;
  opt.perturb.step_fraction = cfg.get_double("evaluate", "step_fraction");
  opt.perturb.removal_value = cfg.get_double("evaluate", "removal_value");
  opt.perturb.max_fraction = cfg.get_double("evaluate", "max_fraction");
  config_choice<bool>("evaluate.step_fraction", [&] {
    opt.perturb.validate();
    return true;
  });
  opt.draws = cfg.get_size("evaluate", "draws");
  opt.seed = s.seed;
  opt.workers = s.workers;

  const std::size_t n = std::min(cfg.get_size("evaluate", "images"), test.size());
  if (n < 5) {
    throw InsufficientDataError("evaluation needs at least 5 images for paired statistics, got " + std::to_string(n));
  }
  if (opt.draws == 0 || opt.draws >= n) {
    throw InsufficientDataError("noise pool of " + std::to_string(n - 1) + " maps cannot supply " +
                                std::to_string(opt.draws) + " draws");
  }
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);

  std::vector<std::vector<EvalRecord>> per_method;
  std::vector<EvalRecord> all;
  for (const MethodSpec& m : methods) {
    SaliencyMethod fn;
    if (m.kind == "oracle") {
      fn = [&](const Tensor&, std::size_t id) { return test.mask(id); };
    } else if (m.kind == "shuffled-oracle") {
      fn = [&](const Tensor&, std::size_t id) { return shuffled_pixels(test.mask(id), derive_seed(~s.seed, id)); };
    } else if (m.kind == "random") {
      const ActivationShape in = ckpt.spec.input;
      fn = [&, in](const Tensor&, std::size_t id) { return uniform_random_map(in.height, in.width, derive_seed(s.seed, id)); };
    } else {
      fn = [&, m](const Tensor& x, std::size_t) { return method_saliency(Explanation(ckpt, x), m).values; };
    }
    per_method.push_back(evaluate_method(ckpt, test, ids, m.name, fn, opt));
    std::size_t failed = 0;
    for (const EvalRecord& r : per_method.back()) {
      if (!r.ok()) ++failed;
      all.push_back(r);
    }
    log << m.name << ": " << per_method.back().size() - failed << " image(s) evaluated";
    if (failed) log << ", " << failed << " failed";
    log << "\n";
  }

  std::ostringstream records;
  write_records_csv(records, all);
  w.text("records.csv", records.str());

  std::vector<MethodComparison> comparisons;
  for (Metric metric : metrics) {
    for (std::size_t a = 0; a < methods.size(); ++a) {
      for (std::size_t b = a + 1; b < methods.size(); ++b) {
        comparisons.push_back(compare_methods(per_method[a], per_method[b], metric));
      }
    }
  }
  std::ostringstream comp;
  write_comparisons_csv(comp, comparisons);
  w.text("comparisons.csv", comp.str());

  std::vector<QuantileSummary> summary;
  for (Metric metric : {Metric::e_minus, Metric::e_plus, Metric::e_delta, Metric::de_minus, Metric::de_plus,
                        Metric::de_delta}) {
    const auto rows = summarize(all, metric);
    summary.insert(summary.end(), rows.begin(), rows.end());
  }
  std::ostringstream sum;
  write_summary_csv(sum, summary);
  w.text("summary.csv", sum.str());

  for (const MethodComparison& c : comparisons) {
    log << c.method_a << " vs " << c.method_b << " [" << to_string(c.metric) << "]: ";
    if (c.degenerate) {
      log << "degenerate (all differences zero)\n";
    } else if (c.insufficient) {
      log << "insufficient non-zero differences\n";
    } else {
      log << "W = " << c.w << ", p = " << c.p << ", median diff = " << c.median_diff << "\n";
    }
  }
  extra["images"] = n;
  extra["draws"] = opt.draws;
}

void cmd_decay(const Config& cfg, const RunSettings& s, RunWriter& w, Inputs& inputs, json& extra, std::ostream& log) {
  const Checkpoint teacher = load_model(cfg, "decay", "checkpoint", inputs);
  const DatasetPair data = load_data(cfg, inputs);
  DecaySchedule schedule;
  schedule.kind = config_choice<DecayKind>("decay.kind", [&] { return decay_kind_from_string(cfg.get("decay", "kind")); });
  schedule.decay_steps = cfg.get_size("decay", "decay_steps");
  schedule.train_steps = cfg.get_size("decay", "train_steps");
  schedule.finetune_steps = cfg.get_size("decay", "finetune_steps");
  schedule.ratio = cfg.get_double("decay", "ratio");
  DistillConfig dc;
  dc.temperature = cfg.get_double("decay", "temperature");
  dc.optimizer = config_choice<OptimizerKind>("decay.optimizer",
                                              [&] { return optimizer_from_string(cfg.get("decay", "optimizer")); });
  dc.learning_rate = cfg.get_double("decay", "learning_rate");
  dc.batch_size = cfg.get_size("decay", "batch_size");
  dc.seed = s.seed;
  config_choice<bool>("decay", [&] {
    schedule.validate();
    dc.validate();
    return true;
  });

  const DecayResult r = run_decay(teacher, teacher, data.train, data.test, schedule, dc);
  save_checkpoint(r.checkpoint, w.path("checkpoint.bin").string());
  w.add("checkpoint.bin");
  std::ostringstream traj;
  write_trajectory_csv(traj, r.trajectory);
  w.text("trajectory.csv", traj.str());
  const double teacher_top1 = r.trajectory.steps.front().top1;
  json report = {{"teacher_top1", teacher_top1},
                 {"final_top1", r.trajectory.steps.back().top1},
                 {"diverged", r.trajectory.diverged},
                 {"bias_free", is_bias_free(r.checkpoint)}};
  if (teacher_top1 > 0.0) {
    const RecoveryReport rr = recovery_report(r.trajectory, teacher_top1);
    report["recovery"] = rr.recovery;
    report["worst_top1"] = rr.worst_top1;
    report["worst_step"] = rr.worst_step;
  }
  w.text("recovery.json", report.dump(2) + "\n");
  extra["recovery"] = report;
  log << "teacher top-1 " << teacher_top1 << ", decayed top-1 " << r.trajectory.steps.back().top1
      << (r.trajectory.diverged ? " (diverged)" : "") << "\n";
}

void cmd_robustness(const Config& cfg, const RunSettings&, RunWriter& w, Inputs& inputs, json& extra,
                    std::ostream& log) {
  const Checkpoint vanilla = load_model(cfg, "robustness", "checkpoint", inputs);
  const DatasetPair data = load_data(cfg, inputs);
  const Checkpoint zero = cfg.get("robustness", "zero_bias_checkpoint").empty()
                              ? zero_bias(vanilla)
                              : load_model(cfg, "robustness", "zero_bias_checkpoint", inputs);
  const std::vector<double> scales = cfg.get_doubles("robustness", "scales");
  const std::vector<double> shifts = cfg.get_doubles("robustness", "shifts");
  for (double v : scales) {
    if (!(v > 0.0)) throw ConfigError("robustness.scales", "scales must be positive");
  }
  if (scales.empty() || shifts.empty()) throw ConfigError("robustness.scales", "need at least one scale and shift");

  std::ostringstream table;
  table << "model,scale,shift,top1\n";
  for (const auto& [label, model] : {std::pair<const char*, const Checkpoint*>{"vanilla", &vanilla}, {"zero_bias", &zero}}) {
    for (const SweepCell& c : scale_shift_sweep(*model, data.test, scales, shifts)) {
      table << label << ',' << format_number(c.scale) << ',' << format_number(c.shift) << ',' << format_number(c.top1)
            << '\n';
    }
  }
  w.text("accuracy.csv", table.str());

  const Tensor lv = dataset_logits(vanilla, data.test);
  const Tensor lz = dataset_logits(zero, data.test);
  json fit_json;
  try {
    const RegressionFit fit = fit_output_regression(lv.data(), lz.data());
    fit_json = {{"alpha", fit.alpha}, {"beta", fit.beta}, {"residual_norm", fit.residual_norm},
                {"correlation", pearson_correlation(lv.data(), lz.data())}};
  } catch (const std::invalid_argument& e) {
    fit_json = {{"error", e.what()}};
  }
  w.text("regression.json", fit_json.dump(2) + "\n");
  extra["regression"] = fit_json;
  log << "wrote accuracy table for " << scales.size() << " scale(s) x " << shifts.size() << " shift(s)\n";
}

}  // namespace

RunOutcome run_command(const std::string& command, const Config& cfg, const RunSettings& settings, std::ostream& log) {
  using Fn = void (*)(const Config&, const RunSettings&, RunWriter&, Inputs&, json&, std::ostream&);
  static const std::map<std::string, Fn> table = {{"train", &cmd_train},
                                                  {"explain", &cmd_explain},
                                                  {"evaluate", &cmd_evaluate},
                                                  {"decay", &cmd_decay},
                                                  {"robustness", &cmd_robustness}};
  const auto it = table.find(command);
  if (it == table.end()) throw ConfigError("command", "unknown command '" + command + "'");
  if (settings.workers == 0) throw ConfigError("--workers", "must be at least 1");

  const auto start = std::chrono::steady_clock::now();
  RunWriter writer(fresh_run_dir(settings.out_root, command));
  Inputs inputs;
  json extra = json::object();
  it->second(cfg, settings, writer, inputs, extra, log);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  json manifest = {{"format", "saliency-run"},
                   {"version", 1},
                   {"command", command},
                   {"config", cfg.to_json()},
                   {"seed", settings.seed},
                   {"workers", settings.workers},
                   {"inputs", inputs.j},
                   {"outputs", writer.checksums()},
                   {"results", extra},
                   {"duration_seconds", seconds}};
  std::ofstream out(writer.path("run_manifest.json"));
  out << manifest.dump(2) << "\n";
  if (!out) throw OutputError("cannot write '" + writer.path("run_manifest.json").string() + "'");
  log << "run folder: " << writer.dir().string() << "\n";
  return {writer.dir(), manifest};
}

std::vector<std::string> replay_manifest(const fs::path& manifest_path, const fs::path& out_root, std::ostream& log,
                                         RunOutcome* replayed) {
  std::ifstream in(manifest_path);
  if (!in) throw ConfigError("manifest", "cannot read '" + manifest_path.string() + "'");
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("manifest", "'" + manifest_path.string() + "' is not valid JSON: " + e.what());
  }
  if (manifest.value("format", "") != "saliency-run") throw ConfigError("manifest", "not a run manifest");
  RunSettings settings;
  settings.seed = manifest.at("seed").get<std::uint64_t>();
  settings.workers = manifest.at("workers").get<std::size_t>();
  settings.out_root = out_root;
  RunOutcome outcome = run_command(manifest.at("command").get<std::string>(), Config::from_json(manifest.at("config")),
                                   settings, log);
  std::vector<std::string> mismatches;
  const json& expected = manifest.at("outputs");
  const json& actual = outcome.manifest.at("outputs");
  for (const auto& [name, sum] : expected.items()) {
    if (!actual.contains(name)) {
      mismatches.push_back(name + " (missing)");
    } else if (actual.at(name) != sum) {
      mismatches.push_back(name);
    }
  }
  for (const auto& [name, sum] : actual.items()) {
    if (!expected.contains(name)) mismatches.push_back(name + " (unexpected)");
  }
  if (replayed) *replayed = std::move(outcome);
  return mismatches;
}

int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attribution maps, perturbation evaluation and bias decay for small ReLU networks"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::string out_root = "runs";
  app.add_option("--config", config_path, "INI configuration file");
  app.add_option("--seed", seed, "seed (default: [run] seed, else 0)");
  app.add_option("--workers", workers, "worker threads (default: [run] workers, else 1)");
  app.add_option("--out", out_root, "root for timestamped run folders")->capture_default_str();

  std::map<std::string, CLI::App*> subs;
  auto footer = [](std::initializer_list<const char*> sections) {
    std::string text = "\nConfiguration keys:\n";
    for (const char* s : sections) text += config_help(s);
    return text;
  };
  subs["train"] = app.add_subcommand("train", "train a classifier and write a checkpoint");
  subs["train"]->footer(footer({"run", "data", "model", "train"}));
  subs["explain"] = app.add_subcommand("explain", "write heatmaps, attribution dumps and decomposition reports");
  subs["explain"]->footer(footer({"run", "data", "explain"}));
  subs["evaluate"] = app.add_subcommand("evaluate", "perturbation metrics, noise references and Wilcoxon comparisons");
  subs["evaluate"]->footer(footer({"run", "data", "evaluate"}));
  subs["decay"] = app.add_subcommand("decay", "decay biases to zero with distillation fine-tuning");
  subs["decay"]->footer(footer({"run", "data", "decay"}));
  subs["robustness"] = app.add_subcommand("robustness", "accuracy under input scaling/shifting and logit regression");
  subs["robustness"]->footer(footer({"run", "data", "robustness"}));
  CLI::App* replay = app.add_subcommand("replay", "re-run a run manifest and verify artifact checksums");
  std::string manifest_path;
  replay->add_option("manifest", manifest_path, "run_manifest.json to replay")->required();

  std::map<std::string, std::string> overrides;
  for (const char* cmd : {"explain", "evaluate", "decay", "robustness"}) {
    subs[cmd]->add_option_function<std::string>(
        "--checkpoint", [&overrides, cmd](const std::string& v) { overrides[std::string(cmd) + ".checkpoint"] = v; },
        "checkpoint path (overrides the config)");
  }
  for (const char* cmd : {"explain", "evaluate"}) {
    subs[cmd]->add_option_function<std::string>(
        "--methods", [&overrides, cmd](const std::string& v) { overrides[std::string(cmd) + ".methods"] = v; },
        "comma-separated methods (overrides the config)");
    subs[cmd]->add_option_function<std::string>(
        "--images", [&overrides, cmd](const std::string& v) { overrides[std::string(cmd) + ".images"] = v; },
        "images (overrides the config)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_ok : exit_config;
  }

  try {
    if (replay->parsed()) {
      const fs::path root = out_root == "runs" ? fs::path(manifest_path).parent_path().parent_path() : fs::path(out_root);
      const auto mismatches = replay_manifest(manifest_path, root, out);
      if (mismatches.empty()) {
        out << "replay reproduced every artifact checksum\n";
        return exit_ok;
      }
      for (const std::string& m : mismatches) err << "checksum mismatch: " << m << "\n";
      return exit_internal;
    }
    std::string command;
    for (const auto& [name, sub] : subs) {
      if (sub->parsed()) command = name;
    }
    if (config_path.empty()) throw ConfigError("--config", "a configuration file is required");
    Config cfg = Config::load(config_path);
    for (const auto& [key, value] : overrides) {
      const auto dot = key.find('.');
      std::string v = value;
      if (key.ends_with(".checkpoint") && !v.empty()) v = fs::absolute(v).lexically_normal().string();
      cfg.set(key.substr(0, dot), key.substr(dot + 1), v);
    }
    RunSettings settings;
    settings.seed = seed ? *seed : cfg.get_u64("run", "seed");
    settings.workers = workers ? *workers : cfg.get_size("run", "workers");
    settings.out_root = out_root;
    cfg.set("run", "seed", std::to_string(settings.seed));
    cfg.set("run", "workers", std::to_string(settings.workers));
    run_command(command, cfg, settings, out);
    return exit_ok;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return exit_config;
  } catch (const InsufficientDataError& e) {
    err << "insufficient data: " << e.what() << "\n";
    return exit_insufficient;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_internal;
  }
}

}  // namespace saliency
