// bace: run, sweep, compare, probe, track.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bace/errors.hpp"
#include "bace/report.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bace;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

// Flags shared by run and sweep. Only flags that were given override the
// config file.
struct ConfigFlags {
  std::string config_file;
  std::string method, stream = "synth-10c5t", variant, kl_direction, nonlinearity;
  std::string train_csv, test_csv;
  std::uint64_t seed = 0, stream_seed = 0;
  std::size_t epochs = 0, batch = 0, buffer_batch = 0, k = 0, capacity = 0, threads = 0, tasks = 0;
  std::size_t probe_epochs = 0;
  double lr = 0, w0 = 0, alpha = 0, beta = 0, momentum = 0, weight_decay = 0, sigma = 0, center_scale = 0;
  std::vector<std::size_t> hidden;
  bool cosine_decay = false, no_probing = false, no_tracking = false, check = false, dump_neighbors = false;
  std::map<std::string, CLI::Option*> opt;

  void attach(CLI::App* app) {
    auto add = [&](const std::string& name, auto& var, const std::string& help) {
      opt[name] = app->add_option("--" + name, var, help);
    };
    auto flag = [&](const std::string& name, bool& var, const std::string& help) {
      opt[name] = app->add_flag("--" + name, var, help);
    };
    add("config", config_file, "JSON file with {\"config\": {...}, \"stream\": ...} (a config.echo works)");
    add("method", method, "SEQ, REPLAY, DERPP, MTL, BACE, BACE_W1, BACE_A0, BACE_W1_A0");
    add("stream", stream, "synthetic stream name, e.g. synth-10c5t");
    add("train-csv", train_csv, "CSV training file (label,f0,...)");
    add("test-csv", test_csv, "CSV test file");
    add("tasks", tasks, "number of tasks for CSV streams");
    add("sigma", sigma, "within-class noise of the synthetic stream");
    add("center-scale", center_scale, "class-center scale of the synthetic stream");
    add("stream-seed", stream_seed, "synthetic stream seed (default: --seed)");
    add("seed", seed, "root seed");
    add("epochs", epochs, "epochs per task");
    add("lr", lr, "learning rate");
    flag("cosine-decay", cosine_decay, "cosine learning-rate decay within each task");
    add("momentum", momentum, "SGD momentum");
    add("weight-decay", weight_decay, "L2 weight decay");
    add("batch-size", batch, "minibatch size");
    add("buffer-batch-size", buffer_batch, "rehearsal batch size (0: batch size)");
    add("k", k, "neighbors per sample");
    add("w0", w0, "self weight of the joint score");
    add("alpha", alpha, "old-class distillation weight");
    add("beta", beta, "teacher EMA coefficient");
    add("buffer-capacity", capacity, "rehearsal buffer capacity");
    add("neighbor-variant", variant, "standard, same, different, uniform, random, reverse");
    add("kl-direction", kl_direction, "teacher_student or student_teacher");
    add("threads", threads, "neighbor-index worker threads");
    add("hidden", hidden, "encoder layer widths; the last is the feature width");
    add("nonlinearity", nonlinearity, "relu or tanh");
    add("probe-epochs", probe_epochs, "probing budget");
    flag("no-probing", no_probing, "skip probing after each task");
    flag("no-tracking", no_tracking, "skip feature-embedding tracking");
    flag("check-identities", check, "re-derive loss identities on live batches");
    flag("dump-neighbors", dump_neighbors, "write neighbors.csv for the last epoch");
  }

  bool has(const std::string& name) const { return opt.at(name)->count() > 0; }

  // Resolves (config, stream spec) from the config file, then flags on top.
  std::pair<TrainConfig, json> resolve() const {
    TrainConfig cfg = desk_config();
    json stream_json;
    if (has("config")) {
      json j;
      try {
        j = json::parse(read_file(config_file));
      } catch (const json::parse_error& e) {
        throw ConfigError("config", e.what());
      } catch (const std::runtime_error& e) {
        throw ConfigError("config", e.what());
      }
      if (!j.is_object()) throw ConfigError("config", "expected an object");
      for (const auto& [key, value] : j.items())
        if (key != "config" && key != "stream") throw ConfigError(key, "unknown top-level field");
      if (j.contains("config")) cfg = train_config_from_json(j.at("config"), cfg);
      if (j.contains("stream")) stream_json = j.at("stream");
    }
    if (has("method")) cfg.method = parse_method(method);
    if (has("seed")) cfg.seed = seed;
    if (has("epochs")) cfg.epochs = epochs;
    if (has("lr")) cfg.lr = lr;
    if (has("cosine-decay")) cfg.cosine_decay = cosine_decay;
    if (has("momentum")) cfg.momentum = momentum;
    if (has("weight-decay")) cfg.weight_decay = weight_decay;
    if (has("batch-size")) cfg.batch_size = batch;
    if (has("buffer-batch-size")) cfg.buffer_batch_size = buffer_batch;
    if (has("k")) cfg.k = k;
    if (has("w0")) cfg.w0 = w0;
    if (has("alpha")) cfg.alpha = alpha;
    if (has("beta")) cfg.beta = beta;
    if (has("buffer-capacity")) cfg.buffer_capacity = capacity;
    if (has("neighbor-variant")) cfg.neighbor_variant = parse_neighbor_variant(variant);
    if (has("kl-direction")) cfg.kl_direction = parse_kl_direction(kl_direction);
    if (has("threads")) cfg.threads = static_cast<unsigned>(threads);
    if (has("hidden")) {
      cfg.encoder.hidden_dims = hidden;
      cfg.encoder.feature_dim = hidden.empty() ? 0 : hidden.back();
    }
    if (has("nonlinearity")) cfg.encoder.nonlinearity = parse_nonlinearity(nonlinearity);
    if (has("probe-epochs")) cfg.probe.max_epochs = probe_epochs;
    if (has("no-probing")) cfg.probing = false;
    if (has("no-tracking")) cfg.tracking = false;
    if (has("check-identities")) cfg.check_identities = true;
    if (has("dump-neighbors")) cfg.dump_neighbors = true;

    if (has("train-csv") || has("test-csv")) {
      if (!has("train-csv") || !has("test-csv")) throw ConfigError("train-csv", "needs both --train-csv and --test-csv");
      stream_json = {{"kind", "csv"}, {"train", train_csv}, {"test", test_csv}, {"n_tasks", has("tasks") ? tasks : 5}};
    } else if (stream_json.is_null() || has("stream")) {
      auto syn = parse_stream_name(stream);
      if (!syn) throw ConfigError("stream", "unknown stream name '" + stream + "'");
      syn->seed = cfg.seed;
      stream_json = stream_spec(*syn);
    }
    if (stream_json.is_object() && stream_json.value("kind", "") == "synthetic") {
      if (has("sigma")) stream_json["noise_sigma"] = sigma;
      if (has("center-scale")) stream_json["center_scale"] = center_scale;
      if (has("stream-seed")) stream_json["seed"] = stream_seed;
    }
    return {cfg, stream_json};
  }
};

std::string timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  localtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

fs::path output_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("BACE_OUTPUT_ROOT"); env && *env) return env;
  return "runs";
}

fs::path fresh_dir(const fs::path& root, const std::string& stem) {
  fs::path dir = root / (timestamp() + "_" + stem);
  for (int i = 1; fs::exists(dir); ++i) dir = root / (timestamp() + "_" + stem + "-" + std::to_string(i));
  fs::create_directories(dir);
  return dir;
}

std::string pct(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *v * 100.0);
  return buf;
}

struct RunOutcome {
  RunReport report;
  std::string neighbors;
  double seconds = 0.0;
};

RunOutcome execute(const TrainConfig& base, const json& stream_json, const fs::path& ckpt_dir,
                   CheckpointFormat ckpt_format) {
  TaskStream stream = load_stream(stream_json);
  TrainConfig cfg = base;
  cfg.encoder.input_dim = stream.input_dim;
  cfg.validate();
  CheckpointHook hook;
  if (!ckpt_dir.empty()) {
    fs::create_directories(ckpt_dir);
    hook = [&](const RunState& st, std::size_t t) {
      save_checkpoint(ckpt_dir / ("task_" + std::to_string(t) + ".ckpt"), Checkpoint{cfg, stream_json, st}, ckpt_format);
    };
  }
  RunOutcome out;
  std::string neighbors;
  auto capture = hook;
  CheckpointHook wrapped = [&](const RunState& st, std::size_t t) {
    neighbors = st.neighbors_csv;
    if (capture) capture(st, t);
  };
  const auto start = std::chrono::steady_clock::now();
  out.report = run_method(stream, cfg, wrapped);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.report.stream_config = stream_json;
  out.report.version = kVersion;
  out.neighbors = neighbors;
  return out;
}

CheckpointFormat parse_format(const std::string& s) {
  if (s == "binary") return CheckpointFormat::binary;
  if (s == "text") return CheckpointFormat::text;
  throw ConfigError("checkpoint-format", "expected binary or text");
}

int cmd_run(const ConfigFlags& flags, const std::string& out_flag, bool save_ckpt, const std::string& fmt) {
  auto [cfg, stream_json] = flags.resolve();
  const CheckpointFormat format = parse_format(fmt);
  load_stream(stream_json);  // surface stream errors as config errors before creating outputs
  const fs::path dir = fresh_dir(output_root(out_flag), to_string(cfg.method) + "_s" + std::to_string(cfg.seed));
  RunOutcome r = execute(cfg, stream_json, save_ckpt ? dir / "checkpoints" : fs::path{}, format);
  write_run_outputs(dir, r.report, r.neighbors);
  std::cout << dir.string() << "\n";
  std::cout << "A_last " << pct(r.report.a_last) << "  FGT " << pct(r.report.fgt) << "  FWD " << pct(r.report.fwd)
            << "  (" << r.seconds << " s)\n";
  if (r.report.partial) {
    std::cerr << "run stopped early: " << r.report.error << " (partial outputs written)\n";
    return kExitRuntime;
  }
  return 0;
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("values", "not a number: '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("values", "empty value list");
  return out;
}

void set_axis(TrainConfig& cfg, const std::string& axis, double v) {
  auto whole = [&](const char* name) {
    if (v < 0 || v != std::floor(v)) throw ConfigError(name, "needs a non-negative integer value");
    return static_cast<std::size_t>(v);
  };
  if (axis == "w0") cfg.w0 = v;
  else if (axis == "alpha") cfg.alpha = v;
  else if (axis == "k") cfg.k = whole("k");
  else if (axis == "buffer_capacity") cfg.buffer_capacity = whole("buffer_capacity");
  else if (axis == "beta") cfg.beta = v;
  else throw ConfigError("axis", "expected one of w0, alpha, k, buffer_capacity, beta");
}

int cmd_sweep(const ConfigFlags& flags, const std::string& out_flag, const std::string& axis,
              const std::string& values_text, const std::string& seeds_text) {
  auto [cfg, stream_json] = flags.resolve();
  const auto values = parse_values(values_text);
  std::vector<std::uint64_t> seeds;
  for (double s : parse_values(seeds_text)) {
    if (s < 0 || s != std::floor(s)) throw ConfigError("seeds", "seeds are non-negative integers");
    seeds.push_back(static_cast<std::uint64_t>(s));
  }
  for (double v : values) {
    TrainConfig probe = cfg;
    set_axis(probe, axis, v);
    probe.validate();
  }
  const bool stream_follows_seed = !flags.has("stream-seed") && stream_json.is_object() &&
                                   stream_json.value("kind", "") == "synthetic" && !flags.has("config");
  const fs::path dir = fresh_dir(output_root(out_flag), "sweep_" + axis);
  std::string summary = "axis,value,runs,failed,a_last_mean,a_last_std,fgt_mean,runtime_mean_s\n";
  int failures = 0;
  for (double v : values) {
    std::vector<double> acc, fgt, secs;
    std::size_t failed = 0;
    for (std::uint64_t seed : seeds) {
      TrainConfig c = cfg;
      set_axis(c, axis, v);
      c.seed = seed;
      json sj = stream_json;
      if (stream_follows_seed) sj["seed"] = seed;
      std::ostringstream name;
      name << axis << "=" << v << "_s" << seed;
      try {
        RunOutcome r = execute(c, sj, {}, CheckpointFormat::binary);
        write_run_outputs(dir / name.str(), r.report, r.neighbors);
        if (r.report.partial || !r.report.a_last) throw std::runtime_error(r.report.error);
        acc.push_back(*r.report.a_last);
        if (r.report.fgt) fgt.push_back(*r.report.fgt);
        secs.push_back(r.seconds);
        std::cout << name.str() << " A_last " << pct(r.report.a_last) << "\n";
      } catch (const std::exception& e) {
        ++failed;
        ++failures;
        std::cerr << name.str() << " failed: " << e.what() << "\n";
      }
    }
    auto mean = [](const std::vector<double>& x) {
      return x.empty() ? std::nan("") : std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
    };
    auto stdev = [&](const std::vector<double>& x) {
      if (x.size() < 2) return x.empty() ? std::nan("") : 0.0;
      const double m = mean(x);
      double ss = 0.0;
      for (double a : x) ss += (a - m) * (a - m);
      return std::sqrt(ss / static_cast<double>(x.size() - 1));
    };
    char line[256];
    std::snprintf(line, sizeof line, "%s,%.17g,%zu,%zu,%.17g,%.17g,%.17g,%.17g\n", axis.c_str(), v, acc.size(),
                  failed, mean(acc), stdev(acc), mean(fgt), mean(secs));
    summary += line;
  }
  write_file(dir / "summary.csv", summary);
  std::cout << dir.string() << "\n" << summary;
  return failures ? kExitRuntime : 0;
}

int cmd_compare(const std::string& a, const std::string& b) {
  std::cout << compare_reports(read_report(a), read_report(b));
  return 0;
}

int cmd_probe(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.state.tasks_done == 0) throw ContractError("checkpoint has no finished task");
  const TaskStream stream = load_stream(ck.stream);
  const std::size_t upto = ck.state.tasks_done - 1;
  const ProbeResult p = probing_accuracy(ck.state.student, stream, upto, ck.config.probe, ck.config.seed);
  const auto observed = evaluate(ck.state.student, stream, upto);
  std::cout << "task,observed,probing\n";
  for (std::size_t t = 0; t <= upto; ++t) std::printf("%zu,%.6f,%.6f\n", t, observed[t], p.per_task[t]);
  std::printf("mean,%.6f,%.6f\n", std::accumulate(observed.begin(), observed.end(), 0.0) / observed.size(),
              p.accuracy);
  std::printf("# probe epochs %zu, final loss %.6g\n", p.epochs, p.final_loss);
  return 0;
}

int cmd_track(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.state.tasks_done == 0) throw ContractError("checkpoint has no finished task");
  const TaskStream stream = load_stream(ck.stream);
  const TrackingRecord rec = track_checkpoint(ck.state.student, stream, ck.state.tasks_done - 1);
  std::cout << "class,distance\n";
  for (const auto& [c, d] : rec.class_distance) std::printf("%d,%.6f\n", c, d);
  std::printf("# new %.6f  old %.6f  old-new %.6f\n", rec.new_mean, rec.old_mean, rec.old_minus_new);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teacher/student class-incremental training with neighbor joint scores"};
  app.require_subcommand(1);
  std::string out_flag;

  ConfigFlags run_flags;
  bool save_ckpt = false;
  std::string ckpt_format = "binary";
  auto* run = app.add_subcommand("run", "train one method on one stream");
  run_flags.attach(run);
  run->add_option("--out", out_flag, "output root (default: $BACE_OUTPUT_ROOT or ./runs)");
  run->add_flag("--save-checkpoints", save_ckpt, "write a checkpoint after every task");
  run->add_option("--checkpoint-format", ckpt_format, "binary or text");

  ConfigFlags sweep_flags;
  std::string axis, values, seeds = "0,1,2,3,4";
  auto* sweep = app.add_subcommand("sweep", "one run per axis value and seed, plus summary.csv");
  sweep_flags.attach(sweep);
  sweep->add_option("--out", out_flag, "output root");
  sweep->add_option("--axis", axis, "w0, alpha, k, buffer_capacity or beta")->required();
  sweep->add_option("--values", values, "comma-separated values")->required();
  sweep->add_option("--seeds", seeds, "comma-separated seeds");

  std::string report_a, report_b;
  auto* compare = app.add_subcommand("compare", "per-metric deltas between two reports");
  compare->add_option("a", report_a, "report.json or run directory")->required();
  compare->add_option("b", report_b, "report.json or run directory")->required();

  std::string ckpt_path;
  auto* probe = app.add_subcommand("probe", "probing accuracy of a checkpoint's encoder");
  probe->add_option("checkpoint", ckpt_path, "checkpoint file")->required();
  auto* track = app.add_subcommand("track", "feature-embedding distances of a checkpoint");
  track->add_option("checkpoint", ckpt_path, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) return cmd_run(run_flags, out_flag, save_ckpt, ckpt_format);
    if (*sweep) return cmd_sweep(sweep_flags, out_flag, axis, values, seeds);
    if (*compare) return cmd_compare(report_a, report_b);
    if (*probe) return cmd_probe(ckpt_path);
    if (*track) return cmd_track(ckpt_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ParseError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
