#include "bace/report.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "bace/errors.hpp"

namespace bace {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json num_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double num_from(const json& j) { return j.is_null() ? kNaN : j.get<double>(); }

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

json vec_json(const std::vector<double>& v) {
  json out = json::array();
  for (double x : v) out.push_back(num_or_null(x));
  return out;
}

std::vector<double> vec_from(const json& j) {
  std::vector<double> out;
  for (const auto& x : j) out.push_back(num_from(x));
  return out;
}

// Strict object reader: every key must be claimed by a handler.
using Handler = std::function<void(const json&)>;

void read_fields(const json& j, const std::string& prefix, const std::map<std::string, Handler>& handlers) {
  if (!j.is_object()) throw ConfigError(prefix.empty() ? "config" : prefix, "expected an object");
  for (const auto& [key, value] : j.items()) {
    const std::string field = prefix.empty() ? key : prefix + "." + key;
    auto it = handlers.find(key);
    if (it == handlers.end()) throw ConfigError(field, "unknown field");
    try {
      it->second(value);
    } catch (const json::exception&) {
      throw ConfigError(field, "wrong type");
    } catch (const ConfigError& e) {
      if (!e.field().empty() && e.field() != key) throw;
      const std::string msg = e.what();
      throw ConfigError(field, msg.substr(e.field().size() + 2));
    }
  }
}

template <class T>
Handler into(T& field) {
  return [&field](const json& v) {
    if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t> ||
                  std::is_same_v<T, unsigned>) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
        throw ConfigError("", "expected a non-negative integer");
      }
    }
    if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError("", "expected a number");
    }
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("", "expected true or false");
    }
    v.get_to(field);
  };
}

json matrix_json(const AccuracyMatrix& m) {
  json rows = json::array();
  for (const auto& r : m.rows) rows.push_back(vec_json(r));
  return {{"rows", rows}, {"before", vec_json(m.before)}, {"random_baseline", vec_json(m.random_baseline)}};
}

AccuracyMatrix matrix_from(const json& j) {
  AccuracyMatrix m;
  for (const auto& r : j.at("rows")) m.rows.push_back(vec_from(r));
  m.before = vec_from(j.at("before"));
  m.random_baseline = vec_from(j.at("random_baseline"));
  return m;
}

json losses_json(const std::vector<EpochLoss>& losses) {
  json out = json::array();
  for (const auto& l : losses) {
    out.push_back({{"task", l.task},
                   {"epoch", l.epoch},
                   {"effect_new", l.mean.effect_new},
                   {"kl", l.mean.kl_term},
                   {"buf_ce", l.mean.buffer_ce},
                   {"buf_l2", l.mean.buffer_logit_l2},
                   {"total", l.mean.total}});
  }
  return out;
}

std::vector<EpochLoss> losses_from(const json& j) {
  std::vector<EpochLoss> out;
  for (const auto& x : j) {
    EpochLoss l;
    l.task = x.at("task").get<std::size_t>();
    l.epoch = x.at("epoch").get<std::size_t>();
    l.mean.effect_new = x.at("effect_new").get<double>();
    l.mean.kl_term = x.at("kl").get<double>();
    l.mean.buffer_ce = x.at("buf_ce").get<double>();
    l.mean.buffer_logit_l2 = x.at("buf_l2").get<double>();
    l.mean.total = x.at("total").get<double>();
    out.push_back(l);
  }
  return out;
}

json diagnostics_json(const TrainDiagnostics& d) {
  return {{"buffer_reads", d.buffer_reads},         {"probability_floor_hits", d.probability_floor_hits},
          {"zero_norm_hits", d.zero_norm_hits},     {"neighbor_fallbacks", d.neighbor_fallbacks},
          {"identity_checks", d.identity_checks},   {"sgd_steps", d.sgd_steps}};
}

TrainDiagnostics diagnostics_from(const json& j) {
  TrainDiagnostics d;
  d.buffer_reads = j.at("buffer_reads").get<std::size_t>();
  d.probability_floor_hits = j.at("probability_floor_hits").get<std::size_t>();
  d.zero_norm_hits = j.at("zero_norm_hits").get<std::size_t>();
  d.neighbor_fallbacks = j.at("neighbor_fallbacks").get<std::size_t>();
  d.identity_checks = j.at("identity_checks").get<std::size_t>();
  d.sgd_steps = j.at("sgd_steps").get<std::size_t>();
  return d;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

// ------------------------------------------------------------------ config

json to_json(const TrainConfig& c) {
  return {{"method", to_string(c.method)},
          {"epochs", c.epochs},
          {"lr", c.lr},
          {"cosine_decay", c.cosine_decay},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"buffer_batch_size", c.buffer_batch_size},
          {"k", c.k},
          {"w0", c.w0},
          {"alpha", c.alpha},
          {"beta", c.beta},
          {"buffer_capacity", c.buffer_capacity},
          {"seed", c.seed},
          {"neighbor_variant", to_string(c.neighbor_variant)},
          {"kl_direction", to_string(c.kl_direction)},
          {"threads", c.threads},
          {"encoder",
           {{"input_dim", c.encoder.input_dim},
            {"hidden_dims", c.encoder.hidden_dims},
            {"nonlinearity", to_string(c.encoder.nonlinearity)},
            {"feature_dim", c.encoder.feature_dim}}},
          {"classifier",
           {{"cosine_scale", c.classifier.cosine_scale},
            {"learnable_scale", c.classifier.learnable_scale},
            {"init_std", c.classifier.init_std}}},
          {"probe", {{"max_epochs", c.probe.max_epochs}, {"lr", c.probe.lr}, {"plateau", c.probe.plateau}}},
          {"probing", c.probing},
          {"tracking", c.tracking},
          {"check_identities", c.check_identities},
          {"dump_neighbors", c.dump_neighbors}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  auto str = [](auto parse, auto& field) {
    return [parse, &field](const json& v) {
      if (!v.is_string()) throw ConfigError("", "expected a string");
      field = parse(v.get<std::string>());
    };
  };
  std::map<std::string, Handler> encoder{
      {"input_dim", into(c.encoder.input_dim)},
      {"hidden_dims", [&](const json& v) { c.encoder.hidden_dims = v.get<std::vector<std::size_t>>(); }},
      {"nonlinearity", str(parse_nonlinearity, c.encoder.nonlinearity)},
      {"feature_dim", into(c.encoder.feature_dim)}};
  std::map<std::string, Handler> classifier{{"cosine_scale", into(c.classifier.cosine_scale)},
                                            {"learnable_scale", into(c.classifier.learnable_scale)},
                                            {"init_std", into(c.classifier.init_std)}};
  std::map<std::string, Handler> probe{
      {"max_epochs", into(c.probe.max_epochs)}, {"lr", into(c.probe.lr)}, {"plateau", into(c.probe.plateau)}};
  std::map<std::string, Handler> top{
      {"method", str(parse_method, c.method)},
      {"epochs", into(c.epochs)},
      {"lr", into(c.lr)},
      {"cosine_decay", into(c.cosine_decay)},
      {"momentum", into(c.momentum)},
      {"weight_decay", into(c.weight_decay)},
      {"batch_size", into(c.batch_size)},
      {"buffer_batch_size", into(c.buffer_batch_size)},
      {"k", into(c.k)},
      {"w0", into(c.w0)},
      {"alpha", into(c.alpha)},
      {"beta", into(c.beta)},
      {"buffer_capacity", into(c.buffer_capacity)},
      {"seed", into(c.seed)},
      {"neighbor_variant", str(parse_neighbor_variant, c.neighbor_variant)},
      {"kl_direction", str(parse_kl_direction, c.kl_direction)},
      {"threads", into(c.threads)},
      {"encoder", [&](const json& v) { read_fields(v, "encoder", encoder); }},
      {"classifier", [&](const json& v) { read_fields(v, "classifier", classifier); }},
      {"probe", [&](const json& v) { read_fields(v, "probe", probe); }},
      {"probing", into(c.probing)},
      {"tracking", into(c.tracking)},
      {"check_identities", into(c.check_identities)},
      {"dump_neighbors", into(c.dump_neighbors)}};
  read_fields(j, "", top);
  return c;
}

// ------------------------------------------------------------------ stream

json stream_spec(const SyntheticConfig& cfg) {
  json j = to_json(cfg);
  j["kind"] = "synthetic";
  return j;
}

TaskStream load_stream(const json& spec) {
  if (spec.is_string()) {
    auto cfg = parse_stream_name(spec.get<std::string>());
    if (!cfg) throw ConfigError("stream", "unknown stream name '" + spec.get<std::string>() + "'");
    return generate_gaussian_stream(*cfg);
  }
  if (!spec.is_object() || !spec.contains("kind")) throw ConfigError("stream", "needs a 'kind'");
  const std::string kind = spec.at("kind").get<std::string>();
  if (kind == "synthetic") {
    json rest = spec;
    rest.erase("kind");
    for (const auto& [key, value] : rest.items()) {
      static const char* known[] = {"n_classes", "n_tasks", "dim", "train_per_class",
                                    "test_per_class", "center_scale", "noise_sigma", "seed"};
      if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
        throw ConfigError("stream." + key, "unknown field");
      }
    }
    SyntheticConfig cfg = synthetic_from_json(rest);
    cfg.validate();
    return generate_gaussian_stream(cfg);
  }
  if (kind == "csv") {
    for (const char* key : {"train", "test", "n_tasks"})
      if (!spec.contains(key)) throw ConfigError(std::string("stream.") + key, "required for csv streams");
    std::optional<std::vector<int>> order;
    if (spec.contains("class_order")) order = spec.at("class_order").get<std::vector<int>>();
    const CsvDataset train = load_csv_dataset(spec.at("train").get<std::string>());
    const CsvDataset test = load_csv_dataset(spec.at("test").get<std::string>());
    return split_into_tasks(train, test, spec.at("n_tasks").get<std::size_t>(), order);
  }
  throw ConfigError("stream.kind", "expected synthetic or csv, got '" + kind + "'");
}

// ------------------------------------------------------------------ report

json summary_json(const RunReport& r) {
  return {{"a_last", opt_json(r.a_last)}, {"fgt", opt_json(r.fgt)}, {"fwd", opt_json(r.fwd)}};
}

json report_to_json(const RunReport& r) {
  json probing = json::array();
  for (const auto& p : r.probing)
    probing.push_back({{"checkpoint", p.checkpoint}, {"observed", p.observed}, {"probing", p.probing}});
  json tracking = json::array();
  for (const auto& t : r.tracking) {
    json dist = json::object();
    for (const auto& [c, d] : t.class_distance) dist[std::to_string(c)] = d;
    tracking.push_back({{"checkpoint", t.checkpoint},
                        {"class_distance", dist},
                        {"task_mean", t.task_mean},
                        {"new_mean", t.new_mean},
                        {"old_mean", t.old_mean},
                        {"old_minus_new", t.old_minus_new}});
  }
  return {{"version", r.version.empty() ? kVersion : r.version},
          {"seed", r.seed},
          {"partial", r.partial},
          {"error", r.error},
          {"config", to_json(r.config)},
          {"stream", r.stream_config},
          {"stream_manifest", r.stream_manifest},
          {"task_seconds", r.task_seconds},
          {"matrix", matrix_json(r.matrix)},
          {"summary", summary_json(r)},
          {"losses", losses_json(r.losses)},
          {"probing", probing},
          {"tracking", tracking},
          {"diagnostics", diagnostics_json(r.diagnostics)}};
}

RunReport report_from_json(const json& j) {
  RunReport r;
  try {
    r.version = j.at("version").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.partial = j.at("partial").get<bool>();
    r.error = j.at("error").get<std::string>();
    r.config = train_config_from_json(j.at("config"));
    r.stream_config = j.at("stream");
    r.stream_manifest = j.at("stream_manifest");
    r.task_seconds = j.at("task_seconds").get<std::vector<double>>();
    r.matrix = matrix_from(j.at("matrix"));
    const json& s = j.at("summary");
    r.a_last = opt_from(s.at("a_last"));
    r.fgt = opt_from(s.at("fgt"));
    r.fwd = opt_from(s.at("fwd"));
    r.losses = losses_from(j.at("losses"));
    for (const auto& p : j.at("probing")) {
      r.probing.push_back(
          {p.at("checkpoint").get<std::size_t>(), p.at("observed").get<double>(), p.at("probing").get<double>()});
    }
    for (const auto& t : j.at("tracking")) {
      TrackingRecord rec;
      rec.checkpoint = t.at("checkpoint").get<std::size_t>();
      for (const auto& [c, d] : t.at("class_distance").items()) rec.class_distance[std::stoi(c)] = d.get<double>();
      rec.task_mean = t.at("task_mean").get<std::vector<double>>();
      rec.new_mean = t.at("new_mean").get<double>();
      rec.old_mean = t.at("old_mean").get<double>();
      rec.old_minus_new = t.at("old_minus_new").get<double>();
      r.tracking.push_back(rec);
    }
    r.diagnostics = diagnostics_from(j.at("diagnostics"));
  } catch (const json::exception& e) {
    throw ParseError(0, std::string("report: ") + e.what());
  }
  return r;
}

// --------------------------------------------------------------------- csv

std::string matrix_csv(const AccuracyMatrix& m) {
  const std::size_t T = std::max({m.rows.size(), m.before.size(), m.random_baseline.size()});
  std::ostringstream out;
  out << "after_task";
  for (std::size_t i = 0; i < T; ++i) out << ",task_" << i;
  out << "\n";
  for (std::size_t t = 0; t < m.rows.size(); ++t) {
    out << t;
    for (std::size_t i = 0; i < T; ++i) out << "," << (i < m.rows[t].size() ? fmt(m.rows[t][i]) : "");
    out << "\n";
  }
  auto extra = [&](const char* name, const std::vector<double>& v) {
    out << name;
    for (std::size_t i = 0; i < T; ++i) out << "," << (i < v.size() ? fmt(v[i]) : "");
    out << "\n";
  };
  extra("before", m.before);
  extra("random", m.random_baseline);
  return out.str();
}

AccuracyMatrix matrix_from_csv(const std::string& text) {
  AccuracyMatrix m;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || line.empty()) continue;
    const auto cells = split(line, ',');
    std::vector<double> vals;
    for (std::size_t i = 1; i < cells.size(); ++i) {
      if (cells[i].empty()) {
        vals.push_back(kNaN);
        continue;
      }
      try {
        vals.push_back(std::stod(cells[i]));
      } catch (const std::exception&) {
        throw ParseError(lineno, "non-numeric cell '" + cells[i] + "'");
      }
    }
    if (cells[0] == "before") {
      m.before = vals;
    } else if (cells[0] == "random") {
      m.random_baseline = vals;
    } else {
      const std::size_t t = m.rows.size();
      std::vector<double> row;
      for (std::size_t i = 0; i <= t && i < vals.size(); ++i) row.push_back(vals[i]);
      // Rows left empty (MTL's intermediate rows) stay empty.
      if (std::all_of(row.begin(), row.end(), [](double v) { return std::isnan(v); })) row.clear();
      m.rows.push_back(row);
    }
  }
  return m;
}

std::string losses_csv(const std::vector<EpochLoss>& losses) {
  std::string out = "task,epoch,effect_new,kl,buf_ce,buf_l2,total\n";
  for (const auto& l : losses) {
    out += std::to_string(l.task) + "," + std::to_string(l.epoch) + "," + fmt(l.mean.effect_new) + "," +
           fmt(l.mean.kl_term) + "," + fmt(l.mean.buffer_ce) + "," + fmt(l.mean.buffer_logit_l2) + "," +
           fmt(l.mean.total) + "\n";
  }
  return out;
}

std::string probing_csv(const std::vector<ProbePoint>& points) {
  std::string out = "checkpoint,observed,probing\n";
  for (const auto& p : points) out += std::to_string(p.checkpoint) + "," + fmt(p.observed) + "," + fmt(p.probing) + "\n";
  return out;
}

std::string tracking_csv(const std::vector<TrackingRecord>& records) {
  std::string out = "checkpoint,task,role,mean_distance\n";
  for (const auto& r : records) {
    for (std::size_t t = 0; t < r.task_mean.size(); ++t) {
      out += std::to_string(r.checkpoint) + "," + std::to_string(t) + "," + (t == r.checkpoint ? "new" : "old") +
             "," + fmt(r.task_mean[t]) + "\n";
    }
  }
  return out;
}

// -------------------------------------------------------------------- files

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("short write to " + path.string());
}

void write_run_outputs(const std::filesystem::path& dir, const RunReport& report, const std::string& neighbors) {
  std::filesystem::create_directories(dir);
  const json echo = {{"config", to_json(report.config)}, {"stream", report.stream_config}};
  write_file(dir / "config.echo", echo.dump(2) + "\n");
  write_file(dir / "report.json", report_to_json(report).dump(2) + "\n");
  write_file(dir / "matrix.csv", matrix_csv(report.matrix));
  write_file(dir / "losses.csv", losses_csv(report.losses));
  write_file(dir / "probing.csv", probing_csv(report.probing));
  write_file(dir / "tracking.csv", tracking_csv(report.tracking));
  if (!neighbors.empty()) write_file(dir / "neighbors.csv", neighbors);
}

RunReport read_report(const std::filesystem::path& file_or_dir) {
  const auto path = std::filesystem::is_directory(file_or_dir) ? file_or_dir / "report.json" : file_or_dir;
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError(0, path.string() + ": " + e.what());
  }
  return report_from_json(j);
}

std::string compare_reports(const RunReport& a, const RunReport& b) {
  auto cell = [](const std::optional<double>& v) {
    if (!v) return std::string("-");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", *v * 100.0);
    return std::string(buf);
  };
  auto line = [&](const char* name, const std::optional<double>& x, const std::optional<double>& y) {
    char buf[160];
    std::optional<double> d;
    if (x && y) d = *y - *x;
    std::snprintf(buf, sizeof buf, "%-16s %10s %10s %10s\n", name, cell(x).c_str(), cell(y).c_str(), cell(d).c_str());
    return std::string(buf);
  };
  auto final_probe_gap = [](const RunReport& r) -> std::optional<double> {
    if (r.probing.empty()) return std::nullopt;
    return r.probing.back().probing - r.probing.back().observed;
  };
  auto final_tracking = [](const RunReport& r) -> std::optional<double> {
    if (r.tracking.empty()) return std::nullopt;
    return r.tracking.back().old_minus_new;
  };
  char head[160];
  std::snprintf(head, sizeof head, "%-16s %10s %10s %10s\n", "metric (x100)", to_string(a.config.method).c_str(),
                to_string(b.config.method).c_str(), "delta");
  std::string out = head;
  out += line("A_last", a.a_last, b.a_last);
  out += line("FGT", a.fgt, b.fgt);
  out += line("FWD", a.fwd, b.fwd);
  out += line("probe_gap", final_probe_gap(a), final_probe_gap(b));
  out += line("old_minus_new", final_tracking(a), final_tracking(b));
  return out;
}

// -------------------------------------------------------------- checkpoints

namespace {

constexpr char kBinaryMagic[8] = {'B', 'A', 'C', 'E', 'C', 'K', 'P', 'T'};
constexpr const char* kTextMagic = "bace-checkpoint";
constexpr std::uint64_t kCheckpointVersion = 1;

class Sink {
 public:
  explicit Sink(CheckpointFormat f) : format_(f) {}
  void u64(std::uint64_t v) {
    if (format_ == CheckpointFormat::binary) {
      for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    } else {
      out_ += std::to_string(v) + "\n";
    }
  }
  void f64(double v) {
    if (format_ == CheckpointFormat::binary) {
      u64(std::bit_cast<std::uint64_t>(v));
    } else {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%a\n", v);
      out_ += buf;
    }
  }
  void str(const std::string& s) {
    u64(s.size());
    out_ += s;
    if (format_ == CheckpointFormat::text) out_ += "\n";
  }
  void tensor(const Tensor& t) {
    u64(t.rank());
    for (std::size_t d : t.shape()) u64(d);
    for (double v : t.values()) f64(v);
  }
  std::string& data() { return out_; }

 private:
  CheckpointFormat format_;
  std::string out_;
};

class Source {
 public:
  Source(std::string data, CheckpointFormat f, std::size_t pos) : data_(std::move(data)), format_(f), pos_(pos) {}
  std::uint64_t u64() {
    if (format_ == CheckpointFormat::binary) {
      need(8);
      std::uint64_t v = 0;
      for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
      pos_ += 8;
      return v;
    }
    const std::string tok = token();
    try {
      std::size_t used = 0;
      const auto v = std::stoull(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      return v;
    } catch (const std::exception&) {
      throw ParseError(line_, "expected an integer, got '" + tok + "'");
    }
  }
  double f64() {
    if (format_ == CheckpointFormat::binary) return std::bit_cast<double>(u64());
    const std::string tok = token();
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size()) throw ParseError(line_, "expected a hexfloat, got '" + tok + "'");
    return v;
  }
  std::string str() {
    const std::size_t n = u64();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    if (format_ == CheckpointFormat::text) {
      if (pos_ < data_.size() && data_[pos_] == '\n') ++pos_;
      ++line_;
    }
    return s;
  }
  Tensor tensor() {
    const std::size_t rank = u64();
    if (rank > 2) throw ParseError(line_, "tensor rank " + std::to_string(rank) + " unsupported");
    ad::Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = u64();
      n *= d;
    }
    if (n > (data_.size() - pos_)) throw ParseError(line_, "tensor larger than the file");
    std::vector<double> v(n);
    for (double& x : v) x = f64();
    return Tensor(shape, std::move(v));
  }
  bool done() {
    while (pos_ < data_.size() && format_ == CheckpointFormat::text && std::isspace(static_cast<unsigned char>(data_[pos_])))
      ++pos_;
    return pos_ == data_.size();
  }

 private:
  void need(std::size_t n) {
    if (pos_ + n > data_.size()) throw ParseError(line_, "checkpoint truncated");
  }
  std::string token() {
    if (pos_ >= data_.size()) throw ParseError(line_, "checkpoint truncated");
    const std::size_t end = data_.find('\n', pos_);
    std::string tok = data_.substr(pos_, end == std::string::npos ? std::string::npos : end - pos_);
    pos_ = end == std::string::npos ? data_.size() : end + 1;
    ++line_;
    return tok;
  }

  std::string data_;
  CheckpointFormat format_;
  std::size_t pos_;
  std::size_t line_ = 1;
};

void put_model(Sink& s, const ModelState& m) {
  s.u64(m.weights.size());
  for (std::size_t l = 0; l < m.weights.size(); ++l) {
    s.tensor(m.weights[l]);
    s.tensor(m.biases[l]);
  }
  s.tensor(m.classifier);
  s.tensor(m.scale);
  s.u64(m.registry.num_tasks());
  for (const auto& task : m.registry.tasks()) {
    s.u64(task.size());
    for (int c : task) s.u64(static_cast<std::uint64_t>(c));
  }
}

ModelState get_model(Source& src, const TrainConfig& cfg) {
  ModelState m;
  m.encoder = cfg.encoder;
  m.classifier_config = cfg.classifier;
  const std::size_t layers = src.u64();
  if (layers != cfg.encoder.hidden_dims.size()) throw ParseError(0, "checkpoint layer count disagrees with its config");
  for (std::size_t l = 0; l < layers; ++l) {
    m.weights.push_back(src.tensor());
    m.biases.push_back(src.tensor());
  }
  m.classifier = src.tensor();
  m.scale = src.tensor();
  const std::size_t tasks = src.u64();
  for (std::size_t t = 0; t < tasks; ++t) {
    std::vector<int> ids(src.u64());
    for (int& c : ids) c = static_cast<int>(src.u64());
    m.registry.add_task(ids);
  }
  if (m.classifier.rows() != m.registry.num_classes() && m.registry.num_classes() > 0) {
    throw ParseError(0, "checkpoint classifier rows disagree with its class registry");
  }
  return m;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt, CheckpointFormat format) {
  Sink s(format);
  if (format == CheckpointFormat::binary) {
    s.data().append(kBinaryMagic, sizeof kBinaryMagic);
  } else {
    s.data() += std::string(kTextMagic) + "\n";
  }
  s.u64(kCheckpointVersion);
  const RunState& st = ckpt.state;
  const json meta = {{"config", to_json(ckpt.config)},
                     {"stream", ckpt.stream},
                     {"tasks_done", st.tasks_done},
                     {"matrix", matrix_json(st.matrix)},
                     {"losses", losses_json(st.losses)},
                     {"diagnostics", diagnostics_json(st.diagnostics)}};
  s.str(meta.dump());
  put_model(s, st.student);
  put_model(s, st.teacher);
  s.u64(st.buffer.capacity());
  s.u64(st.buffer.num_classes());
  for (const auto& [c, ex] : st.buffer.store()) {
    s.u64(static_cast<std::uint64_t>(c));
    s.tensor(ex);
  }
  write_file(path, s.data());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::string data = read_file(path);
  CheckpointFormat format;
  std::size_t start;
  if (data.size() >= 8 && std::memcmp(data.data(), kBinaryMagic, 8) == 0) {
    format = CheckpointFormat::binary;
    start = 8;
  } else if (data.rfind(std::string(kTextMagic) + "\n", 0) == 0) {
    format = CheckpointFormat::text;
    start = std::strlen(kTextMagic) + 1;
  } else {
    throw ParseError(1, path.string() + ": not a checkpoint");
  }
  Source src(std::move(data), format, start);
  if (src.u64() != kCheckpointVersion) throw ParseError(0, "unsupported checkpoint version");
  json meta;
  try {
    meta = json::parse(src.str());
  } catch (const json::parse_error& e) {
    throw ParseError(0, std::string("checkpoint metadata: ") + e.what());
  }
  Checkpoint ck;
  ck.config = train_config_from_json(meta.at("config"));
  ck.stream = meta.at("stream");
  RunState& st = ck.state;
  st.tasks_done = meta.at("tasks_done").get<std::size_t>();
  st.matrix = matrix_from(meta.at("matrix"));
  st.losses = losses_from(meta.at("losses"));
  st.diagnostics = diagnostics_from(meta.at("diagnostics"));
  st.student = get_model(src, ck.config);
  st.teacher = get_model(src, ck.config);
  st.buffer = RehearsalBuffer(src.u64());
  const std::size_t classes = src.u64();
  for (std::size_t i = 0; i < classes; ++i) {
    const int c = static_cast<int>(src.u64());
    st.buffer.set_class(c, src.tensor());
  }
  if (!src.done()) throw ParseError(0, "trailing bytes after checkpoint");
  return ck;
}

}  // namespace bace
