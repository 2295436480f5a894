#include "bace/taskstream.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>

#include "bace/errors.hpp"
#include "bace/rng.hpp"

namespace bace {

Sample LabeledSet::sample(std::size_t i, Split split) const {
  const auto r = x.row(i);
  return Sample{std::vector<double>(r.begin(), r.end()), y.at(i), split};
}

void LabeledSet::append(const LabeledSet& other) {
  x = ad::concat_rows(x, other.x);
  y.insert(y.end(), other.y.begin(), other.y.end());
}

std::size_t TaskStream::num_classes() const {
  std::size_t n = 0;
  for (const Task& t : tasks) n += t.classes.size();
  return n;
}

void TaskStream::validate() const {
  if (tasks.empty()) throw ContractError("stream: no tasks");
  std::set<int> seen;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const Task& task = tasks[t];
    if (task.classes.empty()) throw ContractError("stream: task " + std::to_string(t) + " has no classes");
    for (int c : task.classes) {
      if (!seen.insert(c).second) {
        throw ContractError("stream: class " + std::to_string(c) + " appears in more than one task");
      }
    }
    const std::set<int> own(task.classes.begin(), task.classes.end());
    for (const LabeledSet* set : {&task.train, &task.test}) {
      if (set->size() == 0) throw ContractError("stream: task " + std::to_string(t) + " has an empty split");
      if (set->x.rank() != 2 || set->x.rows() != set->size() || set->x.cols() != input_dim) {
        throw ContractError("stream: task " + std::to_string(t) + " has inconsistent dimensions");
      }
      if (!set->x.all_finite()) throw ContractError("stream: non-finite input in task " + std::to_string(t));
      for (int y : set->y) {
        if (!own.count(y)) {
          throw ContractError("stream: label " + std::to_string(y) + " outside task " + std::to_string(t) +
                              "'s class set");
        }
      }
    }
  }
}

LabeledSet TaskStream::train_upto(std::size_t upto) const {
  LabeledSet out;
  for (std::size_t t = 0; t <= upto && t < tasks.size(); ++t) out.append(tasks[t].train);
  return out;
}

LabeledSet TaskStream::test_upto(std::size_t upto) const {
  LabeledSet out;
  for (std::size_t t = 0; t <= upto && t < tasks.size(); ++t) out.append(tasks[t].test);
  return out;
}

nlohmann::json TaskStream::manifest() const {
  nlohmann::json j;
  j["source"] = source;
  j["seed"] = seed;
  j["input_dim"] = input_dim;
  j["tasks"] = nlohmann::json::array();
  for (const Task& t : tasks) {
    j["tasks"].push_back({{"classes", t.classes}, {"train", t.train.size()}, {"test", t.test.size()}});
  }
  return j;
}

// ------------------------------------------------------------- synthetic

void SyntheticConfig::validate() const {
  if (n_classes == 0) throw ConfigError("n_classes", "must be positive");
  if (n_tasks == 0) throw ConfigError("n_tasks", "must be positive");
  if (n_classes % n_tasks != 0) throw ConfigError("n_tasks", "must divide n_classes");
  if (dim == 0) throw ConfigError("dim", "must be positive");
  if (train_per_class == 0) throw ConfigError("train_per_class", "must be positive");
  if (test_per_class == 0) throw ConfigError("test_per_class", "must be positive");
  if (!(center_scale >= 0.0) || !std::isfinite(center_scale)) throw ConfigError("center_scale", "must be >= 0");
  if (!(noise_sigma > 0.0) || !std::isfinite(noise_sigma)) throw ConfigError("noise_sigma", "must be > 0");
}

nlohmann::json to_json(const SyntheticConfig& c) {
  return {{"n_classes", c.n_classes},
          {"n_tasks", c.n_tasks},
          {"dim", c.dim},
          {"train_per_class", c.train_per_class},
          {"test_per_class", c.test_per_class},
          {"center_scale", c.center_scale},
          {"noise_sigma", c.noise_sigma},
          {"seed", c.seed}};
}

SyntheticConfig synthetic_from_json(const nlohmann::json& j) {
  SyntheticConfig c;
  auto get = [&j](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("stream.") + key, "wrong type");
    }
  };
  get("n_classes", c.n_classes);
  get("n_tasks", c.n_tasks);
  get("dim", c.dim);
  get("train_per_class", c.train_per_class);
  get("test_per_class", c.test_per_class);
  get("center_scale", c.center_scale);
  get("noise_sigma", c.noise_sigma);
  get("seed", c.seed);
  return c;
}

std::optional<SyntheticConfig> parse_stream_name(const std::string& name) {
  static const std::regex pattern(R"(synth-(\d+)c(\d+)t)");
  std::smatch m;
  if (!std::regex_match(name, m, pattern)) return std::nullopt;
  SyntheticConfig c;
  c.n_classes = std::stoul(m[1].str());
  c.n_tasks = std::stoul(m[2].str());
  return c;
}

TaskStream generate_gaussian_stream(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 center_rng = make_rng(cfg.seed, RngPurpose::data_centers);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<double>> centers(cfg.n_classes, std::vector<double>(cfg.dim));
  for (auto& c : centers)
    for (double& v : c) v = cfg.center_scale * unit(center_rng);

  auto draw = [&](int cls, std::size_t count, std::mt19937_64& rng) {
    LabeledSet set;
    set.x = Tensor(ad::Shape{count, cfg.dim});
    set.y.assign(count, cls);
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t d = 0; d < cfg.dim; ++d)
        set.x.at(i, d) = centers[static_cast<std::size_t>(cls)][d] + cfg.noise_sigma * unit(rng);
    return set;
  };

  TaskStream stream;
  stream.input_dim = cfg.dim;
  stream.seed = cfg.seed;
  stream.source = "synthetic";
  const std::size_t per_task = cfg.n_classes / cfg.n_tasks;
  for (std::size_t t = 0; t < cfg.n_tasks; ++t) {
    Task task;
    for (std::size_t k = 0; k < per_task; ++k) {
      const int cls = static_cast<int>(t * per_task + k);
      task.classes.push_back(cls);
      std::mt19937_64 rng = make_rng(cfg.seed, RngPurpose::data_samples, static_cast<std::uint64_t>(cls));
      task.train.append(draw(cls, cfg.train_per_class, rng));
      task.test.append(draw(cls, cfg.test_per_class, rng));
    }
    stream.tasks.push_back(std::move(task));
  }
  stream.validate();
  return stream;
}

// ------------------------------------------------------------------- CSV

namespace {

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

double parse_double(const std::string& cell, std::size_t line) {
  const std::string s = trim(cell);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ParseError(line, "non-numeric cell '" + cell + "'");
  }
  return v;
}

int parse_label(const std::string& cell, std::size_t line) {
  const std::string s = trim(cell);
  int v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || v < 0) {
    throw ParseError(line, "label must be a non-negative integer, got '" + cell + "'");
  }
  return v;
}

}  // namespace

CsvDataset load_csv_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(0, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  const auto header = split_commas(trim(line));
  if (header.size() < 2 || trim(header[0]) != "label") {
    throw ParseError(1, "header must start with 'label' followed by feature columns");
  }
  for (std::size_t d = 1; d < header.size(); ++d) {
    if (trim(header[d]) != "f" + std::to_string(d - 1)) {
      throw ParseError(1, "expected column 'f" + std::to_string(d - 1) + "', got '" + header[d] + "'");
    }
  }
  const std::size_t dim = header.size() - 1;
  CsvDataset out;
  std::vector<double> values;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split_commas(trim(line));
    if (cells.size() != header.size()) {
      throw ParseError(lineno, "expected " + std::to_string(header.size()) + " cells, got " +
                                   std::to_string(cells.size()));
    }
    out.labels.push_back(parse_label(cells[0], lineno));
    for (std::size_t d = 0; d < dim; ++d) values.push_back(parse_double(cells[d + 1], lineno));
    out.lines.push_back(lineno);
  }
  if (out.labels.empty()) throw ParseError(lineno, "no data rows");
  out.x = Tensor::matrix(out.labels.size(), dim, std::move(values));
  return out;
}

TaskStream split_into_tasks(const CsvDataset& train, const CsvDataset& test, std::size_t n_tasks,
                            std::optional<std::vector<int>> class_order) {
  if (train.x.cols() != test.x.cols()) throw ParseError(0, "train and test feature counts differ");
  std::map<int, int> remap;
  for (int y : train.labels) remap.emplace(y, 0);
  int next = 0;
  for (auto& [raw, id] : remap) id = next++;
  const std::size_t n_classes = remap.size();
  if (n_tasks == 0 || n_classes % n_tasks != 0) {
    throw ConfigError("n_tasks", std::to_string(n_tasks) + " does not divide " + std::to_string(n_classes) +
                                     " classes");
  }

  std::vector<int> order;
  if (class_order) {
    order = *class_order;
    std::vector<int> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    std::vector<int> expect(n_classes);
    for (std::size_t i = 0; i < n_classes; ++i) expect[i] = static_cast<int>(i);
    if (sorted != expect) throw ConfigError("class_order", "must be a permutation of 0.." + std::to_string(n_classes - 1));
  } else {
    for (std::size_t i = 0; i < n_classes; ++i) order.push_back(static_cast<int>(i));
  }

  auto mapped = [&remap](const CsvDataset& d) {
    std::vector<int> ys;
    for (std::size_t i = 0; i < d.labels.size(); ++i) {
      auto it = remap.find(d.labels[i]);
      if (it == remap.end()) {
        throw ParseError(d.lines.empty() ? 0 : d.lines[i], "unknown label " + std::to_string(d.labels[i]));
      }
      ys.push_back(it->second);
    }
    return ys;
  };
  const std::vector<int> train_y = mapped(train);
  const std::vector<int> test_y = mapped(test);

  TaskStream stream;
  stream.input_dim = train.x.cols();
  stream.source = "csv";
  const std::size_t per_task = n_classes / n_tasks;
  for (std::size_t t = 0; t < n_tasks; ++t) {
    Task task;
    task.classes.assign(order.begin() + static_cast<std::ptrdiff_t>(t * per_task),
                        order.begin() + static_cast<std::ptrdiff_t>((t + 1) * per_task));
    const std::set<int> own(task.classes.begin(), task.classes.end());
    auto collect = [&own](const CsvDataset& d, const std::vector<int>& ys) {
      std::vector<std::size_t> rows;
      LabeledSet s;
      for (std::size_t i = 0; i < ys.size(); ++i) {
        if (own.count(ys[i])) {
          rows.push_back(i);
          s.y.push_back(ys[i]);
        }
      }
      s.x = ad::gather_rows(d.x, rows);
      return s;
    };
    task.train = collect(train, train_y);
    task.test = collect(test, test_y);
    stream.tasks.push_back(std::move(task));
  }
  stream.validate();
  return stream;
}

}  // namespace bace
