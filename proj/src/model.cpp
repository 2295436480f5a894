#include "bace/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "bace/errors.hpp"

namespace bace {

std::string to_string(Nonlinearity n) { return n == Nonlinearity::relu ? "relu" : "tanh"; }

Nonlinearity parse_nonlinearity(const std::string& s) {
  if (s == "relu") return Nonlinearity::relu;
  if (s == "tanh") return Nonlinearity::tanh;
  throw ConfigError("nonlinearity", "expected relu or tanh, got '" + s + "'");
}

void EncoderConfig::validate() const {
  if (input_dim == 0) throw ConfigError("input_dim", "must be positive");
  if (hidden_dims.empty()) throw ConfigError("hidden_dims", "at least one layer is required");
  for (std::size_t w : hidden_dims)
    if (w == 0) throw ConfigError("hidden_dims", "layer widths must be positive");
  if (feature_dim != hidden_dims.back()) {
    throw ConfigError("feature_dim", "must equal the last layer width (" +
                                         std::to_string(hidden_dims.back()) + ")");
  }
}

void ClassifierConfig::validate() const {
  if (!(cosine_scale > 0.0) || !std::isfinite(cosine_scale))
    throw ConfigError("cosine_scale", "must be positive");
  if (!(init_std > 0.0)) throw ConfigError("init_std", "must be positive");
}

// ----------------------------------------------------------- ClassRegistry

void ClassRegistry::add_task(std::span<const int> class_ids) {
  if (class_ids.empty()) throw RegistryError("registry: a task needs at least one class");
  for (std::size_t i = 0; i < class_ids.size(); ++i) {
    if (class_ids[i] < 0) throw RegistryError("registry: negative class id");
    if (contains(class_ids[i]))
      throw RegistryError("registry: class " + std::to_string(class_ids[i]) + " already registered");
    for (std::size_t j = 0; j < i; ++j)
      if (class_ids[j] == class_ids[i])
        throw RegistryError("registry: class " + std::to_string(class_ids[i]) + " repeated in task");
  }
  tasks_.emplace_back(class_ids.begin(), class_ids.end());
  row_class_.insert(row_class_.end(), class_ids.begin(), class_ids.end());
}

bool ClassRegistry::contains(int class_id) const {
  return std::find(row_class_.begin(), row_class_.end(), class_id) != row_class_.end();
}

std::size_t ClassRegistry::row_of(int class_id) const {
  auto it = std::find(row_class_.begin(), row_class_.end(), class_id);
  if (it == row_class_.end()) throw RegistryError("registry: unknown class " + std::to_string(class_id));
  return static_cast<std::size_t>(it - row_class_.begin());
}

std::vector<std::size_t> ClassRegistry::old_rows() const {
  std::vector<std::size_t> rows;
  if (tasks_.empty()) return rows;
  const std::size_t n_old = row_class_.size() - tasks_.back().size();
  for (std::size_t r = 0; r < n_old; ++r) rows.push_back(r);
  return rows;
}

std::vector<std::size_t> ClassRegistry::new_rows() const {
  std::vector<std::size_t> rows;
  if (tasks_.empty()) return rows;
  for (std::size_t r = row_class_.size() - tasks_.back().size(); r < row_class_.size(); ++r) rows.push_back(r);
  return rows;
}

std::vector<std::size_t> ClassRegistry::task_rows(std::size_t task) const {
  std::size_t start = 0;
  for (std::size_t t = 0; t < task; ++t) start += tasks_.at(t).size();
  std::vector<std::size_t> rows;
  for (std::size_t r = start; r < start + tasks_.at(task).size(); ++r) rows.push_back(r);
  return rows;
}

// ------------------------------------------------------------- ModelState

std::vector<Tensor*> ModelState::parameters() {
  std::vector<Tensor*> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(&weights[l]);
    out.push_back(&biases[l]);
  }
  out.push_back(&classifier);
  if (classifier_config.learnable_scale) out.push_back(&scale);
  return out;
}

std::vector<const Tensor*> ModelState::parameters() const {
  std::vector<const Tensor*> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(&weights[l]);
    out.push_back(&biases[l]);
  }
  out.push_back(&classifier);
  if (classifier_config.learnable_scale) out.push_back(&scale);
  return out;
}

ModelState init_model(const EncoderConfig& encoder, const ClassifierConfig& classifier,
                      std::mt19937_64& rng) {
  encoder.validate();
  classifier.validate();
  ModelState m;
  m.encoder = encoder;
  m.classifier_config = classifier;
  std::size_t in = encoder.input_dim;
  for (std::size_t out : encoder.hidden_dims) {
    const double gain = encoder.nonlinearity == Nonlinearity::relu ? 2.0 : 1.0;
    std::normal_distribution<double> dist(0.0, std::sqrt(gain / static_cast<double>(in)));
    Tensor w(ad::Shape{in, out});
    for (double& v : w.values()) v = dist(rng);
    m.weights.push_back(std::move(w));
    m.biases.emplace_back(ad::Shape{out}, 0.0);
    in = out;
  }
  m.classifier = Tensor(ad::Shape{0, encoder.feature_dim});
  m.scale = Tensor::scalar(classifier.cosine_scale);
  return m;
}

std::vector<Var> BoundModel::trainable() const {
  std::vector<Var> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(weights[l]);
    out.push_back(biases[l]);
  }
  out.push_back(classifier);
  if (state->classifier_config.learnable_scale) out.push_back(scale);
  return out;
}

BoundModel bind(ad::Tape& tape, const ModelState& model, bool trainable) {
  BoundModel b;
  b.state = &model;
  auto put = [&](const Tensor& t) { return trainable ? tape.parameter(t) : tape.constant(t); };
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    b.weights.push_back(put(model.weights[l]));
    b.biases.push_back(put(model.biases[l]));
  }
  b.classifier = put(model.classifier);
  b.scale = trainable && model.classifier_config.learnable_scale ? tape.parameter(model.scale)
                                                                 : tape.constant(model.scale);
  return b;
}

Var forward_features(const BoundModel& model, Var x) {
  const EncoderConfig& cfg = model.state->encoder;
  if (x.value().rank() != 2 || x.value().cols() != cfg.input_dim) {
    throw DimensionError("forward_features: expected [batch x " + std::to_string(cfg.input_dim) + "] input");
  }
  Var h = x;
  const std::size_t layers = model.weights.size();
  for (std::size_t l = 0; l < layers; ++l) {
    h = ad::add_bias(ad::matmul(h, model.weights[l]), model.biases[l]);
    if (l + 1 < layers) h = cfg.nonlinearity == Nonlinearity::relu ? ad::relu(h) : ad::tanh(h);
  }
  return h;
}

Var forward_logits(const BoundModel& model, Var features) {
  const std::size_t f = model.state->encoder.feature_dim;
  if (features.value().rank() != 2 || features.value().cols() != f) {
    throw DimensionError("forward_logits: expected [batch x " + std::to_string(f) + "] features");
  }
  if (model.state->num_classes() == 0) throw ContractError("forward_logits: classifier has no classes");
  Var cos = ad::matmul(ad::normalize_rows(features), ad::transpose(ad::normalize_rows(model.classifier)));
  return ad::mul_scalar(cos, model.scale);
}

Tensor features_of(const ModelState& model, const Tensor& x) {
  ad::Tape tape;
  BoundModel b = bind(tape, model, false);
  return forward_features(b, tape.constant(x)).value();
}

Tensor logits_of(const ModelState& model, const Tensor& x) {
  ad::Tape tape;
  BoundModel b = bind(tape, model, false);
  return forward_logits(b, forward_features(b, tape.constant(x))).value();
}

Tensor logits_from_features(const ModelState& model, const Tensor& features) {
  ad::Tape tape;
  BoundModel b = bind(tape, model, false);
  return forward_logits(b, tape.constant(features)).value();
}

void expand_classifier(ModelState& model, std::span<const int> new_class_ids, std::mt19937_64& rng) {
  const std::size_t f = model.encoder.feature_dim;
  Tensor rows(ad::Shape{new_class_ids.size(), f});
  std::normal_distribution<double> dist(0.0, model.classifier_config.init_std);
  for (double& v : rows.values()) v = dist(rng);
  expand_classifier(model, new_class_ids, rows);
}

void expand_classifier(ModelState& model, std::span<const int> new_class_ids, const Tensor& rows) {
  const std::size_t f = model.encoder.feature_dim;
  if (rows.rank() != 2 || rows.rows() != new_class_ids.size() || rows.cols() != f) {
    throw DimensionError("expand_classifier: one row of width feature_dim per new class");
  }
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    double ss = 0.0;
    for (double v : rows.row(r)) ss += v * v;
    if (!(ss > 0.0) || !std::isfinite(ss)) throw ContractError("expand_classifier: row norm must be finite and > 0");
  }
  model.registry.add_task(new_class_ids);
  model.classifier = ad::concat_rows(model.classifier, rows);
}

bool same_architecture(const ModelState& a, const ModelState& b) {
  if (!(a.encoder == b.encoder) || a.weights.size() != b.weights.size()) return false;
  for (std::size_t l = 0; l < a.weights.size(); ++l) {
    if (a.weights[l].shape() != b.weights[l].shape() || a.biases[l].shape() != b.biases[l].shape())
      return false;
  }
  return a.classifier.shape() == b.classifier.shape() && a.registry == b.registry &&
         a.classifier_config.learnable_scale == b.classifier_config.learnable_scale;
}

void ema_update(ModelState& teacher, const ModelState& student, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ContractError("ema_update: beta must lie in [0,1]");
  if (!same_architecture(teacher, student)) throw ContractError("ema_update: architecture mismatch");
  auto blend = [beta](Tensor& t, const Tensor& s) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = beta * t[i] + (1.0 - beta) * s[i];
  };
  for (std::size_t l = 0; l < teacher.weights.size(); ++l) {
    blend(teacher.weights[l], student.weights[l]);
    blend(teacher.biases[l], student.biases[l]);
  }
  blend(teacher.classifier, student.classifier);
  blend(teacher.scale, student.scale);
}

std::uint64_t state_hash(const ModelState& model) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix_bytes = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  auto mix_tensor = [&](const Tensor& t) {
    for (std::size_t d : t.shape()) mix_bytes(&d, sizeof d);
    mix_bytes(t.data(), t.size() * sizeof(double));
  };
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    mix_tensor(model.weights[l]);
    mix_tensor(model.biases[l]);
  }
  mix_tensor(model.classifier);
  mix_tensor(model.scale);
  for (const auto& task : model.registry.tasks()) {
    mix_bytes(task.data(), task.size() * sizeof(int));
    const int sep = -1;
    mix_bytes(&sep, sizeof sep);
  }
  return h;
}

}  // namespace bace
