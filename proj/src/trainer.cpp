#include "bace/trainer.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "bace/errors.hpp"
#include "bace/rng.hpp"

namespace bace {

namespace {

constexpr Method kMethods[] = {Method::SEQ,  Method::REPLAY,  Method::DERPP,   Method::MTL,
                               Method::BACE, Method::BACE_W1, Method::BACE_A0, Method::BACE_W1_A0};

std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

Tensor expansion_rows(const TrainConfig& cfg, std::size_t task, std::size_t count) {
  std::mt19937_64 rng = make_rng(cfg.seed, RngPurpose::expand, task);
  std::normal_distribution<double> dist(0.0, cfg.classifier.init_std);
  Tensor rows(ad::Shape{count, cfg.encoder.feature_dim});
  for (double& v : rows.values()) v = dist(rng);
  return rows;
}

void add_into(LossBreakdown& acc, const LossBreakdown& b) {
  acc.effect_new += b.effect_new;
  acc.kl_term += b.kl_term;
  acc.buffer_ce += b.buffer_ce;
  acc.buffer_logit_l2 += b.buffer_logit_l2;
  acc.total += b.total;
}

void divide(LossBreakdown& acc, double n) {
  acc.effect_new /= n;
  acc.kl_term /= n;
  acc.buffer_ce /= n;
  acc.buffer_logit_l2 /= n;
  acc.total /= n;
}

double lr_at(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
  if (!cfg.cosine_decay || total_steps <= 1) return cfg.lr;
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  // Floor keeps the final step strictly positive.
  return std::max(cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)), cfg.lr * 1e-3);
}

// Reduction identities on a live batch; throws on violation.
void check_identities(const TrainConfig& cfg, const ModelState& student, const Tensor& batch_x,
                      std::span<const std::size_t> rows, const LossBreakdown& b, bool has_old, bool has_buffer) {
  const double alpha = cfg.effective_alpha();
  double expect = b.effect_new;
  if (has_old && alpha != 0.0) expect += alpha * b.kl_term;
  if (has_buffer) {
    expect += b.buffer_ce;
    expect += b.buffer_logit_l2;
  }
  if (expect != b.total) throw ContractError("identity check: total differs from its components");
  if (cfg.effective_w0() == 1.0) {
    ad::Tape tape;
    Var logits = tape.constant(logits_of(student, batch_x));
    const double ce = plain_cross_entropy(logits, rows).value().item();
    if (std::abs(ce - b.effect_new) > 1e-12) throw ContractError("identity check: W0=1 joint score differs from CE");
  }
  if (b.kl_term < 0.0 || b.buffer_logit_l2 < 0.0) throw ContractError("identity check: negative divergence term");
}

struct StepInput {
  const Tensor* pool_x;
  std::span<const int> pool_y;
  const NeighborPlan* plan;
  std::vector<std::size_t> batch;
};

void train_epochs(RunState& state, const TaskStream& stream, std::size_t task, const LabeledSet& pool,
                  const TrainConfig& cfg, bool joint, const EpochObserver& observer) {
  const std::size_t n = pool.size();
  const std::size_t batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = batches_per_epoch * cfg.epochs;
  ad::Sgd sgd(ad::SgdOptions{cfg.lr, cfg.momentum, cfg.weight_decay});
  const bool use_neighbors = !joint && cfg.uses_teacher() && task > 0 && cfg.effective_w0() < 1.0;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    NeighborPlan plan;
    if (use_neighbors) {
      if (cfg.k >= n) throw ConfigError("k", "must be smaller than the task's training-set size");
      std::mt19937_64 nrng = make_rng(cfg.seed, RngPurpose::neighbor_random, task, epoch);
      plan = select_variant(features_of(state.teacher, pool.x), cfg.k, cfg.neighbor_variant, pool.y, cfg.w0, nrng,
                            cfg.threads);
      state.diagnostics.neighbor_fallbacks += plan.fallbacks;
      if (cfg.dump_neighbors && epoch + 1 == cfg.epochs) state.neighbors_csv = neighbors_csv(plan, pool.y);
    } else {
      plan = self_only_plan(n);
    }

    std::mt19937_64 shuffle_rng = make_rng(cfg.seed, RngPurpose::shuffle, joint ? stream.num_tasks() : task, epoch);
    std::mt19937_64 buffer_rng = make_rng(cfg.seed, RngPurpose::buffer_sample, task, epoch);
    const auto order = shuffled(n, shuffle_rng);
    LossBreakdown epoch_sum;
    std::size_t batches = 0;

    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
      std::vector<int> ys;
      ys.reserve(batch.size());
      for (std::size_t id : batch) ys.push_back(pool.y[id]);
      const auto rows = label_rows(state.student.registry, ys);

      ad::Tape tape;
      BoundModel student = bind(tape, state.student, true);
      EffectNewTerms fresh = effect_new_loss(student, pool.x, batch, rows, plan);
      EffectOldTerms old;
      old.kl = old.buffer_ce = old.buffer_logit_l2 = tape.constant(Tensor::scalar(0.0));
      Var total = fresh.loss;
      Tensor batch_x;

      if (!joint && cfg.uses_teacher()) {
        LabeledSet buf;
        if (!state.buffer.empty()) {
          buf = state.buffer.sample_batch(cfg.effective_buffer_batch(), buffer_rng);
          ++state.diagnostics.buffer_reads;
        }
        batch_x = ad::gather_rows(pool.x, batch);
        old = effect_old_loss(student, fresh.batch_logits, state.teacher, batch_x, buf, cfg.kl_direction);
        total = total_loss(fresh.loss, old, cfg.effective_alpha());
      } else if (!joint && cfg.uses_buffer() && !state.buffer.empty()) {
        LabeledSet buf = state.buffer.sample_batch(cfg.effective_buffer_batch(), buffer_rng);
        ++state.diagnostics.buffer_reads;
        Var logits = forward_logits(student, forward_features(student, tape.constant(buf.x)));
        old.buffer_ce = plain_cross_entropy(logits, label_rows(state.student.registry, buf.y));
        old.has_buffer = true;
        total = ad::add(total, old.buffer_ce);
      }

      tape.backward(total);
      const LossBreakdown b = breakdown(fresh.loss, old, total);
      if (!std::isfinite(b.total)) throw std::runtime_error("training diverged: non-finite loss");
      if (cfg.check_identities && cfg.uses_teacher() && !joint) {
        check_identities(cfg, state.student, batch_x, rows, b, old.has_old, old.has_buffer);
        ++state.diagnostics.identity_checks;
      }
      const std::vector<Var> vars = student.trainable();
      const std::vector<Tensor> grads = tape.gradients(vars);
      std::vector<Tensor*> params = state.student.parameters();
      sgd.set_lr(lr_at(cfg, step, total_steps));
      sgd.step(params, grads);
      ++step;
      ++state.diagnostics.sgd_steps;
      state.diagnostics.probability_floor_hits += tape.diagnostics().probability_floor_hits;
      state.diagnostics.zero_norm_hits += tape.diagnostics().zero_norm_hits;
      add_into(epoch_sum, b);
      ++batches;
    }

    divide(epoch_sum, static_cast<double>(batches));
    state.losses.push_back(EpochLoss{joint ? 0 : task, epoch, epoch_sum});
    if (!joint && cfg.uses_teacher()) ema_update(state.teacher, state.student, cfg.beta);
    if (observer) observer(state, task, epoch);
  }
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::SEQ: return "SEQ";
    case Method::REPLAY: return "REPLAY";
    case Method::DERPP: return "DERPP";
    case Method::MTL: return "MTL";
    case Method::BACE: return "BACE";
    case Method::BACE_W1: return "BACE_W1";
    case Method::BACE_A0: return "BACE_A0";
    case Method::BACE_W1_A0: return "BACE_W1_A0";
  }
  return "BACE";
}

Method parse_method(const std::string& s) {
  std::string up;
  for (char c : s) up.push_back(c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  if (up == "DER++") up = "DERPP";
  for (Method m : kMethods)
    if (to_string(m) == up) return m;
  throw ConfigError("method", "unknown method '" + s + "'");
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs", "must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr", "must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum", "must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay", "must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size", "must be positive");
  if (k == 0) throw ConfigError("k", "must be positive");
  if (!(w0 > 0.0 && w0 <= 1.0)) throw ConfigError("w0", "must lie in (0, 1]");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha", "must be non-negative");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta", "must lie in [0, 1]");
  if (threads == 0) throw ConfigError("threads", "must be positive");
  if (probe.max_epochs == 0) throw ConfigError("probe.max_epochs", "must be positive");
  if (!(probe.lr > 0.0)) throw ConfigError("probe.lr", "must be positive");
  if (!(probe.plateau >= 0.0)) throw ConfigError("probe.plateau", "must be non-negative");
  encoder.validate();
  classifier.validate();
}

bool TrainConfig::uses_teacher() const noexcept {
  switch (method) {
    case Method::DERPP:
    case Method::BACE:
    case Method::BACE_W1:
    case Method::BACE_A0:
    case Method::BACE_W1_A0: return true;
    default: return false;
  }
}

bool TrainConfig::uses_buffer() const noexcept { return method != Method::SEQ && method != Method::MTL; }

bool TrainConfig::uses_logit_l2() const noexcept { return uses_teacher(); }

double TrainConfig::effective_w0() const noexcept {
  return method == Method::BACE || method == Method::BACE_A0 ? w0 : 1.0;
}

double TrainConfig::effective_alpha() const noexcept {
  return method == Method::BACE || method == Method::BACE_W1 ? alpha : 0.0;
}

TrainConfig desk_config(Method method, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.method = method;
  cfg.seed = seed;
  cfg.batch_size = 32;
  return cfg;
}

RunState init_run(const TaskStream& stream, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.encoder.input_dim != stream.input_dim) {
    throw ConfigError("encoder.input_dim", "is " + std::to_string(cfg.encoder.input_dim) + " but the stream has " +
                                               std::to_string(stream.input_dim));
  }
  RunState state;
  std::mt19937_64 rng = make_rng(cfg.seed, RngPurpose::init);
  state.student = init_model(cfg.encoder, cfg.classifier, rng);
  state.teacher = state.student;
  state.buffer = RehearsalBuffer(cfg.uses_buffer() ? cfg.buffer_capacity : 0);
  state.matrix.before.assign(stream.num_tasks(), std::numeric_limits<double>::quiet_NaN());
  state.matrix.random_baseline.assign(stream.num_tasks(), std::numeric_limits<double>::quiet_NaN());
  return state;
}

void train_task(RunState& state, const TaskStream& stream, std::size_t task, const TrainConfig& cfg,
                const EpochObserver& observer) {
  cfg.validate();
  if (task != state.tasks_done || task >= stream.num_tasks()) {
    throw ContractError("train_task: task " + std::to_string(task) + " is not the next unseen task");
  }
  if (cfg.method == Method::MTL) throw ContractError("train_task: MTL trains jointly through run_method");
  const Task& t = stream.tasks[task];
  const Tensor rows = expansion_rows(cfg, task, t.classes.size());
  expand_classifier(state.teacher, t.classes, rows);
  if (cfg.uses_teacher()) {
    state.student = clone_state(state.teacher);
  } else {
    expand_classifier(state.student, t.classes, rows);
  }
  if (task > 0) state.matrix.before[task] = accuracy(state.student, t.test);

  train_epochs(state, stream, task, t.train, cfg, false, observer);

  if (!cfg.uses_teacher()) state.teacher = state.student;
  if (cfg.uses_buffer()) state.buffer.update_after_task(t, state.student);
  ++state.tasks_done;
}

void summarize_metrics(RunReport& report) {
  const AccuracyMatrix& m = report.matrix;
  const std::size_t T = m.num_tasks();
  report.a_last.reset();
  report.fgt.reset();
  report.fwd.reset();
  if (T > 0 && m.row_complete(T - 1)) report.a_last = avg_accuracy(m, T - 1);
  bool all_rows = T >= 2;
  for (std::size_t t = 0; t < T; ++t) all_rows = all_rows && m.row_complete(t);
  if (all_rows) report.fgt = forgetting(m);
  if (all_rows) {
    bool have = m.before.size() >= T && m.random_baseline.size() >= T;
    for (std::size_t i = 1; have && i < T; ++i)
      have = std::isfinite(m.before[i]) && std::isfinite(m.random_baseline[i]);
    if (have) report.fwd = forward_transfer(m);
  }
}

RunReport run_method(const TaskStream& stream, const TrainConfig& cfg, const CheckpointHook& on_checkpoint) {
  stream.validate();
  RunState state = init_run(stream, cfg);
  RunReport report;
  report.config = cfg;
  report.seed = cfg.seed;
  report.stream_manifest = stream.manifest();
  const std::size_t T = stream.num_tasks();

  for (std::size_t i = 0; i < T; ++i) {
    std::mt19937_64 rng = make_rng(cfg.seed, RngPurpose::random_baseline, i);
    ModelState fresh = init_model(cfg.encoder, cfg.classifier, rng);
    for (std::size_t t = 0; t <= i; ++t) expand_classifier(fresh, stream.tasks[t].classes, rng);
    state.matrix.random_baseline[i] = accuracy(fresh, stream.tasks[i].test);
  }

  auto checkpoint = [&](std::size_t t) {
    const auto& row = state.matrix.rows[t];
    const double observed = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size());
    if (cfg.probing) {
      const ProbeResult p = probing_accuracy(state.student, stream, t, cfg.probe, cfg.seed);
      report.probing.push_back(ProbePoint{t, observed, p.accuracy});
    }
    if (cfg.tracking) report.tracking.push_back(track_checkpoint(state.student, stream, t));
    if (on_checkpoint) on_checkpoint(state, t);
  };

  try {
    if (cfg.method == Method::MTL) {
      const auto start = std::chrono::steady_clock::now();
      for (std::size_t t = 0; t < T; ++t) {
        const Tensor rows = expansion_rows(cfg, t, stream.tasks[t].classes.size());
        expand_classifier(state.student, stream.tasks[t].classes, rows);
      }
      train_epochs(state, stream, 0, stream.train_upto(T - 1), cfg, true, {});
      state.teacher = state.student;
      state.tasks_done = T;
      state.matrix.rows.assign(T, {});
      state.matrix.rows[T - 1] = evaluate(state.student, stream, T - 1);
      report.task_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
      checkpoint(T - 1);
    } else {
      for (std::size_t t = 0; t < T; ++t) {
        const auto start = std::chrono::steady_clock::now();
        train_task(state, stream, t, cfg);
        state.matrix.rows.push_back(evaluate(state.student, stream, t));
        report.task_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
        checkpoint(t);
      }
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    report.partial = true;
    report.error = e.what();
  }

  report.matrix = state.matrix;
  report.losses = state.losses;
  report.diagnostics = state.diagnostics;
  summarize_metrics(report);
  return report;
}

}  // namespace bace
