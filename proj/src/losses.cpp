#include "bace/losses.hpp"

#include <cmath>
#include <unordered_map>

#include "bace/errors.hpp"

namespace bace {

std::string to_string(KlDirection d) {
  return d == KlDirection::teacher_student ? "teacher_student" : "student_teacher";
}

KlDirection parse_kl_direction(const std::string& s) {
  if (s == "teacher_student") return KlDirection::teacher_student;
  if (s == "student_teacher") return KlDirection::student_teacher;
  throw ConfigError("kl_direction", "expected teacher_student or student_teacher, got '" + s + "'");
}

std::vector<std::size_t> label_rows(const ClassRegistry& registry, std::span<const int> labels) {
  std::vector<std::size_t> rows;
  rows.reserve(labels.size());
  for (int y : labels) rows.push_back(registry.row_of(y));
  return rows;
}

Var plain_cross_entropy(Var logits, std::span<const std::size_t> label_rows) {
  return ad::cross_entropy(ad::softmax(logits), label_rows);
}

EffectNewTerms effect_new_loss(const BoundModel& student, const Tensor& pool_x, std::span<const std::size_t> batch,
                               std::span<const std::size_t> label_rows, const NeighborPlan& plan) {
  if (batch.size() != label_rows.size()) throw DimensionError("effect_new_loss: one label per batch sample");
  if (batch.empty()) throw DomainError("effect_new_loss: empty batch");
  ad::Tape& tape = student.classifier.tape();

  // Forward every distinct sample once: the batch first, then neighbors.
  std::vector<std::size_t> rows;
  std::unordered_map<std::size_t, std::size_t> slot;
  auto place = [&](std::size_t id) {
    auto [it, inserted] = slot.emplace(id, rows.size());
    if (inserted) rows.push_back(id);
    return it->second;
  };
  std::vector<std::size_t> self_slot;
  for (std::size_t id : batch) self_slot.push_back(place(id));

  ad::RowMixture mixture(batch.size());
  bool any_neighbor = false;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const std::size_t id = batch[b];
    if (id >= plan.size()) throw DimensionError("effect_new_loss: batch index outside the neighbor plan");
    const WeightVector& w = plan.weights[id];
    if (std::abs(w.total() - 1.0) > 1e-9 || w.self < 0.0) {
      throw ContractError("effect_new_loss: weights of sample " + std::to_string(id) + " leave the simplex");
    }
    mixture[b].emplace_back(self_slot[b], w.self);
    for (std::size_t j = 0; j < plan.ids[id].size(); ++j) {
      if (w.neighbors[j] < 0.0) throw ContractError("effect_new_loss: negative neighbor weight");
      if (w.neighbors[j] == 0.0) continue;
      mixture[b].emplace_back(place(plan.ids[id][j]), w.neighbors[j]);
      any_neighbor = true;
    }
  }

  Var x = tape.constant(ad::gather_rows(pool_x, rows));
  Var logits = forward_logits(student, forward_features(student, x));
  Var batch_logits = ad::gather_rows(logits, self_slot);
  if (!any_neighbor) {
    // Every weight vector is (1, 0, …): the joint score is the sample's own score.
    return {plain_cross_entropy(batch_logits, label_rows), batch_logits};
  }
  Var scores = ad::softmax(logits);
  Var joint = ad::mix_rows(scores, mixture);
  return {ad::cross_entropy(joint, label_rows), batch_logits};
}

EffectOldTerms effect_old_loss(const BoundModel& student, Var student_batch_logits, const ModelState& teacher,
                               const Tensor& batch_x, const LabeledSet& buffer_batch, KlDirection direction) {
  ad::Tape& tape = student.classifier.tape();
  const ModelState& s = *student.state;
  if (!(s.registry == teacher.registry)) throw ContractError("effect_old_loss: teacher/student registries differ");
  EffectOldTerms out;
  const std::vector<std::size_t> old = s.registry.old_rows();
  out.has_old = !old.empty();
  out.has_buffer = out.has_old && buffer_batch.size() > 0;
  const Var zero = tape.constant(Tensor::scalar(0.0));
  out.kl = out.buffer_ce = out.buffer_logit_l2 = zero;
  if (!out.has_old) return out;

  Var teacher_logits = tape.constant(logits_of(teacher, batch_x));
  Var t_scores = ad::softmax(teacher_logits, old);
  Var s_scores = ad::softmax(student_batch_logits, old);
  out.kl = direction == KlDirection::teacher_student ? ad::kl_div(t_scores, s_scores) : ad::kl_div(s_scores, t_scores);

  if (!out.has_buffer) return out;
  Var buf_x = tape.constant(buffer_batch.x);
  Var buf_logits = forward_logits(student, forward_features(student, buf_x));
  const auto buf_rows = label_rows(s.registry, buffer_batch.y);
  out.buffer_ce = plain_cross_entropy(buf_logits, buf_rows);
  Var teacher_buf = tape.constant(logits_of(teacher, buffer_batch.x));
  Var diff = ad::squared_l2(ad::select_columns(buf_logits, old), ad::select_columns(teacher_buf, old));
  out.buffer_logit_l2 = ad::scale(diff, 1.0 / static_cast<double>(buffer_batch.size()));
  return out;
}

Var total_loss(Var effect_new, const EffectOldTerms& old, double alpha) {
  if (!(alpha >= 0.0)) throw ContractError("total_loss: alpha must be >= 0");
  Var total = effect_new;
  if (old.has_old && alpha != 0.0) total = ad::add(total, ad::scale(old.kl, alpha));
  if (old.has_buffer) {
    total = ad::add(total, old.buffer_ce);
    total = ad::add(total, old.buffer_logit_l2);
  }
  return total;
}

LossBreakdown breakdown(Var effect_new, const EffectOldTerms& old, Var total) {
  LossBreakdown b;
  b.effect_new = effect_new.value().item();
  b.kl_term = old.kl.valid() ? old.kl.value().item() : 0.0;
  b.buffer_ce = old.buffer_ce.valid() ? old.buffer_ce.value().item() : 0.0;
  b.buffer_logit_l2 = old.buffer_logit_l2.valid() ? old.buffer_logit_l2.value().item() : 0.0;
  b.total = total.value().item();
  return b;
}

}  // namespace bace
