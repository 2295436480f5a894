#pragma once

// Joint-score objective for new classes and the distillation + replay
// objective for old classes, composed into one minimized loss.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "bace/autodiff.hpp"
#include "bace/model.hpp"
#include "bace/neighbors.hpp"
#include "bace/taskstream.hpp"

namespace bace {

// Argument order of the old-class KL. teacher_student is KL(teacher ‖ student).
enum class KlDirection { teacher_student, student_teacher };

std::string to_string(KlDirection d);
KlDirection parse_kl_direction(const std::string& s);

struct LossBreakdown {
  double effect_new = 0.0;
  double kl_term = 0.0;
  double buffer_ce = 0.0;
  double buffer_logit_l2 = 0.0;
  double total = 0.0;
};

struct EffectNewTerms {
  Var loss;
  Var batch_logits;  // student logits of the batch rows, [B × C]
};

// Mean over the batch of −ln(Σ_{x̃ ∈ {x}∪N(x)} W(x̃,x)·softmax(student(x̃))[y]).
// `batch` indexes rows of `pool_x` (the current task's training inputs) and
// `plan`; `label_rows` are classifier rows of the targets. Neighbors pass
// through the trainable student, so they receive gradient. Throws
// ContractError when a weight vector is off the simplex by more than 1e-9.
EffectNewTerms effect_new_loss(const BoundModel& student, const Tensor& pool_x, std::span<const std::size_t> batch,
                               std::span<const std::size_t> label_rows, const NeighborPlan& plan);

// Plain mean cross-entropy of softmax(logits) over all columns.
Var plain_cross_entropy(Var logits, std::span<const std::size_t> label_rows);

struct EffectOldTerms {
  Var kl;
  Var buffer_ce;
  Var buffer_logit_l2;
  bool has_old = false;
  bool has_buffer = false;
};

// kl: mean KL between teacher and student old-class-restricted softmax on the
// new batch; buffer_ce: mean CE over all classes on the buffer batch;
// buffer_logit_l2: mean over buffer rows of ‖Z_old(student) − Z_old(teacher)‖².
// The teacher is evaluated as a constant. With no old classes all three are
// zero; with an empty buffer the buffer terms are zero.
EffectOldTerms effect_old_loss(const BoundModel& student, Var student_batch_logits, const ModelState& teacher,
                               const Tensor& batch_x, const LabeledSet& buffer_batch,
                               KlDirection direction = KlDirection::teacher_student);

// effect_new + α·kl + buffer_ce + buffer_logit_l2. Absent terms are skipped
// so the boundary cases reduce to the bare cross-entropy node.
Var total_loss(Var effect_new, const EffectOldTerms& old, double alpha);

LossBreakdown breakdown(Var effect_new, const EffectOldTerms& old, Var total);

// Classifier rows for a list of class ids.
std::vector<std::size_t> label_rows(const ClassRegistry& registry, std::span<const int> labels);

}  // namespace bace
