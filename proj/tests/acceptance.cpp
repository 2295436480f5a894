// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
// when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bace/errors.hpp"
#include "bace/report.hpp"
#include "bace/trainer.hpp"
#include "test_util.hpp"

using namespace bace;
using bace::testing::brute_force_knn;
using bace::testing::greedy_orderings;
using bace::testing::model_grad_error;
using bace::testing::random_tensor;
using bace::testing::toy_model;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool ok = true;
  std::string detail;

  void check(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

int failures = 0;

void report(int id, const std::string& name, const Verdict& v, const std::string& summary) {
  std::printf("ACCEPTANCE %d %s: %s | %s%s%s\n", id, v.ok ? "PASS" : "FAIL", name.c_str(), summary.c_str(),
              v.detail.empty() ? "" : " | failed: ", v.detail.c_str());
  std::fflush(stdout);
  if (!v.ok) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double softmax_at(const Tensor& z, std::size_t r, std::size_t c) {
  double mx = -INFINITY, s = 0.0;
  for (std::size_t j = 0; j < z.cols(); ++j) mx = std::max(mx, z.at(r, j));
  for (std::size_t j = 0; j < z.cols(); ++j) s += std::exp(z.at(r, j) - mx);
  return std::exp(z.at(r, c) - mx) / s;
}

// Five new-class samples of a 3-class toy (classes {0,1} old, {2} new); the
// neighbor pool adds four more so that K = 5 fits.
struct Toy {
  ModelState student, teacher;
  Tensor pool_x;
  std::vector<int> pool_y;
  std::vector<std::size_t> batch{0, 1, 2, 3, 4};
  std::vector<std::size_t> rows;
  NeighborPlan plan;
  LabeledSet buffer;
};

Toy make_toy(double w0, std::uint64_t seed) {
  Toy t;
  t.teacher = toy_model(seed);
  t.student = toy_model(seed + 100);
  t.pool_x = random_tensor({9, 4}, seed + 1);
  t.pool_y.assign(9, 2);
  std::mt19937_64 rng(seed);
  t.plan = select_variant(features_of(t.teacher, t.pool_x), 5, NeighborVariant::standard, t.pool_y, w0, rng);
  t.rows = label_rows(t.student.registry, std::vector<int>(5, 2));
  t.buffer.x = random_tensor({5, 4}, seed + 2);
  t.buffer.y = {0, 1, 0, 1, 1};
  return t;
}

void criterion_gradients() {
  const auto t0 = Clock::now();
  Verdict v;
  double worst = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    Toy t = make_toy(0.95, seed);
    const Tensor bx = ad::gather_rows(t.pool_x, t.batch);
    const double e_new = model_grad_error(t.student, [&](const BoundModel& b) {
      return effect_new_loss(b, t.pool_x, t.batch, t.rows, t.plan).loss;
    });
    auto old_term = [&](int which) {
      return model_grad_error(t.student, [&](const BoundModel& b) {
        Var z = forward_logits(b, forward_features(b, b.classifier.tape().constant(bx)));
        EffectOldTerms eo = effect_old_loss(b, z, t.teacher, bx, t.buffer);
        return which == 0 ? eo.kl : which == 1 ? eo.buffer_ce : eo.buffer_logit_l2;
      });
    };
    const double e_kl = old_term(0), e_ce = old_term(1), e_l2 = old_term(2);
    for (auto [name, e] : {std::pair{"effect_new", e_new}, {"kl", e_kl}, {"buffer_ce", e_ce}, {"buffer_l2", e_l2}}) {
      worst = std::max(worst, e);
      v.check(e < 1e-4, std::string(name) + " seed " + std::to_string(seed) + " rel err " + fmt("%.3g", e));
    }
  }
  const double secs = seconds_since(t0);
  v.check(secs < 10.0, "runtime " + fmt("%.2f s", secs));
  report(1, "gradient suite", v, "worst rel err " + fmt("%.2e", worst) + ", " + fmt("%.2f s", secs));
}

void criterion_oracles() {
  Verdict v;
  std::mt19937_64 rng(2024);
  std::size_t largest = 0;
  for (int inst = 0; inst < 200; ++inst) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 1000)(rng);
    const std::size_t d = std::uniform_int_distribution<std::size_t>(1, 64)(rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, std::min<std::size_t>(n - 1, 10))(rng);
    Tensor f = random_tensor({n, d}, rng());
    if (inst % 4 == 0)
      for (double& x : f.values()) x = std::round(x);  // lattice points: many exact ties
    largest = std::max(largest, n);
    const NeighborIndex idx = build_index(f, k);
    const auto oracle = brute_force_knn(f, k);
    bool same = true;
    for (std::size_t i = 0; i < n && same; ++i) {
      const auto got = idx.neighbors(i);
      same = std::equal(got.begin(), got.end(), oracle[i].begin());
    }
    v.check(same, "knn instance " + std::to_string(inst));
    // every weight vector built from this index stays on the simplex
    for (std::size_t i = 0; i < n; ++i) {
      const WeightVector w = neighbor_weights(idx.neighbor_distances(i), 0.9);
      bool ok = std::abs(w.total() - 1.0) <= 1e-9 && w.self >= 0.0;
      for (double x : w.neighbors) ok = ok && x >= 0.0;
      if (!ok) {
        v.check(false, "simplex instance " + std::to_string(inst));
        break;
      }
    }
  }

  for (std::uint64_t s = 0; s < 60; ++s) {
    const std::size_t n = 1 + s % 5;
    const Tensor f = random_tensor({n, 3}, 500 + s);
    // first pick: nearest row to the mean, near-ties to the lower index
    std::size_t best = 0;
    double best_d2 = std::pow(bace::testing::dist_to_mean(f, {}, 0), 2);
    for (std::size_t i = 1; i < n; ++i) {
      const double d2 = std::pow(bace::testing::dist_to_mean(f, {}, i), 2);
      if (d2 < best_d2 && std::abs(d2 - best_d2) > 1e-12 * best_d2) {
        best = i;
        best_d2 = d2;
      }
    }
    v.check(herding_select(f, 1).front() == best, "herding first pick seed " + std::to_string(s));
    const auto orders = greedy_orderings(f);
    v.check(orders.size() == 1 && herding_select(f, n) == orders.front(), "herding order seed " + std::to_string(s));
  }

  const double dd[] = {1.0, 3.0};
  const WeightVector w = neighbor_weights(dd, 0.95);
  v.check(w.self == 0.95, "hand example self " + fmt("%.17g", w.self));
  v.check(std::abs(w.neighbors[0] - 0.0375) <= 1e-15 && std::abs(w.neighbors[1] - 0.0125) <= 1e-15,
          "hand example " + fmt("%.17g", w.neighbors[0]) + ", " + fmt("%.17g", w.neighbors[1]));
  report(2, "exactness oracles", v,
         "200 knn instances (n up to " + std::to_string(largest) + "), 60 herding cases, weights (" +
             fmt("%.4g", w.self) + ", " + fmt("%.4g", w.neighbors[0]) + ", " + fmt("%.4g", w.neighbors[1]) + ")");
}

void criterion_identities() {
  Verdict v;
  double worst = 0.0;
  for (std::uint64_t seed : {4, 5, 6}) {
    Toy t = make_toy(1.0, seed);
    const Tensor bx = ad::gather_rows(t.pool_x, t.batch);
    const Tensor z = logits_of(t.student, bx);
    double ce = 0.0;
    for (std::size_t r = 0; r < t.rows.size(); ++r) ce -= std::log(softmax_at(z, r, t.rows[r]));
    ce /= static_cast<double>(t.rows.size());
    const Tensor zb = logits_of(t.student, t.buffer.x), tb = logits_of(t.teacher, t.buffer.x);
    double bce = 0.0, l2 = 0.0;
    for (std::size_t r = 0; r < t.buffer.size(); ++r) {
      bce -= std::log(softmax_at(zb, r, static_cast<std::size_t>(t.buffer.y[r])));
      for (std::size_t c = 0; c < 2; ++c) l2 += (zb.at(r, c) - tb.at(r, c)) * (zb.at(r, c) - tb.at(r, c));
    }
    bce /= static_cast<double>(t.buffer.size());
    l2 /= static_cast<double>(t.buffer.size());

    ad::Tape tape;
    BoundModel b = bind(tape, t.student, true);
    EffectNewTerms en = effect_new_loss(b, t.pool_x, t.batch, t.rows, t.plan);
    EffectOldTerms eo = effect_old_loss(b, en.batch_logits, t.teacher, bx, t.buffer);
    const double d_ce = std::abs(en.loss.value().item() - ce);
    const double d_der = std::abs(total_loss(en.loss, eo, 0.0).value().item() - (ce + bce + l2));
    worst = std::max({worst, d_ce, d_der});
    v.check(d_ce < 1e-12, "W0=1 vs CE " + fmt("%.3g", d_ce));
    v.check(d_der < 1e-12, "W0=1,alpha=0 vs DER++ total " + fmt("%.3g", d_der));

    // first task: no old classes, so the total is the CE node itself
    ModelState first = t.student;
    first.registry = ClassRegistry{};
    const int ids[] = {0, 1, 2};
    first.registry.add_task(ids);
    ad::Tape tape1;
    BoundModel b1 = bind(tape1, first, true);
    EffectNewTerms en1 = effect_new_loss(b1, t.pool_x, t.batch, t.rows, self_only_plan(9));
    EffectOldTerms eo1 = effect_old_loss(b1, en1.batch_logits, first, bx, t.buffer);
    const double d_t1 = std::abs(total_loss(en1.loss, eo1, 1.0).value().item() - ce);
    worst = std::max(worst, d_t1);
    v.check(d_t1 < 1e-12, "task-1 total vs CE " + fmt("%.3g", d_t1));

    ModelState keep = t.teacher;
    ema_update(keep, t.student, 1.0);
    v.check(keep == t.teacher, "beta=1 moved the teacher");
    ema_update(keep, t.student, 0.0);
    v.check(keep.weights == t.student.weights && keep.classifier == t.student.classifier, "beta=0 not a copy");
  }

  // the same identities asserted inside the live loop
  SyntheticConfig sc;
  sc.n_classes = 6;
  sc.n_tasks = 3;
  sc.dim = 8;
  sc.train_per_class = 20;
  sc.test_per_class = 5;
  const TaskStream s = generate_gaussian_stream(sc);
  std::size_t checks = 0;
  for (Method m : {Method::BACE_W1, Method::BACE_W1_A0, Method::BACE}) {
    TrainConfig cfg = desk_config(m, 0);
    cfg.encoder.input_dim = 8;
    cfg.epochs = 2;
    cfg.probing = cfg.tracking = false;
    cfg.check_identities = true;
    const RunReport r = run_method(s, cfg);
    v.check(!r.partial, to_string(m) + " live check: " + r.error);
    checks += r.diagnostics.identity_checks;
  }
  report(3, "reduction identities", v,
         "max |delta| " + fmt("%.2e", worst) + ", " + std::to_string(checks) + " live-batch checks");
}

AccuracyMatrix hand_matrix(std::vector<std::vector<double>> rows, std::vector<double> before,
                           std::vector<double> random) {
  AccuracyMatrix m;
  m.rows = std::move(rows);
  m.before = std::move(before);
  m.random_baseline = std::move(random);
  return m;
}

void criterion_metrics() {
  Verdict v;
  const double nan = std::nan("");
  struct Case {
    AccuracyMatrix m;
    std::vector<double> a;
    double fgt, fwd;
  };
  // dyadic entries keep every sum exact, so equality is exact
  const std::vector<Case> cases = {
      {hand_matrix({{0.75}, {0.5, 1.0}, {0.25, 0.5, 0.75}}, {nan, 0.5, 0.25}, {nan, 0.25, 0.25}),
       {0.75, 0.75, 0.5}, 0.5, 0.125},
      {hand_matrix({{0.25}, {0.5, 0.5}, {0.75, 0.75, 0.75}}, {nan, 0.5, 0.5}, {nan, 0.5, 0.5}),
       {0.25, 0.5, 0.75}, -0.25, 0.0},
      {hand_matrix({{0.5}, {0.5, 0.25}, {0.5, 0.25, 0.75}}, {nan, 0.75, 0.5}, {nan, 0.25, 0.25}),
       {0.5, 0.375, 0.5}, 0.0, 0.375},
  };
  int idx = 0;
  for (const Case& c : cases) {
    ++idx;
    for (std::size_t t = 0; t < 3; ++t)
      v.check(avg_accuracy(c.m, t) == c.a[t], "matrix " + std::to_string(idx) + " A_" + std::to_string(t));
    v.check(forgetting(c.m) == c.fgt, "matrix " + std::to_string(idx) + " FGT " + fmt("%.17g", forgetting(c.m)));
    v.check(forward_transfer(c.m) == c.fwd,
            "matrix " + std::to_string(idx) + " FWD " + fmt("%.17g", forward_transfer(c.m)));
  }
  report(4, "metric oracle", v, "3 matrices, FGT 0.5 / -0.25 / 0, FWD 0.125 / 0 / 0.375");
}

struct MethodRuns {
  std::vector<RunReport> reports;
  double seconds = 0.0;

  double mean(const std::function<double(const RunReport&)>& f) const {
    double s = 0.0;
    for (const auto& r : reports) s += f(r);
    return s / static_cast<double>(reports.size());
  }
};

TaskStream desk_stream(std::uint64_t seed) {
  SyntheticConfig c = *parse_stream_name("synth-10c5t");
  c.seed = seed;
  return generate_gaussian_stream(c);
}

RunReport desk_run(Method m, std::uint64_t seed, unsigned threads = 1) {
  TrainConfig cfg = desk_config(m, seed);
  cfg.threads = threads;
  return run_method(desk_stream(seed), cfg);
}

const std::vector<std::uint64_t> kSeeds{0, 1, 2, 3, 4};

}  // namespace

int main() {
  criterion_gradients();
  criterion_oracles();
  criterion_identities();
  criterion_metrics();

  const std::vector<Method> methods{Method::SEQ, Method::REPLAY, Method::BACE, Method::BACE_A0, Method::BACE_W1,
                                    Method::MTL};
  std::map<Method, MethodRuns> runs;
  bool run_failed = false;
  for (Method m : methods) {
    const auto t0 = Clock::now();
    for (std::uint64_t s : kSeeds) {
      runs[m].reports.push_back(desk_run(m, s));
      const RunReport& r = runs[m].reports.back();
      if (r.partial || !r.a_last) {
        run_failed = true;
        std::printf("run %s seed %llu failed: %s\n", to_string(m).c_str(), static_cast<unsigned long long>(s),
                    r.error.c_str());
      }
    }
    runs[m].seconds = seconds_since(t0);
    std::printf("# %-10s A_last %6.2f  FGT %6.2f  (%.1f s)\n", to_string(m).c_str(),
                100 * runs[m].mean([](const RunReport& r) { return r.a_last.value_or(0.0); }),
                100 * runs[m].mean([](const RunReport& r) { return r.fgt.value_or(0.0); }), runs[m].seconds);
  }
  auto a_last = [&](Method m) { return runs[m].mean([](const RunReport& r) { return r.a_last.value_or(0.0); }); };
  auto fgt = [&](Method m) { return runs[m].mean([](const RunReport& r) { return r.fgt.value_or(0.0); }); };

  {
    Verdict v;
    v.check(!run_failed, "a run failed");
    const double seq = a_last(Method::SEQ), rep = a_last(Method::REPLAY), bace = a_last(Method::BACE);
    const double secs = runs[Method::SEQ].seconds + runs[Method::REPLAY].seconds + runs[Method::BACE].seconds;
    v.check(seq < rep, "SEQ >= REPLAY");
    v.check(rep <= bace, "REPLAY > BACE");
    v.check(bace - rep >= 0.02, "BACE - REPLAY = " + fmt("%.2f points", 100 * (bace - rep)));
    v.check(fgt(Method::BACE) <= fgt(Method::REPLAY), "BACE FGT above REPLAY");
    v.check(secs < 300.0, "runtime " + fmt("%.1f s", secs));
    report(5, "end-to-end ordering", v,
           "A_last SEQ " + fmt("%.2f", 100 * seq) + " < REPLAY " + fmt("%.2f", 100 * rep) + " <= BACE " +
               fmt("%.2f", 100 * bace) + "; FGT REPLAY " + fmt("%.2f", 100 * fgt(Method::REPLAY)) + " vs BACE " +
               fmt("%.2f", 100 * fgt(Method::BACE)) + "; " + fmt("%.1f s", secs));
  }

  {
    Verdict v;
    auto final_gap = [](const RunReport& r) {
      return r.probing.empty() ? NAN : r.probing.back().probing - r.probing.back().observed;
    };
    const double seq_gap = runs[Method::SEQ].mean(final_gap), mtl_gap = runs[Method::MTL].mean(final_gap);
    v.check(seq_gap >= 0.10, "SEQ gap " + fmt("%.2f points", 100 * seq_gap));
    v.check(std::abs(mtl_gap) <= 0.02, "MTL gap " + fmt("%.2f points", 100 * mtl_gap));
    report(6, "probing pattern", v,
           "probing - observed at final checkpoint: SEQ " + fmt("%.2f", 100 * seq_gap) + ", MTL " +
               fmt("%.2f", 100 * mtl_gap) + " points");

    // Probing should not trail observed accuracy by more than a point anywhere.
    std::size_t below = 0, total = 0;
    double worst = INFINITY;
    for (Method m : methods) {
      for (const auto& r : runs[m].reports) {
        for (const auto& p : r.probing) {
          ++total;
          worst = std::min(worst, p.probing - p.observed);
          if (p.probing < p.observed - 0.01) ++below;
        }
      }
    }
    std::printf("# probing >= observed - 1 point at %zu/%zu checkpoints (worst %.2f points)\n", total - below, total,
                100 * worst);
  }

  {
    Verdict v;
    std::string summary;
    for (Method m : methods) {
      const auto& rs = runs[m].reports;
      const std::size_t last = rs.front().tracking.back().checkpoint;
      std::size_t violations = 0, compared = 0;
      for (std::size_t task = 0; task < last; ++task) {
        // seed mean of task `task`'s distance when just learned vs at the end
        double just = 0.0, end = 0.0;
        bool have = false;
        for (const auto& r : rs) {
          for (const auto& rec : r.tracking) {
            if (rec.checkpoint == task) {
              just += rec.task_mean[task];
              have = true;
            }
          }
          end += r.tracking.back().task_mean[task];
        }
        if (!have) continue;  // never checkpointed (joint training)
        ++compared;
        if (!(just < end)) {
          ++violations;
          v.check(false, to_string(m) + " task " + std::to_string(task) + " " + fmt("%.4f", just / rs.size()) +
                             " just learned vs " + fmt("%.4f", end / rs.size()) + " final");
        }
      }
      summary += to_string(m) + " " + std::to_string(compared - violations) + "/" + std::to_string(compared) + "  ";
    }
    auto omn = [&](Method m) {
      return runs[m].mean([](const RunReport& r) { return r.tracking.back().old_minus_new; });
    };
    v.check(omn(Method::BACE) < omn(Method::REPLAY), "BACE old-new " + fmt("%.4f", omn(Method::BACE)) +
                                                         " not below REPLAY " + fmt("%.4f", omn(Method::REPLAY)));
    report(7, "tracking pattern", v,
           "tasks lower when just learned: " + summary + "| final old-new BACE " + fmt("%.4f", omn(Method::BACE)) +
               " vs REPLAY " + fmt("%.4f", omn(Method::REPLAY)));
  }

  {
    Verdict v;
    const double b = a_last(Method::BACE), a0 = a_last(Method::BACE_A0), w1 = a_last(Method::BACE_W1);
    v.check(b >= a0, "BACE below alpha=0");
    v.check(b >= w1, "BACE below W0=1");
    report(8, "ablation monotonicity", v,
           "A_last BACE " + fmt("%.2f", 100 * b) + ", alpha=0 " + fmt("%.2f", 100 * a0) + ", W0=1 " +
               fmt("%.2f", 100 * w1));
  }

  {
    Verdict v;
    const RunReport& ref = runs[Method::BACE].reports.front();
    auto bitwise = [](const AccuracyMatrix& a, const AccuracyMatrix& b) {
      if (a.rows.size() != b.rows.size()) return false;
      for (std::size_t t = 0; t < a.rows.size(); ++t) {
        if (a.rows[t].size() != b.rows[t].size()) return false;
        if (std::memcmp(a.rows[t].data(), b.rows[t].data(), a.rows[t].size() * sizeof(double)) != 0) return false;
      }
      return a.before.size() == b.before.size() &&
             std::memcmp(a.before.data(), b.before.data(), a.before.size() * sizeof(double)) == 0;
    };
    for (unsigned threads : {1u, 2u, 4u}) {
      const RunReport again = desk_run(Method::BACE, 0, threads);
      v.check(bitwise(again.matrix, ref.matrix), "threads " + std::to_string(threads) + " matrix differs");
      v.check(again.losses.size() == ref.losses.size() &&
                  again.losses.back().mean.total == ref.losses.back().mean.total,
              "threads " + std::to_string(threads) + " losses differ");
    }
    const RunReport mtl = desk_run(Method::MTL, 0, 1);
    v.check(bitwise(mtl.matrix, runs[Method::MTL].reports.front().matrix), "MTL rerun differs");
    report(9, "determinism", v, "BACE seed 0 rerun with 1/2/4 neighbor threads, MTL rerun: bit-identical");
  }

  std::printf("ACCEPTANCE SUMMARY: %d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
