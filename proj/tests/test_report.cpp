#include <gtest/gtest.h>

#include <filesystem>

#include "bace/errors.hpp"
#include "bace/report.hpp"

using namespace bace;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

SyntheticConfig small_synth() {
  SyntheticConfig c;
  c.n_classes = 6;
  c.n_tasks = 3;
  c.dim = 5;
  c.train_per_class = 15;
  c.test_per_class = 8;
  c.seed = 1;
  return c;
}

TrainConfig small_config(Method m) {
  TrainConfig cfg = desk_config(m, 7);
  cfg.encoder.input_dim = 5;
  cfg.encoder.hidden_dims = {12, 6};
  cfg.encoder.feature_dim = 6;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.k = 3;
  cfg.buffer_capacity = 9;
  cfg.probe.max_epochs = 5;
  return cfg;
}

RunReport small_run(Method m, RunState* final_state = nullptr) {
  const json spec = stream_spec(small_synth());
  const TaskStream s = load_stream(spec);
  RunReport r = run_method(s, small_config(m), [&](const RunState& st, std::size_t) {
    if (final_state) *final_state = st;
  });
  r.stream_config = spec;
  return r;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("bace_report_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(Config, JsonRoundTrip) {
  TrainConfig c = small_config(Method::BACE_A0);
  c.neighbor_variant = NeighborVariant::reverse;
  c.kl_direction = KlDirection::student_teacher;
  c.encoder.nonlinearity = Nonlinearity::tanh;
  EXPECT_EQ(train_config_from_json(to_json(c)), c);
}

std::string field_error(const json& j) {
  try {
    train_config_from_json(j);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "";
}

TEST(Config, FieldLevelErrors) {
  EXPECT_EQ(field_error({{"epochz", 3}}), "epochz");
  EXPECT_EQ(field_error({{"lr", "fast"}}), "lr");
  EXPECT_EQ(field_error({{"method", "ewc"}}), "method");
  EXPECT_EQ(field_error({{"encoder", {{"depth", 3}}}}), "encoder.depth");
  EXPECT_EQ(field_error({{"probe", {{"lr", true}}}}), "probe.lr");
  EXPECT_EQ(field_error({{"k", -2}}), "k");
  EXPECT_EQ(field_error({{"epochs", 4}}), "");
  EXPECT_EQ(train_config_from_json({{"epochs", 4}}).epochs, 4u);
}

TEST(Stream, Specs) {
  EXPECT_EQ(load_stream("synth-4c2t").num_tasks(), 2u);
  EXPECT_THROW(load_stream("mnist"), ConfigError);
  EXPECT_EQ(load_stream(stream_spec(small_synth())), generate_gaussian_stream(small_synth()));
  json bad = stream_spec(small_synth());
  bad["noise"] = 1.0;
  EXPECT_THROW(load_stream(bad), ConfigError);
  EXPECT_THROW(load_stream(json{{"kind", "csv"}, {"train", "x.csv"}}), ConfigError);
}

TEST(Report, JsonRoundTripKeepsSummary) {
  const RunReport r = small_run(Method::BACE);
  const RunReport back = report_from_json(json::parse(report_to_json(r).dump()));
  EXPECT_EQ(summary_json(back).dump(), summary_json(r).dump());
  EXPECT_EQ(*back.a_last, *r.a_last);
  EXPECT_EQ(*back.fgt, *r.fgt);
  EXPECT_TRUE(back.matrix == r.matrix);
  EXPECT_EQ(back.config, r.config);
  EXPECT_EQ(back.probing.size(), r.probing.size());
  EXPECT_EQ(back.losses.size(), r.losses.size());
  EXPECT_EQ(back.losses[3].mean.total, r.losses[3].mean.total);

  // re-summarizing the reloaded matrix reproduces the stored values
  RunReport again = back;
  again.a_last = again.fgt = again.fwd = std::nullopt;
  summarize_metrics(again);
  EXPECT_EQ(summary_json(again).dump(), summary_json(r).dump());
}

TEST(Report, ForgettingFromCsvMatches) {
  const RunReport r = small_run(Method::SEQ);
  const AccuracyMatrix m = matrix_from_csv(matrix_csv(r.matrix));
  EXPECT_TRUE(m == r.matrix);
  EXPECT_EQ(forgetting(m), *r.fgt);
  EXPECT_EQ(forward_transfer(m), *r.fwd);
}

TEST(Report, OutputsAndRerunFromEcho) {
  const RunReport r = small_run(Method::BACE);
  const fs::path dir = temp_dir("echo");
  write_run_outputs(dir, r);
  for (const char* f : {"config.echo", "report.json", "matrix.csv", "losses.csv", "probing.csv", "tracking.csv"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;

  const json echo = json::parse(read_file(dir / "config.echo"));
  const TrainConfig cfg = train_config_from_json(echo.at("config"));
  const RunReport rerun = run_method(load_stream(echo.at("stream")), cfg);
  EXPECT_TRUE(rerun.matrix == r.matrix);
  EXPECT_TRUE(read_report(dir).matrix == r.matrix);
}

TEST(Report, CompareTable) {
  const RunReport a = small_run(Method::SEQ), b = small_run(Method::BACE);
  const std::string t = compare_reports(a, b);
  for (const char* metric : {"A_last", "FGT", "FWD"}) EXPECT_NE(t.find(metric), std::string::npos);
}

TEST(Report, LossCsvColumns) {
  const RunReport r = small_run(Method::BACE);
  const std::string csv = losses_csv(r.losses);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "task,epoch,effect_new,kl,buf_ce,buf_l2,total");
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), r.losses.size() + 1);
}

void expect_same_state(const RunState& a, const RunState& b) {
  EXPECT_TRUE(a.student == b.student);
  EXPECT_TRUE(a.teacher == b.teacher);
  EXPECT_TRUE(a.buffer == b.buffer);
  EXPECT_TRUE(a.matrix == b.matrix);
  EXPECT_EQ(a.tasks_done, b.tasks_done);
  EXPECT_EQ(state_hash(a.student), state_hash(b.student));
}

TEST(Checkpoint, BitExactRoundTrip) {
  RunState st;
  small_run(Method::BACE, &st);
  ASSERT_GT(st.buffer.size(), 0u);
  const Checkpoint ck{small_config(Method::BACE), stream_spec(small_synth()), st};
  const fs::path dir = temp_dir("ckpt");
  for (CheckpointFormat f : {CheckpointFormat::binary, CheckpointFormat::text}) {
    const fs::path p = dir / (f == CheckpointFormat::binary ? "a.bin" : "a.txt");
    save_checkpoint(p, ck, f);
    const Checkpoint back = load_checkpoint(p);
    expect_same_state(back.state, st);
    EXPECT_EQ(back.config, ck.config);
    EXPECT_EQ(back.stream, ck.stream);
    // saving the reloaded state yields the same bytes
    const fs::path q = dir / "again";
    save_checkpoint(q, back, f);
    EXPECT_EQ(read_file(q), read_file(p));
  }
}

TEST(Checkpoint, RejectsDamage) {
  RunState st;
  small_run(Method::SEQ, &st);
  const fs::path dir = temp_dir("damage");
  const Checkpoint ck{small_config(Method::SEQ), stream_spec(small_synth()), st};
  save_checkpoint(dir / "c.bin", ck, CheckpointFormat::binary);
  const std::string good = read_file(dir / "c.bin");
  write_file(dir / "trailing.bin", good + "x");
  EXPECT_THROW(load_checkpoint(dir / "trailing.bin"), ParseError);
  write_file(dir / "short.bin", good.substr(0, good.size() / 2));
  EXPECT_THROW(load_checkpoint(dir / "short.bin"), ParseError);
  write_file(dir / "magic.bin", "NOTACKPT" + good.substr(8));
  EXPECT_THROW(load_checkpoint(dir / "magic.bin"), ParseError);
}

}  // namespace
