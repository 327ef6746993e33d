#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "doctest.h"
#include "error.hpp"
#include "json.hpp"
#include "optim.hpp"
#include "pipeline.hpp"
#include "test_util.hpp"

using namespace vidistill;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("vidistill_pipeline_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

config::RunConfig small_config(const fs::path& dir, config::Phase phase, const std::string& extra = "{}") {
  auto doc = nlohmann::json::parse(R"({
    "model": {"name": "r2plus1d-tiny", "width1": 4, "width2": 8},
    "data": {"frames": 8, "height": 16, "width": 16, "min_scale": 3, "max_scale": 4,
             "teacher_images": 96, "teacher_val": 32, "distill_videos": 48,
             "target_train": 32, "target_test": 24},
    "optim": {"epochs": 2, "batch_size": 8},
    "run": {"seed": 5, "log_every": 1, "topk": 3}
  })");
  doc["data"]["dir"] = dir.string();
  doc.merge_patch(nlohmann::json::parse(extra));
  return config::parse_config(doc.dump(), phase);
}

std::vector<nlohmann::json> read_rows(const fs::path& ckpt) {
  std::ifstream in(metrics::metrics_path(ckpt));
  std::vector<nlohmann::json> rows;
  std::string line;
  while (std::getline(in, line)) rows.push_back(nlohmann::json::parse(line));
  return rows;
}

// Metric rows rounded to 4 decimals, wall time removed.
std::string rounded_rows(const fs::path& ckpt) {
  std::string out;
  for (auto row : read_rows(ckpt)) {
    row.erase("wall_time");
    for (auto& [key, value] : row.items()) {
      if (value.is_number_float()) value = std::round(value.get<double>() * 1e4) / 1e4;
      if (value.is_array())
        for (auto& v : value) v = std::round(v.get<double>() * 1e4) / 1e4;
    }
    out += row.dump() + "\n";
  }
  return out;
}

struct Run {
  fs::path teacher, scenes, distilled, finetuned;
};

Run run_pipeline(const fs::path& dir) {
  pipeline::generate_data(small_config(dir, config::Phase::kGeneric));
  Run r{dir / "teacher.ckpt", dir / "scenes.ckpt", dir / "distill.ckpt", dir / "finetune.ckpt"};
  pipeline::train_teacher(small_config(dir, config::Phase::kTeacher), r.teacher);
  pipeline::train_teacher(small_config(dir, config::Phase::kTeacher, R"({"data": {"teacher_task": "scene"}})"),
                          r.scenes);
  auto d = small_config(dir, config::Phase::kDistill);
  d.distill.teachers = {{r.teacher.string(), 1.0}, {r.scenes.string(), 0.5}};
  pipeline::distill_pretrain(d, r.distilled);
  auto f = small_config(dir, config::Phase::kFinetune);
  f.run.init = "distill";
  f.run.init_checkpoint = r.distilled.string();
  pipeline::finetune(f, r.finetuned);
  return r;
}

}  // namespace

TEST_CASE("seeded end-to-end runs are reproducible") {
  const auto dir = scratch_dir("det");
  const auto a = run_pipeline(dir);
  std::vector<std::string> bytes, rows;
  for (auto member : {&Run::teacher, &Run::scenes, &Run::distilled, &Run::finetuned}) {
    bytes.push_back(slurp(a.*member));
    rows.push_back(rounded_rows(a.*member));
    CHECK(fs::exists(config::effective_config_path(a.*member)));
  }
  std::vector<std::string> corpora;
  for (const auto& name : {"teacher-images.mshv", "distill-videos.mshv", "target-test.mshv"})
    corpora.push_back(slurp(dir / name));
  const auto b = run_pipeline(dir);
  std::size_t i = 0;
  for (auto member : {&Run::teacher, &Run::scenes, &Run::distilled, &Run::finetuned}) {
    CHECK(slurp(b.*member) == bytes[i]);
    CHECK(rounded_rows(b.*member) == rows[i]);
    ++i;
  }
  i = 0;
  for (const auto& name : {"teacher-images.mshv", "distill-videos.mshv", "target-test.mshv"})
    CHECK(slurp(dir / name) == corpora[i++]);

  const auto cfg = small_config(a.teacher.parent_path(), config::Phase::kGeneric);
  const auto test = pipeline::corpus_path(cfg, data::Corpus::kTargetTest);
  const auto e1 = pipeline::evaluate(cfg, a.finetuned, test, 1, 3);
  const auto e2 = pipeline::evaluate(cfg, b.finetuned, test, 1, 3);
  CHECK(e1.top1 == doctest::Approx(read_rows(b.finetuned).back()["top1"].get<double>()).epsilon(1e-12));
  CHECK(e1.top1 == e2.top1);
  CHECK(e1.videos == 24);
  CHECK(e1.topk >= e1.top1);
}

TEST_CASE("effective config reproduces its run") {
  const auto dir = scratch_dir("effective");
  auto cfg = small_config(dir, config::Phase::kTeacher);
  pipeline::generate_data(cfg);
  pipeline::train_teacher(cfg, dir / "a.ckpt");
  const auto replay = config::load_config(config::effective_config_path(dir / "a.ckpt"), config::Phase::kTeacher);
  pipeline::train_teacher(replay, dir / "b.ckpt");
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
  CHECK(rounded_rows(dir / "a.ckpt") == rounded_rows(dir / "b.ckpt"));
}

TEST_CASE("teacher training logs the step schedule") {
  const auto dir = scratch_dir("schedule");
  auto cfg = small_config(dir, config::Phase::kTeacher,
                          R"({"optim": {"epochs": 3, "lr_step_epochs": 2, "lr": 0.04, "lr_gamma": 0.5}})");
  pipeline::generate_data(cfg);
  const auto result = pipeline::train_teacher(cfg, dir / "t.ckpt");
  CHECK(result.epoch_losses.size() == 3);
  REQUIRE(result.eval);
  for (const auto& row : read_rows(dir / "t.ckpt")) {
    if (!row.contains("lr")) continue;
    const double expected = optim::StepSchedule{0.04, 0.5, 2}.lr_at(row["epoch"].get<std::size_t>());
    CHECK(row["lr"].get<double>() == doctest::Approx(expected).epsilon(1e-12));
  }
  CHECK_THROWS_AS(pipeline::train_teacher(small_config(dir / "none", config::Phase::kTeacher), dir / "x.ckpt"),
                  Error);
}

TEST_CASE("distillation keeps teachers frozen and sums teacher losses") {
  const auto dir = scratch_dir("distill");
  auto cfg = small_config(dir, config::Phase::kTeacher);
  pipeline::generate_data(cfg);
  pipeline::train_teacher(cfg, dir / "t.ckpt");
  pipeline::train_teacher(small_config(dir, config::Phase::kTeacher, R"({"data": {"teacher_task": "scene"}})"),
                          dir / "s.ckpt");
  const auto before_t = io::file_hash(dir / "t.ckpt");
  const auto before_s = io::file_hash(dir / "s.ckpt");

  for (const char* loss : {"cross-entropy", "mse-logits"})
    for (const char* pick : {"center", "random", "k-random"}) {
      auto d = small_config(dir, config::Phase::kDistill);
      d.distill.loss = loss;
      d.distill.pick_strategy = pick;
      d.distill.teachers = {{(dir / "t.ckpt").string(), 1.0}, {(dir / "s.ckpt").string(), 0.5}};
      const auto result = pipeline::distill_pretrain(d, dir / "d.ckpt");
      CHECK(result.epoch_losses.size() == 2);
      std::size_t steps = 0;
      for (const auto& row : read_rows(dir / "d.ckpt")) {
        if (row["kind"] != "step") continue;
        ++steps;
        const auto losses = row["teacher_losses"].get<std::vector<double>>();
        const auto weights = row["teacher_weights"].get<std::vector<double>>();
        REQUIRE(losses.size() == 2);
        CHECK(std::abs(row["loss"].get<double>() - (weights[0] * losses[0] + weights[1] * losses[1])) < 1e-5);
      }
      CHECK(steps == 12);
      const auto ck = io::load_checkpoint(dir / "d.ckpt");
      CHECK(ck.find("heads.teacher0.weight") != nullptr);
      CHECK(ck.at("heads.teacher1.weight").dim(0) == 8);
    }
  CHECK(io::file_hash(dir / "t.ckpt") == before_t);
  CHECK(io::file_hash(dir / "s.ckpt") == before_s);

  auto filtered = small_config(dir, config::Phase::kDistill, R"({"distill": {"entropy_threshold": 1.0}})");
  filtered.distill.teachers = {{(dir / "t.ckpt").string(), 1.0}};
  pipeline::distill_pretrain(filtered, dir / "f.ckpt");
  for (const auto& row : read_rows(dir / "f.ckpt"))
    if (row["kind"] == "epoch") CHECK(row["kept"].get<std::size_t>() + row["dropped"].get<std::size_t>() == 48);

  auto none = small_config(dir, config::Phase::kDistill);
  CHECK_THROWS_AS(pipeline::distill_pretrain(none, dir / "n.ckpt"), Error);
  auto channels = small_config(dir, config::Phase::kDistill, R"({"model": {"in_channels": 3}})");
  channels.distill.teachers = {{(dir / "t.ckpt").string(), 1.0}};
  CHECK_THROWS_AS(pipeline::distill_pretrain(channels, dir / "n.ckpt"), Error);
}

TEST_CASE("finetune initializations") {
  const auto dir = scratch_dir("finetune");
  auto base = small_config(dir, config::Phase::kTeacher);
  pipeline::generate_data(base);
  pipeline::train_teacher(base, dir / "t.ckpt");

  SUBCASE("scratch draws the trunk from the seeded initializer") {
    auto f = small_config(dir, config::Phase::kFinetune, R"({"optim": {"epochs": 0}})");
    pipeline::finetune(f, dir / "scratch.ckpt");
    nn::StudentNet ref(nn::ModelKind::kR2Plus1d, f.model.model_config());
    std::mt19937_64 rng(data::item_seed(5, 101, 0));
    ref.reset_parameters(rng);
    nn::StudentNet loaded(nn::ModelKind::kR2Plus1d, f.model.model_config());
    io::assign_state(loaded.trunk_state(), io::load_checkpoint(dir / "scratch.ckpt"), {"heads."});
    CHECK(io::state_hash(loaded.trunk_state()) == io::state_hash(ref.trunk_state()));
  }
  SUBCASE("distill init copies the trunk bitwise") {
    auto d = small_config(dir, config::Phase::kDistill, R"({"optim": {"epochs": 1}})");
    d.distill.teachers = {{(dir / "t.ckpt").string(), 1.0}};
    pipeline::distill_pretrain(d, dir / "d.ckpt");
    auto f = small_config(dir, config::Phase::kFinetune, R"({"optim": {"epochs": 0}, "run": {"seed": 77}})");
    f.run.init = "distill";
    f.run.init_checkpoint = (dir / "d.ckpt").string();
    pipeline::finetune(f, dir / "fd.ckpt");
    const auto src = io::load_checkpoint(dir / "d.ckpt");
    const auto dst = io::load_checkpoint(dir / "fd.ckpt");
    for (const auto& [name, t] : dst.entries) {
      if (name.rfind("heads.", 0) == 0) {
        CHECK(name.rfind("heads.motion.", 0) == 0);
        continue;
      }
      CHECK(vidistill::testing::max_abs_diff(t, src.at(name)) == 0.0);
    }
    CHECK(src.find("heads.motion.weight") == nullptr);
  }
  SUBCASE("inflate init is only for res3d") {
    auto f = small_config(dir, config::Phase::kFinetune);
    f.run.init = "inflate";
    f.run.init_checkpoint = (dir / "t.ckpt").string();
    CHECK_THROWS_WITH_AS(pipeline::finetune(f, dir / "bad.ckpt"), doctest::Contains("res3d"), Error);
    f.model.name = "res3d-tiny";
    const auto r = pipeline::finetune(f, dir / "inflated.ckpt");
    REQUIRE(r.eval);
    pipeline::inflate_checkpoint(f, dir / "t.ckpt", dir / "i.ckpt", true);
    f.run.init_checkpoint = (dir / "i.ckpt").string();
    const auto r2 = pipeline::finetune(f, dir / "inflated2.ckpt");
    const auto c1 = io::load_checkpoint(dir / "inflated.ckpt");
    const auto c2 = io::load_checkpoint(dir / "inflated2.ckpt");
    REQUIRE(c1.entries.size() == c2.entries.size());
    for (std::size_t i = 0; i < c1.entries.size(); ++i)
      CHECK(vidistill::testing::max_abs_diff(c1.entries[i].second, c2.entries[i].second) == 0.0);
    CHECK(r2.eval->top1 == r.eval->top1);
  }
}

TEST_CASE("ranking examples") {
  const std::vector<double> perfect{5, 1, 0, 0, 4, 1, 2, 3, 9};
  const auto p = pipeline::rank_accuracy(perfect, std::vector<int>{0, 1, 2}, 3, 1);
  CHECK(p.top1 == 1.0);
  CHECK(p.topk == 1.0);
  const auto ties = pipeline::rank_accuracy(std::vector<double>{1, 1}, std::vector<int>{1}, 2, 1);
  CHECK(ties.top1 == 0.0);

  std::mt19937_64 rng(31);
  std::normal_distribution<double> n;
  std::uniform_int_distribution<int> label(0, 7);
  std::vector<double> logits(1000 * 8);
  std::vector<int> labels(1000);
  for (auto& v : logits) v = n(rng);
  for (auto& l : labels) l = label(rng);
  for (std::size_t k = 1; k <= 5; ++k) {
    const auto r = pipeline::rank_accuracy(logits, labels, 8, k);
    CHECK(std::abs(r.topk - static_cast<double>(k) / 8.0) < 0.03);
  }
  CHECK_THROWS_AS(pipeline::rank_accuracy(logits, labels, 8, 9), Error);
  CHECK_THROWS_AS(pipeline::rank_accuracy(logits, labels, 7, 1), Error);
}

TEST_CASE("window starts and multi-clip evaluation") {
  CHECK(pipeline::window_starts(8, 8, 1) == std::vector<std::size_t>{0});
  CHECK(pipeline::window_starts(16, 8, 2) == std::vector<std::size_t>{0, 8});
  CHECK(pipeline::window_starts(16, 8, 3) == std::vector<std::size_t>{0, 4, 8});
  CHECK_THROWS_AS(pipeline::window_starts(4, 8, 1), Error);

  const auto dir = scratch_dir("multiclip");
  auto cfg = small_config(dir, config::Phase::kFinetune, R"({"optim": {"epochs": 1}})");
  pipeline::generate_data(cfg);
  pipeline::finetune(cfg, dir / "m.ckpt");

  const auto test = pipeline::corpus_path(cfg, data::Corpus::kTargetTest);
  data::ContainerReader reader(test);
  auto header = reader.header();
  header.frames = 16;
  {
    data::ContainerWriter writer(dir / "long.mshv", header);
    for (std::size_t i = 0; i < reader.size(); ++i) {
      auto rec = reader.read(i);
      std::vector<float> doubled;
      for (int copy = 0; copy < 2; ++copy) doubled.insert(doubled.end(), rec.values.begin(), rec.values.end());
      rec.values = doubled;
      writer.write(rec);
    }
    writer.close();
  }
  const auto single = pipeline::evaluate(cfg, dir / "m.ckpt", test, 1, 3);
  const auto multi = pipeline::evaluate(cfg, dir / "m.ckpt", dir / "long.mshv", 2, 3);
  CHECK(multi.clips == 2 * multi.videos);
  CHECK(multi.top1 == single.top1);
  CHECK(multi.topk == single.topk);
  CHECK(multi.clip_accuracy == single.clip_accuracy);
  CHECK_THROWS_AS(pipeline::evaluate(cfg, dir / "m.ckpt", test, 1, 9), Error);
  CHECK_THROWS_AS(pipeline::evaluate(cfg, dir / "m.ckpt", dir / "missing.mshv", 1, 1), Error);
}

TEST_CASE("feature export") {
  const auto dir = scratch_dir("features");
  auto cfg = small_config(dir, config::Phase::kFinetune, R"({"optim": {"epochs": 1}})");
  pipeline::generate_data(cfg);
  pipeline::finetune(cfg, dir / "m.ckpt");
  const auto test = pipeline::corpus_path(cfg, data::Corpus::kTargetTest);
  CHECK(pipeline::export_features(cfg, dir / "m.ckpt", test, dir / "f1.ckpt") == 24);
  pipeline::export_features(cfg, dir / "m.ckpt", test, dir / "f2.ckpt");
  CHECK(slurp(dir / "f1.ckpt") == slurp(dir / "f2.ckpt"));
  const auto ck = io::load_checkpoint(dir / "f1.ckpt");
  CHECK(ck.meta.model == "features");
  CHECK(ck.at("features").shape() == Shape{24, 8});
  CHECK(ck.at("motion").numel() == 24);
  CHECK(ck.at("appearance").numel() == 24);
}
