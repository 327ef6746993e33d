#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "checkpoint.hpp"
#include "config.hpp"
#include "doctest.h"
#include "error.hpp"
#include "json.hpp"
#include "metrics.hpp"
#include "models.hpp"
#include "test_util.hpp"

using namespace vidistill;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("vidistill_io_" + name);
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

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

io::Checkpoint model_checkpoint(nn::ModelKind kind, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  io::Checkpoint ck;
  ck.meta = {std::string(nn::model_name(kind)), 7, 0x1234abcdULL, seed};
  if (kind == nn::ModelKind::kTeacher2d) {
    nn::TeacherNet2D net({}, 8);
    net.reset_parameters(rng);
    ck.entries = io::flatten(net.state());
  } else {
    nn::StudentNet net(kind, {});
    net.reset_parameters(rng);
    net.add_head("teacher0", 8, rng);
    ck.entries = io::flatten(net.state());
  }
  for (auto& [n, t] : ck.entries) t = t.detach();
  return ck;
}

}  // namespace

TEST_CASE("checkpoint round trip is byte identical for every model") {
  const auto dir = scratch_dir("roundtrip");
  for (auto kind : {nn::ModelKind::kTeacher2d, nn::ModelKind::kRes3d, nn::ModelKind::kR2Plus1d}) {
    const auto ck = model_checkpoint(kind, 3);
    io::save_checkpoint(dir / "a.ckpt", ck);
    const auto loaded = io::load_checkpoint(dir / "a.ckpt");
    CHECK(loaded.meta.model == ck.meta.model);
    CHECK(loaded.meta.epoch == 7);
    CHECK(loaded.meta.config_hash == 0x1234abcdULL);
    CHECK(loaded.meta.seed == 3);
    REQUIRE(loaded.entries.size() == ck.entries.size());
    for (std::size_t i = 0; i < ck.entries.size(); ++i) {
      CHECK(loaded.entries[i].first == ck.entries[i].first);
      CHECK(loaded.entries[i].second.shape() == ck.entries[i].second.shape());
      CHECK(vidistill::testing::max_abs_diff(loaded.entries[i].second, ck.entries[i].second) == 0.0);
    }
    io::save_checkpoint(dir / "b.ckpt", loaded);
    CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
    CHECK(io::file_hash(dir / "a.ckpt") == io::file_hash(dir / "b.ckpt"));
  }
}

TEST_CASE("checkpoint loading rejects malformed files") {
  const auto dir = scratch_dir("malformed");
  const auto ck = model_checkpoint(nn::ModelKind::kTeacher2d, 1);
  io::save_checkpoint(dir / "good.ckpt", ck);
  const auto bytes = slurp(dir / "good.ckpt");

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  spit(dir / "magic.ckpt", bad_magic);
  CHECK_THROWS_WITH_AS(io::load_checkpoint(dir / "magic.ckpt"), doctest::Contains("offset 0"), Error);

  auto bad_version = bytes;
  bad_version[4] = 9;
  spit(dir / "version.ckpt", bad_version);
  CHECK_THROWS_WITH_AS(io::load_checkpoint(dir / "version.ckpt"), doctest::Contains("version"), Error);

  spit(dir / "short.ckpt", bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_WITH_AS(io::load_checkpoint(dir / "short.ckpt"), doctest::Contains("offset"), Error);

  spit(dir / "long.ckpt", bytes + "xx");
  CHECK_THROWS_AS(io::load_checkpoint(dir / "long.ckpt"), Error);

  auto unknown = ck;
  unknown.meta.model = "vgg16";
  CHECK_THROWS_AS(io::save_checkpoint(dir / "unknown.ckpt", unknown), Error);
  auto renamed = bytes;
  const auto at = renamed.find("teacher2d-tiny");
  REQUIRE(at != std::string::npos);
  renamed.replace(at, 14, "teacher9d-tiny");
  spit(dir / "renamed.ckpt", renamed);
  CHECK_THROWS_WITH_AS(io::load_checkpoint(dir / "renamed.ckpt"), doctest::Contains("teacher9d-tiny"), Error);

  CHECK_THROWS_AS(io::load_checkpoint(dir / "missing.ckpt"), Error);
}

TEST_CASE("assign_state lists every mismatch") {
  const auto ck = model_checkpoint(nn::ModelKind::kRes3d, 5);
  nn::StudentNet same(nn::ModelKind::kRes3d, {});
  std::mt19937_64 rng(1);
  same.add_head("teacher0", 8, rng);
  io::assign_state(same.state(), ck);
  CHECK(io::state_hash(same.state()) == [&] {
    nn::StudentNet ref(nn::ModelKind::kRes3d, {});
    ref.add_head("teacher0", 8, rng);
    io::assign_state(ref.state(), ck);
    return io::state_hash(ref.state());
  }());

  nn::StudentNet headless(nn::ModelKind::kRes3d, {});
  CHECK_THROWS_WITH_AS(io::assign_state(headless.state(), ck), doctest::Contains("heads.teacher0"), Error);
  io::assign_state(headless.state(), ck, {"heads."});

  nn::ModelConfig wide;
  wide.width2 = 32;
  nn::StudentNet other(nn::ModelKind::kRes3d, wide);
  CHECK_THROWS_WITH_AS(io::assign_state(other.state(), ck, {"heads."}),
                       doctest::Contains("stage2.block2.conv2.weight"), Error);
}

TEST_CASE("state hash tracks every value") {
  nn::TeacherNet2D net({}, 8);
  std::mt19937_64 rng(2);
  net.reset_parameters(rng);
  const auto h0 = io::state_hash(net.state());
  CHECK(io::state_hash(net.state()) == h0);
  Tensor mean = net.state().buffers.front().second;
  mean.mutable_data()[0] += 1.0f;
  CHECK(io::state_hash(net.state()) != h0);
}

TEST_CASE("config defaults depend on the phase") {
  const auto teacher = config::defaults(config::Phase::kTeacher);
  CHECK(teacher.optim.lr == 0.01);
  CHECK(teacher.optim.lr_step_epochs == 10);
  CHECK(teacher.optim.epochs == 20);
  const auto distill = config::defaults(config::Phase::kDistill);
  CHECK(distill.optim.epochs == 15);
  CHECK(distill.optim.lr_step_epochs == 5);
  const auto fine = config::defaults(config::Phase::kFinetune);
  CHECK(fine.optim.lr == 0.002);
  CHECK(fine.optim.lr_step_epochs == 2);
  CHECK(fine.optim.epochs == 8);
  CHECK(teacher.data.sizes.teacher_images == 20000);
  CHECK(teacher.data.sizes.distill_videos == 10000);
  CHECK(teacher.data.sizes.target_train == 2000);
  CHECK(teacher.data.sizes.target_test == 1000);
  CHECK(teacher.distill.tau == 1.0);
  CHECK(teacher.optim.momentum == 0.9);
}

TEST_CASE("config parsing") {
  const auto cfg = config::parse_config(
      R"({"model": {"name": "res3d-tiny", "width1": 4},
          "optim": {"lr": 0.05},
          "distill": {"tau": 2, "entropy_threshold": 1.5,
                      "teachers": [{"checkpoint": "t.ckpt", "weight": 0.5}, {"checkpoint": "u.ckpt"}]},
          "run": {"seed": 9}})",
      config::Phase::kFinetune);
  CHECK(cfg.model.name == "res3d-tiny");
  CHECK(cfg.model.width1 == 4);
  CHECK(cfg.model.width2 == 16);
  CHECK(cfg.optim.lr == 0.05);
  CHECK(cfg.optim.epochs == 8);
  CHECK(cfg.distill.tau == 2.0);
  CHECK(cfg.distill.entropy_threshold == 1.5);
  REQUIRE(cfg.distill.teachers.size() == 2);
  CHECK(cfg.distill.teachers[0].weight == 0.5);
  CHECK(cfg.distill.teachers[1].weight == 1.0);
  CHECK(cfg.run.seed == 9);

  CHECK_THROWS_WITH_AS(config::parse_config(R"({"optim": {"learning_rate": 1}})", config::Phase::kGeneric),
                       doctest::Contains("learning_rate"), Error);
  CHECK_THROWS_AS(config::parse_config(R"({"extras": {}})", config::Phase::kGeneric), Error);
  CHECK_THROWS_AS(config::parse_config(R"({"distill": {"tau": 0}})", config::Phase::kGeneric), Error);
  CHECK_THROWS_AS(config::parse_config(R"({"distill": {"loss": "kl"}})", config::Phase::kGeneric), Error);
  CHECK_THROWS_AS(config::parse_config(R"({"model": {"name": "vgg"}})", config::Phase::kGeneric), Error);
  CHECK_THROWS_AS(config::parse_config(R"({"optim": {"momentum": 1.0}})", config::Phase::kGeneric), Error);
  CHECK_THROWS_AS(config::parse_config(R"({"optim": {"lr": "fast"}})", config::Phase::kGeneric), Error);
  CHECK_THROWS_AS(config::parse_config("{not json", config::Phase::kGeneric), Error);
}

TEST_CASE("effective config reparses to the same config") {
  const auto dir = scratch_dir("effective");
  auto cfg = config::parse_config(R"({"data": {"frames": 6, "noise": 0.05}, "run": {"init": "distill"}})",
                                  config::Phase::kDistill);
  config::write_effective_config(cfg, dir / "x.ckpt");
  CHECK(config::effective_config_path(dir / "x.ckpt") == dir / "x.ckpt.config.json");
  const auto again = config::load_config(dir / "x.ckpt.config.json", config::Phase::kDistill);
  CHECK(again.to_json() == cfg.to_json());
  CHECK(again.hash() == cfg.hash());
  const auto parsed = nlohmann::json::parse(cfg.to_json());
  for (const char* section : {"model", "data", "optim", "distill", "run"}) CHECK(parsed.contains(section));
  auto changed = cfg;
  changed.optim.lr *= 2;
  CHECK(changed.hash() != cfg.hash());
}

TEST_CASE("metrics log order and fields") {
  const auto dir = scratch_dir("metrics");
  {
    metrics::Log log(dir / "m.jsonl");
    metrics::Row a;
    a.phase = "distill";
    a.epoch = 0;
    a.step = 1;
    a.loss = 1.5;
    a.lr = 0.01;
    a.teacher_losses = {1.0, 0.5};
    a.teacher_weights = {1.0, 1.0};
    log.append(a);
    metrics::Row b = a;
    b.step = 0;
    CHECK_THROWS_AS(log.append(b), Error);
    b.epoch = 1;
    b.kind = "eval";
    b.top1 = 0.5;
    b.k = 5;
    log.append(b);
    CHECK(log.rows().size() == 2);
  }
  std::ifstream in(dir / "m.jsonl");
  std::string line;
  std::vector<nlohmann::json> rows;
  while (std::getline(in, line)) rows.push_back(nlohmann::json::parse(line));
  REQUIRE(rows.size() == 2);
  CHECK(rows[0]["phase"] == "distill");
  CHECK(rows[0]["loss"] == 1.5);
  CHECK(rows[0]["teacher_losses"].size() == 2);
  CHECK(rows[0].contains("wall_time"));
  CHECK_FALSE(rows[0].contains("top1"));
  CHECK(rows[1]["kind"] == "eval");
  CHECK(rows[1]["k"] == 5);
  CHECK(metrics::metrics_path("a/b.ckpt") == fs::path("a/b.ckpt.metrics.jsonl"));
}
