#include <array>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <set>

#include "data.hpp"
#include "doctest.h"
#include "error.hpp"

using namespace vidistill;
using namespace vidistill::data;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("vidistill_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ClipSpec quiet_spec() {
  ClipSpec s;
  s.scene = Scene::kFlat;
  s.noise = 0.0;
  s.texture = 0.0;
  return s;
}

GeneratorConfig small_config() {
  GeneratorConfig c;
  c.size = {4, 16, 16};
  c.min_scale = 3.0;
  c.max_scale = 4.0;
  return c;
}

}  // namespace

TEST_CASE("static clip renders identical frames") {
  auto s = quiet_spec();
  s.speed = 0.0;
  s.noise = 0.0;
  const auto clip = render_clip(s, {5, 32, 32});
  const auto v = clip.data();
  const std::size_t plane = 32 * 32;
  for (std::size_t t = 1; t < 5; ++t)
    for (std::size_t i = 0; i < plane; ++i) REQUIRE(v[t * plane + i] == v[i]);
}

TEST_CASE("rightward motion at speed 1 shifts each frame by one pixel") {
  for (auto app : {Appearance::kTriangle, Appearance::kEll, Appearance::kRing}) {
    auto s = quiet_spec();
    s.appearance = app;
    s.motion = Motion::kRight;
    s.speed = 1.0;
    s.x0 = 10.3;
    s.y0 = 15.6;
    s.angle0 = 0.4;
    const auto clip = render_clip(s, {8, 32, 32});
    const auto v = clip.data();
    for (std::size_t t = 0; t + 1 < 8; ++t)
      for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 1; x < 32; ++x)
          REQUIRE(v[((t + 1) * 32 + y) * 32 + x] == v[(t * 32 + y) * 32 + x - 1]);
  }
}

TEST_CASE("downward motion shifts rows") {
  auto s = quiet_spec();
  s.motion = Motion::kDown;
  s.speed = 2.0;
  const auto clip = render_clip(s, {3, 32, 32});
  const auto v = clip.data();
  for (std::size_t y = 2; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) REQUIRE(v[(32 + y) * 32 + x] == v[(y - 2) * 32 + x]);
}

TEST_CASE("rendering is deterministic and bounded") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 16; ++i) {
    const auto s = sample_spec(static_cast<Appearance>(i % 8), static_cast<Motion>(i / 2 % 8),
                               static_cast<Scene>((i * 3) % 8), GeneratorConfig{}, rng);
    const auto a = render_clip(s, {8, 32, 32});
    const auto b = render_clip(s, {8, 32, 32});
    REQUIRE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    for (float x : a.data()) REQUIRE((x >= 0.0f && x <= 1.0f));
  }
}

TEST_CASE("shapes are visible and distinct") {
  std::set<std::vector<float>> seen;
  for (std::size_t a = 0; a < kAppearanceClasses; ++a) {
    auto s = quiet_spec();
    s.appearance = static_cast<Appearance>(a);
    s.speed = 0.0;
    const auto clip = render_clip(s, {1, 32, 32});
    const auto v = clip.data();
    double covered = 0.0;
    for (float x : v) covered += (x - 0.2) / 0.7;
    CHECK(covered > 20.0);
    seen.emplace(v.begin(), v.end());
  }
  CHECK(seen.size() == kAppearanceClasses);
}

TEST_CASE("unwrapped trajectory leaving the frame is rejected") {
  auto s = quiet_spec();
  s.wrap = false;
  s.x0 = 16;
  s.y0 = 16;
  s.scale = 4;
  s.speed = 0.5;
  CHECK_NOTHROW(render_clip(s, {8, 32, 32}));
  s.speed = 2.0;
  CHECK_THROWS_AS(render_clip(s, {8, 32, 32}), Error);
}

TEST_CASE("invalid spec is rejected") {
  auto s = quiet_spec();
  s.scale = 0.0;
  CHECK_THROWS_AS(render_clip(s, {1, 8, 8}), Error);
  CHECK_THROWS_AS(render_clip(quiet_spec(), {0, 8, 8}), Error);
}

TEST_CASE("sampled specs do not depend on the motion label") {
  GeneratorConfig c;
  for (std::size_t m = 1; m < kMotionClasses; ++m) {
    std::mt19937_64 r0(11), r1(11);
    auto a = sample_spec(Appearance::kCross, Motion::kLeft, Scene::kDots, c, r0);
    auto b = sample_spec(Appearance::kCross, static_cast<Motion>(m), Scene::kDots, c, r1);
    CHECK(a.speed == b.speed);
    CHECK(a.x0 == b.x0);
    CHECK(a.y0 == b.y0);
    CHECK(a.angle0 == b.angle0);
    CHECK(a.scale == b.scale);
    CHECK(a.seed == b.seed);
  }
}

TEST_CASE("item seeds differ across streams and indices") {
  std::set<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < 4; ++s)
    for (std::uint64_t i = 0; i < 100; ++i) seeds.insert(item_seed(42, s, i));
  CHECK(seeds.size() == 400);
  CHECK(item_seed(1, 2, 3) == item_seed(1, 2, 3));
}

TEST_CASE("container round trip and byte-identical rewrite") {
  const auto dir = scratch_dir("container");
  ContainerHeader h;
  h.count = 3;
  h.frames = 2;
  h.height = 3;
  h.width = 4;
  h.label_flags = kHasAppearance | kHasMotion;
  std::vector<ClipRecord> recs;
  for (int i = 0; i < 3; ++i) {
    ClipRecord r;
    for (std::size_t j = 0; j < h.clip_values(); ++j) r.values.push_back(float(i) + 0.01f * float(j));
    r.appearance = i;
    r.motion = 7 - i;
    recs.push_back(r);
  }
  {
    ContainerWriter w(dir / "a.mshv", h);
    for (const auto& r : recs) w.write(r);
    w.close();
  }
  CHECK(std::filesystem::file_size(dir / "a.mshv") == kContainerHeaderBytes + 3 * (8 + 24 * 4));
  ContainerReader reader(dir / "a.mshv");
  CHECK(reader.size() == 3);
  CHECK(reader.header().frames == 2);
  {
    ContainerWriter w(dir / "b.mshv", reader.header());
    for (std::size_t i = 0; i < reader.size(); ++i) {
      auto r = reader.read(i);
      CHECK(r.values == recs[i].values);
      CHECK(r.appearance == recs[i].appearance);
      CHECK(r.motion == recs[i].motion);
      w.write(r);
    }
    w.close();
  }
  CHECK(slurp(dir / "a.mshv") == slurp(dir / "b.mshv"));
}

TEST_CASE("container writer contracts") {
  const auto dir = scratch_dir("writer");
  ContainerHeader h;
  h.count = 2;
  h.label_flags = kHasAppearance;
  ContainerWriter w(dir / "c.mshv", h);
  ClipRecord r;
  r.values = {0.5f};
  CHECK_THROWS_AS(w.write(r), Error);  // missing label
  r.appearance = 1;
  r.motion = 2;
  CHECK_THROWS_AS(w.write(r), Error);  // unexpected label
  r.motion.reset();
  r.values = {0.5f, 0.5f};
  CHECK_THROWS_AS(w.write(r), Error);  // wrong size
  r.values = {0.5f};
  w.write(r);
  CHECK_THROWS_AS(w.close(), Error);  // count mismatch
}

TEST_CASE("corrupt containers are rejected with an offset") {
  const auto dir = scratch_dir("corrupt");
  ContainerHeader h;
  h.count = 4;
  h.width = 5;
  {
    ContainerWriter w(dir / "ok.mshv", h);
    for (int i = 0; i < 4; ++i) w.write({std::vector<float>(5, 1.0f), {}, {}});
    w.close();
  }
  auto bytes = slurp(dir / "ok.mshv");
  auto write_bytes = [&](const std::string& name, const std::vector<char>& b) {
    std::ofstream(dir / name, std::ios::binary).write(b.data(), std::streamsize(b.size()));
    return dir / name;
  };
  auto message = [](const std::filesystem::path& p) {
    try {
      ContainerReader r(p);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kData);
      return std::string(e.what());
    }
    return std::string();
  };
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  const auto m1 = message(write_bytes("trunc.mshv", truncated));
  CHECK(m1.find("truncated clip 3 at offset 81") != std::string::npos);

  auto magic = bytes;
  magic[0] = 'X';
  CHECK(message(write_bytes("magic.mshv", magic)).find("bad magic at offset 0") != std::string::npos);

  auto version = bytes;
  version[4] = 2;
  CHECK(message(write_bytes("version.mshv", version)).find("version 2 at offset 4") != std::string::npos);

  auto header_only = bytes;
  header_only.resize(10);
  CHECK(message(write_bytes("short.mshv", header_only)).find("truncated header") != std::string::npos);
  CHECK_THROWS_AS(ContainerReader(dir / "missing.mshv"), Error);
}

TEST_CASE("clip stream order and epoch coverage") {
  const auto dir = scratch_dir("stream");
  build_corpus(Corpus::kTargetTrain, 37, 5, small_config(), dir / "t.mshv");

  ClipStream plain(dir / "t.mshv", 8, std::nullopt);
  CHECK(plain.batches_per_epoch() == 5);
  ClipBatch b;
  std::vector<std::size_t> order;
  std::size_t last = 0;
  while (plain.next(b)) {
    CHECK(b.clips.dim(0) == b.indices.size());
    CHECK(b.motion.size() == b.indices.size());
    order.insert(order.end(), b.indices.begin(), b.indices.end());
    last = b.indices.size();
  }
  CHECK(last == 5);
  std::vector<std::size_t> expected(37);
  std::iota(expected.begin(), expected.end(), 0);
  CHECK(order == expected);

  ClipStream s1(dir / "t.mshv", 8, 99), s2(dir / "t.mshv", 8, 99);
  std::vector<std::size_t> e0, e1;
  for (std::size_t epoch = 0; epoch < 2; ++epoch) {
    s1.start_epoch(epoch);
    s2.start_epoch(epoch);
    ClipBatch a, c;
    std::multiset<std::size_t> seen;
    while (s1.next(a)) {
      REQUIRE(s2.next(c));
      CHECK(a.indices == c.indices);
      CHECK(std::equal(a.clips.data().begin(), a.clips.data().end(), c.clips.data().begin()));
      seen.insert(a.indices.begin(), a.indices.end());
      (epoch == 0 ? e0 : e1).insert((epoch == 0 ? e0 : e1).end(), a.indices.begin(), a.indices.end());
    }
    CHECK_FALSE(s2.next(c));
    CHECK(seen.size() == 37);
    CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 37);
  }
  CHECK(e0 != expected);
  CHECK(e0 != e1);
}

TEST_CASE("corpora are balanced, labelled per kind and reproducible") {
  const auto dir = scratch_dir("corpus");
  const auto cfg = small_config();
  build_corpus(Corpus::kTargetTrain, 100, 1, cfg, dir / "a.mshv");
  build_corpus(Corpus::kTargetTrain, 100, 1, cfg, dir / "b.mshv");
  CHECK(slurp(dir / "a.mshv") == slurp(dir / "b.mshv"));
  build_corpus(Corpus::kTargetTest, 100, 1, cfg, dir / "c.mshv");
  CHECK(slurp(dir / "a.mshv") != slurp(dir / "c.mshv"));

  ContainerReader r(dir / "a.mshv");
  CHECK(r.header().frames == 4);
  std::map<int, int> app, mot;
  std::map<std::pair<int, int>, int> joint;
  for (std::size_t i = 0; i < r.size(); ++i) {
    auto rec = r.read(i);
    ++app[*rec.appearance];
    ++mot[*rec.motion];
    ++joint[{*rec.appearance, *rec.motion}];
  }
  for (auto* counts : {&app, &mot}) {
    CHECK(counts->size() == 8);
    for (auto [label, n] : *counts) CHECK((n == 12 || n == 13));
  }
  CHECK(joint.size() == 64);

  build_corpus(Corpus::kTeacherImages, 20, 1, cfg, dir / "img.mshv");
  ContainerReader img(dir / "img.mshv");
  CHECK(img.header().frames == 1);
  CHECK(img.header().label_flags == kHasAppearance);

  build_corpus(Corpus::kDistillVideos, 10, 1, cfg, dir / "d.mshv");
  ContainerReader d(dir / "d.mshv");
  CHECK(d.header().label_flags == 0);
  CHECK(d.header().frames == 4);
}

TEST_CASE("build_all writes every corpus") {
  const auto dir = scratch_dir("all");
  build_all(dir, {16, 8, 8, 16, 8}, 3, small_config());
  for (auto c : {Corpus::kTeacherImages, Corpus::kTeacherImagesVal, Corpus::kTeacherScenes,
                 Corpus::kTeacherScenesVal, Corpus::kDistillVideos, Corpus::kTargetTrain,
                 Corpus::kTargetTest})
    CHECK(std::filesystem::exists(dir / std::string(corpus_file_name(c))));
}
