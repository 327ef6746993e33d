#include "data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>
#include <numeric>

#include "error.hpp"

namespace vidistill::data {

static_assert(std::endian::native == std::endian::little,
              "container IO assumes a little-endian host");

std::string_view appearance_name(Appearance a) {
  static constexpr std::array<std::string_view, kAppearanceClasses> names{
      "square", "triangle", "cross", "bar", "ring", "half-disk", "ell", "tee"};
  return names.at(static_cast<std::size_t>(a));
}

std::string_view motion_name(Motion m) {
  static constexpr std::array<std::string_view, kMotionClasses> names{
      "left", "right", "up", "down", "diagonal-up", "diagonal-down", "rotate-cw", "rotate-ccw"};
  return names.at(static_cast<std::size_t>(m));
}

std::string_view scene_name(Scene s) {
  static constexpr std::array<std::string_view, kSceneClasses> names{
      "flat", "rows", "columns", "diagonal", "checker", "dots", "gradient", "rings"};
  return names.at(static_cast<std::size_t>(s));
}

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Membership in a shape drawn inside [-1,1]², v pointing down.
bool inside(Appearance a, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (a) {
    case Appearance::kSquare:
      return au <= 0.7 && av <= 0.7;
    case Appearance::kTriangle: {
      // Vertices (0,−0.9), (0.8,0.6), (−0.8,0.6).
      if (v > 0.6) return false;
      const double half = 0.8 * (v + 0.9) / 1.5;
      return v >= -0.9 && au <= half;
    }
    case Appearance::kCross:
      return (au <= 0.25 && av <= 0.85) || (av <= 0.25 && au <= 0.85);
    case Appearance::kBar:
      return au <= 0.9 && av <= 0.25;
    case Appearance::kRing: {
      const double r2 = u * u + v * v;
      return r2 >= 0.25 && r2 <= 0.81 && !(u > 0.0 && av < 0.3);
    }
    case Appearance::kHalfDisk:
      return v >= 0.0 && u * u + v * v <= 0.81;
    case Appearance::kEll:
      return (u >= -0.7 && u <= -0.3 && av <= 0.9) || (au <= 0.7 && v >= 0.5 && v <= 0.9);
    case Appearance::kTee:
      return (au <= 0.8 && v >= -0.9 && v <= -0.5) || (au <= 0.2 && av <= 0.9);
  }
  return false;
}

// Scene pattern in [−1,1] at pixel center (x, y).
double pattern(const ClipSpec& s, double x, double y, double width, double height) {
  const double k = kTwoPi / s.texture_period;
  switch (s.scene) {
    case Scene::kFlat:
      return 0.0;
    case Scene::kRows:
      return std::cos(k * y + s.texture_phase);
    case Scene::kColumns:
      return std::cos(k * x + s.texture_phase);
    case Scene::kDiagonal: {
      const double sign = std::cos(s.texture_angle) >= 0.0 ? 1.0 : -1.0;
      return std::cos(k * (x + sign * y) / std::numbers::sqrt2 + s.texture_phase);
    }
    case Scene::kChecker:
      return std::cos(k * x + s.texture_phase) * std::cos(k * y + s.texture_phase);
    case Scene::kDots: {
      const double offset = s.texture_phase / kTwoPi * s.texture_period;
      const double dx = std::remainder(x - offset, s.texture_period);
      const double dy = std::remainder(y - offset, s.texture_period);
      const double sigma = s.texture_period / 6.0;
      return 2.0 * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)) - 1.0;
    }
    case Scene::kGradient:
      return ((x - width / 2) * std::cos(s.texture_angle) + (y - height / 2) * std::sin(s.texture_angle)) /
             (std::max(width, height) / 2);
    case Scene::kRings: {
      const double cx = width / 2 + std::cos(s.texture_angle) * width / 4;
      const double cy = height / 2 + std::sin(s.texture_angle) * height / 4;
      return std::cos(k * std::hypot(x - cx, y - cy) + s.texture_phase);
    }
  }
  return 0.0;
}

double wrap_offset(double d, double period) { return d - period * std::floor(d / period + 0.5); }

// Unit direction per frame for translations; zero for rotations.
std::array<double, 2> direction(Motion m) {
  constexpr double r = std::numbers::sqrt2 / 2;
  switch (m) {
    case Motion::kLeft:
      return {-1.0, 0.0};
    case Motion::kRight:
      return {1.0, 0.0};
    case Motion::kUp:
      return {0.0, -1.0};
    case Motion::kDown:
      return {0.0, 1.0};
    case Motion::kDiagonalUp:
      return {r, -r};
    case Motion::kDiagonalDown:
      return {r, r};
    default:
      return {0.0, 0.0};
  }
}

double turn_rate(const ClipSpec& s) {
  if (s.motion == Motion::kRotateCw) return s.speed / s.scale;
  if (s.motion == Motion::kRotateCcw) return -s.speed / s.scale;
  return 0.0;
}

constexpr std::size_t kSubsamples = 4;

}  // namespace

Tensor render_clip(const ClipSpec& spec, const FrameSize& size) {
  if (size.frames == 0 || size.height == 0 || size.width == 0) {
    usage_error("clip dimensions must be positive");
  }
  if (!(spec.scale > 0.0) || !(spec.speed >= 0.0) || !(spec.noise >= 0.0) ||
      !(spec.texture_period > 0.0)) {
    usage_error("invalid clip spec: scale and texture period must be positive, speed and noise >= 0");
  }
  const auto [ux, uy] = direction(spec.motion);
  const double vx = ux * spec.speed, vy = uy * spec.speed;
  const double omega = turn_rate(spec);
  const double w = static_cast<double>(size.width), h = static_cast<double>(size.height);
  // The unit-square shapes reach at most √2 from their center.
  const double reach = spec.scale * std::numbers::sqrt2;
  if (!spec.wrap) {
    for (std::size_t t = 0; t < size.frames; ++t) {
      const double cx = spec.x0 + static_cast<double>(t) * vx, cy = spec.y0 + static_cast<double>(t) * vy;
      if (cx - reach < 0 || cx + reach > w || cy - reach < 0 || cy + reach > h) {
        usage_error("trajectory leaves the frame at t=", t);
      }
    }
  }

  std::vector<float> out(size.frames * size.height * size.width);
  std::mt19937_64 noise_rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::array<double, kSubsamples> sub{};
  for (std::size_t i = 0; i < kSubsamples; ++i)
    sub[i] = (static_cast<double>(i) + 0.5) / kSubsamples - 0.5;

  for (std::size_t t = 0; t < size.frames; ++t) {
    const double td = static_cast<double>(t);
    const double angle = spec.angle0 + td * omega;
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double inv_scale = 1.0 / spec.scale;
    float* frame = out.data() + t * size.height * size.width;
    for (std::size_t py = 0; py < size.height; ++py) {
      // Offsets are formed as (pixel − t·velocity) − origin so that integer
      // velocities give exactly shifted frames.
      const double base_y = (static_cast<double>(py) - td * vy) - spec.y0;
      for (std::size_t px = 0; px < size.width; ++px) {
        const double base_x = (static_cast<double>(px) - td * vx) - spec.x0;
        std::size_t hits = 0;
        for (double sy : sub)
          for (double sx : sub) {
            double dx = base_x + sx, dy = base_y + sy;
            if (spec.wrap) {
              dx = wrap_offset(dx, w);
              dy = wrap_offset(dy, h);
            }
            const double u = (ca * dx + sa * dy) * inv_scale;
            const double v = (-sa * dx + ca * dy) * inv_scale;
            if (inside(spec.appearance, u, v)) ++hits;
          }
        const double cover = static_cast<double>(hits) / (kSubsamples * kSubsamples);
        const double bg =
            spec.background + spec.texture * pattern(spec, static_cast<double>(px), static_cast<double>(py), w, h);
        double value = bg * (1.0 - cover) + spec.foreground * cover;
        if (spec.noise > 0.0) value += spec.noise * gauss(noise_rng);
        frame[py * size.width + px] = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
  }
  return Tensor({1, size.frames, size.height, size.width}, std::move(out));
}

ClipSpec sample_spec(Appearance appearance, Motion motion, Scene scene,
                     const GeneratorConfig& config, std::mt19937_64& rng) {
  auto uniform = [&rng](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  ClipSpec s;
  s.appearance = appearance;
  s.motion = motion;
  s.scene = scene;
  s.speed = uniform(config.min_speed, config.max_speed);
  s.x0 = uniform(0.0, static_cast<double>(config.size.width));
  s.y0 = uniform(0.0, static_cast<double>(config.size.height));
  s.angle0 = uniform(0.0, kTwoPi);
  s.scale = uniform(config.min_scale, config.max_scale);
  s.foreground = uniform(config.min_foreground, config.max_foreground);
  s.background = uniform(config.min_background, config.max_background);
  s.texture = uniform(0.5 * config.max_texture, config.max_texture);
  s.texture_period = uniform(6.0, 10.0);
  s.texture_phase = uniform(0.0, kTwoPi);
  s.texture_angle = uniform(0.0, kTwoPi);
  s.noise = config.noise;
  s.seed = rng();
  s.wrap = true;
  return s;
}

std::uint64_t item_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
  // SplitMix64 finalizer over a combined key.
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ stream) ^ index);
}

// --- Container ---------------------------------------------------------------

std::size_t ContainerHeader::record_bytes() const {
  return (has_appearance() ? 4 : 0) + (has_motion() ? 4 : 0) + 4 * clip_values();
}

namespace {

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(const unsigned char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

}  // namespace

ContainerWriter::ContainerWriter(const std::filesystem::path& path, const ContainerHeader& header)
    : path_(path), header_(header), out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) data_error("cannot open ", path.string(), " for writing");
  if (header.clip_values() == 0) usage_error("container clips must have positive dimensions");
  if ((header.label_flags & ~(kHasAppearance | kHasMotion)) != 0) {
    usage_error("unknown container label flags ", int{header.label_flags});
  }
  out_.write("MSHV", 4);
  put<std::uint32_t>(out_, 1);
  put(out_, header.count);
  put(out_, header.channels);
  put(out_, header.frames);
  put(out_, header.height);
  put(out_, header.width);
  put(out_, header.label_flags);
}

void ContainerWriter::write(const ClipRecord& record) {
  if (written_ == header_.count) usage_error("container ", path_.string(), " is already full");
  if (record.values.size() != header_.clip_values()) {
    usage_error("clip has ", record.values.size(), " values, container expects ", header_.clip_values());
  }
  if (record.appearance.has_value() != header_.has_appearance() ||
      record.motion.has_value() != header_.has_motion()) {
    usage_error("clip labels do not match the container label flags");
  }
  if (record.appearance) put<std::int32_t>(out_, *record.appearance);
  if (record.motion) put<std::int32_t>(out_, *record.motion);
  out_.write(reinterpret_cast<const char*>(record.values.data()),
             static_cast<std::streamsize>(record.values.size() * sizeof(float)));
  if (!out_) data_error("write failed on ", path_.string());
  ++written_;
}

void ContainerWriter::close() {
  if (written_ != header_.count) {
    usage_error("container ", path_.string(), " declares ", header_.count, " clips but ", written_,
                " were written");
  }
  out_.close();
  if (!out_) data_error("closing ", path_.string(), " failed");
}

ContainerReader::ContainerReader(const std::filesystem::path& path)
    : path_(path), in_(path, std::ios::binary) {
  if (!in_) data_error("cannot open ", path.string());
  std::array<unsigned char, kContainerHeaderBytes> buf{};
  in_.read(reinterpret_cast<char*>(buf.data()), buf.size());
  const auto got = static_cast<std::size_t>(in_.gcount());
  if (got < 4 || std::memcmp(buf.data(), "MSHV", 4) != 0) {
    data_error(path.string(), ": bad magic at offset 0");
  }
  if (got < 8) data_error(path.string(), ": truncated header at offset ", got);
  const auto version = get<std::uint32_t>(buf.data() + 4);
  if (version != 1) data_error(path.string(), ": unsupported version ", version, " at offset 4");
  if (got < kContainerHeaderBytes) data_error(path.string(), ": truncated header at offset ", got);
  header_.count = get<std::uint32_t>(buf.data() + 8);
  header_.channels = get<std::uint16_t>(buf.data() + 12);
  header_.frames = get<std::uint16_t>(buf.data() + 14);
  header_.height = get<std::uint16_t>(buf.data() + 16);
  header_.width = get<std::uint16_t>(buf.data() + 18);
  header_.label_flags = buf[20];
  if (header_.clip_values() == 0) data_error(path.string(), ": zero clip dimension at offset 12");
  if ((header_.label_flags & ~(kHasAppearance | kHasMotion)) != 0) {
    data_error(path.string(), ": unknown label flags at offset 20");
  }
  const auto actual = std::filesystem::file_size(path);
  const std::uintmax_t expected =
      kContainerHeaderBytes + std::uintmax_t{header_.count} * header_.record_bytes();
  if (actual < expected) {
    const std::uintmax_t complete = (actual - kContainerHeaderBytes) / header_.record_bytes();
    data_error(path.string(), ": truncated clip ", complete, " at offset ",
               kContainerHeaderBytes + complete * header_.record_bytes(), " (file has ", actual,
               " bytes, header implies ", expected, ")");
  }
  if (actual > expected) data_error(path.string(), ": trailing bytes at offset ", expected);
}

ClipRecord ContainerReader::read(std::size_t index) {
  if (index >= header_.count) usage_error("clip index ", index, " out of range (", header_.count, " clips)");
  const std::uintmax_t offset = kContainerHeaderBytes + index * header_.record_bytes();
  in_.clear();
  in_.seekg(static_cast<std::streamoff>(offset));
  std::vector<unsigned char> buf(header_.record_bytes());
  in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in_.gcount()) != buf.size()) {
    data_error(path_.string(), ": short read at offset ", offset);
  }
  ClipRecord r;
  std::size_t pos = 0;
  if (header_.has_appearance()) {
    r.appearance = get<std::int32_t>(buf.data());
    pos += 4;
  }
  if (header_.has_motion()) {
    r.motion = get<std::int32_t>(buf.data() + pos);
    pos += 4;
  }
  r.values.resize(header_.clip_values());
  std::memcpy(r.values.data(), buf.data() + pos, r.values.size() * sizeof(float));
  return r;
}

ClipBatch read_batch(ContainerReader& reader, const std::vector<std::size_t>& indices) {
  if (indices.empty()) usage_error("cannot read an empty batch");
  const auto& h = reader.header();
  const std::size_t n = h.clip_values();
  std::vector<float> values(indices.size() * n);
  ClipBatch batch;
  batch.indices = indices;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto rec = reader.read(indices[i]);
    std::copy(rec.values.begin(), rec.values.end(), values.begin() + static_cast<std::ptrdiff_t>(i * n));
    if (rec.appearance) batch.appearance.push_back(*rec.appearance);
    if (rec.motion) batch.motion.push_back(*rec.motion);
  }
  batch.clips = Tensor({indices.size(), h.channels, h.frames, h.height, h.width}, std::move(values));
  return batch;
}

ClipStream::ClipStream(const std::filesystem::path& path, std::size_t batch_size,
                       std::optional<std::uint64_t> shuffle_seed)
    : reader_(path), batch_size_(batch_size), seed_(shuffle_seed) {
  if (batch_size == 0) usage_error("batch size must be positive");
  start_epoch(0);
}

void ClipStream::start_epoch(std::size_t epoch) {
  order_.resize(reader_.size());
  std::iota(order_.begin(), order_.end(), 0);
  if (seed_) {
    std::mt19937_64 rng(item_seed(*seed_, 0x5348554646ULL, epoch));
    for (std::size_t i = order_.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> dist(0, i - 1);
      std::swap(order_[i - 1], order_[dist(rng)]);
    }
  }
  cursor_ = 0;
}

bool ClipStream::next(ClipBatch& batch) {
  if (cursor_ >= order_.size()) return false;
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  batch = read_batch(reader_, {order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                               order_.begin() + static_cast<std::ptrdiff_t>(end)});
  cursor_ = end;
  return true;
}

std::size_t ClipStream::batches_per_epoch() const {
  return (reader_.size() + batch_size_ - 1) / batch_size_;
}

// --- Corpora -----------------------------------------------------------------

std::string_view corpus_file_name(Corpus corpus) {
  switch (corpus) {
    case Corpus::kTeacherImages:
      return "teacher-images.mshv";
    case Corpus::kTeacherImagesVal:
      return "teacher-images-val.mshv";
    case Corpus::kTeacherScenes:
      return "teacher-scenes.mshv";
    case Corpus::kTeacherScenesVal:
      return "teacher-scenes-val.mshv";
    case Corpus::kDistillVideos:
      return "distill-videos.mshv";
    case Corpus::kTargetTrain:
      return "target-actions-train.mshv";
    case Corpus::kTargetTest:
      return "target-actions-test.mshv";
  }
  return "";
}

void build_corpus(Corpus corpus, std::size_t count, std::uint64_t seed,
                  const GeneratorConfig& config, const std::filesystem::path& path) {
  if (count > UINT32_MAX) usage_error("corpus too large: ", count);
  const auto& size = config.size;
  if (size.frames > UINT16_MAX || size.height > UINT16_MAX || size.width > UINT16_MAX) {
    usage_error("clip dimensions exceed the container limits");
  }
  const bool images = corpus == Corpus::kTeacherImages || corpus == Corpus::kTeacherImagesVal ||
                      corpus == Corpus::kTeacherScenes || corpus == Corpus::kTeacherScenesVal;
  const bool scenes = corpus == Corpus::kTeacherScenes || corpus == Corpus::kTeacherScenesVal;
  ContainerHeader header;
  header.count = static_cast<std::uint32_t>(count);
  header.channels = 1;
  header.frames = static_cast<std::uint16_t>(images ? 1 : size.frames);
  header.height = static_cast<std::uint16_t>(size.height);
  header.width = static_cast<std::uint16_t>(size.width);
  if (images) {
    header.label_flags = kHasAppearance;
  } else if (corpus == Corpus::kTargetTrain || corpus == Corpus::kTargetTest) {
    header.label_flags = kHasAppearance | kHasMotion;
  }
  FrameSize render_size = size;
  render_size.frames = header.frames;

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  ContainerWriter writer(path, header);
  const auto stream = static_cast<std::uint64_t>(corpus) + 1;
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(item_seed(seed, stream, i));
    // Two round-robin labels whose joint assignment cycles every 64 items.
    const std::size_t first = i % 8, second = (i + i / 8) % 8;
    std::uniform_int_distribution<std::size_t> any(0, 7);
    Appearance appearance;
    Motion motion;
    Scene scene;
    if (scenes) {
      scene = static_cast<Scene>(first);
      appearance = static_cast<Appearance>(second);
      motion = static_cast<Motion>(any(rng));
    } else {
      appearance = static_cast<Appearance>(first);
      motion = static_cast<Motion>(second);
      scene = static_cast<Scene>(any(rng));
    }
    const auto spec = sample_spec(appearance, motion, scene, config, rng);
    ClipRecord rec;
    const auto clip = render_clip(spec, render_size);
    rec.values.assign(clip.data().begin(), clip.data().end());
    if (header.has_appearance()) rec.appearance = static_cast<int>(first);
    if (header.has_motion()) rec.motion = static_cast<int>(second);
    writer.write(rec);
  }
  writer.close();
}

void build_all(const std::filesystem::path& dir, const CorpusSizes& sizes, std::uint64_t seed,
               const GeneratorConfig& config) {
  const std::pair<Corpus, std::size_t> plan[] = {
      {Corpus::kTeacherImages, sizes.teacher_images},  {Corpus::kTeacherImagesVal, sizes.teacher_val},
      {Corpus::kTeacherScenes, sizes.teacher_images},  {Corpus::kTeacherScenesVal, sizes.teacher_val},
      {Corpus::kDistillVideos, sizes.distill_videos}, {Corpus::kTargetTrain, sizes.target_train},
      {Corpus::kTargetTest, sizes.target_test},
  };
  for (const auto& [corpus, count] : plan) build_corpus(corpus, count, seed, config, dir / corpus_file_name(corpus));
}

}  // namespace vidistill::data
