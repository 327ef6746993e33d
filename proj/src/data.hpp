#pragma once

// MotionShapes: synthetic grayscale clips of one textured-background scene
// and one moving foreground shape. The shape kind is recognizable from any
// single frame; the motion is not. The world wraps around at the frame
// borders, so the position of the shape in every frame is uniform over the
// frame regardless of how it moves.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "tensor.hpp"

namespace vidistill::data {

enum class Appearance { kSquare, kTriangle, kCross, kBar, kRing, kHalfDisk, kEll, kTee };
enum class Motion { kLeft, kRight, kUp, kDown, kDiagonalUp, kDiagonalDown, kRotateCw, kRotateCcw };
enum class Scene { kFlat, kRows, kColumns, kDiagonal, kChecker, kDots, kGradient, kRings };

inline constexpr std::size_t kAppearanceClasses = 8;
inline constexpr std::size_t kMotionClasses = 8;
inline constexpr std::size_t kSceneClasses = 8;

std::string_view appearance_name(Appearance a);
std::string_view motion_name(Motion m);
std::string_view scene_name(Scene s);

struct ClipSpec {
  Appearance appearance = Appearance::kSquare;
  Motion motion = Motion::kRight;
  Scene scene = Scene::kFlat;
  // Pixels per frame along the motion direction; rotations turn the shape
  // so its outline at `scale` pixels from the center moves this fast.
  double speed = 1.0;
  double x0 = 16.0, y0 = 16.0;  // center at frame 0, pixels
  double angle0 = 0.0;          // radians
  double scale = 6.0;           // shape half-extent, pixels
  double foreground = 0.9;
  double background = 0.2;
  double texture = 0.1;         // amplitude of the scene pattern
  double texture_period = 8.0;  // pixels
  double texture_phase = 0.0;   // radians
  double texture_angle = 0.0;   // radians
  double noise = 0.0;           // Gaussian standard deviation
  std::uint64_t seed = 0;       // noise stream
  // Without wrapping, a shape whose extent leaves the frame is rejected.
  bool wrap = true;
};

struct FrameSize {
  std::size_t frames = 8;
  std::size_t height = 32;
  std::size_t width = 32;
};

// Returns [1×T×H×W] values in [0,1]. Identical specs render identical bits.
Tensor render_clip(const ClipSpec& spec, const FrameSize& size);

// Sampling ranges for generated specs.
struct GeneratorConfig {
  FrameSize size;
  double noise = 0.1;
  double min_speed = 1.0, max_speed = 2.0;
  double min_scale = 5.0, max_scale = 7.0;
  double min_foreground = 0.7, max_foreground = 1.0;
  double min_background = 0.05, max_background = 0.35;
  double max_texture = 0.15;
};

// Everything but the three class labels is drawn from `rng`, with the same
// distribution for every label combination.
ClipSpec sample_spec(Appearance appearance, Motion motion, Scene scene,
                     const GeneratorConfig& config, std::mt19937_64& rng);

// Seed of item `index` in stream `stream` (one stream per corpus split).
std::uint64_t item_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index);

// --- Clip container --------------------------------------------------------
//
// Little-endian: "MSHV", u32 version (1), u32 clip count, u16 C, T, H, W,
// u8 label flags (bit 0 appearance, bit 1 motion); then per clip an optional
// i32 appearance label, an optional i32 motion label and C·T·H·W f32 values.

inline constexpr std::uint8_t kHasAppearance = 1;
inline constexpr std::uint8_t kHasMotion = 2;

struct ContainerHeader {
  std::uint32_t count = 0;
  std::uint16_t channels = 1, frames = 1, height = 1, width = 1;
  std::uint8_t label_flags = 0;

  bool has_appearance() const { return (label_flags & kHasAppearance) != 0; }
  bool has_motion() const { return (label_flags & kHasMotion) != 0; }
  std::size_t clip_values() const {
    return std::size_t{channels} * frames * height * width;
  }
  std::size_t record_bytes() const;
};

inline constexpr std::size_t kContainerHeaderBytes = 21;

struct ClipRecord {
  std::vector<float> values;  // C·T·H·W
  std::optional<int> appearance;
  std::optional<int> motion;
};

class ContainerWriter {
 public:
  ContainerWriter(const std::filesystem::path& path, const ContainerHeader& header);
  // Labels must be present exactly when the header flags say so.
  void write(const ClipRecord& record);
  // Rejects a clip count different from the header's.
  void close();

 private:
  std::filesystem::path path_;
  ContainerHeader header_;
  std::ofstream out_;
  std::uint32_t written_ = 0;
};

class ContainerReader {
 public:
  explicit ContainerReader(const std::filesystem::path& path);

  const ContainerHeader& header() const { return header_; }
  std::size_t size() const { return header_.count; }
  const std::filesystem::path& path() const { return path_; }
  ClipRecord read(std::size_t index);

 private:
  std::filesystem::path path_;
  ContainerHeader header_;
  std::ifstream in_;
};

struct ClipBatch {
  Tensor clips;  // [B×C×T×H×W]
  std::vector<int> appearance;  // empty when the container has no such labels
  std::vector<int> motion;
  std::vector<std::size_t> indices;  // positions in the container
};

// Batches over a container. Each epoch visits every clip once, in file order
// or in a permutation seeded by (seed, epoch); the last batch may be short.
class ClipStream {
 public:
  ClipStream(const std::filesystem::path& path, std::size_t batch_size,
             std::optional<std::uint64_t> shuffle_seed);

  void start_epoch(std::size_t epoch);
  bool next(ClipBatch& batch);

  const ContainerHeader& header() const { return reader_.header(); }
  std::size_t batches_per_epoch() const;
  ContainerReader& reader() { return reader_; }

 private:
  ContainerReader reader_;
  std::size_t batch_size_;
  std::optional<std::uint64_t> seed_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

// Reads the given container positions as one batch.
ClipBatch read_batch(ContainerReader& reader, const std::vector<std::size_t>& indices);

// --- Corpora ---------------------------------------------------------------

enum class Corpus {
  kTeacherImages,
  kTeacherImagesVal,
  kTeacherScenes,
  kTeacherScenesVal,
  kDistillVideos,
  kTargetTrain,
  kTargetTest,
};

std::string_view corpus_file_name(Corpus corpus);

struct CorpusSizes {
  std::size_t teacher_images = 20000;
  std::size_t teacher_val = 2000;
  std::size_t distill_videos = 10000;
  std::size_t target_train = 2000;
  std::size_t target_test = 1000;
};

// Writes one corpus. Image corpora hold single frames (T=1) labelled in the
// appearance slot: shape kind for teacher-images, scene kind for
// teacher-scenes. Distillation clips carry no labels; target clips carry
// shape and motion labels. Labels are assigned round-robin.
void build_corpus(Corpus corpus, std::size_t count, std::uint64_t seed,
                  const GeneratorConfig& config, const std::filesystem::path& path);

void build_all(const std::filesystem::path& dir, const CorpusSizes& sizes, std::uint64_t seed,
               const GeneratorConfig& config);

}  // namespace vidistill::data
