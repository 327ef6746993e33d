#include "checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <vector>

#include "error.hpp"
#include "models.hpp"

namespace vidistill::io {

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

bool known_model_name(std::string_view name) {
  if (name == kFeatureTableName) return true;
  for (auto kind : {nn::ModelKind::kTeacher2d, nn::ModelKind::kRes3d, nn::ModelKind::kR2Plus1d})
    if (nn::model_name(kind) == name) return true;
  return false;
}

const Tensor* Checkpoint::find(std::string_view name) const {
  for (const auto& [n, t] : entries)
    if (n == name) return &t;
  return nullptr;
}

const Tensor& Checkpoint::at(std::string_view name) const {
  if (const auto* t = find(name)) return *t;
  data_error("checkpoint has no entry '", name, "'");
}

namespace {

template <typename T>
void put(std::string& out, T value) {
  const auto* p = reinterpret_cast<const char*>(&value);
  out.append(p, sizeof(T));
}

void put_string(std::string& out, std::string_view s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

class Cursor {
 public:
  Cursor(const std::vector<char>& bytes, const std::filesystem::path& path) : bytes_(bytes), path_(path) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    need(n, what);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  void get_floats(float* dst, std::size_t count, const char* what) {
    need(count * sizeof(float), what);
    std::memcpy(dst, bytes_.data() + pos_, count * sizeof(float));
    pos_ += count * sizeof(float);
  }

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      data_error(path_.string(), ": truncated ", what, " at offset ", pos_);
    }
  }

  const std::vector<char>& bytes_;
  const std::filesystem::path& path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  if (!known_model_name(checkpoint.meta.model)) {
    usage_error("unknown model name '", checkpoint.meta.model, "' for checkpoint");
  }
  std::string out;
  out.append("DCKP");
  put<std::uint32_t>(out, 1);
  put_string(out, checkpoint.meta.model);
  put(out, checkpoint.meta.epoch);
  put(out, checkpoint.meta.config_hash);
  put(out, checkpoint.meta.seed);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(checkpoint.entries.size()));
  for (const auto& [name, t] : checkpoint.entries) {
    put_string(out, name);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    const auto v = t.data();
    out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) data_error("cannot open ", path.string(), " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) data_error("write failed on ", path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) data_error("cannot open checkpoint ", path.string());
  const std::vector<char> bytes{std::istreambuf_iterator<char>(f), {}};
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "DCKP", 4) != 0) {
    data_error(path.string(), ": bad checkpoint magic at offset 0");
  }
  Cursor c(bytes, path);
  c.get<std::uint32_t>("magic");
  const auto version = c.get<std::uint32_t>("version");
  if (version != 1) data_error(path.string(), ": unsupported checkpoint version ", version, " at offset 4");
  Checkpoint ck;
  const auto name_offset = c.offset();
  ck.meta.model = c.get_string("model name");
  if (!known_model_name(ck.meta.model)) {
    data_error(path.string(), ": unknown model name '", ck.meta.model, "' at offset ", name_offset);
  }
  ck.meta.epoch = c.get<std::uint32_t>("epoch");
  ck.meta.config_hash = c.get<std::uint64_t>("config hash");
  ck.meta.seed = c.get<std::uint64_t>("seed");
  const auto count = c.get<std::uint32_t>("entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = c.get_string("entry name");
    const auto rank = c.get<std::uint8_t>("entry rank");
    Shape shape(rank);
    for (auto& d : shape) {
      d = c.get<std::uint32_t>("entry dims");
      if (d == 0) data_error(path.string(), ": zero dimension in entry '", name, "'");
    }
    std::vector<float> values(numel(shape));
    c.get_floats(values.data(), values.size(), "entry payload");
    ck.entries.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!c.done()) data_error(path.string(), ": trailing bytes at offset ", c.offset());
  return ck;
}

nn::NamedTensors<float> flatten(const nn::ParameterSet<float>& state) {
  auto out = state.parameters;
  out.insert(out.end(), state.buffers.begin(), state.buffers.end());
  return out;
}

void assign_state(const nn::ParameterSet<float>& target, const Checkpoint& checkpoint,
                  std::initializer_list<std::string_view> ignored_prefixes) {
  std::map<std::string_view, const Tensor*> source;
  for (const auto& [name, t] : checkpoint.entries) source.emplace(name, &t);
  std::vector<std::string> problems;
  auto targets = flatten(target);
  for (const auto& [name, t] : targets) {
    auto it = source.find(name);
    if (it == source.end()) {
      problems.push_back(name + " (missing)");
    } else if (it->second->shape() != t.shape()) {
      problems.push_back(name + " (" + shape_str(it->second->shape()) + " vs " + shape_str(t.shape()) + ")");
    }
    if (it != source.end()) source.erase(it);
  }
  for (const auto& [name, t] : source) {
    const bool ignored = std::any_of(ignored_prefixes.begin(), ignored_prefixes.end(),
                                     [&](std::string_view p) { return name.starts_with(p); });
    if (!ignored) problems.push_back(std::string(name) + " (unexpected)");
  }
  if (!problems.empty()) {
    std::ostringstream os;
    for (std::size_t i = 0; i < problems.size(); ++i) os << (i ? ", " : "") << problems[i];
    data_error("checkpoint '", checkpoint.meta.model, "' does not fit the model: ", os.str());
  }
  for (auto& [name, t] : targets) {
    const auto v = checkpoint.at(name).data();
    std::copy(v.begin(), v.end(), t.mutable_data().begin());
  }
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t hash) {
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::uint64_t file_hash(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) data_error("cannot open ", path.string());
  const std::string bytes{std::istreambuf_iterator<char>(f), {}};
  return fnv1a(bytes);
}

std::uint64_t state_hash(const nn::ParameterSet<float>& state) {
  std::uint64_t h = fnv1a("");
  for (const auto& [name, t] : flatten(state)) {
    h = fnv1a(name, h);
    const auto v = t.data();
    h = fnv1a({reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float)}, h);
  }
  return h;
}

}  // namespace vidistill::io
