#include "metrics.hpp"

#include "error.hpp"
#include "json.hpp"

namespace vidistill::metrics {

Log::Log(const std::filesystem::path& path) : start_(std::chrono::steady_clock::now()) {
  if (path.empty()) return;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::trunc);
  if (!out_) data_error("cannot write metrics to ", path.string());
}

double Log::elapsed() const {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
}

void Log::append(Row row) {
  if (!rows_.empty()) {
    const auto& last = rows_.back();
    if (row.epoch < last.epoch || (row.epoch == last.epoch && row.step < last.step)) {
      usage_error("metrics rows must be appended in (epoch, step) order");
    }
  }
  if (out_.is_open()) {
    nlohmann::ordered_json j;
    j["phase"] = row.phase;
    j["kind"] = row.kind;
    j["epoch"] = row.epoch;
    j["step"] = row.step;
    auto opt = [&j](const char* key, const auto& v) {
      if (v) j[key] = *v;
    };
    opt("loss", row.loss);
    opt("lr", row.lr);
    opt("clip_accuracy", row.clip_accuracy);
    opt("top1", row.top1);
    opt("topk", row.topk);
    opt("k", row.k);
    if (!row.teacher_losses.empty()) j["teacher_losses"] = row.teacher_losses;
    if (!row.teacher_weights.empty()) j["teacher_weights"] = row.teacher_weights;
    opt("kept", row.kept);
    opt("dropped", row.dropped);
    j["wall_time"] = elapsed();
    out_ << j.dump() << '\n';
    out_.flush();
  }
  rows_.push_back(std::move(row));
}

std::filesystem::path metrics_path(const std::filesystem::path& checkpoint_path) {
  auto p = checkpoint_path;
  p += ".metrics.jsonl";
  return p;
}

}  // namespace vidistill::metrics
