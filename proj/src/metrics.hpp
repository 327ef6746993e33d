#pragma once

// Line-delimited JSON metrics. Each row is one object with the fields
//   phase, kind ("step", "epoch" or "eval"), epoch, step, wall_time
// and, when known, loss, lr, clip_accuracy, top1, topk, k, teacher_losses,
// teacher_weights, kept, dropped. Rows are appended in nondecreasing
// (epoch, step) order within a run.

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace vidistill::metrics {

struct Row {
  std::string phase;
  std::string kind = "step";
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::optional<double> loss;
  std::optional<double> lr;
  std::optional<double> clip_accuracy;
  std::optional<double> top1;
  std::optional<double> topk;
  std::optional<std::size_t> k;
  std::vector<double> teacher_losses;
  std::vector<double> teacher_weights;
  std::optional<std::size_t> kept;
  std::optional<std::size_t> dropped;
};

class Log {
 public:
  // Truncates `path`; an empty path discards rows.
  explicit Log(const std::filesystem::path& path);

  void append(Row row);
  double elapsed() const;
  const std::vector<Row>& rows() const { return rows_; }

 private:
  std::ofstream out_;
  std::chrono::steady_clock::time_point start_;
  std::vector<Row> rows_;
};

std::filesystem::path metrics_path(const std::filesystem::path& checkpoint_path);

}  // namespace vidistill::metrics
