#include "inflation.hpp"

#include <map>
#include <sstream>

#include "error.hpp"

namespace vidistill::inflation {

namespace {

std::map<std::string, Tensor> by_name(const nn::ParameterSet<float>& set) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : set.parameters) out.emplace(name, t);
  for (const auto& [name, t] : set.buffers) out.emplace(name, t);
  return out;
}

bool inflatable(const Shape& flat, const Shape& deep) {
  return flat.size() == 4 && deep.size() == 5 && deep[0] == flat[0] && deep[1] == flat[1] &&
         deep[3] == flat[2] && deep[4] == flat[3];
}

}  // namespace

void inflate(const nn::TeacherNet2D& teacher, nn::StudentNet& student, const InflateOptions& options) {
  if (student.kind() != nn::ModelKind::kRes3d) {
    usage_error("inflation needs a res3d-tiny student, got ", nn::model_name(student.kind()),
                " (factorized convolutions have no 2D counterpart)");
  }
  const auto source = by_name(teacher.trunk_state());
  auto target = by_name(student.trunk_state());

  std::vector<std::string> offending;
  for (const auto& [name, t] : source) {
    auto it = target.find(name);
    if (it == target.end()) {
      offending.push_back(name + " (missing in student)");
    } else if (t.shape() != it->second.shape() && !inflatable(t.shape(), it->second.shape())) {
      offending.push_back(name + " (" + shape_str(t.shape()) + " vs " + shape_str(it->second.shape()) + ")");
    }
  }
  for (const auto& [name, t] : target)
    if (!source.count(name)) offending.push_back(name + " (missing in teacher)");
  if (!offending.empty()) {
    std::ostringstream os;
    for (std::size_t i = 0; i < offending.size(); ++i) os << (i ? ", " : "") << offending[i];
    usage_error("teacher and student trunks do not correspond: ", os.str());
  }

  for (auto& [name, dst] : target) {
    const Tensor& src = source.at(name);
    const auto sv = src.data();
    auto dv = dst.mutable_data();
    if (src.shape() == dst.shape()) {
      std::copy(sv.begin(), sv.end(), dv.begin());
      continue;
    }
    const auto& ds = dst.shape();
    const std::size_t kt = ds[2], plane = ds[3] * ds[4], pairs = ds[0] * ds[1];
    const float divisor = options.scaled ? static_cast<float>(kt) : 1.0f;
    for (std::size_t p = 0; p < pairs; ++p)
      for (std::size_t t = 0; t < kt; ++t)
        for (std::size_t i = 0; i < plane; ++i)
          dv[(p * kt + t) * plane + i] = sv[p * plane + i] / divisor;
  }
}

}  // namespace vidistill::inflation
