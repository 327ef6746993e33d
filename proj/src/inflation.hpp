#pragma once

#include "models.hpp"

namespace vidistill::inflation {

struct InflateOptions {
  // Divide each replicated slice by the temporal extent so a clip of
  // identical frames reproduces the 2D activations.
  bool scaled = true;
};

// Copies the teacher trunk into a res3d student. Each 2D conv weight
// [O×C×kh×kw] becomes [O×C×kt×kh×kw] with every temporal slice equal to the
// 2D kernel (divided by kt when scaled). Norm parameters and running
// statistics are copied verbatim; student heads are left untouched.
// Any unmatched name or incompatible shape is rejected, listing them all.
void inflate(const nn::TeacherNet2D& teacher, nn::StudentNet& student,
             const InflateOptions& options = {});

}  // namespace vidistill::inflation
