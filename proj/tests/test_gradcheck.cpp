#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "ops.hpp"

using namespace vidistill;

TEST_CASE("finite-difference checker detects a wrong gradient") {
  // Correct rule for x², then a deliberately scaled copy of it.
  gradcheck::Function square = [](const std::vector<BasicTensor<double>>& in) { return ops::mul(in[0], in[0]); };
  BasicTensor<double> x({3}, {0.3, -0.7, 1.1}, true);
  CHECK(gradcheck::max_relative_error(square, {x}, 1) < 1e-8);

  gradcheck::Function wrong = [](const std::vector<BasicTensor<double>>& in) {
    auto y = ops::mul(in[0], in[0]);
    return make_result<double>(y.shape(), std::vector<double>(y.data().begin(), y.data().end()), {in[0]},
                               [](Node<double>& self) {
                                 auto& g = self.inputs[0]->pass_grad_buffer();
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += 3.0 * self.inputs[0]->value[i] * self.pass_grad[i];
                               });
  };
  BasicTensor<double> x2({3}, {0.3, -0.7, 1.1}, true);
  CHECK(gradcheck::max_relative_error(wrong, {x2}, 1) > 0.1);
}

TEST_CASE("every layer and loss passes the gradient suite") {
  const auto results = gradcheck::run_suite(7, 20);
  CHECK(results.size() >= 10);
  for (const auto& r : results) {
    INFO(r.name, " max error ", r.max_error);
    CHECK(r.instances == 20);
    CHECK(r.passed);
  }
}
