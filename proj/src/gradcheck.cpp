#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "error.hpp"
#include "layers.hpp"
#include "ops.hpp"

namespace vidistill::gradcheck {

using D = BasicTensor<double>;

namespace {

D random_leaf(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return D(std::move(shape), std::move(v), true);
}

double project(const D& out, const std::vector<double>& r) {
  double s = 0.0;
  const auto v = out.data();
  for (std::size_t i = 0; i < v.size(); ++i) s += r[i] * v[i];
  return s;
}

}  // namespace

double max_relative_error(const Function& f, std::vector<D> inputs, std::uint64_t projection_seed,
                          const Options& options) {
  for (const auto& x : inputs)
    if (!x.is_leaf() || !x.requires_grad()) usage_error("gradcheck inputs must be leaves requiring grad");
  std::vector<double> r;
  {
    const auto out = f(inputs);
    std::mt19937_64 rng(projection_seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    r.resize(out.numel());
    for (auto& x : r) x = dist(rng);
    for (auto& x : inputs) x.zero_grad();
    const D weights(out.shape(), r);
    ops::sum(ops::mul(out, weights)).backward();
  }
  double worst = 0.0;
  NoGradGuard no_grad;
  for (auto& x : inputs) {
    const std::vector<double> analytic(x.grad().begin(), x.grad().end());
    auto v = x.mutable_data();
    double diff = 0.0, scale = options.floor;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i];
      v[i] = saved + options.epsilon;
      const double up = project(f(inputs), r);
      v[i] = saved - options.epsilon;
      const double down = project(f(inputs), r);
      v[i] = saved;
      const double numeric = (up - down) / (2.0 * options.epsilon);
      diff = std::max(diff, std::abs(analytic[i] - numeric));
      scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric)});
    }
    worst = std::max(worst, diff / scale);
  }
  return worst;
}

namespace {

struct Case {
  std::string name;
  // Builds one random instance: the function and its inputs.
  std::function<std::pair<Function, std::vector<D>>(std::mt19937_64&)> make;
};

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Values bounded away from zero so no input sits within ε of the kink.
D away_from_zero(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return D(std::move(shape), std::move(v), true);
}

D soft_rows(std::size_t rows, std::size_t k, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(0.05, 1.0);
  std::vector<double> v(rows * k);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += v[r * k + j] = dist(rng);
    for (std::size_t j = 0; j < k; ++j) v[r * k + j] /= s;
  }
  return D({rows, k}, std::move(v));
}

std::vector<Case> cases() {
  std::vector<Case> out;
  out.push_back({"conv2d", [](std::mt19937_64& rng) {
    const std::size_t b = pick(rng, 1, 2), c = pick(rng, 1, 3), o = pick(rng, 1, 3);
    const std::size_t kh = pick(rng, 1, 3), kw = pick(rng, 1, 3);
    ops::Conv2dGeometry g{{pick(rng, 1, 2), pick(rng, 1, 2)}, {pick(rng, 0, kh / 2), pick(rng, 0, kw / 2)}};
    auto x = random_leaf({b, c, pick(rng, kh, 6), pick(rng, kw, 6)}, rng);
    auto w = random_leaf({o, c, kh, kw}, rng);
    auto bias = random_leaf({o}, rng);
    Function f = [g](const std::vector<D>& in) { return ops::conv2d(in[0], in[1], in[2], g); };
    return std::pair{f, std::vector<D>{x, w, bias}};
  }});
  out.push_back({"conv3d", [](std::mt19937_64& rng) {
    const std::size_t b = pick(rng, 1, 2), c = pick(rng, 1, 2), o = pick(rng, 1, 3);
    const std::size_t kt = pick(rng, 1, 3), kh = pick(rng, 1, 3), kw = pick(rng, 1, 3);
    ops::Conv3dGeometry g{{pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, 1, 2)},
                          {pick(rng, 0, kt / 2), pick(rng, 0, kh / 2), pick(rng, 0, kw / 2)}};
    auto x = random_leaf({b, c, pick(rng, kt, 4), pick(rng, kh, 5), pick(rng, kw, 5)}, rng);
    auto w = random_leaf({o, c, kt, kh, kw}, rng);
    auto bias = random_leaf({o}, rng);
    Function f = [g](const std::vector<D>& in) { return ops::conv3d(in[0], in[1], in[2], g); };
    return std::pair{f, std::vector<D>{x, w, bias}};
  }});
  out.push_back({"conv2plus1d", [](std::mt19937_64& rng) {
    const std::size_t c = pick(rng, 1, 2), o = pick(rng, 1, 3);
    const std::size_t kt = 3, kh = 3, kw = 3;
    nn::Conv2Plus1d<double> layer(c, o, kt, kh, kw, {{1, pick(rng, 1, 2), pick(rng, 1, 2)}, {1, 1, 1}});
    layer.reset_parameters(rng);
    auto x = random_leaf({2, c, pick(rng, 2, 4), pick(rng, 3, 5), pick(rng, 3, 5)}, rng);
    std::vector<D> inputs{x, layer.spatial.weight, layer.mid_bn.gamma, layer.mid_bn.beta, layer.temporal.weight};
    for (auto& t : inputs) t = random_leaf(t.shape(), rng);
    auto shared = std::make_shared<nn::Conv2Plus1d<double>>(std::move(layer));
    Function f = [shared](const std::vector<D>& in) {
      shared->spatial.weight = in[1];
      shared->mid_bn.gamma = in[2];
      shared->mid_bn.beta = in[3];
      shared->temporal.weight = in[4];
      return shared->forward(in[0]);
    };
    return std::pair{f, inputs};
  }});
  out.push_back({"batchnorm-train", [](std::mt19937_64& rng) {
    const std::size_t c = pick(rng, 1, 3);
    auto x = random_leaf({pick(rng, 2, 3), c, pick(rng, 1, 3), pick(rng, 2, 3)}, rng);
    auto gamma = random_leaf({c}, rng, 0.5, 1.5);
    auto beta = random_leaf({c}, rng);
    auto stats = std::make_shared<std::pair<D, D>>(D::zeros({c}), D::full({c}, 1.0));
    Function f = [stats](const std::vector<D>& in) {
      return ops::batch_norm(in[0], in[1], in[2], stats->first, stats->second, {true, 0.1, 1e-5});
    };
    return std::pair{f, std::vector<D>{x, gamma, beta}};
  }});
  out.push_back({"batchnorm-eval", [](std::mt19937_64& rng) {
    const std::size_t c = pick(rng, 1, 3);
    auto x = random_leaf({pick(rng, 1, 3), c, pick(rng, 1, 3), pick(rng, 1, 3)}, rng);
    auto gamma = random_leaf({c}, rng, 0.5, 1.5);
    auto beta = random_leaf({c}, rng);
    auto stats = std::make_shared<std::pair<D, D>>(random_leaf({c}, rng), random_leaf({c}, rng, 0.5, 2.0));
    stats->first.set_requires_grad(false);
    stats->second.set_requires_grad(false);
    Function f = [stats](const std::vector<D>& in) {
      return ops::batch_norm(in[0], in[1], in[2], stats->first, stats->second, {false, 0.1, 1e-5});
    };
    return std::pair{f, std::vector<D>{x, gamma, beta}};
  }});
  out.push_back({"linear", [](std::mt19937_64& rng) {
    const std::size_t in = pick(rng, 1, 6), o = pick(rng, 1, 5);
    auto x = random_leaf({pick(rng, 1, 4), in}, rng);
    auto w = random_leaf({o, in}, rng);
    auto b = random_leaf({o}, rng);
    Function f = [](const std::vector<D>& v) { return ops::linear(v[0], v[1], v[2]); };
    return std::pair{f, std::vector<D>{x, w, b}};
  }});
  out.push_back({"global-avg-pool", [](std::mt19937_64& rng) {
    auto x = random_leaf({pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)}, rng);
    Function f = [](const std::vector<D>& v) { return ops::global_avg_pool(v[0]); };
    return std::pair{f, std::vector<D>{x}};
  }});
  out.push_back({"relu", [](std::mt19937_64& rng) {
    auto x = away_from_zero({pick(rng, 1, 4), pick(rng, 1, 6)}, rng);
    Function f = [](const std::vector<D>& v) { return ops::relu(v[0]); };
    return std::pair{f, std::vector<D>{x}};
  }});
  out.push_back({"residual-add", [](std::mt19937_64& rng) {
    const Shape s{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)};
    auto a = random_leaf(s, rng);
    auto b = random_leaf(s, rng);
    Function f = [](const std::vector<D>& v) { return ops::add(v[0], v[1]); };
    return std::pair{f, std::vector<D>{a, b}};
  }});
  out.push_back({"soft-target-loss", [](std::mt19937_64& rng) {
    const std::size_t rows = pick(rng, 1, 5), k = pick(rng, 2, 8);
    auto z = random_leaf({rows, k}, rng, -2.0, 2.0);
    auto y = soft_rows(rows, k, rng);
    Function f = [y](const std::vector<D>& v) { return ops::soft_cross_entropy(v[0], y); };
    return std::pair{f, std::vector<D>{z}};
  }});
  out.push_back({"mse-logit-loss", [](std::mt19937_64& rng) {
    const std::size_t rows = pick(rng, 1, 5), k = pick(rng, 2, 8);
    auto z = random_leaf({rows, k}, rng, -2.0, 2.0);
    auto t = random_leaf({rows, k}, rng, -2.0, 2.0);
    t.set_requires_grad(false);
    Function f = [t](const std::vector<D>& v) { return ops::mse(v[0], t); };
    return std::pair{f, std::vector<D>{z}};
  }});
  return out;
}

}  // namespace

std::vector<CheckResult> run_suite(std::uint64_t seed, std::size_t instances, const Options& options) {
  std::vector<CheckResult> results;
  std::uint64_t case_index = 0;
  for (const auto& c : cases()) {
    CheckResult r;
    r.name = c.name;
    for (std::size_t i = 0; i < instances; ++i) {
      std::mt19937_64 rng(seed * 1000003 + case_index * 7919 + i);
      auto [f, inputs] = c.make(rng);
      r.max_error = std::max(r.max_error, max_relative_error(f, std::move(inputs), rng(), options));
      ++r.instances;
    }
    r.passed = r.max_error < options.tolerance;
    results.push_back(r);
    ++case_index;
  }
  return results;
}

}  // namespace vidistill::gradcheck
