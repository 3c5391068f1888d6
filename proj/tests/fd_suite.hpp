#pragma once

// Finite-difference verification of every primitive op: the shared oracle
// behind the tensor unit tests and the acceptance gate. Inputs are drawn
// from [-2, 2] (shifted into each op's smooth domain where needed; clamp
// inputs are kept >= 10*eps away from the boundaries). round_ste is checked
// against the reference function of its gradient convention (identity
// through the rounding), since its raw forward is flat a.e.

#include <functional>
#include <string>
#include <vector>

#include "fgq/rng.hpp"
#include "fgq/tensor.hpp"

namespace fdsuite {

struct OpResult {
  std::string name;
  double max_rel_err = 0.0;
};

using Builder = std::function<fgq::Tensor(const std::vector<fgq::Tensor>&)>;

inline double rel_err(double ad, double fd) {
  double d = std::fabs(ad - fd);
  return d / std::max(1.0, std::fabs(fd));
}

// max over inputs/coords of the backward-vs-central-difference error of
// sum(build(inputs) * w) for a fixed random w
inline double check_grads(const Builder& build, std::vector<fgq::Tensor> inputs, fgq::Rng& rng,
                          double eps, const Builder& fd_build = nullptr) {
  using namespace fgq;
  for (auto& t : inputs) t.set_requires_grad(true);

  Tensor out0;
  {
    Tape probe;
    TapeScope scope(probe);
    out0 = build(inputs);
  }
  std::vector<double> wdata(out0.size());
  for (double& v : wdata) v = rng.uniform(-1.0, 1.0);
  Tensor w = Tensor::from_data(out0.shape(), wdata);

  Tape tape;
  std::vector<std::vector<double>> grads;
  {
    TapeScope scope(tape);
    Tensor s = sum(mul(build(inputs), w));
    tape.backward(s);
  }
  for (auto& t : inputs) grads.push_back(t.grad());

  const Builder& fb = fd_build ? fd_build : build;
  double worst = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    auto f = [&](const Tensor& x) {
      std::vector<Tensor> ins;
      for (size_t k = 0; k < inputs.size(); ++k) ins.push_back(k == i ? x.detach() : inputs[k].detach());
      return sum(mul(fb(ins), w)).item();
    };
    Tensor fd = finite_difference_grad(f, inputs[i], eps);
    for (int64_t k = 0; k < fd.size(); ++k) {
      worst = std::max(worst, rel_err(grads[i][k], fd.data()[k]));
    }
  }
  return worst;
}

inline fgq::Tensor rand_tensor(fgq::Rng& rng, fgq::Shape shape, double lo = -2.0, double hi = 2.0) {
  std::vector<double> d(fgq::shape_numel(shape));
  for (double& v : d) v = rng.uniform(lo, hi);
  return fgq::Tensor::from_data(std::move(shape), std::move(d));
}

// all primitive ops, `instances` random instances each; eps = 1e-6
inline std::vector<OpResult> run_fd_suite(int instances, uint64_t seed) {
  using namespace fgq;
  const double eps = 1e-6;
  Rng rng(seed);
  std::vector<OpResult> results;

  auto run = [&](const char* name, auto make_inputs, const Builder& build,
                 const Builder& fd_build = nullptr) {
    OpResult r;
    r.name = name;
    for (int i = 0; i < instances; ++i) {
      r.max_rel_err = std::max(r.max_rel_err, check_grads(build, make_inputs(), rng, eps, fd_build));
    }
    results.push_back(r);
  };

  run("add", [&] { return std::vector<Tensor>{rand_tensor(rng, {2, 3}), rand_tensor(rng, {2, 3})}; },
      [](const std::vector<Tensor>& in) { return add(in[0], in[1]); });
  run("add_broadcast", [&] { return std::vector<Tensor>{rand_tensor(rng, {2, 3, 4}), rand_tensor(rng, {4})}; },
      [](const std::vector<Tensor>& in) { return add(in[0], in[1]); });
  run("sub", [&] { return std::vector<Tensor>{rand_tensor(rng, {3, 2}), rand_tensor(rng, {2})}; },
      [](const std::vector<Tensor>& in) { return sub(in[0], in[1]); });
  run("mul", [&] { return std::vector<Tensor>{rand_tensor(rng, {2, 3, 2}), rand_tensor(rng, {3, 2})}; },
      [](const std::vector<Tensor>& in) { return mul(in[0], in[1]); });
  run("affine", [&] { return std::vector<Tensor>{rand_tensor(rng, {5})}; },
      [](const std::vector<Tensor>& in) { return affine(in[0], 1.7, -0.3); });
  run("matmul_2d", [&] { return std::vector<Tensor>{rand_tensor(rng, {2, 3}), rand_tensor(rng, {3, 4})}; },
      [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); });
  run("matmul_3d3d",
      [&] { return std::vector<Tensor>{rand_tensor(rng, {2, 2, 3}), rand_tensor(rng, {2, 3, 2})}; },
      [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); });
  run("matmul_3d2d",
      [&] { return std::vector<Tensor>{rand_tensor(rng, {2, 3, 2}), rand_tensor(rng, {2, 3})}; },
      [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); });
  run("transpose2", [&] { return std::vector<Tensor>{rand_tensor(rng, {2, 3, 4})}; },
      [](const std::vector<Tensor>& in) { return transpose2(in[0]); });
  run("reshape", [&] { return std::vector<Tensor>{rand_tensor(rng, {2, 6})}; },
      [](const std::vector<Tensor>& in) { return reshape(in[0], {3, 4}); });
  run("concat",
      [&] { return std::vector<Tensor>{rand_tensor(rng, {2, 2, 3}), rand_tensor(rng, {2, 4, 3})}; },
      [](const std::vector<Tensor>& in) { return concat({in[0], in[1]}, 1); });
  run("slice", [&] { return std::vector<Tensor>{rand_tensor(rng, {2, 5, 2})}; },
      [](const std::vector<Tensor>& in) { return slice(in[0], 1, 1, 3); });
  run("sum", [&] { return std::vector<Tensor>{rand_tensor(rng, {3, 4})}; },
      [](const std::vector<Tensor>& in) { return sum(in[0]); });
  run("mean", [&] { return std::vector<Tensor>{rand_tensor(rng, {3, 4})}; },
      [](const std::vector<Tensor>& in) { return mean(in[0]); });
  run("mean_axis", [&] { return std::vector<Tensor>{rand_tensor(rng, {2, 4, 3})}; },
      [](const std::vector<Tensor>& in) { return mean_axis(in[0], 1); });
  run("square", [&] { return std::vector<Tensor>{rand_tensor(rng, {4, 3})}; },
      [](const std::vector<Tensor>& in) { return square(in[0]); });
  run("sqrt", [&] { return std::vector<Tensor>{rand_tensor(rng, {4, 3}, 0.1, 2.0)}; },
      [](const std::vector<Tensor>& in) { return sqrt(in[0]); });
  run("exp", [&] { return std::vector<Tensor>{rand_tensor(rng, {3, 3})}; },
      [](const std::vector<Tensor>& in) { return exp(in[0]); });
  run("recip",
      [&] {
        Tensor t = rand_tensor(rng, {3, 3}, 0.2, 2.0);
        for (size_t i = 0; i < t.data().size(); i += 2) t.data()[i] = -t.data()[i];
        return std::vector<Tensor>{t};
      },
      [](const std::vector<Tensor>& in) { return recip(in[0]); });
  run("gelu", [&] { return std::vector<Tensor>{rand_tensor(rng, {4, 3})}; },
      [](const std::vector<Tensor>& in) { return gelu(in[0]); });
  run("softmax", [&] { return std::vector<Tensor>{rand_tensor(rng, {3, 5})}; },
      [](const std::vector<Tensor>& in) { return softmax(in[0]); });
  run("layernorm",
      [&] {
        return std::vector<Tensor>{rand_tensor(rng, {3, 4}), rand_tensor(rng, {4}, 0.5, 1.5),
                                   rand_tensor(rng, {4})};
      },
      [](const std::vector<Tensor>& in) { return layernorm(in[0], in[1], in[2], 1e-5); });
  run("clamp",
      [&] {
        Tensor t = rand_tensor(rng, {4, 4});
        for (double& v : t.data()) {  // keep >= 10*eps away from the boundaries at +-1
          while (std::fabs(std::fabs(v) - 1.0) < 1e-5) v = rng.uniform(-2.0, 2.0);
        }
        return std::vector<Tensor>{t};
      },
      [](const std::vector<Tensor>& in) { return clamp(in[0], -1.0, 1.0); });
  // round_ste: gradient contract is straight-through; its reference function
  // for differencing is the identity path
  run("round_ste", [&] { return std::vector<Tensor>{rand_tensor(rng, {4, 3})}; },
      [](const std::vector<Tensor>& in) { return round_ste(in[0]); },
      [](const std::vector<Tensor>& in) { return affine(in[0], 1.0, 0.0); });
  run("mat_solve",
      [&] {
        Tensor a = rand_tensor(rng, {3, 3}, -0.3, 0.3);
        for (int i = 0; i < 3; ++i) a.data()[i * 3 + i] += 1.0;
        return std::vector<Tensor>{a, rand_tensor(rng, {3, 2})};
      },
      [](const std::vector<Tensor>& in) { return mat_solve(in[0], in[1]); });

  return results;
}

}  // namespace fdsuite
