#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "fgq/rng.hpp"
#include "fgq/toymodel.hpp"

using namespace fgq;

TEST_SUITE_BEGIN("toymodel");

namespace {
ToyModelConfig tiny_cfg() {
  ToyModelConfig cfg;
  cfg.aa_pairs = 1;
  cfg.tokens_per_view = 4;
  cfg.hidden_dim = 16;
  cfg.mlp_hidden = 32;
  return cfg;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.size(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}
}  // namespace

TEST_CASE("dataset: determinism, shapes, noise isolation") {
  ToyModelConfig cfg;  // default desk scale
  SyntheticDataset a = generate_dataset(cfg, 64, 42);
  SyntheticDataset b = generate_dataset(cfg, 64, 42);
  CHECK(bit_equal(a.inputs, b.inputs));
  CHECK(bit_equal(a.pose, b.pose));
  CHECK(bit_equal(a.depth, b.depth));
  CHECK(bit_equal(a.point, b.point));

  SyntheticDataset one = generate_dataset(cfg, 1, 7);
  CHECK(one.inputs.shape() == Shape{1, 2, 16, 8});
  CHECK(one.pose.shape() == Shape{1, 4});
  CHECK(one.depth.shape() == Shape{1, 2, 16});
  CHECK(one.point.shape() == Shape{1, 2, 16, 3});

  // sigma = 0 never consults the noise stream
  SyntheticDataset n1 = generate_dataset(cfg, 4, 5, 0.0, 111);
  SyntheticDataset n2 = generate_dataset(cfg, 4, 5, 0.0, 222);
  CHECK(bit_equal(n1.pose, n2.pose));
  CHECK(bit_equal(n1.depth, n2.depth));
  CHECK(bit_equal(n1.point, n2.point));

  CHECK_THROWS_AS(generate_dataset(cfg, 0, 1), std::invalid_argument);
}

TEST_CASE("forward: shapes and hook count") {
  ToyModelConfig cfg;  // defaults: N=2, K=16, C=32, B=3 -> L=6
  ToyModel m = init_model(cfg);
  SyntheticDataset d = generate_dataset(cfg, 3, 1);
  ForwardResult r = forward(m, d.inputs, nullptr, true);
  CHECK(r.out.pose.shape() == Shape{3, 4});
  CHECK(r.out.depth.shape() == Shape{3, 2, 16});
  CHECK(r.out.point.shape() == Shape{3, 2, 16, 3});
  CHECK(r.hooks.size() == 6);
  for (const auto& h : r.hooks) CHECK(h.shape() == Shape{3, 34, 32});
}

TEST_CASE("forward: zero-weight heads produce zero outputs") {
  ToyModelConfig cfg = tiny_cfg();
  ToyModel m = init_model(cfg);
  for (Linear* h : {&m.pose_head, &m.depth_head, &m.point_head}) {
    std::fill(h->w.data().begin(), h->w.data().end(), 0.0);
    std::fill(h->b.data().begin(), h->b.data().end(), 0.0);
  }
  SyntheticDataset d = generate_dataset(cfg, 2, 3);
  ForwardResult r = forward(m, d.inputs);
  for (double v : r.out.pose.data()) CHECK(v == 0.0);
  for (double v : r.out.depth.data()) CHECK(v == 0.0);
  for (double v : r.out.point.data()) CHECK(v == 0.0);
}

TEST_CASE("frame attention is per-view local, global attention is not") {
  ToyModelConfig cfg = tiny_cfg();  // block 0 frame, block 1 global
  ToyModel m = init_model(cfg);
  SyntheticDataset d = generate_dataset(cfg, 1, 9);

  Tensor zeroed = d.inputs.detach();
  int64_t view_sz = cfg.tokens_per_view * cfg.in_dim;
  for (int64_t i = 0; i < view_sz; ++i) zeroed.data()[view_sz + i] = 0.0;  // wipe view 2

  ForwardResult a = forward(m, d.inputs, nullptr, true);
  ForwardResult b = forward(m, zeroed, nullptr, true);

  // view-1 rows (tokens 0..K) bit-identical after the frame block
  int64_t vt = cfg.tokens_per_view + 1;
  int64_t c = cfg.hidden_dim;
  bool frame_equal = true;
  for (int64_t t = 0; t < vt; ++t)
    for (int64_t ch = 0; ch < c; ++ch)
      frame_equal = frame_equal && a.hooks[0].data()[t * c + ch] == b.hooks[0].data()[t * c + ch];
  CHECK(frame_equal);

  bool global_differs = false;
  for (int64_t t = 0; t < vt && !global_differs; ++t)
    for (int64_t ch = 0; ch < c; ++ch)
      if (a.hooks[1].data()[t * c + ch] != b.hooks[1].data()[t * c + ch]) global_differs = true;
  CHECK(global_differs);
}

TEST_CASE("permuting the two views permutes dense outputs identically") {
  ToyModelConfig cfg = tiny_cfg();
  ToyModel m = init_model(cfg);
  // make the two views interchangeable for this check
  std::vector<double> row0(m.special.data().begin(), m.special.data().begin() + cfg.hidden_dim);
  for (int i = 0; i < cfg.hidden_dim; ++i) m.special.data()[cfg.hidden_dim + i] = row0[i];

  SyntheticDataset d = generate_dataset(cfg, 2, 4);
  Tensor swapped = d.inputs.detach();
  int64_t view_sz = cfg.tokens_per_view * cfg.in_dim;
  for (int64_t n = 0; n < 2; ++n) {
    double* base = swapped.data().data() + n * 2 * view_sz;
    for (int64_t i = 0; i < view_sz; ++i) std::swap(base[i], base[view_sz + i]);
  }

  ForwardResult a = forward(m, d.inputs);
  ForwardResult b = forward(m, swapped);
  int64_t per_view = cfg.tokens_per_view;
  for (int64_t n = 0; n < 2; ++n) {
    for (int64_t k = 0; k < per_view; ++k) {
      double d1 = a.out.depth.data()[n * 2 * per_view + k];
      double d2 = b.out.depth.data()[n * 2 * per_view + per_view + k];
      CHECK(d1 == doctest::Approx(d2).epsilon(1e-12));
    }
  }
}

TEST_CASE("task losses: trivial and loop-oracle cases") {
  ToyModelConfig cfg = tiny_cfg();
  ToyModel m = init_model(cfg);
  SyntheticDataset d = generate_dataset(cfg, 3, 5);

  TaskOutputs exact{d.pose.detach(), d.depth.detach(), d.point.detach()};
  TaskLosses z = task_losses(exact, d);
  CHECK(z.camera.item() == 0.0);
  CHECK(z.depth.item() == 0.0);
  CHECK(z.point.item() == 0.0);

  TaskOutputs off{d.pose.detach(), affine(d.depth, 1.0, 1.0), d.point.detach()};
  TaskLosses l1 = task_losses(off, d);
  CHECK(l1.depth.item() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(l1.camera.item() == 0.0);

  ForwardResult r = forward(m, d.inputs);
  TaskLosses tl = task_losses(r.out, d);
  double camera = 0.0;
  for (int64_t i = 0; i < r.out.pose.size(); ++i) {
    double e = r.out.pose.data()[i] - d.pose.data()[i];
    camera += e * e;
  }
  camera /= static_cast<double>(r.out.pose.size());
  CHECK(std::fabs(tl.camera.item() - camera) <= 1e-12);
}

TEST_CASE("training: steps=0 no-op, trace length, divergence diagnostic") {
  ToyModelConfig cfg = tiny_cfg();
  ToyModel m = init_model(cfg);
  SyntheticDataset d = generate_dataset(cfg, 16, 6);

  std::vector<double> before = m.blocks[0].q.w.data();
  TrainConfig t0;
  t0.steps = 0;
  TrainResult r0 = train_toy(m, d, t0);
  CHECK(r0.trace.empty());
  for (size_t i = 0; i < before.size(); ++i) CHECK(m.blocks[0].q.w.data()[i] == before[i]);

  TrainConfig t1;
  t1.steps = 25;
  t1.batch_size = 8;
  TrainResult r1 = train_toy(m, d, t1);
  CHECK(r1.trace.size() == 25);

  // non-finite loss aborts with a step diagnostic
  ToyModel m2 = init_model(cfg);
  m2.blocks[0].q.w.data()[0] = std::nan("");
  TrainConfig bad;
  bad.steps = 5;
  try {
    train_toy(m2, d, bad);
    CHECK(false);
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("diverged") != std::string::npos);
  }
}

TEST_CASE("training: loss decreases and best-so-far is non-increasing") {
  ToyModelConfig cfg = tiny_cfg();
  ToyModel m = init_model(cfg);
  SyntheticDataset d = generate_dataset(cfg, 32, 8, 0.0);  // noiseless teacher
  TrainConfig tc;
  tc.steps = 150;
  tc.batch_size = 16;
  TrainResult r = train_toy(m, d, tc);
  CHECK(r.final_loss < 0.25 * r.initial_loss);
  double best = r.trace[0];
  for (double v : r.trace) {
    best = std::min(best, v);
    CHECK(best <= r.trace[0]);
  }
  CHECK(r.final_grad_rms >= 0.0);
}

TEST_CASE("hooks feed the next block exactly") {
  ToyModelConfig cfg = tiny_cfg();
  ToyModel m = init_model(cfg);
  SyntheticDataset d = generate_dataset(cfg, 2, 10);
  ForwardResult r = forward(m, d.inputs, nullptr, true);
  Tensor replay = block_forward(m, 1, r.hooks[0], nullptr);
  CHECK(bit_equal(replay, r.hooks[1]));
}

TEST_CASE("checkpoint round trip is bit-exact") {
  ToyModelConfig cfg = tiny_cfg();
  ToyModel m = init_model(cfg);
  std::string path = "/tmp/fgq_test_model.fgqc";
  save_model(path, m);
  ToyModel l = load_model(path);
  CHECK(l.cfg == m.cfg);
  auto a = m.named_parameters();
  auto b = l.named_parameters();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(bit_equal(a[i].second, b[i].second));
  }
  std::remove(path.c_str());
}

TEST_SUITE_END();
