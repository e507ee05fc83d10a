#include <doctest.h>

#include <cmath>
#include <fstream>

#include "hilgnn/trainer.hpp"
#include "support.hpp"

using namespace hilgnn;
using ad::Tensor;

namespace {

gnn::Prediction exact(const data::Sample& s) {
  const auto t = train::targets(s.grid, s.solution);
  return {t.bus, t.slack};
}

// Loss of a batch recomputed sample by sample from tape-free predictions.
double reference_total(const std::vector<data::Sample>& samples, const gnn::ModelParams& p, const train::LossConfig& cfg) {
  double total = 0.0;
  for (const auto& s : samples) {
    const auto pred = gnn::predict(p, gnn::build_graph(s.grid));
    total += train::supervised_loss(pred, train::targets(s.grid, s.solution), cfg.lambda_bus, cfg.lambda_slack);
    for (const auto& c : train::resolve_constraints(s.grid))
      total += cfg.lambda_constraint[static_cast<int>(c.kind)] * train::ctrloss(s.grid, pred, c);
  }
  return total / static_cast<double>(samples.size());
}

gnn::ModelParams small_params(std::uint64_t seed) {
  gnn::ModelConfig cfg;
  cfg.hidden = 8;
  cfg.seed = seed;
  return gnn::init_params(cfg);
}

}  // namespace

TEST_CASE("supervised loss") {
  const auto samples = data::generate(hilgnn::testing::wscc9(), 1, {0.7, 0.5, 3}).samples;
  const auto truth = train::targets(samples[0].grid, samples[0].solution);
  auto pred = exact(samples[0]);
  CHECK(train::supervised_loss(pred, truth, 1.0, 1.0) == 0.0);
  pred.y_b.array() += 0.3;
  pred.y_s.array() -= 2.0;
  CHECK(train::supervised_loss(pred, truth, 0.0, 0.0) == 0.0);

  // one bus, V off by 0.1: squared error 0.01 over 2 bus entries
  Eigen::MatrixX2d one(1, 2);
  one << 1.0, 0.0;
  train::Targets t{one, Eigen::MatrixX2d::Zero(1, 2)};
  gnn::Prediction p{one, Eigen::MatrixX2d::Zero(1, 2)};
  p.y_b(0, 0) += 0.1;
  CHECK(train::supervised_loss(p, t, 1.0, 1.0) == doctest::Approx(0.01 / 2.0).epsilon(1e-12));
}

TEST_CASE("constraint losses") {
  grid::GridCase g;
  g.buses = {{1, 0.9, 1.1, 1.0}, {2, 0.9, 1.1, 1.0}};
  g.lines = {{1, 2, 0.0, 0.1, 0.0, 0.5, 1.0}};
  g.generators = {{1, 0.0, 1.0, -1.0, 1.0, -0.5, 0.5}};
  g.slack = {1, 1.0, 0.0};
  gnn::Prediction p{Eigen::MatrixX2d(2, 2), Eigen::MatrixX2d(1, 2)};
  p.y_b << 1.0, 0.0, 1.0, -0.1;
  p.y_s << 0.2, 0.1;

  using train::ConstraintKind;
  CHECK(train::ctrloss(g, p, {ConstraintKind::BusVoltageBand, 1, 0.9, 1.1}) == 0.0);
  p.y_b(1, 0) = 1.15;
  CHECK(train::ctrloss(g, p, {ConstraintKind::BusVoltageBand, 1, 0.9, 1.1}) == doctest::Approx(0.0025).epsilon(1e-12));
  p.y_b(1, 0) = 1.0;
  p.y_s(0, 0) = 1.5;
  CHECK(train::ctrloss(g, p, {ConstraintKind::GenPCapacity, 0, -1.0, 1.0}) == doctest::Approx(0.25));
  p.y_s(0, 1) = -0.7;
  CHECK(train::ctrloss(g, p, {ConstraintKind::GenQCapacity, 0, -0.5, 0.5}) == doctest::Approx(0.04));

  // lossless line, |V| = 1 both ends, angle difference 0.1:
  // S_from = V1 conj((V1 - V2)/j0.1), |S| = |1 - e^{-j0.1}| / 0.1 at both ends
  const double s = std::abs(std::complex<double>(1.0, 0.0) - std::polar(1.0, -0.1)) / 0.1;
  CHECK(train::ctrloss(g, p, {ConstraintKind::LineFlowLimit, 0, 0.0, 0.5}) ==
        doctest::Approx(2.0 * (s - 0.5) * (s - 0.5)).epsilon(1e-12));
  CHECK(train::ctrloss(g, p, {ConstraintKind::LineFlowLimit, 0, 0.0, 2.0}) == 0.0);

  const auto specs = train::resolve_constraints(g);
  CHECK(specs.size() == 2 + 2 + 1);
}

TEST_CASE("total loss") {
  const auto samples = data::generate(hilgnn::testing::wscc9(), 4, {0.7, 0.5, 11}).samples;
  const auto batch = train::make_batch(samples);

  SUBCASE("matches the tape-free re-evaluation") {
    for (std::uint64_t seed : {0, 1, 2}) {
      const auto p = small_params(seed);
      ad::Tape tape;
      const train::LossConfig cfg;
      const auto terms = train::total_loss(batch, gnn::bind(tape, p), tape, cfg);
      CHECK(std::abs(terms.total.value()(0, 0) - reference_total(samples, p, cfg)) < 1e-12);
    }
  }
  SUBCASE("constraint weights zero gives the supervised mean") {
    const auto p = small_params(4);
    train::LossConfig cfg;
    cfg.lambda_constraint = {0, 0, 0, 0};
    ad::Tape tape;
    const auto terms = train::total_loss(batch, gnn::bind(tape, p), tape, cfg);
    double sup = 0.0;
    for (const auto& s : samples)
      sup += train::supervised_loss(gnn::predict(p, gnn::build_graph(s.grid)), train::targets(s.grid, s.solution), 1, 1);
    CHECK(terms.ctr.value()(0, 0) == 0.0);
    CHECK(std::abs(terms.total.value()(0, 0) - sup / 4.0) < 1e-12);
  }
  SUBCASE("non-negative, with a violating parameter set") {
    auto p = small_params(5);
    p.tensors[p.bus_head_b()](0, 0) = 3.0;
    ad::Tape tape;
    const auto terms = train::total_loss(batch, gnn::bind(tape, p), tape, {});
    CHECK(terms.ctr.value()(0, 0) > 0.0);
    CHECK(terms.total.value()(0, 0) >= terms.ctr.value()(0, 0));
  }
  SUBCASE("gradients match finite differences") {
    const auto two = std::vector<data::Sample>(samples.begin(), samples.begin() + 2);
    const auto b2 = train::make_batch(two);
    auto p = small_params(6);
    ad::Tape tape;
    const auto bound = gnn::bind(tape, p);
    tape.backward(train::total_loss(b2, bound, tape, {}).total);
    for (std::size_t k : {p.w_src(0, 0), p.attn(1, 2), p.w_dst(1, 6), p.slack_head_w(), p.bus_head_b()}) {
      const Tensor analytic = tape.grad(bound.vars[k]);
      auto q = p;
      const Tensor numeric = hilgnn::testing::numeric_gradient(
          [&](const Tensor& x) {
            q.tensors[k] = x;
            ad::Tape t2;
            return train::total_loss(b2, gnn::bind(t2, q, false), t2, {}).total.value()(0, 0);
          },
          p.tensors[k], 1e-6);
      for (Eigen::Index i = 0; i < numeric.size(); ++i)
        CHECK(std::abs(analytic(i) - numeric(i)) <= std::max(1e-6, 1e-4 * std::abs(numeric(i))));
    }
  }
}

TEST_CASE("adam") {
  gnn::ModelParams p;
  p.tensors = {Tensor::Zero(1, 1)};
  p.names = {"theta"};
  SUBCASE("first step has magnitude lr") {
    train::Adam adam(p);
    adam.step(p, {Tensor::Constant(1, 1, 2.0)}, 0.1);
    CHECK(std::abs(p.tensors[0](0, 0) + 0.1) < 1e-7);
  }
  SUBCASE("zero learning rate leaves parameters bit-identical") {
    auto q = small_params(1);
    const auto before = q;
    train::Adam adam(q);
    std::vector<Tensor> grads;
    for (const auto& t : q.tensors) grads.push_back(Tensor::Constant(t.rows(), t.cols(), 0.7));
    adam.step(q, grads, 0.0);
    CHECK(q == before);
  }
  SUBCASE("minimizes a quadratic") {
    train::Adam adam(p);
    for (int i = 0; i < 2000; ++i) adam.step(p, {2.0 * (p.tensors[0].array() - 3.0).matrix()}, 0.05);
    CHECK(p.tensors[0](0, 0) == doctest::Approx(3.0).epsilon(1e-3));
  }
}

TEST_CASE("learning rate schedule") {
  const std::vector<int> ms = {250, 375, 450};
  CHECK(train::multistep_lr(0.1, 0.3, ms, 0) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(train::multistep_lr(0.1, 0.3, ms, 249) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(train::multistep_lr(0.1, 0.3, ms, 250) == doctest::Approx(0.03).epsilon(1e-15));
  CHECK(train::multistep_lr(0.1, 0.3, ms, 375) == doctest::Approx(0.009).epsilon(1e-15));
  CHECK(train::multistep_lr(0.1, 0.3, ms, 450) == doctest::Approx(0.0027).epsilon(1e-15));
  CHECK(train::multistep_lr(0.1, 0.3, ms, 499) == doctest::Approx(0.0027).epsilon(1e-15));
}

TEST_CASE("gradient clipping") {
  std::vector<Tensor> g = {Tensor::Constant(1, 1, 3.0), Tensor::Constant(1, 1, 4.0)};
  CHECK(train::clip_global_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g[0](0, 0) == doctest::Approx(0.6));
  CHECK(g[1](0, 0) == doctest::Approx(0.8));
  CHECK(train::clip_global_norm(g, 10.0) == doctest::Approx(1.0));
  CHECK(g[1](0, 0) == doctest::Approx(0.8));
}

TEST_CASE("train config validation") {
  train::TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.lr_milestones = {300, 200};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.epochs = 100;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("training loop") {
  const auto samples = data::generate(hilgnn::testing::wscc9(), 48, {0.7, 0.5, 100}).samples;
  train::TrainConfig cfg;
  cfg.epochs = 12;
  cfg.batch_size = 16;
  cfg.lr_milestones = {8};
  gnn::ModelConfig model;
  model.hidden = 16;

  const auto a = train::train(samples, cfg, {}, model);
  const auto b = train::train(samples, cfg, {}, model);
  REQUIRE(a.history.size() == 12);
  CHECK(a.history[0].loss_total == b.history[0].loss_total);
  CHECK(a.params == b.params);
  CHECK(a.history.back().loss_total < a.history.front().loss_total);
  CHECK(a.history[8].lr == doctest::Approx(0.03));
  for (const auto& r : a.history)
    CHECK(r.loss_total == doctest::Approx(r.loss_sup_bus + r.loss_sup_slack + r.loss_ctr).epsilon(1e-12));

  SUBCASE("zero fine-tune epochs keep parameters") {
    auto ft = train::finetune_defaults();
    ft.epochs = 0;
    ft.lr_milestones.clear();
    CHECK(train::finetune(a.params, samples, ft, {}).params == a.params);
  }
  SUBCASE("history csv") {
    const auto dir = hilgnn::testing::scratch_dir("hist");
    train::write_history_csv(a.history, dir / "h.csv");
    std::ifstream in(dir / "h.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "epoch,lr,loss_total,loss_sup_bus,loss_sup_slack,loss_ctr");
    int rows = 0;
    for (std::string line; std::getline(in, line);) ++rows;
    CHECK(rows == 12);
    std::filesystem::remove_all(dir);
  }
  SUBCASE("empty dataset") { CHECK_THROWS_AS(train::train({}, cfg, {}, model), std::invalid_argument); }
}

TEST_CASE("fine-tuning on the pre-training data does not raise the loss") {
  const auto samples = data::generate(hilgnn::testing::wscc9(), 64, {0.7, 0.5, 500}).samples;
  for (std::uint64_t seed : {0, 1, 2}) {
    train::TrainConfig cfg;
    cfg.epochs = 30;
    cfg.batch_size = 32;
    cfg.lr_milestones = {20};
    cfg.seed = seed;
    gnn::ModelConfig model;
    model.seed = seed;
    const auto pre = train::train(samples, cfg, {}, model);
    auto ft = train::finetune_defaults();
    ft.epochs = 1;
    ft.lr_milestones.clear();
    ft.batch_size = 32;
    ft.seed = seed;
    const auto tuned = train::finetune(pre.params, samples, ft, {});
    CHECK(tuned.history[0].loss_total <= 1.05 * pre.history.back().loss_total);
  }
}
