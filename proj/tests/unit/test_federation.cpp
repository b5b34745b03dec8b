#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "fedrco/error.hpp"
#include "fedrco/federation.hpp"

using namespace fedrco;
using namespace fedrco::federation;

namespace {

model::Params scalar(double v) { return {Matrix::Constant(1, 1, v)}; }

data::Dataset local_data(std::size_t n, std::uint64_t seed, double sep = 5.0) {
  Rng rng(seed);
  return data::make_synthetic_classification({8, 4, n, sep}, rng);
}

model::Network small_net(std::uint64_t seed) {
  Rng rng(seed);
  auto net = model::make_dense_network(8, {12}, 4);
  net.initialize(rng);
  return net;
}

ClientState make_client(std::size_t n, std::uint64_t seed) {
  return ClientState(0, small_net(seed), local_data(n, seed), 10);
}

GlobalState global_of(const ClientState& c) {
  GlobalState g;
  g.params = c.net.params();
  return g;
}

struct Setup {
  data::SplitDataset split;
  data::Partition partition;
  model::Network init;
};

Setup make_setup(std::uint64_t seed, std::size_t clients = 6) {
  Setup s{data::make_synthetic_split({8, 4, 600, 4.0}, 300, seed), {}, small_net(seed)};
  Rng rng(seed + 1);
  s.partition = data::dirichlet_partition(s.split.train, clients, 0.3, rng);
  return s;
}

FederationConfig fed_config(Method m, std::size_t clients = 6) {
  FederationConfig cfg;
  cfg.clients = clients;
  cfg.ratio = 0.5;
  cfg.local.method = m;
  cfg.local.local_steps = 5;
  cfg.local.batch_size = 16;
  cfg.local.lr = 0.05;
  cfg.local.kfac.t_inv = 3;
  cfg.seed = 42;
  return cfg;
}

}  // namespace

TEST_CASE("participant sampling") {
  Rng rng(1);
  auto all = sample_participants(7, 1.0, rng);
  CHECK(all == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6});
  auto ids = sample_participants(100, 0.8, rng);
  CHECK(ids.size() == 80);
  CHECK(std::set<std::size_t>(ids.begin(), ids.end()).size() == 80);
  CHECK(std::is_sorted(ids.begin(), ids.end()));
  CHECK(ids.back() < 100);
  Rng a(9), b(9);
  CHECK(sample_participants(50, 0.3, a) == sample_participants(50, 0.3, b));
  CHECK(sample_participants(10, 0.01, rng).size() == 1);
  CHECK_THROWS_AS(sample_participants(10, 0.0, rng), Error);
  CHECK_THROWS_AS(sample_participants(10, 1.5, rng), Error);
  CHECK_THROWS_AS(sample_participants(0, 0.5, rng), Error);
}

TEST_CASE("participant sampling is uniform") {
  Rng rng(2);
  std::vector<std::size_t> hits(10, 0);
  for (int t = 0; t < 5000; ++t)
    for (auto id : sample_participants(10, 0.3, rng)) ++hits[id];
  for (auto h : hits) CHECK(std::abs(static_cast<double>(h) - 1500.0) < 150.0);
}

TEST_CASE("weighted aggregation examples") {
  auto p = scalar(2.5);
  std::vector<Upload> one{{&p, 7}};
  CHECK(aggregate_weighted(one)[0](0, 0) == 2.5);
  auto plus = scalar(3.0), minus = scalar(-3.0);
  std::vector<Upload> sym{{&plus, 5}, {&minus, 5}};
  CHECK(aggregate_weighted(sym)[0](0, 0) == 0.0);
  auto zero = scalar(0.0), four = scalar(4.0);
  std::vector<Upload> w{{&zero, 1}, {&four, 3}};
  CHECK(aggregate_weighted(w)[0](0, 0) == doctest::Approx(3.0));
  std::vector<Upload> rev{{&four, 3}, {&zero, 1}};
  CHECK(aggregate_weighted(rev)[0](0, 0) == doctest::Approx(3.0));
  model::Params wide{Matrix::Zero(1, 2)};
  std::vector<Upload> bad{{&zero, 1}, {&wide, 1}};
  CHECK_THROWS_AS(aggregate_weighted(bad), Error);
  CHECK_THROWS_AS(aggregate_weighted(std::span<const Upload>{}), Error);
}

TEST_CASE("weighted aggregation is permutation invariant") {
  Rng rng(3);
  std::normal_distribution<double> n;
  std::vector<model::Params> ps(5, model::Params{Matrix(3, 3)});
  for (auto& p : ps) p[0] = Matrix::NullaryExpr(3, 3, [&] { return n(rng); });
  std::vector<Upload> ups;
  for (std::size_t i = 0; i < ps.size(); ++i) ups.push_back({&ps[i], i + 1});
  auto base = aggregate_weighted(ups);
  std::reverse(ups.begin(), ups.end());
  CHECK(model::squared_distance(aggregate_weighted(ups), base) < 1e-26);
}

TEST_CASE("adaptive pull blends by gamma and keeps curvature") {
  ClientState c(0, model::Network(Shape3{1}, {model::Dense{1, 1}}), local_data(4, 1), 10);
  c.net.set_params({Matrix::Constant(1, 2, 0.0)});
  c.kfac.inversions = 7;
  GlobalState g;
  g.params = {Matrix::Constant(1, 2, 3.0)};
  AggregationConfig cfg;

  c.local_accuracy = 0.8;
  g.accuracy = 0.4;
  adaptive_pull(c, g, cfg);
  CHECK(c.net.params()[0](0, 0) == doctest::Approx(2.0));
  CHECK(c.kfac.inversions == 7);

  c.net.set_params({Matrix::Constant(1, 2, 0.0)});
  c.local_accuracy = 1.0;
  g.accuracy = 0.0;
  adaptive_pull(c, g, cfg);
  CHECK(c.net.params()[0](0, 0) == 3.0);

  c.net.set_params({Matrix::Constant(1, 2, 0.0)});
  c.local_accuracy = 0.0;
  adaptive_pull(c, g, cfg);
  CHECK(c.net.params()[0](0, 0) == 3.0);

  c.net.set_params({Matrix::Constant(1, 2, 0.0)});
  c.local_accuracy = 0.8;
  g.accuracy = 0.4;
  cfg.swap_gamma = true;
  adaptive_pull(c, g, cfg);
  CHECK(c.net.params()[0](0, 0) == doctest::Approx(1.0));
}

TEST_CASE("adaptive pull output is a convex combination") {
  Rng rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto c = make_client(20, 4);
  for (int t = 0; t < 50; ++t) {
    auto local = small_net(100 + static_cast<std::uint64_t>(t)).params();
    GlobalState g;
    g.params = small_net(200 + static_cast<std::uint64_t>(t)).params();
    g.accuracy = u(rng);
    c.local_accuracy = u(rng);
    c.net.set_params(local);
    adaptive_pull(c, g, {});
    for (std::size_t i = 0; i < local.size(); ++i) {
      Matrix lo = local[i].cwiseMin(g.params[i]).array() - 1e-15;
      Matrix hi = local[i].cwiseMax(g.params[i]).array() + 1e-15;
      CHECK((c.net.params()[i].array() >= lo.array()).all());
      CHECK((c.net.params()[i].array() <= hi.array()).all());
    }
  }
}

TEST_CASE("one identity-preconditioned step is an SGD step") {
  for (Method m : {Method::FedRCO, Method::FedAvg}) {
    auto c = make_client(16, 5);
    auto g = global_of(c);
    LocalConfig cfg;
    cfg.method = m;
    cfg.local_steps = 1;
    cfg.batch_size = 16;
    cfg.lr = 0.1;
    cfg.kfac.identity_preconditioner = true;
    auto before = c.net.params();
    auto grad = model::forward_backward(c.net, c.data.features, c.data.labels).grads;
    run_local_round(c, g, cfg, 1);
    auto expected = before;
    model::axpy(expected, -0.1, grad);
    CHECK(model::squared_distance(c.net.params(), expected) < 1e-28);
  }
}

TEST_CASE("local fedrco training decreases the loss on separable data") {
  auto c = make_client(200, 6);
  GlobalState g = global_of(c);
  LocalConfig cfg;
  std::size_t decreases = 0;
  double prev = model::mean_loss(c.net, c.data.features, c.data.labels);
  for (std::size_t epoch = 0; epoch < 20; ++epoch) {
    cfg.local_steps = 1;
    g.round = epoch;
    run_local_round(c, g, cfg, 3);
    double now = model::mean_loss(c.net, c.data.features, c.data.labels);
    decreases += now < prev;
    prev = now;
  }
  CHECK(decreases >= 18);
}

TEST_CASE("local rounds are deterministic and report per-step values") {
  auto a = make_client(100, 7), b = make_client(100, 7);
  LocalConfig cfg;
  auto ra = run_local_round(a, global_of(a), cfg, 11);
  auto rb = run_local_round(b, global_of(b), cfg, 11);
  CHECK(model::squared_distance(a.net.params(), b.net.params()) == 0.0);
  CHECK(ra.step_losses == rb.step_losses);
  CHECK(ra.step_losses.size() == cfg.local_steps);
  CHECK(ra.applied_norms.size() == cfg.local_steps);
  CHECK(ra.inversions == 1);
  CHECK(ra.local_accuracy == a.local_accuracy);
  CHECK(ra.data_size == 100);
}

TEST_CASE("gradient explosion triggers a hard reset and the round completes") {
  auto c = make_client(100, 8);
  auto g = global_of(c);
  LocalConfig cfg;
  cfg.fault.kind = FaultKind::GradientScale;
  cfg.fault.epoch = 5;
  cfg.fault.factor = 1e4;
  auto r = run_local_round(c, g, cfg, 2);
  CHECK(r.sudden == 1);
  CHECK(r.hard_resets == 1);
  CHECK(r.events.size() == 1);
  CHECK(r.events[0].epoch == 5);
  CHECK(r.events[0].verdict == stability::AnomalyVerdict::SuddenExplosion);
  CHECK(r.applied_norms[5] == 0.0);
  CHECK(r.step_losses.size() == cfg.local_steps);
  CHECK(model::all_finite(c.net.params()));
  // the reset dropped the factors; the next step re-inverted
  CHECK(r.inversions == 2);
}

TEST_CASE("non-finite update resets and the score restarts from warmup") {
  auto c = make_client(100, 9);
  auto g = global_of(c);
  LocalConfig cfg;
  cfg.fault.kind = FaultKind::NonFinite;
  cfg.fault.epoch = 4;
  auto r = run_local_round(c, g, cfg, 2);
  REQUIRE(r.events.size() == 1);
  CHECK(std::isinf(r.events[0].score));
  CHECK(r.hard_resets == 1);
  CHECK(model::all_finite(c.net.params()));
  for (std::size_t e = 5; e < 5 + cfg.stability.warmup; ++e) CHECK(r.applied_norms[e] > 0.0);
}

TEST_CASE("faults only target the configured round and client") {
  FaultSpec f;
  CHECK_FALSE(f.targets(0, 0));
  f.kind = FaultKind::GradientScale;
  CHECK(f.targets(3, 4));
  f.round = 2;
  f.client = 1;
  CHECK(f.targets(2, 1));
  CHECK_FALSE(f.targets(2, 0));
  CHECK_FALSE(f.targets(1, 1));
}

TEST_CASE("monitor bounds moderate anomalies") {
  auto c = make_client(100, 10);
  auto g = global_of(c);
  LocalConfig cfg;
  cfg.stability.tau_low = 1.5;
  cfg.fault.kind = FaultKind::GeometricGrowth;
  cfg.fault.epoch = 6;
  cfg.fault.ratio = 2.0;
  auto r = run_local_round(c, g, cfg, 4);
  CHECK(r.accumulated + r.sudden > 0);
  CHECK(model::all_finite(c.net.params()));
  for (const auto& e : r.events)
    if (e.verdict == stability::AnomalyVerdict::AccumulatedDivergence)
      CHECK(r.applied_norms[e.epoch] <= cfg.stability.grad_stable * (1 + 1e-12));
}

TEST_CASE("drift grows with the number of local steps") {
  double drift[2] = {0, 0};
  for (std::uint64_t s = 0; s < 10; ++s) {
    for (std::size_t k = 1; k <= 2; ++k) {
      auto c = make_client(64, 20 + s);
      LocalConfig cfg;
      cfg.method = Method::FedAvg;
      cfg.local_steps = k;
      cfg.lr = 0.05;
      drift[k - 1] += run_local_round(c, global_of(c), cfg, s).drift_sq;
    }
  }
  CHECK(drift[1] > drift[0]);
}

TEST_CASE("fedrco reduces to fedavg without curvature, monitor or blending") {
  auto s = make_setup(1);
  auto cfg_rco = fed_config(Method::FedRCO);
  cfg_rco.local.kfac.identity_preconditioner = true;
  cfg_rco.local.stability.enabled = false;
  cfg_rco.aggregation.strategy = AggregationStrategy::Plain;
  Federation rco(cfg_rco, s.split.train, s.split.test, s.partition, s.init);
  Federation avg(fed_config(Method::FedAvg), s.split.train, s.split.test, s.partition, s.init);
  for (int r = 0; r < 4; ++r) {
    auto a = rco.run_round();
    auto b = avg.run_round();
    CHECK(a.test_accuracy == b.test_accuracy);
    CHECK(a.train_loss == b.train_loss);
    CHECK(a.participants == b.participants);
  }
  CHECK(model::squared_distance(rco.global().params, avg.global().params) == 0.0);
}

TEST_CASE("federation rounds are independent of the worker count") {
  auto s = make_setup(2);
  auto cfg = fed_config(Method::FedRCO);
  Federation one(cfg, s.split.train, s.split.test, s.partition, s.init);
  cfg.workers = 3;
  Federation many(cfg, s.split.train, s.split.test, s.partition, s.init);
  for (int r = 0; r < 3; ++r) {
    auto a = one.run_round();
    auto b = many.run_round();
    CHECK(a.test_accuracy == b.test_accuracy);
    CHECK(a.inversions == b.inversions);
  }
  CHECK(model::squared_distance(one.global().params, many.global().params) == 0.0);
}

TEST_CASE("round accounting and non-participants") {
  auto s = make_setup(3);
  auto cfg = fed_config(Method::FedRCO);
  Federation fed(cfg, s.split.train, s.split.test, s.partition, s.init);
  auto rec = fed.run_round();
  const std::size_t d = s.init.parameter_count();
  CHECK(rec.round == 1);
  CHECK(rec.participants.size() == 3);
  CHECK(rec.uplink_scalars == 3 * (d + 1));
  CHECK(rec.total_scalars == 3 * (2 * d + 1));
  CHECK(fed.global().round == 1);
  for (std::size_t id = 0; id < cfg.clients; ++id) {
    if (std::find(rec.participants.begin(), rec.participants.end(), id) != rec.participants.end())
      continue;
    CHECK(model::squared_distance(fed.clients()[id].net.params(), s.init.params()) == 0.0);
    CHECK_FALSE(fed.clients()[id].synced);
  }
  auto rec2 = fed.run_round();
  CHECK(rec2.round == 2);
}

TEST_CASE("fedrco_ori is fedrco with plain aggregation") {
  auto s = make_setup(4);
  auto cfg = fed_config(Method::FedRCOOri);
  Federation ori(cfg, s.split.train, s.split.test, s.partition, s.init);
  CHECK(ori.config().aggregation.strategy == AggregationStrategy::Plain);
  auto plain_cfg = fed_config(Method::FedRCO);
  plain_cfg.aggregation.strategy = AggregationStrategy::Plain;
  Federation plain(plain_cfg, s.split.train, s.split.test, s.partition, s.init);
  Federation adaptive(fed_config(Method::FedRCO), s.split.train, s.split.test, s.partition, s.init);
  for (int r = 0; r < 5; ++r) {
    ori.run_round();
    plain.run_round();
    adaptive.run_round();
  }
  CHECK(model::squared_distance(ori.global().params, plain.global().params) == 0.0);
  CHECK(model::squared_distance(ori.global().params, adaptive.global().params) > 0.0);
}

TEST_CASE("baseline methods train") {
  for (Method m : {Method::FedAvg, Method::FedProx, Method::FedAvgM, Method::FedAdam,
                   Method::FedRCO, Method::FedRCOOri}) {
    auto s = make_setup(5);
    auto cfg = fed_config(m);
    cfg.ratio = 1.0;
    if (m == Method::FedAdam) cfg.server.lr = 0.01;
    Federation fed(cfg, s.split.train, s.split.test, s.partition, s.init);
    double first = fed.global().accuracy;
    for (int r = 0; r < 8; ++r) fed.run_round();
    CAPTURE(to_string(m));
    CHECK(model::all_finite(fed.global().params));
    CHECK(fed.global().accuracy > first);
  }
}

TEST_CASE("federation config validation") {
  auto s = make_setup(6);
  auto cfg = fed_config(Method::FedAvg);
  cfg.clients = 5;
  CHECK_THROWS_AS(Federation(cfg, s.split.train, s.split.test, s.partition, s.init), Error);
  cfg = fed_config(Method::FedAvg);
  cfg.ratio = 0.0;
  CHECK_THROWS_AS(validate(cfg), Error);
  cfg = fed_config(Method::FedAvg);
  cfg.local.lr = -1.0;
  CHECK_THROWS_AS(validate(cfg), Error);
  CHECK(parse_method("fedadam") == Method::FedAdam);
  try {
    parse_method("fedsgd");
    FAIL("expected ConfigInvalid");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ConfigInvalid);
  }
}
