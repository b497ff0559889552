#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "tim/errors.hpp"
#include "tim/gradcheck.hpp"
#include "tim/network.hpp"

using namespace tim;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

long expected_count(const NetworkConfig& c) {
  const long W = c.width, E = c.embed_dim, F = 2 * c.fourier_bands + 1, D = c.dim;
  long n = 2 * (E * F + E + E * E + E);
  if (c.n_classes > 0) n += E * (c.n_classes + 1);
  if (c.backbone == Backbone::Mlp) {
    n += W * D + W;
    n += c.depth * (3 * W * E + 3 * W + 2 * (W * W + W));
    n += 2 * W * E + 2 * W + D * W + D;
  } else {
    const long T = c.token_dim(), N = c.n_tokens;
    n += W * T + W + W * N;
    n += c.depth * (6 * W * E + 6 * W + 4 * (W * W + W) + 3 * W * E + 2 * (W * W + W));
    n += 2 * W * E + 2 * W + T * W + T;
  }
  return n;
}

NetworkConfig micro_mlp() {
  NetworkConfig c;
  c.dim = 2;
  c.width = 3;
  c.depth = 1;
  c.embed_dim = 4;
  c.fourier_bands = 2;
  c.n_classes = 2;
  return c;
}

NetworkConfig micro_attention(int tokens, int heads) {
  NetworkConfig c;
  c.backbone = Backbone::TokenAttention;
  c.dim = 2 * tokens;
  c.n_tokens = tokens;
  c.n_heads = heads;
  c.width = 2 * heads;
  c.depth = 1;
  c.embed_dim = 3;
  c.fourier_bands = 1;
  c.n_classes = 2;
  return c;
}

MatrixXd random_batch(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

}  // namespace

TEST_CASE("parameter count matches the architecture formula") {
  NetworkConfig flagship;
  CHECK(Network<float>(flagship, make_transport(TransportKind::OtFm)).layout().size() ==
        expected_count(flagship));
  CHECK(expected_count(flagship) > 90000);
  CHECK(expected_count(flagship) < 110000);
  for (NetworkConfig c : {micro_mlp(), micro_attention(2, 1), micro_attention(4, 2)}) {
    CHECK(Network<double>(c, make_transport(TransportKind::TrigFlow)).layout().size() == expected_count(c));
  }
}

TEST_CASE("config validation") {
  NetworkConfig c = micro_attention(2, 1);
  c.n_heads = 3;
  CHECK_THROWS_AS(validate(c), ShapeError);
  c = micro_attention(2, 1);
  c.dim = 5;
  CHECK_THROWS_AS(validate(c), ShapeError);
  c = micro_mlp();
  c.width = 0;
  CHECK_THROWS_AS(validate(c), ShapeError);
}

TEST_CASE("zero-initialized output projection") {
  for (NetworkConfig c : {NetworkConfig{}, micro_attention(2, 1)}) {
    const Network<float> net(c, make_transport(TransportKind::OtFm));
    const auto p = net.init_params();
    const MatrixXd x = random_batch(c.dim, 7, 1);
    const MatrixXd out = net.forward(p, x.cast<float>(), VectorXd::Constant(7, 0.7), VectorXd::Constant(7, 0.2))
                             .cast<double>();
    CHECK(out.rows() == c.dim);
    CHECK(out.cols() == 7);
    CHECK(out.norm() == 0.0);
  }
}

TEST_CASE("forward is deterministic") {
  const Network<float> net(NetworkConfig{}, make_transport(TransportKind::OtFm));
  const auto p = net.random_params(3);
  const Eigen::MatrixXf x = random_batch(2, 16, 2).cast<float>();
  const VectorXd t = VectorXd::LinSpaced(16, 0.1, 0.9), r = t * 0.5;
  CHECK(net.forward(p, x, t, r) == net.forward(p, x, t, r));
  CHECK(net.init_params() == net.init_params());
}

TEST_CASE("interval sensitivity and decoupling") {
  for (NetworkConfig c : {micro_mlp(), micro_attention(2, 1)}) {
    const Network<double> net(c, make_transport(TransportKind::TrigFlow));
    auto p = net.random_params(4);
    const MatrixXd x = random_batch(c.dim, 3, 5);
    const VectorXd t = VectorXd::Constant(3, 1.0);
    const MatrixXd a = net.forward(p, x, t, VectorXd::Constant(3, 0.1));
    const MatrixXd b = net.forward(p, x, t, VectorXd::Constant(3, 0.6));
    CHECK((a - b).norm() > 1e-6);

    for (const ParamBlock& blk : p.layout.blocks())
      if (blk.name.rfind("embed_dt", 0) == 0 || blk.name.find("_interval") != std::string::npos)
        p.view(blk).setZero();
    const MatrixXd a0 = net.forward(p, x, t, VectorXd::Constant(3, 0.1));
    const MatrixXd b0 = net.forward(p, x, t, VectorXd::Constant(3, 0.6));
    CHECK(a0 == b0);
  }
}

TEST_CASE("null class embedding") {
  const NetworkConfig c = micro_mlp();
  const Network<double> net(c, make_transport(TransportKind::OtFm));
  const auto p = net.random_params(6);
  const VectorXd t = VectorXd::Constant(2, 0.5), r = VectorXd::Constant(2, 0.2);
  const std::vector<int> null_ids{-1, -1}, ids{0, 1};
  const MatrixXd e_null = net.conditioning(p, t, r, null_ids);
  CHECK(e_null == net.conditioning(p, t, r));
  const MatrixXd e_cls = net.conditioning(p, t, r, ids);
  const auto table = p.view(p.layout.find("embed_class"));
  CHECK((e_cls.col(0) - e_null.col(0) - (table.col(0) - table.col(2))).norm() < 1e-12);
  const std::vector<int> bad{0, 5};
  CHECK_THROWS_AS(net.conditioning(p, t, r, bad), ShapeError);
}

TEST_CASE("input validation") {
  const Network<double> net(micro_mlp(), make_transport(TransportKind::OtFm));
  const auto p = net.random_params(7);
  const VectorXd t = VectorXd::Constant(2, 0.5);
  CHECK_THROWS_AS(net.forward(p, MatrixXd::Zero(3, 2), t, t), ShapeError);
  CHECK_THROWS_AS(net.forward(p, MatrixXd::Zero(2, 2), VectorXd::Constant(3, 0.5), t), ShapeError);
  MatrixXd x = MatrixXd::Zero(2, 2);
  x(1, 1) = std::nan("");
  CHECK_THROWS_AS(net.forward(p, x, t, t), NumericAbort);
  ForwardCache<double> cache;
  net.forward(p, MatrixXd::Zero(2, 2), t, t, {}, &cache);
  CHECK_THROWS_AS(net.backward(p, cache, MatrixXd::Zero(2, 3)), ShapeError);
  const Network<double> other(micro_attention(2, 1), make_transport(TransportKind::OtFm));
  CHECK_THROWS_AS(other.backward(other.random_params(1), cache, MatrixXd::Zero(4, 2)), ShapeError);
}

TEST_CASE("zero output gradient gives zero grads") {
  const Network<double> net(micro_attention(2, 1), make_transport(TransportKind::OtFm));
  const auto p = net.random_params(8);
  ForwardCache<double> cache;
  const MatrixXd x = random_batch(4, 3, 9);
  net.forward(p, x, VectorXd::Constant(3, 0.5), VectorXd::Constant(3, 0.1), {}, &cache);
  CHECK(net.backward(p, cache, MatrixXd::Zero(4, 3)).values.norm() == 0.0);
}

TEST_CASE("gradient check: micro MLP") {
  const NetworkConfig c = micro_mlp();
  for (TransportKind k : {TransportKind::OtFm, TransportKind::Edm}) {
    const TransportSpec s = make_transport(k);
    const Network<double> net(c, s);
    const auto p = net.random_params(10);
    const VectorXd t = (VectorXd(3) << 0.9, 0.5, 0.3).finished();
    const VectorXd r = (VectorXd(3) << 0.2, 0.5, 0.1).finished();
    const std::vector<int> classes{0, -1, 1};
    const GradCheckResult res = gradient_check(net, p, random_batch(2, 3, 11), t, r, classes, 12);
    INFO("worst block ", res.worst_block, " err ", res.max_rel_err);
    CHECK(res.checked == net.layout().size());
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("gradient check: raw interval input") {
  NetworkConfig c = micro_mlp();
  c.interval_input = IntervalInput::Raw;
  const Network<double> net(c, make_transport(TransportKind::TrigFlow));
  const VectorXd t = VectorXd::Constant(2, 1.1), r = VectorXd::Constant(2, 0.4);
  const GradCheckResult res = gradient_check(net, net.random_params(13), random_batch(2, 2, 14), t, r, {}, 15);
  INFO("worst block ", res.worst_block);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("gradient check: interval-aware attention") {
  for (auto [tokens, heads] : {std::pair{2, 1}, std::pair{3, 2}}) {
    const NetworkConfig c = micro_attention(tokens, heads);
    const Network<double> net(c, make_transport(TransportKind::OtFm));
    const VectorXd t = (VectorXd(2) << 0.8, 0.4).finished();
    const VectorXd r = (VectorXd(2) << 0.1, 0.3).finished();
    const std::vector<int> classes{1, -1};
    const GradCheckResult res =
        gradient_check(net, net.random_params(16), random_batch(c.dim, 2, 17), t, r, classes, 18);
    INFO("tokens ", tokens, " heads ", heads, " worst block ", res.worst_block, " err ", res.max_rel_err);
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("float and double forwards agree") {
  const NetworkConfig c = micro_attention(2, 1);
  const Network<double> nd(c, make_transport(TransportKind::OtFm));
  const Network<float> nf(c, make_transport(TransportKind::OtFm));
  const auto pd = nd.random_params(19);
  const MatrixXd x = random_batch(c.dim, 4, 20);
  const VectorXd t = VectorXd::Constant(4, 0.6), r = VectorXd::Constant(4, 0.3);
  const MatrixXd a = nd.forward(pd, x, t, r);
  const MatrixXd b = nf.forward(cast_params<float>(pd), x.cast<float>(), t, r).cast<double>();
  CHECK((a - b).norm() < 1e-4 * (1 + a.norm()));
}

TEST_CASE("property: forward stays finite under small time perturbations") {
  const Network<float> net(NetworkConfig{}, make_transport(TransportKind::OtFm));
  const auto p = net.random_params(21);
  Rng rng(22);
  const Eigen::MatrixXf x = random_batch(2, 1000, 23).cast<float>();
  VectorXd t(1000), r(1000);
  for (int i = 0; i < 1000; ++i) {
    t(i) = rng.uniform(0.01, 0.99);
    r(i) = rng.uniform(0.0, t(i));
  }
  const Eigen::MatrixXf a = net.forward(p, x, t, r);
  const Eigen::MatrixXf b = net.forward(p, x, (t.array() + 1e-3).matrix(), r);
  CHECK(a.allFinite());
  CHECK(b.allFinite());
  CHECK(((a - b).colwise().norm().maxCoeff()) < 1.0);
}

TEST_CASE("ema update") {
  ParamLayout layout;
  layout.add("w", 1, 1);
  NetworkParams<double> ema{layout, VectorXd::Zero(1)}, params{layout, VectorXd::Constant(1, 2.0)};
  ema_update(ema, params, 0.5);
  CHECK(ema.values(0) == 1.0);
  ema_update(ema, params, 0.0);
  CHECK(ema == params);
  NetworkParams<double> slow{layout, VectorXd::Zero(1)};
  for (int i = 0; i < 1000; ++i) ema_update(slow, params, 1 - 1e-9);
  CHECK(std::abs(slow.values(0)) < 1e-5);
  ParamLayout other;
  other.add("v", 1, 1);
  NetworkParams<double> mismatched{other, VectorXd::Zero(1)};
  CHECK_THROWS(ema_update(mismatched, params, 0.5));
}

TEST_CASE("layout manifest round trip") {
  const Network<float> net(micro_attention(4, 2), make_transport(TransportKind::OtFm));
  const ParamLayout parsed = ParamLayout::parse(net.layout().serialize());
  CHECK(parsed == net.layout());
  CHECK(parsed.find("block0.attn.wq_interval").rows == 4);
  CHECK_THROWS_AS(parsed.find("missing"), std::out_of_range);
  CHECK_THROWS_AS(ParamLayout::parse("a 0 1 1\nb 7 1 1\n"), ShapeError);
}

TEST_CASE("names round trip") {
  for (Backbone b : {Backbone::Mlp, Backbone::TokenAttention}) CHECK(backbone_from_string(to_string(b)) == b);
  for (IntervalInput i : {IntervalInput::CNoise, IntervalInput::Raw})
    CHECK(interval_input_from_string(to_string(i)) == i);
  CHECK_THROWS_AS(backbone_from_string("unet"), ConfigError);
}
