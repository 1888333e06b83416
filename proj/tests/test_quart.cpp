#include <doctest.h>

#include "quartf/numcore/grad_check.hpp"
#include "quartf/quart/quart.hpp"

#include <cstring>

using namespace quartf;
using namespace quartf::quart;
using streams::SeqTag;
using streams::TokenSequence;

namespace {

TokenSequence<double> make_seq(SeqTag tag, Index len, Index width, Rng& rng) {
  TokenSequence<double> s;
  s.tag = tag;
  s.tokens = randn<double>(rng, {len, width}, 1.0, false);
  s.valid_len = len;
  s.positions.resize(static_cast<size_t>(len));
  for (Index i = 0; i < len; ++i) s.positions[static_cast<size_t>(i)] = i;
  return s;
}

QuartConfig toy_config(Index e = 8, Index heads = 2, std::array<Index, 3> blocks = {2, 2, 1}) {
  QuartConfig c;
  c.embed_dim = e;
  c.heads = heads;
  c.block_len = blocks;
  return c;
}

// Plain-Eigen reimplementation of attend/relevance for the oracle checks.
struct OracleOut {
  Matrix<double> m;
  Eigen::RowVectorXd alpha;
};

OracleOut quart_oracle(const Matrix<double>& zq, const Matrix<double>& z, const QuartParams<double>& p) {
  const Index heads = p.config.heads;
  const Index dk = p.config.head_dim();
  Matrix<double> m(zq.rows(), p.config.embed_dim);
  for (Index h = 0; h < heads; ++h) {
    Matrix<double> q = zq * p.wq[static_cast<size_t>(h)].value();
    Matrix<double> k = z * p.wk[static_cast<size_t>(h)].value();
    Matrix<double> v = z * p.wv[static_cast<size_t>(h)].value();
    Matrix<double> scores = q * k.transpose() / std::sqrt(double(dk));
    for (Index i = 0; i < scores.rows(); ++i) {
      Eigen::RowVectorXd row = scores.row(i);
      const double mx = row.maxCoeff();
      row = (row.array() - mx).exp();
      row /= row.sum();
      scores.row(i) = row;
    }
    m.middleCols(h * dk, dk) = scores * v;
  }
  m = m * p.wo.value();
  Matrix<double> s = m * p.wr.value();
  Eigen::RowVectorXd pooled = s.colwise().mean();
  const double mx = pooled.maxCoeff();
  Eigen::RowVectorXd alpha = (pooled.array() - mx).exp();
  alpha /= alpha.sum();
  return {m, alpha};
}

}  // namespace

TEST_CASE("attend with a single key gives unit weights") {
  auto cfg = toy_config(8, 2, {1, 1, 1});
  auto params = QuartParams<double>::init(cfg, 1);
  Rng rng(2);
  auto zq = randn<double>(rng, {3, 8}, 1.0, false);
  auto z = randn<double>(rng, {1, 8}, 1.0, false);
  AttendTrace<double> trace;
  auto m = attend(zq, z, params, &trace);
  for (const auto& a : trace.attention) CHECK((a.array() == 1.0).all());
  // All query rows see the same value row: M rows identical.
  for (Index i = 1; i < 3; ++i) CHECK((m.value().row(i) - m.value().row(0)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("identical key rows give uniform attention") {
  auto cfg = toy_config();
  auto params = QuartParams<double>::init(cfg, 5);
  Rng rng(3);
  auto zq = randn<double>(rng, {2, 8}, 1.0, false);
  auto row = randn<double>(rng, {1, 8}, 1.0, false);
  Matrix<double> zrows(5, 8);
  for (Index i = 0; i < 5; ++i) zrows.row(i) = row.value().row(0);
  auto z = Tensor<double>::from_value({5, 8}, zrows);
  AttendTrace<double> trace;
  attend(zq, z, params, &trace);
  for (const auto& a : trace.attention)
    CHECK((a.array() - 0.2).abs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(attend(Tensor<double>::zeros({0, 8}), z, params), InputError);
}

TEST_CASE("attend and relevance match the direct-formula oracle") {
  auto cfg = toy_config(8, 2, {2, 2, 1});
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto params = QuartParams<double>::init(cfg, seed);
    Rng rng(derive_seed(seed, "toy"));
    auto zq = randn<double>(rng, {2, 8}, 1.0, false);
    auto z = randn<double>(rng, {5, 8}, 1.0, false);
    auto m = attend(zq, z, params);
    auto oracle = quart_oracle(zq.value(), z.value(), params);
    CHECK((m.value() - oracle.m).cwiseAbs().maxCoeff() < 1e-6);

    std::vector<Index> pos{0, 1, 2, 3, 4};
    std::vector<double> valid(5, 1.0);
    auto scores = relevance(m, params.wr, pos, valid, AlphaPool::mean, cfg.block_len);
    CHECK((scores.alpha.value() - oracle.alpha).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("relevance: single query row, zero head, pooling options") {
  auto cfg = toy_config(8, 2, {2, 2, 1});
  auto params = QuartParams<double>::init(cfg, 9);
  Rng rng(4);
  auto m1 = randn<double>(rng, {1, 8}, 1.0, false);
  std::vector<Index> pos{0, 1, 2, 3, 4};
  std::vector<double> valid(5, 1.0);

  // L_q = 1: pooling is the identity.
  auto s1 = relevance(m1, params.wr, pos, valid, AlphaPool::mean, cfg.block_len);
  Matrix<double> logits = m1.value() * params.wr.value();
  Eigen::RowVectorXd direct = (logits.row(0).array() - logits.row(0).maxCoeff()).exp();
  direct /= direct.sum();
  CHECK((s1.alpha.value() - direct).cwiseAbs().maxCoeff() < 1e-12);

  // W^R = 0: alpha uniform.
  auto zero_wr = Tensor<double>::zeros({8, 5}, true);
  auto s0 = relevance(m1, zero_wr, pos, valid, AlphaPool::mean, cfg.block_len);
  CHECK((s0.alpha.value().array() - 0.2).abs().maxCoeff() < 1e-12);

  // last/max pooling run and produce simplex output.
  auto m2 = randn<double>(rng, {3, 8}, 1.0, false);
  for (auto pool : {AlphaPool::last, AlphaPool::max}) {
    auto s = relevance(m2, params.wr, pos, valid, pool, cfg.block_len);
    CHECK(std::abs(s.alpha.value().sum() - 1.0) < 1e-6);
  }

  // Padded rows are masked to zero mass.
  std::vector<double> masked{1.0, 1.0, 1.0, 1.0, 0.0};
  auto sm = relevance(m2, params.wr, pos, masked, AlphaPool::mean, cfg.block_len);
  CHECK(sm.alpha(4) == 0.0);
  CHECK(std::abs(sm.alpha.value().sum() - 1.0) < 1e-6);
}

TEST_CASE("fuse selects, averages and stays inside the convex hull") {
  Rng rng(6);
  auto z = randn<double>(rng, {5, 8}, 1.0, false);

  RelevanceScores<double> onehot;
  onehot.alpha = Tensor<double>::row({0, 0, 1, 0, 0});
  onehot.block_len = {2, 2, 1};
  auto c = fuse(onehot, z);
  CHECK((c.c.value() - z.value().row(2)).cwiseAbs().maxCoeff() == 0.0);

  RelevanceScores<double> uniform;
  uniform.alpha = Tensor<double>::full({5}, 0.2);
  uniform.block_len = {2, 2, 1};
  auto cm = fuse(uniform, z);
  CHECK((cm.c.value() - z.value().colwise().mean()).cwiseAbs().maxCoeff() < 1e-12);

  RelevanceScores<double> bad;
  bad.alpha = Tensor<double>::row({0.5, 0.5, 0.5, 0, 0});
  bad.block_len = {2, 2, 1};
  CHECK_THROWS_AS(fuse(bad, z), ContractError);

  // Convexity over 100 seeds.
  auto cfg = toy_config(8, 2, {2, 2, 1});
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng r2(derive_seed(seed, "convex"));
    auto zz = randn<double>(r2, {5, 8}, 2.0, false);
    auto logits = randn<double>(r2, {5}, 3.0, false);
    RelevanceScores<double> sc;
    sc.alpha = softmax(logits, 0);
    sc.block_len = cfg.block_len;
    auto fused = fuse(sc, zz);
    for (Index j = 0; j < 8; ++j) {
      const double lo = zz.value().col(j).minCoeff();
      const double hi = zz.value().col(j).maxCoeff();
      const double slack = 1e-6 * (1.0 + std::max(std::abs(lo), std::abs(hi)));
      CHECK(fused.c(j) >= lo - slack);
      CHECK(fused.c(j) <= hi + slack);
    }
  }
}

TEST_CASE("forward: raw pass-through and zero-head uniform bridge") {
  auto cfg = toy_config(8, 2, {2, 2, 1});
  auto params = QuartParams<double>::init(cfg, 21);
  Rng rng(8);
  auto zq = make_seq(SeqTag::query, 2, 8, rng);
  auto zv = make_seq(SeqTag::video, 2, 8, rng);
  auto za = make_seq(SeqTag::audio, 2, 8, rng);
  auto zs = make_seq(SeqTag::sensor, 1, 8, rng);

  auto raw = forward(zq, zv, za, zs, params, ContextMode::raw);
  CHECK(!raw.alpha.has_value());
  CHECK((raw.context.value() - raw.assembled.z.value()).cwiseAbs().maxCoeff() == 0.0);

  auto params0 = params;
  params0.wr = Tensor<double>::zeros({8, 5}, true);
  auto gated = forward(zq, zv, za, zs, params0, ContextMode::gated);
  REQUIRE(gated.alpha.has_value());
  CHECK((gated.context.value().row(0) - gated.assembled.z.value().colwise().mean()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("separation: W^R changes alpha but not the attention weights") {
  auto cfg = toy_config(8, 2, {2, 2, 1});
  auto p1 = QuartParams<double>::init(cfg, 31);
  auto p2 = p1;
  Rng rng(9);
  p2.wr = randn<double>(rng, {8, 5}, 1.0, true);

  auto zq = make_seq(SeqTag::query, 2, 8, rng);
  auto zv = make_seq(SeqTag::video, 2, 8, rng);
  auto za = make_seq(SeqTag::audio, 2, 8, rng);
  auto zs = make_seq(SeqTag::sensor, 1, 8, rng);

  AttendTrace<double> t1, t2;
  auto r1 = forward(zq, zv, za, zs, p1, ContextMode::gated, &t1);
  auto r2 = forward(zq, zv, za, zs, p2, ContextMode::gated, &t2);
  REQUIRE(t1.attention.size() == t2.attention.size());
  for (size_t h = 0; h < t1.attention.size(); ++h)
    CHECK(std::memcmp(t1.attention[h].data(), t2.attention[h].data(),
                      sizeof(double) * static_cast<size_t>(t1.attention[h].size())) == 0);
  CHECK((r1.alpha->alpha.value() - r2.alpha->alpha.value()).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("permuting a block's rows (positions re-attached) permutes alpha") {
  auto cfg = toy_config(8, 2, {3, 2, 2});
  auto params = QuartParams<double>::init(cfg, 41);
  Rng rng(10);
  auto zq = make_seq(SeqTag::query, 2, 8, rng);
  auto zv = make_seq(SeqTag::video, 3, 8, rng);
  auto za = make_seq(SeqTag::audio, 2, 8, rng);
  auto zs = make_seq(SeqTag::sensor, 2, 8, rng);
  auto base = forward(zq, zv, za, zs, params, ContextMode::gated);

  // Permute the video block rows of the assembled Z together with their
  // global positions, then rerun attention + relevance directly.
  const std::array<Index, 3> perm{2, 0, 1};
  Matrix<double> zperm = base.assembled.z.value();
  std::vector<Index> positions = base.assembled.positions;
  for (Index i = 0; i < 3; ++i) {
    zperm.row(i) = base.assembled.z.value().row(perm[static_cast<size_t>(i)]);
    positions[static_cast<size_t>(i)] = base.assembled.positions[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  }
  auto zt = Tensor<double>::from_value({7, 8}, zperm);
  std::vector<double> valid(7, 1.0);
  auto m = attend(zq.tokens, zt, params);
  auto scores = relevance(m, params.wr, positions, valid, cfg.pool, cfg.block_len);

  const auto& a0 = base.alpha->alpha.value();
  const auto& a1 = scores.alpha.value();
  for (Index i = 0; i < 3; ++i) CHECK(a1(0, i) == doctest::Approx(a0(0, perm[static_cast<size_t>(i)])).epsilon(1e-10));
  for (Index i = 3; i < 7; ++i) CHECK(a1(0, i) == doctest::Approx(a0(0, i)).epsilon(1e-10));

  // Fused context is invariant: the same convex combination, reordered.
  auto fused_base = fuse(*base.alpha, base.assembled.z);
  auto fused_perm = fuse(scores, zt);
  CHECK((fused_base.c.value() - fused_perm.c.value()).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("alpha stays on the simplex across seeded forwards") {
  auto cfg = toy_config(8, 2, {2, 2, 1});
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto params = QuartParams<double>::init(cfg, derive_seed(seed, "p"));
    Rng rng(derive_seed(seed, "x"));
    auto zq = make_seq(SeqTag::query, 2, 8, rng);
    auto zv = make_seq(SeqTag::video, 2, 8, rng);
    auto za = make_seq(SeqTag::audio, 2, 8, rng);
    auto zs = make_seq(SeqTag::sensor, 1, 8, rng);
    auto out = forward(zq, zv, za, zs, params, ContextMode::gated);
    const auto& a = out.alpha->alpha.value();
    CHECK(a.minCoeff() >= 0.0);
    CHECK(std::abs(a.sum() - 1.0) < 1e-6);
  }
}

TEST_CASE("modality_mass block sums") {
  Matrix<double> uniform = Matrix<double>::Constant(1, 18, 1.0 / 18.0);
  auto m = modality_mass<double>(uniform, {8, 6, 4});
  CHECK(m[0] == doctest::Approx(8.0 / 18.0));
  CHECK(m[1] == doctest::Approx(6.0 / 18.0));
  CHECK(m[2] == doctest::Approx(4.0 / 18.0));

  Matrix<double> onehot = Matrix<double>::Zero(1, 18);
  onehot(0, 10) = 1.0;  // audio block
  auto m2 = modality_mass<double>(onehot, {8, 6, 4});
  CHECK(m2 == std::array<double, 3>{0.0, 1.0, 0.0});

  Rng rng(12);
  auto logits = randn<double>(rng, {18}, 1.0, false);
  auto alpha = softmax(logits, 0);
  auto m3 = modality_mass<double>(alpha.value(), {8, 6, 4});
  double manual = 0;
  for (Index i = 8; i < 14; ++i) manual += alpha(i);
  CHECK(m3[1] == manual);
  CHECK(m3[0] + m3[1] + m3[2] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("quart forward + entropy loss passes grad_check") {
  auto cfg = toy_config(8, 2, {2, 2, 1});
  auto params = QuartParams<double>::init(cfg, 77);
  Rng rng(13);
  auto zq = make_seq(SeqTag::query, 2, 8, rng);
  auto zv = make_seq(SeqTag::video, 2, 8, rng);
  auto za = make_seq(SeqTag::audio, 2, 8, rng);
  auto zs = make_seq(SeqTag::sensor, 1, 8, rng);
  auto weights = randn<double>(rng, {8}, 1.0, false);

  std::vector<Tensor<double>> ps;
  for (auto& t : params.wq) ps.push_back(t);
  for (auto& t : params.wk) ps.push_back(t);
  for (auto& t : params.wv) ps.push_back(t);
  ps.push_back(params.wo);
  ps.push_back(params.wr);

  auto report = grad_check(
      [&](std::vector<Tensor<double>>&) {
        auto out = forward(zq, zv, za, zs, params, ContextMode::gated);
        auto ctx = reshape(out.context, {Index(8)});
        auto task = sum_all(mul(ctx, weights));
        auto reg = sum_all(xlogx(out.alpha->alpha));
        return add(task, scale(reg, 0.5));
      },
      ps, 1e-5);
  CHECK(report.max_rel_err < 1e-4);
}
