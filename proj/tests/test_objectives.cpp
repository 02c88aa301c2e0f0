#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>
#include <numeric>
#include <random>

#include "amber/objectives.hpp"
#include "checks.hpp"
#include "support.hpp"

using namespace amber;
using namespace amber::testing;

namespace {

using Matrix = std::vector<std::vector<double>>;

std::vector<int> word_sequence(std::size_t n) {
  std::vector<int> z(n);
  for (std::size_t i = 0; i < n; ++i) z[i] = kFirstWordId + static_cast<int>(i % 20);
  return z;
}

// All functions {0..n-1} -> {0..m-1} as hard row-stochastic n x m matrices.
std::vector<Matrix> hard_alignments(std::size_t n, std::size_t m) {
  std::vector<Matrix> out;
  std::vector<std::size_t> f(n, 0);
  while (true) {
    Matrix a(n, std::vector<double>(m, 0.0));
    for (std::size_t i = 0; i < n; ++i) a[i][f[i]] = 1.0;
    out.push_back(a);
    std::size_t k = 0;
    while (k < n && ++f[k] == m) f[k++] = 0;
    if (k == n) break;
  }
  return out;
}

Var<double> embed_batch_loss(Encoder<double>& model, Tape<double>& tape, const Batch& batch, const char* flags,
                             std::uint64_t seed) {
  LossOptions options;
  options.flags = ObjectiveFlags::parse(flags);
  std::mt19937_64 rng(seed);
  return combined_loss(model, tape, batch, options, rng).total;
}

}  // namespace

TEST_CASE("mask selection examples") {
  std::mt19937_64 rng(1);
  const auto five = word_sequence(5);
  const auto all = select_mask_positions(five, 1.0, 30, rng);
  CHECK(all.positions == std::vector<std::size_t>{0, 1, 2, 3, 4});

  // A single maskable token among specials is always chosen.
  const std::vector<int> one{kClsId, 9, kSepId};
  for (int trial = 0; trial < 50; ++trial) {
    const auto plan = select_mask_positions(one, 0.15, 30, rng);
    CHECK(plan.positions == std::vector<std::size_t>{1});
    CHECK(plan.originals == std::vector<int>{9});
  }

  std::mt19937_64 seven(7);
  const auto many = select_mask_positions(word_sequence(1000), 0.15, 30, seven);
  const double fraction = static_cast<double>(many.positions.size()) / 1000.0;
  CHECK(fraction >= 0.12);
  CHECK(fraction <= 0.18);
}

TEST_CASE("mask selection errors") {
  std::mt19937_64 rng(1);
  const std::vector<int> specials{kClsId, kSepId, kPadId};
  try {
    select_mask_positions(specials, 0.15, 30, rng);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kInput);
  }
  CHECK_THROWS_AS(select_mask_positions(word_sequence(4), 0.0, 30, rng), Error);
}

TEST_CASE("mask actions split 80/10/10 and never touch specials") {
  std::mt19937_64 rng(21);
  std::vector<int> z = word_sequence(40);
  z[0] = kClsId;
  z[17] = kSepId;
  std::size_t counts[3] = {0, 0, 0}, total = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    const auto plan = select_mask_positions(z, 0.15, 30, rng);
    REQUIRE(!plan.positions.empty());
    for (std::size_t k = 0; k < plan.positions.size(); ++k) {
      CHECK_FALSE(is_special(z[plan.positions[k]]));
      ++counts[static_cast<int>(plan.actions[k])];
      ++total;
      if (plan.actions[k] == MaskAction::kMask) CHECK(plan.replacements[k] == kMaskId);
      if (plan.actions[k] == MaskAction::kKeep) CHECK(plan.replacements[k] == plan.originals[k]);
      if (plan.actions[k] == MaskAction::kRandom) {
        CHECK(plan.replacements[k] >= kFirstWordId);
        CHECK(plan.replacements[k] < 30);
      }
    }
    const auto corrupted = apply_masking(z, plan);
    for (std::size_t k = 0; k < plan.positions.size(); ++k) CHECK(corrupted[plan.positions[k]] == plan.replacements[k]);
  }
  CHECK(static_cast<double>(counts[0]) / static_cast<double>(total) == doctest::Approx(0.8).epsilon(0.03));
  CHECK(static_cast<double>(counts[1]) / static_cast<double>(total) == doctest::Approx(0.1).epsilon(0.15));
  CHECK(static_cast<double>(counts[2]) / static_cast<double>(total) == doctest::Approx(0.1).epsilon(0.15));
}

TEST_CASE("objective flags parse and print") {
  const auto f = ObjectiveFlags::parse("mlm, tlm,wa");
  CHECK(f.mlm);
  CHECK(f.tlm);
  CHECK(f.wa);
  CHECK_FALSE(f.sa);
  CHECK(f.str() == "mlm,tlm,wa");
  CHECK(ObjectiveFlags::parse(f.str()) == f);
  CHECK_THROWS_AS(ObjectiveFlags::parse("mlm,nsp"), Error);
  CHECK_THROWS_AS(ObjectiveFlags::parse(""), Error);
}

TEST_CASE("mlm loss with a uniform output head is log V") {
  Encoder<double> model(toy_config(), 1);
  std::fill(model.parameter("embed.token").value.data.begin(), model.parameter("embed.token").value.data.end(), 0.0);
  std::fill(model.parameter("output.bias").value.data.begin(), model.parameter("output.bias").value.data.end(), 0.0);
  std::mt19937_64 rng(3);
  SentencePair pair;
  pair.x = random_sentence(4, 24, rng);
  pair.y = random_sentence(3, 24, rng);
  std::vector<int> z = pair.x.tokens;
  z.insert(z.end(), pair.y.tokens.begin(), pair.y.tokens.end());
  const auto plan = select_mask_positions(z, 0.5, 24, rng);
  Tape<double> tape;
  CHECK(mlm_loss(model, tape, pair, plan).value().data[0] == doctest::Approx(std::log(24.0)).epsilon(1e-12));
}

TEST_CASE("mlm loss of a constructed near-perfect predictor") {
  // Two word tokens (ids 4 and 5) plus the four specials.
  ModelConfig c = toy_config(6);
  Encoder<double> model(c, 2);
  std::fill(model.parameter("embed.token").value.data.begin(), model.parameter("embed.token").value.data.end(), 0.0);
  auto& bias = model.parameter("output.bias").value.data;
  std::fill(bias.begin(), bias.end(), 0.0);
  bias[4] = 40.0;
  SentencePair pair;
  pair.x.tokens = {4, 4};
  pair.y.tokens = {4};
  MaskingPlan plan;
  plan.positions = {1};
  plan.actions = {MaskAction::kMask};
  plan.originals = {4};
  plan.replacements = {kMaskId};
  Tape<double> tape;
  CHECK(mlm_loss(model, tape, pair, plan).value().data[0] < 1e-3);
}

TEST_CASE("sentence embedding examples") {
  Tape<double> tape;
  std::mt19937_64 rng(4);
  const auto states = random_tensor({3, 5}, rng);
  auto layout = PackedLayout::build({3}, {Mask(3, 3, true)}, 1);
  EncoderOutput<double> out;
  out.layout = layout;
  out.hidden.push_back(tape.constant(states));

  const std::size_t one[] = {1};
  CHECK(sentence_embedding(out, 0, one).value().data == std::vector<double>(states.row(1).begin(), states.row(1).end()));

  const std::size_t all[] = {0, 1, 2};
  const auto mean = sentence_embedding(out, 0, all).value();
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(std::abs(mean.data[k] - (states(0, k) + states(1, k) + states(2, k)) / 3.0) <= 1e-7);
  }

  Tensor<double> pm(Shape{2, 3}, std::vector<double>{1, -2, 3, -1, 2, -3});
  EncoderOutput<double> sym;
  sym.layout = PackedLayout::build({2}, {Mask(2, 2, true)}, 1);
  sym.hidden.push_back(tape.constant(pm));
  const std::size_t both[] = {0, 1};
  CHECK(sentence_embedding(sym, 0, both).value().data == std::vector<double>{0, 0, 0});

  try {
    sentence_embedding(out, 0, std::span<const std::size_t>());
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kInput);
  }
}

TEST_CASE("sentence alignment closed forms") {
  for (std::size_t b : {2u, 4u, 8u}) {
    Tensor<double> same(Shape{b, 3}, 0.25);
    CHECK(std::abs(sa_value(same, same) - std::log(static_cast<double>(b))) <= 1e-6);
  }
  // match = 1, mismatch = 0
  const auto cx = Tensor<double>::matrix({{1, 0}, {0, 1}});
  CHECK(sa_value(cx, cx) == doctest::Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 1.0))).epsilon(1e-12));
  CHECK(sa_value(cx, cx) == doctest::Approx(0.3133).epsilon(1e-4));
  // separation limit
  const auto big = Tensor<double>::matrix({{10, 0}, {0, 10}});
  CHECK(sa_value(big, big) < 1e-3);
}

TEST_CASE("sentence alignment needs negatives") {
  const auto one = Tensor<double>::matrix({{1, 2}});
  try {
    sa_value(one, one);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kBatchComposition);
  }
}

TEST_CASE("sentence alignment is rotation invariant") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 2 + rng() % 6, d = 2 + rng() % 6;
    const auto cx = random_tensor({b, d}, rng), cy = random_tensor({b, d}, rng);
    Eigen::MatrixXd g(d, d);
    std::normal_distribution<double> normal;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = normal(rng);
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
    auto rotate = [&](const Tensor<double>& t) {
      Tensor<double> r(t.shape);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < d; ++j) {
          double s = 0;
          for (std::size_t k = 0; k < d; ++k) s += t(i, k) * q(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
          r(i, j) = s;
        }
      return r;
    };
    CHECK(std::abs(sa_value(cx, cy) - sa_value(rotate(cx), rotate(cy))) <= 1e-5);
  }
}

TEST_CASE("word alignment examples") {
  const Matrix p = permutation_matrix({2, 0, 1});
  CHECK(std::abs(wa_value({p}, {transpose(p)})) <= 1e-9);

  // Forward links y_i -> x_i, backward links x_0 -> y_1 and x_1 -> y_0.
  const Matrix f = permutation_matrix({0, 1});
  const Matrix crossed = permutation_matrix({1, 0});
  CHECK(std::abs(wa_value({f}, {crossed}) - 1.0) <= 1e-9);

  const Matrix uniform_fwd(3, std::vector<double>(2, 0.5));
  const Matrix uniform_bwd(2, std::vector<double>(3, 1.0 / 3.0));
  CHECK(std::abs(wa_value({uniform_fwd}, {uniform_bwd}) - 0.5) <= 1e-9);
}

TEST_CASE("word alignment shape errors") {
  const Matrix a(3, std::vector<double>(2, 0.5));
  for (const auto& [fwd, bwd] :
       std::vector<std::pair<std::vector<Matrix>, std::vector<Matrix>>>{{{a}, {a}}, {{a, a}, {transpose(a)}}}) {
    try {
      wa_value(fwd, bwd);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kShape);
    }
  }
}

TEST_CASE("word alignment stays in [0, 1] for stochastic inputs") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t nx = 1 + rng() % 6, ny = 1 + rng() % 6, heads = 1 + rng() % 3;
    std::vector<Matrix> fwd, bwd;
    for (std::size_t h = 0; h < heads; ++h) {
      fwd.push_back(random_stochastic(ny, nx, rng));
      bwd.push_back(random_stochastic(nx, ny, rng));
    }
    const double l = wa_value(fwd, bwd);
    CHECK(l >= -1e-12);
    CHECK(l <= 1.0 + 1e-12);
  }
}

TEST_CASE("word alignment is zero exactly for inverse hard alignments") {
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto all = hard_alignments(n, n);
    for (const auto& f : all) {
      for (const auto& b : all) {
        const bool inverse = transpose(f) == b;
        bool is_perm = true;
        for (std::size_t j = 0; j < n; ++j) {
          double col = 0;
          for (std::size_t i = 0; i < n; ++i) col += f[i][j];
          is_perm = is_perm && col == 1.0;
        }
        const double l = wa_value({f}, {b});
        CHECK((std::abs(l) <= 1e-12) == (inverse && is_perm));
      }
    }
  }
}

TEST_CASE("combined loss scope") {
  Encoder<double> model(toy_config(), 4);
  std::mt19937_64 rng(5);
  const Batch mono = toy_batch(0, 3, 24, rng);
  LossOptions options;
  options.flags = ObjectiveFlags::parse("mlm");
  {
    Tape<double> tape;
    std::mt19937_64 r(1);
    const auto loss = combined_loss(model, tape, mono, options, r);
    CHECK(loss.breakdown.total == loss.breakdown.mlm);
    CHECK(loss.breakdown.tlm == 0.0);
    CHECK(loss.breakdown.sa == 0.0);
    CHECK(loss.breakdown.wa == 0.0);
    CHECK(loss.breakdown.masked_tokens > 0);
  }
  options.flags = ObjectiveFlags::parse("mlm,tlm,wa,sa");
  {
    Tape<double> tape;
    std::mt19937_64 r(1);
    try {
      combined_loss(model, tape, mono, options, r);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kBatchComposition);
    }
  }
  {
    const Batch one = toy_batch(1, 2, 24, rng);
    options.flags = ObjectiveFlags::parse("mlm,sa");
    Tape<double> tape;
    std::mt19937_64 r(1);
    CHECK_THROWS_AS(combined_loss(model, tape, one, options, r), Error);
    // Without sa or wa, parallel pairs only feed TLM.
    options.flags = ObjectiveFlags::parse("mlm,tlm");
    const auto loss = combined_loss(model, tape, one, options, r);
    CHECK(loss.breakdown.sa == 0.0);
    CHECK(loss.breakdown.wa == 0.0);
    CHECK(loss.breakdown.tlm > 0.0);
  }
}

TEST_CASE("combined loss equals the independently computed terms") {
  Encoder<double> model(toy_config(), 6);
  std::mt19937_64 rng(7);
  const Batch batch = toy_batch(2, 0, 24, rng);
  LossOptions options;
  options.flags = ObjectiveFlags::parse("mlm,tlm,wa,sa");
  Tape<double> tape;
  std::mt19937_64 mask_rng(99);
  const auto combined = combined_loss(model, tape, batch, options, mask_rng);

  // TLM: same masking stream, one pair at a time, token-weighted mean.
  std::mt19937_64 replay(99);
  double tlm_sum = 0;
  std::size_t tlm_count = 0;
  for (const auto& pair : batch.pairs) {
    std::vector<int> z = pair.x.tokens;
    z.insert(z.end(), pair.y.tokens.begin(), pair.y.tokens.end());
    const auto plan = select_mask_positions(z, options.mask_rate, 24, replay);
    Tape<double> t;
    tlm_sum += mlm_loss(model, t, pair, plan).value().data[0] * static_cast<double>(plan.positions.size());
    tlm_count += plan.positions.size();
  }
  const double tlm = tlm_sum / static_cast<double>(tlm_count);

  double wa = 0;
  for (const auto& pair : batch.pairs) {
    Tape<double> t;
    const auto fwd_in = encode_pair(pair, MaskRegime::kTgt2Src, 32);
    const auto bwd_in = encode_pair(pair, MaskRegime::kSrc2Tgt, 32);
    auto fo = model.encode(t, fwd_in.input);
    auto bo = model.encode(t, bwd_in.input);
    const auto nx = pair.x.tokens.size(), ny = pair.y.tokens.size();
    auto f = cross_attention(fo, 0, AttentionDirection::kTargetToSource, nx, ny);
    auto b = cross_attention(bo, 0, AttentionDirection::kSourceToTarget, nx, ny);
    wa += word_alignment_loss<double>(f, b).value().data[0];
  }
  wa /= static_cast<double>(batch.pairs.size());

  Tensor<double> cx(Shape{2, 32}), cy(Shape{2, 32});
  for (std::size_t k = 0; k < 2; ++k) {
    for (int side = 0; side < 2; ++side) {
      const Sentence& s = side == 0 ? batch.pairs[k].x : batch.pairs[k].y;
      Tape<double> t;
      const auto enc = encode_sentence(s, 32);
      auto out = model.encode(t, enc.input);
      const auto top = out.hidden_state(out.hidden.size() - 1, 0);
      Tensor<double>& dst = side == 0 ? cx : cy;
      for (std::size_t c = 0; c < 32; ++c) {
        double m = 0;
        for (std::size_t r : enc.x_rows) m += top(r, c);
        dst(k, c) = m / static_cast<double>(enc.x_rows.size());
      }
    }
  }
  const double sa = sa_value(cx, cy);

  const auto& lb = combined.breakdown;
  CHECK(lb.mlm == 0.0);
  CHECK(std::abs(lb.tlm - tlm) <= 1e-6);
  CHECK(std::abs(lb.wa - wa) <= 1e-6);
  CHECK(std::abs(lb.sa - sa) <= 1e-6);
  CHECK(std::abs(lb.total - (tlm + wa + sa)) <= 1e-6);
  CHECK(lb.wa >= 0.0);
  CHECK(lb.wa <= 1.0);
  CHECK(lb.parallel_pairs == 2);
}

TEST_CASE("objective weights scale their terms") {
  Encoder<double> model(toy_config(), 8);
  std::mt19937_64 rng(9);
  const Batch batch = toy_batch(3, 2, 24, rng);
  LossOptions options;
  options.flags = ObjectiveFlags::parse("mlm,tlm,wa,sa");
  options.weights = {0.5, 2.0, 3.0, 0.25};
  Tape<double> tape;
  std::mt19937_64 r(4);
  const auto lb = combined_loss(model, tape, batch, options, r).breakdown;
  CHECK(lb.total == doctest::Approx(0.5 * lb.mlm + 2.0 * lb.tlm + 3.0 * lb.wa + 0.25 * lb.sa).epsilon(1e-12));
}

TEST_CASE("objective gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 2; ++seed) {
    Encoder<double> model(toy_config(), seed);
    std::mt19937_64 rng(seed + 100);
    const Batch batch = toy_batch(3, 2, 24, rng);
    for (const char* flags : {"mlm", "sa", "wa"}) {
      const double err = parameter_gradient_error(
          model, [&](Tape<double>& t) { return embed_batch_loss(model, t, batch, flags, seed); }, 6, seed);
      INFO("seed " << seed << " objective " << flags << " max relative error " << err);
      CHECK(err < 1e-4);
    }
  }
}
