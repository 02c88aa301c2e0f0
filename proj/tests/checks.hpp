#pragma once

// Measurements shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "amber/corpus.hpp"
#include "amber/encoder.hpp"
#include "amber/objectives.hpp"
#include "support.hpp"

namespace amber::testing {

inline Sentence random_sentence(std::size_t n, int vocab, std::mt19937_64& rng, int language = 0) {
  std::uniform_int_distribution<int> pick(kFirstWordId, vocab - 1);
  Sentence s;
  s.language = language;
  for (std::size_t i = 0; i < n; ++i) s.tokens.push_back(pick(rng));
  return s;
}

inline Tensor<double> top_states(Encoder<double>& model, const EncoderInput& input) {
  Tape<double> tape;
  auto out = model.encode(tape, input);
  return out.hidden_state(out.hidden.size() - 1, 0);
}

struct LeakageResult {
  double protected_change = 0;  // largest change on x rows or y rows before the perturbed one
  double min_later_change = 0;  // smallest largest-change seen on the perturbed row or later
  std::size_t cases = 0;
};

// Under the target-to-source regime, replaces each y token in turn and
// measures how much the top states move.
inline LeakageResult leakage_scan(Encoder<double>& model, std::size_t max_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int vocab = model.config().vocab_size;
  LeakageResult result;
  result.min_later_change = std::numeric_limits<double>::infinity();
  for (std::size_t lx = 1; lx <= max_len; ++lx) {
    for (std::size_t ly = 1; ly <= max_len; ++ly) {
      SentencePair pair;
      pair.x = random_sentence(lx, vocab, rng);
      pair.y = random_sentence(ly, vocab, rng);
      const EncodedPair base = encode_pair(pair, MaskRegime::kTgt2Src, model.config().max_positions);
      const Tensor<double> ref = top_states(model, base.input);
      for (std::size_t j = 0; j < ly; ++j) {
        SentencePair changed = pair;
        changed.y.tokens[j] = pair.y.tokens[j] == kFirstWordId ? kFirstWordId + 1 : kFirstWordId;
        const EncodedPair enc = encode_pair(changed, MaskRegime::kTgt2Src, model.config().max_positions);
        const Tensor<double> got = top_states(model, enc.input);
        double later = 0;
        for (std::size_t r = 0; r < got.rows(); ++r) {
          double diff = 0;
          for (std::size_t c = 0; c < got.cols(); ++c) diff = std::max(diff, std::abs(got(r, c) - ref(r, c)));
          const std::size_t y_first = lx + kSeparatorsPerBlock;
          const bool is_protected = r < y_first || r - y_first < j;
          if (is_protected) result.protected_change = std::max(result.protected_change, diff);
          else later = std::max(later, diff);
        }
        result.min_later_change = std::min(result.min_later_change, later);
        ++result.cases;
      }
    }
  }
  return result;
}

// Largest difference between x-side states of a target-to-source encoding
// and the states of x encoded alone.
inline double separate_equivalence_gap(Encoder<double>& model, std::size_t max_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int vocab = model.config().vocab_size;
  double worst = 0;
  for (std::size_t lx = 1; lx <= max_len; ++lx) {
    for (std::size_t ly = 1; ly <= max_len; ++ly) {
      SentencePair pair;
      pair.x = random_sentence(lx, vocab, rng);
      pair.y = random_sentence(ly, vocab, rng);
      Tape<double> tape;
      const EncodedPair joint = encode_pair(pair, MaskRegime::kTgt2Src, model.config().max_positions);
      const EncodedPair alone = encode_sentence(pair.x, model.config().max_positions);
      const EncoderInput inputs[] = {joint.input, alone.input};
      auto out = model.encode(tape, std::span<const EncoderInput>(inputs));
      for (std::size_t layer = 0; layer < out.hidden.size(); ++layer) {
        const auto a = out.hidden_state(layer, 0), b = out.hidden_state(layer, 1);
        for (std::size_t r = 0; r < lx + kSeparatorsPerBlock; ++r)
          for (std::size_t c = 0; c < a.cols(); ++c) worst = std::max(worst, std::abs(a(r, c) - b(r, c)));
      }
    }
  }
  return worst;
}

inline std::vector<std::vector<double>> random_stochastic(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::bernoulli_distribution sparse(0.3);
  std::vector<std::vector<double>> m(rows, std::vector<double>(cols));
  for (auto& row : m) {
    double total = 0;
    for (double& v : row) {
      v = sparse(rng) ? 0.0 : u(rng);
      total += v;
    }
    if (total == 0) {
      row[rng() % cols] = 1.0;
      total = 1.0;
    }
    for (double& v : row) v /= total;
  }
  return m;
}

inline Tensor<double> to_tensor(const std::vector<std::vector<double>>& m) {
  Tensor<double> t(Shape{m.size(), m.front().size()});
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) t(i, j) = m[i][j];
  return t;
}

// WA loss of explicit per-head matrices.
inline double wa_value(const std::vector<std::vector<std::vector<double>>>& fwd,
                       const std::vector<std::vector<std::vector<double>>>& bwd) {
  Tape<double> tape;
  std::vector<Var<double>> f, b;
  for (const auto& m : fwd) f.push_back(tape.constant(to_tensor(m)));
  for (const auto& m : bwd) b.push_back(tape.constant(to_tensor(m)));
  return word_alignment_loss(std::span<const Var<double>>(f), std::span<const Var<double>>(b)).value().data[0];
}

inline double sa_value(const Tensor<double>& cx, const Tensor<double>& cy) {
  Tape<double> tape;
  return sentence_alignment_loss(tape.constant(cx), tape.constant(cy)).value().data[0];
}

inline std::vector<std::vector<double>> permutation_matrix(const std::vector<std::size_t>& perm) {
  std::vector<std::vector<double>> m(perm.size(), std::vector<double>(perm.size(), 0.0));
  for (std::size_t i = 0; i < perm.size(); ++i) m[i][perm[i]] = 1.0;
  return m;
}

inline std::vector<std::vector<double>> transpose(const std::vector<std::vector<double>>& m) {
  std::vector<std::vector<double>> t(m.front().size(), std::vector<double>(m.size()));
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) t[j][i] = m[i][j];
  return t;
}

// Batch of `parallel` translation pairs plus `mono` contiguous monolingual pairs.
inline Batch toy_batch(std::size_t parallel, std::size_t mono, int vocab, std::mt19937_64& rng) {
  Batch batch;
  std::uniform_int_distribution<std::size_t> len(2, 5);
  for (std::size_t k = 0; k < parallel; ++k) {
    SentencePair p;
    p.x = random_sentence(len(rng), vocab, rng, 1);
    p.y = random_sentence(len(rng), vocab, rng, 0);
    p.is_parallel = true;
    batch.pairs.push_back(p);
  }
  for (std::size_t k = 0; k < mono; ++k) {
    SentencePair p;
    p.x = random_sentence(len(rng), vocab, rng, 0);
    p.y = random_sentence(len(rng), vocab, rng, 0);
    batch.pairs.push_back(p);
  }
  return batch;
}

}  // namespace amber::testing
