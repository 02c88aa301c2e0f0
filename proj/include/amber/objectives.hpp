#pragma once

#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "amber/corpus.hpp"
#include "amber/encoder.hpp"

namespace amber {

enum class MaskAction { kMask, kRandom, kKeep };

// Masked positions index the concatenated word sequence z = [x ; y].
struct MaskingPlan {
  std::vector<std::size_t> positions;
  std::vector<MaskAction> actions;
  std::vector<int> originals;
  std::vector<int> replacements;  // token placed at each position (MASK id, random id or the original)
};

// Every non-special position is selected with probability `rate`; if none is
// selected one is forced uniformly. Selected positions become [MASK] 80%,
// a random word 10%, unchanged 10%. Random words are drawn from
// [kFirstWordId, vocab_size).
MaskingPlan select_mask_positions(std::span<const int> z, double rate, int vocab_size, std::mt19937_64& rng);
std::vector<int> apply_masking(std::span<const int> z, const MaskingPlan& plan);

struct ObjectiveFlags {
  bool mlm = true;
  bool tlm = false;
  bool wa = false;
  bool sa = false;

  static ObjectiveFlags parse(std::string_view list);  // e.g. "mlm,tlm,wa"
  std::string str() const;
  bool operator==(const ObjectiveFlags&) const = default;
};

struct ObjectiveWeights {
  double mlm = 1.0;
  double tlm = 1.0;
  double wa = 1.0;
  double sa = 1.0;
};

struct LossBreakdown {
  double mlm = 0;  // monolingual pairs, mean over their masked tokens
  double tlm = 0;  // parallel pairs, mean over their masked tokens
  double sa = 0;
  double wa = 0;
  double total = 0;
  std::size_t masked_tokens = 0;
  std::size_t tlm_masked_tokens = 0;
  std::size_t parallel_pairs = 0;
};

template <typename T>
struct CombinedLoss {
  LossBreakdown breakdown;
  Var<T> total;
};

// Mean cross-entropy of the originals at the plan's positions, with the
// pair encoded under the full mask after corruption.
template <typename T>
Var<T> mlm_loss(Encoder<T>& model, Tape<T>& tape, const SentencePair& pair, const MaskingPlan& plan);

// Mean of the top output over the given sequence positions.
template <typename T>
Var<T> sentence_embedding(const EncoderOutput<T>& out, std::size_t seq, std::span<const std::size_t> positions);

// Row b of source pairs with row b of target; the other rows are negatives.
template <typename T>
Var<T> sentence_alignment_loss(Var<T> source, Var<T> target);

// 1 - mean_h sum_ij fwd_h[i,j] * bwd_h[j,i] / min(|x|, |y|)
template <typename T>
Var<T> word_alignment_loss(std::span<const Var<T>> forward, std::span<const Var<T>> backward);

struct LossOptions {
  ObjectiveFlags flags;
  ObjectiveWeights weights;
  double mask_rate = 0.15;
};

template <typename T>
CombinedLoss<T> combined_loss(Encoder<T>& model, Tape<T>& tape, const Batch& batch, const LossOptions& options,
                              std::mt19937_64& rng, std::mt19937_64* dropout_rng = nullptr);

}  // namespace amber
