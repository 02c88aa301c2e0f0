#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "amber/autodiff.hpp"

namespace amber {

// Attention regimes over a pair laid out as [x-block ; y-block].
//   kFull      every position attends every position
//   kTgt2Src   x attends x; y_i attends x and y_{<i}
//   kSrc2Tgt   y attends y; x_j attends y and x_{<j}
//   kSeparate  x attends x, y attends y (len_y may be 0)
enum class MaskRegime { kFull, kTgt2Src, kSrc2Tgt, kSeparate };

std::string_view to_string(MaskRegime regime);
MaskRegime parse_regime(std::string_view name);

Mask build_mask(MaskRegime regime, std::size_t len_x, std::size_t len_y);

// In the aligned-pair layouts every sentence block ends with one [SEP].
inline constexpr std::size_t kSeparatorsPerBlock = 1;

struct ModelConfig {
  int vocab_size = 260;
  int layers = 2;
  int heads = 4;
  int hidden = 64;
  int ffn_dim = 256;
  int max_positions = 32;
  double dropout = 0.0;
  Precision precision = Precision::kTrain32;
  double init_std = 0.02;
  double ln_eps = 1e-5;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct EncoderInput {
  std::vector<int> tokens;
  std::vector<int> segments;
  std::vector<int> positions;
  Mask mask;
};

template <typename T>
struct EncoderOutput {
  std::shared_ptr<const PackedLayout> layout;
  // One packed [rows x hidden] matrix per layer. The last entry is the
  // layer-normalised top output used by every objective.
  std::vector<Var<T>> hidden;
  // One packed probability tensor per layer (see PackedLayout::prob_index).
  std::vector<Var<T>> attention;
  // Top-layer projections, kept for cross_attention.
  Var<T> top_queries, top_keys;
  T score_scale = T(1);
  // Parameter leaves recorded for this pass, in Encoder::parameters() order.
  std::vector<Var<T>> parameter_nodes;

  std::size_t sequences() const { return layout->lengths.size(); }
  std::size_t length(std::size_t seq) const { return layout->lengths.at(seq); }
  std::size_t row(std::size_t seq, std::size_t pos) const { return layout->offsets.at(seq) + pos; }
  Var<T> top() const { return hidden.back(); }

  Tensor<T> hidden_state(std::size_t layer, std::size_t seq) const;
  Tensor<T> attention_matrix(std::size_t layer, std::size_t seq, std::size_t head) const;
};

template <typename T>
class Encoder {
 public:
  Encoder(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  Parameter<T>& parameter(std::string_view name);
  std::size_t parameter_count() const;

  EncoderOutput<T> encode(Tape<T>& tape, std::span<const EncoderInput> inputs,
                          std::mt19937_64* dropout_rng = nullptr);
  EncoderOutput<T> encode(Tape<T>& tape, const EncoderInput& input) {
    return encode(tape, std::span<const EncoderInput>(&input, 1));
  }

  // Vocabulary logits (tied input embedding plus output bias) for the given
  // packed rows of the top output. Must follow encode() on the same tape.
  Var<T> output_logits(const EncoderOutput<T>& out, std::span<const int> rows);

 private:
  struct LayerIndex {
    std::size_t ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gain, ln2_bias, w1, b1, w2, b2;
  };

  std::size_t add_parameter(std::string name, Shape shape, std::mt19937_64& rng, double std_dev, double fill);

  ModelConfig config_;
  std::vector<Parameter<T>> params_;
  std::size_t token_embedding_ = 0, position_embedding_ = 0, segment_embedding_ = 0;
  std::size_t final_gain_ = 0, final_bias_ = 0, output_bias_ = 0;
  std::vector<LayerIndex> layers_;
};

enum class AttentionDirection { kTargetToSource, kSourceToTarget };

// Per-head top-layer attention between the word positions of an aligned pair
// (x words, [SEP], y words, [SEP]), rows renormalised to sum to one.
// kTargetToSource yields |y| x |x| matrices and requires the kTgt2Src regime;
// kSourceToTarget yields |x| x |y| and requires kSrc2Tgt.
template <typename T>
std::vector<Var<T>> cross_attention(const EncoderOutput<T>& out, std::size_t seq, AttentionDirection direction,
                                    std::size_t len_x, std::size_t len_y);

extern template class Encoder<float>;
extern template class Encoder<double>;

}  // namespace amber
