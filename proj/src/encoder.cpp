#include "amber/encoder.hpp"

#include <cmath>

namespace amber {

std::string_view to_string(MaskRegime regime) {
  switch (regime) {
    case MaskRegime::kFull: return "full";
    case MaskRegime::kTgt2Src: return "tgt2src";
    case MaskRegime::kSrc2Tgt: return "src2tgt";
    case MaskRegime::kSeparate: return "separate";
  }
  return "full";
}

MaskRegime parse_regime(std::string_view name) {
  if (name == "full") return MaskRegime::kFull;
  if (name == "tgt2src") return MaskRegime::kTgt2Src;
  if (name == "src2tgt") return MaskRegime::kSrc2Tgt;
  if (name == "separate") return MaskRegime::kSeparate;
  fail(ErrorKind::kConfig, "unknown mask regime '" + std::string(name) + "'");
}

Mask build_mask(MaskRegime regime, std::size_t len_x, std::size_t len_y) {
  if (len_x == 0) fail(ErrorKind::kInput, "build_mask: empty source block");
  if (len_y == 0 && regime != MaskRegime::kSeparate) {
    fail(ErrorKind::kInput, "build_mask: empty target block needs the separate regime");
  }
  const std::size_t n = len_x + len_y;
  Mask mask(n, n);
  auto in_x = [len_x](std::size_t p) { return p < len_x; };
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      bool allow = false;
      switch (regime) {
        case MaskRegime::kFull:
          allow = true;
          break;
        case MaskRegime::kSeparate:
          allow = in_x(r) == in_x(c);
          break;
        case MaskRegime::kTgt2Src:
          // x sees x; y_i sees all of x and strictly earlier y.
          allow = in_x(r) ? in_x(c) : (in_x(c) || c < r);
          break;
        case MaskRegime::kSrc2Tgt:
          // y sees y; x_j sees all of y and strictly earlier x.
          allow = in_x(r) ? (!in_x(c) || c < r) : !in_x(c);
          break;
      }
      mask.set(r, c, allow);
    }
  }
  return mask;
}

void ModelConfig::validate() const {
  auto bad = [](const std::string& field, const std::string& why) {
    fail(ErrorKind::kConfig, "model." + field + ": " + why);
  };
  if (vocab_size < 5) bad("vocab_size", "must be at least 5");
  if (layers < 1) bad("layers", "must be positive");
  if (heads < 1) bad("heads", "must be positive");
  if (hidden < 1 || hidden % heads != 0) bad("hidden", "must be a positive multiple of heads");
  if (ffn_dim < 1) bad("ffn_dim", "must be positive");
  if (max_positions < 2) bad("max_positions", "must be at least 2");
  if (dropout < 0.0 || dropout >= 1.0) bad("dropout", "must lie in [0, 1)");
  if (!(init_std > 0.0)) bad("init_std", "must be positive");
  if (!(ln_eps > 0.0)) bad("ln_eps", "must be positive");
}

template <typename T>
Tensor<T> EncoderOutput<T>::hidden_state(std::size_t layer, std::size_t seq) const {
  const Tensor<T>& packed = hidden.at(layer).value();
  const std::size_t n = length(seq), d = packed.cols();
  Tensor<T> out(Shape{n, d});
  for (std::size_t r = 0; r < n; ++r) {
    auto src = packed.row(row(seq, r));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

template <typename T>
Tensor<T> EncoderOutput<T>::attention_matrix(std::size_t layer, std::size_t seq, std::size_t head) const {
  const auto& p = attention.at(layer).value().data;
  const std::size_t n = length(seq);
  Tensor<T> out(Shape{n, n});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) out(r, c) = p[layout->prob_index(seq, head, r, c)];
  return out;
}

template <typename T>
Encoder<T>::Encoder(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t v = static_cast<std::size_t>(config_.vocab_size);
  const std::size_t d = static_cast<std::size_t>(config_.hidden);
  const std::size_t f = static_cast<std::size_t>(config_.ffn_dim);
  const double sd = config_.init_std;
  params_.reserve(8 + 16 * static_cast<std::size_t>(config_.layers));
  token_embedding_ = add_parameter("embed.token", {v, d}, rng, sd, 0);
  position_embedding_ = add_parameter("embed.position", {static_cast<std::size_t>(config_.max_positions), d}, rng, sd, 0);
  segment_embedding_ = add_parameter("embed.segment", {2, d}, rng, sd, 0);
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerIndex li{};
    li.ln1_gain = add_parameter(p + "ln1.gain", {d}, rng, 0, 1);
    li.ln1_bias = add_parameter(p + "ln1.bias", {d}, rng, 0, 0);
    li.wq = add_parameter(p + "attn.wq", {d, d}, rng, sd, 0);
    li.bq = add_parameter(p + "attn.bq", {d}, rng, 0, 0);
    li.wk = add_parameter(p + "attn.wk", {d, d}, rng, sd, 0);
    li.bk = add_parameter(p + "attn.bk", {d}, rng, 0, 0);
    li.wv = add_parameter(p + "attn.wv", {d, d}, rng, sd, 0);
    li.bv = add_parameter(p + "attn.bv", {d}, rng, 0, 0);
    li.wo = add_parameter(p + "attn.wo", {d, d}, rng, sd, 0);
    li.bo = add_parameter(p + "attn.bo", {d}, rng, 0, 0);
    li.ln2_gain = add_parameter(p + "ln2.gain", {d}, rng, 0, 1);
    li.ln2_bias = add_parameter(p + "ln2.bias", {d}, rng, 0, 0);
    li.w1 = add_parameter(p + "ffn.w1", {d, f}, rng, sd, 0);
    li.b1 = add_parameter(p + "ffn.b1", {f}, rng, 0, 0);
    li.w2 = add_parameter(p + "ffn.w2", {f, d}, rng, sd, 0);
    li.b2 = add_parameter(p + "ffn.b2", {d}, rng, 0, 0);
    layers_.push_back(li);
  }
  final_gain_ = add_parameter("final_ln.gain", {d}, rng, 0, 1);
  final_bias_ = add_parameter("final_ln.bias", {d}, rng, 0, 0);
  output_bias_ = add_parameter("output.bias", {v}, rng, 0, 0);
}

template <typename T>
std::size_t Encoder<T>::add_parameter(std::string name, Shape shape, std::mt19937_64& rng, double std_dev,
                                      double fill) {
  Tensor<T> value(std::move(shape), static_cast<T>(fill));
  if (std_dev > 0) {
    std::normal_distribution<double> normal(0.0, std_dev);
    for (auto& x : value.data) x = static_cast<T>(normal(rng));
  }
  params_.emplace_back(std::move(name), std::move(value));
  return params_.size() - 1;
}

template <typename T>
Parameter<T>& Encoder<T>::parameter(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  fail(ErrorKind::kUsage, "no parameter named '" + std::string(name) + "'");
}

template <typename T>
std::size_t Encoder<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
EncoderOutput<T> Encoder<T>::encode(Tape<T>& tape, std::span<const EncoderInput> inputs,
                                    std::mt19937_64* dropout_rng) {
  if (inputs.empty()) fail(ErrorKind::kInput, "encode: no sequences");
  const std::size_t max_pos = static_cast<std::size_t>(config_.max_positions);
  std::vector<int> tokens, segments, positions;
  std::vector<std::size_t> lengths;
  std::vector<Mask> masks;
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    const EncoderInput& in = inputs[s];
    const std::size_t n = in.tokens.size();
    if (n == 0) fail(ErrorKind::kInput, "encode: empty sequence");
    if (in.segments.size() != n || in.positions.size() != n) {
      fail(ErrorKind::kDimension, "encode: tokens, segments and positions differ in length");
    }
    if (n > max_pos) {
      fail(ErrorKind::kLength, "encode: sequence of " + std::to_string(n) + " exceeds max_positions " +
                                   std::to_string(max_pos));
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (in.tokens[i] < 0 || in.tokens[i] >= config_.vocab_size) {
        fail(ErrorKind::kIndex, "encode: token id " + std::to_string(in.tokens[i]) + " outside vocabulary");
      }
      if (in.positions[i] < 0 || static_cast<std::size_t>(in.positions[i]) >= max_pos) {
        fail(ErrorKind::kLength, "encode: position " + std::to_string(in.positions[i]) + " exceeds max_positions");
      }
      if (in.segments[i] != 0 && in.segments[i] != 1) fail(ErrorKind::kIndex, "encode: segment id must be 0 or 1");
    }
    tokens.insert(tokens.end(), in.tokens.begin(), in.tokens.end());
    segments.insert(segments.end(), in.segments.begin(), in.segments.end());
    positions.insert(positions.end(), in.positions.begin(), in.positions.end());
    lengths.push_back(n);
    masks.push_back(in.mask);
  }
  const std::size_t heads = static_cast<std::size_t>(config_.heads);
  auto layout = PackedLayout::build(std::move(lengths), std::move(masks), heads);

  EncoderOutput<T> out;
  out.layout = layout;
  out.parameter_nodes.reserve(params_.size());
  for (auto& p : params_) out.parameter_nodes.push_back(tape.parameter(p));
  const auto& pv = out.parameter_nodes;

  const T eps = static_cast<T>(config_.ln_eps);
  const T rate = dropout_rng ? static_cast<T>(config_.dropout) : T(0);
  const T score_scale = T(1) / std::sqrt(static_cast<T>(config_.hidden / config_.heads));
  auto drop = [&](Var<T> v) { return rate > T(0) ? dropout(v, rate, *dropout_rng) : v; };

  Var<T> h = add(add(gather_rows(pv[token_embedding_], std::span<const int>(tokens)),
                     gather_rows(pv[position_embedding_], std::span<const int>(positions))),
                 gather_rows(pv[segment_embedding_], std::span<const int>(segments)));
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerIndex& li = layers_[l];
    Var<T> a = layer_norm(h, pv[li.ln1_gain], pv[li.ln1_bias], eps);
    Var<T> q = add_row(matmul(a, pv[li.wq]), pv[li.bq]);
    Var<T> k = add_row(matmul(a, pv[li.wk]), pv[li.bk]);
    Var<T> v = add_row(matmul(a, pv[li.wv]), pv[li.bv]);
    Var<T> probs = attention_probs(q, k, layout, score_scale);
    out.attention.push_back(probs);
    if (l + 1 == layers_.size()) {
      out.top_queries = q;
      out.top_keys = k;
      out.score_scale = score_scale;
    }
    Var<T> mixed = add_row(matmul(attention_mix(probs, v, layout), pv[li.wo]), pv[li.bo]);
    h = add(h, drop(mixed));
    Var<T> f = layer_norm(h, pv[li.ln2_gain], pv[li.ln2_bias], eps);
    f = gelu(add_row(matmul(f, pv[li.w1]), pv[li.b1]));
    f = add_row(matmul(f, pv[li.w2]), pv[li.b2]);
    h = add(h, drop(f));
    if (l + 1 < layers_.size()) out.hidden.push_back(h);
  }
  out.hidden.push_back(layer_norm(h, pv[final_gain_], pv[final_bias_], eps));
  return out;
}

template <typename T>
Var<T> Encoder<T>::output_logits(const EncoderOutput<T>& out, std::span<const int> rows) {
  if (out.parameter_nodes.size() != params_.size()) fail(ErrorKind::kUsage, "output_logits: foreign encoder output");
  Var<T> selected = gather_rows(out.top(), rows);
  return add_row(matmul_nt(selected, out.parameter_nodes[token_embedding_]), out.parameter_nodes[output_bias_]);
}

template <typename T>
std::vector<Var<T>> cross_attention(const EncoderOutput<T>& out, std::size_t seq, AttentionDirection direction,
                                    std::size_t len_x, std::size_t len_y) {
  if (len_x == 0 || len_y == 0) fail(ErrorKind::kInput, "cross_attention: empty sentence");
  const std::size_t block_x = len_x + kSeparatorsPerBlock;
  const std::size_t block_y = len_y + kSeparatorsPerBlock;
  if (seq >= out.sequences() || out.length(seq) != block_x + block_y) {
    fail(ErrorKind::kUsage, "cross_attention: sequence does not hold a pair of the given lengths");
  }
  const MaskRegime expected =
      direction == AttentionDirection::kTargetToSource ? MaskRegime::kTgt2Src : MaskRegime::kSrc2Tgt;
  if (!(out.layout->masks[seq] == build_mask(expected, block_x, block_y))) {
    fail(ErrorKind::kUsage, std::string("cross_attention: sequence was not encoded under the ") +
                                std::string(to_string(expected)) + " regime");
  }
  // Softmax over the restricted scores equals the renormalised attention
  // block but cannot lose all mass to underflow.
  const bool t2s = direction == AttentionDirection::kTargetToSource;
  const std::size_t r0 = out.row(seq, t2s ? block_x : 0), r1 = r0 + (t2s ? len_y : len_x);
  const std::size_t c0 = out.row(seq, t2s ? 0 : block_x), c1 = c0 + (t2s ? len_x : len_y);
  const std::size_t dh = out.top_queries.value().cols() / out.layout->heads;
  const Mask open(r1 - r0, c1 - c0, true);
  std::vector<Var<T>> heads;
  for (std::size_t h = 0; h < out.layout->heads; ++h) {
    Var<T> q = slice(out.top_queries, r0, r1, h * dh, (h + 1) * dh);
    Var<T> k = slice(out.top_keys, c0, c1, h * dh, (h + 1) * dh);
    heads.push_back(masked_softmax(scale(matmul_nt(q, k), out.score_scale), open));
  }
  return heads;
}

template struct EncoderOutput<float>;
template struct EncoderOutput<double>;
template class Encoder<float>;
template class Encoder<double>;
template std::vector<Var<float>> cross_attention<float>(const EncoderOutput<float>&, std::size_t, AttentionDirection,
                                                        std::size_t, std::size_t);
template std::vector<Var<double>> cross_attention<double>(const EncoderOutput<double>&, std::size_t,
                                                          AttentionDirection, std::size_t, std::size_t);

}  // namespace amber
