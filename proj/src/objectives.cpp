#include "amber/objectives.hpp"

#include <algorithm>
#include <sstream>

namespace amber {

MaskingPlan select_mask_positions(std::span<const int> z, double rate, int vocab_size, std::mt19937_64& rng) {
  if (!(rate > 0.0) || rate > 1.0) fail(ErrorKind::kConfig, "mask rate must lie in (0, 1]");
  if (vocab_size <= kFirstWordId) fail(ErrorKind::kConfig, "vocabulary has no word tokens");
  std::vector<std::size_t> maskable;
  for (std::size_t p = 0; p < z.size(); ++p) {
    if (!is_special(z[p])) maskable.push_back(p);
  }
  if (maskable.empty()) fail(ErrorKind::kInput, "select_mask_positions: no maskable tokens");

  MaskingPlan plan;
  std::bernoulli_distribution select(rate);
  for (std::size_t p : maskable) {
    if (select(rng)) plan.positions.push_back(p);
  }
  if (plan.positions.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, maskable.size() - 1);
    plan.positions.push_back(maskable[pick(rng)]);
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> random_word(kFirstWordId, vocab_size - 1);
  for (std::size_t p : plan.positions) {
    const double u = unit(rng);
    plan.originals.push_back(z[p]);
    if (u < 0.8) {
      plan.actions.push_back(MaskAction::kMask);
      plan.replacements.push_back(kMaskId);
    } else if (u < 0.9) {
      plan.actions.push_back(MaskAction::kRandom);
      plan.replacements.push_back(random_word(rng));
    } else {
      plan.actions.push_back(MaskAction::kKeep);
      plan.replacements.push_back(z[p]);
    }
  }
  return plan;
}

std::vector<int> apply_masking(std::span<const int> z, const MaskingPlan& plan) {
  std::vector<int> out(z.begin(), z.end());
  for (std::size_t k = 0; k < plan.positions.size(); ++k) {
    if (plan.positions[k] >= out.size()) fail(ErrorKind::kIndex, "masking plan position out of range");
    out[plan.positions[k]] = plan.replacements[k];
  }
  return out;
}

ObjectiveFlags ObjectiveFlags::parse(std::string_view list) {
  ObjectiveFlags f{false, false, false, false};
  std::string item;
  std::istringstream is{std::string(list)};
  bool any = false;
  while (std::getline(is, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), [](unsigned char c) { return std::isspace(c); }), item.end());
    if (item.empty()) continue;
    if (item == "mlm") f.mlm = true;
    else if (item == "tlm") f.tlm = true;
    else if (item == "wa") f.wa = true;
    else if (item == "sa") f.sa = true;
    else fail(ErrorKind::kConfig, "unknown objective '" + item + "' (expected mlm, tlm, wa, sa)");
    any = true;
  }
  if (!any) fail(ErrorKind::kConfig, "no objectives enabled");
  return f;
}

std::string ObjectiveFlags::str() const {
  std::string out;
  auto add = [&out](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += ',';
    out += name;
  };
  add(mlm, "mlm");
  add(tlm, "tlm");
  add(wa, "wa");
  add(sa, "sa");
  return out;
}

namespace {

std::vector<int> concatenate(const SentencePair& pair) {
  std::vector<int> z(pair.x.tokens);
  z.insert(z.end(), pair.y.tokens.begin(), pair.y.tokens.end());
  return z;
}

// Full-mask input for the corrupted pair plus the sequence rows of the plan.
EncodedPair corrupted_input(const SentencePair& pair, const MaskingPlan& plan, int max_positions,
                            std::vector<std::size_t>& rows) {
  const auto z = concatenate(pair);
  const auto corrupted = apply_masking(z, plan);
  SentencePair c = pair;
  const std::size_t nx = pair.x.tokens.size();
  std::copy(corrupted.begin(), corrupted.begin() + static_cast<std::ptrdiff_t>(nx), c.x.tokens.begin());
  std::copy(corrupted.begin() + static_cast<std::ptrdiff_t>(nx), corrupted.end(), c.y.tokens.begin());
  EncodedPair enc = encode_pair(c, MaskRegime::kFull, max_positions);
  rows.clear();
  for (std::size_t p : plan.positions) rows.push_back(p < nx ? enc.x_rows[p] : enc.y_rows[p - nx]);
  return enc;
}

struct MaskedTargets {
  std::vector<int> rows;  // packed rows
  std::vector<int> targets;
};

}  // namespace

template <typename T>
Var<T> mlm_loss(Encoder<T>& model, Tape<T>& tape, const SentencePair& pair, const MaskingPlan& plan) {
  if (plan.positions.empty()) fail(ErrorKind::kInput, "mlm_loss: empty masking plan");
  std::vector<std::size_t> rows;
  EncodedPair enc = corrupted_input(pair, plan, model.config().max_positions, rows);
  auto out = model.encode(tape, enc.input);
  std::vector<int> packed;
  for (std::size_t r : rows) packed.push_back(static_cast<int>(out.row(0, r)));
  return cross_entropy(model.output_logits(out, packed), std::span<const int>(plan.originals));
}

template <typename T>
Var<T> sentence_embedding(const EncoderOutput<T>& out, std::size_t seq, std::span<const std::size_t> positions) {
  if (positions.empty()) fail(ErrorKind::kInput, "sentence_embedding: empty span");
  std::vector<std::size_t> rows;
  rows.reserve(positions.size());
  for (std::size_t p : positions) {
    if (p >= out.length(seq)) fail(ErrorKind::kIndex, "sentence_embedding: position outside sequence");
    rows.push_back(out.row(seq, p));
  }
  return mean_rows(out.top(), std::span<const std::size_t>(rows));
}

template <typename T>
Var<T> sentence_alignment_loss(Var<T> source, Var<T> target) {
  const std::size_t b = source.rows();
  if (b < 2 || target.rows() != b) {
    fail(ErrorKind::kBatchComposition, "sentence_alignment_loss: need at least 2 aligned rows, got " +
                                           std::to_string(b) + " and " + std::to_string(target.rows()));
  }
  if (source.cols() != target.cols()) fail(ErrorKind::kDimension, "sentence_alignment_loss: width mismatch");
  std::vector<int> diagonal(b);
  for (std::size_t i = 0; i < b; ++i) diagonal[i] = static_cast<int>(i);
  return cross_entropy(matmul_nt(source, target), std::span<const int>(diagonal));
}

template <typename T>
Var<T> word_alignment_loss(std::span<const Var<T>> forward, std::span<const Var<T>> backward) {
  if (forward.empty() || forward.size() != backward.size()) {
    fail(ErrorKind::kShape, "word_alignment_loss: head counts differ (" + std::to_string(forward.size()) + " vs " +
                                std::to_string(backward.size()) + ")");
  }
  const std::size_t ny = forward.front().rows(), nx = forward.front().cols();
  Var<T> agreement{};
  for (std::size_t h = 0; h < forward.size(); ++h) {
    const auto& f = forward[h];
    const auto& b = backward[h];
    if (f.rows() != ny || f.cols() != nx || b.rows() != nx || b.cols() != ny || f.value().rank() != 2 ||
        b.value().rank() != 2) {
      fail(ErrorKind::kShape, "word_alignment_loss: head " + std::to_string(h) + " has shapes " +
                                  shape_string(f.shape()) + " and " + shape_string(b.shape()));
    }
    Var<T> term = sum(mul(f, transpose(b)));
    agreement = h == 0 ? term : add(agreement, term);
  }
  const T denom = static_cast<T>(forward.size() * std::min(nx, ny));
  return add_scalar(scale(agreement, T(-1) / denom), T(1));
}

template <typename T>
CombinedLoss<T> combined_loss(Encoder<T>& model, Tape<T>& tape, const Batch& batch, const LossOptions& options,
                              std::mt19937_64& rng, std::mt19937_64* dropout_rng) {
  const auto& flags = options.flags;
  if (batch.pairs.empty()) fail(ErrorKind::kBatchComposition, "combined_loss: empty batch");
  const std::size_t n_par = batch.parallel_count();
  if (flags.wa && n_par < 1) fail(ErrorKind::kBatchComposition, "word alignment needs at least one parallel pair");
  if (flags.sa && n_par < 2) fail(ErrorKind::kBatchComposition, "sentence alignment needs at least two parallel pairs");
  const int max_pos = model.config().max_positions;
  const int vocab = model.config().vocab_size;

  std::vector<EncoderInput> inputs;
  struct MaskedSeq {
    std::size_t seq;
    std::vector<std::size_t> rows;
    std::vector<int> targets;
  };
  std::vector<MaskedSeq> mono_masked, tlm_masked;
  struct WaItem {
    std::size_t t2s, s2t, nx, ny;
  };
  std::vector<WaItem> wa_items;
  struct SaItem {
    std::size_t sx, sy;
    std::vector<std::size_t> x_rows, y_rows;
  };
  std::vector<SaItem> sa_items;

  auto add_masked = [&](const SentencePair& pair, std::vector<MaskedSeq>& into) {
    const auto z = concatenate(pair);
    MaskingPlan plan = select_mask_positions(z, options.mask_rate, vocab, rng);
    MaskedSeq m;
    EncodedPair enc = corrupted_input(pair, plan, max_pos, m.rows);
    m.seq = inputs.size();
    m.targets = plan.originals;
    inputs.push_back(std::move(enc.input));
    into.push_back(std::move(m));
  };

  for (const auto& pair : batch.pairs) {
    if (!pair.is_parallel) {
      if (flags.mlm) add_masked(pair, mono_masked);
      continue;
    }
    if (flags.tlm) add_masked(pair, tlm_masked);
    if (flags.wa) {
      WaItem w{inputs.size(), inputs.size() + 1, pair.x.tokens.size(), pair.y.tokens.size()};
      inputs.push_back(encode_pair(pair, MaskRegime::kTgt2Src, max_pos).input);
      inputs.push_back(encode_pair(pair, MaskRegime::kSrc2Tgt, max_pos).input);
      wa_items.push_back(w);
    }
    if (flags.sa) {
      EncodedPair ex = encode_sentence(pair.x, max_pos);
      EncodedPair ey = encode_sentence(pair.y, max_pos);
      SaItem s{inputs.size(), inputs.size() + 1, ex.x_rows, ey.x_rows};
      inputs.push_back(std::move(ex.input));
      inputs.push_back(std::move(ey.input));
      sa_items.push_back(std::move(s));
    }
  }
  if (inputs.empty()) fail(ErrorKind::kBatchComposition, "combined_loss: no enabled objective applies to this batch");

  auto out = model.encode(tape, std::span<const EncoderInput>(inputs), dropout_rng);
  CombinedLoss<T> result;
  LossBreakdown& lb = result.breakdown;
  lb.parallel_pairs = n_par;
  bool have_total = false;
  auto accumulate = [&](Var<T> term, double weight) {
    Var<T> weighted = scale(term, static_cast<T>(weight));
    result.total = have_total ? add(result.total, weighted) : weighted;
    have_total = true;
  };
  auto masked_term = [&](const std::vector<MaskedSeq>& items, std::size_t& count) {
    std::vector<int> rows, targets;
    for (const auto& m : items) {
      for (std::size_t k = 0; k < m.rows.size(); ++k) {
        rows.push_back(static_cast<int>(out.row(m.seq, m.rows[k])));
        targets.push_back(m.targets[k]);
      }
    }
    count = rows.size();
    return cross_entropy(model.output_logits(out, rows), std::span<const int>(targets));
  };

  if (!mono_masked.empty()) {
    Var<T> term = masked_term(mono_masked, lb.masked_tokens);
    lb.mlm = static_cast<double>(term.value()[0]);
    accumulate(term, options.weights.mlm);
  }
  if (!tlm_masked.empty()) {
    Var<T> term = masked_term(tlm_masked, lb.tlm_masked_tokens);
    lb.tlm = static_cast<double>(term.value()[0]);
    accumulate(term, options.weights.tlm);
  }
  if (!wa_items.empty()) {
    Var<T> acc{};
    for (std::size_t k = 0; k < wa_items.size(); ++k) {
      const auto& w = wa_items[k];
      auto fwd = cross_attention(out, w.t2s, AttentionDirection::kTargetToSource, w.nx, w.ny);
      auto bwd = cross_attention(out, w.s2t, AttentionDirection::kSourceToTarget, w.nx, w.ny);
      Var<T> l = word_alignment_loss<T>(fwd, bwd);
      acc = k == 0 ? l : add(acc, l);
    }
    Var<T> term = scale(acc, T(1) / static_cast<T>(wa_items.size()));
    lb.wa = static_cast<double>(term.value()[0]);
    accumulate(term, options.weights.wa);
  }
  if (!sa_items.empty()) {
    std::vector<Var<T>> cx, cy;
    for (const auto& s : sa_items) {
      cx.push_back(sentence_embedding(out, s.sx, s.x_rows));
      cy.push_back(sentence_embedding(out, s.sy, s.y_rows));
    }
    Var<T> term = sentence_alignment_loss(concat_rows<T>(cx), concat_rows<T>(cy));
    lb.sa = static_cast<double>(term.value()[0]);
    accumulate(term, options.weights.sa);
  }
  if (!have_total) fail(ErrorKind::kBatchComposition, "combined_loss: no enabled objective applies to this batch");
  lb.total = static_cast<double>(result.total.value()[0]);
  return result;
}

#define AMBER_INSTANTIATE(T)                                                                                     \
  template Var<T> mlm_loss<T>(Encoder<T>&, Tape<T>&, const SentencePair&, const MaskingPlan&);                   \
  template Var<T> sentence_embedding<T>(const EncoderOutput<T>&, std::size_t, std::span<const std::size_t>);     \
  template Var<T> sentence_alignment_loss<T>(Var<T>, Var<T>);                                                    \
  template Var<T> word_alignment_loss<T>(std::span<const Var<T>>, std::span<const Var<T>>);                      \
  template CombinedLoss<T> combined_loss<T>(Encoder<T>&, Tape<T>&, const Batch&, const LossOptions&,             \
                                            std::mt19937_64&, std::mt19937_64*);

AMBER_INSTANTIATE(float)
AMBER_INSTANTIATE(double)

#undef AMBER_INSTANTIATE

}  // namespace amber
