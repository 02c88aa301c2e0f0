#include "amber/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace amber {

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  // splitmix64 over the combined words
  std::uint64_t z = seed ^ (a * 0x9E3779B97F4A7C15ULL) ^ (b * 0xC2B2AE3D27D4EB4FULL);
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::kIo, "cannot write " + path.string());
  return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::kIo, "cannot read " + path.string());
  return is;
}

std::vector<std::size_t> inverse(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) inv[perm[k]] = k;
  return inv;
}

}  // namespace

// ---------------------------------------------------------------------------
// Reordering and languages

std::vector<std::size_t> Reorder::permutation(std::size_t length) const {
  std::vector<std::size_t> perm(length);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  switch (kind) {
    case ReorderKind::kIdentity:
      break;
    case ReorderKind::kAdjacentSwap:
      for (std::size_t k = 0; k + 1 < length; k += 2) std::swap(perm[k], perm[k + 1]);
      break;
    case ReorderKind::kWindowReverse: {
      const std::size_t w = static_cast<std::size_t>(window);
      for (std::size_t start = 0; start < length; start += w) {
        const std::size_t end = std::min(length, start + w);
        std::reverse(perm.begin() + static_cast<std::ptrdiff_t>(start), perm.begin() + static_cast<std::ptrdiff_t>(end));
      }
      break;
    }
  }
  return perm;
}

std::string Reorder::name() const {
  switch (kind) {
    case ReorderKind::kIdentity: return "identity";
    case ReorderKind::kAdjacentSwap: return "adjacent-swap";
    case ReorderKind::kWindowReverse: return "window-reverse:" + std::to_string(window);
  }
  return "identity";
}

Reorder Reorder::parse(std::string_view text) {
  if (text == "identity") return {ReorderKind::kIdentity, 2};
  if (text == "adjacent-swap") return {ReorderKind::kAdjacentSwap, 2};
  const std::string_view prefix = "window-reverse:";
  if (text.substr(0, prefix.size()) == prefix) {
    const std::string digits(text.substr(prefix.size()));
    int w = 0;
    try {
      w = std::stoi(digits);
    } catch (const std::exception&) {
      w = 0;
    }
    if (w < 2) fail(ErrorKind::kConfig, "reorder window must be an integer >= 2: '" + std::string(text) + "'");
    return {ReorderKind::kWindowReverse, w};
  }
  fail(ErrorKind::kConfig, "unknown reorder '" + std::string(text) +
                               "' (expected identity, adjacent-swap or window-reverse:<w>)");
}

std::vector<int> LanguageSpec::decipher() const {
  std::vector<int> inv(cipher.size(), -1);
  for (std::size_t c = 0; c < cipher.size(); ++c) inv[static_cast<std::size_t>(cipher[c])] = static_cast<int>(c);
  return inv;
}

void LanguageSpec::validate() const {
  std::vector<bool> seen(cipher.size(), false);
  for (int s : cipher) {
    if (s < 0 || static_cast<std::size_t>(s) >= cipher.size() || seen[static_cast<std::size_t>(s)]) {
      fail(ErrorKind::kConfig, "language " + tag + ": cipher is not a bijection");
    }
    seen[static_cast<std::size_t>(s)] = true;
  }
}

LanguageSpec make_language(std::string tag, int index, int concepts, Reorder reorder, std::size_t corpus_size,
                           std::uint64_t cipher_seed, bool identity_cipher) {
  LanguageSpec spec;
  spec.tag = std::move(tag);
  spec.index = index;
  spec.reorder = reorder;
  spec.corpus_size = corpus_size;
  spec.cipher.resize(static_cast<std::size_t>(concepts));
  std::iota(spec.cipher.begin(), spec.cipher.end(), 0);
  if (!identity_cipher) {
    std::mt19937_64 rng(cipher_seed);
    std::shuffle(spec.cipher.begin(), spec.cipher.end(), rng);
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> language_tags, int concepts)
    : tags_(std::move(language_tags)), concepts_(concepts) {
  if (tags_.empty()) fail(ErrorKind::kConfig, "vocabulary needs at least one language");
  if (concepts_ < 1) fail(ErrorKind::kConfig, "vocabulary needs at least one concept");
  for (std::size_t i = 0; i < tags_.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (tags_[i] == tags_[j]) fail(ErrorKind::kConfig, "duplicate language tag '" + tags_[i] + "'");
    }
  }
}

int Vocabulary::language_index(std::string_view tag) const {
  for (std::size_t i = 0; i < tags_.size(); ++i) {
    if (tags_[i] == tag) return static_cast<int>(i);
  }
  fail(ErrorKind::kData, "unknown language tag '" + std::string(tag) + "'");
}

int Vocabulary::id(int language, int surface) const {
  if (language < 0 || language >= static_cast<int>(tags_.size()) || surface < 0 || surface >= concepts_) {
    fail(ErrorKind::kIndex, "vocabulary: no token for language " + std::to_string(language) + " surface " +
                                std::to_string(surface));
  }
  return kFirstWordId + language * concepts_ + surface;
}

int Vocabulary::language_of(int id) const {
  if (is_special(id) || id >= size()) fail(ErrorKind::kIndex, "vocabulary: id " + std::to_string(id) + " is not a word");
  return (id - kFirstWordId) / concepts_;
}

int Vocabulary::surface_of(int id) const {
  if (is_special(id) || id >= size()) fail(ErrorKind::kIndex, "vocabulary: id " + std::to_string(id) + " is not a word");
  return (id - kFirstWordId) % concepts_;
}

std::string Vocabulary::token(int id) const {
  static const char* const specials[] = {"[PAD]", "[CLS]", "[SEP]", "[MASK]"};
  if (id >= 0 && is_special(id)) return specials[id];
  return tags_[static_cast<std::size_t>(language_of(id))] + "_" + std::to_string(surface_of(id));
}

int Vocabulary::lookup(std::string_view token) const {
  static const char* const specials[] = {"[PAD]", "[CLS]", "[SEP]", "[MASK]"};
  for (int i = 0; i < kFirstWordId; ++i) {
    if (token == specials[i]) return i;
  }
  const auto cut = token.rfind('_');
  if (cut == std::string_view::npos) fail(ErrorKind::kData, "malformed token '" + std::string(token) + "'");
  const int lang = language_index(token.substr(0, cut));
  int surface = -1;
  try {
    std::size_t used = 0;
    const std::string digits(token.substr(cut + 1));
    surface = std::stoi(digits, &used);
    if (used != digits.size()) surface = -1;
  } catch (const std::exception&) {
    surface = -1;
  }
  if (surface < 0 || surface >= concepts_) fail(ErrorKind::kData, "malformed token '" + std::string(token) + "'");
  return id(lang, surface);
}

// ---------------------------------------------------------------------------
// Generation

std::vector<std::vector<int>> generate_base_sentences(std::size_t count, std::uint64_t seed,
                                                      const GenerationOptions& options) {
  if (options.concepts < 1 || options.min_length < 1 || options.max_length < options.min_length) {
    fail(ErrorKind::kConfig, "generation options out of range");
  }
  std::vector<double> weights(static_cast<std::size_t>(options.concepts));
  for (std::size_t k = 0; k < weights.size(); ++k) {
    weights[k] = std::pow(static_cast<double>(k + 1), -options.zipf_exponent);
  }
  std::mt19937_64 rng(seed);
  std::discrete_distribution<int> zipf(weights.begin(), weights.end());
  std::uniform_int_distribution<int> length(options.min_length, options.max_length);
  std::vector<std::vector<int>> out(count);
  for (auto& sentence : out) {
    sentence.resize(static_cast<std::size_t>(length(rng)));
    for (auto& c : sentence) c = zipf(rng);
  }
  return out;
}

Sentence realize(std::span<const int> base, const LanguageSpec& spec, int concepts) {
  const auto perm = spec.reorder.permutation(base.size());
  Sentence s;
  s.language = spec.index;
  s.tokens.reserve(base.size());
  for (std::size_t k = 0; k < base.size(); ++k) {
    const int concept_id = base[perm[k]];
    s.tokens.push_back(kFirstWordId + spec.index * concepts + spec.cipher.at(static_cast<std::size_t>(concept_id)));
  }
  return s;
}

std::vector<Sentence> generate_corpus(const LanguageSpec& spec, std::uint64_t base_seed,
                                      const GenerationOptions& options) {
  spec.validate();
  if (static_cast<int>(spec.cipher.size()) != options.concepts) {
    fail(ErrorKind::kConfig, "language " + spec.tag + ": cipher size differs from concept count");
  }
  const auto base = generate_base_sentences(spec.corpus_size, base_seed, options);
  std::vector<Sentence> out;
  out.reserve(base.size());
  for (const auto& b : base) out.push_back(realize(b, spec, options.concepts));
  return out;
}

SentencePair make_parallel(std::span<const int> base, const LanguageSpec& src, const LanguageSpec& tgt, int concepts) {
  if (src.cipher.size() != tgt.cipher.size()) fail(ErrorKind::kConfig, "make_parallel: vocabularies differ in size");
  SentencePair pair;
  pair.x = realize(base, src, concepts);
  pair.y = realize(base, tgt, concepts);
  pair.is_parallel = true;
  const auto px = src.reorder.permutation(base.size());
  const auto py = tgt.reorder.permutation(base.size());
  const auto x_of_base = inverse(px);
  for (std::size_t i = 0; i < py.size(); ++i) {
    pair.gold.emplace_back(static_cast<int>(i), static_cast<int>(x_of_base[py[i]]));
  }
  std::sort(pair.gold.begin(), pair.gold.end());
  return pair;
}

// ---------------------------------------------------------------------------
// Sampling

std::size_t Batch::parallel_count() const {
  return static_cast<std::size_t>(
      std::count_if(pairs.begin(), pairs.end(), [](const SentencePair& p) { return p.is_parallel; }));
}

std::vector<double> sampling_probabilities(std::span<const std::size_t> sizes, double smoothing) {
  std::vector<double> probs(sizes.size(), 0.0);
  double total = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    probs[i] = sizes[i] == 0 ? 0.0 : std::pow(static_cast<double>(sizes[i]), smoothing);
    total += probs[i];
  }
  if (total <= 0) fail(ErrorKind::kSize, "sampling: every corpus is empty");
  for (auto& p : probs) p /= total;
  return probs;
}

namespace {

// Draws `count` (corpus, item) picks with smoothed corpus probabilities,
// without replacement inside the call.
std::vector<std::pair<std::size_t, std::size_t>> draw_entries(std::span<const std::size_t> sizes, std::size_t count,
                                                              double smoothing, std::mt19937_64& rng) {
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  if (count == 0) return picks;
  const std::size_t available = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (count > available) {
    fail(ErrorKind::kSize, "sample_batch: " + std::to_string(count) + " entries requested but only " +
                               std::to_string(available) + " available");
  }
  const auto base_probs = sampling_probabilities(sizes, smoothing);
  std::vector<std::vector<std::size_t>> used(sizes.size());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  while (picks.size() < count) {
    std::vector<double> probs(base_probs);
    double total = 0;
    for (std::size_t c = 0; c < sizes.size(); ++c) {
      if (used[c].size() >= sizes[c]) probs[c] = 0;
      total += probs[c];
    }
    double u = unit(rng) * total;
    std::size_t corpus = 0;
    for (; corpus + 1 < probs.size(); ++corpus) {
      if (probs[corpus] > 0 && u < probs[corpus]) break;
      u -= probs[corpus];
    }
    while (probs[corpus] == 0) --corpus;
    std::uniform_int_distribution<std::size_t> pick(0, sizes[corpus] - 1);
    std::size_t item = pick(rng);
    while (std::find(used[corpus].begin(), used[corpus].end(), item) != used[corpus].end()) item = pick(rng);
    used[corpus].push_back(item);
    picks.emplace_back(corpus, item);
  }
  return picks;
}

}  // namespace

Batch sample_batch(std::span<const MonoCorpus> mono, std::span<const ParallelCorpus> parallel,
                   std::size_t batch_size, double smoothing, double parallel_fraction, std::mt19937_64& rng) {
  if (batch_size < 2) fail(ErrorKind::kSize, "sample_batch: batch_size must be at least 2");
  if (parallel_fraction < 0 || parallel_fraction > 1) fail(ErrorKind::kConfig, "parallel_fraction must lie in [0, 1]");
  std::vector<std::size_t> mono_sizes, par_sizes;
  for (const auto& m : mono) mono_sizes.push_back(m.pair_count());
  for (const auto& p : parallel) par_sizes.push_back(p.pairs.size());
  const std::size_t mono_total = std::accumulate(mono_sizes.begin(), mono_sizes.end(), std::size_t{0});
  const std::size_t par_total = std::accumulate(par_sizes.begin(), par_sizes.end(), std::size_t{0});
  if (mono_total + par_total == 0) fail(ErrorKind::kSize, "sample_batch: no data");

  std::size_t n_par = static_cast<std::size_t>(std::llround(static_cast<double>(batch_size) * parallel_fraction));
  if (par_total == 0) n_par = 0;
  if (mono_total == 0) n_par = batch_size;
  const std::size_t n_mono = batch_size - n_par;

  Batch batch;
  for (auto [c, item] : draw_entries(mono_sizes, n_mono, smoothing, rng)) {
    SentencePair p;
    p.x = mono[c].sentences[item];
    p.y = mono[c].sentences[item + 1];
    batch.pairs.push_back(std::move(p));
  }
  for (auto [c, item] : draw_entries(par_sizes, n_par, smoothing, rng)) batch.pairs.push_back(parallel[c].pairs[item]);
  return batch;
}

// ---------------------------------------------------------------------------
// Layout

EncodedPair encode_pair(const SentencePair& pair, MaskRegime regime, int max_positions) {
  const std::size_t nx = pair.x.tokens.size(), ny = pair.y.tokens.size();
  if (nx == 0) fail(ErrorKind::kInput, "encode_pair: empty source sentence");
  if (ny == 0 && regime != MaskRegime::kSeparate) fail(ErrorKind::kInput, "encode_pair: empty target sentence");
  EncodedPair out;
  auto& in = out.input;
  if (regime == MaskRegime::kFull) {
    const std::size_t n = nx + ny + 3;
    if (n > static_cast<std::size_t>(max_positions)) {
      fail(ErrorKind::kLength, "encode_pair: " + std::to_string(n) + " tokens exceed max_positions " +
                                   std::to_string(max_positions));
    }
    in.tokens.push_back(kClsId);
    for (int t : pair.x.tokens) in.tokens.push_back(t);
    in.tokens.push_back(kSepId);
    for (int t : pair.y.tokens) in.tokens.push_back(t);
    in.tokens.push_back(kSepId);
    for (std::size_t i = 0; i < n; ++i) {
      in.positions.push_back(static_cast<int>(i));
      in.segments.push_back(i < nx + 2 ? 0 : 1);
    }
    for (std::size_t j = 0; j < nx; ++j) out.x_rows.push_back(1 + j);
    for (std::size_t i = 0; i < ny; ++i) out.y_rows.push_back(nx + 2 + i);
    in.mask = build_mask(MaskRegime::kFull, nx + 2, ny + 1);
    return out;
  }
  const std::size_t bx = nx + kSeparatorsPerBlock;
  const std::size_t by = ny == 0 ? 0 : ny + kSeparatorsPerBlock;
  if (std::max(bx, by) > static_cast<std::size_t>(max_positions)) {
    fail(ErrorKind::kLength, "encode_pair: sentence block exceeds max_positions " + std::to_string(max_positions));
  }
  for (std::size_t j = 0; j < nx; ++j) {
    in.tokens.push_back(pair.x.tokens[j]);
    in.positions.push_back(static_cast<int>(j));
    in.segments.push_back(0);
    out.x_rows.push_back(j);
  }
  in.tokens.push_back(kSepId);
  in.positions.push_back(static_cast<int>(nx));
  in.segments.push_back(0);
  if (ny > 0) {
    for (std::size_t i = 0; i < ny; ++i) {
      in.tokens.push_back(pair.y.tokens[i]);
      in.positions.push_back(static_cast<int>(i));
      in.segments.push_back(1);
      out.y_rows.push_back(bx + i);
    }
    in.tokens.push_back(kSepId);
    in.positions.push_back(static_cast<int>(ny));
    in.segments.push_back(1);
  }
  in.mask = build_mask(regime, bx, by);
  return out;
}

EncodedPair encode_sentence(const Sentence& sentence, int max_positions) {
  SentencePair single;
  single.x = sentence;
  return encode_pair(single, MaskRegime::kSeparate, max_positions);
}

// ---------------------------------------------------------------------------
// Corpus sets

CorpusConfig CorpusConfig::desk_default() {
  CorpusConfig c;
  c.languages = {
      {"en", "identity", 4000, 0},
      {"l1", "identity", 2000, 2000},
      {"l2", "adjacent-swap", 1000, 800},
      {"l3", "window-reverse:3", 500, 200},
  };
  return c;
}

void CorpusConfig::validate() const {
  if (languages.size() < 2) fail(ErrorKind::kConfig, "corpus.languages: need a pivot and at least one other language");
  if (generation.concepts < 4) fail(ErrorKind::kConfig, "corpus.concepts: must be at least 4");
  if (generation.min_length < 1) fail(ErrorKind::kConfig, "corpus.min_length: must be positive");
  if (generation.max_length < generation.min_length) {
    fail(ErrorKind::kConfig, "corpus.max_length: must not be below min_length");
  }
  if (!(generation.zipf_exponent > 0)) fail(ErrorKind::kConfig, "corpus.zipf_exponent: must be positive");
  for (std::size_t i = 0; i < languages.size(); ++i) {
    const std::string at = "corpus.languages[" + std::to_string(i) + "]";
    if (languages[i].tag.empty() || languages[i].tag.find_first_of(" \t\n_-.") != std::string::npos) {
      fail(ErrorKind::kConfig, at + ".tag: must be non-empty without spaces, '_', '-' or '.'");
    }
    Reorder::parse(languages[i].reorder);
    if (languages[i].mono_size < 2) fail(ErrorKind::kConfig, at + ".mono_size: must be at least 2");
  }
  if (heldout_pairs < 2) fail(ErrorKind::kConfig, "corpus.heldout_pairs: must be at least 2");
  if (heldout_mono < 1) fail(ErrorKind::kConfig, "corpus.heldout_mono: must be positive");
}

int CorpusSet::concept_of(int token_id) const {
  const int lang = vocab.language_of(token_id);
  const auto& spec = languages.at(static_cast<std::size_t>(lang));
  const int surface = vocab.surface_of(token_id);
  const auto it = std::find(spec.cipher.begin(), spec.cipher.end(), surface);
  return static_cast<int>(it - spec.cipher.begin());
}

CorpusSet generate_corpus_set(const CorpusConfig& config, std::uint64_t seed) {
  config.validate();
  CorpusSet set;
  set.config = config;
  std::vector<std::string> tags;
  for (const auto& l : config.languages) tags.push_back(l.tag);
  const int concepts = config.generation.concepts;
  set.vocab = Vocabulary(tags, concepts);
  for (std::size_t i = 0; i < config.languages.size(); ++i) {
    const auto& lc = config.languages[i];
    set.languages.push_back(make_language(lc.tag, static_cast<int>(i), concepts, Reorder::parse(lc.reorder),
                                          lc.mono_size, mix_seed(seed, i, 1), i == 0));
  }
  const auto& pivot = set.languages[0];
  for (std::size_t i = 0; i < set.languages.size(); ++i) {
    const auto& spec = set.languages[i];
    set.mono.push_back({spec.index, generate_corpus(spec, mix_seed(seed, i, 2), config.generation)});
    LanguageSpec held = spec;
    held.corpus_size = config.heldout_mono;
    set.heldout_mono.push_back({spec.index, generate_corpus(held, mix_seed(seed, i, 5), config.generation)});
    if (i == 0) continue;
    ParallelCorpus train{spec.index, pivot.index, {}};
    for (const auto& b : generate_base_sentences(config.languages[i].parallel_size, mix_seed(seed, i, 3),
                                                 config.generation)) {
      train.pairs.push_back(make_parallel(b, spec, pivot, concepts));
    }
    set.parallel.push_back(std::move(train));
    ParallelCorpus held_par{spec.index, pivot.index, {}};
    for (const auto& b : generate_base_sentences(config.heldout_pairs, mix_seed(seed, i, 4), config.generation)) {
      held_par.pairs.push_back(make_parallel(b, spec, pivot, concepts));
    }
    set.heldout_parallel.push_back(std::move(held_par));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Text IO

void write_sentences(const std::filesystem::path& path, const Vocabulary& vocab, std::span<const Sentence> sentences) {
  auto os = open_out(path);
  for (const auto& s : sentences) {
    os << vocab.languages().at(static_cast<std::size_t>(s.language)) << '\t';
    for (std::size_t k = 0; k < s.tokens.size(); ++k) {
      if (k) os << ' ';
      os << vocab.token(s.tokens[k]);
    }
    os << '\n';
  }
  if (!os) fail(ErrorKind::kIo, "write failed for " + path.string());
}

std::vector<Sentence> read_sentences(const std::filesystem::path& path, const Vocabulary& vocab) {
  auto is = open_in(path);
  std::vector<Sentence> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      fail(ErrorKind::kData, path.string() + ":" + std::to_string(line_no) + ": missing language tag");
    }
    Sentence s;
    s.language = vocab.language_index(std::string_view(line).substr(0, tab));
    std::istringstream tokens(line.substr(tab + 1));
    std::string tok;
    while (tokens >> tok) {
      const int id = vocab.lookup(tok);
      if (is_special(id) || vocab.language_of(id) != s.language) {
        fail(ErrorKind::kData, path.string() + ":" + std::to_string(line_no) + ": token '" + tok +
                                   "' does not belong to the line's language");
      }
      s.tokens.push_back(id);
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_alignments(const std::filesystem::path& path, std::span<const SentencePair> pairs) {
  auto os = open_out(path);
  for (const auto& p : pairs) {
    std::vector<std::pair<int, int>> links;
    for (auto [i, j] : p.gold) links.emplace_back(j, i);
    std::sort(links.begin(), links.end());
    for (std::size_t k = 0; k < links.size(); ++k) {
      if (k) os << ' ';
      os << links[k].first << '-' << links[k].second;
    }
    os << '\n';
  }
  if (!os) fail(ErrorKind::kIo, "write failed for " + path.string());
}

std::vector<std::vector<Link>> read_alignments(const std::filesystem::path& path) {
  auto is = open_in(path);
  std::vector<std::vector<Link>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::vector<Link> links;
    std::istringstream items(line);
    std::string item;
    while (items >> item) {
      int j = -1, i = -1;
      char dash = 0;
      std::istringstream parse(item);
      if (!(parse >> j >> dash >> i) || dash != '-' || j < 0 || i < 0) {
        fail(ErrorKind::kData, path.string() + ":" + std::to_string(line_no) + ": bad link '" + item + "'");
      }
      links.emplace_back(i, j);
    }
    std::sort(links.begin(), links.end());
    out.push_back(std::move(links));
  }
  return out;
}

namespace {

std::string pair_stem(const CorpusSet& set, const ParallelCorpus& pc) {
  return set.vocab.languages()[static_cast<std::size_t>(pc.source)] + "-" +
         set.vocab.languages()[static_cast<std::size_t>(pc.target)];
}

void write_parallel(const CorpusSet& set, const ParallelCorpus& pc, const std::filesystem::path& dir,
                    const std::string& prefix) {
  std::vector<Sentence> xs, ys;
  for (const auto& p : pc.pairs) {
    xs.push_back(p.x);
    ys.push_back(p.y);
  }
  const std::string stem = prefix + "." + pair_stem(set, pc);
  write_sentences(dir / (stem + ".src.txt"), set.vocab, xs);
  write_sentences(dir / (stem + ".tgt.txt"), set.vocab, ys);
  write_alignments(dir / (stem + ".align"), pc.pairs);
}

ParallelCorpus read_parallel(const CorpusSet& set, int source, int target, const std::filesystem::path& dir,
                             const std::string& prefix) {
  ParallelCorpus pc{source, target, {}};
  const std::string stem = prefix + "." + pair_stem(set, pc);
  auto xs = read_sentences(dir / (stem + ".src.txt"), set.vocab);
  auto ys = read_sentences(dir / (stem + ".tgt.txt"), set.vocab);
  auto links = read_alignments(dir / (stem + ".align"));
  if (xs.size() != ys.size() || xs.size() != links.size()) {
    fail(ErrorKind::kData, "parallel files for " + stem + " differ in line count");
  }
  for (std::size_t k = 0; k < xs.size(); ++k) {
    SentencePair p;
    p.x = std::move(xs[k]);
    p.y = std::move(ys[k]);
    p.gold = std::move(links[k]);
    p.is_parallel = true;
    pc.pairs.push_back(std::move(p));
  }
  return pc;
}

std::vector<std::filesystem::path> corpus_files(const CorpusSet& set, const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files{dir / "corpus.json"};
  for (const auto& tag : set.vocab.languages()) {
    files.push_back(dir / ("mono." + tag + ".txt"));
    files.push_back(dir / ("heldout_mono." + tag + ".txt"));
  }
  for (const auto& pc : set.parallel) {
    for (const std::string prefix : {"para", "heldout"}) {
      const std::string stem = prefix + "." + pair_stem(set, pc);
      for (const char* ext : {".src.txt", ".tgt.txt", ".align"}) files.push_back(dir / (stem + ext));
    }
  }
  return files;
}

}  // namespace

void save_corpus_set(const CorpusSet& set, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::kIo, "cannot create " + dir.string() + ": " + ec.message());
  nlohmann::ordered_json meta;
  meta["format"] = "amber-mini-corpus";
  meta["version"] = 1;
  meta["concepts"] = set.config.generation.concepts;
  meta["min_length"] = set.config.generation.min_length;
  meta["max_length"] = set.config.generation.max_length;
  meta["zipf_exponent"] = set.config.generation.zipf_exponent;
  meta["heldout_pairs"] = set.config.heldout_pairs;
  meta["heldout_mono"] = set.config.heldout_mono;
  meta["languages"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < set.languages.size(); ++i) {
    const auto& spec = set.languages[i];
    nlohmann::ordered_json l;
    l["tag"] = spec.tag;
    l["reorder"] = spec.reorder.name();
    l["mono_size"] = set.config.languages[i].mono_size;
    l["parallel_size"] = set.config.languages[i].parallel_size;
    l["cipher"] = spec.cipher;
    meta["languages"].push_back(l);
  }
  {
    auto os = open_out(dir / "corpus.json");
    os << meta.dump(2) << '\n';
  }
  for (std::size_t i = 0; i < set.mono.size(); ++i) {
    const auto& tag = set.vocab.languages()[i];
    write_sentences(dir / ("mono." + tag + ".txt"), set.vocab, set.mono[i].sentences);
    write_sentences(dir / ("heldout_mono." + tag + ".txt"), set.vocab, set.heldout_mono[i].sentences);
  }
  for (const auto& pc : set.parallel) write_parallel(set, pc, dir, "para");
  for (const auto& pc : set.heldout_parallel) write_parallel(set, pc, dir, "heldout");
}

CorpusSet load_corpus_set(const std::filesystem::path& dir) {
  nlohmann::json meta;
  {
    auto is = open_in(dir / "corpus.json");
    try {
      is >> meta;
    } catch (const std::exception& e) {
      fail(ErrorKind::kData, "corpus.json: " + std::string(e.what()));
    }
  }
  CorpusSet set;
  try {
    if (meta.at("format") != "amber-mini-corpus" || meta.at("version") != 1) {
      fail(ErrorKind::kData, "corpus.json: unsupported format or version");
    }
    auto& cfg = set.config;
    cfg.generation.concepts = meta.at("concepts").get<int>();
    cfg.generation.min_length = meta.at("min_length").get<int>();
    cfg.generation.max_length = meta.at("max_length").get<int>();
    cfg.generation.zipf_exponent = meta.at("zipf_exponent").get<double>();
    cfg.heldout_pairs = meta.at("heldout_pairs").get<std::size_t>();
    cfg.heldout_mono = meta.at("heldout_mono").get<std::size_t>();
    std::vector<std::string> tags;
    for (const auto& l : meta.at("languages")) {
      LanguageConfig lc;
      lc.tag = l.at("tag").get<std::string>();
      lc.reorder = l.at("reorder").get<std::string>();
      lc.mono_size = l.at("mono_size").get<std::size_t>();
      lc.parallel_size = l.at("parallel_size").get<std::size_t>();
      cfg.languages.push_back(lc);
      tags.push_back(lc.tag);
      LanguageSpec spec;
      spec.tag = lc.tag;
      spec.index = static_cast<int>(set.languages.size());
      spec.reorder = Reorder::parse(lc.reorder);
      spec.corpus_size = lc.mono_size;
      spec.cipher = l.at("cipher").get<std::vector<int>>();
      spec.validate();
      set.languages.push_back(std::move(spec));
    }
    cfg.validate();
    set.vocab = Vocabulary(tags, cfg.generation.concepts);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, "corpus.json: " + std::string(e.what()));
  }
  for (std::size_t i = 0; i < set.languages.size(); ++i) {
    const auto& tag = set.vocab.languages()[i];
    set.mono.push_back({static_cast<int>(i), read_sentences(dir / ("mono." + tag + ".txt"), set.vocab)});
    set.heldout_mono.push_back({static_cast<int>(i), read_sentences(dir / ("heldout_mono." + tag + ".txt"), set.vocab)});
    if (i == 0) continue;
    set.parallel.push_back(read_parallel(set, static_cast<int>(i), 0, dir, "para"));
    set.heldout_parallel.push_back(read_parallel(set, static_cast<int>(i), 0, dir, "heldout"));
  }
  return set;
}

std::string corpus_hash(const std::filesystem::path& dir) {
  const CorpusSet set = load_corpus_set(dir);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& file : corpus_files(set, dir)) {
    auto is = open_in(file);
    char c;
    while (is.get(c)) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace amber
