#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "amber/encoder.hpp"

namespace amber {

inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;
inline constexpr int kSepId = 2;
inline constexpr int kMaskId = 3;
inline constexpr int kFirstWordId = 4;

inline bool is_special(int id) { return id < kFirstWordId; }

enum class ReorderKind { kIdentity, kAdjacentSwap, kWindowReverse };

struct Reorder {
  ReorderKind kind = ReorderKind::kIdentity;
  int window = 2;

  // perm[k] is the base position realised at surface position k.
  std::vector<std::size_t> permutation(std::size_t length) const;
  std::string name() const;
  static Reorder parse(std::string_view text);
  bool operator==(const Reorder&) const = default;
};

struct LanguageSpec {
  std::string tag;
  int index = 0;             // slot in the shared vocabulary
  std::vector<int> cipher;   // concept -> surface index, a bijection
  Reorder reorder;
  std::size_t corpus_size = 0;

  std::vector<int> decipher() const;
  void validate() const;
};

LanguageSpec make_language(std::string tag, int index, int concepts, Reorder reorder, std::size_t corpus_size,
                           std::uint64_t cipher_seed, bool identity_cipher);

// Ids: PAD=0, CLS=1, SEP=2, MASK=3, then one dense block of `concepts`
// surface tokens per language.
class Vocabulary {
 public:
  Vocabulary(std::vector<std::string> language_tags, int concepts);

  int size() const { return kFirstWordId + concepts_ * static_cast<int>(tags_.size()); }
  int concepts() const { return concepts_; }
  const std::vector<std::string>& languages() const { return tags_; }
  int language_index(std::string_view tag) const;

  int id(int language, int surface) const;
  int language_of(int id) const;
  int surface_of(int id) const;
  std::string token(int id) const;
  int lookup(std::string_view token) const;

 private:
  std::vector<std::string> tags_;
  int concepts_;
};

struct Sentence {
  int language = 0;
  std::vector<int> tokens;  // vocabulary ids, no specials
  bool operator==(const Sentence&) const = default;
};

// (i, j): y position i is aligned with x position j.
using Link = std::pair<int, int>;

struct SentencePair {
  Sentence x;
  Sentence y;
  std::vector<Link> gold;  // sorted; empty for monolingual pairs
  bool is_parallel = false;
};

struct GenerationOptions {
  int concepts = 64;
  int min_length = 3;
  int max_length = 12;
  double zipf_exponent = 1.2;
};

// Base sentences over concept ids 0..concepts-1 (0 is the most frequent).
std::vector<std::vector<int>> generate_base_sentences(std::size_t count, std::uint64_t seed,
                                                      const GenerationOptions& options);
Sentence realize(std::span<const int> base, const LanguageSpec& spec, int concepts);
std::vector<Sentence> generate_corpus(const LanguageSpec& spec, std::uint64_t base_seed,
                                      const GenerationOptions& options);
SentencePair make_parallel(std::span<const int> base, const LanguageSpec& src, const LanguageSpec& tgt, int concepts);

struct MonoCorpus {
  int language = 0;
  std::vector<Sentence> sentences;
  // Contiguous-sentence pairs available for MLM.
  std::size_t pair_count() const { return sentences.size() > 1 ? sentences.size() - 1 : 0; }
};

struct ParallelCorpus {
  int source = 0;
  int target = 0;
  std::vector<SentencePair> pairs;
};

struct Batch {
  std::vector<SentencePair> pairs;
  std::size_t parallel_count() const;
};

// Probability of picking each corpus: size^s normalised.
std::vector<double> sampling_probabilities(std::span<const std::size_t> sizes, double smoothing);

// batch_size * parallel_fraction entries (rounded) come from the parallel
// corpora, the rest from the monolingual ones. Within each group the corpus
// of every entry is drawn with smoothed probabilities; entries are drawn
// without replacement inside one batch.
Batch sample_batch(std::span<const MonoCorpus> mono, std::span<const ParallelCorpus> parallel,
                   std::size_t batch_size, double smoothing, double parallel_fraction, std::mt19937_64& rng);

struct EncodedPair {
  EncoderInput input;
  std::vector<std::size_t> x_rows;  // sequence positions of x words
  std::vector<std::size_t> y_rows;  // sequence positions of y words
};

// kFull: [CLS] x [SEP] y [SEP], continuous positions, segments 0/1.
// Other regimes: x [SEP] y [SEP] with y positions restarting at 0.
EncodedPair encode_pair(const SentencePair& pair, MaskRegime regime, int max_positions);
// Stand-alone sentence: x [SEP], positions from 0, segment 0, full attention.
EncodedPair encode_sentence(const Sentence& sentence, int max_positions);

// ---------------------------------------------------------------------------
// Experiment-level corpus description and on-disk layout.

struct LanguageConfig {
  std::string tag;
  std::string reorder = "identity";
  std::size_t mono_size = 2000;
  std::size_t parallel_size = 1000;  // pairs with the pivot language
};

struct CorpusConfig {
  GenerationOptions generation;
  std::vector<LanguageConfig> languages;  // languages[0] is the pivot
  std::size_t heldout_pairs = 200;
  std::size_t heldout_mono = 200;

  static CorpusConfig desk_default();
  void validate() const;
};

struct CorpusSet {
  CorpusConfig config;
  Vocabulary vocab{{"en"}, 1};
  std::vector<LanguageSpec> languages;
  std::vector<MonoCorpus> mono;
  std::vector<ParallelCorpus> parallel;          // x = non-pivot language, y = pivot
  std::vector<ParallelCorpus> heldout_parallel;  // same language pairs, unseen base sentences
  std::vector<MonoCorpus> heldout_mono;          // per language, unseen sentences

  int concept_of(int token_id) const;
};

CorpusSet generate_corpus_set(const CorpusConfig& config, std::uint64_t seed);

// Text formats: "<tag>\t<tok> <tok> ..." per sentence; parallel corpora as
// two files sharing line indices plus a Pharaoh "<x>-<y>" alignment file.
void write_sentences(const std::filesystem::path& path, const Vocabulary& vocab, std::span<const Sentence> sentences);
std::vector<Sentence> read_sentences(const std::filesystem::path& path, const Vocabulary& vocab);
void write_alignments(const std::filesystem::path& path, std::span<const SentencePair> pairs);
std::vector<std::vector<Link>> read_alignments(const std::filesystem::path& path);

void save_corpus_set(const CorpusSet& set, const std::filesystem::path& dir);
CorpusSet load_corpus_set(const std::filesystem::path& dir);
// FNV-1a over the corpus files, as 16 hex digits.
std::string corpus_hash(const std::filesystem::path& dir);

}  // namespace amber
