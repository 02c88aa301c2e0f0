#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "amber/corpus.hpp"
#include "amber/encoder.hpp"
#include "amber/objectives.hpp"

namespace amber {

using Embedding = std::vector<double>;

// Worker count for evaluation: AMBER_MINI_THREADS if set and positive,
// otherwise the hardware concurrency (at least 1).
unsigned evaluation_threads();

// Mean top-layer state over the word positions of each sentence, each
// sentence encoded on its own (x [SEP], separate regime). Sentences are
// processed in fixed chunks so results do not depend on the thread count.
template <typename T>
std::vector<Embedding> embed_sentences(const Encoder<T>& model, std::span<const Sentence> sentences,
                                       unsigned threads = 0);

// Top-layer states of every word of every sentence, in sentence order.
template <typename T>
std::vector<Embedding> token_features(const Encoder<T>& model, std::span<const Sentence> sentences,
                                      unsigned threads = 0);

struct RetrievalScore {
  std::size_t total = 0;
  std::size_t correct = 0;
  std::size_t candidates = 0;
  std::size_t ties = 0;  // sources whose best cosine is shared by several candidates
  double accuracy = 0;
};

// Source i's gold match is candidate i. Picks the candidate of maximum cosine
// similarity, lowest index on ties.
RetrievalScore score_retrieval(std::span<const Embedding> sources, std::span<const Embedding> candidates);

struct RetrievalReport {
  struct Entry {
    std::string source;
    std::string target;
    RetrievalScore score;
  };
  std::vector<Entry> pairs;

  double mean_accuracy() const;
  const Entry& find(std::string_view source) const;
};

// One entry per parallel corpus: non-pivot sentences retrieve their pivot
// translations among all pivot sentences of that corpus.
template <typename T>
RetrievalReport retrieval_accuracy(const Encoder<T>& model, const Vocabulary& vocab,
                                   std::span<const ParallelCorpus> corpora, unsigned threads = 0);

struct AlignmentReport {
  double precision = 1;
  double recall = 0;
  double aer = 1;
  std::size_t predicted = 0;
  std::size_t gold = 0;
  std::size_t matched = 0;
};

// Links (i, argmax_j m[i][j]); ties go to the lowest j.
std::vector<Link> argmax_links(const std::vector<std::vector<double>>& matrix);

// Target-to-source attention per head for one pair ([head][i][j]).
template <typename T>
std::vector<std::vector<std::vector<double>>> alignment_attention(const Encoder<T>& model, const SentencePair& pair);

// Links from the head-averaged target-to-source attention.
template <typename T>
std::vector<Link> extract_alignments(const Encoder<T>& model, const SentencePair& pair);

// Links from a single head.
template <typename T>
std::vector<Link> extract_alignments_head(const Encoder<T>& model, const SentencePair& pair, std::size_t head);

AlignmentReport alignment_error_rate(std::span<const Link> predicted, std::span<const Link> gold);
// Counts pooled over sentences.
AlignmentReport alignment_error_rate(std::span<const std::vector<Link>> predicted,
                                     std::span<const std::vector<Link>> gold);

struct AlignmentEntry {
  std::string source;
  std::string target;
  std::string reorder;
  AlignmentReport report;
};

template <typename T>
std::vector<AlignmentEntry> evaluate_alignment(const Encoder<T>& model, const Vocabulary& vocab,
                                               const std::vector<LanguageSpec>& languages,
                                               std::span<const ParallelCorpus> corpora, unsigned threads = 0);

// Softmax regression over frozen features.
struct LinearProbe {
  int classes = 0;
  std::size_t dim = 0;
  std::vector<double> weights;  // classes x dim, row-major
  std::vector<double> bias;

  int predict(const Embedding& feature) const;
};

struct ProbeOptions {
  int classes = 4;
  int iterations = 300;
  double learning_rate = 0.05;
  double l2 = 1e-4;
};

LinearProbe train_probe(std::span<const Embedding> features, std::span<const int> labels, const ProbeOptions& options);
LinearProbe random_probe(std::size_t dim, int classes, std::mt19937_64& rng);
double probe_accuracy(const LinearProbe& probe, std::span<const Embedding> features, std::span<const int> labels);

struct TransferReport {
  struct Entry {
    std::string language;
    std::size_t tokens = 0;
    double accuracy = 0;
  };
  std::string train_language;
  double train_accuracy = 0;   // held-in, on the probe's own training tokens
  double source_accuracy = 0;  // held-out sentences of the training language
  std::vector<Entry> targets;  // every other language
  double transfer_gap = 0;     // source accuracy minus mean target accuracy

  double mean_target_accuracy() const;
};

struct TransferOptions {
  ProbeOptions probe;
  std::size_t train_sentences = 1000;
};

// Tag of a word token: its base concept modulo `classes`.
std::vector<int> concept_tags(const CorpusSet& set, std::span<const Sentence> sentences, int classes);

// Probe trained on the training language's monolingual sentences, tested on
// every language's held-out monolingual sentences.
template <typename T>
TransferReport zero_shot_tag_transfer(const Encoder<T>& model, const CorpusSet& set, int train_language,
                                      const TransferOptions& options = {}, unsigned threads = 0);

struct LanguageDelta {
  std::string language;
  std::size_t parallel_pairs = 0;
  double delta = 0;
};

// treatment minus baseline retrieval accuracy per non-pivot language.
std::vector<LanguageDelta> retrieval_deltas(const RetrievalReport& baseline, const RetrievalReport& treatment,
                                            const CorpusSet& set);
void write_deltas(std::ostream& os, std::span<const LanguageDelta> deltas);

nlohmann::ordered_json to_json(const RetrievalReport& report);
nlohmann::ordered_json to_json(const AlignmentReport& report);
nlohmann::ordered_json to_json(std::span<const AlignmentEntry> entries);
nlohmann::ordered_json to_json(const TransferReport& report);

}  // namespace amber
