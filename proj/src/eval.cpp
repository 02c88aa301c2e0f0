#include "amber/eval.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <limits>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <thread>

namespace amber {

namespace {

constexpr std::size_t kChunk = 64;

// Inference only records parameter leaves; nothing is written back without
// a backward pass.
template <typename T>
Encoder<T>& frozen(const Encoder<T>& model) {
  return const_cast<Encoder<T>&>(model);
}

// Runs fn(chunk_index) for every chunk on up to `threads` workers. Exceptions
// from workers are rethrown on the calling thread (first chunk wins).
void parallel_chunks(std::size_t chunks, unsigned threads, const std::function<void(std::size_t)>& fn) {
  if (threads == 0) threads = evaluation_threads();
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(chunks, 1)));
  std::vector<std::exception_ptr> errors(chunks);
  if (threads <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) fn(c);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t c = next++; c < chunks; c = next++) {
        try {
          fn(c);
        } catch (...) {
          errors[c] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

template <typename T>
std::vector<double> to_double(const Tensor<T>& t) {
  return std::vector<double>(t.data.begin(), t.data.end());
}

// Encodes each sentence separately and hands (sentence index, output, seq,
// encoded pair) to `visit`, chunk by chunk.
template <typename T, typename Visit>
void encode_sentences(const Encoder<T>& model, std::span<const Sentence> sentences, unsigned threads, Visit visit) {
  const std::size_t chunks = (sentences.size() + kChunk - 1) / kChunk;
  parallel_chunks(chunks, threads, [&](std::size_t c) {
    const std::size_t begin = c * kChunk;
    const std::size_t end = std::min(sentences.size(), begin + kChunk);
    std::vector<EncodedPair> encoded;
    std::vector<EncoderInput> inputs;
    for (std::size_t i = begin; i < end; ++i) {
      encoded.push_back(encode_sentence(sentences[i], model.config().max_positions));
      inputs.push_back(encoded.back().input);
    }
    Tape<T> tape;
    auto out = frozen(model).encode(tape, std::span<const EncoderInput>(inputs));
    for (std::size_t i = begin; i < end; ++i) visit(i, out, i - begin, encoded[i - begin]);
  });
}

}  // namespace

unsigned evaluation_threads() {
  if (const char* env = std::getenv("AMBER_MINI_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

template <typename T>
std::vector<Embedding> embed_sentences(const Encoder<T>& model, std::span<const Sentence> sentences,
                                       unsigned threads) {
  std::vector<Embedding> result(sentences.size());
  encode_sentences(model, sentences, threads,
                   [&](std::size_t i, const EncoderOutput<T>& out, std::size_t seq, const EncodedPair& enc) {
                     result[i] = to_double(sentence_embedding(out, seq, std::span<const std::size_t>(enc.x_rows)).value());
                   });
  return result;
}

template <typename T>
std::vector<Embedding> token_features(const Encoder<T>& model, std::span<const Sentence> sentences,
                                      unsigned threads) {
  std::vector<std::vector<Embedding>> per_sentence(sentences.size());
  encode_sentences(model, sentences, threads,
                   [&](std::size_t i, const EncoderOutput<T>& out, std::size_t seq, const EncodedPair& enc) {
                     const Tensor<T> top = out.hidden_state(out.hidden.size() - 1, seq);
                     for (std::size_t r : enc.x_rows) {
                       auto row = top.row(r);
                       per_sentence[i].emplace_back(row.begin(), row.end());
                     }
                   });
  std::vector<Embedding> result;
  for (auto& s : per_sentence)
    for (auto& f : s) result.push_back(std::move(f));
  return result;
}

// ---------------------------------------------------------------------------
// Retrieval

RetrievalScore score_retrieval(std::span<const Embedding> sources, std::span<const Embedding> candidates) {
  if (sources.size() != candidates.size()) {
    fail(ErrorKind::kEvaluation, "retrieval: " + std::to_string(sources.size()) + " sources but " +
                                     std::to_string(candidates.size()) + " candidates");
  }
  if (candidates.size() < 2) fail(ErrorKind::kEvaluation, "retrieval: need at least 2 candidates");
  auto normalised = [](std::span<const Embedding> xs, const char* side) {
    const std::size_t d = xs.front().size();
    Eigen::MatrixXd m(static_cast<Eigen::Index>(xs.size()), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (xs[i].size() != d) fail(ErrorKind::kEvaluation, std::string("retrieval: ragged ") + side + " embeddings");
      double norm = 0;
      for (double v : xs[i]) norm += v * v;
      norm = std::sqrt(norm);
      if (!(norm > 0) || !std::isfinite(norm)) {
        fail(ErrorKind::kEvaluation, std::string("retrieval: zero-norm ") + side + " embedding at index " + std::to_string(i));
      }
      for (std::size_t k = 0; k < d; ++k) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = xs[i][k] / norm;
    }
    return m;
  };
  const Eigen::MatrixXd s = normalised(sources, "source");
  const Eigen::MatrixXd c = normalised(candidates, "candidate");
  if (s.cols() != c.cols()) fail(ErrorKind::kEvaluation, "retrieval: embedding widths differ");
  const Eigen::MatrixXd sim = s * c.transpose();
  RetrievalScore score;
  score.total = sources.size();
  score.candidates = candidates.size();
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    Eigen::Index best = 0;
    std::size_t at_best = 1;
    for (Eigen::Index j = 1; j < sim.cols(); ++j) {
      if (sim(i, j) > sim(i, best)) {
        best = j;
        at_best = 1;
      } else if (sim(i, j) == sim(i, best)) {
        ++at_best;
      }
    }
    if (at_best > 1) ++score.ties;
    if (best == i) ++score.correct;
  }
  score.accuracy = static_cast<double>(score.correct) / static_cast<double>(score.total);
  return score;
}

double RetrievalReport::mean_accuracy() const {
  if (pairs.empty()) return 0;
  double s = 0;
  for (const auto& e : pairs) s += e.score.accuracy;
  return s / static_cast<double>(pairs.size());
}

const RetrievalReport::Entry& RetrievalReport::find(std::string_view source) const {
  for (const auto& e : pairs)
    if (e.source == source) return e;
  fail(ErrorKind::kEvaluation, "retrieval report has no entry for '" + std::string(source) + "'");
}

template <typename T>
RetrievalReport retrieval_accuracy(const Encoder<T>& model, const Vocabulary& vocab,
                                   std::span<const ParallelCorpus> corpora, unsigned threads) {
  RetrievalReport report;
  for (const auto& corpus : corpora) {
    std::vector<Sentence> src, tgt;
    for (const auto& p : corpus.pairs) {
      src.push_back(p.x);
      tgt.push_back(p.y);
    }
    const auto es = embed_sentences(model, std::span<const Sentence>(src), threads);
    const auto et = embed_sentences(model, std::span<const Sentence>(tgt), threads);
    report.pairs.push_back({vocab.languages().at(static_cast<std::size_t>(corpus.source)),
                            vocab.languages().at(static_cast<std::size_t>(corpus.target)),
                            score_retrieval(es, et)});
  }
  return report;
}

// ---------------------------------------------------------------------------
// Alignment

std::vector<Link> argmax_links(const std::vector<std::vector<double>>& matrix) {
  std::vector<Link> links;
  for (std::size_t i = 0; i < matrix.size(); ++i) {
    if (matrix[i].empty()) continue;
    std::size_t best = 0;
    for (std::size_t j = 1; j < matrix[i].size(); ++j)
      if (matrix[i][j] > matrix[i][best]) best = j;
    links.emplace_back(static_cast<int>(i), static_cast<int>(best));
  }
  return links;
}

template <typename T>
std::vector<std::vector<std::vector<double>>> alignment_attention(const Encoder<T>& model, const SentencePair& pair) {
  const EncodedPair enc = encode_pair(pair, MaskRegime::kTgt2Src, model.config().max_positions);
  Tape<T> tape;
  auto out = frozen(model).encode(tape, enc.input);
  auto heads = cross_attention(out, 0, AttentionDirection::kTargetToSource, pair.x.tokens.size(), pair.y.tokens.size());
  std::vector<std::vector<std::vector<double>>> result;
  for (const auto& h : heads) {
    const Tensor<T>& v = h.value();
    std::vector<std::vector<double>> m(v.rows());
    for (std::size_t i = 0; i < v.rows(); ++i) m[i].assign(v.row(i).begin(), v.row(i).end());
    result.push_back(std::move(m));
  }
  return result;
}

template <typename T>
std::vector<Link> extract_alignments(const Encoder<T>& model, const SentencePair& pair) {
  const auto heads = alignment_attention(model, pair);
  std::vector<std::vector<double>> mean = heads.front();
  for (std::size_t h = 1; h < heads.size(); ++h)
    for (std::size_t i = 0; i < mean.size(); ++i)
      for (std::size_t j = 0; j < mean[i].size(); ++j) mean[i][j] += heads[h][i][j];
  for (auto& row : mean)
    for (double& v : row) v /= static_cast<double>(heads.size());
  return argmax_links(mean);
}

template <typename T>
std::vector<Link> extract_alignments_head(const Encoder<T>& model, const SentencePair& pair, std::size_t head) {
  const auto heads = alignment_attention(model, pair);
  if (head >= heads.size()) fail(ErrorKind::kIndex, "extract_alignments_head: head " + std::to_string(head) + " out of range");
  return argmax_links(heads[head]);
}

namespace {

AlignmentReport finish(std::size_t predicted, std::size_t gold, std::size_t matched) {
  AlignmentReport r;
  r.predicted = predicted;
  r.gold = gold;
  r.matched = matched;
  r.precision = predicted == 0 ? 1.0 : static_cast<double>(matched) / static_cast<double>(predicted);
  r.recall = gold == 0 ? (predicted == 0 ? 1.0 : 0.0) : static_cast<double>(matched) / static_cast<double>(gold);
  r.aer = predicted + gold == 0 ? 0.0 : 1.0 - 2.0 * static_cast<double>(matched) / static_cast<double>(predicted + gold);
  return r;
}

std::size_t count_matches(std::span<const Link> predicted, std::span<const Link> gold) {
  std::vector<Link> p(predicted.begin(), predicted.end()), g(gold.begin(), gold.end());
  std::sort(p.begin(), p.end());
  p.erase(std::unique(p.begin(), p.end()), p.end());
  std::sort(g.begin(), g.end());
  g.erase(std::unique(g.begin(), g.end()), g.end());
  std::vector<Link> both;
  std::set_intersection(p.begin(), p.end(), g.begin(), g.end(), std::back_inserter(both));
  return both.size();
}

std::size_t distinct(std::span<const Link> links) {
  std::vector<Link> v(links.begin(), links.end());
  std::sort(v.begin(), v.end());
  return static_cast<std::size_t>(std::unique(v.begin(), v.end()) - v.begin());
}

}  // namespace

AlignmentReport alignment_error_rate(std::span<const Link> predicted, std::span<const Link> gold) {
  return finish(distinct(predicted), distinct(gold), count_matches(predicted, gold));
}

AlignmentReport alignment_error_rate(std::span<const std::vector<Link>> predicted,
                                     std::span<const std::vector<Link>> gold) {
  if (predicted.size() != gold.size()) {
    fail(ErrorKind::kEvaluation, "alignment_error_rate: " + std::to_string(predicted.size()) + " predictions for " +
                                     std::to_string(gold.size()) + " gold sentences");
  }
  std::size_t p = 0, g = 0, m = 0;
  for (std::size_t s = 0; s < gold.size(); ++s) {
    p += distinct(predicted[s]);
    g += distinct(gold[s]);
    m += count_matches(predicted[s], gold[s]);
  }
  return finish(p, g, m);
}

template <typename T>
std::vector<AlignmentEntry> evaluate_alignment(const Encoder<T>& model, const Vocabulary& vocab,
                                               const std::vector<LanguageSpec>& languages,
                                               std::span<const ParallelCorpus> corpora, unsigned threads) {
  std::vector<AlignmentEntry> entries;
  for (const auto& corpus : corpora) {
    std::vector<std::vector<Link>> predicted(corpus.pairs.size()), gold(corpus.pairs.size());
    const std::size_t chunks = (corpus.pairs.size() + kChunk - 1) / kChunk;
    parallel_chunks(chunks, threads, [&](std::size_t c) {
      for (std::size_t i = c * kChunk; i < std::min(corpus.pairs.size(), (c + 1) * kChunk); ++i) {
        predicted[i] = extract_alignments(model, corpus.pairs[i]);
        gold[i] = corpus.pairs[i].gold;
      }
    });
    entries.push_back({vocab.languages().at(static_cast<std::size_t>(corpus.source)),
                       vocab.languages().at(static_cast<std::size_t>(corpus.target)),
                       languages.at(static_cast<std::size_t>(corpus.source)).reorder.name(),
                       alignment_error_rate(std::span<const std::vector<Link>>(predicted),
                                            std::span<const std::vector<Link>>(gold))});
  }
  return entries;
}

// ---------------------------------------------------------------------------
// Tagging transfer

int LinearProbe::predict(const Embedding& feature) const {
  if (feature.size() != dim) fail(ErrorKind::kDimension, "probe: feature width mismatch");
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < classes; ++c) {
    double s = bias[static_cast<std::size_t>(c)];
    for (std::size_t k = 0; k < dim; ++k) s += weights[static_cast<std::size_t>(c) * dim + k] * feature[k];
    if (s > best_score) {
      best_score = s;
      best = c;
    }
  }
  return best;
}

LinearProbe train_probe(std::span<const Embedding> features, std::span<const int> labels, const ProbeOptions& options) {
  if (features.size() != labels.size() || features.empty()) {
    fail(ErrorKind::kConfig, "probe: need equally many features and labels, got " + std::to_string(features.size()) +
                                 " and " + std::to_string(labels.size()));
  }
  if (options.classes < 2) fail(ErrorKind::kConfig, "probe.classes: must be at least 2");
  std::vector<int> seen;
  for (int y : labels) {
    if (y < 0 || y >= options.classes) fail(ErrorKind::kConfig, "probe: label " + std::to_string(y) + " out of range");
    seen.push_back(y);
  }
  std::sort(seen.begin(), seen.end());
  if (std::unique(seen.begin(), seen.end()) - seen.begin() < 2) {
    fail(ErrorKind::kConfig, "probe: training set has a single class");
  }
  const auto n = static_cast<Eigen::Index>(features.size());
  const auto d = static_cast<Eigen::Index>(features.front().size());
  const auto k = static_cast<Eigen::Index>(options.classes);
  // Features are standardised internally; the returned probe works on raw features.
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(features[static_cast<std::size_t>(i)].size()) != d) {
      fail(ErrorKind::kDimension, "probe: ragged features");
    }
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = features[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  Eigen::RowVectorXd scale = (x.array().square().colwise().sum() / static_cast<double>(n)).sqrt();
  for (Eigen::Index j = 0; j < d; ++j) scale(j) = scale(j) > 1e-12 ? scale(j) : 1.0;
  x.array().rowwise() /= scale.array();
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, k);
  for (Eigen::Index i = 0; i < n; ++i) y(i, labels[static_cast<std::size_t>(i)]) = 1.0;

  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(d, k);
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(k);
  Eigen::MatrixXd mw = w, vw = w;
  Eigen::RowVectorXd mb = b, vb = b;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int it = 1; it <= options.iterations; ++it) {
    Eigen::MatrixXd logits = x * w;
    logits.rowwise() += b;
    const Eigen::VectorXd row_max = logits.rowwise().maxCoeff();
    Eigen::MatrixXd p = (logits.colwise() - row_max).array().exp().matrix();
    const Eigen::VectorXd z = p.rowwise().sum();
    p.array().colwise() /= z.array();
    const Eigen::MatrixXd delta = (p - y) / static_cast<double>(n);
    const Eigen::MatrixXd gw = x.transpose() * delta + options.l2 * w;
    const Eigen::RowVectorXd gb = delta.colwise().sum();
    const double c1 = 1.0 / (1.0 - std::pow(b1, it)), c2 = 1.0 / (1.0 - std::pow(b2, it));
    mw = b1 * mw + (1 - b1) * gw;
    vw = b2 * vw + (1 - b2) * gw.cwiseProduct(gw);
    mb = b1 * mb + (1 - b1) * gb;
    vb = b2 * vb + (1 - b2) * gb.cwiseProduct(gb);
    w.array() -= options.learning_rate * (mw.array() * c1) / ((vw.array() * c2).sqrt() + eps);
    b.array() -= options.learning_rate * (mb.array() * c1) / ((vb.array() * c2).sqrt() + eps);
  }

  LinearProbe probe;
  probe.classes = options.classes;
  probe.dim = static_cast<std::size_t>(d);
  probe.weights.assign(static_cast<std::size_t>(k * d), 0.0);
  probe.bias.assign(static_cast<std::size_t>(k), 0.0);
  for (Eigen::Index c = 0; c < k; ++c) {
    double shift = b(c);
    for (Eigen::Index j = 0; j < d; ++j) {
      const double wj = w(j, c) / scale(j);
      probe.weights[static_cast<std::size_t>(c * d + j)] = wj;
      shift -= wj * mean(j);
    }
    probe.bias[static_cast<std::size_t>(c)] = shift;
  }
  return probe;
}

LinearProbe random_probe(std::size_t dim, int classes, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  LinearProbe probe;
  probe.classes = classes;
  probe.dim = dim;
  probe.weights.resize(static_cast<std::size_t>(classes) * dim);
  for (double& v : probe.weights) v = normal(rng);
  probe.bias.assign(static_cast<std::size_t>(classes), 0.0);
  return probe;
}

double probe_accuracy(const LinearProbe& probe, std::span<const Embedding> features, std::span<const int> labels) {
  if (features.size() != labels.size()) fail(ErrorKind::kEvaluation, "probe_accuracy: size mismatch");
  if (features.empty()) fail(ErrorKind::kEvaluation, "probe_accuracy: no tokens");
  std::size_t right = 0;
  for (std::size_t i = 0; i < features.size(); ++i) right += probe.predict(features[i]) == labels[i] ? 1 : 0;
  return static_cast<double>(right) / static_cast<double>(features.size());
}

double TransferReport::mean_target_accuracy() const {
  if (targets.empty()) return 0;
  double s = 0;
  for (const auto& t : targets) s += t.accuracy;
  return s / static_cast<double>(targets.size());
}

std::vector<int> concept_tags(const CorpusSet& set, std::span<const Sentence> sentences, int classes) {
  std::vector<int> tags;
  for (const auto& s : sentences)
    for (int id : s.tokens) tags.push_back(set.concept_of(id) % classes);
  return tags;
}

template <typename T>
TransferReport zero_shot_tag_transfer(const Encoder<T>& model, const CorpusSet& set, int train_language,
                                      const TransferOptions& options, unsigned threads) {
  const auto lang = static_cast<std::size_t>(train_language);
  if (lang >= set.mono.size()) fail(ErrorKind::kConfig, "transfer: no language with index " + std::to_string(train_language));
  const auto& pool = set.mono[lang].sentences;
  std::vector<Sentence> train(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(std::min(pool.size(), options.train_sentences)));
  const auto train_x = token_features(model, std::span<const Sentence>(train), threads);
  const auto train_y = concept_tags(set, train, options.probe.classes);
  const LinearProbe probe = train_probe(train_x, train_y, options.probe);

  TransferReport report;
  report.train_language = set.vocab.languages().at(lang);
  report.train_accuracy = probe_accuracy(probe, train_x, train_y);
  for (std::size_t l = 0; l < set.heldout_mono.size(); ++l) {
    const auto& sents = set.heldout_mono[l].sentences;
    const auto x = token_features(model, std::span<const Sentence>(sents), threads);
    const auto y = concept_tags(set, sents, options.probe.classes);
    const double acc = probe_accuracy(probe, x, y);
    if (l == lang) {
      report.source_accuracy = acc;
    } else {
      report.targets.push_back({set.vocab.languages().at(l), y.size(), acc});
    }
  }
  report.transfer_gap = report.source_accuracy - report.mean_target_accuracy();
  return report;
}

// ---------------------------------------------------------------------------
// Reporting

std::vector<LanguageDelta> retrieval_deltas(const RetrievalReport& baseline, const RetrievalReport& treatment,
                                            const CorpusSet& set) {
  std::vector<LanguageDelta> deltas;
  for (const auto& corpus : set.parallel) {
    const std::string& tag = set.vocab.languages().at(static_cast<std::size_t>(corpus.source));
    deltas.push_back({tag, corpus.pairs.size(),
                      treatment.find(tag).score.accuracy - baseline.find(tag).score.accuracy});
  }
  return deltas;
}

void write_deltas(std::ostream& os, std::span<const LanguageDelta> deltas) {
  os << "language\tparallel_pairs\tdelta\n";
  for (const auto& d : deltas) {
    os << d.language << '\t' << d.parallel_pairs << '\t' << std::fixed << std::setprecision(6) << d.delta << '\n';
  }
  os.unsetf(std::ios::fixed);
}

nlohmann::ordered_json to_json(const RetrievalReport& report) {
  nlohmann::ordered_json j;
  j["task"] = "retrieve";
  j["pairs"] = nlohmann::ordered_json::array();
  for (const auto& e : report.pairs) {
    j["pairs"].push_back({{"source", e.source},
                          {"target", e.target},
                          {"accuracy", e.score.accuracy},
                          {"correct", e.score.correct},
                          {"total", e.score.total},
                          {"candidates", e.score.candidates},
                          {"ties", e.score.ties}});
  }
  j["mean_accuracy"] = report.mean_accuracy();
  return j;
}

nlohmann::ordered_json to_json(const AlignmentReport& r) {
  return {{"precision", r.precision}, {"recall", r.recall}, {"aer", r.aer},
          {"predicted", r.predicted}, {"gold", r.gold},     {"matched", r.matched}};
}

nlohmann::ordered_json to_json(std::span<const AlignmentEntry> entries) {
  nlohmann::ordered_json j;
  j["task"] = "align";
  j["pairs"] = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    nlohmann::ordered_json row = {{"source", e.source}, {"target", e.target}, {"reorder", e.reorder}};
    row.update(to_json(e.report));
    j["pairs"].push_back(row);
  }
  return j;
}

nlohmann::ordered_json to_json(const TransferReport& report) {
  nlohmann::ordered_json j;
  j["task"] = "transfer";
  j["train_language"] = report.train_language;
  j["train_accuracy"] = report.train_accuracy;
  j["source_accuracy"] = report.source_accuracy;
  j["targets"] = nlohmann::ordered_json::array();
  for (const auto& t : report.targets) {
    j["targets"].push_back({{"language", t.language}, {"tokens", t.tokens}, {"accuracy", t.accuracy}});
  }
  j["mean_target_accuracy"] = report.mean_target_accuracy();
  j["transfer_gap"] = report.transfer_gap;
  return j;
}

#define AMBER_INSTANTIATE(T)                                                                                          \
  template std::vector<Embedding> embed_sentences<T>(const Encoder<T>&, std::span<const Sentence>, unsigned);        \
  template std::vector<Embedding> token_features<T>(const Encoder<T>&, std::span<const Sentence>, unsigned);         \
  template RetrievalReport retrieval_accuracy<T>(const Encoder<T>&, const Vocabulary&,                                \
                                                 std::span<const ParallelCorpus>, unsigned);                          \
  template std::vector<std::vector<std::vector<double>>> alignment_attention<T>(const Encoder<T>&,                    \
                                                                                const SentencePair&);                 \
  template std::vector<Link> extract_alignments<T>(const Encoder<T>&, const SentencePair&);                          \
  template std::vector<Link> extract_alignments_head<T>(const Encoder<T>&, const SentencePair&, std::size_t);        \
  template std::vector<AlignmentEntry> evaluate_alignment<T>(const Encoder<T>&, const Vocabulary&,                    \
                                                             const std::vector<LanguageSpec>&,                        \
                                                             std::span<const ParallelCorpus>, unsigned);              \
  template TransferReport zero_shot_tag_transfer<T>(const Encoder<T>&, const CorpusSet&, int, const TransferOptions&, \
                                                    unsigned);

AMBER_INSTANTIATE(float)
AMBER_INSTANTIATE(double)

#undef AMBER_INSTANTIATE

}  // namespace amber
