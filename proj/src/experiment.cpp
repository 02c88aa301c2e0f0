#include "amber/experiment.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>

namespace amber {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

[[noreturn]] void config_error(const std::string& path, const std::string& what) {
  fail(ErrorKind::kConfig, path + ": " + what);
}

// Reads the keys of one JSON object, remembering which were consumed so
// leftovers can be reported as unknown fields.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) config_error(path_.empty() ? "config" : path_, "expected an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const std::string& key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) config_error(at(key), "expected an integer");
      const auto x = v->get<long long>();
      if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) config_error(at(key), "out of range");
      out = static_cast<int>(x);
    }
  }

  void get(const std::string& key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || v->get<long long>() < 0) config_error(at(key), "expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }

  void get(const std::string& key, std::uint64_t& out, bool) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<long long>() < 0)) {
        config_error(at(key), "expected a non-negative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }

  void get(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) config_error(at(key), "expected a number");
      out = v->get<double>();
    }
  }

  void get(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) config_error(at(key), "expected a string");
      out = v->get<std::string>();
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) config_error(at(it.key()), "unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

void parse_corpus(const json& j, CorpusConfig& c) {
  Fields f(j, "corpus");
  f.get("concepts", c.generation.concepts);
  f.get("min_length", c.generation.min_length);
  f.get("max_length", c.generation.max_length);
  f.get("zipf_exponent", c.generation.zipf_exponent);
  f.get("heldout_pairs", c.heldout_pairs);
  f.get("heldout_mono", c.heldout_mono);
  if (const json* langs = f.find("languages")) {
    if (!langs->is_array()) config_error("corpus.languages", "expected an array");
    c.languages.clear();
    for (std::size_t i = 0; i < langs->size(); ++i) {
      const std::string path = "corpus.languages[" + std::to_string(i) + "]";
      Fields lf((*langs)[i], path);
      LanguageConfig lc;
      lf.get("tag", lc.tag);
      lf.get("reorder", lc.reorder);
      lf.get("mono", lc.mono_size);
      lf.get("parallel", lc.parallel_size);
      lf.finish();
      if (lc.tag.empty()) config_error(path + ".tag", "required");
      try {
        Reorder::parse(lc.reorder);
      } catch (const Error& e) {
        config_error(path + ".reorder", e.what());
      }
      c.languages.push_back(lc);
    }
  }
  f.finish();
}

void parse_model(const json& j, ModelConfig& m, bool& vocab_given) {
  Fields f(j, "model");
  vocab_given = j.contains("vocab_size");
  f.get("vocab_size", m.vocab_size);
  f.get("layers", m.layers);
  f.get("heads", m.heads);
  f.get("hidden", m.hidden);
  f.get("ffn_dim", m.ffn_dim);
  f.get("max_positions", m.max_positions);
  f.get("dropout", m.dropout);
  f.get("init_std", m.init_std);
  f.get("ln_eps", m.ln_eps);
  std::string precision = m.precision == Precision::kTrain32 ? "train32" : "test64";
  f.get("precision", precision);
  if (precision == "train32") m.precision = Precision::kTrain32;
  else if (precision == "test64") m.precision = Precision::kTest64;
  else config_error("model.precision", "expected \"train32\" or \"test64\"");
  f.finish();
}

void parse_train(const json& j, TrainConfig& t) {
  Fields f(j, "train");
  f.get("steps", t.steps);
  f.get("warmup_steps", t.warmup_steps);
  f.get("peak_lr", t.peak_lr);
  f.get("batch_size", t.batch_size);
  std::string objectives = t.flags.str();
  f.get("objectives", objectives);
  try {
    t.flags = ObjectiveFlags::parse(objectives);
  } catch (const Error& e) {
    config_error("train.objectives", e.what());
  }
  if (const json* w = f.find("weights")) {
    Fields wf(*w, "train.weights");
    wf.get("mlm", t.weights.mlm);
    wf.get("tlm", t.weights.tlm);
    wf.get("wa", t.weights.wa);
    wf.get("sa", t.weights.sa);
    wf.finish();
  }
  f.get("beta1", t.beta1);
  f.get("beta2", t.beta2);
  f.get("adam_eps", t.adam_eps);
  if (const json* c = f.find("clip_norm")) {
    if (c->is_null()) t.clip_norm = std::numeric_limits<double>::infinity();
    else if (c->is_number()) t.clip_norm = c->get<double>();
    else config_error("train.clip_norm", "expected a number or null");
  }
  f.get("mask_rate", t.mask_rate);
  f.get("smoothing", t.smoothing);
  f.get("parallel_fraction", t.parallel_fraction);
  f.get("checkpoint_every", t.checkpoint_every);
  f.finish();
}

void parse_eval(const json& j, EvalConfig& e) {
  Fields f(j, "eval");
  f.get("tag_classes", e.tag_classes);
  f.get("probe_iterations", e.probe_iterations);
  f.get("probe_lr", e.probe_lr);
  f.get("probe_l2", e.probe_l2);
  f.get("probe_train_sentences", e.probe_train_sentences);
  f.get("train_language", e.train_language);
  f.finish();
}

int corpus_vocab_size(const CorpusConfig& c) {
  return kFirstWordId + c.generation.concepts * static_cast<int>(c.languages.size());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::kIo, "cannot write " + path.string());
  os << text;
  if (!os) fail(ErrorKind::kIo, "write failed for " + path.string());
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::kIo, "cannot create " + dir.string() + ": " + ec.message());
}

void write_resolved(const ExperimentConfig& config, const std::filesystem::path& dir) {
  write_text(dir / "config.resolved.json", to_json(config).dump(2) + "\n");
}

CorpusSet load_data(const ExperimentConfig& config) {
  const auto dir = data_dir(config);
  if (!std::filesystem::exists(dir / "corpus.json")) {
    fail(ErrorKind::kData, "no corpus at " + dir.string() + " (run gen first)");
  }
  CorpusSet set = load_corpus_set(dir);
  return set;
}

void check_vocab(const ModelConfig& model, const CorpusSet& set) {
  if (model.vocab_size != set.vocab.size()) {
    fail(ErrorKind::kData, "model vocabulary has " + std::to_string(model.vocab_size) + " entries but the corpus needs " +
                               std::to_string(set.vocab.size()));
  }
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

template <typename T>
TrainResult train_with(const ExperimentConfig& config, const CorpusSet& set, std::ostream& log,
                       const std::optional<std::filesystem::path>& phase2_from) {
  const auto dir = run_dir(config);
  ensure_dir(dir);
  write_resolved(config, dir);

  std::optional<TrainingState<T>> state;
  if (phase2_from) {
    // A second phase keeps the weights and restarts the optimiser and schedule.
    TrainingState<T> previous = load_checkpoint<T>(*phase2_from);
    if (!(previous.model.config() == config.model)) {
      fail(ErrorKind::kConfig, "model: differs from the phase-1 checkpoint " + phase2_from->string());
    }
    state.emplace(std::move(previous.model), config.seed);
    log << "phase 2 from " << phase2_from->string() << " (phase-1 step " << previous.step << ")\n";
  } else {
    state.emplace(Encoder<T>(config.model, config.seed), config.seed);
  }

  TrainResult result;
  result.metrics = dir / "metrics.jsonl";
  result.checkpoint = dir / "checkpoint.bin";
  std::ofstream metrics(result.metrics, std::ios::trunc);
  if (!metrics) fail(ErrorKind::kIo, "cannot write " + result.metrics.string());

  TrainHooks hooks;
  hooks.metrics = &metrics;
  hooks.on_checkpoint = [&](long step) {
    const auto path = dir / ("checkpoint-" + std::to_string(step) + ".bin");
    save_checkpoint(*state, path);
    log << "checkpoint " << path.string() << "\n";
  };
  const auto start = std::chrono::steady_clock::now();
  result.losses = train(*state, config.train, std::span<const MonoCorpus>(set.mono),
                        std::span<const ParallelCorpus>(set.parallel), hooks);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  metrics.flush();
  if (!metrics) fail(ErrorKind::kIo, "write failed for " + result.metrics.string());
  save_checkpoint(*state, result.checkpoint);
  log << "trained " << config.train.flags.str() << " for " << config.train.steps << " steps in "
      << fixed(result.seconds, 1) << " s";
  if (!result.losses.empty()) log << ", final total loss " << fixed(result.losses.back().total);
  log << "\ncheckpoint " << result.checkpoint.string() << "\n";
  return result;
}

template <typename T>
EvalResult eval_with(const ExperimentConfig& config, const std::filesystem::path& checkpoint, EvalTask task,
                     const std::filesystem::path& report_dir) {
  if (!std::filesystem::exists(checkpoint)) fail(ErrorKind::kIo, "no checkpoint at " + checkpoint.string());
  const CorpusSet set = load_data(config);
  const TrainingState<T> state = load_checkpoint<T>(checkpoint);
  check_vocab(state.model.config(), set);
  const auto corpora = std::span<const ParallelCorpus>(set.heldout_parallel);

  EvalResult result;
  std::ostringstream summary;
  summary << to_string(task) << ":";
  switch (task) {
    case EvalTask::kRetrieve: {
      const RetrievalReport r = retrieval_accuracy(state.model, set.vocab, corpora);
      result.content = to_json(r);
      summary << " mean accuracy " << fixed(r.mean_accuracy());
      for (const auto& e : r.pairs) summary << " " << e.source << "=" << fixed(e.score.accuracy);
      break;
    }
    case EvalTask::kAlign: {
      const auto entries = evaluate_alignment(state.model, set.vocab, set.languages, corpora);
      result.content = to_json(std::span<const AlignmentEntry>(entries));
      for (const auto& e : entries) summary << " " << e.source << "(" << e.reorder << ") aer=" << fixed(e.report.aer);
      break;
    }
    case EvalTask::kTransfer: {
      TransferOptions options;
      options.probe.classes = config.eval.tag_classes;
      options.probe.iterations = config.eval.probe_iterations;
      options.probe.learning_rate = config.eval.probe_lr;
      options.probe.l2 = config.eval.probe_l2;
      options.train_sentences = config.eval.probe_train_sentences;
      const int lang = set.vocab.language_index(config.eval.train_language);
      const TransferReport r = zero_shot_tag_transfer(state.model, set, lang, options);
      result.content = to_json(r);
      summary << " source " << r.train_language << "=" << fixed(r.source_accuracy);
      for (const auto& e : r.targets) summary << " " << e.language << "=" << fixed(e.accuracy);
      summary << " mean target " << fixed(r.mean_target_accuracy());
      break;
    }
  }
  result.content["step"] = state.step;
  result.content["corpus_hash"] = corpus_hash(data_dir(config));
  ensure_dir(report_dir);
  result.report = report_dir / ("report." + to_string(task) + ".json");
  write_text(result.report, result.content.dump(2) + "\n");
  result.summary = summary.str();
  return result;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void ExperimentConfig::validate() const {
  if (output_dir.empty()) config_error("output_dir", "must not be empty");
  corpus.validate();
  model.validate();
  train.validate();
  if (model.vocab_size != corpus_vocab_size(corpus)) {
    config_error("model.vocab_size", "must equal " + std::to_string(corpus_vocab_size(corpus)) +
                                         " for this corpus (4 specials + concepts x languages)");
  }
  const int needed = 2 * corpus.generation.max_length + 3;
  if (model.max_positions < needed) {
    config_error("model.max_positions", "must be at least " + std::to_string(needed) + " for sentences of length " +
                                            std::to_string(corpus.generation.max_length));
  }
  if (eval.tag_classes < 2) config_error("eval.tag_classes", "must be at least 2");
  if (eval.probe_iterations < 1) config_error("eval.probe_iterations", "must be positive");
  if (!(eval.probe_lr > 0)) config_error("eval.probe_lr", "must be positive");
  if (eval.probe_l2 < 0) config_error("eval.probe_l2", "must not be negative");
  if (eval.probe_train_sentences < 1) config_error("eval.probe_train_sentences", "must be positive");
  bool known = false;
  for (const auto& l : corpus.languages) known = known || l.tag == eval.train_language;
  if (!known) config_error("eval.train_language", "'" + eval.train_language + "' is not a corpus language");
}

ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  ExperimentConfig c;
  Fields f(j, "");
  f.get("seed", c.seed, true);
  std::string out = c.output_dir.string();
  f.get("output_dir", out);
  c.output_dir = out;
  if (const json* v = f.find("corpus")) parse_corpus(*v, c.corpus);
  bool vocab_given = false;
  if (const json* v = f.find("model")) parse_model(*v, c.model, vocab_given);
  if (!vocab_given) c.model.vocab_size = corpus_vocab_size(c.corpus);
  if (const json* v = f.find("train")) parse_train(*v, c.train);
  if (const json* v = f.find("eval")) parse_eval(*v, c.eval);
  f.finish();
  c.train.seed = c.seed;
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::kIo, "cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, path.string() + ": not valid JSON: " + e.what());
  }
  ExperimentConfig c = parse_experiment_config(j);
  // Relative output directories are taken relative to the config file.
  if (c.output_dir.is_relative()) c.output_dir = path.parent_path() / c.output_dir;
  return c;
}

nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  ojson j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir.string();
  ojson corpus;
  corpus["concepts"] = c.corpus.generation.concepts;
  corpus["min_length"] = c.corpus.generation.min_length;
  corpus["max_length"] = c.corpus.generation.max_length;
  corpus["zipf_exponent"] = c.corpus.generation.zipf_exponent;
  corpus["heldout_pairs"] = c.corpus.heldout_pairs;
  corpus["heldout_mono"] = c.corpus.heldout_mono;
  corpus["languages"] = ojson::array();
  for (const auto& l : c.corpus.languages) {
    corpus["languages"].push_back({{"tag", l.tag}, {"reorder", l.reorder}, {"mono", l.mono_size}, {"parallel", l.parallel_size}});
  }
  j["corpus"] = corpus;
  const ModelConfig& m = c.model;
  j["model"] = {{"vocab_size", m.vocab_size}, {"layers", m.layers},
                {"heads", m.heads},           {"hidden", m.hidden},
                {"ffn_dim", m.ffn_dim},       {"max_positions", m.max_positions},
                {"dropout", m.dropout},       {"precision", m.precision == Precision::kTrain32 ? "train32" : "test64"},
                {"init_std", m.init_std},     {"ln_eps", m.ln_eps}};
  const TrainConfig& t = c.train;
  ojson train;
  train["steps"] = t.steps;
  train["warmup_steps"] = t.warmup_steps;
  train["peak_lr"] = t.peak_lr;
  train["batch_size"] = t.batch_size;
  train["objectives"] = t.flags.str();
  train["weights"] = {{"mlm", t.weights.mlm}, {"tlm", t.weights.tlm}, {"wa", t.weights.wa}, {"sa", t.weights.sa}};
  train["beta1"] = t.beta1;
  train["beta2"] = t.beta2;
  train["adam_eps"] = t.adam_eps;
  train["clip_norm"] = std::isinf(t.clip_norm) ? ojson(nullptr) : ojson(t.clip_norm);
  train["mask_rate"] = t.mask_rate;
  train["smoothing"] = t.smoothing;
  train["parallel_fraction"] = t.parallel_fraction;
  train["checkpoint_every"] = t.checkpoint_every;
  j["train"] = train;
  j["eval"] = {{"tag_classes", c.eval.tag_classes},
               {"probe_iterations", c.eval.probe_iterations},
               {"probe_lr", c.eval.probe_lr},
               {"probe_l2", c.eval.probe_l2},
               {"probe_train_sentences", c.eval.probe_train_sentences},
               {"train_language", c.eval.train_language}};
  return j;
}

void apply_overrides(ExperimentConfig& config, const Overrides& o) {
  if (o.seed) {
    config.seed = *o.seed;
    config.train.seed = *o.seed;
  }
  if (o.objectives) {
    try {
      config.train.flags = ObjectiveFlags::parse(*o.objectives);
    } catch (const Error& e) {
      fail(ErrorKind::kConfig, std::string("--objectives: ") + e.what());
    }
  }
  if (o.steps) {
    if (*o.steps < 0) fail(ErrorKind::kConfig, "--steps: must not be negative");
    // Keep the warmup valid when the run is shortened.
    if (*o.steps > 0 && config.train.warmup_steps >= *o.steps) config.train.warmup_steps = *o.steps / 10;
    config.train.steps = *o.steps;
  }
  if (o.out) config.output_dir = *o.out;
}

std::filesystem::path data_dir(const ExperimentConfig& config) { return config.output_dir / "data"; }

std::filesystem::path run_dir(const ExperimentConfig& config) {
  std::string name = config.train.flags.str();
  for (char& ch : name)
    if (ch == ',') ch = '+';
  return config.output_dir / name;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_gen(const ExperimentConfig& config, std::ostream& log) {
  config.validate();
  const auto dir = data_dir(config);
  ensure_dir(config.output_dir);
  write_resolved(config, config.output_dir);
  const CorpusSet set = generate_corpus_set(config.corpus, config.seed);
  save_corpus_set(set, dir);
  for (std::size_t l = 0; l < set.mono.size(); ++l) {
    log << set.vocab.languages()[l] << ": " << set.mono[l].sentences.size() << " monolingual, "
        << set.heldout_mono[l].sentences.size() << " held-out\n";
  }
  for (std::size_t k = 0; k < set.parallel.size(); ++k) {
    log << set.vocab.languages()[static_cast<std::size_t>(set.parallel[k].source)] << "-"
        << set.vocab.languages()[static_cast<std::size_t>(set.parallel[k].target)] << ": "
        << set.parallel[k].pairs.size() << " parallel, " << set.heldout_parallel[k].pairs.size() << " held-out\n";
  }
  log << "corpus " << dir.string() << " hash " << corpus_hash(dir) << "\n";
}

TrainResult cmd_train(const ExperimentConfig& config, std::ostream& log,
                      const std::optional<std::filesystem::path>& phase2_from) {
  config.validate();
  const CorpusSet set = load_data(config);
  check_vocab(config.model, set);
  if (config.model.precision == Precision::kTest64) return train_with<double>(config, set, log, phase2_from);
  return train_with<float>(config, set, log, phase2_from);
}

EvalTask parse_task(std::string_view name) {
  if (name == "retrieve") return EvalTask::kRetrieve;
  if (name == "align") return EvalTask::kAlign;
  if (name == "transfer") return EvalTask::kTransfer;
  fail(ErrorKind::kConfig, "--task: unknown task '" + std::string(name) + "' (expected retrieve, align or transfer)");
}

std::string to_string(EvalTask task) {
  switch (task) {
    case EvalTask::kRetrieve: return "retrieve";
    case EvalTask::kAlign: return "align";
    case EvalTask::kTransfer: return "transfer";
  }
  return "?";
}

EvalResult cmd_eval(const ExperimentConfig& config, const std::filesystem::path& checkpoint, EvalTask task,
                    const std::filesystem::path& report_dir, std::ostream& log) {
  config.validate();
  EvalResult r = config.model.precision == Precision::kTest64 ? eval_with<double>(config, checkpoint, task, report_dir)
                                                               : eval_with<float>(config, checkpoint, task, report_dir);
  log << r.summary << "\n";
  return r;
}

AblationResult cmd_ablate(const ExperimentConfig& config, std::ostream& log) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  cmd_gen(config, log);
  AblationResult result;
  std::vector<double> seconds;
  for (const auto& objectives : ablation_ladder()) {
    ExperimentConfig rung = config;
    rung.train.flags = ObjectiveFlags::parse(objectives);
    log << "== " << objectives << "\n";
    const TrainResult trained = cmd_train(rung, log);
    seconds.push_back(trained.seconds);
    AblationRow row;
    row.objectives = objectives;
    row.corpus_hash = corpus_hash(data_dir(rung));
    const auto dir = run_dir(rung);
    const auto retrieve = cmd_eval(rung, trained.checkpoint, EvalTask::kRetrieve, dir, log);
    const auto align = cmd_eval(rung, trained.checkpoint, EvalTask::kAlign, dir, log);
    const auto transfer = cmd_eval(rung, trained.checkpoint, EvalTask::kTransfer, dir, log);
    // Re-read the structured reports so the table reflects exactly what was written.
    for (const auto& p : retrieve.content["pairs"]) {
      RetrievalScore s;
      s.accuracy = p["accuracy"].get<double>();
      s.correct = p["correct"].get<std::size_t>();
      s.total = p["total"].get<std::size_t>();
      s.candidates = p["candidates"].get<std::size_t>();
      s.ties = p["ties"].get<std::size_t>();
      row.retrieval.pairs.push_back({p["source"].get<std::string>(), p["target"].get<std::string>(), s});
    }
    for (const auto& p : align.content["pairs"]) {
      AlignmentReport a;
      a.precision = p["precision"].get<double>();
      a.recall = p["recall"].get<double>();
      a.aer = p["aer"].get<double>();
      a.predicted = p["predicted"].get<std::size_t>();
      a.gold = p["gold"].get<std::size_t>();
      a.matched = p["matched"].get<std::size_t>();
      row.alignment.push_back({p["source"].get<std::string>(), p["target"].get<std::string>(),
                               p["reorder"].get<std::string>(), a});
    }
    row.transfer.train_language = transfer.content["train_language"].get<std::string>();
    row.transfer.train_accuracy = transfer.content["train_accuracy"].get<double>();
    row.transfer.source_accuracy = transfer.content["source_accuracy"].get<double>();
    for (const auto& t : transfer.content["targets"]) {
      row.transfer.targets.push_back(
          {t["language"].get<std::string>(), t["tokens"].get<std::size_t>(), t["accuracy"].get<double>()});
    }
    row.transfer.transfer_gap = transfer.content["transfer_gap"].get<double>();
    result.rows.push_back(std::move(row));
  }

  const CorpusSet set = load_data(config);
  result.deltas = retrieval_deltas(result.rows.front().retrieval, result.rows.back().retrieval, set);

  ojson table;
  table["seed"] = config.seed;
  table["steps"] = config.train.steps;
  table["rows"] = ojson::array();
  for (const auto& row : result.rows) {
    ojson r;
    r["objectives"] = row.objectives;
    r["corpus_hash"] = row.corpus_hash;
    r["retrieval"] = ojson::object();
    for (const auto& e : row.retrieval.pairs) r["retrieval"][e.source] = e.score.accuracy;
    r["retrieval"]["mean"] = row.retrieval.mean_accuracy();
    r["aer"] = ojson::object();
    for (const auto& e : row.alignment) r["aer"][e.source] = e.report.aer;
    r["tagging"] = ojson::object();
    r["tagging"][row.transfer.train_language] = row.transfer.source_accuracy;
    for (const auto& t : row.transfer.targets) r["tagging"][t.language] = t.accuracy;
    r["tagging"]["mean_target"] = row.transfer.mean_target_accuracy();
    table["rows"].push_back(r);
  }
  table["retrieval_deltas"] = ojson::array();
  for (const auto& d : result.deltas) {
    table["retrieval_deltas"].push_back({{"language", d.language}, {"parallel_pairs", d.parallel_pairs}, {"delta", d.delta}});
  }
  result.table = config.output_dir / "ablation.json";
  write_text(result.table, table.dump(2) + "\n");

  std::ostringstream tsv;
  tsv << "objectives\tcorpus_hash\tretrieval_mean";
  for (const auto& e : result.rows.front().retrieval.pairs) tsv << "\tretrieval_" << e.source;
  for (const auto& e : result.rows.front().alignment) tsv << "\taer_" << e.source;
  tsv << "\ttag_source\ttag_target_mean\n";
  for (const auto& row : result.rows) {
    tsv << row.objectives << '\t' << row.corpus_hash << '\t' << fixed(row.retrieval.mean_accuracy());
    for (const auto& e : row.retrieval.pairs) tsv << '\t' << fixed(e.score.accuracy);
    for (const auto& e : row.alignment) tsv << '\t' << fixed(e.report.aer);
    tsv << '\t' << fixed(row.transfer.source_accuracy) << '\t' << fixed(row.transfer.mean_target_accuracy()) << '\n';
  }
  write_text(config.output_dir / "ablation.tsv", tsv.str());
  std::ostringstream deltas;
  write_deltas(deltas, result.deltas);
  write_text(config.output_dir / "deltas.tsv", deltas.str());

  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ojson timing;
  timing["total_seconds"] = result.seconds;
  timing["train_seconds"] = ojson::object();
  for (std::size_t i = 0; i < seconds.size(); ++i) timing["train_seconds"][ablation_ladder()[i]] = seconds[i];
  write_text(config.output_dir / "timing.json", timing.dump(2) + "\n");
  log << tsv.str();
  log << "table " << result.table.string() << " (" << fixed(result.seconds, 1) << " s)\n";
  return result;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return 2;
    case ErrorKind::kData:
    case ErrorKind::kInput:
    case ErrorKind::kLength:
    case ErrorKind::kIndex:
    case ErrorKind::kBatchComposition:
    case ErrorKind::kSize: return 3;
    case ErrorKind::kDivergence: return 4;
    case ErrorKind::kIo:
    case ErrorKind::kFormat: return 5;
    default: return 1;
  }
}

}  // namespace amber
