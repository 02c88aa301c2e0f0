#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "amber/corpus.hpp"
#include "amber/encoder.hpp"
#include "amber/eval.hpp"
#include "amber/trainer.hpp"

namespace amber {

struct EvalConfig {
  int tag_classes = 4;
  int probe_iterations = 300;
  double probe_lr = 0.05;
  double probe_l2 = 1e-4;
  std::size_t probe_train_sentences = 1000;
  std::string train_language = "en";
};

// Everything an experiment depends on. Seed drives corpus generation, model
// initialisation and training streams alike.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "amber-run";
  CorpusConfig corpus = CorpusConfig::desk_default();
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;

  void validate() const;
};

// Missing keys take defaults; unknown keys and type errors are config errors
// naming the offending field path (e.g. "train.steps").
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
nlohmann::ordered_json to_json(const ExperimentConfig& config);

// Command-line overrides applied on top of the config file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> objectives;
  std::optional<int> steps;
  std::optional<std::filesystem::path> out;
};
void apply_overrides(ExperimentConfig& config, const Overrides& overrides);

std::filesystem::path data_dir(const ExperimentConfig& config);
// Directory for one objective set, e.g. <out>/mlm+tlm.
std::filesystem::path run_dir(const ExperimentConfig& config);

// Each command writes config.resolved.json next to its outputs and reports
// progress lines to `log`.
void cmd_gen(const ExperimentConfig& config, std::ostream& log);

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
  std::vector<LossBreakdown> losses;
  double seconds = 0;
};
TrainResult cmd_train(const ExperimentConfig& config, std::ostream& log,
                      const std::optional<std::filesystem::path>& phase2_from = std::nullopt);

enum class EvalTask { kRetrieve, kAlign, kTransfer };
EvalTask parse_task(std::string_view name);
std::string to_string(EvalTask task);

struct EvalResult {
  std::filesystem::path report;
  nlohmann::ordered_json content;
  std::string summary;
};
// Report goes to <report_dir>/report.<task>.json.
EvalResult cmd_eval(const ExperimentConfig& config, const std::filesystem::path& checkpoint, EvalTask task,
                    const std::filesystem::path& report_dir, std::ostream& log);

struct AblationRow {
  std::string objectives;
  std::string corpus_hash;
  RetrievalReport retrieval;
  std::vector<AlignmentEntry> alignment;
  TransferReport transfer;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<LanguageDelta> deltas;  // full objective minus MLM-only retrieval
  std::filesystem::path table;
  double seconds = 0;
};

inline const std::vector<std::string>& ablation_ladder() {
  static const std::vector<std::string> ladder{"mlm", "mlm,tlm", "mlm,tlm,wa", "mlm,tlm,wa,sa"};
  return ladder;
}

// Generates the shared corpus once, then trains and evaluates each rung.
// Writes <out>/ablation.json, <out>/ablation.tsv and <out>/deltas.tsv.
AblationResult cmd_ablate(const ExperimentConfig& config, std::ostream& log);

// Process exit status for an error kind: 2 config, 3 data, 4 divergence, 5 io.
int exit_code(ErrorKind kind);

}  // namespace amber
