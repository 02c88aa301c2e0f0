#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include <json.hpp>

#include "amber/experiment.hpp"

using namespace amber;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int status = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::size_t line_count(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "amber_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Run amber_mini(const std::string& args) {
  static int counter = 0;
  const auto base = fs::temp_directory_path() / "amber_test_cli";
  fs::create_directories(base);
  const auto out = base / ("stdout." + std::to_string(counter));
  const auto err = base / ("stderr." + std::to_string(counter++));
  const std::string command =
      std::string(AMBER_MINI_BIN) + " " + args + " > '" + out.string() + "' 2> '" + err.string() + "'";
  const int raw = std::system(command.c_str());
  Run r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

json tiny_config(const fs::path& out) {
  return json{
      {"seed", 4},
      {"output_dir", out.string()},
      {"corpus",
       {{"concepts", 16},
        {"max_length", 8},
        {"heldout_pairs", 16},
        {"heldout_mono", 20},
        {"languages",
         json::array({{{"tag", "en"}, {"reorder", "identity"}, {"mono", 60}, {"parallel", 0}},
                      {{"tag", "aa"}, {"reorder", "identity"}, {"mono", 40}, {"parallel", 30}},
                      {{"tag", "bb"}, {"reorder", "adjacent-swap"}, {"mono", 20}, {"parallel", 10}}})}}},
      {"model", {{"layers", 2}, {"heads", 2}, {"hidden", 32}, {"ffn_dim", 64}, {"max_positions", 32}}},
      {"train", {{"steps", 12}, {"warmup_steps", 2}, {"batch_size", 8}, {"checkpoint_every", 5}}},
      {"eval", {{"probe_train_sentences", 60}, {"probe_iterations", 50}}},
  };
}

fs::path write_config(const fs::path& dir, const json& j, const std::string& name = "config.json") {
  const auto path = dir / name;
  std::ofstream os(path);
  os << j.dump(2);
  return path;
}

void expect_error(const Run& r, int status, const std::string& kind, const std::string& fragment = "") {
  CHECK(r.status == status);
  CHECK(r.err.rfind("error[" + kind + "]: ", 0) == 0);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
  if (!fragment.empty()) CHECK(r.err.find(fragment) != std::string::npos);
}

// Every word embedding is a fixed vector of its concept; everything else is
// silent, so translations get identical sentence embeddings.
Encoder<float> concept_model(const ExperimentConfig& config, const CorpusSet& set) {
  Encoder<float> model(config.model, 1);
  for (auto& p : model.parameters()) std::fill(p.value.data.begin(), p.value.data.end(), 0.0f);
  for (auto& p : model.parameters()) {
    if (p.name.find("gain") != std::string::npos) std::fill(p.value.data.begin(), p.value.data.end(), 1.0f);
  }
  std::mt19937_64 rng(3);
  std::normal_distribution<float> normal;
  const auto hidden = static_cast<std::size_t>(config.model.hidden);
  std::vector<std::vector<float>> concept_vectors(static_cast<std::size_t>(set.vocab.concepts()),
                                                  std::vector<float>(hidden));
  for (auto& v : concept_vectors)
    for (auto& x : v) x = normal(rng);
  auto& embed = model.parameter("embed.token").value;
  for (int id = kFirstWordId; id < set.vocab.size(); ++id) {
    const auto& v = concept_vectors[static_cast<std::size_t>(set.concept_of(id))];
    for (std::size_t c = 0; c < hidden; ++c) embed(static_cast<std::size_t>(id), c) = v[c];
  }
  return model;
}

// Top-layer queries and keys read only the position embedding, so y_i
// attends to the x word at the same (restarted) position.
Encoder<float> diagonal_model(const ExperimentConfig& config) {
  Encoder<float> model(config.model, 1);
  for (auto& p : model.parameters()) {
    const bool gain = p.name.find("gain") != std::string::npos;
    std::fill(p.value.data.begin(), p.value.data.end(), gain ? 1.0f : 0.0f);
  }
  auto& pos = model.parameter("embed.position").value;
  const std::size_t hidden = pos.cols();
  for (std::size_t r = 0; r < pos.rows(); ++r) pos(r, r % hidden) = 8.0f;
  const std::string top = "layer" + std::to_string(config.model.layers - 1) + ".attn.";
  for (const char* name : {"wq", "wk"}) {
    auto& w = model.parameter(top + name).value;
    for (std::size_t d = 0; d < hidden; ++d) w(d, d) = 4.0f;
  }
  return model;
}

void save_model(const Encoder<float>& model, const fs::path& path) {
  save_checkpoint(TrainingState<float>(model, 1), path);
}

}  // namespace

TEST_CASE("config errors name the field path") {
  const auto dir = scratch("config");
  auto j = tiny_config(dir / "run");
  j["train"]["steps"] = "many";
  expect_error(amber_mini("gen --config " + write_config(dir, j).string()), 2, "config", "train.steps");

  j = tiny_config(dir / "run");
  j["model"]["hiddn"] = 32;
  expect_error(amber_mini("gen --config " + write_config(dir, j).string()), 2, "config", "model.hiddn");

  j = tiny_config(dir / "run");
  j["corpus"]["languages"][1]["reorder"] = "shuffle";
  expect_error(amber_mini("gen --config " + write_config(dir, j).string()), 2, "config", "corpus.languages[1]");

  j = tiny_config(dir / "run");
  j["train"]["warmup_steps"] = 50;
  expect_error(amber_mini("train --config " + write_config(dir, j).string()), 2, "config", "warmup");

  expect_error(amber_mini("gen"), 2, "config");
  expect_error(amber_mini("gen --config " + (dir / "absent.json").string()), 5, "io");

  std::ofstream(dir / "broken.json") << "{ \"seed\": ";
  expect_error(amber_mini("gen --config " + (dir / "broken.json").string()), 2, "config");
}

TEST_CASE("config parsing defaults and round trip") {
  const auto config = parse_experiment_config(json::object());
  CHECK(config.corpus.languages.size() == 4);
  CHECK(config.model.vocab_size == 4 + 64 * 4);
  CHECK(config.train.seed == config.seed);
  const auto again = parse_experiment_config(json::parse(to_json(config).dump()));
  CHECK(to_json(again).dump() == to_json(config).dump());

  ExperimentConfig c = parse_experiment_config(tiny_config("/tmp/x"));
  Overrides o;
  o.seed = 9;
  o.objectives = "mlm,sa";
  o.steps = 40;
  apply_overrides(c, o);
  CHECK(c.seed == 9);
  CHECK(c.train.seed == 9);
  CHECK(c.train.flags.str() == "mlm,sa");
  CHECK(c.train.steps == 40);
  CHECK(run_dir(c).filename() == "mlm+sa");
}

TEST_CASE("gen writes the configured corpora") {
  const auto dir = scratch("gen");
  json j = tiny_config(dir / "run");
  j["corpus"]["languages"] = json::array({{{"tag", "en"}, {"mono", 2000}, {"parallel", 0}},
                                          {{"tag", "l1"}, {"mono", 2000}, {"parallel", 1000}},
                                          {{"tag", "l2"}, {"reorder", "adjacent-swap"}, {"mono", 2000}, {"parallel", 1000}},
                                          {{"tag", "l3"}, {"mono", 2000}, {"parallel", 1000}}});
  const auto r = amber_mini("gen --config " + write_config(dir, j).string());
  REQUIRE(r.status == 0);
  const auto data = dir / "run" / "data";
  std::size_t mono_files = 0;
  for (const auto& e : fs::directory_iterator(data)) {
    const auto name = e.path().filename().string();
    if (name.rfind("mono.", 0) == 0) {
      ++mono_files;
      CHECK(line_count(e.path()) == 2000);
    }
  }
  CHECK(mono_files == 4);
  CHECK(line_count(data / "para.l2-en.src.txt") == 1000);
  CHECK(line_count(data / "para.l2-en.align") == 1000);
  CHECK(r.out.find("l1: 2000 monolingual") != std::string::npos);
  CHECK(fs::exists(dir / "run" / "config.resolved.json"));

  // Skewed sizes.
  j["corpus"]["languages"][1]["mono"] = 200;
  j["corpus"]["languages"][2]["mono"] = 4000;
  j["corpus"]["languages"][3]["parallel"] = 50;
  j["output_dir"] = (dir / "skewed").string();
  REQUIRE(amber_mini("gen --config " + write_config(dir, j).string()).status == 0);
  CHECK(line_count(dir / "skewed" / "data" / "mono.l1.txt") == 200);
  CHECK(line_count(dir / "skewed" / "data" / "mono.l2.txt") == 4000);
  CHECK(line_count(dir / "skewed" / "data" / "para.l3-en.tgt.txt") == 50);
}

TEST_CASE("gen is byte-identical across runs") {
  const auto dir = scratch("gen-repeat");
  const auto a = write_config(dir, tiny_config(dir / "a"), "a.json");
  const auto b = write_config(dir, tiny_config(dir / "b"), "b.json");
  REQUIRE(amber_mini("gen --config " + a.string()).status == 0);
  REQUIRE(amber_mini("gen --config " + b.string()).status == 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "a" / "data")) {
    CHECK(slurp(e.path()) == slurp(dir / "b" / "data" / e.path().filename()));
    ++files;
  }
  CHECK(files > 5);
  REQUIRE(amber_mini("gen --config " + a.string() + " --seed 5 --out " + (dir / "c").string()).status == 0);
  CHECK(corpus_hash(dir / "c" / "data") != corpus_hash(dir / "a" / "data"));
}

TEST_CASE("train writes checkpoints and metrics") {
  const auto dir = scratch("train");
  const auto config = write_config(dir, tiny_config(dir / "run"));
  expect_error(amber_mini("train --config " + config.string()), 3, "data", "gen");
  REQUIRE(amber_mini("gen --config " + config.string()).status == 0);

  const auto r = amber_mini("train --config " + config.string() + " --objectives mlm");
  REQUIRE(r.status == 0);
  const auto run = dir / "run" / "mlm";
  CHECK(fs::exists(run / "checkpoint.bin"));
  CHECK(fs::exists(run / "checkpoint-5.bin"));
  CHECK(fs::exists(run / "checkpoint-10.bin"));
  CHECK(fs::exists(run / "config.resolved.json"));
  std::istringstream metrics(slurp(run / "metrics.jsonl"));
  std::string line;
  int steps = 0;
  while (std::getline(metrics, line)) {
    const auto rec = json::parse(line);
    CHECK(rec["step"] == steps++);
    CHECK(rec["sa"].get<double>() == 0.0);
    CHECK(rec["wa"].get<double>() == 0.0);
    CHECK(rec["mlm"].get<double>() > 0.0);
  }
  CHECK(steps == 12);
  CHECK(load_checkpoint<float>(run / "checkpoint.bin").step == 12);
}

TEST_CASE("zero steps checkpoints the initialisation") {
  const auto dir = scratch("zero");
  const auto config = write_config(dir, tiny_config(dir / "run"));
  REQUIRE(amber_mini("gen --config " + config.string()).status == 0);
  REQUIRE(amber_mini("train --config " + config.string() + " --steps 0").status == 0);
  const auto state = load_checkpoint<float>(dir / "run" / "mlm+tlm+wa+sa" / "checkpoint.bin");
  CHECK(state.step == 0);
  const auto parsed = load_experiment_config(config);
  const Encoder<float> fresh(parsed.model, parsed.seed);
  for (std::size_t k = 0; k < fresh.parameters().size(); ++k) {
    CHECK(state.model.parameters()[k].value.data == fresh.parameters()[k].value.data);
  }
  CHECK(slurp(dir / "run" / "mlm+tlm+wa+sa" / "metrics.jsonl").empty());
}

TEST_CASE("divergence exits with its own code") {
  const auto dir = scratch("diverge");
  auto j = tiny_config(dir / "run");
  j["train"]["peak_lr"] = 1e30;
  j["train"]["steps"] = 30;
  const auto config = write_config(dir, j);
  REQUIRE(amber_mini("gen --config " + config.string()).status == 0);
  expect_error(amber_mini("train --config " + config.string()), 4, "divergence", "step");
}

TEST_CASE("eval reports") {
  const auto dir = scratch("eval");
  const auto config_path = write_config(dir, tiny_config(dir / "run"));
  REQUIRE(amber_mini("gen --config " + config_path.string()).status == 0);
  const auto config = load_experiment_config(config_path);
  const auto set = load_corpus_set(data_dir(config));

  save_model(concept_model(config, set), dir / "concept.bin");
  auto r = amber_mini("eval --config " + config_path.string() + " --checkpoint " + (dir / "concept.bin").string() +
                      " --task retrieve");
  REQUIRE(r.status == 0);
  CHECK(std::count(r.out.begin(), r.out.end(), '\n') >= 1);
  auto report = json::parse(slurp(dir / "report.retrieve.json"));
  CHECK(report["task"] == "retrieve");
  for (const auto& p : report["pairs"]) CHECK(p["accuracy"].get<double>() == 1.0);

  save_model(diagonal_model(config), dir / "diagonal.bin");
  r = amber_mini("eval --config " + config_path.string() + " --checkpoint " + (dir / "diagonal.bin").string() +
                 " --task align --out " + (dir / "diag").string());
  REQUIRE(r.status == 0);
  report = json::parse(slurp(dir / "diag" / "report.align.json"));
  bool saw_identity = false;
  for (const auto& p : report["pairs"]) {
    if (p["reorder"] == "identity") {
      saw_identity = true;
      CHECK(p["aer"].get<double>() == 0.0);
    }
  }
  CHECK(saw_identity);

  r = amber_mini("eval --config " + config_path.string() + " --checkpoint " + (dir / "concept.bin").string() +
                 " --task transfer");
  REQUIRE(r.status == 0);
  report = json::parse(slurp(dir / "report.transfer.json"));
  CHECK(report["task"] == "transfer");
  CHECK(report["train_language"] == "en");
  for (const char* key : {"train_accuracy", "source_accuracy", "transfer_gap"}) CHECK(report[key].is_number());
  REQUIRE(report["targets"].size() == 2);
  double mean = 0;
  for (const auto& t : report["targets"]) {
    CHECK(t["language"].is_string());
    CHECK(t["tokens"].get<std::size_t>() > 0);
    CHECK(t["accuracy"].get<double>() >= 0.0);
    CHECK(t["accuracy"].get<double>() <= 1.0);
    mean += t["accuracy"].get<double>() / 2.0;
  }
  CHECK(report["transfer_gap"].get<double>() ==
        doctest::Approx(report["source_accuracy"].get<double>() - mean).epsilon(1e-9));

  expect_error(amber_mini("eval --config " + config_path.string() + " --checkpoint " +
                          (dir / "nothing.bin").string() + " --task retrieve"),
               5, "io");
  expect_error(amber_mini("eval --config " + config_path.string() + " --checkpoint " +
                          (dir / "concept.bin").string() + " --task parse"),
               2, "config", "parse");
  std::ofstream(dir / "junk.bin") << "not a checkpoint at all";
  expect_error(amber_mini("eval --config " + config_path.string() + " --checkpoint " + (dir / "junk.bin").string() +
                          " --task retrieve"),
               5, "format", "offset");
}

TEST_CASE("pipeline is byte-identical across runs") {
  const auto dir = scratch("pipeline");
  for (const char* name : {"a", "b"}) {
    const auto config = write_config(dir, tiny_config(dir / name), std::string(name) + ".json");
    REQUIRE(amber_mini("gen --config " + config.string()).status == 0);
    REQUIRE(amber_mini("train --config " + config.string() + " --objectives mlm,tlm,wa,sa").status == 0);
    const auto ckpt = dir / name / "mlm+tlm+wa+sa" / "checkpoint.bin";
    for (const char* task : {"retrieve", "align", "transfer"}) {
      REQUIRE(amber_mini("eval --config " + config.string() + " --checkpoint " + ckpt.string() + " --task " + task)
                  .status == 0);
    }
  }
  const auto a = dir / "a" / "mlm+tlm+wa+sa", b = dir / "b" / "mlm+tlm+wa+sa";
  CHECK(slurp(a / "checkpoint.bin") == slurp(b / "checkpoint.bin"));
  for (const char* f : {"report.retrieve.json", "report.align.json", "report.transfer.json"}) {
    CHECK(!slurp(a / f).empty());
    CHECK(slurp(a / f) == slurp(b / f));
  }
}

TEST_CASE("ablate runs the four-rung ladder on one corpus") {
  const auto dir = scratch("ablate");
  auto j = tiny_config(dir / "run");
  j["train"]["steps"] = 6;
  j["train"]["checkpoint_every"] = 0;
  const auto r = amber_mini("ablate --config " + write_config(dir, j).string());
  REQUIRE(r.status == 0);
  const auto table = json::parse(slurp(dir / "run" / "ablation.json"));
  REQUIRE(table["rows"].size() == 4);
  const std::string hash = table["rows"][0]["corpus_hash"];
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(table["rows"][k]["objectives"] == ablation_ladder()[k]);
    CHECK(table["rows"][k]["corpus_hash"] == hash);
  }
  CHECK(line_count(dir / "run" / "ablation.tsv") == 5);
  CHECK(line_count(dir / "run" / "deltas.tsv") == 3);
  CHECK(fs::exists(dir / "run" / "timing.json"));
}
