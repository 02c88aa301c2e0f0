#include "amber/trainer.hpp"

#include <json.hpp>

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace amber {

void TrainConfig::validate() const {
  auto bad = [](const std::string& field, const std::string& why) {
    fail(ErrorKind::kConfig, "train." + field + ": " + why);
  };
  if (steps < 0) bad("steps", "must not be negative");
  if (warmup_steps < 0) bad("warmup_steps", "must not be negative");
  if (steps > 0 && warmup_steps >= steps) bad("warmup_steps", "must be below steps");
  if (!(peak_lr > 0)) bad("peak_lr", "must be positive");
  if (batch_size < 2) bad("batch_size", "must be at least 2");
  if (!(beta1 >= 0 && beta1 < 1)) bad("beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) bad("beta2", "must lie in [0, 1)");
  if (!(adam_eps > 0)) bad("adam_eps", "must be positive");
  if (!(clip_norm > 0)) bad("clip_norm", "must be positive");
  if (!(mask_rate > 0 && mask_rate <= 1)) bad("mask_rate", "must lie in (0, 1]");
  if (smoothing < 0) bad("smoothing", "must not be negative");
  if (!(parallel_fraction >= 0 && parallel_fraction <= 1)) bad("parallel_fraction", "must lie in [0, 1]");
  if (checkpoint_every < 0) bad("checkpoint_every", "must not be negative");
  if (!flags.mlm && !flags.tlm && !flags.wa && !flags.sa) bad("objectives", "at least one objective is required");
  const bool uses_parallel = flags.tlm || flags.wa || flags.sa;
  if (flags.sa && std::llround(batch_size * parallel_fraction) < 2) {
    bad("parallel_fraction", "sentence alignment needs at least 2 parallel pairs per batch");
  }
  if (uses_parallel && parallel_fraction == 0 && flags.mlm) {
    bad("parallel_fraction", "parallel objectives enabled but no parallel pairs are sampled");
  }
}

double lr_schedule(long step, long warmup, long total, double peak) {
  if (warmup >= total) {
    fail(ErrorKind::kConfig, "lr_schedule: warmup " + std::to_string(warmup) + " must be below total " +
                                 std::to_string(total));
  }
  if (step < 0 || step > total) fail(ErrorKind::kInput, "lr_schedule: step outside [0, total]");
  if (step <= warmup) return warmup == 0 ? peak : peak * static_cast<double>(step) / static_cast<double>(warmup);
  return peak * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

template <typename T>
TrainingState<T>::TrainingState(Encoder<T> m, std::uint64_t s) : model(std::move(m)), seed(s) {
  for (const auto& p : model.parameters()) {
    adam.first.emplace_back(p.value.shape);
    adam.second.emplace_back(p.value.shape);
  }
}

namespace {

std::string describe(const LossBreakdown& b) {
  std::ostringstream os;
  os << "mlm=" << b.mlm << " tlm=" << b.tlm << " sa=" << b.sa << " wa=" << b.wa << " total=" << b.total;
  return os.str();
}

}  // namespace

DivergenceError::DivergenceError(long step, LossBreakdown breakdown)
    : Error(ErrorKind::kDivergence, "non-finite loss at step " + std::to_string(step) + " (" + describe(breakdown) + ")"),
      step_(step),
      breakdown_(breakdown) {}

StepRngs::StepRngs(std::uint64_t seed, long step) {
  const auto lo = static_cast<std::uint32_t>(seed & 0xffffffffu);
  const auto hi = static_cast<std::uint32_t>(seed >> 32);
  const auto st = static_cast<std::uint32_t>(step);
  std::seed_seq sb{lo, hi, st, 1u};
  std::seed_seq sm{lo, hi, st, 2u};
  std::seed_seq sd{lo, hi, st, 3u};
  batch.seed(sb);
  masking.seed(sm);
  dropout.seed(sd);
}

template <typename T>
LossBreakdown train_step(TrainingState<T>& state, const Batch& batch, const TrainConfig& config, StepRngs& rngs) {
  auto& params = state.model.parameters();
  for (auto& p : params) p.zero_grad();
  Tape<T> tape;
  LossOptions options{config.flags, config.weights, config.mask_rate};
  auto loss = combined_loss(state.model, tape, batch, options, rngs.masking,
                            state.model.config().dropout > 0 ? &rngs.dropout : nullptr);
  const LossBreakdown& lb = loss.breakdown;
  if (!std::isfinite(lb.total) || !std::isfinite(lb.mlm) || !std::isfinite(lb.tlm) || !std::isfinite(lb.sa) ||
      !std::isfinite(lb.wa)) {
    throw DivergenceError(state.step, lb);
  }
  tape.backward(loss.total);

  double norm_sq = 0;
  for (const auto& p : params)
    for (T g : p.grad.data) norm_sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(norm_sq);
  if (!std::isfinite(norm)) throw DivergenceError(state.step, lb);
  if (norm > config.clip_norm) {
    const T factor = static_cast<T>(config.clip_norm / norm);
    for (auto& p : params)
      for (T& g : p.grad.data) g *= factor;
  }

  const double lr = lr_schedule(state.step, config.warmup_steps, config.steps, config.peak_lr);
  const double t = static_cast<double>(state.step + 1);
  const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
  const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(config.beta1, t)));
  const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(config.beta2, t)));
  const T step_size = static_cast<T>(lr);
  const T eps = static_cast<T>(config.adam_eps);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& value = params[k].value.data;
    const auto& grad = params[k].grad.data;
    auto& m = state.adam.first[k].data;
    auto& v = state.adam.second[k].data;
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
      v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
      value[i] -= step_size * (m[i] * c1) / (std::sqrt(v[i] * c2) + eps);
    }
  }
  ++state.step;
  return lb;
}

template <typename T>
std::vector<LossBreakdown> train(TrainingState<T>& state, const TrainConfig& config,
                                 std::span<const MonoCorpus> mono, std::span<const ParallelCorpus> parallel,
                                 const TrainHooks& hooks) {
  config.validate();
  const bool uses_parallel = config.flags.tlm || config.flags.wa || config.flags.sa;
  const double fraction = uses_parallel ? (config.flags.mlm ? config.parallel_fraction : 1.0) : 0.0;
  std::span<const MonoCorpus> mono_used = config.flags.mlm ? mono : std::span<const MonoCorpus>{};
  std::vector<LossBreakdown> log;
  while (state.step < config.steps) {
    const auto start = std::chrono::steady_clock::now();
    StepRngs rngs(state.seed, state.step);
    Batch batch = sample_batch(mono_used, uses_parallel ? parallel : std::span<const ParallelCorpus>{},
                               static_cast<std::size_t>(config.batch_size), config.smoothing, fraction, rngs.batch);
    const long step = state.step;
    const double lr = lr_schedule(step, config.warmup_steps, config.steps, config.peak_lr);
    LossBreakdown lb = train_step(state, batch, config, rngs);
    log.push_back(lb);
    if (hooks.metrics) {
      const double wall =
          hooks.record_wall_time
              ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count()
              : 0.0;
      nlohmann::ordered_json rec;
      rec["step"] = step;
      rec["lr"] = lr;
      rec["mlm"] = lb.mlm;
      rec["tlm"] = lb.tlm;
      rec["sa"] = lb.sa;
      rec["wa"] = lb.wa;
      rec["total"] = lb.total;
      rec["wall_ms"] = std::round(wall * 1000.0) / 1000.0;
      *hooks.metrics << rec.dump() << '\n';
    }
    if (hooks.on_checkpoint && config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 &&
        state.step < config.steps) {
      hooks.on_checkpoint(state.step);
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'A', 'M', 'B', 'R', 'C', 'K', 'P', 'T'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xffu);
  os.write(reinterpret_cast<const char*>(b), 4);
}

template <typename T>
void put_blob(std::ostream& os, const Tensor<T>& t) {
  std::vector<unsigned char> bytes(t.size() * 4);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(t.data[i]));
    for (int b = 0; b < 4; ++b) bytes[i * 4 + static_cast<std::size_t>(b)] = static_cast<unsigned char>((bits >> (8 * b)) & 0xffu);
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

class Reader {
 public:
  Reader(std::vector<char> bytes, std::string name) : bytes_(std::move(bytes)), name_(std::move(name)) {}

  std::size_t offset() const { return at_; }

  void expect(std::size_t n, const char* what) const {
    if (bytes_.size() - at_ < n) {
      fail(ErrorKind::kFormat, name_ + ": truncated at offset " + std::to_string(at_) + " while reading " + what);
    }
  }

  std::string_view take(std::size_t n, const char* what) {
    expect(n, what);
    std::string_view out(bytes_.data() + at_, n);
    at_ += n;
    return out;
  }

  std::uint32_t u32(const char* what) {
    auto s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[static_cast<std::size_t>(i)])) << (8 * i);
    return v;
  }

  template <typename T>
  void blob(Tensor<T>& t, const char* what) {
    auto s = take(t.size() * 4, what);
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[i * 4 + static_cast<std::size_t>(b)])) << (8 * b);
      }
      t.data[i] = static_cast<T>(std::bit_cast<float>(bits));
    }
  }

  bool done() const { return at_ == bytes_.size(); }

 private:
  std::vector<char> bytes_;
  std::string name_;
  std::size_t at_ = 0;
};

nlohmann::ordered_json model_config_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["hidden"] = c.hidden;
  j["ffn_dim"] = c.ffn_dim;
  j["max_positions"] = c.max_positions;
  j["dropout"] = c.dropout;
  j["precision"] = c.precision == Precision::kTrain32 ? "train32" : "test64";
  j["init_std"] = c.init_std;
  j["ln_eps"] = c.ln_eps;
  return j;
}

ModelConfig model_config_from(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.max_positions = j.at("max_positions").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.precision = j.at("precision").get<std::string>() == "test64" ? Precision::kTest64 : Precision::kTrain32;
  c.init_std = j.at("init_std").get<double>();
  c.ln_eps = j.at("ln_eps").get<double>();
  return c;
}

}  // namespace

template <typename T>
void save_checkpoint(const TrainingState<T>& state, const std::filesystem::path& path) {
  nlohmann::ordered_json header;
  header["model"] = model_config_json(state.model.config());
  header["step"] = state.step;
  header["rng"] = {{"kind", "seed_seq(seed, step, stream)"}, {"seed", state.seed}};
  header["parameters"] = nlohmann::ordered_json::array();
  for (const auto& p : state.model.parameters()) {
    header["parameters"].push_back({{"name", p.name}, {"shape", p.value.shape}});
  }
  const std::string text = header.dump();
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) fail(ErrorKind::kIo, "cannot write checkpoint " + tmp.string());
    os.write(kMagic, sizeof(kMagic));
    put_u32(os, kCheckpointVersion);
    put_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : state.model.parameters()) put_blob(os, p.value);
    for (const auto& m : state.adam.first) put_blob(os, m);
    for (const auto& v : state.adam.second) put_blob(os, v);
    if (!os) fail(ErrorKind::kIo, "write failed for checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::kIo, "cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

template <typename T>
TrainingState<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::kIo, "cannot read checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path.string());
  if (r.take(sizeof(kMagic), "magic") != std::string_view(kMagic, sizeof(kMagic))) {
    fail(ErrorKind::kFormat, path.string() + ": bad magic at offset 0");
  }
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    fail(ErrorKind::kFormat, path.string() + ": unsupported version " + std::to_string(version) + " at offset " +
                                 std::to_string(version_at));
  }
  const std::uint32_t header_len = r.u32("header length");
  const std::size_t header_at = r.offset();
  nlohmann::json header;
  ModelConfig config;
  long step = 0;
  std::uint64_t seed = 0;
  try {
    header = nlohmann::json::parse(r.take(header_len, "header"));
    config = model_config_from(header.at("model"));
    step = header.at("step").get<long>();
    seed = header.at("rng").at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, path.string() + ": malformed header at offset " + std::to_string(header_at) + ": " + e.what());
  }
  TrainingState<T> state(Encoder<T>(config, 0), seed);
  state.step = step;
  auto& params = state.model.parameters();
  const auto& listed = header.at("parameters");
  if (listed.size() != params.size()) {
    fail(ErrorKind::kFormat, path.string() + ": header lists " + std::to_string(listed.size()) + " parameters, model has " +
                                 std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (listed[k].at("name").get<std::string>() != params[k].name ||
        listed[k].at("shape").get<Shape>() != params[k].value.shape) {
      fail(ErrorKind::kFormat, path.string() + ": parameter " + std::to_string(k) + " does not match the model layout");
    }
  }
  for (auto& p : params) r.blob(p.value, "parameters");
  for (auto& m : state.adam.first) r.blob(m, "adam first moments");
  for (auto& v : state.adam.second) r.blob(v, "adam second moments");
  if (!r.done()) fail(ErrorKind::kFormat, path.string() + ": trailing bytes at offset " + std::to_string(r.offset()));
  return state;
}

#define AMBER_INSTANTIATE(T)                                                                                     \
  template struct TrainingState<T>;                                                                              \
  template LossBreakdown train_step<T>(TrainingState<T>&, const Batch&, const TrainConfig&, StepRngs&);          \
  template std::vector<LossBreakdown> train<T>(TrainingState<T>&, const TrainConfig&, std::span<const MonoCorpus>, \
                                               std::span<const ParallelCorpus>, const TrainHooks&);              \
  template void save_checkpoint<T>(const TrainingState<T>&, const std::filesystem::path&);                       \
  template TrainingState<T> load_checkpoint<T>(const std::filesystem::path&);

AMBER_INSTANTIATE(float)
AMBER_INSTANTIATE(double)

#undef AMBER_INSTANTIATE

}  // namespace amber
