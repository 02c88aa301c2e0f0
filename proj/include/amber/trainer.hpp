#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "amber/corpus.hpp"
#include "amber/encoder.hpp"
#include "amber/objectives.hpp"

namespace amber {

struct TrainConfig {
  int steps = 3000;
  int warmup_steps = 300;
  double peak_lr = 1e-3;
  int batch_size = 32;
  ObjectiveFlags flags{true, true, true, true};
  ObjectiveWeights weights;
  std::uint64_t seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // No clipping when infinite.
  double clip_norm = std::numeric_limits<double>::infinity();
  double mask_rate = 0.15;
  double smoothing = 0.7;
  double parallel_fraction = 0.5;
  int checkpoint_every = 0;

  void validate() const;
};

// Linear warmup from 0 to peak over [0, warmup], then linear decay to 0 at total.
double lr_schedule(long step, long warmup, long total, double peak);

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> first;
  std::vector<Tensor<T>> second;
};

template <typename T>
struct TrainingState {
  Encoder<T> model;
  AdamState<T> adam;
  long step = 0;
  std::uint64_t seed = 1;

  TrainingState(Encoder<T> m, std::uint64_t s);
};

class DivergenceError : public Error {
 public:
  DivergenceError(long step, LossBreakdown breakdown);
  long step() const { return step_; }
  const LossBreakdown& breakdown() const { return breakdown_; }

 private:
  long step_;
  LossBreakdown breakdown_;
};

// Independent generators for one step, derived from (seed, step) so a resumed
// run draws exactly what an uninterrupted one would.
struct StepRngs {
  std::mt19937_64 batch;
  std::mt19937_64 masking;
  std::mt19937_64 dropout;

  StepRngs(std::uint64_t seed, long step);
};

// One optimisation step at state.step (which is then incremented).
template <typename T>
LossBreakdown train_step(TrainingState<T>& state, const Batch& batch, const TrainConfig& config, StepRngs& rngs);

struct TrainHooks {
  std::ostream* metrics = nullptr;  // one JSON record per step
  std::function<void(long step)> on_checkpoint;
  bool record_wall_time = true;
};

// Runs steps state.step .. config.steps-1, sampling batches from the corpora.
template <typename T>
std::vector<LossBreakdown> train(TrainingState<T>& state, const TrainConfig& config,
                                 std::span<const MonoCorpus> mono, std::span<const ParallelCorpus> parallel,
                                 const TrainHooks& hooks = {});

// Binary layout: "AMBRCKPT", u32 version, u32 header length, JSON header,
// then little-endian float32 blobs (parameters, Adam first moments, Adam
// second moments) in parameter declaration order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const TrainingState<T>& state, const std::filesystem::path& path);
template <typename T>
TrainingState<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace amber
