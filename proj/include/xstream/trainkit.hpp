#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "xstream/actor.hpp"
#include "xstream/dforce.hpp"
#include "xstream/interleave.hpp"

namespace xstream {

class Config;

struct DataConfig {
  std::uint32_t height = 128;
  std::uint32_t width = 128;
  std::size_t scene_chunks = 60;
  std::uint64_t seed = 1234;
  double blob_sigma = 0.9;       // in token units
  double blob_amplitude = 2.0;
  double max_speed = 0.35;       // tokens per chunk

  void validate() const;
  // The segment layout used for training: `seg` with the data resolution.
  SegmentConfig segment(const SegmentConfig& seg) const;

  static DataConfig from_config(const Config& cfg);
};

// A moving Gaussian blob over the latent token grid. Each scene has its own
// channel signature; the blob velocity during segment s is
// max_speed * tanh(R * mean(cond_s)) with R fixed by the data seed, and the
// blob reflects off the grid borders.
class SyntheticScene {
 public:
  SyntheticScene(const SegmentConfig& seg, const DataConfig& data, std::size_t cond_dim, std::uint64_t scene_seed);

  std::size_t chunks() const noexcept { return chunks_.size(); }
  const Tensor& chunk(std::size_t i) const { return chunks_.at(i); }
  // The blob at the grid centre; chunk 0 is one velocity step away from it.
  const Tensor& identity() const noexcept { return identity_; }
  std::size_t segments() const noexcept { return conds_.size(); }
  const SegmentCond& cond(std::size_t segment) const { return conds_.at(segment); }
  // Blob centre (row, col) of chunk i.
  std::pair<double, double> position(std::size_t i) const { return positions_.at(i); }

 private:
  std::vector<Tensor> chunks_;
  std::vector<SegmentCond> conds_;
  std::vector<std::pair<double, double>> positions_;
  Tensor identity_;
};

// One training window of consecutive chunks from a scene.
struct TrainSample {
  Tensor identity;
  std::int64_t first_chunk = 0;
  std::vector<int> levels;
  std::vector<Tensor> clean;
  std::vector<Tensor> eps;
  std::vector<Tensor> noisy;
  std::vector<Tensor> target;
  std::vector<std::uint64_t> chunk_segment;  // per chunk
  std::vector<std::uint64_t> segments;        // distinct, ascending
  std::vector<SegmentCond> conds;             // parallel to segments
};

struct Batch {
  std::vector<TrainSample> samples;
};

struct BatchSpec {
  std::size_t batch = 8;
  std::size_t chunks = 4;
  ForcingMode mode = ForcingMode::diffusion;
};

// Draws `batch` windows from fresh scenes. Diffusion mode: independent levels
// in {1..N} per chunk; teacher mode: clean history and a noised last chunk.
Batch make_batch(const SegmentConfig& seg, const DataConfig& data, std::size_t cond_dim, const NoiseSchedule& sched,
                 Rng& rng, const BatchSpec& spec);

// Model inputs for a batch laid out as per-sample blocks [identity | chunks],
// with block-diagonal self and cross masks.
template <typename T>
struct BatchInputs {
  typename ActorModel<T>::Tokens tokens;
  typename ActorModel<T>::Cond cond;
  std::shared_ptr<const BoolMatrix> self_mask;
  std::shared_ptr<const BoolMatrix> cross_mask;
  BasicTensor<T> target;
  std::vector<T> row_weights;  // 0 for identity and level-0 rows
};

template <typename T>
BatchInputs<T> batch_inputs(const Batch& batch, const SegmentConfig& seg, const ActorConfig& ac);

// Weighted v-prediction loss node for a batch.
template <typename T>
Var batch_loss(ActorModel<T>& model, Graph<T>& g, const BatchInputs<T>& in);

struct AdamState {
  std::uint64_t step = 0;
  std::vector<Tensor> m;  // parallel to params().all()
  std::vector<Tensor> v;
};

struct TrainState {
  AdamState adam;
  std::vector<double> losses;  // one per completed step
  ForcingMode mode = ForcingMode::diffusion;
  std::uint64_t seed = 0;
};

struct TrainOptions {
  std::size_t steps = 2000;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch = 8;
  std::size_t chunks = 4;
  std::uint64_t seed = 0;
  ForcingMode mode = ForcingMode::diffusion;
  std::size_t log_every = 50;
  int diffusion_steps = 25;
  // Written on NaN abort (last good weights) when set.
  std::string abort_checkpoint;
  // Test hooks.
  bool fixed_batch = false;
  std::optional<std::size_t> nan_at_step;
  std::function<void(std::size_t step, double loss)> on_step;
};

// Continues from `state` (fresh when state.adam.step == 0) until
// state.adam.step == opts.steps. Throws TrainingDiverged on a non-finite loss.
void train(ActorModel<float>& model, TrainState& state, const SegmentConfig& seg, const DataConfig& data,
           const TrainOptions& opts);

// Mean of each consecutive window of `window` losses.
std::vector<double> smoothed_losses(const std::vector<double>& losses, std::size_t window);

std::vector<XtarEntry> checkpoint_entries(const ActorModel<float>& model, const TrainState& state);
void save_checkpoint(const std::string& path, const ActorModel<float>& model, const TrainState& state);
// Loads weights (dims checked against the model's config) and training state.
TrainState load_checkpoint(const std::string& path, ActorModel<float>& model);
TrainState restore_state(std::span<const XtarEntry> entries, ActorModel<float>& model);

// CSV: step,loss,mode — one row per `log_every` steps with the window mean.
std::string loss_csv(const TrainState& state, std::size_t log_every);

struct DriftOptions {
  std::size_t horizon_chunks = 60;
  std::size_t scenes = 4;
  int diffusion_steps = 25;
  ScheduleKind schedule = ScheduleKind::pyramid;
  std::uint64_t seed = 0;
};

struct DriftReport {
  std::vector<double> per_chunk;  // MSE vs ground truth, averaged over scenes
  double mean = 0.0;
  double max = 0.0;
  bool diverged = false;          // some error exceeded 1e3
};

// Autoregressive rollout on held-out scenes compared against their ground truth.
DriftReport measure_drift(const ActorModel<float>& model, const SegmentConfig& seg, const DataConfig& data,
                          const DriftOptions& opts);

}  // namespace xstream
