#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "xstream/numcore.hpp"
#include "xstream/rng.hpp"

namespace xstream {

// Cumulative signal coefficients alpha_bar[0..N] with alpha_bar[0] == 1 and
// strictly decreasing values in (0, 1].
class NoiseSchedule {
 public:
  // Cosine schedule f(k) = cos^2(((k/N + s) / (1 + s)) * pi/2), normalized by
  // f(0) and clipped from below at `floor`.
  static NoiseSchedule cosine(int steps, double s = 0.008, double floor = 1e-4);
  static NoiseSchedule from_name(std::string_view name, int steps);
  // Validates the invariants; used for hand-built schedules in tests.
  explicit NoiseSchedule(std::vector<double> alpha_bar);

  int steps() const noexcept { return static_cast<int>(alpha_bar_.size()) - 1; }
  double alpha_bar(int k) const;
  const std::vector<double>& alpha_bars() const noexcept { return alpha_bar_; }

 private:
  std::vector<double> alpha_bar_;
};

// v_k = sqrt(ab_k) v + sqrt(1 - ab_k) eps
template <typename T>
BasicTensor<T> add_noise(const BasicTensor<T>& v, int k, const BasicTensor<T>& eps, const NoiseSchedule& sched);

// vel = sqrt(ab_k) eps - sqrt(1 - ab_k) v
template <typename T>
BasicTensor<T> velocity_target(const BasicTensor<T>& v, const BasicTensor<T>& eps, int k, const NoiseSchedule& sched);

// Mean squared error over all elements.
template <typename T>
double vpred_loss(const BasicTensor<T>& pred_vel, const BasicTensor<T>& target_vel);

// x0_hat = sqrt(ab_k) v_k - sqrt(1 - ab_k) vel
template <typename T>
BasicTensor<T> predict_x0(const BasicTensor<T>& v_k, const BasicTensor<T>& pred_vel, int k, const NoiseSchedule& sched);

// eps_hat = sqrt(1 - ab_k) v_k + sqrt(ab_k) vel
template <typename T>
BasicTensor<T> predict_eps(const BasicTensor<T>& v_k, const BasicTensor<T>& pred_vel, int k, const NoiseSchedule& sched);

// Deterministic (eta = 0) DDIM update from level k to k_next < k.
template <typename T>
BasicTensor<T> ddim_step(const BasicTensor<T>& v_k, const BasicTensor<T>& pred_vel, int k, int k_next,
                         const NoiseSchedule& sched);

// Independent uniform levels in {1..N}, one per chunk.
std::vector<int> sample_chunk_noise_levels(std::size_t chunks, int steps, Rng& rng);

// Noise level of every chunk entering each denoising round. The state after
// the last row is all zeros.
struct ScheduleMatrix {
  std::size_t chunks = 0;
  int steps = 0;
  std::vector<std::vector<int>> rows;

  std::size_t rounds() const noexcept { return rows.size(); }
  int at(std::size_t r, std::size_t c) const { return rows[r][c]; }
  // Level after round r (the next row, or 0 past the end).
  int next(std::size_t r, std::size_t c) const { return r + 1 < rows.size() ? rows[r + 1][c] : 0; }
  // Chunks whose level drops during round r, ascending.
  std::vector<std::size_t> active(std::size_t r) const;
};

// entry[r][c] = clamp(N - (r - c), 0, N); chunks + N - 1 rounds.
ScheduleMatrix build_pyramid_matrix(std::size_t chunks, int steps);
// Chunk-by-chunk DDIM: chunk c occupies rounds [c*N, (c+1)*N).
ScheduleMatrix build_sequential_matrix(std::size_t chunks, int steps);

struct PassCounts {
  std::uint64_t naive;
  std::uint64_t pyramid;
  bool operator==(const PassCounts&) const = default;
};

PassCounts pass_counts(std::uint64_t chunks, std::uint64_t steps);

}  // namespace xstream
