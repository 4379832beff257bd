#include "xstream/dforce.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace xstream {

NoiseSchedule::NoiseSchedule(std::vector<double> alpha_bar) : alpha_bar_(std::move(alpha_bar)) {
  if (alpha_bar_.size() < 2) throw ConfigError("noise schedule needs at least one step");
  if (alpha_bar_[0] != 1.0) throw ConfigError("noise schedule: alpha_bar[0] must be 1");
  for (std::size_t k = 1; k < alpha_bar_.size(); ++k) {
    if (!(alpha_bar_[k] > 0.0 && alpha_bar_[k] <= 1.0))
      throw ConfigError("noise schedule: alpha_bar[" + std::to_string(k) + "] outside (0, 1]");
    if (!(alpha_bar_[k] < alpha_bar_[k - 1]))
      throw ConfigError("noise schedule: alpha_bar must be strictly decreasing at step " + std::to_string(k));
  }
}

NoiseSchedule NoiseSchedule::cosine(int steps, double s, double floor) {
  if (steps < 1) throw ConfigError("diffusion.steps must be >= 1");
  auto f = [&](int k) {
    const double c = std::cos((static_cast<double>(k) / steps + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  const double f0 = f(0);
  std::vector<double> ab(steps + 1);
  ab[0] = 1.0;
  for (int k = 1; k <= steps; ++k) ab[k] = std::max(f(k) / f0, floor);
  return NoiseSchedule(std::move(ab));
}

NoiseSchedule NoiseSchedule::from_name(std::string_view name, int steps) {
  if (name == "cosine") return cosine(steps);
  throw ConfigError("unknown diffusion.schedule '" + std::string(name) + "'");
}

double NoiseSchedule::alpha_bar(int k) const {
  if (k < 0 || k > steps())
    throw StepError("diffusion step " + std::to_string(k) + " outside [0, " + std::to_string(steps()) + "]");
  return alpha_bar_[static_cast<std::size_t>(k)];
}

namespace {

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// out = ca * a + cb * b, coefficients kept in double until the final cast.
template <typename T>
BasicTensor<T> combine(const BasicTensor<T>& a, double ca, const BasicTensor<T>& b, double cb) {
  BasicTensor<T> out(a.shape());
  auto o = out.data();
  auto ad = a.data();
  auto bd = b.data();
  const T fa = static_cast<T>(ca), fb = static_cast<T>(cb);
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fa * ad[i] + fb * bd[i];
  return out;
}

}  // namespace

template <typename T>
BasicTensor<T> add_noise(const BasicTensor<T>& v, int k, const BasicTensor<T>& eps, const NoiseSchedule& sched) {
  require_same_shape(v, eps, "add_noise");
  const double ab = sched.alpha_bar(k);
  if (k == 0) return v;
  return combine(v, std::sqrt(ab), eps, std::sqrt(1.0 - ab));
}

template <typename T>
BasicTensor<T> velocity_target(const BasicTensor<T>& v, const BasicTensor<T>& eps, int k, const NoiseSchedule& sched) {
  require_same_shape(v, eps, "velocity_target");
  const double ab = sched.alpha_bar(k);
  return combine(eps, std::sqrt(ab), v, -std::sqrt(1.0 - ab));
}

template <typename T>
double vpred_loss(const BasicTensor<T>& pred_vel, const BasicTensor<T>& target_vel) {
  require_same_shape(pred_vel, target_vel, "vpred_loss");
  double s = 0.0;
  auto p = pred_vel.data();
  auto t = target_vel.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = static_cast<double>(p[i]) - static_cast<double>(t[i]);
    s += d * d;
  }
  return s / static_cast<double>(p.size());
}

template <typename T>
BasicTensor<T> predict_x0(const BasicTensor<T>& v_k, const BasicTensor<T>& pred_vel, int k, const NoiseSchedule& sched) {
  require_same_shape(v_k, pred_vel, "predict_x0");
  const double ab = sched.alpha_bar(k);
  return combine(v_k, std::sqrt(ab), pred_vel, -std::sqrt(1.0 - ab));
}

template <typename T>
BasicTensor<T> predict_eps(const BasicTensor<T>& v_k, const BasicTensor<T>& pred_vel, int k,
                           const NoiseSchedule& sched) {
  require_same_shape(v_k, pred_vel, "predict_eps");
  const double ab = sched.alpha_bar(k);
  return combine(v_k, std::sqrt(1.0 - ab), pred_vel, std::sqrt(ab));
}

template <typename T>
BasicTensor<T> ddim_step(const BasicTensor<T>& v_k, const BasicTensor<T>& pred_vel, int k, int k_next,
                         const NoiseSchedule& sched) {
  if (!(0 <= k_next && k_next < k && k <= sched.steps()))
    throw StepError("ddim_step requires 0 <= k_next < k <= N, got k=" + std::to_string(k) +
                    " k_next=" + std::to_string(k_next));
  require_same_shape(v_k, pred_vel, "ddim_step");
  // Fold x0_hat and eps_hat into one affine map of (v_k, vel) so the update
  // runs in double per element.
  const double a = std::sqrt(sched.alpha_bar(k)), b = std::sqrt(1.0 - sched.alpha_bar(k));
  const double an = std::sqrt(sched.alpha_bar(k_next)), bn = std::sqrt(1.0 - sched.alpha_bar(k_next));
  BasicTensor<T> out(v_k.shape());
  auto o = out.data();
  auto x = v_k.data();
  auto vel = pred_vel.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double xi = x[i], vi = vel[i];
    const double x0 = a * xi - b * vi;
    const double e = b * xi + a * vi;
    o[i] = static_cast<T>(an * x0 + bn * e);
  }
  return out;
}

std::vector<int> sample_chunk_noise_levels(std::size_t chunks, int steps, Rng& rng) {
  if (chunks < 1) throw InputError("sample_chunk_noise_levels: chunks must be >= 1");
  if (steps < 1) throw StepError("sample_chunk_noise_levels: N must be >= 1");
  std::vector<int> out(chunks);
  for (auto& k : out) k = static_cast<int>(rng.uniform_int(1, steps));
  return out;
}

std::vector<std::size_t> ScheduleMatrix::active(std::size_t r) const {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < chunks; ++c)
    if (next(r, c) < at(r, c)) out.push_back(c);
  return out;
}

ScheduleMatrix build_pyramid_matrix(std::size_t chunks, int steps) {
  if (chunks < 1 || steps < 1) throw InputError("pyramid matrix needs chunks >= 1 and N >= 1");
  ScheduleMatrix m;
  m.chunks = chunks;
  m.steps = steps;
  const std::size_t rounds = chunks + static_cast<std::size_t>(steps) - 1;
  m.rows.assign(rounds, std::vector<int>(chunks));
  for (std::size_t r = 0; r < rounds; ++r)
    for (std::size_t c = 0; c < chunks; ++c) {
      const long long level = static_cast<long long>(steps) - (static_cast<long long>(r) - static_cast<long long>(c));
      m.rows[r][c] = static_cast<int>(std::clamp<long long>(level, 0, steps));
    }
  return m;
}

ScheduleMatrix build_sequential_matrix(std::size_t chunks, int steps) {
  if (chunks < 1 || steps < 1) throw InputError("sequential matrix needs chunks >= 1 and N >= 1");
  ScheduleMatrix m;
  m.chunks = chunks;
  m.steps = steps;
  const std::size_t n = static_cast<std::size_t>(steps);
  m.rows.assign(chunks * n, std::vector<int>(chunks));
  for (std::size_t r = 0; r < chunks * n; ++r)
    for (std::size_t c = 0; c < chunks; ++c) {
      if (r < c * n)
        m.rows[r][c] = steps;
      else if (r >= (c + 1) * n)
        m.rows[r][c] = 0;
      else
        m.rows[r][c] = steps - static_cast<int>(r - c * n);
    }
  return m;
}

PassCounts pass_counts(std::uint64_t chunks, std::uint64_t steps) {
  if (chunks < 1 || steps < 1) throw InputError("pass_counts needs chunks >= 1 and N >= 1");
  return {chunks * steps, chunks + steps - 1};
}

#define XSTREAM_DFORCE_INSTANTIATE(T)                                                                            \
  template BasicTensor<T> add_noise(const BasicTensor<T>&, int, const BasicTensor<T>&, const NoiseSchedule&);   \
  template BasicTensor<T> velocity_target(const BasicTensor<T>&, const BasicTensor<T>&, int,                   \
                                          const NoiseSchedule&);                                                \
  template double vpred_loss(const BasicTensor<T>&, const BasicTensor<T>&);                                    \
  template BasicTensor<T> predict_x0(const BasicTensor<T>&, const BasicTensor<T>&, int, const NoiseSchedule&); \
  template BasicTensor<T> predict_eps(const BasicTensor<T>&, const BasicTensor<T>&, int, const NoiseSchedule&); \
  template BasicTensor<T> ddim_step(const BasicTensor<T>&, const BasicTensor<T>&, int, int, const NoiseSchedule&);

XSTREAM_DFORCE_INSTANTIATE(float)
XSTREAM_DFORCE_INSTANTIATE(double)

}  // namespace xstream
