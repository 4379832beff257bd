#include <doctest.h>

#include <cmath>
#include <numbers>

#include "test_support.hpp"

using namespace xt;

namespace {

template <typename T>
BasicTensor<T> rand_t(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  BasicTensor<T> t(std::move(s));
  for (auto& x : t.data()) x = static_cast<T>(rng.normal());
  return t;
}

template <typename T>
double worst(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

// Recovers x0 from pure noise by walking k -> k-1 with the true velocity.
template <typename T>
BasicTensor<T> oracle_chain(const BasicTensor<T>& x0, const BasicTensor<T>& eps, const NoiseSchedule& s) {
  BasicTensor<T> v = add_noise(x0, s.steps(), eps, s);
  for (int k = s.steps(); k > 0; --k) v = ddim_step(v, velocity_target(x0, eps, k, s), k, k - 1, s);
  return v;
}

template <typename T>
void check_identities(double tol) {
  const auto s = NoiseSchedule::cosine(25);
  Rng pick(5);
  double w_rec = 0, w_vel = 0, w_step = 0, w_x0 = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto v = rand_t<T>({16}, 3 * i), eps = rand_t<T>({16}, 3 * i + 1), pred = rand_t<T>({16}, 3 * i + 2);
    const int k = int(pick.uniform_int(1, 25));
    const int kn = int(pick.uniform_int(0, k - 1));
    const double a = std::sqrt(s.alpha_bar(k)), b = std::sqrt(1 - s.alpha_bar(k));
    const auto vk = add_noise(v, k, eps, s);
    const auto vel = velocity_target(v, eps, k, s);
    // x0 back out of (v_k, vel)
    BasicTensor<T> back(v.shape());
    for (std::size_t j = 0; j < v.size(); ++j) back[j] = T(a * vk[j] - b * vel[j]);
    w_rec = std::max(w_rec, worst(back, v));
    w_x0 = std::max(w_x0, worst(predict_x0(vk, vel, k, s), v));
    // x0_hat, eps_hat recombine to v_k for any prediction
    const auto x0h = predict_x0(vk, pred, k, s), eh = predict_eps(vk, pred, k, s);
    for (std::size_t j = 0; j < v.size(); ++j) w_vel = std::max(w_vel, std::abs(a * x0h[j] + b * eh[j] - vk[j]));
    // a step with the true velocity lands on the same trajectory
    w_step = std::max(w_step, worst(ddim_step(vk, vel, k, kn, s), add_noise(v, kn, eps, s)));
  }
  CHECK(w_rec < tol);
  CHECK(w_x0 < tol);
  CHECK(w_vel < tol);
  CHECK(w_step < tol);
}

}  // namespace

TEST_CASE("cosine schedule") {
  const auto s = NoiseSchedule::cosine(25);
  REQUIRE(s.steps() == 25);
  CHECK(s.alpha_bar(0) == 1.0);
  for (int k = 1; k <= 25; ++k) {
    CHECK(s.alpha_bar(k) < s.alpha_bar(k - 1));
    CHECK(s.alpha_bar(k) > 0.0);
  }
  CHECK(s.alpha_bar(25) == 1e-4);
  const auto f = [](double t) { return std::pow(std::cos((t + 0.008) / 1.008 * std::numbers::pi / 2), 2); };
  CHECK(s.alpha_bar(10) == doctest::Approx(f(0.4) / f(0)).epsilon(1e-12));
  CHECK_THROWS_AS(s.alpha_bar(26), StepError);
  CHECK_THROWS_AS(s.alpha_bar(-1), StepError);
  CHECK_THROWS_AS(NoiseSchedule({1.0, 0.5, 0.6}), ConfigError);
  CHECK_THROWS_AS(NoiseSchedule({0.9, 0.5}), ConfigError);
  CHECK_THROWS_AS(NoiseSchedule::from_name("linear", 10), ConfigError);
}

TEST_CASE("add_noise and velocity_target") {
  const auto s = NoiseSchedule::cosine(25);
  const auto v = rand_t<float>({8, 4}, 1), eps = rand_t<float>({8, 4}, 2);
  CHECK(add_noise(v, 0, eps, s) == v);
  CHECK(worst(add_noise(v, 25, eps, s), eps) < 0.03);  // sqrt(1e-4) of signal left
  CHECK(velocity_target(v, eps, 0, s) == eps);
  const Tensor zero({8, 4});
  const auto vz = velocity_target(zero, eps, 7, s);
  for (std::size_t i = 0; i < eps.size(); ++i) CHECK(vz[i] == doctest::Approx(std::sqrt(s.alpha_bar(7)) * eps[i]));

  const auto v64 = rand_t<double>({50}, 3), e64 = rand_t<double>({50}, 4);
  const auto n = add_noise(v64.cast<float>(), 12, e64.cast<float>(), s);
  for (std::size_t i = 0; i < 50; ++i) {
    const double ref = std::sqrt(s.alpha_bar(12)) * float(v64[i]) + std::sqrt(1 - s.alpha_bar(12)) * float(e64[i]);
    CHECK(std::abs(n[i] - ref) < 1e-6);
  }
  CHECK_THROWS_AS(add_noise(v, 26, eps, s), StepError);
  CHECK_THROWS_AS(add_noise(v, 3, Tensor({4, 8}), s), DimensionError);
}

TEST_CASE("vpred loss") {
  const auto a = rand_t<float>({6, 5}, 1), b = rand_t<float>({6, 5}, 2);
  CHECK(vpred_loss(a, a) == 0.0);
  Tensor a1 = a;
  for (auto& x : a1.data()) x += 1.0f;
  CHECK(vpred_loss(a1, a) == doctest::Approx(1.0).epsilon(1e-6));
  double ref = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ref += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  CHECK(std::abs(vpred_loss(a, b) - ref / 30) < 1e-7);
  CHECK_THROWS_AS(vpred_loss(a, Tensor({5, 6})), DimensionError);
}

TEST_CASE("reconstruction identities in 64-bit") { check_identities<double>(1e-6); }
TEST_CASE("reconstruction identities in 32-bit") { check_identities<float>(1e-4); }

TEST_CASE("ddim with oracle velocity") {
  const auto s = NoiseSchedule::cosine(25);
  const auto x0 = rand_t<float>({64, 8}, 10), eps = rand_t<float>({64, 8}, 11);
  for (int k : {1, 9, 25}) {
    const auto vk = add_noise(x0, k, eps, s);
    CHECK(worst(ddim_step(vk, velocity_target(x0, eps, k, s), k, 0, s), x0) < 1e-5);
  }
  CHECK(worst(oracle_chain(x0, eps, s), x0) < 1e-4);
  CHECK(worst(oracle_chain(x0.cast<double>(), eps.cast<double>(), s), x0.cast<double>()) < 1e-10);
  CHECK_THROWS_AS(ddim_step(x0, x0, 3, 3, s), StepError);
  CHECK_THROWS_AS(ddim_step(x0, x0, 3, 5, s), StepError);
  CHECK_THROWS_AS(ddim_step(x0, x0, 26, 0, s), StepError);
}

TEST_CASE("chunk noise levels") {
  Rng one(1);
  for (int l : sample_chunk_noise_levels(20, 1, one)) CHECK(l == 1);

  Rng a(42), b(42);
  const auto g = sample_chunk_noise_levels(4, 25, a);
  CHECK(g == sample_chunk_noise_levels(4, 25, b));
  CHECK(g == std::vector<int>{7, 25, 1, 13});

  Rng u(7);
  std::vector<int> hist(26, 0);
  const int n = 100000;
  for (int i = 0; i < n / 4; ++i)
    for (int l : sample_chunk_noise_levels(4, 25, u)) ++hist[l];
  CHECK(hist[0] == 0);
  const double p = 1.0 / 25, sigma = std::sqrt(n * p * (1 - p));
  for (int l = 1; l <= 25; ++l) CHECK(std::abs(hist[l] - n * p) < 3 * sigma);
}

TEST_CASE("pyramid matrix") {
  const auto m = build_pyramid_matrix(3, 3);
  CHECK(m.rows == std::vector<std::vector<int>>{{3, 3, 3}, {2, 3, 3}, {1, 2, 3}, {0, 1, 2}, {0, 0, 1}});
  CHECK(m.active(0) == std::vector<std::size_t>{0});
  CHECK(m.active(2) == std::vector<std::size_t>{0, 1, 2});
  CHECK(m.active(4) == std::vector<std::size_t>{2});
  CHECK(build_pyramid_matrix(1, 25).rounds() == 25);
  CHECK(build_pyramid_matrix(6, 25).rounds() == 30);
}

TEST_CASE("pyramid matrix against the clamp rule") {
  for (std::size_t chunks = 1; chunks <= 8; ++chunks)
    for (int n = 1; n <= 32; ++n) {
      const auto m = build_pyramid_matrix(chunks, n);
      bool ok = m.rounds() == chunks + n - 1;
      for (std::size_t r = 0; ok && r < m.rounds(); ++r)
        for (std::size_t c = 0; c < chunks; ++c) {
          const long lvl = std::min<long>(n, std::max<long>(0, long(n) - (long(r) - long(c))));
          ok = ok && m.at(r, c) == lvl;
          if (r > 0) ok = ok && m.at(r, c) <= m.at(r - 1, c);
        }
      // every chunk steps through N..1 exactly once, one level per round, and ends clean
      for (std::size_t c = 0; ok && c < chunks; ++c) {
        std::vector<int> seen;
        for (std::size_t r = 0; r < m.rounds(); ++r)
          if (m.next(r, c) < m.at(r, c)) {
            ok = ok && m.next(r, c) == m.at(r, c) - 1;
            seen.push_back(m.at(r, c));
          }
        ok = ok && int(seen.size()) == n && seen.front() == n && seen.back() == 1 && m.next(m.rounds() - 1, c) == 0;
      }
      CHECK_MESSAGE(ok, "chunks=" << chunks << " N=" << n);
    }
}

TEST_CASE("sequential matrix") {
  const auto m = build_sequential_matrix(2, 3);
  CHECK(m.rows == std::vector<std::vector<int>>{{3, 3}, {2, 3}, {1, 3}, {0, 3}, {0, 2}, {0, 1}});
  CHECK(m.active(3) == std::vector<std::size_t>{1});
}

TEST_CASE("pyramid simulation equals per-chunk ddim") {
  const auto s = NoiseSchedule::cosine(25);
  const std::size_t chunks = 6;
  std::vector<Tensor> x0, eps, state;
  for (std::size_t c = 0; c < chunks; ++c) {
    x0.push_back(rand_t<float>({64, 8}, 100 + c));
    eps.push_back(rand_t<float>({64, 8}, 200 + c));
    state.push_back(add_noise(x0[c], 25, eps[c], s));
  }
  const auto m = build_pyramid_matrix(chunks, 25);
  std::size_t passes = 0;
  for (std::size_t r = 0; r < m.rounds(); ++r) {
    ++passes;
    for (std::size_t c : m.active(r))
      state[c] = ddim_step(state[c], velocity_target(x0[c], eps[c], m.at(r, c), s), m.at(r, c), m.next(r, c), s);
  }
  CHECK(passes == 30);
  for (std::size_t c = 0; c < chunks; ++c) {
    CHECK(worst(state[c], x0[c]) < 1e-4);
    CHECK(worst(state[c], oracle_chain(x0[c], eps[c], s)) < 1e-4);
  }
}

TEST_CASE("pass counts") {
  CHECK(pass_counts(6, 25) == PassCounts{150, 30});
  CHECK(pass_counts(1, 17) == PassCounts{17, 17});
  CHECK(pass_counts(3, 3) == PassCounts{9, 5});
  CHECK_THROWS_AS(pass_counts(0, 3), InputError);
}
