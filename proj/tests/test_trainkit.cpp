#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "test_support.hpp"
#include "xstream/config.hpp"
#include "xstream/trainkit.hpp"

using namespace xt;

namespace {

// Training layout for the small actor: 128x128 data gives a 4x4 grid.
SegmentConfig train_segment() {
  SegmentConfig s = small_segment(6);
  s.height = 128;
  s.width = 128;
  return s;
}

DataConfig small_data() {
  DataConfig d;
  d.scene_chunks = 12;
  return d;
}

TrainOptions quick(std::size_t steps) {
  TrainOptions o;
  o.steps = steps;
  o.batch = 2;
  o.chunks = 3;
  o.seed = 5;
  o.lr = 1e-3;
  return o;
}

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("xstream_trainkit_" + name)).string();
}

bool same_weights(const ActorModel<float>& a, const ActorModel<float>& b) {
  const auto& pa = a.params().all();
  const auto& pb = b.params().all();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i].value.data().size() != pb[i].value.data().size() ||
        !std::equal(pa[i].value.data().begin(), pa[i].value.data().end(), pb[i].value.data().begin()))
      return false;
  return true;
}

}  // namespace

TEST_CASE("synthetic scenes") {
  const SegmentConfig seg = train_segment();
  const DataConfig data = small_data();
  const SyntheticScene a(seg, data, 8, 3), b(seg, data, 8, 3), c(seg, data, 8, 4);
  REQUIRE(a.chunks() == 12);
  CHECK(a.segments() == 2);
  CHECK(a.identity().shape() == Shape{16, 4});
  CHECK(a.cond(0).states.shape() == Shape{39, 8});
  bool differs = false;
  for (std::size_t i = 0; i < a.chunks(); ++i) {
    CHECK(max_abs_diff(a.chunk(i), b.chunk(i)) == 0.0);
    differs |= max_abs_diff(a.chunk(i), c.chunk(i)) > 0.0;
  }
  CHECK(differs);

  // Bounds over many scenes, including an amplitude at the clamp.
  DataConfig loud = data;
  loud.blob_amplitude = 3.0;
  loud.max_speed = 2.0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const SyntheticScene sc(seg, loud, 8, s);
    for (std::size_t i = 0; i < sc.chunks(); ++i) {
      for (float x : sc.chunk(i).data()) REQUIRE((x >= -3.0f && x <= 3.0f));
      const auto [r, col] = sc.position(i);
      REQUIRE((r >= 0.0 && r <= 3.0 && col >= 0.0 && col <= 3.0));
    }
  }

  CHECK_THROWS_AS(SyntheticScene(seg, DataConfig{.scene_chunks = 1}, 8, 0), ConfigError);
  CHECK_THROWS_AS(SyntheticScene(seg, DataConfig{.blob_amplitude = 4.0}, 8, 0), ConfigError);
}

TEST_CASE("scene motion follows the blob formula") {
  SegmentConfig seg = train_segment();
  seg.height = seg.width = 256;  // 8x8 grid, room to move without reflecting
  DataConfig data = small_data();
  data.max_speed = 0.1;
  const SyntheticScene sc(seg, data, 8, 9);

  // Identity is the blob at the centre; chunk 0 is one step away.
  auto blob = [&](std::size_t token, double r0, double c0) {
    const double r = static_cast<double>(token / 8), c = static_cast<double>(token % 8);
    return data.blob_amplitude * std::exp(-((r - r0) * (r - r0) + (c - c0) * (c - c0)) /
                                          (2 * data.blob_sigma * data.blob_sigma));
  };
  // Channel signature from the peak ratio of the identity.
  std::size_t ch = 0;
  const double sig = sc.identity().at(0, ch) / blob(0, 3.5, 3.5);
  for (std::size_t t = 0; t < 64; ++t) CHECK(sc.identity().at(t, ch) == doctest::Approx(blob(t, 3.5, 3.5) * sig).epsilon(1e-4));

  double prev_r = 3.5, prev_c = 3.5;
  std::pair<double, double> step0{};
  for (std::size_t i = 0; i < sc.chunks(); ++i) {
    const auto [r, c] = sc.position(i);
    const std::pair<double, double> step{r - prev_r, c - prev_c};
    CHECK(std::abs(step.first) <= data.max_speed + 1e-12);
    CHECK(std::abs(step.second) <= data.max_speed + 1e-12);
    // Constant velocity within a segment.
    if (i % 6 == 0) step0 = step;
    CHECK(step.first == doctest::Approx(step0.first).epsilon(1e-9));
    CHECK(step.second == doctest::Approx(step0.second).epsilon(1e-9));
    for (std::size_t t = 0; t < 64; ++t)
      CHECK(sc.chunk(i).at(t, ch) == doctest::Approx(blob(t, r, c) * sig).epsilon(1e-4).scale(1e-6));
    prev_r = r;
    prev_c = c;
  }
}

TEST_CASE("batches") {
  const SegmentConfig seg = train_segment();
  const DataConfig data = small_data();
  const auto sched = NoiseSchedule::cosine(25);

  SUBCASE("teacher levels") {
    Rng rng(1);
    const Batch b = make_batch(seg, data, 8, sched, rng, {16, 4, ForcingMode::teacher});
    for (const auto& s : b.samples) {
      REQUIRE(s.levels.size() == 4);
      CHECK(s.levels[0] == 0);
      CHECK(s.levels[1] == 0);
      CHECK(s.levels[2] == 0);
      CHECK((s.levels[3] >= 1 && s.levels[3] <= 25));
      for (int j = 0; j < 3; ++j) CHECK(max_abs_diff(s.noisy[j], s.clean[j]) == 0.0);
    }
  }

  SUBCASE("diffusion levels golden") {
    Rng rng(42);
    const Batch b = make_batch(seg, data, 8, sched, rng, {2, 4, ForcingMode::diffusion});
    CHECK(b.samples[0].levels == std::vector<int>{1, 13, 7, 4});
    CHECK(b.samples[1].levels == std::vector<int>{19, 16, 14, 24});
    // Same draws replayed by hand.
    Rng r(42);
    r.next_u64();
    r.uniform_int(0, 8);
    CHECK(sample_chunk_noise_levels(4, 25, r) == b.samples[0].levels);
  }

  SUBCASE("targets match the dforce oracle") {
    Rng rng(3);
    const Batch b = make_batch(seg, data, 8, sched, rng, {4, 4, ForcingMode::diffusion});
    for (const auto& s : b.samples)
      for (std::size_t j = 0; j < 4; ++j) {
        const double ab = sched.alpha_bar(s.levels[j]);
        for (std::size_t i = 0; i < s.clean[j].size(); ++i) {
          const double x = s.clean[j][i], e = s.eps[j][i];
          REQUIRE(std::abs(s.target[j][i] - (std::sqrt(ab) * e - std::sqrt(1 - ab) * x)) < 1e-6);
          REQUIRE(std::abs(s.noisy[j][i] - (std::sqrt(ab) * x + std::sqrt(1 - ab) * e)) < 1e-6);
        }
      }
  }

  SUBCASE("windows stay inside the scene and track segments") {
    Rng rng(4);
    const Batch b = make_batch(seg, data, 8, sched, rng, {64, 4, ForcingMode::diffusion});
    bool spans = false;
    for (const auto& s : b.samples) {
      CHECK((s.first_chunk >= 0 && s.first_chunk <= 8));
      for (std::size_t j = 0; j < 4; ++j)
        CHECK(s.chunk_segment[j] == static_cast<std::uint64_t>(s.first_chunk + static_cast<std::int64_t>(j)) / 6);
      CHECK(s.segments.size() == s.conds.size());
      spans |= s.segments.size() == 2;
    }
    CHECK(spans);
  }

  SUBCASE("errors") {
    Rng rng(0);
    CHECK_THROWS_AS(make_batch(seg, data, 8, sched, rng, {0, 4, ForcingMode::diffusion}), ConfigError);
    CHECK_THROWS_AS(make_batch(seg, data, 8, sched, rng, {2, 1, ForcingMode::diffusion}), ConfigError);
    CHECK_THROWS_AS(make_batch(seg, data, 8, sched, rng, {2, 13, ForcingMode::diffusion}), ConfigError);
  }
}

TEST_CASE("batch inputs are block diagonal") {
  const SegmentConfig seg = train_segment();
  const DataConfig data = small_data();
  const auto sched = NoiseSchedule::cosine(25);
  const ActorConfig ac = small_actor();
  Rng rng(8);
  const Batch b = make_batch(seg, data, 8, sched, rng, {3, 4, ForcingMode::teacher});
  const auto in = batch_inputs<float>(b, seg, ac);
  const std::size_t per = 16 + 4 * 16;
  REQUIRE(in.tokens.latents.rows() == 3 * per);
  REQUIRE(in.row_weights.size() == 3 * per);
  REQUIRE(in.tokens.positions.size() == 3 * per);
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t r = 0; r < per; ++r) {
      // Only the noised last chunk carries weight in teacher mode.
      CHECK(in.row_weights[s * per + r] == (r >= 16 + 3 * 16 ? 1.0f : 0.0f));
      for (std::size_t k = 0; k < 3 * per; ++k)
        if (k / per != s) REQUIRE_FALSE((*in.self_mask)(s * per + r, k));
      // Identity rows take no cross attention.
      if (r < 16)
        for (std::size_t k = 0; k < in.cross_mask->cols; ++k) REQUIRE_FALSE((*in.cross_mask)(s * per + r, k));
    }
  ActorModel<float> m(ac);
  Graph<float> g(false);
  const double loss = g.value(batch_loss(m, g, in))[0];
  CHECK(std::isfinite(loss));
  CHECK(loss > 0.0);
}

TEST_CASE("step zero loss matches the analytic expectation") {
  // With a layernorm before the output head, E||pred||^2 per element is
  // D * sigma_w^2 regardless of the input, and the cross term vanishes.
  SegmentConfig seg;
  DataConfig data;
  seg = data.segment(seg);
  const int N = 25;
  const auto sched = NoiseSchedule::cosine(N);
  double sx = 0.0;
  std::size_t nx = 0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const SyntheticScene sc(seg, data, 64, 1000 + s);
    for (std::size_t i = 0; i < sc.chunks(); ++i)
      for (float x : sc.chunk(i).data()) {
        sx += double(x) * x;
        ++nx;
      }
  }
  const double ex2 = sx / static_cast<double>(nx);
  double mu = 0.0;
  for (int k = 1; k <= N; ++k) mu += sched.alpha_bar(k) + (1 - sched.alpha_bar(k)) * ex2;
  mu = mu / N + 64 * 0.02 * 0.02;

  std::vector<double> losses;
  for (std::uint64_t s = 0; s < 20; ++s) {
    ActorConfig ac;
    ac.init_seed = 100 + s;
    ActorModel<float> m(ac);
    TrainState st;
    TrainOptions o;
    o.steps = 1;
    o.seed = s;
    o.lr = 0.0;
    o.on_step = [&](std::size_t, double l) { losses.push_back(l); };
    train(m, st, seg, data, o);
  }
  const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) / 20;
  double var = 0.0;
  for (double l : losses) var += (l - mean) * (l - mean);
  const double sd = std::sqrt(var / 19);
  INFO("mu " << mu << " mean " << mean << " sd " << sd);
  CHECK(std::abs(mean - mu) <= 3 * sd / std::sqrt(20.0));
  for (double l : losses) CHECK(std::abs(l - mu) <= 3 * sd + 1e-12);
}

TEST_CASE("training is deterministic and resumable") {
  const SegmentConfig seg = train_segment();
  const DataConfig data = small_data();

  ActorModel<float> a(small_actor()), b(small_actor());
  TrainState sa, sb;
  train(a, sa, seg, data, quick(6));
  train(b, sb, seg, data, quick(6));
  REQUIRE(sa.losses.size() == 6);
  CHECK(sa.losses == sb.losses);
  CHECK(same_weights(a, b));

  // Stop at 3, round-trip through a checkpoint file, continue to 6.
  ActorModel<float> c(small_actor());
  TrainState sc;
  train(c, sc, seg, data, quick(3));
  const std::string path = tmp_path("resume.xtar");
  save_checkpoint(path, c, sc);
  ActorModel<float> d(small_actor());
  TrainState sd = load_checkpoint(path, d);
  CHECK(sd.adam.step == 3);
  CHECK(sd.seed == 5);
  CHECK(sd.losses == std::vector<double>(sa.losses.begin(), sa.losses.begin() + 3));
  train(d, sd, seg, data, quick(6));
  CHECK(sd.losses == sa.losses);
  CHECK(same_weights(a, d));
  std::filesystem::remove(path);

  // A different seed gives a different curve.
  ActorModel<float> e(small_actor());
  TrainState se;
  auto o = quick(6);
  o.seed = 6;
  train(e, se, seg, data, o);
  CHECK(se.losses != sa.losses);
}

TEST_CASE("frozen or zero-rate training keeps the loss constant") {
  const SegmentConfig seg = train_segment();
  const DataConfig data = small_data();
  auto o = quick(4);
  o.fixed_batch = true;

  ActorModel<float> m(small_actor());
  for (auto& p : m.params().all()) p.frozen = true;
  TrainState st;
  train(m, st, seg, data, o);
  for (double l : st.losses) CHECK(l == st.losses[0]);

  ActorModel<float> z(small_actor());
  TrainState sz;
  o.lr = 0.0;
  train(z, sz, seg, data, o);
  CHECK(sz.losses == st.losses);

  // Learning on a fixed batch drives the loss down.
  ActorModel<float> l(small_actor());
  TrainState sl;
  o.lr = 3e-3;
  o.steps = 30;
  train(l, sl, seg, data, o);
  CHECK(sl.losses.back() < sl.losses.front());
}

TEST_CASE("non-finite loss aborts with the last good checkpoint") {
  const SegmentConfig seg = train_segment();
  const DataConfig data = small_data();
  ActorModel<float> ref(small_actor());
  TrainState sref;
  train(ref, sref, seg, data, quick(2));

  ActorModel<float> m(small_actor());
  TrainState st;
  auto o = quick(5);
  o.nan_at_step = 2;
  o.abort_checkpoint = tmp_path("abort.xtar");
  try {
    train(m, st, seg, data, o);
    FAIL("expected TrainingDiverged");
  } catch (const TrainingDiverged& e) {
    CHECK(e.step() == 2);
  }
  CHECK(st.adam.step == 2);
  ActorModel<float> back(small_actor());
  const TrainState sb = load_checkpoint(o.abort_checkpoint, back);
  CHECK(sb.adam.step == 2);
  CHECK(sb.losses == sref.losses);
  CHECK(same_weights(back, ref));
  std::filesystem::remove(o.abort_checkpoint);
}

TEST_CASE("checkpoints reject mismatches") {
  ActorModel<float> m(small_actor());
  TrainState st;
  st.adam.step = 1;
  st.losses = {0.5};
  auto entries = checkpoint_entries(m, st);
  ActorModel<float> ok(small_actor());
  CHECK(restore_state(entries, ok).adam.step == 1);

  ActorConfig wide = small_actor();
  wide.model_dim = 32;
  ActorModel<float> other(wide);
  CHECK_THROWS_AS(restore_state(entries, other), ConfigError);

  auto bad_history = entries;
  for (auto& e : bad_history)
    if (e.name == "state.step") e.tensor[0] = 2.0f;
  CHECK_THROWS_AS(restore_state(bad_history, ok), IoError);
  auto bad_step = entries;
  for (auto& e : bad_step)
    if (e.name == "state.step") e.tensor[0] = 0.5f;
  CHECK_THROWS_AS(restore_state(bad_step, ok), IoError);
}

TEST_CASE("loss csv and smoothing") {
  CHECK(smoothed_losses({1, 2, 3, 4, 5}, 2) == std::vector<double>{1.5, 3.5});
  CHECK(smoothed_losses({1, 2}, 3).empty());
  CHECK_THROWS_AS(smoothed_losses({1}, 0), ConfigError);
  TrainState st;
  st.losses = {1, 3, 2, 2};
  st.mode = ForcingMode::teacher;
  CHECK(loss_csv(st, 2) == "step,loss,mode\n2,2,teacher\n4,2,teacher\n");
  st.mode = ForcingMode::diffusion;
  CHECK(loss_csv(st, 4) == "step,loss,mode\n4,2,diffusion\n");
}

TEST_CASE("drift measurement") {
  const SegmentConfig seg = train_segment();
  const DataConfig data = small_data();
  const ActorModel<float> m(small_actor());
  DriftOptions o;
  o.horizon_chunks = 8;
  o.scenes = 2;
  o.diffusion_steps = 2;
  const auto r = measure_drift(m, seg, data, o);
  REQUIRE(r.per_chunk.size() == 8);
  double mx = 0.0, sum = 0.0;
  for (double e : r.per_chunk) {
    CHECK(e > 0.0);
    mx = std::max(mx, e);
    sum += e;
  }
  CHECK(r.max == mx);
  CHECK(r.mean == doctest::Approx(sum / 8));
  CHECK_FALSE(r.diverged);
  CHECK(measure_drift(m, seg, data, o).per_chunk == r.per_chunk);

  // Horizon 1 is a single chunk from the identity: no rollout.
  o.horizon_chunks = 1;
  CHECK(measure_drift(m, seg, data, o).per_chunk[0] == doctest::Approx(r.per_chunk[0]));
  o.horizon_chunks = 0;
  CHECK_THROWS_AS(measure_drift(m, seg, data, o), ConfigError);
}

TEST_CASE("data config") {
  Config c;
  const DataConfig d = DataConfig::from_config(c);
  CHECK(d.height == 128);
  CHECK(d.scene_chunks == 60);
  CHECK(d.blob_sigma == 0.9);
  CHECK(d.segment(SegmentConfig{}).tokens_per_video_chunk() == 16);
  c.set("data.height", "-1");
  CHECK_THROWS_AS(DataConfig::from_config(c), ConfigError);
  Config z;
  z.set("data.blob_sigma", "0");
  CHECK_THROWS_AS(DataConfig::from_config(z), ConfigError);
}
