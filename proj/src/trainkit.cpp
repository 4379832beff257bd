#include "xstream/trainkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>

#include "xstream/config.hpp"
#include "xstream/rng.hpp"

namespace xstream {

void DataConfig::validate() const {
  if (height < 1 || width < 1) throw ConfigError("data.height and data.width must be >= 1");
  if (scene_chunks < 2) throw ConfigError("data.scene_chunks must be >= 2");
  if (!(blob_sigma > 0.0)) throw ConfigError("data.blob_sigma must be > 0");
  if (!(blob_amplitude > 0.0 && blob_amplitude <= 3.0)) throw ConfigError("data.blob_amplitude must be in (0, 3]");
  if (!(max_speed >= 0.0)) throw ConfigError("data.max_speed must be >= 0");
}

SegmentConfig DataConfig::segment(const SegmentConfig& seg) const {
  SegmentConfig s = seg;
  s.height = height;
  s.width = width;
  s.validate();
  return s;
}

DataConfig DataConfig::from_config(const Config& cfg) {
  DataConfig d;
  auto nn = [&](const char* key) {
    const auto v = cfg.get_int(key);
    if (v < 0) throw ConfigError(std::string("config key '") + key + "' must be >= 0");
    return v;
  };
  d.height = static_cast<std::uint32_t>(nn("data.height"));
  d.width = static_cast<std::uint32_t>(nn("data.width"));
  d.scene_chunks = static_cast<std::size_t>(nn("data.scene_chunks"));
  d.seed = cfg.get_u64("data.seed");
  d.blob_sigma = cfg.get_double("data.blob_sigma");
  d.blob_amplitude = cfg.get_double("data.blob_amplitude");
  d.max_speed = cfg.get_double("data.max_speed");
  d.validate();
  return d;
}

namespace {

double reflect(double x, double hi) {
  if (hi <= 0.0) return 0.0;
  const double period = 2.0 * hi;
  x = std::fmod(x, period);
  if (x < 0) x += period;
  return x > hi ? period - x : x;
}

Tensor render(const SegmentConfig& seg, const std::vector<double>& sig, double amp, double sigma, double r0,
              double c0) {
  const std::uint32_t rows = seg.grid_rows(), cols = seg.grid_cols();
  Tensor t({static_cast<std::size_t>(rows) * cols, sig.size()});
  for (std::uint32_t r = 0; r < rows; ++r)
    for (std::uint32_t c = 0; c < cols; ++c) {
      const double d2 = (r - r0) * (r - r0) + (c - c0) * (c - c0);
      const double g = amp * std::exp(-d2 / (2.0 * sigma * sigma));
      for (std::size_t ch = 0; ch < sig.size(); ++ch)
        t.at(r * cols + c, ch) = static_cast<float>(std::clamp(g * sig[ch], -3.0, 3.0));
    }
  return t;
}

}  // namespace

SyntheticScene::SyntheticScene(const SegmentConfig& seg, const DataConfig& data, std::size_t cond_dim,
                               std::uint64_t scene_seed) {
  seg.validate();
  data.validate();
  const std::size_t V = seg.video_chunks_per_segment;
  const std::size_t nseg = (data.scene_chunks + V - 1) / V;

  // Velocity readout shared by every scene of the dataset.
  Rng rr(derive_seed({data.seed, 0x5250ULL}));
  const double rs = std::sqrt(static_cast<double>(seg.cond_tokens_per_segment()) / static_cast<double>(cond_dim));
  std::vector<double> R(cond_dim * 2);
  for (auto& x : R) x = rr.normal() * rs;

  Rng rng(derive_seed({data.seed, scene_seed}));
  std::vector<double> sig(seg.latent_channels);
  for (auto& x : sig) x = std::clamp(rng.normal(), -1.5, 1.5);

  std::vector<std::pair<double, double>> vel;
  for (std::size_t s = 0; s < nseg; ++s) {
    Tensor c({seg.cond_tokens_per_segment(), cond_dim});
    for (auto& x : c.data()) x = static_cast<float>(rng.normal());
    double dr = 0.0, dc = 0.0;
    for (std::size_t j = 0; j < cond_dim; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < c.rows(); ++i) m += c.at(i, j);
      m /= static_cast<double>(c.rows());
      dr += R[j * 2] * m;
      dc += R[j * 2 + 1] * m;
    }
    vel.emplace_back(data.max_speed * std::tanh(dr), data.max_speed * std::tanh(dc));
    conds_.push_back({std::move(c)});
  }

  const double hr = seg.grid_rows() - 1.0, hc = seg.grid_cols() - 1.0;
  // Unreflected coordinates; reflection is applied when rendering.
  double r = hr / 2.0, c = hc / 2.0;
  identity_ = render(seg, sig, data.blob_amplitude, data.blob_sigma, r, c);
  for (std::size_t i = 0; i < data.scene_chunks; ++i) {
    r += vel[i / V].first;
    c += vel[i / V].second;
    const double pr = reflect(r, hr), pc = reflect(c, hc);
    positions_.emplace_back(pr, pc);
    chunks_.push_back(render(seg, sig, data.blob_amplitude, data.blob_sigma, pr, pc));
  }
}

Batch make_batch(const SegmentConfig& seg, const DataConfig& data, std::size_t cond_dim, const NoiseSchedule& sched,
                 Rng& rng, const BatchSpec& spec) {
  if (spec.batch < 1) throw ConfigError("train.batch must be >= 1");
  if (spec.chunks < 2) throw ConfigError("train.chunks must be >= 2");
  if (data.scene_chunks < spec.chunks)
    throw ConfigError("data.scene_chunks " + std::to_string(data.scene_chunks) + " is shorter than train.chunks " +
                      std::to_string(spec.chunks));
  const std::size_t V = seg.video_chunks_per_segment;
  const int N = sched.steps();
  Batch b;
  for (std::size_t i = 0; i < spec.batch; ++i) {
    const std::uint64_t scene_seed = rng.next_u64();
    const SyntheticScene scene(seg, data, cond_dim, scene_seed);
    TrainSample s;
    s.identity = scene.identity();
    s.first_chunk = rng.uniform_int(0, static_cast<std::int64_t>(data.scene_chunks - spec.chunks));
    if (spec.mode == ForcingMode::diffusion) {
      s.levels = sample_chunk_noise_levels(spec.chunks, N, rng);
    } else {
      s.levels.assign(spec.chunks, 0);
      s.levels.back() = static_cast<int>(rng.uniform_int(1, N));
    }
    for (std::size_t j = 0; j < spec.chunks; ++j) {
      const std::size_t g = static_cast<std::size_t>(s.first_chunk) + j;
      const Tensor& v = scene.chunk(g);
      Tensor e(v.shape());
      for (auto& x : e.data()) x = static_cast<float>(rng.normal());
      s.noisy.push_back(add_noise(v, s.levels[j], e, sched));
      s.target.push_back(velocity_target(v, e, s.levels[j], sched));
      s.clean.push_back(v);
      s.eps.push_back(std::move(e));
      const std::uint64_t seg_idx = g / V;
      s.chunk_segment.push_back(seg_idx);
      if (s.segments.empty() || s.segments.back() != seg_idx) {
        s.segments.push_back(seg_idx);
        s.conds.push_back(scene.cond(seg_idx));
      }
    }
    b.samples.push_back(std::move(s));
  }
  return b;
}

template <typename T>
BatchInputs<T> batch_inputs(const Batch& batch, const SegmentConfig& seg, const ActorConfig& ac) {
  const std::size_t tpc = seg.tokens_per_video_chunk();
  const std::size_t cpt = seg.cond_tokens_per_segment();
  const std::size_t id = ac.use_identity_ref ? tpc : 0;
  const std::size_t window = window_chunk_capacity(ac.window_tokens, tpc);
  std::size_t rows = 0, crow = 0;
  for (const auto& s : batch.samples) {
    rows += id + s.noisy.size() * tpc;
    crow += s.segments.size() * cpt;
  }
  const std::size_t L = ac.latent_dim;
  BatchInputs<T> in;
  in.tokens.latents = BasicTensor<T>({rows, L});
  in.target = BasicTensor<T>({rows, L});
  in.row_weights.assign(rows, T(0));
  in.cond.states = BasicTensor<T>({crow, ac.cond_dim});
  auto self = std::make_shared<BoolMatrix>(rows, rows, false);
  auto cross = std::make_shared<BoolMatrix>(rows, crow, false);

  std::size_t r0 = 0, c0 = 0;
  auto put = [&](BasicTensor<T>& dst, std::size_t at, const Tensor& src) {
    for (std::size_t i = 0; i < src.size(); ++i) dst.data()[at * src.cols() + i] = static_cast<T>(src.data()[i]);
  };
  for (const auto& s : batch.samples) {
    const std::size_t n = s.noisy.size();
    if (id) {
      put(in.tokens.latents, r0, s.identity);
      const auto ps = identity_positions(seg);
      in.tokens.positions.insert(in.tokens.positions.end(), ps.begin(), ps.end());
      in.tokens.levels.insert(in.tokens.levels.end(), tpc, 0);
    }
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t at = r0 + id + j * tpc;
      put(in.tokens.latents, at, s.noisy[j]);
      put(in.target, at, s.target[j]);
      const auto ps = chunk_positions(seg, static_cast<double>(s.first_chunk + static_cast<std::int64_t>(j)));
      in.tokens.positions.insert(in.tokens.positions.end(), ps.begin(), ps.end());
      in.tokens.levels.insert(in.tokens.levels.end(), tpc, s.levels[j]);
      if (s.levels[j] > 0) std::fill_n(in.row_weights.begin() + static_cast<std::ptrdiff_t>(at), tpc, T(1));
      const std::size_t si =
          static_cast<std::size_t>(std::find(s.segments.begin(), s.segments.end(), s.chunk_segment[j]) -
                                   s.segments.begin());
      for (std::size_t a = 0; a < tpc; ++a)
        for (std::size_t k = 0; k < cpt; ++k) cross->set(at + a, c0 + si * cpt + k, true);
    }
    const auto m = build_windowed_self_mask(MaskSpec{id, n, tpc, ac.mask_mode}, window);
    const std::size_t span = id + n * tpc;
    for (std::size_t q = 0; q < span; ++q)
      for (std::size_t k = 0; k < span; ++k)
        if (m(q, k)) self->set(r0 + q, r0 + k, true);
    for (std::size_t si = 0; si < s.segments.size(); ++si) {
      put(in.cond.states, c0 + si * cpt, s.conds[si].states);
      for (const auto& t : cond_positions(seg, s.segments[si])) in.cond.positions.push_back({t.time_index, 0.0, 0.0});
    }
    r0 += span;
    c0 += s.segments.size() * cpt;
  }
  in.self_mask = self;
  in.cross_mask = cross;
  return in;
}

template <typename T>
Var batch_loss(ActorModel<T>& model, Graph<T>& g, const BatchInputs<T>& in) {
  typename ActorModel<T>::Request req;
  req.tokens = &in.tokens;
  req.cond = &in.cond;
  req.self_mask = in.self_mask;
  req.cross_mask = in.cross_mask;
  const Var pred = model.forward(g, req);
  return g.weighted_row_mse(pred, g.input_ref(in.target), in.row_weights);
}

template BatchInputs<float> batch_inputs(const Batch&, const SegmentConfig&, const ActorConfig&);
template BatchInputs<double> batch_inputs(const Batch&, const SegmentConfig&, const ActorConfig&);
template Var batch_loss(ActorModel<float>&, Graph<float>&, const BatchInputs<float>&);
template Var batch_loss(ActorModel<double>&, Graph<double>&, const BatchInputs<double>&);

namespace {

void init_moments(const ActorModel<float>& model, AdamState& adam) {
  if (!adam.m.empty()) {
    if (adam.m.size() != model.params().all().size()) throw StateError("optimizer state does not match the model");
    return;
  }
  for (const auto& p : model.params().all()) {
    adam.m.emplace_back(p.value.shape());
    adam.v.emplace_back(p.value.shape());
  }
}

}  // namespace

void train(ActorModel<float>& model, TrainState& state, const SegmentConfig& seg, const DataConfig& data,
           const TrainOptions& opts) {
  if (opts.batch < 1 || opts.chunks < 2) throw ConfigError("train.batch >= 1 and train.chunks >= 2 required");
  if (!(opts.lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
  const auto sched = NoiseSchedule::cosine(opts.diffusion_steps);
  const auto& ac = model.config();
  init_moments(model, state.adam);
  state.mode = opts.mode;
  state.seed = opts.seed;
  const BatchSpec spec{opts.batch, opts.chunks, opts.mode};

  while (state.adam.step < opts.steps) {
    const std::uint64_t step = state.adam.step;
    Rng rng(derive_seed({opts.seed, opts.fixed_batch ? 0 : step, static_cast<std::uint64_t>(opts.mode)}));
    const Batch batch = make_batch(seg, data, ac.cond_dim, sched, rng, spec);
    const auto in = batch_inputs<float>(batch, seg, ac);

    model.params().zero_grad();
    Graph<float> g(true);
    const Var loss = batch_loss(model, g, in);
    double L = g.value(loss)[0];
    if (opts.nan_at_step && *opts.nan_at_step == step) L = std::numeric_limits<double>::quiet_NaN();
    if (!std::isfinite(L)) {
      if (!opts.abort_checkpoint.empty()) save_checkpoint(opts.abort_checkpoint, model, state);
      throw TrainingDiverged("non-finite loss at step " + std::to_string(step), static_cast<std::int64_t>(step));
    }
    g.backward(loss);

    const double t = static_cast<double>(step + 1);
    const double bc1 = 1.0 - std::pow(opts.beta1, t), bc2 = 1.0 - std::pow(opts.beta2, t);
    auto& params = model.params().all();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (p.frozen) continue;
      auto w = p.value.data();
      auto gr = p.grad.data();
      auto m = state.adam.m[i].data();
      auto v = state.adam.v[i].data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = gr[j];
        const double mj = opts.beta1 * m[j] + (1.0 - opts.beta1) * gj;
        const double vj = opts.beta2 * v[j] + (1.0 - opts.beta2) * gj * gj;
        m[j] = static_cast<float>(mj);
        v[j] = static_cast<float>(vj);
        w[j] = static_cast<float>(w[j] - opts.lr * (mj / bc1) / (std::sqrt(vj / bc2) + opts.adam_eps));
      }
    }
    const double logged = static_cast<float>(L);
    state.losses.push_back(logged);
    state.adam.step = step + 1;
    if (opts.on_step) opts.on_step(step, logged);
  }
}

std::vector<double> smoothed_losses(const std::vector<double>& losses, std::size_t window) {
  if (window < 1) throw ConfigError("smoothing window must be >= 1");
  std::vector<double> out;
  for (std::size_t i = 0; i + window <= losses.size(); i += window) {
    double s = 0.0;
    for (std::size_t j = i; j < i + window; ++j) s += losses[j];
    out.push_back(s / static_cast<double>(window));
  }
  return out;
}

namespace {

Tensor u64_pieces(std::uint64_t x) {
  Tensor t({4});
  for (int i = 0; i < 4; ++i) t[i] = static_cast<float>((x >> (16 * i)) & 0xffffu);
  return t;
}

std::uint64_t from_pieces(const Tensor& t, const char* what) {
  if (t.size() != 4) throw IoError(std::string("checkpoint entry ") + what + " is malformed");
  std::uint64_t x = 0;
  for (int i = 0; i < 4; ++i) {
    const float f = t[i];
    if (!(f >= 0.0f && f <= 65535.0f) || f != std::floor(f))
      throw IoError(std::string("checkpoint entry ") + what + " is malformed");
    x |= static_cast<std::uint64_t>(f) << (16 * i);
  }
  return x;
}

}  // namespace

std::vector<XtarEntry> checkpoint_entries(const ActorModel<float>& model, const TrainState& state) {
  auto out = actor_entries(model);
  const auto& params = model.params().all();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const bool have = i < state.adam.m.size();
    out.push_back({"adam.m/" + params[i].name, have ? state.adam.m[i] : Tensor(params[i].value.shape())});
    out.push_back({"adam.v/" + params[i].name, have ? state.adam.v[i] : Tensor(params[i].value.shape())});
  }
  out.push_back({"state.step", u64_pieces(state.adam.step)});
  out.push_back({"state.seed16", u64_pieces(state.seed)});
  out.push_back({"state.mode", Tensor({1}, {state.mode == ForcingMode::teacher ? 1.0f : 0.0f})});
  if (!state.losses.empty()) {
    Tensor h({state.losses.size()});
    for (std::size_t i = 0; i < state.losses.size(); ++i) h[i] = static_cast<float>(state.losses[i]);
    out.push_back({"state.loss_history", std::move(h)});
  }
  return out;
}

void save_checkpoint(const std::string& path, const ActorModel<float>& model, const TrainState& state) {
  write_xtar(path, checkpoint_entries(model, state));
}

TrainState restore_state(std::span<const XtarEntry> entries, ActorModel<float>& model) {
  load_actor_entries(model, entries);
  TrainState st;
  st.adam.step = from_pieces(find_entry(entries, "state.step"), "state.step");
  st.seed = from_pieces(find_entry(entries, "state.seed16"), "state.seed16");
  st.mode = find_entry(entries, "state.mode")[0] != 0.0f ? ForcingMode::teacher : ForcingMode::diffusion;
  for (const auto& p : model.params().all()) {
    st.adam.m.push_back(find_entry(entries, "adam.m/" + p.name));
    st.adam.v.push_back(find_entry(entries, "adam.v/" + p.name));
    if (st.adam.m.back().shape() != p.value.shape() || st.adam.v.back().shape() != p.value.shape())
      throw ConfigError("checkpoint optimizer state for '" + p.name + "' has the wrong shape");
  }
  for (const auto& e : entries)
    if (e.name == "state.loss_history")
      for (float x : e.tensor.data()) st.losses.push_back(x);
  if (st.losses.size() != st.adam.step)
    throw IoError("checkpoint loss history has " + std::to_string(st.losses.size()) + " entries for step " +
                  std::to_string(st.adam.step));
  return st;
}

TrainState load_checkpoint(const std::string& path, ActorModel<float>& model) {
  const auto entries = read_xtar(path);
  return restore_state(entries, model);
}

std::string loss_csv(const TrainState& state, std::size_t log_every) {
  std::ostringstream os;
  os << "step,loss,mode\n";
  const auto sm = smoothed_losses(state.losses, log_every);
  os.precision(9);
  for (std::size_t i = 0; i < sm.size(); ++i)
    os << (i + 1) * log_every << "," << sm[i] << "," << forcing_mode_name(state.mode) << "\n";
  return os.str();
}

DriftReport measure_drift(const ActorModel<float>& model, const SegmentConfig& seg, const DataConfig& data,
                          const DriftOptions& opts) {
  if (opts.horizon_chunks < 1 || opts.scenes < 1) throw ConfigError("drift horizon and scene count must be >= 1");
  const std::size_t V = seg.video_chunks_per_segment;
  const std::size_t nseg = (opts.horizon_chunks + V - 1) / V;
  DataConfig d = data;
  d.scene_chunks = std::max(d.scene_chunks, nseg * V);
  DriftReport rep;
  rep.per_chunk.assign(opts.horizon_chunks, 0.0);
  for (std::size_t sc = 0; sc < opts.scenes; ++sc) {
    const SyntheticScene scene(seg, d, model.config().cond_dim, derive_seed({0xd41f7ULL, opts.seed, sc}));
    GenerationOptions go;
    go.segment = seg;
    go.steps = opts.diffusion_steps;
    go.seed = derive_seed({opts.seed, sc});
    go.schedule = opts.schedule;
    const IdentityRef id{scene.identity()};
    ActorSession session(model, go, &id);
    std::size_t g = 0;
    for (std::size_t s = 0; s < nseg && g < opts.horizon_chunks; ++s)
      for (const auto& c : session.generate_segment(scene.cond(s))) {
        if (g >= opts.horizon_chunks) break;
        rep.per_chunk[g] += vpred_loss(c.latents, scene.chunk(g)) / static_cast<double>(opts.scenes);
        ++g;
      }
  }
  double sum = 0.0;
  for (double e : rep.per_chunk) {
    sum += e;
    rep.max = std::max(rep.max, e);
    if (!(e <= 1e3)) rep.diverged = true;
  }
  rep.mean = sum / static_cast<double>(rep.per_chunk.size());
  return rep;
}

}  // namespace xstream
