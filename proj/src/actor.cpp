#include "xstream/actor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "xstream/config.hpp"
#include "xstream/rng.hpp"

namespace xstream {

ForcingMode parse_forcing_mode(std::string_view s) {
  if (s == "diffusion") return ForcingMode::diffusion;
  if (s == "teacher") return ForcingMode::teacher;
  throw ConfigError("unknown forcing mode '" + std::string(s) + "' (expected diffusion or teacher)");
}

std::string_view forcing_mode_name(ForcingMode m) { return m == ForcingMode::diffusion ? "diffusion" : "teacher"; }

ScheduleKind parse_schedule_kind(std::string_view s) {
  if (s == "pyramid") return ScheduleKind::pyramid;
  if (s == "sequential") return ScheduleKind::sequential;
  throw ConfigError("unknown schedule '" + std::string(s) + "' (expected pyramid or sequential)");
}

std::string_view schedule_kind_name(ScheduleKind k) { return k == ScheduleKind::pyramid ? "pyramid" : "sequential"; }

RopeParams ActorConfig::rope() const { return RopeParams::parse(dim_split, head_dim(), rope_base); }

void ActorConfig::validate() const {
  if (layers < 1) throw ConfigError("actor.layers must be >= 1");
  if (model_dim < 1 || heads < 1) throw ConfigError("actor.model_dim and actor.heads must be >= 1");
  if (model_dim % heads != 0)
    throw ConfigError("actor.model_dim " + std::to_string(model_dim) + " not divisible by actor.heads " +
                      std::to_string(heads));
  if (cond_dim < 1 || latent_dim < 1 || mlp_ratio < 1) throw ConfigError("actor dims must be >= 1");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw ConfigError("timestep embedding dim must be even");
  if (window_tokens < 1) throw ConfigError("actor.window_tokens must be >= 1");
  rope().validate();
}

ActorConfig ActorConfig::from_config(const Config& cfg) {
  auto sz = [&](const char* key) {
    const auto v = cfg.get_int(key);
    if (v < 0) throw ConfigError(std::string("config key '") + key + "' must be >= 0");
    return static_cast<std::size_t>(v);
  };
  ActorConfig a;
  a.layers = sz("actor.layers");
  a.model_dim = sz("actor.model_dim");
  a.heads = sz("actor.heads");
  a.cond_dim = sz("actor.cond_dim");
  a.latent_dim = sz("actor.latent_dim");
  a.mlp_ratio = sz("actor.mlp_ratio");
  a.use_identity_ref = cfg.get_bool("actor.use_identity_ref");
  a.mask_mode = parse_mask_mode(cfg.get("actor.mask_mode"));
  a.forcing_mode = parse_forcing_mode(cfg.get("actor.forcing_mode"));
  a.window_tokens = sz("actor.window_tokens");
  a.schedule = parse_schedule_kind(cfg.get("actor.schedule"));
  a.condition_on_finalized = cfg.get_bool("actor.condition_on_finalized");
  a.init_seed = cfg.get_u64("actor.init_seed");
  a.rope_base = cfg.get_double("rope.base");
  a.dim_split = cfg.get("rope.dim_split");
  a.validate();
  return a;
}

std::vector<double> timestep_sinusoid(int level, std::size_t dim, double base) {
  const std::size_t half = dim / 2;
  std::vector<double> out(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double f = std::pow(base, -static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::sin(level * f);
    out[half + i] = std::cos(level * f);
  }
  return out;
}

namespace {

template <typename T>
BasicTensor<T> randn(Rng& rng, Shape shape, double stddev) {
  BasicTensor<T> t(std::move(shape));
  for (auto& x : t.data()) x = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <typename T>
BasicTensor<T> filled(std::size_t n, T v) {
  return BasicTensor<T>::full({n}, v);
}

std::string blk(std::size_t l, const char* rest) { return "blk" + std::to_string(l) + "." + rest; }

}  // namespace

template <typename T>
ActorModel<T>::ActorModel(const ActorConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t D = cfg_.model_dim, C = cfg_.cond_dim, L = cfg_.latent_dim, E = cfg_.time_embed_dim;
  const std::size_t H = D * cfg_.mlp_ratio;
  Rng rng(derive_seed({cfg_.init_seed, 0x61637472ULL}));
  auto lin = [&](const std::string& name, std::size_t in, std::size_t out) {
    params_.add(name, randn<T>(rng, {in, out}, 0.02));
  };
  auto ln = [&](const std::string& name, std::size_t n) {
    params_.add(name + ".g", filled<T>(n, T(1)));
    params_.add(name + ".b", filled<T>(n, T(0)));
  };
  lin("lat.w", L, D);
  params_.add("lat.b", filled<T>(D, T(0)));
  lin("step.w1", E, D);
  params_.add("step.b1", filled<T>(D, T(0)));
  lin("step.w2", D, D);
  params_.add("step.b2", filled<T>(D, T(0)));
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    ln(blk(l, "ln1"), D);
    lin(blk(l, "attn.wq"), D, D);
    lin(blk(l, "attn.wk"), D, D);
    lin(blk(l, "attn.wv"), D, D);
    lin(blk(l, "attn.wo"), D, D);
    params_.add(blk(l, "attn.bo"), filled<T>(D, T(0)));
    ln(blk(l, "ln2"), D);
    ln(blk(l, "lnc"), C);
    lin(blk(l, "xattn.wq"), D, D);
    lin(blk(l, "xattn.wk"), C, D);
    lin(blk(l, "xattn.wv"), C, D);
    lin(blk(l, "xattn.wo"), D, D);
    params_.add(blk(l, "xattn.bo"), filled<T>(D, T(0)));
    ln(blk(l, "ln3"), D);
    lin(blk(l, "mlp.w1"), D, H);
    params_.add(blk(l, "mlp.b1"), filled<T>(H, T(0)));
    lin(blk(l, "mlp.w2"), H, D);
    params_.add(blk(l, "mlp.b2"), filled<T>(D, T(0)));
  }
  ln("out.ln", D);
  params_.add("out.w", randn<T>(rng, {D, L}, 0.02));
  params_.add("out.b", filled<T>(L, T(0)));
}

template <typename T>
template <typename Store>
Var ActorModel<T>::embed(const ActorConfig& cfg, Store& P, Graph<T>& g, const BasicTensor<T>& latents,
                         const std::vector<int>& levels) {
  auto p = [&](const std::string& n) { return g.param(P.get(n)); };
  // The step MLP runs once per distinct level; rows pick theirs up by index.
  std::vector<int> uniq(levels.begin(), levels.end());
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  BasicTensor<T> temb({uniq.size(), cfg.time_embed_dim});
  for (std::size_t i = 0; i < uniq.size(); ++i) {
    const auto e = timestep_sinusoid(uniq[i], cfg.time_embed_dim, cfg.rope_base);
    for (std::size_t j = 0; j < e.size(); ++j) temb.at(i, j) = static_cast<T>(e[j]);
  }
  std::vector<std::uint32_t> idx(levels.size());
  for (std::size_t i = 0; i < levels.size(); ++i)
    idx[i] = static_cast<std::uint32_t>(std::lower_bound(uniq.begin(), uniq.end(), levels[i]) - uniq.begin());
  Var te = g.input(std::move(temb));
  te = g.linear(g.silu(g.linear(te, p("step.w1"), p("step.b1"))), p("step.w2"), p("step.b2"));
  te = g.gather_rows(te, idx);
  return g.add(g.linear(g.input_ref(latents), p("lat.w"), p("lat.b")), te);
}

template <typename T>
BasicTensor<T> ActorModel<T>::embed_inputs(const BasicTensor<T>& latents, int level) const {
  if (latents.empty() || latents.rank() != 2 || latents.cols() != cfg_.latent_dim)
    throw DimensionError("embed_inputs: latents must be [tokens, " + std::to_string(cfg_.latent_dim) + "], got " +
                         shape_str(latents.shape()));
  if (level < 0) throw StepError("embed_inputs: negative diffusion step");
  Graph<T> g(false);
  const Var x = embed(cfg_, params_, g, latents, std::vector<int>(latents.rows(), level));
  return g.value(x);
}

template <typename T>
template <typename Store>
Var ActorModel<T>::forward_impl(const ActorConfig& cfg, Store& P, Graph<T>& g, const Request& req) {
  if (!req.tokens) throw InputError("actor forward: no tokens");
  const auto& tok = *req.tokens;
  const std::size_t Q = tok.latents.empty() ? 0 : tok.latents.rows();
  if (Q == 0) throw DimensionError("actor forward: empty token block");
  if (tok.latents.cols() != cfg.latent_dim)
    throw DimensionError("actor forward: latents have " + std::to_string(tok.latents.cols()) + " channels, expected " +
                         std::to_string(cfg.latent_dim));
  if (tok.levels.size() != Q || tok.positions.size() != Q)
    throw DimensionError("actor forward: levels/positions must have one entry per token");
  std::size_t prefix_rows = 0;
  if (req.prefix && !req.prefix->empty()) {
    if (req.prefix->size() != cfg.layers) throw DimensionError("actor forward: prefix needs one entry per layer");
    prefix_rows = (*req.prefix)[0].k.rows();
  }
  if (!req.self_mask || req.self_mask->rows != Q || req.self_mask->cols != prefix_rows + Q)
    throw DimensionError("actor forward: self mask must be " + std::to_string(Q) + "x" +
                         std::to_string(prefix_rows + Q));
  if (req.cond) {
    if (req.cond->states.cols() != cfg.cond_dim) throw DimensionError("actor forward: cond width mismatch");
    if (req.cond->positions.size() != req.cond->states.rows())
      throw DimensionError("actor forward: cond positions mismatch");
    if (!req.cross_mask || req.cross_mask->rows != Q || req.cross_mask->cols != req.cond->states.rows())
      throw DimensionError("actor forward: cross mask shape mismatch");
  }

  auto p = [&](const std::string& n) { return g.param(P.get(n)); };
  auto ln = [&](Var x, const std::string& n) { return g.layernorm(x, p(n + ".g"), p(n + ".b")); };

  const RopeParams rope = cfg.rope();
  const auto qtab = build_rope_table<T>(tok.positions, rope, cfg.heads);

  Var x = embed(cfg, P, g, tok.latents, tok.levels);

  Var cond;
  RopeTable<T> ctab;
  if (req.cond) {
    cond = g.input_ref(req.cond->states);
    ctab = build_rope_table<T>(req.cond->positions, rope, cfg.heads);
  }

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    std::size_t mark = g.node_count();
    Var h = ln(x, blk(l, "ln1"));
    Var q = g.pair_rotate(g.matmul(h, p(blk(l, "attn.wq"))), qtab.cos, qtab.sin);
    Var k = g.pair_rotate(g.matmul(h, p(blk(l, "attn.wk"))), qtab.cos, qtab.sin);
    Var v = g.matmul(h, p(blk(l, "attn.wv")));
    if (req.kv_out) {
      if (req.kv_out->size() < cfg.layers) req.kv_out->resize(cfg.layers);
      (*req.kv_out)[l] = {g.value(k), g.value(v)};
    }
    if (prefix_rows > 0) {
      const auto& pre = (*req.prefix)[l];
      const Var ks[2] = {g.input_ref(pre.k), k};
      const Var vs[2] = {g.input_ref(pre.v), v};
      k = g.concat_rows(ks);
      v = g.concat_rows(vs);
    }
    Var a = g.attention(q, k, v, cfg.heads, req.self_mask);
    x = g.add(x, g.linear(a, p(blk(l, "attn.wo")), p(blk(l, "attn.bo"))));
    g.release_since(mark, {x});
    mark = g.node_count();

    if (req.cond) {
      h = ln(x, blk(l, "ln2"));
      Var cq = g.pair_rotate(g.matmul(h, p(blk(l, "xattn.wq"))), qtab.cos, qtab.sin);
      Var c = ln(cond, blk(l, "lnc"));
      Var ck = g.pair_rotate(g.matmul(c, p(blk(l, "xattn.wk"))), ctab.cos, ctab.sin);
      Var cv = g.matmul(c, p(blk(l, "xattn.wv")));
      Var ca = g.attention(cq, ck, cv, cfg.heads, req.cross_mask);
      x = g.add(x, g.linear(ca, p(blk(l, "xattn.wo")), p(blk(l, "xattn.bo"))));
      g.release_since(mark, {x});
      mark = g.node_count();
    }

    h = ln(x, blk(l, "ln3"));
    h = g.linear(g.silu(g.linear(h, p(blk(l, "mlp.w1")), p(blk(l, "mlp.b1")))), p(blk(l, "mlp.w2")),
                 p(blk(l, "mlp.b2")));
    x = g.add(x, h);
    g.release_since(mark, {x});
  }
  return g.linear(ln(x, "out.ln"), p("out.w"), p("out.b"));
}

template <typename T>
Var ActorModel<T>::forward(Graph<T>& g, const Request& req) {
  return forward_impl(cfg_, params_, g, req);
}

template <typename T>
Var ActorModel<T>::forward(Graph<T>& g, const Request& req) const {
  return forward_impl(cfg_, params_, g, req);
}

template class ActorModel<float>;
template class ActorModel<double>;

namespace {

Tensor meta_tensor(const ActorConfig& c) {
  return Tensor({6}, {static_cast<float>(c.layers), static_cast<float>(c.model_dim), static_cast<float>(c.heads),
                      static_cast<float>(c.cond_dim), static_cast<float>(c.latent_dim),
                      static_cast<float>(c.mlp_ratio)});
}

}  // namespace

std::vector<XtarEntry> actor_entries(const ActorModel<float>& model) {
  std::vector<XtarEntry> out;
  out.push_back({"meta/actor", meta_tensor(model.config())});
  for (const auto& p : model.params().all()) out.push_back({"actor/" + p.name, p.value});
  return out;
}

void load_actor_entries(ActorModel<float>& model, std::span<const XtarEntry> entries) {
  const auto& meta = find_entry(entries, "meta/actor");
  const Tensor want = meta_tensor(model.config());
  static const char* names[] = {"layers", "model_dim", "heads", "cond_dim", "latent_dim", "mlp_ratio"};
  if (meta.size() != want.size()) throw ConfigError("checkpoint actor metadata is malformed");
  for (std::size_t i = 0; i < want.size(); ++i)
    if (meta[i] != want[i])
      throw ConfigError("checkpoint actor." + std::string(names[i]) + "=" + std::to_string(static_cast<long>(meta[i])) +
                        " does not match configured " + std::to_string(static_cast<long>(want[i])));
  for (auto& p : model.params().all()) {
    const auto& t = find_entry(entries, "actor/" + p.name);
    if (t.shape() != p.value.shape())
      throw ConfigError("checkpoint parameter '" + p.name + "' has shape " + shape_str(t.shape()) + ", expected " +
                        shape_str(p.value.shape()));
    p.value = t;
  }
}

KvCache::KvCache(std::size_t layers, std::size_t tokens_per_chunk, std::size_t window_tokens)
    : layers_(layers),
      tokens_per_chunk_(tokens_per_chunk),
      window_tokens_(window_tokens),
      capacity_(window_chunk_capacity(window_tokens, tokens_per_chunk)) {
  if (capacity_ < 1) throw ConfigError("actor.window_tokens must hold at least one chunk");
}

void KvCache::set_identity(std::vector<LayerKV<float>> kv) {
  if (kv.size() != layers_) throw DimensionError("identity K/V needs one entry per layer");
  identity_ = std::move(kv);
}

std::size_t KvCache::identity_tokens() const { return identity_.empty() ? 0 : identity_[0].k.rows(); }

void KvCache::commit(std::int64_t chunk_index, std::vector<LayerKV<float>> kv) {
  if (kv.size() != layers_) throw DimensionError("chunk K/V needs one entry per layer");
  if (kv[0].k.rows() != tokens_per_chunk_) throw DimensionError("chunk K/V has the wrong token count");
  if (!chunks_.empty() && chunk_index <= chunks_.back().index)
    throw StateError("chunk " + std::to_string(chunk_index) + " committed out of order after " +
                     std::to_string(chunks_.back().index));
  chunks_.push_back({chunk_index, std::move(kv)});
  while (chunks_.size() > capacity_) chunks_.pop_front();
}

std::size_t KvCache::token_count() const { return identity_tokens() + chunks_.size() * tokens_per_chunk_; }

std::vector<std::int64_t> KvCache::chunk_indices() const {
  std::vector<std::int64_t> out;
  for (const auto& e : chunks_) out.push_back(e.index);
  return out;
}

std::vector<LayerKV<float>> KvCache::prefix() const {
  const std::size_t n = token_count();
  if (n == 0) return {};
  std::vector<LayerKV<float>> out(layers_);
  for (std::size_t l = 0; l < layers_; ++l) {
    const std::size_t w = chunks_.empty() ? identity_[l].k.cols() : chunks_.front().kv[l].k.cols();
    Tensor k({n, w}), v({n, w});
    std::size_t off = 0;
    auto put = [&](const LayerKV<float>& src) {
      std::copy(src.k.data().begin(), src.k.data().end(), k.data().begin() + off * w);
      std::copy(src.v.data().begin(), src.v.data().end(), v.data().begin() + off * w);
      off += src.k.rows();
    };
    if (!identity_.empty()) put(identity_[l]);
    for (const auto& e : chunks_) put(e.kv[l]);
    out[l] = {std::move(k), std::move(v)};
  }
  return out;
}

std::vector<std::int64_t> KvCache::column_chunks() const {
  std::vector<std::int64_t> out(identity_tokens(), -1);
  for (const auto& e : chunks_) out.insert(out.end(), tokens_per_chunk_, e.index);
  return out;
}

std::vector<Pos3D> identity_positions(const SegmentConfig& seg) { return chunk_positions(seg, -1.0); }

namespace {

using Model = ActorModel<float>;

std::vector<Pos3D> cond_pos3d(const SegmentConfig& seg, std::uint64_t segment) {
  std::vector<Pos3D> out;
  for (const auto& t : cond_positions(seg, segment)) out.push_back({t.time_index, 0.0, 0.0});
  return out;
}

void check_cond(const SegmentConfig& seg, const ActorConfig& ac, const SegmentCond& cond) {
  if (cond.states.empty() || cond.states.rank() != 2 || cond.states.rows() != seg.cond_tokens_per_segment() ||
      cond.states.cols() != ac.cond_dim)
    throw DimensionError("segment conditioning must be [" + std::to_string(seg.cond_tokens_per_segment()) + ", " +
                         std::to_string(ac.cond_dim) + "], got " + shape_str(cond.states.shape()));
}

void check_chunk(const SegmentConfig& seg, const ActorConfig& ac, const Tensor& t, const char* what) {
  if (t.empty() || t.rank() != 2 || t.rows() != seg.tokens_per_video_chunk() || t.cols() != ac.latent_dim)
    throw DimensionError(std::string(what) + " must be [" + std::to_string(seg.tokens_per_video_chunk()) + ", " +
                         std::to_string(ac.latent_dim) + "], got " + shape_str(t.shape()));
}

Tensor stack_rows(const std::vector<const Tensor*>& parts) {
  std::size_t rows = 0;
  for (auto* t : parts) rows += t->rows();
  const std::size_t w = parts.front()->cols();
  Tensor out({rows, w});
  std::size_t off = 0;
  for (auto* t : parts) {
    std::copy(t->data().begin(), t->data().end(), out.data().begin() + off);
    off += t->size();
  }
  return out;
}

std::vector<Tensor> split_rows(const Tensor& t, std::size_t parts) {
  const std::size_t rows = t.rows() / parts, w = t.cols();
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < parts; ++i) {
    Tensor o({rows, w});
    std::copy(t.data().begin() + i * rows * w, t.data().begin() + (i + 1) * rows * w, o.data().begin());
    out.push_back(std::move(o));
  }
  return out;
}

// One pass of a block of chunks against the cache. Query rows of chunk c see
// identity, cached chunks inside c's window, and block chunks up to c.
std::vector<Tensor> cached_pass(const Model& model, const SegmentConfig& seg, const KvCache& cache,
                                const std::vector<std::int64_t>& chunks, const std::vector<const Tensor*>& latents,
                                const std::vector<int>& levels, const SegmentCond& cond, std::uint64_t segment,
                                std::vector<LayerKV<float>>* kv_out) {
  const auto& ac = model.config();
  const std::size_t tpc = seg.tokens_per_video_chunk();
  const std::size_t B = chunks.size(), Q = B * tpc;
  const auto cap = static_cast<std::int64_t>(cache.capacity_chunks());
  const auto cols = cache.column_chunks();
  const std::size_t P = cols.size();

  auto mask = std::make_shared<BoolMatrix>(Q, P + Q, false);
  for (std::size_t i = 0; i < B; ++i) {
    const std::int64_t c = chunks[i], lo = c - cap + 1;
    for (std::size_t a = 0; a < tpc; ++a) {
      const std::size_t row = i * tpc + a;
      if (a > 0 && ac.mask_mode != MaskMode::token_causal) {
        std::copy_n(mask->bits.begin() + (row - 1) * (P + Q), P + Q, mask->bits.begin() + row * (P + Q));
        continue;
      }
      for (std::size_t col = 0; col < P; ++col)
        if (cols[col] < 0 || (cols[col] >= lo && cols[col] <= c)) mask->set(row, col, true);
      for (std::size_t j = 0; j < B; ++j) {
        const std::int64_t cj = chunks[j];
        if (cj < lo || cj > c) continue;
        if (cj < c && ac.condition_on_finalized) continue;
        for (std::size_t b = 0; b < tpc; ++b) {
          if (cj == c && ac.mask_mode == MaskMode::token_causal && b > a) continue;
          mask->set(row, P + j * tpc + b, true);
        }
      }
    }
  }

  Model::Tokens tok;
  tok.latents = stack_rows(latents);
  for (std::size_t i = 0; i < B; ++i) {
    const auto ps = chunk_positions(seg, static_cast<double>(chunks[i]));
    tok.positions.insert(tok.positions.end(), ps.begin(), ps.end());
    tok.levels.insert(tok.levels.end(), tpc, levels[i]);
  }
  Model::Cond mc{cond.states, cond_pos3d(seg, segment)};
  auto cross = std::make_shared<BoolMatrix>(Q, mc.states.rows(), true);

  const auto prefix = cache.prefix();
  Graph<float> g(false);
  Model::Request req;
  req.tokens = &tok;
  req.cond = &mc;
  req.prefix = prefix.empty() ? nullptr : &prefix;
  req.self_mask = mask;
  req.cross_mask = cross;
  req.kv_out = kv_out;
  const Var out = model.forward(g, req);
  return split_rows(g.value(out), B);
}

}  // namespace

Tensor forward_chunk(const ActorModel<float>& model, const SegmentConfig& seg, const Tensor& noisy_chunk, int level,
                     const SegmentCond& cond, std::uint64_t segment_index, const KvCache& cache,
                     std::int64_t chunk_index) {
  check_chunk(seg, model.config(), noisy_chunk, "noisy chunk");
  check_cond(seg, model.config(), cond);
  if (model.config().use_identity_ref && !cache.has_identity())
    throw StateError("KV cache has no identity block but actor.use_identity_ref is true");
  return cached_pass(model, seg, cache, {chunk_index}, {&noisy_chunk}, {level}, cond, segment_index, nullptr)[0];
}

void commit_chunk(const ActorModel<float>& model, const SegmentConfig& seg, KvCache& cache, const Tensor& clean_chunk,
                  const SegmentCond& cond, std::uint64_t segment_index, std::int64_t chunk_index) {
  check_chunk(seg, model.config(), clean_chunk, "clean chunk");
  check_cond(seg, model.config(), cond);
  if (model.config().use_identity_ref && !cache.has_identity())
    throw StateError("KV cache has no identity block but actor.use_identity_ref is true");
  std::vector<LayerKV<float>> kv;
  cached_pass(model, seg, cache, {chunk_index}, {&clean_chunk}, {0}, cond, segment_index, &kv);
  cache.commit(chunk_index, std::move(kv));
}

ActorSession::ActorSession(const ActorModel<float>& model, GenerationOptions opts, const IdentityRef* identity)
    : model_(model),
      opts_(std::move(opts)),
      sched_(NoiseSchedule::cosine(opts_.steps)),
      cache_(model.config().layers, opts_.segment.tokens_per_video_chunk(), model.config().window_tokens) {
  opts_.segment.validate();
  const auto& ac = model_.config();
  if (opts_.segment.latent_channels != ac.latent_dim)
    throw ConfigError("segment.latent_channels " + std::to_string(opts_.segment.latent_channels) +
                      " does not match actor.latent_dim " + std::to_string(ac.latent_dim));
  if (!ac.use_identity_ref) return;
  if (!identity) throw StateError("an identity reference is required when actor.use_identity_ref is true");
  check_chunk(opts_.segment, ac, identity->latents, "identity reference");
  identity_ = *identity;
  if (!opts_.use_cache) return;

  const std::size_t n = identity->latents.rows();
  Model::Tokens tok{identity->latents, std::vector<int>(n, 0), identity_positions(opts_.segment)};
  Graph<float> g(false);
  Model::Request req;
  req.tokens = &tok;
  req.self_mask = std::make_shared<BoolMatrix>(n, n, true);
  std::vector<LayerKV<float>> kv;
  req.kv_out = &kv;
  model_.forward(g, req);
  cache_.set_identity(std::move(kv));
}

Tensor ActorSession::initial_noise(std::uint64_t global_chunk) const {
  if (opts_.noise_override) {
    Tensor t = opts_.noise_override(global_chunk);
    check_chunk(opts_.segment, model_.config(), t, "noise override");
    return t;
  }
  Rng rng(derive_seed({opts_.seed, global_chunk}));
  Tensor t({opts_.segment.tokens_per_video_chunk(), model_.config().latent_dim});
  for (auto& x : t.data()) x = static_cast<float>(rng.normal());
  return t;
}

std::vector<Tensor> ActorSession::run_block(const std::vector<std::int64_t>& chunks,
                                            const std::vector<const Tensor*>& latents, const std::vector<int>& levels,
                                            const SegmentCond& cond, std::uint64_t segment) {
  if (!opts_.use_cache) return run_block_recompute(chunks, latents, levels, cond, segment);
  return cached_pass(model_, opts_.segment, cache_, chunks, latents, levels, cond, segment, nullptr);
}

// Full-history oracle: rebuilds the visible sequence [identity | history |
// block] and applies the rule-based windowed mask.
std::vector<Tensor> ActorSession::run_block_recompute(const std::vector<std::int64_t>& chunks,
                                                      const std::vector<const Tensor*>& latents,
                                                      const std::vector<int>& levels, const SegmentCond& cond,
                                                      std::uint64_t segment) {
  const auto& ac = model_.config();
  const auto& seg = opts_.segment;
  const std::size_t tpc = seg.tokens_per_video_chunk();
  const std::size_t id = identity_ ? tpc : 0;
  const std::size_t H = history_.size(), B = chunks.size();
  const std::size_t n = id + (H + B) * tpc;

  Model::Tokens tok;
  std::vector<const Tensor*> parts;
  std::vector<std::uint64_t> row_segment;  // per chunk
  if (identity_) {
    parts.push_back(&identity_->latents);
    const auto ps = identity_positions(seg);
    tok.positions.insert(tok.positions.end(), ps.begin(), ps.end());
    tok.levels.insert(tok.levels.end(), tpc, 0);
  }
  auto add_chunk = [&](std::int64_t c, const Tensor* lat, int level, std::uint64_t s) {
    parts.push_back(lat);
    const auto ps = chunk_positions(seg, static_cast<double>(c));
    tok.positions.insert(tok.positions.end(), ps.begin(), ps.end());
    tok.levels.insert(tok.levels.end(), tpc, level);
    row_segment.push_back(s);
  };
  for (const auto& h : history_) add_chunk(h.index, &h.latents, 0, h.segment);
  for (std::size_t i = 0; i < B; ++i) add_chunk(chunks[i], latents[i], levels[i], segment);
  tok.latents = stack_rows(parts);

  const MaskSpec spec{id, H + B, tpc, ac.mask_mode};
  auto self = std::make_shared<BoolMatrix>(
      build_windowed_self_mask(spec, window_chunk_capacity(ac.window_tokens, tpc)).allowed);
  if (ac.condition_on_finalized)
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < i; ++j)
        for (std::size_t a = 0; a < tpc; ++a)
          for (std::size_t b = 0; b < tpc; ++b) self->set(id + (H + i) * tpc + a, id + (H + j) * tpc + b, false);

  // Conditioning of every segment still referenced, in segment order.
  std::vector<std::uint64_t> segs;
  for (auto s : row_segment)
    if (segs.empty() || segs.back() != s) segs.push_back(s);
  Model::Cond mc;
  std::vector<const Tensor*> cparts;
  for (auto s : segs) {
    const SegmentCond& sc = s == segment ? cond : conds_.at(s - conds_base_);
    cparts.push_back(&sc.states);
    const auto ps = cond_pos3d(seg, s);
    mc.positions.insert(mc.positions.end(), ps.begin(), ps.end());
  }
  mc.states = stack_rows(cparts);
  const std::size_t cpt = seg.cond_tokens_per_segment();
  auto cross = std::make_shared<BoolMatrix>(n, mc.states.rows(), false);
  for (std::size_t c = 0; c < row_segment.size(); ++c) {
    const std::size_t si = static_cast<std::size_t>(std::find(segs.begin(), segs.end(), row_segment[c]) - segs.begin());
    for (std::size_t a = 0; a < tpc; ++a)
      for (std::size_t k = 0; k < cpt; ++k) cross->set(id + c * tpc + a, si * cpt + k, true);
  }

  Graph<float> g(false);
  Model::Request req;
  req.tokens = &tok;
  req.cond = &mc;
  req.self_mask = self;
  req.cross_mask = cross;
  const Var out = model_.forward(g, req);
  const Tensor& all = g.value(out);
  const std::size_t w = all.cols();
  std::vector<Tensor> res;
  for (std::size_t i = 0; i < B; ++i) {
    Tensor o({tpc, w});
    const std::size_t start = (id + (H + i) * tpc) * w;
    std::copy(all.data().begin() + start, all.data().begin() + start + tpc * w, o.data().begin());
    res.push_back(std::move(o));
  }
  return res;
}

void ActorSession::commit(std::int64_t chunk, const Tensor& clean, const SegmentCond& cond, std::uint64_t segment) {
  ++stats_.commit_passes;
  if (opts_.use_cache) {
    commit_chunk(model_, opts_.segment, cache_, clean, cond, segment, chunk);
    return;
  }
  history_.push_back({chunk, segment, clean});
  // Cached keys of a chunk were computed while its own window was visible, so
  // each layer reaches one window further back. Keep that whole cone.
  const std::size_t cap = window_chunk_capacity(model_.config().window_tokens, opts_.segment.tokens_per_video_chunk());
  while (history_.size() > cap * model_.config().layers) history_.erase(history_.begin());
}

std::vector<LatentChunk> ActorSession::generate_segment(const SegmentCond& cond, const ChunkCallback& on_chunk) {
  const auto& seg = opts_.segment;
  const std::uint64_t s = next_segment_;
  if (cond.states.empty() || cond.states.rank() != 2 || cond.states.rows() != seg.cond_tokens_per_segment())
    throw TruncationError("segment " + std::to_string(s) + " conditioning has " +
                              std::to_string(cond.states.empty() || cond.states.rank() != 2 ? 0 : cond.states.rows()) +
                              " of " + std::to_string(seg.cond_tokens_per_segment()) + " states",
                          last_complete_);
  check_cond(seg, model_.config(), cond);

  if (!opts_.use_cache) {
    // Keep only conditioning that history can still reference.
    if (conds_.empty()) conds_base_ = s;
    conds_.push_back(cond);
    const std::uint64_t oldest = history_.empty() ? s : history_.front().segment;
    while (conds_base_ < oldest) {
      conds_.erase(conds_.begin());
      ++conds_base_;
    }
  }

  const std::size_t V = seg.video_chunks_per_segment;
  const int N = sched_.steps();
  const ScheduleMatrix m =
      opts_.schedule == ScheduleKind::pyramid ? build_pyramid_matrix(V, N) : build_sequential_matrix(V, N);
  const std::int64_t base = static_cast<std::int64_t>(s * V);
  std::vector<Tensor> lat(V);
  for (std::size_t j = 0; j < V; ++j) lat[j] = initial_noise(static_cast<std::uint64_t>(base) + j);

  std::vector<LatentChunk> out;
  for (std::size_t r = 0; r < m.rounds(); ++r) {
    const auto act = m.active(r);
    if (act.empty()) continue;
    std::vector<std::int64_t> chunks;
    std::vector<const Tensor*> ptrs;
    std::vector<int> levels;
    for (auto j : act) {
      chunks.push_back(base + static_cast<std::int64_t>(j));
      ptrs.push_back(&lat[j]);
      levels.push_back(m.at(r, j));
    }
    auto vel = run_block(chunks, ptrs, levels, cond, s);
    ++stats_.denoise_rounds;
    for (std::size_t i = 0; i < act.size(); ++i) {
      const auto j = act[i];
      lat[j] = ddim_step(lat[j], vel[i], m.at(r, j), m.next(r, j), sched_);
    }
    for (auto j : act) {
      if (m.next(r, j) != 0) continue;
      const std::int64_t c = base + static_cast<std::int64_t>(j);
      commit(c, lat[j], cond, s);
      last_complete_ = c;
      ++stats_.chunks;
      LatentChunk lc{s, static_cast<std::uint32_t>(j), static_cast<std::uint64_t>(c), lat[j]};
      if (on_chunk) on_chunk(lc);
      out.push_back(std::move(lc));
    }
  }
  ++next_segment_;
  return out;
}

ChunkStream::ChunkStream(const ActorModel<float>& model, GenerationOptions opts, const IdentityRef* identity,
                         CondSource source)
    : session_(model, std::move(opts), identity), source_(std::move(source)) {}

std::optional<LatentChunk> ChunkStream::next() {
  if (!pending_.empty()) {
    auto c = std::move(pending_.front());
    pending_.pop_front();
    return c;
  }
  if (done_) return std::nullopt;
  auto cond = source_();
  if (!cond) {
    done_ = true;
    return std::nullopt;
  }
  session_.generate_segment(*cond, [&](const LatentChunk& c) { pending_.push_back(c); });
  return next();
}

}  // namespace xstream
