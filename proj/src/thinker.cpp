#include "xstream/thinker.hpp"

#include <string>

#include "xstream/config.hpp"
#include "xstream/mmrope.hpp"
#include "xstream/rng.hpp"

namespace xstream {

void ThinkerConfig::validate() const {
  if (vocab_text < 1 || vocab_audio < 1) throw ConfigError("thinker vocabularies must be >= 1");
  if (hidden_dim < 2 || heads < 1 || layers < 1) throw ConfigError("thinker dims must be >= 1");
  if (hidden_dim % heads != 0)
    throw ConfigError("thinker.hidden_dim " + std::to_string(hidden_dim) + " not divisible by thinker.heads " +
                      std::to_string(heads));
  if ((hidden_dim / heads) % 2 != 0) throw ConfigError("thinker head dim must be even");
  if (text_per_segment < 1 || audio_per_segment < 1) throw ConfigError("segment token counts must be >= 1");
  if (context_limit < segment_tokens())
    throw ConfigError("thinker.context_limit " + std::to_string(context_limit) + " is below one segment (" +
                      std::to_string(segment_tokens()) + " tokens)");
}

ThinkerConfig ThinkerConfig::from_config(const Config& cfg) {
  auto sz = [&](const char* key) {
    const auto v = cfg.get_int(key);
    if (v < 0) throw ConfigError(std::string("config key '") + key + "' must be >= 0");
    return static_cast<std::size_t>(v);
  };
  ThinkerConfig t;
  t.vocab_text = sz("thinker.vocab_text");
  t.vocab_audio = sz("thinker.vocab_audio");
  t.hidden_dim = sz("thinker.hidden_dim");
  t.context_limit = sz("thinker.context_limit");
  t.layers = sz("thinker.layers");
  t.heads = sz("thinker.heads");
  t.seed = cfg.get_u64("thinker.seed");
  t.text_per_segment = static_cast<std::uint32_t>(sz("segment.text_tokens"));
  t.audio_per_segment = static_cast<std::uint32_t>(sz("segment.audio_tokens"));
  t.rope_base = cfg.get_double("rope.base");
  t.validate();
  return t;
}

ConversationContext::ConversationContext(std::size_t limit) : limit_(limit) {
  if (limit < 1) throw ConfigError("context limit must be >= 1");
}

void ConversationContext::push(ContextEntry e) {
  ring_.push_back(e);
  while (ring_.size() > limit_) {
    ring_.pop_front();
    ++evicted_;
  }
}

std::vector<std::uint32_t> text_to_tokens(std::string_view text) {
  std::vector<std::uint32_t> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(c);
  return out;
}

void ingest_query(ConversationContext& ctx, std::span<const std::uint32_t> tokens, Modality modality,
                  const ThinkerConfig& cfg) {
  std::size_t vocab = 0;
  if (modality == Modality::text)
    vocab = cfg.vocab_text;
  else if (modality == Modality::audio)
    vocab = cfg.vocab_audio;
  else
    throw InputError("queries must be text or audio, got " + std::string(modality_name(modality)));
  for (auto id : tokens)
    if (id >= vocab)
      throw InputError(std::string(modality_name(modality)) + " token id " + std::to_string(id) +
                       " outside vocabulary of " + std::to_string(vocab));
  for (auto id : tokens) ctx.push({id, modality, Role::user});
}

namespace {

template <typename T>
BasicTensor<T> randn(Rng& rng, Shape shape, double stddev) {
  BasicTensor<T> t(std::move(shape));
  for (auto& x : t.data()) x = static_cast<T>(rng.normal() * stddev);
  return t;
}

std::string blk(std::size_t l, const char* rest) { return "blk" + std::to_string(l) + "." + rest; }

}  // namespace

template <typename T>
ThinkerModel<T>::ThinkerModel(const ThinkerConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t D = cfg_.hidden_dim;
  Rng rng(derive_seed({cfg_.seed, 0x7468696eULL}));
  auto vec = [&](const std::string& name, std::size_t n, T v) { params_.add(name, BasicTensor<T>::full({n}, v)); };
  params_.add("emb", randn<T>(rng, {cfg_.vocab_text + cfg_.vocab_audio, D}, 1.0));
  params_.add("role", randn<T>(rng, {2, D}, 1.0));
  const double ws = 1.0 / std::sqrt(static_cast<double>(D));
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    vec(blk(l, "ln1.g"), D, T(1));
    vec(blk(l, "ln1.b"), D, T(0));
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) params_.add(blk(l, w), randn<T>(rng, {D, D}, ws));
    vec(blk(l, "attn.bo"), D, T(0));
    vec(blk(l, "ln2.g"), D, T(1));
    vec(blk(l, "ln2.b"), D, T(0));
    params_.add(blk(l, "mlp.w1"), randn<T>(rng, {D, 2 * D}, ws));
    vec(blk(l, "mlp.b1"), 2 * D, T(0));
    params_.add(blk(l, "mlp.w2"), randn<T>(rng, {2 * D, D}, 1.0 / std::sqrt(2.0 * D)));
    vec(blk(l, "mlp.b2"), D, T(0));
  }
  vec("out.ln.g", D, T(1));
  vec("out.ln.b", D, T(0));
  params_.add("head.text", randn<T>(rng, {D, cfg_.vocab_text}, ws));
  params_.add("head.audio", randn<T>(rng, {D, cfg_.vocab_audio}, ws));
}

template <typename T>
std::uint32_t ThinkerModel<T>::table_index(const ContextEntry& e) const {
  if (e.modality == Modality::text) return e.id;
  if (e.modality == Modality::audio) return static_cast<std::uint32_t>(cfg_.vocab_text) + e.id;
  throw InputError("thinker context holds only text and audio tokens");
}

template <typename T>
template <typename Store>
Var ThinkerModel<T>::forward_impl(const ThinkerConfig& cfg, Store& P, Graph<T>& g, const Request& req) {
  const std::size_t Q = req.rows.size();
  if (Q == 0) throw DimensionError("thinker forward: no tokens");
  if (req.roles.size() != Q || req.positions.size() != Q)
    throw DimensionError("thinker forward: roles/positions must match tokens");
  const std::size_t prefix_rows = (req.prefix && !req.prefix->empty()) ? (*req.prefix)[0].k.rows() : 0;
  if (prefix_rows > 0 && req.prefix->size() != cfg.layers)
    throw DimensionError("thinker forward: prefix needs one entry per layer");
  if (!req.mask || req.mask->rows != Q || req.mask->cols != prefix_rows + Q)
    throw DimensionError("thinker forward: mask shape mismatch");

  auto p = [&](const std::string& n) { return g.param(P.get(n)); };
  auto ln = [&](Var x, const std::string& n) { return g.layernorm(x, p(n + ".g"), p(n + ".b")); };

  std::vector<std::uint32_t> role_ids(Q);
  for (std::size_t i = 0; i < Q; ++i) role_ids[i] = static_cast<std::uint32_t>(req.roles[i]);
  Var x = g.add(g.gather_rows(p("emb"), req.rows), g.gather_rows(p("role"), role_ids));

  std::vector<Pos3D> pos(Q);
  for (std::size_t i = 0; i < Q; ++i) pos[i] = {req.positions[i], 0.0, 0.0};
  const auto tab = build_rope_table<T>(pos, RopeParams::one_dimensional(cfg.hidden_dim / cfg.heads, cfg.rope_base),
                                       cfg.heads);

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    Var h = ln(x, blk(l, "ln1"));
    Var q = g.pair_rotate(g.matmul(h, p(blk(l, "attn.wq"))), tab.cos, tab.sin);
    Var k = g.pair_rotate(g.matmul(h, p(blk(l, "attn.wk"))), tab.cos, tab.sin);
    Var v = g.matmul(h, p(blk(l, "attn.wv")));
    if (req.kv_out) {
      if (req.kv_out->size() < cfg.layers) req.kv_out->resize(cfg.layers);
      (*req.kv_out)[l] = {g.value(k), g.value(v)};
    }
    if (prefix_rows > 0) {
      const Var ks[2] = {g.input_ref((*req.prefix)[l].k), k};
      const Var vs[2] = {g.input_ref((*req.prefix)[l].v), v};
      k = g.concat_rows(ks);
      v = g.concat_rows(vs);
    }
    x = g.add(x, g.linear(g.attention(q, k, v, cfg.heads, req.mask), p(blk(l, "attn.wo")), p(blk(l, "attn.bo"))));
    h = ln(x, blk(l, "ln2"));
    h = g.linear(g.silu(g.linear(h, p(blk(l, "mlp.w1")), p(blk(l, "mlp.b1")))), p(blk(l, "mlp.w2")),
                 p(blk(l, "mlp.b2")));
    x = g.add(x, h);
  }
  return ln(x, "out.ln");
}

template <typename T>
Var ThinkerModel<T>::forward(Graph<T>& g, const Request& req) {
  return forward_impl(cfg_, params_, g, req);
}

template <typename T>
Var ThinkerModel<T>::forward(Graph<T>& g, const Request& req) const {
  return forward_impl(cfg_, params_, g, req);
}

template <typename T>
Var ThinkerModel<T>::text_logits(Graph<T>& g, Var hidden) {
  return g.matmul(hidden, g.param(params_.get("head.text")));
}

template <typename T>
Var ThinkerModel<T>::audio_logits(Graph<T>& g, Var hidden) {
  return g.matmul(hidden, g.param(params_.get("head.audio")));
}

template class ThinkerModel<float>;
template class ThinkerModel<double>;

namespace {

std::uint32_t argmax_logit(std::span<const float> hidden, const Tensor& head) {
  const std::size_t D = head.rows(), V = head.cols();
  std::uint32_t best = 0;
  double best_v = 0.0;
  for (std::size_t j = 0; j < V; ++j) {
    double s = 0.0;
    for (std::size_t d = 0; d < D; ++d) s += static_cast<double>(hidden[d]) * head.at(d, j);
    if (j == 0 || s > best_v) {
      best_v = s;
      best = static_cast<std::uint32_t>(j);
    }
  }
  return best;
}

void append_kv(std::vector<LayerKV<float>>& cache, const std::vector<LayerKV<float>>& add) {
  for (std::size_t l = 0; l < cache.size(); ++l) {
    auto grow = [](const Tensor& a, const Tensor& b) {
      Tensor out({a.rows() + b.rows(), a.cols()});
      std::copy(a.data().begin(), a.data().end(), out.data().begin());
      std::copy(b.data().begin(), b.data().end(), out.data().begin() + a.size());
      return out;
    };
    cache[l].k = grow(cache[l].k, add[l].k);
    cache[l].v = grow(cache[l].v, add[l].v);
  }
}

}  // namespace

SegmentOutput step_segment(const ThinkerModel<float>& model, ConversationContext& ctx) {
  if (ctx.empty()) throw StateError("thinker context is empty");
  const auto& cfg = model.config();
  const std::size_t D = cfg.hidden_dim;
  const std::size_t n = ctx.size();
  const std::size_t total = cfg.segment_tokens();

  using Model = ThinkerModel<float>;
  Model::Request pre;
  pre.rows.reserve(n);
  for (const auto& e : ctx.entries()) {
    pre.rows.push_back(model.table_index(e));
    pre.roles.push_back(e.role);
    pre.positions.push_back(static_cast<double>(pre.positions.size()));
  }
  auto causal = std::make_shared<BoolMatrix>(n, n, false);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) causal->set(i, j, true);
  pre.mask = causal;
  std::vector<LayerKV<float>> cache;
  pre.kv_out = &cache;
  Tensor last({1, D});
  {
    Graph<float> g(false);
    const Tensor& h = g.value(model.forward(g, pre));
    std::copy(h.row(n - 1).begin(), h.row(n - 1).end(), last.data().begin());
  }

  const Tensor& head_text = model.params().get("head.text").value;
  const Tensor& head_audio = model.params().get("head.audio").value;
  SegmentOutput out;
  out.hidden = Tensor({total, D});
  std::vector<ContextEntry> emitted;
  for (std::size_t i = 0; i < total; ++i) {
    std::copy(last.data().begin(), last.data().end(), out.hidden.row(i).begin());
    const bool is_text = i < cfg.text_per_segment;
    const std::uint32_t id = argmax_logit(last.row(0), is_text ? head_text : head_audio);
    const ContextEntry e{id, is_text ? Modality::text : Modality::audio, Role::agent};
    (is_text ? out.text : out.audio).push_back(id);
    emitted.push_back(e);
    if (i + 1 == total) break;

    Model::Request step;
    step.rows = {model.table_index(e)};
    step.roles = {Role::agent};
    step.positions = {static_cast<double>(n + i)};
    step.prefix = &cache;
    step.mask = std::make_shared<BoolMatrix>(1, n + i + 1, true);
    std::vector<LayerKV<float>> kv;
    step.kv_out = &kv;
    Graph<float> g(false);
    last = g.value(model.forward(g, step));
    append_kv(cache, kv);
  }
  for (const auto& e : emitted) ctx.push(e);
  return out;
}

}  // namespace xstream
