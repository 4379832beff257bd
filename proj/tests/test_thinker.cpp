#include <doctest.h>

#include <algorithm>

#include "test_support.hpp"
#include "xstream/thinker.hpp"

using namespace xt;

namespace {

ThinkerConfig small_thinker() {
  ThinkerConfig c;
  c.vocab_text = 32;
  c.vocab_audio = 24;
  c.hidden_dim = 16;
  c.heads = 2;
  c.layers = 2;
  c.context_limit = 256;
  return c;
}

ConversationContext user_ctx(const ThinkerConfig& cfg, std::vector<std::uint32_t> ids) {
  ConversationContext ctx(cfg.context_limit);
  ingest_query(ctx, ids, Modality::text, cfg);
  return ctx;
}

}  // namespace

TEST_CASE("conversation ring") {
  const auto cfg = small_thinker();
  ConversationContext ctx(4);
  const std::vector<std::uint32_t> three{1, 2, 3};
  ingest_query(ctx, three, Modality::text, cfg);
  CHECK(ctx.size() == 3);
  CHECK(ctx.entries().front() == ContextEntry{1, Modality::text, Role::user});
  const std::vector<std::uint32_t> two{7, 8};
  ingest_query(ctx, two, Modality::audio, cfg);
  CHECK(ctx.size() == 4);
  CHECK(ctx.evicted() == 1);
  CHECK(ctx.entries().front().id == 2);
  CHECK(ctx.entries().back() == ContextEntry{8, Modality::audio, Role::user});

  const std::vector<std::uint32_t> big{32};
  CHECK_THROWS_AS(ingest_query(ctx, big, Modality::text, cfg), InputError);
  CHECK_THROWS_AS(ingest_query(ctx, three, Modality::video, cfg), InputError);
  CHECK_THROWS_AS(ConversationContext(0), ConfigError);
}

TEST_CASE("ring never exceeds its limit and evicts in order") {
  ConversationContext ctx(8192);
  for (std::uint32_t i = 0; i < 20000; ++i) {
    ctx.push({i % 256, i % 3 ? Modality::audio : Modality::text, Role::agent});
    CHECK(ctx.size() <= 8192);
  }
  CHECK(ctx.entries().front().id == (20000 - 8192) % 256);
  CHECK(ctx.evicted() == 20000 - 8192);

  // 8192 tokens at 39 per segment: about 210 segments, about 7 minutes
  ConversationContext d(8192);
  for (int s = 0; s < 210; ++s)
    for (int j = 0; j < 39; ++j) d.push({0, Modality::text, Role::agent});
  CHECK(d.evicted() == 0);
  for (int j = 0; j < 39; ++j) d.push({0, Modality::text, Role::agent});
  CHECK(d.evicted() > 0);
  CHECK(210 * 2.08 / 60 == doctest::Approx(7.28));
}

TEST_CASE("byte level text tokens") {
  CHECK(text_to_tokens("hi") == std::vector<std::uint32_t>{104, 105});
  CHECK(text_to_tokens("\xc3\xa9") == std::vector<std::uint32_t>{195, 169});
  CHECK(text_to_tokens("").empty());
}

TEST_CASE("segment layout and determinism") {
  const auto cfg = small_thinker();
  ThinkerModel<float> m(cfg);
  auto a = user_ctx(cfg, {3, 1, 4, 1, 5});
  auto b = a;
  const auto x = step_segment(m, a);
  const auto y = step_segment(m, b);
  CHECK(x.text.size() == 13);
  CHECK(x.audio.size() == 26);
  CHECK(x.hidden.shape() == Shape{39, 16});
  for (auto t : x.text) CHECK(t < 32);
  for (auto t : x.audio) CHECK(t < 24);
  CHECK(x.text == y.text);
  CHECK(x.audio == y.audio);
  CHECK(x.hidden == y.hidden);

  // emitted tokens route back as agent entries, text then audio
  REQUIRE(a.size() == 5 + 39);
  for (std::size_t i = 0; i < 39; ++i) {
    const auto& e = a.entries()[5 + i];
    CHECK(e.role == Role::agent);
    CHECK(e.modality == (i < 13 ? Modality::text : Modality::audio));
    CHECK(e.id == (i < 13 ? x.text[i] : x.audio[i - 13]));
  }
  // a second segment continues from the longer context
  const auto z = step_segment(m, a);
  CHECK(z.hidden != x.hidden);

  ConversationContext empty(64);
  CHECK_THROWS_AS(step_segment(m, empty), StateError);
}

TEST_CASE("user token order matters") {
  const auto cfg = small_thinker();
  ThinkerModel<float> m(cfg);
  auto a = user_ctx(cfg, {3, 1, 4, 1, 5});
  auto b = user_ctx(cfg, {5, 1, 4, 1, 3});
  CHECK(max_abs_diff(step_segment(m, a).hidden, step_segment(m, b).hidden) > 1e-6);
}

TEST_CASE("incremental decoding matches a full pass") {
  const auto cfg = small_thinker();
  ThinkerModel<float> m(cfg);
  auto ctx = user_ctx(cfg, {9, 8, 7});
  const auto before = ctx;
  const auto out = step_segment(m, ctx);
  // hidden row i is the last position of the ring plus the first i emitted tokens
  for (std::size_t i : {0u, 1u, 12u, 13u, 38u}) {
    ThinkerModel<float>::Request r;
    std::vector<ContextEntry> seq(before.entries().begin(), before.entries().end());
    for (std::size_t j = 0; j < i; ++j) seq.push_back(ctx.entries()[3 + j]);
    for (const auto& e : seq) {
      r.rows.push_back(m.table_index(e));
      r.roles.push_back(e.role);
      r.positions.push_back(double(r.positions.size()));
    }
    const std::size_t n = seq.size();
    auto mask = std::make_shared<BoolMatrix>(n, n, false);
    for (std::size_t q = 0; q < n; ++q)
      for (std::size_t k = 0; k <= q; ++k) mask->set(q, k, true);
    r.mask = mask;
    Graph<float> g(false);
    const Tensor& h = g.value(m.forward(g, r));
    for (std::size_t d = 0; d < 16; ++d) CHECK(std::abs(h.at(n - 1, d) - out.hidden.at(i, d)) < 1e-5);
  }
}

TEST_CASE("gradient check of the thinker in double") {
  auto cfg = small_thinker();
  cfg.vocab_text = 5;
  cfg.vocab_audio = 4;
  cfg.hidden_dim = 8;
  ThinkerModel<double> m(cfg);
  Rng rng(3);
  for (auto& p : m.params().all())
    for (auto& x : p.value.data()) x = 0.3 * rng.normal();
  ThinkerModel<double>::Request r;
  r.rows = {0, 4, 2, 7, 5, 8};
  r.roles = {Role::user, Role::user, Role::agent, Role::agent, Role::user, Role::agent};
  r.positions = {0, 1, 2, 3, 4, 5};
  auto mask = std::make_shared<BoolMatrix>(6, 6, false);
  for (std::size_t q = 0; q < 6; ++q)
    for (std::size_t k = 0; k <= q; ++k) mask->set(q, k, true);
  r.mask = mask;
  Tensor64 target({6, 5});
  for (auto& x : target.data()) x = rng.normal();
  const auto res = grad_check(
      m.params(), [&](Graph<double>& g) { return g.mse(m.text_logits(g, m.forward(g, r)), g.input(target)); }, 1e-5);
  MESSAGE("worst " << res.worst_param << " rel err " << res.max_rel_error);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("thinker config") {
  auto c = small_thinker();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_thinker();
  c.context_limit = 38;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
