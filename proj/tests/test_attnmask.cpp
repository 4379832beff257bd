#include <doctest.h>

#include "test_support.hpp"

using namespace xt;

namespace {

// Independent predicate: who may query q look at?
bool oracle(const MaskSpec& s, std::size_t window, std::size_t q, std::size_t k) {
  const auto chunk = [&](std::size_t i) -> long { return i < s.identity_tokens ? -1 : long((i - s.identity_tokens) / s.tokens_per_chunk); };
  const long cq = chunk(q), ck = chunk(k);
  if (cq < 0) return ck < 0;
  if (ck < 0) return true;
  if (window > 0 && cq - ck >= long(window)) return false;
  return s.mode == MaskMode::chunk_causal ? ck <= cq : k <= q;
}

void check_against_oracle(const MaskSpec& s, std::size_t window) {
  const auto m = window ? build_windowed_self_mask(s, window) : build_self_mask(s);
  REQUIRE(m.rows() == s.total());
  REQUIRE(m.cols() == s.total());
  bool ok = true;
  for (std::size_t q = 0; q < s.total(); ++q) {
    bool any = false;
    for (std::size_t k = 0; k < s.total(); ++k) {
      ok = ok && m(q, k) == oracle(s, window, q, k);
      any = any || m(q, k);
    }
    ok = ok && any;
  }
  CHECK_MESSAGE(ok, "id=" << s.identity_tokens << " chunks=" << s.chunks << " tpc=" << s.tokens_per_chunk
                          << " mode=" << mask_mode_name(s.mode) << " window=" << window);
}

}  // namespace

TEST_CASE("self mask examples") {
  SUBCASE("identity plus two chunks") {
    const auto m = build_self_mask({1, 2, 2, MaskMode::chunk_causal});
    REQUIRE(m.rows() == 5);
    for (std::size_t q : {1u, 2u})
      for (std::size_t k = 0; k < 5; ++k) CHECK(m(q, k) == (k <= 2));
    for (std::size_t q : {3u, 4u})
      for (std::size_t k = 0; k < 5; ++k) CHECK(m(q, k));
    CHECK(m(0, 0));
    for (std::size_t k = 1; k < 5; ++k) CHECK_FALSE(m(0, k));
  }
  SUBCASE("single chunk is bidirectional") {
    const auto m = build_self_mask({0, 1, 4, MaskMode::chunk_causal});
    for (auto b : m.allowed.bits) CHECK(b == 1);
    const auto t = build_self_mask({0, 1, 4, MaskMode::token_causal});
    for (std::size_t q = 0; q < 4; ++q)
      for (std::size_t k = 0; k < 4; ++k) CHECK(t(q, k) == (k <= q));
  }
  SUBCASE("empty") { CHECK_THROWS_AS(build_self_mask({0, 0, 4, MaskMode::chunk_causal}), DimensionError); }
}

TEST_CASE("builder equals brute-force predicate up to 64 tokens") {
  for (auto mode : {MaskMode::chunk_causal, MaskMode::token_causal})
    for (std::size_t id = 0; id <= 4; ++id)
      for (std::size_t tpc = 1; tpc <= 16; ++tpc)
        for (std::size_t chunks = 0; id + chunks * tpc <= 64; ++chunks) {
          if (id + chunks * tpc == 0) continue;
          const MaskSpec s{id, chunks, tpc, mode};
          check_against_oracle(s, 0);
          for (std::size_t w = 1; w <= 3; ++w) check_against_oracle(s, w);
        }
}

TEST_CASE("no query sees a later chunk") {
  for (std::size_t id : {0u, 1u})
    for (std::size_t chunks = 1; chunks <= 4; ++chunks)
      for (std::size_t tpc = 1; tpc <= 4; ++tpc)
        for (auto mode : {MaskMode::chunk_causal, MaskMode::token_causal}) {
          const MaskSpec s{id, chunks, tpc, mode};
          const auto m = build_self_mask(s);
          for (std::size_t q = id; q < s.total(); ++q) {
            const std::size_t cq = (q - id) / tpc;
            for (std::size_t k = id; k < s.total(); ++k)
              if ((k - id) / tpc > cq) CHECK_FALSE(m(q, k));
            for (std::size_t k = 0; k < id; ++k) CHECK(m(q, k));
          }
        }
}

TEST_CASE("one token per chunk is token causal") {
  for (std::size_t id : {0u, 1u, 3u})
    for (std::size_t n = 1; n <= 20; ++n)
      CHECK(build_self_mask({id, n, 1, MaskMode::chunk_causal}) == build_self_mask({id, n, 1, MaskMode::token_causal}));
}

TEST_CASE("identity columns survive the window") {
  const MaskSpec s{2, 10, 3, MaskMode::chunk_causal};
  const auto m = build_windowed_self_mask(s, 2);
  for (std::size_t q = 2; q < s.total(); ++q) {
    CHECK(m(q, 0));
    CHECK(m(q, 1));
  }
  // last chunk sees chunks 8 and 9 only
  const std::size_t q = s.total() - 1;
  for (std::size_t k = 2; k < 2 + 8 * 3; ++k) CHECK_FALSE(m(q, k));
  for (std::size_t k = 2 + 8 * 3; k < s.total(); ++k) CHECK(m(q, k));
}

TEST_CASE("cross mask") {
  const auto a = build_cross_mask(2, 3, 1);
  CHECK(a.rows() == 2);
  CHECK(a.cols() == 3);
  for (auto b : a.allowed.bits) CHECK(b == 1);

  const auto b = build_cross_mask(1, 2, 2);
  CHECK(b.allowed.bits == std::vector<std::uint8_t>{1, 1, 0, 0, 0, 0, 1, 1});

  const SegmentConfig cfg;
  const auto d = build_cross_mask(cfg.video_tokens_per_segment(), cfg.cond_tokens_per_segment(), 3);
  CHECK(d.rows() == 3 * 384);
  CHECK(d.cols() == 3 * 39);
  for (std::size_t q = 0; q < d.rows(); ++q) {
    std::size_t n = 0;
    for (std::size_t k = 0; k < d.cols(); ++k)
      if (d(q, k)) {
        ++n;
        CHECK(k / 39 == q / 384);
      }
    CHECK(n == 39);
  }
  CHECK_THROWS_AS(build_cross_mask(0, 3, 1), DimensionError);
}

TEST_CASE("visible window") {
  const auto w = visible_window(100, 2048, 64, 64);
  REQUIRE(w.size() == 32);
  CHECK(w.front() == 69);
  CHECK(w.back() == 100);
  CHECK(visible_window(3, 2048, 64, 64) == std::vector<std::int64_t>{0, 1, 2, 3});
  CHECK(visible_window(5, 64, 64, 0) == std::vector<std::int64_t>{5});
  CHECK(visible_window(5, 127, 64, 0) == std::vector<std::int64_t>{5});
  CHECK(window_chunk_capacity(2048, 64) == 32);
  CHECK_THROWS_AS(visible_window(5, 63, 64, 0), ConfigError);
  CHECK(parse_mask_mode("token_causal") == MaskMode::token_causal);
  CHECK_THROWS_AS(parse_mask_mode("causal"), ConfigError);
}
