#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>

#include "test_support.hpp"
#include "xstream/bytes.hpp"
#include "xstream/config.hpp"
#include "xstream/xtar.hpp"

using namespace xt;

TEST_CASE("xtar layout") {
  std::vector<XtarEntry> es{{"ab", Tensor({2}, {1.5f, -2.0f})}};
  const std::string b = encode_xtar(es);
  // magic, version, count, name_len, name, rank, one dim, two floats
  REQUIRE(b.size() == 4 + 1 + 4 + 2 + 2 + 1 + 4 + 8);
  CHECK(b.substr(0, 4) == "XTAR");
  CHECK(std::uint8_t(b[4]) == 1);
  CHECK(std::uint8_t(b[5]) == 1);
  CHECK(b[6] == 0);
  CHECK(std::uint8_t(b[9]) == 2);
  CHECK(b.substr(11, 2) == "ab");
  CHECK(std::uint8_t(b[13]) == 1);
  CHECK(std::uint8_t(b[14]) == 2);
  float f;
  std::memcpy(&f, b.data() + 18, 4);
  CHECK(f == 1.5f);
}

TEST_CASE("xtar round trip is bit exact") {
  std::vector<XtarEntry> es{{"w/one", randn({3, 4, 2}, 1)}, {"", Tensor({1}, {-0.0f})}, {"big", randn({257}, 2)}};
  es[2].tensor[5] = std::numeric_limits<float>::denorm_min();
  const auto back = decode_xtar(encode_xtar(es));
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].name == es[i].name);
    CHECK(back[i].tensor.shape() == es[i].tensor.shape());
    CHECK(std::memcmp(back[i].tensor.data().data(), es[i].tensor.data().data(), 4 * es[i].tensor.size()) == 0);
  }
  CHECK(find_entry(back, "big").size() == 257);
  CHECK_THROWS_AS(find_entry(back, "nope"), StateError);

  const auto path = (std::filesystem::temp_directory_path() / "xs_io_test.xtar").string();
  write_xtar(path, es);
  CHECK(encode_xtar(read_xtar(path)) == encode_xtar(es));
  std::remove(path.c_str());
  CHECK_THROWS_AS(read_xtar(path), IoError);
}

TEST_CASE("xtar rejects damaged archives") {
  std::vector<XtarEntry> es{{"t", randn({2, 2}, 3)}};
  const std::string good = encode_xtar(es);
  std::string bad = good;
  bad[0] = 'Y';
  CHECK_THROWS_AS(decode_xtar(bad), IoError);
  bad = good;
  bad[4] = 9;
  CHECK_THROWS_AS(decode_xtar(bad), IoError);
  CHECK_THROWS_AS(decode_xtar(good.substr(0, good.size() - 1)), IoError);
  CHECK_THROWS_AS(decode_xtar(good + "x"), IoError);
  bad = good;
  bad[13] = 0;  // a zero dim
  CHECK_THROWS_AS(decode_xtar(bad), IoError);
}

TEST_CASE("config registry") {
  Config c;
  CHECK(c.get_int("segment.text_tokens") == 13);
  CHECK(c.get_int("segment.audio_tokens") == 26);
  CHECK(c.get_int("segment.video_chunks") == 6);
  CHECK(c.get_double("segment.audio_rate") == 12.5);
  CHECK(c.get_int("diffusion.steps") == 25);
  CHECK(c.get("diffusion.schedule") == "cosine");
  CHECK(c.get_int("actor.window_tokens") == 2048);
  CHECK(c.get_int("thinker.context_limit") == 8192);
  CHECK(c.get_int("stream.queue_capacity") == 2);
  CHECK(c.get_double("train.lr") == 3e-4);
  CHECK(c.get_int("train.batch") == 8);
  CHECK(c.get_bool("actor.use_identity_ref"));

  SUBCASE("unknown keys name the key") {
    try {
      c.set("actor.bogus", "1");
      FAIL("no throw");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("actor.bogus") != std::string::npos);
    }
    CHECK_THROWS_AS(c.apply_override("nonsense"), ConfigError);
  }
  SUBCASE("file syntax") {
    c.load_string("# comment\n\n  segment.height = 128 \nactor.mask_mode=token_causal\r\n");
    CHECK(c.get_int("segment.height") == 128);
    CHECK(c.get("actor.mask_mode") == "token_causal");
    CHECK_THROWS_AS(c.load_string("segment.height 128"), ConfigError);
    CHECK_THROWS_AS(c.load_string("zzz = 1"), ConfigError);
  }
  SUBCASE("typed reads") {
    c.apply_override("segment.height=abc");
    CHECK_THROWS_AS(c.get_int("segment.height"), ConfigError);
    c.apply_override("actor.use_identity_ref = maybe");
    CHECK_THROWS_AS(c.get_bool("actor.use_identity_ref"), ConfigError);
    c.apply_override("actor.use_identity_ref = no");
    CHECK_FALSE(c.get_bool("actor.use_identity_ref"));
  }
  SUBCASE("dump reloads to the same values") {
    c.apply_override("rope.dim_split=4,2,2");
    Config d;
    d.load_string(c.dump());
    CHECK(d.dump() == c.dump());
  }
}
