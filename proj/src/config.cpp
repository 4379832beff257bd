#include "xstream/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "xstream/error.hpp"

namespace xstream {

namespace {

struct KeyDefault {
  const char* key;
  const char* value;
};

// Every accepted key with its default.
constexpr KeyDefault kRegistry[] = {
    {"segment.text_tokens", "13"},
    {"segment.audio_tokens", "26"},
    {"segment.video_chunks", "6"},
    {"segment.audio_rate", "12.5"},
    {"segment.fps", "25"},
    {"segment.temporal_compression", "8"},
    {"segment.spatial_compression", "32"},
    {"segment.height", "256"},
    {"segment.width", "256"},
    {"segment.latent_channels", "8"},
    {"rope.base", "10000"},
    {"rope.dim_split", "auto"},
    {"diffusion.steps", "25"},
    {"diffusion.schedule", "cosine"},
    {"diffusion.seed", "0"},
    {"actor.layers", "2"},
    {"actor.model_dim", "64"},
    {"actor.heads", "4"},
    {"actor.cond_dim", "64"},
    {"actor.latent_dim", "8"},
    {"actor.mlp_ratio", "4"},
    {"actor.use_identity_ref", "true"},
    {"actor.mask_mode", "chunk_causal"},
    {"actor.forcing_mode", "diffusion"},
    {"actor.window_tokens", "2048"},
    {"actor.schedule", "pyramid"},
    {"actor.condition_on_finalized", "false"},
    {"actor.init_seed", "1"},
    {"thinker.vocab_text", "256"},
    {"thinker.vocab_audio", "256"},
    {"thinker.hidden_dim", "64"},
    {"thinker.context_limit", "8192"},
    {"thinker.layers", "2"},
    {"thinker.heads", "4"},
    {"thinker.seed", "7"},
    {"stream.queue_capacity", "2"},
    {"stream.pacing", "unthrottled"},
    {"stream.seed", "0"},
    {"stream.port", "7878"},
    {"train.lr", "0.0003"},
    {"train.batch", "8"},
    {"train.chunks", "4"},
    {"train.seed", "0"},
    {"train.log_every", "50"},
    {"data.height", "128"},
    {"data.width", "128"},
    {"data.scene_chunks", "60"},
    {"data.seed", "1234"},
    {"data.blob_sigma", "0.9"},
    {"data.blob_amplitude", "2.0"},
    {"data.max_speed", "0.35"},
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

Config::Config() {
  for (const auto& kd : kRegistry) values_.emplace(kd.key, kd.value);
}

Config Config::from_file(const std::string& path) {
  Config c;
  c.load_file(path);
  return c;
}

void Config::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  load_string(ss.str(), path);
}

void Config::load_string(std::string_view text, const std::string& origin) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    ++line_no;
    std::string line = trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
    set(trim(std::string_view(line).substr(0, eq)), trim(std::string_view(line).substr(eq + 1)));
  }
}

void Config::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
}

void Config::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos)
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& Config::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::int64_t Config::get_int(const std::string& key) const {
  const auto& v = get(key);
  std::int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

std::uint64_t Config::get_u64(const std::string& key) const {
  const auto& v = get(key);
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config key '" + key + "' expects an unsigned integer, got '" + v + "'");
  return out;
}

double Config::get_double(const std::string& key) const {
  const auto& v = get(key);
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
  }
}

bool Config::get_bool(const std::string& key) const {
  const auto& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "' expects a boolean, got '" + v + "'");
}

bool Config::is_known(const std::string& key) const {
  return values_.count(key) != 0;
}

std::vector<std::string> Config::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_) out.push_back(k);
  return out;
}

std::string Config::dump() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

}  // namespace xstream
