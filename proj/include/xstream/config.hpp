#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace xstream {

// Flat `key = value` configuration over a fixed key registry. Unknown keys are
// rejected with the key named in the error.
class Config {
 public:
  Config();

  static Config from_file(const std::string& path);

  void load_file(const std::string& path);
  void load_string(std::string_view text, const std::string& origin = "<string>");
  void set(const std::string& key, const std::string& value);
  // "key=value"
  void apply_override(std::string_view assignment);

  const std::string& get(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  bool is_known(const std::string& key) const;
  std::vector<std::string> keys() const;
  std::string dump() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace xstream
