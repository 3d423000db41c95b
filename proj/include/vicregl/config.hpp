#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace vicregl {

/// Flat key-value configuration document. Keys are dotted paths
/// ("optim.base_lr"); the file format is one `key = value` per line with
/// `#` comments. CLI flags override file values by calling set() afterwards.
class RunConfig {
 public:
  void load_file(const std::string& path);
  void load_string(const std::string& text, const std::string& origin = "<string>");
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  std::string get_str(const std::string& key, const std::string& dflt) const;
  double get_double(const std::string& key, double dflt) const;
  std::size_t get_size(const std::string& key, std::size_t dflt) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t dflt) const;
  bool get_bool(const std::string& key, bool dflt) const;
  std::vector<std::size_t> get_size_list(const std::string& key,
                                         std::vector<std::size_t> dflt) const;

  /// Canonical text: sorted `key = value` lines. Stored next to run outputs
  /// and hashed into checkpoints.
  std::string resolved_text() const;
  std::uint64_t hash() const;

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace vicregl
