#pragma once

// Flat key=value run configuration. Lines are `key = value`; '#' starts
// a comment; blank lines ignored. Serialization is sorted by key so a
// resolved-config copy is byte-stable.

#include <cstdint>
#include <map>
#include <string>

#include "mpflow/common.hpp"

namespace mpflow {

class Config {
public:
    static Config parse_file(const std::string& path);
    static Config parse_text(const std::string& text);

    bool has(const std::string& key) const { return kv_.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { kv_[key] = value; }

    std::string get_str(const std::string& key) const;
    std::string get_str(const std::string& key, const std::string& fallback) const;
    std::uint64_t get_u64(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
    double get_f64(const std::string& key) const;
    double get_f64(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    std::string serialize() const;
    void write_file(const std::string& path, bool force = false) const;
    const std::map<std::string, std::string>& items() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

}  // namespace mpflow
