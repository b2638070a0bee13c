#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dn/common.hpp"

namespace dn {

// Sectioned key-value experiment config. The default document defines the
// schema: loading a file with a key absent from the defaults fails fast.
class Config {
public:
    static Config defaults();
    static Config parse(const std::string& text);    // bare document, no schema check
    static Config load_file(const std::string& path);  // defaults overlaid with the file

    bool has(const std::string& section, const std::string& key) const;
    const std::string& get_str(const std::string& section, const std::string& key) const;
    std::int64_t get_int(const std::string& section, const std::string& key) const;
    real get_real(const std::string& section, const std::string& key) const;
    bool get_bool(const std::string& section, const std::string& key) const;
    std::vector<std::int64_t> get_int_list(const std::string& section, const std::string& key) const;

    void set(const std::string& section, const std::string& key, const std::string& value);
    void set_int(const std::string& section, const std::string& key, std::int64_t v);
    void set_real(const std::string& section, const std::string& key, real v);

    // Overlays other onto *this; every key in other must already exist here.
    void merge_checked(const Config& other);

    // Canonical serialization (sorted sections and keys) and its hash.
    std::string canonical() const;
    std::uint64_t fingerprint() const;
    // Fingerprint restricted to a subset of sections (stage caching).
    std::uint64_t fingerprint_of(const std::vector<std::string>& sections) const;

    void save(const std::string& path) const;

    const std::map<std::string, std::map<std::string, std::string>>& sections() const {
        return sections_;
    }

private:
    std::map<std::string, std::map<std::string, std::string>> sections_;
};

std::string format_fingerprint(std::uint64_t fp);

}  // namespace dn
