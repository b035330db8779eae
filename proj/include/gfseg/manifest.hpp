#pragma once

// Flat "key = value" text files with dotted keys. Used for every sidecar
// manifest (banks, checkpoints, registries, datasets) and for config files.
// Write order is insertion order, so serialization is deterministic.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gfseg/errors.hpp"

namespace gfseg {

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

} // namespace detail

class Manifest {
public:
    Manifest() = default;

    static Manifest load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw DataError("cannot open manifest: " + path.string());
        Manifest m;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const std::string t = detail::trim(line);
            if (t.empty() || t[0] == '#') continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
            m.set(detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
        }
        return m;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw DataError("cannot write manifest: " + path.string());
        for (const auto& [k, v] : entries_) os << k << " = " << v << "\n";
        if (!os) throw DataError("short manifest write: " + path.string());
    }

    void set(const std::string& key, const std::string& value) {
        auto it = index_.find(key);
        if (it == index_.end()) {
            index_[key] = entries_.size();
            entries_.emplace_back(key, value);
        } else {
            entries_[it->second].second = value;
        }
    }
    void set(const std::string& key, std::int64_t v) { set(key, std::to_string(v)); }
    void set(const std::string& key, std::uint64_t v) { set(key, std::to_string(v)); }

    bool has(const std::string& key) const { return index_.count(key) != 0; }

    const std::string& get(const std::string& key) const {
        auto it = index_.find(key);
        if (it == index_.end()) throw DataError("manifest key missing: " + key);
        return entries_[it->second].second;
    }
    std::string get_or(const std::string& key, const std::string& fallback) const {
        auto it = index_.find(key);
        return it == index_.end() ? fallback : entries_[it->second].second;
    }

    std::int64_t get_int(const std::string& key) const {
        const std::string& s = get(key);
        try {
            return std::stoll(s);
        } catch (const std::exception&) {
            throw DataError("manifest key '" + key + "' is not an integer: " + s);
        }
    }
    double get_double(const std::string& key) const {
        const std::string& s = get(key);
        try {
            return std::stod(s);
        } catch (const std::exception&) {
            throw DataError("manifest key '" + key + "' is not a number: " + s);
        }
    }

    std::vector<std::int64_t> get_int_list(const std::string& key) const {
        std::vector<std::int64_t> out;
        const std::string& s = get(key);
        std::istringstream is(s);
        std::string item;
        while (std::getline(is, item, ',')) {
            const std::string t = detail::trim(item);
            if (t.empty()) continue;
            try {
                out.push_back(std::stoll(t));
            } catch (const std::exception&) {
                throw DataError("manifest key '" + key + "' holds a non-integer item: " + t);
            }
        }
        return out;
    }

    template <typename It>
    void set_int_list(const std::string& key, It first, It last) {
        std::ostringstream os;
        for (It it = first; it != last; ++it) {
            if (it != first) os << ',';
            os << static_cast<std::int64_t>(*it);
        }
        set(key, os.str());
    }

    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

private:
    std::vector<std::pair<std::string, std::string>> entries_;
    std::map<std::string, std::size_t> index_;
};

} // namespace gfseg
