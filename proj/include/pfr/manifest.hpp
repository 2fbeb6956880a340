#pragma once

#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "pfr/common.hpp"

namespace pfr {

// Flat key = value run manifest written next to every CLI output: the
// resolved configuration plus version and output digests. Deliberately free
// of timestamps so reruns of the same seed produce identical files.
class Manifest {
public:
    void set(const std::string& key, const std::string& value) {
        for (auto& [k, v] : entries_) {
            if (k == key) {
                v = value;
                return;
            }
        }
        entries_.emplace_back(key, value);
    }

    void set(const std::string& key, double value) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.10g", value);
        set(key, std::string(buf));
    }

    void set(const std::string& key, int64_t value) { set(key, std::to_string(value)); }
    void set(const std::string& key, uint64_t value) { set(key, std::to_string(value)); }
    void set(const std::string& key, int value) { set(key, std::to_string(value)); }
    void set(const std::string& key, bool value) {
        set(key, std::string(value ? "true" : "false"));
    }

    std::string get(const std::string& key) const {
        for (const auto& [k, v] : entries_) {
            if (k == key) return v;
        }
        throw InvalidArgument("manifest: missing key " + key);
    }

    bool contains(const std::string& key) const {
        for (const auto& [k, v] : entries_) {
            if (k == key) return true;
        }
        return false;
    }

    std::string to_text() const {
        std::string out = "# pfr run manifest\n";
        for (const auto& [k, v] : entries_) {
            out += k + " = " + v + "\n";
        }
        return out;
    }

    void write(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw IoError("cannot write manifest: " + path);
        f << to_text();
    }

    static Manifest parse(const std::string& text) {
        Manifest m;
        size_t pos = 0;
        while (pos < text.size()) {
            size_t eol = text.find('\n', pos);
            if (eol == std::string::npos) eol = text.size();
            std::string line = text.substr(pos, eol - pos);
            pos = eol + 1;
            if (line.empty() || line[0] == '#') continue;
            const size_t eq = line.find('=');
            if (eq == std::string::npos) continue;
            auto trim = [](std::string s) {
                const auto a = s.find_first_not_of(" \t");
                const auto b = s.find_last_not_of(" \t");
                return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
            };
            m.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
        return m;
    }

    static Manifest read(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw IoError("cannot read manifest: " + path);
        std::string text((std::istreambuf_iterator<char>(f)),
                         std::istreambuf_iterator<char>());
        return parse(text);
    }

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace pfr
