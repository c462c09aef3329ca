#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "agrigen/common.hpp"

namespace agrigen {

// ----------------------------------------------------------------------------
// Sectioned key/value run configuration. Parsing is strict: sections and keys
// not present in the schema are rejected. The raw file content is hashed
// (FNV-1a) and that hash is embedded in every produced artifact.
// ----------------------------------------------------------------------------

using ConfigSchema = std::map<std::string, std::set<std::string>>;

/// Every section/key any subcommand understands. One registry keeps the
/// strictness rule simple.
inline const ConfigSchema& config_schema() {
    static const ConfigSchema schema = {
        {"global", {"seed", "threads", "image_size"}},
        {"schedule", {"steps", "beta_start", "beta_end"}},
        {"vae", {"base_channels", "kl_weight", "steps", "batch_size", "lr"}},
        {"embedder", {"dim", "max_len"}},
        {"denoiser", {"base_channels", "time_dim", "attn_dim"}},
        {"diffusion", {"steps", "batch_size", "lr", "clip", "ema_decay"}},
        {"dreambooth",
         {"steps", "lambda", "prior_count", "lr", "clip", "ema_decay", "subject_prompt",
          "class_prompt", "subject_count"}},
        {"translate", {"strength", "scene_count", "prompt"}},
        {"reward", {"epochs", "batch_size", "lr", "split", "records"}},
        {"preference",
         {"epochs", "prompts_per_epoch", "candidates", "top_k", "tau", "lr", "clip", "ema_decay",
          "validation_size"}},
        {"data",
         {"train_per_class", "test_per_class", "caption_pool", "indoor_count", "outdoor_count"}},
        {"experiment", {"ratios", "epochs", "batch_size", "lr", "seeds", "image_size"}},
        {"classifier", {"epochs", "batch_size", "lr", "dropout"}},
        {"metrics", {"is_splits", "fid_samples"}},
        {"pipeline", {"generate_count", "compare_count"}},
    };
    return schema;
}

class RunConfig {
  public:
    static RunConfig parse_string(const std::string& text, const ConfigSchema& schema = config_schema()) {
        RunConfig cfg;
        cfg.content_ = text;
        cfg.hash_ = hash_hex(fnv1a64(text));
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string s = strip(line);
            if (s.empty() || s[0] == '#') continue;
            if (s.front() == '[' && s.back() == ']') {
                section = strip(s.substr(1, s.size() - 2));
                if (!schema.count(section))
                    throw UsageError("config line " + std::to_string(lineno) + ": unknown section [" + section + "]");
                continue;
            }
            const auto eq = s.find('=');
            if (eq == std::string::npos)
                throw UsageError("config line " + std::to_string(lineno) + ": expected key = value");
            const std::string key = strip(s.substr(0, eq));
            const std::string value = strip(s.substr(eq + 1));
            if (section.empty())
                throw UsageError("config line " + std::to_string(lineno) + ": key outside any section");
            if (!schema.at(section).count(key))
                throw UsageError("config line " + std::to_string(lineno) + ": unknown key '" + key +
                                 "' in [" + section + "]");
            cfg.values_[section][key] = value;
        }
        return cfg;
    }

    static RunConfig parse_file(const std::filesystem::path& path,
                                const ConfigSchema& schema = config_schema()) {
        std::ifstream f(path);
        if (!f) throw UsageError("cannot open config file: " + path.string());
        std::ostringstream ss;
        ss << f.rdbuf();
        return parse_string(ss.str(), schema);
    }

    bool has(const std::string& section, const std::string& key) const {
        auto s = values_.find(section);
        return s != values_.end() && s->second.count(key) != 0;
    }

    std::string get_str(const std::string& section, const std::string& key,
                        const std::string& dflt) const {
        auto s = values_.find(section);
        if (s == values_.end()) return dflt;
        auto k = s->second.find(key);
        return k == s->second.end() ? dflt : k->second;
    }

    int64_t get_int(const std::string& section, const std::string& key, int64_t dflt) const {
        if (!has(section, key)) return dflt;
        return std::stoll(get_str(section, key, ""));
    }

    double get_double(const std::string& section, const std::string& key, double dflt) const {
        if (!has(section, key)) return dflt;
        return std::stod(get_str(section, key, ""));
    }

    /// Comma-separated integer list.
    std::vector<int> get_int_list(const std::string& section, const std::string& key,
                                  std::vector<int> dflt) const {
        if (!has(section, key)) return dflt;
        std::vector<int> out;
        std::istringstream ss(get_str(section, key, ""));
        std::string item;
        while (std::getline(ss, item, ',')) out.push_back(std::stoi(strip(item)));
        return out;
    }

    const std::string& content() const { return content_; }
    const std::string& hash() const { return hash_; }

  private:
    static std::string strip(const std::string& s) {
        size_t b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        size_t e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::map<std::string, std::string>> values_;
    std::string content_;
    std::string hash_;
};

} // namespace agrigen
