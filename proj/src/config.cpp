#include "dn/config.hpp"

#include <fstream>
#include <sstream>

namespace dn {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

Config Config::defaults() {
    Config c;
    auto& s = c.sections_;

    s["run"] = {
        {"seed", "1234"},
    };

    s["corpus"] = {
        {"n_train", "3000"},   {"n_valid", "300"},      {"n_test", "300"},
        {"speakers", "8"},     {"n_phonemes", "24"},    {"n_units", "64"},
        {"feat_dim", "64"},    {"src_feat_dim", "48"},  {"phonemes_min", "4"},
        {"phonemes_max", "8"}, {"dur_min", "1"},        {"dur_max", "4"},
        {"sigma_speaker", "0.5"}, {"sigma_frame", "0.1"}, {"kmeans_iters", "30"},
    };

    s["vae"] = {
        {"latent_dim", "16"},   {"conv_channels", "96"}, {"refiner_layers", "2"},
        {"refiner_heads", "4"}, {"refiner_dim", "128"},  {"ffn_dim", "256"},
        {"dropout", "0.1"},     {"lambda1", "100"},      {"lambda2", "1"},
        {"lambda3", "0.001"},   {"lr", "5e-4"},          {"warmup_steps", "200"},
        {"clip_norm", "2.0"},   {"batch_size", "8"},     {"steps", "1500"},
        {"logvar_min", "-12"},  {"logvar_max", "6"},
    };

    s["schedule"] = {
        {"t_max", "200"},
        {"s", "0.008"},
        {"beta_clip", "0.999"},
    };

    s["diffusion"] = {
        {"hidden_dim", "128"}, {"conv_stacks", "2"},  {"conv_layers_per_stack", "2"},
        {"trunk_layers", "3"}, {"trunk_heads", "4"},  {"ffn_dim", "256"},
        {"dropout", "0.1"},    {"gamma1", "1"},       {"gamma2", "0.25"},
        {"gamma3", "0.005"},   {"lr", "2e-4"},        {"warmup_steps", "200"},
        {"clip_norm", "2.0"},  {"batch_size", "8"},   {"steps", "2000"},
    };

    s["normalize"] = {
        {"t_start", "100"},
        {"step_size", "1"},
    };

    s["cmlm"] = {
        {"dim", "128"},        {"enc_layers", "3"},     {"dec_layers", "3"},
        {"heads", "4"},        {"ffn_dim", "256"},      {"dropout", "0.1"},
        {"p_drop", "0"},       {"label_smoothing", "0.2"}, {"length_bucket_width", "4"},
        {"max_length", "512"}, {"length_loss_weight", "0.2"}, {"lr", "5e-4"},
        {"warmup_steps", "150"}, {"clip_norm", "10"},   {"batch_size", "12"},
        {"steps", "1200"},     {"train_utterances", "1200"},
    };

    s["ar"] = {
        {"lr", "5e-4"},      {"warmup_steps", "150"}, {"clip_norm", "10"},
        {"batch_size", "12"}, {"steps", "900"},       {"label_smoothing", "0.2"},
    };

    s["decode"] = {
        {"iterations", "15"},
        {"omega", "0.5"},
        {"length_mode", "predicted"},
        {"ar_max_len", "256"},
    };

    s["eval"] = {
        {"subset", "0"},
    };

    s["benchmark"] = {
        {"n_utterances", "24"},
        {"phonemes_min", "26"},
        {"phonemes_max", "34"},
        {"iteration_grid", "3,5,7,10,15"},
    };

    s["recipe"] = {
        {"systems", "cmlm,cmlm_cg,cmlm_diffnorm,cmlm_diffnorm_cg,ar"},
        {"t_start_sweep", ""},
        {"sweep_steps", "300"},
    };

    return c;
}

Config Config::parse(const std::string& text) {
    Config c;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            check(line.back() == ']', "config: bad section header at line " + std::to_string(lineno));
            section = trim(line.substr(1, line.size() - 2));
            check(!section.empty(), "config: empty section name at line " + std::to_string(lineno));
            c.sections_[section];
            continue;
        }
        std::size_t eq = line.find('=');
        check(eq != std::string::npos, "config: expected key = value at line " + std::to_string(lineno));
        check(!section.empty(), "config: key outside any section at line " + std::to_string(lineno));
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        check(!key.empty(), "config: empty key at line " + std::to_string(lineno));
        c.sections_[section][key] = value;
    }
    return c;
}

Config Config::load_file(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    Config base = defaults();
    base.merge_checked(parse(ss.str()));
    return base;
}

void Config::merge_checked(const Config& other) {
    for (const auto& [sec, kv] : other.sections_) {
        auto it = sections_.find(sec);
        check(it != sections_.end(), "config: unknown section [" + sec + "]");
        for (const auto& [k, v] : kv) {
            auto kit = it->second.find(k);
            check(kit != it->second.end(), "config: unknown key " + sec + "." + k);
            kit->second = v;
        }
    }
}

bool Config::has(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    if (it == sections_.end()) return false;
    return it->second.count(key) > 0;
}

const std::string& Config::get_str(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    check(it != sections_.end(), "config: missing section [" + section + "]");
    auto kit = it->second.find(key);
    check(kit != it->second.end(), "config: missing key " + section + "." + key);
    return kit->second;
}

std::int64_t Config::get_int(const std::string& section, const std::string& key) const {
    const std::string& v = get_str(section, key);
    std::size_t pos = 0;
    std::int64_t out = 0;
    try {
        out = std::stoll(v, &pos);
    } catch (...) {
        fail("config: " + section + "." + key + " is not an integer: " + v);
    }
    check(pos == v.size(), "config: " + section + "." + key + " is not an integer: " + v);
    return out;
}

real Config::get_real(const std::string& section, const std::string& key) const {
    const std::string& v = get_str(section, key);
    std::size_t pos = 0;
    real out = 0;
    try {
        out = std::stod(v, &pos);
    } catch (...) {
        fail("config: " + section + "." + key + " is not a number: " + v);
    }
    check(pos == v.size(), "config: " + section + "." + key + " is not a number: " + v);
    return out;
}

bool Config::get_bool(const std::string& section, const std::string& key) const {
    const std::string& v = get_str(section, key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    fail("config: " + section + "." + key + " is not a boolean: " + v);
}

std::vector<std::int64_t> Config::get_int_list(const std::string& section,
                                               const std::string& key) const {
    const std::string& v = get_str(section, key);
    std::vector<std::int64_t> out;
    std::string cur;
    std::istringstream ss(v);
    while (std::getline(ss, cur, ',')) {
        cur = trim(cur);
        if (cur.empty()) continue;
        out.push_back(std::stoll(cur));
    }
    return out;
}

void Config::set(const std::string& section, const std::string& key, const std::string& value) {
    sections_[section][key] = value;
}

void Config::set_int(const std::string& section, const std::string& key, std::int64_t v) {
    set(section, key, std::to_string(v));
}

void Config::set_real(const std::string& section, const std::string& key, real v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    set(section, key, os.str());
}

std::string Config::canonical() const {
    std::ostringstream os;
    for (const auto& [sec, kv] : sections_) {  // std::map: already sorted
        os << "[" << sec << "]\n";
        for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
    }
    return os.str();
}

std::uint64_t Config::fingerprint() const { return fnv1a(canonical()); }

std::uint64_t Config::fingerprint_of(const std::vector<std::string>& sections) const {
    std::ostringstream os;
    for (const auto& sec : sections) {
        auto it = sections_.find(sec);
        check(it != sections_.end(), "config: fingerprint_of unknown section " + sec);
        os << "[" << sec << "]\n";
        for (const auto& [k, v] : it->second) os << k << " = " << v << "\n";
    }
    return fnv1a(os.str());
}

void Config::save(const std::string& path) const {
    std::ofstream out(path);
    check(out.good(), "config: cannot write " + path);
    out << canonical();
}

std::string format_fingerprint(std::uint64_t fp) {
    static const char* hex = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = hex[fp & 0xf];
        fp >>= 4;
    }
    return s;
}

}  // namespace dn
