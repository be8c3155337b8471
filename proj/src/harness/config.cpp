#include "psep/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace psep {

void TrainSchedule::validate() const {
    if (!(warmup_lr > 0.0) || !(joint_lr > 0.0) || !(classifier_lr > 0.0)) {
        throw std::invalid_argument("schedule: learning rates must be positive");
    }
    if (!(lr_decay > 0.0)) throw std::invalid_argument("schedule: decay factor must be positive");
    if (decay_every == 0) throw std::invalid_argument("schedule: decay interval must be >= 1");
}

void TrainConfig::validate() const {
    resolved_model().validate();
    loss.validate();
    schedule.validate();
    if (adv.enabled && (adv.eps < 0.0 || adv.alpha < 0.0)) throw std::invalid_argument("adversarial training: negative eps/alpha");
}

LossConfig TrainConfig::resolved_loss() const {
    LossConfig out = loss;
    if (variant == Variant::Baseline) out.lambda1 = out.lambda2 = 0.0;
    return out;
}

KeyValues parse_key_values(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value");
        }
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

KeyValues read_key_values(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_key_values(ss.str());
}

std::string format_key_values(const KeyValues& kv) {
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

std::string format_stages(const std::vector<BackboneStage>& stages) {
    std::string out;
    for (std::size_t i = 0; i < stages.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(stages[i].out_channels) + "x" + std::to_string(stages[i].convs);
    }
    return out;
}

std::vector<BackboneStage> parse_stages(const std::string& text) {
    std::vector<BackboneStage> out;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        const auto x = item.find('x');
        if (x == std::string::npos) throw std::invalid_argument("stages: expected CHANNELSxCONVS, got '" + item + "'");
        out.push_back({std::stoul(item.substr(0, x)), std::stoul(item.substr(x + 1))});
    }
    return out;
}

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw std::invalid_argument("config: '" + key + "' expects a boolean, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        // accept fractions such as 8/255
        const auto slash = v.find('/');
        if (slash != std::string::npos) {
            return parse_double(key, v.substr(0, slash)) / parse_double(key, v.substr(slash + 1));
        }
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::logic_error&) {
        throw std::invalid_argument("config: '" + key + "' expects a number, got '" + v + "'");
    }
}

std::size_t parse_size(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
        const unsigned long long n = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return static_cast<std::size_t>(n);
    } catch (const std::logic_error&) {
        throw std::invalid_argument("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
    }
}

class Reader {
public:
    Reader(const KeyValues& kv, bool allow_unknown) : kv_(kv), allow_unknown_(allow_unknown) {}

    template <typename Fn>
    void on(const std::string& key, Fn&& fn) {
        seen_.insert(key);
        auto it = kv_.find(key);
        if (it != kv_.end()) fn(it->first, it->second);
    }
    void number(const std::string& key, double& out) {
        on(key, [&](const std::string& k, const std::string& v) { out = parse_double(k, v); });
    }
    void size(const std::string& key, std::size_t& out) {
        on(key, [&](const std::string& k, const std::string& v) { out = parse_size(k, v); });
    }
    void u64(const std::string& key, std::uint64_t& out) {
        on(key, [&](const std::string& k, const std::string& v) { out = parse_size(k, v); });
    }
    void flag(const std::string& key, bool& out) {
        on(key, [&](const std::string& k, const std::string& v) { out = parse_bool(k, v); });
    }
    void finish() const {
        if (allow_unknown_) return;
        for (const auto& [k, v] : kv_)
            if (!seen_.count(k)) throw std::invalid_argument("config: unknown key '" + k + "'");
    }

private:
    const KeyValues& kv_;
    bool allow_unknown_;
    std::set<std::string> seen_;
};

}  // namespace

void apply_keys(TrainConfig& cfg, const KeyValues& kv, bool allow_unknown) {
    Reader r(kv, allow_unknown);
    r.u64("seed", cfg.seed);
    r.on("variant", [&](const std::string&, const std::string& v) { cfg.variant = parse_variant(v); });
    r.size("classes", cfg.model.classes);
    r.size("per_class", cfg.model.per_class);
    r.size("proto_dim", cfg.model.proto_dim);
    r.size("reduce_mid", cfg.model.reduce_mid);
    r.number("gamma", cfg.model.gamma);
    r.size("image_size", cfg.model.backbone.input_size);
    r.on("stages", [&](const std::string&, const std::string& v) { cfg.model.backbone.stages = parse_stages(v); });
    r.number("lambda1", cfg.loss.lambda1);
    r.number("lambda2", cfg.loss.lambda2);
    r.size("batch", cfg.loss.batch);
    r.flag("reg_attention_grad", cfg.loss.reg_attention_grad);
    r.size("warmup_epochs", cfg.schedule.warmup_epochs);
    r.number("warmup_lr", cfg.schedule.warmup_lr);
    r.size("joint_epochs", cfg.schedule.joint_epochs);
    r.number("joint_lr", cfg.schedule.joint_lr);
    r.number("lr_decay", cfg.schedule.lr_decay);
    r.size("decay_every", cfg.schedule.decay_every);
    r.size("classifier_epochs", cfg.schedule.classifier_epochs);
    r.number("classifier_lr", cfg.schedule.classifier_lr);
    r.flag("adv_train", cfg.adv.enabled);
    r.number("adv_eps", cfg.adv.eps);
    r.number("adv_alpha", cfg.adv.alpha);
    r.finish();
}

void apply_keys(AttackConfig& cfg, const KeyValues& kv, bool allow_unknown) {
    Reader r(kv, allow_unknown);
    r.on("attack", [&](const std::string&, const std::string& v) { cfg.kind = parse_attack_kind(v); });
    r.number("eps", cfg.eps);
    r.number("alpha", cfg.alpha);
    r.size("steps", cfg.steps);
    r.number("mu", cfg.mu);
    r.on("target", [&](const std::string&, const std::string& v) { cfg.target = parse_attack_target(v); });
    r.u64("attack_seed", cfg.seed);
    r.finish();
}

void apply_keys(SyntheticDatasetConfig& cfg, const KeyValues& kv, bool allow_unknown) {
    Reader r(kv, allow_unknown);
    r.size("classes", cfg.classes);
    r.size("families", cfg.families);
    r.size("image_size", cfg.image_size);
    r.size("train_per_class", cfg.train_per_class);
    r.size("test_per_class", cfg.test_per_class);
    r.size("patch_size", cfg.patch_size);
    r.size("decoys", cfg.decoys);
    r.u64("texture_seed", cfg.texture_seed);
    r.finish();
}

void check_known_keys(const KeyValues& kv) {
    KeyValues rest = kv;
    for (const auto& [k, v] : to_key_values(TrainConfig{})) rest.erase(k);
    for (const auto& [k, v] : to_key_values(AttackConfig{})) rest.erase(k);
    for (const char* k : {"families", "train_per_class", "test_per_class", "patch_size", "decoys", "texture_seed"})
        rest.erase(k);
    if (!rest.empty()) throw std::invalid_argument("config: unknown key '" + rest.begin()->first + "'");
}

KeyValues to_key_values(const TrainConfig& cfg) {
    KeyValues kv;
    kv["seed"] = std::to_string(cfg.seed);
    kv["variant"] = to_string(cfg.variant);
    kv["classes"] = std::to_string(cfg.model.classes);
    kv["per_class"] = std::to_string(cfg.model.per_class);
    kv["proto_dim"] = std::to_string(cfg.model.proto_dim);
    kv["reduce_mid"] = std::to_string(cfg.model.reduce_mid);
    kv["gamma"] = fmt_double(cfg.model.gamma);
    kv["image_size"] = std::to_string(cfg.model.backbone.input_size);
    kv["stages"] = format_stages(cfg.model.backbone.stages);
    kv["lambda1"] = fmt_double(cfg.loss.lambda1);
    kv["lambda2"] = fmt_double(cfg.loss.lambda2);
    kv["batch"] = std::to_string(cfg.loss.batch);
    kv["reg_attention_grad"] = cfg.loss.reg_attention_grad ? "true" : "false";
    kv["warmup_epochs"] = std::to_string(cfg.schedule.warmup_epochs);
    kv["warmup_lr"] = fmt_double(cfg.schedule.warmup_lr);
    kv["joint_epochs"] = std::to_string(cfg.schedule.joint_epochs);
    kv["joint_lr"] = fmt_double(cfg.schedule.joint_lr);
    kv["lr_decay"] = fmt_double(cfg.schedule.lr_decay);
    kv["decay_every"] = std::to_string(cfg.schedule.decay_every);
    kv["classifier_epochs"] = std::to_string(cfg.schedule.classifier_epochs);
    kv["classifier_lr"] = fmt_double(cfg.schedule.classifier_lr);
    kv["adv_train"] = cfg.adv.enabled ? "true" : "false";
    kv["adv_eps"] = fmt_double(cfg.adv.eps);
    kv["adv_alpha"] = fmt_double(cfg.adv.alpha);
    return kv;
}

KeyValues to_key_values(const AttackConfig& cfg) {
    KeyValues kv;
    kv["attack"] = to_string(cfg.kind);
    kv["eps"] = fmt_double(cfg.eps);
    kv["alpha"] = fmt_double(cfg.alpha);
    kv["steps"] = std::to_string(cfg.steps);
    kv["mu"] = fmt_double(cfg.mu);
    kv["target"] = to_string(cfg.target);
    kv["attack_seed"] = std::to_string(cfg.seed);
    return kv;
}

}  // namespace psep
