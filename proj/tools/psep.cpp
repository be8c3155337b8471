// Command-line front end: dataset generation, augmentation, training, evaluation,
// attacks and exports.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "psep/augment.hpp"
#include "psep/checkpoint.hpp"
#include "psep/config.hpp"
#include "psep/evaluate.hpp"
#include "psep/export.hpp"
#include "psep/rng.hpp"
#include "psep/train.hpp"

namespace fs = std::filesystem;
using namespace psep;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string config;

    KeyValues keys() const {
        if (config.empty()) return {};
        KeyValues kv = read_key_values(config);
        check_known_keys(kv);
        return kv;
    }
};

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

ImageSet load_split(const fs::path& root, const std::string& split) {
    ImageSet set(load_dataset(root), split);
    if (set.size() == 0) throw std::runtime_error("dataset " + root.string() + " has no '" + split + "' images");
    return set;
}

/// "kind:eps" items separated by commas, e.g. "fgsm:2/255,pgd:8/255"; "standard" or "none".
std::vector<AttackConfig> parse_attack_list(const std::string& text, std::uint64_t seed) {
    if (text == "standard") return standard_attack_matrix(seed);
    std::vector<AttackConfig> out;
    if (text == "none" || text.empty()) return out;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw std::invalid_argument("attack list item '" + item + "' lacks ':eps'");
        KeyValues kv{{"eps", item.substr(colon + 1)}};
        AttackConfig eps_only;
        apply_keys(eps_only, kv);
        AttackConfig c = AttackConfig::standard(parse_attack_kind(item.substr(0, colon)), eps_only.eps);
        c.seed = seed;
        out.push_back(c);
    }
    return out;
}

int cmd_gen_data(const Globals& g, const std::string& out, const KeyValues& overrides) {
    SyntheticDatasetConfig cfg;
    apply_keys(cfg, g.keys(), true);
    apply_keys(cfg, overrides);
    const Dataset ds = gen_dataset(cfg, g.seed.value_or(42), out);
    std::cout << "wrote " << ds.entries.size() << " images to " << out << "\n";
    return 0;
}

int cmd_augment(const Globals& g, const std::string& data, const std::string& out, std::size_t fold) {
    const Dataset ds = augment_dataset(load_dataset(data), fold, g.seed.value_or(42), out);
    std::cout << "wrote " << ds.entries.size() << " images to " << out << "\n";
    return 0;
}

struct TrainArgs {
    std::string data, out, resume, log, variant;
    bool adv = false;
    std::size_t until = static_cast<std::size_t>(-1);
};

int cmd_train(const Globals& g, const TrainArgs& a) {
    const ImageSet train = load_split(a.data, "train");
    std::optional<Trainer> trainer;
    if (!a.resume.empty()) {
        trainer.emplace(load_checkpoint(a.resume), train);
    } else {
        TrainConfig cfg;
        apply_keys(cfg, g.keys(), true);
        if (g.seed) cfg.seed = *g.seed;
        if (!a.variant.empty()) cfg.variant = parse_variant(a.variant);
        if (a.adv) cfg.adv.enabled = true;
        cfg.validate();
        trainer.emplace(cfg, train);
    }
    std::ofstream log;
    if (!a.log.empty()) log.open(a.log, trainer->next_epoch() > 0 ? std::ios::app : std::ios::trunc);
    trainer->run(a.until, [&](const EpochMetrics& m) {
        const std::string line = format_metrics(m);
        std::cout << line << "\n" << std::flush;
        if (log) log << line << "\n" << std::flush;
    });
    Checkpoint ckpt = trainer->checkpoint();
    if (trainer->finished()) ckpt.state.reset();
    save_checkpoint(ckpt, a.out);
    std::cout << (trainer->finished() ? "finished; " : "paused; ") << "checkpoint " << a.out << "\n";
    return 0;
}

struct EvalArgs {
    std::string ckpt, data, split = "test", name = "model", attacks = "standard", out;
    std::vector<std::string> substitutes;
    std::size_t subset = 0, threads = 0;
};

int cmd_eval(const Globals& g, const EvalArgs& a) {
    const std::uint64_t seed = g.seed.value_or(0);
    const std::vector<AttackConfig> attacks = parse_attack_list(a.attacks, seed);
    for (const auto& c : attacks) c.validate();
    std::vector<Model> sub_models;
    std::vector<std::string> sub_names;
    for (const auto& s : a.substitutes) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("--substitute expects NAME=CHECKPOINT");
        sub_names.push_back(s.substr(0, eq));
        sub_models.push_back(model_from_checkpoint(load_checkpoint(s.substr(eq + 1))));
    }
    std::vector<Substitute> subs;
    for (std::size_t i = 0; i < sub_models.size(); ++i) {
        Substitute s{sub_names[i], &sub_models[i], AttackConfig::standard(AttackKind::PGD, 8.0 / 255.0)};
        s.attack.seed = seed;
        subs.push_back(s);
    }
    const Model model = model_from_checkpoint(load_checkpoint(a.ckpt));
    const ImageSet data = load_split(a.data, a.split);
    EvalOptions opt;
    opt.subset = a.subset;
    opt.threads = a.threads;
    const RobustnessReport report = evaluate(model, a.name, data, attacks, subs, opt);
    std::cout << report.to_text();
    if (!a.out.empty()) {
        write_text(a.out + ".txt", report.to_text());
        write_text(a.out + ".csv", report.to_csv());
    }
    return 0;
}

struct AttackArgs {
    std::string ckpt, data, split = "test", out;
    std::optional<std::string> kind, target;
    std::optional<double> eps, alpha, mu;
    std::optional<std::size_t> steps;
    std::size_t subset = 0, threads = 0;
};

AttackConfig resolve_attack(const Globals& g, const AttackArgs& a) {
    KeyValues kv = g.keys();
    AttackConfig cfg;
    apply_keys(cfg, kv, true);
    const AttackKind kind = a.kind ? parse_attack_kind(*a.kind) : cfg.kind;
    const double eps = a.eps.value_or(cfg.eps);
    if (kind != cfg.kind || eps != cfg.eps) {
        // A different attack or budget starts from that attack's evaluation defaults.
        const AttackConfig base = AttackConfig::standard(kind, eps);
        cfg.kind = kind;
        cfg.eps = eps;
        if (!kv.count("alpha")) cfg.alpha = base.alpha;
        if (!kv.count("steps")) cfg.steps = base.steps;
    }
    if (a.alpha) cfg.alpha = *a.alpha;
    if (a.steps) cfg.steps = *a.steps;
    if (a.mu) cfg.mu = *a.mu;
    if (a.target) cfg.target = parse_attack_target(*a.target);
    if (g.seed) cfg.seed = *g.seed;
    cfg.validate();
    return cfg;
}

int cmd_attack(const Globals& g, const AttackArgs& a) {
    const AttackConfig cfg = resolve_attack(g, a);
    const Model model = model_from_checkpoint(load_checkpoint(a.ckpt));
    const ImageSet data = load_split(a.data, a.split);
    EvalOptions opt;
    opt.subset = a.subset;
    opt.threads = a.threads;
    const HeadAccuracy clean = clean_accuracy(model, data, opt);
    const HeadAccuracy adv = attack_accuracy(model, data, cfg, opt);
    std::printf("attack %s alpha %.6g target %s seed %llu\n", cfg.label().c_str(), cfg.alpha,
                to_string(cfg.target).c_str(), static_cast<unsigned long long>(cfg.seed));
    if (clean.attention >= 0) std::printf("attention head: clean %.2f%% adversarial %.2f%%\n", clean.attention, adv.attention);
    if (clean.prototype >= 0) std::printf("prototype head: clean %.2f%% adversarial %.2f%%\n", clean.prototype, adv.prototype);
    if (!a.out.empty()) {
        const Objective f = model_objective(model, cfg.target);
        const std::size_t n = opt.subset ? std::min(opt.subset, data.size()) : data.size();
        const Dataset ds = load_dataset(a.data);
        for (std::size_t start = 0, b = 0; start < n; start += opt.batch, ++b) {
            std::vector<std::size_t> pos;
            for (std::size_t i = start; i < std::min(n, start + opt.batch); ++i) pos.push_back(i);
            AttackConfig batch_cfg = cfg;
            batch_cfg.seed = derive_seed({cfg.seed, b});
            const Tensor x = run_attack(batch_cfg, f, data.batch(pos), data.labels_of(pos));
            const std::size_t side = data.image_size();
            for (std::size_t i = 0; i < pos.size(); ++i) {
                Tensor img(Shape{side, side, 3});
                std::copy_n(x.data().begin() + static_cast<long>(i * img.size()), img.size(), img.data().begin());
                write_ppm(fs::path(a.out) / ds.entries[data.ids()[pos[i]]].path, img);
            }
        }
        std::cout << "adversarial images written under " << a.out << "\n";
    }
    return 0;
}

struct HeatmapArgs {
    std::string ckpt, data, out;
    std::size_t image_id = 0, top = 3;
    std::optional<std::string> attack;
    std::optional<double> eps;
};

int cmd_export_heatmaps(const Globals& g, const HeatmapArgs& a) {
    const Model model = model_from_checkpoint(load_checkpoint(a.ckpt));
    const Dataset ds = load_dataset(a.data);
    if (a.image_id >= ds.entries.size()) throw std::invalid_argument("image id " + std::to_string(a.image_id) + " not in dataset");
    const DatasetEntry& entry = ds.entries[a.image_id];
    const Tensor image = read_ppm(ds.root / entry.path);
    const std::string prefix = "img" + std::to_string(a.image_id);
    const HeatmapExport clean = export_heatmaps(model, image, a.top, a.out, prefix);
    for (const auto& e : clean.entries)
        std::printf("top%zu prototype %zu class %zu score %.6f peak (%zu,%zu)\n", e.rank, e.prototype, e.cls, e.score,
                    e.peak_y, e.peak_x);
    if (a.attack) {
        AttackConfig cfg = AttackConfig::standard(parse_attack_kind(*a.attack), a.eps.value_or(8.0 / 255.0));
        cfg.seed = g.seed.value_or(0);
        const std::size_t label[] = {entry.label};
        const Tensor x = image.reshaped(Shape{1, image.dim(0), image.dim(1), image.dim(2)});
        const Tensor adv = run_attack(cfg, model_objective(model, cfg.target), x, label).reshaped(image.shape());
        const HeatmapExport attacked = export_heatmaps(model, adv, a.top, a.out, prefix + "_adv");
        write_ppm(fs::path(a.out) / (prefix + "_adv.ppm"), adv);
        for (const auto& e : attacked.entries)
            std::printf("adv top%zu prototype %zu class %zu score %.6f\n", e.rank, e.prototype, e.cls, e.score);
    }
    return 0;
}

int cmd_export_prototypes(const std::string& ckpt, const std::string& out) {
    const Model model = model_from_checkpoint(load_checkpoint(ckpt));
    write_text(out, prototype_vectors_csv(model));
    std::cout << "wrote " << model.class_of().size() << " prototypes to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Attention-aware prototype networks with adversarial evaluation"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--seed", g.seed, "Random seed");
    app.add_option("--config", g.config, "key=value configuration file")->check(CLI::ExistingFile);

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic benchmark");
    std::string gen_out;
    std::vector<std::string> gen_set;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--set", gen_set, "Dataset key=value override (repeatable)");

    auto* aug = app.add_subcommand("augment", "Materialise augmented training variants");
    std::string aug_data, aug_out;
    std::size_t fold = 30;
    aug->add_option("--data", aug_data, "Source dataset")->required();
    aug->add_option("--out", aug_out, "Destination directory")->required();
    aug->add_option("--fold", fold, "Total copies per training image")->capture_default_str();

    auto* train = app.add_subcommand("train", "Train a model");
    TrainArgs ta;
    train->add_option("--data", ta.data, "Dataset directory")->required();
    train->add_option("--out", ta.out, "Checkpoint to write")->required();
    train->add_option("--variant", ta.variant, "full | baseline | attention");
    train->add_flag("--adv-train", ta.adv, "Fast adversarial training");
    train->add_option("--resume", ta.resume, "Continue from a checkpoint with training state");
    train->add_option("--until-epoch", ta.until, "Stop before this epoch and save training state");
    train->add_option("--log", ta.log, "Append per-epoch metrics to this file");

    auto* eval = app.add_subcommand("eval", "Robustness report");
    EvalArgs ea;
    eval->add_option("--ckpt", ea.ckpt, "Checkpoint")->required();
    eval->add_option("--data", ea.data, "Dataset directory")->required();
    eval->add_option("--split", ea.split)->capture_default_str();
    eval->add_option("--name", ea.name, "Row label")->capture_default_str();
    eval->add_option("--attacks", ea.attacks, "standard | none | kind:eps,...")->capture_default_str();
    eval->add_option("--substitute", ea.substitutes, "NAME=CHECKPOINT black-box source (repeatable)");
    eval->add_option("--out", ea.out, "Write <out>.txt and <out>.csv");
    eval->add_option("--subset", ea.subset, "Evaluate only the first N images");
    eval->add_option("--threads", ea.threads, "Worker threads (0 = all cores)");

    auto* atk = app.add_subcommand("attack", "Run one white-box attack");
    AttackArgs aa;
    atk->add_option("--ckpt", aa.ckpt, "Checkpoint")->required();
    atk->add_option("--data", aa.data, "Dataset directory")->required();
    atk->add_option("--split", aa.split)->capture_default_str();
    atk->add_option("--attack", aa.kind, "fgsm | bim | pgd | mim")->check(CLI::IsMember({"fgsm", "bim", "pgd", "mim"}));
    atk->add_option("--eps", aa.eps, "l-infinity budget in [0,1]");
    atk->add_option("--alpha", aa.alpha, "Step size");
    atk->add_option("--steps", aa.steps, "Iterations");
    atk->add_option("--mu", aa.mu, "MIM momentum decay");
    atk->add_option("--target", aa.target, "joint | attention")->check(CLI::IsMember({"joint", "attention"}));
    atk->add_option("--out", aa.out, "Write adversarial images under this directory");
    atk->add_option("--subset", aa.subset, "Attack only the first N images");
    atk->add_option("--threads", aa.threads, "Worker threads (0 = all cores)");

    auto* heat = app.add_subcommand("export-heatmaps", "Prototype activation heatmaps for one image");
    HeatmapArgs ha;
    heat->add_option("--ckpt", ha.ckpt, "Checkpoint")->required();
    heat->add_option("--data", ha.data, "Dataset directory")->required();
    heat->add_option("--image-id", ha.image_id, "Row index in split.csv")->required();
    heat->add_option("--top", ha.top, "Number of prototypes")->capture_default_str();
    heat->add_option("--out", ha.out, "Output directory")->required();
    heat->add_option("--attack", ha.attack, "Also export an adversarial counterpart")
        ->check(CLI::IsMember({"fgsm", "bim", "pgd", "mim"}));
    heat->add_option("--eps", ha.eps, "Budget of the adversarial counterpart");

    auto* protos = app.add_subcommand("export-prototypes", "Prototype vectors as CSV");
    std::string proto_ckpt, proto_out;
    protos->add_option("--ckpt", proto_ckpt, "Checkpoint")->required();
    protos->add_option("--out", proto_out, "CSV file")->required();

    CLI11_PARSE(app, argc, argv);
    try {
        if (*gen) {
            KeyValues kv;
            for (const auto& s : gen_set) {
                const auto eq = s.find('=');
                if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + s + "'");
                kv[s.substr(0, eq)] = s.substr(eq + 1);
            }
            return cmd_gen_data(g, gen_out, kv);
        }
        if (*aug) return cmd_augment(g, aug_data, aug_out, fold);
        if (*train) return cmd_train(g, ta);
        if (*eval) return cmd_eval(g, ea);
        if (*atk) return cmd_attack(g, aa);
        if (*heat) return cmd_export_heatmaps(g, ha);
        if (*protos) return cmd_export_prototypes(proto_ckpt, proto_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
