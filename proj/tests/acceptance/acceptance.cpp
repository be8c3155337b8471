// Acceptance run: one PASS/FAIL line per criterion, exit status 1 when any fails.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <functional>
#include <iostream>
#include <limits>
#include <random>
#include <set>

#include "gradient_suite.hpp"
#include "psep/attacks.hpp"
#include "psep/attention.hpp"
#include "psep/checkpoint.hpp"
#include "psep/config.hpp"
#include "psep/evaluate.hpp"
#include "psep/export.hpp"
#include "psep/losses.hpp"
#include "psep/ops.hpp"
#include "psep/rng.hpp"
#include "psep/train.hpp"

namespace fs = std::filesystem;
using namespace psep;

namespace {

struct Result {
    bool pass = false;
    std::string detail;
};

template <class... Args>
std::string format(const char* fmt, Args... args) {
    char buf[1024];
    std::snprintf(buf, sizeof buf, fmt, args...);
    return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

double wall_seconds() {
    using clock = std::chrono::steady_clock;
    static const auto start = clock::now();
    return std::chrono::duration<double>(clock::now() - start).count();
}

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor t(shape);
    for (double& v : t.data()) v = d(rng);
    return t;
}

Model tiny_model(std::uint64_t seed, Variant v) {
    ModelConfig cfg;
    cfg.backbone.input_size = 8;
    cfg.backbone.stages = {{6, 1}};
    cfg.classes = 3;
    cfg.per_class = 2;
    cfg.proto_dim = 4;
    cfg.reduce_mid = 5;
    return Model(apply_variant(cfg, v), seed);
}

// ---------------------------------------------------------------------------------------------
// Criteria that need no training.

Result gradient_checks(std::uint64_t seed) {
    const double t0 = wall_seconds();
    const auto suite = psep::testing::run_gradient_suite(100, seed, 1e-4);
    const double secs = wall_seconds() - t0;
    std::size_t failures = 0, fewest = std::numeric_limits<std::size_t>::max();
    double worst = 0.0;
    std::string failed;
    for (const auto& e : suite) {
        failures += e.failures;
        fewest = std::min(fewest, e.trials);
        worst = std::max(worst, e.worst_error);
        if (e.failures) failed += " " + e.name;
    }
    Result r;
    r.pass = !suite.empty() && failures == 0 && fewest >= 100 && secs < 120.0;
    r.detail = format("%zu checks, >=%zu trials each, %zu failures, worst rel err %.2e, %.1fs", suite.size(), fewest,
                      failures, worst, secs);
    if (!failed.empty()) r.detail += "; failing:" + failed;
    return r;
}

Result loss_identities(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> lambda(0.0, 20.0);
    double worst = 0.0;
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t classes = 2 + trial % 3, per_class = 1 + trial % 2, d = 2 + trial % 4;
        PrototypeBank bank = make_prototype_bank(classes, per_class, d, kDefaultGamma, rng);
        const Tensor z = random_tensor(Shape{3, 2, d}, rng, 0.0, 1.0);
        const Tensor a = random_tensor(Shape{3, 2}, rng, 0.0, 1.0);
        const std::size_t label[] = {static_cast<std::size_t>(trial) % classes};
        LossConfig cfg;
        cfg.lambda1 = lambda(rng);
        cfg.lambda2 = lambda(rng);
        const double expected = cfg.lambda1 * attentional_cluster_loss(z, a, bank, label[0]) +
                                cfg.lambda2 * attentional_separation_loss(z, a, bank, label[0]);
        const auto got = batch_regularization_loss(std::span(&z, 1), std::span(&a, 1), label, bank, cfg);
        worst = std::max(worst, std::abs(got[0] - expected));
    }

    std::size_t exact = 0, trials = 0;
    for (Variant v : {Variant::Full, Variant::Baseline, Variant::AttentionOnly}) {
        for (int trial = 0; trial < 10; ++trial, ++trials) {
            const Model model = tiny_model(seed + static_cast<std::uint64_t>(trial), v);
            const Tensor x = random_tensor(Shape{4, 8, 8, 3}, rng, 0.0, 1.0);
            const std::size_t labels[] = {0, 1, 2, 1};
            LossConfig cfg;
            cfg.lambda1 = cfg.lambda2 = 0.0;
            Graph g;
            Bindings b(g, model.params(), nullptr);
            const Forward f = forward(model, b, g.constant(x));
            const LossBreakdown l = total_loss(model, f, labels, cfg);
            exact += l.value(l.total) == l.value(l.ce_att) + l.value(l.ce_reg) && !l.reg.valid();
        }
    }
    Result r;
    r.pass = worst <= 1e-12 && exact == trials;
    r.detail = format("B=1 identity worst abs err %.2e over 500 draws; lambda=0 total exact in %zu/%zu models", worst,
                      exact, trials);
    return r;
}

Result activation_limits() {
    Graph g;
    const double big[] = {1e10, 1e12, 1e15};
    Tensor u(Shape{4});
    for (std::size_t i = 0; i < 3; ++i) u[i + 1] = big[i];
    const Tensor f = ops::log_ratio(g.constant(u), kDefaultGamma).value();
    const double f0_err = std::abs(f[0] - std::log(1e5));
    bool decreasing = true;
    double prev = std::numeric_limits<double>::infinity();
    for (double v = 1e-6; v <= 1e15; v *= 10.0) {
        const double fv = ops::log_ratio(g.constant(Tensor::vector({v})), kDefaultGamma).value()[0];
        decreasing = decreasing && fv < prev && fv > 0.0;
        prev = fv;
    }
    Result r;
    r.pass = f0_err <= 1e-9 && std::abs(f[0] - 11.512925) < 5e-7 && f[1] <= 1e-9 && f[2] <= 1e-9 && f[3] <= 1e-9 &&
             decreasing;
    r.detail = format("f(0)=%.9f (err %.1e), f(1e10)=%.2e, f(1e12)=%.2e, f(1e15)=%.2e, positive and decreasing: %s",
                      f[0], f0_err, f[1], f[2], f[3], decreasing ? "yes" : "no");
    return r;
}

Result attention_oracle(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> side(1, 6), channels(1, 9), classes(1, 6);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t h = side(rng), w = side(rng), c = channels(rng), k = classes(rng), n = h * w;
        const Tensor x = random_tensor(Shape{h, w, c}, rng, -2.0, 2.0);
        AttentionParams p{random_tensor(Shape{c}, rng, -1.0, 1.0), random_tensor(Shape{k, c}, rng, -1.0, 1.0)};
        const AttentionOutput out = attention_forward(x, p);
        // Second moment M = (1/N) sum_t x_t x_t^T, then logit_k = a^T M b_k.
        std::vector<double> m(c * c, 0.0);
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t i = 0; i < c; ++i)
                for (std::size_t j = 0; j < c; ++j) m[i * c + j] += x[t * c + i] * x[t * c + j] / static_cast<double>(n);
        for (std::size_t kk = 0; kk < k; ++kk) {
            double logit = 0.0;
            for (std::size_t i = 0; i < c; ++i)
                for (std::size_t j = 0; j < c; ++j) logit += p.agnostic_filter[i] * m[i * c + j] * p.class_filters[kk * c + j];
            worst = std::max(worst, std::abs(out.logits[kk] - logit));
        }
    }
    Result r;
    r.pass = worst <= 1e-8;
    r.detail = format("1000 random inputs, worst abs err %.2e", worst);
    return r;
}

bool in_unit_range(const Tensor& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](double v) { return v >= 0.0 && v <= 1.0; });
}

Result attack_contracts(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::size_t runs = 0, violations = 0, identities = 0, identity_failures = 0;
    double worst_excess = -1.0;
    const Variant variants[] = {Variant::Full, Variant::Baseline, Variant::AttentionOnly};
    for (int trial = 0; trial < 24; ++trial) {
        const Model model = tiny_model(seed + 100 + static_cast<std::uint64_t>(trial), variants[trial % 3]);
        const AttackTarget target = trial % 2 ? AttackTarget::Attention : AttackTarget::Joint;
        const Objective f = model_objective(model, target);
        const Tensor x = random_tensor(Shape{3, 8, 8, 3}, rng, 0.0, 1.0);
        const std::size_t labels[] = {static_cast<std::size_t>(trial) % 3, 1, 2};
        for (double eps : {2.0 / 255.0, 8.0 / 255.0, 0.1, 0.5}) {
            for (AttackKind kind : {AttackKind::FGSM, AttackKind::BIM, AttackKind::PGD, AttackKind::MIM}) {
                AttackConfig cfg = AttackConfig::standard(kind, eps);
                cfg.target = target;
                cfg.seed = static_cast<std::uint64_t>(trial);
                const Tensor adv = run_attack(cfg, f, x, labels);
                const double excess = max_abs_diff(adv, x) - eps;
                worst_excess = std::max(worst_excess, excess);
                violations += !(excess <= 1e-6) || !in_unit_range(adv);
                ++runs;
            }
        }
        const double eps = 8.0 / 255.0, alpha = 2.0 / 255.0;
        identity_failures += !(bim(f, x, labels, eps, eps, 1) == fgsm(f, x, labels, eps));
        identity_failures += !(pgd_from(f, x, labels, eps, alpha, 10, Tensor(x.shape())) == bim(f, x, labels, eps, alpha, 10));
        identity_failures += !(mim(f, x, labels, eps, alpha, 10, 0.0) == bim(f, x, labels, eps, alpha, 10));
        identities += 3;
    }
    Result r;
    r.pass = violations == 0 && identity_failures == 0;
    r.detail = format("%zu attack runs, %zu budget/range violations (max excess %.1e); %zu/%zu exact identities", runs,
                      violations, worst_excess, identities - identity_failures, identities);
    return r;
}

// ---------------------------------------------------------------------------------------------
// Benchmark criteria.

struct Benchmark {
    SyntheticDatasetConfig data;
    TrainConfig train;
};

Benchmark read_benchmark(const fs::path& path) {
    const KeyValues kv = read_key_values(path);
    check_known_keys(kv);
    Benchmark b;
    apply_keys(b.data, kv, true);
    apply_keys(b.train, kv, true);
    b.train.validate();
    return b;
}

std::pair<std::size_t, std::size_t> classifier_pattern(const Model& model) {
    const Tensor& w = model.params().at(kClassifier);
    return {static_cast<std::size_t>(std::count(w.data().begin(), w.data().end(), 1.0)),
            static_cast<std::size_t>(std::count(w.data().begin(), w.data().end(), -0.5))};
}

/// Reduced features of every training image, in ImageSet order.
std::vector<Tensor> reduced_features(const Model& model, const ImageSet& set) {
    std::vector<Tensor> out;
    const std::size_t bs = 32;
    for (std::size_t start = 0; start < set.size(); start += bs) {
        std::vector<std::size_t> pos(std::min(bs, set.size() - start));
        for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = start + i;
        Graph g;
        Bindings b(g, model.params(), nullptr);
        const Forward f = forward(model, b, g.constant(set.batch(pos)));
        const Shape& s = f.z.shape();
        const std::size_t per = s[1] * s[2] * s[3];
        for (std::size_t i = 0; i < pos.size(); ++i) {
            const auto first = f.z.value().data().begin() + static_cast<long>(i * per);
            out.emplace_back(Shape{s[1], s[2], s[3]}, std::vector<double>(first, first + static_cast<long>(per)));
        }
    }
    return out;
}

struct ProjectionCheck {
    std::size_t prototypes = 0;
    std::size_t oracle_mismatches = 0;
    std::size_t off_patch = 0;
};

/// Exhaustive nearest same-class patch for each prototype of `before`, compared with the
/// prototypes and sources of `after`. Stored prototypes are single precision, so a patch
/// matches when its float rounding equals the prototype.
ProjectionCheck check_projection(const Model& before, const Model& after, const ImageSet& train) {
    const std::vector<Tensor> zs = reduced_features(before, train);
    const Tensor& old_protos = before.params().at(kPrototypes);
    const Tensor& new_protos = after.params().at(kPrototypes);
    const std::size_t m = old_protos.dim(0), d = old_protos.dim(1);
    ProjectionCheck out;
    out.prototypes = m;
    for (std::size_t l = 0; l < m; ++l) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_image = 0, best_t = 0;
        for (std::size_t i = 0; i < zs.size(); ++i) {
            if (train.labels()[i] != before.class_of()[l]) continue;
            const std::size_t n = zs[i].size() / d;
            for (std::size_t t = 0; t < n; ++t) {
                double dist = 0.0;
                for (std::size_t k = 0; k < d; ++k) {
                    const double diff = zs[i][t * d + k] - old_protos[l * d + k];
                    dist += diff * diff;
                }
                if (dist < best) best = dist, best_image = i, best_t = t;
            }
        }
        const auto& src = after.sources()[l];
        const std::size_t w = zs[best_image].dim(1);
        const bool same_site = src && src->image_id == train.ids()[best_image] && src->y * w + src->x == best_t;
        bool on_patch = src.has_value();
        if (src) {
            const std::size_t pos = train.position_of(src->image_id);
            on_patch = pos < train.size() && train.labels()[pos] == after.class_of()[l];
            for (std::size_t k = 0; on_patch && k < d; ++k) {
                const float site = static_cast<float>(zs[pos][(src->y * w + src->x) * d + k]);
                on_patch = static_cast<double>(site) == new_protos[l * d + k];
            }
        }
        out.oracle_mismatches += !same_site;
        out.off_patch += !on_patch;
    }
    return out;
}

struct TrainedModel {
    Model model;
    std::string checkpoint_bytes;
    double cpu = 0.0;
};

/// Trains to the projection boundary, hands the pre-projection model to `at_projection`,
/// then finishes the schedule.
TrainedModel train_model(const TrainConfig& cfg, const ImageSet& train, const std::string& name,
                         const std::function<void(const Model&)>& at_projection = nullptr) {
    const double c0 = cpu_seconds(), w0 = wall_seconds();
    Trainer trainer(cfg, train);
    auto progress = [&](const EpochMetrics& m) {
        if (m.epoch % 5 == 4 || m.epoch + 1 == cfg.schedule.total_epochs())
            std::cout << "  " << name << ": " << format_metrics(m) << "\n" << std::flush;
    };
    trainer.run(cfg.schedule.projection_epoch(), progress);
    if (at_projection) at_projection(trainer.model());
    trainer.run(static_cast<std::size_t>(-1), progress);
    TrainedModel out;
    out.model = trainer.model();
    out.checkpoint_bytes = serialize_checkpoint(trainer.checkpoint());
    out.cpu = cpu_seconds() - c0;
    std::cout << format("  %s trained in %.0fs cpu / %.0fs wall\n", name.c_str(), out.cpu, wall_seconds() - w0)
              << std::flush;
    return out;
}

std::vector<AttackConfig> pgd_pair(std::uint64_t seed) {
    std::vector<AttackConfig> out;
    for (double eps : {2.0 / 255.0, 8.0 / 255.0}) {
        AttackConfig c = AttackConfig::standard(AttackKind::PGD, eps);
        c.seed = seed;
        out.push_back(c);
    }
    return out;
}

const char* verdict(bool pass) { return pass ? "PASS" : "FAIL"; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria for the prototype separation network"};
    std::string benchmark_path = "benchmark.conf", work = "acceptance_work";
    std::uint64_t seed = 20240531;
    app.add_option("--benchmark", benchmark_path, "benchmark key=value config")->check(CLI::ExistingFile);
    app.add_option("--work", work, "scratch directory for the generated dataset");
    app.add_option("--seed", seed, "seed for the randomised property checks");
    CLI11_PARSE(app, argc, argv);

    std::size_t passed = 0, total = 0;
    auto report = [&](int id, const std::string& title, const Result& r) {
        ++total;
        passed += r.pass;
        std::cout << format("[%2d] %s  %s: %s\n", id, verdict(r.pass), title.c_str(), r.detail.c_str()) << std::flush;
    };

    report(1, "gradient checks", gradient_checks(seed));
    report(2, "loss identities", loss_identities(seed + 1));
    report(3, "similarity activation limits", activation_limits());
    report(4, "attention logits vs second-moment oracle", attention_oracle(seed + 2));
    report(5, "attack contracts", attack_contracts(seed + 3));

    const Benchmark bench = read_benchmark(benchmark_path);
    const double bench_cpu0 = cpu_seconds();
    gen_dataset(bench.data, bench.train.seed, work);
    const Dataset ds = load_dataset(work);
    const ImageSet train(ds, "train"), test(ds, "test");
    std::cout << format("  dataset: %zu train / %zu test images in %s\n", train.size(), test.size(), work.c_str());

    TrainConfig full_cfg = bench.train;
    full_cfg.variant = Variant::Full;
    TrainConfig base_cfg = bench.train;
    base_cfg.variant = Variant::Baseline;
    base_cfg.loss.lambda1 = base_cfg.loss.lambda2 = 0.0;

    std::optional<Model> before_projection;
    std::pair<std::size_t, std::size_t> trained_pattern;
    const TrainedModel full = train_model(full_cfg, train, "full", [&](const Model& m) {
        before_projection = m;
        trained_pattern = classifier_pattern(m);
    });
    const TrainedModel base = train_model(base_cfg, train, "baseline");

    EvalOptions opt;
    const std::vector<AttackConfig> attacks = pgd_pair(bench.train.seed);
    const RobustnessReport full_report = evaluate(full.model, "full", test, attacks, {}, opt);
    const RobustnessReport base_report = evaluate(base.model, "baseline", test, attacks, {}, opt);
    const double bench_cpu = cpu_seconds() - bench_cpu0;
    std::cout << full_report.to_text() << base_report.to_text() << std::flush;

    {
        const Model fresh(ModelConfig{}, seed);
        const auto [plus, minus] = classifier_pattern(fresh);
        const std::size_t m = fresh.config().prototypes(), k = fresh.config().classes;
        const ProjectionCheck pc = check_projection(*before_projection, full.model, train);
        Result r;
        r.pass = plus == m && minus == m * (k - 1) && trained_pattern == std::pair(m, m * (k - 1)) &&
                 pc.oracle_mismatches == 0 && pc.off_patch == 0;
        r.detail = format("init +1 x%zu, -0.5 x%zu (m=%zu, K=%zu; same before projection: %s); projection: %zu/%zu "
                          "prototypes on a same-class patch, %zu oracle mismatches",
                          plus, minus, m, k, trained_pattern == std::pair(m, m * (k - 1)) ? "yes" : "no",
                          pc.prototypes - pc.off_patch, pc.prototypes, pc.oracle_mismatches);
        report(6, "classifier init and projection", r);
    }

    const std::string pgd2 = attacks[0].label(), pgd8 = attacks[1].label();
    {
        const double clean = full_report.at("full-FR", "Clean"), clean_a = full_report.at("full-A", "Clean");
        const double full8 = full_report.at("full-FR", pgd8), base8 = base_report.at("baseline-FR", pgd8);
        bool monotone = true;
        for (const auto* rep : {&full_report, &base_report})
            for (const auto& row : rep->rows) monotone = monotone && rep->at(row.name, pgd8) <= rep->at(row.name, pgd2);
        Result r;
        r.pass = clean >= 90.0 && full8 - base8 >= 10.0 && monotone && bench_cpu <= 1800.0;
        r.detail = format("(a) full clean FR %.2f%% (A %.2f%%) [%s]; (b) %s full-FR %.2f%% vs baseline %.2f%%, "
                          "margin %.2f [%s]; (c) eps 8 <= eps 2 for every head [%s]; %.0fs cpu [%s]",
                          clean, clean_a, verdict(clean >= 90.0), pgd8.c_str(), full8, base8, full8 - base8,
                          verdict(full8 - base8 >= 10.0), verdict(monotone), bench_cpu, verdict(bench_cpu <= 1800.0));
        report(7, "synthetic robustness benchmark", r);
    }

    {
        const std::string csv = prototype_vectors_csv(full.model);
        const SeparationSummary s = separation_summary(parse_prototype_csv(csv), full.model.config().classes);
        Result r;
        r.pass = s.inter > s.intra && s.background < s.discriminative;
        r.detail = format("inter %.4f vs intra %.4f; %zu lowest-attention prototypes %.4f vs rest %.4f", s.inter,
                          s.intra, s.background_count, s.background, s.discriminative);
        report(8, "prototype separation", r);
    }

    {
        TrainConfig sub_cfg = bench.train;
        sub_cfg.variant = Variant::AttentionOnly;
        sub_cfg.model.backbone.stages = {{24, 1}, {48, 1}, {64, 1}};
        sub_cfg.seed = derive_seed({bench.train.seed, 0x737562ULL});
        const TrainedModel sub = train_model(sub_cfg, train, "substitute");
        const HeadAccuracy sub_clean = clean_accuracy(sub.model, test, opt);
        const HeadAccuracy bb = transfer_eval(sub.model, full.model, test, attacks[1], opt);
        const double wb_a = full_report.at("full-A", pgd8), wb_fr = full_report.at("full-FR", pgd8);
        Result r;
        r.pass = bb.attention > wb_a && bb.prototype > wb_fr;
        r.detail = format("substitute %s (clean %.2f%%): black-box A %.2f%% vs white-box %.2f%%, FR %.2f%% vs %.2f%%",
                          format_stages(sub_cfg.model.backbone.stages).c_str(), sub_clean.attention, bb.attention,
                          wb_a, bb.prototype, wb_fr);
        report(9, "transfer directionality", r);
    }

    {
        const TrainedModel again = train_model(full_cfg, train, "full (repeat)");
        const RobustnessReport again_report = evaluate(again.model, "full", test, attacks, {}, opt);
        const bool same_ckpt = again.checkpoint_bytes == full.checkpoint_bytes;
        const bool same_report = again_report.to_csv() == full_report.to_csv() &&
                                 again_report.to_text() == full_report.to_text();
        Result r;
        r.pass = same_ckpt && same_report;
        r.detail = format("checkpoint %zu bytes identical: %s; report identical: %s", full.checkpoint_bytes.size(),
                          same_ckpt ? "yes" : "no", same_report ? "yes" : "no");
        report(10, "determinism", r);
    }

    std::cout << format("%zu/%zu criteria passed in %.0fs\n", passed, total, wall_seconds());
    return passed == total ? 0 : 1;
}
