#include "psep/evaluate.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "psep/rng.hpp"

namespace psep {

namespace {

struct Counts {
    std::size_t attention = 0;
    std::size_t prototype = 0;
};

Counts count_correct(const Model& model, const Tensor& images, std::span<const std::size_t> labels) {
    const Predictions p = predict(model, images);
    Counts c;
    for (std::size_t i = 0; i < p.attention.size(); ++i) c.attention += p.attention[i] == labels[i];
    for (std::size_t i = 0; i < p.prototype.size(); ++i) c.prototype += p.prototype[i] == labels[i];
    return c;
}

AttackConfig batch_attack(AttackConfig cfg, std::size_t batch_index) {
    cfg.seed = derive_seed({cfg.seed, batch_index});
    return cfg;
}

std::size_t eval_size(const ImageSet& data, const EvalOptions& opt) {
    return opt.subset ? std::min(opt.subset, data.size()) : data.size();
}

double percent(std::size_t correct, std::size_t n) {
    return n ? 100.0 * static_cast<double>(correct) / static_cast<double>(n) : 0.0;
}

HeadAccuracy to_accuracy(const Model& model, const Counts& c, std::size_t n) {
    HeadAccuracy a;
    if (model.config().attention_head) a.attention = percent(c.attention, n);
    if (model.config().prototype_head) a.prototype = percent(c.prototype, n);
    return a;
}

/// Per-batch counts for each of `columns` adversary generators, reduced in batch order.
std::vector<Counts> run_columns(const Model& target, const ImageSet& data, const EvalOptions& opt,
                                const std::vector<std::function<Tensor(std::size_t, const Tensor&,
                                                                       std::span<const std::size_t>)>>& columns) {
    const std::size_t n = eval_size(data, opt);
    const std::size_t batches = (n + opt.batch - 1) / opt.batch;
    std::vector<std::vector<Counts>> per_batch(batches, std::vector<Counts>(columns.size()));
    for_each_batch(n, opt, [&](std::size_t b, std::span<const std::size_t> pos) {
        const Tensor x = data.batch(pos);
        const std::vector<std::size_t> y = data.labels_of(pos);
        for (std::size_t c = 0; c < columns.size(); ++c) per_batch[b][c] = count_correct(target, columns[c](b, x, y), y);
    });
    std::vector<Counts> total(columns.size());
    for (const auto& row : per_batch) {
        for (std::size_t c = 0; c < columns.size(); ++c) {
            total[c].attention += row[c].attention;
            total[c].prototype += row[c].prototype;
        }
    }
    return total;
}

int kind_rank(AttackKind k) {
    switch (k) {
        case AttackKind::FGSM: return 0;
        case AttackKind::BIM: return 1;
        case AttackKind::PGD: return 2;
        case AttackKind::MIM: return 3;
    }
    return 4;
}

}  // namespace

void for_each_batch(std::size_t n, const EvalOptions& opt,
                    const std::function<void(std::size_t, std::span<const std::size_t>)>& fn) {
    if (opt.batch == 0) throw std::invalid_argument("evaluation batch must be positive");
    std::vector<std::size_t> positions(n);
    std::iota(positions.begin(), positions.end(), 0);
    const std::size_t batches = (n + opt.batch - 1) / opt.batch;
    std::size_t threads = opt.threads ? opt.threads : std::max(1u, std::thread::hardware_concurrency());
    threads = std::min(threads, std::max<std::size_t>(batches, 1));

    auto run = [&](std::size_t b) {
        const std::size_t start = b * opt.batch;
        fn(b, std::span<const std::size_t>(positions.data() + start, std::min(opt.batch, n - start)));
    };
    if (threads <= 1) {
        for (std::size_t b = 0; b < batches; ++b) run(b);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t b; (b = next.fetch_add(1)) < batches;) {
                try {
                    run(b);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

std::vector<AttackConfig> standard_attack_matrix(std::uint64_t seed) {
    std::vector<AttackConfig> out;
    for (AttackKind k : {AttackKind::FGSM, AttackKind::BIM, AttackKind::PGD, AttackKind::MIM}) {
        for (double eps : {2.0 / 255.0, 8.0 / 255.0}) {
            AttackConfig c = AttackConfig::standard(k, eps);
            c.seed = seed;
            out.push_back(c);
        }
    }
    return out;
}

std::vector<AttackConfig> ordered_attacks(std::vector<AttackConfig> attacks) {
    std::stable_sort(attacks.begin(), attacks.end(), [](const AttackConfig& a, const AttackConfig& b) {
        if (kind_rank(a.kind) != kind_rank(b.kind)) return kind_rank(a.kind) < kind_rank(b.kind);
        if (a.eps != b.eps) return a.eps < b.eps;
        return a.steps < b.steps;
    });
    return attacks;
}

RobustnessReport evaluate(const Model& model, const std::string& name, const ImageSet& data,
                          const std::vector<AttackConfig>& attacks, const std::vector<Substitute>& substitutes,
                          const EvalOptions& opt) {
    for (const auto& a : attacks) a.validate();
    for (const auto& s : substitutes) {
        if (!s.model) throw std::invalid_argument("substitute '" + s.name + "' has no model");
        s.attack.validate();
        if (s.model->config().backbone.input_size != model.config().backbone.input_size)
            throw std::invalid_argument("substitute '" + s.name + "' expects a different image size");
    }
    if (!model.config().attention_head && !model.config().prototype_head)
        throw std::invalid_argument("model has no classification head");

    const std::vector<AttackConfig> ordered = ordered_attacks(attacks);
    using Column = std::function<Tensor(std::size_t, const Tensor&, std::span<const std::size_t>)>;
    std::vector<Column> columns;
    RobustnessReport report;
    report.columns.push_back("Clean");
    columns.push_back([](std::size_t, const Tensor& x, std::span<const std::size_t>) { return x; });
    for (const auto& a : ordered) {
        report.columns.push_back(a.label());
        columns.push_back([&model, a](std::size_t b, const Tensor& x, std::span<const std::size_t> y) {
            return run_attack(batch_attack(a, b), model_objective(model, a.target), x, y);
        });
    }
    for (const auto& s : substitutes) {
        report.columns.push_back("BB-" + s.name);
        columns.push_back([&s](std::size_t b, const Tensor& x, std::span<const std::size_t> y) {
            return run_attack(batch_attack(s.attack, b), model_objective(*s.model, s.attack.target), x, y);
        });
    }

    const std::size_t n = eval_size(data, opt);
    const std::vector<Counts> counts = run_columns(model, data, opt, columns);
    if (model.config().attention_head) {
        RobustnessReport::Row row{name + "-A", {}};
        for (const auto& c : counts) row.values.push_back(percent(c.attention, n));
        report.rows.push_back(std::move(row));
    }
    if (model.config().prototype_head) {
        RobustnessReport::Row row{name + "-FR", {}};
        for (const auto& c : counts) row.values.push_back(percent(c.prototype, n));
        report.rows.push_back(std::move(row));
    }
    return report;
}

HeadAccuracy transfer_eval(const Model& source, const Model& target, const ImageSet& data, const AttackConfig& cfg,
                           const EvalOptions& opt) {
    cfg.validate();
    const auto counts = run_columns(target, data, opt, {[&](std::size_t b, const Tensor& x, std::span<const std::size_t> y) {
        return run_attack(batch_attack(cfg, b), model_objective(source, cfg.target), x, y);
    }});
    return to_accuracy(target, counts[0], eval_size(data, opt));
}

HeadAccuracy attack_accuracy(const Model& model, const ImageSet& data, const AttackConfig& cfg, const EvalOptions& opt) {
    return transfer_eval(model, model, data, cfg, opt);
}

HeadAccuracy clean_accuracy(const Model& model, const ImageSet& data, const EvalOptions& opt) {
    const auto counts = run_columns(model, data, opt, {[](std::size_t, const Tensor& x, std::span<const std::size_t>) {
        return x;
    }});
    return to_accuracy(model, counts[0], eval_size(data, opt));
}

std::string RobustnessReport::to_text() const {
    std::size_t name_width = 5;
    for (const auto& r : rows) name_width = std::max(name_width, r.name.size());
    std::vector<std::size_t> widths;
    for (const auto& c : columns) widths.push_back(std::max<std::size_t>(c.size(), 6));
    std::string out;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(name_width), "Model");
    out += buf;
    for (std::size_t c = 0; c < columns.size(); ++c) {
        std::snprintf(buf, sizeof buf, "  %*s", static_cast<int>(widths[c]), columns[c].c_str());
        out += buf;
    }
    out += '\n';
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(name_width), r.name.c_str());
        out += buf;
        for (std::size_t c = 0; c < r.values.size(); ++c) {
            std::snprintf(buf, sizeof buf, "  %*.2f", static_cast<int>(widths[c]), r.values[c]);
            out += buf;
        }
        out += '\n';
    }
    return out;
}

std::string RobustnessReport::to_csv() const {
    std::string out = "model";
    for (const auto& c : columns) out += "," + c;
    out += '\n';
    char buf[32];
    for (const auto& r : rows) {
        out += r.name;
        for (double v : r.values) {
            std::snprintf(buf, sizeof buf, ",%.4f", v);
            out += buf;
        }
        out += '\n';
    }
    return out;
}

double RobustnessReport::at(const std::string& row, const std::string& column) const {
    const auto c = std::find(columns.begin(), columns.end(), column);
    if (c == columns.end()) throw std::out_of_range("report has no column " + column);
    for (const auto& r : rows)
        if (r.name == row) return r.values.at(static_cast<std::size_t>(c - columns.begin()));
    throw std::out_of_range("report has no row " + row);
}

}  // namespace psep
