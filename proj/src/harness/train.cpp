#include "psep/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "psep/attacks.hpp"
#include "psep/ops.hpp"
#include "psep/rng.hpp"

namespace psep {

std::string to_string(Phase p) {
    switch (p) {
        case Phase::Warmup: return "warmup";
        case Phase::Joint: return "joint";
        case Phase::Classifier: return "classifier";
        case Phase::Done: return "done";
    }
    return "?";
}

Phase phase_at(const TrainSchedule& s, std::size_t epoch) {
    if (epoch < s.warmup_epochs) return Phase::Warmup;
    if (epoch < s.projection_epoch()) return Phase::Joint;
    if (epoch < s.total_epochs()) return Phase::Classifier;
    return Phase::Done;
}

double learning_rate_at(const TrainSchedule& s, std::size_t epoch) {
    switch (phase_at(s, epoch)) {
        case Phase::Warmup: return s.warmup_lr;
        case Phase::Joint: {
            const std::size_t k = (epoch - s.warmup_epochs) / s.decay_every;
            return s.joint_lr * std::pow(s.lr_decay, static_cast<double>(k));
        }
        case Phase::Classifier: return s.classifier_lr;
        case Phase::Done: return 0.0;
    }
    return 0.0;
}

std::string format_metrics(const EpochMetrics& m) {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "epoch %3zu %-10s lr %.2e loss %10.4f ce_att %.4f ce_reg %.4f reg %10.4f acc_att %6.2f acc_proto %6.2f",
                  m.epoch, to_string(m.phase).c_str(), m.lr, m.loss, m.ce_att, m.ce_reg, m.reg, m.acc_att, m.acc_proto);
    return buf;
}

Trainer::Trainer(TrainConfig cfg, const ImageSet& train) : cfg_(std::move(cfg)), train_(train) {
    cfg_.validate();
    if (train_.size() == 0) throw std::invalid_argument("trainer: empty training set");
    model_ = Model(cfg_.resolved_model(), derive_seed({cfg_.seed, 0x6d6f64656cULL}));
}

Trainer::Trainer(const Checkpoint& resume, const ImageSet& train) : cfg_(resume.config), train_(train) {
    cfg_.validate();
    if (!resume.state) throw std::invalid_argument("trainer: checkpoint carries no training state");
    model_ = model_from_checkpoint(resume);
    adam_.state() = resume.state->adam;
    next_epoch_ = resume.state->next_epoch;
}

Checkpoint Trainer::checkpoint() const {
    return make_checkpoint(cfg_, model_, TrainingState{next_epoch_, adam_.state()});
}

bool Trainer::trainable(const std::string& name, Phase phase) const {
    const bool backbone = name.rfind("backbone.", 0) == 0;
    const bool classifier = name == kClassifier;
    switch (phase) {
        case Phase::Warmup: return !backbone && !classifier;
        case Phase::Joint: return !classifier;
        case Phase::Classifier: return classifier;
        case Phase::Done: return false;
    }
    return false;
}

Tensor fast_adversarial_example(const Model& model, const Tensor& images, std::span<const std::size_t> labels,
                                double eps, double alpha, std::uint64_t seed) {
    if (eps == 0.0) return images;
    std::mt19937_64 rng(seed);
    Tensor delta = uniform_delta(images.shape(), eps, rng);
    Tensor start = images;
    for (std::size_t i = 0; i < start.size(); ++i) start[i] = std::clamp(images[i] + delta[i], 0.0, 1.0);
    const Tensor grad = model_objective(model, AttackTarget::Joint)(start, labels).grad;
    Tensor adv = images;
    for (std::size_t i = 0; i < adv.size(); ++i) {
        const double d = std::clamp(delta[i] + alpha * sign0(grad[i]), -eps, eps);
        adv[i] = std::clamp(images[i] + d, 0.0, 1.0);
    }
    return adv;
}

double Trainer::step(const Tensor& images, std::span<const std::size_t> labels, Phase phase, double lr,
                     std::uint64_t batch_seed) {
    const Tensor* input = &images;
    Tensor adv;
    if (cfg_.adv.enabled) {
        adv = fast_adversarial_example(model_, images, labels, cfg_.adv.eps, cfg_.adv.alpha, batch_seed);
        input = &adv;
    }
    Graph g;
    Bindings b(g, model_.params(), [&](const std::string& n) { return trainable(n, phase); });
    Forward f = forward(model_, b, g.constant(*input));
    LossBreakdown l = total_loss(model_, f, labels, cfg_.resolved_loss());
    const double loss = l.total.value().item();
    if (!std::isfinite(loss)) return loss;
    g.backward(l.total);
    std::map<std::string, Tensor> grads;
    for (const auto& [name, v] : b.vars())
        if (v.requires_grad()) grads.emplace(name, v.grad());
    adam_.step(model_.params(), grads, lr);
    return loss;
}

EpochMetrics Trainer::run_epoch(std::size_t epoch) {
    const Phase phase = phase_at(cfg_.schedule, epoch);
    EpochMetrics m;
    m.epoch = epoch;
    m.phase = phase;
    m.lr = learning_rate_at(cfg_.schedule, epoch);

    std::vector<std::size_t> order(train_.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed({cfg_.seed, epoch, 0x73687566ULL}));
    std::shuffle(order.begin(), order.end(), rng);

    const std::size_t bs = cfg_.loss.batch;
    std::size_t correct_att = 0, correct_proto = 0, batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs, ++batches) {
        const std::span<const std::size_t> pos(order.data() + start, std::min(bs, order.size() - start));
        const Tensor images = train_.batch(pos);
        const std::vector<std::size_t> labels = train_.labels_of(pos);
        const std::uint64_t batch_seed = derive_seed({cfg_.seed, epoch, batches, 0x616476ULL});

        const Tensor* input = &images;
        Tensor adv;
        if (cfg_.adv.enabled) {
            adv = fast_adversarial_example(model_, images, labels, cfg_.adv.eps, cfg_.adv.alpha, batch_seed);
            input = &adv;
        }
        Graph g;
        Bindings b(g, model_.params(), [&](const std::string& n) { return trainable(n, phase); });
        Forward f = forward(model_, b, g.constant(*input));
        LossBreakdown l = total_loss(model_, f, labels, cfg_.resolved_loss());
        const double loss = l.total.value().item();
        if (!std::isfinite(loss)) {
            std::string last = log_.empty() ? "no finished epoch" : format_metrics(log_.back());
            throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + " batch " +
                                   std::to_string(batches) + " (ce_att " + std::to_string(l.value(l.ce_att)) +
                                   ", ce_reg " + std::to_string(l.value(l.ce_reg)) + ", reg " +
                                   std::to_string(l.value(l.reg)) + "); last finite epoch: " + last);
        }
        m.loss += loss;
        m.ce_att += l.value(l.ce_att);
        m.ce_reg += l.value(l.ce_reg);
        m.reg += l.value(l.reg);
        if (f.attention.logits.valid()) {
            const auto pred = argmax_rows(f.attention.logits.value());
            for (std::size_t i = 0; i < pred.size(); ++i) correct_att += pred[i] == labels[i];
        }
        if (f.proto_logits.valid()) {
            const auto pred = argmax_rows(f.proto_logits.value());
            for (std::size_t i = 0; i < pred.size(); ++i) correct_proto += pred[i] == labels[i];
        }
        g.backward(l.total);
        std::map<std::string, Tensor> grads;
        for (const auto& [name, v] : b.vars())
            if (v.requires_grad()) grads.emplace(name, v.grad());
        adam_.step(model_.params(), grads, m.lr);
    }
    const double nb = static_cast<double>(std::max<std::size_t>(batches, 1));
    m.loss /= nb;
    m.ce_att /= nb;
    m.ce_reg /= nb;
    m.reg /= nb;
    m.acc_att = 100.0 * static_cast<double>(correct_att) / static_cast<double>(train_.size());
    m.acc_proto = 100.0 * static_cast<double>(correct_proto) / static_cast<double>(train_.size());
    return m;
}

void Trainer::project() {
    if (!model_.config().prototype_head) return;
    PrototypeProjector projector(model_.bank());
    std::map<std::size_t, Tensor> attention_by_id;
    const std::size_t bs = 32;
    for (std::size_t start = 0; start < train_.size(); start += bs) {
        std::vector<std::size_t> pos(std::min(bs, train_.size() - start));
        std::iota(pos.begin(), pos.end(), start);
        Graph g;
        Bindings b(g, model_.params(), nullptr);
        Forward f = forward(model_, b, g.constant(train_.batch(pos)));
        const Shape& zs = f.z.shape();
        const std::size_t per_z = zs[1] * zs[2] * zs[3], per_a = zs[1] * zs[2];
        for (std::size_t i = 0; i < pos.size(); ++i) {
            LabeledPatches p;
            p.z = Tensor(Shape{zs[1], zs[2], zs[3]},
                         std::vector<double>(f.z.value().data().begin() + static_cast<long>(i * per_z),
                                             f.z.value().data().begin() + static_cast<long>((i + 1) * per_z)));
            p.label = train_.labels()[pos[i]];
            p.image_id = train_.ids()[pos[i]];
            projector.add(p);
            attention_by_id[p.image_id] =
                Tensor(Shape{zs[1], zs[2]}, std::vector<double>(f.weights.value().data().begin() + static_cast<long>(i * per_a),
                                                                f.weights.value().data().begin() + static_cast<long>((i + 1) * per_a)));
        }
    }
    PrototypeBank bank = projector.finish();
    for (auto& s : bank.sources) {
        const Tensor& a = attention_by_id.at(s->image_id);
        s->attention = static_cast<float>(a[s->y * a.dim(1) + s->x]);
    }
    model_.set_bank(bank);
    cached_scores_.reset();
}

EpochMetrics Trainer::run_classifier_epoch(std::size_t epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.phase = Phase::Classifier;
    m.lr = learning_rate_at(cfg_.schedule, epoch);
    const std::size_t n = train_.size(), protos = model_.class_of().size();
    if (!cached_scores_) {
        // every other parameter is frozen in this phase, so the scores are fixed
        Tensor scores(Shape{n, protos});
        const std::size_t bs = 32;
        for (std::size_t start = 0; start < n; start += bs) {
            std::vector<std::size_t> pos(std::min(bs, n - start));
            std::iota(pos.begin(), pos.end(), start);
            Graph g;
            Bindings b(g, model_.params(), nullptr);
            Forward f = forward(model_, b, g.constant(train_.batch(pos)));
            std::copy(f.scores.value().data().begin(), f.scores.value().data().end(),
                      scores.data().begin() + static_cast<long>(start * protos));
        }
        cached_scores_ = std::move(scores);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed({cfg_.seed, epoch, 0x73687566ULL}));
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t bs = cfg_.loss.batch;
    std::size_t correct = 0, batches = 0;
    for (std::size_t start = 0; start < n; start += bs, ++batches) {
        const std::size_t count = std::min(bs, n - start);
        Tensor s(Shape{count, protos});
        std::vector<std::size_t> labels(count);
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t p = order[start + i];
            std::copy_n(cached_scores_->data().begin() + static_cast<long>(p * protos), protos,
                        s.data().begin() + static_cast<long>(i * protos));
            labels[i] = train_.labels()[p];
        }
        Graph g;
        Var w = g.leaf(model_.params().at(kClassifier), true, kClassifier);
        Var logits = classify(g.constant(std::move(s)), w);
        Var ce = ops::softmax_cross_entropy(logits, labels);
        if (!std::isfinite(ce.value().item())) throw TrainingDiverged("classifier phase diverged at epoch " + std::to_string(epoch));
        g.backward(ce);
        const auto pred = argmax_rows(logits.value());
        for (std::size_t i = 0; i < count; ++i) correct += pred[i] == labels[i];
        m.ce_reg += ce.value().item();
        adam_.step(model_.params(), {{kClassifier, w.grad()}}, m.lr);
    }
    m.ce_reg /= static_cast<double>(std::max<std::size_t>(batches, 1));
    m.loss = m.ce_reg;
    m.acc_proto = 100.0 * static_cast<double>(correct) / static_cast<double>(n);
    return m;
}

void Trainer::run(std::size_t until_epoch, const std::function<void(const EpochMetrics&)>& on_epoch) {
    const TrainSchedule& s = cfg_.schedule;
    const std::size_t end = std::min(until_epoch, s.total_epochs());
    while (next_epoch_ < end) {
        const std::size_t epoch = next_epoch_;
        const Phase phase = phase_at(s, epoch);
        if (epoch == 0 || epoch == s.warmup_epochs || epoch == s.projection_epoch()) adam_.reset();
        if (phase == Phase::Classifier && !model_.config().prototype_head) {
            next_epoch_ = s.total_epochs();
            break;
        }
        if (phase == Phase::Classifier && epoch == s.projection_epoch()) project();
        EpochMetrics m = phase == Phase::Classifier ? run_classifier_epoch(epoch) : run_epoch(epoch);
        log_.push_back(m);
        ++next_epoch_;
        if (on_epoch) on_epoch(m);
    }
}

}  // namespace psep
