#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "psep/augment.hpp"
#include "psep/checkpoint.hpp"
#include "psep/config.hpp"
#include "psep/dataset.hpp"
#include "psep/evaluate.hpp"
#include "psep/export.hpp"
#include "psep/ops.hpp"
#include "psep/train.hpp"

using namespace psep;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("psep_unit_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

SyntheticDatasetConfig tiny_data() {
    SyntheticDatasetConfig d;
    d.classes = 2;
    d.families = 1;
    d.image_size = 24;
    d.patch_size = 12;
    d.decoys = 0;
    d.train_per_class = 4;
    d.test_per_class = 2;
    return d;
}

TrainConfig tiny_train() {
    TrainConfig c;
    c.model.backbone.input_size = 24;
    c.model.backbone.stages = {{4, 1}, {6, 1}};
    c.model.classes = 2;
    c.model.per_class = 2;
    c.model.proto_dim = 4;
    c.model.reduce_mid = 4;
    c.loss.batch = 4;
    c.schedule.warmup_epochs = 1;
    c.schedule.joint_epochs = 2;
    c.schedule.decay_every = 1;
    c.schedule.classifier_epochs = 2;
    c.seed = 5;
    return c;
}

/// Shared tiny dataset, generated once per process.
const Dataset& tiny_dataset() {
    static const Dataset ds = gen_dataset(tiny_data(), 42, scratch("tiny_data"));
    return ds;
}

}  // namespace

TEST_CASE("key=value parsing") {
    const KeyValues kv = parse_key_values("# comment\n\n lambda1 = 100 \nseed=7\neps=8/255\n");
    CHECK(kv.size() == 3);
    CHECK(kv.at("lambda1") == "100");
    CHECK_THROWS_AS(parse_key_values("novalue\n"), std::invalid_argument);

    TrainConfig t;
    apply_keys(t, kv, true);
    CHECK(t.loss.lambda1 == 100.0);
    CHECK(t.seed == 7);
    AttackConfig a;
    apply_keys(a, kv, true);
    CHECK(a.eps == 8.0 / 255.0);
    CHECK_THROWS_AS(apply_keys(t, kv), std::invalid_argument);
    CHECK_NOTHROW(check_known_keys(kv));
    CHECK_THROWS_AS(check_known_keys({{"lamda1", "3"}}), std::invalid_argument);
    CHECK_THROWS_AS(apply_keys(t, {{"adv_train", "maybe"}}), std::invalid_argument);
    CHECK_THROWS_AS(apply_keys(t, {{"joint_epochs", "-3"}}), std::invalid_argument);
    CHECK_THROWS_AS(apply_keys(t, {{"joint_lr", "fast"}}), std::invalid_argument);
}

TEST_CASE("configs round-trip through key=value text") {
    TrainConfig t = tiny_train();
    t.variant = Variant::Baseline;
    t.loss.lambda2 = 0.125;
    t.adv.enabled = true;
    TrainConfig back;
    apply_keys(back, parse_key_values(format_key_values(to_key_values(t))));
    CHECK(to_key_values(back) == to_key_values(t));
    CHECK(back.model == t.model);

    AttackConfig a = AttackConfig::standard(AttackKind::MIM, 2.0 / 255.0);
    a.mu = 0.5;
    a.target = AttackTarget::Attention;
    AttackConfig ab;
    apply_keys(ab, to_key_values(a));
    CHECK(ab.kind == a.kind);
    CHECK(ab.eps == a.eps);
    CHECK(ab.alpha == a.alpha);
    CHECK(ab.mu == a.mu);
    CHECK(ab.target == a.target);

    CHECK(format_stages(parse_stages("16x2,32x2")) == "16x2,32x2");
    CHECK_THROWS_AS(parse_stages("16,32"), std::invalid_argument);
}

TEST_CASE("schedule phases and learning rates") {
    TrainSchedule s;
    CHECK(phase_at(s, 0) == Phase::Warmup);
    CHECK(phase_at(s, 5) == Phase::Joint);
    CHECK(phase_at(s, 29) == Phase::Joint);
    CHECK(phase_at(s, 30) == Phase::Classifier);
    CHECK(phase_at(s, 45) == Phase::Done);
    CHECK(learning_rate_at(s, 0) == 3e-4);
    CHECK(learning_rate_at(s, 5) == 3e-3);
    CHECK(std::abs(learning_rate_at(s, 15) - 3e-4) < 1e-18);
    CHECK(std::abs(learning_rate_at(s, 25) - 3e-5) < 1e-18);
    CHECK(s.projection_epoch() == 30);
}

TEST_CASE("synthetic dataset generation is deterministic") {
    SyntheticDatasetConfig cfg;
    cfg.train_per_class = 3;
    cfg.test_per_class = 1;
    const fs::path a = scratch("gen_a"), b = scratch("gen_b");
    const Dataset da = gen_dataset(cfg, 42, a);
    const Dataset db = gen_dataset(cfg, 42, b);
    REQUIRE(da.entries.size() == 8 * 4);
    CHECK(slurp(a / "split.csv") == slurp(b / "split.csv"));
    for (const auto& e : da.entries) CHECK(slurp(a / e.path) == slurp(b / e.path));
    CHECK(da.split("train").size() == 24);
    CHECK(da.classes() == 8);

    const Dataset loaded = load_dataset(a);
    CHECK(loaded.entries.size() == da.entries.size());
    CHECK(loaded.entries[5].path == da.entries[5].path);
    CHECK(loaded.entries[5].label == da.entries[5].label);
}

TEST_CASE("default synthetic config has 1600 training images") {
    const SyntheticDatasetConfig cfg;
    CHECK(cfg.classes * cfg.train_per_class == 1600);
    SyntheticDatasetConfig bad;
    bad.families = 3;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = SyntheticDatasetConfig{};
    bad.patch_size = 80;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("ppm round trip") {
    std::mt19937_64 rng(1);
    Tensor img(Shape{5, 7, 3});
    std::uniform_int_distribution<int> d(0, 255);
    for (double& v : img.data()) v = d(rng) / 255.0;
    const fs::path p = scratch("ppm") / "x.ppm";
    write_ppm(p, img);
    CHECK(read_ppm(p) == img);
    CHECK_THROWS(read_ppm(scratch("ppm") / "missing.ppm"));
}

TEST_CASE("augmentation") {
    const Dataset& src = tiny_dataset();
    const fs::path one = scratch("aug1");
    const Dataset same = augment_dataset(src, 1, 3, one);
    REQUIRE(same.entries.size() == src.entries.size());
    for (std::size_t i = 0; i < src.entries.size(); ++i) {
        CHECK(same.entries[i].path == src.entries[i].path);
        CHECK(slurp(one / same.entries[i].path) == slurp(src.root / src.entries[i].path));
    }

    const Dataset three = augment_dataset(src, 3, 3, scratch("aug3"));
    const std::size_t train = src.split("train").size(), test = src.split("test").size();
    CHECK(three.split("train").size() == 3 * train);
    CHECK(three.split("test").size() == test);
    std::map<std::string, std::size_t> label_of;
    const auto original = [](const std::string& path) {
        std::string p = fs::path(path).replace_extension().string();
        if (const auto v = p.find("_v"); v != std::string::npos) p = p.substr(0, v);
        return p;
    };
    for (const auto& e : src.entries) label_of[original(e.path)] = e.label;
    for (const auto& e : three.entries) CHECK(label_of.at(original(e.path)) == e.label);
    const Dataset again = augment_dataset(src, 3, 3, scratch("aug3b"));
    for (const auto& e : three.entries) CHECK(slurp(three.root / e.path) == slurp(again.root / e.path));

    CHECK_THROWS_AS(augment_dataset(src, 0, 3, scratch("aug0")), std::invalid_argument);
    CHECK_THROWS_AS(augment_dataset(src, 2, 3, src.root), std::invalid_argument);

    const AugmentParams p = sample_augment_params(3, 17, 2);
    CHECK(std::abs(p.rotation) <= 15.0 * 3.14159265358979 / 180.0 + 1e-12);
    CHECK(std::abs(p.shear) <= 0.1);
    CHECK(p.elastic <= 1.5);
    const Tensor img = ImageSet(src, "train").image(0);
    CHECK(augment_image(img, AugmentParams{}, 0) == img);
}

TEST_CASE("checkpoint round trip and rejection") {
    const TrainConfig cfg = tiny_train();
    const Model model(cfg.resolved_model(), 9);
    const Checkpoint ck = make_checkpoint(cfg, model);
    const std::string bytes = serialize_checkpoint(ck);
    CHECK(bytes.substr(0, 5) == "PSEP1");
    const Checkpoint back = deserialize_checkpoint(bytes);
    CHECK(serialize_checkpoint(back) == bytes);
    CHECK(back.params == model.params());

    const fs::path p = scratch("ckpt") / "m.ckpt";
    fs::create_directories(p.parent_path());
    save_checkpoint(ck, p);
    CHECK(serialize_checkpoint(load_checkpoint(p)) == bytes);

    std::string bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(bad), CheckpointError);
    std::string version = bytes;
    version[5] = 9;
    CHECK_THROWS_AS(deserialize_checkpoint(version), CheckpointError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), CheckpointError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes + "x"), CheckpointError);

    Checkpoint extra = ck;
    extra.params["mystery"] = Tensor(Shape{2});
    CHECK_THROWS_AS(deserialize_checkpoint(serialize_checkpoint(extra)), CheckpointError);
    Checkpoint missing = ck;
    missing.params.erase(kClassifier);
    CHECK_THROWS_AS(deserialize_checkpoint(serialize_checkpoint(missing)), CheckpointError);
    Checkpoint reshaped = ck;
    reshaped.params[kPrototypes] = Tensor(Shape{3, 4});
    CHECK_THROWS_AS(deserialize_checkpoint(serialize_checkpoint(reshaped)), CheckpointError);
}

TEST_CASE("training resumed at an epoch boundary matches an uninterrupted run") {
    const Dataset& ds = tiny_dataset();
    const ImageSet train(ds, "train");
    const TrainConfig cfg = tiny_train();

    Trainer full(cfg, train);
    full.run();
    REQUIRE(full.finished());

    for (std::size_t stop : {std::size_t{2}, std::size_t{4}}) {
        Trainer first(cfg, train);
        first.run(stop);
        CHECK(first.next_epoch() == stop);
        const Checkpoint mid = deserialize_checkpoint(serialize_checkpoint(first.checkpoint()));
        REQUIRE(mid.state.has_value());
        Trainer second(mid, train);
        second.run();
        CHECK(serialize_checkpoint(second.checkpoint()) == serialize_checkpoint(full.checkpoint()));
        const auto& tail = second.log();
        REQUIRE(tail.size() == full.log().size() - stop);
        for (std::size_t i = 0; i < tail.size(); ++i) CHECK(format_metrics(tail[i]) == format_metrics(full.log()[stop + i]));
    }

    // Projection left every prototype on a same-class training patch.
    const Model& m = full.model();
    for (std::size_t l = 0; l < m.class_of().size(); ++l) {
        REQUIRE(m.sources()[l].has_value());
        CHECK(train.labels()[train.position_of(m.sources()[l]->image_id)] == m.class_of()[l]);
    }
}

TEST_CASE("trainer rejects a checkpoint without training state") {
    const Dataset& ds = tiny_dataset();
    const ImageSet train(ds, "train");
    const TrainConfig cfg = tiny_train();
    const Model model(cfg.resolved_model(), 1);
    CHECK_THROWS_AS(Trainer(make_checkpoint(cfg, model), train), std::invalid_argument);
}

TEST_CASE("evaluation report layout and identities") {
    const Dataset& ds = tiny_dataset();
    const ImageSet test(ds, "test");
    const TrainConfig cfg = tiny_train();
    const Model model(cfg.resolved_model(), 3);

    const auto attacks = ordered_attacks(standard_attack_matrix(1));
    std::vector<std::string> labels;
    for (const auto& a : attacks) labels.push_back(a.label());
    CHECK(labels == std::vector<std::string>{"FGSM(1,2)", "FGSM(1,8)", "BIM(10,2)", "BIM(10,8)", "PGD(10,2)",
                                             "PGD(10,8)", "MIM(10,2)", "MIM(10,8)"});

    const RobustnessReport clean = evaluate(model, "m", test, {});
    CHECK(clean.columns == std::vector<std::string>{"Clean"});
    CHECK(clean.rows.size() == 2);
    CHECK(clean.rows[0].name == "m-A");
    CHECK(clean.rows[1].name == "m-FR");

    const Model other(cfg.resolved_model(), 4);
    AttackConfig pgd = AttackConfig::standard(AttackKind::PGD, 8.0 / 255.0);
    pgd.steps = 2;
    const RobustnessReport r = evaluate(model, "m", test, {pgd}, {{"sub", &other, pgd}});
    CHECK(r.columns == std::vector<std::string>{"Clean", "PGD(2,8)", "BB-sub"});
    for (const auto& row : r.rows)
        for (double v : row.values) {
            CHECK(v >= 0.0);
            CHECK(v <= 100.0);
        }
    CHECK(r.to_csv().rfind("model,Clean,PGD(2,8),BB-sub\n", 0) == 0);

    const HeadAccuracy white = attack_accuracy(model, test, pgd);
    const HeadAccuracy self = transfer_eval(model, model, test, pgd);
    CHECK(white.attention == self.attention);
    CHECK(white.prototype == self.prototype);
    CHECK(r.at("m-A", "PGD(2,8)") == white.attention);

    AttackConfig none = pgd;
    none.eps = 0.0;
    none.alpha = 0.0;
    const HeadAccuracy zero = transfer_eval(other, model, test, none);
    const HeadAccuracy base = clean_accuracy(model, test);
    CHECK(zero.attention == base.attention);
    CHECK(zero.prototype == base.prototype);

    AttackConfig invalid = pgd;
    invalid.alpha = 1.0;
    CHECK_THROWS_AS(evaluate(model, "m", test, {invalid}), std::invalid_argument);

    EvalOptions one_thread;
    one_thread.threads = 1;
    EvalOptions many;
    many.threads = 3;
    many.batch = 1;
    CHECK(evaluate(model, "m", test, {pgd}, {}, one_thread).to_csv() == evaluate(model, "m", test, {pgd}, {}, many).to_csv());
}

TEST_CASE("prototype and heatmap exports") {
    const Dataset& ds = tiny_dataset();
    const ImageSet train(ds, "train");
    Trainer t(tiny_train(), train);
    t.run();
    const Model& m = t.model();

    const std::string csv = prototype_vectors_csv(m);
    const auto rows = parse_prototype_csv(csv);
    REQUIRE(rows.size() == m.class_of().size());
    const Tensor& p = m.params().at(kPrototypes);
    for (const auto& r : rows) {
        CHECK(r.projected);
        for (std::size_t k = 0; k < r.vector.size(); ++k) CHECK(static_cast<float>(r.vector[k]) == static_cast<float>(p[r.id * r.vector.size() + k]));
    }

    const std::size_t l = 1;
    const auto& src = *m.sources()[l];
    const Tensor image = train.image(train.position_of(src.image_id));
    const fs::path dir = scratch("heat");
    const HeatmapExport h = export_heatmaps(m, image, 100, dir, "img");
    CHECK(h.entries.size() == m.class_of().size());
    CHECK(fs::exists(dir / "img_attention.ppm"));
    CHECK(fs::exists(dir / "img_scores.csv"));
    for (const auto& e : h.entries) CHECK(fs::exists(dir / e.file));
    for (std::size_t r = 1; r < h.entries.size(); ++r) CHECK(h.entries[r - 1].score >= h.entries[r].score);

    Graph g;
    Bindings b(g, m.params(), nullptr);
    const Forward f = forward(m, b, g.constant(image.reshaped(Shape{1, 24, 24, 3})));
    for (std::size_t i = 0; i < h.scores.size(); ++i) CHECK(std::abs(h.scores[i] - f.scores.value()[i]) < 1e-6);
    for (const auto& e : h.entries) {
        if (e.prototype != l) continue;
        CHECK(e.peak_y == src.y);
        CHECK(e.peak_x == src.x);
    }

    const HeatmapExport top = export_heatmaps(m, image, 1, {}, "x");
    CHECK(top.entries.size() == 1);
}

TEST_CASE("separation summary on a hand-built table") {
    std::vector<PrototypeRow> rows(4);
    const double v[4][2] = {{0, 0}, {0, 1}, {10, 0}, {10, 1}};
    for (std::size_t i = 0; i < 4; ++i) {
        rows[i].id = i;
        rows[i].cls = i / 2;
        rows[i].vector = {v[i][0], v[i][1]};
        rows[i].attention = static_cast<double>(i);
        rows[i].projected = true;
    }
    const SeparationSummary s = separation_summary(rows, 2);
    CHECK(s.intra == 1.0);
    CHECK(std::abs(s.inter - (10.0 + std::sqrt(101.0)) / 2.0) < 1e-12);
    CHECK(s.background == 1.0);
    CHECK(s.discriminative == 1.0);
    CHECK_THROWS_AS(separation_summary(rows, 1), std::invalid_argument);
}

TEST_CASE("baseline variant trains without the regularizer") {
    TrainConfig cfg;
    cfg.loss.lambda1 = 3.0;
    cfg.loss.lambda2 = 0.5;
    CHECK(cfg.resolved_loss().lambda1 == 3.0);
    cfg.variant = Variant::Baseline;
    CHECK(cfg.resolved_loss().lambda1 == 0.0);
    CHECK(cfg.resolved_loss().lambda2 == 0.0);
    CHECK(cfg.resolved_loss().batch == cfg.loss.batch);
}
