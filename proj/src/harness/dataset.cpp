#include "psep/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include "psep/rng.hpp"

namespace psep {

namespace fs = std::filesystem;

void SyntheticDatasetConfig::validate() const {
    if (classes < 2) throw std::invalid_argument("dataset: at least two classes");
    if (families == 0 || families > 4 || classes % families != 0) {
        throw std::invalid_argument("dataset: class count must be divisible by the family count (1..4 families)");
    }
    if (classes / families > 4) throw std::invalid_argument("dataset: at most 4 classes per family");
    if (patch_size < 12 || patch_size * 2 > image_size) throw std::invalid_argument("dataset: patch_size must be at least 12 and at most half the image size");
    if (train_per_class == 0) throw std::invalid_argument("dataset: empty training split");
}

std::size_t Dataset::classes() const {
    std::size_t k = 0;
    for (const auto& e : entries) k = std::max(k, e.label + 1);
    return k;
}

std::vector<std::size_t> Dataset::split(const std::string& name) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i)
        if (entries[i].split == name) out.push_back(i);
    return out;
}

Dataset load_dataset(const fs::path& root) {
    std::ifstream in(root / "split.csv");
    if (!in) throw std::runtime_error("cannot open " + (root / "split.csv").string());
    Dataset ds;
    ds.root = root;
    std::string line;
    std::getline(in, line);
    if (line != "path,label,split") throw std::runtime_error("split.csv: unexpected header '" + line + "'");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        DatasetEntry e;
        std::string label;
        if (!std::getline(ss, e.path, ',') || !std::getline(ss, label, ',') || !std::getline(ss, e.split)) {
            throw std::runtime_error("split.csv: malformed line '" + line + "'");
        }
        e.label = std::stoul(label);
        ds.entries.push_back(std::move(e));
    }
    return ds;
}

void write_index(const Dataset& ds) {
    std::ofstream out(ds.root / "split.csv", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (ds.root / "split.csv").string());
    out << "path,label,split\n";
    for (const auto& e : ds.entries) out << e.path << ',' << e.label << ',' << e.split << '\n';
}

Tensor read_ppm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open image " + path.string());
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255 || w == 0 || h == 0) throw std::runtime_error("unsupported PPM " + path.string());
    in.get();
    std::vector<unsigned char> raw(w * h * 3);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in) throw std::runtime_error("truncated PPM " + path.string());
    Tensor t(Shape{h, w, 3});
    for (std::size_t i = 0; i < raw.size(); ++i) t[i] = raw[i] / 255.0;
    return t;
}

namespace {

unsigned char quantise(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

void write_ppm(const fs::path& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(2) != 3) throw ShapeError("write_ppm: expected [H,W,3], got " + to_string(image.shape()));
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write image " + path.string());
    out << "P6\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
    std::vector<unsigned char> raw(image.size());
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = quantise(image[i]);
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw std::runtime_error("failed writing image " + path.string());
}

namespace {

constexpr double kLight = 0.85;
constexpr double kDark = 0.12;

// Base shape of a family: 0 ring, 1 disc outline, 2 diamond outline, 3 double frame.
// Returns -1 outside the glyph, 0 for fill, 1 for outline.
int base_shape(std::size_t family, double px, double py, double size) {
    const double c = (size - 1.0) / 2.0;
    const double dx = px - c, dy = py - c;
    switch (family) {
        case 0: {
            const double edge = std::min({px, py, size - 1.0 - px, size - 1.0 - py});
            return edge < 1.0 ? 1 : 0;
        }
        case 1: {
            const double r = std::hypot(dx, dy);
            if (r > c + 0.5) return -1;
            return r >= c - 0.5 ? 1 : 0;
        }
        case 2: {
            const double r = std::abs(dx) + std::abs(dy);
            if (r > c + 1.0) return -1;
            return r >= c ? 1 : 0;
        }
        default: {
            const double edge = std::min({px, py, size - 1.0 - px, size - 1.0 - py});
            return (edge < 1.0 || (edge >= 2.0 && edge < 3.0)) ? 1 : 0;
        }
    }
}

// Class-specific detail inside the glyph; every detail is symmetric under a horizontal flip.
bool detail(std::size_t kind, std::size_t px, std::size_t py, std::size_t size) {
    const std::size_t lo = size / 2 - 1, hi = size / 2;  // two central rows/cols
    const std::size_t a = 2, b = size - 3;
    const bool hbar = py >= lo && py <= hi && px >= a && px <= b;
    const bool vbar = px >= lo && px <= hi && py >= a && py <= b;
    switch (kind) {
        case 0: return hbar;
        case 1: return vbar;
        case 2: return hbar || vbar;
        default: return px >= lo - 1 && px <= hi + 1 && py >= lo - 1 && py <= hi + 1;
    }
}

struct Placement {
    std::size_t x, y;
};

bool overlaps(const Placement& a, const Placement& b, std::size_t size) {
    return a.x < b.x + size + 1 && b.x < a.x + size + 1 && a.y < b.y + size + 1 && b.y < a.y + size + 1;
}

void draw_glyph(Tensor& img, const Placement& at, std::size_t family, int detail_kind, std::size_t size,
                std::mt19937_64& rng) {
    const std::size_t side = img.dim(1);
    std::normal_distribution<double> noise(0.0, 0.02);
    for (std::size_t py = 0; py < size; ++py)
        for (std::size_t px = 0; px < size; ++px) {
            const int s = base_shape(family, static_cast<double>(px), static_cast<double>(py), static_cast<double>(size));
            if (s < 0) continue;
            double v = s == 1 ? kDark : kLight;
            if (s == 0 && detail_kind >= 0 && detail(static_cast<std::size_t>(detail_kind), px, py, size)) v = kDark;
            for (std::size_t ch = 0; ch < 3; ++ch) img[((at.y + py) * side + at.x + px) * 3 + ch] = v + noise(rng);
        }
}

}  // namespace

Tensor render_synthetic_image(const SyntheticDatasetConfig& cfg, std::uint64_t seed, const std::string& split,
                              std::size_t label, std::size_t index) {
    cfg.validate();
    if (label >= cfg.classes) throw std::invalid_argument("render: label out of range");
    const std::size_t per_family = cfg.classes / cfg.families;
    const std::size_t family = label / per_family;
    const std::size_t side = cfg.image_size;

    // Family texture statistics come from the texture seed only.
    std::mt19937_64 family_rng(derive_seed({cfg.texture_seed, family}));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double theta = std::numbers::pi * (static_cast<double>(family) + 0.3 * unit(family_rng)) /
                         static_cast<double>(cfg.families);
    const double period = 7.0 + 5.0 * unit(family_rng);

    std::mt19937_64 rng(derive_seed({seed, split == "train" ? 0ULL : 1ULL, label, index}));
    const double phase1 = 2.0 * std::numbers::pi * unit(rng);
    const double phase2 = 2.0 * std::numbers::pi * unit(rng);
    const double amp = 0.08 + 0.06 * unit(rng);
    double tint[3];
    for (double& t : tint) t = (unit(rng) - 0.5) * 0.12;
    std::normal_distribution<double> noise(0.0, 0.03);

    Tensor img(Shape{side, side, 3});
    const double kx = std::cos(theta) * 2.0 * std::numbers::pi / period;
    const double ky = std::sin(theta) * 2.0 * std::numbers::pi / period;
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            const double fx = static_cast<double>(x), fy = static_cast<double>(y);
            const double base = 0.5 + amp * std::sin(kx * fx + ky * fy + phase1) +
                                0.5 * amp * std::sin(2.0 * (ky * fx - kx * fy) + phase2);
            for (std::size_t ch = 0; ch < 3; ++ch) img[(y * side + x) * 3 + ch] = base + tint[ch] + noise(rng);
        }

    std::uniform_int_distribution<std::size_t> pos(0, side - cfg.patch_size);
    std::vector<Placement> placed;
    auto place = [&]() {
        for (int attempt = 0; attempt < 1000; ++attempt) {
            Placement p{pos(rng), pos(rng)};
            bool ok = true;
            for (const auto& q : placed) ok = ok && !overlaps(p, q, cfg.patch_size);
            if (ok) {
                placed.push_back(p);
                return p;
            }
        }
        throw std::runtime_error("render: could not place the glyph and decoys; use a larger image_size or fewer decoys");
    };
    draw_glyph(img, place(), family, static_cast<int>(label % per_family), cfg.patch_size, rng);
    for (std::size_t d = 0; d < cfg.decoys; ++d) draw_glyph(img, place(), family, -1, cfg.patch_size, rng);

    for (double& v : img.data()) v = quantise(v) / 255.0;
    return img;
}

Dataset gen_dataset(const SyntheticDatasetConfig& cfg, std::uint64_t seed, const fs::path& dir) {
    cfg.validate();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create dataset directory " + dir.string() + ": " + ec.message());
    Dataset ds;
    ds.root = dir;
    for (const std::string split : {"train", "test"}) {
        const std::size_t count = split == "train" ? cfg.train_per_class : cfg.test_per_class;
        for (std::size_t label = 0; label < cfg.classes; ++label)
            for (std::size_t i = 0; i < count; ++i) {
                std::ostringstream rel;
                rel << label << '/' << split << '_' << i << ".ppm";
                write_ppm(dir / rel.str(), render_synthetic_image(cfg, seed, split, label, i));
                ds.entries.push_back({rel.str(), label, split});
            }
    }
    write_index(ds);
    return ds;
}

ImageSet::ImageSet(const Dataset& ds, const std::string& split) {
    for (std::size_t id : ds.split(split)) add(read_ppm(ds.root / ds.entries[id].path), ds.entries[id].label, id);
}

void ImageSet::add(const Tensor& image, std::size_t label, std::size_t id) {
    if (image.rank() != 3 || image.dim(0) != image.dim(1) || image.dim(2) != 3) {
        throw ShapeError("image set: expected square RGB image, got " + to_string(image.shape()));
    }
    if (side_ == 0) side_ = image.dim(0);
    if (image.dim(0) != side_) throw ShapeError("image set: mixed image sizes");
    for (double v : image.data()) pixels_.push_back(quantise(v));
    labels_.push_back(label);
    ids_.push_back(id);
}

Tensor ImageSet::batch(std::span<const std::size_t> positions) const {
    const std::size_t per = side_ * side_ * 3;
    Tensor out(Shape{positions.size(), side_, side_, 3});
    for (std::size_t b = 0; b < positions.size(); ++b) {
        const std::uint8_t* src = pixels_.data() + positions[b] * per;
        for (std::size_t i = 0; i < per; ++i) out[b * per + i] = src[i] / 255.0;
    }
    return out;
}

Tensor ImageSet::image(std::size_t position) const {
    const std::size_t p[] = {position};
    return batch(p).reshaped(Shape{side_, side_, 3});
}

std::vector<std::size_t> ImageSet::labels_of(std::span<const std::size_t> positions) const {
    std::vector<std::size_t> out;
    out.reserve(positions.size());
    for (std::size_t p : positions) out.push_back(labels_.at(p));
    return out;
}

std::size_t ImageSet::position_of(std::size_t image_id) const {
    auto it = std::find(ids_.begin(), ids_.end(), image_id);
    return static_cast<std::size_t>(it - ids_.begin());
}

double pixel_centroid_accuracy(const ImageSet& train, const ImageSet& test, std::size_t classes) {
    const std::size_t per = train.image_size() * train.image_size() * 3;
    std::vector<double> centroid(classes * per, 0.0);
    std::vector<std::size_t> count(classes, 0);
    for (std::size_t i = 0; i < train.size(); ++i) {
        const Tensor img = train.image(i);
        const std::size_t k = train.labels()[i];
        ++count[k];
        for (std::size_t j = 0; j < per; ++j) centroid[k * per + j] += img[j];
    }
    for (std::size_t k = 0; k < classes; ++k)
        for (std::size_t j = 0; j < per; ++j) centroid[k * per + j] /= std::max<std::size_t>(count[k], 1);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const Tensor img = test.image(i);
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < classes; ++k) {
            double d = 0.0;
            for (std::size_t j = 0; j < per; ++j) d += (img[j] - centroid[k * per + j]) * (img[j] - centroid[k * per + j]);
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        correct += best == test.labels()[i];
    }
    return test.size() ? static_cast<double>(correct) / static_cast<double>(test.size()) : 0.0;
}

}  // namespace psep
