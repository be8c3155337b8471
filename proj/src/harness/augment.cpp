#include "psep/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "psep/rng.hpp"

namespace fs = std::filesystem;

namespace psep {

namespace {

constexpr double kMaxRotation = 15.0 * std::numbers::pi / 180.0;
constexpr double kMaxShear = 0.1;
constexpr double kMaxElastic = 1.5;
constexpr int kFieldTerms = 3;

double sample_clamped(const Tensor& img, double y, double x, std::size_t ch) {
    const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    const std::size_t y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
    const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
    auto at = [&](std::size_t yy, std::size_t xx) { return img[(yy * w + xx) * c + ch]; };
    return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

}  // namespace

AugmentParams sample_augment_params(std::uint64_t seed, std::size_t image_id, std::size_t variant) {
    std::mt19937_64 rng(derive_seed({seed, image_id, variant, 0x617567ULL}));
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    AugmentParams p;
    p.rotation = kMaxRotation * unit(rng);
    p.shear = kMaxShear * unit(rng);
    p.flip = unit(rng) < 0.0;
    p.elastic = kMaxElastic * 0.5 * (1.0 + unit(rng));
    return p;
}

Tensor augment_image(const Tensor& image, const AugmentParams& p, std::uint64_t field_seed) {
    if (image.rank() != 3) throw ShapeError("augment: expected H x W x C image, got " + to_string(image.shape()));
    const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);

    // Smooth displacement: a few low-frequency sinusoids per axis.
    std::mt19937_64 rng(field_seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    struct Term {
        double ky, kx, phase;
    };
    Term terms[2][kFieldTerms];
    for (auto& axis : terms)
        for (auto& t : axis) {
            const double ang = 2.0 * std::numbers::pi * unit(rng);
            const double freq = 2.0 * std::numbers::pi * (0.5 + 1.5 * unit(rng)) / static_cast<double>(std::max(h, w));
            t = {freq * std::sin(ang), freq * std::cos(ang), 2.0 * std::numbers::pi * unit(rng)};
        }
    const double scale = p.elastic / kFieldTerms;

    const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
    const double cs = std::cos(p.rotation), sn = std::sin(p.rotation);
    Tensor out(image.shape());
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            // inverse map from output to source coordinates
            double dy = static_cast<double>(y) - cy;
            double dx = static_cast<double>(x) - cx;
            if (p.flip) dx = -dx;
            const double ry = sn * dx + cs * dy;
            double rx = cs * dx - sn * dy;
            rx += p.shear * ry;
            double sy = ry + cy, sx = rx + cx;
            for (int k = 0; k < kFieldTerms; ++k) {
                sy += scale * std::sin(terms[0][k].ky * sy + terms[0][k].kx * sx + terms[0][k].phase);
                sx += scale * std::sin(terms[1][k].ky * sy + terms[1][k].kx * sx + terms[1][k].phase);
            }
            for (std::size_t ch = 0; ch < c; ++ch) out[(y * w + x) * c + ch] = sample_clamped(image, sy, sx, ch);
        }
    return out;
}

Dataset augment_dataset(const Dataset& src, std::size_t fold, std::uint64_t seed, const fs::path& dst) {
    if (fold == 0) throw std::invalid_argument("augment: fold must be at least 1");
    std::error_code ec;
    if (fs::exists(dst) && fs::equivalent(src.root, dst, ec)) {
        throw std::invalid_argument("augment: destination must differ from the source dataset");
    }
    fs::create_directories(dst, ec);
    if (ec) throw std::runtime_error("cannot create " + dst.string() + ": " + ec.message());

    Dataset out;
    out.root = dst;
    for (std::size_t id = 0; id < src.entries.size(); ++id) {
        const DatasetEntry& e = src.entries[id];
        const fs::path target = dst / e.path;
        fs::create_directories(target.parent_path());
        fs::copy_file(src.root / e.path, target, fs::copy_options::overwrite_existing);
        out.entries.push_back(e);
        if (e.split != "train" || fold == 1) continue;
        const Tensor image = read_ppm(src.root / e.path);
        const fs::path rel(e.path);
        for (std::size_t v = 1; v < fold; ++v) {
            const AugmentParams p = sample_augment_params(seed, id, v);
            const std::string name = rel.stem().string() + "_v" + std::to_string(v) + rel.extension().string();
            const std::string path = (rel.parent_path() / name).generic_string();
            write_ppm(dst / path, augment_image(image, p, derive_seed({seed, id, v, 0x6669656cULL})));
            out.entries.push_back({path, e.label, e.split});
        }
    }
    write_index(out);
    return out;
}

}  // namespace psep
