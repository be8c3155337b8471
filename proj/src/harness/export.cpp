#include "psep/export.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "psep/dataset.hpp"

namespace fs = std::filesystem;

namespace psep {

namespace {

void colour(double t, double rgb[3]) {
    t = std::clamp(t, 0.0, 1.0);
    rgb[0] = std::clamp(1.5 - std::abs(4.0 * t - 3.0), 0.0, 1.0);
    rgb[1] = std::clamp(1.5 - std::abs(4.0 * t - 2.0), 0.0, 1.0);
    rgb[2] = std::clamp(1.5 - std::abs(4.0 * t - 1.0), 0.0, 1.0);
}

Tensor slice_map(const Tensor& maps, std::size_t channel) {
    const std::size_t h = maps.dim(1), w = maps.dim(2), c = maps.dim(3);
    Tensor out(Shape{h, w});
    for (std::size_t i = 0; i < h * w; ++i) out[i] = maps[i * c + channel];
    return out;
}

double mean_pairwise(const std::vector<const PrototypeRow*>& rows) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = i + 1; j < rows.size(); ++j) {
            double d = 0.0;
            for (std::size_t k = 0; k < rows[i]->vector.size(); ++k) {
                const double diff = rows[i]->vector[k] - rows[j]->vector[k];
                d += diff * diff;
            }
            sum += std::sqrt(d);
            ++count;
        }
    return count ? sum / static_cast<double>(count) : 0.0;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& map, std::size_t height, std::size_t width) {
    if (map.rank() != 2) throw ShapeError("upsample: expected [h,w] map, got " + to_string(map.shape()));
    const std::size_t h = map.dim(0), w = map.dim(1);
    const double sy = static_cast<double>(h) / static_cast<double>(height);
    const double sx = static_cast<double>(w) / static_cast<double>(width);
    Tensor out(Shape{height, width});
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
            const std::size_t y0 = static_cast<std::size_t>(fy), x0 = static_cast<std::size_t>(fx);
            const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            const double ay = fy - static_cast<double>(y0), ax = fx - static_cast<double>(x0);
            out[y * width + x] = (1 - ay) * ((1 - ax) * map[y0 * w + x0] + ax * map[y0 * w + x1]) +
                                 ay * ((1 - ax) * map[y1 * w + x0] + ax * map[y1 * w + x1]);
        }
    return out;
}

Tensor overlay(const Tensor& image, const Tensor& map, double weight) {
    if (image.rank() != 3 || map.rank() != 2 || image.dim(0) != map.dim(0) || image.dim(1) != map.dim(1)) {
        throw ShapeError("overlay: image " + to_string(image.shape()) + " and map " + to_string(map.shape()));
    }
    const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
    const double range = *hi - *lo;
    Tensor out(image.shape());
    const std::size_t c = image.dim(2);
    for (std::size_t i = 0; i < map.size(); ++i) {
        double rgb[3];
        colour(range > 0 ? (map[i] - *lo) / range : 0.0, rgb);
        for (std::size_t ch = 0; ch < c; ++ch)
            out[i * c + ch] = (1 - weight) * image[i * c + ch] + weight * rgb[std::min<std::size_t>(ch, 2)];
    }
    return out;
}

HeatmapExport export_heatmaps(const Model& model, const Tensor& image, std::size_t top_n, const fs::path& dir,
                              const std::string& prefix) {
    if (!model.config().prototype_head) throw std::invalid_argument("export_heatmaps: model has no prototype head");
    if (image.rank() != 3) throw ShapeError("export_heatmaps: expected [H,W,3] image, got " + to_string(image.shape()));
    const std::size_t H = image.dim(0), W = image.dim(1);
    Graph g;
    Bindings b(g, model.params(), nullptr);
    Forward f = forward(model, b, g.constant(image.reshaped(Shape{1, H, W, image.dim(2)})));

    HeatmapExport out;
    const Tensor& scores = f.scores.value();
    out.scores.assign(scores.data().begin(), scores.data().end());
    const std::size_t m = out.scores.size();
    top_n = std::min(top_n, m);
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) { return out.scores[a] > out.scores[c]; });

    out.attention = upsample_bilinear(slice_map(f.weights.value(), 0), H, W);
    const bool write = !dir.empty();
    if (write) {
        fs::create_directories(dir);
        write_ppm(dir / (prefix + "_attention.ppm"), overlay(image, out.attention));
    }
    for (std::size_t r = 0; r < top_n; ++r) {
        HeatmapEntry e;
        e.rank = r + 1;
        e.prototype = order[r];
        e.cls = model.class_of()[e.prototype];
        e.score = out.scores[e.prototype];
        const Tensor small = slice_map(f.maps.value(), e.prototype);
        const std::size_t peak = static_cast<std::size_t>(std::max_element(small.data().begin(), small.data().end()) -
                                                          small.data().begin());
        e.peak_y = peak / small.dim(1);
        e.peak_x = peak % small.dim(1);
        e.map = upsample_bilinear(small, H, W);
        e.file = prefix + "_top" + std::to_string(e.rank) + "_p" + std::to_string(e.prototype) + ".ppm";
        if (write) write_ppm(dir / e.file, overlay(image, e.map));
        out.entries.push_back(std::move(e));
    }
    if (write) {
        std::ofstream csv(dir / (prefix + "_scores.csv"));
        csv << "rank,prototype,class,score,peak_y,peak_x,file\n";
        char buf[64];
        for (const auto& e : out.entries) {
            std::snprintf(buf, sizeof buf, "%.9g", e.score);
            csv << e.rank << ',' << e.prototype << ',' << e.cls << ',' << buf << ',' << e.peak_y << ',' << e.peak_x
                << ',' << e.file << '\n';
        }
        if (!csv) throw std::runtime_error("failed writing " + (dir / (prefix + "_scores.csv")).string());
    }
    return out;
}

std::string prototype_vectors_csv(const Model& model) {
    if (!model.config().prototype_head) throw std::invalid_argument("model has no prototype head");
    const Tensor& p = model.params().at(kPrototypes);
    const std::size_t m = p.dim(0), d = p.dim(1);
    std::ostringstream out;
    out << "id,class";
    for (std::size_t k = 0; k < d; ++k) out << ",v" << k;
    out << ",attention,image_id,y,x\n";
    char buf[32];
    for (std::size_t l = 0; l < m; ++l) {
        out << l << ',' << model.class_of()[l];
        for (std::size_t k = 0; k < d; ++k) {
            std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(static_cast<float>(p[l * d + k])));
            out << buf;
        }
        const auto& s = model.sources()[l];
        if (s) {
            std::snprintf(buf, sizeof buf, ",%.9g", s->attention);
            out << buf << ',' << s->image_id << ',' << s->y << ',' << s->x << '\n';
        } else {
            out << ",,,,\n";
        }
    }
    return out.str();
}

std::vector<PrototypeRow> parse_prototype_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw std::invalid_argument("prototype csv: missing header");
    const std::size_t columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
    if (columns < 7) throw std::invalid_argument("prototype csv: malformed header");
    const std::size_t d = columns - 6;
    std::vector<PrototypeRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
        if (line.back() == ',') cells.emplace_back();
        if (cells.size() != columns) throw std::invalid_argument("prototype csv: bad row '" + line + "'");
        PrototypeRow r;
        r.id = std::stoul(cells[0]);
        r.cls = std::stoul(cells[1]);
        for (std::size_t k = 0; k < d; ++k) r.vector.push_back(std::stod(cells[2 + k]));
        r.projected = !cells[2 + d].empty();
        r.attention = r.projected ? std::stod(cells[2 + d]) : 0.0;
        rows.push_back(std::move(r));
    }
    return rows;
}

SeparationSummary separation_summary(const std::vector<PrototypeRow>& rows, std::size_t background_count) {
    if (background_count < 2 || background_count + 2 > rows.size()) {
        throw std::invalid_argument("separation summary: need at least two prototypes in each set");
    }
    SeparationSummary s;
    s.background_count = background_count;
    double intra = 0.0, inter = 0.0;
    std::size_t n_intra = 0, n_inter = 0;
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = i + 1; j < rows.size(); ++j) {
            double d = 0.0;
            for (std::size_t k = 0; k < rows[i].vector.size(); ++k) {
                const double diff = rows[i].vector[k] - rows[j].vector[k];
                d += diff * diff;
            }
            d = std::sqrt(d);
            if (rows[i].cls == rows[j].cls) {
                intra += d;
                ++n_intra;
            } else {
                inter += d;
                ++n_inter;
            }
        }
    s.intra = n_intra ? intra / static_cast<double>(n_intra) : 0.0;
    s.inter = n_inter ? inter / static_cast<double>(n_inter) : 0.0;

    std::vector<const PrototypeRow*> order;
    for (const auto& r : rows) order.push_back(&r);
    std::stable_sort(order.begin(), order.end(),
                     [](const PrototypeRow* a, const PrototypeRow* b) { return a->attention < b->attention; });
    s.background = mean_pairwise({order.begin(), order.begin() + static_cast<long>(background_count)});
    s.discriminative = mean_pairwise({order.begin() + static_cast<long>(background_count), order.end()});
    return s;
}

}  // namespace psep
