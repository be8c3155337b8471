#include "psep/backbone.hpp"

#include <stdexcept>

#include "psep/ops.hpp"

namespace psep {

std::size_t BackboneConfig::downsampling() const { return std::size_t{1} << stages.size(); }

std::size_t BackboneConfig::output_size() const { return input_size / downsampling(); }

std::size_t BackboneConfig::output_channels() const { return stages.empty() ? input_channels : stages.back().out_channels; }

void BackboneConfig::validate() const {
    if (stages.empty()) throw std::invalid_argument("backbone: at least one stage required");
    for (const auto& s : stages) {
        if (s.out_channels == 0 || s.convs == 0) throw std::invalid_argument("backbone: empty stage");
    }
    if (input_channels == 0) throw std::invalid_argument("backbone: zero input channels");
    if (input_size == 0 || input_size % downsampling() != 0) {
        throw std::invalid_argument("backbone: input size " + std::to_string(input_size) +
                                    " not divisible by downsampling factor " + std::to_string(downsampling()));
    }
}

std::string backbone_conv_name(std::size_t stage, std::size_t conv) {
    return "backbone.s" + std::to_string(stage) + ".c" + std::to_string(conv);
}

namespace {

template <typename Fn>
void for_each_conv(const BackboneConfig& cfg, Fn&& fn) {
    std::size_t in_c = cfg.input_channels;
    for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
        for (std::size_t c = 0; c < cfg.stages[s].convs; ++c) {
            fn(s, c, in_c, cfg.stages[s].out_channels);
            in_c = cfg.stages[s].out_channels;
        }
    }
}

}  // namespace

void init_backbone(const BackboneConfig& cfg, ParamSet& params, std::mt19937_64& rng) {
    cfg.validate();
    for_each_conv(cfg, [&](std::size_t s, std::size_t c, std::size_t in_c, std::size_t out_c) {
        const std::string name = backbone_conv_name(s, c);
        params[name + ".weight"] = he_uniform(Shape{3, 3, in_c, out_c}, 9 * in_c, rng);
        params[name + ".bias"] = Tensor(Shape{out_c});
    });
}

void zero_backbone(const BackboneConfig& cfg, ParamSet& params) {
    cfg.validate();
    for_each_conv(cfg, [&](std::size_t s, std::size_t c, std::size_t in_c, std::size_t out_c) {
        const std::string name = backbone_conv_name(s, c);
        params[name + ".weight"] = Tensor(Shape{3, 3, in_c, out_c});
        params[name + ".bias"] = Tensor(Shape{out_c});
    });
}

Var backbone_forward(const BackboneConfig& cfg, const Bindings& params, Var images) {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != cfg.input_size || s[2] != cfg.input_size || s[3] != cfg.input_channels) {
        throw ShapeError("backbone: image batch " + to_string(s) + " does not match configured input " +
                         std::to_string(cfg.input_size) + "x" + std::to_string(cfg.input_size) + "x" +
                         std::to_string(cfg.input_channels));
    }
    Var x = images;
    for_each_conv(cfg, [&](std::size_t st, std::size_t c, std::size_t, std::size_t) {
        const std::string name = backbone_conv_name(st, c);
        x = ops::conv2d(x, params.at(name + ".weight"), c == 0 ? 2 : 1, 1);
        x = ops::relu(ops::bias_add(x, params.at(name + ".bias")));
    });
    return x;
}

void check_images(const BackboneConfig& cfg, const Tensor& images) {
    const Shape& s = images.shape();
    const bool batched = s.size() == 4;
    const std::size_t off = batched ? 1 : 0;
    if ((s.size() != 3 && !batched) || s[off] != cfg.input_size || s[off + 1] != cfg.input_size ||
        s[off + 2] != cfg.input_channels) {
        throw std::invalid_argument("image shape " + to_string(s) + " does not match backbone input");
    }
    for (double v : images.data()) {
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("image pixel outside [0,1]: " + std::to_string(v));
    }
}

FeatureMap extract(const BackboneConfig& cfg, const ParamSet& params, const Tensor& image, std::size_t image_id) {
    check_images(cfg, image);
    Graph g;
    Bindings b(g, params, nullptr);
    Var x = g.constant(image.reshaped(Shape{1, cfg.input_size, cfg.input_size, cfg.input_channels}));
    Var f = backbone_forward(cfg, b, x);
    const Shape& fs = f.shape();
    return FeatureMap{f.value().reshaped(Shape{fs[1], fs[2], fs[3]}), image_id};
}

}  // namespace psep
