#include "psep/attention.hpp"

#include <stdexcept>

#include "psep/ops.hpp"

namespace psep {

void init_attention(std::size_t feature_channels, std::size_t classes, ParamSet& params, std::mt19937_64& rng) {
    params[kAgnosticFilter] = glorot_uniform(Shape{1, 1, feature_channels, 1}, feature_channels, 1, rng);
    params[kClassFilters] = glorot_uniform(Shape{1, 1, feature_channels, classes}, feature_channels, classes, rng);
}

AttentionVars attention_forward(Var features, Var agnostic_kernel, Var class_kernel) {
    AttentionVars out;
    out.agnostic_map = ops::conv2d(features, agnostic_kernel);
    Var raw = ops::conv2d(features, class_kernel);
    out.class_maps = ops::mul(raw, out.agnostic_map);
    out.logits = ops::spatial_avg_pool(out.class_maps);
    out.rectified = ops::relu(ops::channel_max(out.class_maps));
    out.attention = ops::max_normalize(out.rectified, kAttentionNormEps);
    return out;
}

AttentionVars attention_forward(Var features, const Bindings& params) {
    return attention_forward(features, params.at(kAgnosticFilter), params.at(kClassFilters));
}

AttentionOutput attention_forward(const Tensor& features, const AttentionParams& params) {
    if (features.rank() != 3) throw std::invalid_argument("attention: features must be [H,W,D'], got " + to_string(features.shape()));
    const std::size_t h = features.dim(0), w = features.dim(1), d = features.dim(2);
    if (params.agnostic_filter.size() != d || params.class_filters.rank() != 2 || params.class_filters.dim(1) != d) {
        throw std::invalid_argument("attention: filter dimension does not match feature channels " + std::to_string(d));
    }
    const std::size_t k = params.class_filters.dim(0);
    Tensor class_kernel(Shape{1, 1, d, k});
    for (std::size_t c = 0; c < k; ++c)
        for (std::size_t j = 0; j < d; ++j) class_kernel[j * k + c] = params.class_filters[c * d + j];

    Graph g;
    Var x = g.constant(features.reshaped(Shape{1, h, w, d}));
    AttentionVars v = attention_forward(x, g.constant(params.agnostic_filter.reshaped(Shape{1, 1, d, 1})),
                                        g.constant(std::move(class_kernel)));
    AttentionOutput out;
    out.agnostic_map = v.agnostic_map.value().reshaped(Shape{h, w});
    out.class_maps = Tensor(Shape{k, h, w});
    const Tensor& cm = v.class_maps.value();
    for (std::size_t t = 0; t < h * w; ++t)
        for (std::size_t c = 0; c < k; ++c) out.class_maps[c * h * w + t] = cm[t * k + c];
    out.logits = v.logits.value().reshaped(Shape{k});
    out.attention = v.attention.value().reshaped(Shape{h, w});
    return out;
}

double rank1_pool_oracle(const Tensor& features, std::span<const double> agnostic, std::span<const double> class_filter) {
    if (features.rank() != 3) throw std::invalid_argument("rank1_pool_oracle: features must be [H,W,D']");
    const std::size_t n = features.dim(0) * features.dim(1), d = features.dim(2);
    if (agnostic.size() != d || class_filter.size() != d) throw std::invalid_argument("rank1_pool_oracle: filter size");
    std::vector<double> second_moment(d * d, 0.0);
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t r = 0; r < d; ++r)
            for (std::size_t c = 0; c < d; ++c) second_moment[r * d + c] += features[t * d + r] * features[t * d + c];
    double acc = 0.0;
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < d; ++c) acc += agnostic[r] * second_moment[r * d + c] * class_filter[c];
    return acc / static_cast<double>(n);
}

}  // namespace psep
