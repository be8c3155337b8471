#include "psep/losses.hpp"

#include <stdexcept>

#include "psep/ops.hpp"

namespace psep {

void LossConfig::validate() const {
    if (lambda1 < 0.0 || lambda2 < 0.0) throw std::invalid_argument("loss config: negative lambda");
    if (batch == 0) throw std::invalid_argument("loss config: batch size must be >= 1");
}

Var attentional_cluster_loss(Var distances, Var attention, std::span<const std::size_t> class_of,
                             std::span<const std::size_t> labels) {
    Var nearest = ops::class_min_distance(distances, class_of, labels, true);
    return ops::sum(ops::mul(nearest, attention));
}

Var attentional_separation_loss(Var distances, Var attention, std::span<const std::size_t> class_of,
                                std::span<const std::size_t> labels) {
    Var nearest = ops::class_min_distance(distances, class_of, labels, false);
    return ops::scale(ops::sum(ops::mul(nearest, attention)), -1.0);
}

BatchRegularization batch_regularization_loss(Var distances, Var attention, std::span<const std::size_t> class_of,
                                              std::span<const std::size_t> labels, const LossConfig& cfg) {
    const Shape& ds = distances.shape();
    const Shape& as = attention.shape();
    if (ds.size() != 4 || ds[0] == 0) throw std::invalid_argument("batch_regularization_loss: empty batch");
    if (as.size() != 4 || as[0] != ds[0] || as[1] != ds[1] || as[2] != ds[2] || as[3] != 1) {
        throw std::invalid_argument("batch_regularization_loss: attention " + to_string(as) +
                                    " does not match distances " + to_string(ds));
    }
    const std::size_t batch = ds[0], n = ds[1] * ds[2];
    Var own = ops::class_min_distance(distances, class_of, labels, true);
    Var other = ops::class_min_distance(distances, class_of, labels, false);
    Var weights = ops::batch_sum(cfg.reg_attention_grad ? attention : ops::detach(attention));
    Var per_location = ops::mul(ops::add(ops::scale(own, cfg.lambda1), ops::scale(other, -cfg.lambda2)), weights);

    BatchRegularization out;
    out.per_sample.assign(batch, 0.0);
    const Tensor& v = per_location.value();
    for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t t = 0; t < n; ++t) out.per_sample[i] += v[i * n + t];
    out.loss = ops::scale(ops::sum(per_location), 1.0 / static_cast<double>(batch));
    return out;
}

namespace {

struct SampleGraph {
    Graph g;
    Var distances;
    Var attention;
};

void fill_sample_graph(SampleGraph& s, std::span<const Tensor> zs, std::span<const Tensor> attentions,
                       const PrototypeBank& bank) {
    if (zs.empty() || zs.size() != attentions.size()) throw std::invalid_argument("regularization: empty or ragged batch");
    const Shape& zs0 = zs[0].shape();
    if (zs0.size() != 3) throw std::invalid_argument("regularization: z must be [H,W,D]");
    const std::size_t h = zs0[0], w = zs0[1], d = zs0[2];
    Tensor z(Shape{zs.size(), h, w, d});
    Tensor a(Shape{zs.size(), h, w, 1});
    for (std::size_t i = 0; i < zs.size(); ++i) {
        if (zs[i].shape() != zs0 || attentions[i].shape() != Shape{h, w}) {
            throw std::invalid_argument("regularization: mismatched spatial shapes across batch");
        }
        std::copy(zs[i].data().begin(), zs[i].data().end(), z.data().begin() + static_cast<long>(i * h * w * d));
        std::copy(attentions[i].data().begin(), attentions[i].data().end(), a.data().begin() + static_cast<long>(i * h * w));
    }
    s.distances = ops::sq_l2_distance_maps(s.g.constant(std::move(z)), s.g.constant(bank.vectors));
    s.attention = s.g.constant(std::move(a));
}

}  // namespace

double attentional_cluster_loss(const Tensor& z, const Tensor& attention, const PrototypeBank& bank, std::size_t label) {
    SampleGraph s;
    fill_sample_graph(s, std::span(&z, 1), std::span(&attention, 1), bank);
    const std::size_t labels[] = {label};
    return attentional_cluster_loss(s.distances, s.attention, bank.class_of, labels).value().item();
}

double attentional_separation_loss(const Tensor& z, const Tensor& attention, const PrototypeBank& bank,
                                   std::size_t label) {
    SampleGraph s;
    fill_sample_graph(s, std::span(&z, 1), std::span(&attention, 1), bank);
    const std::size_t labels[] = {label};
    return attentional_separation_loss(s.distances, s.attention, bank.class_of, labels).value().item();
}

std::vector<double> batch_regularization_loss(std::span<const Tensor> zs, std::span<const Tensor> attentions,
                                              std::span<const std::size_t> labels, const PrototypeBank& bank,
                                              const LossConfig& cfg) {
    SampleGraph s;
    fill_sample_graph(s, zs, attentions, bank);
    return batch_regularization_loss(s.distances, s.attention, bank.class_of, labels, cfg).per_sample;
}

}  // namespace psep
