#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "psep/autograd.hpp"

namespace psep::ops {

// Image-like tensors are NHWC: [batch, height, width, channels].
// Convolution kernels are [kernel_h, kernel_w, in_channels, out_channels].

Var conv2d(Var x, Var kernel, std::size_t stride = 1, std::size_t pad = 0);
/// Adds a per-channel bias along the last axis.
Var bias_add(Var x, Var bias);

Var relu(Var x);
Var sigmoid(Var x);

/// Elementwise with same-rank broadcasting (each extent equal or 1) or a one-element operand.
Var add(Var x, Var y);
Var mul(Var x, Var y);
Var scale(Var x, double c);
/// Stops gradient flow; the result is a constant holding x's value.
Var detach(Var x);

/// Sum of all entries, shape [1].
Var sum(Var x);
/// [B, ...] -> [1, ...]
Var batch_sum(Var x);

/// [B,H,W,C] -> [B,C]
Var spatial_avg_pool(Var x);
/// [B,H,W,C] -> [B,C]; ties route to the first maximum in row-major order.
Var spatial_max_pool(Var x);
/// [B,H,W,C] -> [B,H,W,1]; ties route to the lowest channel.
Var channel_max(Var x);

/// Divides each sample of [B, ...] by (its maximum + eps).
Var max_normalize(Var x, double eps);

/// x [B,M], weight [K,M] -> [B,K]
Var linear(Var x, Var weight);

/// Mean over the batch of -log softmax(logits)[label]. logits [B,K].
Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels);

/// z [B,H,W,D], prototypes [m,D] -> [B,H,W,m] squared Euclidean distances.
Var sq_l2_distance_maps(Var z, Var prototypes);

/// log((u + 1) / (u + gamma)) elementwise. gamma must be positive.
Var log_ratio(Var u, double gamma);

/// distances [B,H,W,m] -> [B,H,W,1]: per location, the smallest distance among prototypes
/// whose class equals (own) or differs from (!own) the sample label. Ties go to the lowest index.
Var class_min_distance(Var distances, std::span<const std::size_t> class_of,
                       std::span<const std::size_t> labels, bool own);

}  // namespace psep::ops
