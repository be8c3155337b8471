#pragma once

#include <random>

#include "psep/params.hpp"

namespace psep {

/// Epsilon added to the per-image maximum when normalising the attention map.
inline constexpr double kAttentionNormEps = 1e-8;

inline constexpr const char* kAgnosticFilter = "attention.agnostic";
inline constexpr const char* kClassFilters = "attention.class";

/// Plain-tensor view of the attention filters: agnostic [D'], class filters [K, D'].
struct AttentionParams {
    Tensor agnostic_filter;
    Tensor class_filters;
};

/// Graph outputs of the attention branch for a batch.
struct AttentionVars {
    Var agnostic_map;  // [B,H,W,1]
    Var class_maps;    // [B,H,W,K], already multiplied by the agnostic map
    Var logits;        // [B,K], spatial mean of class_maps
    Var rectified;     // [B,H,W,1], max(0, max_k class_maps)
    Var attention;     // [B,H,W,1], rectified / (max_t rectified + eps)
};

/// Single-image result, spatial maps flattened to [H*W] per channel.
struct AttentionOutput {
    Tensor agnostic_map;  // [H,W]
    Tensor class_maps;    // [K,H,W]
    Tensor logits;        // [K]
    Tensor attention;     // [H,W], rectified and max-normalised
};

void init_attention(std::size_t feature_channels, std::size_t classes, ParamSet& params, std::mt19937_64& rng);

AttentionVars attention_forward(Var features, Var agnostic_kernel, Var class_kernel);
AttentionVars attention_forward(Var features, const Bindings& params);

/// features [H,W,D'].
AttentionOutput attention_forward(const Tensor& features, const AttentionParams& params);

/// (1/N) a^T (sum_t x_t x_t^T) b via the explicit D'xD' second-moment matrix.
double rank1_pool_oracle(const Tensor& features, std::span<const double> agnostic, std::span<const double> class_filter);

}  // namespace psep
