#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "xtransct/drr.hpp"
#include "xtransct/tensor.hpp"
#include "xtransct/volume.hpp"

namespace xtransct {

// Architecture hyperparameters. Defaults follow the full-scale setup
// (256-dim, 8 heads, 6+6 layers, 128^3 output from 32^3 queries of 4^3
// blocks); tests run the desk-scale variant from the CLI defaults.
struct ModelConfig {
    std::size_t d_model = 256;
    std::size_t heads = 8;
    std::size_t enc_layers = 6;
    std::size_t dec_layers = 6;
    // One stride-2 stage per entry; proj_size / 2^stages is the per-image
    // token grid side g (tokens after fusion: g x 2g).
    std::vector<std::size_t> backbone_channels = {64, 128, 256, 512};
    std::size_t proj_size = 128;  // square input projections
    std::size_t query_grid = 32;  // Q per axis
    std::size_t block = 4;        // B per axis
    std::size_t out_dims = 128;   // N per axis, N = Q*B
    std::size_t ffn_dim = 0;      // 0 -> 4*d_model
    std::size_t chunk = 512;      // decoder queries per chunk at inference

    std::size_t grid_side() const;  // g
    std::size_t token_count() const { return 2 * grid_side() * grid_side(); }
    std::size_t head_dim() const { return d_model / heads; }
    std::size_t ffn_width() const { return ffn_dim ? ffn_dim : 4 * d_model; }
    std::size_t block_voxels() const { return block * block * block; }
    std::size_t query_count() const { return query_grid * query_grid * query_grid; }

    void validate() const;
};

// Uniform Q^3 lattice of block centers in [0,1]^3, z-major raster order.
struct QueryGrid {
    std::size_t q;

    explicit QueryGrid(std::size_t q_per_axis) : q(q_per_axis) {}
    std::size_t count() const { return q * q * q; }
    // Point for raster index i, as (x,y,z) with coordinate (k+0.5)/q.
    std::array<double, 3> point(std::size_t i) const;
    // [count,3] coordinate tensor for rows [first, first+n).
    Tensor coords(std::size_t first, std::size_t n) const;
    Tensor coords_all() const { return coords(0, count()); }
};

struct InferStats {
    double infer_ms = 0.0;
    std::size_t query_count = 0;
    std::size_t chunk_size = 0;
};

// The reconstruction network: shared-weight conv backbone over the two
// projections, transformer encoder over the fused tokens, coordinate-query
// cross-attention decoder, and an MLP head emitting one B^3 block per query.
class Model {
public:
    Model(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }

    // Ordered (name, tensor) parameter registry. Group prefixes: backbone.,
    // fusion., encoder., decoder., coord., head.
    const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
    Tensor param(const std::string& name) const;
    void zero_grad();
    void set_backbone_requires_grad(bool flag);

    // Conv stack + projection for ONE image, before positional encoding.
    Tensor backbone_tokens(const Tensor& image) const;
    // Both images -> fused token sequence [2g^2, d] with positional encoding.
    Tensor backbone_extract(const Tensor& img1, const Tensor& img2) const;
    Tensor encode(const Tensor& tokens) const;
    // [q,3] coordinates in [0,1]^3 -> [q,d] learned affine embeddings.
    Tensor encode_coords(const Tensor& points) const;
    // Cross-attention-only decoder; per-query outputs are independent of
    // batching, so chunked decoding is exact.
    Tensor decode(const Tensor& memory, const Tensor& queries) const;
    // [q,d] -> [q,B^3] block values squashed to [0,1], z-major within block.
    Tensor mlp_head(const Tensor& features) const;

    // Full differentiable pipeline to the block tensor [Q^3, B^3].
    Tensor forward_blocks(const Tensor& img1, const Tensor& img2) const;

    // No-grad chunked inference to a Volume of dims N^3.
    Volume infer(const Projection& p1, const Projection& p2,
                 InferStats* stats = nullptr) const;

    static Tensor projection_tensor(const Projection& p);
    static Tensor volume_tensor(const Volume& v);

private:
    ModelConfig cfg_;
    std::vector<std::pair<std::string, Tensor>> params_;

    Tensor add_param(const std::string& name, Shape shape);
};

// Checkpoint container: one JSON header line (config, manifest, step, stage)
// followed by the concatenated little-endian float32 payloads; total length
// is validated on load.
void save_checkpoint(const Model& model, const std::string& path,
                     std::size_t step, int stage);

struct LoadedCheckpoint {
    Model model;
    std::size_t step = 0;
    int stage = 1;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

ModelConfig model_config_from_json_string(const std::string& text);
std::string model_config_to_json_string(const ModelConfig& cfg);

}  // namespace xtransct
