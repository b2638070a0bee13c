#pragma once

#include <string>
#include <vector>

#include "dn/tensor.hpp"

namespace dn {
namespace nn {

// Per-forward context: dropout rng and train/eval mode.
struct Ctx {
    Rng* rng = nullptr;
    bool training = false;
    real dropout = 0.0;

    static Ctx eval() { return Ctx{}; }
};

void init_xavier(Tensor& w, std::int64_t fan_in, std::int64_t fan_out, Rng& rng);
void init_normal(Tensor& w, real stddev, Rng& rng);

struct Linear {
    Tensor w, b;  // w: [in×out]
    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng);
    Tensor forward(const Tensor& x) const;
};

struct LayerNorm {
    Tensor gamma, beta;
    LayerNorm() = default;
    LayerNorm(ParamStore& ps, const std::string& name, std::int64_t dim);
    Tensor forward(const Tensor& x) const;
};

struct Conv1dLayer {
    Tensor w, b;  // w: [Cout × Cin·k]
    int kernel = 1, stride = 1, dilation = 1, pad = 0;
    Conv1dLayer() = default;
    Conv1dLayer(ParamStore& ps, const std::string& name, std::int64_t cin, std::int64_t cout,
                int kernel, int stride, int dilation, int pad, Rng& rng);
    Tensor forward(const Tensor& x) const;
};

struct EmbeddingTable {
    Tensor table;  // [V×d]
    EmbeddingTable() = default;
    EmbeddingTable(ParamStore& ps, const std::string& name, std::int64_t vocab, std::int64_t dim,
                   Rng& rng);
    Tensor forward(const std::vector<int>& ids) const;
};

struct MultiHeadAttention {
    Linear wq, wk, wv, wo;
    int heads = 1;
    std::int64_t dim = 0;
    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore& ps, const std::string& name, std::int64_t dim, int heads,
                       Rng& rng);
    // q_in: [M×d], kv_in: [N×d]; mask (optional additive [M×N]) is applied to
    // every head's scores before softmax.
    Tensor forward(const Tensor& q_in, const Tensor& kv_in, const Tensor& mask, Ctx& ctx) const;
};

struct FeedForward {
    Linear l1, l2;
    FeedForward() = default;
    FeedForward(ParamStore& ps, const std::string& name, std::int64_t dim, std::int64_t hidden,
                Rng& rng);
    Tensor forward(const Tensor& x, Ctx& ctx) const;
};

// Pre-LN transformer layer; cross-attention included when built with with_cross.
struct TransformerLayer {
    LayerNorm ln1, ln2, ln3;
    MultiHeadAttention self_attn, cross_attn;
    FeedForward ffn;
    bool has_cross = false;
    TransformerLayer() = default;
    TransformerLayer(ParamStore& ps, const std::string& name, std::int64_t dim, int heads,
                     std::int64_t ffn_hidden, bool with_cross, Rng& rng);
    Tensor forward(const Tensor& x, const Tensor& self_mask, const Tensor& memory,
                   const Tensor& memory_mask, Ctx& ctx) const;
};

// Stack of pre-LN layers with a final LayerNorm.
struct TransformerStack {
    std::vector<TransformerLayer> layers;
    LayerNorm final_ln;
    TransformerStack() = default;
    TransformerStack(ParamStore& ps, const std::string& name, int n_layers, std::int64_t dim,
                     int heads, std::int64_t ffn_hidden, bool with_cross, Rng& rng);
    Tensor forward(const Tensor& x, const Tensor& self_mask, const Tensor& memory,
                   const Tensor& memory_mask, Ctx& ctx) const;
};

// Additive causal mask: 0 on/below the diagonal, -1e30 above.
Tensor causal_mask(std::int64_t m);

}  // namespace nn
}  // namespace dn
