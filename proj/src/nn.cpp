#include "dn/nn.hpp"

#include <cmath>

namespace dn {
namespace nn {

void init_xavier(Tensor& w, std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
    const real bound = std::sqrt(6.0 / static_cast<real>(fan_in + fan_out));
    for (auto& v : w.vec()) v = rng.uniform(-bound, bound);
}

void init_normal(Tensor& w, real stddev, Rng& rng) {
    for (auto& v : w.vec()) v = rng.normal() * stddev;
}

Linear::Linear(ParamStore& ps, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng) {
    w = ps.add(name + ".weight", {in, out});
    b = ps.add(name + ".bias", {out});
    init_xavier(w, in, out, rng);
}

Tensor Linear::forward(const Tensor& x) const { return add_rowvec(matmul(x, w), b); }

LayerNorm::LayerNorm(ParamStore& ps, const std::string& name, std::int64_t dim) {
    gamma = ps.add(name + ".gamma", {dim});
    beta = ps.add(name + ".beta", {dim});
    std::fill(gamma.vec().begin(), gamma.vec().end(), 1.0);
}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }

Conv1dLayer::Conv1dLayer(ParamStore& ps, const std::string& name, std::int64_t cin,
                         std::int64_t cout, int kernel_, int stride_, int dilation_, int pad_,
                         Rng& rng)
    : kernel(kernel_), stride(stride_), dilation(dilation_), pad(pad_) {
    w = ps.add(name + ".weight", {cout, cin * kernel});
    b = ps.add(name + ".bias", {cout});
    init_xavier(w, cin * kernel, cout, rng);
}

Tensor Conv1dLayer::forward(const Tensor& x) const {
    return conv1d(x, w, b, kernel, stride, dilation, pad);
}

EmbeddingTable::EmbeddingTable(ParamStore& ps, const std::string& name, std::int64_t vocab,
                               std::int64_t dim, Rng& rng) {
    table = ps.add(name + ".weight", {vocab, dim});
    init_normal(table, 1.0 / std::sqrt(static_cast<real>(dim)), rng);
}

Tensor EmbeddingTable::forward(const std::vector<int>& ids) const { return embedding(table, ids); }

MultiHeadAttention::MultiHeadAttention(ParamStore& ps, const std::string& name, std::int64_t dim_,
                                       int heads_, Rng& rng)
    : heads(heads_), dim(dim_) {
    check(dim % heads == 0, "attention: dim must be divisible by heads");
    wq = Linear(ps, name + ".wq", dim, dim, rng);
    wk = Linear(ps, name + ".wk", dim, dim, rng);
    wv = Linear(ps, name + ".wv", dim, dim, rng);
    wo = Linear(ps, name + ".wo", dim, dim, rng);
}

Tensor MultiHeadAttention::forward(const Tensor& q_in, const Tensor& kv_in, const Tensor& mask,
                                   Ctx& ctx) const {
    const std::int64_t dh = dim / heads;
    Tensor q = wq.forward(q_in);
    Tensor k = wk.forward(kv_in);
    Tensor v = wv.forward(kv_in);
    const real inv_sqrt = 1.0 / std::sqrt(static_cast<real>(dh));
    std::vector<Tensor> ctxs;
    ctxs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
        if (mask.defined()) scores = add(scores, mask);
        Tensor probs = softmax(scores);
        if (ctx.training && ctx.dropout > 0)
            probs = dropout(probs, ctx.dropout, *ctx.rng, ctx.training);
        ctxs.push_back(matmul(probs, vh));
    }
    return wo.forward(concat_cols(ctxs));
}

FeedForward::FeedForward(ParamStore& ps, const std::string& name, std::int64_t dim,
                         std::int64_t hidden, Rng& rng) {
    l1 = Linear(ps, name + ".l1", dim, hidden, rng);
    l2 = Linear(ps, name + ".l2", hidden, dim, rng);
}

Tensor FeedForward::forward(const Tensor& x, Ctx& ctx) const {
    Tensor h = gelu(l1.forward(x));
    if (ctx.training && ctx.dropout > 0) h = dropout(h, ctx.dropout, *ctx.rng, ctx.training);
    return l2.forward(h);
}

TransformerLayer::TransformerLayer(ParamStore& ps, const std::string& name, std::int64_t dim,
                                   int heads, std::int64_t ffn_hidden, bool with_cross, Rng& rng)
    : has_cross(with_cross) {
    ln1 = LayerNorm(ps, name + ".ln1", dim);
    self_attn = MultiHeadAttention(ps, name + ".self", dim, heads, rng);
    if (with_cross) {
        ln3 = LayerNorm(ps, name + ".ln3", dim);
        cross_attn = MultiHeadAttention(ps, name + ".cross", dim, heads, rng);
    }
    ln2 = LayerNorm(ps, name + ".ln2", dim);
    ffn = FeedForward(ps, name + ".ffn", dim, ffn_hidden, rng);
}

Tensor TransformerLayer::forward(const Tensor& x, const Tensor& self_mask, const Tensor& memory,
                                 const Tensor& memory_mask, Ctx& ctx) const {
    Tensor h = x;
    {
        Tensor n1 = ln1.forward(h);
        Tensor a = self_attn.forward(n1, n1, self_mask, ctx);
        if (ctx.training && ctx.dropout > 0) a = dropout(a, ctx.dropout, *ctx.rng, ctx.training);
        h = add(h, a);
    }
    if (has_cross) {
        check(memory.defined(), "transformer layer: cross attention needs memory");
        Tensor a = cross_attn.forward(ln3.forward(h), memory, memory_mask, ctx);
        if (ctx.training && ctx.dropout > 0) a = dropout(a, ctx.dropout, *ctx.rng, ctx.training);
        h = add(h, a);
    }
    {
        Tensor f = ffn.forward(ln2.forward(h), ctx);
        if (ctx.training && ctx.dropout > 0) f = dropout(f, ctx.dropout, *ctx.rng, ctx.training);
        h = add(h, f);
    }
    return h;
}

TransformerStack::TransformerStack(ParamStore& ps, const std::string& name, int n_layers,
                                   std::int64_t dim, int heads, std::int64_t ffn_hidden,
                                   bool with_cross, Rng& rng) {
    for (int i = 0; i < n_layers; ++i)
        layers.emplace_back(ps, name + ".l" + std::to_string(i), dim, heads, ffn_hidden, with_cross,
                            rng);
    final_ln = LayerNorm(ps, name + ".final_ln", dim);
}

Tensor TransformerStack::forward(const Tensor& x, const Tensor& self_mask, const Tensor& memory,
                                 const Tensor& memory_mask, Ctx& ctx) const {
    Tensor h = x;
    for (const auto& l : layers) h = l.forward(h, self_mask, memory, memory_mask, ctx);
    return final_ln.forward(h);
}

Tensor causal_mask(std::int64_t m) {
    Tensor t = Tensor::zeros({m, m});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = i + 1; j < m; ++j) t.data()[i * m + j] = -1e30;
    return t;
}

}  // namespace nn
}  // namespace dn
