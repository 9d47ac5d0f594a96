#include "bridgediff/networks.hpp"

#include "net_init.hpp"

namespace bridgediff {

TextEncoder build_text_encoder(const NetConfig& cfg, RngStream& rng, ParamMap& p) {
    BD_CHECK(cfg.vocab_size > 0, "build_text_encoder: vocab_size not set");
    BD_CHECK(cfg.d_txt % cfg.n_heads == 0, "build_text_encoder: d_txt {} not divisible by {} heads",
             cfg.d_txt, cfg.n_heads);
    TextEncoder te;
    te.d_txt = cfg.d_txt;
    te.l_max = cfg.l_max;
    te.n_heads = cfg.n_heads;
    DType dt = cfg.dtype;
    te.tok_emb =
        detail::reg(p, "text.tok_emb", Tensor::randn({cfg.vocab_size, cfg.d_txt}, rng, dt, 0.02));
    te.pos_emb =
        detail::reg(p, "text.pos_emb", Tensor::randn({cfg.l_max, cfg.d_txt}, rng, dt, 0.02));
    for (int i = 0; i < cfg.text_blocks; ++i) {
        std::string base = fmt::format("text.blk{}", i);
        TextBlock blk;
        blk.ln1 = detail::make_norm(p, base + ".ln1", cfg.d_txt, dt);
        blk.attn.wq = detail::make_weight(p, base + ".attn.wq", cfg.d_txt, cfg.d_txt, rng, dt);
        blk.attn.wk = detail::make_weight(p, base + ".attn.wk", cfg.d_txt, cfg.d_txt, rng, dt);
        blk.attn.wv = detail::make_weight(p, base + ".attn.wv", cfg.d_txt, cfg.d_txt, rng, dt);
        blk.attn.wo = detail::make_weight(p, base + ".attn.wo", cfg.d_txt, cfg.d_txt, rng, dt);
        blk.ln2 = detail::make_norm(p, base + ".ln2", cfg.d_txt, dt);
        blk.mlp_w1 = detail::make_weight(p, base + ".mlp.w1", cfg.d_txt, 4 * cfg.d_txt, rng, dt);
        blk.mlp_b1 = detail::make_bias(p, base + ".mlp.b1", 4 * cfg.d_txt, dt);
        blk.mlp_w2 = detail::make_weight(p, base + ".mlp.w2", 4 * cfg.d_txt, cfg.d_txt, rng, dt);
        blk.mlp_b2 = detail::make_bias(p, base + ".mlp.b2", cfg.d_txt, dt);
        te.blocks.push_back(std::move(blk));
    }
    te.ln_final = detail::make_norm(p, "text.ln_final", cfg.d_txt, dt);
    return te;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    BD_CHECK(x.rank() >= 1 && w.rank() == 2, "linear: bad operand ranks");
    int64_t din = w.dim(0), dout = w.dim(1);
    BD_CHECK(x.shape().back() == din, "linear: input features {} vs weight {}",
             shape_str(x.shape()), shape_str(w.shape()));
    Shape xs = x.shape();
    int64_t rows = x.numel() / din;
    Tensor y = matmul(reshape(x, {rows, din}), w);
    if (b.defined()) y = add(y, b);
    Shape os = xs;
    os.back() = dout;
    return reshape(y, os);
}

namespace {

// [B,N,D] -> [B*h, N, D/h]
Tensor split_heads(const Tensor& x, int heads) {
    int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    int64_t dh = d / heads;
    Tensor y = reshape(x, {b, n, heads, dh});
    y = permute(y, {0, 2, 1, 3});
    return reshape(y, {b * heads, n, dh});
}

// [B*h, N, D/h] -> [B,N,D]
Tensor merge_heads(const Tensor& x, int heads) {
    int64_t bh = x.dim(0), n = x.dim(1), dh = x.dim(2);
    int64_t b = bh / heads;
    Tensor y = reshape(x, {b, heads, n, dh});
    y = permute(y, {0, 2, 1, 3});
    return reshape(y, {b, n, heads * dh});
}

}  // namespace

Tensor encode_text(const TextEncoder& te, const std::vector<std::vector<int>>& ids,
                   const std::vector<int>& lengths) {
    int64_t b = static_cast<int64_t>(ids.size());
    BD_CHECK(b > 0, "encode_text: empty batch");
    BD_CHECK(lengths.size() == ids.size(), "encode_text: {} lengths for batch of {}",
             lengths.size(), ids.size());
    int64_t l = te.l_max;
    int64_t d = te.d_txt;
    int64_t v = te.tok_emb.dim(0);
    std::vector<int> flat;
    flat.reserve(static_cast<size_t>(b * l));
    for (const auto& row : ids) {
        BD_CHECK(static_cast<int64_t>(row.size()) == l,
                 "encode_text: sequence length {} != l_max {}", row.size(), l);
        for (int id : row) {
            BD_CHECK(id >= 0 && id < v, "encode_text: token id {} out of vocabulary (V_total={})",
                     id, v);
            flat.push_back(id);
        }
    }
    Tensor x = reshape(embedding_lookup(te.tok_emb, flat), {b, l, d});
    x = add(x, te.pos_emb);

    // keys beyond each row's real length are masked out for every query
    Tensor mask = Tensor::zeros({b, 1, 1, l}, x.dtype());
    for (int64_t i = 0; i < b; ++i) {
        int len = lengths[static_cast<size_t>(i)];
        BD_CHECK(len >= 1 && len <= l, "encode_text: bad row length {}", len);
        for (int64_t j = len; j < l; ++j) mask.set(i * l + j, -1e9);
    }

    int heads = te.n_heads;
    int64_t dh = d / heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (const auto& blk : te.blocks) {
        Tensor xn = layer_norm(x, blk.ln1.g, blk.ln1.b);
        Tensor q = split_heads(linear(xn, blk.attn.wq, Tensor()), heads);
        Tensor k = split_heads(linear(xn, blk.attn.wk, Tensor()), heads);
        Tensor vv = split_heads(linear(xn, blk.attn.wv, Tensor()), heads);
        Tensor scores = mul_scalar(bmm(q, permute(k, {0, 2, 1})), scale);
        scores = reshape(scores, {b, heads, l, l});
        scores = add(scores, mask);
        Tensor attn = softmax_lastdim(scores);
        attn = reshape(attn, {b * heads, l, l});
        Tensor o = merge_heads(bmm(attn, vv), heads);
        x = add(x, linear(o, blk.attn.wo, Tensor()));

        Tensor h = layer_norm(x, blk.ln2.g, blk.ln2.b);
        h = silu(linear(h, blk.mlp_w1, blk.mlp_b1));
        x = add(x, linear(h, blk.mlp_w2, blk.mlp_b2));
    }
    return layer_norm(x, te.ln_final.g, te.ln_final.b);
}

Tensor encode_text(const TextEncoder& te, const std::vector<int>& ids, int length) {
    Tensor out = encode_text(te, std::vector<std::vector<int>>{ids}, std::vector<int>{length});
    return reshape(out, {out.dim(1), out.dim(2)});
}

}  // namespace bridgediff
