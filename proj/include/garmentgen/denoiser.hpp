#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "garmentgen/errors.hpp"
#include "garmentgen/tensor.hpp"

namespace ggen {

// Token-based UNet: patchify -> transformer blocks over `levels` resolutions
// with 2x2 token merging on the way down and the mirrored split + skip on the
// way up. All conditioning enters through attention: text by cross-attention
// over learned token embeddings, the garment by a second self-attention term
// over extractor hidden states.
struct DenoiserConfig {
    int image_h = 32;
    int image_w = 32;
    int image_c = 3;
    int patch_size = 4;
    int dim = 64;
    int heads = 4;
    int blocks_per_level = 2;
    int levels = 2;
    int vocab_size = 16;
    int max_tokens = 64;
    int time_embed_dim = 64;
    int time_steps = 200;  // size of the learned step-embedding table

    int n_blocks() const { return blocks_per_level * (2 * levels - 1); }
    int up_block_count() const { return blocks_per_level * (levels - 1); }
    int first_up_block() const { return blocks_per_level * levels; }
    int patch_feature_dim() const { return patch_size * patch_size * image_c; }

    // token grid dims at a resolution level (0 = finest)
    int grid_h(int level) const { return (image_h / patch_size) >> level; }
    int grid_w(int level) const { return (image_w / patch_size) >> level; }
    int tokens_at(int level) const { return grid_h(level) * grid_w(level); }

    void validate() const {
        if (dim < 1 || heads < 1 || dim % heads != 0)
            throw ConfigError("model dim " + std::to_string(dim) +
                              " must be a positive multiple of head count " + std::to_string(heads));
        if (levels < 1 || blocks_per_level < 1)
            throw ConfigError("levels and blocks_per_level must be at least 1");
        if (patch_size < 1 || image_c < 1) throw ConfigError("invalid patch size or channel count");
        const int div = patch_size << (levels - 1);
        if (image_h % div != 0 || image_w % div != 0)
            throw ConfigError("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                              " must be divisible by patch_size*2^(levels-1) = " +
                              std::to_string(div));
        if (tokens_at(0) > max_tokens)
            throw ConfigError("max_tokens " + std::to_string(max_tokens) + " below token count " +
                              std::to_string(tokens_at(0)));
        if (vocab_size < 1) throw ConfigError("vocab_size must be at least 1");
        if (time_embed_dim < 1 || time_steps < 1)
            throw ConfigError("invalid time embedding configuration");
    }
};

// Per-block normalized hidden states captured from the garment extractor,
// computed once per garment and reused across all denoising steps.
template <typename T>
struct GarmentFeaturesT {
    std::vector<TensorT<T>> betas;
};

using GarmentFeatures = GarmentFeaturesT<float>;

template <typename T>
struct ForwardResult {
    TensorT<T> eps;                        // predicted noise, image-shaped
    std::vector<TensorT<T>> alphas;        // normalized states entering each self-attention
    std::vector<TensorT<T>> block_outputs; // token state after each block
};

// ---------------------------------------------------------------------------
// Weight initialization
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
TensorT<T> fan_in_init(int rows, int cols, SeededRng& rng) {
    return randn<T>({rows, cols}, rng, 1.0 / std::sqrt(double(rows)));
}

}  // namespace detail

template <typename T>
ParameterStore<T> init_denoiser(const DenoiserConfig& cfg, SeededRng rng) {
    cfg.validate();
    ParameterStore<T> w;
    const int d = cfg.dim;
    const int pf = cfg.patch_feature_dim();

    w.add("patch_embed.w", detail::fan_in_init<T>(pf, d, rng));
    w.add("patch_embed.b", TensorT<T>::zeros({d}));
    w.add("pos_emb", randn<T>({cfg.max_tokens, d}, rng, 0.02));
    w.add("time_embed.table", randn<T>({cfg.time_steps + 1, cfg.time_embed_dim}, rng, 0.02));
    w.add("time_embed.w", detail::fan_in_init<T>(cfg.time_embed_dim, d, rng));
    w.add("time_embed.b", TensorT<T>::zeros({d}));
    w.add("token_embed", randn<T>({cfg.vocab_size, d}, rng, 0.02));

    for (int i = 0; i < cfg.n_blocks(); ++i) {
        const std::string p = "block" + std::to_string(i) + ".";
        w.add(p + "norm1.g", TensorT<T>::full({d}, T(1)));
        w.add(p + "norm1.b", TensorT<T>::zeros({d}));
        w.add(p + "attn.wq", detail::fan_in_init<T>(d, d, rng));
        w.add(p + "attn.wk", detail::fan_in_init<T>(d, d, rng));
        w.add(p + "attn.wv", detail::fan_in_init<T>(d, d, rng));
        w.add(p + "attn.wo", detail::fan_in_init<T>(d, d, rng));
        w.add(p + "norm2.g", TensorT<T>::full({d}, T(1)));
        w.add(p + "norm2.b", TensorT<T>::zeros({d}));
        w.add(p + "cross.wq", detail::fan_in_init<T>(d, d, rng));
        w.add(p + "cross.wk", detail::fan_in_init<T>(d, d, rng));
        w.add(p + "cross.wv", detail::fan_in_init<T>(d, d, rng));
        w.add(p + "cross.wo", detail::fan_in_init<T>(d, d, rng));
        w.add(p + "norm3.g", TensorT<T>::full({d}, T(1)));
        w.add(p + "norm3.b", TensorT<T>::zeros({d}));
        w.add(p + "ffn.w1", detail::fan_in_init<T>(d, 4 * d, rng));
        w.add(p + "ffn.b1", TensorT<T>::zeros({4 * d}));
        w.add(p + "ffn.w2", detail::fan_in_init<T>(4 * d, d, rng));
        w.add(p + "ffn.b2", TensorT<T>::zeros({d}));
    }
    for (int l = 0; l + 1 < cfg.levels; ++l) {
        const std::string m = "merge" + std::to_string(l) + ".";
        w.add(m + "w", detail::fan_in_init<T>(4 * d, d, rng));
        w.add(m + "b", TensorT<T>::zeros({d}));
        const std::string s = "split" + std::to_string(l) + ".";
        w.add(s + "w", detail::fan_in_init<T>(d, 4 * d, rng));
        w.add(s + "b", TensorT<T>::zeros({4 * d}));
    }
    w.add("out_norm.g", TensorT<T>::full({d}, T(1)));
    w.add("out_norm.b", TensorT<T>::zeros({d}));
    // zero-init output head so the initial prediction is the zero image
    w.add("unpatch.w", TensorT<T>::zeros({d, pf}));
    w.add("unpatch.b", TensorT<T>::zeros({pf}));
    return w;
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// Multi-head scaled dot-product attention over full-width projections.
// Each head sees d/heads columns and scales by 1/sqrt(d/heads).
template <typename T>
TensorT<T> attention_heads(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                           int heads) {
    const int d = q.dim(1);
    if (d % heads != 0) throw DimensionError("attention width not divisible by head count");
    const int dh = d / heads;
    const T s = T(1) / static_cast<T>(std::sqrt(double(dh)));
    std::vector<TensorT<T>> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        TensorT<T> qh = slice_cols(q, h * dh, dh);
        TensorT<T> kh = slice_cols(k, h * dh, dh);
        TensorT<T> vh = slice_cols(v, h * dh, dh);
        TensorT<T> att = softmax_rows(scale(matmul(qh, transpose(kh)), s));
        outs.push_back(matmul(att, vh));
    }
    return heads == 1 ? outs[0] : concat_cols(outs);
}

// Plain self-attention term (pre output-projection).
template <typename T>
TensorT<T> self_attention(const TensorT<T>& alpha, const TensorT<T>& wq, const TensorT<T>& wk,
                          const TensorT<T>& wv, int heads) {
    return attention_heads(matmul(alpha, wq), matmul(alpha, wk), matmul(alpha, wv), heads);
}

// Decoupled fusion: the baseline self-attention term plus a second softmax
// attention from the same queries onto garment keys/values. The two terms are
// separate softmaxes summed, not a key/value concatenation.
template <typename T>
TensorT<T> fused_self_attention(const TensorT<T>& alpha, const TensorT<T>& beta,
                                const TensorT<T>& wq, const TensorT<T>& wk, const TensorT<T>& wv,
                                const TensorT<T>& wkg, const TensorT<T>& wvg, int heads) {
    if (alpha.rank() != 2 || beta.rank() != 2 || alpha.dim(1) != beta.dim(1))
        throw DimensionError("fused_self_attention: alpha " + TensorT<T>::shape_str(alpha.shape) +
                             " and beta " + TensorT<T>::shape_str(beta.shape) +
                             " must be 2-d with equal width");
    const int d = alpha.dim(1);
    for (const TensorT<T>* m : {&wq, &wk, &wv, &wkg, &wvg})
        if (m->rank() != 2 || m->dim(0) != d || m->dim(1) != d)
            throw DimensionError("fused_self_attention: projection must be " + std::to_string(d) +
                                 "x" + std::to_string(d) + ", got " +
                                 TensorT<T>::shape_str(m->shape));
    TensorT<T> q = matmul(alpha, wq);
    TensorT<T> base = attention_heads(q, matmul(alpha, wk), matmul(alpha, wv), heads);
    TensorT<T> garment = attention_heads(q, matmul(beta, wkg), matmul(beta, wvg), heads);
    return add(base, garment);
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

namespace detail {

// flat index permutation image -> tokens, token p holds its patch row-major
// with channel-major features
inline std::vector<int> patchify_indices(const DenoiserConfig& cfg) {
    const int ps = cfg.patch_size, gw = cfg.grid_w(0), gh = cfg.grid_h(0);
    const int C = cfg.image_c, H = cfg.image_h, W = cfg.image_w;
    std::vector<int> idx;
    idx.reserve(static_cast<size_t>(C) * H * W);
    for (int pr = 0; pr < gh; ++pr)
        for (int pc = 0; pc < gw; ++pc)
            for (int ch = 0; ch < C; ++ch)
                for (int dr = 0; dr < ps; ++dr)
                    for (int dc = 0; dc < ps; ++dc)
                        idx.push_back((ch * H + pr * ps + dr) * W + pc * ps + dc);
    return idx;
}

inline std::vector<int> invert_permutation(const std::vector<int>& p) {
    std::vector<int> inv(p.size());
    for (size_t i = 0; i < p.size(); ++i) inv[static_cast<size_t>(p[i])] = static_cast<int>(i);
    return inv;
}

// rows of the fine grid in 2x2 group order; gather with this permutation then
// reshape (n/4) x 4d to concatenate each group
inline std::vector<int> merge_order(int gh, int gw) {
    std::vector<int> idx;
    idx.reserve(static_cast<size_t>(gh) * gw);
    for (int r2 = 0; r2 < gh / 2; ++r2)
        for (int c2 = 0; c2 < gw / 2; ++c2) {
            idx.push_back((2 * r2) * gw + 2 * c2);
            idx.push_back((2 * r2) * gw + 2 * c2 + 1);
            idx.push_back((2 * r2 + 1) * gw + 2 * c2);
            idx.push_back((2 * r2 + 1) * gw + 2 * c2 + 1);
        }
    return idx;
}

}  // namespace detail

template <typename T>
ForwardResult<T> denoiser_forward(const DenoiserConfig& cfg, const ParameterStore<T>& weights,
                                  const TensorT<T>& z_t, int t, const std::vector<int>& tokens,
                                  const GarmentFeaturesT<T>* features,
                                  const ParameterStore<T>* fusion) {
    if (z_t.shape != std::vector<int>{cfg.image_c, cfg.image_h, cfg.image_w})
        throw DimensionError("denoiser input shape " + TensorT<T>::shape_str(z_t.shape) +
                             " does not match configured " +
                             TensorT<T>::shape_str({cfg.image_c, cfg.image_h, cfg.image_w}));
    if (t < 0 || t > cfg.time_steps)
        throw StepError("denoiser time step " + std::to_string(t) + " outside [0," +
                        std::to_string(cfg.time_steps) + "]");
    if (features) {
        if (!fusion) throw ContractError("garment features given without fusion weights");
        if (static_cast<int>(features->betas.size()) != cfg.n_blocks())
            throw ArchitectureError("garment feature count " +
                                    std::to_string(features->betas.size()) +
                                    " does not match block count " + std::to_string(cfg.n_blocks()));
    }
    for (int id : tokens)
        if (id < 0 || id >= cfg.vocab_size)
            throw ContractError("token id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(cfg.vocab_size));

    // text context: caption tokens, or the learned null token when empty
    const std::vector<int> text_ids = tokens.empty() ? std::vector<int>{0} : tokens;
    TensorT<T> text = gather_rows(weights.get("token_embed"), text_ids);

    // patchify + position + step embedding
    TensorT<T> zin = z_t;
    zin.no_grad = true;
    const auto patch_idx = detail::patchify_indices(cfg);
    TensorT<T> x = permute_elements(zin, patch_idx, {cfg.tokens_at(0), cfg.patch_feature_dim()});
    x = add_rowvec(matmul(x, weights.get("patch_embed.w")), weights.get("patch_embed.b"));
    TensorT<T> pos = gather_rows(weights.get("pos_emb"), [&] {
        std::vector<int> ids(static_cast<size_t>(cfg.tokens_at(0)));
        for (int i = 0; i < cfg.tokens_at(0); ++i) ids[static_cast<size_t>(i)] = i;
        return ids;
    }());
    x = add(x, pos);
    TensorT<T> trow = gather_rows(weights.get("time_embed.table"), {t});
    TensorT<T> temb = add_rowvec(matmul(silu(trow), weights.get("time_embed.w")),
                                 weights.get("time_embed.b"));
    x = add_rowvec(x, temb);

    ForwardResult<T> result;
    int block = 0;

    auto run_block = [&](TensorT<T> h) {
        const std::string p = "block" + std::to_string(block) + ".";
        TensorT<T> alpha = layer_norm(h, weights.get(p + "norm1.g"), weights.get(p + "norm1.b"));
        result.alphas.push_back(alpha);
        TensorT<T> att;
        if (features) {
            const std::string f = "block" + std::to_string(block) + ".";
            att = fused_self_attention(alpha, features->betas[static_cast<size_t>(block)],
                                       weights.get(p + "attn.wq"), weights.get(p + "attn.wk"),
                                       weights.get(p + "attn.wv"), fusion->get(f + "wkg"),
                                       fusion->get(f + "wvg"), cfg.heads);
        } else {
            att = self_attention(alpha, weights.get(p + "attn.wq"), weights.get(p + "attn.wk"),
                                 weights.get(p + "attn.wv"), cfg.heads);
        }
        h = add(h, matmul(att, weights.get(p + "attn.wo")));

        TensorT<T> h2 = layer_norm(h, weights.get(p + "norm2.g"), weights.get(p + "norm2.b"));
        TensorT<T> ca = attention_heads(matmul(h2, weights.get(p + "cross.wq")),
                                        matmul(text, weights.get(p + "cross.wk")),
                                        matmul(text, weights.get(p + "cross.wv")), cfg.heads);
        h = add(h, matmul(ca, weights.get(p + "cross.wo")));

        TensorT<T> h3 = layer_norm(h, weights.get(p + "norm3.g"), weights.get(p + "norm3.b"));
        TensorT<T> ff = add_rowvec(matmul(h3, weights.get(p + "ffn.w1")), weights.get(p + "ffn.b1"));
        ff = add_rowvec(matmul(silu(ff), weights.get(p + "ffn.w2")), weights.get(p + "ffn.b2"));
        h = add(h, ff);

        result.block_outputs.push_back(h);
        ++block;
        return h;
    };

    // down path, bottom level included
    std::vector<TensorT<T>> skips;
    for (int lvl = 0; lvl < cfg.levels; ++lvl) {
        for (int b = 0; b < cfg.blocks_per_level; ++b) x = run_block(x);
        if (lvl + 1 < cfg.levels) {
            skips.push_back(x);
            const auto order = detail::merge_order(cfg.grid_h(lvl), cfg.grid_w(lvl));
            TensorT<T> grouped = gather_rows(x, order);
            grouped = reshape(grouped, {cfg.tokens_at(lvl + 1), 4 * cfg.dim});
            const std::string m = "merge" + std::to_string(lvl) + ".";
            x = add_rowvec(matmul(grouped, weights.get(m + "w")), weights.get(m + "b"));
        }
    }
    // up path
    for (int lvl = cfg.levels - 2; lvl >= 0; --lvl) {
        const std::string s = "split" + std::to_string(lvl) + ".";
        TensorT<T> wide = add_rowvec(matmul(x, weights.get(s + "w")), weights.get(s + "b"));
        TensorT<T> fine = reshape(wide, {cfg.tokens_at(lvl), cfg.dim});
        const auto order = detail::merge_order(cfg.grid_h(lvl), cfg.grid_w(lvl));
        x = gather_rows(fine, detail::invert_permutation(order));
        x = add(x, skips.back());
        skips.pop_back();
        for (int b = 0; b < cfg.blocks_per_level; ++b) x = run_block(x);
    }

    x = layer_norm(x, weights.get("out_norm.g"), weights.get("out_norm.b"));
    x = add_rowvec(matmul(x, weights.get("unpatch.w")), weights.get("unpatch.b"));
    result.eps = permute_elements(x, detail::invert_permutation(detail::patchify_indices(cfg)),
                                  {cfg.image_c, cfg.image_h, cfg.image_w});
    return result;
}

// Run the extractor once on the clean garment image (t = 0, null text) and
// keep the normalized states entering each self-attention block. Deterministic
// in (weights, z_G); the result is reused for every denoising step.
template <typename T>
GarmentFeaturesT<T> extract_garment_features(const DenoiserConfig& cfg,
                                             const ParameterStore<T>& extractor_weights,
                                             const TensorT<T>& z_g) {
    ForwardResult<T> r = denoiser_forward(cfg, extractor_weights, z_g, 0, {}, nullptr, nullptr);
    GarmentFeaturesT<T> f;
    f.betas = std::move(r.alphas);
    return f;
}

// Extractor starts as a deep copy of the denoiser; fusion keys start from the
// frozen self-attention keys and fusion values start at zero, so the fused
// forward initially reproduces the base model exactly.
template <typename T>
std::pair<ParameterStore<T>, ParameterStore<T>> init_extractor_from_denoiser(
    const DenoiserConfig& cfg, const ParameterStore<T>& denoiser_weights) {
    ParameterStore<T> extractor = denoiser_weights.clone();
    ParameterStore<T> fusion;
    for (int i = 0; i < cfg.n_blocks(); ++i) {
        const std::string p = "block" + std::to_string(i) + ".";
        TensorT<T> wkg;
        wkg.shape = denoiser_weights.param(p + "attn.wk").shape;
        wkg.data = std::make_shared<std::vector<T>>(*denoiser_weights.param(p + "attn.wk").data);
        fusion.add(p + "wkg", std::move(wkg));
        fusion.add(p + "wvg", TensorT<T>::zeros({cfg.dim, cfg.dim}));
    }
    return {std::move(extractor), std::move(fusion)};
}

}  // namespace ggen
