#pragma once

// Straight-line double-precision re-implementation of the denoiser forward
// pass, used as an independent oracle. Plain loops over std::vector<double>;
// deliberately shares no code with the tensor engine or the tape.

#include <cmath>
#include <string>
#include <vector>

#include "garmentgen/denoiser.hpp"
#include "garmentgen/tensor.hpp"

namespace refmodel {

struct Mat {
    int r = 0, c = 0;
    std::vector<double> v;
    Mat() = default;
    Mat(int rows, int cols) : r(rows), c(cols), v(static_cast<size_t>(rows) * cols, 0.0) {}
    double& at(int i, int j) { return v[static_cast<size_t>(i) * c + j]; }
    double at(int i, int j) const { return v[static_cast<size_t>(i) * c + j]; }
};

template <typename T>
Mat from_store(const ggen::ParameterStore<T>& store, const std::string& name) {
    const ggen::TensorT<T>& t = store.param(name);
    Mat m;
    if (t.rank() == 2) {
        m.r = t.dim(0);
        m.c = t.dim(1);
    } else {
        m.r = 1;
        m.c = t.numel();
    }
    m.v.resize(static_cast<size_t>(t.numel()));
    for (int i = 0; i < t.numel(); ++i) m.v[static_cast<size_t>(i)] = double(t.at(i));
    return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
    Mat out(a.r, b.c);
    for (int i = 0; i < a.r; ++i)
        for (int j = 0; j < b.c; ++j) {
            double acc = 0.0;
            for (int p = 0; p < a.c; ++p) acc += a.at(i, p) * b.at(p, j);
            out.at(i, j) = acc;
        }
    return out;
}

inline Mat add(const Mat& a, const Mat& b) {
    Mat out = a;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += b.v[i];
    return out;
}

inline Mat add_row(const Mat& x, const Mat& row) {
    Mat out = x;
    for (int i = 0; i < x.r; ++i)
        for (int j = 0; j < x.c; ++j) out.at(i, j) += row.v[static_cast<size_t>(j)];
    return out;
}

inline Mat silu(const Mat& x) {
    Mat out = x;
    for (auto& e : out.v) e = e / (1.0 + std::exp(-e));
    return out;
}

inline Mat layer_norm(const Mat& x, const Mat& g, const Mat& b, double eps = 1e-5) {
    Mat out(x.r, x.c);
    for (int i = 0; i < x.r; ++i) {
        double mu = 0.0;
        for (int j = 0; j < x.c; ++j) mu += x.at(i, j);
        mu /= x.c;
        double var = 0.0;
        for (int j = 0; j < x.c; ++j) var += (x.at(i, j) - mu) * (x.at(i, j) - mu);
        var /= x.c;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < x.c; ++j)
            out.at(i, j) = (x.at(i, j) - mu) * inv * g.v[static_cast<size_t>(j)] + b.v[static_cast<size_t>(j)];
    }
    return out;
}

inline void softmax_row_inplace(double* row, int n) {
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    for (int j = 0; j < n; ++j) row[j] /= sum;
}

// multi-head attention over full-width projections, head h sees columns
// [h*dh, (h+1)*dh), scaled by 1/sqrt(dh)
inline Mat attention(const Mat& q, const Mat& k, const Mat& v, int heads) {
    const int d = q.c, dh = d / heads;
    const double s = 1.0 / std::sqrt(double(dh));
    Mat out(q.r, d);
    std::vector<double> scores(static_cast<size_t>(k.r));
    for (int h = 0; h < heads; ++h) {
        const int off = h * dh;
        for (int i = 0; i < q.r; ++i) {
            for (int m = 0; m < k.r; ++m) {
                double acc = 0.0;
                for (int j = 0; j < dh; ++j) acc += q.at(i, off + j) * k.at(m, off + j);
                scores[static_cast<size_t>(m)] = acc * s;
            }
            softmax_row_inplace(scores.data(), k.r);
            for (int j = 0; j < dh; ++j) {
                double acc = 0.0;
                for (int m = 0; m < k.r; ++m) acc += scores[static_cast<size_t>(m)] * v.at(m, off + j);
                out.at(i, off + j) = acc;
            }
        }
    }
    return out;
}

// Dense evaluation of the fused attention equation:两 separate softmax
// attentions from shared queries, summed.
inline Mat fused_attention(const Mat& alpha, const Mat& beta, const Mat& wq, const Mat& wk,
                           const Mat& wv, const Mat& wkg, const Mat& wvg, int heads) {
    Mat q = matmul(alpha, wq);
    Mat base = attention(q, matmul(alpha, wk), matmul(alpha, wv), heads);
    Mat extra = attention(q, matmul(beta, wkg), matmul(beta, wvg), heads);
    return add(base, extra);
}

struct Result {
    std::vector<double> eps;  // image layout [c,h,w]
    std::vector<Mat> alphas;
    std::vector<Mat> block_outputs;
};

template <typename T>
Result forward(const ggen::DenoiserConfig& cfg, const ggen::ParameterStore<T>& w,
               const std::vector<double>& image, int t, const std::vector<int>& tokens,
               const std::vector<Mat>* betas, const ggen::ParameterStore<T>* fusion) {
    const int ps = cfg.patch_size, C = cfg.image_c, H = cfg.image_h, W = cfg.image_w;
    const int gh = H / ps, gw = W / ps;
    const int n0 = gh * gw, pf = ps * ps * C, d = cfg.dim;

    // patchify: token (pr,pc), feature (ch, dr, dc) channel-major
    Mat x(n0, pf);
    for (int pr = 0; pr < gh; ++pr)
        for (int pc = 0; pc < gw; ++pc)
            for (int ch = 0; ch < C; ++ch)
                for (int dr = 0; dr < ps; ++dr)
                    for (int dc = 0; dc < ps; ++dc)
                        x.at(pr * gw + pc, ch * ps * ps + dr * ps + dc) =
                            image[static_cast<size_t>((ch * H + pr * ps + dr) * W + pc * ps + dc)];

    x = add_row(matmul(x, from_store(w, "patch_embed.w")), from_store(w, "patch_embed.b"));
    Mat pos = from_store(w, "pos_emb");
    for (int i = 0; i < n0; ++i)
        for (int j = 0; j < d; ++j) x.at(i, j) += pos.at(i, j);

    Mat table = from_store(w, "time_embed.table");
    Mat trow(1, table.c);
    for (int j = 0; j < table.c; ++j) trow.at(0, j) = table.at(t, j);
    Mat temb = add_row(matmul(silu(trow), from_store(w, "time_embed.w")), from_store(w, "time_embed.b"));
    for (int i = 0; i < n0; ++i)
        for (int j = 0; j < d; ++j) x.at(i, j) += temb.at(0, j);

    // text context
    std::vector<int> ids = tokens.empty() ? std::vector<int>{0} : tokens;
    Mat emb = from_store(w, "token_embed");
    Mat text(static_cast<int>(ids.size()), d);
    for (size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < d; ++j) text.at(static_cast<int>(i), j) = emb.at(ids[i], j);

    Result res;
    int block = 0;
    auto run_block = [&](Mat h) {
        const std::string p = "block" + std::to_string(block) + ".";
        Mat alpha = layer_norm(h, from_store(w, p + "norm1.g"), from_store(w, p + "norm1.b"));
        res.alphas.push_back(alpha);
        Mat att;
        if (betas) {
            att = fused_attention(alpha, (*betas)[static_cast<size_t>(block)],
                                  from_store(w, p + "attn.wq"), from_store(w, p + "attn.wk"),
                                  from_store(w, p + "attn.wv"), from_store(*fusion, p + "wkg"),
                                  from_store(*fusion, p + "wvg"), cfg.heads);
        } else {
            Mat q = matmul(alpha, from_store(w, p + "attn.wq"));
            att = attention(q, matmul(alpha, from_store(w, p + "attn.wk")),
                            matmul(alpha, from_store(w, p + "attn.wv")), cfg.heads);
        }
        h = add(h, matmul(att, from_store(w, p + "attn.wo")));

        Mat h2 = layer_norm(h, from_store(w, p + "norm2.g"), from_store(w, p + "norm2.b"));
        Mat ca = attention(matmul(h2, from_store(w, p + "cross.wq")),
                           matmul(text, from_store(w, p + "cross.wk")),
                           matmul(text, from_store(w, p + "cross.wv")), cfg.heads);
        h = add(h, matmul(ca, from_store(w, p + "cross.wo")));

        Mat h3 = layer_norm(h, from_store(w, p + "norm3.g"), from_store(w, p + "norm3.b"));
        Mat ff = add_row(matmul(h3, from_store(w, p + "ffn.w1")), from_store(w, p + "ffn.b1"));
        ff = add_row(matmul(silu(ff), from_store(w, p + "ffn.w2")), from_store(w, p + "ffn.b2"));
        h = add(h, ff);
        res.block_outputs.push_back(h);
        ++block;
        return h;
    };

    std::vector<Mat> skips;
    std::vector<std::pair<int, int>> grids;  // (gh, gw) per level
    int cgh = gh, cgw = gw;
    for (int lvl = 0; lvl < cfg.levels; ++lvl) {
        for (int b = 0; b < cfg.blocks_per_level; ++b) x = run_block(x);
        if (lvl + 1 < cfg.levels) {
            skips.push_back(x);
            grids.emplace_back(cgh, cgw);
            // 2x2 merge: group (r2,c2) concatenates [tl, tr, bl, br]
            Mat grouped((cgh / 2) * (cgw / 2), 4 * d);
            for (int r2 = 0; r2 < cgh / 2; ++r2)
                for (int c2 = 0; c2 < cgw / 2; ++c2) {
                    const int g = r2 * (cgw / 2) + c2;
                    const int src[4] = {(2 * r2) * cgw + 2 * c2, (2 * r2) * cgw + 2 * c2 + 1,
                                        (2 * r2 + 1) * cgw + 2 * c2, (2 * r2 + 1) * cgw + 2 * c2 + 1};
                    for (int s = 0; s < 4; ++s)
                        for (int j = 0; j < d; ++j) grouped.at(g, s * d + j) = x.at(src[s], j);
                }
            const std::string m = "merge" + std::to_string(lvl) + ".";
            x = add_row(matmul(grouped, from_store(w, m + "w")), from_store(w, m + "b"));
            cgh /= 2;
            cgw /= 2;
        }
    }
    for (int lvl = cfg.levels - 2; lvl >= 0; --lvl) {
        const std::string s = "split" + std::to_string(lvl) + ".";
        Mat wide = add_row(matmul(x, from_store(w, s + "w")), from_store(w, s + "b"));
        auto [fgh, fgw] = grids.back();
        grids.pop_back();
        Mat fine(fgh * fgw, d);
        for (int r = 0; r < fgh; ++r)
            for (int c = 0; c < fgw; ++c) {
                const int g = (r / 2) * (fgw / 2) + (c / 2);
                const int slot = (r % 2) * 2 + (c % 2);
                for (int j = 0; j < d; ++j) fine.at(r * fgw + c, j) = wide.at(g, slot * d + j);
            }
        x = add(fine, skips.back());
        skips.pop_back();
        cgh = fgh;
        cgw = fgw;
        for (int b = 0; b < cfg.blocks_per_level; ++b) x = run_block(x);
    }

    x = layer_norm(x, from_store(w, "out_norm.g"), from_store(w, "out_norm.b"));
    x = add_row(matmul(x, from_store(w, "unpatch.w")), from_store(w, "unpatch.b"));

    res.eps.assign(static_cast<size_t>(C) * H * W, 0.0);
    for (int pr = 0; pr < gh; ++pr)
        for (int pc = 0; pc < gw; ++pc)
            for (int ch = 0; ch < C; ++ch)
                for (int dr = 0; dr < ps; ++dr)
                    for (int dc = 0; dc < ps; ++dc)
                        res.eps[static_cast<size_t>((ch * H + pr * ps + dr) * W + pc * ps + dc)] =
                            x.at(pr * gw + pc, ch * ps * ps + dr * ps + dc);
    return res;
}

}  // namespace refmodel
