#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "prunelab/tensor.hpp"

namespace prunelab {

Tensor make_node(std::vector<int64_t> shape, std::vector<float> data,
                 std::vector<Tensor> parents,
                 std::function<void(detail::TensorNode&)> backward_fn);

namespace {

constexpr float kMaskValue = -1e30f;
constexpr double kLogFloor = -27.631021115928547; // ln(1e-12)

int64_t rows_of(const Tensor& t) {
    int64_t r = 1;
    for (int i = 0; i + 1 < t.ndim(); ++i) r *= t.shape()[size_t(i)];
    return r;
}

// c[m,n] += a[m,k] @ b[k,n]. Reduction over k runs in ascending order for
// every output element; SIMD applies across the n axis only, so results do
// not depend on vector width and adding an all-zero k-slice is a no-op.
void mm_accum(const float* __restrict a, const float* __restrict b, float* __restrict c,
              int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        float* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const float av = arow[p];
            const float* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m,n] += a[m,k] @ b[n,k]^T, fixed-order dot per element
void mm_nt_accum(const float* __restrict a, const float* __restrict b, float* __restrict c,
                 int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        for (int64_t j = 0; j < n; ++j) {
            const float* brow = b + j * k;
            float s0 = 0.f, s1 = 0.f, s2 = 0.f, s3 = 0.f;
            int64_t p = 0;
            for (; p + 4 <= k; p += 4) {
                s0 += arow[p] * brow[p];
                s1 += arow[p + 1] * brow[p + 1];
                s2 += arow[p + 2] * brow[p + 2];
                s3 += arow[p + 3] * brow[p + 3];
            }
            float s = (s0 + s1) + (s2 + s3);
            for (; p < k; ++p) s += arow[p] * brow[p];
            c[i * n + j] += s;
        }
    }
}

// dB[k,n] += a[m,k]^T @ dC[m,n] without materializing the transpose
void mm_tn_accum(const float* __restrict a, const float* __restrict dc, float* __restrict db,
                 int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        const float* crow = dc + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const float av = arow[p];
            float* brow = db + p * n;
            for (int64_t j = 0; j < n; ++j) brow[j] += av * crow[j];
        }
    }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<float> out(a.vec());
    const float* bp = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bp[i];
    return make_node(a.shape(), std::move(out), {a, b}, [a, b](detail::TensorNode& node) mutable {
        const auto& g = node.grad;
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<float> out(a.vec());
    const float* bp = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bp[i];
    return make_node(a.shape(), std::move(out), {a, b}, [a, b](detail::TensorNode& node) mutable {
        const auto& g = node.grad;
        if (a.requires_grad()) {
            auto& ga = a.grad();
            const float* bp = b.data();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bp[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            const float* ap = a.data();
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ap[i];
        }
    });
}

Tensor scale(const Tensor& a, float c) {
    std::vector<float> out(a.vec());
    for (auto& v : out) v *= c;
    return make_node(a.shape(), std::move(out), {a}, [a, c](detail::TensorNode& node) mutable {
        if (!a.requires_grad()) return;
        auto& ga = a.grad();
        const auto& g = node.grad;
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (b.ndim() != 2 || a.dim(-1) != b.dim(0))
        throw std::invalid_argument("matmul: inner dimensions do not match");
    const int64_t m = rows_of(a), k = a.dim(-1), n = b.dim(1);
    std::vector<int64_t> oshape(a.shape());
    oshape.back() = n;
    std::vector<float> out(size_t(m * n), 0.0f);
    mm_accum(a.data(), b.data(), out.data(), m, k, n);
    return make_node(std::move(oshape), std::move(out), {a, b},
                     [a, b, m, k, n](detail::TensorNode& node) mutable {
                         const float* g = node.grad.data();
                         if (a.requires_grad()) {
                             // dA = g @ B^T
                             mm_nt_accum(g, b.data(), a.grad().data(), m, n, k);
                         }
                         if (b.requires_grad()) {
                             // dB = A^T @ g
                             mm_tn_accum(a.data(), g, b.grad().data(), m, k, n);
                         }
                     });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (b.ndim() != 2 || a.dim(-1) != b.dim(1))
        throw std::invalid_argument("matmul_nt: inner dimensions do not match");
    const int64_t m = rows_of(a), k = a.dim(-1), n = b.dim(0);
    std::vector<int64_t> oshape(a.shape());
    oshape.back() = n;
    std::vector<float> out(size_t(m * n), 0.0f);
    mm_nt_accum(a.data(), b.data(), out.data(), m, k, n);
    return make_node(std::move(oshape), std::move(out), {a, b},
                     [a, b, m, k, n](detail::TensorNode& node) mutable {
                         const float* g = node.grad.data();
                         if (a.requires_grad()) {
                             // dA = g @ B
                             mm_accum(g, b.data(), a.grad().data(), m, n, k);
                         }
                         if (b.requires_grad()) {
                             // dB = g^T @ A
                             mm_tn_accum(g, a.data(), b.grad().data(), m, n, k);
                         }
                     });
}

Tensor silu(const Tensor& x) {
    std::vector<float> out(x.vec());
    for (auto& v : out) v = v * sigmoidf(v);
    return make_node(x.shape(), std::move(out), {x}, [x](detail::TensorNode& node) mutable {
        if (!x.requires_grad()) return;
        auto& gx = x.grad();
        const auto& g = node.grad;
        const float* xp = x.data();
        for (size_t i = 0; i < g.size(); ++i) {
            const float s = sigmoidf(xp[i]);
            gx[i] += g[i] * s * (1.0f + xp[i] * (1.0f - s));
        }
    });
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps) {
    const int64_t h = x.dim(-1);
    if (weight.ndim() != 1 || weight.dim(0) != h)
        throw std::invalid_argument("rms_norm: weight length must match last axis");
    const int64_t m = rows_of(x);
    std::vector<float> out(size_t(m * h));
    std::vector<float> inv_rms(size_t(m));
    const float* xp = x.data();
    const float* wp = weight.data();
    for (int64_t i = 0; i < m; ++i) {
        const float* row = xp + i * h;
        double ms = 0.0;
        for (int64_t j = 0; j < h; ++j) ms += double(row[j]) * double(row[j]);
        const float inv = 1.0f / std::sqrt(float(ms / double(h)) + eps);
        inv_rms[size_t(i)] = inv;
        float* orow = out.data() + i * h;
        for (int64_t j = 0; j < h; ++j) orow[j] = row[j] * inv * wp[j];
    }
    return make_node(x.shape(), std::move(out), {x, weight},
                     [x, weight, m, h, inv_rms](detail::TensorNode& node) mutable {
                         const float* g = node.grad.data();
                         const float* xp = x.data();
                         const float* wp = weight.data();
                         for (int64_t i = 0; i < m; ++i) {
                             const float* grow = g + i * h;
                             const float* row = xp + i * h;
                             const float inv = inv_rms[size_t(i)];
                             if (x.requires_grad()) {
                                 double dot = 0.0; // sum_j g_j * w_j * x_j
                                 for (int64_t j = 0; j < h; ++j)
                                     dot += double(grow[j]) * double(wp[j]) * double(row[j]);
                                 const float c = float(dot / double(h)) * inv * inv * inv;
                                 float* gx = x.grad().data() + i * h;
                                 for (int64_t j = 0; j < h; ++j)
                                     gx[j] += grow[j] * wp[j] * inv - row[j] * c;
                             }
                             if (weight.requires_grad()) {
                                 float* gw = weight.grad().data();
                                 for (int64_t j = 0; j < h; ++j) gw[j] += grow[j] * row[j] * inv;
                             }
                         }
                     });
}

Tensor embedding(const Tensor& table, const std::vector<int32_t>& ids, int64_t batch,
                 int64_t seq) {
    if (table.ndim() != 2) throw std::invalid_argument("embedding: table must be 2-d");
    if (int64_t(ids.size()) != batch * seq)
        throw std::invalid_argument("embedding: ids size must equal batch*seq");
    const int64_t v = table.dim(0), h = table.dim(1);
    for (int32_t id : ids)
        if (id < 0 || int64_t(id) >= v)
            throw std::invalid_argument("embedding: token id out of range");
    std::vector<float> out(size_t(batch * seq * h));
    const float* tp = table.data();
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(out.data() + int64_t(i) * h, tp + int64_t(ids[i]) * h, size_t(h) * 4);
    return make_node({batch, seq, h}, std::move(out), {table},
                     [table, ids, h](detail::TensorNode& node) mutable {
                         if (!table.requires_grad()) return;
                         float* gt = table.grad().data();
                         const float* g = node.grad.data();
                         for (size_t i = 0; i < ids.size(); ++i) {
                             float* dst = gt + int64_t(ids[i]) * h;
                             const float* src = g + int64_t(i) * h;
                             for (int64_t j = 0; j < h; ++j) dst[j] += src[j];
                         }
                     });
}

Tensor softmax_t(const Tensor& logits, float temperature) {
    if (!(temperature > 0.0f))
        throw std::invalid_argument("softmax_t: temperature must be positive");
    if (!logits.all_finite()) throw NumericError("softmax_t: non-finite logits");
    const int64_t v = logits.dim(-1);
    const int64_t m = rows_of(logits);
    std::vector<float> out(size_t(m * v));
    const float* lp = logits.data();
    for (int64_t i = 0; i < m; ++i) {
        const float* row = lp + i * v;
        float mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        float* orow = out.data() + i * v;
        for (int64_t j = 0; j < v; ++j) {
            const float e = std::exp((row[j] - mx) / temperature);
            orow[j] = e;
            z += double(e);
        }
        const float inv = float(1.0 / z);
        for (int64_t j = 0; j < v; ++j) orow[j] *= inv;
    }
    return make_node(logits.shape(), std::move(out), {logits},
                     [logits, m, v, temperature](detail::TensorNode& node) mutable {
                         if (!logits.requires_grad()) return;
                         const float* g = node.grad.data();
                         const float* p = node.data.data();
                         float* gl = logits.grad().data();
                         for (int64_t i = 0; i < m; ++i) {
                             const float* grow = g + i * v;
                             const float* prow = p + i * v;
                             double dot = 0.0;
                             for (int64_t j = 0; j < v; ++j) dot += double(grow[j]) * double(prow[j]);
                             const float d = float(dot);
                             float* glrow = gl + i * v;
                             for (int64_t j = 0; j < v; ++j)
                                 glrow[j] += prow[j] * (grow[j] - d) / temperature;
                         }
                     });
}

Tensor softmax(const Tensor& x) { return softmax_t(x, 1.0f); }

Tensor log(const Tensor& x) {
    std::vector<float> out(x.vec());
    for (auto& v : out) v = std::log(v);
    return make_node(x.shape(), std::move(out), {x}, [x](detail::TensorNode& node) mutable {
        if (!x.requires_grad()) return;
        auto& gx = x.grad();
        const auto& g = node.grad;
        const float* xp = x.data();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xp[i];
    });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (float v : x.vec()) s += double(v);
    return make_node({1}, {float(s)}, {x}, [x](detail::TensorNode& node) mutable {
        if (!x.requires_grad()) return;
        const float g = node.grad[0];
        for (auto& v : x.grad()) v += g;
    });
}

Tensor mean(const Tensor& x) {
    double s = 0.0;
    for (float v : x.vec()) s += double(v);
    const float inv = 1.0f / float(x.numel());
    return make_node({1}, {float(s / double(x.numel()))}, {x},
                     [x, inv](detail::TensorNode& node) mutable {
                         if (!x.requires_grad()) return;
                         const float g = node.grad[0] * inv;
                         for (auto& v : x.grad()) v += g;
                     });
}

namespace {

// rotation table for one call: cos/sin for (position, pair) lanes
void rope_tables(int64_t seq, int64_t half, float base, int64_t pos_offset,
                 std::vector<float>& cs, std::vector<float>& sn) {
    cs.resize(size_t(seq * half));
    sn.resize(size_t(seq * half));
    for (int64_t t = 0; t < seq; ++t) {
        for (int64_t i = 0; i < half; ++i) {
            const double freq = std::pow(double(base), -2.0 * double(i) / double(2 * half));
            const double ang = double(t + pos_offset) * freq;
            cs[size_t(t * half + i)] = float(std::cos(ang));
            sn[size_t(t * half + i)] = float(std::sin(ang));
        }
    }
}

void rope_apply(const float* in, float* out, int64_t b, int64_t s, int64_t nh, int64_t hd,
                const std::vector<float>& cs, const std::vector<float>& sn, bool inverse) {
    const int64_t half = hd / 2;
    const float sgn = inverse ? -1.0f : 1.0f;
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t t = 0; t < s; ++t) {
            const float* irow = in + (bi * s + t) * nh * hd;
            float* orow = out + (bi * s + t) * nh * hd;
            const float* c = cs.data() + t * half;
            const float* sv = sn.data() + t * half;
            for (int64_t h = 0; h < nh; ++h) {
                const float* x = irow + h * hd;
                float* y = orow + h * hd;
                for (int64_t i = 0; i < half; ++i) {
                    const float x0 = x[2 * i], x1 = x[2 * i + 1];
                    y[2 * i] = x0 * c[i] - sgn * x1 * sv[i];
                    y[2 * i + 1] = sgn * x0 * sv[i] + x1 * c[i];
                }
            }
        }
    }
}

} // namespace

Tensor rope(const Tensor& x, int64_t n_heads, float base, int64_t pos_offset) {
    if (x.ndim() != 3) throw std::invalid_argument("rope: expected [B,S,heads*head_dim]");
    const int64_t b = x.dim(0), s = x.dim(1), w = x.dim(2);
    if (n_heads < 1 || w % n_heads != 0)
        throw std::invalid_argument("rope: width not divisible by head count");
    const int64_t hd = w / n_heads;
    if (hd % 2 != 0) throw std::invalid_argument("rope: head_dim must be even");
    std::vector<float> cs, sn;
    rope_tables(s, hd / 2, base, pos_offset, cs, sn);
    std::vector<float> out(x.vec().size());
    rope_apply(x.data(), out.data(), b, s, n_heads, hd, cs, sn, false);
    return make_node(x.shape(), std::move(out), {x},
                     [x, b, s, n_heads, hd, cs, sn](detail::TensorNode& node) mutable {
                         if (!x.requires_grad()) return;
                         // orthogonal map: grad flows through the inverse rotation
                         std::vector<float> tmp(node.grad.size());
                         rope_apply(node.grad.data(), tmp.data(), b, s, n_heads, hd, cs, sn, true);
                         auto& gx = x.grad();
                         for (size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
                     });
}

Tensor causal_mask(const Tensor& scores) {
    if (scores.ndim() != 4 || scores.dim(2) != scores.dim(3))
        throw std::invalid_argument("causal_mask: expected [B,H,S,S]");
    const int64_t g = scores.dim(0) * scores.dim(1), s = scores.dim(2);
    std::vector<float> out(scores.vec());
    for (int64_t bi = 0; bi < g; ++bi) {
        float* mat = out.data() + bi * s * s;
        for (int64_t i = 0; i < s; ++i)
            for (int64_t j = i + 1; j < s; ++j) mat[i * s + j] = kMaskValue;
    }
    return make_node(scores.shape(), std::move(out), {scores},
                     [scores, g, s](detail::TensorNode& node) mutable {
                         if (!scores.requires_grad()) return;
                         float* gs = scores.grad().data();
                         const float* gn = node.grad.data();
                         for (int64_t bi = 0; bi < g; ++bi) {
                             const int64_t off = bi * s * s;
                             for (int64_t i = 0; i < s; ++i)
                                 for (int64_t j = 0; j <= i; ++j)
                                     gs[off + i * s + j] += gn[off + i * s + j];
                         }
                     });
}

Tensor attn_scores(const Tensor& q, const Tensor& k, int64_t n_heads, int64_t n_kv_heads,
                   float scale) {
    if (q.ndim() != 3 || k.ndim() != 3 || q.dim(0) != k.dim(0) || q.dim(1) != k.dim(1))
        throw std::invalid_argument("attn_scores: expected matching [B,S,*] inputs");
    if (n_kv_heads < 1 || n_heads % n_kv_heads != 0)
        throw std::invalid_argument("attn_scores: head grouping must be integral");
    const int64_t b = q.dim(0), s = q.dim(1);
    if (q.dim(2) % n_heads != 0 || k.dim(2) % n_kv_heads != 0)
        throw std::invalid_argument("attn_scores: widths not divisible by head counts");
    const int64_t hd = q.dim(2) / n_heads;
    if (k.dim(2) / n_kv_heads != hd)
        throw std::invalid_argument("attn_scores: head_dim mismatch between q and k");
    const int64_t group = n_heads / n_kv_heads;
    const int64_t qw = n_heads * hd, kw = n_kv_heads * hd;

    std::vector<float> out(size_t(b * n_heads * s * s));
    const float* qp = q.data();
    const float* kp = k.data();
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t h = 0; h < n_heads; ++h) {
            const int64_t kg = h / group;
            float* mat = out.data() + (bi * n_heads + h) * s * s;
            for (int64_t i = 0; i < s; ++i) {
                const float* qrow = qp + (bi * s + i) * qw + h * hd;
                for (int64_t j = 0; j < s; ++j) {
                    const float* krow = kp + (bi * s + j) * kw + kg * hd;
                    float s0 = 0.f, s1 = 0.f, s2 = 0.f, s3 = 0.f;
                    int64_t d = 0;
                    for (; d + 4 <= hd; d += 4) {
                        s0 += qrow[d] * krow[d];
                        s1 += qrow[d + 1] * krow[d + 1];
                        s2 += qrow[d + 2] * krow[d + 2];
                        s3 += qrow[d + 3] * krow[d + 3];
                    }
                    float acc = (s0 + s1) + (s2 + s3);
                    for (; d < hd; ++d) acc += qrow[d] * krow[d];
                    mat[i * s + j] = acc * scale;
                }
            }
        }
    }
    return make_node(
        {b, n_heads, s, s}, std::move(out), {q, k},
        [q, k, b, s, n_heads, n_kv_heads, hd, group, qw, kw, scale](detail::TensorNode& node) mutable {
            const float* g = node.grad.data();
            const float* qp = q.data();
            const float* kp = k.data();
            for (int64_t bi = 0; bi < b; ++bi) {
                for (int64_t h = 0; h < n_heads; ++h) {
                    const int64_t kg = h / group;
                    const float* mat = g + (bi * n_heads + h) * s * s;
                    if (q.requires_grad()) {
                        float* gq = q.grad().data();
                        for (int64_t i = 0; i < s; ++i) {
                            float* gqrow = gq + (bi * s + i) * qw + h * hd;
                            for (int64_t j = 0; j < s; ++j) {
                                const float gv = mat[i * s + j] * scale;
                                const float* krow = kp + (bi * s + j) * kw + kg * hd;
                                for (int64_t d = 0; d < hd; ++d) gqrow[d] += gv * krow[d];
                            }
                        }
                    }
                    if (k.requires_grad()) {
                        float* gk = k.grad().data();
                        for (int64_t i = 0; i < s; ++i) {
                            const float* qrow = qp + (bi * s + i) * qw + h * hd;
                            for (int64_t j = 0; j < s; ++j) {
                                const float gv = mat[i * s + j] * scale;
                                float* gkrow = gk + (bi * s + j) * kw + kg * hd;
                                for (int64_t d = 0; d < hd; ++d) gkrow[d] += gv * qrow[d];
                            }
                        }
                    }
                }
            }
        });
}

Tensor attn_context(const Tensor& p, const Tensor& v, int64_t n_heads, int64_t n_kv_heads) {
    if (p.ndim() != 4 || v.ndim() != 3)
        throw std::invalid_argument("attn_context: expected p[B,H,S,S], v[B,S,*]");
    const int64_t b = p.dim(0), s = p.dim(2);
    if (p.dim(1) != n_heads || p.dim(3) != s || v.dim(0) != b || v.dim(1) != s)
        throw std::invalid_argument("attn_context: shape mismatch");
    if (n_kv_heads < 1 || n_heads % n_kv_heads != 0 || v.dim(2) % n_kv_heads != 0)
        throw std::invalid_argument("attn_context: head grouping must be integral");
    const int64_t hd = v.dim(2) / n_kv_heads;
    const int64_t group = n_heads / n_kv_heads;
    const int64_t vw = n_kv_heads * hd, ow = n_heads * hd;

    std::vector<float> out(size_t(b * s * ow), 0.0f);
    const float* pp = p.data();
    const float* vp = v.data();
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t h = 0; h < n_heads; ++h) {
            const int64_t kg = h / group;
            const float* mat = pp + (bi * n_heads + h) * s * s;
            for (int64_t i = 0; i < s; ++i) {
                float* orow = out.data() + (bi * s + i) * ow + h * hd;
                for (int64_t j = 0; j < s; ++j) {
                    const float w = mat[i * s + j];
                    const float* vrow = vp + (bi * s + j) * vw + kg * hd;
                    for (int64_t d = 0; d < hd; ++d) orow[d] += w * vrow[d];
                }
            }
        }
    }
    return make_node(
        {b, s, ow}, std::move(out), {p, v},
        [p, v, b, s, n_heads, hd, group, vw, ow](detail::TensorNode& node) mutable {
            const float* g = node.grad.data();
            const float* pp = p.data();
            const float* vp = v.data();
            for (int64_t bi = 0; bi < b; ++bi) {
                for (int64_t h = 0; h < n_heads; ++h) {
                    const int64_t kg = h / group;
                    if (p.requires_grad()) {
                        float* gp = p.grad().data() + (bi * n_heads + h) * s * s;
                        for (int64_t i = 0; i < s; ++i) {
                            const float* grow = g + (bi * s + i) * ow + h * hd;
                            for (int64_t j = 0; j < s; ++j) {
                                const float* vrow = vp + (bi * s + j) * vw + kg * hd;
                                float s0 = 0.f, s1 = 0.f, s2 = 0.f, s3 = 0.f;
                                int64_t d = 0;
                                for (; d + 4 <= hd; d += 4) {
                                    s0 += grow[d] * vrow[d];
                                    s1 += grow[d + 1] * vrow[d + 1];
                                    s2 += grow[d + 2] * vrow[d + 2];
                                    s3 += grow[d + 3] * vrow[d + 3];
                                }
                                float acc = (s0 + s1) + (s2 + s3);
                                for (; d < hd; ++d) acc += grow[d] * vrow[d];
                                gp[i * s + j] += acc;
                            }
                        }
                    }
                    if (v.requires_grad()) {
                        const float* mat = pp + (bi * n_heads + h) * s * s;
                        float* gv = v.grad().data();
                        for (int64_t i = 0; i < s; ++i) {
                            const float* grow = g + (bi * s + i) * ow + h * hd;
                            for (int64_t j = 0; j < s; ++j) {
                                const float w = mat[i * s + j];
                                float* gvrow = gv + (bi * s + j) * vw + kg * hd;
                                for (int64_t d = 0; d < hd; ++d) gvrow[d] += w * grow[d];
                            }
                        }
                    }
                }
            }
        });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int32_t>& targets) {
    if (logits.ndim() != 2) throw std::invalid_argument("cross_entropy: logits must be [N,V]");
    const int64_t n = logits.dim(0), v = logits.dim(1);
    if (int64_t(targets.size()) != n)
        throw std::invalid_argument("cross_entropy: target count must equal row count");
    for (int32_t t : targets)
        if (t < 0 || int64_t(t) >= v) throw std::invalid_argument("cross_entropy: target out of range");

    const float* lp = logits.data();
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const float* row = lp + i * v;
        float mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < v; ++j) z += std::exp(double(row[j]) - double(mx));
        total += double(mx) + std::log(z) - double(row[targets[size_t(i)]]);
    }
    const float loss = float(total / double(n));
    if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
    return make_node({1}, {loss}, {logits}, [logits, targets, n, v](detail::TensorNode& node) mutable {
        if (!logits.requires_grad()) return;
        const float g = node.grad[0] / float(n);
        const float* lp = logits.data();
        float* gl = logits.grad().data();
        for (int64_t i = 0; i < n; ++i) {
            const float* row = lp + i * v;
            float* grow = gl + i * v;
            float mx = row[0];
            for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (int64_t j = 0; j < v; ++j) z += std::exp(double(row[j]) - double(mx));
            const float invz = float(1.0 / z);
            for (int64_t j = 0; j < v; ++j)
                grow[j] += g * std::exp(row[j] - mx) * invz;
            grow[targets[size_t(i)]] -= g;
        }
    });
}

Tensor kl_forward(const Tensor& teacher_logits, const Tensor& student_logits, float temperature) {
    check_same_shape(teacher_logits, student_logits, "kl_forward");
    if (teacher_logits.ndim() != 2)
        throw std::invalid_argument("kl_forward: logits must be [N,V]");
    if (!(temperature > 0.0f))
        throw std::invalid_argument("kl_forward: temperature must be positive");
    const int64_t n = teacher_logits.dim(0), v = teacher_logits.dim(1);

    // row-wise log-softmax of both sides at 1/T, accumulated in double;
    // log-probabilities are floored at ln(1e-12) before differencing
    const float* tp = teacher_logits.data();
    const float* sp = student_logits.data();
    std::vector<double> lpt(size_t(v)), lps(size_t(v));
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const float* trow = tp + i * v;
        const float* srow = sp + i * v;
        double tmax = trow[0], smax = srow[0];
        for (int64_t j = 1; j < v; ++j) {
            tmax = std::max(tmax, double(trow[j]));
            smax = std::max(smax, double(srow[j]));
        }
        double tz = 0.0, sz = 0.0;
        for (int64_t j = 0; j < v; ++j) {
            lpt[size_t(j)] = (double(trow[j]) - tmax) / double(temperature);
            lps[size_t(j)] = (double(srow[j]) - smax) / double(temperature);
            tz += std::exp(lpt[size_t(j)]);
            sz += std::exp(lps[size_t(j)]);
        }
        const double ltz = std::log(tz), lsz = std::log(sz);
        double row = 0.0;
        for (int64_t j = 0; j < v; ++j) {
            const double lp = std::max(lpt[size_t(j)] - ltz, kLogFloor);
            const double lq = std::max(lps[size_t(j)] - lsz, kLogFloor);
            row += std::exp(lpt[size_t(j)] - ltz) * (lp - lq);
        }
        total += std::max(row, 0.0);
    }
    const float loss = float(total / double(n));
    if (!std::isfinite(loss)) throw NumericError("kl_forward: non-finite loss");
    return make_node(
        {1}, {loss}, {teacher_logits, student_logits},
        [teacher_logits, student_logits, n, v, temperature](detail::TensorNode& node) mutable {
            // teacher side is a constant by contract
            if (!student_logits.requires_grad()) return;
            const float g = node.grad[0] / (float(n) * temperature);
            const float* tp = teacher_logits.data();
            const float* sp = student_logits.data();
            float* gs = student_logits.grad().data();
            for (int64_t i = 0; i < n; ++i) {
                const float* trow = tp + i * v;
                const float* srow = sp + i * v;
                float* grow = gs + i * v;
                float tmax = trow[0], smax = srow[0];
                for (int64_t j = 1; j < v; ++j) {
                    tmax = std::max(tmax, trow[j]);
                    smax = std::max(smax, srow[j]);
                }
                double tz = 0.0, sz = 0.0;
                for (int64_t j = 0; j < v; ++j) {
                    tz += std::exp(double(trow[j] - tmax) / double(temperature));
                    sz += std::exp(double(srow[j] - smax) / double(temperature));
                }
                for (int64_t j = 0; j < v; ++j) {
                    const float p = float(std::exp(double(trow[j] - tmax) / double(temperature)) / tz);
                    const float q = float(std::exp(double(srow[j] - smax) / double(temperature)) / sz);
                    grow[j] += g * (q - p);
                }
            }
        });
}

} // namespace prunelab
