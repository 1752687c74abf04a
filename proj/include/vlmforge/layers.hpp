#pragma once

// Parameter storage and the differentiable building blocks of the toy VLM:
// affine maps, layer norm, multi-head attention, GELU feed-forward and
// pre-norm residual blocks. Every forward fills a cache that the matching
// backward consumes; backward accumulates into a Gradients buffer laid out
// like the ParameterStore.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "vlmforge/common.hpp"
#include "vlmforge/tensor.hpp"

namespace vlmforge {

enum class ParamGroup { Vision, Projector, Llm, Embed, Head };

inline constexpr ParamGroup kAllGroups[] = {ParamGroup::Vision, ParamGroup::Projector, ParamGroup::Llm,
                                            ParamGroup::Embed, ParamGroup::Head};

inline std::string group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::Vision: return "vision";
        case ParamGroup::Projector: return "projector";
        case ParamGroup::Llm: return "llm";
        case ParamGroup::Embed: return "embed";
        case ParamGroup::Head: return "head";
    }
    return "?";
}

// Accepts "llm" or "llm.*".
inline ParamGroup parse_group(std::string_view s) {
    if (s.size() > 2 && s.substr(s.size() - 2) == ".*") s.remove_suffix(2);
    for (auto g : kAllGroups)
        if (group_name(g) == s) return g;
    throw ConfigError("unknown parameter group '" + std::string(s) + "'");
}

struct ParamInfo {
    std::string name;
    ParamGroup group;
    std::size_t rows = 0;
    std::size_t cols = 0;
    bool decay = true;  // matrices decay, biases and norm gains do not

    std::size_t size() const { return rows * cols; }
};

template <class T>
class ParameterStore {
public:
    std::size_t add(std::string name, std::size_t rows, std::size_t cols, bool decay) {
        const auto dot = name.find('.');
        const ParamGroup g = parse_group(name.substr(0, dot));
        if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
        index_[name] = info_.size();
        info_.push_back({std::move(name), g, rows, cols, decay});
        values_.emplace_back(rows * cols, T(0));
        return info_.size() - 1;
    }

    std::size_t size() const { return info_.size(); }
    const ParamInfo& info(std::size_t i) const { return info_[i]; }
    const std::vector<ParamInfo>& infos() const { return info_; }
    std::vector<T>& values(std::size_t i) { return values_[i]; }
    const std::vector<T>& values(std::size_t i) const { return values_[i]; }
    T* data(std::size_t i) { return values_[i].data(); }
    const T* data(std::size_t i) const { return values_[i].data(); }

    std::size_t find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
        return it->second;
    }
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : info_) n += p.size();
        return n;
    }
    std::size_t scalar_count(ParamGroup g) const {
        std::size_t n = 0;
        for (const auto& p : info_)
            if (p.group == g) n += p.size();
        return n;
    }

    // SHA-256 over names and raw values of one group; bitwise freeze checks
    // compare these.
    Digest checksum(ParamGroup g) const {
        Sha256 h;
        for (std::size_t i = 0; i < info_.size(); ++i) {
            if (info_[i].group != g) continue;
            h.update(info_[i].name);
            h.update(values_[i].data(), values_[i].size() * sizeof(T));
        }
        return h.finish();
    }

private:
    std::vector<ParamInfo> info_;
    std::vector<std::vector<T>> values_;
    std::map<std::string, std::size_t> index_;
};

template <class T>
struct Gradients {
    std::vector<std::vector<T>> g;

    Gradients() = default;
    explicit Gradients(const ParameterStore<T>& store) {
        g.reserve(store.size());
        for (std::size_t i = 0; i < store.size(); ++i) g.emplace_back(store.info(i).size(), T(0));
    }
    T* operator[](std::size_t i) { return g[i].data(); }
    void zero() {
        for (auto& v : g) std::fill(v.begin(), v.end(), T(0));
    }
};

// ---------------------------------------------------------------------------
// Affine

struct LinearParams {
    std::size_t w = 0, b = 0;
    std::size_t in = 0, out = 0;
};

template <class T>
Mat<T> linear_forward(const ParameterStore<T>& ps, const LinearParams& p, const Mat<T>& x) {
    Mat<T> y(x.rows, p.out);
    const T* b = ps.data(p.b);
    for (std::size_t i = 0; i < x.rows; ++i) std::copy(b, b + p.out, y.row(i));
    kernels::matmul_add(x.data(), x.rows, p.in, ps.data(p.w), p.out, y.data());
    return y;
}

template <class T>
Mat<T> linear_backward(const ParameterStore<T>& ps, const LinearParams& p, const Mat<T>& x, const Mat<T>& dy,
                       Gradients<T>& grads) {
    kernels::matmul_tn_add(x.data(), x.rows, p.in, dy.data(), p.out, grads[p.w]);
    T* db = grads[p.b];
    for (std::size_t i = 0; i < dy.rows; ++i) {
        const T* r = dy.row(i);
        for (std::size_t j = 0; j < p.out; ++j) db[j] += r[j];
    }
    Mat<T> dx(x.rows, p.in);
    kernels::matmul_nt_add(dy.data(), dy.rows, p.out, ps.data(p.w), p.in, dx.data());
    return dx;
}

// ---------------------------------------------------------------------------
// Layer norm

struct NormParams {
    std::size_t g = 0, b = 0;
    std::size_t dim = 0;
};

template <class T>
struct NormCache {
    Mat<T> xhat;
    std::vector<T> rstd;
};

inline constexpr double kNormEps = 1e-5;

template <class T>
Mat<T> layer_norm_forward(const ParameterStore<T>& ps, const NormParams& p, const Mat<T>& x, NormCache<T>& cache) {
    const std::size_t n = x.rows, d = p.dim;
    Mat<T> y(n, d);
    cache.xhat = Mat<T>(n, d);
    cache.rstd.assign(n, T(0));
    const T* g = ps.data(p.g);
    const T* b = ps.data(p.b);
    for (std::size_t i = 0; i < n; ++i) {
        const T* xi = x.row(i);
        T mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += xi[j];
        mean /= T(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= T(d);
        const T rstd = T(1) / std::sqrt(var + T(kNormEps));
        cache.rstd[i] = rstd;
        T* xh = cache.xhat.row(i);
        T* yi = y.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            xh[j] = (xi[j] - mean) * rstd;
            yi[j] = xh[j] * g[j] + b[j];
        }
    }
    return y;
}

template <class T>
Mat<T> layer_norm_backward(const ParameterStore<T>& ps, const NormParams& p, const NormCache<T>& cache,
                           const Mat<T>& dy, Gradients<T>& grads) {
    const std::size_t n = dy.rows, d = p.dim;
    Mat<T> dx(n, d);
    const T* g = ps.data(p.g);
    T* dg = grads[p.g];
    T* db = grads[p.b];
    std::vector<T> dxhat(d);
    for (std::size_t i = 0; i < n; ++i) {
        const T* dyi = dy.row(i);
        const T* xh = cache.xhat.row(i);
        T mean_dxhat = 0, mean_dxhat_xhat = 0;
        for (std::size_t j = 0; j < d; ++j) {
            dg[j] += dyi[j] * xh[j];
            db[j] += dyi[j];
            dxhat[j] = dyi[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= T(d);
        mean_dxhat_xhat /= T(d);
        T* dxi = dx.row(i);
        for (std::size_t j = 0; j < d; ++j)
            dxi[j] = cache.rstd[i] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Multi-head self-attention

struct AttentionParams {
    LinearParams q, k, v, o;
    std::size_t dim = 0;
    std::size_t heads = 1;
    bool causal = true;
};

template <class T>
struct AttentionCache {
    Mat<T> x, q, k, v, o;
    std::vector<Mat<T>> probs;  // per head, n x n
};

template <class T>
Mat<T> attention_forward(const ParameterStore<T>& ps, const AttentionParams& p, const Mat<T>& x,
                         AttentionCache<T>& c) {
    const std::size_t n = x.rows, d = p.dim, h = p.heads, dh = d / h;
    const T scale = T(1) / std::sqrt(T(dh));
    c.x = x;
    c.q = linear_forward(ps, p.q, x);
    c.k = linear_forward(ps, p.k, x);
    c.v = linear_forward(ps, p.v, x);
    c.o = Mat<T>(n, d);
    c.probs.assign(h, Mat<T>(n, n));
    for (std::size_t head = 0; head < h; ++head) {
        const std::size_t off = head * dh;
        Mat<T>& P = c.probs[head];
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t jmax = p.causal ? i + 1 : n;
            const T* qi = c.q.row(i) + off;
            T* pi = P.row(i);
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < jmax; ++j) {
                const T* kj = c.k.row(j) + off;
                T s = 0;
                for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
                pi[j] = s * scale;
                mx = std::max(mx, pi[j]);
            }
            T sum = 0;
            for (std::size_t j = 0; j < jmax; ++j) {
                pi[j] = std::exp(pi[j] - mx);
                sum += pi[j];
            }
            const T inv = T(1) / sum;
            T* oi = c.o.row(i) + off;
            for (std::size_t j = 0; j < jmax; ++j) {
                pi[j] *= inv;
                const T* vj = c.v.row(j) + off;
                for (std::size_t t = 0; t < dh; ++t) oi[t] += pi[j] * vj[t];
            }
        }
    }
    return linear_forward(ps, p.o, c.o);
}

template <class T>
Mat<T> attention_backward(const ParameterStore<T>& ps, const AttentionParams& p, const AttentionCache<T>& c,
                          const Mat<T>& dy, Gradients<T>& grads) {
    const std::size_t n = c.x.rows, d = p.dim, h = p.heads, dh = d / h;
    const T scale = T(1) / std::sqrt(T(dh));
    const Mat<T> dO = linear_backward(ps, p.o, c.o, dy, grads);
    Mat<T> dq(n, d), dk(n, d), dv(n, d);
    std::vector<T> dp(n);
    for (std::size_t head = 0; head < h; ++head) {
        const std::size_t off = head * dh;
        const Mat<T>& P = c.probs[head];
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t jmax = p.causal ? i + 1 : n;
            const T* doi = dO.row(i) + off;
            const T* pi = P.row(i);
            T dot = 0;
            for (std::size_t j = 0; j < jmax; ++j) {
                const T* vj = c.v.row(j) + off;
                T s = 0;
                for (std::size_t t = 0; t < dh; ++t) s += doi[t] * vj[t];
                dp[j] = s;
                dot += s * pi[j];
                T* dvj = dv.row(j) + off;
                for (std::size_t t = 0; t < dh; ++t) dvj[t] += pi[j] * doi[t];
            }
            const T* qi = c.q.row(i) + off;
            T* dqi = dq.row(i) + off;
            for (std::size_t j = 0; j < jmax; ++j) {
                const T ds = pi[j] * (dp[j] - dot) * scale;
                if (ds == T(0)) continue;
                const T* kj = c.k.row(j) + off;
                T* dkj = dk.row(j) + off;
                for (std::size_t t = 0; t < dh; ++t) {
                    dqi[t] += ds * kj[t];
                    dkj[t] += ds * qi[t];
                }
            }
        }
    }
    Mat<T> dx = linear_backward(ps, p.q, c.x, dq, grads);
    const Mat<T> dxk = linear_backward(ps, p.k, c.x, dk, grads);
    const Mat<T> dxv = linear_backward(ps, p.v, c.x, dv, grads);
    for (std::size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dxk.v[i] + dxv.v[i];
    return dx;
}

// ---------------------------------------------------------------------------
// GELU feed-forward (tanh approximation)

template <class T>
T gelu(T x) {
    const T c = T(0.7978845608028654);  // sqrt(2/pi)
    return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
    const T c = T(0.7978845608028654);
    const T u = c * (x + T(0.044715) * x * x * x);
    const T t = std::tanh(u);
    const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

struct FfnParams {
    LinearParams up, down;
};

template <class T>
struct FfnCache {
    Mat<T> x, pre, act;
};

template <class T>
Mat<T> ffn_forward(const ParameterStore<T>& ps, const FfnParams& p, const Mat<T>& x, FfnCache<T>& c) {
    c.x = x;
    c.pre = linear_forward(ps, p.up, x);
    c.act = c.pre;
    for (auto& a : c.act.v) a = gelu(a);
    return linear_forward(ps, p.down, c.act);
}

template <class T>
Mat<T> ffn_backward(const ParameterStore<T>& ps, const FfnParams& p, const FfnCache<T>& c, const Mat<T>& dy,
                    Gradients<T>& grads) {
    Mat<T> dact = linear_backward(ps, p.down, c.act, dy, grads);
    for (std::size_t i = 0; i < dact.v.size(); ++i) dact.v[i] *= gelu_grad(c.pre.v[i]);
    return linear_backward(ps, p.up, c.x, dact, grads);
}

// ---------------------------------------------------------------------------
// Pre-norm residual block: x + attn(ln1(x)), then + ffn(ln2(.))

struct BlockParams {
    NormParams ln1, ln2;
    AttentionParams attn;
    FfnParams ffn;
};

template <class T>
struct BlockCache {
    NormCache<T> ln1, ln2;
    AttentionCache<T> attn;
    FfnCache<T> ffn;
};

template <class T>
Mat<T> block_forward(const ParameterStore<T>& ps, const BlockParams& p, const Mat<T>& x, BlockCache<T>& c) {
    Mat<T> x1 = attention_forward(ps, p.attn, layer_norm_forward(ps, p.ln1, x, c.ln1), c.attn);
    for (std::size_t i = 0; i < x1.v.size(); ++i) x1.v[i] += x.v[i];
    Mat<T> x2 = ffn_forward(ps, p.ffn, layer_norm_forward(ps, p.ln2, x1, c.ln2), c.ffn);
    for (std::size_t i = 0; i < x2.v.size(); ++i) x2.v[i] += x1.v[i];
    return x2;
}

template <class T>
Mat<T> block_backward(const ParameterStore<T>& ps, const BlockParams& p, const BlockCache<T>& c, const Mat<T>& dy,
                      Gradients<T>& grads) {
    Mat<T> dx1 = layer_norm_backward(ps, p.ln2, c.ln2, ffn_backward(ps, p.ffn, c.ffn, dy, grads), grads);
    for (std::size_t i = 0; i < dx1.v.size(); ++i) dx1.v[i] += dy.v[i];
    Mat<T> dx = layer_norm_backward(ps, p.ln1, c.ln1, attention_backward(ps, p.attn, c.attn, dx1, grads), grads);
    for (std::size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dx1.v[i];
    return dx;
}

// ---------------------------------------------------------------------------
// Registration helpers

template <class T>
LinearParams add_linear(ParameterStore<T>& ps, const std::string& prefix, std::size_t in, std::size_t out) {
    LinearParams p;
    p.in = in;
    p.out = out;
    p.w = ps.add(prefix + ".w", in, out, true);
    p.b = ps.add(prefix + ".b", 1, out, false);
    return p;
}

template <class T>
NormParams add_norm(ParameterStore<T>& ps, const std::string& prefix, std::size_t dim) {
    NormParams p;
    p.dim = dim;
    p.g = ps.add(prefix + ".g", 1, dim, false);
    p.b = ps.add(prefix + ".b", 1, dim, false);
    std::fill(ps.values(p.g).begin(), ps.values(p.g).end(), T(1));
    return p;
}

template <class T>
BlockParams add_block(ParameterStore<T>& ps, const std::string& prefix, std::size_t dim, std::size_t ffn_dim,
                      std::size_t heads, bool causal) {
    if (heads == 0 || dim % heads != 0)
        throw ConfigError(prefix + ": width " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                          " heads");
    BlockParams p;
    p.ln1 = add_norm(ps, prefix + ".ln1", dim);
    p.attn.dim = dim;
    p.attn.heads = heads;
    p.attn.causal = causal;
    p.attn.q = add_linear(ps, prefix + ".attn.q", dim, dim);
    p.attn.k = add_linear(ps, prefix + ".attn.k", dim, dim);
    p.attn.v = add_linear(ps, prefix + ".attn.v", dim, dim);
    p.attn.o = add_linear(ps, prefix + ".attn.o", dim, dim);
    p.ln2 = add_norm(ps, prefix + ".ln2", dim);
    p.ffn.up = add_linear(ps, prefix + ".ffn.up", dim, ffn_dim);
    p.ffn.down = add_linear(ps, prefix + ".ffn.down", ffn_dim, dim);
    return p;
}

}  // namespace vlmforge
