#include "nncfl/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace nncfl::lm {

void ModelConfig::validate() const {
    if (dim < 1 || n_layers < 1 || n_heads < 1 || vocab_size < 1 || seq_len < 1 || ffn_hidden < 1) {
        throw ArgumentError("model config: all fields must be >= 1");
    }
    if (dim % n_heads != 0) {
        throw ArgumentError("model config: dim " + std::to_string(dim) +
                            " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (head_dim() % 2 != 0) {
        throw ArgumentError("model config: head dimension must be even for rotary embeddings");
    }
}

std::size_t param_count(const ModelConfig& c) {
    const std::size_t d = c.dim;
    const std::size_t v = c.vocab_size;
    const std::size_t f = c.ffn_hidden;
    const std::size_t l = c.n_layers;
    return 2 * v * d + l * (4 * d * d + 3 * d * f + 2 * d) + d;
}

std::vector<std::pair<std::string, Shape>> weight_layout(const ModelConfig& c) {
    c.validate();
    const std::size_t d = c.dim;
    const std::size_t v = c.vocab_size;
    const std::size_t f = c.ffn_hidden;
    std::vector<std::pair<std::string, Shape>> out;
    out.emplace_back("tok_embeddings", Shape{v, d});
    for (int l = 0; l < c.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        out.emplace_back(p + "attention_norm", Shape{d});
        out.emplace_back(p + "attention.wq", Shape{d, d});
        out.emplace_back(p + "attention.wk", Shape{d, d});
        out.emplace_back(p + "attention.wv", Shape{d, d});
        out.emplace_back(p + "attention.wo", Shape{d, d});
        out.emplace_back(p + "ffn_norm", Shape{d});
        out.emplace_back(p + "feed_forward.w1", Shape{d, f});
        out.emplace_back(p + "feed_forward.w2", Shape{f, d});
        out.emplace_back(p + "feed_forward.w3", Shape{d, f});
    }
    out.emplace_back("norm", Shape{d});
    out.emplace_back("output", Shape{d, v});
    return out;
}

ModelWeights init_weights(const ModelConfig& config, Rng& rng) {
    const double proj_std = 0.02 / std::sqrt(2.0 * config.n_layers);
    ModelWeights w;
    for (auto& [name, shape] : weight_layout(config)) {
        Tensor t(name, shape);
        const bool is_norm = shape.size() == 1;
        const double stddev = name == "tok_embeddings" ? 0.02 : proj_std;
        for (auto& x : t.values()) {
            x = is_norm ? 1.0f : static_cast<float>(rng.normal(0.0, stddev));
        }
        w.push_back(std::move(t));
    }
    return w;
}

TrainBatch make_batch(std::span<const TokenSequence> sequences, std::size_t seq_len) {
    if (seq_len == 0) {
        throw ArgumentError("make_batch: seq_len must be positive");
    }
    TrainBatch b;
    b.batch = sequences.size();
    b.seq_len = seq_len;
    b.tokens.assign(b.batch * seq_len, kPadInput);
    b.targets.assign(b.batch * seq_len, kIgnoreTarget);
    for (std::size_t i = 0; i < sequences.size(); ++i) {
        const auto& s = sequences[i];
        if (s.size() < 2) {
            continue;
        }
        const std::size_t n = std::min(seq_len, s.size() - 1);
        for (std::size_t t = 0; t < n; ++t) {
            b.tokens[i * seq_len + t] = s[t];
            b.targets[i * seq_len + t] = s[t + 1];
        }
    }
    return b;
}

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kRopeTheta = 10000.0;

// y[n x out] += x[n x in] * w[in x out]
template <typename T>
void gemm_acc(const T* x, const T* w, T* y, std::size_t n, std::size_t in, std::size_t out) {
    for (std::size_t i = 0; i < n; ++i) {
        T* yr = y + i * out;
        const T* xr = x + i * in;
        for (std::size_t k = 0; k < in; ++k) {
            const T a = xr[k];
            const T* wr = w + k * out;
            for (std::size_t j = 0; j < out; ++j) {
                yr[j] += a * wr[j];
            }
        }
    }
}

// dw[in x out] += x^T * dy, x is [n x in], dy is [n x out]
template <typename T>
void gemm_tn_acc(const T* x, const T* dy, T* dw, std::size_t n, std::size_t in, std::size_t out) {
    for (std::size_t i = 0; i < n; ++i) {
        const T* xr = x + i * in;
        const T* dyr = dy + i * out;
        for (std::size_t k = 0; k < in; ++k) {
            const T a = xr[k];
            if (a == T{0}) {
                continue;
            }
            T* dwr = dw + k * out;
            for (std::size_t j = 0; j < out; ++j) {
                dwr[j] += a * dyr[j];
            }
        }
    }
}

template <typename T>
std::vector<T> transpose(const BasicTensor<T>& w) {
    const std::size_t r = w.dim(0);
    const std::size_t c = w.dim(1);
    std::vector<T> out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[j * r + i] = w[i * c + j];
        }
    }
    return out;
}

// Index of each tensor in weight_layout order.
struct Layout {
    explicit Layout(const ModelConfig& c) : layers(c.n_layers) {}
    static constexpr std::size_t kEmbed = 0;
    std::size_t layers;
    static std::size_t att_norm(std::size_t l) { return 1 + 9 * l; }
    static std::size_t wq(std::size_t l) { return 2 + 9 * l; }
    static std::size_t wk(std::size_t l) { return 3 + 9 * l; }
    static std::size_t wv(std::size_t l) { return 4 + 9 * l; }
    static std::size_t wo(std::size_t l) { return 5 + 9 * l; }
    static std::size_t ffn_norm(std::size_t l) { return 6 + 9 * l; }
    static std::size_t w1(std::size_t l) { return 7 + 9 * l; }
    static std::size_t w2(std::size_t l) { return 8 + 9 * l; }
    static std::size_t w3(std::size_t l) { return 9 + 9 * l; }
    std::size_t final_norm() const { return 1 + 9 * layers; }
    std::size_t output() const { return 2 + 9 * layers; }
};

template <typename T>
struct LayerCache {
    std::vector<T> x_in, h_att, r_att, q, k, v, probs, att, x_mid, h_ffn, r_ffn, a, b, g;
};

template <typename T>
struct Cache {
    std::vector<LayerCache<T>> layers;
    std::vector<T> x_final, h_final, r_final, logits;
};

// Forward/backward over one sequence at a time. Everything a backward pass
// needs is kept in Cache; the transposed weights are built once per batch.
template <typename T>
class Engine {
public:
    Engine(const ModelConfig& config, const NamedTensors<T>& weights)
        : c_(config), w_(weights), lay_(config), d_(config.dim), f_(config.ffn_hidden),
          v_(config.vocab_size), h_(config.n_heads), hd_(config.head_dim()) {
        config.validate();
        const auto layout = weight_layout(config);
        if (weights.count() != layout.size()) {
            throw SchemaError("model weights: expected " + std::to_string(layout.size()) +
                              " tensors, got " + std::to_string(weights.count()));
        }
        for (std::size_t i = 0; i < layout.size(); ++i) {
            if (weights[i].name() != layout[i].first || weights[i].shape() != layout[i].second) {
                throw SchemaError("model weights: tensor " + std::to_string(i) + " is '" +
                                  weights[i].name() + "', expected '" + layout[i].first + "' " +
                                  shape_to_string(layout[i].second));
            }
        }
        const std::size_t half = hd_ / 2;
        cos_.resize(static_cast<std::size_t>(c_.seq_len) * half);
        sin_.resize(cos_.size());
        for (std::size_t pos = 0; pos < static_cast<std::size_t>(c_.seq_len); ++pos) {
            for (std::size_t i = 0; i < half; ++i) {
                const double freq = std::pow(kRopeTheta, -2.0 * static_cast<double>(i) / hd_);
                const double angle = static_cast<double>(pos) * freq;
                cos_[pos * half + i] = static_cast<T>(std::cos(angle));
                sin_[pos * half + i] = static_cast<T>(std::sin(angle));
            }
        }
        cache_.layers.resize(c_.n_layers);
    }

    void prepare_backward() {
        wt_.resize(w_.count());
        for (std::size_t i = 0; i < w_.count(); ++i) {
            if (w_[i].rank() == 2 && i != Layout::kEmbed) {
                wt_[i] = transpose(w_[i]);
            }
        }
    }

    void check_tokens(const TokenId* tokens, std::size_t n) const {
        for (std::size_t t = 0; t < n; ++t) {
            if (tokens[t] < 0 || tokens[t] >= c_.vocab_size) {
                throw InputError("token id " + std::to_string(tokens[t]) + " out of range [0, " +
                                 std::to_string(c_.vocab_size) + ")");
            }
        }
    }

    // Fills cache_.logits with [n x V].
    void forward(const TokenId* tokens, std::size_t n) {
        check_tokens(tokens, n);
        std::vector<T> x(n * d_);
        const T* emb = w_[Layout::kEmbed].data();
        for (std::size_t t = 0; t < n; ++t) {
            std::copy_n(emb + static_cast<std::size_t>(tokens[t]) * d_, d_, x.data() + t * d_);
        }
        for (std::size_t l = 0; l < lay_.layers; ++l) {
            auto& lc = cache_.layers[l];
            lc.x_in = x;
            rmsnorm(lc.x_in, w_[Layout::att_norm(l)].data(), lc.h_att, lc.r_att, n);
            project(lc.h_att, Layout::wq(l), lc.q, n, d_, d_);
            project(lc.h_att, Layout::wk(l), lc.k, n, d_, d_);
            project(lc.h_att, Layout::wv(l), lc.v, n, d_, d_);
            rope(lc.q, n, false);
            rope(lc.k, n, false);
            attention(lc, n);
            lc.x_mid = lc.x_in;
            gemm_acc(lc.att.data(), w_[Layout::wo(l)].data(), lc.x_mid.data(), n, d_, d_);
            rmsnorm(lc.x_mid, w_[Layout::ffn_norm(l)].data(), lc.h_ffn, lc.r_ffn, n);
            project(lc.h_ffn, Layout::w1(l), lc.a, n, d_, f_);
            project(lc.h_ffn, Layout::w3(l), lc.b, n, d_, f_);
            lc.g.resize(n * f_);
            for (std::size_t i = 0; i < n * f_; ++i) {
                lc.g[i] = silu(lc.a[i]) * lc.b[i];
            }
            x = lc.x_mid;
            gemm_acc(lc.g.data(), w_[Layout::w2(l)].data(), x.data(), n, f_, d_);
        }
        cache_.x_final = std::move(x);
        rmsnorm(cache_.x_final, w_[lay_.final_norm()].data(), cache_.h_final, cache_.r_final, n);
        project(cache_.h_final, lay_.output(), cache_.logits, n, d_, v_);
    }

    const std::vector<T>& logits() const { return cache_.logits; }

    // dlogits: [n x V] gradient of the loss w.r.t. logits of the last forward.
    void backward(const TokenId* tokens, std::size_t n, const std::vector<T>& dlogits,
                  NamedTensors<T>& grads) {
        gemm_tn_acc(cache_.h_final.data(), dlogits.data(), grads[lay_.output()].data(), n, d_, v_);
        std::vector<T> dh(n * d_, T{0});
        gemm_acc(dlogits.data(), wt_[lay_.output()].data(), dh.data(), n, v_, d_);
        std::vector<T> dx(n * d_, T{0});
        rmsnorm_backward(cache_.x_final, cache_.r_final, w_[lay_.final_norm()].data(), dh, dx,
                         grads[lay_.final_norm()].data(), n);

        std::vector<T> dg, da, db, dq, dk, dv, datt, dh2;
        for (std::size_t li = lay_.layers; li-- > 0;) {
            auto& lc = cache_.layers[li];
            // FFN: x_out = x_mid + (silu(a) * b) W2
            gemm_tn_acc(lc.g.data(), dx.data(), grads[Layout::w2(li)].data(), n, f_, d_);
            dg.assign(n * f_, T{0});
            gemm_acc(dx.data(), wt_[Layout::w2(li)].data(), dg.data(), n, d_, f_);
            da.resize(n * f_);
            db.resize(n * f_);
            for (std::size_t i = 0; i < n * f_; ++i) {
                const T a = lc.a[i];
                const T sig = T{1} / (T{1} + std::exp(-a));
                db[i] = dg[i] * a * sig;
                da[i] = dg[i] * lc.b[i] * sig * (T{1} + a * (T{1} - sig));
            }
            gemm_tn_acc(lc.h_ffn.data(), da.data(), grads[Layout::w1(li)].data(), n, d_, f_);
            gemm_tn_acc(lc.h_ffn.data(), db.data(), grads[Layout::w3(li)].data(), n, d_, f_);
            dh2.assign(n * d_, T{0});
            gemm_acc(da.data(), wt_[Layout::w1(li)].data(), dh2.data(), n, f_, d_);
            gemm_acc(db.data(), wt_[Layout::w3(li)].data(), dh2.data(), n, f_, d_);
            std::vector<T> dx_mid = dx;
            rmsnorm_backward(lc.x_mid, lc.r_ffn, w_[Layout::ffn_norm(li)].data(), dh2, dx_mid,
                             grads[Layout::ffn_norm(li)].data(), n);

            // Attention: x_mid = x_in + att Wo
            gemm_tn_acc(lc.att.data(), dx_mid.data(), grads[Layout::wo(li)].data(), n, d_, d_);
            datt.assign(n * d_, T{0});
            gemm_acc(dx_mid.data(), wt_[Layout::wo(li)].data(), datt.data(), n, d_, d_);
            dq.assign(n * d_, T{0});
            dk.assign(n * d_, T{0});
            dv.assign(n * d_, T{0});
            attention_backward(lc, datt, dq, dk, dv, n);
            rope(dq, n, true);
            rope(dk, n, true);
            gemm_tn_acc(lc.h_att.data(), dq.data(), grads[Layout::wq(li)].data(), n, d_, d_);
            gemm_tn_acc(lc.h_att.data(), dk.data(), grads[Layout::wk(li)].data(), n, d_, d_);
            gemm_tn_acc(lc.h_att.data(), dv.data(), grads[Layout::wv(li)].data(), n, d_, d_);
            dh2.assign(n * d_, T{0});
            gemm_acc(dq.data(), wt_[Layout::wq(li)].data(), dh2.data(), n, d_, d_);
            gemm_acc(dk.data(), wt_[Layout::wk(li)].data(), dh2.data(), n, d_, d_);
            gemm_acc(dv.data(), wt_[Layout::wv(li)].data(), dh2.data(), n, d_, d_);
            dx = std::move(dx_mid);
            rmsnorm_backward(lc.x_in, lc.r_att, w_[Layout::att_norm(li)].data(), dh2, dx,
                             grads[Layout::att_norm(li)].data(), n);
        }
        T* demb = grads[Layout::kEmbed].data();
        for (std::size_t t = 0; t < n; ++t) {
            T* row = demb + static_cast<std::size_t>(tokens[t]) * d_;
            for (std::size_t j = 0; j < d_; ++j) {
                row[j] += dx[t * d_ + j];
            }
        }
    }

private:
    static T silu(T a) { return a / (T{1} + std::exp(-a)); }

    void project(const std::vector<T>& x, std::size_t wi, std::vector<T>& y, std::size_t n,
                 std::size_t in, std::size_t out) const {
        y.assign(n * out, T{0});
        gemm_acc(x.data(), w_[wi].data(), y.data(), n, in, out);
    }

    void rmsnorm(const std::vector<T>& x, const T* gain, std::vector<T>& y, std::vector<T>& r,
                 std::size_t n) const {
        y.resize(n * d_);
        r.resize(n);
        for (std::size_t t = 0; t < n; ++t) {
            const T* xr = x.data() + t * d_;
            T ss{0};
            for (std::size_t j = 0; j < d_; ++j) {
                ss += xr[j] * xr[j];
            }
            const T inv = T{1} / std::sqrt(ss / static_cast<T>(d_) + static_cast<T>(kNormEps));
            r[t] = inv;
            for (std::size_t j = 0; j < d_; ++j) {
                y[t * d_ + j] = xr[j] * inv * gain[j];
            }
        }
    }

    // dx += d(rmsnorm)/dx applied to dy; dgain += per-column contribution.
    void rmsnorm_backward(const std::vector<T>& x, const std::vector<T>& r, const T* gain,
                          const std::vector<T>& dy, std::vector<T>& dx, T* dgain,
                          std::size_t n) const {
        for (std::size_t t = 0; t < n; ++t) {
            const T* xr = x.data() + t * d_;
            const T* dyr = dy.data() + t * d_;
            const T inv = r[t];
            T dot{0};
            for (std::size_t j = 0; j < d_; ++j) {
                dgain[j] += dyr[j] * xr[j] * inv;
                dot += gain[j] * dyr[j] * xr[j];
            }
            const T coef = inv * inv * inv * dot / static_cast<T>(d_);
            T* dxr = dx.data() + t * d_;
            for (std::size_t j = 0; j < d_; ++j) {
                dxr[j] += inv * gain[j] * dyr[j] - coef * xr[j];
            }
        }
    }

    // Rotates adjacent pairs inside each head by pos*freq (or the inverse).
    void rope(std::vector<T>& x, std::size_t n, bool inverse) const {
        const std::size_t half = hd_ / 2;
        for (std::size_t t = 0; t < n; ++t) {
            const T* cs = cos_.data() + t * half;
            const T* sn = sin_.data() + t * half;
            for (std::size_t h = 0; h < h_; ++h) {
                T* p = x.data() + t * d_ + h * hd_;
                for (std::size_t i = 0; i < half; ++i) {
                    const T c = cs[i];
                    const T s = inverse ? -sn[i] : sn[i];
                    const T x0 = p[2 * i];
                    const T x1 = p[2 * i + 1];
                    p[2 * i] = x0 * c - x1 * s;
                    p[2 * i + 1] = x0 * s + x1 * c;
                }
            }
        }
    }

    void attention(LayerCache<T>& lc, std::size_t n) const {
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd_)));
        lc.probs.assign(h_ * n * n, T{0});
        lc.att.assign(n * d_, T{0});
        for (std::size_t h = 0; h < h_; ++h) {
            for (std::size_t t = 0; t < n; ++t) {
                const T* q = lc.q.data() + t * d_ + h * hd_;
                T* p = lc.probs.data() + (h * n + t) * n;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t s = 0; s <= t; ++s) {
                    const T* k = lc.k.data() + s * d_ + h * hd_;
                    T dot{0};
                    for (std::size_t i = 0; i < hd_; ++i) {
                        dot += q[i] * k[i];
                    }
                    p[s] = dot * scale;
                    mx = std::max(mx, p[s]);
                }
                T z{0};
                for (std::size_t s = 0; s <= t; ++s) {
                    p[s] = std::exp(p[s] - mx);
                    z += p[s];
                }
                const T inv = T{1} / z;
                T* o = lc.att.data() + t * d_ + h * hd_;
                for (std::size_t s = 0; s <= t; ++s) {
                    p[s] *= inv;
                    const T* v = lc.v.data() + s * d_ + h * hd_;
                    for (std::size_t i = 0; i < hd_; ++i) {
                        o[i] += p[s] * v[i];
                    }
                }
            }
        }
    }

    void attention_backward(const LayerCache<T>& lc, const std::vector<T>& datt,
                            std::vector<T>& dq, std::vector<T>& dk, std::vector<T>& dv,
                            std::size_t n) const {
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd_)));
        std::vector<T> dp(n);
        for (std::size_t h = 0; h < h_; ++h) {
            for (std::size_t t = 0; t < n; ++t) {
                const T* p = lc.probs.data() + (h * n + t) * n;
                const T* dout = datt.data() + t * d_ + h * hd_;
                T weighted{0};
                for (std::size_t s = 0; s <= t; ++s) {
                    const T* v = lc.v.data() + s * d_ + h * hd_;
                    T* dvs = dv.data() + s * d_ + h * hd_;
                    T dot{0};
                    for (std::size_t i = 0; i < hd_; ++i) {
                        dot += dout[i] * v[i];
                        dvs[i] += p[s] * dout[i];
                    }
                    dp[s] = dot;
                    weighted += p[s] * dot;
                }
                const T* q = lc.q.data() + t * d_ + h * hd_;
                T* dqt = dq.data() + t * d_ + h * hd_;
                for (std::size_t s = 0; s <= t; ++s) {
                    const T ds = p[s] * (dp[s] - weighted) * scale;
                    if (ds == T{0}) {
                        continue;
                    }
                    const T* k = lc.k.data() + s * d_ + h * hd_;
                    T* dks = dk.data() + s * d_ + h * hd_;
                    for (std::size_t i = 0; i < hd_; ++i) {
                        dqt[i] += ds * k[i];
                        dks[i] += ds * q[i];
                    }
                }
            }
        }
    }

    const ModelConfig& c_;
    const NamedTensors<T>& w_;
    Layout lay_;
    std::size_t d_, f_, v_, h_, hd_;
    std::vector<T> cos_, sin_;
    std::vector<std::vector<T>> wt_;
    Cache<T> cache_;
};

// Number of leading positions that must be computed: up to the last target
// that is not ignored.
std::size_t active_length(const TrainBatch& batch, std::size_t row) {
    const TokenId* tg = batch.targets.data() + row * batch.seq_len;
    std::size_t n = batch.seq_len;
    while (n > 0 && tg[n - 1] == kIgnoreTarget) {
        --n;
    }
    return n;
}

void check_batch(const ModelConfig& config, const TrainBatch& batch) {
    if (batch.seq_len == 0 || batch.seq_len > static_cast<std::size_t>(config.seq_len)) {
        throw InputError("batch seq_len " + std::to_string(batch.seq_len) +
                         " exceeds model seq_len " + std::to_string(config.seq_len));
    }
    if (batch.tokens.size() != batch.batch * batch.seq_len ||
        batch.targets.size() != batch.tokens.size()) {
        throw DimensionError("train batch buffers do not match batch x seq_len");
    }
    for (const TokenId t : batch.targets) {
        if (t != kIgnoreTarget && (t < 0 || t >= config.vocab_size)) {
            throw InputError("target id " + std::to_string(t) + " out of range");
        }
    }
}

template <typename T>
double row_nll(const T* z, std::size_t v, TokenId target, T* dz_or_null, T grad_scale) {
    T mx = z[0];
    for (std::size_t j = 1; j < v; ++j) {
        mx = std::max(mx, z[j]);
    }
    T sum{0};
    for (std::size_t j = 0; j < v; ++j) {
        sum += std::exp(z[j] - mx);
    }
    const T lse = mx + std::log(sum);
    if (dz_or_null != nullptr) {
        for (std::size_t j = 0; j < v; ++j) {
            dz_or_null[j] = std::exp(z[j] - lse) * grad_scale;
        }
        dz_or_null[target] -= grad_scale;
    }
    return static_cast<double>(lse - z[target]);
}

template <typename T>
double run_loss(const ModelConfig& config, const NamedTensors<T>& weights, const TrainBatch& batch,
                NamedTensors<T>* grads, std::size_t& positions) {
    check_batch(config, batch);
    positions = 0;
    for (const TokenId t : batch.targets) {
        positions += t != kIgnoreTarget ? 1 : 0;
    }
    if (positions == 0) {
        return 0.0;
    }
    Engine<T> engine(config, weights);
    if (grads != nullptr) {
        engine.prepare_backward();
    }
    const std::size_t v = config.vocab_size;
    const T scale = T{1} / static_cast<T>(positions);
    double total = 0.0;
    std::vector<T> dlogits;
    for (std::size_t row = 0; row < batch.batch; ++row) {
        const std::size_t n = active_length(batch, row);
        if (n == 0) {
            continue;
        }
        const TokenId* tokens = batch.tokens.data() + row * batch.seq_len;
        const TokenId* targets = batch.targets.data() + row * batch.seq_len;
        engine.forward(tokens, n);
        const auto& logits = engine.logits();
        if (grads != nullptr) {
            dlogits.assign(n * v, T{0});
        }
        for (std::size_t t = 0; t < n; ++t) {
            if (targets[t] == kIgnoreTarget) {
                continue;
            }
            total += row_nll(logits.data() + t * v, v, targets[t],
                             grads != nullptr ? dlogits.data() + t * v : nullptr, scale);
        }
        if (grads != nullptr) {
            engine.backward(tokens, n, dlogits, *grads);
        }
    }
    return total / static_cast<double>(positions);
}

} // namespace

template <typename T>
BasicTensor<T> forward(const ModelConfig& config, const NamedTensors<T>& weights,
                       const TrainBatch& batch) {
    check_batch(config, batch);
    Engine<T> engine(config, weights);
    const std::size_t v = config.vocab_size;
    std::vector<T> out(batch.batch * batch.seq_len * v);
    for (std::size_t row = 0; row < batch.batch; ++row) {
        engine.forward(batch.tokens.data() + row * batch.seq_len, batch.seq_len);
        std::copy(engine.logits().begin(), engine.logits().end(),
                  out.begin() + static_cast<std::ptrdiff_t>(row * batch.seq_len * v));
    }
    return BasicTensor<T>("logits", {batch.batch, batch.seq_len, v}, std::move(out));
}

template <typename T>
LossAndGrads<T> loss_and_grads(const ModelConfig& config, const NamedTensors<T>& weights,
                               const TrainBatch& batch) {
    LossAndGrads<T> out;
    out.grads = weights.zeros_like();
    out.loss = run_loss(config, weights, batch, &out.grads, out.positions);
    return out;
}

template <typename T>
double loss_only(const ModelConfig& config, const NamedTensors<T>& weights, const TrainBatch& batch) {
    std::size_t positions = 0;
    return run_loss<T>(config, weights, batch, nullptr, positions);
}

template Tensor forward<float>(const ModelConfig&, const ModelWeights&, const TrainBatch&);
template Tensor64 forward<double>(const ModelConfig&, const NamedTensors<double>&,
                                  const TrainBatch&);
template LossAndGrads<float> loss_and_grads<float>(const ModelConfig&, const ModelWeights&,
                                                   const TrainBatch&);
template LossAndGrads<double> loss_and_grads<double>(const ModelConfig&,
                                                     const NamedTensors<double>&,
                                                     const TrainBatch&);
template double loss_only<float>(const ModelConfig&, const ModelWeights&, const TrainBatch&);
template double loss_only<double>(const ModelConfig&, const NamedTensors<double>&,
                                  const TrainBatch&);

AdamState make_adam_state(const ModelWeights& weights) {
    return AdamState{weights.zeros_like(), weights.zeros_like(), 0};
}

void adamw_step(ModelWeights& weights, const ModelWeights& grads, AdamState& state,
                const AdamConfig& config) {
    require_same_layout(weights, grads, "adamw_step grads");
    require_same_layout(weights, state.m, "adamw_step state");
    for (const auto& g : grads) {
        if (!g.all_finite()) {
            throw NumericError("adamw_step: non-finite gradient in '" + g.name() + "' at step " +
                               std::to_string(state.step + 1));
        }
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(static_cast<double>(config.beta1), state.step);
    const double bc2 = 1.0 - std::pow(static_cast<double>(config.beta2), state.step);
    const float b1 = config.beta1;
    const float b2 = config.beta2;
    const auto inv_bc1 = static_cast<float>(1.0 / bc1);
    const auto inv_bc2 = static_cast<float>(1.0 / bc2);
    for (std::size_t i = 0; i < weights.count(); ++i) {
        auto w = weights[i].values();
        const auto g = grads[i].values();
        auto m = state.m[i].values();
        auto v = state.v[i].values();
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = b1 * m[j] + (1.0f - b1) * g[j];
            v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
            const float mhat = m[j] * inv_bc1;
            const float vhat = v[j] * inv_bc2;
            w[j] -= config.lr * (mhat / (std::sqrt(vhat) + config.eps) + config.weight_decay * w[j]);
        }
    }
}

void sgd_step(ModelWeights& weights, const ModelWeights& grads, float lr) {
    require_same_layout(weights, grads, "sgd_step");
    for (const auto& g : grads) {
        if (!g.all_finite()) {
            throw NumericError("sgd_step: non-finite gradient in '" + g.name() + "'");
        }
    }
    for (std::size_t i = 0; i < weights.count(); ++i) {
        auto w = weights[i].values();
        const auto g = grads[i].values();
        for (std::size_t j = 0; j < w.size(); ++j) {
            w[j] -= lr * g[j];
        }
    }
}

void MetricAccumulator::add(std::span<const float> logits, TokenId target) {
    if (target < 0 || static_cast<std::size_t>(target) >= logits.size()) {
        throw InputError("metric target out of range");
    }
    nll_sum_ += row_nll<float>(logits.data(), logits.size(), target, nullptr, 0.0f);
    correct_ += argmax(logits) == static_cast<std::size_t>(target) ? 1 : 0;
    positions_ += 1;
}

EvalResult MetricAccumulator::result() const {
    if (positions_ == 0) {
        throw ArgumentError("evaluate: no target positions");
    }
    EvalResult r;
    r.positions = positions_;
    r.mean_nll = nll_sum_ / static_cast<double>(positions_);
    r.perplexity = std::exp(r.mean_nll);
    r.top1_percent = 100.0 * static_cast<double>(correct_) / static_cast<double>(positions_);
    return r;
}

EvalResult evaluate(const ModelConfig& config, const ModelWeights& weights,
                    std::span<const TokenSequence> test_set) {
    if (test_set.empty()) {
        throw ArgumentError("evaluate: empty test set");
    }
    Engine<float> engine(config, weights);
    MetricAccumulator acc;
    const std::size_t v = config.vocab_size;
    for (const auto& seq : test_set) {
        const TrainBatch b = make_batch(std::span(&seq, 1), config.seq_len);
        check_batch(config, b);
        const std::size_t n = active_length(b, 0);
        if (n == 0) {
            continue;
        }
        engine.forward(b.tokens.data(), n);
        const auto& logits = engine.logits();
        for (std::size_t t = 0; t < n; ++t) {
            if (b.targets[t] != kIgnoreTarget) {
                acc.add(std::span<const float>(logits.data() + t * v, v), b.targets[t]);
            }
        }
    }
    return acc.result();
}

} // namespace nncfl::lm
