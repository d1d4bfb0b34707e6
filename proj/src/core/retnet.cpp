#include "retnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "binio.hpp"

namespace farsight::retnet {

namespace {

constexpr char kMagic[4] = {'F', 'M', 'N', 'N'};
constexpr uint16_t kVersion = 1;
constexpr double kNormEps = 1e-6;

// y = W x, W row-major [out][in]
void matvec(const float* w, const double* x, double* y, uint32_t out, uint32_t in) {
    for (uint32_t o = 0; o < out; ++o) {
        const float* row = w + size_t(o) * in;
        double acc = 0.0;
        for (uint32_t i = 0; i < in; ++i)
            acc += double(row[i]) * x[i];
        y[o] = acc;
    }
}

// dx += W^T dy
void matvec_t_add(const float* w, const double* dy, double* dx, uint32_t out, uint32_t in) {
    for (uint32_t o = 0; o < out; ++o) {
        const float* row = w + size_t(o) * in;
        const double g = dy[o];
        for (uint32_t i = 0; i < in; ++i)
            dx[i] += double(row[i]) * g;
    }
}

// dW += dy x^T
void outer_add(double* dw, const double* dy, const double* x, uint32_t out, uint32_t in) {
    for (uint32_t o = 0; o < out; ++o) {
        double* row = dw + size_t(o) * in;
        const double g = dy[o];
        for (uint32_t i = 0; i < in; ++i)
            row[i] += g * x[i];
    }
}

struct Rotary {
    std::vector<double> inv_freq; // one per in-head dimension pair

    Rotary(double base, uint32_t d_head) {
        const uint32_t pairs = d_head / 2;
        inv_freq.resize(pairs);
        for (uint32_t j = 0; j < pairs; ++j)
            inv_freq[j] = std::pow(base, -2.0 * double(j) / double(d_head));
    }

    void angles(uint64_t pos, double* cosv, double* sinv) const {
        for (size_t j = 0; j < inv_freq.size(); ++j) {
            const double theta = double(pos) * inv_freq[j];
            cosv[j] = std::cos(theta);
            sinv[j] = std::sin(theta);
        }
    }
};

// In-place rotation of every head's dimension pairs; inverse applies the
// transpose (angles negated).
void rotate(double* v, uint32_t heads, uint32_t dh, const double* cosv, const double* sinv,
            bool inverse) {
    const uint32_t pairs = dh / 2;
    for (uint32_t h = 0; h < heads; ++h) {
        double* base = v + size_t(h) * dh;
        for (uint32_t j = 0; j < pairs; ++j) {
            const double c = cosv[j];
            const double s = inverse ? -sinv[j] : sinv[j];
            const double a = base[2 * j], b = base[2 * j + 1];
            base[2 * j] = c * a - s * b;
            base[2 * j + 1] = s * a + c * b;
        }
    }
}

void check_finite(std::span<const double> xs, const char* where) {
    for (double x : xs)
        if (!std::isfinite(x))
            raise(Errc::internal, std::string("non-finite value in ") + where);
}

} // namespace

std::vector<double> RetNetConfig::resolved_gammas() const {
    if (!gammas.empty())
        return gammas;
    std::vector<double> g(n_heads);
    for (uint32_t h = 0; h < n_heads; ++h)
        g[h] = 1.0 - std::pow(2.0, -5.0 - double(h));
    return g;
}

void RetNetConfig::validate() const {
    if (n_heads < 1 || d_model < 1 || d_model % n_heads != 0)
        raise(Errc::invalid_arg, "d_model must be a positive multiple of n_heads");
    if (d_model > 64)
        raise(Errc::invalid_arg, "d_model larger than 64 is not supported");
    if (d_head() % 2 != 0)
        raise(Errc::invalid_arg, "head dimension must be even for rotary pairs");
    if (d_head() > 8)
        raise(Errc::invalid_arg, "head dimension larger than 8 is not supported");
    if (n_layers < 1)
        raise(Errc::invalid_arg, "need at least one layer");
    if (k < 1 || k > 65536)
        raise(Errc::invalid_arg, "vocabulary size must be in [1, 65536]");
    if (t < 1)
        raise(Errc::invalid_arg, "maximum window length must be positive");
    if (!(rotary_base > 0.0))
        raise(Errc::invalid_arg, "rotary base must be positive");
    if (wrap_period < 1)
        raise(Errc::invalid_arg, "wrap period must be positive");
    const auto g = resolved_gammas();
    if (g.size() != n_heads)
        raise(Errc::invalid_arg, "need one decay rate per head");
    for (size_t h = 0; h < g.size(); ++h) {
        if (!(g[h] > 0.0) || !(g[h] < 1.0))
            raise(Errc::invalid_arg, "decay rates must lie strictly inside (0, 1)");
        if (h > 0 && !(g[h] > g[h - 1]))
            raise(Errc::invalid_arg, "decay rates must strictly increase across heads");
    }
}

uint64_t param_count(const RetNetConfig& cfg) {
    cfg.validate();
    const uint64_t d = cfg.d_model, k = cfg.k;
    return 2 * k * d + uint64_t(cfg.n_layers) * (4 * d * d + d) + d * k + k;
}

RetNetParams init_params(const RetNetConfig& cfg, uint64_t seed) {
    cfg.validate();
    RetNetParams p;
    p.cfg = cfg;
    p.cfg.gammas = cfg.resolved_gammas();
    p.data.assign(param_count(cfg), 0.0f);

    std::mt19937_64 rng(seed);
    auto glorot = [&](size_t off, uint32_t rows, uint32_t cols) {
        const double limit = std::sqrt(6.0 / (double(rows) + double(cols)));
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (size_t i = 0; i < size_t(rows) * cols; ++i)
            p.data[off + i] = float(dist(rng));
    };
    glorot(p.addr_emb(), cfg.k, cfg.d_model);
    glorot(p.pc_emb(), cfg.k, cfg.d_model);
    for (uint32_t l = 0; l < cfg.n_layers; ++l) {
        glorot(p.wq(l), cfg.d_model, cfg.d_model);
        glorot(p.wk(l), cfg.d_model, cfg.d_model);
        glorot(p.wv(l), cfg.d_model, cfg.d_model);
        glorot(p.wo(l), cfg.d_model, cfg.d_model);
        for (uint32_t m = 0; m < cfg.d_model; ++m)
            p.data[p.gain(l) + m] = 1.0f;
    }
    glorot(p.w_out(), cfg.d_model, cfg.k);
    // b_out stays zero
    return p;
}

RecurrentState make_state(const RetNetConfig& cfg) {
    cfg.validate();
    RecurrentState st;
    st.s.assign(size_t(cfg.n_layers) * cfg.n_heads * cfg.d_head() * cfg.d_head(), 0.0);
    return st;
}

void RecurrentState::reset() {
    std::fill(s.begin(), s.end(), 0.0);
    next_pos = 0;
    fresh = true;
}

std::vector<double> forward_parallel(const RetNetParams& P,
                                     std::span<const vocab::TokenPair> tokens,
                                     std::span<const uint64_t> positions) {
    const RetNetConfig& cfg = P.cfg;
    const uint32_t d = cfg.d_model, H = cfg.n_heads, dh = cfg.d_head(), K = cfg.k;
    const uint32_t pairs = dh / 2;
    const size_t L = tokens.size();
    if (L == 0)
        raise(Errc::invalid_arg, "empty token window");
    if (positions.size() != L)
        raise(Errc::invalid_arg, "token and position counts differ");
    if (L > cfg.t)
        raise(Errc::invalid_arg, "window of " + std::to_string(L) +
                                     " tokens exceeds the model's maximum of " +
                                     std::to_string(cfg.t));
    for (const auto& tok : tokens)
        if (tok.addr_tok >= K || tok.pc_tok >= K)
            raise(Errc::invalid_arg, "token ordinal out of vocabulary range");

    const auto gammas = cfg.resolved_gammas();
    const double scale = 1.0 / std::sqrt(double(dh));
    const Rotary rot(cfg.rotary_base, dh);

    std::vector<double> a(L * d), p(L * d), q(L * d), k(L * d), v(L * d);
    std::vector<double> ret(L * d), x(L * d), cur(L * d);
    std::vector<double> cosv(L * pairs), sinv(L * pairs);
    for (size_t i = 0; i < L; ++i) {
        rot.angles(positions[i], &cosv[i * pairs], &sinv[i * pairs]);
        const float* ar = P.data.data() + P.addr_emb() + size_t(tokens[i].addr_tok) * d;
        const float* pr = P.data.data() + P.pc_emb() + size_t(tokens[i].pc_tok) * d;
        for (uint32_t m = 0; m < d; ++m) {
            a[i * d + m] = ar[m];
            p[i * d + m] = pr[m];
        }
    }

    for (uint32_t l = 0; l < cfg.n_layers; ++l) {
        const float* WQ = P.data.data() + P.wq(l);
        const float* WK = P.data.data() + P.wk(l);
        const float* WV = P.data.data() + P.wv(l);
        const float* WO = P.data.data() + P.wo(l);
        const float* G = P.data.data() + P.gain(l);
        const double* in_q = l == 0 ? a.data() : cur.data();
        const double* in_kv = l == 0 ? p.data() : cur.data();

        for (size_t i = 0; i < L; ++i) {
            matvec(WQ, in_q + i * d, &q[i * d], d, d);
            matvec(WK, in_kv + i * d, &k[i * d], d, d);
            matvec(WV, in_kv + i * d, &v[i * d], d, d);
            rotate(&q[i * d], H, dh, &cosv[i * pairs], &sinv[i * pairs], false);
            rotate(&k[i * d], H, dh, &cosv[i * pairs], &sinv[i * pairs], false);
        }

        std::fill(ret.begin(), ret.end(), 0.0);
        std::vector<double> pw(L);
        for (uint32_t h = 0; h < H; ++h) {
            pw[0] = 1.0;
            for (size_t n = 1; n < L; ++n)
                pw[n] = pw[n - 1] * gammas[h];
            for (size_t i = 0; i < L; ++i) {
                const double* qi = &q[i * d + h * dh];
                double* out = &ret[i * d + h * dh];
                for (size_t j = 0; j <= i; ++j) {
                    const double* kj = &k[j * d + h * dh];
                    const double* vj = &v[j * d + h * dh];
                    double dot = 0.0;
                    for (uint32_t m = 0; m < dh; ++m)
                        dot += qi[m] * kj[m];
                    const double w = scale * pw[i - j] * dot;
                    for (uint32_t m = 0; m < dh; ++m)
                        out[m] += w * vj[m];
                }
            }
        }

        for (size_t i = 0; i < L; ++i) {
            double o[64];
            matvec(WO, &ret[i * d], o, d, d);
            double* xi = &x[i * d];
            for (uint32_t m = 0; m < d; ++m) {
                const double res = l == 0 ? a[i * d + m] + p[i * d + m] : cur[i * d + m];
                xi[m] = res + o[m];
            }
            double ms = 0.0;
            for (uint32_t m = 0; m < d; ++m)
                ms += xi[m] * xi[m];
            const double r = std::sqrt(ms / d + kNormEps);
            for (uint32_t m = 0; m < d; ++m)
                cur[i * d + m] = double(G[m]) * xi[m] / r;
        }
    }

    std::vector<double> logits(L * K);
    const float* WOUT = P.data.data() + P.w_out();
    const float* B = P.data.data() + P.b_out();
    for (size_t i = 0; i < L; ++i) {
        double* li = &logits[i * K];
        for (uint32_t c = 0; c < K; ++c)
            li[c] = B[c];
        for (uint32_t m = 0; m < d; ++m) {
            const double xm = cur[i * d + m];
            const float* row = WOUT + size_t(m) * K;
            for (uint32_t c = 0; c < K; ++c)
                li[c] += double(row[c]) * xm;
        }
    }
    return logits;
}

std::vector<double> forward_recurrent(const RetNetParams& P, RecurrentState& state,
                                      vocab::TokenPair token, uint64_t pos) {
    const RetNetConfig& cfg = P.cfg;
    const uint32_t d = cfg.d_model, H = cfg.n_heads, dh = cfg.d_head(), K = cfg.k;
    if (state.s.size() != size_t(cfg.n_layers) * H * dh * dh)
        raise(Errc::config_mismatch, "recurrent state was built for a different model shape");
    // wrap_period 1 pins every position to 0 (rotation off), so consecutive
    // steps legitimately repeat position 0 there.
    if (cfg.wrap_period > 1 && !state.fresh && pos != state.next_pos)
        raise(Errc::invalid_arg,
              "phase discontinuity: expected position " + std::to_string(state.next_pos) +
                  ", got " + std::to_string(pos) + " (reset the state to start a new stream)");
    if (token.addr_tok >= K || token.pc_tok >= K)
        raise(Errc::invalid_arg, "token ordinal out of vocabulary range");

    const auto gammas = cfg.resolved_gammas();
    const double scale = 1.0 / std::sqrt(double(dh));
    const Rotary rot(cfg.rotary_base, dh);
    double cosv[32], sinv[32];
    rot.angles(pos, cosv, sinv);

    double a[64], pvec[64], q[64], k[64], v[64], ret[64], x[64], cur[64];
    {
        const float* ar = P.data.data() + P.addr_emb() + size_t(token.addr_tok) * d;
        const float* pr = P.data.data() + P.pc_emb() + size_t(token.pc_tok) * d;
        for (uint32_t m = 0; m < d; ++m) {
            a[m] = ar[m];
            pvec[m] = pr[m];
        }
    }

    for (uint32_t l = 0; l < cfg.n_layers; ++l) {
        const double* in_q = l == 0 ? a : cur;
        const double* in_kv = l == 0 ? pvec : cur;
        matvec(P.data.data() + P.wq(l), in_q, q, d, d);
        matvec(P.data.data() + P.wk(l), in_kv, k, d, d);
        matvec(P.data.data() + P.wv(l), in_kv, v, d, d);
        rotate(q, H, dh, cosv, sinv, false);
        rotate(k, H, dh, cosv, sinv, false);

        for (uint32_t h = 0; h < H; ++h) {
            double* S = state.s.data() + (size_t(l) * H + h) * dh * dh;
            const double g = gammas[h];
            const double* kh = k + h * dh;
            const double* vh = v + h * dh;
            const double* qh = q + h * dh;
            double* rh = ret + h * dh;
            for (uint32_t r = 0; r < dh; ++r)
                for (uint32_t c = 0; c < dh; ++c)
                    S[r * dh + c] = g * S[r * dh + c] + vh[r] * kh[c];
            for (uint32_t r = 0; r < dh; ++r) {
                double acc = 0.0;
                for (uint32_t c = 0; c < dh; ++c)
                    acc += S[r * dh + c] * qh[c];
                rh[r] = scale * acc;
            }
        }

        double o[64];
        matvec(P.data.data() + P.wo(l), ret, o, d, d);
        const float* G = P.data.data() + P.gain(l);
        double ms = 0.0;
        for (uint32_t m = 0; m < d; ++m) {
            const double res = l == 0 ? a[m] + pvec[m] : cur[m];
            x[m] = res + o[m];
            ms += x[m] * x[m];
        }
        const double r = std::sqrt(ms / d + kNormEps);
        for (uint32_t m = 0; m < d; ++m)
            cur[m] = double(G[m]) * x[m] / r;
    }

    std::vector<double> logits(K);
    const float* WOUT = P.data.data() + P.w_out();
    const float* B = P.data.data() + P.b_out();
    for (uint32_t c = 0; c < K; ++c)
        logits[c] = B[c];
    for (uint32_t m = 0; m < d; ++m) {
        const float* row = WOUT + size_t(m) * K;
        for (uint32_t c = 0; c < K; ++c)
            logits[c] += double(row[c]) * cur[m];
    }

    state.fresh = false;
    state.next_pos = pos + 1;
    return logits;
}

namespace {

// Per-example tape for backpropagation; buffers are reused across examples.
struct LayerTape {
    std::vector<double> qr, kr, v; // [L][d], q/k stored rotated
    std::vector<double> ret;       // [L][d], scaled retention output
    std::vector<double> x;         // [L][d], pre-norm residual sum
    std::vector<double> rms;       // [L]
    std::vector<double> y;         // [L][d], layer output
    std::vector<double> S;         // [L][H][dh][dh], state after position i

    void size_for(size_t L, uint32_t d, uint32_t H, uint32_t dh) {
        qr.assign(L * d, 0.0);
        kr.assign(L * d, 0.0);
        v.assign(L * d, 0.0);
        ret.assign(L * d, 0.0);
        x.assign(L * d, 0.0);
        rms.assign(L, 0.0);
        y.assign(L * d, 0.0);
        S.assign(L * size_t(H) * dh * dh, 0.0);
    }
};

struct Workspace {
    std::vector<LayerTape> layers;
    std::vector<double> a, p, r0;     // [L][d]; r0 = a + p (layer-0 residual)
    std::vector<double> cosv, sinv;   // [L][pairs]
    std::vector<double> logits;       // [K]
    // backward buffers
    std::vector<double> dy, dprev, dret, dqr, dkr, dv, da, dp;
    std::vector<double> scratch; // [d]
};

} // namespace

double loss_and_grads(const RetNetParams& P, const futuremap::LabeledDataset& ds,
                      std::span<const size_t> example_idx, std::vector<double>* grads,
                      size_t* correct) {
    const RetNetConfig& cfg = P.cfg;
    const uint32_t d = cfg.d_model, H = cfg.n_heads, dh = cfg.d_head(), K = cfg.k;
    const uint32_t pairs = dh / 2;
    if (ds.k != K)
        raise(Errc::config_mismatch, "dataset vocabulary k=" + std::to_string(ds.k) +
                                         " does not match model k=" + std::to_string(K));
    if (example_idx.empty())
        raise(Errc::invalid_arg, "empty batch");
    if (grads)
        grads->assign(P.total(), 0.0);
    if (correct)
        *correct = 0;

    const auto gammas = cfg.resolved_gammas();
    const double scale = 1.0 / std::sqrt(double(dh));
    const Rotary rot(cfg.rotary_base, dh);
    const double invB = 1.0 / double(example_idx.size());

    Workspace ws;
    ws.layers.resize(cfg.n_layers);
    ws.logits.resize(K);
    std::vector<double> dlogits(K);
    double loss_sum = 0.0;

    for (size_t e : example_idx) {
        if (e >= ds.examples.size())
            raise(Errc::invalid_arg, "example index out of range");
        const auto& ex = ds.examples[e];
        if (ex.end_idx >= ds.tokens.size() || ex.target >= K)
            raise(Errc::invalid_arg, "malformed training example");
        const size_t L = std::min<size_t>(cfg.t, ex.end_idx + 1);
        const size_t lo = ex.end_idx + 1 - L;

        // ---- forward ----
        ws.a.assign(L * d, 0.0);
        ws.p.assign(L * d, 0.0);
        ws.r0.assign(L * d, 0.0);
        ws.cosv.assign(L * pairs, 0.0);
        ws.sinv.assign(L * pairs, 0.0);
        for (size_t i = 0; i < L; ++i) {
            const auto& tok = ds.tokens[lo + i];
            if (tok.addr_tok >= K || tok.pc_tok >= K)
                raise(Errc::invalid_arg, "token ordinal out of vocabulary range");
            rot.angles(ds.positions[lo + i], &ws.cosv[i * pairs], &ws.sinv[i * pairs]);
            const float* ar = P.data.data() + P.addr_emb() + size_t(tok.addr_tok) * d;
            const float* pr = P.data.data() + P.pc_emb() + size_t(tok.pc_tok) * d;
            for (uint32_t m = 0; m < d; ++m) {
                ws.a[i * d + m] = ar[m];
                ws.p[i * d + m] = pr[m];
                ws.r0[i * d + m] = double(ar[m]) + double(pr[m]);
            }
        }

        for (uint32_t l = 0; l < cfg.n_layers; ++l) {
            LayerTape& t = ws.layers[l];
            t.size_for(L, d, H, dh);
            const double* in_q = l == 0 ? ws.a.data() : ws.layers[l - 1].y.data();
            const double* in_kv = l == 0 ? ws.p.data() : ws.layers[l - 1].y.data();
            const double* res = l == 0 ? ws.r0.data() : ws.layers[l - 1].y.data();
            const float* WO = P.data.data() + P.wo(l);
            const float* G = P.data.data() + P.gain(l);

            for (size_t i = 0; i < L; ++i) {
                matvec(P.data.data() + P.wq(l), in_q + i * d, &t.qr[i * d], d, d);
                matvec(P.data.data() + P.wk(l), in_kv + i * d, &t.kr[i * d], d, d);
                matvec(P.data.data() + P.wv(l), in_kv + i * d, &t.v[i * d], d, d);
                rotate(&t.qr[i * d], H, dh, &ws.cosv[i * pairs], &ws.sinv[i * pairs], false);
                rotate(&t.kr[i * d], H, dh, &ws.cosv[i * pairs], &ws.sinv[i * pairs], false);
            }

            for (uint32_t h = 0; h < H; ++h) {
                const double g = gammas[h];
                double S[64] = {0.0};
                for (size_t i = 0; i < L; ++i) {
                    const double* kh = &t.kr[i * d + h * dh];
                    const double* vh = &t.v[i * d + h * dh];
                    const double* qh = &t.qr[i * d + h * dh];
                    for (uint32_t r = 0; r < dh; ++r)
                        for (uint32_t c = 0; c < dh; ++c)
                            S[r * dh + c] = g * S[r * dh + c] + vh[r] * kh[c];
                    double* Si = &t.S[(i * H + h) * dh * dh];
                    std::copy(S, S + dh * dh, Si);
                    double* rh = &t.ret[i * d + h * dh];
                    for (uint32_t r = 0; r < dh; ++r) {
                        double acc = 0.0;
                        for (uint32_t c = 0; c < dh; ++c)
                            acc += S[r * dh + c] * qh[c];
                        rh[r] = scale * acc;
                    }
                }
            }

            for (size_t i = 0; i < L; ++i) {
                double o[64];
                matvec(WO, &t.ret[i * d], o, d, d);
                double ms = 0.0;
                for (uint32_t m = 0; m < d; ++m) {
                    t.x[i * d + m] = res[i * d + m] + o[m];
                    ms += t.x[i * d + m] * t.x[i * d + m];
                }
                t.rms[i] = std::sqrt(ms / d + kNormEps);
                for (uint32_t m = 0; m < d; ++m)
                    t.y[i * d + m] = double(G[m]) * t.x[i * d + m] / t.rms[i];
            }
            check_finite(t.y, l == 0 ? "layer 1 output" : "layer 2 output");
        }

        const double* zfin = &ws.layers[cfg.n_layers - 1].y[(L - 1) * d];
        const float* WOUT = P.data.data() + P.w_out();
        const float* B = P.data.data() + P.b_out();
        for (uint32_t c = 0; c < K; ++c)
            ws.logits[c] = B[c];
        for (uint32_t m = 0; m < d; ++m) {
            const float* row = WOUT + size_t(m) * K;
            for (uint32_t c = 0; c < K; ++c)
                ws.logits[c] += double(row[c]) * zfin[m];
        }
        check_finite(ws.logits, "output logits");

        const double maxl = *std::max_element(ws.logits.begin(), ws.logits.end());
        double sum = 0.0;
        for (uint32_t c = 0; c < K; ++c)
            sum += std::exp(ws.logits[c] - maxl);
        const double logz = maxl + std::log(sum);
        loss_sum += (logz - ws.logits[ex.target]) * invB;
        if (correct) {
            const auto best = std::max_element(ws.logits.begin(), ws.logits.end());
            if (uint32_t(best - ws.logits.begin()) == ex.target)
                ++*correct;
        }

        if (!grads)
            continue;

        // ---- backward ----
        for (uint32_t c = 0; c < K; ++c)
            dlogits[c] = (std::exp(ws.logits[c] - logz) - (c == ex.target ? 1.0 : 0.0)) * invB;

        double* gW = grads->data();
        ws.dy.assign(L * d, 0.0);
        for (uint32_t m = 0; m < d; ++m) {
            const float* row = WOUT + size_t(m) * K;
            double* gRow = gW + P.w_out() + size_t(m) * K;
            double acc = 0.0;
            for (uint32_t c = 0; c < K; ++c) {
                acc += double(row[c]) * dlogits[c];
                gRow[c] += zfin[m] * dlogits[c];
            }
            ws.dy[(L - 1) * d + m] = acc;
        }
        for (uint32_t c = 0; c < K; ++c)
            gW[P.b_out() + c] += dlogits[c];

        for (uint32_t l = cfg.n_layers; l-- > 0;) {
            LayerTape& t = ws.layers[l];
            const bool first = l == 0;
            const double* in_q = first ? ws.a.data() : ws.layers[l - 1].y.data();
            const double* in_kv = first ? ws.p.data() : ws.layers[l - 1].y.data();
            const float* WO = P.data.data() + P.wo(l);
            const float* G = P.data.data() + P.gain(l);

            ws.dprev.assign(L * d, 0.0);
            if (first) {
                ws.da.assign(L * d, 0.0);
                ws.dp.assign(L * d, 0.0);
            }
            // Layer 0 splits input gradients: the q path and the residual go
            // to the addr embedding, the k/v paths and the residual to the pc
            // embedding. Deeper layers get one shared input buffer.
            double* d_q_in = first ? ws.da.data() : ws.dprev.data();
            double* d_kv_in = first ? ws.dp.data() : ws.dprev.data();
            ws.dret.assign(L * d, 0.0);
            ws.dqr.assign(L * d, 0.0);
            ws.dkr.assign(L * d, 0.0);
            ws.dv.assign(L * d, 0.0);

            // norm + residual + output projection
            for (size_t i = 0; i < L; ++i) {
                const double* dyi = &ws.dy[i * d];
                const double* xi = &t.x[i * d];
                const double r = t.rms[i];
                double dot = 0.0;
                double dxhat[64];
                for (uint32_t m = 0; m < d; ++m) {
                    const double xhat = xi[m] / r;
                    gW[P.gain(l) + m] += dyi[m] * xhat;
                    dxhat[m] = dyi[m] * double(G[m]);
                    dot += dxhat[m] * xhat;
                }
                double dx[64];
                for (uint32_t m = 0; m < d; ++m)
                    dx[m] = (dxhat[m] - (xi[m] / r) * dot / d) / r;

                // x = residual + WO * ret
                for (uint32_t m = 0; m < d; ++m) {
                    d_q_in[i * d + m] += dx[m];
                    if (first)
                        d_kv_in[i * d + m] += dx[m];
                }
                matvec_t_add(WO, dx, &ws.dret[i * d], d, d);
                outer_add(gW + P.wo(l), dx, &t.ret[i * d], d, d);
            }

            // retention backward
            for (uint32_t h = 0; h < H; ++h) {
                const double g = gammas[h];
                for (size_t i = 0; i < L; ++i) {
                    const double* Si = &t.S[(i * H + h) * dh * dh];
                    const double* dout = &ws.dret[i * d + h * dh];
                    double* dqh = &ws.dqr[i * d + h * dh];
                    for (uint32_t c = 0; c < dh; ++c) {
                        double acc = 0.0;
                        for (uint32_t r = 0; r < dh; ++r)
                            acc += Si[r * dh + c] * dout[r];
                        dqh[c] = scale * acc;
                    }
                }
                double R[64] = {0.0};
                for (size_t j = L; j-- > 0;) {
                    const double* dout = &ws.dret[j * d + h * dh];
                    const double* qrj = &t.qr[j * d + h * dh];
                    for (uint32_t r = 0; r < dh; ++r)
                        for (uint32_t c = 0; c < dh; ++c)
                            R[r * dh + c] = g * R[r * dh + c] + dout[r] * qrj[c];
                    const double* vj = &t.v[j * d + h * dh];
                    const double* kj = &t.kr[j * d + h * dh];
                    double* dkh = &ws.dkr[j * d + h * dh];
                    double* dvh = &ws.dv[j * d + h * dh];
                    for (uint32_t c = 0; c < dh; ++c) {
                        double acc = 0.0;
                        for (uint32_t r = 0; r < dh; ++r)
                            acc += R[r * dh + c] * vj[r];
                        dkh[c] = scale * acc;
                    }
                    for (uint32_t r = 0; r < dh; ++r) {
                        double acc = 0.0;
                        for (uint32_t c = 0; c < dh; ++c)
                            acc += R[r * dh + c] * kj[c];
                        dvh[r] = scale * acc;
                    }
                }
            }

            // unrotate, then project back through W_Q/W_K/W_V
            for (size_t i = 0; i < L; ++i) {
                rotate(&ws.dqr[i * d], H, dh, &ws.cosv[i * pairs], &ws.sinv[i * pairs], true);
                rotate(&ws.dkr[i * d], H, dh, &ws.cosv[i * pairs], &ws.sinv[i * pairs], true);
                outer_add(gW + P.wq(l), &ws.dqr[i * d], in_q + i * d, d, d);
                matvec_t_add(P.data.data() + P.wq(l), &ws.dqr[i * d], d_q_in + i * d, d, d);
                outer_add(gW + P.wk(l), &ws.dkr[i * d], in_kv + i * d, d, d);
                matvec_t_add(P.data.data() + P.wk(l), &ws.dkr[i * d], d_kv_in + i * d, d, d);
                outer_add(gW + P.wv(l), &ws.dv[i * d], in_kv + i * d, d, d);
                matvec_t_add(P.data.data() + P.wv(l), &ws.dv[i * d], d_kv_in + i * d, d, d);
            }

            if (!first)
                ws.dy = ws.dprev;
        }

        for (size_t i = 0; i < L; ++i) {
            const auto& tok = ds.tokens[lo + i];
            double* ga = gW + P.addr_emb() + size_t(tok.addr_tok) * d;
            double* gp = gW + P.pc_emb() + size_t(tok.pc_tok) * d;
            for (uint32_t m = 0; m < d; ++m) {
                ga[m] += ws.da[i * d + m];
                gp[m] += ws.dp[i * d + m];
            }
        }
    }

    return loss_sum;
}

void adamw_step(RetNetParams& P, const std::vector<double>& grads, AdamState& state,
                const TrainHyper& hyper) {
    if (grads.size() != P.total())
        raise(Errc::invalid_arg, "gradient buffer does not match parameter count");
    if (state.m.empty()) {
        state.m.assign(grads.size(), 0.0);
        state.v.assign(grads.size(), 0.0);
    } else if (state.m.size() != grads.size()) {
        raise(Errc::invalid_arg, "optimizer state does not match parameter count");
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(hyper.beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(hyper.beta2, double(state.step));
    for (size_t i = 0; i < grads.size(); ++i) {
        const double g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        const double p = double(P.data[i]);
        P.data[i] =
            float(p - hyper.lr * (mhat / (std::sqrt(vhat) + hyper.eps) + hyper.weight_decay * p));
    }
}

TrainResult train(const futuremap::LabeledDataset& ds, const RetNetConfig& cfg,
                  const TrainHyper& hyper, const std::function<void(const EpochLog&)>& on_epoch) {
    cfg.validate();
    if (ds.examples.empty())
        raise(Errc::invalid_arg, "dataset has no trainable examples");
    if (ds.k != cfg.k)
        raise(Errc::config_mismatch, "dataset vocabulary k=" + std::to_string(ds.k) +
                                         " does not match model k=" + std::to_string(cfg.k));
    if (hyper.batch_size < 1)
        raise(Errc::invalid_arg, "batch size must be at least 1");
    if (!(hyper.lr > 0.0))
        raise(Errc::invalid_arg, "learning rate must be positive");
    if (hyper.epochs < 1)
        raise(Errc::invalid_arg, "need at least one epoch");

    TrainResult res{init_params(cfg, hyper.seed), {}};
    res.params.trained_lookahead = ds.lookahead;
    AdamState adam;
    std::vector<size_t> order(ds.examples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::vector<double> grads;

    for (uint32_t ep = 1; ep <= hyper.epochs; ++ep) {
        std::mt19937_64 rng(hyper.seed + 0x9e3779b97f4a7c15ull * ep);
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        size_t correct = 0;
        for (size_t off = 0; off < order.size(); off += hyper.batch_size) {
            const size_t n = std::min<size_t>(hyper.batch_size, order.size() - off);
            std::span<const size_t> batch(order.data() + off, n);
            size_t c = 0;
            const double loss = loss_and_grads(res.params, ds, batch, &grads, &c);
            adamw_step(res.params, grads, adam, hyper);
            loss_sum += loss * double(n);
            correct += c;
        }
        EpochLog el{ep, loss_sum / double(order.size()),
                    double(correct) / double(order.size())};
        res.log.push_back(el);
        if (on_epoch)
            on_epoch(el);
    }
    return res;
}

void save_model(const RetNetParams& P, const std::string& path) {
    P.cfg.validate();
    if (P.data.size() != P.total())
        raise(Errc::internal, "parameter buffer does not match configured shape");
    std::ofstream os = binio::open_out(path);
    os.write(kMagic, 4);
    binio::put<uint16_t>(os, kVersion);
    binio::put<uint32_t>(os, P.cfg.d_model);
    binio::put<uint32_t>(os, P.cfg.n_heads);
    binio::put<uint32_t>(os, P.cfg.n_layers);
    binio::put<uint32_t>(os, P.cfg.k);
    binio::put<uint32_t>(os, P.cfg.t);
    binio::put<double>(os, P.cfg.rotary_base);
    binio::put<uint64_t>(os, P.cfg.wrap_period);
    const auto g = P.cfg.resolved_gammas();
    binio::put<uint32_t>(os, uint32_t(g.size()));
    for (double gv : g)
        binio::put<double>(os, gv);
    binio::put<uint32_t>(os, P.trained_lookahead);
    binio::put<uint64_t>(os, P.data.size());
    binio::put_bytes(os, P.data.data(), P.data.size() * sizeof(float));
    if (!os)
        raise(Errc::io, "write failed: " + path);
}

RetNetParams load_model(const std::string& path) {
    std::ifstream is = binio::open_in(path);
    binio::check_magic(is, kMagic, "model");
    const auto version = binio::get<uint16_t>(is, "model version");
    if (version != kVersion)
        raise(Errc::format, "unsupported model version " + std::to_string(version));
    RetNetParams P;
    P.cfg.d_model = binio::get<uint32_t>(is, "model d_model");
    P.cfg.n_heads = binio::get<uint32_t>(is, "model n_heads");
    P.cfg.n_layers = binio::get<uint32_t>(is, "model n_layers");
    P.cfg.k = binio::get<uint32_t>(is, "model k");
    P.cfg.t = binio::get<uint32_t>(is, "model t");
    P.cfg.rotary_base = binio::get<double>(is, "model rotary base");
    P.cfg.wrap_period = binio::get<uint64_t>(is, "model wrap period");
    const auto ng = binio::get<uint32_t>(is, "model gamma count");
    if (ng > 4096)
        raise(Errc::format, "implausible gamma count in model file");
    P.cfg.gammas.resize(ng);
    for (uint32_t i = 0; i < ng; ++i)
        P.cfg.gammas[i] = binio::get<double>(is, "model gamma");
    P.trained_lookahead = binio::get<uint32_t>(is, "model lookahead");
    try {
        P.cfg.validate();
    } catch (const Error& e) {
        raise(Errc::format, std::string("model file carries an invalid config: ") + e.what());
    }
    const auto count = binio::get<uint64_t>(is, "model parameter count");
    if (count != param_count(P.cfg))
        raise(Errc::format, "model file parameter count " + std::to_string(count) +
                                " does not match its config's " +
                                std::to_string(param_count(P.cfg)));
    P.data.resize(count);
    binio::get_bytes(is, P.data.data(), count * sizeof(float), "model parameters");
    return P;
}

} // namespace farsight::retnet
