#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "futuremap.hpp"
#include "vocab.hpp"

namespace farsight::retnet {

// Tiny two-layer retentive network over the ordinal vocabulary. Layer 1
// cross-retains the address stream (Q) against the pc stream (K, V); layer 2
// self-retains the mixed hidden state; a linear head scores the k slots of
// the faulting page's future map.
struct RetNetConfig {
    uint32_t d_model = 8;
    uint32_t n_heads = 4;
    uint32_t n_layers = 2;
    uint32_t k = 64; // vocabulary size == future map slots
    uint32_t t = 64; // maximum window length
    double rotary_base = 10000.0;
    uint64_t wrap_period = 1ull << 32;
    std::vector<double> gammas; // per-head decay; empty selects 1 - 2^-(5+h)

    uint32_t d_head() const { return d_model / n_heads; }
    std::vector<double> resolved_gammas() const;
    void validate() const;

    friend bool operator==(const RetNetConfig&, const RetNetConfig&) = default;
};

// Scalar parameter total:
//   2*k*d (embeddings) + n_layers*(4*d*d + d) (projections + norm gain)
//   + d*k + k (output head). Default config: 1024 + 528 + 576 = 2128.
uint64_t param_count(const RetNetConfig& cfg);

// Parameters live in one flat float array in the order below; all arithmetic
// runs in double so that save/load (raw float bits) is behavior-preserving.
//   addr_emb[k][d], pc_emb[k][d],
//   per layer: wq[d][d], wk[d][d], wv[d][d], wo[d][d], gain[d],
//   w_out[d][k], b_out[k]           (matrices row-major, y = W x)
struct RetNetParams {
    RetNetConfig cfg;
    std::vector<float> data;
    uint32_t trained_lookahead = 0; // 0 until set by training

    size_t dd() const { return size_t(cfg.d_model) * cfg.d_model; }
    size_t addr_emb() const { return 0; }
    size_t pc_emb() const { return size_t(cfg.k) * cfg.d_model; }
    size_t layer_size() const { return 4 * dd() + cfg.d_model; }
    size_t layer_base(uint32_t l) const { return 2 * pc_emb() + l * layer_size(); }
    size_t wq(uint32_t l) const { return layer_base(l); }
    size_t wk(uint32_t l) const { return layer_base(l) + dd(); }
    size_t wv(uint32_t l) const { return layer_base(l) + 2 * dd(); }
    size_t wo(uint32_t l) const { return layer_base(l) + 3 * dd(); }
    size_t gain(uint32_t l) const { return layer_base(l) + 4 * dd(); }
    size_t w_out() const { return layer_base(cfg.n_layers); }
    size_t b_out() const { return w_out() + size_t(cfg.d_model) * cfg.k; }
    size_t total() const { return b_out() + cfg.k; }
};

RetNetParams init_params(const RetNetConfig& cfg, uint64_t seed);

// O(1)-size inference state: one d_head x d_head accumulator per layer and
// head, plus phase bookkeeping. Its size never depends on tokens consumed.
struct RecurrentState {
    std::vector<double> s; // [layer][head][dh][dh]
    uint64_t next_pos = 0;
    bool fresh = true;

    void reset();
    size_t bytes() const { return sizeof(*this) + s.size() * sizeof(double); }
};

RecurrentState make_state(const RetNetConfig& cfg);

// Literal O(L^2) retention sums; logits for every position, row-major [L][k].
// Rejects windows longer than cfg.t.
std::vector<double> forward_parallel(const RetNetParams& params,
                                     std::span<const vocab::TokenPair> tokens,
                                     std::span<const uint64_t> positions);

// One recurrent step: S <- gamma*S + v k^T, out = scale * S q. Returns the
// k logits for this position. Positions must advance by exactly 1 unless the
// state was just reset; wrap_period 1 pins every position to 0 and skips
// that check.
std::vector<double> forward_recurrent(const RetNetParams& params, RecurrentState& state,
                                      vocab::TokenPair token, uint64_t pos);

// Mean cross-entropy at the final window position over the chosen examples,
// with full parameter gradients via backpropagation through retention,
// rotation, normalization and embeddings. grads is resized/zeroed inside.
// correct (optional) counts argmax(logits) == target.
double loss_and_grads(const RetNetParams& params, const futuremap::LabeledDataset& ds,
                      std::span<const size_t> example_idx, std::vector<double>* grads,
                      size_t* correct = nullptr);

struct TrainHyper {
    uint32_t batch_size = 1024;
    double lr = 0.003239;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    uint32_t epochs = 10;
    uint64_t seed = 1;
};

struct AdamState {
    std::vector<double> m, v;
    uint64_t step = 0;
};

// Decoupled-weight-decay Adam with bias correction; increments state.step.
void adamw_step(RetNetParams& params, const std::vector<double>& grads, AdamState& state,
                const TrainHyper& hyper);

struct EpochLog {
    uint32_t epoch = 0;
    double loss = 0.0;
    double accuracy = 0.0;
};

struct TrainResult {
    RetNetParams params;
    std::vector<EpochLog> log;
};

// Shuffled mini-batch training (last partial batch allowed), deterministic
// given hyper.seed. Loss/accuracy per epoch are running means over batches,
// each measured before that batch's update.
TrainResult train(const futuremap::LabeledDataset& ds, const RetNetConfig& cfg,
                  const TrainHyper& hyper,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

// Model file: magic "FMNN", config block, then raw little-endian floats in
// the layout order above. Round-trips bit-exactly.
void save_model(const RetNetParams& params, const std::string& path);
RetNetParams load_model(const std::string& path);

} // namespace farsight::retnet
