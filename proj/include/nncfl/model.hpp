#pragma once

#include "nncfl/named_tensors.hpp"
#include "nncfl/rng.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace nncfl::lm {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

// Input id used to fill short rows; its positions carry kIgnoreTarget.
inline constexpr TokenId kPadInput = 0;
inline constexpr TokenId kIgnoreTarget = -1;

struct ModelConfig {
    int dim = 64;
    int n_layers = 4;
    int n_heads = 4;
    int vocab_size = 64;
    int seq_len = 128;
    int ffn_hidden = 172;

    int head_dim() const { return dim / n_heads; }

    // Throws ArgumentError when a field is < 1, dim is not divisible by
    // n_heads, or the head dimension is odd (rotary pairs need even dims).
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Closed form: 2*V*D + L*(4*D^2 + 3*D*F + 2*D) + D.
std::size_t param_count(const ModelConfig& config);

// Tensor names and shapes in checkpoint/codec order:
//   tok_embeddings [V x D]
//   per layer l: layers.l.attention_norm [D], layers.l.attention.{wq,wk,wv,wo} [D x D],
//                layers.l.ffn_norm [D], layers.l.feed_forward.w1 [D x F],
//                layers.l.feed_forward.w2 [F x D], layers.l.feed_forward.w3 [D x F]
//   norm [D], output [D x V]
std::vector<std::pair<std::string, Shape>> weight_layout(const ModelConfig& config);

// Embeddings ~ N(0, 0.02), projections ~ N(0, 0.02/sqrt(2*n_layers)), norm gains 1.
ModelWeights init_weights(const ModelConfig& config, Rng& rng);

// Token rows of width seq_len; targets are the inputs shifted by one and
// kIgnoreTarget where there is nothing to predict.
struct TrainBatch {
    std::size_t batch = 0;
    std::size_t seq_len = 0;
    std::vector<TokenId> tokens;
    std::vector<TokenId> targets;
};

// Each sequence is [BOS, ..., EOS]; input = seq[0..n-2], target = seq[1..n-1],
// truncated to seq_len and padded.
TrainBatch make_batch(std::span<const TokenSequence> sequences, std::size_t seq_len);

template <typename T>
BasicTensor<T> forward(const ModelConfig& config, const NamedTensors<T>& weights,
                       const TrainBatch& batch);

template <typename T>
struct LossAndGrads {
    double loss = 0.0;          // mean NLL over non-ignored targets
    std::size_t positions = 0;  // number of non-ignored targets
    NamedTensors<T> grads;
};

template <typename T>
LossAndGrads<T> loss_and_grads(const ModelConfig& config, const NamedTensors<T>& weights,
                               const TrainBatch& batch);

// Forward-only mean NLL; same value loss_and_grads reports.
template <typename T>
double loss_only(const ModelConfig& config, const NamedTensors<T>& weights, const TrainBatch& batch);

struct AdamConfig {
    float lr = 3e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.95f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;
};

struct AdamState {
    ModelWeights m;
    ModelWeights v;
    std::int64_t step = 0;
};

AdamState make_adam_state(const ModelWeights& weights);

// Decoupled weight decay Adam. Throws NumericError on a non-finite gradient,
// leaving weights and state untouched.
void adamw_step(ModelWeights& weights, const ModelWeights& grads, AdamState& state,
                const AdamConfig& config);

// Plain w -= lr * g.
void sgd_step(ModelWeights& weights, const ModelWeights& grads, float lr);

struct EvalResult {
    double top1_percent = 0.0;
    double perplexity = 0.0;
    double mean_nll = 0.0;
    std::size_t positions = 0;
};

// Running top-1 / NLL tally over logit rows.
class MetricAccumulator {
public:
    void add(std::span<const float> logits, TokenId target);
    EvalResult result() const;

private:
    double nll_sum_ = 0.0;
    std::size_t correct_ = 0;
    std::size_t positions_ = 0;
};

EvalResult evaluate(const ModelConfig& config, const ModelWeights& weights,
                    std::span<const TokenSequence> test_set);

} // namespace nncfl::lm
