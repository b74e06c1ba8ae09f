#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "budgetlab/decoder.hpp"
#include "budgetlab/rng.hpp"

namespace budgetlab {

// ---------------------------------------------------------------------------
// Tiny decoder-only transformer with exact hand-derived gradients.
//
// Pre-norm blocks, learned positional embeddings, multi-head causal
// attention (no projection biases), GELU MLP with biases, untied unbiased
// output head. All math in double; softmax in log domain with max
// subtraction.
//
// There is exactly one forward routine: a per-position loop over a KV cache
// (IncrementalDecoder). Whole-sequence forward, token-by-token decoding,
// sequence scoring and the training pass all run through it, so their
// outputs agree bit for bit by construction.
// ---------------------------------------------------------------------------

struct ModelConfig {
  int vocab_size = 64;
  int context_length = 192;
  int num_layers = 2;
  int num_heads = 4;
  int embed_dim = 32;
  int mlp_dim = 128;
  std::uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
  bool same_architecture(const ModelConfig& other) const;
};

struct TensorInfo {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// Fixed tensor order: tok_embed, pos_embed, then per layer
// {ln1_gain, ln1_bias, attn_wq, attn_wk, attn_wv, attn_wo, ln2_gain,
//  ln2_bias, mlp_w_in, mlp_b_in, mlp_w_out, mlp_b_out}, then ln_f_gain,
// ln_f_bias, head_w. Matrices are row-major [out, in].
std::vector<TensorInfo> tensor_layout(const ModelConfig& config);
std::size_t parameter_count(const ModelConfig& config);

struct Parameters {
  ModelConfig config;
  std::vector<double> data;  // all tensors concatenated in layout order

  bool all_finite() const;
};

// Deterministic in config.seed; weights N(0, 0.08), norm gains 1, biases 0.
Parameters init_params(const ModelConfig& config);

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

// Per-position next-token log-probability table, row-major [len, vocab].
// Row i is conditioned on tokens[0..i].
struct LogProbTable {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  std::span<const double> row(int i) const {
    return {data.data() + static_cast<std::size_t>(i) * cols,
            static_cast<std::size_t>(cols)};
  }
};

LogProbTable forward(const Parameters& params, std::span<const int> tokens);

// Stateful single-sequence decode: feed() advances one position, row() is
// the next-token log-distribution after everything fed so far.
class IncrementalDecoder {
 public:
  struct Impl;  // internal forward state; training reuses it directly

  explicit IncrementalDecoder(const Parameters& params);
  ~IncrementalDecoder();
  IncrementalDecoder(IncrementalDecoder&&) noexcept;
  IncrementalDecoder& operator=(IncrementalDecoder&&) noexcept;

  void reset();
  void feed(int token);  // throws ContextOverflowError at context_length
  int length() const;
  std::span<const double> row() const;  // valid after >= 1 feed

 private:
  std::unique_ptr<Impl> impl_;
};

// Samples from a temperature-scaled log-probability row. Temperatures below
// 1e-8 short-circuit to argmax with lowest-token-id tie-breaking (the T -> 0
// limit); non-positive temperature throws std::invalid_argument.
int sample_next(std::span<const double> logprob_row, double temperature,
                Rng& rng);

// TokenPolicy adapter used by the decode strategies.
class ModelPolicy : public TokenPolicy {
 public:
  ModelPolicy(const Parameters& params, double temperature);
  void begin(std::span<const int> context) override;
  int sample(Rng& rng) override;
  void push(int token) override;

 private:
  IncrementalDecoder decoder_;
  double temperature_;
};

// ---------------------------------------------------------------------------
// Scoring and training
// ---------------------------------------------------------------------------

struct SequenceLogProb {
  double total = 0.0;
  std::vector<double> per_token;  // zero at mask-false positions
};

// Sum of continuation-token log-probabilities where mask is true. The
// context conditions the first continuation token and must be non-empty.
SequenceLogProb sequence_logprob(const Parameters& params,
                                 std::span<const int> context,
                                 std::span<const int> continuation,
                                 std::span<const std::uint8_t> mask);

struct SequenceBatchItem {
  std::vector<int> context;
  std::vector<int> continuation;
  std::vector<std::uint8_t> mask;  // continuation-aligned
  std::vector<double> weights;     // continuation-aligned
};

struct LossAndGradients {
  double loss = 0.0;
  std::vector<double> grads;  // same layout as Parameters::data
};

// loss = -(1/B) sum_b sum_i mask * weight * logprob. Gradients are exact
// for this loss. Per-item gradients are computed independently (parallel
// across items) and folded in item order.
LossAndGradients loss_and_gradients(const Parameters& params,
                                    std::span<const SequenceBatchItem> batch);

// ---------------------------------------------------------------------------
// Checkpoint file: magic, format version, config, named tensors in layout
// order with explicit dims, little-endian float64 payload, trailing
// checksum. Loading validates magic, version, shapes and checksum.
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const Parameters& params);
Parameters load_checkpoint(const std::string& path);  // throws CheckpointError

}  // namespace budgetlab
