#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cram/credibility.hpp"
#include "cram/tensor.hpp"

namespace cram {

using TokenId = std::int32_t;

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 8;
  std::size_t d_model = 128;
  std::size_t d_k = 16;
  std::size_t d_v = 16;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 192;
  std::uint64_t seed = 0;

  // Throws ConfigError on any zero or inconsistent dimension.
  void validate() const;
  std::size_t total_heads() const { return n_layers * n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

// Location of one named tensor inside the flat parameter vector.
struct ParamBlock {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return rows * cols; }
};

// Offsets of every tensor of one transformer layer.
struct LayerLayout {
  std::size_t ln1_gain, ln1_bias;
  std::size_t w_query, w_key, w_value, w_out;
  std::size_t ln2_gain, ln2_bias;
  std::size_t ff_in, ff_in_bias, ff_out, ff_out_bias;
};

struct ParamLayout {
  std::vector<ParamBlock> blocks;
  std::size_t token_embedding = 0;
  std::size_t position_embedding = 0;
  std::vector<LayerLayout> layers;
  std::size_t final_gain = 0;
  std::size_t final_bias = 0;
  std::size_t output_head = 0;
  std::size_t total = 0;

  static ParamLayout build(const ModelConfig& config);
  const ParamBlock& block(const std::string& name) const;
};

// Decoder-only transformer with pre-norm residual blocks, learned absolute
// positions, GELU feed-forward and an untied output head. All weights live in
// a single flat vector so optimizers and checkpoints treat them uniformly.
class Model {
 public:
  Model() = default;
  Model(ModelConfig config, std::vector<double> params);

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<const double> params() const { return params_; }
  std::span<double> mutable_params() { return params_; }

  ConstMatrixView tensor(std::size_t offset, std::size_t rows, std::size_t cols) const {
    return {params_.data() + offset, rows, cols};
  }
  ConstMatrixView tensor(const std::string& name) const;
  MatrixView mutable_tensor(const std::string& name);

  // FNV-1a over the raw parameter bytes and config; stable across runs.
  std::uint64_t checksum() const;
  bool all_finite() const;

 private:
  ModelConfig config_;
  ParamLayout layout_;
  std::vector<double> params_;
};

// Scaled normal initialization: std 0.02/sqrt(n_layers) for embeddings and
// projections, unit norm gains, zero biases. Deterministic in config.seed.
Model init_model(const ModelConfig& config);

struct ForwardOutput {
  Matrix logits;                            // [seq_len x vocab]
  std::map<HeadId, Matrix> attention;       // filled when capture was requested
};

// Runs the model on `tokens`. When a plan is given, every attention row of the
// planned heads is reweighted by the plan's mask before it multiplies V.
// Captured attention is the post-modification matrix.
ForwardOutput forward(const Model& model, std::span<const TokenId> tokens,
                      const ModificationPlan* plan = nullptr, bool capture = false);

// log P(answer | context) under teacher forcing. A plan's mask must cover the
// context; answer positions are treated as non-document tokens (weight 1).
double sequence_logprob(const Model& model, std::span<const TokenId> context,
                        std::span<const TokenId> answer, const ModificationPlan* plan = nullptr);

// Argmax decoding with lowest-id tie-breaking. Stops after `max_new` tokens or
// when `stop_token` is produced (the stop token is not returned).
std::vector<TokenId> greedy_decode(const Model& model, std::span<const TokenId> context,
                                   const ModificationPlan* plan, std::size_t max_new,
                                   std::optional<TokenId> stop_token = std::nullopt);

namespace detail {

// Activations retained for the backward pass.
struct LayerCache {
  Matrix x_in;            // residual stream entering the layer
  Matrix ln1_out;
  std::vector<double> ln1_mean, ln1_rstd;
  Matrix q, k, v;         // [n x heads*d]
  std::vector<Matrix> probs;  // per head [n x n]
  Matrix heads_out;       // concat(A_h V_h) [n x heads*d_v]
  Matrix x_mid;           // residual after attention
  Matrix ln2_out;
  std::vector<double> ln2_mean, ln2_rstd;
  Matrix ff_pre;          // before GELU
  Matrix ff_act;          // after GELU
};

struct ForwardCache {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> positions;
  std::vector<LayerCache> layers;
  Matrix x_final;
  Matrix lnf_out;
  std::vector<double> lnf_mean, lnf_rstd;
  std::size_t logit_start = 0;
  bool modified = false;  // a plan reweighted some head
  Matrix logits;          // rows for positions [logit_start, n)
};

// Forward pass that keeps every intermediate. Logits are produced only for
// positions at or after `logit_start`. Empty `positions` means 0..n-1.
void forward_cached(const Model& model, std::span<const TokenId> tokens,
                    const ModificationPlan* plan, std::size_t logit_start, ForwardCache& cache,
                    std::span<const std::size_t> positions = {});

// Adds d(loss)/d(params) into `grad` given d(loss)/d(logits) for the rows held
// in the cache. Plans are not differentiated through.
void backward(const Model& model, const ForwardCache& cache, ConstMatrixView dlogits,
              std::span<double> grad);

double gelu(double x);
double gelu_grad(double x);

}  // namespace detail
}  // namespace cram
