#include "cram/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <cstring>
#include <numbers>
#include <random>

#include "cram/errors.hpp"

namespace cram {
namespace {

constexpr double kLayerNormEps = 1e-5;

void layer_norm(ConstMatrixView x, const double* gain, const double* bias, MatrixView out,
                std::vector<double>& mean, std::vector<double>& rstd) {
  const std::size_t n = x.rows, d = x.cols;
  mean.resize(n);
  rstd.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xr = x.row(i);
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    mean[i] = mu;
    rstd[i] = rs;
    double* o = out.row(i);
    for (std::size_t c = 0; c < d; ++c) o[c] = (xr[c] - mu) * rs * gain[c] + bias[c];
  }
}

// dx += layer-norm backward of dy; accumulates gain/bias gradients.
void layer_norm_backward(ConstMatrixView x, const std::vector<double>& mean,
                         const std::vector<double>& rstd, const double* gain, ConstMatrixView dy,
                         MatrixView dx, double* dgain, double* dbias) {
  const std::size_t n = x.rows, d = x.cols;
  std::vector<double> xhat(d), dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xr = x.row(i);
    const double* dyr = dy.row(i);
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      xhat[c] = (xr[c] - mean[i]) * rstd[i];
      dxhat[c] = dyr[c] * gain[c];
      dgain[c] += dyr[c] * xhat[c];
      dbias[c] += dyr[c];
      mean_dxhat += dxhat[c];
      mean_dxhat_xhat += dxhat[c] * xhat[c];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    double* dxr = dx.row(i);
    for (std::size_t c = 0; c < d; ++c) {
      dxr[c] += rstd[i] * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
    }
  }
}

void add_row_bias(MatrixView m, const double* bias) {
  for (std::size_t i = 0; i < m.rows; ++i) {
    double* r = m.row(i);
    for (std::size_t c = 0; c < m.cols; ++c) r[c] += bias[c];
  }
}

void col_sum_into(ConstMatrixView m, double* out) {
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double* r = m.row(i);
    for (std::size_t c = 0; c < m.cols; ++c) out[c] += r[c];
  }
}

// Expands the plan into a per-(layer, head) flag table after validating it.
std::vector<char> planned_heads(const ModelConfig& cfg, const ModificationPlan* plan,
                                std::size_t n_tokens) {
  std::vector<char> flags(cfg.total_heads(), 0);
  if (plan == nullptr) return flags;
  for (const HeadId& h : plan->heads) {
    if (h.layer >= cfg.n_layers || h.head >= cfg.n_heads) {
      throw PlanError("plan references head (" + std::to_string(h.layer) + ", " +
                      std::to_string(h.head) + ") outside a " + std::to_string(cfg.n_layers) +
                      "x" + std::to_string(cfg.n_heads) + " model");
    }
    flags[h.layer * cfg.n_heads + h.head] = 1;
  }
  if (!plan->heads.empty() && plan->mask.size() != n_tokens) {
    throw DimensionError("plan mask length " + std::to_string(plan->mask.size()) +
                         " != token count " + std::to_string(n_tokens));
  }
  return flags;
}

void check_tokens(const ModelConfig& cfg, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw DimensionError("empty token sequence");
  if (tokens.size() > cfg.max_seq_len) {
    throw DimensionError("sequence of " + std::to_string(tokens.size()) +
                         " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
      throw DimensionError("token id " + std::to_string(t) + " outside vocabulary");
    }
  }
}

// The plan's mask covers the context; appended tokens are non-document tokens.
std::optional<ModificationPlan> extend_plan(const ModificationPlan* plan, std::size_t context_len,
                                            std::size_t total_len) {
  if (plan == nullptr) return std::nullopt;
  if (!plan->heads.empty() && plan->mask.size() != context_len) {
    throw DimensionError("plan mask length " + std::to_string(plan->mask.size()) +
                         " != context length " + std::to_string(context_len));
  }
  ModificationPlan out = *plan;
  if (!out.heads.empty()) out.mask.values.resize(total_len, 1.0);
  return out;
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

void ModelConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("model config: ") + what);
  };
  need(n_layers >= 1, "n_layers must be >= 1");
  need(n_heads >= 1, "n_heads must be >= 1");
  need(d_model >= 1, "d_model must be >= 1");
  need(d_k >= 1, "d_k must be >= 1");
  need(d_v >= 1, "d_v must be >= 1");
  need(d_ff >= 1, "d_ff must be >= 1");
  need(vocab_size >= 1, "vocab_size must be >= 1");
  need(max_seq_len >= 1, "max_seq_len must be >= 1");
}

ParamLayout ParamLayout::build(const ModelConfig& c) {
  ParamLayout l;
  auto add = [&l](std::string name, std::size_t rows, std::size_t cols) {
    const std::size_t off = l.total;
    l.blocks.push_back({std::move(name), rows, cols, off});
    l.total += rows * cols;
    return off;
  };
  l.token_embedding = add("tok_emb", c.vocab_size, c.d_model);
  l.position_embedding = add("pos_emb", c.max_seq_len, c.d_model);
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    LayerLayout ll{};
    ll.ln1_gain = add(p + "ln1.gain", 1, c.d_model);
    ll.ln1_bias = add(p + "ln1.bias", 1, c.d_model);
    ll.w_query = add(p + "attn.w_query", c.d_model, c.n_heads * c.d_k);
    ll.w_key = add(p + "attn.w_key", c.d_model, c.n_heads * c.d_k);
    ll.w_value = add(p + "attn.w_value", c.d_model, c.n_heads * c.d_v);
    ll.w_out = add(p + "attn.w_out", c.n_heads * c.d_v, c.d_model);
    ll.ln2_gain = add(p + "ln2.gain", 1, c.d_model);
    ll.ln2_bias = add(p + "ln2.bias", 1, c.d_model);
    ll.ff_in = add(p + "ff.w_in", c.d_model, c.d_ff);
    ll.ff_in_bias = add(p + "ff.b_in", 1, c.d_ff);
    ll.ff_out = add(p + "ff.w_out", c.d_ff, c.d_model);
    ll.ff_out_bias = add(p + "ff.b_out", 1, c.d_model);
    l.layers.push_back(ll);
  }
  l.final_gain = add("final_ln.gain", 1, c.d_model);
  l.final_bias = add("final_ln.bias", 1, c.d_model);
  l.output_head = add("output_head", c.d_model, c.vocab_size);
  return l;
}

const ParamBlock& ParamLayout::block(const std::string& name) const {
  for (const ParamBlock& b : blocks) {
    if (b.name == name) return b;
  }
  throw LookupError("no parameter tensor named '" + name + "'");
}

Model::Model(ModelConfig config, std::vector<double> params)
    : config_(config), layout_(ParamLayout::build(config)), params_(std::move(params)) {
  config_.validate();
  if (params_.size() != layout_.total) {
    throw DimensionError("parameter vector has " + std::to_string(params_.size()) +
                         " entries, layout expects " + std::to_string(layout_.total));
  }
}

ConstMatrixView Model::tensor(const std::string& name) const {
  const ParamBlock& b = layout_.block(name);
  return {params_.data() + b.offset, b.rows, b.cols};
}

MatrixView Model::mutable_tensor(const std::string& name) {
  const ParamBlock& b = layout_.block(name);
  return {params_.data() + b.offset, b.rows, b.cols};
}

std::uint64_t Model::checksum() const {
  std::uint64_t h = 14695981039346656037ULL;
  const std::size_t dims[] = {config_.n_layers, config_.n_heads,    config_.d_model,
                              config_.d_k,      config_.d_v,        config_.d_ff,
                              config_.vocab_size, config_.max_seq_len};
  for (std::size_t d : dims) {
    const std::uint64_t v = d;
    h = fnv1a(h, &v, sizeof v);
  }
  return fnv1a(h, params_.data(), params_.size() * sizeof(double));
}

bool Model::all_finite() const {
  return std::all_of(params_.begin(), params_.end(), [](double v) { return std::isfinite(v); });
}

Model init_model(const ModelConfig& config) {
  config.validate();
  const ParamLayout layout = ParamLayout::build(config);
  std::vector<double> params(layout.total, 0.0);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 0.02 / std::sqrt(static_cast<double>(config.n_layers)));
  for (const ParamBlock& b : layout.blocks) {
    const bool is_gain = b.name.ends_with(".gain");
    const bool is_bias = b.name.ends_with(".bias") || b.name.ends_with(".b_in") ||
                         b.name.ends_with(".b_out");
    for (std::size_t i = 0; i < b.size(); ++i) {
      double& p = params[b.offset + i];
      if (is_gain) {
        p = 1.0;
      } else if (is_bias) {
        p = 0.0;
      } else {
        p = normal(rng);
      }
    }
  }
  return Model(config, std::move(params));
}

namespace detail {

double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
  constexpr double k = 0.7978845608028654;
  const double inner = k * (x + 0.044715 * x * x * x);
  const double t = std::tanh(inner);
  const double dinner = k * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
}

void forward_cached(const Model& model, std::span<const TokenId> tokens,
                    const ModificationPlan* plan, std::size_t logit_start, ForwardCache& cache,
                    std::span<const std::size_t> positions) {
  const ModelConfig& cfg = model.config();
  const ParamLayout& lay = model.layout();
  check_tokens(cfg, tokens);
  if (!positions.empty()) {
    if (positions.size() != tokens.size()) throw DimensionError("position count != token count");
    for (std::size_t p : positions) {
      if (p >= cfg.max_seq_len) throw DimensionError("position id exceeds max_seq_len");
    }
  }
  const std::vector<char> planned = planned_heads(cfg, plan, tokens.size());

  const std::size_t n = tokens.size();
  const std::size_t d = cfg.d_model;
  const std::size_t H = cfg.n_heads, dk = cfg.d_k, dv = cfg.d_v;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  const double* P = model.params().data();

  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.positions.resize(tokens.size());
  if (positions.empty()) {
    std::iota(cache.positions.begin(), cache.positions.end(), std::size_t{0});
  } else {
    cache.positions.assign(positions.begin(), positions.end());
  }
  cache.layers.resize(cfg.n_layers);
  cache.logit_start = std::min(logit_start, n);
  cache.modified = std::any_of(planned.begin(), planned.end(), [](char f) { return f != 0; });

  Matrix x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* te = P + lay.token_embedding + static_cast<std::size_t>(tokens[i]) * d;
    const double* pe = P + lay.position_embedding + cache.positions[i] * d;
    double* xr = x.row(i);
    for (std::size_t c = 0; c < d; ++c) xr[c] = te[c] + pe[c];
  }

  for (std::size_t li = 0; li < cfg.n_layers; ++li) {
    const LayerLayout& L = lay.layers[li];
    LayerCache& lc = cache.layers[li];
    lc.x_in = x;
    lc.ln1_out.resize(n, d);
    layer_norm(x, P + L.ln1_gain, P + L.ln1_bias, lc.ln1_out, lc.ln1_mean, lc.ln1_rstd);

    lc.q.resize(n, H * dk);
    lc.k.resize(n, H * dk);
    lc.v.resize(n, H * dv);
    kernels::matmul(lc.ln1_out, model.tensor(L.w_query, d, H * dk), lc.q);
    kernels::matmul(lc.ln1_out, model.tensor(L.w_key, d, H * dk), lc.k);
    kernels::matmul(lc.ln1_out, model.tensor(L.w_value, d, H * dv), lc.v);

    lc.probs.resize(H);
    lc.heads_out.resize(n, H * dv);
    for (std::size_t h = 0; h < H; ++h) {
      Matrix& A = lc.probs[h];
      A.resize(n, n);
      const bool modify = planned[li * H + h] != 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double* qi = lc.q.row(i) + h * dk;
        double* ar = A.row(i);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const double* kj = lc.k.row(j) + h * dk;
          double s = 0.0;
          for (std::size_t c = 0; c < dk; ++c) s += qi[c] * kj[c];
          ar[j] = s * scale;
          mx = std::max(mx, ar[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          ar[j] = std::exp(ar[j] - mx);
          z += ar[j];
        }
        for (std::size_t j = 0; j <= i; ++j) ar[j] /= z;
        if (modify) modify_row_inplace(std::span<double>(ar, n), plan->mask.values);
        double* o = lc.heads_out.row(i) + h * dv;
        for (std::size_t c = 0; c < dv; ++c) o[c] = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          const double a = ar[j];
          if (a == 0.0) continue;
          const double* vj = lc.v.row(j) + h * dv;
          for (std::size_t c = 0; c < dv; ++c) o[c] += a * vj[c];
        }
      }
    }

    kernels::matmul(lc.heads_out, model.tensor(L.w_out, H * dv, d), x, /*accumulate=*/true);
    lc.x_mid = x;

    lc.ln2_out.resize(n, d);
    layer_norm(x, P + L.ln2_gain, P + L.ln2_bias, lc.ln2_out, lc.ln2_mean, lc.ln2_rstd);
    lc.ff_pre.resize(n, cfg.d_ff);
    kernels::matmul(lc.ln2_out, model.tensor(L.ff_in, d, cfg.d_ff), lc.ff_pre);
    add_row_bias(lc.ff_pre, P + L.ff_in_bias);
    lc.ff_act.resize(n, cfg.d_ff);
    for (std::size_t i = 0; i < lc.ff_pre.flat().size(); ++i) {
      lc.ff_act.flat()[i] = gelu(lc.ff_pre.flat()[i]);
    }
    kernels::matmul(lc.ff_act, model.tensor(L.ff_out, cfg.d_ff, d), x, /*accumulate=*/true);
    add_row_bias(x, P + L.ff_out_bias);
  }

  cache.x_final = std::move(x);
  cache.lnf_out.resize(n, d);
  layer_norm(cache.x_final, P + lay.final_gain, P + lay.final_bias, cache.lnf_out, cache.lnf_mean,
             cache.lnf_rstd);
  const std::size_t rows = n - cache.logit_start;
  cache.logits.resize(rows, cfg.vocab_size);
  if (rows > 0) {
    ConstMatrixView tail(cache.lnf_out.row(cache.logit_start), rows, d);
    kernels::matmul(tail, model.tensor(lay.output_head, d, cfg.vocab_size), cache.logits);
  }
}

void backward(const Model& model, const ForwardCache& cache, ConstMatrixView dlogits,
              std::span<double> grad) {
  const ModelConfig& cfg = model.config();
  const ParamLayout& lay = model.layout();
  if (grad.size() != lay.total) throw DimensionError("gradient buffer does not match layout");
  if (cache.modified) throw PlanError("backward through a modified forward pass is not supported");
  const std::size_t n = cache.tokens.size();
  const std::size_t d = cfg.d_model;
  const std::size_t H = cfg.n_heads, dk = cfg.d_k, dv = cfg.d_v, ff = cfg.d_ff;
  const std::size_t rows = n - cache.logit_start;
  if (dlogits.rows != rows || dlogits.cols != cfg.vocab_size) {
    throw DimensionError("dlogits shape does not match cached logits");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  const double* P = model.params().data();
  double* G = grad.data();
  auto gview = [G](std::size_t off, std::size_t r, std::size_t c) { return MatrixView{G + off, r, c}; };

  // Output head and final norm.
  Matrix dlnf(n, d);
  if (rows > 0) {
    ConstMatrixView tail(cache.lnf_out.row(cache.logit_start), rows, d);
    kernels::matmul_tn(tail, dlogits, gview(lay.output_head, d, cfg.vocab_size), true);
    MatrixView dtail{dlnf.row(cache.logit_start), rows, d};
    kernels::matmul_nt(dlogits, model.tensor(lay.output_head, d, cfg.vocab_size), dtail);
  }
  Matrix dx(n, d);
  layer_norm_backward(cache.x_final, cache.lnf_mean, cache.lnf_rstd, P + lay.final_gain, dlnf, dx,
                      G + lay.final_gain, G + lay.final_bias);

  Matrix d_act(n, ff), d_ln(n, d), d_heads(n, H * dv), dq(n, H * dk), dk_m(n, H * dk),
      dv_m(n, H * dv);
  std::vector<double> dA(n);
  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const LayerLayout& L = lay.layers[li];
    const LayerCache& lc = cache.layers[li];

    // Feed-forward block: x_out = x_mid + W2 gelu(W1 ln2(x_mid) + b1) + b2.
    col_sum_into(dx, G + L.ff_out_bias);
    kernels::matmul_tn(lc.ff_act, dx, gview(L.ff_out, ff, d), true);
    kernels::matmul_nt(dx, model.tensor(L.ff_out, ff, d), d_act);
    for (std::size_t i = 0; i < d_act.flat().size(); ++i) {
      d_act.flat()[i] *= gelu_grad(lc.ff_pre.flat()[i]);
    }
    col_sum_into(d_act, G + L.ff_in_bias);
    kernels::matmul_tn(lc.ln2_out, d_act, gview(L.ff_in, d, ff), true);
    kernels::matmul_nt(d_act, model.tensor(L.ff_in, d, ff), d_ln);
    layer_norm_backward(lc.x_mid, lc.ln2_mean, lc.ln2_rstd, P + L.ln2_gain, d_ln, dx,
                        G + L.ln2_gain, G + L.ln2_bias);

    // Attention block: x_mid = x_in + concat_h(A_h V_h) W_O.
    kernels::matmul_tn(lc.heads_out, dx, gview(L.w_out, H * dv, d), true);
    kernels::matmul_nt(dx, model.tensor(L.w_out, H * dv, d), d_heads);
    dq.fill(0.0);
    dk_m.fill(0.0);
    dv_m.fill(0.0);
    for (std::size_t h = 0; h < H; ++h) {
      const Matrix& A = lc.probs[h];
      for (std::size_t i = 0; i < n; ++i) {
        const double* dho = d_heads.row(i) + h * dv;
        const double* ar = A.row(i);
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* vj = lc.v.row(j) + h * dv;
          double s = 0.0;
          for (std::size_t c = 0; c < dv; ++c) s += dho[c] * vj[c];
          dA[j] = s;
          dot += s * ar[j];
          double* dvj = dv_m.row(j) + h * dv;
          for (std::size_t c = 0; c < dv; ++c) dvj[c] += ar[j] * dho[c];
        }
        const double* qi = lc.q.row(i) + h * dk;
        double* dqi = dq.row(i) + h * dk;
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = ar[j] * (dA[j] - dot) * scale;
          if (ds == 0.0) continue;
          const double* kj = lc.k.row(j) + h * dk;
          double* dkj = dk_m.row(j) + h * dk;
          for (std::size_t c = 0; c < dk; ++c) {
            dqi[c] += ds * kj[c];
            dkj[c] += ds * qi[c];
          }
        }
      }
    }
    kernels::matmul_tn(lc.ln1_out, dq, gview(L.w_query, d, H * dk), true);
    kernels::matmul_tn(lc.ln1_out, dk_m, gview(L.w_key, d, H * dk), true);
    kernels::matmul_tn(lc.ln1_out, dv_m, gview(L.w_value, d, H * dv), true);
    kernels::matmul_nt(dq, model.tensor(L.w_query, d, H * dk), d_ln);
    kernels::matmul_nt(dk_m, model.tensor(L.w_key, d, H * dk), d_ln, true);
    kernels::matmul_nt(dv_m, model.tensor(L.w_value, d, H * dv), d_ln, true);
    layer_norm_backward(lc.x_in, lc.ln1_mean, lc.ln1_rstd, P + L.ln1_gain, d_ln, dx,
                        G + L.ln1_gain, G + L.ln1_bias);
  }

  for (std::size_t i = 0; i < n; ++i) {
    double* te = G + lay.token_embedding + static_cast<std::size_t>(cache.tokens[i]) * d;
    double* pe = G + lay.position_embedding + cache.positions[i] * d;
    const double* dxr = dx.row(i);
    for (std::size_t c = 0; c < d; ++c) {
      te[c] += dxr[c];
      pe[c] += dxr[c];
    }
  }
}

}  // namespace detail

ForwardOutput forward(const Model& model, std::span<const TokenId> tokens,
                      const ModificationPlan* plan, bool capture) {
  detail::ForwardCache cache;
  detail::forward_cached(model, tokens, plan, 0, cache);
  ForwardOutput out;
  out.logits = std::move(cache.logits);
  if (capture) {
    for (std::size_t l = 0; l < cache.layers.size(); ++l) {
      for (std::size_t h = 0; h < cache.layers[l].probs.size(); ++h) {
        out.attention.emplace(HeadId{l, h}, std::move(cache.layers[l].probs[h]));
      }
    }
  }
  return out;
}

double sequence_logprob(const Model& model, std::span<const TokenId> context,
                        std::span<const TokenId> answer, const ModificationPlan* plan) {
  if (answer.empty()) throw DimensionError("sequence_logprob: empty answer");
  if (context.empty()) throw DimensionError("sequence_logprob: empty context");
  const std::size_t total = context.size() + answer.size();
  if (total > model.config().max_seq_len) {
    throw DimensionError("sequence_logprob: context + answer (" + std::to_string(total) +
                         " tokens) exceeds max_seq_len " +
                         std::to_string(model.config().max_seq_len));
  }
  std::vector<TokenId> tokens(context.begin(), context.end());
  tokens.insert(tokens.end(), answer.begin(), answer.end() - 1);
  const auto extended = extend_plan(plan, context.size(), tokens.size());

  detail::ForwardCache cache;
  detail::forward_cached(model, tokens, extended ? &*extended : nullptr, context.size() - 1, cache);
  double total_lp = 0.0;
  for (std::size_t i = 0; i < answer.size(); ++i) {
    const double* row = cache.logits.row(i);
    const std::size_t V = cache.logits.cols();
    const double mx = *std::max_element(row, row + V);
    double z = 0.0;
    for (std::size_t c = 0; c < V; ++c) z += std::exp(row[c] - mx);
    total_lp += row[static_cast<std::size_t>(answer[i])] - mx - std::log(z);
  }
  return total_lp;
}

namespace {

// Keys and values of every processed token, so each decoding step only runs
// the newest token through the network.
struct KvState {
  std::vector<std::vector<double>> k, v;  // per layer, one row per token
  std::size_t n = 0;
};

void kv_prefill(const Model& model, std::span<const TokenId> tokens, const ModificationPlan* plan,
                KvState& state, std::vector<double>& logits) {
  detail::ForwardCache cache;
  detail::forward_cached(model, tokens, plan, tokens.size() - 1, cache);
  state.k.resize(cache.layers.size());
  state.v.resize(cache.layers.size());
  for (std::size_t li = 0; li < cache.layers.size(); ++li) {
    const auto k = cache.layers[li].k.flat();
    const auto v = cache.layers[li].v.flat();
    state.k[li].assign(k.begin(), k.end());
    state.v[li].assign(v.begin(), v.end());
  }
  state.n = tokens.size();
  const auto row = cache.logits.flat();
  logits.assign(row.begin(), row.end());
}

// Appends `token` at position state.n. `plan` must already cover n + 1 tokens.
void kv_step(const Model& model, TokenId token, const ModificationPlan* plan, KvState& state,
             std::vector<double>& logits) {
  const ModelConfig& cfg = model.config();
  const ParamLayout& lay = model.layout();
  const std::size_t n = state.n + 1;
  const std::vector<char> planned = planned_heads(cfg, plan, n);
  const std::size_t d = cfg.d_model;
  const std::size_t H = cfg.n_heads, dk = cfg.d_k, dv = cfg.d_v;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  const double* P = model.params().data();
  const std::size_t i = n - 1;

  Matrix x(1, d), ln(1, d), q(1, H * dk), k(1, H * dk), v(1, H * dv), heads_out(1, H * dv);
  Matrix ff_pre(1, cfg.d_ff), ff_act(1, cfg.d_ff);
  std::vector<double> mean, rstd, ar(n);
  const double* te = P + lay.token_embedding + static_cast<std::size_t>(token) * d;
  const double* pe = P + lay.position_embedding + i * d;
  for (std::size_t c = 0; c < d; ++c) x(0, c) = te[c] + pe[c];

  for (std::size_t li = 0; li < cfg.n_layers; ++li) {
    const LayerLayout& L = lay.layers[li];
    layer_norm(x, P + L.ln1_gain, P + L.ln1_bias, ln, mean, rstd);
    kernels::matmul(ln, model.tensor(L.w_query, d, H * dk), q);
    kernels::matmul(ln, model.tensor(L.w_key, d, H * dk), k);
    kernels::matmul(ln, model.tensor(L.w_value, d, H * dv), v);
    std::vector<double>& K = state.k[li];
    std::vector<double>& V = state.v[li];
    K.insert(K.end(), k.flat().begin(), k.flat().end());
    V.insert(V.end(), v.flat().begin(), v.flat().end());

    for (std::size_t h = 0; h < H; ++h) {
      const double* qi = q.row(0) + h * dk;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        const double* kj = K.data() + j * H * dk + h * dk;
        double sc = 0.0;
        for (std::size_t c = 0; c < dk; ++c) sc += qi[c] * kj[c];
        ar[j] = sc * scale;
        mx = std::max(mx, ar[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        ar[j] = std::exp(ar[j] - mx);
        z += ar[j];
      }
      for (std::size_t j = 0; j <= i; ++j) ar[j] /= z;
      if (planned[li * H + h] != 0) modify_row_inplace(ar, plan->mask.values);
      double* o = heads_out.row(0) + h * dv;
      for (std::size_t c = 0; c < dv; ++c) o[c] = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        const double a = ar[j];
        if (a == 0.0) continue;
        const double* vj = V.data() + j * H * dv + h * dv;
        for (std::size_t c = 0; c < dv; ++c) o[c] += a * vj[c];
      }
    }
    kernels::matmul(heads_out, model.tensor(L.w_out, H * dv, d), x, /*accumulate=*/true);

    layer_norm(x, P + L.ln2_gain, P + L.ln2_bias, ln, mean, rstd);
    kernels::matmul(ln, model.tensor(L.ff_in, d, cfg.d_ff), ff_pre);
    add_row_bias(ff_pre, P + L.ff_in_bias);
    for (std::size_t c = 0; c < cfg.d_ff; ++c) ff_act(0, c) = detail::gelu(ff_pre(0, c));
    kernels::matmul(ff_act, model.tensor(L.ff_out, cfg.d_ff, d), x, /*accumulate=*/true);
    add_row_bias(x, P + L.ff_out_bias);
  }

  layer_norm(x, P + lay.final_gain, P + lay.final_bias, ln, mean, rstd);
  Matrix out(1, cfg.vocab_size);
  kernels::matmul(ln, model.tensor(lay.output_head, d, cfg.vocab_size), out);
  logits.assign(out.flat().begin(), out.flat().end());
  state.n = n;
}

}  // namespace

std::vector<TokenId> greedy_decode(const Model& model, std::span<const TokenId> context,
                                   const ModificationPlan* plan, std::size_t max_new,
                                   std::optional<TokenId> stop_token) {
  if (max_new == 0) throw ConfigError("greedy_decode: max_new must be >= 1");
  check_tokens(model.config(), context);
  std::vector<TokenId> generated;
  KvState state;
  std::vector<double> logits;
  const auto first = extend_plan(plan, context.size(), context.size());
  kv_prefill(model, context, first ? &*first : nullptr, state, logits);
  while (true) {
    TokenId best = 0;
    for (std::size_t c = 1; c < logits.size(); ++c) {
      if (logits[c] > logits[static_cast<std::size_t>(best)]) best = static_cast<TokenId>(c);
    }
    if (stop_token && best == *stop_token) break;
    generated.push_back(best);
    if (generated.size() >= max_new || state.n >= model.config().max_seq_len) break;
    const auto extended = extend_plan(plan, context.size(), state.n + 1);
    kv_step(model, best, extended ? &*extended : nullptr, state, logits);
  }
  return generated;
}

}  // namespace cram
