#include "budgetlab/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "budgetlab/errors.hpp"
#include "budgetlab/util.hpp"

namespace budgetlab {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInitStd = 0.08;
constexpr double kArgmaxTemperature = 1e-8;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  const double phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  return phi + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

// y = W x, W row-major [out, in]
void matvec(const double* w, const double* x, double* y, int out, int in) {
  for (int o = 0; o < out; ++o) {
    const double* row = w + static_cast<std::size_t>(o) * in;
    double acc = 0.0;
    for (int i = 0; i < in; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
}

// dx += W^T dy
void matvec_t_acc(const double* w, const double* dy, double* dx, int out,
                  int in) {
  for (int o = 0; o < out; ++o) {
    const double* row = w + static_cast<std::size_t>(o) * in;
    const double g = dy[o];
    if (g == 0.0) continue;
    for (int i = 0; i < in; ++i) dx[i] += row[i] * g;
  }
}

// dW += dy (outer) x
void outer_acc(double* dw, const double* dy, const double* x, int out, int in) {
  for (int o = 0; o < out; ++o) {
    double* row = dw + static_cast<std::size_t>(o) * in;
    const double g = dy[o];
    if (g == 0.0) continue;
    for (int i = 0; i < in; ++i) row[i] += g * x[i];
  }
}

struct LnStats {
  double mean = 0.0;
  double rstd = 0.0;
};

LnStats layer_norm(const double* x, const double* gain, const double* bias,
                   double* y, int n) {
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += x[i];
  mean /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = x[i] - mean;
    var += d * d;
  }
  var /= n;
  const double rstd = 1.0 / std::sqrt(var + kLnEps);
  for (int i = 0; i < n; ++i)
    y[i] = gain[i] * ((x[i] - mean) * rstd) + bias[i];
  return {mean, rstd};
}

// Backward through layer_norm; accumulates dgain/dbias, writes dx (+=).
void layer_norm_backward(const double* x, LnStats st, const double* gain,
                         const double* dy, double* dx_acc, double* dgain,
                         double* dbias, int n) {
  double sum1 = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double xhat = (x[i] - st.mean) * st.rstd;
    const double dxh = dy[i] * gain[i];
    sum1 += dxh;
    sum2 += dxh * xhat;
    dgain[i] += dy[i] * xhat;
    dbias[i] += dy[i];
  }
  sum1 /= n;
  sum2 /= n;
  for (int i = 0; i < n; ++i) {
    const double xhat = (x[i] - st.mean) * st.rstd;
    const double dxh = dy[i] * gain[i];
    dx_acc[i] += st.rstd * (dxh - sum1 - xhat * sum2);
  }
}

struct LayerOffsets {
  std::size_t ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w_in, b_in, w_out,
      b_out;
};

struct Offsets {
  std::size_t tok_emb, pos_emb;
  std::vector<LayerOffsets> layers;
  std::size_t lnf_g, lnf_b, head;
  std::size_t total;
};

Offsets make_offsets(const ModelConfig& c) {
  Offsets o;
  std::size_t at = 0;
  auto take = [&at](std::size_t n) {
    const std::size_t r = at;
    at += n;
    return r;
  };
  const auto d = static_cast<std::size_t>(c.embed_dim);
  const auto m = static_cast<std::size_t>(c.mlp_dim);
  o.tok_emb = take(static_cast<std::size_t>(c.vocab_size) * d);
  o.pos_emb = take(static_cast<std::size_t>(c.context_length) * d);
  o.layers.resize(static_cast<std::size_t>(c.num_layers));
  for (auto& l : o.layers) {
    l.ln1_g = take(d);
    l.ln1_b = take(d);
    l.wq = take(d * d);
    l.wk = take(d * d);
    l.wv = take(d * d);
    l.wo = take(d * d);
    l.ln2_g = take(d);
    l.ln2_b = take(d);
    l.w_in = take(m * d);
    l.b_in = take(m);
    l.w_out = take(d * m);
    l.b_out = take(d);
  }
  o.lnf_g = take(d);
  o.lnf_b = take(d);
  o.head = take(static_cast<std::size_t>(c.vocab_size) * d);
  o.total = at;
  return o;
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("model: vocab_size < 2");
  if (context_length < 1)
    throw std::invalid_argument("model: context_length < 1");
  if (num_layers < 1) throw std::invalid_argument("model: num_layers < 1");
  if (num_heads < 1) throw std::invalid_argument("model: num_heads < 1");
  if (embed_dim < 1) throw std::invalid_argument("model: embed_dim < 1");
  if (mlp_dim < 1) throw std::invalid_argument("model: mlp_dim < 1");
  if (embed_dim % num_heads != 0)
    throw std::invalid_argument("model: embed_dim not divisible by num_heads");
}

bool ModelConfig::same_architecture(const ModelConfig& o) const {
  return vocab_size == o.vocab_size && context_length == o.context_length &&
         num_layers == o.num_layers && num_heads == o.num_heads &&
         embed_dim == o.embed_dim && mlp_dim == o.mlp_dim;
}

std::vector<TensorInfo> tensor_layout(const ModelConfig& c) {
  c.validate();
  std::vector<TensorInfo> out;
  std::size_t at = 0;
  auto add = [&](const std::string& name, std::vector<int> shape) {
    TensorInfo t;
    t.name = name;
    t.shape = std::move(shape);
    t.offset = at;
    t.size = 1;
    for (int dim : t.shape) t.size *= static_cast<std::size_t>(dim);
    at += t.size;
    out.push_back(std::move(t));
  };
  add("tok_embed", {c.vocab_size, c.embed_dim});
  add("pos_embed", {c.context_length, c.embed_dim});
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    add(p + "ln1_gain", {c.embed_dim});
    add(p + "ln1_bias", {c.embed_dim});
    add(p + "attn_wq", {c.embed_dim, c.embed_dim});
    add(p + "attn_wk", {c.embed_dim, c.embed_dim});
    add(p + "attn_wv", {c.embed_dim, c.embed_dim});
    add(p + "attn_wo", {c.embed_dim, c.embed_dim});
    add(p + "ln2_gain", {c.embed_dim});
    add(p + "ln2_bias", {c.embed_dim});
    add(p + "mlp_w_in", {c.mlp_dim, c.embed_dim});
    add(p + "mlp_b_in", {c.mlp_dim});
    add(p + "mlp_w_out", {c.embed_dim, c.mlp_dim});
    add(p + "mlp_b_out", {c.embed_dim});
  }
  add("ln_f_gain", {c.embed_dim});
  add("ln_f_bias", {c.embed_dim});
  add("head_w", {c.vocab_size, c.embed_dim});
  return out;
}

std::size_t parameter_count(const ModelConfig& c) {
  return make_offsets(c).total;
}

bool Parameters::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

Parameters init_params(const ModelConfig& config) {
  config.validate();
  Parameters p;
  p.config = config;
  const auto layout = tensor_layout(config);
  p.data.assign(parameter_count(config), 0.0);
  Rng rng = Rng::derive(config.seed, "init");
  for (const TensorInfo& t : layout) {
    const bool is_gain = t.name.find("gain") != std::string::npos;
    const bool is_bias = t.name.find("bias") != std::string::npos ||
                         t.name.find("b_in") != std::string::npos ||
                         t.name.find("b_out") != std::string::npos;
    double* dst = p.data.data() + t.offset;
    if (is_gain) {
      std::fill(dst, dst + t.size, 1.0);
    } else if (is_bias) {
      // already zero
    } else {
      for (std::size_t i = 0; i < t.size; ++i)
        dst[i] = kInitStd * rng.next_gaussian();
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward state
// ---------------------------------------------------------------------------

struct IncrementalDecoder::Impl {
  const Parameters* params;
  Offsets off;
  int n = 0;
  bool record = false;

  std::vector<int> tokens;
  // per layer caches, [pos * D]
  std::vector<std::vector<double>> k_cache, v_cache;
  std::vector<double> row;  // [V] log-probs after latest feed

  // traces for backward (record only)
  struct LayerTrace {
    std::vector<double> x_in, ln1_out, q, att_ctx, x_mid, ln2_out;  // [n, D]
    std::vector<double> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;     // [n]
    std::vector<double> mlp_pre, mlp_act;                           // [n, M]
    std::vector<double> att;  // packed probs: pos p block at H*p(p+1)/2
  };
  std::vector<LayerTrace> trace;
  std::vector<double> x_final;                 // [n, D] input of final LN
  std::vector<double> lnf_out;                 // [n, D]
  std::vector<double> lnf_mean, lnf_rstd;      // [n]
  std::vector<double> rows;                    // [n, V] log-probs

  // scratch
  std::vector<double> x, h, q, att_ctx, scores, pre, act, logits;

  explicit Impl(const Parameters& p)
      : params(&p), off(make_offsets(p.config)) {
    const auto& c = p.config;
    k_cache.resize(static_cast<std::size_t>(c.num_layers));
    v_cache.resize(static_cast<std::size_t>(c.num_layers));
    x.resize(static_cast<std::size_t>(c.embed_dim));
    h.resize(static_cast<std::size_t>(c.embed_dim));
    q.resize(static_cast<std::size_t>(c.embed_dim));
    att_ctx.resize(static_cast<std::size_t>(c.embed_dim));
    scores.resize(static_cast<std::size_t>(c.context_length));
    pre.resize(static_cast<std::size_t>(c.mlp_dim));
    act.resize(static_cast<std::size_t>(c.mlp_dim));
    logits.resize(static_cast<std::size_t>(c.vocab_size));
    row.resize(static_cast<std::size_t>(c.vocab_size));
  }

  void reset() {
    n = 0;
    tokens.clear();
    for (auto& kc : k_cache) kc.clear();
    for (auto& vc : v_cache) vc.clear();
    trace.clear();
    if (record)
      trace.resize(static_cast<std::size_t>(params->config.num_layers));
    x_final.clear();
    lnf_out.clear();
    lnf_mean.clear();
    lnf_rstd.clear();
    rows.clear();
  }

  void enable_recording() {
    record = true;
    trace.resize(static_cast<std::size_t>(params->config.num_layers));
  }

  static std::size_t tri(int p) {
    return static_cast<std::size_t>(p) * (static_cast<std::size_t>(p) + 1) / 2;
  }

  void feed(int token);
};

void IncrementalDecoder::Impl::feed(int token) {
  const ModelConfig& c = params->config;
  if (n >= c.context_length)
    throw ContextOverflowError("sequence exceeds context_length=" +
                               std::to_string(c.context_length));
  if (token < 0 || token >= c.vocab_size)
    throw std::invalid_argument("token id out of vocabulary: " +
                                std::to_string(token));
  const int d = c.embed_dim;
  const int nh = c.num_heads;
  const int hd = d / nh;
  const int m = c.mlp_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const double* w = params->data.data();
  const int p = n;
  tokens.push_back(token);

  const double* te = w + off.tok_emb + static_cast<std::size_t>(token) * d;
  const double* pe = w + off.pos_emb + static_cast<std::size_t>(p) * d;
  for (int i = 0; i < d; ++i) x[i] = te[i] + pe[i];

  for (int l = 0; l < c.num_layers; ++l) {
    const LayerOffsets& lo = off.layers[static_cast<std::size_t>(l)];
    auto& kc = k_cache[static_cast<std::size_t>(l)];
    auto& vc = v_cache[static_cast<std::size_t>(l)];
    Impl::LayerTrace* tr = record ? &trace[static_cast<std::size_t>(l)] : nullptr;

    if (tr) tr->x_in.insert(tr->x_in.end(), x.begin(), x.end());
    const LnStats st1 =
        layer_norm(x.data(), w + lo.ln1_g, w + lo.ln1_b, h.data(), d);
    if (tr) {
      tr->ln1_out.insert(tr->ln1_out.end(), h.begin(), h.end());
      tr->ln1_mean.push_back(st1.mean);
      tr->ln1_rstd.push_back(st1.rstd);
    }

    matvec(w + lo.wq, h.data(), q.data(), d, d);
    kc.resize(static_cast<std::size_t>(p + 1) * d);
    vc.resize(static_cast<std::size_t>(p + 1) * d);
    matvec(w + lo.wk, h.data(), kc.data() + static_cast<std::size_t>(p) * d, d, d);
    matvec(w + lo.wv, h.data(), vc.data() + static_cast<std::size_t>(p) * d, d, d);
    if (tr) tr->q.insert(tr->q.end(), q.begin(), q.end());

    if (tr) tr->att.resize(static_cast<std::size_t>(nh) * tri(p) +
                           static_cast<std::size_t>(nh) * (p + 1));
    for (int hh = 0; hh < nh; ++hh) {
      const double* qh = q.data() + hh * hd;
      double mx = -1e300;
      for (int i = 0; i <= p; ++i) {
        const double* kh = kc.data() + static_cast<std::size_t>(i) * d + hh * hd;
        double s = 0.0;
        for (int j = 0; j < hd; ++j) s += qh[j] * kh[j];
        s *= scale;
        scores[static_cast<std::size_t>(i)] = s;
        if (s > mx) mx = s;
      }
      double denom = 0.0;
      for (int i = 0; i <= p; ++i) {
        const double e = std::exp(scores[static_cast<std::size_t>(i)] - mx);
        scores[static_cast<std::size_t>(i)] = e;
        denom += e;
      }
      const double inv = 1.0 / denom;
      double* ctx = att_ctx.data() + hh * hd;
      std::fill(ctx, ctx + hd, 0.0);
      for (int i = 0; i <= p; ++i) {
        const double prob = scores[static_cast<std::size_t>(i)] * inv;
        if (tr) {
          tr->att[static_cast<std::size_t>(nh) * tri(p) +
                  static_cast<std::size_t>(hh) * (p + 1) +
                  static_cast<std::size_t>(i)] = prob;
        }
        const double* vh = vc.data() + static_cast<std::size_t>(i) * d + hh * hd;
        for (int j = 0; j < hd; ++j) ctx[j] += prob * vh[j];
      }
    }
    if (tr) tr->att_ctx.insert(tr->att_ctx.end(), att_ctx.begin(), att_ctx.end());

    matvec(w + lo.wo, att_ctx.data(), h.data(), d, d);
    for (int i = 0; i < d; ++i) x[i] += h[i];
    if (tr) tr->x_mid.insert(tr->x_mid.end(), x.begin(), x.end());

    const LnStats st2 =
        layer_norm(x.data(), w + lo.ln2_g, w + lo.ln2_b, h.data(), d);
    if (tr) {
      tr->ln2_out.insert(tr->ln2_out.end(), h.begin(), h.end());
      tr->ln2_mean.push_back(st2.mean);
      tr->ln2_rstd.push_back(st2.rstd);
    }
    matvec(w + lo.w_in, h.data(), pre.data(), m, d);
    for (int i = 0; i < m; ++i) pre[i] += w[lo.b_in + static_cast<std::size_t>(i)];
    for (int i = 0; i < m; ++i) act[i] = gelu(pre[i]);
    if (tr) {
      tr->mlp_pre.insert(tr->mlp_pre.end(), pre.begin(), pre.end());
      tr->mlp_act.insert(tr->mlp_act.end(), act.begin(), act.end());
    }
    matvec(w + lo.w_out, act.data(), h.data(), d, m);
    for (int i = 0; i < d; ++i) x[i] += h[i] + w[lo.b_out + static_cast<std::size_t>(i)];
  }

  if (record) x_final.insert(x_final.end(), x.begin(), x.end());
  const LnStats stf =
      layer_norm(x.data(), w + off.lnf_g, w + off.lnf_b, h.data(), d);
  if (record) {
    lnf_out.insert(lnf_out.end(), h.begin(), h.end());
    lnf_mean.push_back(stf.mean);
    lnf_rstd.push_back(stf.rstd);
  }
  matvec(w + off.head, h.data(), logits.data(), c.vocab_size, d);
  double mx = -1e300;
  for (int i = 0; i < c.vocab_size; ++i) mx = std::max(mx, logits[static_cast<std::size_t>(i)]);
  double denom = 0.0;
  for (int i = 0; i < c.vocab_size; ++i)
    denom += std::exp(logits[static_cast<std::size_t>(i)] - mx);
  const double lse = mx + std::log(denom);
  for (int i = 0; i < c.vocab_size; ++i)
    row[static_cast<std::size_t>(i)] = logits[static_cast<std::size_t>(i)] - lse;
  if (record) rows.insert(rows.end(), row.begin(), row.end());
  ++n;
}

IncrementalDecoder::IncrementalDecoder(const Parameters& params)
    : impl_(std::make_unique<Impl>(params)) {
  params.config.validate();
}
IncrementalDecoder::~IncrementalDecoder() = default;
IncrementalDecoder::IncrementalDecoder(IncrementalDecoder&&) noexcept = default;
IncrementalDecoder& IncrementalDecoder::operator=(IncrementalDecoder&&) noexcept =
    default;

void IncrementalDecoder::reset() { impl_->reset(); }
void IncrementalDecoder::feed(int token) { impl_->feed(token); }
int IncrementalDecoder::length() const { return impl_->n; }
std::span<const double> IncrementalDecoder::row() const {
  if (impl_->n == 0)
    throw std::logic_error("IncrementalDecoder::row before any feed");
  return {impl_->row.data(), impl_->row.size()};
}

LogProbTable forward(const Parameters& params, std::span<const int> tokens) {
  const ModelConfig& c = params.config;
  if (static_cast<int>(tokens.size()) > c.context_length)
    throw ContextOverflowError("forward: sequence of " +
                               std::to_string(tokens.size()) +
                               " tokens exceeds context_length=" +
                               std::to_string(c.context_length));
  LogProbTable table;
  table.rows = static_cast<int>(tokens.size());
  table.cols = c.vocab_size;
  table.data.reserve(tokens.size() * static_cast<std::size_t>(c.vocab_size));
  IncrementalDecoder dec(params);
  for (int tok : tokens) {
    dec.feed(tok);
    const auto r = dec.row();
    table.data.insert(table.data.end(), r.begin(), r.end());
  }
  return table;
}

int sample_next(std::span<const double> logprob_row, double temperature,
                Rng& rng) {
  if (!(temperature > 0.0))
    throw std::invalid_argument("sample_next: temperature must be positive");
  const int v = static_cast<int>(logprob_row.size());
  if (v == 0) throw std::invalid_argument("sample_next: empty distribution");
  if (temperature < kArgmaxTemperature) {
    int best = 0;
    for (int i = 1; i < v; ++i)
      if (logprob_row[static_cast<std::size_t>(i)] >
          logprob_row[static_cast<std::size_t>(best)])
        best = i;
    return best;
  }
  double mx = -1e300;
  for (int i = 0; i < v; ++i)
    mx = std::max(mx, logprob_row[static_cast<std::size_t>(i)] / temperature);
  double total = 0.0;
  std::vector<double> weights(static_cast<std::size_t>(v));
  for (int i = 0; i < v; ++i) {
    const double e =
        std::exp(logprob_row[static_cast<std::size_t>(i)] / temperature - mx);
    weights[static_cast<std::size_t>(i)] = e;
    total += e;
  }
  const double u = rng.next_double() * total;
  double cum = 0.0;
  for (int i = 0; i < v; ++i) {
    cum += weights[static_cast<std::size_t>(i)];
    if (u < cum) return i;
  }
  // Rounding residue: fall back to the last token with nonzero weight.
  for (int i = v - 1; i >= 0; --i)
    if (weights[static_cast<std::size_t>(i)] > 0.0) return i;
  return v - 1;
}

ModelPolicy::ModelPolicy(const Parameters& params, double temperature)
    : decoder_(params), temperature_(temperature) {
  if (!(temperature > 0.0))
    throw std::invalid_argument("ModelPolicy: temperature must be positive");
}

void ModelPolicy::begin(std::span<const int> context) {
  decoder_.reset();
  for (int tok : context) decoder_.feed(tok);
}

int ModelPolicy::sample(Rng& rng) {
  return sample_next(decoder_.row(), temperature_, rng);
}

void ModelPolicy::push(int token) { decoder_.feed(token); }

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

SequenceLogProb sequence_logprob(const Parameters& params,
                                 std::span<const int> context,
                                 std::span<const int> continuation,
                                 std::span<const std::uint8_t> mask) {
  if (context.empty())
    throw std::invalid_argument("sequence_logprob: context must be non-empty");
  if (mask.size() != continuation.size())
    throw std::invalid_argument("sequence_logprob: mask length mismatch");
  if (static_cast<int>(context.size() + continuation.size()) >
      params.config.context_length)
    throw ContextOverflowError("sequence_logprob: context + continuation of " +
                               std::to_string(context.size() + continuation.size()) +
                               " exceeds context_length");
  SequenceLogProb out;
  out.per_token.assign(continuation.size(), 0.0);
  IncrementalDecoder dec(params);
  for (int tok : context) dec.feed(tok);
  for (std::size_t j = 0; j < continuation.size(); ++j) {
    if (mask[j]) {
      const double lp = dec.row()[static_cast<std::size_t>(continuation[j])];
      out.per_token[j] = lp;
      out.total += lp;
    }
    if (j + 1 < continuation.size()) dec.feed(continuation[j]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training backward
// ---------------------------------------------------------------------------

namespace {

// Gradient of the weighted NLL of one sequence, accumulated into grads.
// coef[r] / target[r] describe the loss term hanging off forward row r.
void sequence_backward(const Parameters& params,
                       const IncrementalDecoder::Impl& s,
                       const std::vector<double>& coef,
                       const std::vector<int>& target, double* grads) {
  const ModelConfig& c = params.config;
  const int d = c.embed_dim;
  const int nh = c.num_heads;
  const int hd = d / nh;
  const int m = c.mlp_dim;
  const int v = c.vocab_size;
  const int n = s.n;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const double* w = params.data.data();
  const Offsets& off = s.off;

  // dx: gradient w.r.t. the residual stream at the current depth, all
  // positions at once (attention mixes positions in backward).
  std::vector<double> dx(static_cast<std::size_t>(n) * d, 0.0);
  std::vector<double> dlogits(static_cast<std::size_t>(v));
  std::vector<double> dh(static_cast<std::size_t>(d));
  std::vector<double> dpre(static_cast<std::size_t>(m));
  std::vector<double> dact(static_cast<std::size_t>(m));
  std::vector<double> dctx(static_cast<std::size_t>(d));
  std::vector<double> dq(static_cast<std::size_t>(n) * d);
  std::vector<double> dk(static_cast<std::size_t>(n) * d);
  std::vector<double> dv(static_cast<std::size_t>(n) * d);
  std::vector<double> dw_att(static_cast<std::size_t>(n));

  // Head + final layer norm.
  for (int p = 0; p < n; ++p) {
    if (coef[static_cast<std::size_t>(p)] == 0.0) continue;
    const double cf = coef[static_cast<std::size_t>(p)];
    const int tgt = target[static_cast<std::size_t>(p)];
    const double* lp = s.rows.data() + static_cast<std::size_t>(p) * v;
    for (int i = 0; i < v; ++i)
      dlogits[static_cast<std::size_t>(i)] = cf * std::exp(lp[static_cast<std::size_t>(i)]);
    dlogits[static_cast<std::size_t>(tgt)] -= cf;

    const double* f = s.lnf_out.data() + static_cast<std::size_t>(p) * d;
    std::fill(dh.begin(), dh.end(), 0.0);
    matvec_t_acc(w + off.head, dlogits.data(), dh.data(), v, d);
    outer_acc(grads + off.head, dlogits.data(), f, v, d);

    layer_norm_backward(s.x_final.data() + static_cast<std::size_t>(p) * d,
                        {s.lnf_mean[static_cast<std::size_t>(p)],
                         s.lnf_rstd[static_cast<std::size_t>(p)]},
                        w + off.lnf_g, dh.data(),
                        dx.data() + static_cast<std::size_t>(p) * d,
                        grads + off.lnf_g, grads + off.lnf_b, d);
  }

  for (int l = c.num_layers - 1; l >= 0; --l) {
    const LayerOffsets& lo = off.layers[static_cast<std::size_t>(l)];
    const auto& tr = s.trace[static_cast<std::size_t>(l)];
    const auto& kc = s.k_cache[static_cast<std::size_t>(l)];
    const auto& vc = s.v_cache[static_cast<std::size_t>(l)];

    // MLP sub-block: dx becomes gradient w.r.t. x_mid.
    for (int p = 0; p < n; ++p) {
      double* dxp = dx.data() + static_cast<std::size_t>(p) * d;
      const double* act = tr.mlp_act.data() + static_cast<std::size_t>(p) * m;
      const double* pre = tr.mlp_pre.data() + static_cast<std::size_t>(p) * m;
      const double* h2 = tr.ln2_out.data() + static_cast<std::size_t>(p) * d;
      // x_out = x_mid + W_out act + b_out; dxp is d(x_out).
      std::fill(dact.begin(), dact.end(), 0.0);
      matvec_t_acc(w + lo.w_out, dxp, dact.data(), d, m);
      outer_acc(grads + lo.w_out, dxp, act, d, m);
      for (int i = 0; i < d; ++i)
        grads[lo.b_out + static_cast<std::size_t>(i)] += dxp[i];
      for (int i = 0; i < m; ++i)
        dpre[static_cast<std::size_t>(i)] =
            dact[static_cast<std::size_t>(i)] * gelu_grad(pre[i]);
      std::fill(dh.begin(), dh.end(), 0.0);
      matvec_t_acc(w + lo.w_in, dpre.data(), dh.data(), m, d);
      outer_acc(grads + lo.w_in, dpre.data(), h2, m, d);
      for (int i = 0; i < m; ++i)
        grads[lo.b_in + static_cast<std::size_t>(i)] += dpre[static_cast<std::size_t>(i)];
      layer_norm_backward(tr.x_mid.data() + static_cast<std::size_t>(p) * d,
                          {tr.ln2_mean[static_cast<std::size_t>(p)],
                           tr.ln2_rstd[static_cast<std::size_t>(p)]},
                          w + lo.ln2_g, dh.data(), dxp, grads + lo.ln2_g,
                          grads + lo.ln2_b, d);
      // dxp now holds d(x_mid) for position p.
    }

    // Attention sub-block.
    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    for (int p = 0; p < n; ++p) {
      const double* dxp = dx.data() + static_cast<std::size_t>(p) * d;
      std::fill(dctx.begin(), dctx.end(), 0.0);
      matvec_t_acc(w + lo.wo, dxp, dctx.data(), d, d);
      outer_acc(grads + lo.wo, dxp,
                tr.att_ctx.data() + static_cast<std::size_t>(p) * d, d, d);
      const std::size_t att_base =
          static_cast<std::size_t>(nh) * IncrementalDecoder::Impl::tri(p);
      for (int hh = 0; hh < nh; ++hh) {
        const double* probs =
            tr.att.data() + att_base + static_cast<std::size_t>(hh) * (p + 1);
        const double* dctx_h = dctx.data() + hh * hd;
        const double* qh = tr.q.data() + static_cast<std::size_t>(p) * d + hh * hd;
        double sum = 0.0;
        for (int i = 0; i <= p; ++i) {
          const double* vh = vc.data() + static_cast<std::size_t>(i) * d + hh * hd;
          double dwi = 0.0;
          for (int j = 0; j < hd; ++j) dwi += dctx_h[j] * vh[j];
          dw_att[static_cast<std::size_t>(i)] = dwi;
          sum += probs[i] * dwi;
          double* dvh = dv.data() + static_cast<std::size_t>(i) * d + hh * hd;
          for (int j = 0; j < hd; ++j) dvh[j] += probs[i] * dctx_h[j];
        }
        double* dqh = dq.data() + static_cast<std::size_t>(p) * d + hh * hd;
        for (int i = 0; i <= p; ++i) {
          const double ds = probs[i] * (dw_att[static_cast<std::size_t>(i)] - sum) * scale;
          if (ds == 0.0) continue;
          const double* kh = kc.data() + static_cast<std::size_t>(i) * d + hh * hd;
          double* dkh = dk.data() + static_cast<std::size_t>(i) * d + hh * hd;
          for (int j = 0; j < hd; ++j) {
            dqh[j] += ds * kh[j];
            dkh[j] += ds * qh[j];
          }
        }
      }
    }
    // Project back through Wq/Wk/Wv and the first layer norm.
    for (int p = 0; p < n; ++p) {
      const double* h1 = tr.ln1_out.data() + static_cast<std::size_t>(p) * d;
      std::fill(dh.begin(), dh.end(), 0.0);
      matvec_t_acc(w + lo.wq, dq.data() + static_cast<std::size_t>(p) * d, dh.data(), d, d);
      matvec_t_acc(w + lo.wk, dk.data() + static_cast<std::size_t>(p) * d, dh.data(), d, d);
      matvec_t_acc(w + lo.wv, dv.data() + static_cast<std::size_t>(p) * d, dh.data(), d, d);
      outer_acc(grads + lo.wq, dq.data() + static_cast<std::size_t>(p) * d, h1, d, d);
      outer_acc(grads + lo.wk, dk.data() + static_cast<std::size_t>(p) * d, h1, d, d);
      outer_acc(grads + lo.wv, dv.data() + static_cast<std::size_t>(p) * d, h1, d, d);
      layer_norm_backward(tr.x_in.data() + static_cast<std::size_t>(p) * d,
                          {tr.ln1_mean[static_cast<std::size_t>(p)],
                           tr.ln1_rstd[static_cast<std::size_t>(p)]},
                          w + lo.ln1_g, dh.data(),
                          dx.data() + static_cast<std::size_t>(p) * d,
                          grads + lo.ln1_g, grads + lo.ln1_b, d);
      // dx[p] now holds d(x_in) = d(x_out of the layer below).
    }
  }

  // Embeddings.
  for (int p = 0; p < n; ++p) {
    const double* dxp = dx.data() + static_cast<std::size_t>(p) * d;
    double* dtok = grads + off.tok_emb +
                   static_cast<std::size_t>(s.tokens[static_cast<std::size_t>(p)]) * d;
    double* dpos = grads + off.pos_emb + static_cast<std::size_t>(p) * d;
    for (int i = 0; i < d; ++i) {
      dtok[i] += dxp[i];
      dpos[i] += dxp[i];
    }
  }
}

}  // namespace

LossAndGradients loss_and_gradients(const Parameters& params,
                                    std::span<const SequenceBatchItem> batch) {
  if (batch.empty())
    throw std::invalid_argument("loss_and_gradients: empty batch");
  const ModelConfig& c = params.config;
  for (const auto& item : batch) {
    if (item.context.empty())
      throw std::invalid_argument("loss_and_gradients: empty context");
    if (item.mask.size() != item.continuation.size() ||
        item.weights.size() != item.continuation.size())
      throw std::invalid_argument(
          "loss_and_gradients: mask/weight length mismatch");
    if (static_cast<int>(item.context.size() + item.continuation.size()) >
        c.context_length)
      throw ContextOverflowError("loss_and_gradients: item exceeds context");
  }
  const std::size_t nparams = parameter_count(c);
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  std::vector<double> item_loss(batch.size(), 0.0);
  std::vector<std::vector<double>> item_grads(batch.size());

  parallel_for(batch.size(), [&](std::size_t bi) {
    const SequenceBatchItem& item = batch[bi];
    if (item.continuation.empty()) return;
    item_grads[bi].assign(nparams, 0.0);

    IncrementalDecoder::Impl state(params);
    state.enable_recording();
    // The last continuation token never conditions a loss row.
    for (int tok : item.context) state.feed(tok);
    for (std::size_t j = 0; j + 1 < item.continuation.size(); ++j)
      state.feed(item.continuation[j]);

    const int n = state.n;
    std::vector<double> coef(static_cast<std::size_t>(n), 0.0);
    std::vector<int> target(static_cast<std::size_t>(n), 0);
    const int ctx_len = static_cast<int>(item.context.size());
    double loss = 0.0;
    for (std::size_t j = 0; j < item.continuation.size(); ++j) {
      if (!item.mask[j]) continue;
      const int r = ctx_len - 1 + static_cast<int>(j);
      const double wgt = item.weights[j];
      const int tok = item.continuation[j];
      const double lp = state.rows[static_cast<std::size_t>(r) * c.vocab_size +
                                   static_cast<std::size_t>(tok)];
      loss -= wgt * lp;
      coef[static_cast<std::size_t>(r)] += wgt * inv_b;
      // One loss term per continuation position, so r is unique per j.
      target[static_cast<std::size_t>(r)] = tok;
    }
    item_loss[bi] = loss;
    sequence_backward(params, state, coef, target, item_grads[bi].data());
  });

  LossAndGradients out;
  out.grads.assign(nparams, 0.0);
  double total = 0.0;
  for (std::size_t bi = 0; bi < batch.size(); ++bi) {
    total += item_loss[bi];
    if (item_grads[bi].empty()) continue;
    const double* g = item_grads[bi].data();
    for (std::size_t i = 0; i < nparams; ++i) out.grads[i] += g[i];
  }
  out.loss = total * inv_b;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'B', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& buf, double v) {
  put_u64(buf, std::bit_cast<std::uint64_t>(v));
}

struct Reader {
  const std::string& buf;
  std::size_t at = 0;

  void need(std::size_t n) const {
    if (at + n > buf.size()) throw CheckpointError("checkpoint truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
    at += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
    at += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = buf.substr(at, n);
    at += n;
    return s;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const Parameters& params) {
  const auto layout = tensor_layout(params.config);
  if (params.data.size() != parameter_count(params.config))
    throw std::invalid_argument("save_checkpoint: parameter size mismatch");
  std::string buf;
  buf.reserve(params.data.size() * 8 + 4096);
  buf.append(kMagic, sizeof(kMagic));
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<std::uint32_t>(params.config.vocab_size));
  put_u32(buf, static_cast<std::uint32_t>(params.config.context_length));
  put_u32(buf, static_cast<std::uint32_t>(params.config.num_layers));
  put_u32(buf, static_cast<std::uint32_t>(params.config.num_heads));
  put_u32(buf, static_cast<std::uint32_t>(params.config.embed_dim));
  put_u32(buf, static_cast<std::uint32_t>(params.config.mlp_dim));
  put_u64(buf, params.config.seed);
  put_u32(buf, static_cast<std::uint32_t>(layout.size()));
  for (const TensorInfo& t : layout) {
    put_u32(buf, static_cast<std::uint32_t>(t.name.size()));
    buf += t.name;
    put_u32(buf, static_cast<std::uint32_t>(t.shape.size()));
    for (int dim : t.shape) put_u32(buf, static_cast<std::uint32_t>(dim));
    for (std::size_t i = 0; i < t.size; ++i)
      put_f64(buf, params.data[t.offset + i]);
  }
  put_u64(buf, fnv1a64(buf.data(), buf.size()));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

Parameters load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kMagic) + 12)
    throw CheckpointError("checkpoint truncated: " + path);

  const std::uint64_t stored_sum = [&buf]() {
    Reader r{buf, buf.size() - 8};
    return r.u64();
  }();
  if (fnv1a64(buf.data(), buf.size() - 8) != stored_sum)
    throw CheckpointError("checkpoint checksum mismatch: " + path);

  Reader r{buf};
  if (r.str(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic)))
    throw CheckpointError("bad checkpoint magic: " + path);
  if (r.u32() != kVersion)
    throw CheckpointError("unsupported checkpoint version: " + path);

  Parameters p;
  p.config.vocab_size = static_cast<int>(r.u32());
  p.config.context_length = static_cast<int>(r.u32());
  p.config.num_layers = static_cast<int>(r.u32());
  p.config.num_heads = static_cast<int>(r.u32());
  p.config.embed_dim = static_cast<int>(r.u32());
  p.config.mlp_dim = static_cast<int>(r.u32());
  p.config.seed = r.u64();
  try {
    p.config.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("invalid checkpoint config: ") + e.what());
  }

  const auto layout = tensor_layout(p.config);
  if (r.u32() != layout.size())
    throw CheckpointError("checkpoint tensor count mismatch: " + path);
  p.data.assign(parameter_count(p.config), 0.0);
  for (const TensorInfo& t : layout) {
    const std::uint32_t name_len = r.u32();
    if (r.str(name_len) != t.name)
      throw CheckpointError("checkpoint tensor name mismatch (want " + t.name + ")");
    const std::uint32_t ndim = r.u32();
    if (ndim != t.shape.size())
      throw CheckpointError("checkpoint tensor rank mismatch: " + t.name);
    for (int dim : t.shape) {
      if (r.u32() != static_cast<std::uint32_t>(dim))
        throw CheckpointError("checkpoint tensor shape mismatch: " + t.name);
    }
    for (std::size_t i = 0; i < t.size; ++i) p.data[t.offset + i] = r.f64();
  }
  return p;
}

}  // namespace budgetlab
