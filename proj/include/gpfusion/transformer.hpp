#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "core.hpp"
#include "eval.hpp"
#include "logistic.hpp"

namespace gpfusion {

enum class FusionMode { multimodal, unimodal_ts };

inline std::string_view mode_name(FusionMode m) {
  return m == FusionMode::multimodal ? "multimodal" : "unimodal_ts";
}

inline FusionMode parse_mode(std::string_view s) {
  if (s == "multimodal") return FusionMode::multimodal;
  if (s == "unimodal_ts" || s == "unimodal-ts") return FusionMode::unimodal_ts;
  throw ConfigError("unknown fusion mode '" + std::string(s) + "'");
}

struct ModelConfig {
  int channels = 9;      // C, per-day input width
  int static_dim = 0;    // S, encoded static row width
  int time_steps = 85;   // T
  int d_model = 64;
  int n_heads = 4;
  int n_blocks = 2;
  int ff_dim = 128;
  int head_dim = 32;     // hidden width of the classification MLP
  double dropout_rate = 0.1;
  double static_dropout = 0.5;  // input dropout on the static row (train mode only)
  int max_seq_len = 96;
  FusionMode mode = FusionMode::multimodal;
  std::uint64_t seed = 0;

  [[nodiscard]] int sequence_length() const {
    return time_steps + (mode == FusionMode::multimodal ? 2 : 1);
  }

  void validate() const {
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
      throw ConfigError("ModelConfig: d_model must be a positive multiple of n_heads");
    if (n_blocks < 0 || ff_dim <= 0 || head_dim <= 0 || channels <= 0 || time_steps <= 0)
      throw ConfigError("ModelConfig: non-positive dimension");
    if (mode == FusionMode::multimodal && static_dim <= 0)
      throw ConfigError("ModelConfig: multimodal mode needs static_dim > 0");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
      throw ConfigError("ModelConfig: dropout_rate must lie in [0,1)");
    if (!(static_dropout >= 0.0 && static_dropout < 1.0))
      throw ConfigError("ModelConfig: static_dropout must lie in [0,1)");
    if (max_seq_len < time_steps + 2)
      throw ConfigError("ModelConfig: max_seq_len must be at least time_steps + 2");
  }

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"channels", channels},     {"static_dim", static_dim}, {"time_steps", time_steps},
            {"d_model", d_model},       {"n_heads", n_heads},       {"n_blocks", n_blocks},
            {"ff_dim", ff_dim},         {"head_dim", head_dim},     {"dropout_rate", dropout_rate},
            {"static_dropout", static_dropout}, {"max_seq_len", max_seq_len}, {"mode", mode_name(mode)}, {"seed", seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.channels = j.value("channels", c.channels);
    c.static_dim = j.value("static_dim", c.static_dim);
    c.time_steps = j.value("time_steps", c.time_steps);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.n_blocks = j.value("n_blocks", c.n_blocks);
    c.ff_dim = j.value("ff_dim", c.ff_dim);
    c.head_dim = j.value("head_dim", c.head_dim);
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.static_dropout = j.value("static_dropout", c.static_dropout);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.mode = parse_mode(j.value("mode", std::string("multimodal")));
    c.seed = j.value("seed", c.seed);
    return c;
  }
};

// Row vectors (biases, gains, CLS) are stored as 1 x n matrices so every
// parameter has the same type.
struct EncoderBlock {
  Eigen::MatrixXd ln1_gain, ln1_bias;
  Eigen::MatrixXd wq, bq, wk, bk, wv, bv, wo, bo;
  Eigen::MatrixXd ln2_gain, ln2_bias;
  Eigen::MatrixXd ff_w1, ff_b1, ff_w2, ff_b2;
};

struct FusionModel {
  ModelConfig config;
  Eigen::MatrixXd in_w, in_b;                      // C -> d
  Eigen::MatrixXd static_w1, static_b1;            // S -> ff
  Eigen::MatrixXd static_w2, static_b2;            // ff -> d
  Eigen::MatrixXd cls;                             // 1 x d
  Eigen::MatrixXd pos;                             // max_seq_len x d
  std::vector<EncoderBlock> blocks;
  Eigen::MatrixXd head_w1, head_b1, head_w2, head_b2;  // d -> head_dim -> 1
};

// Visits every parameter as (name, matrix&). Static-projection parameters are
// absent in unimodal mode.
template <typename Model, typename F>
void for_each_param(Model& m, F&& f) {
  f("in_w", m.in_w);
  f("in_b", m.in_b);
  if (m.config.mode == FusionMode::multimodal) {
    f("static_w1", m.static_w1);
    f("static_b1", m.static_b1);
    f("static_w2", m.static_w2);
    f("static_b2", m.static_b2);
  }
  f("cls", m.cls);
  f("pos", m.pos);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    auto& b = m.blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    f(p + "ln1_gain", b.ln1_gain);
    f(p + "ln1_bias", b.ln1_bias);
    f(p + "wq", b.wq);
    f(p + "bq", b.bq);
    f(p + "wk", b.wk);
    f(p + "bk", b.bk);
    f(p + "wv", b.wv);
    f(p + "bv", b.bv);
    f(p + "wo", b.wo);
    f(p + "bo", b.bo);
    f(p + "ln2_gain", b.ln2_gain);
    f(p + "ln2_bias", b.ln2_bias);
    f(p + "ff_w1", b.ff_w1);
    f(p + "ff_b1", b.ff_b1);
    f(p + "ff_w2", b.ff_w2);
    f(p + "ff_b2", b.ff_b2);
  }
  f("head_w1", m.head_w1);
  f("head_b1", m.head_b1);
  f("head_w2", m.head_w2);
  f("head_b2", m.head_b2);
}

inline std::vector<std::pair<std::string, Eigen::MatrixXd*>> param_list(FusionModel& m) {
  std::vector<std::pair<std::string, Eigen::MatrixXd*>> out;
  for_each_param(m, [&](const std::string& name, Eigen::MatrixXd& p) { out.emplace_back(name, &p); });
  return out;
}

inline std::size_t parameter_count(const FusionModel& m) {
  std::size_t n = 0;
  for_each_param(m, [&](const std::string&, const Eigen::MatrixXd& p) { n += static_cast<std::size_t>(p.size()); });
  return n;
}

// Allocates all parameters with zeros (layer-norm gains included).
inline FusionModel zero_model(const ModelConfig& cfg) {
  cfg.validate();
  FusionModel m;
  m.config = cfg;
  const int c = cfg.channels, s = cfg.static_dim, d = cfg.d_model, ff = cfg.ff_dim;
  m.in_w = Eigen::MatrixXd::Zero(c, d);
  m.in_b = Eigen::MatrixXd::Zero(1, d);
  if (cfg.mode == FusionMode::multimodal) {
    m.static_w1 = Eigen::MatrixXd::Zero(s, ff);
    m.static_b1 = Eigen::MatrixXd::Zero(1, ff);
    m.static_w2 = Eigen::MatrixXd::Zero(ff, d);
    m.static_b2 = Eigen::MatrixXd::Zero(1, d);
  }
  m.cls = Eigen::MatrixXd::Zero(1, d);
  m.pos = Eigen::MatrixXd::Zero(cfg.max_seq_len, d);
  m.blocks.resize(static_cast<std::size_t>(cfg.n_blocks));
  for (auto& b : m.blocks) {
    for (auto* g : {&b.ln1_gain, &b.ln1_bias, &b.bq, &b.bk, &b.bv, &b.bo, &b.ln2_gain,
                    &b.ln2_bias, &b.ff_b2})
      *g = Eigen::MatrixXd::Zero(1, d);
    for (auto* w : {&b.wq, &b.wk, &b.wv, &b.wo}) *w = Eigen::MatrixXd::Zero(d, d);
    b.ff_w1 = Eigen::MatrixXd::Zero(d, ff);
    b.ff_b1 = Eigen::MatrixXd::Zero(1, ff);
    b.ff_w2 = Eigen::MatrixXd::Zero(ff, d);
  }
  m.head_w1 = Eigen::MatrixXd::Zero(d, cfg.head_dim);
  m.head_b1 = Eigen::MatrixXd::Zero(1, cfg.head_dim);
  m.head_w2 = Eigen::MatrixXd::Zero(cfg.head_dim, 1);
  m.head_b2 = Eigen::MatrixXd::Zero(1, 1);
  return m;
}

inline FusionModel zeros_like(const FusionModel& m) {
  FusionModel z = m;
  for_each_param(z, [](const std::string&, Eigen::MatrixXd& p) { p.setZero(); });
  return z;
}

// Biases and layer-norm offsets; these are excluded from weight decay.
inline bool param_is_bias(const std::string& name) {
  const auto leaf = name.substr(name.find('.') == std::string::npos ? 0 : name.find('.') + 1);
  return leaf.ends_with("_bias") || leaf == "in_b" || leaf == "bq" || leaf == "bk" || leaf == "bv" ||
         leaf == "bo" || leaf.ends_with("_b1") || leaf.ends_with("_b2");
}

inline bool param_is_decayed(const std::string& name) {
  return !param_is_bias(name) && !name.ends_with("_gain") && name != "cls" && name != "pos";
}

// Fan-in scaled Gaussian weights, zero biases, unit layer-norm gains,
// N(0, 0.02^2) for CLS and positional embeddings.
inline FusionModel init_model(const ModelConfig& cfg) {
  FusionModel m = zero_model(cfg);
  for_each_param(m, [&](const std::string& name, Eigen::MatrixXd& p) {
    Rng rng = make_rng(cfg.seed, "init/" + name);
    std::normal_distribution<double> nd(0.0, 1.0);
    const bool is_gain = name.ends_with("_gain");
    const bool is_bias = param_is_bias(name);
    if (is_gain) {
      p.setOnes();
    } else if (is_bias) {
      p.setZero();
    } else if (name == "cls" || name == "pos") {
      for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = 0.02 * nd(rng);
    } else {
      const double sd = 1.0 / std::sqrt(static_cast<double>(p.rows()));
      for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = sd * nd(rng);
    }
  });
  return m;
}

// One patient's inputs: T x C standardized trajectories and an encoded static row.
struct TensorSet {
  std::vector<Eigen::MatrixXd> ts;
  Eigen::MatrixXd statics;             // B x S (may have zero columns in unimodal use)
  std::vector<bool> labels;            // empty when unlabeled
  std::vector<std::string> ids;

  [[nodiscard]] std::size_t size() const { return ts.size(); }

  [[nodiscard]] TensorSet subset(const std::vector<std::size_t>& idx) const {
    TensorSet out;
    out.statics.resize(static_cast<Eigen::Index>(idx.size()), statics.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      out.ts.push_back(ts[idx[k]]);
      out.statics.row(static_cast<Eigen::Index>(k)) = statics.row(static_cast<Eigen::Index>(idx[k]));
      if (!labels.empty()) out.labels.push_back(labels[idx[k]]);
      if (!ids.empty()) out.ids.push_back(ids[idx[k]]);
    }
    return out;
  }
};

namespace nn {

inline constexpr double kLayerNormEps = 1e-5;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline Eigen::MatrixXd gelu(const Eigen::MatrixXd& x) { return x.unaryExpr([](double v) { return gelu(v); }); }

inline Eigen::MatrixXd gelu_grad(const Eigen::MatrixXd& x) {
  return x.unaryExpr([](double v) { return gelu_grad(v); });
}

inline Eigen::MatrixXd add_row(Eigen::MatrixXd x, const Eigen::MatrixXd& row) {
  x.rowwise() += row.row(0);
  return x;
}

struct LayerNormCache {
  Eigen::MatrixXd xhat;
  Eigen::VectorXd rstd;
};

inline Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const Eigen::MatrixXd& gain,
                                  const Eigen::MatrixXd& bias, LayerNormCache& cache) {
  const Eigen::VectorXd mean = x.rowwise().mean();
  cache.xhat = x.colwise() - mean;
  const Eigen::VectorXd var = cache.xhat.array().square().rowwise().mean();
  cache.rstd = (var.array() + kLayerNormEps).rsqrt();
  cache.xhat = cache.rstd.asDiagonal() * cache.xhat;
  Eigen::MatrixXd y = cache.xhat * gain.row(0).asDiagonal();
  y.rowwise() += bias.row(0);
  return y;
}

inline Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& dy, const Eigen::MatrixXd& gain,
                                           const LayerNormCache& cache, Eigen::MatrixXd& dgain,
                                           Eigen::MatrixXd& dbias) {
  dgain += dy.cwiseProduct(cache.xhat).colwise().sum();
  dbias += dy.colwise().sum();
  const Eigen::MatrixXd dxhat = dy * gain.row(0).asDiagonal();
  const Eigen::VectorXd m1 = dxhat.rowwise().mean();
  const Eigen::VectorXd m2 = dxhat.cwiseProduct(cache.xhat).rowwise().mean();
  Eigen::MatrixXd dx = dxhat.colwise() - m1;
  dx -= cache.xhat.cwiseProduct(m2.replicate(1, dxhat.cols()));
  return cache.rstd.asDiagonal() * dx;
}

// Works on the transpose so each softmax runs over contiguous memory.
inline void softmax_rows_in_place(Eigen::MatrixXd& s) {
  Eigen::MatrixXd t = s.transpose();
  for (Eigen::Index j = 0; j < t.cols(); ++j) {
    auto col = t.col(j).array();
    col = (col - col.maxCoeff()).exp();
    col /= col.sum();
  }
  s = t.transpose();
}

}  // namespace nn

struct BlockCache {
  Eigen::MatrixXd x_in;
  nn::LayerNormCache ln1, ln2;
  Eigen::MatrixXd h1, q, k, v;
  std::vector<Eigen::MatrixXd> attention;  // per head, rows x L, rows sum to 1 (1 x L in the last block)
  Eigen::MatrixXd o, mask_attn, x_mid, h2, u, g, mask_ff;
};

struct SampleCache {
  Eigen::MatrixXd static_in;               // static row after input dropout; empty if none
  Eigen::MatrixXd static_pre, static_act;  // 1 x ff
  Eigen::MatrixXd x0;                      // assembled sequence incl. positions
  Eigen::MatrixXd mask_embed;              // empty unless dropout was applied
  std::vector<BlockCache> blocks;
  Eigen::MatrixXd cls_out, head_pre, head_act;
  double logit = 0.0;
};

// Token sequence [CLS, static token, day_0 .. day_{T-1}] plus positional
// embeddings; the static token is omitted in unimodal mode.
inline Eigen::MatrixXd assemble_sequence(const FusionModel& m, const Eigen::MatrixXd& ts,
                                         const Eigen::MatrixXd& static_row,
                                         SampleCache* cache = nullptr) {
  const auto& cfg = m.config;
  if (ts.rows() != cfg.time_steps || ts.cols() != cfg.channels)
    throw ConfigError("assemble_sequence: time-series tensor shape does not match config");
  const int len = cfg.sequence_length();
  if (len > cfg.max_seq_len) throw ConfigError("assemble_sequence: sequence exceeds max_seq_len");
  Eigen::MatrixXd x(len, cfg.d_model);
  x.row(0) = m.cls.row(0);
  int offset = 1;
  if (cfg.mode == FusionMode::multimodal) {
    if (static_row.cols() != cfg.static_dim)
      throw ConfigError("assemble_sequence: static row width does not match config");
    Eigen::MatrixXd pre = static_row * m.static_w1 + m.static_b1;
    Eigen::MatrixXd act = nn::gelu(pre);
    x.row(1) = (act * m.static_w2 + m.static_b2).row(0);
    if (cache) {
      cache->static_pre = std::move(pre);
      cache->static_act = std::move(act);
    }
    offset = 2;
  }
  x.bottomRows(cfg.time_steps) = nn::add_row(ts * m.in_w, m.in_b);
  (void)offset;
  x += m.pos.topRows(len);
  return x;
}

struct ForwardOptions {
  bool train_mode = false;
  Rng* dropout_rng = nullptr;  // required when train_mode and dropout > 0
};

// Logit for one patient. Fills `cache` when given (needed for backprop).
inline double forward_sample(const FusionModel& m, const Eigen::MatrixXd& ts,
                             const Eigen::MatrixXd& static_row, const ForwardOptions& opt,
                             SampleCache* cache = nullptr) {
  const auto& cfg = m.config;
  SampleCache local;
  SampleCache& c = cache ? *cache : local;
  const bool drop = opt.train_mode && cfg.dropout_rate > 0.0;
  const bool drop_static = opt.train_mode && cfg.static_dropout > 0.0 && cfg.mode == FusionMode::multimodal;
  if ((drop || drop_static) && !opt.dropout_rng) throw Error("forward_sample: dropout requires an rng");
  auto dropout_mask = [&](Eigen::Index r, Eigen::Index cols, double rate = -1.0) {
    if (rate < 0.0) rate = cfg.dropout_rate;
    Eigen::MatrixXd mask(r, cols);
    std::bernoulli_distribution keep(1.0 - rate);
    const double inv = 1.0 / (1.0 - rate);
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*opt.dropout_rng) ? inv : 0.0;
    return mask;
  };
  c.static_in.resize(0, 0);
  if (drop_static) c.static_in = static_row.cwiseProduct(dropout_mask(1, static_row.cols(), cfg.static_dropout));
  Eigen::MatrixXd x = assemble_sequence(m, ts, drop_static ? c.static_in : static_row, &c);
  if (cache) c.x0 = x;
  const int heads = cfg.n_heads;
  const int dh = cfg.d_model / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  // Dropout on the summed token + position embeddings, as in the usual encoder recipe.
  c.mask_embed.resize(0, 0);
  if (drop) {
    c.mask_embed = dropout_mask(x.rows(), x.cols());
    x = x.cwiseProduct(c.mask_embed);
  }

  c.blocks.assign(m.blocks.size(), {});
  for (std::size_t bi = 0; bi < m.blocks.size(); ++bi) {
    const auto& b = m.blocks[bi];
    auto& bc = c.blocks[bi];
    // Only the CLS row of the last block reaches the head, so its queries,
    // residuals and FFN are computed for that row alone.
    const Eigen::Index nq = bi + 1 == m.blocks.size() ? 1 : x.rows();
    bc.x_in = x;
    bc.h1 = nn::layer_norm(x, b.ln1_gain, b.ln1_bias, bc.ln1);
    bc.q = nn::add_row(bc.h1.topRows(nq) * b.wq, b.bq);
    bc.k = nn::add_row(bc.h1 * b.wk, b.bk);
    bc.v = nn::add_row(bc.h1 * b.wv, b.bv);
    bc.o.resize(nq, cfg.d_model);
    bc.attention.resize(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Eigen::MatrixXd s = scale * bc.q.middleCols(h * dh, dh) * bc.k.middleCols(h * dh, dh).transpose();
      nn::softmax_rows_in_place(s);
      bc.o.middleCols(h * dh, dh).noalias() = s * bc.v.middleCols(h * dh, dh);
      bc.attention[static_cast<std::size_t>(h)] = std::move(s);
    }
    Eigen::MatrixXd z = nn::add_row(bc.o * b.wo, b.bo);
    if (drop) {
      bc.mask_attn = dropout_mask(z.rows(), z.cols());
      z = z.cwiseProduct(bc.mask_attn);
    }
    bc.x_mid = x.topRows(nq) + z;
    bc.h2 = nn::layer_norm(bc.x_mid, b.ln2_gain, b.ln2_bias, bc.ln2);
    bc.u = nn::add_row(bc.h2 * b.ff_w1, b.ff_b1);
    bc.g = nn::gelu(bc.u);
    Eigen::MatrixXd f = nn::add_row(bc.g * b.ff_w2, b.ff_b2);
    if (drop) {
      bc.mask_ff = dropout_mask(f.rows(), f.cols());
      f = f.cwiseProduct(bc.mask_ff);
    }
    x = bc.x_mid + f;
    if (!x.allFinite())
      throw Error("forward: non-finite activation in block " + std::to_string(bi));
  }
  c.cls_out = x.topRows(1);
  c.head_pre = c.cls_out * m.head_w1 + m.head_b1;
  c.head_act = nn::gelu(c.head_pre);
  c.logit = (c.head_act * m.head_w2 + m.head_b2)(0, 0);
  if (!std::isfinite(c.logit)) throw Error("forward: non-finite logit");
  return c.logit;
}

// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(logit).
inline void backward_sample(const FusionModel& m, const Eigen::MatrixXd& ts,
                            const Eigen::MatrixXd& static_row, const SampleCache& c,
                            double dlogit, FusionModel& grad) {
  const auto& cfg = m.config;
  const int heads = cfg.n_heads;
  const int dh = cfg.d_model / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Classification head.
  grad.head_b2(0, 0) += dlogit;
  grad.head_w2 += c.head_act.transpose() * dlogit;
  const Eigen::MatrixXd dpre = (m.head_w2.transpose() * dlogit).cwiseProduct(nn::gelu_grad(c.head_pre));
  grad.head_b1 += dpre;
  grad.head_w1 += c.cls_out.transpose() * dpre;

  Eigen::MatrixXd dx = dpre * m.head_w1.transpose();  // 1 x d: the last block keeps only the CLS row

  for (std::size_t bi = m.blocks.size(); bi-- > 0;) {
    const auto& b = m.blocks[bi];
    const auto& bc = c.blocks[bi];
    auto& gb = grad.blocks[bi];

    // Feed-forward branch.
    Eigen::MatrixXd df = bc.mask_ff.size() ? Eigen::MatrixXd(dx.cwiseProduct(bc.mask_ff)) : dx;
    gb.ff_b2 += df.colwise().sum();
    gb.ff_w2.noalias() += bc.g.transpose() * df;
    const Eigen::MatrixXd du = (df * b.ff_w2.transpose()).cwiseProduct(nn::gelu_grad(bc.u));
    gb.ff_b1 += du.colwise().sum();
    gb.ff_w1.noalias() += bc.h2.transpose() * du;
    const Eigen::MatrixXd dh2 = du * b.ff_w1.transpose();
    Eigen::MatrixXd dmid = dx + nn::layer_norm_backward(dh2, b.ln2_gain, bc.ln2, gb.ln2_gain, gb.ln2_bias);

    // Attention branch.
    Eigen::MatrixXd dz = bc.mask_attn.size() ? Eigen::MatrixXd(dmid.cwiseProduct(bc.mask_attn)) : dmid;
    gb.bo += dz.colwise().sum();
    gb.wo.noalias() += bc.o.transpose() * dz;
    const Eigen::MatrixXd dout = dz * b.wo.transpose();
    const Eigen::Index len = bc.k.rows();
    Eigen::MatrixXd dq(dout.rows(), cfg.d_model), dk(len, cfg.d_model), dv(len, cfg.d_model);
    for (int h = 0; h < heads; ++h) {
      const auto& a = bc.attention[static_cast<std::size_t>(h)];
      const Eigen::MatrixXd doh = dout.middleCols(h * dh, dh);
      const Eigen::MatrixXd da = doh * bc.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh).noalias() = a.transpose() * doh;
      const Eigen::VectorXd rowdot = da.cwiseProduct(a).rowwise().sum();
      const Eigen::MatrixXd ds = scale * a.cwiseProduct(da.colwise() - rowdot);
      dq.middleCols(h * dh, dh).noalias() = ds * bc.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() = ds.transpose() * bc.q.middleCols(h * dh, dh);
    }
    gb.bq += dq.colwise().sum();
    gb.bk += dk.colwise().sum();
    gb.bv += dv.colwise().sum();
    const Eigen::Index nq = dq.rows();
    gb.wq.noalias() += bc.h1.topRows(nq).transpose() * dq;
    gb.wk.noalias() += bc.h1.transpose() * dk;
    gb.wv.noalias() += bc.h1.transpose() * dv;
    Eigen::MatrixXd dh1 = dk * b.wk.transpose() + dv * b.wv.transpose();
    dh1.topRows(nq).noalias() += dq * b.wq.transpose();
    dx = nn::layer_norm_backward(dh1, b.ln1_gain, bc.ln1, gb.ln1_gain, gb.ln1_bias);
    dx.topRows(nq) += dmid;
  }

  // Embeddings.
  if (c.mask_embed.size() > 0) dx = dx.cwiseProduct(c.mask_embed);
  const int len = static_cast<int>(dx.rows());
  grad.pos.topRows(len) += dx;
  grad.cls += dx.topRows(1);
  const Eigen::MatrixXd dts = dx.bottomRows(cfg.time_steps);
  grad.in_b += dts.colwise().sum();
  grad.in_w.noalias() += ts.transpose() * dts;
  if (cfg.mode == FusionMode::multimodal) {
    const Eigen::MatrixXd dtok = dx.row(1);
    grad.static_b2 += dtok;
    grad.static_w2 += c.static_act.transpose() * dtok;
    const Eigen::MatrixXd dpre_s = (dtok * m.static_w2.transpose()).cwiseProduct(nn::gelu_grad(c.static_pre));
    grad.static_b1 += dpre_s;
    grad.static_w1 += (c.static_in.size() > 0 ? c.static_in : static_row).transpose() * dpre_s;
  }
}

inline constexpr double kProbClamp = 1e-7;

// Probabilities for every patient in `data` (eval mode unless opt says otherwise).
inline std::vector<double> forward(const FusionModel& m, const TensorSet& data,
                                   const ForwardOptions& opt = {}) {
  std::vector<double> p(data.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    p[i] = sigmoid(forward_sample(m, data.ts[i], data.statics.row(static_cast<Eigen::Index>(i)), opt));
  return p;
}

struct LossOptions {
  double positive_weight = 1.0;
  bool train_mode = false;  // dropout
  Rng* dropout_rng = nullptr;
};

// Mean (optionally class-weighted) binary cross-entropy with probabilities
// clamped to [1e-7, 1 - 1e-7]; gradients by full backpropagation.
inline double loss_and_gradients(const FusionModel& m, const TensorSet& batch, FusionModel& grad,
                                 const LossOptions& opt = {}) {
  if (batch.labels.size() != batch.size()) throw Error("loss_and_gradients: labels required");
  grad = zeros_like(m);
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  SampleCache cache;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Eigen::MatrixXd srow = batch.statics.row(static_cast<Eigen::Index>(i));
    const double z = forward_sample(m, batch.ts[i], srow, {opt.train_mode, opt.dropout_rng}, &cache);
    const double p_raw = sigmoid(z);
    const double p = std::clamp(p_raw, kProbClamp, 1.0 - kProbClamp);
    const bool y = batch.labels[i];
    const double w = y ? opt.positive_weight : 1.0;
    loss += -w * (y ? std::log(p) : std::log(1.0 - p)) * inv_b;
    const bool clamped = p != p_raw;
    const double dz = clamped ? 0.0 : w * (p_raw - (y ? 1.0 : 0.0)) * inv_b;
    if (dz != 0.0) backward_sample(m, batch.ts[i], srow, cache, dz, grad);
  }
  return loss;
}

struct TrainConfig {
  int epochs = 100;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int patience = 10;            // epochs without validation improvement
  bool class_weighting = false; // weight positives by n_neg / n_pos
  bool cosine_schedule = false; // lr decays as 0.5 (1 + cos(pi epoch / epochs))
  double ema_decay = 0.0;       // > 0: validate and checkpoint an EMA of the weights
  std::uint64_t seed = 0;

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"epochs", epochs},           {"batch_size", batch_size},
            {"learning_rate", learning_rate}, {"weight_decay", weight_decay},
            {"beta1", beta1},             {"beta2", beta2},
            {"adam_eps", adam_eps},       {"patience", patience},
            {"class_weighting", class_weighting}, {"cosine_schedule", cosine_schedule},
            {"ema_decay", ema_decay},     {"seed", seed}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig t;
    t.epochs = j.value("epochs", t.epochs);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.learning_rate = j.value("learning_rate", t.learning_rate);
    t.weight_decay = j.value("weight_decay", t.weight_decay);
    t.beta1 = j.value("beta1", t.beta1);
    t.beta2 = j.value("beta2", t.beta2);
    t.adam_eps = j.value("adam_eps", t.adam_eps);
    t.patience = j.value("patience", t.patience);
    t.class_weighting = j.value("class_weighting", t.class_weighting);
    t.cosine_schedule = j.value("cosine_schedule", t.cosine_schedule);
    t.ema_decay = j.value("ema_decay", t.ema_decay);
    t.seed = j.value("seed", t.seed);
    return t;
  }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_auroc;
};

struct TrainResult {
  FusionModel model;  // best-validation checkpoint
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  std::optional<double> best_val_auroc;
  bool early_stopped = false;
  bool diverged = false;
};

inline nlohmann::json history_to_json(const std::vector<EpochRecord>& h) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : h) {
    nlohmann::json e{{"epoch", r.epoch}, {"train_loss", r.train_loss}};
    e["val_auroc"] = r.val_auroc ? nlohmann::json(*r.val_auroc) : nlohmann::json(nullptr);
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<EpochRecord> history_from_json(const nlohmann::json& j) {
  std::vector<EpochRecord> out;
  for (const auto& e : j) {
    EpochRecord r;
    r.epoch = e.at("epoch").get<int>();
    r.train_loss = e.at("train_loss").get<double>();
    if (!e.at("val_auroc").is_null()) r.val_auroc = e.at("val_auroc").get<double>();
    out.push_back(r);
  }
  return out;
}

class AdamW {
 public:
  AdamW(const FusionModel& m, const TrainConfig& tc) : tc_(tc), m_(zeros_like(m)), v_(zeros_like(m)) {}

  void step(FusionModel& model, FusionModel& grad, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(tc_.beta1, t_);
    const double bc2 = 1.0 - std::pow(tc_.beta2, t_);
    auto params = param_list(model);
    auto grads = param_list(grad);
    auto ms = param_list(m_);
    auto vs = param_list(v_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Eigen::MatrixXd& p = *params[i].second;
      const Eigen::MatrixXd& g = *grads[i].second;
      Eigen::MatrixXd& m1 = *ms[i].second;
      Eigen::MatrixXd& m2 = *vs[i].second;
      m1 = tc_.beta1 * m1 + (1.0 - tc_.beta1) * g;
      m2 = tc_.beta2 * m2 + (1.0 - tc_.beta2) * g.cwiseProduct(g);
      if (tc_.weight_decay > 0.0 && param_is_decayed(params[i].first))
        p *= 1.0 - lr * tc_.weight_decay;
      p.array() -= lr * (m1.array() / bc1) /
                   ((m2.array() / bc2).sqrt() + tc_.adam_eps);
    }
  }

 private:
  TrainConfig tc_;
  FusionModel m_, v_;
  int t_ = 0;
};

inline std::optional<double> validation_auroc(const FusionModel& m, const TensorSet& val) {
  if (val.size() == 0) return std::nullopt;
  const auto n_pos = std::count(val.labels.begin(), val.labels.end(), true);
  if (n_pos == 0 || n_pos == static_cast<long>(val.size())) return std::nullopt;
  return auroc(forward(m, val), val.labels);
}

inline bool labels_have_both_classes(const std::vector<bool>& y) {
  const auto n_pos = std::count(y.begin(), y.end(), true);
  return n_pos > 0 && n_pos < static_cast<long>(y.size());
}

// AdamW with mini-batches reshuffled every epoch. The returned model is the
// epoch with the best validation AUROC (the last finite epoch when no usable
// validation set exists). Training stops after `patience` epochs without
// improvement or on a non-finite loss.
inline TrainResult train(const ModelConfig& cfg, const TensorSet& train_set, const TensorSet& val_set,
                         const TrainConfig& tc) {
  if (train_set.size() == 0) throw FitError("train: empty training set");
  if (train_set.labels.size() != train_set.size()) throw FitError("train: training labels missing");
  if (!labels_have_both_classes(train_set.labels))
    throw FitError("train: training labels contain a single class");
  if (tc.batch_size <= 0 || tc.epochs < 0) throw ConfigError("train: batch_size must be positive, epochs >= 0");
  if (!(tc.ema_decay >= 0.0 && tc.ema_decay < 1.0)) throw ConfigError("train: ema_decay must lie in [0,1)");

  TrainResult result;
  FusionModel model = init_model(cfg);
  result.model = model;
  AdamW opt(model, tc);
  FusionModel grad;
  const bool use_ema = tc.ema_decay > 0.0;
  FusionModel ema = model;

  LossOptions lo;
  lo.train_mode = cfg.dropout_rate > 0.0 || cfg.static_dropout > 0.0;
  if (tc.class_weighting) {
    const double n_pos = static_cast<double>(std::count(train_set.labels.begin(), train_set.labels.end(), true));
    lo.positive_weight = (static_cast<double>(train_set.size()) - n_pos) / n_pos;
  }
  const bool has_val = val_set.size() > 0 && labels_have_both_classes(val_set.labels);
  if (val_set.size() > 0 && !has_val)
    log_warn("train: validation set lacks both classes; keeping the last epoch");

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  int since_best = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    Rng shuffle_rng = make_rng(tc.seed, "train/shuffle/" + std::to_string(epoch));
    Rng drop_rng = make_rng(tc.seed, "train/dropout/" + std::to_string(epoch));
    lo.dropout_rng = &drop_rng;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const double lr = tc.cosine_schedule
                          ? 0.5 * tc.learning_rate * (1.0 + std::cos(std::numbers::pi * epoch / tc.epochs))
                          : tc.learning_rate;
    double loss_sum = 0.0;
    bool bad = false;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size));
      const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
      const TensorSet batch = train_set.subset(idx);
      double loss = 0.0;
      try {
        loss = loss_and_gradients(model, batch, grad, lo);
      } catch (const Error&) {
        bad = true;
        break;
      }
      if (!std::isfinite(loss)) {
        bad = true;
        break;
      }
      loss_sum += loss * static_cast<double>(idx.size());
      opt.step(model, grad, lr);
      if (use_ema) {
        auto e = param_list(ema);
        const auto p = param_list(model);
        for (std::size_t i = 0; i < e.size(); ++i)
          *e[i].second = tc.ema_decay * *e[i].second + (1.0 - tc.ema_decay) * *p[i].second;
      }
    }
    if (bad) {
      log_warn("train: non-finite loss at epoch " + std::to_string(epoch) + "; returning last good checkpoint");
      result.diverged = true;
      break;
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(order.size()), std::nullopt};
    const FusionModel& current = use_ema ? ema : model;
    if (has_val) rec.val_auroc = validation_auroc(current, val_set);
    result.history.push_back(rec);
    log(LogLevel::debug, "epoch " + std::to_string(epoch) + " loss " + format_double(rec.train_loss) +
                             (rec.val_auroc ? " val_auroc " + format_double(*rec.val_auroc) : ""));
    if (!has_val) {
      result.model = current;
      result.best_epoch = epoch;
      continue;
    }
    if (!result.best_val_auroc || *rec.val_auroc > *result.best_val_auroc) {
      result.best_val_auroc = rec.val_auroc;
      result.best_epoch = epoch;
      result.model = current;
      since_best = 0;
    } else if (++since_best >= tc.patience) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

inline std::vector<double> predict(const FusionModel& m, const TensorSet& data) { return forward(m, data); }

// Versioned JSON checkpoint: config, named parameters with shapes and flat
// row-major float64 data, training history and seed.
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json checkpoint_to_json(const FusionModel& m, const std::vector<EpochRecord>& history = {}) {
  nlohmann::json params = nlohmann::json::object();
  for_each_param(m, [&](const std::string& name, const Eigen::MatrixXd& p) {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(p.size()));
    for (Eigen::Index r = 0; r < p.rows(); ++r)
      for (Eigen::Index c = 0; c < p.cols(); ++c) flat.push_back(p(r, c));
    params[name] = {{"shape", {p.rows(), p.cols()}}, {"data", std::move(flat)}};
  });
  return {{"format", "gpfusion-fusion-checkpoint"},
          {"version", kCheckpointVersion},
          {"config", m.config.to_json()},
          {"seed", m.config.seed},
          {"parameters", std::move(params)},
          {"history", history_to_json(history)}};
}

inline FusionModel checkpoint_from_json(const nlohmann::json& j, std::vector<EpochRecord>* history = nullptr) {
  if (j.value("format", std::string()) != "gpfusion-fusion-checkpoint")
    throw SchemaError("checkpoint: unrecognized format");
  if (j.value("version", 0) != kCheckpointVersion)
    throw SchemaError("checkpoint: unsupported version " + j.value("version", nlohmann::json(0)).dump());
  FusionModel m = zero_model(ModelConfig::from_json(j.at("config")));
  const auto& params = j.at("parameters");
  for_each_param(m, [&](const std::string& name, Eigen::MatrixXd& p) {
    if (!params.contains(name)) throw SchemaError("checkpoint: missing parameter '" + name + "'");
    const auto& e = params.at(name);
    const auto shape = e.at("shape").get<std::vector<Eigen::Index>>();
    if (shape.size() != 2 || shape[0] != p.rows() || shape[1] != p.cols())
      throw SchemaError("checkpoint: shape mismatch for '" + name + "'");
    const auto data = e.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != p.size())
      throw SchemaError("checkpoint: data length mismatch for '" + name + "'");
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < p.rows(); ++r)
      for (Eigen::Index c = 0; c < p.cols(); ++c) p(r, c) = data[k++];
  });
  if (history && j.contains("history")) *history = history_from_json(j.at("history"));
  return m;
}

inline bool models_equal(const FusionModel& a, const FusionModel& b) {
  if (a.config.to_json() != b.config.to_json()) return false;
  std::vector<const Eigen::MatrixXd*> pb;
  for_each_param(b, [&](const std::string&, const Eigen::MatrixXd& p) { pb.push_back(&p); });
  std::size_t i = 0;
  bool same = true;
  for_each_param(a, [&](const std::string&, const Eigen::MatrixXd& p) {
    same = same && i < pb.size() && p.rows() == pb[i]->rows() && p.cols() == pb[i]->cols() && p == *pb[i];
    ++i;
  });
  return same && i == pb.size();
}

}  // namespace gpfusion
