#include "tim/network.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "tim/errors.hpp"
#include "tim/rng.hpp"

namespace tim {

std::string_view to_string(Backbone b) {
  return b == Backbone::Mlp ? "mlp" : "token_attention";
}

std::string_view to_string(IntervalInput i) { return i == IntervalInput::CNoise ? "c_noise" : "raw"; }

Backbone backbone_from_string(std::string_view name) {
  if (name == "mlp") return Backbone::Mlp;
  if (name == "token_attention") return Backbone::TokenAttention;
  throw ConfigError("unknown backbone '" + std::string(name) + "'");
}

IntervalInput interval_input_from_string(std::string_view name) {
  if (name == "c_noise") return IntervalInput::CNoise;
  if (name == "raw") return IntervalInput::Raw;
  throw ConfigError("unknown interval input '" + std::string(name) + "'");
}

void validate(const NetworkConfig& cfg) {
  auto fail = [](const std::string& m) { throw ShapeError("network config: " + m); };
  if (cfg.dim < 1 || cfg.width < 1 || cfg.depth < 1 || cfg.embed_dim < 1 || cfg.fourier_bands < 1)
    fail("dim, width, depth, embed_dim and fourier_bands must be positive");
  if (cfg.n_classes < 0) fail("n_classes must be non-negative");
  if (cfg.backbone == Backbone::TokenAttention) {
    if (cfg.n_heads < 1 || cfg.width % cfg.n_heads != 0) fail("width must be divisible by n_heads");
    if (cfg.n_tokens < 1 || cfg.dim % cfg.n_tokens != 0) fail("dim must be divisible by n_tokens");
  }
}

std::size_t ParamLayout::add(std::string name, Eigen::Index rows, Eigen::Index cols) {
  blocks_.push_back({std::move(name), size_, rows, cols});
  size_ += rows * cols;
  return blocks_.size() - 1;
}

const ParamBlock& ParamLayout::find(std::string_view name) const {
  for (const auto& b : blocks_)
    if (b.name == name) return b;
  throw std::out_of_range("no parameter block '" + std::string(name) + "'");
}

std::string ParamLayout::serialize() const {
  std::ostringstream os;
  for (const auto& b : blocks_) os << b.name << ' ' << b.offset << ' ' << b.rows << ' ' << b.cols << '\n';
  return os.str();
}

ParamLayout ParamLayout::parse(std::string_view text) {
  ParamLayout layout;
  std::istringstream is{std::string(text)};
  std::string name;
  Eigen::Index offset, rows, cols;
  while (is >> name >> offset >> rows >> cols) {
    if (offset != layout.size_) throw ShapeError("layout manifest: non-contiguous block '" + name + "'");
    layout.add(name, rows, cols);
  }
  return layout;
}

namespace {

constexpr double kNormEps = 1e-5;

template <typename M>
M silu(const M& z) {
  using S = typename M::Scalar;
  return (z.array() / (S(1) + (-z.array()).exp())).matrix();
}

template <typename M>
M silu_grad(const M& z) {
  using S = typename M::Scalar;
  const auto sig = (S(1) / (S(1) + (-z.array()).exp())).eval();
  return (sig * (S(1) + z.array() * (S(1) - sig))).matrix();
}

template <typename Scalar, typename Norm>
void layer_norm(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& h, Norm& out) {
  using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
  const RowVec mean = h.colwise().mean();
  out.n = h.rowwise() - mean;
  const RowVec var = out.n.array().square().colwise().mean();
  out.inv = (var.array() + Scalar(kNormEps)).rsqrt().transpose();
  out.n = out.n * out.inv.asDiagonal();
}

template <typename Scalar, typename Norm>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> layer_norm_backward(
    const Norm& c, const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& dn) {
  using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
  const RowVec m1 = dn.colwise().mean();
  const RowVec m2 = (dn.array() * c.n.array()).colwise().mean();
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out = dn.rowwise() - m1;
  out -= c.n * m2.asDiagonal();
  return out * c.inv.asDiagonal();
}

// u = n * (1 + scale) + shift, scale and shift broadcast across columns.
template <typename Scalar, typename V>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> modulate_cols(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& n, const V& scale, const V& shift) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> u =
      (n.array().colwise() * (scale.array() + Scalar(1))).matrix();
  u.colwise() += shift;
  return u;
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> fourier_features(const Eigen::VectorXd& u,
                                                                        int bands) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> f(2 * bands + 1, u.size());
  for (Eigen::Index j = 0; j < u.size(); ++j) {
    const Scalar v = static_cast<Scalar>(u(j));
    f(0, j) = v;
    Scalar freq = 1;
    for (int k = 0; k < bands; ++k, freq *= 2) {
      f(1 + k, j) = std::sin(freq * v);
      f(1 + bands + k, j) = std::cos(freq * v);
    }
  }
  return f;
}

}  // namespace

template <typename Scalar>
typename Network<Scalar>::EncoderIds Network<Scalar>::add_encoder(const std::string& prefix) {
  const Eigen::Index e = cfg_.embed_dim;
  EncoderIds ids{};
  ids.w1 = layout_.add(prefix + ".w1", e, 2 * cfg_.fourier_bands + 1);
  ids.b1 = layout_.add(prefix + ".b1", e, 1);
  ids.w2 = layout_.add(prefix + ".w2", e, e);
  ids.b2 = layout_.add(prefix + ".b2", e, 1);
  return ids;
}

template <typename Scalar>
Network<Scalar>::Network(NetworkConfig cfg, TransportSpec spec) : cfg_(cfg), spec_(spec) {
  validate(cfg_);
  const Eigen::Index w = cfg_.width, e = cfg_.embed_dim;
  const bool tokens = cfg_.backbone == Backbone::TokenAttention;
  const Eigen::Index in = tokens ? cfg_.token_dim() : cfg_.dim;

  enc_t_ = add_encoder("embed_t");
  enc_dt_ = add_encoder("embed_dt");
  if (cfg_.n_classes > 0) class_emb_ = layout_.add("embed_class", e, cfg_.n_classes + 1);
  in_w_ = layout_.add("in.w", w, in);
  in_b_ = layout_.add("in.b", w, 1);
  if (tokens) pos_ = layout_.add("in.pos", w, cfg_.n_tokens);

  for (int l = 0; l < cfg_.depth; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    BlockIds b{};
    b.mod_w = layout_.add(p + "mod.w", (tokens ? 6 : 3) * w, e);
    b.mod_b = layout_.add(p + "mod.b", (tokens ? 6 : 3) * w, 1);
    if (tokens) {
      b.wq = layout_.add(p + "attn.wq", w, w);
      b.bq = layout_.add(p + "attn.bq", w, 1);
      b.wk = layout_.add(p + "attn.wk", w, w);
      b.bk = layout_.add(p + "attn.bk", w, 1);
      b.wv = layout_.add(p + "attn.wv", w, w);
      b.bv = layout_.add(p + "attn.bv", w, 1);
      b.wq_int = layout_.add(p + "attn.wq_interval", w, e);
      b.wk_int = layout_.add(p + "attn.wk_interval", w, e);
      b.wv_int = layout_.add(p + "attn.wv_interval", w, e);
      b.wo = layout_.add(p + "attn.wo", w, w);
      b.bo = layout_.add(p + "attn.bo", w, 1);
    }
    b.w1 = layout_.add(p + "mlp.w1", w, w);
    b.b1 = layout_.add(p + "mlp.b1", w, 1);
    b.w2 = layout_.add(p + "mlp.w2", w, w);
    b.b2 = layout_.add(p + "mlp.b2", w, 1);
    blocks_.push_back(b);
  }
  final_mod_w_ = layout_.add("final.mod.w", 2 * w, e);
  final_mod_b_ = layout_.add("final.mod.b", 2 * w, 1);
  out_w_ = layout_.add("out.w", in, w);
  out_b_ = layout_.add("out.b", in, 1);
}

template <typename Scalar>
NetworkParams<Scalar> Network<Scalar>::init_params() const {
  NetworkParams<Scalar> p{layout_, Vector::Zero(layout_.size())};
  Rng rng(cfg_.seed);
  for (std::size_t i = 0; i < layout_.blocks().size(); ++i) {
    const ParamBlock& b = layout_[i];
    if (b.cols == 1 || i == out_w_) continue;
    const double std = (cfg_.n_classes > 0 && i == class_emb_) ? 0.5 : 1.0 / std::sqrt(double(b.cols));
    auto v = p.view(b);
    for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] = static_cast<Scalar>(rng.normal(0.0, std));
  }
  return p;
}

template <typename Scalar>
NetworkParams<Scalar> Network<Scalar>::random_params(std::uint64_t seed, double scale) const {
  NetworkParams<Scalar> p{layout_, Vector::Zero(layout_.size())};
  Rng rng(seed);
  for (const ParamBlock& b : layout_.blocks()) {
    const double std = scale * (b.cols == 1 ? 0.5 : 1.0 / std::sqrt(double(b.cols)));
    auto v = p.view(b);
    for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] = static_cast<Scalar>(rng.normal(0.0, std));
  }
  return p;
}

template <typename Scalar>
typename Network<Scalar>::Matrix Network<Scalar>::forward(const NetworkParams<Scalar>& params,
                                                          const Matrix& x, const Eigen::VectorXd& t,
                                                          const Eigen::VectorXd& r,
                                                          std::span<const int> classes,
                                                          ForwardCache<Scalar>* cache) const {
  const Eigen::Index batch = x.cols();
  if (params.values.size() != layout_.size()) throw ShapeError("forward: parameter size mismatch");
  if (x.rows() != cfg_.dim) throw ShapeError("forward: input dimension mismatch");
  if (t.size() != batch || r.size() != batch) throw ShapeError("forward: time batch mismatch");
  if (!classes.empty() && static_cast<Eigen::Index>(classes.size()) != batch)
    throw ShapeError("forward: class batch mismatch");
  if (!x.allFinite() || !t.allFinite() || !r.allFinite()) throw NumericAbort("forward: non-finite input");

  ForwardCache<Scalar> local;
  ForwardCache<Scalar>& c = cache ? *cache : local;
  c = ForwardCache<Scalar>{};
  c.param_count = layout_.size();
  c.batch = batch;
  c.x = x;

  // Conditioning: E = phi_t(c(t)) + phi_dt(interval) + E_c.
  Eigen::VectorXd ct(batch), cd(batch);
  for (Eigen::Index j = 0; j < batch; ++j) {
    ct(j) = c_noise(spec_, t(j));
    cd(j) = cfg_.interval_input == IntervalInput::CNoise ? ct(j) - c_noise(spec_, r(j)) : t(j) - r(j);
  }
  auto encode = [&](const EncoderIds& ids, const Eigen::VectorXd& u, typename ForwardCache<Scalar>::Encoder& e) {
    e.features = fourier_features<Scalar>(u, cfg_.fourier_bands);
    e.pre = params.view(layout_[ids.w1]) * e.features;
    e.pre.colwise() += params.view(layout_[ids.b1]).col(0);
    e.act = silu(e.pre);
    Matrix out = params.view(layout_[ids.w2]) * e.act;
    out.colwise() += params.view(layout_[ids.b2]).col(0);
    return out;
  };
  const Matrix e_t = encode(enc_t_, ct, c.enc_t);
  c.e_dt = encode(enc_dt_, cd, c.enc_dt);
  c.e_sum = e_t + c.e_dt;
  if (cfg_.n_classes > 0) {
    c.classes.resize(batch);
    const auto table = params.view(layout_[class_emb_]);
    for (Eigen::Index j = 0; j < batch; ++j) {
      int id = classes.empty() ? -1 : classes[j];
      if (id >= cfg_.n_classes) throw ShapeError("forward: class id out of range");
      if (id < 0) id = cfg_.n_classes;
      c.classes[j] = id;
      c.e_sum.col(j) += table.col(id);
    }
  }
  c.s = silu(c.e_sum);
  for (const BlockIds& b : blocks_) {
    Matrix mod = params.view(layout_[b.mod_w]) * c.s;
    mod.colwise() += params.view(layout_[b.mod_b]).col(0);
    c.block_mod.push_back(std::move(mod));
  }
  c.final_mod = params.view(layout_[final_mod_w_]) * c.s;
  c.final_mod.colwise() += params.view(layout_[final_mod_b_]).col(0);

  const Eigen::Index w = cfg_.width;
  const auto out_w = params.view(layout_[out_w_]);
  const auto out_b = params.view(layout_[out_b_]).col(0);

  if (cfg_.backbone == Backbone::Mlp) {
    Matrix h = params.view(layout_[in_w_]) * x;
    h.colwise() += params.view(layout_[in_b_]).col(0);
    c.mlp.resize(blocks_.size());
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const BlockIds& b = blocks_[l];
      auto& bc = c.mlp[l];
      const Matrix& mod = c.block_mod[l];
      layer_norm(h, bc.norm);
      bc.u = (bc.norm.n.array() * (mod.topRows(w).array() + Scalar(1)) + mod.middleRows(w, w).array()).matrix();
      bc.z1 = params.view(layout_[b.w1]) * bc.u;
      bc.z1.colwise() += params.view(layout_[b.b1]).col(0);
      bc.a = silu(bc.z1);
      bc.z2 = params.view(layout_[b.w2]) * bc.a;
      bc.z2.colwise() += params.view(layout_[b.b2]).col(0);
      h.array() += mod.bottomRows(w).array() * bc.z2.array();
    }
    layer_norm(h, c.final_norm);
    c.u_final = (c.final_norm.n.array() * (c.final_mod.topRows(w).array() + Scalar(1)) +
                 c.final_mod.bottomRows(w).array())
                    .matrix();
    Matrix out = out_w * c.u_final;
    out.colwise() += out_b;
    return out;
  }

  // Token backbone with interval-aware attention.
  const Eigen::Index n_tok = cfg_.n_tokens, d_tok = cfg_.token_dim();
  const Eigen::Index heads = cfg_.n_heads, dh = w / heads;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
  Matrix out(cfg_.dim, batch);
  c.tokens.resize(batch);
  for (Eigen::Index j = 0; j < batch; ++j) {
    auto& sc = c.tokens[j];
    sc.blocks.resize(blocks_.size());
    const Matrix xt = Eigen::Map<const Matrix>(x.col(j).data(), d_tok, n_tok);
    Matrix h = params.view(layout_[in_w_]) * xt;
    h.colwise() += params.view(layout_[in_b_]).col(0);
    h += params.view(layout_[pos_]);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const BlockIds& b = blocks_[l];
      auto& bc = sc.blocks[l];
      const Vector mod = c.block_mod[l].col(j);
      layer_norm(h, bc.norm1);
      bc.u1 = modulate_cols<Scalar>(bc.norm1.n, mod.segment(0, w), mod.segment(w, w));
      const Vector e_int = c.e_dt.col(j);
      auto project = [&](std::size_t wi, std::size_t bi, std::size_t wint) {
        Matrix m = params.view(layout_[wi]) * bc.u1;
        const Vector bias = params.view(layout_[bi]).col(0) + params.view(layout_[wint]) * e_int;
        m.colwise() += bias;
        return m;
      };
      bc.q = project(b.wq, b.bq, b.wq_int);
      bc.k = project(b.wk, b.bk, b.wk_int);
      bc.v = project(b.wv, b.bv, b.wv_int);
      bc.o.resize(w, n_tok);
      bc.probs.resize(heads);
      for (Eigen::Index hh = 0; hh < heads; ++hh) {
        Matrix logits = bc.q.middleRows(hh * dh, dh).transpose() * bc.k.middleRows(hh * dh, dh) * scale;
        for (Eigen::Index i = 0; i < n_tok; ++i) {
          const Scalar mx = logits.row(i).maxCoeff();
          logits.row(i) = (logits.row(i).array() - mx).exp().matrix();
          logits.row(i) /= logits.row(i).sum();
        }
        bc.o.middleRows(hh * dh, dh) = bc.v.middleRows(hh * dh, dh) * logits.transpose();
        bc.probs[hh] = std::move(logits);
      }
      bc.attn = params.view(layout_[b.wo]) * bc.o;
      bc.attn.colwise() += params.view(layout_[b.bo]).col(0);
      h += (bc.attn.array().colwise() * mod.segment(2 * w, w).array()).matrix();

      layer_norm(h, bc.norm2);
      bc.u2 = modulate_cols<Scalar>(bc.norm2.n, mod.segment(3 * w, w), mod.segment(4 * w, w));
      bc.z1 = params.view(layout_[b.w1]) * bc.u2;
      bc.z1.colwise() += params.view(layout_[b.b1]).col(0);
      bc.a = silu(bc.z1);
      bc.z2 = params.view(layout_[b.w2]) * bc.a;
      bc.z2.colwise() += params.view(layout_[b.b2]).col(0);
      h += (bc.z2.array().colwise() * mod.segment(5 * w, w).array()).matrix();
    }
    layer_norm(h, sc.final_norm);
    const Vector fm = c.final_mod.col(j);
    sc.u_final = modulate_cols<Scalar>(sc.final_norm.n, fm.segment(0, w), fm.segment(w, w));
    Matrix y = out_w * sc.u_final;
    y.colwise() += out_b;
    out.col(j) = Eigen::Map<const Vector>(y.data(), cfg_.dim);
  }
  return out;
}

template <typename Scalar>
NetworkGrads<Scalar> Network<Scalar>::backward(const NetworkParams<Scalar>& params,
                                               const ForwardCache<Scalar>& c,
                                               const Matrix& dout) const {
  if (params.values.size() != layout_.size() || c.param_count != layout_.size())
    throw ShapeError("backward: parameters do not match the cached forward state");
  if (dout.rows() != cfg_.dim || dout.cols() != c.batch)
    throw ShapeError("backward: output gradient shape mismatch");

  NetworkGrads<Scalar> g{layout_, Vector::Zero(layout_.size())};
  auto P = [&](std::size_t i) { return params.view(layout_[i]); };
  auto G = [&](std::size_t i) { return g.view(layout_[i]); };

  const Eigen::Index w = cfg_.width, batch = c.batch;
  Matrix ds = Matrix::Zero(cfg_.embed_dim, batch);  // d loss / d silu(E)
  Matrix de_dt_extra = Matrix::Zero(cfg_.embed_dim, batch);
  std::vector<Matrix> dmod(blocks_.size());
  Matrix dfinal_mod(2 * w, batch);

  if (cfg_.backbone == Backbone::Mlp) {
    G(out_w_) = dout * c.u_final.transpose();
    G(out_b_) = dout.rowwise().sum();
    const Matrix du = P(out_w_).transpose() * dout;
    dfinal_mod.topRows(w) = (du.array() * c.final_norm.n.array()).matrix();
    dfinal_mod.bottomRows(w) = du;
    Matrix dh = layer_norm_backward<Scalar>(
        c.final_norm, Matrix((du.array() * (c.final_mod.topRows(w).array() + Scalar(1))).matrix()));

    for (std::size_t li = blocks_.size(); li-- > 0;) {
      const BlockIds& b = blocks_[li];
      const auto& bc = c.mlp[li];
      const Matrix& mod = c.block_mod[li];
      dmod[li].resize(3 * w, batch);
      const Matrix dz2 = (dh.array() * mod.bottomRows(w).array()).matrix();
      dmod[li].bottomRows(w) = (dh.array() * bc.z2.array()).matrix();
      G(b.w2) += dz2 * bc.a.transpose();
      G(b.b2) += dz2.rowwise().sum();
      const Matrix dz1 = ((P(b.w2).transpose() * dz2).array() * silu_grad(bc.z1).array()).matrix();
      G(b.w1) += dz1 * bc.u.transpose();
      G(b.b1) += dz1.rowwise().sum();
      const Matrix dub = P(b.w1).transpose() * dz1;
      dmod[li].topRows(w) = (dub.array() * bc.norm.n.array()).matrix();
      dmod[li].middleRows(w, w) = dub;
      dh += layer_norm_backward<Scalar>(bc.norm,
                                        Matrix((dub.array() * (mod.topRows(w).array() + Scalar(1))).matrix()));
    }
    G(in_w_) = dh * c.x.transpose();
    G(in_b_) = dh.rowwise().sum();
  } else {
    const Eigen::Index n_tok = cfg_.n_tokens, d_tok = cfg_.token_dim();
    const Eigen::Index heads = cfg_.n_heads, dh_size = w / heads;
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh_size));
    for (std::size_t li = 0; li < blocks_.size(); ++li) dmod[li].resize(6 * w, batch);

    for (Eigen::Index j = 0; j < batch; ++j) {
      const auto& sc = c.tokens[j];
      const Matrix dy = Eigen::Map<const Matrix>(dout.col(j).data(), d_tok, n_tok);
      G(out_w_) += dy * sc.u_final.transpose();
      G(out_b_) += dy.rowwise().sum();
      const Matrix du = P(out_w_).transpose() * dy;
      const Vector fm = c.final_mod.col(j);
      dfinal_mod.col(j).head(w) = (du.array() * sc.final_norm.n.array()).rowwise().sum().matrix();
      dfinal_mod.col(j).tail(w) = du.rowwise().sum();
      Matrix dh = layer_norm_backward<Scalar>(
          sc.final_norm, Matrix((du.array().colwise() * (fm.head(w).array() + Scalar(1))).matrix()));
      const Vector e_int = c.e_dt.col(j);

      for (std::size_t li = blocks_.size(); li-- > 0;) {
        const BlockIds& b = blocks_[li];
        const auto& bc = sc.blocks[li];
        const Vector mod = c.block_mod[li].col(j);
        auto dm = dmod[li].col(j);

        // MLP sub-layer
        const Matrix dz2 = (dh.array().colwise() * mod.segment(5 * w, w).array()).matrix();
        dm.segment(5 * w, w) = (dh.array() * bc.z2.array()).rowwise().sum().matrix();
        G(b.w2) += dz2 * bc.a.transpose();
        G(b.b2) += dz2.rowwise().sum();
        const Matrix dz1 = ((P(b.w2).transpose() * dz2).array() * silu_grad(bc.z1).array()).matrix();
        G(b.w1) += dz1 * bc.u2.transpose();
        G(b.b1) += dz1.rowwise().sum();
        const Matrix du2 = P(b.w1).transpose() * dz1;
        dm.segment(3 * w, w) = (du2.array() * bc.norm2.n.array()).rowwise().sum().matrix();
        dm.segment(4 * w, w) = du2.rowwise().sum();
        dh += layer_norm_backward<Scalar>(
            bc.norm2, Matrix((du2.array().colwise() * (mod.segment(3 * w, w).array() + Scalar(1))).matrix()));

        // Attention sub-layer
        const Matrix dattn = (dh.array().colwise() * mod.segment(2 * w, w).array()).matrix();
        dm.segment(2 * w, w) = (dh.array() * bc.attn.array()).rowwise().sum().matrix();
        G(b.wo) += dattn * bc.o.transpose();
        G(b.bo) += dattn.rowwise().sum();
        const Matrix d_o = P(b.wo).transpose() * dattn;
        Matrix dq(w, n_tok), dk(w, n_tok), dv(w, n_tok);
        for (Eigen::Index hh = 0; hh < heads; ++hh) {
          const Matrix& prob = bc.probs[hh];
          const Matrix doh = d_o.middleRows(hh * dh_size, dh_size);
          dv.middleRows(hh * dh_size, dh_size) = doh * prob;
          const Matrix dprob = doh.transpose() * bc.v.middleRows(hh * dh_size, dh_size);
          const Vector row_dot = (dprob.array() * prob.array()).rowwise().sum().matrix();
          const Matrix dlogits = (prob.array() * (dprob.colwise() - row_dot).array()).matrix() * scale;
          dq.middleRows(hh * dh_size, dh_size) = bc.k.middleRows(hh * dh_size, dh_size) * dlogits.transpose();
          dk.middleRows(hh * dh_size, dh_size) = bc.q.middleRows(hh * dh_size, dh_size) * dlogits;
        }
        auto project_back = [&](const Matrix& d, std::size_t wi, std::size_t bi, std::size_t wint) {
          G(wi) += d * bc.u1.transpose();
          const Vector dbias = d.rowwise().sum();
          G(bi) += dbias;
          G(wint) += dbias * e_int.transpose();
          de_dt_extra.col(j) += P(wint).transpose() * dbias;
        };
        project_back(dq, b.wq, b.bq, b.wq_int);
        project_back(dk, b.wk, b.bk, b.wk_int);
        project_back(dv, b.wv, b.bv, b.wv_int);
        const Matrix du1 = P(b.wq).transpose() * dq + P(b.wk).transpose() * dk + P(b.wv).transpose() * dv;
        dm.segment(0, w) = (du1.array() * bc.norm1.n.array()).rowwise().sum().matrix();
        dm.segment(w, w) = du1.rowwise().sum();
        dh += layer_norm_backward<Scalar>(
            bc.norm1, Matrix((du1.array().colwise() * (mod.segment(0, w).array() + Scalar(1))).matrix()));
      }
      const Matrix xt = Eigen::Map<const Matrix>(c.x.col(j).data(), d_tok, n_tok);
      G(in_w_) += dh * xt.transpose();
      G(in_b_) += dh.rowwise().sum();
      G(pos_) += dh;
    }
  }

  // Modulation layers read silu(E).
  for (std::size_t li = 0; li < blocks_.size(); ++li) {
    const BlockIds& b = blocks_[li];
    G(b.mod_w) = dmod[li] * c.s.transpose();
    G(b.mod_b) = dmod[li].rowwise().sum();
    ds += P(b.mod_w).transpose() * dmod[li];
  }
  G(final_mod_w_) = dfinal_mod * c.s.transpose();
  G(final_mod_b_) = dfinal_mod.rowwise().sum();
  ds += P(final_mod_w_).transpose() * dfinal_mod;

  const Matrix de = (ds.array() * silu_grad(c.e_sum).array()).matrix();
  if (cfg_.n_classes > 0) {
    auto table = G(class_emb_);
    for (Eigen::Index j = 0; j < batch; ++j) table.col(c.classes[j]) += de.col(j);
  }
  auto encoder_back = [&](const EncoderIds& ids, const typename ForwardCache<Scalar>::Encoder& e,
                          const Matrix& d_out) {
    G(ids.w2) += d_out * e.act.transpose();
    G(ids.b2) += d_out.rowwise().sum();
    const Matrix dpre = ((P(ids.w2).transpose() * d_out).array() * silu_grad(e.pre).array()).matrix();
    G(ids.w1) += dpre * e.features.transpose();
    G(ids.b1) += dpre.rowwise().sum();
  };
  encoder_back(enc_t_, c.enc_t, de);
  encoder_back(enc_dt_, c.enc_dt, Matrix(de + de_dt_extra));
  return g;
}

template <typename Scalar>
typename Network<Scalar>::Matrix Network<Scalar>::conditioning(const NetworkParams<Scalar>& params,
                                                               const Eigen::VectorXd& t,
                                                               const Eigen::VectorXd& r,
                                                               std::span<const int> classes) const {
  ForwardCache<Scalar> c;
  forward(params, Matrix::Zero(cfg_.dim, t.size()), t, r, classes, &c);
  return c.e_sum;
}

template class Network<float>;
template class Network<double>;

}  // namespace tim
