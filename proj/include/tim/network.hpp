#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "tim/transition.hpp"
#include "tim/transport.hpp"

namespace tim {

enum class Backbone { Mlp, TokenAttention };
/// What the interval encoder consumes: c_noise(t) - c_noise(r) or raw t - r.
enum class IntervalInput { CNoise, Raw };

std::string_view to_string(Backbone b);
std::string_view to_string(IntervalInput i);
Backbone backbone_from_string(std::string_view name);
IntervalInput interval_input_from_string(std::string_view name);

struct NetworkConfig {
  Backbone backbone = Backbone::Mlp;
  int dim = 2;  ///< data dimension = n_tokens * token_dim
  int width = 96;
  int depth = 2;
  int embed_dim = 64;
  int n_heads = 1;   ///< TokenAttention only
  int n_tokens = 1;  ///< TokenAttention only
  int n_classes = 0;  ///< 0 = unconditional
  int fourier_bands = 6;
  IntervalInput interval_input = IntervalInput::CNoise;
  std::uint64_t seed = 0;

  int token_dim() const { return dim / n_tokens; }
  bool operator==(const NetworkConfig&) const = default;
};

/// Throws ShapeError on inconsistent sizes.
void validate(const NetworkConfig& cfg);

struct ParamBlock {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  Eigen::Index size() const { return rows * cols; }
  bool operator==(const ParamBlock&) const = default;
};

/// Name -> (offset, shape) manifest of a flat parameter vector.
class ParamLayout {
 public:
  /// Appends a block and returns its index.
  std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols);
  const ParamBlock& operator[](std::size_t i) const { return blocks_[i]; }
  const ParamBlock& find(std::string_view name) const;
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  Eigen::Index size() const { return size_; }

  /// One "name offset rows cols" line per block.
  std::string serialize() const;
  static ParamLayout parse(std::string_view text);

  bool operator==(const ParamLayout&) const = default;

 private:
  std::vector<ParamBlock> blocks_;
  Eigen::Index size_ = 0;
};

template <typename Scalar>
struct NetworkParams {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  ParamLayout layout;
  Vector values;

  Eigen::Map<const Matrix> view(const ParamBlock& b) const {
    return {values.data() + b.offset, b.rows, b.cols};
  }
  Eigen::Map<Matrix> view(const ParamBlock& b) { return {values.data() + b.offset, b.rows, b.cols}; }
  Eigen::Map<Matrix> view(std::string_view name) { return view(layout.find(name)); }

  void set_zero() { values.setZero(); }
  bool operator==(const NetworkParams& o) const {
    return layout == o.layout && values.size() == o.values.size() && values == o.values;
  }
};

/// Gradients share the parameter layout.
template <typename Scalar>
using NetworkGrads = NetworkParams<Scalar>;

template <typename To, typename From>
NetworkParams<To> cast_params(const NetworkParams<From>& p) {
  return {p.layout, p.values.template cast<To>()};
}

/// ema <- decay * ema + (1 - decay) * params.
template <typename Scalar>
void ema_update(NetworkParams<Scalar>& ema, const NetworkParams<Scalar>& params, double decay) {
  if (!(ema.layout == params.layout)) throw std::invalid_argument("ema_update: layout mismatch");
  const auto d = static_cast<Scalar>(decay);
  ema.values = d * ema.values + (Scalar(1) - d) * params.values;
}

template <typename Scalar>
struct ForwardCache;

/// Transition backbone F(x, c_noise(t), c_noise(r)) with decoupled time and
/// interval encoders, AdaLN-style per-block modulation and, for the token
/// backbone, interval-aware attention. Gradients are written by hand.
template <typename Scalar>
class Network {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Network(NetworkConfig cfg, TransportSpec spec);

  const NetworkConfig& config() const { return cfg_; }
  const TransportSpec& transport() const { return spec_; }
  const ParamLayout& layout() const { return layout_; }

  /// Seeded from config().seed. The output projection starts at zero.
  NetworkParams<Scalar> init_params() const;
  /// Every block drawn at random, output projection included.
  NetworkParams<Scalar> random_params(std::uint64_t seed, double scale = 1.0) const;

  /// x holds one sample per column; t and r are raw times. Class ids of -1
  /// (or an empty span) select the null class embedding.
  Matrix forward(const NetworkParams<Scalar>& params, const Matrix& x, const Eigen::VectorXd& t,
                 const Eigen::VectorXd& r, std::span<const int> classes = {},
                 ForwardCache<Scalar>* cache = nullptr) const;

  /// Reverse-mode gradient of <forward(...), out_grad> with respect to params.
  NetworkGrads<Scalar> backward(const NetworkParams<Scalar>& params, const ForwardCache<Scalar>& cache,
                                const Matrix& out_grad) const;

  /// Conditioning vector E_t + E_dt (+ E_c) for each column; exposed for tests.
  Matrix conditioning(const NetworkParams<Scalar>& params, const Eigen::VectorXd& t,
                      const Eigen::VectorXd& r, std::span<const int> classes = {}) const;

 private:
  struct EncoderIds {
    std::size_t w1, b1, w2, b2;
  };
  struct BlockIds {
    std::size_t mod_w, mod_b;
    std::size_t wq, bq, wk, bk, wv, bv, wq_int, wk_int, wv_int, wo, bo;  // attention only
    std::size_t w1, b1, w2, b2;
  };

  EncoderIds add_encoder(const std::string& prefix);

  NetworkConfig cfg_;
  TransportSpec spec_;
  ParamLayout layout_;
  EncoderIds enc_t_{}, enc_dt_{};
  std::size_t class_emb_ = 0;
  std::size_t in_w_ = 0, in_b_ = 0, pos_ = 0;
  std::vector<BlockIds> blocks_;
  std::size_t final_mod_w_ = 0, final_mod_b_ = 0, out_w_ = 0, out_b_ = 0;

  friend struct ForwardCache<Scalar>;
};

template <typename Scalar>
struct ForwardCache {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  struct Encoder {
    Matrix features, pre, act;
  };
  struct Norm {
    Matrix n;    // normalized activations
    Vector inv;  // 1 / sqrt(var + eps) per column
  };
  struct MlpBlock {
    Norm norm;
    Matrix u, z1, a, z2;
  };
  struct AttnBlock {
    Norm norm1;
    Matrix u1, q, k, v, o, attn;
    std::vector<Matrix> probs;  // one N x N matrix per head
    Norm norm2;
    Matrix u2, z1, a, z2;
  };
  struct TokenSample {
    std::vector<AttnBlock> blocks;
    Norm final_norm;
    Matrix u_final;
  };

  Eigen::Index param_count = -1;
  Eigen::Index batch = 0;
  Matrix x;
  Encoder enc_t, enc_dt;
  Matrix e_dt;   // interval embedding
  Matrix e_sum;  // E_t + E_dt + E_c
  Matrix s;      // silu(e_sum)
  std::vector<int> classes;  // resolved ids (null class = n_classes)
  std::vector<Matrix> block_mod;  // per block modulation, all columns
  Matrix final_mod;
  // MLP backbone
  std::vector<MlpBlock> mlp;
  Norm final_norm;
  Matrix u_final;
  // token backbone
  std::vector<TokenSample> tokens;
};

/// Adapts a network to the TransitionFn signature. The returned function
/// refers to net and params, which must outlive it.
template <typename Scalar>
TransitionFn as_transition_fn(const Network<Scalar>& net, const NetworkParams<Scalar>& params) {
  return [&net, &params](const Eigen::MatrixXd& x, const Eigen::VectorXd& t, const Eigen::VectorXd& r,
                         std::span<const int> classes) -> Eigen::MatrixXd {
    if constexpr (std::is_same_v<Scalar, double>) {
      return net.forward(params, x, t, r, classes);
    } else {
      return net.forward(params, x.cast<Scalar>(), t, r, classes).template cast<double>();
    }
  };
}

extern template class Network<float>;
extern template class Network<double>;

}  // namespace tim
