#pragma once

// Small fully connected velocity network v(x, t, context, observation) with
// hand-written reverse-mode gradients.
//
// Input layout per column: [x (state_dim) | t | context | observation].
// Hidden layers use the configured activation, the output layer is linear.
// Parameters live in one flat vector; layer l stores its weight matrix
// (out x in, column-major) followed by its bias.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "stepnft/errors.hpp"
#include "stepnft/rng.hpp"

namespace stepnft {

enum class Activation : std::uint32_t { Tanh = 0, Relu = 1, Identity = 2 };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::Identity: return "identity";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  if (s == "identity") return Activation::Identity;
  throw ConfigError("unknown activation '" + s + "'");
}

struct Architecture {
  std::vector<std::size_t> widths;  // input width first, output width last
  Activation activation = Activation::Tanh;
  std::size_t context_dim = 0;
  std::size_t observation_dim = 0;

  std::size_t state_dim() const { return widths.empty() ? 0 : widths.back(); }
  std::size_t input_dim() const { return widths.empty() ? 0 : widths.front(); }
  std::size_t layer_count() const { return widths.size() < 2 ? 0 : widths.size() - 1; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += widths[l + 1] * (widths[l] + 1);
    return n;
  }

  void validate() const {
    if (widths.size() < 2) throw ConfigError("architecture needs at least input and output widths");
    for (auto w : widths) {
      if (w == 0) throw ConfigError("architecture layer width must be >= 1");
    }
    if (input_dim() != state_dim() + 1 + context_dim + observation_dim) {
      throw ConfigError("architecture input width " + std::to_string(input_dim()) +
                        " != state(" + std::to_string(state_dim()) + ") + time(1) + context(" +
                        std::to_string(context_dim) + ") + observation(" +
                        std::to_string(observation_dim) + ")");
    }
  }

  bool operator==(const Architecture&) const = default;
};

inline Architecture make_architecture(std::size_t state_dim, std::size_t context_dim,
                                      std::size_t observation_dim,
                                      const std::vector<std::size_t>& hidden = {64, 64},
                                      Activation activation = Activation::Tanh) {
  Architecture arch;
  arch.widths.push_back(state_dim + 1 + context_dim + observation_dim);
  arch.widths.insert(arch.widths.end(), hidden.begin(), hidden.end());
  arch.widths.push_back(state_dim);
  arch.activation = activation;
  arch.context_dim = context_dim;
  arch.observation_dim = observation_dim;
  return arch;
}

// Post-activation values of every layer, kept for the backward pass.
struct ForwardCache {
  std::vector<Eigen::MatrixXd> activations;  // [0] = inputs, back() = outputs
};

struct GradientTape {
  double loss = 0.0;
  Eigen::VectorXd gradient;
};

class VelocityField {
 public:
  VelocityField() = default;

  VelocityField(Architecture arch, Eigen::VectorXd parameters)
      : arch_(std::move(arch)), params_(std::move(parameters)) {
    arch_.validate();
    if (static_cast<std::size_t>(params_.size()) != arch_.parameter_count()) {
      throw ConfigError("parameter vector length does not match architecture");
    }
  }

  const Architecture& architecture() const { return arch_; }
  const Eigen::VectorXd& parameters() const { return params_; }
  Eigen::VectorXd& parameters() { return params_; }
  std::size_t parameter_count() const { return static_cast<std::size_t>(params_.size()); }

  // Assemble network inputs column-wise. `time` is shared by every column.
  Eigen::MatrixXd pack_inputs(const Eigen::MatrixXd& states, double time,
                              const Eigen::MatrixXd& contexts,
                              const Eigen::MatrixXd& observations) const {
    return pack_inputs(states, Eigen::RowVectorXd::Constant(states.cols(), time), contexts,
                       observations);
  }

  Eigen::MatrixXd pack_inputs(const Eigen::MatrixXd& states, const Eigen::RowVectorXd& times,
                              const Eigen::MatrixXd& contexts,
                              const Eigen::MatrixXd& observations) const {
    const Eigen::Index n = states.cols();
    if (times.size() != n) throw ContractError("velocity input: one time per column required");
    detail::require_same_dim(states.rows(), arch_.state_dim(), "velocity input state");
    detail::require_same_dim(contexts.rows(), arch_.context_dim, "velocity input context");
    detail::require_same_dim(observations.rows(), arch_.observation_dim,
                             "velocity input observation");
    if (contexts.cols() != n || observations.cols() != n) {
      throw ContractError("velocity input: batch sizes differ");
    }
    Eigen::MatrixXd in(arch_.input_dim(), n);
    const auto sd = static_cast<Eigen::Index>(arch_.state_dim());
    const auto cd = static_cast<Eigen::Index>(arch_.context_dim);
    const auto od = static_cast<Eigen::Index>(arch_.observation_dim);
    in.topRows(sd) = states;
    in.row(sd) = times;
    in.middleRows(sd + 1, cd) = contexts;
    in.bottomRows(od) = observations;
    return in;
  }

  Eigen::MatrixXd forward_inputs(const Eigen::MatrixXd& inputs, ForwardCache* cache = nullptr) const {
    detail::require_same_dim(inputs.rows(), arch_.input_dim(), "velocity forward");
    Eigen::MatrixXd a = inputs;
    if (cache) {
      cache->activations.clear();
      cache->activations.push_back(a);
    }
    const double* p = params_.data();
    const std::size_t layers = arch_.layer_count();
    for (std::size_t l = 0; l < layers; ++l) {
      const auto in = static_cast<Eigen::Index>(arch_.widths[l]);
      const auto out = static_cast<Eigen::Index>(arch_.widths[l + 1]);
      Eigen::Map<const Eigen::MatrixXd> w(p, out, in);
      Eigen::Map<const Eigen::VectorXd> b(p + out * in, out);
      p += out * (in + 1);
      // Column-at-a-time products: a column's output does not depend on which
      // batch it was evaluated in.
      Eigen::MatrixXd z(out, a.cols());
      for (Eigen::Index i = 0; i < a.cols(); ++i) z.col(i).noalias() = w * a.col(i) + b;
      if (l + 1 < layers) apply_activation(z);
      a = std::move(z);
      if (cache) cache->activations.push_back(a);
    }
    return a;
  }

  // Batched velocity; every column shares the solver time.
  Eigen::MatrixXd velocity_batch(const Eigen::MatrixXd& states, double time,
                                 const Eigen::MatrixXd& contexts,
                                 const Eigen::MatrixXd& observations,
                                 ForwardCache* cache = nullptr) const {
    return forward_inputs(pack_inputs(states, time, contexts, observations), cache);
  }

  Eigen::MatrixXd velocity_batch(const Eigen::MatrixXd& states, const Eigen::RowVectorXd& times,
                                 const Eigen::MatrixXd& contexts,
                                 const Eigen::MatrixXd& observations,
                                 ForwardCache* cache = nullptr) const {
    return forward_inputs(pack_inputs(states, times, contexts, observations), cache);
  }

  // Reverse pass. `output_grad` is dLoss/dOutput (state_dim x batch); the
  // parameter gradient is summed over columns. Optionally returns dLoss/dInput.
  Eigen::VectorXd backward(const ForwardCache& cache, const Eigen::MatrixXd& output_grad,
                           Eigen::MatrixXd* input_grad = nullptr) const {
    const std::size_t layers = arch_.layer_count();
    if (cache.activations.size() != layers + 1) {
      throw ContractError("backward: cache does not come from this field");
    }
    detail::require_same_dim(output_grad.rows(), arch_.state_dim(), "backward output gradient");
    if (output_grad.cols() != cache.activations.back().cols()) {
      throw ContractError("backward: output gradient batch size differs from forward batch");
    }
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(params_.size());
    std::vector<std::size_t> offsets(layers);
    std::size_t off = 0;
    for (std::size_t l = 0; l < layers; ++l) {
      offsets[l] = off;
      off += arch_.widths[l + 1] * (arch_.widths[l] + 1);
    }
    Eigen::MatrixXd g = output_grad;
    for (std::size_t l = layers; l-- > 0;) {
      const auto in = static_cast<Eigen::Index>(arch_.widths[l]);
      const auto out = static_cast<Eigen::Index>(arch_.widths[l + 1]);
      const Eigen::MatrixXd& a_in = cache.activations[l];
      Eigen::Map<Eigen::MatrixXd> dw(grad.data() + offsets[l], out, in);
      Eigen::Map<Eigen::VectorXd> db(grad.data() + offsets[l] + out * in, out);
      dw.noalias() = g * a_in.transpose();
      db = g.rowwise().sum();
      if (l > 0 || input_grad) {
        Eigen::Map<const Eigen::MatrixXd> w(params_.data() + offsets[l], out, in);
        Eigen::MatrixXd g_in = w.transpose() * g;
        if (l > 0) apply_activation_derivative(cache.activations[l], g_in);
        g = std::move(g_in);
      }
    }
    if (input_grad) *input_grad = std::move(g);
    return grad;
  }

 private:
  void apply_activation(Eigen::MatrixXd& z) const {
    switch (arch_.activation) {
      case Activation::Tanh: z = z.unaryExpr([](double v) { return std::tanh(v); }); break;
      case Activation::Relu: z = z.unaryExpr([](double v) { return v > 0.0 ? v : 0.0; }); break;
      case Activation::Identity: break;
    }
  }

  // g <- g * act'(z), written in terms of the post-activation a = act(z).
  void apply_activation_derivative(const Eigen::MatrixXd& a, Eigen::MatrixXd& g) const {
    switch (arch_.activation) {
      case Activation::Tanh: g.array() *= 1.0 - a.array().square(); break;
      case Activation::Relu: g.array() *= (a.array() > 0.0).cast<double>(); break;
      case Activation::Identity: break;
    }
  }

  Architecture arch_;
  Eigen::VectorXd params_;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias of a
// layer, drawn in storage order from the Init stream of `seed`.
inline VelocityField init_field(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  Eigen::VectorXd params(static_cast<Eigen::Index>(arch.parameter_count()));
  auto rng = CounterRng::keyed(seed, StreamTag::Init);
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < arch.layer_count(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(arch.widths[l]));
    const std::size_t count = arch.widths[l + 1] * (arch.widths[l] + 1);
    for (std::size_t i = 0; i < count; ++i) params[k++] = rng.uniform(-bound, bound);
  }
  return VelocityField(arch, std::move(params));
}

inline Eigen::VectorXd forward(const VelocityField& field, const Eigen::VectorXd& x, double t,
                               const Eigen::VectorXd& context, const Eigen::VectorXd& observation) {
  if (!(t >= 0.0 && t <= 1.0)) throw ContractError("forward: t must lie in [0, 1]");
  return field.velocity_batch(x, t, context, observation).col(0);
}

// Loss callback: maps the network output to (loss, dLoss/dOutput).
using OutputLoss = std::function<std::pair<double, Eigen::VectorXd>(const Eigen::VectorXd&)>;

// Single-sample reverse pass through a scalar loss of the network output.
inline GradientTape backward(const VelocityField& field, const Eigen::VectorXd& x, double t,
                             const Eigen::VectorXd& context, const Eigen::VectorXd& observation,
                             const OutputLoss& loss) {
  ForwardCache cache;
  const Eigen::MatrixXd out = field.velocity_batch(x, t, context, observation, &cache);
  auto [value, dout] = loss(out.col(0));
  if (dout.size() != out.rows()) {
    throw ContractError("backward: loss must be a scalar function of the velocity output");
  }
  return GradientTape{value, field.backward(cache, dout)};
}

// ---------------------------------------------------------------------------
// Checkpoint file, little-endian binary:
//   char[8]  magic "STEPNFTC"
//   u32      format version (1)
//   u32      activation (0 tanh, 1 relu, 2 identity)
//   u64      context_dim, observation_dim
//   u64      layer width count L, then L x u64 widths
//   u64      parameter count P, then P x f64 parameters (IEEE-754 bit patterns)

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void write_pod(std::ostream& os, T v) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw FormatError("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

}  // namespace detail

inline void save_checkpoint(std::ostream& os, const VelocityField& field) {
  const auto& arch = field.architecture();
  os.write("STEPNFTC", 8);
  detail::write_pod<std::uint32_t>(os, kCheckpointVersion);
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(arch.activation));
  detail::write_pod<std::uint64_t>(os, arch.context_dim);
  detail::write_pod<std::uint64_t>(os, arch.observation_dim);
  detail::write_pod<std::uint64_t>(os, arch.widths.size());
  for (auto w : arch.widths) detail::write_pod<std::uint64_t>(os, w);
  detail::write_pod<std::uint64_t>(os, field.parameter_count());
  for (Eigen::Index i = 0; i < field.parameters().size(); ++i) {
    detail::write_pod<double>(os, field.parameters()[i]);
  }
}

inline VelocityField load_checkpoint(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::string(magic, 8) != "STEPNFTC") {
    throw FormatError("not a velocity-field checkpoint");
  }
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Architecture arch;
  const auto act = detail::read_pod<std::uint32_t>(is);
  if (act > 2) throw FormatError("checkpoint: bad activation code");
  arch.activation = static_cast<Activation>(act);
  arch.context_dim = detail::read_pod<std::uint64_t>(is);
  arch.observation_dim = detail::read_pod<std::uint64_t>(is);
  const auto nw = detail::read_pod<std::uint64_t>(is);
  if (nw > 64) throw FormatError("checkpoint: implausible layer count");
  for (std::uint64_t i = 0; i < nw; ++i) arch.widths.push_back(detail::read_pod<std::uint64_t>(is));
  try {
    arch.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  const auto np = detail::read_pod<std::uint64_t>(is);
  if (np != arch.parameter_count()) throw FormatError("checkpoint: parameter count mismatch");
  Eigen::VectorXd params(static_cast<Eigen::Index>(np));
  for (std::uint64_t i = 0; i < np; ++i) params[static_cast<Eigen::Index>(i)] = detail::read_pod<double>(is);
  return VelocityField(std::move(arch), std::move(params));
}

inline void save_checkpoint(const std::string& path, const VelocityField& field) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open checkpoint for writing: " + path);
  save_checkpoint(os, field);
}

inline VelocityField load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint: " + path);
  return load_checkpoint(is);
}

}  // namespace stepnft
