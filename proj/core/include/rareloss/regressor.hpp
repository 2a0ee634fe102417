#pragma once

// Dense -> LSTM -> dense sequence regressor with a scalar linear head.
//
// Parameters live in one flat vector. Layout, in order:
//   pre-dense layer k:  W (out x in, row-major), b (out)
//   LSTM:               W_x (4H x in), W_h (4H x H), b (4H); gate blocks i, f, g, o
//   post-dense layer k: W (out x in), b (out)
//   head:               W (1 x in), b (1)
// The pre-dense stack is applied at every timestep with shared weights; the
// LSTM's final hidden state feeds the post-dense stack.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rareloss {

enum class Activation { kSwish, kTanh, kIdentity };

std::string_view to_string(Activation a);
Activation parse_activation(std::string_view name);

double activate(Activation a, double x);
double activate_derivative(Activation a, double x);

struct ModelConfig {
  std::vector<std::size_t> pre_dense;
  std::size_t recurrent_units = 16;
  std::vector<std::size_t> post_dense;
  Activation activation = Activation::kSwish;
  std::size_t input_features = 1;
  std::size_t history_len = 50;

  void validate() const;
  std::size_t param_count() const;

  // Reference architectures: pre (4,8,16), LSTM 32 or 16, post (16,8,4), swish.
  static ModelConfig kolmogorov(std::size_t input_features, std::size_t history_len = 50);
  static ModelConfig cylinder(std::size_t input_features, std::size_t history_len = 50);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

using ParamVector = std::vector<double>;

// Row-major (batch x history_len x input_features) inputs.
struct SequenceBatch {
  std::size_t batch = 0;
  std::size_t history_len = 0;
  std::size_t features = 0;
  std::vector<double> inputs;
  std::vector<double> targets;

  std::span<const double> window(std::size_t i) const {
    return {inputs.data() + i * history_len * features, history_len * features};
  }
  void validate() const;
};

ParamVector init_params(const ModelConfig& cfg, std::uint64_t seed);

std::vector<double> forward(std::span<const double> params, const ModelConfig& cfg,
                            const SequenceBatch& batch);

// Vector-Jacobian product: gradient of sum_i upstream_i * y_hat_i w.r.t. params.
ParamVector backward(std::span<const double> params, const ModelConfig& cfg,
                     const SequenceBatch& batch, std::span<const double> upstream);

// Forward pass that keeps the intermediate activations needed by backward,
// so a training step does not run the forward pass twice.
class Tape {
 public:
  Tape(std::span<const double> params, const ModelConfig& cfg, const SequenceBatch& batch);
  ~Tape();
  Tape(Tape&&) noexcept;
  Tape& operator=(Tape&&) noexcept;

  std::span<const double> outputs() const;
  ParamVector backward(std::span<const double> upstream) const;

 private:
  struct State;
  std::unique_ptr<State> state_;
};

std::string model_to_text(const ModelConfig& cfg, std::span<const double> params);
void model_from_text(const std::string& text, ModelConfig& cfg, ParamVector& params);

}  // namespace rareloss
