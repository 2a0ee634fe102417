#include "rareloss/regressor.hpp"

#include <cmath>
#include <random>

#include <Eigen/Dense>
#include <json.hpp>

#include "rareloss/error.hpp"

namespace rareloss {
namespace {

using Mat = Eigen::MatrixXd;
using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using RowMajorMapMut = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using VecMap = Eigen::Map<const Eigen::VectorXd>;
using VecMapMut = Eigen::Map<Eigen::VectorXd>;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct DenseSlot {
  std::size_t in, out, w_offset, b_offset;
};

struct Layout {
  std::vector<DenseSlot> pre;
  std::size_t lstm_in = 0, units = 0, wx_offset = 0, wh_offset = 0, lstm_b_offset = 0;
  std::vector<DenseSlot> post;
  DenseSlot head{};
  std::size_t total = 0;
};

Layout make_layout(const ModelConfig& cfg) {
  Layout l;
  std::size_t off = 0;
  auto dense = [&off](std::size_t in, std::size_t out) {
    DenseSlot s{in, out, off, off + in * out};
    off += in * out + out;
    return s;
  };
  std::size_t width = cfg.input_features;
  for (std::size_t w : cfg.pre_dense) {
    l.pre.push_back(dense(width, w));
    width = w;
  }
  l.lstm_in = width;
  l.units = cfg.recurrent_units;
  const std::size_t g = 4 * l.units;
  l.wx_offset = off;
  off += g * l.lstm_in;
  l.wh_offset = off;
  off += g * l.units;
  l.lstm_b_offset = off;
  off += g;
  width = l.units;
  for (std::size_t w : cfg.post_dense) {
    l.post.push_back(dense(width, w));
    width = w;
  }
  l.head = dense(width, 1);
  l.total = off;
  return l;
}

RowMajorMap weights(std::span<const double> p, const DenseSlot& s) {
  return RowMajorMap(p.data() + s.w_offset, static_cast<Eigen::Index>(s.out),
                     static_cast<Eigen::Index>(s.in));
}
VecMap bias(std::span<const double> p, const DenseSlot& s) {
  return VecMap(p.data() + s.b_offset, static_cast<Eigen::Index>(s.out));
}

// Matrix versions go through Eigen's packet exp; the scalar tanh and exp
// calls dominated the forward pass otherwise.
template <class Derived>
Mat sigmoid_of(const Eigen::MatrixBase<Derived>& z) {
  return (1.0 + (-z.array()).exp()).inverse().matrix();
}

template <class Derived>
Mat tanh_of(const Eigen::MatrixBase<Derived>& z) {
  return (2.0 * (1.0 + (-2.0 * z.array()).exp()).inverse() - 1.0).matrix();
}

void apply_activation(Activation a, const Mat& z, Mat& out) {
  switch (a) {
    case Activation::kIdentity: out = z; return;
    case Activation::kTanh: out = tanh_of(z); return;
    case Activation::kSwish: out = z.cwiseProduct(sigmoid_of(z)); return;
  }
}

Mat activation_grad(Activation a, const Mat& z) {
  switch (a) {
    case Activation::kIdentity: return Mat::Ones(z.rows(), z.cols());
    case Activation::kTanh: return (1.0 - tanh_of(z).array().square()).matrix();
    case Activation::kSwish: {
      const Mat sg = sigmoid_of(z);
      return (sg.array() + z.array() * sg.array() * (1.0 - sg.array())).matrix();
    }
  }
  return z;
}

}  // namespace

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::kSwish: return "swish";
    case Activation::kTanh: return "tanh";
    case Activation::kIdentity: return "identity";
  }
  return "?";
}

Activation parse_activation(std::string_view name) {
  if (name == "swish") return Activation::kSwish;
  if (name == "tanh") return Activation::kTanh;
  if (name == "identity") return Activation::kIdentity;
  throw Error(ErrorCode::kInvalidSpec, "unknown activation '" + std::string(name) + "'");
}

double activate(Activation a, double x) {
  switch (a) {
    case Activation::kSwish: return x * sigmoid(x);
    case Activation::kTanh: return std::tanh(x);
    case Activation::kIdentity: return x;
  }
  return x;
}

double activate_derivative(Activation a, double x) {
  switch (a) {
    case Activation::kSwish: {
      const double s = sigmoid(x);
      return s + x * s * (1.0 - s);
    }
    case Activation::kTanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::kIdentity: return 1.0;
  }
  return 1.0;
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v) { return v >= 1; };
  if (!positive(recurrent_units) || !positive(input_features) || !positive(history_len)) {
    throw Error(ErrorCode::kInvalidSpec,
                "recurrent units, input features and history length must be >= 1");
  }
  for (std::size_t w : pre_dense) {
    if (!positive(w)) throw Error(ErrorCode::kInvalidSpec, "dense widths must be >= 1");
  }
  for (std::size_t w : post_dense) {
    if (!positive(w)) throw Error(ErrorCode::kInvalidSpec, "dense widths must be >= 1");
  }
}

std::size_t ModelConfig::param_count() const { return make_layout(*this).total; }

ModelConfig ModelConfig::kolmogorov(std::size_t input_features, std::size_t history_len) {
  return {{4, 8, 16}, 32, {16, 8, 4}, Activation::kSwish, input_features, history_len};
}

ModelConfig ModelConfig::cylinder(std::size_t input_features, std::size_t history_len) {
  return {{4, 8, 16}, 16, {16, 8, 4}, Activation::kSwish, input_features, history_len};
}

void SequenceBatch::validate() const {
  if (inputs.size() != batch * history_len * features) {
    throw Error(ErrorCode::kShapeMismatch, "batch inputs hold " + std::to_string(inputs.size()) +
                                               " values, expected " +
                                               std::to_string(batch * history_len * features));
  }
  if (!targets.empty() && targets.size() != batch) {
    throw Error(ErrorCode::kShapeMismatch, "batch targets do not match batch size");
  }
}

ParamVector init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Layout l = make_layout(cfg);
  ParamVector p(l.total, 0.0);
  std::mt19937_64 rng(seed);
  auto fill = [&](std::size_t offset, std::size_t count, std::size_t fan_in) {
    const double limit = std::sqrt(3.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (std::size_t k = 0; k < count; ++k) p[offset + k] = dist(rng);
  };
  for (const auto& s : l.pre) fill(s.w_offset, s.in * s.out, s.in);
  fill(l.wx_offset, 4 * l.units * l.lstm_in, l.lstm_in);
  fill(l.wh_offset, 4 * l.units * l.units, l.units);
  for (std::size_t k = 0; k < l.units; ++k) p[l.lstm_b_offset + l.units + k] = 1.0;
  for (const auto& s : l.post) fill(s.w_offset, s.in * s.out, s.in);
  fill(l.head.w_offset, l.head.in, l.head.in);
  return p;
}

struct Tape::State {
  ModelConfig cfg;
  Layout layout;
  // Eigen-owned so the base address is always packet-aligned: vectorized
  // reductions over mapped slices then sum in the same order on every run.
  Eigen::VectorXd params;
  std::size_t batch = 0, steps = 0;
  // Columns are ordered timestep-major: column t * batch + b.
  Mat x;
  std::vector<Mat> pre_z, pre_a;
  Mat gates;       // 4H x (T B), post-nonlinearity
  Mat cells;       // H x ((T + 1) B), cells[0] = 0
  Mat hidden;      // H x ((T + 1) B)
  Mat cell_tanh;   // H x (T B)
  std::vector<Mat> post_z, post_a;
  std::vector<double> out;
};

Tape::Tape(std::span<const double> params, const ModelConfig& cfg, const SequenceBatch& batch)
    : state_(std::make_unique<State>()) {
  cfg.validate();
  batch.validate();
  auto& s = *state_;
  s.cfg = cfg;
  s.layout = make_layout(cfg);
  if (params.size() != s.layout.total) {
    throw Error(ErrorCode::kShapeMismatch, "parameter vector has " +
                                               std::to_string(params.size()) +
                                               " entries, model needs " +
                                               std::to_string(s.layout.total));
  }
  if (batch.features != cfg.input_features) {
    throw Error(ErrorCode::kShapeMismatch, "batch has " + std::to_string(batch.features) +
                                               " features, model expects " +
                                               std::to_string(cfg.input_features));
  }
  if (batch.history_len != cfg.history_len) {
    throw Error(ErrorCode::kShapeMismatch, "batch history length " +
                                               std::to_string(batch.history_len) +
                                               " does not match the model's " +
                                               std::to_string(cfg.history_len));
  }
  s.params = VecMap(params.data(), static_cast<Eigen::Index>(params.size()));
  std::span<const double> p(s.params.data(), static_cast<std::size_t>(s.params.size()));
  const auto B = static_cast<Eigen::Index>(batch.batch);
  const auto T = static_cast<Eigen::Index>(batch.history_len);
  const auto F = static_cast<Eigen::Index>(batch.features);
  const auto H = static_cast<Eigen::Index>(s.layout.units);
  s.batch = batch.batch;
  s.steps = batch.history_len;

  s.x.resize(F, T * B);
  for (Eigen::Index b = 0; b < B; ++b) {
    for (Eigen::Index t = 0; t < T; ++t) {
      const double* row = batch.inputs.data() + (b * T + t) * F;
      for (Eigen::Index f = 0; f < F; ++f) s.x(f, t * B + b) = row[f];
    }
  }

  const Mat* in = &s.x;
  for (const auto& slot : s.layout.pre) {
    Mat z = weights(p, slot) * *in;
    z.colwise() += bias(p, slot);
    Mat a;
    apply_activation(cfg.activation, z, a);
    s.pre_z.push_back(std::move(z));
    s.pre_a.push_back(std::move(a));
    in = &s.pre_a.back();
  }

  const RowMajorMap wx(p.data() + s.layout.wx_offset, 4 * H,
                       static_cast<Eigen::Index>(s.layout.lstm_in));
  const RowMajorMap wh(p.data() + s.layout.wh_offset, 4 * H, H);
  const VecMap lb(p.data() + s.layout.lstm_b_offset, 4 * H);
  s.gates = wx * *in;
  s.gates.colwise() += lb;
  s.cells = Mat::Zero(H, (T + 1) * B);
  s.hidden = Mat::Zero(H, (T + 1) * B);
  s.cell_tanh.resize(H, T * B);
  for (Eigen::Index t = 0; t < T; ++t) {
    auto z = s.gates.middleCols(t * B, B);
    z.noalias() += wh * s.hidden.middleCols(t * B, B);
    z.topRows(2 * H) = sigmoid_of(z.topRows(2 * H));
    z.middleRows(2 * H, H) = tanh_of(z.middleRows(2 * H, H));
    z.bottomRows(H) = sigmoid_of(z.bottomRows(H));
    auto c = s.cells.middleCols((t + 1) * B, B);
    c = z.middleRows(H, H).cwiseProduct(s.cells.middleCols(t * B, B)) +
        z.topRows(H).cwiseProduct(z.middleRows(2 * H, H));
    auto tc = s.cell_tanh.middleCols(t * B, B);
    tc = tanh_of(c);
    s.hidden.middleCols((t + 1) * B, B) = z.bottomRows(H).cwiseProduct(tc);
  }

  Mat last = s.hidden.middleCols(T * B, B);
  in = &last;
  for (const auto& slot : s.layout.post) {
    Mat z = weights(p, slot) * *in;
    z.colwise() += bias(p, slot);
    Mat a;
    apply_activation(cfg.activation, z, a);
    s.post_z.push_back(std::move(z));
    s.post_a.push_back(std::move(a));
    in = &s.post_a.back();
  }
  Eigen::RowVectorXd y = weights(p, s.layout.head) * *in;
  y.array() += p[s.layout.head.b_offset];
  s.out.assign(y.data(), y.data() + y.size());
}

Tape::~Tape() = default;
Tape::Tape(Tape&&) noexcept = default;
Tape& Tape::operator=(Tape&&) noexcept = default;

std::span<const double> Tape::outputs() const { return state_->out; }

ParamVector Tape::backward(std::span<const double> upstream) const {
  const auto& s = *state_;
  if (upstream.size() != s.batch) {
    throw Error(ErrorCode::kShapeMismatch, "upstream gradient length does not match batch");
  }
  std::span<const double> p(s.params.data(), static_cast<std::size_t>(s.params.size()));
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(s.layout.total));
  const auto B = static_cast<Eigen::Index>(s.batch);
  const auto T = static_cast<Eigen::Index>(s.steps);
  const auto H = static_cast<Eigen::Index>(s.layout.units);
  const Eigen::Map<const Eigen::RowVectorXd> u(upstream.data(), B);

  auto dense_back = [&](const DenseSlot& slot, const Mat& input, const Mat* z, const Mat& dout) {
    // dout is w.r.t. the layer output; z == nullptr means a linear layer.
    Mat dz = z ? Mat(dout.cwiseProduct(activation_grad(s.cfg.activation, *z))) : dout;
    RowMajorMapMut(grad.data() + slot.w_offset, static_cast<Eigen::Index>(slot.out),
                   static_cast<Eigen::Index>(slot.in))
        .noalias() += dz * input.transpose();
    VecMapMut(grad.data() + slot.b_offset, static_cast<Eigen::Index>(slot.out)) +=
        dz.rowwise().sum();
    return Mat(weights(p, slot).transpose() * dz);
  };

  const Mat last = s.hidden.middleCols(T * B, B);
  const Mat& head_in = s.post_a.empty() ? last : s.post_a.back();
  Mat d = dense_back(s.layout.head, head_in, nullptr, Mat(u));
  for (std::size_t k = s.layout.post.size(); k-- > 0;) {
    const Mat& input = k == 0 ? last : s.post_a[k - 1];
    d = dense_back(s.layout.post[k], input, &s.post_z[k], d);
  }

  // d is now dL/dh_T.
  const RowMajorMap wh(p.data() + s.layout.wh_offset, 4 * H, H);
  const RowMajorMap wx(p.data() + s.layout.wx_offset, 4 * H,
                       static_cast<Eigen::Index>(s.layout.lstm_in));
  Mat dgates(4 * H, T * B);
  Mat dh = d;
  Mat dc = Mat::Zero(H, B);
  for (Eigen::Index t = T; t-- > 0;) {
    const auto z = s.gates.middleCols(t * B, B);
    const auto ig = z.topRows(H);
    const auto fg = z.middleRows(H, H);
    const auto gg = z.middleRows(2 * H, H);
    const auto og = z.bottomRows(H);
    const auto tc = s.cell_tanh.middleCols(t * B, B);
    dc.array() += dh.array() * og.array() * (1.0 - tc.array().square());
    auto dz = dgates.middleCols(t * B, B);
    dz.topRows(H) = (dc.array() * gg.array() * ig.array() * (1.0 - ig.array())).matrix();
    dz.middleRows(H, H) = (dc.array() * s.cells.middleCols(t * B, B).array() * fg.array() *
                           (1.0 - fg.array()))
                              .matrix();
    dz.middleRows(2 * H, H) = (dc.array() * ig.array() * (1.0 - gg.array().square())).matrix();
    dz.bottomRows(H) = (dh.array() * tc.array() * og.array() * (1.0 - og.array())).matrix();
    dh.noalias() = wh.transpose() * dz;
    dc = dc.cwiseProduct(fg);
  }
  const Mat& lstm_in = s.pre_a.empty() ? s.x : s.pre_a.back();
  RowMajorMapMut(grad.data() + s.layout.wx_offset, 4 * H,
                 static_cast<Eigen::Index>(s.layout.lstm_in))
      .noalias() = dgates * lstm_in.transpose();
  RowMajorMapMut(grad.data() + s.layout.wh_offset, 4 * H, H).noalias() =
      dgates * s.hidden.leftCols(T * B).transpose();
  VecMapMut(grad.data() + s.layout.lstm_b_offset, 4 * H) = dgates.rowwise().sum();

  if (!s.layout.pre.empty()) {
    Mat da = wx.transpose() * dgates;
    for (std::size_t k = s.layout.pre.size(); k-- > 0;) {
      const Mat& input = k == 0 ? s.x : s.pre_a[k - 1];
      da = dense_back(s.layout.pre[k], input, &s.pre_z[k], da);
    }
  }
  return {grad.data(), grad.data() + grad.size()};
}

std::vector<double> forward(std::span<const double> params, const ModelConfig& cfg,
                            const SequenceBatch& batch) {
  Tape tape(params, cfg, batch);
  auto out = tape.outputs();
  return {out.begin(), out.end()};
}

ParamVector backward(std::span<const double> params, const ModelConfig& cfg,
                     const SequenceBatch& batch, std::span<const double> upstream) {
  return Tape(params, cfg, batch).backward(upstream);
}

std::string model_to_text(const ModelConfig& cfg, std::span<const double> params) {
  if (params.size() != cfg.param_count()) {
    throw Error(ErrorCode::kShapeMismatch, "model has " + std::to_string(cfg.param_count()) +
                                               " parameters, got " + std::to_string(params.size()));
  }
  nlohmann::ordered_json j;
  j["format"] = "rareloss.model";
  j["version"] = 1;
  j["config"] = {
      {"pre_dense", cfg.pre_dense},
      {"recurrent_units", cfg.recurrent_units},
      {"post_dense", cfg.post_dense},
      {"activation", std::string(to_string(cfg.activation))},
      {"input_features", cfg.input_features},
      {"history_len", cfg.history_len},
  };
  j["param_count"] = params.size();
  j["params"] = std::vector<double>(params.begin(), params.end());
  return j.dump(1) + "\n";
}

void model_from_text(const std::string& text, ModelConfig& cfg, ParamVector& params) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != "rareloss.model") throw Error(ErrorCode::kParse, "not a model file");
    const auto& c = j.at("config");
    ModelConfig parsed;
    parsed.pre_dense = c.at("pre_dense").get<std::vector<std::size_t>>();
    parsed.recurrent_units = c.at("recurrent_units").get<std::size_t>();
    parsed.post_dense = c.at("post_dense").get<std::vector<std::size_t>>();
    parsed.activation = parse_activation(c.at("activation").get<std::string>());
    parsed.input_features = c.at("input_features").get<std::size_t>();
    parsed.history_len = c.at("history_len").get<std::size_t>();
    parsed.validate();
    auto values = j.at("params").get<std::vector<double>>();
    if (values.size() != parsed.param_count()) {
      throw Error(ErrorCode::kShapeMismatch, "model file parameter count does not match config");
    }
    cfg = std::move(parsed);
    params = std::move(values);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("model file: ") + e.what());
  }
}

}  // namespace rareloss
