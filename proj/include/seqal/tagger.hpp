// Copyright 2026 The seqal Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Reference tagger: word embeddings -> bidirectional Elman (tanh) encoder ->
// per-token linear + softmax head. Everything is float64 and backpropagated
// by hand so every gradient can be checked against finite differences.
//
//   f_t = tanh(A_f e_t + B_f f_{t-1} + c_f)      f_0     = 0
//   b_t = tanh(A_b e_t + B_b b_{t+1} + c_b)      b_{n+1} = 0
//   h_t = [f_t; b_t]           (optionally inverted-dropout masked)
//   a_t = W h_t + b,  z_t = softmax(a_t)

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "seqal/common.hpp"
#include "seqal/corpus.hpp"

namespace seqal {

struct TaggerConfig {
  int embed_dim = 16;
  int hidden_dim = 32;  // per direction
  double dropout_rate = 0.5;
  double learning_rate = 0.001;
  int epochs = 25;
  int batch_size = 16;
  int num_labels = 0;  // K
  int vocab_size = 0;  // V

  int penultimate_dim() const { return 2 * hidden_dim; }

  void validate() const {
    if (embed_dim <= 0 || hidden_dim <= 0) throw InvalidArgument("tagger: dimensions must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
      throw InvalidArgument("tagger: dropout_rate must be in [0, 1)");
    if (!(learning_rate > 0.0)) throw InvalidArgument("tagger: learning_rate must be positive");
    if (epochs <= 0 || batch_size <= 0) throw InvalidArgument("tagger: epochs and batch_size must be positive");
    if (num_labels <= 0 || vocab_size <= 0)
      throw InvalidArgument("tagger: num_labels and vocab_size must be positive");
  }

  bool operator==(const TaggerConfig&) const = default;
};

struct RecurrentCell {
  Eigen::MatrixXd input;      // H x D
  Eigen::MatrixXd recurrent;  // H x H
  Eigen::VectorXd bias;       // H
};

struct TaggerParams {
  TaggerConfig config;
  Eigen::MatrixXd embeddings;  // V x D
  RecurrentCell forward_cell;
  RecurrentCell backward_cell;
  Eigen::MatrixXd output_weights;  // K x 2H
  Eigen::VectorXd output_bias;     // K

  /// Zero-filled parameters of the right shapes.
  static TaggerParams zeros(const TaggerConfig& c) {
    TaggerParams p;
    p.config = c;
    const int d = c.embed_dim, h = c.hidden_dim;
    p.embeddings = Eigen::MatrixXd::Zero(c.vocab_size, d);
    for (auto* cell : {&p.forward_cell, &p.backward_cell}) {
      cell->input = Eigen::MatrixXd::Zero(h, d);
      cell->recurrent = Eigen::MatrixXd::Zero(h, h);
      cell->bias = Eigen::VectorXd::Zero(h);
    }
    p.output_weights = Eigen::MatrixXd::Zero(c.num_labels, 2 * h);
    p.output_bias = Eigen::VectorXd::Zero(c.num_labels);
    return p;
  }

  /// Calls f(name, tensor) for every learnable tensor in a fixed order.
  template <typename Self, typename F>
  static void visit(Self& p, F&& f) {
    f("embeddings", p.embeddings);
    f("forward.input", p.forward_cell.input);
    f("forward.recurrent", p.forward_cell.recurrent);
    f("forward.bias", p.forward_cell.bias);
    f("backward.input", p.backward_cell.input);
    f("backward.recurrent", p.backward_cell.recurrent);
    f("backward.bias", p.backward_cell.bias);
    f("output.weights", p.output_weights);
    f("output.bias", p.output_bias);
  }
  template <typename F> void for_each_tensor(F&& f) { visit(*this, f); }
  template <typename F> void for_each_tensor(F&& f) const { visit(*this, f); }

  bool operator==(const TaggerParams& o) const {
    bool eq = config == o.config;
    auto a = flatten(), b = o.flatten();
    return eq && a == b;
  }

  static constexpr std::size_t kTensorCount = 9;

  /// Flat views of every tensor, in visit() order.
  std::array<std::span<double>, kTensorCount> flat_views() {
    std::array<std::span<double>, kTensorCount> out;
    std::size_t k = 0;
    for_each_tensor([&](const char*, auto& t) {
      out[k++] = std::span<double>(t.data(), static_cast<std::size_t>(t.size()));
    });
    return out;
  }
  std::array<std::span<const double>, kTensorCount> flat_views() const {
    std::array<std::span<const double>, kTensorCount> out;
    std::size_t k = 0;
    for_each_tensor([&](const char*, const auto& t) {
      out[k++] = std::span<const double>(t.data(), static_cast<std::size_t>(t.size()));
    });
    return out;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    for_each_tensor([&](const char*, const auto& t) {
      out.insert(out.end(), t.data(), t.data() + t.size());
    });
    return out;
  }
};

/// Dropout off, or on with the mask drawn from a generator seeded by `seed`.
class DropoutMode {
 public:
  static DropoutMode off() { return DropoutMode(); }
  static DropoutMode on(std::uint64_t seed) {
    DropoutMode m;
    m.seed_ = seed;
    return m;
  }
  bool enabled() const { return seed_.has_value(); }
  std::uint64_t seed() const { return *seed_; }

 private:
  std::optional<std::uint64_t> seed_;
};

struct ForwardResult {
  Eigen::MatrixXd probs;    // n x K, rows are z_t
  Eigen::MatrixXd hiddens;  // n x 2H, rows are the (masked) h_t fed to the head
  std::optional<double> loss;

  std::size_t length() const { return static_cast<std::size_t>(probs.rows()); }
};

inline TaggerParams init_params(const TaggerConfig& config, std::uint64_t seed) {
  config.validate();
  TaggerParams p = TaggerParams::zeros(config);
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  auto fill = [&](Eigen::MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  };
  fill(p.embeddings);
  fill(p.forward_cell.input);
  fill(p.forward_cell.recurrent);
  fill(p.backward_cell.input);
  fill(p.backward_cell.recurrent);
  fill(p.output_weights);
  return p;
}

namespace detail {

/// Inverted-dropout scale matrix: entries are 0 or 1/(1-rate).
inline Eigen::MatrixXd dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  std::bernoulli_distribution keep(1.0 - rate);
  const double scale = 1.0 / (1.0 - rate);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = keep(rng) ? scale : 0.0;
  return m;
}

inline void softmax_rows(Eigen::MatrixXd& a) {
  for (Eigen::Index t = 0; t < a.rows(); ++t) {
    auto row = a.row(t);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

/// Intermediate activations kept for backprop.
struct Trace {
  Eigen::MatrixXd fwd;       // n x H
  Eigen::MatrixXd bwd;       // n x H
  Eigen::MatrixXd unmasked;  // n x 2H
  std::optional<Eigen::MatrixXd> mask;
  ForwardResult out;
};

inline void check_tokens(const TaggerParams& p, std::span<const int> tokens) {
  if (tokens.empty()) throw InvalidArgument("empty token sequence");
  for (int t : tokens)
    if (t < 0 || t >= p.embeddings.rows())
      throw InvalidArgument("token index " + std::to_string(t) + " out of range (V=" +
                            std::to_string(p.embeddings.rows()) + ")");
}

/// Encoder states [f_t; b_t] for every position, no dropout.
inline Trace encode(const TaggerParams& p, std::span<const int> tokens) {
  check_tokens(p, tokens);
  const auto n = static_cast<Eigen::Index>(tokens.size());
  const Eigen::Index h = p.config.hidden_dim;
  Trace tr;
  tr.fwd.resize(n, h);
  tr.bwd.resize(n, h);
  Eigen::VectorXd state = Eigen::VectorXd::Zero(h);
  for (Eigen::Index t = 0; t < n; ++t) {
    const auto e = p.embeddings.row(tokens[t]).transpose();
    state = (p.forward_cell.input * e + p.forward_cell.recurrent * state + p.forward_cell.bias)
                .array()
                .tanh()
                .matrix();
    tr.fwd.row(t) = state.transpose();
  }
  state.setZero();
  for (Eigen::Index t = n - 1; t >= 0; --t) {
    const auto e = p.embeddings.row(tokens[t]).transpose();
    state = (p.backward_cell.input * e + p.backward_cell.recurrent * state + p.backward_cell.bias)
                .array()
                .tanh()
                .matrix();
    tr.bwd.row(t) = state.transpose();
  }
  tr.unmasked.resize(n, 2 * h);
  tr.unmasked << tr.fwd, tr.bwd;
  return tr;
}

/// Output head over (already masked) hidden rows.
inline Eigen::MatrixXd head(const TaggerParams& p, const Eigen::MatrixXd& hiddens) {
  Eigen::MatrixXd a = hiddens * p.output_weights.transpose();
  a.rowwise() += p.output_bias.transpose();
  softmax_rows(a);
  return a;
}

inline Trace forward_trace(const TaggerParams& p, std::span<const int> tokens,
                           std::optional<Eigen::MatrixXd> mask) {
  Trace tr = encode(p, tokens);
  tr.mask = std::move(mask);
  tr.out.hiddens = tr.mask ? Eigen::MatrixXd(tr.unmasked.cwiseProduct(*tr.mask)) : tr.unmasked;
  tr.out.probs = head(p, tr.out.hiddens);
  return tr;
}

inline std::optional<Eigen::MatrixXd> mask_for(const TaggerParams& p, Eigen::Index n,
                                               double rate, Rng& rng) {
  if (rate <= 0.0) return std::nullopt;
  return dropout_mask(n, p.config.penultimate_dim(), rate, rng);
}

/// Accumulates scale * dL/dparams into `grad`, L being the summed token NLL
/// of `tr` against `labels`. Returns L.
inline double backward(const TaggerParams& p, std::span<const int> tokens,
                       std::span<const int> labels, const Trace& tr, TaggerParams& grad,
                       double scale) {
  const auto n = static_cast<Eigen::Index>(tokens.size());
  const Eigen::Index h = p.config.hidden_dim;
  double loss = 0.0;

  // dL/da_t = z_t - onehot(y_t)
  Eigen::MatrixXd d_logits = tr.out.probs;
  for (Eigen::Index t = 0; t < n; ++t) {
    loss -= std::log(tr.out.probs(t, labels[t]));
    d_logits(t, labels[t]) -= 1.0;
  }
  d_logits *= scale;
  grad.output_weights.noalias() += d_logits.transpose() * tr.out.hiddens;
  grad.output_bias += d_logits.colwise().sum().transpose();

  Eigen::MatrixXd d_hidden = d_logits * p.output_weights;  // n x 2H
  if (tr.mask) d_hidden = d_hidden.cwiseProduct(*tr.mask);

  auto through_cell = [&](const RecurrentCell& cell, RecurrentCell& g,
                          const Eigen::MatrixXd& states, Eigen::Index col_offset, bool right_to_left) {
    Eigen::VectorXd carry = Eigen::VectorXd::Zero(h);
    for (Eigen::Index k = 0; k < n; ++k) {
      // Backprop runs against the direction the cell was unrolled in.
      const Eigen::Index t = right_to_left ? k : n - 1 - k;
      const Eigen::Index prev = right_to_left ? t + 1 : t - 1;  // state fed into step t
      const Eigen::VectorXd s = states.row(t).transpose();
      const Eigen::VectorXd pre =
          ((d_hidden.row(t).segment(col_offset, h).transpose() + carry).array() *
           (1.0 - s.array().square()))
              .matrix();
      const auto e = p.embeddings.row(tokens[t]).transpose();
      g.input.noalias() += pre * e.transpose();
      if (prev >= 0 && prev < n) g.recurrent.noalias() += pre * states.row(prev);
      g.bias += pre;
      grad.embeddings.row(tokens[t]).noalias() += (cell.input.transpose() * pre).transpose();
      carry.noalias() = cell.recurrent.transpose() * pre;
    }
  };
  through_cell(p.forward_cell, grad.forward_cell, tr.fwd, 0, false);
  through_cell(p.backward_cell, grad.backward_cell, tr.bwd, h, true);
  return loss;
}

}  // namespace detail

inline ForwardResult forward(const TaggerParams& params, std::span<const int> tokens,
                             DropoutMode dropout = DropoutMode::off()) {
  std::optional<Eigen::MatrixXd> mask;
  if (dropout.enabled()) {
    Rng rng(dropout.seed());
    mask = detail::mask_for(params, static_cast<Eigen::Index>(tokens.size()),
                            params.config.dropout_rate, rng);
  }
  return detail::forward_trace(params, tokens, std::move(mask)).out;
}

/// L = -sum_t log z_t[y_t]
inline double loss_nll(const ForwardResult& result, std::span<const int> labels) {
  if (labels.size() != result.length())
    throw InvalidArgument("loss_nll: label count does not match sequence length");
  double loss = 0.0;
  for (std::size_t t = 0; t < labels.size(); ++t)
    loss -= std::log(result.probs(static_cast<Eigen::Index>(t), labels[t]));
  return loss;
}

/// Summed NLL and its exact gradient with respect to every parameter.
inline std::pair<double, TaggerParams> loss_and_gradient(const TaggerParams& params,
                                                         std::span<const int> tokens,
                                                         std::span<const int> labels,
                                                         DropoutMode dropout = DropoutMode::off()) {
  if (labels.size() != tokens.size())
    throw InvalidArgument("loss_and_gradient: label count does not match sequence length");
  std::optional<Eigen::MatrixXd> mask;
  if (dropout.enabled()) {
    Rng rng(dropout.seed());
    mask = detail::mask_for(params, static_cast<Eigen::Index>(tokens.size()),
                            params.config.dropout_rate, rng);
  }
  auto tr = detail::forward_trace(params, tokens, std::move(mask));
  TaggerParams grad = TaggerParams::zeros(params.config);
  const double loss = detail::backward(params, tokens, labels, tr, grad, 1.0);
  return {loss, std::move(grad)};
}

/// Argmax per row; ties go to the lowest index.
inline LabelIds argmax_rows(const Eigen::MatrixXd& probs) {
  LabelIds out(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index t = 0; t < probs.rows(); ++t) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < probs.cols(); ++k)
      if (probs(t, k) > probs(t, best)) best = k;
    out[static_cast<std::size_t>(t)] = static_cast<int>(best);
  }
  return out;
}

inline LabelIds predict(const TaggerParams& params, std::span<const int> tokens) {
  return argmax_rows(forward(params, tokens).probs);
}

/// T dropout passes. Pass i uses the i-th mask of the stream seeded by `seed`,
/// so pass 0 matches forward(params, tokens, DropoutMode::on(seed)).
inline std::vector<LabelIds> mc_forward(const TaggerParams& params, std::span<const int> tokens,
                                        int passes, std::uint64_t seed) {
  if (passes < 1) throw InvalidArgument("mc_forward: need at least one pass");
  const auto enc = detail::encode(params, tokens);
  Rng rng(seed);
  std::vector<LabelIds> out;
  out.reserve(static_cast<std::size_t>(passes));
  for (int i = 0; i < passes; ++i) {
    auto mask = detail::mask_for(params, enc.unmasked.rows(), params.config.dropout_rate, rng);
    const Eigen::MatrixXd hidden = mask ? Eigen::MatrixXd(enc.unmasked.cwiseProduct(*mask)) : enc.unmasked;
    out.push_back(argmax_rows(detail::head(params, hidden)));
  }
  return out;
}

/// Per-epoch hook: (epoch index starting at 1, current params).
using EpochObserver = std::function<void(int, const TaggerParams&)>;

/// Trains from scratch: init_params(config, seed), then `epochs` epochs of
/// minibatch Adam on the mean per-token NLL with dropout on. The epoch
/// shuffles and dropout masks come from one generator seeded by `seed`.
inline TaggerParams train(const TaggerConfig& config, std::span<const EncodedSequence> labeled,
                          std::uint64_t seed, const EpochObserver& observer = {}) {
  config.validate();
  if (labeled.empty()) throw InvalidArgument("train: no labeled sequences");
  for (const auto& s : labeled) {
    if (s.tokens.size() != s.labels.size() || s.tokens.empty())
      throw InvalidArgument("train: malformed sequence " + std::to_string(s.id));
    for (int l : s.labels)
      if (l < 0 || l >= config.num_labels)
        throw InvalidArgument("train: label index out of range in sequence " + std::to_string(s.id));
  }

  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  TaggerParams params = init_params(config, seed);
  TaggerParams m = TaggerParams::zeros(config), v = TaggerParams::zeros(config);
  TaggerParams grad = TaggerParams::zeros(config);
  Rng rng(mix_seed(seed));
  std::vector<std::size_t> order(labeled.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  long step = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
      std::size_t tokens = 0;
      for (std::size_t i = begin; i < end; ++i) tokens += labeled[order[i]].length();
      grad.for_each_tensor([](const char*, auto& t) { t.setZero(); });
      for (std::size_t i = begin; i < end; ++i) {
        const auto& s = labeled[order[i]];
        auto mask = detail::mask_for(params, static_cast<Eigen::Index>(s.length()),
                                     config.dropout_rate, rng);
        auto tr = detail::forward_trace(params, s.tokens, std::move(mask));
        detail::backward(params, s.tokens, s.labels, tr, grad, 1.0 / static_cast<double>(tokens));
      }
      ++step;
      const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
      const double lr = config.learning_rate;
      const auto w = params.flat_views(), mt = m.flat_views(), vt = v.flat_views();
      const auto g = std::as_const(grad).flat_views();
      for (std::size_t k = 0; k < w.size(); ++k) {
        for (std::size_t i = 0; i < w[k].size(); ++i) {
          const double gi = g[k][i];
          mt[k][i] = kBeta1 * mt[k][i] + (1 - kBeta1) * gi;
          vt[k][i] = kBeta2 * vt[k][i] + (1 - kBeta2) * gi * gi;
          w[k][i] -= lr * (mt[k][i] / c1) / (std::sqrt(vt[k][i] / c2) + kEps);
        }
      }
    }
    if (observer) observer(epoch, params);
  }
  return params;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void to_json(nlohmann::json& j, const TaggerConfig& c) {
  j = {{"embed_dim", c.embed_dim},         {"hidden_dim", c.hidden_dim},
       {"dropout_rate", c.dropout_rate},   {"learning_rate", c.learning_rate},
       {"epochs", c.epochs},               {"batch_size", c.batch_size},
       {"num_labels", c.num_labels},       {"vocab_size", c.vocab_size}};
}

inline void from_json(const nlohmann::json& j, TaggerConfig& c) {
  TaggerConfig d;
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  c.dropout_rate = j.value("dropout_rate", d.dropout_rate);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.num_labels = j.value("num_labels", d.num_labels);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
}

inline constexpr int kCheckpointVersion = 1;

/// Versioned JSON checkpoint. Doubles are written in shortest round-trip form,
/// so load(save(p)) == p bit for bit.
inline nlohmann::json params_to_json(const TaggerParams& p) {
  nlohmann::json tensors = nlohmann::json::object();
  p.for_each_tensor([&](const char* name, const auto& t) {
    tensors[name] = {{"rows", t.rows()},
                     {"cols", t.cols()},
                     {"data", std::vector<double>(t.data(), t.data() + t.size())}};
  });
  return {{"format", "seqal-tagger"}, {"version", kCheckpointVersion}, {"config", p.config},
          {"tensors", tensors}};
}

inline TaggerParams params_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "seqal-tagger") throw ParseError("not a tagger checkpoint");
  if (j.value("version", 0) != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(j.value("version", 0)));
  TaggerParams p = TaggerParams::zeros(j.at("config").get<TaggerConfig>());
  p.config.validate();
  const auto& tensors = j.at("tensors");
  p.for_each_tensor([&](const char* name, auto& t) {
    const auto& e = tensors.at(name);
    if (e.at("rows").get<Eigen::Index>() != t.rows() || e.at("cols").get<Eigen::Index>() != t.cols())
      throw ParseError(std::string("checkpoint tensor shape mismatch: ") + name);
    const auto data = e.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != t.size())
      throw ParseError(std::string("checkpoint tensor size mismatch: ") + name);
    std::copy(data.begin(), data.end(), t.data());
  });
  return p;
}

}  // namespace seqal
