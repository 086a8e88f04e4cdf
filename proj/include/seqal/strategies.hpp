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

// Query strategies for pool-based active learning over sequences.
//
// Uncertainty: MNLP (length-normalized log confidence) and BALD (MC-dropout
// disagreement). Diversity: core-set furthest-first traversal. Hybrid: BADGE,
// k-means++ seeding over last-layer gradient embeddings, and W-BADGE, which
// multiplies the k-means++ sampling mass by w(x) = l(x)^2 / sum l^2.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "seqal/common.hpp"
#include "seqal/corpus.hpp"
#include "seqal/tagger.hpp"

namespace seqal {

enum class Strategy { kRandom, kMnlp, kBald, kCoreset, kBadge, kWbadge };

inline constexpr std::array<Strategy, 6> kAllStrategies = {
    Strategy::kRandom, Strategy::kMnlp,  Strategy::kBald,
    Strategy::kCoreset, Strategy::kBadge, Strategy::kWbadge};

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::kRandom: return "random";
    case Strategy::kMnlp: return "mnlp";
    case Strategy::kBald: return "bald";
    case Strategy::kCoreset: return "coreset";
    case Strategy::kBadge: return "badge";
    case Strategy::kWbadge: return "wbadge";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view name) {
  for (auto s : kAllStrategies)
    if (to_string(s) == name) return s;
  throw InvalidArgument("unknown strategy '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Budgets and batches

enum class BudgetUnit { kWords, kSentences };

struct Budget {
  BudgetUnit unit = BudgetUnit::kSentences;
  std::size_t amount = 1;

  bool operator==(const Budget&) const = default;
};

/// Word budgets are met by the sentence that crosses the threshold (the
/// overshoot is kept); sentence budgets take exactly `amount` sentences.
class BudgetMeter {
 public:
  explicit BudgetMeter(Budget b) : budget_(b) {}
  void add(std::size_t length) {
    words_ += length;
    ++sentences_;
  }
  bool satisfied() const {
    return (budget_.unit == BudgetUnit::kWords ? words_ : sentences_) >= budget_.amount;
  }
  std::size_t words() const { return words_; }

 private:
  Budget budget_;
  std::size_t words_ = 0, sentences_ = 0;
};

struct QueryBatch {
  std::vector<SequenceId> selected_ids;
  std::size_t total_words = 0;
  Strategy strategy = Strategy::kRandom;
  int round = 0;
};

/// One pooled vector per candidate sequence. For gradient embeddings the
/// values are K contiguous blocks of H'.
struct Embedding {
  SequenceId id = 0;
  std::size_t length = 0;
  Eigen::VectorXd values;
};
using GradientEmbedding = Embedding;

// ---------------------------------------------------------------------------
// Scores

/// (1/n) sum_t log max_i probs[t][i]. Lower means less confident.
inline double mnlp_score(const Eigen::MatrixXd& probs) {
  if (probs.rows() == 0) throw InvalidArgument("mnlp_score: empty sequence");
  double s = 0.0;
  for (Eigen::Index t = 0; t < probs.rows(); ++t) s += std::log(probs.row(t).maxCoeff());
  return s / static_cast<double>(probs.rows());
}

/// 1 - (multiplicity of the most common full label sequence) / T.
inline double bald_disagreement(std::span<const LabelIds> predictions) {
  if (predictions.empty()) throw InvalidArgument("bald_disagreement: need at least one pass");
  std::map<LabelIds, int> counts;
  int best = 0;
  for (const auto& p : predictions) {
    if (p.size() != predictions.front().size())
      throw InvalidArgument("bald_disagreement: predictions differ in length");
    best = std::max(best, ++counts[p]);
  }
  return 1.0 - static_cast<double>(best) / static_cast<double>(predictions.size());
}

/// Gradient of the NLL with respect to the output weights, taking the model's
/// own argmax as the label: block i = sum_t (p_ti - [i == yhat_t]) h_t.
inline GradientEmbedding gradient_embedding(const Eigen::MatrixXd& probs,
                                            const Eigen::MatrixXd& hiddens, SequenceId id = 0) {
  if (probs.rows() != hiddens.rows())
    throw InvalidArgument("gradient_embedding: probs and hiddens disagree on length");
  const Eigen::Index k = probs.cols(), h = hiddens.cols();
  Eigen::MatrixXd residual = probs;
  const auto hyp = argmax_rows(probs);
  for (Eigen::Index t = 0; t < probs.rows(); ++t) residual(t, hyp[static_cast<std::size_t>(t)]) -= 1.0;
  // Row i of (residual^T hiddens) is block i.
  const Eigen::MatrixXd blocks = residual.transpose() * hiddens;
  GradientEmbedding g{id, static_cast<std::size_t>(probs.rows()), Eigen::VectorXd(k * h)};
  for (Eigen::Index i = 0; i < k; ++i) g.values.segment(i * h, h) = blocks.row(i).transpose();
  return g;
}

/// Mean of the hidden rows.
inline Eigen::VectorXd sequence_embedding(const Eigen::MatrixXd& hiddens) {
  if (hiddens.rows() == 0) throw InvalidArgument("sequence_embedding: empty sequence");
  return hiddens.colwise().mean().transpose();
}

/// w_j = l_j^2 / sum_k l_k^2
inline std::vector<double> length_weights(std::span<const std::size_t> lengths) {
  if (lengths.empty()) throw InvalidArgument("length_weights: empty list");
  double total = 0.0;
  for (auto l : lengths) total += static_cast<double>(l) * static_cast<double>(l);
  if (total <= 0.0) throw InvalidArgument("length_weights: lengths must be positive");
  std::vector<double> w;
  w.reserve(lengths.size());
  for (auto l : lengths) w.push_back(static_cast<double>(l) * static_cast<double>(l) / total);
  return w;
}

// ---------------------------------------------------------------------------
// k-means++ seeding

/// Sequential (weighted) k-means++ center sampling over a fixed point set.
/// After each select(), the squared distance of every point to its nearest
/// selected center is maintained incrementally.
class KMeansPPSampler {
 public:
  /// `weights` empty means unweighted (w = 1 everywhere).
  KMeansPPSampler(std::span<const Embedding> points, std::vector<double> weights = {})
      : points_(points),
        weights_(std::move(weights)),
        min_sq_(points.size(), std::numeric_limits<double>::infinity()),
        selected_(points.size(), false) {
    if (!weights_.empty() && weights_.size() != points.size())
      throw InvalidArgument("kmeans++: weights do not align with points");
    for (double w : weights_)
      if (!(w >= 0.0)) throw InvalidArgument("kmeans++: weights must be nonnegative");
  }

  std::size_t size() const { return points_.size(); }
  std::size_t remaining() const { return points_.size() - n_selected_; }
  bool is_selected(std::size_t i) const { return selected_[i]; }
  const std::vector<double>& min_sq_distances() const { return min_sq_; }

  void select(std::size_t i) {
    if (selected_.at(i)) throw InvalidArgument("kmeans++: point already selected");
    selected_[i] = true;
    ++n_selected_;
    const auto& c = points_[i].values;
    for (std::size_t j = 0; j < points_.size(); ++j) {
      if (selected_[j]) continue;
      min_sq_[j] = std::min(min_sq_[j], (points_[j].values - c).squaredNorm());
    }
    min_sq_[i] = 0.0;
  }

  /// Exact probability of each point being the next center. With no center
  /// yet this is proportional to w (uniform if unweighted); afterwards to
  /// w * d^2, falling back to w, then to uniform, when that mass is zero.
  std::vector<double> next_distribution() const {
    std::vector<double> p(points_.size(), 0.0);
    if (remaining() == 0) return p;
    double total = 0.0;
    if (n_selected_ > 0) {
      for (std::size_t j = 0; j < p.size(); ++j)
        if (!selected_[j]) total += p[j] = weight(j) * min_sq_[j];
    }
    if (!(total > 0.0)) {
      total = 0.0;
      for (std::size_t j = 0; j < p.size(); ++j)
        if (!selected_[j]) total += p[j] = weight(j);
    }
    if (!(total > 0.0)) {
      total = 0.0;
      for (std::size_t j = 0; j < p.size(); ++j)
        if (!selected_[j]) total += p[j] = 1.0;
    }
    for (auto& x : p) x /= total;
    return p;
  }

  /// Draws the next center from next_distribution() and selects it.
  std::size_t sample_next(Rng& rng) {
    if (remaining() == 0) throw InvalidArgument("kmeans++: no points left");
    const auto p = next_distribution();
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double cum = 0.0;
    std::size_t pick = p.size();
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (p[j] <= 0.0) continue;
      pick = j;  // last positive entry absorbs rounding at the top end
      cum += p[j];
      if (u < cum) break;
    }
    select(pick);
    return pick;
  }

 private:
  double weight(std::size_t j) const { return weights_.empty() ? 1.0 : weights_[j]; }

  std::span<const Embedding> points_;
  std::vector<double> weights_;
  std::vector<double> min_sq_;
  std::vector<bool> selected_;
  std::size_t n_selected_ = 0;
};

/// Samples centers until the budget is met or the points run out.
inline QueryBatch kmeanspp_select(std::span<const Embedding> embeddings,
                                  std::optional<std::span<const double>> weights, Budget budget,
                                  std::uint64_t rng_seed) {
  if (embeddings.empty()) throw InvalidArgument("kmeanspp_select: no candidates");
  std::vector<double> w;
  if (weights) {
    if (weights->size() != embeddings.size())
      throw InvalidArgument("kmeanspp_select: weights do not align with embeddings");
    const double total = std::accumulate(weights->begin(), weights->end(), 0.0);
    if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("kmeanspp_select: weights must sum to 1");
    w.assign(weights->begin(), weights->end());
  }
  KMeansPPSampler sampler(embeddings, std::move(w));
  Rng rng(rng_seed);
  BudgetMeter meter(budget);
  QueryBatch batch;
  batch.strategy = weights ? Strategy::kWbadge : Strategy::kBadge;
  while (!meter.satisfied() && sampler.remaining() > 0) {
    const auto i = sampler.sample_next(rng);
    batch.selected_ids.push_back(embeddings[i].id);
    meter.add(embeddings[i].length);
  }
  batch.total_words = meter.words();
  return batch;
}

// ---------------------------------------------------------------------------
// Core-set

/// Greedy furthest-first traversal: each pick maximizes the distance to the
/// nearest labeled or already-picked point (ties to the lowest id). With no
/// labeled points the first pick is the candidate furthest from the centroid.
inline QueryBatch coreset_select(std::span<const Embedding> unlabeled,
                                 std::span<const Eigen::VectorXd> labeled, Budget budget) {
  QueryBatch batch;
  batch.strategy = Strategy::kCoreset;
  if (unlabeled.empty()) return batch;

  std::vector<std::size_t> order(unlabeled.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](auto a, auto b) { return unlabeled[a].id < unlabeled[b].id; });

  std::vector<double> min_sq(unlabeled.size(), std::numeric_limits<double>::infinity());
  std::vector<bool> taken(unlabeled.size(), false);
  for (const auto& c : labeled)
    for (std::size_t j = 0; j < unlabeled.size(); ++j)
      min_sq[j] = std::min(min_sq[j], (unlabeled[j].values - c).squaredNorm());
  if (labeled.empty()) {
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(unlabeled.front().values.size());
    for (const auto& e : unlabeled) centroid += e.values;
    centroid /= static_cast<double>(unlabeled.size());
    // Distances to the centroid seed the first pick only.
    for (std::size_t j = 0; j < unlabeled.size(); ++j)
      min_sq[j] = (unlabeled[j].values - centroid).squaredNorm();
  }

  BudgetMeter meter(budget);
  for (bool first = true; !meter.satisfied() && batch.selected_ids.size() < unlabeled.size(); first = false) {
    std::size_t best = unlabeled.size();
    for (auto j : order) {
      if (taken[j]) continue;
      if (best == unlabeled.size() || min_sq[j] > min_sq[best]) best = j;
    }
    taken[best] = true;
    batch.selected_ids.push_back(unlabeled[best].id);
    meter.add(unlabeled[best].length);
    if (first && labeled.empty()) std::fill(min_sq.begin(), min_sq.end(), std::numeric_limits<double>::infinity());
    for (std::size_t j = 0; j < unlabeled.size(); ++j)
      if (!taken[j]) min_sq[j] = std::min(min_sq[j], (unlabeled[j].values - unlabeled[best].values).squaredNorm());
  }
  batch.total_words = meter.words();
  return batch;
}

// ---------------------------------------------------------------------------
// Unified entry point

struct SelectOptions {
  int bald_passes = 100;
  int round = 0;
};

namespace detail {

inline QueryBatch take_ranked(std::span<const EncodedSequence* const> ranked, Budget budget,
                              Strategy s) {
  QueryBatch batch;
  batch.strategy = s;
  BudgetMeter meter(budget);
  for (const auto* seq : ranked) {
    if (meter.satisfied()) break;
    batch.selected_ids.push_back(seq->id);
    meter.add(seq->length());
  }
  batch.total_words = meter.words();
  return batch;
}

}  // namespace detail

/// Selects one query batch from the unlabeled part of `pool`. `train` is the
/// encoded train split. All forward passes are dropout-off except BALD's.
inline QueryBatch select_batch(Strategy strategy, const TaggerParams& params, const Pool& pool,
                               std::span<const EncodedSequence> train, Budget budget,
                               std::uint64_t seed, SelectOptions opts = {}) {
  if (pool.unlabeled_ids().empty()) throw InvalidArgument("select_batch: unlabeled pool is empty");
  std::unordered_map<SequenceId, const EncodedSequence*> by_id;
  for (const auto& s : train) by_id[s.id] = &s;
  std::vector<const EncodedSequence*> candidates;  // ascending id
  for (auto id : pool.unlabeled_ids()) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw InvalidArgument("select_batch: pool id " + std::to_string(id) + " not in train split");
    candidates.push_back(it->second);
  }

  QueryBatch batch;
  switch (strategy) {
    case Strategy::kRandom: {
      Rng rng(seed);
      std::shuffle(candidates.begin(), candidates.end(), rng);
      batch = detail::take_ranked(candidates, budget, strategy);
      break;
    }
    case Strategy::kMnlp: {
      std::vector<std::pair<double, const EncodedSequence*>> scored;
      for (const auto* s : candidates) scored.emplace_back(mnlp_score(forward(params, s->tokens).probs), s);
      std::stable_sort(scored.begin(), scored.end(),
                       [](const auto& a, const auto& b) { return a.first < b.first; });
      std::vector<const EncodedSequence*> ranked;
      for (auto& [_, s] : scored) ranked.push_back(s);
      batch = detail::take_ranked(ranked, budget, strategy);
      break;
    }
    case Strategy::kBald: {
      std::vector<std::pair<double, const EncodedSequence*>> scored;
      for (const auto* s : candidates) {
        // Per-sequence mask stream, so scores do not depend on visiting order.
        const auto preds = mc_forward(params, s->tokens, opts.bald_passes,
                                      mix_seed(seed ^ mix_seed(static_cast<std::uint64_t>(s->id))));
        scored.emplace_back(bald_disagreement(preds), s);
      }
      std::stable_sort(scored.begin(), scored.end(),
                       [](const auto& a, const auto& b) { return a.first > b.first; });
      std::vector<const EncodedSequence*> ranked;
      for (auto& [_, s] : scored) ranked.push_back(s);
      batch = detail::take_ranked(ranked, budget, strategy);
      break;
    }
    case Strategy::kCoreset: {
      std::vector<Embedding> unl;
      for (const auto* s : candidates)
        unl.push_back({s->id, s->length(), sequence_embedding(forward(params, s->tokens).hiddens)});
      std::vector<Eigen::VectorXd> lab;
      for (auto id : pool.labeled_ids())
        lab.push_back(sequence_embedding(forward(params, by_id.at(id)->tokens).hiddens));
      batch = coreset_select(unl, lab, budget);
      break;
    }
    case Strategy::kBadge:
    case Strategy::kWbadge: {
      std::vector<GradientEmbedding> emb;
      std::vector<std::size_t> lengths;
      for (const auto* s : candidates) {
        const auto out = forward(params, s->tokens);
        emb.push_back(gradient_embedding(out.probs, out.hiddens, s->id));
        lengths.push_back(s->length());
      }
      if (strategy == Strategy::kWbadge) {
        const auto w = length_weights(lengths);
        batch = kmeanspp_select(emb, std::span<const double>(w), budget, seed);
      } else {
        batch = kmeanspp_select(emb, std::nullopt, budget, seed);
      }
      break;
    }
  }
  batch.strategy = strategy;
  batch.round = opts.round;
  return batch;
}

/// Dropout-off embeddings for the given train sequences.
inline std::vector<Embedding> compute_embeddings(const TaggerParams& params,
                                                 std::span<const EncodedSequence> seqs,
                                                 bool gradient) {
  std::vector<Embedding> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) {
    const auto r = forward(params, s.tokens);
    if (gradient) out.push_back(gradient_embedding(r.probs, r.hiddens, s.id));
    else out.push_back({s.id, s.length(), sequence_embedding(r.hiddens)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding matrix dumps

/// CSV with header "id,length,v0,...,v{d-1}"; values in shortest round-trip form.
inline std::string embeddings_to_csv(std::span<const Embedding> rows) {
  std::string out = "id,length";
  const Eigen::Index dim = rows.empty() ? 0 : rows.front().values.size();
  for (Eigen::Index i = 0; i < dim; ++i) out += ",v" + std::to_string(i);
  out += '\n';
  char buf[32];
  for (const auto& r : rows) {
    out += std::to_string(r.id) + "," + std::to_string(r.length);
    for (Eigen::Index i = 0; i < r.values.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", r.values[i]);
      out += ',';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

inline constexpr char kEmbeddingMagic[4] = {'S', 'Q', 'E', 'M'};
inline constexpr std::uint32_t kEmbeddingVersion = 1;

/// Little-endian: "SQEM", u32 version, u64 rows, u64 dim, then per row
/// i64 id, u64 length, dim x f64.
inline std::string embeddings_to_binary(std::span<const Embedding> rows) {
  static_assert(std::endian::native == std::endian::little, "binary dump assumes little-endian host");
  std::string out;
  auto put = [&](const auto& v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof v);
  };
  out.append(kEmbeddingMagic, 4);
  put(kEmbeddingVersion);
  const std::uint64_t n = rows.size();
  const std::uint64_t dim = rows.empty() ? 0 : static_cast<std::uint64_t>(rows.front().values.size());
  put(n);
  put(dim);
  for (const auto& r : rows) {
    if (static_cast<std::uint64_t>(r.values.size()) != dim)
      throw InvalidArgument("embeddings_to_binary: ragged rows");
    put(static_cast<std::int64_t>(r.id));
    put(static_cast<std::uint64_t>(r.length));
    out.append(reinterpret_cast<const char*>(r.values.data()), dim * sizeof(double));
  }
  return out;
}

inline std::vector<Embedding> embeddings_from_binary(std::string_view data) {
  std::size_t off = 0;
  auto get = [&](auto& v) {
    if (off + sizeof v > data.size()) throw ParseError("embedding dump truncated");
    std::memcpy(&v, data.data() + off, sizeof v);
    off += sizeof v;
  };
  if (data.size() < 4 || std::memcmp(data.data(), kEmbeddingMagic, 4) != 0)
    throw ParseError("not an embedding dump");
  off = 4;
  std::uint32_t version = 0;
  std::uint64_t n = 0, dim = 0;
  get(version);
  if (version != kEmbeddingVersion) throw ParseError("unsupported embedding dump version");
  get(n);
  get(dim);
  std::vector<Embedding> rows;
  for (std::uint64_t i = 0; i < n; ++i) {
    std::int64_t id = 0;
    std::uint64_t len = 0;
    get(id);
    get(len);
    Embedding e{id, static_cast<std::size_t>(len), Eigen::VectorXd(static_cast<Eigen::Index>(dim))};
    for (std::uint64_t k = 0; k < dim; ++k) get(e.values[static_cast<Eigen::Index>(k)]);
    rows.push_back(std::move(e));
  }
  return rows;
}

}  // namespace seqal
