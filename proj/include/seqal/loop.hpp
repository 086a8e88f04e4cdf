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

// Round-based active-learning experiments: seed pool, query, annotate,
// retrain from scratch, evaluate, record. Plus multi-run aggregation and the
// learning-curve file formats.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "seqal/common.hpp"
#include "seqal/corpus.hpp"
#include "seqal/strategies.hpp"
#include "seqal/tagger.hpp"

namespace seqal {

// ---------------------------------------------------------------------------
// Configuration

struct SyntheticSource {
  SyntheticConfig gen;
  std::uint64_t seed = 0;
  bool operator==(const SyntheticSource&) const = default;
};

/// Dataset JSON document as written by `gen-data`.
struct JsonFileSource {
  std::string path;
  bool operator==(const JsonFileSource&) const = default;
};

struct ConllSource {
  std::string train, validation, test;
  ConllOptions columns;
  bool operator==(const ConllSource& o) const {
    return train == o.train && validation == o.validation && test == o.test &&
           columns.token_column == o.columns.token_column &&
           columns.label_column == o.columns.label_column;
  }
};

using DatasetSource = std::variant<SyntheticSource, JsonFileSource, ConllSource>;

enum class OracleKind { kSimulated, kHuman };

struct ExperimentConfig {
  DatasetSource dataset = SyntheticSource{};
  Strategy strategy = Strategy::kWbadge;
  /// num_labels and vocab_size are filled in from the dataset.
  TaggerConfig tagger;
  /// Fraction of train sentences in the seed pool.
  double initial_fraction = 0.02;
  Budget budget{BudgetUnit::kWords, 320};
  int n_rounds = 8;
  int n_repeats = 5;
  std::uint64_t base_seed = 0;
  OracleKind oracle = OracleKind::kSimulated;
  int bald_passes = 100;
  /// Service only: train in the background and let clients poll.
  bool async_training = false;
};

struct FieldError {
  std::string field;
  std::string message;
};

/// Checks value ranges; the dataset-dependent budget check lives in
/// check_fits_dataset().
inline std::vector<FieldError> validate(const ExperimentConfig& c) {
  std::vector<FieldError> errs;
  if (!(c.initial_fraction > 0.0 && c.initial_fraction <= 1.0))
    errs.push_back({"initial_fraction", "must be in (0, 1]"});
  if (c.budget.amount == 0) errs.push_back({"budget.amount", "must be positive"});
  if (c.n_rounds < 0) errs.push_back({"n_rounds", "must be nonnegative"});
  if (c.n_repeats < 1) errs.push_back({"n_repeats", "must be positive"});
  if (c.bald_passes < 1) errs.push_back({"bald_passes", "must be positive"});
  const auto& t = c.tagger;
  if (t.embed_dim <= 0) errs.push_back({"tagger.embed_dim", "must be positive"});
  if (t.hidden_dim <= 0) errs.push_back({"tagger.hidden_dim", "must be positive"});
  if (!(t.dropout_rate >= 0.0 && t.dropout_rate < 1.0)) errs.push_back({"tagger.dropout_rate", "must be in [0, 1)"});
  if (!(t.learning_rate > 0.0)) errs.push_back({"tagger.learning_rate", "must be positive"});
  if (t.epochs <= 0) errs.push_back({"tagger.epochs", "must be positive"});
  if (t.batch_size <= 0) errs.push_back({"tagger.batch_size", "must be positive"});
  return errs;
}

inline std::size_t initial_pool_size(const ExperimentConfig& c, std::size_t n_train) {
  return std::min(n_train, static_cast<std::size_t>(
                               std::ceil(c.initial_fraction * static_cast<double>(n_train) - 1e-9)));
}

/// Seed pool plus n_rounds budgets must fit into the train split.
inline std::vector<FieldError> check_fits_dataset(const ExperimentConfig& c, const Dataset& d) {
  std::vector<FieldError> errs;
  if (d.train().empty()) {
    errs.push_back({"dataset", "train split is empty"});
    return errs;
  }
  const std::size_t seed_n = initial_pool_size(c, d.train().size());
  const std::size_t rounds = static_cast<std::size_t>(std::max(0, c.n_rounds));
  if (c.budget.unit == BudgetUnit::kSentences) {
    if (seed_n + rounds * c.budget.amount > d.train().size())
      errs.push_back({"n_rounds", "initial pool plus round budgets exceed the train split"});
  } else {
    std::size_t words = 0;
    for (const auto& s : d.train()) words += s.length();
    // The seed pool's word count is only known after sampling; bound it by the mean.
    const double seed_words = static_cast<double>(words) * static_cast<double>(seed_n) /
                              static_cast<double>(d.train().size());
    if (seed_words + static_cast<double>(rounds * c.budget.amount) > static_cast<double>(words))
      errs.push_back({"n_rounds", "initial pool plus round budgets exceed the train split"});
  }
  return errs;
}

inline std::string_view to_string(BudgetUnit u) { return u == BudgetUnit::kWords ? "words" : "sentences"; }
inline std::string_view to_string(OracleKind o) { return o == OracleKind::kHuman ? "human" : "simulated"; }

inline void to_json(nlohmann::json& j, const ConllOptions& o) {
  j = {{"token_column", o.token_column}};
  j["label_column"] = o.label_column ? nlohmann::json(*o.label_column) : nlohmann::json("last");
}

inline void to_json(nlohmann::json& j, const DatasetSource& s) {
  if (auto* syn = std::get_if<SyntheticSource>(&s)) {
    j = {{"synthetic", syn->gen}, {"seed", syn->seed}};
  } else if (auto* js = std::get_if<JsonFileSource>(&s)) {
    j = {{"json", js->path}};
  } else {
    const auto& c = std::get<ConllSource>(s);
    j = {{"conll", {{"train", c.train}, {"validation", c.validation}, {"test", c.test}}}};
    nlohmann::json cols = c.columns;
    j["conll"].update(cols);
  }
}

inline DatasetSource dataset_source_from_json(const nlohmann::json& j) {
  if (j.contains("synthetic"))
    return SyntheticSource{j.at("synthetic").get<SyntheticConfig>(), j.value("seed", std::uint64_t{0})};
  if (j.contains("json")) return JsonFileSource{j.at("json").get<std::string>()};
  if (j.contains("conll")) {
    const auto& c = j.at("conll");
    ConllSource src{c.at("train").get<std::string>(), c.value("validation", ""), c.value("test", ""), {}};
    src.columns.token_column = c.value("token_column", std::size_t{0});
    if (c.contains("label_column") && c.at("label_column").is_number())
      src.columns.label_column = c.at("label_column").get<std::size_t>();
    return src;
  }
  throw ParseError("dataset: expected one of 'synthetic', 'json', 'conll'");
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json tagger = c.tagger;
  tagger.erase("num_labels");
  tagger.erase("vocab_size");
  return {{"dataset", c.dataset},
          {"strategy", to_string(c.strategy)},
          {"tagger", tagger},
          {"initial_fraction", c.initial_fraction},
          {"budget", {{"unit", to_string(c.budget.unit)}, {"amount", c.budget.amount}}},
          {"n_rounds", c.n_rounds},
          {"n_repeats", c.n_repeats},
          {"base_seed", c.base_seed},
          {"oracle", to_string(c.oracle)},
          {"bald_passes", c.bald_passes},
          {"async_training", c.async_training}};
}

/// Missing keys keep their defaults. Type errors surface as ParseError naming
/// the offending key.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  auto field = [&](const char* key, auto& out) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(out);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string(key) + ": " + e.what());
    }
  };
  try {
    if (j.contains("dataset")) c.dataset = dataset_source_from_json(j.at("dataset"));
    if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
    if (j.contains("tagger")) c.tagger = j.at("tagger").get<TaggerConfig>();
    if (j.contains("budget")) {
      const auto& b = j.at("budget");
      const auto unit = b.value("unit", std::string("words"));
      if (unit != "words" && unit != "sentences") throw ParseError("budget.unit: expected 'words' or 'sentences'");
      c.budget.unit = unit == "words" ? BudgetUnit::kWords : BudgetUnit::kSentences;
      const auto amount = b.at("amount").get<long long>();
      if (amount <= 0) throw ParseError("budget.amount: must be positive");
      c.budget.amount = static_cast<std::size_t>(amount);
    }
    if (j.contains("oracle")) {
      const auto o = j.at("oracle").get<std::string>();
      if (o != "simulated" && o != "human") throw ParseError("oracle: expected 'simulated' or 'human'");
      c.oracle = o == "human" ? OracleKind::kHuman : OracleKind::kSimulated;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(e.what());
  } catch (const InvalidArgument& e) {
    throw ParseError(e.what());
  }
  field("initial_fraction", c.initial_fraction);
  field("n_rounds", c.n_rounds);
  field("n_repeats", c.n_repeats);
  field("base_seed", c.base_seed);
  field("bald_passes", c.bald_passes);
  field("async_training", c.async_training);
  return c;
}

inline Dataset load_dataset(const DatasetSource& src) {
  if (auto* syn = std::get_if<SyntheticSource>(&src)) return generate_synthetic(syn->gen, syn->seed);
  if (auto* js = std::get_if<JsonFileSource>(&src)) {
    try {
      return dataset_from_json(nlohmann::json::parse(read_file(js->path)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(js->path + ": " + e.what());
    }
  }
  const auto& c = std::get<ConllSource>(src);
  LabelSet labels;
  auto load = [&](const std::string& path) {
    if (path.empty()) return std::vector<LabeledSequence>{};
    ConllDocument doc;
    try {
      doc = parse_conll(read_file(path), c.columns);
    } catch (const ParseError& e) {
      throw ParseError(path + ": " + e.what(), e.line());
    }
    // Re-index labels into the shared label set.
    for (auto& s : doc.sequences)
      for (auto& l : s.labels) l = labels.add(doc.label_set.name(l));
    return doc.sequences;
  };
  auto train = load(c.train);
  auto val = load(c.validation);
  auto test = load(c.test);
  return Dataset::from_splits(std::move(labels), std::move(train), std::move(val), std::move(test));
}

/// Fills the dataset-dependent tagger dimensions.
inline TaggerConfig tagger_config_for(const ExperimentConfig& c, const Dataset& d) {
  TaggerConfig t = c.tagger;
  t.num_labels = d.label_set().size();
  t.vocab_size = d.vocab_size();
  return t;
}

// ---------------------------------------------------------------------------
// Curves

struct RoundRecord {
  int round = 0;
  std::size_t words_labeled = 0;
  std::size_t sentences_labeled = 0;
  double precision = 0, recall = 0, f1 = 0;
  std::vector<SequenceId> selected_ids;
  double wall_seconds = 0;
  /// Set when retraining failed after the pool was already updated.
  std::string error;
};

struct LearningCurve {
  nlohmann::json config;
  std::vector<RoundRecord> records;
  bool truncated = false;
};

inline void to_json(nlohmann::json& j, const RoundRecord& r) {
  j = {{"round", r.round},         {"words", r.words_labeled}, {"sentences", r.sentences_labeled},
       {"precision", r.precision}, {"recall", r.recall},       {"f1", r.f1},
       {"selected_ids", r.selected_ids}, {"wall_seconds", r.wall_seconds}};
  if (!r.error.empty()) j["error"] = r.error;
}

inline void from_json(const nlohmann::json& j, RoundRecord& r) {
  r.round = j.at("round").get<int>();
  r.words_labeled = j.at("words").get<std::size_t>();
  r.sentences_labeled = j.at("sentences").get<std::size_t>();
  r.precision = j.at("precision").get<double>();
  r.recall = j.at("recall").get<double>();
  r.f1 = j.at("f1").get<double>();
  r.selected_ids = j.value("selected_ids", std::vector<SequenceId>{});
  r.wall_seconds = j.value("wall_seconds", 0.0);
  r.error = j.value("error", std::string());
}

inline nlohmann::json curve_to_json(const LearningCurve& c) {
  return {{"config", c.config}, {"records", c.records}, {"truncated", c.truncated}};
}

inline LearningCurve curve_from_json(const nlohmann::json& j) {
  return {j.value("config", nlohmann::json::object()), j.at("records").get<std::vector<RoundRecord>>(),
          j.value("truncated", false)};
}

inline constexpr std::string_view kCurveCsvHeader = "round,words,sentences,precision,recall,f1";

namespace detail {
inline std::string fmt_real(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}
}  // namespace detail

inline std::string curve_to_csv(const LearningCurve& c) {
  std::string out(kCurveCsvHeader);
  out += '\n';
  for (const auto& r : c.records) {
    out += std::to_string(r.round) + ',' + std::to_string(r.words_labeled) + ',' +
           std::to_string(r.sentences_labeled) + ',' + detail::fmt_real(r.precision) + ',' +
           detail::fmt_real(r.recall) + ',' + detail::fmt_real(r.f1) + '\n';
  }
  return out;
}

/// Reads the six-column curve CSV (extra trailing columns are ignored).
inline LearningCurve curve_from_csv(std::string_view text) {
  LearningCurve c;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string line(text.substr(pos, eol - pos));
    pos = eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line.rfind(kCurveCsvHeader, 0) != 0) throw ParseError("unexpected curve CSV header", 1);
      continue;
    }
    RoundRecord r;
    unsigned long long words = 0, sentences = 0;
    if (std::sscanf(line.c_str(), "%d,%llu,%llu,%lf,%lf,%lf", &r.round, &words, &sentences,
                    &r.precision, &r.recall, &r.f1) != 6)
      throw ParseError("malformed curve row", line_no);
    r.words_labeled = words;
    r.sentences_labeled = sentences;
    c.records.push_back(std::move(r));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Oracles

/// Gold train labels for each id, in order.
inline std::vector<LabelIds> simulated_oracle(const Dataset& dataset, std::span<const SequenceId> ids) {
  std::vector<LabelIds> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(dataset.train_sequence(id).labels);
  return out;
}

inline ChunkScores evaluate(const TaggerParams& params, std::span<const EncodedSequence> split,
                            const LabelSet& labels) {
  std::vector<LabelIds> gold, pred;
  for (const auto& s : split) {
    gold.push_back(s.labels);
    pred.push_back(predict(params, s.tokens));
  }
  return chunk_f1(gold, pred, labels);
}

/// Experiment seed of repeat `i`.
inline std::uint64_t repeat_seed(std::uint64_t base_seed, int i) {
  return mix_seed(base_seed + static_cast<std::uint64_t>(i));
}

/// Uniform sample of the seed pool.
inline std::vector<SequenceId> draw_seed_pool(const Dataset& d, double fraction, std::uint64_t seed) {
  std::vector<SequenceId> ids;
  for (const auto& s : d.train()) ids.push_back(s.id);
  std::sort(ids.begin(), ids.end());
  Rng rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  ExperimentConfig c;
  c.initial_fraction = fraction;
  ids.resize(initial_pool_size(c, ids.size()));
  return ids;
}

/// Optional per-round hook, e.g. for progress output or invariant checks.
using RoundObserver = std::function<void(const RoundRecord&, const Pool&)>;

/// What the last round left behind: the trained model and the labeled ids.
struct FinalState {
  TaggerParams params;
  std::vector<SequenceId> labeled_ids;
};

/// Runs one experiment with the simulated oracle. Round r (>= 1) selects and
/// retrains with seed (base_seed XOR r); round 0 trains on a uniformly drawn
/// seed pool. Stops early, flagging the curve truncated, when the unlabeled
/// pool cannot cover a round's budget.
inline LearningCurve run_experiment(const ExperimentConfig& config, const Dataset& dataset,
                                    const RoundObserver& observer = {},
                                    FinalState* final_state = nullptr) {
  if (auto errs = validate(config); !errs.empty())
    throw InvalidArgument("config: " + errs.front().field + " " + errs.front().message);
  if (config.oracle != OracleKind::kSimulated)
    throw InvalidArgument("run_experiment: the human oracle is only available through the service");
  if (dataset.train().empty()) throw InvalidArgument("run_experiment: empty train split");

  const TaggerConfig tcfg = tagger_config_for(config, dataset);
  const auto train = dataset.encode(Split::kTrain);
  const auto test = dataset.encode(Split::kTest);
  std::unordered_map<SequenceId, std::size_t> pos;
  for (std::size_t i = 0; i < train.size(); ++i) pos[train[i].id] = i;

  LearningCurve curve;
  curve.config = config_to_json(config);
  Pool pool(dataset.train());
  // Labels as supplied by the oracle, keyed by id.
  std::map<SequenceId, LabelIds> annotations;

  auto annotate = [&](std::span<const SequenceId> ids) {
    auto labels = simulated_oracle(dataset, ids);
    for (std::size_t i = 0; i < ids.size(); ++i) annotations[ids[i]] = std::move(labels[i]);
    pool.label(ids);
  };
  auto labeled_set = [&] {
    std::vector<EncodedSequence> out;
    for (const auto& [id, labels] : annotations) out.push_back({id, train[pos.at(id)].tokens, labels});
    return out;
  };
  auto finish_round = [&](int round, std::vector<SequenceId> selected, const TaggerParams& params,
                          std::chrono::steady_clock::time_point t0) {
    RoundRecord r;
    r.round = round;
    r.words_labeled = pool.words_labeled();
    r.sentences_labeled = pool.sentences_labeled();
    const auto s = evaluate(params, test, dataset.label_set());
    r.precision = s.precision;
    r.recall = s.recall;
    r.f1 = s.f1;
    r.selected_ids = std::move(selected);
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (observer) observer(r, pool);
    curve.records.push_back(std::move(r));
  };

  auto t0 = std::chrono::steady_clock::now();
  auto seed_ids = draw_seed_pool(dataset, config.initial_fraction, config.base_seed);
  annotate(seed_ids);
  TaggerParams params = seqal::train(tcfg, labeled_set(), config.base_seed);
  finish_round(0, std::move(seed_ids), params, t0);

  for (int r = 1; r <= config.n_rounds; ++r) {
    t0 = std::chrono::steady_clock::now();
    const std::uint64_t seed = config.base_seed ^ static_cast<std::uint64_t>(r);
    const bool enough = config.budget.unit == BudgetUnit::kWords
                            ? pool.words_unlabeled() >= config.budget.amount
                            : pool.unlabeled_ids().size() >= config.budget.amount;
    if (!enough) {
      curve.truncated = true;
      break;
    }
    auto batch = select_batch(config.strategy, params, pool, train, config.budget, seed,
                              {config.bald_passes, r});
    annotate(batch.selected_ids);
    params = seqal::train(tcfg, labeled_set(), seed);
    finish_round(r, std::move(batch.selected_ids), params, t0);
  }
  if (final_state) {
    final_state->params = std::move(params);
    final_state->labeled_ids.assign(pool.labeled_ids().begin(), pool.labeled_ids().end());
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Aggregation

struct AggregateRow {
  int round = 0;
  double words_mean = 0, sentences_mean = 0;
  double precision_mean = 0, recall_mean = 0;
  double f1_mean = 0, f1_std = 0;
};

namespace detail {
/// Sorting first makes the result independent of input order.
inline double sorted_mean(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  double s = 0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}
inline double sorted_sample_std(std::vector<double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = sorted_mean(xs);
  std::vector<double> sq;
  for (double x : xs) sq.push_back((x - m) * (x - m));
  std::sort(sq.begin(), sq.end());
  double s = 0;
  for (double x : sq) s += x;
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}
}  // namespace detail

/// Per round (aligned by index): means, and the sample std of F1.
inline std::vector<AggregateRow> aggregate_runs(std::span<const LearningCurve> curves) {
  if (curves.empty()) throw InvalidArgument("aggregate_runs: no curves");
  const std::size_t n = curves.front().records.size();
  for (const auto& c : curves)
    if (c.records.size() != n) throw InvalidArgument("aggregate_runs: curves differ in length");
  std::vector<AggregateRow> rows;
  for (std::size_t r = 0; r < n; ++r) {
    std::vector<double> words, sents, p, rc, f;
    for (const auto& c : curves) {
      const auto& rec = c.records[r];
      words.push_back(static_cast<double>(rec.words_labeled));
      sents.push_back(static_cast<double>(rec.sentences_labeled));
      p.push_back(rec.precision);
      rc.push_back(rec.recall);
      f.push_back(rec.f1);
    }
    rows.push_back({curves.front().records[r].round, detail::sorted_mean(words),
                    detail::sorted_mean(sents), detail::sorted_mean(p), detail::sorted_mean(rc),
                    detail::sorted_mean(f), detail::sorted_sample_std(f)});
  }
  return rows;
}

/// The curve columns (as per-round means) followed by f1_mean,f1_std,words_mean.
inline std::string aggregate_to_csv(std::span<const AggregateRow> rows) {
  std::string out(kCurveCsvHeader);
  out += ",f1_mean,f1_std,words_mean\n";
  using detail::fmt_real;
  for (const auto& r : rows) {
    out += std::to_string(r.round) + ',' + fmt_real(r.words_mean) + ',' + fmt_real(r.sentences_mean) + ',' +
           fmt_real(r.precision_mean) + ',' + fmt_real(r.recall_mean) + ',' + fmt_real(r.f1_mean) + ',' +
           fmt_real(r.f1_mean) + ',' + fmt_real(r.f1_std) + ',' + fmt_real(r.words_mean) + '\n';
  }
  return out;
}

inline nlohmann::json aggregate_to_json(std::span<const AggregateRow> rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows)
    arr.push_back({{"round", r.round},
                   {"words_mean", r.words_mean},
                   {"sentences_mean", r.sentences_mean},
                   {"precision_mean", r.precision_mean},
                   {"recall_mean", r.recall_mean},
                   {"f1_mean", r.f1_mean},
                   {"f1_std", r.f1_std}});
  return {{"rounds", arr}};
}

}  // namespace seqal
