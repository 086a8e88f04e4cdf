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

// Sequence-labeling data model: label sets, labeled sequences, datasets, the
// labeled/unlabeled pool, CoNLL ingestion, BIO chunk decoding and chunk F1.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "seqal/common.hpp"

namespace seqal {

inline constexpr std::string_view kOutsideLabel = "O";
inline constexpr std::string_view kUnknownWord = "<unk>";

/// Splits "B-PER" into ('B', "PER"). Returns nullopt for anything that is not
/// "O" or a well-formed B-/I- tag. 'O' is returned with an empty type.
inline std::optional<std::pair<char, std::string>> parse_bio(std::string_view label) {
  if (label == kOutsideLabel) return std::pair<char, std::string>{'O', {}};
  if (label.size() < 3 || label[1] != '-') return std::nullopt;
  if (label[0] != 'B' && label[0] != 'I') return std::nullopt;
  return std::pair<char, std::string>{label[0], std::string(label.substr(2))};
}

/// Ordered BIO label inventory. "O" is always present, at index 0.
class LabelSet {
 public:
  LabelSet() { add(kOutsideLabel); }

  explicit LabelSet(std::span<const std::string> labels) : LabelSet() {
    for (const auto& l : labels) add(l);
  }

  /// Adds a label if absent and returns its index.
  int add(std::string_view label) {
    if (auto it = index_.find(std::string(label)); it != index_.end()) return it->second;
    if (!parse_bio(label)) throw InvalidArgument("not a BIO label: '" + std::string(label) + "'");
    const int idx = static_cast<int>(labels_.size());
    labels_.emplace_back(label);
    index_.emplace(labels_.back(), idx);
    return idx;
  }

  int index_of(std::string_view label) const {
    auto it = index_.find(std::string(label));
    if (it == index_.end()) throw InvalidArgument("unknown label '" + std::string(label) + "'");
    return it->second;
  }

  bool contains(std::string_view label) const { return index_.count(std::string(label)) > 0; }
  const std::string& name(int idx) const { return labels_.at(static_cast<std::size_t>(idx)); }
  const std::vector<std::string>& labels() const { return labels_; }
  int size() const { return static_cast<int>(labels_.size()); }

  std::vector<std::string> names(std::span<const int> ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(name(i));
    return out;
  }

  bool operator==(const LabelSet& o) const { return labels_ == o.labels_; }

 private:
  std::vector<std::string> labels_;
  std::unordered_map<std::string, int> index_;
};

struct LabeledSequence {
  SequenceId id = 0;
  std::vector<std::string> tokens;
  LabelIds labels;

  std::size_t length() const { return tokens.size(); }
  bool operator==(const LabeledSequence&) const = default;
};

/// A sequence with tokens mapped to vocabulary indices; what the tagger eats.
struct EncodedSequence {
  SequenceId id = 0;
  TokenIds tokens;
  LabelIds labels;
  std::size_t length() const { return tokens.size(); }
};

enum class Split { kTrain, kValidation, kTest };

class Dataset {
 public:
  Dataset() { set_vocabulary({}); }

  Dataset(LabelSet label_set, std::vector<std::string> vocabulary,
          std::vector<LabeledSequence> train, std::vector<LabeledSequence> validation,
          std::vector<LabeledSequence> test)
      : label_set_(std::move(label_set)),
        train_(std::move(train)),
        validation_(std::move(validation)),
        test_(std::move(test)) {
    set_vocabulary(std::move(vocabulary));
    for (auto split : {Split::kTrain, Split::kValidation, Split::kTest}) validate(split);
  }

  /// Builds the vocabulary from the train split's tokens in first-seen order.
  static Dataset from_splits(LabelSet label_set, std::vector<LabeledSequence> train,
                             std::vector<LabeledSequence> validation,
                             std::vector<LabeledSequence> test) {
    std::vector<std::string> vocab;
    std::set<std::string> seen;
    for (const auto& s : train)
      for (const auto& t : s.tokens)
        if (seen.insert(t).second) vocab.push_back(t);
    return Dataset(std::move(label_set), std::move(vocab), std::move(train),
                   std::move(validation), std::move(test));
  }

  const LabelSet& label_set() const { return label_set_; }
  /// Index 0 is the reserved unknown-word entry.
  const std::vector<std::string>& vocabulary() const { return vocabulary_; }
  int vocab_size() const { return static_cast<int>(vocabulary_.size()); }

  const std::vector<LabeledSequence>& split(Split s) const {
    switch (s) {
      case Split::kTrain: return train_;
      case Split::kValidation: return validation_;
      case Split::kTest: return test_;
    }
    return train_;
  }
  const std::vector<LabeledSequence>& train() const { return train_; }
  const std::vector<LabeledSequence>& validation() const { return validation_; }
  const std::vector<LabeledSequence>& test() const { return test_; }

  int word_index(const std::string& word) const {
    auto it = word_index_.find(word);
    return it == word_index_.end() ? 0 : it->second;
  }

  EncodedSequence encode(const LabeledSequence& s) const {
    EncodedSequence e{s.id, {}, s.labels};
    e.tokens.reserve(s.tokens.size());
    for (const auto& t : s.tokens) e.tokens.push_back(word_index(t));
    return e;
  }

  std::vector<EncodedSequence> encode(Split s) const {
    std::vector<EncodedSequence> out;
    out.reserve(split(s).size());
    for (const auto& seq : split(s)) out.push_back(encode(seq));
    return out;
  }

  /// Train sequence by id. Throws if absent.
  const LabeledSequence& train_sequence(SequenceId id) const {
    auto it = train_pos_.find(id);
    if (it == train_pos_.end())
      throw InvalidArgument("unknown train sequence id " + std::to_string(id));
    return train_[it->second];
  }
  bool has_train_id(SequenceId id) const { return train_pos_.count(id) > 0; }

  bool operator==(const Dataset& o) const {
    return label_set_ == o.label_set_ && vocabulary_ == o.vocabulary_ && train_ == o.train_ &&
           validation_ == o.validation_ && test_ == o.test_;
  }

 private:
  void set_vocabulary(std::vector<std::string> words) {
    vocabulary_.clear();
    word_index_.clear();
    vocabulary_.emplace_back(kUnknownWord);
    for (auto& w : words) {
      if (w == kUnknownWord) continue;
      if (word_index_.emplace(w, static_cast<int>(vocabulary_.size())).second)
        vocabulary_.push_back(std::move(w));
    }
  }

  void validate(Split s) {
    std::set<SequenceId> ids;
    for (const auto& seq : split(s)) {
      if (!ids.insert(seq.id).second)
        throw InvalidArgument("duplicate sequence id " + std::to_string(seq.id));
      if (seq.tokens.empty()) throw InvalidArgument("empty sequence " + std::to_string(seq.id));
      if (seq.labels.size() != seq.tokens.size())
        throw InvalidArgument("label/token length mismatch in sequence " + std::to_string(seq.id));
      for (int l : seq.labels)
        if (l < 0 || l >= label_set_.size())
          throw InvalidArgument("label index out of range in sequence " + std::to_string(seq.id));
    }
    if (s == Split::kTrain)
      for (std::size_t i = 0; i < train_.size(); ++i) train_pos_[train_[i].id] = i;
  }

  LabelSet label_set_;
  std::vector<std::string> vocabulary_;
  std::unordered_map<std::string, int> word_index_;
  std::vector<LabeledSequence> train_, validation_, test_;
  std::unordered_map<SequenceId, std::size_t> train_pos_;
};

// ---------------------------------------------------------------------------
// Pool

/// Partition of the train split into labeled and unlabeled ids.
class Pool {
 public:
  Pool() = default;

  /// Everything starts unlabeled.
  explicit Pool(const std::vector<LabeledSequence>& train) {
    for (const auto& s : train) {
      lengths_[s.id] = s.length();
      unlabeled_.insert(s.id);
    }
  }

  const std::set<SequenceId>& labeled_ids() const { return labeled_; }
  const std::set<SequenceId>& unlabeled_ids() const { return unlabeled_; }
  std::size_t words_labeled() const { return words_labeled_; }
  std::size_t sentences_labeled() const { return labeled_.size(); }
  std::size_t length_of(SequenceId id) const { return lengths_.at(id); }

  std::size_t words_unlabeled() const {
    std::size_t n = 0;
    for (auto id : unlabeled_) n += lengths_.at(id);
    return n;
  }

  /// Moves ids from unlabeled to labeled. Throws if any id is not unlabeled;
  /// the pool is left untouched in that case.
  void label(std::span<const SequenceId> ids) {
    std::set<SequenceId> batch;
    for (auto id : ids) {
      if (!unlabeled_.count(id) || !batch.insert(id).second)
        throw InvalidArgument("sequence " + std::to_string(id) + " is not in the unlabeled pool");
    }
    for (auto id : ids) {
      unlabeled_.erase(id);
      labeled_.insert(id);
      words_labeled_ += lengths_.at(id);
    }
  }

  /// Recomputes the cached counters and checks the partition; throws on violation.
  void check_invariants() const {
    std::size_t words = 0;
    for (auto id : labeled_) {
      if (unlabeled_.count(id)) throw Error("pool: id in both partitions");
      words += lengths_.at(id);
    }
    if (labeled_.size() + unlabeled_.size() != lengths_.size())
      throw Error("pool: partition does not cover the train split");
    if (words != words_labeled_) throw Error("pool: words_labeled out of sync");
  }

 private:
  std::map<SequenceId, std::size_t> lengths_;
  std::set<SequenceId> labeled_, unlabeled_;
  std::size_t words_labeled_ = 0;
};

// ---------------------------------------------------------------------------
// CoNLL

struct ConllOptions {
  std::size_t token_column = 0;
  /// nullopt selects the last column of each line.
  std::optional<std::size_t> label_column;
};

struct ConllDocument {
  std::vector<LabeledSequence> sequences;
  LabelSet label_set;
};

/// One token per line, whitespace-separated columns, blank lines between
/// sentences. Sentences whose first token is -DOCSTART- are dropped.
inline ConllDocument parse_conll(std::string_view text, ConllOptions opts = {}) {
  ConllDocument doc;
  std::vector<std::pair<std::string, std::string>> pending;
  bool docstart = false;

  auto flush = [&](std::size_t line_no) {
    if (!pending.empty() && !docstart) {
      LabeledSequence seq;
      seq.id = static_cast<SequenceId>(doc.sequences.size());
      for (auto& [tok, lab] : pending) {
        try {
          seq.labels.push_back(doc.label_set.add(lab));
        } catch (const InvalidArgument& e) {
          throw ParseError(e.what(), line_no);
        }
        seq.tokens.push_back(std::move(tok));
      }
      doc.sequences.push_back(std::move(seq));
    }
    pending.clear();
    docstart = false;
  };

  std::size_t line_no = 0;
  std::size_t pos = 0;
  std::size_t sentence_start_line = 1;
  while (pos <= text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);

    auto cols = split_whitespace(line);
    if (cols.empty()) {
      flush(sentence_start_line);
      sentence_start_line = line_no + 1;
      if (eol == text.size()) break;
      continue;
    }
    const std::size_t needed =
        std::max(opts.token_column, opts.label_column.value_or(1)) + 1;
    if (cols.size() < needed)
      throw ParseError("expected at least " + std::to_string(needed) + " columns, got " +
                           std::to_string(cols.size()),
                       line_no);
    if (pending.empty() && cols[0] == "-DOCSTART-") docstart = true;
    const std::size_t lc = opts.label_column.value_or(cols.size() - 1);
    if (!parse_bio(cols[lc]))
      throw ParseError("not a BIO label: '" + std::string(cols[lc]) + "'", line_no);
    pending.emplace_back(std::string(cols[opts.token_column]), std::string(cols[lc]));
    if (eol == text.size()) break;
  }
  flush(sentence_start_line);
  return doc;
}

/// Two-column "token label" rendering; inverse of parse_conll for
/// whitespace-free tokens.
inline std::string to_conll(std::span<const LabeledSequence> seqs, const LabelSet& labels) {
  std::string out;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    if (i) out += '\n';
    for (std::size_t t = 0; t < seqs[i].length(); ++t) {
      out += seqs[i].tokens[t];
      out += ' ';
      out += labels.name(seqs[i].labels[t]);
      out += '\n';
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Chunks and F1

struct Chunk {
  std::string entity_type;
  std::size_t start = 0;  // inclusive
  std::size_t end = 0;    // inclusive

  auto operator<=>(const Chunk&) const = default;
};

/// Decodes BIO labels into maximal chunks. A dangling I-T (not continuing a
/// chunk of type T) opens a new chunk, as conlleval does.
inline std::vector<Chunk> extract_chunks(std::span<const std::string> labels) {
  std::vector<Chunk> chunks;
  std::optional<Chunk> open;
  for (std::size_t t = 0; t < labels.size(); ++t) {
    auto tag = parse_bio(labels[t]);
    if (!tag) throw InvalidArgument("unknown label '" + labels[t] + "'");
    const auto& [prefix, type] = *tag;
    const bool continues = prefix == 'I' && open && open->entity_type == type;
    if (continues) {
      open->end = t;
      continue;
    }
    if (open) chunks.push_back(*open), open.reset();
    if (prefix != 'O') open = Chunk{type, t, t};
  }
  if (open) chunks.push_back(*open);
  return chunks;
}

inline std::vector<Chunk> extract_chunks(std::span<const int> labels, const LabelSet& set) {
  auto names = set.names(labels);
  return extract_chunks(names);
}

struct ChunkScores {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

inline ChunkScores chunk_f1(std::span<const std::vector<std::string>> gold,
                            std::span<const std::vector<std::string>> pred) {
  if (gold.size() != pred.size()) throw InvalidArgument("chunk_f1: sequence count mismatch");
  std::size_t n_gold = 0, n_pred = 0, matched = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i].size() != pred[i].size())
      throw InvalidArgument("chunk_f1: length mismatch in sequence " + std::to_string(i));
    auto g = extract_chunks(gold[i]);
    auto p = extract_chunks(pred[i]);
    n_gold += g.size();
    n_pred += p.size();
    std::set<Chunk> gs(g.begin(), g.end());
    for (const auto& c : p) matched += gs.count(c);
  }
  ChunkScores s;
  if (n_gold == 0 && n_pred == 0) {
    s.f1 = 1.0;
    return s;
  }
  if (n_pred) s.precision = static_cast<double>(matched) / static_cast<double>(n_pred);
  if (n_gold) s.recall = static_cast<double>(matched) / static_cast<double>(n_gold);
  if (s.precision + s.recall > 0) s.f1 = 2 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

inline ChunkScores chunk_f1(std::span<const LabelIds> gold, std::span<const LabelIds> pred,
                            const LabelSet& set) {
  std::vector<std::vector<std::string>> g, p;
  for (const auto& x : gold) g.push_back(set.names(x));
  for (const auto& x : pred) p.push_back(set.names(x));
  return chunk_f1(g, p);
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticConfig {
  int n_train = 2000;
  int n_val = 200;
  int n_test = 400;
  int vocab_size = 120;
  int n_entity_types = 5;
  int min_len = 4;
  int max_len = 12;

  bool operator==(const SyntheticConfig&) const = default;
};

inline const std::vector<std::string>& entity_type_names() {
  static const std::vector<std::string> names = {"PER", "LOC", "ORG", "MISC", "DATE",
                                                 "TIME", "NUM", "EVENT"};
  return names;
}

/// Each entity type owns a disjoint vocabulary slice; the first few outside
/// words act as per-type cue words. Word frequencies inside every slice are
/// Zipfian, so the tail of each slice is rare in the train split.
inline Dataset generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
  if (cfg.n_train < 0 || cfg.n_val < 0 || cfg.n_test < 0)
    throw InvalidArgument("synthetic: split sizes must be nonnegative");
  if (cfg.n_entity_types < 1) throw InvalidArgument("synthetic: need at least one entity type");
  if (cfg.vocab_size < 2 * cfg.n_entity_types + 10)
    throw InvalidArgument("synthetic: vocab_size must be >= 2*n_entity_types + 10");
  if (cfg.min_len < 1 || cfg.min_len > cfg.max_len)
    throw InvalidArgument("synthetic: need 1 <= min_len <= max_len");

  constexpr double kEntityFree = 0.5;    // share of sentences without any entity
  constexpr double kEntityStart = 0.25;  // per-position chance to open an entity
  constexpr double kCueProb = 0.5;       // chance an entity is preceded by its cue word
  constexpr double kZipfExponent = 1.3;
  constexpr double kEntityVocabShare = 0.75;

  const int types = cfg.n_entity_types;
  const int slice = std::max(2, static_cast<int>(kEntityVocabShare * cfg.vocab_size) / types);
  const int n_outside = cfg.vocab_size - slice * types;

  auto type_name = [&](int k) {
    const auto& names = entity_type_names();
    return k < static_cast<int>(names.size()) ? names[k] : "T" + std::to_string(k);
  };
  auto lower = [](std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
  };

  std::vector<std::string> vocab;
  for (int i = 0; i < n_outside; ++i) vocab.push_back("w" + std::to_string(i));
  for (int k = 0; k < types; ++k)
    for (int i = 0; i < slice; ++i) vocab.push_back(lower(type_name(k)) + std::to_string(i));

  LabelSet labels;
  for (int k = 0; k < types; ++k) {
    labels.add("B-" + type_name(k));
    labels.add("I-" + type_name(k));
  }

  auto zipf = [](int n) {
    std::vector<double> w(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) w[i] = 1.0 / std::pow(i + 1.0, kZipfExponent);
    return std::discrete_distribution<int>(w.begin(), w.end());
  };
  // Outside words [0, types) are cues; the rest is filler.
  auto filler_dist = zipf(n_outside - types);
  auto slice_dist = zipf(slice);

  Rng rng(seed);
  std::uniform_int_distribution<int> len_dist(cfg.min_len, cfg.max_len);
  std::uniform_int_distribution<int> type_dist(0, types - 1);
  std::bernoulli_distribution entity_free(kEntityFree), start_entity(kEntityStart),
      use_cue(kCueProb), extend_entity(0.4);

  auto sentence = [&](SequenceId id) {
    LabeledSequence s;
    s.id = id;
    const int len = len_dist(rng);
    const bool plain = entity_free(rng);
    auto push = [&](int word, int label) {
      s.tokens.push_back(vocab[static_cast<std::size_t>(word)]);
      s.labels.push_back(label);
    };
    while (static_cast<int>(s.tokens.size()) < len) {
      const int room = len - static_cast<int>(s.tokens.size());
      if (!plain && start_entity(rng)) {
        const int k = type_dist(rng);
        if (room >= 2 && use_cue(rng)) push(k, 0);
        int span = 1;
        while (span < 3 && extend_entity(rng)) ++span;
        span = std::min(span, len - static_cast<int>(s.tokens.size()));
        for (int j = 0; j < span; ++j) {
          const int word = n_outside + k * slice + slice_dist(rng);
          push(word, labels.index_of((j == 0 ? "B-" : "I-") + type_name(k)));
        }
        if (static_cast<int>(s.tokens.size()) < len) push(types + filler_dist(rng), 0);
      } else {
        push(types + filler_dist(rng), 0);
      }
    }
    return s;
  };

  auto make_split = [&](int n) {
    std::vector<LabeledSequence> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(sentence(i));
    return out;
  };
  auto train = make_split(cfg.n_train);
  auto val = make_split(cfg.n_val);
  auto test = make_split(cfg.n_test);
  return Dataset(std::move(labels), std::move(vocab), std::move(train), std::move(val),
                 std::move(test));
}

// ---------------------------------------------------------------------------
// JSON

inline void to_json(nlohmann::json& j, const SyntheticConfig& c) {
  j = {{"n_train", c.n_train},       {"n_val", c.n_val},
       {"n_test", c.n_test},         {"vocab_size", c.vocab_size},
       {"n_entity_types", c.n_entity_types}, {"min_len", c.min_len},
       {"max_len", c.max_len}};
}

inline void from_json(const nlohmann::json& j, SyntheticConfig& c) {
  SyntheticConfig d;
  c.n_train = j.value("n_train", d.n_train);
  c.n_val = j.value("n_val", d.n_val);
  c.n_test = j.value("n_test", d.n_test);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.n_entity_types = j.value("n_entity_types", d.n_entity_types);
  c.min_len = j.value("min_len", d.min_len);
  c.max_len = j.value("max_len", d.max_len);
}

/// {label_set, vocabulary, splits: {train, validation, test}}; sequence labels
/// are stored as strings.
inline nlohmann::json dataset_to_json(const Dataset& d) {
  auto split = [&](const std::vector<LabeledSequence>& seqs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : seqs)
      arr.push_back({{"id", s.id}, {"tokens", s.tokens}, {"labels", d.label_set().names(s.labels)}});
    return arr;
  };
  return {{"label_set", d.label_set().labels()},
          {"vocabulary", d.vocabulary()},
          {"splits",
           {{"train", split(d.train())},
            {"validation", split(d.validation())},
            {"test", split(d.test())}}}};
}

inline Dataset dataset_from_json(const nlohmann::json& j) {
  LabelSet labels(j.at("label_set").get<std::vector<std::string>>());
  auto split = [&](const char* name) {
    std::vector<LabeledSequence> out;
    if (!j.at("splits").contains(name)) return out;
    for (const auto& s : j.at("splits").at(name)) {
      LabeledSequence seq;
      seq.id = s.at("id").get<SequenceId>();
      seq.tokens = s.at("tokens").get<std::vector<std::string>>();
      for (const auto& l : s.at("labels")) seq.labels.push_back(labels.index_of(l.get<std::string>()));
      out.push_back(std::move(seq));
    }
    return out;
  };
  auto train = split("train");
  auto val = split("validation");
  auto test = split("test");
  return Dataset(std::move(labels), j.at("vocabulary").get<std::vector<std::string>>(),
                 std::move(train), std::move(val), std::move(test));
}

}  // namespace seqal
