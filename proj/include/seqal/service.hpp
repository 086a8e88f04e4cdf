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

// Human-in-the-loop annotation sessions. Transport-agnostic: every operation
// returns an HTTP status and a JSON (or CSV) body; http.hpp binds them to
// routes.
//
// State machine per session:
//   idle --query--> awaiting_annotations --submit--> training --> idle

#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "seqal/loop.hpp"

namespace seqal::service {

using nlohmann::json;

enum class SessionState { kIdle, kAwaitingAnnotations, kTraining };

inline std::string_view to_string(SessionState s) {
  switch (s) {
    case SessionState::kIdle: return "idle";
    case SessionState::kAwaitingAnnotations: return "awaiting_annotations";
    case SessionState::kTraining: return "training";
  }
  return "?";
}

inline SessionState parse_session_state(std::string_view s) {
  if (s == "awaiting_annotations") return SessionState::kAwaitingAnnotations;
  if (s == "training") return SessionState::kTraining;
  return SessionState::kIdle;
}

struct ApiResponse {
  int status = 200;
  json body;
  /// When set, sent verbatim instead of `body` (e.g. text/csv).
  std::optional<std::string> text = std::nullopt;
  std::string content_type = "application/json";
};

inline ApiResponse error_response(int status, const std::string& message, json details = nullptr) {
  json body = {{"error", message}};
  if (!details.is_null()) body["errors"] = std::move(details);
  return {status, std::move(body)};
}

struct Session {
  std::string id;
  ExperimentConfig config;
  Dataset dataset;
  std::vector<EncodedSequence> train, test;
  std::unordered_map<SequenceId, std::size_t> train_pos;
  Pool pool;
  /// Every labeled id with the labels it was trained on (gold for the seed pool).
  std::map<SequenceId, LabelIds> annotations;
  TaggerParams params;
  std::optional<QueryBatch> pending;
  LearningCurve curve;
  SessionState state = SessionState::kIdle;
  std::string last_error;

  std::mutex mu;
  std::thread worker;

  ~Session() {
    if (worker.joinable()) worker.join();
  }

  int next_round() const { return static_cast<int>(curve.records.size()); }

  std::vector<EncodedSequence> labeled_set() const {
    std::vector<EncodedSequence> out;
    for (const auto& [id, labels] : annotations) out.push_back({id, train[train_pos.at(id)].tokens, labels});
    return out;
  }
};

class SessionManager {
 public:
  /// An empty `state_dir` keeps sessions in memory only. Otherwise every
  /// snapshot found there is restored.
  explicit SessionManager(std::filesystem::path state_dir = {}) : state_dir_(std::move(state_dir)) {
    if (state_dir_.empty()) return;
    std::filesystem::create_directories(state_dir_);
    for (const auto& entry : std::filesystem::directory_iterator(state_dir_)) {
      if (entry.path().extension() != ".json") continue;
      auto s = restore(json::parse(read_file(entry.path())));
      counter_ = std::max(counter_, id_number(s->id));
      sessions_[s->id] = std::move(s);
    }
  }

  ~SessionManager() {
    std::lock_guard lk(mu_);
    for (auto& [_, s] : sessions_)
      if (s->worker.joinable()) s->worker.join();
  }

  SessionManager(const SessionManager&) = delete;
  SessionManager& operator=(const SessionManager&) = delete;

  std::vector<std::string> session_ids() const {
    std::lock_guard lk(mu_);
    std::vector<std::string> ids;
    for (const auto& [id, _] : sessions_) ids.push_back(id);
    return ids;
  }

  // POST /sessions
  ApiResponse create_session(const json& body) {
    ExperimentConfig cfg;
    try {
      json b = body;
      if (!b.is_object()) return error_response(400, "config must be a JSON object");
      if (!b.contains("oracle")) b["oracle"] = "human";
      cfg = config_from_json(b);
    } catch (const std::exception& e) {
      return error_response(400, "invalid config", json::array({{{"field", "config"}, {"message", e.what()}}}));
    }
    auto errs = validate(cfg);
    if (cfg.oracle != OracleKind::kHuman) errs.push_back({"oracle", "sessions require oracle 'human'"});
    auto session = std::make_unique<Session>();
    if (errs.empty()) {
      try {
        session->dataset = load_dataset(cfg.dataset);
        auto fit = check_fits_dataset(cfg, session->dataset);
        errs.insert(errs.end(), fit.begin(), fit.end());
      } catch (const std::exception& e) {
        errs.push_back({"dataset", e.what()});
      }
    }
    if (!errs.empty()) {
      json details = json::array();
      for (const auto& e : errs) details.push_back({{"field", e.field}, {"message", e.message}});
      return error_response(400, "invalid config", details);
    }

    session->config = cfg;
    prepare(*session);
    const auto seed_ids = draw_seed_pool(session->dataset, cfg.initial_fraction, cfg.base_seed);
    for (auto id : seed_ids) session->annotations[id] = session->dataset.train_sequence(id).labels;
    session->pool.label(seed_ids);
    session->curve.config = config_to_json(cfg);
    train_and_record(*session, seed_ids);

    std::lock_guard lk(mu_);
    session->id = make_id(++counter_);
    persist(*session);
    json out = {{"id", session->id}, {"state", snapshot_state(*session)}};
    sessions_[session->id] = std::move(session);
    return {201, std::move(out)};
  }

  // POST /sessions/{id}/query
  ApiResponse query_batch(const std::string& id) {
    auto* s = find(id);
    if (!s) return error_response(404, "unknown session '" + id + "'");
    std::lock_guard lk(s->mu);
    if (s->state != SessionState::kIdle)
      return error_response(409, std::string("session is ") + std::string(to_string(s->state)));
    const auto& b = s->config.budget;
    const bool enough = b.unit == BudgetUnit::kWords ? s->pool.words_unlabeled() >= b.amount
                                                     : s->pool.unlabeled_ids().size() >= b.amount;
    if (s->pool.unlabeled_ids().empty() || !enough) return error_response(410, "unlabeled pool exhausted");
    const int round = s->next_round();
    const std::uint64_t seed = s->config.base_seed ^ static_cast<std::uint64_t>(round);
    s->pending = select_batch(s->config.strategy, s->params, s->pool, s->train, b, seed,
                              {s->config.bald_passes, round});
    s->state = SessionState::kAwaitingAnnotations;
    persist(*s);
    return {200, pending_json(*s)};
  }

  // POST /sessions/{id}/annotations
  // Body: {"annotations": [{"id": 12, "labels": ["O", "B-PER", ...]}, ...]}
  ApiResponse submit_annotations(const std::string& id, const json& body) {
    auto* s = find(id);
    if (!s) return error_response(404, "unknown session '" + id + "'");
    std::unique_lock lk(s->mu);
    if (s->state != SessionState::kAwaitingAnnotations || !s->pending)
      return error_response(409, std::string("session is ") + std::string(to_string(s->state)));

    if (!body.is_object() || !body.contains("annotations") || !body.at("annotations").is_array())
      return error_response(400, "body must be {\"annotations\": [{\"id\", \"labels\"}...]}");
    std::map<SequenceId, const json*> submitted;
    json id_errors = json::array();
    for (const auto& a : body.at("annotations")) {
      if (!a.is_object() || !a.contains("id") || !a.at("id").is_number_integer()) {
        id_errors.push_back({{"message", "annotation without an integer id"}});
        continue;
      }
      const auto sid = a.at("id").get<SequenceId>();
      if (!submitted.emplace(sid, &a).second) id_errors.push_back({{"id", sid}, {"message", "duplicate id"}});
    }
    const std::set<SequenceId> expected(s->pending->selected_ids.begin(), s->pending->selected_ids.end());
    for (auto sid : expected)
      if (!submitted.count(sid)) id_errors.push_back({{"id", sid}, {"message", "missing annotation"}});
    for (const auto& [sid, _] : submitted)
      if (!expected.count(sid)) id_errors.push_back({{"id", sid}, {"message", "not in the pending batch"}});
    if (!id_errors.empty()) return error_response(400, "annotations do not cover the pending batch", id_errors);

    const auto& labels = s->dataset.label_set();
    std::map<SequenceId, LabelIds> parsed;
    json seq_errors = json::array();
    for (const auto& [sid, a] : submitted) {
      const auto len = s->train[s->train_pos.at(sid)].length();
      const auto& lab = a->contains("labels") ? a->at("labels") : json();
      if (!lab.is_array()) {
        seq_errors.push_back({{"id", sid}, {"message", "labels must be an array"}});
        continue;
      }
      if (lab.size() != len) {
        seq_errors.push_back({{"id", sid},
                              {"message", "expected " + std::to_string(len) + " labels, got " +
                                              std::to_string(lab.size())}});
        continue;
      }
      LabelIds ids;
      for (std::size_t t = 0; t < lab.size(); ++t) {
        if (!lab[t].is_string() || !labels.contains(lab[t].get<std::string>())) {
          seq_errors.push_back({{"id", sid}, {"token", t}, {"message", "label not in the label set"}});
          break;
        }
        ids.push_back(labels.index_of(lab[t].get<std::string>()));
      }
      if (ids.size() == len) parsed[sid] = std::move(ids);
    }
    if (!seq_errors.empty()) return error_response(422, "invalid labels", seq_errors);

    // Record the annotations durably before training starts.
    for (auto& [sid, ids] : parsed) s->annotations[sid] = std::move(ids);
    auto selected = s->pending->selected_ids;
    s->pool.label(selected);
    s->pending.reset();
    s->state = SessionState::kTraining;
    persist(*s);

    if (s->config.async_training) {
      if (s->worker.joinable()) s->worker.join();
      const int round = s->next_round();
      s->worker = std::thread([this, s, selected = std::move(selected)]() mutable {
        train_and_record(*s, std::move(selected));
      });
      return {202, {{"state", "training"}, {"round", round}}};
    }
    lk.unlock();
    train_and_record(*s, std::move(selected));
    std::lock_guard relock(s->mu);
    return {200, s->curve.records.back()};
  }

  // GET /sessions/{id}/state
  ApiResponse get_state(const std::string& id) {
    auto* s = find(id);
    if (!s) return error_response(404, "unknown session '" + id + "'");
    std::lock_guard lk(s->mu);
    return {200, snapshot_state(*s)};
  }

  // GET /sessions/{id}/curve
  ApiResponse get_curve(const std::string& id, bool csv) {
    auto* s = find(id);
    if (!s) return error_response(404, "unknown session '" + id + "'");
    std::lock_guard lk(s->mu);
    if (csv) return {200, nullptr, curve_to_csv(s->curve), "text/csv"};
    return {200, curve_to_json(s->curve)};
  }

  /// Blocks until any background training of the session has finished.
  void wait(const std::string& id) {
    auto* s = find(id);
    if (!s) return;
    std::thread t;
    {
      std::lock_guard lk(s->mu);
      t = std::move(s->worker);
    }
    if (t.joinable()) t.join();
  }

 private:
  static std::string make_id(long n) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%06ld", n);
    return buf;
  }
  static long id_number(const std::string& id) {
    return id.size() > 1 && id[0] == 's' ? std::strtol(id.c_str() + 1, nullptr, 10) : 0;
  }

  Session* find(const std::string& id) {
    std::lock_guard lk(mu_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second.get();
  }

  static void prepare(Session& s) {
    s.train = s.dataset.encode(Split::kTrain);
    s.test = s.dataset.encode(Split::kTest);
    for (std::size_t i = 0; i < s.train.size(); ++i) s.train_pos[s.train[i].id] = i;
    s.pool = Pool(s.dataset.train());
  }

  /// Retrains from scratch on the session's annotations, evaluates on the
  /// test split, appends a round record, returns to idle, and persists.
  /// Called without the session lock held; training touches no shared state.
  void train_and_record(Session& s, std::vector<SequenceId> selected) {
    std::vector<EncodedSequence> labeled;
    TaggerConfig tcfg;
    int round = 0;
    {
      std::lock_guard lk(s.mu);
      labeled = s.labeled_set();
      tcfg = tagger_config_for(s.config, s.dataset);
      round = s.next_round();
    }
    const auto t0 = std::chrono::steady_clock::now();
    RoundRecord r;
    r.round = round;
    r.selected_ids = std::move(selected);
    std::optional<TaggerParams> params;
    try {
      params = seqal::train(tcfg, labeled, s.config.base_seed ^ static_cast<std::uint64_t>(round));
      const auto scores = evaluate(*params, s.test, s.dataset.label_set());
      r.precision = scores.precision;
      r.recall = scores.recall;
      r.f1 = scores.f1;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    std::lock_guard lk(s.mu);
    r.words_labeled = s.pool.words_labeled();
    r.sentences_labeled = s.pool.sentences_labeled();
    if (params) s.params = std::move(*params);
    s.last_error = r.error;
    s.curve.records.push_back(std::move(r));
    s.state = SessionState::kIdle;
    persist(s);
  }

  json pending_json(const Session& s) const {
    json seqs = json::array();
    const auto& labels = s.dataset.label_set();
    for (auto sid : s.pending->selected_ids) {
      const auto& enc = s.train[s.train_pos.at(sid)];
      seqs.push_back({{"id", sid},
                      {"tokens", s.dataset.train_sequence(sid).tokens},
                      {"suggestions", labels.names(predict(s.params, enc.tokens))}});
    }
    return {{"round", s.pending->round},
            {"strategy", to_string(s.pending->strategy)},
            {"total_words", s.pending->total_words},
            {"budget", {{"unit", seqal::to_string(s.config.budget.unit)}, {"amount", s.config.budget.amount}}},
            {"sequences", seqs}};
  }

  json snapshot_state(const Session& s) const {
    json out = {{"id", s.id},
                {"round", s.curve.records.empty() ? 0 : s.curve.records.back().round},
                {"words_labeled", s.pool.words_labeled()},
                {"sentences_labeled", s.pool.sentences_labeled()},
                {"words_total", s.pool.words_labeled() + s.pool.words_unlabeled()},
                {"state", to_string(s.state)},
                {"label_set", s.dataset.label_set().labels()},
                {"strategy", seqal::to_string(s.config.strategy)},
                {"budget", {{"unit", seqal::to_string(s.config.budget.unit)}, {"amount", s.config.budget.amount}}}};
    if (!s.curve.records.empty()) out["last_record"] = s.curve.records.back();
    if (s.pending) out["pending"] = pending_json(s);
    if (!s.last_error.empty()) out["error"] = s.last_error;
    return out;
  }

  // --- persistence ---------------------------------------------------------

  void persist(const Session& s) const {
    if (state_dir_.empty() || s.id.empty()) return;
    json ann = json::array();
    for (const auto& [sid, labels] : s.annotations) ann.push_back({{"id", sid}, {"labels", labels}});
    json snap = {{"id", s.id},
                 {"config", config_to_json(s.config)},
                 {"annotations", ann},
                 {"params", params_to_json(s.params)},
                 {"curve", curve_to_json(s.curve)},
                 {"state", to_string(s.state)},
                 {"last_error", s.last_error}};
    if (s.pending)
      snap["pending"] = {{"selected_ids", s.pending->selected_ids},
                         {"total_words", s.pending->total_words},
                         {"round", s.pending->round}};
    write_file_atomic(state_dir_ / (s.id + ".json"), snap.dump());
  }

  std::unique_ptr<Session> restore(const json& snap) {
    auto s = std::make_unique<Session>();
    s->id = snap.at("id").get<std::string>();
    s->config = config_from_json(snap.at("config"));
    s->dataset = load_dataset(s->config.dataset);
    prepare(*s);
    std::vector<SequenceId> ids;
    for (const auto& a : snap.at("annotations")) {
      const auto sid = a.at("id").get<SequenceId>();
      s->annotations[sid] = a.at("labels").get<LabelIds>();
      ids.push_back(sid);
    }
    s->pool.label(ids);
    s->params = params_from_json(snap.at("params"));
    s->curve = curve_from_json(snap.at("curve"));
    s->state = parse_session_state(snap.at("state").get<std::string>());
    s->last_error = snap.value("last_error", "");
    if (snap.contains("pending")) {
      QueryBatch b;
      b.selected_ids = snap.at("pending").at("selected_ids").get<std::vector<SequenceId>>();
      b.total_words = snap.at("pending").at("total_words").get<std::size_t>();
      b.round = snap.at("pending").at("round").get<int>();
      b.strategy = s->config.strategy;
      s->pending = std::move(b);
    }
    if (s->state == SessionState::kTraining) {
      // Interrupted mid-training: the annotations are already in the pool, so
      // rerun the (deterministic) training step.
      const auto& last = s->curve.records;
      std::vector<SequenceId> selected;
      std::set<SequenceId> before;
      for (const auto& r : last)
        before.insert(r.selected_ids.begin(), r.selected_ids.end());
      for (auto sid : s->pool.labeled_ids())
        if (!before.count(sid)) selected.push_back(sid);
      train_and_record(*s, std::move(selected));
    }
    return s;
  }

  std::filesystem::path state_dir_;
  mutable std::mutex mu_;
  std::map<std::string, std::unique_ptr<Session>> sessions_;
  long counter_ = 0;
};

}  // namespace seqal::service
