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


#include <catch_amalgamated.hpp>

#include <chrono>
#include <filesystem>
#include <set>
#include <thread>

#include "seqal/http.hpp"
#include "seqal/service.hpp"

using namespace seqal;
using namespace seqal::service;
using nlohmann::json;

namespace {

json session_config(bool async = false) {
  return {{"dataset", {{"synthetic", {{"n_train", 60}, {"n_val", 0}, {"n_test", 20}}}, {"seed", 4}}},
          {"strategy", "wbadge"},
          {"tagger", {{"embed_dim", 6}, {"hidden_dim", 6}, {"epochs", 2}, {"learning_rate", 0.01}}},
          {"initial_fraction", 0.1},
          {"budget", {{"unit", "words"}, {"amount", 20}}},
          {"n_rounds", 3},
          {"async_training", async}};
}

json suggestions_of(const json& batch) {
  json ann = json::array();
  for (const auto& s : batch.at("sequences")) ann.push_back({{"id", s.at("id")}, {"labels", s.at("suggestions")}});
  return {{"annotations", ann}};
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("create_session", "[service]") {
  SessionManager m;
  const auto r = m.create_session(session_config());
  REQUIRE(r.status == 201);
  const auto id = r.body.at("id").get<std::string>();
  const auto st = m.get_state(id);
  CHECK(st.status == 200);
  CHECK(st.body.at("round") == 0);
  CHECK(st.body.at("state") == "idle");
  CHECK(st.body.at("sentences_labeled") == 6);
  CHECK(st.body.at("last_record").contains("f1"));
  CHECK(st.body.at("label_set").at(0) == "O");
  CHECK(st.body.at("strategy") == "wbadge");

  const auto r2 = m.create_session(session_config());
  CHECK(r2.body.at("id") != id);
  CHECK(m.session_ids().size() == 2);
}

TEST_CASE("create_session rejects bad configs", "[service][validation]") {
  SessionManager m;
  auto zero = session_config();
  zero["initial_fraction"] = 0;
  auto r = m.create_session(zero);
  CHECK(r.status == 400);
  CHECK(r.body.at("errors").at(0).at("field") == "initial_fraction");

  auto simulated = session_config();
  simulated["oracle"] = "simulated";
  CHECK(m.create_session(simulated).status == 400);

  auto greedy = session_config();
  greedy["n_rounds"] = 1000;
  r = m.create_session(greedy);
  CHECK(r.status == 400);
  CHECK(r.body.at("errors").at(0).at("field") == "n_rounds");

  CHECK(m.create_session({{"strategy", "entropy"}}).status == 400);
  CHECK(m.create_session(json::array()).status == 400);
  CHECK(m.create_session({{"dataset", {{"json", "/nonexistent/data.json"}}}}).status == 400);
  CHECK(m.session_ids().empty());
}

TEST_CASE("query and annotate state machine", "[service][state]") {
  SessionManager m;
  const auto id = m.create_session(session_config()).body.at("id").get<std::string>();

  CHECK(m.submit_annotations(id, {{"annotations", json::array()}}).status == 409);
  const auto q = m.query_batch(id);
  REQUIRE(q.status == 200);
  const auto& batch = q.body;
  CHECK(batch.at("round") == 1);
  CHECK(batch.at("strategy") == "wbadge");
  std::size_t words = 0;
  for (const auto& s : batch.at("sequences")) {
    CHECK(s.at("tokens").size() == s.at("suggestions").size());
    words += s.at("tokens").size();
  }
  CHECK(words >= 20);
  CHECK(words == batch.at("total_words"));
  CHECK(m.query_batch(id).status == 409);
  CHECK(m.get_state(id).body.at("state") == "awaiting_annotations");
  CHECK(m.get_state(id).body.at("pending") == batch);

  SECTION("coverage errors are 400") {
    auto sub = suggestions_of(batch);
    auto missing = sub;
    missing["annotations"].erase(0);
    CHECK(m.submit_annotations(id, missing).status == 400);
    auto extra = sub;
    extra["annotations"].push_back({{"id", 100000}, {"labels", {"O"}}});
    CHECK(m.submit_annotations(id, extra).status == 400);
    auto dup = sub;
    dup["annotations"].push_back(sub["annotations"][0]);
    CHECK(m.submit_annotations(id, dup).status == 400);
    CHECK(m.submit_annotations(id, {{"nope", 1}}).status == 400);
    CHECK(m.get_state(id).body.at("state") == "awaiting_annotations");
  }
  SECTION("label errors are 422") {
    auto short_ = suggestions_of(batch);
    short_["annotations"][0]["labels"].erase(0);
    auto r = m.submit_annotations(id, short_);
    CHECK(r.status == 422);
    CHECK(r.body.at("errors").at(0).at("id") == batch.at("sequences").at(0).at("id"));
    auto unknown = suggestions_of(batch);
    unknown["annotations"][0]["labels"][0] = "B-NOPE";
    CHECK(m.submit_annotations(id, unknown).status == 422);
    CHECK(m.get_state(id).body.at("state") == "awaiting_annotations");
  }
  SECTION("round trip") {
    std::set<SequenceId> annotated;
    for (const auto& s : batch.at("sequences")) annotated.insert(s.at("id").get<SequenceId>());
    const auto r = m.submit_annotations(id, suggestions_of(batch));
    REQUIRE(r.status == 200);
    CHECK(r.body.at("round") == 1);
    CHECK(r.body.at("selected_ids").size() == batch.at("sequences").size());
    CHECK(m.get_state(id).body.at("state") == "idle");
    CHECK(m.get_curve(id, false).body.at("records").size() == 2);

    // Previously annotated ids never come back.
    for (int round = 2; round <= 3; ++round) {
      const auto next = m.query_batch(id);
      REQUIRE(next.status == 200);
      for (const auto& s : next.body.at("sequences")) CHECK(annotated.insert(s.at("id").get<SequenceId>()).second);
      REQUIRE(m.submit_annotations(id, suggestions_of(next.body)).status == 200);
    }
    const auto csv = m.get_curve(id, true);
    CHECK(csv.content_type == "text/csv");
    REQUIRE(csv.text);
    CHECK(csv.text->rfind("round,words,sentences,precision,recall,f1\n0,", 0) == 0);
    CHECK(curve_from_csv(*csv.text).records.size() == 4);
  }
}

TEST_CASE("unknown sessions are 404", "[service]") {
  SessionManager m;
  CHECK(m.query_batch("s999").status == 404);
  CHECK(m.submit_annotations("s999", json::object()).status == 404);
  CHECK(m.get_state("s999").status == 404);
  CHECK(m.get_curve("s999", true).status == 404);
}

TEST_CASE("exhausted pools are 410", "[service]") {
  SessionManager m;
  auto cfg = session_config();
  cfg["dataset"]["synthetic"]["n_train"] = 10;
  cfg["initial_fraction"] = 0.5;
  cfg["budget"] = {{"unit", "sentences"}, {"amount", 3}};
  cfg["n_rounds"] = 1;
  const auto id = m.create_session(cfg).body.at("id").get<std::string>();
  const auto q = m.query_batch(id);
  REQUIRE(q.status == 200);
  REQUIRE(m.submit_annotations(id, suggestions_of(q.body)).status == 200);
  CHECK(m.query_batch(id).status == 410);  // 2 left, budget 3
}

TEST_CASE("sessions survive a restart", "[service][persistence]") {
  TempDir dir("seqal_service_persist");
  std::string id;
  json pending, curve;
  {
    SessionManager m(dir.path);
    id = m.create_session(session_config()).body.at("id").get<std::string>();
    const auto q = m.query_batch(id);
    REQUIRE(m.submit_annotations(id, suggestions_of(q.body)).status == 200);
    pending = m.query_batch(id).body;
    curve = m.get_curve(id, false).body;
  }
  SessionManager m(dir.path);
  REQUIRE(m.session_ids() == std::vector<std::string>{id});
  const auto st = m.get_state(id).body;
  CHECK(st.at("state") == "awaiting_annotations");
  CHECK(st.at("pending") == pending);
  CHECK(m.get_curve(id, false).body == curve);
  REQUIRE(m.submit_annotations(id, suggestions_of(pending)).status == 200);
  // New ids continue after the restored ones.
  CHECK(m.create_session(session_config()).body.at("id") != id);
}

TEST_CASE("a snapshot taken mid-training resumes training on restore", "[service][persistence]") {
  TempDir dir("seqal_service_training");
  std::string id;
  {
    SessionManager m(dir.path);
    id = m.create_session(session_config()).body.at("id").get<std::string>();
    const auto q = m.query_batch(id);
    REQUIRE(m.submit_annotations(id, suggestions_of(q.body)).status == 200);
  }
  // Rewind the snapshot to the moment the annotations were recorded.
  const auto file = dir.path / (id + ".json");
  auto snap = json::parse(read_file(file));
  const auto lost = snap["curve"]["records"].back();
  snap["curve"]["records"].erase(snap["curve"]["records"].size() - 1);
  snap["state"] = "training";
  write_file_atomic(file, snap.dump());

  SessionManager m(dir.path);
  const auto st = m.get_state(id).body;
  CHECK(st.at("state") == "idle");
  const auto rec = m.get_curve(id, false).body.at("records").back();
  CHECK(rec.at("round") == 1);
  CHECK(rec.at("f1") == lost.at("f1"));
  CHECK(rec.at("selected_ids") == lost.at("selected_ids"));
}

TEST_CASE("asynchronous training", "[service][async]") {
  SessionManager m;
  const auto id = m.create_session(session_config(true)).body.at("id").get<std::string>();
  const auto q = m.query_batch(id);
  const auto r = m.submit_annotations(id, suggestions_of(q.body));
  CHECK(r.status == 202);
  CHECK(r.body.at("round") == 1);
  m.wait(id);
  CHECK(m.get_state(id).body.at("state") == "idle");
  CHECK(m.get_curve(id, false).body.at("records").size() == 2);

  // Sync and async sessions produce the same curve.
  SessionManager s;
  const auto sid = s.create_session(session_config()).body.at("id").get<std::string>();
  REQUIRE(s.submit_annotations(sid, suggestions_of(s.query_batch(sid).body)).status == 200);
  CHECK(s.get_curve(sid, true).text == m.get_curve(id, true).text);
}

TEST_CASE("HTTP API", "[service][http]") {
  SessionManager sessions;
  httplib::Server server;
  mount_routes(server, sessions);
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(60, 0);
  auto post = [&](const std::string& path, const json& body) {
    return cli.Post(path, body.dump(), "application/json");
  };

  auto created = post("/sessions", session_config());
  REQUIRE(created);
  REQUIRE(created->status == 201);
  const auto id = json::parse(created->body).at("id").get<std::string>();

  auto bad = cli.Post("/sessions", "{not json", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  auto invalid = post("/sessions", {{"initial_fraction", 0}});
  REQUIRE(invalid);
  CHECK(invalid->status == 400);

  auto q = post("/sessions/" + id + "/query", json::object());
  REQUIRE(q);
  REQUIRE(q->status == 200);
  const auto batch = json::parse(q->body);
  CHECK(post("/sessions/" + id + "/query", json::object())->status == 409);

  auto short_ = suggestions_of(batch);
  short_["annotations"][0]["labels"].erase(0);
  CHECK(post("/sessions/" + id + "/annotations", short_)->status == 422);
  auto sub = post("/sessions/" + id + "/annotations", suggestions_of(batch));
  REQUIRE(sub);
  CHECK(sub->status == 200);
  CHECK(json::parse(sub->body).at("round") == 1);

  auto state = cli.Get("/sessions/" + id + "/state");
  REQUIRE(state);
  CHECK(json::parse(state->body).at("state") == "idle");

  auto csv = cli.Get("/sessions/" + id + "/curve?format=csv");
  REQUIRE(csv);
  CHECK(csv->get_header_value("Content-Type").rfind("text/csv", 0) == 0);
  CHECK(curve_from_csv(csv->body).records.size() == 2);
  auto csv2 = cli.Get("/sessions/" + id + "/curve", {{"Accept", "text/csv"}});
  REQUIRE(csv2);
  CHECK(csv2->body == csv->body);
  auto js = cli.Get("/sessions/" + id + "/curve");
  REQUIRE(js);
  CHECK(json::parse(js->body).at("records").size() == 2);

  CHECK(cli.Get("/sessions/nope/state")->status == 404);
  auto list = cli.Get("/sessions");
  REQUIRE(list);
  CHECK(json::parse(list->body).at("sessions") == json::array({id}));
  auto root = cli.Get("/");
  REQUIRE(root);
  CHECK(root->status == 200);

  server.stop();
  t.join();
}

TEST_CASE("HTTP serves UI files", "[service][http]") {
  TempDir dir("seqal_service_ui");
  std::filesystem::create_directories(dir.path);
  write_file_atomic(dir.path / "index.html", "<p>annotator</p>");
  SessionManager sessions;
  httplib::Server server;
  mount_routes(server, sessions, dir.path);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client cli("127.0.0.1", port);
  auto r = cli.Get("/");
  REQUIRE(r);
  CHECK(r->body == "<p>annotator</p>");
  server.stop();
  t.join();
}
