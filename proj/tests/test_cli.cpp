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

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>

#include "seqal/loop.hpp"
#include "seqal/strategies.hpp"

namespace fs = std::filesystem;
using namespace seqal;
using nlohmann::json;

namespace {

struct Workdir {
  fs::path path;
  Workdir() : path(fs::temp_directory_path() / ("seqal_cli_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~Workdir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

int cli(const std::string& args) {
  const std::string cmd = std::string(SEQAL_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const char* kGenFlags = "--n-train 60 --n-val 0 --n-test 20";

std::string small_config(const Workdir& w, const std::string& strategy) {
  const json c = {{"dataset", {{"json", w / "data.json"}}},
                  {"strategy", strategy},
                  {"tagger", {{"embed_dim", 6}, {"hidden_dim", 6}, {"epochs", 2}, {"learning_rate", 0.01}}},
                  {"initial_fraction", 0.1},
                  {"budget", {{"unit", "words"}, {"amount", 25}}},
                  {"n_rounds", 2},
                  {"n_repeats", 2},
                  {"bald_passes", 4}};
  const auto path = w / (strategy + ".json");
  write_file_atomic(path, c.dump());
  return path;
}

}  // namespace

TEST_CASE("bad invocations exit with 2", "[cli]") {
  CHECK(cli("") == 2);
  CHECK(cli("frobnicate") == 2);
  CHECK(cli("run --no-such-flag") == 2);
  CHECK(cli("run --budget-words 5 --budget-sentences 5") == 2);
  CHECK(cli("run --strategy entropy --out /tmp/seqal_unused") == 2);
  CHECK(cli("run --jobs 0") == 2);
  CHECK(cli("--help") == 0);
}

TEST_CASE("gen-data is deterministic", "[cli]") {
  Workdir w;
  REQUIRE(cli(std::string("gen-data --seed 7 ") + kGenFlags + " --out " + (w / "a.json")) == 0);
  REQUIRE(cli(std::string("gen-data --seed 7 ") + kGenFlags + " --out " + (w / "b.json")) == 0);
  REQUIRE(cli(std::string("gen-data --seed 8 ") + kGenFlags + " --out " + (w / "c.json")) == 0);
  CHECK(read_file(w / "a.json") == read_file(w / "b.json"));
  CHECK(read_file(w / "a.json") != read_file(w / "c.json"));
  const auto d = dataset_from_json(json::parse(read_file(w / "a.json")));
  CHECK(d.train().size() == 60);
  CHECK(d.test().size() == 20);
}

TEST_CASE("run writes reproducible curves", "[cli]") {
  Workdir w;
  REQUIRE(cli(std::string("gen-data --seed 1 ") + kGenFlags + " --out " + (w / "data.json")) == 0);
  const auto cfg = small_config(w, "wbadge");
  REQUIRE(cli("run --config " + cfg + " --out " + (w / "r1")) == 0);
  REQUIRE(cli("run --config " + cfg + " --jobs 2 --out " + (w / "r2")) == 0);
  for (const auto* f : {"repeat_0.csv", "repeat_1.csv", "aggregate.csv"})
    CHECK(read_file(w / (std::string("r1/") + f)) == read_file(w / (std::string("r2/") + f)));

  const auto curve = curve_from_csv(read_file(w / "r1/repeat_0.csv"));
  CHECK(curve.records.size() == 3);  // n_rounds + 1
  const auto agg = read_file(w / "r1/aggregate.csv");
  CHECK(agg.rfind("round,words,sentences,precision,recall,f1,f1_mean,f1_std,words_mean\n", 0) == 0);
  CHECK(json::parse(read_file(w / "r1/config.json")).at("strategy") == "wbadge");
  CHECK(read_file(w / "r1/repeat_0.csv") != read_file(w / "r1/repeat_1.csv"));

  // Flags override the config file.
  REQUIRE(cli("run --config " + cfg + " --strategy random --repeats 1 --rounds 1 --out " + (w / "r3")) == 0);
  CHECK(curve_from_csv(read_file(w / "r3/repeat_0.csv")).records.size() == 2);
  CHECK(!fs::exists(w / "r3/repeat_1.csv"));
  CHECK(json::parse(read_file(w / "r3/config.json")).at("strategy") == "random");

  SECTION("aggregate merges curve files") {
    REQUIRE(cli("aggregate " + (w / "r1/repeat_0.csv") + " " + (w / "r1/repeat_1.json") + " --out " +
                (w / "agg.csv")) == 0);
    CHECK(read_file(w / "agg.csv") == agg);
    CHECK(fs::exists(w / "agg.json"));
    CHECK(cli("aggregate " + (w / "r1/repeat_0.csv") + " " + (w / "r3/repeat_0.csv") + " --out " +
              (w / "bad.csv")) != 0);
    CHECK(cli("aggregate " + (w / "missing.csv")) == 2);
  }

  SECTION("dump-embeddings") {
    const std::string base = "dump-embeddings --config " + cfg + " --checkpoint " + (w / "r1/repeat_0.checkpoint.json");
    REQUIRE(cli(base + " --pool " + (w / "r1/repeat_0.pool.json") + " --out " + (w / "g.csv")) == 0);
    REQUIRE(cli(base + " --pool " + (w / "r1/repeat_0.pool.json") + " --format bin --out " + (w / "g.bin")) == 0);
    REQUIRE(cli(base + " --kind sequence --all --format bin --out " + (w / "s.bin")) == 0);
    const auto labeled = json::parse(read_file(w / "r1/repeat_0.pool.json")).at("labeled_ids").size();
    const auto g = embeddings_from_binary(read_file(w / "g.bin"));
    CHECK(g.size() == 60 - labeled);
    const auto params = params_from_json(json::parse(read_file(w / "r1/repeat_0.checkpoint.json")));
    CHECK(g.front().values.size() == params.config.num_labels * params.config.penultimate_dim());
    const auto s = embeddings_from_binary(read_file(w / "s.bin"));
    CHECK(s.size() == 60);
    CHECK(s.front().values.size() == params.config.penultimate_dim());
    CHECK(read_file(w / "g.csv").rfind("id,length,v0,", 0) == 0);
    CHECK(cli(base + " --kind nonsense --out " + (w / "x.csv")) == 2);
  }
}

TEST_CASE("runtime failures exit with 1", "[cli]") {
  Workdir w;
  write_file_atomic(w / "broken.json", "{\"strategy\": ");
  CHECK(cli("run --config " + (w / "broken.json") + " --out " + (w / "out")) == 1);
  write_file_atomic(w / "missing_data.json", json{{"dataset", {{"json", w / "nope.json"}}}}.dump());
  CHECK(cli("run --config " + (w / "missing_data.json") + " --out " + (w / "out")) == 1);
}
