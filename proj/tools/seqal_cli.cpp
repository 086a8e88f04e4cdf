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

// seqal: gen-data | run | aggregate | dump-embeddings | serve

#include <atomic>
#include <csignal>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "seqal/http.hpp"
#include "seqal/loop.hpp"
#include "seqal/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace seqal;

namespace {

json read_json(const fs::path& path) {
  const auto text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

struct RunFlags {
  std::string config_path;
  std::string out_dir = "runs";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy;
  std::optional<std::size_t> budget_words, budget_sentences;
  std::optional<int> rounds, repeats, bald_passes, epochs;
  std::optional<double> initial_fraction, learning_rate;
  std::optional<std::string> dataset_json;
  int jobs = 1;
};

ExperimentConfig resolve_config(const RunFlags& f) {
  ExperimentConfig c;
  if (!f.config_path.empty()) {
    try {
      c = config_from_json(read_json(f.config_path));
    } catch (const ParseError& e) {
      throw ParseError(f.config_path + ": " + e.what());
    }
  }
  if (f.seed) c.base_seed = *f.seed;
  if (f.strategy) c.strategy = parse_strategy(*f.strategy);
  if (f.budget_words) c.budget = {BudgetUnit::kWords, *f.budget_words};
  if (f.budget_sentences) c.budget = {BudgetUnit::kSentences, *f.budget_sentences};
  if (f.rounds) c.n_rounds = *f.rounds;
  if (f.repeats) c.n_repeats = *f.repeats;
  if (f.bald_passes) c.bald_passes = *f.bald_passes;
  if (f.epochs) c.tagger.epochs = *f.epochs;
  if (f.initial_fraction) c.initial_fraction = *f.initial_fraction;
  if (f.learning_rate) c.tagger.learning_rate = *f.learning_rate;
  if (f.dataset_json) c.dataset = JsonFileSource{*f.dataset_json};
  if (auto errs = validate(c); !errs.empty())
    throw InvalidArgument("config: " + errs.front().field + " " + errs.front().message);
  return c;
}

int cmd_run(const RunFlags& f) {
  const ExperimentConfig base = resolve_config(f);
  const Dataset dataset = load_dataset(base.dataset);
  if (auto errs = check_fits_dataset(base, dataset); !errs.empty())
    throw InvalidArgument("config: " + errs.front().field + " " + errs.front().message);
  const fs::path out(f.out_dir);
  fs::create_directories(out);
  write_file_atomic(out / "config.json", config_to_json(base).dump(2) + "\n");

  std::vector<LearningCurve> curves(static_cast<std::size_t>(base.n_repeats));
  std::atomic<int> next{0};
  std::mutex log_mu;
  auto worker = [&] {
    for (int i = next++; i < base.n_repeats; i = next++) {
      ExperimentConfig c = base;
      c.base_seed = repeat_seed(base.base_seed, i);
      FinalState final_state;
      auto curve = run_experiment(
          c, dataset,
          [&](const RoundRecord& r, const Pool&) {
            std::lock_guard lk(log_mu);
            std::cerr << "repeat " << i << " round " << r.round << ": words=" << r.words_labeled
                      << " f1=" << r.f1 << "\n";
          },
          &final_state);
      const std::string stem = "repeat_" + std::to_string(i);
      write_file_atomic(out / (stem + ".csv"), curve_to_csv(curve));
      write_file_atomic(out / (stem + ".json"), curve_to_json(curve).dump(2) + "\n");
      write_file_atomic(out / (stem + ".checkpoint.json"), params_to_json(final_state.params).dump() + "\n");
      write_file_atomic(out / (stem + ".pool.json"),
                        json{{"labeled_ids", final_state.labeled_ids}}.dump() + "\n");
      curves[static_cast<std::size_t>(i)] = std::move(curve);
    }
  };
  const int jobs = std::max(1, std::min(f.jobs, base.n_repeats));
  std::vector<std::thread> pool;
  for (int j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  bool same_length = true;
  for (const auto& c : curves) same_length &= c.records.size() == curves.front().records.size();
  if (same_length) {
    const auto rows = aggregate_runs(curves);
    write_file_atomic(out / "aggregate.csv", aggregate_to_csv(rows));
    write_file_atomic(out / "aggregate.json", aggregate_to_json(rows).dump(2) + "\n");
  } else {
    std::cerr << "warning: truncated repeats differ in length; aggregate not written\n";
  }
  return 0;
}

int cmd_gen_data(std::uint64_t seed, const SyntheticConfig& gen, const std::string& out) {
  const auto d = generate_synthetic(gen, seed);
  write_file_atomic(out, dataset_to_json(d).dump() + "\n");
  return 0;
}

int cmd_aggregate(const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<LearningCurve> curves;
  for (const auto& path : inputs) {
    try {
      if (fs::path(path).extension() == ".json") curves.push_back(curve_from_json(read_json(path)));
      else curves.push_back(curve_from_csv(read_file(path)));
    } catch (const ParseError& e) {
      throw ParseError(path + ": " + e.what());
    }
  }
  const auto rows = aggregate_runs(curves);
  fs::path csv(out);
  write_file_atomic(csv, aggregate_to_csv(rows));
  write_file_atomic(fs::path(csv).replace_extension(".json"), aggregate_to_json(rows).dump(2) + "\n");
  return 0;
}

int cmd_dump(const RunFlags& f, const std::string& checkpoint, const std::string& pool_path,
             const std::string& kind, const std::string& format, bool all, const std::string& out) {
  const ExperimentConfig c = resolve_config(f);
  const Dataset dataset = load_dataset(c.dataset);
  const TaggerParams params = params_from_json(read_json(checkpoint));
  if (params.config.vocab_size != dataset.vocab_size() || params.config.num_labels != dataset.label_set().size())
    throw InvalidArgument("checkpoint does not match the dataset's vocabulary or label set");
  std::set<SequenceId> labeled;
  if (!pool_path.empty()) {
    const json pool = read_json(pool_path);
    for (const auto& id : pool.at("labeled_ids")) labeled.insert(id.get<SequenceId>());
  }
  std::vector<EncodedSequence> seqs;
  for (auto& s : dataset.encode(Split::kTrain))
    if (all || !labeled.count(s.id)) seqs.push_back(std::move(s));
  const auto rows = compute_embeddings(params, seqs, kind == "gradient");
  write_file_atomic(out, format == "bin" ? embeddings_to_binary(rows) : embeddings_to_csv(rows));
  return 0;
}

httplib::Server* g_server = nullptr;

int cmd_serve(const std::string& addr, const std::string& state_dir, const std::string& ui_dir) {
  const auto colon = addr.rfind(':');
  if (colon == std::string::npos) throw InvalidArgument("--serve-addr must be host:port");
  const std::string host = addr.substr(0, colon);
  const int port = std::stoi(addr.substr(colon + 1));
  service::SessionManager sessions(state_dir);
  httplib::Server server;
  service::mount_routes(server, sessions,
                        ui_dir.empty() ? std::nullopt : std::optional<fs::path>(ui_dir));
  g_server = &server;
  std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
  std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
  std::cerr << "serving on http://" << host << ":" << port << "\n";
  if (!server.listen(host, port)) throw Error("cannot listen on " + addr);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Active learning for sequence labeling"};
  app.require_subcommand(1);

  RunFlags run;
  auto add_config_flags = [&](CLI::App* sub) {
    sub->add_option("--config", run.config_path, "experiment config JSON")->check(CLI::ExistingFile);
    sub->add_option("--seed", run.seed, "base seed");
    sub->add_option("--strategy", run.strategy, "random|mnlp|bald|coreset|badge|wbadge");
    auto* bw = sub->add_option("--budget-words", run.budget_words, "per-round budget in words");
    auto* bs = sub->add_option("--budget-sentences", run.budget_sentences, "per-round budget in sentences");
    bw->excludes(bs);
    sub->add_option("--rounds", run.rounds, "number of query rounds");
    sub->add_option("--repeats", run.repeats, "number of repeats");
    sub->add_option("--initial-fraction", run.initial_fraction, "seed-pool fraction of train sentences");
    sub->add_option("--bald-passes", run.bald_passes, "MC-dropout passes for bald");
    sub->add_option("--epochs", run.epochs, "training epochs");
    sub->add_option("--learning-rate", run.learning_rate, "Adam learning rate");
    sub->add_option("--dataset", run.dataset_json, "dataset JSON (overrides the config's dataset)");
  };

  auto* run_cmd = app.add_subcommand("run", "run active-learning experiments");
  add_config_flags(run_cmd);
  run_cmd->add_option("--out", run.out_dir, "output directory");
  run_cmd->add_option("--jobs", run.jobs, "repeats to run in parallel")->check(CLI::PositiveNumber);

  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic dataset JSON");
  std::uint64_t gen_seed = 0;
  SyntheticConfig gen;
  std::string gen_out = "dataset.json";
  gen_cmd->add_option("--seed", gen_seed, "generator seed");
  gen_cmd->add_option("--out", gen_out, "output file");
  gen_cmd->add_option("--n-train", gen.n_train);
  gen_cmd->add_option("--n-val", gen.n_val);
  gen_cmd->add_option("--n-test", gen.n_test);
  gen_cmd->add_option("--vocab-size", gen.vocab_size);
  gen_cmd->add_option("--entity-types", gen.n_entity_types);
  gen_cmd->add_option("--min-len", gen.min_len);
  gen_cmd->add_option("--max-len", gen.max_len);

  auto* agg_cmd = app.add_subcommand("aggregate", "merge curve files (CSV or JSON) into mean/std curves");
  std::vector<std::string> agg_inputs;
  std::string agg_out = "aggregate.csv";
  agg_cmd->add_option("curves", agg_inputs, "curve files")->required()->check(CLI::ExistingFile);
  agg_cmd->add_option("--out", agg_out, "output CSV (a .json sibling is written too)");

  auto* dump_cmd = app.add_subcommand("dump-embeddings", "write gradient or sequence embeddings");
  add_config_flags(dump_cmd);
  std::string checkpoint, pool_path, kind = "gradient", format = "csv", dump_out = "embeddings.csv";
  bool dump_all = false;
  dump_cmd->add_option("--checkpoint", checkpoint, "tagger checkpoint JSON")->required()->check(CLI::ExistingFile);
  dump_cmd->add_option("--pool", pool_path, "pool JSON with labeled_ids (those are skipped)")->check(CLI::ExistingFile);
  dump_cmd->add_option("--kind", kind)->check(CLI::IsMember({"gradient", "sequence"}));
  dump_cmd->add_option("--format", format)->check(CLI::IsMember({"csv", "bin"}));
  dump_cmd->add_flag("--all", dump_all, "include labeled sequences");
  dump_cmd->add_option("--out", dump_out, "output file");

  auto* serve_cmd = app.add_subcommand("serve", "start the annotation service");
  std::string serve_addr = "127.0.0.1:8080", state_dir = "sessions", ui_dir;
  serve_cmd->add_option("--serve-addr", serve_addr, "host:port");
  serve_cmd->add_option("--state-dir", state_dir, "session snapshot directory");
  serve_cmd->add_option("--ui-dir", ui_dir, "static annotator UI directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*run_cmd) return cmd_run(run);
    if (*gen_cmd) return cmd_gen_data(gen_seed, gen, gen_out);
    if (*agg_cmd) return cmd_aggregate(agg_inputs, agg_out);
    if (*dump_cmd) return cmd_dump(run, checkpoint, pool_path, kind, format, dump_all, dump_out);
    if (*serve_cmd) return cmd_serve(serve_addr, state_dir, ui_dir);
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
