// prvr: synthesize datasets, train the dual-branch student, evaluate
// retrieval, and dump soft-target matrices.
//
// Exit codes: 0 success, 2 input error, 3 numerical failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <string>

#include "prvr/data.hpp"
#include "prvr/evaluation.hpp"
#include "prvr/training.hpp"

namespace {

using prvr::json;

constexpr int kExitInput = 2;
constexpr int kExitNumerical = 3;

json schedule_to_json(const prvr::DecaySchedule& s) {
  json j;
  j["kind"] = prvr::to_string(s.kind);
  j["k"] = s.factor;
  j["b"] = s.intercept;
  j["time_unit"] = s.time_unit == prvr::TimeUnit::epoch ? "epoch" : "step";
  return j;
}

prvr::DecaySchedule schedule_from_json(const json& j, const std::string& where) {
  prvr::detail::reject_unknown_keys(j, {"kind", "k", "b", "time_unit"}, where);
  prvr::DecaySchedule s;
  s.kind = prvr::decay_kind_from(prvr::detail::get_field<std::string>(j, "kind", where));
  if (j.contains("k")) s.factor = j.at("k").get<double>();
  if (j.contains("b")) s.intercept = j.at("b").get<double>();
  if (j.contains("time_unit")) {
    std::string u = j.at("time_unit").get<std::string>();
    if (u == "epoch")
      s.time_unit = prvr::TimeUnit::epoch;
    else if (u == "step")
      s.time_unit = prvr::TimeUnit::step;
    else
      throw prvr::ParseError(where + ": time_unit must be 'epoch' or 'step', got '" + u + "'");
  }
  s.validate();
  return s;
}

struct RunConfig {
  std::string data_dir;
  std::string out_dir;
  prvr::TrainConfig train;
};

RunConfig run_config_from_json(const json& j, const std::string& where) {
  prvr::detail::reject_unknown_keys(j, {"data", "out", "model", "train"}, where);
  RunConfig rc;
  if (j.contains("data")) rc.data_dir = j.at("data").get<std::string>();
  if (j.contains("out")) rc.out_dir = j.at("out").get<std::string>();
  if (j.contains("model")) {
    const json& m = j.at("model");
    prvr::detail::reject_unknown_keys(m, {"hidden", "heads", "depth", "ff_mult", "max_frames"},
                                      where + ".model");
    auto opt = [&m](const char* key, std::size_t& slot) {
      if (m.contains(key)) slot = m.at(key).get<std::size_t>();
    };
    opt("hidden", rc.train.model.hidden);
    opt("heads", rc.train.model.heads);
    opt("depth", rc.train.model.depth);
    opt("ff_mult", rc.train.model.ff_mult);
    opt("max_frames", rc.train.model.max_frames);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    prvr::detail::reject_unknown_keys(
        t,
        {"batch_size", "max_epochs", "patience", "learning_rate", "margin", "temperature",
         "tau_kl", "w0", "alpha0", "beta0", "sigma", "seed", "row_normalize_targets",
         "val_fraction", "enable_inheritance", "enable_exploration", "inheritance_style",
         "exploration_style", "schedules", "snapshot_epochs"},
        where + ".train");
    prvr::TrainConfig& c = rc.train;
    auto optu = [&t](const char* key, auto& slot) {
      if (t.contains(key)) slot = t.at(key).get<std::decay_t<decltype(slot)>>();
    };
    optu("batch_size", c.batch_size);
    optu("max_epochs", c.max_epochs);
    optu("patience", c.patience);
    optu("learning_rate", c.learning_rate);
    optu("margin", c.margin);
    optu("temperature", c.temperature);
    optu("tau_kl", c.tau_kl);
    optu("w0", c.w0);
    optu("alpha0", c.alpha0);
    optu("beta0", c.beta0);
    optu("sigma", c.sigma);
    optu("seed", c.seed);
    optu("row_normalize_targets", c.row_normalize_targets);
    optu("val_fraction", c.val_fraction);
    optu("enable_inheritance", c.enable_inheritance);
    optu("enable_exploration", c.enable_exploration);
    optu("snapshot_epochs", c.snapshot_epochs);
    if (t.contains("inheritance_style"))
      c.inheritance_style = prvr::loss_style_from(t.at("inheritance_style").get<std::string>());
    if (t.contains("exploration_style"))
      c.exploration_style = prvr::loss_style_from(t.at("exploration_style").get<std::string>());
    if (t.contains("schedules")) {
      const json& s = t.at("schedules");
      prvr::detail::reject_unknown_keys(s, {"w", "alpha", "beta"}, where + ".train.schedules");
      if (s.contains("w")) c.w_schedule = schedule_from_json(s.at("w"), where + ".train.schedules.w");
      if (s.contains("alpha"))
        c.alpha_schedule = schedule_from_json(s.at("alpha"), where + ".train.schedules.alpha");
      if (s.contains("beta"))
        c.beta_schedule = schedule_from_json(s.at("beta"), where + ".train.schedules.beta");
    }
  }
  return rc;
}

json run_config_to_json(const RunConfig& rc) {
  const prvr::TrainConfig& c = rc.train;
  json j;
  j["data"] = rc.data_dir;
  j["out"] = rc.out_dir;
  j["model"] = {{"hidden", c.model.hidden},
                {"heads", c.model.heads},
                {"depth", c.model.depth},
                {"ff_mult", c.model.ff_mult},
                {"max_frames", c.model.max_frames}};
  j["train"] = {{"batch_size", c.batch_size},
                {"max_epochs", c.max_epochs},
                {"patience", c.patience},
                {"learning_rate", c.learning_rate},
                {"margin", c.margin},
                {"temperature", c.temperature},
                {"tau_kl", c.tau_kl},
                {"w0", c.w0},
                {"alpha0", c.alpha0},
                {"beta0", c.beta0},
                {"sigma", c.sigma},
                {"seed", c.seed},
                {"row_normalize_targets", c.row_normalize_targets},
                {"val_fraction", c.val_fraction},
                {"enable_inheritance", c.enable_inheritance},
                {"enable_exploration", c.enable_exploration},
                {"inheritance_style", prvr::to_string(c.inheritance_style)},
                {"exploration_style", prvr::to_string(c.exploration_style)},
                {"schedules",
                 {{"w", schedule_to_json(c.w_schedule)},
                  {"alpha", schedule_to_json(c.alpha_schedule)},
                  {"beta", schedule_to_json(c.beta_schedule)}}},
                {"snapshot_epochs", c.snapshot_epochs}};
  return j;
}

json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw prvr::IoError("cannot open " + path);
  try {
    json j;
    is >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw prvr::ParseError(path + ": " + e.what());
  }
}

json recall_to_json(const prvr::RecallReport& r) {
  return {{"R@1", r.r1}, {"R@5", r.r5}, {"R@10", r.r10}, {"R@100", r.r100}, {"SumR", r.sum_r}};
}

void write_text(const prvr::fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw prvr::IoError("cannot write " + path.string());
  os << content;
}

// rectangular similarity CSV: rows = video ids, columns = query ids
void write_similarity_csv(const prvr::fs::path& path, const std::vector<double>& sims,
                          const std::vector<std::string>& video_ids,
                          const std::vector<std::string>& query_ids) {
  std::ostringstream os;
  os << "video_id";
  for (const auto& q : query_ids) os << "," << q;
  os << "\n";
  char buf[32];
  for (std::size_t i = 0; i < video_ids.size(); ++i) {
    os << video_ids[i];
    for (std::size_t j = 0; j < query_ids.size(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.9g", sims[i * query_ids.size() + j]);
      os << "," << buf;
    }
    os << "\n";
  }
  write_text(path, os.str());
}

void write_targets_csv(const prvr::fs::path& path, const std::vector<double>& matrix,
                       const std::vector<std::string>& row_ids,
                       const std::vector<std::string>& col_ids) {
  std::ostringstream os;
  os << "id";
  for (const auto& c : col_ids) os << "," << c;
  os << "\n";
  char buf[32];
  std::size_t n = col_ids.size();
  for (std::size_t i = 0; i < row_ids.size(); ++i) {
    os << row_ids[i];
    for (std::size_t j = 0; j < n; ++j) {
      std::snprintf(buf, sizeof(buf), "%.9g", matrix[i * n + j]);
      os << "," << buf;
    }
    os << "\n";
  }
  write_text(path, os.str());
}

int cmd_synth(const std::string& spec_path, const std::string& out_dir) {
  json j = load_json_file(spec_path);
  prvr::SyntheticSpec spec = prvr::synthetic_spec_from_json(j, spec_path);
  prvr::Dataset ds = prvr::generate_synthetic(spec);
  prvr::write_dataset(ds, out_dir);
  std::cout << "wrote " << ds.n_videos() << " videos / " << ds.n_queries() << " queries to "
            << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, const std::string& snapshot_csv) {
  RunConfig rc;
  if (!config_path.empty()) rc = run_config_from_json(load_json_file(config_path), config_path);
  if (!data_dir.empty()) rc.data_dir = data_dir;
  if (!out_dir.empty()) rc.out_dir = out_dir;
  if (rc.data_dir.empty()) throw prvr::ConfigError("no dataset: pass --data or set 'data'");
  if (rc.out_dir.empty()) throw prvr::ConfigError("no output dir: pass --out or set 'out'");
  if (!snapshot_csv.empty()) {
    rc.train.snapshot_epochs.clear();
    std::stringstream ss(snapshot_csv);
    std::string item;
    while (std::getline(ss, item, ','))
      rc.train.snapshot_epochs.push_back(std::stoul(item));
  }
  rc.train.validate();

  prvr::Dataset ds = prvr::load_dataset(rc.data_dir, rc.train.model.max_frames);
  prvr::fs::create_directories(prvr::fs::path(rc.out_dir) / "snapshots");

  json resolved = run_config_to_json(rc);
  std::string resolved_text = resolved.dump(2) + "\n";
  write_text(prvr::fs::path(rc.out_dir) / "config.resolved.json", resolved_text);
  // hash covers the semantic sections only, not the data/out paths
  json hashed = {{"model", resolved.at("model")}, {"train", resolved.at("train")}};
  std::string config_hash = prvr::hex64(prvr::fnv1a64(hashed.dump()));

  std::ofstream log_stream(prvr::fs::path(rc.out_dir) / "train_log.jsonl", std::ios::binary);
  if (!log_stream) throw prvr::IoError("cannot write train log in " + rc.out_dir);

  std::set<std::size_t> snapshot_epochs(rc.train.snapshot_epochs.begin(),
                                        rc.train.snapshot_epochs.end());
  auto hook = [&](std::size_t epoch, const prvr::ModelState& state, const prvr::EpochLog& log) {
    json line = {{"epoch", log.epoch},
                 {"L_total", log.l_total},
                 {"L_E", log.l_e},
                 {"L_I", log.l_i},
                 {"L_c", log.l_c},
                 {"w", log.w},
                 {"alpha", log.alpha},
                 {"beta", log.beta},
                 {"val", recall_to_json(log.val)}};
    log_stream << line.dump() << "\n";
    log_stream.flush();
    if (snapshot_epochs.count(epoch)) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%05zu.prvc", epoch);
      prvr::save_checkpoint(prvr::fs::path(rc.out_dir) / "snapshots" / name, state,
                            rc.train.seed, config_hash);
    }
    std::fprintf(stderr, "epoch %zu: loss %.4f val SumR %.4f\n", epoch, log.l_total,
                 log.val.sum_r);
  };

  prvr::FitResult result = prvr::fit(rc.train, ds, hook);
  prvr::save_checkpoint(prvr::fs::path(rc.out_dir) / "checkpoint.prvc", result.best,
                        rc.train.seed, config_hash);
  std::cout << "best epoch " << result.best_epoch << " val SumR " << result.best_sum_r << "\n";
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_dir, double sigma,
             std::size_t mv_bins, const std::string& out_dir) {
  prvr::ModelState model = prvr::load_checkpoint(model_path);
  prvr::Dataset ds = prvr::load_dataset(data_dir, model.config.max_frames);

  auto results = prvr::rank_all(model, ds, sigma);
  prvr::RecallReport recall = prvr::recall_report(results);
  prvr::MvGroupReport groups = prvr::grouped_by_mv(results, ds, mv_bins);
  prvr::MarginReport margin = prvr::margin_report(model, ds, sigma);
  std::size_t skipped = 0;
  double compl_score = prvr::complementarity(model, ds, true, &skipped);

  json report;
  report["sigma"] = sigma;
  report["recall"] = recall_to_json(recall);
  report["mv_groups"] = {{"bin_edges", groups.bin_edges}, {"counts", groups.counts}};
  report["mv_groups"]["per_bin"] = json::array();
  for (const auto& r : groups.per_bin) report["mv_groups"]["per_bin"].push_back(recall_to_json(r));
  report["margin"] = {{"center_distance", margin.center_distance},
                      {"n_positive", margin.positive.size()},
                      {"n_negative", margin.negative.size()}};
  report["complementarity"] = {{"mean_pearson_positive_pairs", compl_score},
                               {"skipped_pairs", skipped}};
  std::string text = report.dump(2) + "\n";
  std::cout << text;

  if (!out_dir.empty()) {
    prvr::fs::create_directories(out_dir);
    write_text(prvr::fs::path(out_dir) / "report.json", text);

    std::ostringstream mv_csv;
    mv_csv << "bin_left,bin_right,count,R@1,R@5,R@10,R@100,SumR\n";
    for (std::size_t b = 0; b < groups.per_bin.size(); ++b) {
      const auto& r = groups.per_bin[b];
      mv_csv << groups.bin_edges[b] << "," << groups.bin_edges[b + 1] << "," << groups.counts[b]
             << "," << r.r1 << "," << r.r5 << "," << r.r10 << "," << r.r100 << "," << r.sum_r
             << "\n";
    }
    write_text(prvr::fs::path(out_dir) / "mv_groups.csv", mv_csv.str());

    std::ostringstream hist;
    prvr::write_histogram_csv(margin, hist);
    write_text(prvr::fs::path(out_dir) / "margin_histogram.csv", hist.str());

    auto videos = prvr::detail::eval_videos(ds);
    auto queries = prvr::detail::queries_of_pool(ds, videos);
    auto sims = prvr::fused_similarities(model, ds, sigma, videos, queries);
    std::vector<std::string> vids, qids;
    for (auto vi : videos) vids.push_back(ds.manifest.videos[vi].id);
    for (auto qi : queries) qids.push_back(ds.manifest.queries[qi].id);
    write_similarity_csv(prvr::fs::path(out_dir) / "similarities.csv", sims, vids, qids);
  }
  return 0;
}

int cmd_inspect_targets(const std::string& run_dir, const std::string& data_dir,
                        const std::string& epochs_csv, std::size_t probe_size,
                        const std::string& out_dir) {
  RunConfig rc = run_config_from_json(
      load_json_file((prvr::fs::path(run_dir) / "config.resolved.json").string()),
      run_dir + "/config.resolved.json");
  prvr::Dataset ds =
      prvr::load_dataset(data_dir.empty() ? rc.data_dir : data_dir, rc.train.model.max_frames);

  std::vector<std::size_t> epochs;
  {
    std::stringstream ss(epochs_csv);
    std::string item;
    while (std::getline(ss, item, ',')) epochs.push_back(std::stoul(item));
  }
  if (epochs.empty()) throw prvr::ParameterError("--epochs must list at least one epoch");

  prvr::fs::path out = out_dir.empty() ? prvr::fs::path(run_dir) / "targets" : prvr::fs::path(out_dir);
  prvr::fs::create_directories(out);

  // fixed probe batch: first batch of epoch 0 under the run's seed
  prvr::Batch probe = prvr::make_batches(ds, probe_size, rc.train.seed, 0)[0];
  std::vector<std::string> vids, qids;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    vids.push_back(ds.manifest.videos[probe.video_idx[i]].id);
    qids.push_back(ds.manifest.queries[probe.query_idx[i]].id);
  }

  bool needs_teacher = rc.train.inheritance_style == prvr::LossStyle::distill ||
                       rc.train.exploration_style == prvr::LossStyle::distill;
  prvr::TeacherCache teacher;
  if (needs_teacher) teacher = prvr::build_teacher_cache(ds);

  for (std::size_t epoch : epochs) {
    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%05zu.prvc", epoch);
    prvr::fs::path ckpt = prvr::fs::path(run_dir) / "snapshots" / name;
    if (!prvr::fs::exists(ckpt))
      throw prvr::IoError("missing snapshot " + ckpt.string() +
                          " (train with --snapshot-epochs including " + std::to_string(epoch) +
                          ")");
    prvr::ModelState model = prvr::load_checkpoint(ckpt);
    double alpha = rc.train.alpha_at(epoch, epoch);
    double beta = rc.train.beta_at(epoch, epoch);

    struct SlotSpec {
      const char* label;
      bool is_inheritance;
      prvr::LossStyle style;
    };
    SlotSpec slots[2] = {{"inheritance", true, rc.train.inheritance_style},
                         {"exploration", false, rc.train.exploration_style}};
    for (const auto& slot : slots) {
      bool enabled = slot.is_inheritance ? rc.train.enable_inheritance
                                         : rc.train.enable_exploration;
      if (!enabled) continue;
      prvr::PairwiseMatrix t(probe.size());
      if (slot.style == prvr::LossStyle::distill) {
        for (std::size_t i = 0; i < probe.size(); ++i)
          for (std::size_t j = 0; j < probe.size(); ++j)
            t.at(i, j) = teacher.at(probe.video_idx[i], probe.query_idx[j]);
      } else {
        const prvr::BranchParams& branch =
            slot.is_inheritance ? model.inheritance : model.exploration;
        std::vector<prvr::EncodedVideo> evs;
        std::vector<prvr::EncodedQuery> eqs;
        for (std::size_t i = 0; i < probe.size(); ++i) {
          evs.push_back(prvr::encode_video(ds.video_features[probe.video_idx[i]], branch.video));
          eqs.push_back(prvr::encode_text(ds.query_features[probe.query_idx[i]], branch.text));
        }
        t = prvr::pairwise_matrix(evs, eqs);
      }
      prvr::SoftTargets targets =
          prvr::build_soft_targets(t, alpha, beta, rc.train.row_normalize_targets);
      char fname[96];
      std::snprintf(fname, sizeof(fname), "targets_%s_t2v_epoch%05zu.csv", slot.label, epoch);
      write_targets_csv(out / fname, targets.t2v, vids, qids);
      std::snprintf(fname, sizeof(fname), "targets_%s_v2t_epoch%05zu.csv", slot.label, epoch);
      write_targets_csv(out / fname, targets.v2t, qids, vids);
    }
  }
  std::cout << "wrote target dumps for " << epochs.size() << " epoch(s) to " << out.string()
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"partially relevant video retrieval: dual-branch training with dynamic "
               "knowledge distillation and soft targets"};
  app.require_subcommand(1);

  std::string spec_path, out_dir, config_path, data_dir, model_path, epochs_csv, snapshots_csv;
  double sigma = 0.7;
  std::size_t mv_bins = 4, probe_size = 8;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--spec", spec_path, "SyntheticSpec JSON file")->required();
  synth->add_option("--out", out_dir, "output dataset directory")->required();

  auto* train = app.add_subcommand("train", "train the dual-branch student");
  train->add_option("--config", config_path, "RunConfig JSON file");
  train->add_option("--data", data_dir, "dataset directory (overrides config)");
  train->add_option("--out", out_dir, "output directory (overrides config)");
  train->add_option("--snapshot-epochs", snapshots_csv,
                    "comma-separated epochs to snapshot (overrides config)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--model", model_path, "checkpoint file")->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--sigma", sigma, "fusion weight of the exploration branch")
      ->check(CLI::Range(0.0, 1.0));
  eval->add_option("--mv-bins", mv_bins, "number of M/V groups");
  eval->add_option("--out", out_dir, "directory for JSON/CSV reports");

  auto* inspect = app.add_subcommand("inspect-targets", "dump soft-target matrices per epoch");
  inspect->add_option("--model", model_path, "training output directory with snapshots/")
      ->required();
  inspect->add_option("--data", data_dir, "dataset directory (defaults to the run's)");
  inspect->add_option("--epochs", epochs_csv, "comma-separated snapshot epochs")->required();
  inspect->add_option("--probe-size", probe_size, "probe batch size");
  inspect->add_option("--out", out_dir, "output directory (default <run>/targets)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(spec_path, out_dir);
    if (train->parsed()) return cmd_train(config_path, data_dir, out_dir, snapshots_csv);
    if (eval->parsed()) return cmd_eval(model_path, data_dir, sigma, mv_bins, out_dir);
    if (inspect->parsed())
      return cmd_inspect_targets(model_path, data_dir, epochs_csv, probe_size, out_dir);
  } catch (const prvr::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const prvr::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return 0;
}
