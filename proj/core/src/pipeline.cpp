#include "mhl/pipeline.hpp"

#include <chrono>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "mhl/checkpoint.hpp"
#include "mhl/error.hpp"
#include "mhl/hash.hpp"
#include "mhl/parallel.hpp"
#include "mhl/rng.hpp"
#include "mhl/trainer.hpp"

namespace mhl {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

void require_file(const std::string& field, const std::string& path) {
  if (path.empty() || !fs::exists(path)) throw_data("config field " + field + ": file not found: '" + path + "'");
}

void require_stage(const fs::path& path, const std::string& stage) {
  if (!fs::exists(path)) throw_data("missing " + path.string() + " (run '" + stage + "' first)");
}

std::string join_ids(const std::vector<std::string>& ids) {
  std::string s;
  for (const auto& id : ids) s += id + "\n";
  return s;
}

Catalog load_catalog(const RunPaths& paths) {
  require_stage(paths.catalog(), "tokenize");
  const json meta = json::parse(read_file(paths.catalog_meta()));
  return parse_catalog_jsonl(read_file(paths.catalog()), meta.at("codebook_sizes").get<std::vector<int>>(),
                             meta.at("has_pad").get<bool>());
}

json schedule_entry(const EpochRecord& r, const ScheduleState& s) {
  return {{"epoch", r.epoch},        {"phase", to_string(r.phase)},
          {"policy", to_string(r.policy)}, {"gamma", r.gamma},
          {"next_phase", to_string(s.phase)}, {"next_gamma", s.gamma},
          {"plateau_counter", s.plateau_counter}, {"decays", s.decays},
          {"finetune_patience_counter", s.finetune_patience_counter}};
}

}  // namespace

fs::path run_root_from_env() {
  if (const char* env = std::getenv("MHL_RUN_ROOT"); env && *env) return env;
  return "runs";
}

std::string default_run_id(const RunConfig& cfg) { return "run-" + git_blob_hash(to_json(cfg).dump()).substr(0, 12); }

RunManifest RunManifest::load_or_create(const RunPaths& paths, const RunConfig& cfg) {
  if (fs::exists(paths.manifest())) return load(paths.manifest());
  RunManifest m;
  m.j_ = {{"run_id", paths.dir.filename().string()},
          {"config", to_json(cfg)},
          {"inputs", json::object()},
          {"events", json::array()},
          {"schedule_trace", json::array()},
          {"metric_history", json::array()},
          {"checkpoints", json::array()},
          {"metrics", json::object()}};
  return m;
}

RunManifest RunManifest::load(const fs::path& path) {
  RunManifest m;
  try {
    m.j_ = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw_data("manifest " + path.string() + ": " + e.what());
  }
  return m;
}

void RunManifest::append(const std::string& list, nlohmann::json entry) {
  if (!j_.contains(list)) j_[list] = json::array();
  j_[list].push_back(std::move(entry));
}

void RunManifest::set(const std::string& key, nlohmann::json value) { j_[key] = std::move(value); }

void RunManifest::save(const fs::path& path) const { write_file(path, j_.dump(2) + "\n"); }

PrepareResult cmd_prepare(const RunConfig& cfg, const RunPaths& paths) {
  const auto t0 = Clock::now();
  cfg.validate();
  write_file(paths.config(), to_json(cfg).dump(2) + "\n");
  json inputs = json::object();

  RawCorpus corpus;
  if (cfg.data.source == "synth") {
    SynthData synth = synth_generate(cfg.data.synth);
    corpus = std::move(synth.corpus);
    write_feature_matrix(paths.features(), synth.item_features);
    write_file(paths.item_ids(), join_ids(synth.item_ids));
  } else {
    require_file("data.path", cfg.data.path);
    inputs["data.path"] = git_blob_hash_file(cfg.data.path);
    corpus = load_interactions(cfg.data.path, parse_interaction_format(cfg.data.format));
    if (!cfg.data.features_path.empty()) {
      require_file("data.features_path", cfg.data.features_path);
      require_file("data.item_ids_path", cfg.data.item_ids_path);
      inputs["data.features_path"] = git_blob_hash_file(cfg.data.features_path);
      inputs["data.item_ids_path"] = git_blob_hash_file(cfg.data.item_ids_path);
      const Eigen::MatrixXd features = read_feature_matrix(cfg.data.features_path);
      const auto ids = read_lines(cfg.data.item_ids_path);
      if (static_cast<Eigen::Index>(ids.size()) != features.rows())
        throw_data("data.item_ids_path has " + std::to_string(ids.size()) + " ids for " +
                   std::to_string(features.rows()) + " feature rows");
      write_feature_matrix(paths.features(), features);
      write_file(paths.item_ids(), join_ids(ids));
    }
    if (!cfg.data.tokens_path.empty()) {
      require_file("data.tokens_path", cfg.data.tokens_path);
      inputs["data.tokens_path"] = git_blob_hash_file(cfg.data.tokens_path);
    }
  }
  if (cfg.data.apply_core_filter) corpus = core_filter(corpus, cfg.data.min_count);
  if (corpus.users.empty()) throw_data("prepare: corpus is empty");
  const SplitCorpus split = split_leave_one_out(corpus);

  write_file(paths.interactions(), format_interactions_tsv(corpus));
  write_file(paths.splits(), format_split_jsonl(split));

  // Content hash over every produced artifact plus external inputs.
  std::string digest_input;
  for (const auto& [name, h] : inputs.items()) digest_input += name + " " + h.get<std::string>() + "\n";
  for (const fs::path& p : {paths.interactions(), paths.splits(), paths.features(), paths.item_ids()}) {
    if (!fs::exists(p)) continue;
    const std::string h = git_blob_hash_file(p);
    inputs[fs::relative(p, paths.dir).generic_string()] = h;
    digest_input += p.filename().string() + " " + h + "\n";
  }
  PrepareResult r;
  r.content_hash = git_blob_hash(digest_input);
  r.n_users = corpus.users.size();
  r.n_items = corpus.num_items();
  r.n_events = corpus.num_events();
  r.n_train_only = split.num_train_only();

  RunManifest m = RunManifest::load_or_create(paths, cfg);
  m.set("inputs", inputs);
  m.set("content_hash", r.content_hash);
  m.append("events", {{"command", "prepare"},
                      {"seconds", seconds_since(t0)},
                      {"users", r.n_users},
                      {"items", r.n_items},
                      {"events", r.n_events},
                      {"train_only_users", r.n_train_only}});
  m.save(paths.manifest());
  return r;
}

TokenizeResult cmd_tokenize(const RunConfig& cfg, const RunPaths& paths) {
  const auto t0 = Clock::now();
  require_stage(paths.splits(), "prepare");
  const auto& tc = cfg.tokenizer;
  json extra = json::object();

  Catalog catalog;
  if (!cfg.data.tokens_path.empty()) {
    ExternalTokens ext = ingest_external_tokens(cfg.data.tokens_path, tc.K);
    extra = {{"source", "external"}, {"padded", ext.padded}, {"truncated", ext.truncated}};
    catalog = std::move(ext.catalog);
  } else {
    require_stage(paths.features(), "prepare");
    const Eigen::MatrixXd features = read_feature_matrix(paths.features());
    const std::vector<std::string> ids = read_lines(paths.item_ids());
    PqOptions opts;
    opts.K = tc.K;
    opts.codebook_size = tc.codebook_size;
    opts.iters = tc.kmeans_iters;
    opts.seed = derive_seed(tc.seed, {stream::kKMeans});
    opts.use_rotation = tc.opq;
    opts.opq_rounds = tc.opq_rounds;
    const CodebookSet cb = tc.pca_dim == 0 ? train_pq(features, opts) : build_tokenizer(features, tc.pca_dim, opts);
    std::vector<SemanticId> sids;
    sids.reserve(ids.size());
    for (Eigen::Index i = 0; i < features.rows(); ++i) sids.push_back(encode_item(features.row(i), cb));
    catalog = Catalog(ids, std::move(sids), std::vector<int>(static_cast<std::size_t>(tc.K), tc.codebook_size), false);
    write_file(paths.codebooks(), codebooks_to_json(cb).dump() + "\n");
    extra = {{"source", "pq"}, {"opq", tc.opq}};
  }

  // Every item in the split must have a semantic ID.
  const SplitCorpus split = parse_split_jsonl(read_file(paths.splits()));
  auto check = [&](const std::string& item) {
    if (!catalog.find(item)) throw_data("tokenize: item '" + item + "' has no semantic ID");
  };
  for (const UserSplit& u : split.users) {
    for (const auto& i : u.train) check(i);
    check(u.val_target);
    check(u.test_target);
  }
  for (const auto& [user, items] : split.train_only)
    for (const auto& i : items) check(i);

  write_file(paths.catalog(), format_catalog_jsonl(catalog));
  write_file(paths.catalog_meta(),
             json{{"codebook_sizes", catalog.codebook_sizes()}, {"has_pad", catalog.has_pad()}}.dump() + "\n");

  TokenizeResult r;
  r.n_items = catalog.size();
  r.codebook_sizes = catalog.codebook_sizes();
  std::set<std::vector<int>> distinct;
  for (const auto& id : catalog.ids()) distinct.insert(id.codewords);
  r.distinct_ids = distinct.size();

  RunManifest m = RunManifest::load_or_create(paths, cfg);
  json inputs = m.json().value("inputs", json::object());
  inputs["tokenizer/catalog.jsonl"] = git_blob_hash_file(paths.catalog());
  m.set("inputs", inputs);
  extra["command"] = "tokenize";
  extra["seconds"] = seconds_since(t0);
  extra["items"] = r.n_items;
  extra["distinct_ids"] = r.distinct_ids;
  m.append("events", extra);
  m.save(paths.manifest());
  return r;
}

RunArtifacts load_artifacts(const RunConfig& cfg, const RunPaths& paths) {
  require_stage(paths.splits(), "prepare");
  RunArtifacts a;
  a.split = parse_split_jsonl(read_file(paths.splits()));
  a.catalog = load_catalog(paths);
  a.graph = build_token_graph(a.catalog, cfg.tokenizer.graph_edges);
  return a;
}

Model model_from_checkpoint(const fs::path& path, const Catalog& catalog, WeightChoice w) {
  if (!fs::exists(path)) throw_data("checkpoint not found: " + path.string());
  const Checkpoint ck = read_checkpoint(path);
  const ModelConfig mc = model_config_from_json(ck.header.at("model"));
  if (mc.codebook_sizes != catalog.codebook_sizes() || mc.pad != catalog.has_pad())
    throw_config("checkpoint " + path.string() + " does not match the catalog (K=" + std::to_string(mc.K()) +
                 " vs " + std::to_string(catalog.K()) + " or codebook sizes differ)");
  Model model(mc);
  const Eigen::VectorXd& p = ck.blob(w == WeightChoice::kBest ? "best_params" : "params");
  if (p.size() != model.params().size()) throw_data("checkpoint: parameter count does not match its model config");
  model.params() = p;
  return model;
}

TrainResult cmd_train(const RunConfig& cfg, const RunPaths& paths, bool resume) {
  const auto t0 = Clock::now();
  const RunArtifacts art = load_artifacts(cfg, paths);
  ModelConfig mc = cfg.model;
  mc.codebook_sizes = art.catalog.codebook_sizes();
  mc.pad = art.catalog.has_pad();
  Model model(mc);
  Trainer trainer(cfg, model, art.catalog, art.graph, make_train_data(art.split, art.catalog, mc.max_seq_len));
  const json echo = to_json(cfg);

  RunManifest m = RunManifest::load_or_create(paths, cfg);
  if (resume && fs::exists(paths.latest_checkpoint())) {
    const Checkpoint ck = read_checkpoint(paths.latest_checkpoint());
    for (const char* section : {"model", "tokenizer", "train", "data"})
      if (ck.header.at("config").at(section) != echo.at(section))
        throw_config(std::string("resume: config section '") + section + "' differs from the checkpoint");
    trainer.restore(ck);
    m.append("events", {{"command", "train.resume"}, {"epoch", trainer.schedule().epoch}});
  } else {
    trainer.initialize();
  }

  fs::create_directories(paths.checkpoints());
  auto epoch_t0 = Clock::now();
  auto on_epoch = [&](const Trainer& t, const EpochRecord& rec) {
    const Checkpoint ck = t.snapshot(echo);
    write_checkpoint(paths.latest_checkpoint(), ck);
    json saved = json::array({fs::relative(paths.latest_checkpoint(), paths.dir).generic_string()});
    if (rec.new_best) {
      write_checkpoint(paths.best_checkpoint(), ck);
      saved.push_back(fs::relative(paths.best_checkpoint(), paths.dir).generic_string());
    }
    if (cfg.train.checkpoint_every > 0 && rec.epoch % cfg.train.checkpoint_every == 0) {
      std::ostringstream name;
      name << "epoch_" << std::setw(4) << std::setfill('0') << rec.epoch << ".ckpt";
      write_checkpoint(paths.checkpoints() / name.str(), ck);
      saved.push_back("checkpoints/" + name.str());
    }
    m.append("schedule_trace", schedule_entry(rec, t.schedule()));
    json h = to_json(rec);
    h["seconds"] = seconds_since(epoch_t0);
    m.append("metric_history", h);
    m.append("checkpoints", {{"epoch", rec.epoch}, {"paths", saved}});
    m.save(paths.manifest());
    epoch_t0 = Clock::now();
  };

  try {
    trainer.run(on_epoch);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kNumeric) throw;
    const std::string last = fs::exists(paths.latest_checkpoint()) ? paths.latest_checkpoint().string() : "none";
    m.append("events", {{"command", "train"}, {"aborted", e.what()}, {"last_good_checkpoint", last}});
    m.save(paths.manifest());
    throw_numeric(std::string(e.what()) + "; last good checkpoint: " + last);
  }

  write_checkpoint(paths.final_checkpoint(), trainer.snapshot(echo));
  TrainResult r;
  r.stop_reason = trainer.stop_reason();
  r.epochs = trainer.schedule().epoch;
  r.best_epoch = trainer.best_epoch();
  r.final_checkpoint = paths.final_checkpoint();
  m.append("events", {{"command", "train"},
                      {"seconds", seconds_since(t0)},
                      {"epochs", r.epochs},
                      {"best_epoch", r.best_epoch},
                      {"stop_reason", r.stop_reason},
                      {"final_checkpoint", fs::relative(r.final_checkpoint, paths.dir).generic_string()}});
  m.save(paths.manifest());
  return r;
}

EvaluateResult cmd_evaluate(const RunConfig& cfg, const RunPaths& paths, const std::optional<fs::path>& checkpoint,
                            WeightChoice w) {
  const auto t0 = Clock::now();
  const RunArtifacts art = load_artifacts(cfg, paths);
  const fs::path ckpt = checkpoint.value_or(paths.final_checkpoint());
  const Model model = model_from_checkpoint(ckpt, art.catalog, w);
  const Decoder decoder(model, art.catalog, art.graph, cfg.decode);

  EvaluateResult r;
  r.test = evaluate(decoder, make_cases(art.split, art.catalog, EvalTarget::kTest), cfg.eval.ks, "full");
  const json meta = {{"seed", cfg.train.seed},
                     {"checkpoint", git_blob_hash_file(ckpt)},
                     {"weights", w == WeightChoice::kBest ? "best" : "last"}};
  r.test.metadata = meta;
  if (!truncate_long(art.split, cfg.eval.truncate_min_len, cfg.eval.truncate_drop_last).split.users.empty()) {
    r.pilot = pilot_truncation(decoder, art.split, cfg.eval.truncate_min_len, cfg.eval.truncate_drop_last, cfg.eval.ks);
    r.pilot->full.metadata = meta;
    r.pilot->truncated.metadata = meta;
  }

  write_file(paths.metrics_dir() / "test.json", to_json(r.test).dump(2) + "\n");
  if (r.pilot) write_file(paths.metrics_dir() / "pilot.json", to_json(*r.pilot).dump(2) + "\n");
  std::vector<MetricPoint> curve;
  for (const auto& h : read_checkpoint(ckpt).header.at("history")) {
    const EpochRecord rec = epoch_record_from_json(h);
    curve.push_back({rec.epoch, "val_ndcg@10", rec.val_ndcg10});
    curve.push_back({rec.epoch, "loss", rec.loss});
    curve.push_back({rec.epoch, "gamma", rec.gamma});
  }
  write_file(paths.metrics_dir() / "curve.csv", format_metric_csv(curve));

  RunManifest m = RunManifest::load_or_create(paths, cfg);
  json metrics = {{"test", to_json(r.test)}};
  if (r.pilot) metrics["pilot"] = to_json(*r.pilot);
  m.set("metrics", metrics);
  m.append("events", {{"command", "evaluate"}, {"seconds", seconds_since(t0)}, {"checkpoint", ckpt.string()}});
  m.save(paths.manifest());
  return r;
}

fs::path cmd_decode(const RunConfig& cfg, const RunPaths& paths, const std::optional<fs::path>& checkpoint,
                    const std::optional<fs::path>& contexts, std::size_t topk) {
  const RunArtifacts art = load_artifacts(cfg, paths);
  const Model model = model_from_checkpoint(checkpoint.value_or(paths.final_checkpoint()), art.catalog,
                                            WeightChoice::kBest);
  const Decoder decoder(model, art.catalog, art.graph, cfg.decode);

  std::vector<EvalCase> cases;
  if (contexts) {
    std::size_t lineno = 0;
    for (const auto& line : read_lines(*contexts)) {
      ++lineno;
      EvalCase c;
      try {
        const json j = json::parse(line);
        c.user_id = j.at("user_id").get<std::string>();
        for (const auto& item : j.at("items")) c.context.push_back(art.catalog.index_of(item.get<std::string>()));
      } catch (const json::exception& e) {
        throw_data("contexts line " + std::to_string(lineno) + ": " + e.what());
      }
      if (c.context.empty()) throw_data("contexts line " + std::to_string(lineno) + ": empty context");
      cases.push_back(std::move(c));
    }
  } else {
    cases = make_cases(art.split, art.catalog, EvalTarget::kTest);
  }

  std::vector<std::vector<ScoredItem>> ranked(cases.size());
  parallel_for(cases.size(), [&](std::size_t i) { ranked[i] = decoder.rank(cases[i].context, topk); });
  std::string out;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    json items = json::array(), scores = json::array();
    for (const ScoredItem& s : ranked[i]) {
      items.push_back(art.catalog.item_id(s.item));
      scores.push_back(s.score);
    }
    out += json{{"user_id", cases[i].user_id}, {"items", items}, {"scores", scores}}.dump() + "\n";
  }
  const fs::path path = paths.dir / "decode" / "rankings.jsonl";
  write_file(path, out);
  return path;
}

std::string cmd_report(const std::vector<fs::path>& manifests, const fs::path& out_dir) {
  if (manifests.empty()) throw_config("report: no manifests given");
  std::vector<json> runs;
  for (const auto& p : manifests) runs.push_back(RunManifest::load(p).json());

  // Config fields that differ across runs.
  std::vector<json> flat;
  std::set<std::string> keys;
  for (const auto& r : runs) {
    flat.push_back(r.at("config").flatten());
    for (const auto& [k, v] : flat.back().items()) keys.insert(k);
  }
  std::vector<std::string> deltas;
  for (const auto& k : keys) {
    const json first = flat[0].value(k, json());
    for (const auto& f : flat)
      if (f.value(k, json()) != first) {
        deltas.push_back(k);
        break;
      }
  }

  const std::vector<std::string> metric_cols = {"recall@5", "ndcg@5", "recall@10", "ndcg@10"};
  std::ostringstream md, csv;
  md << "| run |";
  csv << "run";
  for (const auto& d : deltas) {
    md << " **" << d.substr(1) << "** |";
    csv << "," << d.substr(1);
  }
  for (const auto& c : metric_cols) {
    md << " " << c << " |";
    csv << "," << c;
  }
  md << " pilot N@10 change | epochs |\n|---|";
  csv << ",pilot_ndcg10_change_pct,epochs\n";
  for (std::size_t i = 0; i < deltas.size() + metric_cols.size() + 2; ++i) md << "---|";
  md << "\n";

  std::string curves = "run,epoch,metric,value\n";
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const json& run = runs[r];
    const std::string id = run.value("run_id", "run" + std::to_string(r));
    md << "| " << id << " |";
    csv << id;
    for (const auto& d : deltas) {
      const std::string v = flat[r].value(d, json()).dump();
      md << " " << v << " |";
      csv << "," << v;
    }
    const json test = run.value("metrics", json::object()).value("test", json::object());
    for (const auto& c : metric_cols) {
      const json v = test.value("metrics", json::object()).value(c, json());
      std::ostringstream cell;
      if (v.is_number()) cell << std::fixed << std::setprecision(4) << v.get<double>();
      else cell << "-";
      md << " " << cell.str() << " |";
      csv << "," << cell.str();
    }
    const json pilot = run.value("metrics", json::object()).value("pilot", json::object());
    const json change = pilot.value("ndcg10_change_pct", json());
    std::ostringstream pc;
    if (change.is_number()) pc << std::fixed << std::setprecision(1) << change.get<double>() << "%";
    else if (change.is_string()) pc << change.get<std::string>();
    else pc << "-";
    const std::size_t epochs = run.value("metric_history", json::array()).size();
    md << " " << pc.str() << " | " << epochs << " |\n";
    csv << "," << pc.str() << "," << epochs << "\n";
    for (const auto& h : run.value("metric_history", json::array())) {
      std::ostringstream row;
      row.precision(17);
      row << id << "," << h.at("epoch").get<int>() << ",val_ndcg@10," << h.at("val_ndcg10").get<double>() << "\n";
      row << id << "," << h.at("epoch").get<int>() << ",gamma," << h.at("gamma").get<double>() << "\n";
      curves += row.str();
    }
  }
  write_file(out_dir / "table.md", md.str());
  write_file(out_dir / "table.csv", csv.str());
  write_file(out_dir / "curves.csv", curves);
  return md.str();
}

}  // namespace mhl
