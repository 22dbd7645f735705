// mhl: prepare | tokenize | train | evaluate | decode | report
//
// Every command reads one JSON run config (--config, optional) on top of a
// preset; --set key.path=value overrides single fields. Artifacts live in
// $MHL_RUN_ROOT/<run-id>/.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mhl/error.hpp"
#include "mhl/hash.hpp"
#include "mhl/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config_path;
  std::string preset;
  std::string run_id;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "JSON run config");
  cmd->add_option("--preset", c.preset, "desk | paper-appendixC");
  cmd->add_option("--run-id", c.run_id, "run directory name (default: config hash)");
  cmd->add_option("--set", c.overrides, "override a field, e.g. train.seed=3");
}

// "train.gamma0=0" -> j["train"]["gamma0"] = 0. Values parse as JSON and
// fall back to plain strings.
void apply_override(json& j, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) mhl::throw_config("--set expects key=value, got '" + kv + "'");
  std::string path = "/" + kv.substr(0, eq);
  for (char& ch : path)
    if (ch == '.') ch = '/';
  const std::string raw = kv.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  j[json::json_pointer(path)] = value;
}

mhl::RunConfig resolve_config(const Common& c) {
  json j = json::object();
  if (!c.config_path.empty()) {
    if (!fs::exists(c.config_path)) mhl::throw_config("config file not found: " + c.config_path);
    try {
      j = json::parse(mhl::read_file(c.config_path));
    } catch (const json::parse_error& e) {
      mhl::throw_config("config " + c.config_path + ": " + e.what());
    }
  }
  if (!c.preset.empty()) j["preset"] = c.preset;
  for (const auto& kv : c.overrides) apply_override(j, kv);
  return mhl::run_config_from_json(j);
}

mhl::RunPaths paths_for(const Common& c, const mhl::RunConfig& cfg) {
  const std::string id = c.run_id.empty() ? mhl::default_run_id(cfg) : c.run_id;
  return mhl::RunPaths::under(mhl::run_root_from_env(), id);
}

void print_metrics(const mhl::MetricsReport& r) {
  std::cout << r.protocol << " (" << r.n_users << " users):";
  for (std::size_t i = 0; i < r.ks.size(); ++i)
    std::cout << " R@" << r.ks[i] << "=" << r.recall[i] << " N@" << r.ks[i] << "=" << r.ndcg[i];
  std::cout << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked history learning for generative recommendation"};
  app.require_subcommand(1);

  Common common;
  auto* prepare = app.add_subcommand("prepare", "build corpus and leave-one-out splits");
  auto* tokenize = app.add_subcommand("tokenize", "quantize item features into semantic IDs");
  auto* train = app.add_subcommand("train", "train with the masking curriculum");
  auto* evaluate = app.add_subcommand("evaluate", "test metrics and truncated-history pilot");
  auto* decode = app.add_subcommand("decode", "rank items for contexts");
  auto* report = app.add_subcommand("report", "join run manifests into one table");
  for (auto* cmd : {prepare, tokenize, train, evaluate, decode}) add_common(cmd, common);

  bool resume = false;
  train->add_flag("--resume", resume, "continue from checkpoints/latest.ckpt");

  std::string checkpoint, weights = "best", contexts;
  std::size_t topk = 10;
  for (auto* cmd : {evaluate, decode}) cmd->add_option("--checkpoint", checkpoint, "default: checkpoints/final.ckpt");
  evaluate->add_option("--weights", weights, "best | last")->check(CLI::IsMember({"best", "last"}));
  decode->add_option("--contexts", contexts, "JSON lines {user_id, items}; default: split test contexts");
  decode->add_option("--topk", topk, "items per context");

  std::vector<std::string> manifests;
  std::string out_dir = "report";
  report->add_option("manifests", manifests, "manifest.json files or run directories")->required();
  report->add_option("-o,--out", out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (report->parsed()) {
      std::vector<fs::path> paths;
      for (const auto& m : manifests) paths.push_back(fs::is_directory(m) ? fs::path(m) / "manifest.json" : fs::path(m));
      std::cout << mhl::cmd_report(paths, out_dir);
      return 0;
    }

    const mhl::RunConfig cfg = resolve_config(common);
    const mhl::RunPaths paths = paths_for(common, cfg);
    std::cerr << "run directory: " << paths.dir.string() << "\n";
    const auto opt_path = [](const std::string& s) { return s.empty() ? std::nullopt : std::optional<fs::path>(s); };

    if (prepare->parsed()) {
      const auto r = mhl::cmd_prepare(cfg, paths);
      std::cout << "users=" << r.n_users << " items=" << r.n_items << " events=" << r.n_events
                << " train_only=" << r.n_train_only << " content_hash=" << r.content_hash << "\n";
    } else if (tokenize->parsed()) {
      const auto r = mhl::cmd_tokenize(cfg, paths);
      std::cout << "items=" << r.n_items << " distinct_ids=" << r.distinct_ids << " K=" << r.codebook_sizes.size()
                << "\n";
    } else if (train->parsed()) {
      const auto r = mhl::cmd_train(cfg, paths, resume);
      std::cout << "epochs=" << r.epochs << " best_epoch=" << r.best_epoch << " stop=" << r.stop_reason
                << " checkpoint=" << r.final_checkpoint.string() << "\n";
    } else if (evaluate->parsed()) {
      const auto r = mhl::cmd_evaluate(cfg, paths, opt_path(checkpoint),
                                       weights == "last" ? mhl::WeightChoice::kLast : mhl::WeightChoice::kBest);
      print_metrics(r.test);
      if (r.pilot) {
        print_metrics(r.pilot->full);
        print_metrics(r.pilot->truncated);
        std::cout << "pilot N@10 change: ";
        if (r.pilot->ndcg10_change_pct)
          std::cout << *r.pilot->ndcg10_change_pct << "%\n";
        else
          std::cout << "undefined\n";
      }
    } else if (decode->parsed()) {
      std::cout << mhl::cmd_decode(cfg, paths, opt_path(checkpoint), opt_path(contexts), topk).string() << "\n";
    }
    return 0;
  } catch (const mhl::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
