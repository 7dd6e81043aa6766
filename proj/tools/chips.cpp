// chips: score, select and verify data for target-domain continued pretraining.
//
// Exit codes: 0 success, 1 a verify check failed, 2 usage error, 3-19 one per error class
// (see chips/errors.hpp), 70 unexpected internal error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "chips/config.hpp"
#include "chips/errors.hpp"
#include "chips/flops.hpp"
#include "chips/io.hpp"
#include "chips/pipeline.hpp"
#include "chips/verify.hpp"

namespace fs = std::filesystem;
using namespace chips;

namespace {

constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitInternal = 70;

struct Overrides {
  std::optional<std::string> method;
  std::optional<std::string> ablation;
  std::optional<std::uint64_t> seed;
  std::optional<double> retention;
};

RunConfig resolve_config(const std::string& path, const Overrides& ov) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
  if (ov.method) cfg.method = parse_method(*ov.method);
  if (ov.ablation) cfg.ablation = parse_ablation(*ov.ablation);
  if (ov.seed) cfg.seed = *ov.seed;
  if (ov.retention) cfg.retention = *ov.retention;
  validate(cfg);
  return cfg;
}

std::vector<fs::path> to_paths(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

void print_flops(const flops::CostModel& m, bool json) {
  const auto tr = flops::primitives(m, m.b_train);
  const auto ev = flops::primitives(m, m.b_eval);
  const std::pair<const char*, std::pair<flops::u128, flops::u128>> rows[] = {
      {"C_lin", {tr.lin, ev.lin}}, {"C_norm", {tr.norm, ev.norm}}, {"C_mm", {tr.mm, ev.mm}},
      {"C_fwd", {tr.fwd, ev.fwd}}, {"C_bwd", {tr.bwd, ev.bwd}},    {"C_fb", {tr.fb, ev.fb}},
      {"C_jvp", {tr.jvp, ev.jvp}}};
  const flops::Method methods[] = {flops::Method::TracIn, flops::Method::Trak, flops::Method::Chips};
  if (json) {
    nlohmann::json j;
    for (const auto& [name, v] : rows) j["primitives"][name] = {{"train", flops::to_string(v.first)}, {"eval", flops::to_string(v.second)}};
    j["primitives"]["C_proto_eval"] = flops::to_string(flops::proto_eval(m));
    for (auto meth : methods) {
      const auto b = flops::method_breakdown(m, meth);
      j["totals"][std::string(flops::to_string(meth))] = {
          {"total", flops::to_string(b.total)}, {"eval", flops::to_string(b.eval)},     {"proto", flops::to_string(b.proto)},
          {"train", flops::to_string(b.train)}, {"neg", flops::to_string(b.neg)},       {"margin", flops::to_string(b.margin)},
          {"rel", flops::to_string(b.rel)},     {"printed", flops::format_sig(b.total, 7)}};
    }
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::printf("%-14s %22s %22s\n", "quantity", "B_train", "B_eval");
  for (const auto& [name, v] : rows)
    std::printf("%-14s %22s %22s\n", name, flops::to_string(v.first).c_str(), flops::to_string(v.second).c_str());
  std::printf("%-14s %45s\n", "C_proto_eval", flops::to_string(flops::proto_eval(m)).c_str());
  std::printf("\n%-8s %24s %14s\n", "method", "total FLOPs", "printed");
  for (auto meth : methods) {
    const auto t = flops::method_total(m, meth);
    std::printf("%-8s %24s %14s\n", std::string(flops::to_string(meth)).c_str(), flops::to_string(t).c_str(),
                flops::format_sig(t, 7).c_str());
  }
}

flops::SketchCost parse_sketch_cost(const std::string& s) {
  if (s == "countsketch") return flops::SketchCost::CountSketch;
  if (s == "sparse-signed") return flops::SketchCost::SparseSigned;
  if (s == "srht") return flops::SketchCost::Srht;
  if (s == "dense-gaussian") return flops::SketchCost::DenseGaussian;
  throw ConfigError("unknown sketch cost model '" + s + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Curvature-aware data selection for target-domain continued pretraining"};
  app.require_subcommand(1, 1);

  std::string config_path;
  Overrides ov;
  std::size_t workers = pipeline::default_workers();

  // synth
  auto* synth = app.add_subcommand("synth", "Generate clustered synthetic shards, params and a checkpoint trajectory");
  pipeline::SynthOptions so;
  std::string synth_out;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", so.seed, "Seed");
  synth->add_option("--pool-size", so.pool, "Pool samples")->capture_default_str();
  synth->add_option("--eval-size", so.eval, "Evaluation samples (target cluster)")->capture_default_str();
  synth->add_option("--target-rate", so.target_rate, "Pool fraction from the target cluster")->capture_default_str();
  synth->add_option("--checkpoints", so.checkpoints, "Checkpoints in the trajectory")->capture_default_str();

  // score
  auto* score = app.add_subcommand("score", "Score every pool sample");
  std::vector<std::string> pool, eval;
  std::string params, checkpoints, score_out;
  score->add_option("--config", config_path, "Run config (JSON)");
  score->add_option("--pool", pool, "Pool shards")->required();
  score->add_option("--eval", eval, "Evaluation shards, one per task");
  score->add_option("--params", params, "End-point checkpoint (CHEP)");
  score->add_option("--checkpoints", checkpoints, "Checkpoint trajectory (CHTJ), TracIn only");
  score->add_option("--out", score_out, "Score file (.csv text, .chsc binary)")->required();
  score->add_option("--method", ov.method, "chips|dot|tracin|trak|clipscore|random|concept-filter|concept-balance");
  score->add_option("--ablation", ov.ablation, "full|alignment-only|alignment-margin");
  score->add_option("--seed", ov.seed, "Seed override");
  score->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);

  // select
  auto* select_cmd = app.add_subcommand("select", "Retain the top floor(r * |pool|) samples");
  std::string scores_in, select_out;
  std::optional<double> retention;
  select_cmd->add_option("--scores", scores_in, "Score file")->required();
  select_cmd->add_option("--config", config_path, "Run config; its retention grid is used without --retention");
  select_cmd->add_option("--retention", retention, "Retention ratio r in (0, 1]");
  select_cmd->add_option("--out", select_out, "Manifest file with --retention, else a directory")->required();

  // verify
  auto* verify_cmd = app.add_subcommand("verify", "Run synthetic verification checks; one JSON line per check");
  std::vector<std::string> checks;
  verify::CheckOptions vo;
  std::string work_dir;
  verify_cmd->add_option("--check", checks, "Check names (default: all)");
  verify_cmd->add_option("--seed", vo.seed, "Seed");
  verify_cmd->add_option("--workers", vo.workers, "Worker threads")->check(CLI::PositiveNumber);
  verify_cmd->add_option("--work-dir", work_dir, "Scratch directory");
  bool list_checks = false;
  verify_cmd->add_flag("--list", list_checks, "List check names");

  // flops
  auto* fl = app.add_subcommand("flops", "FLOPs primitives and per-method totals");
  flops::CostModel cm;
  std::string sketch_cost = "countsketch";
  bool flops_json = false;
  fl->add_option("--b-train", cm.b_train)->capture_default_str();
  fl->add_option("--b-eval", cm.b_eval)->capture_default_str();
  fl->add_option("--n-train", cm.n_train_samples)->capture_default_str();
  fl->add_option("--n-eval", cm.n_eval_samples)->capture_default_str();
  fl->add_option("--d-v", cm.d_v)->capture_default_str();
  fl->add_option("--d-t", cm.d_t)->capture_default_str();
  fl->add_option("--d", cm.d)->capture_default_str();
  fl->add_option("--k", cm.k)->capture_default_str();
  fl->add_option("--epochs", cm.epochs, "TracIn epochs E")->capture_default_str();
  fl->add_option("--cg-iters", cm.cg_iters, "CG iterations I")->capture_default_str();
  fl->add_option("--c-neg", cm.c_neg)->capture_default_str();
  fl->add_option("--sparsity", cm.sparsity)->capture_default_str();
  fl->add_option("--sketch", sketch_cost, "countsketch|sparse-signed|srht|dense-gaussian")->capture_default_str();
  fl->add_flag("--json", flops_json);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*synth) {
      const auto out = pipeline::run_synth(so, synth_out);
      std::cerr << "[chips] wrote " << out.pool << ", " << out.eval << ", " << out.params << ", " << out.trajectory
                << '\n';
      return 0;
    }
    if (*score) {
      const RunConfig cfg = resolve_config(config_path, ov);
      pipeline::ScoreInputs in;
      in.pool = to_paths(pool);
      in.eval = to_paths(eval);
      if (!params.empty()) in.params = params;
      if (!checkpoints.empty()) in.checkpoints = checkpoints;
      const auto res = pipeline::run_score(cfg, in, workers, &std::cerr);
      pipeline::save_score_result(res, score_out);
      std::cerr << "[chips] scored " << res.scores.records.size() << " samples -> " << score_out << '\n';
      return 0;
    }
    if (*select_cmd) {
      std::vector<double> rs;
      if (retention) {
        rs = {*retention};
      } else {
        rs = resolve_config(config_path, ov).retention_grid;
      }
      for (const auto& p : pipeline::run_select_files(scores_in, rs, select_out, retention.has_value()))
        std::cerr << "[chips] wrote " << p << '\n';
      return 0;
    }
    if (*verify_cmd) {
      if (list_checks) {
        for (const auto& c : verify::registry()) std::cout << c.name << '\n';
        return 0;
      }
      if (!work_dir.empty()) vo.work_dir = work_dir;
      if (checks.empty())
        for (const auto& c : verify::registry()) checks.emplace_back(c.name);
      bool all = true;
      for (const auto& name : checks) {
        const auto r = verify::run_check(name, vo);
        std::cout << r.to_json().dump() << std::endl;
        all = all && r.pass;
      }
      return all ? 0 : kExitCheckFailed;
    }
    if (*fl) {
      cm.sketch = parse_sketch_cost(sketch_cost);
      cm.validate();
      print_flops(cm, flops_json);
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitUsage;
}
