#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "csnet/checkpoint.hpp"
#include "csnet/complexity.hpp"
#include "csnet/data.hpp"
#include "csnet/metrics.hpp"
#include "csnet/model.hpp"
#include "csnet/optim.hpp"
#include "csnet/prune.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace csnet;

namespace {

struct DatasetArgs {
  int synth_n = 0;
  int synth_size = 64;
  std::string images_dir, masks_dir;

  void add_flags(CLI::App* cmd) {
    cmd->add_option("--synth", synth_n, "generate N synthetic samples");
    cmd->add_option("--size", synth_size, "synthetic image size");
    cmd->add_option("--images", images_dir, "image folder (ECSSD-style)");
    cmd->add_option("--masks", masks_dir, "mask folder matching --images by stem");
  }

  bool specified() const { return synth_n > 0 || !images_dir.empty(); }

  std::vector<SaliencySample> load(uint64_t seed) const {
    if (synth_n > 0) return synth_dataset(synth_n, synth_size, split_seed(seed, "synth"));
    if (!images_dir.empty()) {
      check_config(!masks_dir.empty(), "--masks is required with --images");
      LoadReport rep;
      auto data = load_folder(images_dir, masks_dir, &rep);
      for (const auto& s : rep.skipped) std::cerr << "skipped: " << s << "\n";
      check_config(!data.empty(), "dataset is empty: " + images_dir);
      return data;
    }
    throw config_error("no dataset: pass --synth N or --images/--masks");
  }

  json to_json() const {
    if (synth_n > 0) return {{"synth", synth_n}, {"size", synth_size}};
    return {{"images", images_dir}, {"masks", masks_dir}};
  }
};

std::pair<int, int> parse_split(const std::string& s) {
  auto pos = s.find('/');
  check_config(pos != std::string::npos, "--split expects H/L, e.g. 5/5");
  return {std::stoi(s.substr(0, pos)), std::stoi(s.substr(pos + 1))};
}

void write_manifest(const std::string& out_dir, const json& j) {
  fs::create_directories(out_dir);
  std::ofstream f(fs::path(out_dir) / "manifest.json");
  f << j.dump(2) << "\n";
}

json config_file_json(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream f(path);
  check_config(bool(f), "cannot open config file: " + path);
  return json::parse(f);
}

// file values act as defaults; explicitly passed flags win
template <typename T>
void maybe_from_file(const json& cfg, const char* key, const CLI::Option* opt, T& value) {
  if (cfg.contains(key) && opt->count() == 0) value = cfg.at(key).get<T>();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CSNet: salient object detection with gOctConvs, dynamic weight decay and channel pruning"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir = "out", split_str = "5/5";
  uint64_t seed = 7;
  double width_mult = 1.0;
  app.add_option("--config", config_path, "JSON config file (flags override it)");

  // ---- train
  auto* train_cmd = app.add_subcommand("train", "train CSNet with dynamic weight decay");
  DatasetArgs train_data;
  train_data.add_flags(train_cmd);
  TrainConfig tcfg;
  DecayPolicy policy;
  std::string lr_drops_str;
  auto* o_seed = train_cmd->add_option("--seed", seed, "root seed");
  auto* o_out = train_cmd->add_option("--out", out_dir, "output directory");
  auto* o_epochs = train_cmd->add_option("--epochs", tcfg.epochs, "training epochs");
  auto* o_batch = train_cmd->add_option("--batch", tcfg.batch_size, "batch size");
  auto* o_lr = train_cmd->add_option("--lr", tcfg.lr, "initial learning rate");
  auto* o_drops = train_cmd->add_option("--lr-drops", lr_drops_str, "comma list of /10 epochs");
  auto* o_lstd = train_cmd->add_option("--lambda-std", policy.lambda_std, "standard decay weight");
  auto* o_ldyn = train_cmd->add_option("--lambda-dyn", policy.lambda_dyn, "dynamic decay weight");
  bool no_dynamic = false;
  train_cmd->add_flag("--no-dynamic", no_dynamic, "standard decay on BN scales too");
  auto* o_lgs = train_cmd->add_option("--lambda-gamma-std", policy.lambda_gamma_std,
                                      "standard decay on BN scales when dynamic is off");
  bool gamma_std_unscaled = false;
  train_cmd->add_flag("--gamma-std-unscaled", gamma_std_unscaled,
                      "apply --lambda-gamma-std without lr coupling");
  bool no_augment = false;
  train_cmd->add_flag("--no-augment", no_augment, "disable flip/crop augmentation");
  auto* o_wm = train_cmd->add_option("--width-mult", width_mult, "channel width multiplier");
  auto* o_split = train_cmd->add_option("--split", split_str, "high/low channel ratio, e.g. 5/5");

  // ---- prune
  auto* prune_cmd = app.add_subcommand("prune", "eliminate redundant channels, then fine-tune");
  DatasetArgs prune_data;
  prune_data.add_flags(prune_cmd);
  std::string ckpt_path, criterion_str = "bn_gamma";
  double tau = 1e-6;
  int64_t target_params = 0;
  int finetune_epochs = -1;
  double finetune_lr = 0.0;
  prune_cmd->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
  prune_cmd->add_option("--criterion", criterion_str,
                        "bn_gamma | l1_norm | geometric_median");
  prune_cmd->add_option("--tau", tau, "importance threshold");
  prune_cmd->add_option("--target-params", target_params,
                        "prune to a parameter budget instead of a threshold");
  prune_cmd->add_option("--finetune-epochs", finetune_epochs, "fine-tune epochs after rebuild");
  prune_cmd->add_option("--finetune-lr", finetune_lr, "fine-tune learning rate");
  prune_cmd->add_option("--seed", seed, "root seed");
  prune_cmd->add_option("--out", out_dir, "output directory");
  prune_cmd->add_option("--lambda-std", policy.lambda_std, "standard decay weight");
  prune_cmd->add_option("--lambda-dyn", policy.lambda_dyn, "dynamic decay weight");
  prune_cmd->add_flag("--no-dynamic", no_dynamic, "standard decay on BN scales too");

  // ---- eval
  auto* eval_cmd = app.add_subcommand("eval", "compute max F-measure and MAE");
  DatasetArgs eval_data;
  eval_data.add_flags(eval_cmd);
  std::string eval_ckpt;
  bool dump_maps = false;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate")->required();
  eval_cmd->add_option("--seed", seed, "root seed (drives --synth)");
  eval_cmd->add_option("--out", out_dir, "output directory");
  eval_cmd->add_flag("--dump-maps", dump_maps, "write predicted maps as PGM");

  // ---- analyze
  auto* an_cmd = app.add_subcommand("analyze", "parameter / FLOP accounting");
  int input_size = 224;
  std::string sweep_axis;
  bool flops2x = false;
  auto* a_wm = an_cmd->add_option("--width-mult", width_mult, "channel width multiplier");
  auto* a_split = an_cmd->add_option("--split", split_str, "high/low channel ratio");
  an_cmd->add_option("--input-size", input_size, "square input size for FLOPs");
  an_cmd->add_option("--sweep", sweep_axis, "sweep axis: split | width");
  an_cmd->add_flag("--flops-2x", flops2x, "count FLOPs as 2xMACs");
  an_cmd->add_option("--out", out_dir, "output directory (writes complexity.json)");
  std::string an_ckpt;
  an_cmd->add_option("--checkpoint", an_ckpt, "analyze a checkpoint's architecture instead");

  // ---- bench
  auto* bench_cmd = app.add_subcommand("bench", "single-thread latency");
  std::string bench_ckpt;
  int repeats = 10, bench_size = 224;
  bench_cmd->add_option("--checkpoint", bench_ckpt, "checkpoint to time")->required();
  bench_cmd->add_option("--input-size", bench_size, "square input size");
  bench_cmd->add_option("--repeats", repeats, "timed runs after 2 warm-ups");
  bench_cmd->add_option("--out", out_dir, "output directory");

  try {
    app.parse(argc, argv);
    json file_cfg = config_file_json(config_path);

    if (*train_cmd) {
      maybe_from_file(file_cfg, "seed", o_seed, seed);
      maybe_from_file(file_cfg, "out", o_out, out_dir);
      maybe_from_file(file_cfg, "epochs", o_epochs, tcfg.epochs);
      maybe_from_file(file_cfg, "batch", o_batch, tcfg.batch_size);
      maybe_from_file(file_cfg, "lr", o_lr, tcfg.lr);
      maybe_from_file(file_cfg, "lambda_std", o_lstd, policy.lambda_std);
      maybe_from_file(file_cfg, "lambda_dyn", o_ldyn, policy.lambda_dyn);
      maybe_from_file(file_cfg, "lambda_gamma_std", o_lgs, policy.lambda_gamma_std);
      maybe_from_file(file_cfg, "width_mult", o_wm, width_mult);
      maybe_from_file(file_cfg, "split", o_split, split_str);
      std::string drops = lr_drops_str;
      if (o_drops->count() || file_cfg.contains("lr_drops")) {
        if (!o_drops->count()) drops = file_cfg.at("lr_drops").get<std::string>();
        tcfg.lr_drop_epochs.clear();
        std::stringstream ss(drops);
        std::string tok;
        while (std::getline(ss, tok, ','))
          if (!tok.empty()) tcfg.lr_drop_epochs.push_back(std::stoi(tok));
      } else {
        // default schedule scales with the requested epochs (2/3 and 5/6)
        tcfg.lr_drop_epochs = {tcfg.epochs * 2 / 3, tcfg.epochs * 5 / 6};
        if (tcfg.lr_drop_epochs[0] < 1 || tcfg.lr_drop_epochs[1] <= tcfg.lr_drop_epochs[0])
          tcfg.lr_drop_epochs.clear();
      }
      tcfg.seed = seed;
      tcfg.augment = !no_augment;
      policy.dynamic_enabled = !no_dynamic;
      policy.scale_gamma_std_by_lr = !gamma_std_unscaled;

      CSNetConfig mcfg;
      mcfg.width_multiplier = width_mult;
      mcfg.split = parse_split(split_str);
      auto data = train_data.load(seed);
      CSNetParams params = init_csnet(make_arch(mcfg), split_seed(seed, "init"));

      write_manifest(out_dir,
                     {{"command", "train"},
                      {"seed", seed},
                      {"dataset", train_data.to_json()},
                      {"model", csnet_config_to_json(mcfg)},
                      {"train",
                       {{"epochs", tcfg.epochs},
                        {"batch", tcfg.batch_size},
                        {"lr", tcfg.lr},
                        {"lr_drops", tcfg.lr_drop_epochs},
                        {"augment", tcfg.augment}}},
                      {"decay",
                       {{"lambda_std", policy.lambda_std},
                        {"lambda_dyn", policy.lambda_dyn},
                        {"dynamic", policy.dynamic_enabled},
                        {"lambda_gamma_std", policy.lambda_gamma_std},
                        {"scale_gamma_std_by_lr", policy.scale_gamma_std_by_lr},
                        {"metric", policy.metric_abs ? "abs_gap" : "gap"}}}});

      TrainOptions topts;
      topts.out_dir = out_dir;
      topts.verbose = true;
      TrainResult r = train(params, data, tcfg, policy, topts);
      save_checkpoint((fs::path(out_dir) / "checkpoint.ckpt").string(), params);
      std::cout << "final_loss " << r.final_loss << "\n";
      std::cout << "checkpoint " << (fs::path(out_dir) / "checkpoint.ckpt").string() << "\n";
      return 0;
    }

    if (*prune_cmd) {
      check_config(tau > 0, "--tau must be > 0");
      CSNetParams params = load_checkpoint(ckpt_path);
      PruneCriterion crit = criterion_from_string(criterion_str);
      auto data = prune_data.load(seed);
      policy.dynamic_enabled = !no_dynamic;

      auto scores = score_channels(params, crit);
      PruneMasks masks = target_params > 0
                             ? select_for_target_params(params, scores, target_params)
                             : select_prunable(scores, tau);
      auto [compact, report] = rebuild(params, masks);
      report.forced.insert(report.forced.end(), masks.forced.begin(), masks.forced.end());

      int ft_epochs = finetune_epochs >= 0 ? finetune_epochs : 20;
      write_manifest(out_dir, {{"command", "prune"},
                               {"seed", seed},
                               {"checkpoint", ckpt_path},
                               {"criterion", criterion_str},
                               {"tau", tau},
                               {"target_params", target_params},
                               {"finetune_epochs", ft_epochs},
                               {"dataset", prune_data.to_json()}});

      if (ft_epochs > 0) {
        TrainConfig ft;
        ft.batch_size = tcfg.batch_size;
        ft.epochs = ft_epochs;
        ft.lr = finetune_lr > 0 ? finetune_lr : 1e-5;
        ft.lr_drop_epochs.clear();
        ft.seed = split_seed(seed, "finetune");
        TrainOptions topts;
        topts.out_dir = (fs::path(out_dir) / "finetune").string();
        topts.verbose = true;
        train(compact, data, ft, policy, topts);
      }
      save_checkpoint((fs::path(out_dir) / "pruned.ckpt").string(), compact);
      {
        std::ofstream f(fs::path(out_dir) / "prune_report.json");
        f << prune_report_to_json(report).dump(2) << "\n";
        std::ofstream c(fs::path(out_dir) / "channels.csv");
        c << channels_csv(report);
      }
      std::cout << "params_before " << report.params_before << "\n";
      std::cout << "params_after " << report.params_after << "\n";
      std::cout << "prune_rate_params " << report.prune_rate_params() << "\n";
      return 0;
    }

    if (*eval_cmd) {
      CSNetParams params = load_checkpoint(eval_ckpt);
      auto data = eval_data.load(seed);
      MetricsReport rep = evaluate_model(params, data, /*quiet=*/false);
      write_manifest(out_dir, {{"command", "eval"},
                               {"seed", seed},
                               {"checkpoint", eval_ckpt},
                               {"dataset", eval_data.to_json()}});
      {
        std::ofstream f(fs::path(out_dir) / "metrics.json");
        f << metrics_to_json(rep).dump(2) << "\n";
      }
      if (dump_maps) {
        NoGradGuard ng;
        fs::create_directories(fs::path(out_dir) / "maps");
        for (size_t i = 0; i < data.size(); ++i) {
          Array img = data[i].image.data();
          Tensor in = Tensor::from_array({1, 3, data[i].image.dim(1), data[i].image.dim(2)},
                                         std::move(img));
          Tensor prob = probability_map(csnet_forward(params, in, false).logits);
          ImageBuf buf;
          buf.channels = 1;
          buf.height = prob.dim(2);
          buf.width = prob.dim(3);
          buf.data.assign(prob.ptr(), prob.ptr() + prob.numel());
          char name[32];
          std::snprintf(name, sizeof name, "map_%04zu.pgm", i);
          save_pgm((fs::path(out_dir) / "maps" / name).string(), buf);
        }
      }
      std::cout << "f_beta_max " << rep.max_f_beta << "\n";
      std::cout << "mae " << rep.mae << "\n";
      return 0;
    }

    if (*an_cmd) {
      CSNetConfig mcfg;
      maybe_from_file(file_cfg, "width_mult", a_wm, width_mult);
      maybe_from_file(file_cfg, "split", a_split, split_str);
      mcfg.width_multiplier = width_mult;
      mcfg.split = parse_split(split_str);
      json out_json;
      std::string table;
      if (!an_ckpt.empty()) {
        CSNetParams params = load_checkpoint(an_ckpt);
        auto rep = count_complexity(params.arch, input_size, input_size, flops2x);
        table = complexity_table(rep);
        out_json = complexity_to_json(rep);
      } else if (!sweep_axis.empty()) {
        auto rows = sweep(mcfg, sweep_axis, input_size, flops2x);
        table = sweep_table(rows, sweep_axis == "split");
        out_json = sweep_to_json(rows);
      } else {
        auto rep = count_complexity(make_arch(mcfg), input_size, input_size, flops2x);
        table = complexity_table(rep);
        out_json = complexity_to_json(rep);
      }
      std::cout << table;
      if (an_cmd->count("--out")) {
        fs::create_directories(out_dir);
        std::ofstream f(fs::path(out_dir) / "complexity.json");
        f << out_json.dump(2) << "\n";
      }
      return 0;
    }

    if (*bench_cmd) {
      check_config(repeats >= 3, "--repeats must be >= 3");
      CSNetParams params = load_checkpoint(bench_ckpt);
      check_config(bench_size % ModelArch::total_stride == 0,
                   "--input-size must be divisible by 32");
      NoGradGuard ng;
      Rng rng(1);
      Tensor img = Tensor::randn({1, 3, bench_size, bench_size}, rng, 0.3);
      for (int i = 0; i < 2; ++i) csnet_forward(params, img, false);
      std::vector<double> ms;
      for (int i = 0; i < repeats; ++i) {
        auto t0 = std::chrono::steady_clock::now();
        csnet_forward(params, img, false);
        auto t1 = std::chrono::steady_clock::now();
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      }
      std::vector<double> sorted = ms;
      std::sort(sorted.begin(), sorted.end());
      double mn = sorted.front();
      double med = sorted[sorted.size() / 2];
      double mean = 0;
      for (double v : ms) mean += v;
      mean /= double(ms.size());
      json j = {{"min_ms", mn},      {"median_ms", med}, {"mean_ms", mean},
                {"input", bench_size}, {"threads", 1},     {"samples_ms", ms}};
      std::cout << j.dump(2) << "\n";
      if (bench_cmd->count("--out")) {
        fs::create_directories(out_dir);
        std::ofstream f(fs::path(out_dir) / "bench.json");
        f << j.dump(2) << "\n";
      }
      return 0;
    }
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const numeric_error& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
