#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "csnet/checkpoint.hpp"
#include "csnet/data.hpp"
#include "csnet/prune.hpp"
#include "helpers.hpp"

using namespace csnet;
using namespace csnet::testing;
namespace fs = std::filesystem;

#ifndef CSNET_CLI_PATH
#define CSNET_CLI_PATH "csnet"
#endif

namespace {

CSNetConfig tiny_config() {
  CSNetConfig cfg;
  cfg.stage_widths = {8, 8, 8, 8};
  cfg.csf_channels = 8;
  cfg.csf_out_channels = 8;
  return cfg;
}

int run_cli(const std::string& args, std::string* out = nullptr) {
  fs::path log = fs::temp_directory_path() / "csnet_cli_out.txt";
  std::string cmd = std::string(CSNET_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  int rc = std::system(cmd.c_str());
  if (out) {
    std::ifstream f(log);
    std::stringstream ss;
    ss << f.rdbuf();
    *out = ss.str();
  }
  return WEXITSTATUS(rc);
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("checkpoint round-trips bit-exactly, including running statistics") {
  CSNetParams p = init_csnet(make_arch(tiny_config()), 99);
  // make the buffers nontrivial
  Rng rng(3);
  for (auto* a : all_bn_layers(p)) {
    for (int64_t i = 0; i < a->bn.running_mean.size(); ++i) {
      a->bn.running_mean[i] = rng.normal();
      a->bn.running_var[i] = std::abs(rng.normal()) + 0.1;
    }
  }
  fs::path dir = fresh_dir("csnet_test_ckpt");
  std::string path = (dir / "m.ckpt").string();
  save_checkpoint(path, p);
  CSNetParams q = load_checkpoint(path);

  auto pn = named_params(p), qn = named_params(q);
  REQUIRE(pn.size() == qn.size());
  for (size_t i = 0; i < pn.size(); ++i) {
    CHECK(pn[i].name == qn[i].name);
    CHECK((pn[i].tensor.data() == qn[i].tensor.data()).all());
  }
  auto pb = named_buffers(p), qb = named_buffers(q);
  for (size_t i = 0; i < pb.size(); ++i) CHECK((*pb[i].second == *qb[i].second).all());

  // identical outputs
  Rng r2(5);
  Tensor img = rand_tensor({1, 3, 64, 64}, r2, 0.3);
  Tensor a = csnet_forward(p, img, false).logits;
  Tensor b = csnet_forward(q, img, false).logits;
  CHECK((a.data() == b.data()).all());

  CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), config_error);
  {
    std::ofstream junk(dir / "junk.ckpt", std::ios::binary);
    junk << "not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint((dir / "junk.ckpt").string()), config_error);
}

TEST_CASE("checkpoint of a pruned (irregular) architecture restores correctly") {
  CSNetParams p = init_csnet(make_arch(tiny_config()), 7);
  auto scores = score_channels(p, PruneCriterion::l1_norm);
  auto masks = select_top_fraction(scores, 0.55);
  auto [compact, rep] = rebuild(p, masks);
  fs::path dir = fresh_dir("csnet_test_ckpt2");
  save_checkpoint((dir / "c.ckpt").string(), compact);
  CSNetParams q = load_checkpoint((dir / "c.ckpt").string());
  CHECK(arch_to_json(q.arch) == arch_to_json(compact.arch));
  CHECK(count_params_actual(q) == rep.params_after);
}

TEST_CASE("cli: usage errors exit 1") {
  std::string out;
  CHECK(run_cli("train --epochs 1", &out) == 1);  // no dataset
  CHECK(run_cli("bogus", &out) == 1);
  CHECK(run_cli("eval --checkpoint /nonexistent.ckpt --synth 2 --size 64", &out) == 1);
  CHECK(run_cli("prune --checkpoint /nonexistent.ckpt --synth 2", &out) == 1);
}

TEST_CASE("cli: train, re-train determinism, eval, prune, analyze, bench") {
  fs::path d1 = fresh_dir("csnet_cli_t1");
  fs::path d2 = fresh_dir("csnet_cli_t2");
  // tiny widths via config file; flags override the epochs
  fs::path cfgfile = fs::temp_directory_path() / "csnet_cli_cfg.json";
  {
    std::ofstream f(cfgfile);
    f << R"({"epochs": 99})";
  }
  std::string base = "--synth 10 --size 64 --batch 5 --epochs 2 --lr 1e-3 --seed 7 ";
  std::string out1, out2;
  REQUIRE(run_cli("train --config " + cfgfile.string() + " " + base + "--out " + d1.string(),
                  &out1) == 0);
  REQUIRE(run_cli("train " + base + "--out " + d2.string(), &out2) == 0);
  CHECK(fs::exists(d1 / "checkpoint.ckpt"));
  CHECK(fs::exists(d1 / "train_log.csv"));
  CHECK(fs::exists(d1 / "manifest.json"));
  CHECK(fs::exists(d1 / "gamma_hist" / "epoch_0002.json"));

  // same config twice: identical final loss lines
  auto final_loss = [](const std::string& s) {
    auto pos = s.find("final_loss");
    return s.substr(pos, s.find('\n', pos) - pos);
  };
  CHECK(final_loss(out1) == final_loss(out2));

  // identical train logs
  std::ifstream l1(d1 / "train_log.csv"), l2(d2 / "train_log.csv");
  std::stringstream s1, s2;
  s1 << l1.rdbuf();
  s2 << l2.rdbuf();
  CHECK(s1.str() == s2.str());

  // eval on the same synthetic split
  fs::path de = fresh_dir("csnet_cli_eval");
  std::string eo;
  REQUIRE(run_cli("eval --checkpoint " + (d1 / "checkpoint.ckpt").string() +
                      " --synth 10 --size 64 --seed 7 --out " + de.string(),
                  &eo) == 0);
  CHECK(fs::exists(de / "metrics.json"));
  {
    std::ifstream f(de / "metrics.json");
    nlohmann::json j = nlohmann::json::parse(f);
    CHECK(j.contains("f_beta_max"));
    CHECK(j.contains("mae"));
    CHECK(j["curve"]["precision"].size() == 256);
  }

  // prune with the geometric_median criterion: same report schema
  fs::path dp = fresh_dir("csnet_cli_prune");
  std::string po;
  REQUIRE(run_cli("prune --checkpoint " + (d1 / "checkpoint.ckpt").string() +
                      " --criterion geometric_median --target-params 150000 --synth 10 --size 64"
                      " --seed 7 --finetune-epochs 1 --out " +
                      dp.string(),
                  &po) == 0);
  CHECK(fs::exists(dp / "pruned.ckpt"));
  CHECK(fs::exists(dp / "prune_report.json"));
  CHECK(fs::exists(dp / "channels.csv"));
  {
    std::ifstream f(dp / "prune_report.json");
    nlohmann::json j = nlohmann::json::parse(f);
    CHECK(j["params_after"].get<int64_t>() < j["params_before"].get<int64_t>());
    CHECK(j.contains("prune_rate_params"));
  }

  // tau <= 0 is a usage error
  std::string to;
  CHECK(run_cli("prune --checkpoint " + (d1 / "checkpoint.ckpt").string() +
                    " --tau 0 --synth 4 --out " + dp.string(),
                &to) == 1);

  // analyze: canonical params within 20% of 211K; 448 gives 4x the MACs
  std::string ao;
  fs::path da = fresh_dir("csnet_cli_an");
  REQUIRE(run_cli("analyze --input-size 224 --out " + da.string(), &ao) == 0);
  {
    std::ifstream f(da / "complexity.json");
    nlohmann::json j = nlohmann::json::parse(f);
    double params = j["params_total"].get<double>();
    CHECK(params > 211000 * 0.8);
    CHECK(params < 211000 * 1.2);
    int64_t macs224 = j["macs_total"].get<int64_t>();
    REQUIRE(run_cli("analyze --input-size 448 --out " + da.string(), &ao) == 0);
    std::ifstream f2(da / "complexity.json");
    nlohmann::json j2 = nlohmann::json::parse(f2);
    CHECK(j2["macs_total"].get<int64_t>() == 4 * macs224);
    CHECK(j2["params_total"].get<double>() == params);
  }
  REQUIRE(run_cli("analyze --sweep split --out " + da.string(), &ao) == 0);
  {
    std::ifstream f(da / "complexity.json");
    nlohmann::json j = nlohmann::json::parse(f);
    REQUIRE(j.size() == 5);
    for (size_t i = 1; i < 5; ++i)
      CHECK(j[i]["flops_total"].get<int64_t>() < j[i - 1]["flops_total"].get<int64_t>());
  }

  // bench: fixed JSON schema, 5 samples
  std::string bo;
  fs::path db = fresh_dir("csnet_cli_bench");
  REQUIRE(run_cli("bench --checkpoint " + (d1 / "checkpoint.ckpt").string() +
                      " --input-size 64 --repeats 5 --out " + db.string(),
                  &bo) == 0);
  {
    std::ifstream f(db / "bench.json");
    nlohmann::json j = nlohmann::json::parse(f);
    CHECK(j.contains("min_ms"));
    CHECK(j.contains("median_ms"));
    CHECK(j.contains("mean_ms"));
    CHECK(j["threads"] == 1);
    CHECK(j["input"] == 64);
    CHECK(j["samples_ms"].size() == 5);
  }
  CHECK(run_cli("bench --checkpoint " + (d1 / "checkpoint.ckpt").string() + " --repeats 2",
                &bo) == 1);
}

TEST_CASE("cli: pruned model benches at or below the unpruned median") {
  // train briefly at x1, prune hard to ~45% params, compare medians
  fs::path dt = fresh_dir("csnet_cli_bt");
  std::string out;
  REQUIRE(run_cli("train --synth 6 --size 64 --batch 3 --epochs 1 --seed 3 --out " + dt.string(),
                  &out) == 0);
  fs::path dp = fresh_dir("csnet_cli_bp");
  REQUIRE(run_cli("prune --checkpoint " + (dt / "checkpoint.ckpt").string() +
                      " --criterion l1_norm --target-params 90000 --synth 6 --size 64"
                      " --finetune-epochs 0 --seed 3 --out " +
                      dp.string(),
                  &out) == 0);
  fs::path db = fresh_dir("csnet_cli_bb");
  std::string b1, b2;
  REQUIRE(run_cli("bench --checkpoint " + (dt / "checkpoint.ckpt").string() +
                      " --input-size 224 --repeats 7 --out " + db.string(),
                  &b1) == 0);
  double full_median = nlohmann::json::parse(b1)["median_ms"].get<double>();
  REQUIRE(run_cli("bench --checkpoint " + (dp / "pruned.ckpt").string() +
                      " --input-size 224 --repeats 7 --out " + db.string(),
                  &b2) == 0);
  double pruned_median = nlohmann::json::parse(b2)["median_ms"].get<double>();
  CHECK(pruned_median <= full_median);
}
