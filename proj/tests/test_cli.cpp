#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <sstream>

#include "cli.hpp"
#include "xdk/byte_io.hpp"
#include "xdk/train.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result call(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = xdk::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  const auto bytes = xdk::read_file(p.string());
  return std::string(bytes.begin(), bytes.end());
}

// A small corpus and base model shared by the workflow tests.
struct Workspace {
  fs::path root = fs::temp_directory_path() / "xdk_test_cli";
  std::string corpus() const { return (root / "corpus").string(); }
  std::string base() const { return (root / "base" / "model.ckpt").string(); }

  Workspace() {
    fs::remove_all(root);
    auto r = call({"synth-corpus", "--out", corpus(), "--canonical", "2", "--perturbed", "2", "--utts", "20",
                   "--perturbed-utts", "20"});
    REQUIRE(r.code == 0);
    r = call({"pretrain", "--manifest", corpus() + "/canonical.tsv", "--out", (root / "base").string(), "--steps",
              "20", "--eval-every", "10", "--lstm-cells", "16", "--layers", "2", "--d-model", "16"});
    REQUIRE(r.code == 0);
  }
  ~Workspace() { fs::remove_all(root); }
};

}  // namespace

TEST_CASE("every command prints help and exits 0") {
  for (const char* cmd : {"synth-corpus", "pretrain", "adapt", "eval", "sweep", "export-bundle", "import-bundle",
                          "report"}) {
    CAPTURE(cmd);
    const auto r = call({cmd, "--help"});
    CHECK(r.code == 0);
    CHECK(r.out.find("Usage") != std::string::npos);
  }
  const auto adapt = call({"adapt", "--help"});
  CHECK(adapt.out.find("--lr FLOAT [0.001]") != std::string::npos);
  CHECK(adapt.out.find("--mode TEXT [adapters]") != std::string::npos);
}

TEST_CASE("usage errors exit 1") {
  CHECK(call({}).code == 1);
  CHECK(call({"frobnicate"}).code == 1);
  const auto missing = call({"eval", "--manifest", "m.tsv"});
  CHECK(missing.code == 1);
  CHECK(missing.err.find("--model") != std::string::npos);
  CHECK(call({"export-bundle", "--model", "a", "--out", "b", "--bogus", "1"}).code == 1);
  const auto absent = call({"export-bundle", "--model", "/nonexistent/a.ckpt", "--out", "b"});
  CHECK(absent.code == 1);
  CHECK(absent.err.find("/nonexistent/a.ckpt") != std::string::npos);
}

TEST_CASE("workflow: adapt, evaluate, bundle round trip, report") {
  Workspace ws;
  const auto spk = ws.corpus() + "/pert-00.tsv";
  const auto ad = (ws.root / "ad").string();
  auto r = call({"adapt", "--base", ws.base(), "--manifest", spk, "--out", ad, "--steps", "10", "--eval-every", "5",
                 "--d-b", "4", "--lr", "1e-2"});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(ws.root / "ad" / "adapters.xdab"));
  CHECK(fs::exists(ws.root / "ad" / "best.txt"));
  CHECK(r.out.find("adapters:") != std::string::npos);

  const auto imported = (ws.root / "imported.ckpt").string();
  REQUIRE(call({"import-bundle", "--base", ws.base(), "--bundle", ad + "/adapters.xdab", "--out", imported}).code == 0);
  CHECK(slurp(imported) == slurp(ad + "/model.ckpt"));
  const auto exported = (ws.root / "again.xdab").string();
  REQUIRE(call({"export-bundle", "--model", imported, "--out", exported}).code == 0);
  CHECK(slurp(exported) == slurp(ad + "/adapters.xdab"));

  const auto ev = [&](const std::string& name, std::vector<std::string> extra) {
    std::vector<std::string> args{"eval", "--manifest", spk, "--out", (ws.root / name).string()};
    args.insert(args.end(), extra.begin(), extra.end());
    const auto res = call(args);
    REQUIRE(res.code == 0);
    return (ws.root / name / "report.json").string();
  };
  const auto un = ev("ev_un", {"--model", ws.base()});
  const auto adr = ev("ev_ad", {"--model", ad + "/model.ckpt"});
  const auto viab = ev("ev_bundle", {"--model", ws.base(), "--bundle", ad + "/adapters.xdab"});
  CHECK(slurp(adr) == slurp(viab));

  r = call({"adapt", "--base", ws.base(), "--manifest", spk, "--out", (ws.root / "ft").string(), "--mode",
            "finetune-enc", "--steps", "10", "--eval-every", "5"});
  REQUIRE(r.code == 0);
  CHECK(!fs::exists(ws.root / "ft" / "adapters.xdab"));
  // A bundle for a different base is a user error.
  REQUIRE(call({"pretrain", "--manifest", ws.corpus() + "/canonical.tsv", "--out", (ws.root / "other").string(),
                "--steps", "2", "--eval-every", "2", "--lstm-cells", "16", "--layers", "2", "--d-model", "16",
                "--seed", "1"})
              .code == 0);
  const auto wrong = call({"import-bundle", "--base", (ws.root / "other" / "model.ckpt").string(), "--bundle",
                           exported, "--out", imported});
  CHECK(wrong.code == 1);
  CHECK(wrong.err.find("base model") != std::string::npos);
  const auto ft = ev("ev_ft", {"--model", (ws.root / "ft" / "model.ckpt").string()});

  r = call({"report", "--unadapted", un, "--adapted", adr, "--finetuned", ft, "--out", (ws.root / "rep").string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("pert-00: unadapted") != std::string::npos);
  CHECK(r.out.find("gamma of aggregated WERs") != std::string::npos);
  CHECK(fs::exists(ws.root / "rep" / "report.txt"));
  CHECK(call({"report", "--unadapted", un, "--adapted", adr, "--aggregation", "max"}).code == 1);
}

TEST_CASE("config file sits between flags and defaults") {
  Workspace ws;
  const auto cfg = ws.root / "c.toml";
  xdk::write_file(cfg.string(), [] {
    const std::string t = "[adapt]\nsteps=4\nbatch=2\neval-every=2\nlr=0.5\n";
    return std::vector<std::uint8_t>(t.begin(), t.end());
  }());
  const auto out = ws.root / "run";
  const auto r = call({"adapt", "--config", cfg.string(), "--base", ws.base(), "--manifest",
                       ws.corpus() + "/pert-01.tsv", "--out", out.string(), "--lr", "0"});
  REQUIRE(r.code == 0);
  const auto echo = slurp(out / "config.toml");
  CHECK(echo.find("steps=4\n") != std::string::npos);
  CHECK(echo.find("batch=2\n") != std::string::npos);
  CHECK(echo.find("lr=0\n") != std::string::npos);
  CHECK(echo.find("log-every=10\n") != std::string::npos);
  const auto record = xdk::parse_run_record(slurp(out / "record.json"));
  CHECK(record.steps == 4);

  // The echo alone reproduces the run.
  const auto again = ws.root / "again";
  REQUIRE(call({"--config", (out / "config.toml").string(), "adapt", "--out", again.string()}).code == 0);
  CHECK(slurp(again / "model.ckpt") == slurp(out / "model.ckpt"));
  CHECK(slurp(again / "steps.log") == slurp(out / "steps.log"));
}

TEST_CASE("sweep writes one row per grid cell") {
  Workspace ws;
  const auto out = ws.root / "sweep";
  const auto r = call({"sweep", "--base", ws.base(), "--manifest", ws.corpus() + "/pert-00.tsv", "--out",
                       out.string(), "--lrs", "1e-3,1e-2", "--d-bs", "2,4", "--steps", "4", "--eval-every", "2",
                       "--jobs", "2"});
  REQUIRE(r.code == 0);
  const auto table = slurp(out / "sweep.tsv");
  CHECK(std::count(table.begin(), table.end(), '\n') == 5);
  CHECK(fs::exists(out / "lr0.01-db4" / "record.json"));
  CHECK(r.out.find("best: lr") != std::string::npos);
}
