// End-to-end exercise of the mpflow driver binary on a miniature run:
// every subcommand in order, artifact layout, exit-code contract,
// overwrite refusal, and bit-identical reruns from the same seed.
//
// Deliberately flat: one pass through the expensive chain per output
// directory, assertions interleaved in dependency order.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "mpflow_cli_pipeline";

int run_cli(const std::string& args) {
    const std::string cmd =
        std::string(MPFLOW_BIN) + " " + args + " >> " + (kRoot / "cli.log").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::string(std::istreambuf_iterator<char>(f), {});
}

void write_config(const fs::path& path, const fs::path& out_dir) {
    std::ofstream f(path);
    f << "seed = 11\n";
    f << "out_dir = " << out_dir.string() << "\n";
    f << "data.h = 32\ndata.w = 32\n";
    f << "data.n = 6\ndata.test_n = 2\n";
    f << "data.pamri_n = 12\ndata.pamri_canvas = 40\n";
    f << "task = sr\ndegrade.factor = 4\ndegrade.noise_sigma = 0.01\n";
    f << "prior.width = 6\nprior.iterations = 25\nprior.batch = 4\n";
    f << "pamri.patch = 32\npamri.batch = 4\npamri.iterations = 8\n";
    f << "pamri.embed = 16\npamri.eval_every = 4\n";
    f << "guide.steps = 5\nguide.candidates = 2\nguide.t_noise_frac = 0.2\n";
    f << "guide.alpha0 = 0.5\nguide.lambda_p = 0.05\n";
    f << "recon.arms = full,unguided\n";
    f << "eval.panels = true\n";
    REQUIRE(f.good());
}

void run_chain(const fs::path& cfg) {
    CHECK(run_cli("gen-data --config " + cfg.string()) == 0);
    CHECK(run_cli("train-prior --config " + cfg.string()) == 0);
    CHECK(run_cli("pretrain-pamri --config " + cfg.string()) == 0);
    CHECK(run_cli("reconstruct --config " + cfg.string()) == 0);
    CHECK(run_cli("evaluate --config " + cfg.string()) == 0);
}

}  // namespace

TEST_CASE("cli: full pipeline, artifacts, determinism") {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);

    const fs::path cfg_a = kRoot / "a.cfg", out_a = kRoot / "run_a";
    const fs::path cfg_b = kRoot / "b.cfg", out_b = kRoot / "run_b";
    write_config(cfg_a, out_a);
    write_config(cfg_b, out_b);

    run_chain(cfg_a);

    // artifact layout
    for (const char* rel :
         {"config/gen-data.cfg", "config/train-prior.cfg", "config/pretrain-pamri.cfg",
          "config/reconstruct.cfg", "config/evaluate.cfg", "data/train/manifest.csv",
          "data/test/manifest.csv", "data/pamri/manifest.csv", "data/train/target_000.mpimg",
          "data/train/aux_000.mpimg", "data/train/mask_000.mpimg", "prior/prior.mpfw",
          "prior/train_log.csv", "pamri/encoders.mpfw", "pamri/decoders.mpfw",
          "pamri/train_log.csv", "recon/full/recon_000.mpimg", "recon/full/recon_001.mpimg",
          "recon/full/recon_manifest.csv", "recon/full/diag_000.csv",
          "recon/unguided/recon_000.mpimg", "metrics/full.csv", "metrics/unguided.csv",
          "metrics/summary.txt", "panels/full/panel_000.pgm"}) {
        CAPTURE(rel);
        CHECK(fs::exists(out_a / rel));
    }
    const std::string summary = slurp(out_a / "metrics" / "summary.txt");
    CHECK(summary.find("full") != std::string::npos);
    CHECK(summary.find("unguided") != std::string::npos);
    CHECK(summary.find("ssim") != std::string::npos);

    // resolved config lists applied defaults and reproduces the run
    const std::string resolved = slurp(out_a / "config" / "reconstruct.cfg");
    CHECK(resolved.find("guide.patch") != std::string::npos);  // a default, echoed back
    CHECK(resolved.find("recon.arms") != std::string::npos);
    const std::string before = slurp(out_a / "recon" / "full" / "recon_000.mpimg");
    const fs::path rcfg = kRoot / "resolved_recon.cfg";
    fs::copy_file(out_a / "config" / "reconstruct.cfg", rcfg);
    CHECK(run_cli("reconstruct --config " + rcfg.string() + " --force") == 0);
    CHECK(slurp(out_a / "recon" / "full" / "recon_000.mpimg") == before);

    // whole chain is seed-deterministic across directories
    run_chain(cfg_b);
    for (const char* rel :
         {"data/train/target_000.mpimg", "prior/prior.mpfw", "pamri/encoders.mpfw",
          "recon/full/recon_000.mpimg", "recon/full/recon_001.mpimg",
          "recon/unguided/recon_000.mpimg", "metrics/full.csv"}) {
        CAPTURE(rel);
        CHECK(slurp(out_a / rel) == slurp(out_b / rel));
    }

    // overwrite without --force is refused; with --force succeeds
    CHECK(run_cli("gen-data --config " + cfg_a.string()) == 1);
    CHECK(run_cli("gen-data --config " + cfg_a.string() + " --force") == 0);

    // ablate flag narrows the arm set (and lands in the resolved copy)
    CHECK(run_cli("reconstruct --config " + cfg_a.string() + " --force --ablate base") == 0);
    CHECK(fs::exists(out_a / "recon" / "base" / "recon_000.mpimg"));
    const std::string ablated = slurp(out_a / "config" / "reconstruct.cfg");
    CHECK(ablated.find("recon.arms = base") != std::string::npos);
}

TEST_CASE("cli: usage errors and oracle verification") {
    fs::create_directories(kRoot);

    CHECK(run_cli("train-prior") == 1);  // --config required
    CHECK(run_cli("no-such-command") == 1);
    CHECK(run_cli("evaluate --config " + (kRoot / "missing.cfg").string()) == 1);

    const fs::path bad = kRoot / "bad.cfg";
    std::ofstream(bad) << "seed 11 no equals sign\n";
    CHECK(run_cli("gen-data --config " + bad.string()) == 1);

    CHECK(run_cli("verify-oracle --seed 0") == 0);
    CHECK(run_cli("verify-oracle --seed 5") == 0);
}
