#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

using std::string;

namespace {

string falcon_bin() {
  const char* p = std::getenv("FALCON_BIN");
  REQUIRE(p != nullptr);
  return p;
}

struct RunResult {
  int exit_code;
  string out;
  string err;
};

RunResult run(const string& args) {
  const string out_path = "cli_stdout.txt";
  const string err_path = "cli_stderr.txt";
  const string cmd = falcon_bin() + " " + args + " > " + out_path + " 2> " + err_path;
  int rc = std::system(cmd.c_str());
  auto slurp = [](const string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream buf;
    buf << is.rdbuf();
    return buf.str();
  };
  RunResult r;
  r.exit_code = WEXITSTATUS(rc);
  r.out = slurp(out_path);
  r.err = slurp(err_path);
  std::remove(out_path.c_str());
  std::remove(err_path.c_str());
  return r;
}

void write_file(const string& path, const string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
}

string slurp_bin(const string& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

const char* kTinyConfig =
    "vocab_size = 256\n"
    "hidden_dim = 16\n"
    "n_layers = 1\n"
    "n_heads = 2\n"
    "context_len = 64\n"
    "k = 2\n"
    "drafter_mlp_dim = 24\n"
    "epochs = 2\n"
    "batch_size = 2\n"
    "seq_len = 12\n"
    "lr = 0.002\n"
    "max_steps_per_epoch = 2\n";

void make_corpus_file(const string& path) {
  std::ostringstream text;
  for (int i = 0; i < 300; ++i) text << "the cat sat on the mat. ";
  write_file(path, text.str());
}

}  // namespace

TEST_CASE("usage errors exit nonzero with a single-line message") {
  RunResult r = run("generate --target t --drafter d --tree x --prompt a --prompt-file b");
  CHECK(r.exit_code == 2);
  CHECK(r.err.rfind("error: usage:", 0) == 0);
  CHECK(r.err.find('\n') == r.err.size() - 1);

  RunResult unknown = run("generate --bogus-flag 1");
  CHECK(unknown.exit_code == 2);
  CHECK(unknown.err.rfind("error: usage:", 0) == 0);

  RunResult missing = run("bench --target nope.bin --drafter nope.bin --tree t.json --prompts p.txt");
  CHECK(missing.exit_code != 0);
  CHECK(missing.err.rfind("error:", 0) == 0);
}

TEST_CASE("check-theory runs standalone") {
  RunResult r = run("check-theory --trials 50 --seed 4");
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("max residual") != string::npos);
}

TEST_CASE("full pipeline: train-target, train-drafter, generate, bench") {
  make_corpus_file("cli_corpus.txt");
  write_file("cli_model.cfg", kTinyConfig);
  write_file("cli_tree.json",
             R"({"name": "t", "k": 2, "levels": [{"branching": [2]}, {"branching": [1, 1]}]})");

  RunResult tt = run("train-target --corpus cli_corpus.txt --config cli_model.cfg "
                     "--out cli_target.bin --seed 5");
  CHECK(tt.exit_code == 0);

  RunResult td = run("train-drafter --target cli_target.bin --corpus cli_corpus.txt "
                     "--config cli_model.cfg --out cli_drafter.bin --seed 5 "
                     "--metrics cli_metrics.csv");
  CHECK(td.exit_code == 0);
  {
    std::ifstream metrics("cli_metrics.csv");
    string header;
    std::getline(metrics, header);
    CHECK(header == "epoch,lambda,L,L_reg,L_soft,L_hard");
    int rows = 0;
    string line;
    while (std::getline(metrics, line)) {
      if (!line.empty()) ++rows;
    }
    CHECK(rows == 2);
  }

  RunResult gen = run("generate --target cli_target.bin --drafter cli_drafter.bin "
                      "--tree cli_tree.json --prompt \"the cat\" --max-new 16 --seed 1");
  CHECK(gen.exit_code == 0);
  CHECK(gen.out.rfind("the cat", 0) == 0);
  CHECK(gen.out.size() == 7 + 16);
  CHECK(gen.err.find("alpha=") != string::npos);

  write_file("cli_prompts.txt", "the cat\nthe mat. the\n");
  RunResult bn = run("bench --target cli_target.bin --drafter cli_drafter.bin "
                     "--tree cli_tree.json --prompts cli_prompts.txt --reps 3 "
                     "--max-new 12 --out cli_bench.csv");
  CHECK(bn.exit_code == 0);
  {
    std::ifstream csv("cli_bench.csv");
    string header;
    std::getline(csv, header);
    CHECK(header == "prompt_id,tokens,phases,alpha,tau,wall_ns_spec,wall_ns_ar,speedup");
    int rows = 0;
    string line;
    while (std::getline(csv, line)) {
      if (!line.empty()) ++rows;
    }
    CHECK(rows == 2 * 3);  // one row per prompt per rep
  }

  SUBCASE("same seed and flags reproduce checkpoints bit-for-bit") {
    RunResult tt2 = run("train-target --corpus cli_corpus.txt --config cli_model.cfg "
                        "--out cli_target2.bin --seed 5");
    CHECK(tt2.exit_code == 0);
    CHECK(slurp_bin("cli_target.bin") == slurp_bin("cli_target2.bin"));

    RunResult td2 = run("train-drafter --target cli_target.bin --corpus cli_corpus.txt "
                        "--config cli_model.cfg --set noise_halfwidth=0 "
                        "--out cli_drafter2.bin --seed 5");
    RunResult td3 = run("train-drafter --target cli_target.bin --corpus cli_corpus.txt "
                        "--config cli_model.cfg --set noise_halfwidth=0 "
                        "--out cli_drafter3.bin --seed 5");
    CHECK(td2.exit_code == 0);
    CHECK(td3.exit_code == 0);
    CHECK(slurp_bin("cli_drafter2.bin") == slurp_bin("cli_drafter3.bin"));
    std::remove("cli_target2.bin");
    std::remove("cli_target2.bin.cfg");
    std::remove("cli_drafter2.bin");
    std::remove("cli_drafter2.bin.cfg");
    std::remove("cli_drafter3.bin");
    std::remove("cli_drafter3.bin.cfg");
  }

  SUBCASE("FALCON_SEED env is the seed fallback") {
    // run() prefixes the binary itself; spawn manually for the env case
    int rc = std::system(("FALCON_SEED=5 " + falcon_bin() +
                          " train-target --corpus cli_corpus.txt --config cli_model.cfg "
                          "--out cli_target_env.bin > /dev/null 2>&1")
                             .c_str());
    CHECK(WEXITSTATUS(rc) == 0);
    CHECK(slurp_bin("cli_target.bin") == slurp_bin("cli_target_env.bin"));
    std::remove("cli_target_env.bin");
    std::remove("cli_target_env.bin.cfg");
  }

  for (const char* f :
       {"cli_corpus.txt", "cli_model.cfg", "cli_tree.json", "cli_target.bin",
        "cli_target.bin.cfg", "cli_drafter.bin", "cli_drafter.bin.cfg",
        "cli_metrics.csv", "cli_prompts.txt", "cli_bench.csv"}) {
    std::remove(f);
  }
}
