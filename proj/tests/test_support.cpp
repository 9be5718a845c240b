// Supporting subsystems: quality metrics, the quality study driver, config
// parsing, snapshots, corpus handling, and report formatting.

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mesp/config.hpp"
#include "mesp/grad_quality.hpp"
#include "mesp/report.hpp"
#include "mesp/snapshot.hpp"
#include "mesp/trainer.hpp"

using namespace mesp;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.vocab = 257;
  cfg.lora_rank = 4;
  cfg.max_seq = 32;
  cfg.lora_alpha = 8.0;
  return cfg;
}

Corpus synthetic_corpus(size_t n_bytes, uint64_t seed) {
  Corpus c;
  c.bytes.resize(n_bytes);
  Rng rng(seed);
  for (auto& b : c.bytes) b = static_cast<uint8_t>(rng.uniform_int(0, 255));
  return c;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("mesp_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<uintptr_t>(this)));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("quality metrics on hand-built vectors") {
  std::vector<double> ref{1.0, -2.0, 0.5, 0.0};
  SUBCASE("identical vectors") {
    auto m = gradient_quality(ref, ref);
    CHECK(m.cosine == doctest::Approx(1.0));
    CHECK(m.rel_error == 0.0);
    CHECK(m.sign_agreement == 1.0);  // equal zeros count as agreement
    CHECK(m.cosine_defined);
    CHECK(m.rel_error_defined);
  }
  SUBCASE("negated vectors") {
    std::vector<double> est{-1.0, 2.0, -0.5, 0.0};
    auto m = gradient_quality(est, ref);
    CHECK(m.cosine == doctest::Approx(-1.0));
    CHECK(m.rel_error == doctest::Approx(2.0));
    CHECK(m.sign_agreement == doctest::Approx(0.25));
  }
  SUBCASE("zero reference leaves cosine and rel error undefined") {
    std::vector<double> zeros(4, 0.0);
    auto m = gradient_quality(ref, zeros);
    CHECK_FALSE(m.cosine_defined);
    CHECK_FALSE(m.rel_error_defined);
    CHECK(m.sign_defined);
  }
  SUBCASE("size mismatch throws") {
    std::vector<double> est{1.0};
    CHECK_THROWS_AS(gradient_quality(est, ref), std::invalid_argument);
  }
}

TEST_CASE("quality study produces defined per-layer metrics after warmup") {
  ModelConfig cfg = small_config();
  Corpus corpus = synthetic_corpus(2048, 5);
  TrainSession<double> session(cfg, Strategy::mezo, 42);
  QualityStudyOptions opts;
  opts.layers = {0, 1};
  opts.warmup_steps = 4;
  auto study = run_quality_study(session, corpus, opts);
  REQUIRE(study.rows.size() == 2);
  CHECK(study.elems_per_layer == block_adapter_grad_count(cfg));
  CHECK(study.probe_coeff != 0.0);
  for (const auto& row : study.rows) {
    CAPTURE(row.layer);
    CHECK(row.m.n_elems == study.elems_per_layer);
    CHECK(row.m.cosine_defined);
    CHECK(row.m.rel_error_defined);
    CHECK(row.m.sign_defined);
    CHECK(row.m.rel_error > 0.0);
  }
  CHECK(study.avg.cosine_defined);
  CHECK(study.avg.n_elems == 2 * study.elems_per_layer);
}

TEST_CASE("quality study rejects out-of-range layers") {
  ModelConfig cfg = small_config();
  Corpus corpus = synthetic_corpus(2048, 5);
  TrainSession<double> session(cfg, Strategy::mezo, 42);
  QualityStudyOptions opts;
  opts.layers = {0, 2};
  CHECK_THROWS_AS(run_quality_study(session, corpus, opts), std::invalid_argument);
}

TEST_CASE("fresh adapters degenerate the A-side metrics without warmup") {
  // with B = 0 the exact dA is identically zero; the reference norm still
  // comes from dB, so metrics stay defined but correlation is meaningless
  ModelConfig cfg = small_config();
  Corpus corpus = synthetic_corpus(2048, 5);
  TrainSession<double> session(cfg, Strategy::mezo, 42);
  Rng probe_rng(hash3(99, 0x70726f6265ULL, 1));
  Batch batch = sample_batch(corpus, 1, 32, probe_rng);
  auto exact = exact_adapter_grads(session.params(), batch.inputs, batch.targets);
  for (size_t b = 0; b < 2; ++b)
    for (Site s : kSiteOrder) {
      const Tensor<double>& dA =
          exact.at("blk" + std::to_string(b) + "." + std::string(site_name(s)) + ".A");
      for (int64_t i = 0; i < dA.numel(); ++i) REQUIRE(dA.data()[i] == 0.0);
    }
}

TEST_CASE("config parser handles comments, lists and typed values") {
  const std::string text =
      "# full line comment\n"
      "model.layers = 3   # trailing comment\n"
      "model.d_model = 48\n"
      "run.strategy = mebp\n"
      "run.lr = 5e-4\n"
      "bench.seq_list = 16, 32, 64\n"
      "bench.include_mezo = true\n"
      "\n"
      "quality.layers = 0,2\n";
  RunConfig cfg = parse_config_text(text, "inline");
  CHECK(cfg.model.n_layers == 3);
  CHECK(cfg.model.d_model == 48);
  CHECK(cfg.strategy == "mebp");
  CHECK(cfg.lr == doctest::Approx(5e-4));
  CHECK(cfg.bench.seq_list == std::vector<int64_t>{16, 32, 64});
  CHECK(cfg.bench.seq_list_set);
  CHECK_FALSE(cfg.bench.rank_list_set);
  CHECK(cfg.bench.include_mezo);
  CHECK(cfg.quality_layers == std::vector<int64_t>{0, 2});
}

TEST_CASE("config parser rejects malformed input with file and line") {
  auto fails_with = [](const std::string& text, const std::string& needle) {
    try {
      parse_config_text(text, "bad.cfg");
      FAIL_CHECK("expected ConfigError for: " << text);
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("bad.cfg:") != std::string::npos);
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };
  fails_with("model.layers = 4\nmodel.layers = 2\n", "duplicate key");
  fails_with("model.depth = 4\n", "unknown key");
  fails_with("model.layers = four\n", "expected integer");
  fails_with("model.layers = 4x\n", "trailing characters");
  fails_with("run.lr\n", "expected 'key = value'");
  fails_with("bench.trace = maybe\n", "expected true/false");
  fails_with("bench.seq_list = 16,,32\n", "empty element");
}

TEST_CASE("config validation enforces ranges") {
  RunConfig cfg;
  cfg.model = small_config();
  cfg.model.n_layers = 2;
  cfg.seq = 32;
  CHECK_NOTHROW(cfg.validate());

  RunConfig bad = cfg;
  bad.model.vocab = 200;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.dtype = "f16";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.strategy = "adam";
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.seq = 4096;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.momentum = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.quality_layers = {5};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("default quality layers are first, middle, last") {
  RunConfig cfg;
  cfg.model = small_config();
  cfg.model.n_layers = 4;
  CHECK(cfg.resolved_quality_layers() == std::vector<int64_t>{0, 2, 3});
  cfg.model.n_layers = 2;
  CHECK(cfg.resolved_quality_layers() == std::vector<int64_t>{0, 1});
  cfg.model.n_layers = 1;
  CHECK(cfg.resolved_quality_layers() == std::vector<int64_t>{0});
  cfg.quality_layers = {1};
  CHECK(cfg.resolved_quality_layers() == std::vector<int64_t>{1});
}

TEST_CASE("config echo is stable and covers every section") {
  RunConfig cfg;
  cfg.model = small_config();
  std::string echo = config_echo(cfg);
  CHECK(echo == config_echo(cfg));
  for (const char* needle : {"model.layers=", "run.strategy=", "mezo.eps=", "gradcheck.delta=",
                             "bench.seq_list=", "quality.layers="})
    CHECK(echo.find(needle) != std::string::npos);
}

TEST_CASE("snapshot round trip is bit exact") {
  TempDir tmp;
  ModelConfig cfg = small_config();
  auto a = init_model<double>(cfg, 42);
  // perturb so the file is not just the init pattern
  for (auto& p : trainable_params(a))
    for (int64_t i = 0; i < p.tensor->numel(); ++i) p.tensor->data()[i] += 1e-3 * (i % 7);
  save_snapshot(tmp.file("a.snap"), a);

  auto b = init_model<double>(cfg, 7);
  load_snapshot(tmp.file("a.snap"), b);
  auto pa = all_params(a);
  auto pb = all_params(b);
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i)
    REQUIRE(std::memcmp(pa[i].tensor->data(), pb[i].tensor->data(),
                        sizeof(double) * static_cast<size_t>(pa[i].tensor->numel())) == 0);
}

TEST_CASE("snapshot loader rejects wrong width, shape and truncation") {
  TempDir tmp;
  ModelConfig cfg = small_config();
  auto a = init_model<double>(cfg, 42);
  save_snapshot(tmp.file("a.snap"), a);

  auto as_float = init_model<float>(cfg, 42);
  CHECK_THROWS(load_snapshot(tmp.file("a.snap"), as_float));

  ModelConfig other = cfg;
  other.d_model = 32;
  auto b = init_model<double>(other, 42);
  CHECK_THROWS(load_snapshot(tmp.file("a.snap"), b));

  // truncated copy
  {
    std::ifstream in(tmp.file("a.snap"), std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(tmp.file("cut.snap"), std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  auto c = init_model<double>(cfg, 42);
  CHECK_THROWS(load_snapshot(tmp.file("cut.snap"), c));

  // corrupted magic
  {
    std::ifstream in(tmp.file("a.snap"), std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    bytes[0] = 'X';
    std::ofstream out(tmp.file("magic.snap"), std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS(load_snapshot(tmp.file("magic.snap"), c));
}

TEST_CASE("corpus loading and batch sampling") {
  TempDir tmp;
  {
    std::ofstream out(tmp.file("corpus.txt"), std::ios::binary);
    for (int i = 0; i < 400; ++i) out.put(static_cast<char>(i % 251));
  }
  Corpus c = load_corpus(tmp.file("corpus.txt"));
  REQUIRE(c.bytes.size() == 400);
  CHECK_THROWS(load_corpus(tmp.file("missing.txt")));

  Rng rng(3);
  Batch b = sample_batch(c, 2, 16, rng);
  CHECK(b.inputs.dim(0) == 2);
  CHECK(b.inputs.dim(1) == 16);
  // targets are the next byte
  for (int64_t row = 0; row < 2; ++row)
    for (int64_t t = 0; t + 1 < 16; ++t)
      CHECK(b.targets.at(row, t) == b.inputs.at(row, t + 1));
  // windows too long for the corpus are rejected
  CHECK_THROWS(sample_batch(c, 1, 400, rng));
}

TEST_CASE("train loop records the requested evaluation points") {
  ModelConfig cfg = small_config();
  Corpus corpus = synthetic_corpus(2048, 5);
  TrainSession<double> session(cfg, Strategy::mesp, 42);
  TrainRunOptions opts;
  opts.steps = 10;
  opts.seq = 16;
  opts.eval_interval = 4;
  opts.step.lr = 1e-3;
  Trajectory traj = train_loop(session, corpus, opts);
  CHECK(traj.steps == std::vector<int64_t>{0, 4, 8, 9});
  CHECK(traj.losses.size() == 4);
  CHECK(traj.peak_bytes > session.param_bytes());
  CHECK(traj.initial_loss() == traj.losses.front());
  CHECK(traj.final_loss() == traj.losses.back());
}

TEST_CASE("manifest header isolates the timestamp and echoes the config") {
  Manifest m;
  m.command = "bench-mem";
  m.layout = "memory-sweep";
  m.config_origin = "configs/bench.cfg";
  m.dtype = "f64";
  m.seed = 7;
  m.config_echo = "model.layers=2 model.d_model=16\nrun.strategy=mesp\n";
  m.outputs = {"out/bench.csv", "out/bench.md"};
  std::string h = manifest_header(m);

  // body minus the generated line must be identical across calls
  auto strip_generated = [](const std::string& s) {
    std::istringstream in(s);
    std::string line, out;
    while (std::getline(in, line))
      if (line.rfind("# generated: ", 0) != 0) out += line + "\n";
    return out;
  };
  CHECK(strip_generated(h) == strip_generated(manifest_header(m)));

  size_t gen_count = 0;
  std::istringstream in(h);
  std::string line;
  bool all_comments = true;
  while (std::getline(in, line)) {
    if (line.rfind("# generated: ", 0) == 0) ++gen_count;
    if (line.empty() || line[0] != '#') all_comments = false;
  }
  CHECK(gen_count == 1);
  CHECK(all_comments);
  CHECK(h.find("# layout: memory-sweep\n") != std::string::npos);
  CHECK(h.find("# resolved: run.strategy=mesp\n") != std::string::npos);
  CHECK(h.find("# output: out/bench.csv\n") != std::string::npos);
}

TEST_CASE("markdown table formatting and width checks") {
  std::string t = markdown_table({"a", "b"}, {{"1", "2"}, {"3", "4"}});
  CHECK(t == "| a | b |\n| --- | --- |\n| 1 | 2 |\n| 3 | 4 |\n");
  CHECK_THROWS_AS(markdown_table({"a"}, {{"1", "2"}}), std::invalid_argument);
  CHECK(csv_join({"x", "y", "z"}) == "x,y,z");
  CHECK(fmt_double(1.23456, 3) == "1.235");
  CHECK(fmt_int(-42) == "-42");
}

TEST_CASE("text files land in freshly created directories") {
  TempDir tmp;
  std::string path = tmp.file("nested/dir/report.md");
  write_text_file(path, "hello\n");
  std::ifstream in(path);
  std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(body == "hello\n");
}
