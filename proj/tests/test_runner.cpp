#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>

#include "gpsens/runner.hpp"
#include "gpsens/space.hpp"

using namespace gpsens;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
    static int counter = 0;
    fs::path dir = fs::temp_directory_path() /
                   ("gpsens_runner_" + tag + "_" + std::to_string(::getpid()) + "_" +
                    std::to_string(counter++));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

/// x1 + 2*x2, printed with full precision so values round-trip exactly.
ModelSpec sum_model() {
    ModelSpec spec;
    spec.command = "awk -F, 'NR>1{printf \"%.17g\\n\", $1+2*$2}' {input} > {output}";
    spec.param_names = {"x1", "x2"};
    return spec;
}

Eigen::MatrixXd sample_rows() {
    Eigen::MatrixXd rows(5, 2);
    rows << 0.25, 0.5, 0.75, 0.125, 0.5, 0.1, 1.0, 0.0, 0.0625, 0.875;
    return rows;
}

}  // namespace

TEST_CASE("model spec validation and fingerprint") {
    ModelSpec spec = sum_model();
    REQUIRE_NOTHROW(spec.validate());

    ModelSpec bad = spec;
    bad.command = "run {input}";
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad = spec;
    bad.timeout_s = 0.0;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad = spec;
    bad.batch_size = 0;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad = spec;
    bad.param_names.clear();
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);

    // The fingerprint keys the evaluation cache: everything that can change
    // an output participates, execution details do not.
    std::uint64_t base = spec.fingerprint();
    ModelSpec same = spec;
    same.batch_size = 64;
    same.timeout_s = 5.0;
    REQUIRE(same.fingerprint() == base);

    ModelSpec differ = spec;
    differ.command += " ";
    REQUIRE(differ.fingerprint() != base);
    differ = spec;
    differ.output_column = "y";
    REQUIRE(differ.fingerprint() != base);
    differ = spec;
    differ.workdir = "/tmp";
    REQUIRE(differ.fingerprint() != base);
    differ = spec;
    differ.extra_env = {{"MODE", "fast"}};
    REQUIRE(differ.fingerprint() != base);
    differ = spec;
    differ.param_names = {"x2", "x1"};
    REQUIRE(differ.fingerprint() != base);
}

TEST_CASE("command execution captures exit status, output, and environment") {
    ProcessResult r = run_command("exit 7", "", 10.0, {});
    REQUIRE(r.exit_code == 7);
    REQUIRE_FALSE(r.timed_out);

    r = run_command("echo hello; echo oops >&2", "", 10.0, {});
    REQUIRE(r.exit_code == 0);
    REQUIRE(r.output_tail.find("hello") != std::string::npos);
    REQUIRE(r.output_tail.find("oops") != std::string::npos);

    r = run_command("printf '%s' \"$GPSENS_TEST_TOKEN\"", "", 10.0,
                    {{"GPSENS_TEST_TOKEN", "quux"}});
    REQUIRE(r.output_tail == "quux");

    fs::path dir = fresh_dir("wd");
    r = run_command("pwd", dir.string(), 10.0, {});
    REQUIRE(r.output_tail.find(dir.filename().string()) != std::string::npos);

    // Only the last few KB of output are kept.
    r = run_command("head -c 8192 /dev/zero | tr '\\0' 'a'", "", 10.0, {});
    REQUIRE(r.exit_code == 0);
    REQUIRE(r.output_tail.size() <= 4096);
    REQUIRE(r.output_tail.find_first_not_of('a') == std::string::npos);
}

TEST_CASE("command execution kills overrunning processes") {
    auto start = std::chrono::steady_clock::now();
    ProcessResult r = run_command("sleep 30", "", 0.3, {});
    auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start);
    REQUIRE(r.timed_out);
    REQUIRE(r.exit_code == -1);
    REQUIRE(elapsed.count() < 10.0);
}

TEST_CASE("model output parsing: bare numbers") {
    fs::path dir = fresh_dir("bare");
    fs::path out = dir / "out.txt";
    std::ofstream(out) << "# comment\n1.5\n\n  2.25  \n-3e-2\n";
    Eigen::VectorXd v = read_model_output(out.string(), "", 3);
    REQUIRE(v[0] == 1.5);
    REQUIRE(v[1] == 2.25);
    REQUIRE(v[2] == -0.03);

    REQUIRE_THROWS_AS(read_model_output(out.string(), "", 2), SchemaError);
    REQUIRE_THROWS_AS(read_model_output(out.string(), "", 4), SchemaError);
    REQUIRE_THROWS_AS(read_model_output((dir / "missing.txt").string(), "", 1), SchemaError);

    std::ofstream(out) << "1.5\nbogus\n";
    REQUIRE_THROWS_AS(read_model_output(out.string(), "", 2), ParseError);
}

TEST_CASE("model output parsing: named CSV column") {
    fs::path dir = fresh_dir("csv");
    fs::path out = dir / "out.csv";
    std::ofstream(out) << "y,z\n1,10\n2,20\n";
    Eigen::VectorXd v = read_model_output(out.string(), "z", 2);
    REQUIRE(v[0] == 10.0);
    REQUIRE(v[1] == 20.0);
    REQUIRE_THROWS_AS(read_model_output(out.string(), "w", 2), SchemaError);
    REQUIRE_THROWS_AS(read_model_output(out.string(), "z", 3), SchemaError);
}

TEST_CASE("batch evaluation preserves row order and column meaning") {
    ModelSpec spec = sum_model();
    spec.batch_size = 2;
    Eigen::MatrixXd rows = sample_rows();

    BatchResult r = evaluate_batch(spec, rows);
    REQUIRE(r.failures.empty());
    REQUIRE(r.launches == 3);  // ceil(5 / 2)
    REQUIRE(r.cache_hits == 0);
    for (Eigen::Index i = 0; i < rows.rows(); ++i)
        REQUIRE(r.values[i] == Catch::Approx(rows(i, 0) + 2.0 * rows(i, 1)).margin(1e-15));

    REQUIRE_THROWS_AS(evaluate_batch(spec, Eigen::MatrixXd::Zero(2, 3)), ShapeMismatch);
}

TEST_CASE("batch evaluation reads a named output column") {
    ModelSpec spec;
    spec.command =
        "awk -F, 'NR==1{print \"flag,result\"} NR>1{printf \"0,%.17g\\n\", 10*$1}' {input} > "
        "{output}";
    spec.param_names = {"x1"};
    spec.output_column = "result";
    spec.batch_size = 8;
    Eigen::MatrixXd rows(3, 1);
    rows << 0.5, 1.5, -2.0;
    BatchResult r = evaluate_batch(spec, rows);
    REQUIRE(r.failures.empty());
    REQUIRE(r.values[0] == 5.0);
    REQUIRE(r.values[2] == -20.0);
}

TEST_CASE("failures are per row and carry the model's message") {
    ModelSpec spec;
    spec.command =
        "awk -F, 'NR>1{if ($1 > 0.5) { print \"x1 too large\" > \"/dev/stderr\"; exit 2 } "
        "printf \"%.17g\\n\", $1}' {input} > {output}";
    spec.param_names = {"x1", "x2"};
    Eigen::MatrixXd rows = sample_rows();  // x1 = .25 .75 .5 1 .0625

    BatchResult r = evaluate_batch(spec, rows);
    REQUIRE(r.failures.size() == 2);
    REQUIRE(r.failures[0].row == 1);
    REQUIRE(r.failures[1].row == 3);
    REQUIRE(r.failures[0].detail.find("exited with code 2") != std::string::npos);
    REQUIRE(r.failures[0].detail.find("x1 too large") != std::string::npos);
    REQUIRE(std::isnan(r.values[1]));
    REQUIRE(std::isnan(r.values[3]));
    REQUIRE(r.values[0] == 0.25);
    REQUIRE(r.values[4] == 0.0625);
}

TEST_CASE("timeouts and missing output files surface as row failures") {
    ModelSpec spec;
    spec.command = "sleep 30; cp {input} {output}";
    spec.param_names = {"x1"};
    spec.timeout_s = 0.3;
    spec.batch_size = 4;
    Eigen::MatrixXd rows(2, 1);
    rows << 0.1, 0.2;
    BatchResult r = evaluate_batch(spec, rows);
    REQUIRE(r.failures.size() == 2);
    REQUIRE(r.failures[0].detail.find("timed out") != std::string::npos);

    spec.command = "true {input} {output}";
    spec.timeout_s = 10.0;
    r = evaluate_batch(spec, rows);
    REQUIRE(r.failures.size() == 2);
    REQUIRE(r.failures[0].detail.find("no output") != std::string::npos);

    spec.command = "echo nan > {output}; echo 2 >> {output}; true {input}";
    spec.batch_size = 2;
    r = evaluate_batch(spec, rows);
    REQUIRE(r.failures.size() == 1);
    REQUIRE(r.failures[0].row == 0);
    REQUIRE(r.failures[0].detail.find("non-finite") != std::string::npos);
    REQUIRE(r.values[1] == 2.0);
}

TEST_CASE("evaluation cache eliminates repeat launches") {
    fs::path dir = fresh_dir("cache");
    ModelSpec spec = sum_model();
    spec.batch_size = 2;
    Eigen::MatrixXd rows = sample_rows();

    {
        EvalCache cache(dir.string());
        REQUIRE(cache.size() == 0);
        BatchResult first = evaluate_batch(spec, rows, &cache);
        REQUIRE(first.launches == 3);
        REQUIRE(cache.size() == 5);

        BatchResult second = evaluate_batch(spec, rows, &cache);
        REQUIRE(second.launches == 0);
        REQUIRE(second.cache_hits == 5);
        REQUIRE((second.values - first.values).cwiseAbs().maxCoeff() == 0.0);
    }

    // The memo survives on disk across cache instances.
    EvalCache reloaded(dir.string());
    REQUIRE(reloaded.size() == 5);
    BatchResult warm = evaluate_batch(spec, rows, &reloaded);
    REQUIRE(warm.launches == 0);
    REQUIRE(warm.cache_hits == 5);

    // A changed evaluator shares no entries.
    ModelSpec other = sum_model();
    other.extra_env = {{"VARIANT", "b"}};
    BatchResult cold = evaluate_batch(other, rows, &reloaded);
    REQUIRE(cold.cache_hits == 0);
    REQUIRE(cold.launches > 0);
}

TEST_CASE("failed rows are not cached and retry on the next pass") {
    fs::path dir = fresh_dir("retry");
    // Fails whenever the flag file is absent.
    fs::path flag = dir / "flag";
    ModelSpec spec;
    spec.command = "test -f " + flag.string() +
                   " || exit 9; awk -F, 'NR>1{printf \"%.17g\\n\", $1}' {input} > {output}";
    spec.param_names = {"x1", "x2"};
    Eigen::MatrixXd rows = sample_rows();

    EvalCache cache(dir.string());
    BatchResult broken = evaluate_batch(spec, rows, &cache);
    REQUIRE(broken.failures.size() == 5);
    REQUIRE(cache.size() == 0);

    std::ofstream(flag) << "";
    BatchResult fixed = evaluate_batch(spec, rows, &cache);
    REQUIRE(fixed.failures.empty());
    REQUIRE(fixed.cache_hits == 0);
    REQUIRE(fixed.launches == 5);
    REQUIRE(cache.size() == 5);
}

TEST_CASE("cache log tolerates corruption and keeps the newest duplicate") {
    fs::path dir = fresh_dir("corrupt");
    std::uint64_t key = EvalCache::row_key(123, nullptr, 0);
    {
        EvalCache cache(dir.string());
        cache.insert(key, 1.5);
        cache.insert(key, 2.5);  // duplicate: newest wins
        cache.insert(key + 1, -7.0);
    }
    {
        // Splice garbage between valid lines.
        std::ofstream app((dir / "evaluations.log").string(), std::ios::app);
        app << "not a cache line\n";
        app << "k=0123456789abcdef v=1.8p+0 c=0000000000000000\n";  // bad checksum
        app << "k=0123456789abcdef v=1.8p";                         // truncated, no newline
    }
    EvalCache cache(dir.string());
    REQUIRE(cache.size() == 2);
    REQUIRE(cache.lookup(key) == 2.5);
    REQUIRE(cache.lookup(key + 1) == -7.0);
    REQUIRE_FALSE(cache.lookup(key + 2).has_value());

    // The reopened log still accepts appends.
    cache.insert(key + 2, 0.25);
    EvalCache again(dir.string());
    REQUIRE(again.lookup(key + 2) == 0.25);
}

TEST_CASE("row keys separate evaluators and inputs") {
    double row_a[2] = {0.5, 0.25};
    double row_b[2] = {0.5, 0.2500000001};
    REQUIRE(EvalCache::row_key(1, row_a, 2) == EvalCache::row_key(1, row_a, 2));
    REQUIRE(EvalCache::row_key(1, row_a, 2) != EvalCache::row_key(2, row_a, 2));
    REQUIRE(EvalCache::row_key(1, row_a, 2) != EvalCache::row_key(1, row_b, 2));
    REQUIRE(EvalCache::row_key(1, row_a, 2) != EvalCache::row_key(1, row_a, 1));
}

TEST_CASE("training tables round-trip exactly") {
    fs::path dir = fresh_dir("train");
    fs::path path = dir / "training.csv";
    ParameterSpace space({{"pressure", 0.0, 10.0}, {"rate", -1.0, 1.0}});
    Eigen::MatrixXd x(3, 2);
    x << 0.1, -0.7, 9.999999999999, 0.3333333333333333, 1e-12, -1.0;
    Eigen::VectorXd y(3);
    y << -3.25, 1.0 / 3.0, 2.5e8;

    write_training_csv(path.string(), space, x, y, "deadbeefdeadbeef");
    TrainingData data = read_training_csv(path.string(), space);
    REQUIRE((data.x - x).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((data.y - y).cwiseAbs().maxCoeff() == 0.0);

    std::ifstream in(path);
    std::string first;
    std::getline(in, first);
    REQUIRE(first == "# config_hash=deadbeefdeadbeef");
    std::string header;
    std::getline(in, header);
    REQUIRE(header == "pressure,rate,output");

    ParameterSpace other({{"pressure", 0.0, 10.0}, {"flow", -1.0, 1.0}});
    REQUIRE_THROWS_AS(read_training_csv(path.string(), other), SchemaError);
    REQUIRE_THROWS_AS(write_training_csv(path.string(), space, x, y.head(2)), ShapeMismatch);
}
