#pragma once

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cerrno>
#include <charconv>
#include <chrono>
#include <csignal>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gpsens/csv.hpp"
#include "gpsens/detail/util.hpp"
#include "gpsens/errors.hpp"
#include "gpsens/parallel.hpp"
#include "gpsens/space.hpp"

namespace gpsens {

/// How to invoke an external model executable. The command template must
/// contain {input} and {output}; they are replaced with the paths of a CSV
/// of parameter rows and of the file the model must write its outputs to.
struct ModelSpec {
    std::string command;
    std::string workdir;            // empty = current directory
    double timeout_s = 3600.0;      // per launch
    std::string output_column;      // empty = bare numbers, one per line
    Eigen::Index batch_size = 1;    // rows per launch
    std::vector<std::pair<std::string, std::string>> extra_env;
    std::vector<std::string> param_names;  // input CSV column order

    void validate() const {
        if (command.find("{input}") == std::string::npos ||
            command.find("{output}") == std::string::npos)
            throw ConfigError("model command must contain {input} and {output}");
        if (!(timeout_s > 0.0)) throw ConfigError("model timeout must be positive");
        if (batch_size < 1) throw ConfigError("model batch size must be >= 1");
        if (param_names.empty()) throw ConfigError("model: no parameter names");
    }

    /// Identity of the evaluator for cache keying. Everything that can
    /// change an output value participates; the batch size does not.
    std::uint64_t fingerprint() const {
        std::uint64_t h = detail::fnv1a(command);
        h = detail::fnv1a("\x1f", h);
        h = detail::fnv1a(workdir, h);
        h = detail::fnv1a("\x1f", h);
        h = detail::fnv1a(output_column, h);
        for (const auto& [k, v] : extra_env) {
            h = detail::fnv1a("\x1f", h);
            h = detail::fnv1a(k, h);
            h = detail::fnv1a("=", h);
            h = detail::fnv1a(v, h);
        }
        for (const auto& name : param_names) {
            h = detail::fnv1a("\x1f", h);
            h = detail::fnv1a(name, h);
        }
        return h;
    }
};

struct ProcessResult {
    int exit_code = -1;
    bool timed_out = false;
    std::string output_tail;  // last few KB of stdout+stderr, for diagnostics
};

/// Runs a shell command with a wall-clock timeout, capturing combined
/// stdout/stderr. The child is SIGKILLed when the deadline passes.
inline ProcessResult run_command(const std::string& command, const std::string& workdir,
                                 double timeout_s,
                                 const std::vector<std::pair<std::string, std::string>>& env) {
    int pipe_fd[2];
    if (::pipe(pipe_fd) != 0) throw ModelExecutionError("pipe() failed");

    pid_t pid = ::fork();
    if (pid < 0) {
        ::close(pipe_fd[0]);
        ::close(pipe_fd[1]);
        throw ModelExecutionError("fork() failed");
    }
    if (pid == 0) {
        ::close(pipe_fd[0]);
        ::dup2(pipe_fd[1], STDOUT_FILENO);
        ::dup2(pipe_fd[1], STDERR_FILENO);
        ::close(pipe_fd[1]);
        if (!workdir.empty() && ::chdir(workdir.c_str()) != 0) _exit(127);
        for (const auto& [k, v] : env) ::setenv(k.c_str(), v.c_str(), 1);
        ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        _exit(127);
    }

    ::close(pipe_fd[1]);
    ::fcntl(pipe_fd[0], F_SETFL, O_NONBLOCK);
    ProcessResult result;
    auto deadline = std::chrono::steady_clock::now() +
                    std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                        std::chrono::duration<double>(timeout_s));
    constexpr std::size_t kTailLimit = 4096;
    bool child_done = false;
    bool pipe_open = true;
    char buf[1024];

    while (!child_done) {
        if (pipe_open) {
            struct pollfd pfd{pipe_fd[0], POLLIN, 0};
            int pr = ::poll(&pfd, 1, 20);
            if (pr > 0) {
                ssize_t n = ::read(pipe_fd[0], buf, sizeof(buf));
                if (n > 0) {
                    result.output_tail.append(buf, static_cast<std::size_t>(n));
                    if (result.output_tail.size() > kTailLimit)
                        result.output_tail.erase(0, result.output_tail.size() - kTailLimit);
                } else if (n == 0) {
                    pipe_open = false;
                }
            }
        }
        int status = 0;
        pid_t w = ::waitpid(pid, &status, WNOHANG);
        if (w == pid) {
            child_done = true;
            result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
        } else if (std::chrono::steady_clock::now() >= deadline) {
            ::kill(pid, SIGKILL);
            ::waitpid(pid, &status, 0);
            result.timed_out = true;
            result.exit_code = -1;
            break;
        } else if (!pipe_open) {
            // Output closed but the child lingers; avoid a busy loop.
            struct timespec ts{0, 5'000'000};
            ::nanosleep(&ts, nullptr);
        }
    }
    // Drain whatever is left in the pipe.
    for (;;) {
        ssize_t n = ::read(pipe_fd[0], buf, sizeof(buf));
        if (n <= 0) break;
        result.output_tail.append(buf, static_cast<std::size_t>(n));
        if (result.output_tail.size() > kTailLimit)
            result.output_tail.erase(0, result.output_tail.size() - kTailLimit);
    }
    ::close(pipe_fd[0]);
    return result;
}

/// Append-only on-disk memo of model evaluations. One line per value:
///   k=<16 hex> v=<hex float> c=<16 hex checksum>
/// The checksum covers the key and value fields, so a line cut short by a
/// crash is skipped on load instead of poisoning the run. Lookups take a
/// shared lock on the in-memory map; inserts append and flush under an
/// exclusive lock. Duplicate keys keep the newest value.
class EvalCache {
public:
    explicit EvalCache(std::string dir) : dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_);
        path_ = (std::filesystem::path(dir_) / "evaluations.log").string();
        load();
        append_.open(path_, std::ios::app);
        if (!append_) throw SchemaError("EvalCache: cannot open '" + path_ + "' for append");
        // A crash can truncate the final line mid-write. Terminate it so the
        // next append starts on its own line instead of fusing with the
        // fragment (both halves would then fail their checksums).
        std::error_code ec;
        auto size = std::filesystem::file_size(path_, ec);
        if (!ec && size > 0) {
            std::ifstream tail(path_, std::ios::binary);
            tail.seekg(-1, std::ios::end);
            if (tail.get() != '\n') {
                append_ << '\n';
                append_.flush();
            }
        }
    }

    static std::uint64_t row_key(std::uint64_t fingerprint, const double* row, int n) {
        std::uint64_t h = fingerprint;
        h = detail::fnv1a(std::string_view(reinterpret_cast<const char*>(row),
                                           sizeof(double) * static_cast<std::size_t>(n)),
                          h);
        return h;
    }

    std::optional<double> lookup(std::uint64_t key) const {
        std::shared_lock lock(mutex_);
        auto it = map_.find(key);
        if (it == map_.end()) return std::nullopt;
        return it->second;
    }

    void insert(std::uint64_t key, double value) {
        std::unique_lock lock(mutex_);
        auto [it, fresh] = map_.insert_or_assign(key, value);
        (void)it;
        (void)fresh;
        std::string line = encode(key, value);
        append_ << line << '\n';
        append_.flush();
    }

    std::size_t size() const {
        std::shared_lock lock(mutex_);
        return map_.size();
    }

    const std::string& directory() const { return dir_; }
    const std::string& path() const { return path_; }

private:
    static std::string encode(std::uint64_t key, double value) {
        char vbuf[48];
        auto [p, ec] = std::to_chars(vbuf, vbuf + sizeof(vbuf), value, std::chars_format::hex);
        (void)ec;
        std::string body = "k=" + detail::to_hex64(key) + " v=" + std::string(vbuf, p);
        return body + " c=" + detail::to_hex64(detail::fnv1a(body));
    }

    void load() {
        std::ifstream in(path_);
        if (!in) return;
        std::string line;
        while (std::getline(in, line)) {
            auto cpos = line.rfind(" c=");
            if (cpos == std::string::npos) continue;
            std::string body = line.substr(0, cpos);
            std::uint64_t want = 0;
            if (!parse_hex64(line.substr(cpos + 3), want)) continue;
            if (detail::fnv1a(body) != want) continue;
            if (!detail::starts_with(body, "k=")) continue;
            auto vpos = body.find(" v=");
            if (vpos == std::string::npos) continue;
            std::uint64_t key = 0;
            if (!parse_hex64(body.substr(2, vpos - 2), key)) continue;
            std::string vtok = body.substr(vpos + 3);
            double value = 0.0;
            const char* b = vtok.data();
            auto [p, ec] = std::from_chars(b, b + vtok.size(), value, std::chars_format::hex);
            if (ec != std::errc() || p != b + vtok.size()) continue;
            map_[key] = value;
        }
    }

    static bool parse_hex64(const std::string& tok, std::uint64_t& out) {
        if (tok.size() != 16) return false;
        const char* b = tok.data();
        auto [p, ec] = std::from_chars(b, b + 16, out, 16);
        return ec == std::errc() && p == b + 16;
    }

    std::string dir_;
    std::string path_;
    mutable std::shared_mutex mutex_;
    std::unordered_map<std::uint64_t, double> map_;
    std::ofstream append_;
};

struct RowFailure {
    Eigen::Index row = 0;
    std::string detail;
};

struct BatchResult {
    Eigen::VectorXd values;  // NaN where the row failed
    std::vector<RowFailure> failures;
    std::size_t launches = 0;
    std::size_t cache_hits = 0;
};

inline Eigen::VectorXd read_model_output(const std::string& path, const std::string& column,
                                         Eigen::Index expected_rows);

namespace detail {

inline std::string replace_all(std::string s, const std::string& from, const std::string& to) {
    for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size())
        s.replace(pos, from.size(), to);
    return s;
}

inline std::filesystem::path fresh_exchange_dir() {
    static std::atomic<std::uint64_t> counter{0};
    auto dir = std::filesystem::temp_directory_path() /
               ("gpsens_run_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace detail

/// Evaluates the model on each row. Rows found in the cache are not
/// re-launched; the rest are grouped into batches of spec.batch_size in row
/// order, and batches run in parallel. Failures are per row: a batch whose
/// launch fails marks all its rows instead of throwing, so one bad point
/// does not discard an expensive campaign. Cache inserts happen after the
/// parallel phase, in row order, keeping the log file deterministic.
inline BatchResult evaluate_batch(const ModelSpec& spec, const Eigen::MatrixXd& rows,
                                  EvalCache* cache = nullptr, unsigned threads = 0) {
    spec.validate();
    if (rows.cols() != static_cast<Eigen::Index>(spec.param_names.size()))
        throw ShapeMismatch("evaluate_batch: row width does not match parameter names");

    const Eigen::Index n = rows.rows();
    BatchResult result;
    result.values.setConstant(n, std::numeric_limits<double>::quiet_NaN());

    std::uint64_t fp = spec.fingerprint();
    std::vector<Eigen::Index> missing;
    std::vector<std::uint64_t> keys(static_cast<std::size_t>(n), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::RowVectorXd row = rows.row(i);
        if (cache) {
            keys[static_cast<std::size_t>(i)] =
                EvalCache::row_key(fp, row.data(), static_cast<int>(row.size()));
            if (auto hit = cache->lookup(keys[static_cast<std::size_t>(i)])) {
                result.values[i] = *hit;
                ++result.cache_hits;
                continue;
            }
        }
        missing.push_back(i);
    }
    if (missing.empty()) return result;

    const auto batch = static_cast<std::size_t>(spec.batch_size);
    const std::size_t nbatches = (missing.size() + batch - 1) / batch;
    std::vector<std::vector<RowFailure>> batch_failures(nbatches);

    parallel_for(nbatches, threads, [&](std::size_t bi) {
        std::size_t begin = bi * batch;
        std::size_t end = std::min(missing.size(), begin + batch);
        auto count = static_cast<Eigen::Index>(end - begin);

        auto dir = detail::fresh_exchange_dir();
        auto in_path = (dir / "input.csv").string();
        auto out_path = (dir / "output.csv").string();
        {
            CsvWriter w(in_path);
            w.header(spec.param_names);
            std::vector<std::string> tokens(spec.param_names.size());
            for (std::size_t r = begin; r < end; ++r) {
                Eigen::Index row = missing[r];
                for (Eigen::Index c = 0; c < rows.cols(); ++c)
                    tokens[static_cast<std::size_t>(c)] = detail::format_double(rows(row, c));
                w.row(tokens);
            }
        }

        std::string command = detail::replace_all(spec.command, "{input}", in_path);
        command = detail::replace_all(command, "{output}", out_path);
        ProcessResult proc = run_command(command, spec.workdir, spec.timeout_s, spec.extra_env);

        auto fail_all = [&](const std::string& why) {
            for (std::size_t r = begin; r < end; ++r)
                batch_failures[bi].push_back({missing[r], why});
        };

        if (proc.timed_out) {
            fail_all("model timed out after " + detail::format_double(spec.timeout_s) + "s");
        } else if (proc.exit_code != 0) {
            std::string tail = detail::trim(proc.output_tail);
            fail_all("model exited with code " + std::to_string(proc.exit_code) +
                     (tail.empty() ? "" : ": " + tail));
        } else {
            try {
                Eigen::VectorXd out = read_model_output(out_path, spec.output_column, count);
                for (Eigen::Index r = 0; r < count; ++r) {
                    Eigen::Index row = missing[begin + static_cast<std::size_t>(r)];
                    if (std::isfinite(out[r]))
                        result.values[row] = out[r];
                    else
                        batch_failures[bi].push_back({row, "model returned a non-finite value"});
                }
            } catch (const Error& e) {
                fail_all(e.what());
            }
        }
        std::error_code ec;
        std::filesystem::remove_all(dir, ec);
    });

    result.launches = nbatches;
    for (auto& bf : batch_failures)
        for (auto& f : bf) result.failures.push_back(std::move(f));
    std::sort(result.failures.begin(), result.failures.end(),
              [](const RowFailure& x, const RowFailure& y) { return x.row < y.row; });

    if (cache)
        for (Eigen::Index i : missing)
            if (std::isfinite(result.values[i]))
                cache->insert(keys[static_cast<std::size_t>(i)], result.values[i]);
    return result;
}

/// Parses a model output file. With a column name, the file is a CSV with a
/// header; without one, it is bare numbers, one per line. The row count must
/// match the submitted batch.
inline Eigen::VectorXd read_model_output(const std::string& path, const std::string& column,
                                         Eigen::Index expected_rows) {
    if (!std::filesystem::exists(path))
        throw SchemaError("model wrote no output file");
    Eigen::VectorXd out(expected_rows);
    if (!column.empty()) {
        CsvTable table = read_csv(path);
        std::size_t c = table.column_index(column);
        if (static_cast<Eigen::Index>(table.rows()) != expected_rows)
            throw SchemaError("model output has " + std::to_string(table.rows()) +
                              " rows, expected " + std::to_string(expected_rows));
        for (Eigen::Index r = 0; r < expected_rows; ++r)
            out[r] = table.number(static_cast<std::size_t>(r), c);
        return out;
    }
    std::ifstream in(path);
    if (!in) throw SchemaError("cannot open model output '" + path + "'");
    std::string line;
    Eigen::Index r = 0;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (r >= expected_rows)
            throw SchemaError("model output has more rows than the submitted batch");
        double v = 0.0;
        if (!detail::parse_double(t, v))
            throw ParseError("malformed model output '" + t + "'", lineno, 1);
        out[r++] = v;
    }
    if (r != expected_rows)
        throw SchemaError("model output has " + std::to_string(r) + " rows, expected " +
                          std::to_string(expected_rows));
    return out;
}

/// Training table: physical inputs plus one output column.
struct TrainingData {
    Eigen::MatrixXd x;  // physical coordinates
    Eigen::VectorXd y;
};

inline void write_training_csv(const std::string& path, const ParameterSpace& space,
                               const Eigen::MatrixXd& x_physical, const Eigen::VectorXd& y,
                               const std::string& config_hash = {}) {
    if (x_physical.rows() != y.size() || x_physical.cols() != space.dimension())
        throw ShapeMismatch("write_training_csv: shape mismatch");
    CsvWriter out(path);
    if (!config_hash.empty()) out.comment("config_hash=" + config_hash);
    std::vector<std::string> header = space.names();
    header.push_back("output");
    out.header(header);
    std::vector<std::string> tokens(header.size());
    for (Eigen::Index r = 0; r < x_physical.rows(); ++r) {
        for (Eigen::Index c = 0; c < x_physical.cols(); ++c)
            tokens[static_cast<std::size_t>(c)] = detail::format_double(x_physical(r, c));
        tokens.back() = detail::format_double(y[r]);
        out.row(tokens);
    }
}

inline TrainingData read_training_csv(const std::string& path, const ParameterSpace& space) {
    CsvTable table = read_csv(path);
    std::vector<std::string> expected = space.names();
    expected.push_back("output");
    if (table.columns != expected)
        throw SchemaError("'" + path + "': header does not match the configured parameters");
    TrainingData data;
    data.x.resize(static_cast<Eigen::Index>(table.rows()), space.dimension());
    data.y.resize(static_cast<Eigen::Index>(table.rows()));
    for (std::size_t r = 0; r < table.rows(); ++r) {
        for (int c = 0; c < space.dimension(); ++c)
            data.x(static_cast<Eigen::Index>(r), c) = table.number(r, static_cast<std::size_t>(c));
        data.y[static_cast<Eigen::Index>(r)] =
            table.number(r, static_cast<std::size_t>(space.dimension()));
    }
    return data;
}

}  // namespace gpsens
