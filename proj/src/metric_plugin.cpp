#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <thread>

#include "ctrlgen/metrics.hpp"

namespace ctrlgen::metrics {

namespace {

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  ~Fd() { close(); }
  int get() const { return fd_; }
  void close() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

void write_all(int fd, const std::string& data) {
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = ::write(fd, data.data() + off, data.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      return;  // the plugin closed its stdin; its exit status reports the failure
    }
    off += static_cast<std::size_t>(n);
  }
}

std::string read_all(int fd) {
  std::string out;
  char buf[4096];
  for (;;) {
    const ssize_t n = ::read(fd, buf, sizeof buf);
    if (n < 0) {
      if (errno == EINTR) continue;
      break;
    }
    if (n == 0) break;
    out.append(buf, static_cast<std::size_t>(n));
  }
  return out;
}

}  // namespace

PluginSpec parse_plugin_spec(std::string_view text) {
  const auto eq = text.find('=');
  if (eq == std::string_view::npos || eq == 0 || eq + 1 == text.size()) {
    throw Error("plugin must be given as NAME=COMMAND, got '" + std::string(text) + "'");
  }
  return {std::string(text.substr(0, eq)), std::string(text.substr(eq + 1))};
}

std::vector<double> run_external_metric(const PluginSpec& plugin, const std::vector<Pair>& pairs,
                                        std::vector<std::string>* warnings) {
  // a plugin that exits early must not kill the host on write
  ::signal(SIGPIPE, SIG_IGN);

  int in_pipe[2];
  int out_pipe[2];
  if (::pipe2(in_pipe, O_CLOEXEC) != 0) throw MetricPluginError(plugin.name, "pipe failed");
  Fd in_read(in_pipe[0]), in_write(in_pipe[1]);
  if (::pipe2(out_pipe, O_CLOEXEC) != 0) throw MetricPluginError(plugin.name, "pipe failed");
  Fd out_read(out_pipe[0]), out_write(out_pipe[1]);

  const pid_t pid = ::fork();
  if (pid < 0) throw MetricPluginError(plugin.name, std::string("fork failed: ") + std::strerror(errno));
  if (pid == 0) {
    ::dup2(in_read.get(), STDIN_FILENO);
    ::dup2(out_write.get(), STDOUT_FILENO);
    ::execl("/bin/sh", "sh", "-c", plugin.command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  in_read.close();
  out_write.close();

  std::string input;
  for (const auto& p : pairs) input += nlohmann::json{{"hyp", p.hyp}, {"ref", p.ref}}.dump() + "\n";
  std::thread writer([&] {
    write_all(in_write.get(), input);
    in_write.close();
  });
  const std::string output = read_all(out_read.get());
  writer.join();

  int status = 0;
  while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
  }
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    const std::string how = WIFEXITED(status) ? "exit status " + std::to_string(WEXITSTATUS(status))
                                              : "signal " + std::to_string(WTERMSIG(status));
    throw MetricPluginError(plugin.name, "plugin failed with " + how);
  }

  std::vector<double> scores;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < output.size()) {
    auto end = output.find('\n', start);
    if (end == std::string::npos) end = output.size();
    const std::string line = output.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (is_blank(line)) continue;
    double score;
    try {
      const auto j = nlohmann::json::parse(line);
      score = j.at("score").get<double>();
    } catch (const nlohmann::json::exception&) {
      throw MetricPluginError(plugin.name, "malformed output line " + std::to_string(line_no) +
                                               ": " + line);
    }
    if (std::isnan(score)) {
      throw MetricPluginError(plugin.name, "score on line " + std::to_string(line_no) + " is NaN");
    }
    if (score < 0.0 || score > 1.0) {
      const double clamped = std::clamp(score, 0.0, 1.0);
      if (warnings) {
        warnings->push_back("metric plugin '" + plugin.name + "': score " + std::to_string(score) +
                            " on line " + std::to_string(line_no) + " clamped to " +
                            std::to_string(clamped));
      }
      score = clamped;
    }
    scores.push_back(score);
  }
  if (scores.size() != pairs.size()) {
    throw MetricPluginError(plugin.name, "count mismatch: " + std::to_string(scores.size()) +
                                             " scores for " + std::to_string(pairs.size()) +
                                             " pairs");
  }
  return scores;
}

}  // namespace ctrlgen::metrics
