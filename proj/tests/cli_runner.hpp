#pragma once

// Runs the built CLI binary as a child process and captures its streams.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "steerfair/io.hpp"

namespace runner {

namespace fs = std::filesystem;

struct Outcome {
  int exit_code = -1;
  std::string out, err;
};

inline std::string quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

inline fs::path source_path(const std::string& rel) { return fs::path(STEERFAIR_SOURCE_DIR) / rel; }

// args are passed verbatim after the binary; stdout/stderr land next to `scratch`.
inline Outcome cli(const std::vector<std::string>& args, const fs::path& scratch) {
  fs::create_directories(scratch);
  auto out_p = scratch / "cli_stdout.txt", err_p = scratch / "cli_stderr.txt";
  std::string cmd = quote(STEERFAIR_CLI_PATH);
  for (const auto& a : args) cmd += " " + quote(a);
  cmd += " >" + quote(out_p.string()) + " 2>" + quote(err_p.string());
  int status = std::system(cmd.c_str());
  Outcome o;
  o.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  o.out = steerfair::io::read_file(out_p);
  o.err = steerfair::io::read_file(err_p);
  fs::remove(out_p);
  fs::remove(err_p);
  return o;
}

// relative path -> bytes for every regular file under root
inline std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = steerfair::io::read_file(e.path());
  return files;
}

}  // namespace runner
