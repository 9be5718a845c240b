#pragma once
// Report plumbing: manifest headers, table formatting, file output. Every
// report embeds its resolved run manifest; the timestamp sits alone on one
// header line so report bodies stay byte-identical across reruns.

#include <cstdint>
#include <string>
#include <vector>

namespace mesp {

inline constexpr const char* kVersionString = "0.1.0";

struct Manifest {
  std::string command;
  std::string layout;
  std::string config_origin;
  std::string dtype;
  uint64_t seed = 0;
  std::string config_echo;            // multi-line canonical key=value dump
  std::vector<std::string> outputs;   // paths this command writes
};

std::string iso_utc_now();
std::string manifest_header(const Manifest& m);

void write_text_file(const std::string& path, const std::string& content);

std::string fmt_double(double v, int precision);
std::string fmt_sci(double v, int precision);
std::string fmt_full(double v);  // shortest round-trip form
std::string fmt_int(int64_t v);

// GitHub-style pipe table.
std::string markdown_table(const std::vector<std::string>& header,
                           const std::vector<std::vector<std::string>>& rows);

std::string csv_join(const std::vector<std::string>& fields);

}  // namespace mesp
