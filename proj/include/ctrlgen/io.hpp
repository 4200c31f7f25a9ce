#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "ctrlgen/common.hpp"

namespace ctrlgen::io {

using json = nlohmann::json;

class IoError : public Error {
 public:
  using Error::Error;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

/// Reads a record-per-line file. Blank lines are skipped; a malformed line
/// raises IoError naming the line number.
std::vector<json> read_jsonl(const std::filesystem::path& path);

/// Appends one compact JSON object per line, flushing after every record so
/// that a killed process leaves only whole records behind.
class JsonlWriter {
 public:
  enum class Mode { append, truncate };

  JsonlWriter(const std::filesystem::path& path, Mode mode);

  void write(const json& record);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::mutex mutex_;
};

/// Serialises one record exactly as JsonlWriter would.
std::string to_jsonl_line(const json& record);

/// A parsed comma-separated table: header names plus rows of raw fields.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Index of `column` in the header, or throws IoError listing the header.
  std::size_t column(std::string_view name) const;
  bool has_column(std::string_view name) const;
};

/// RFC 4180 reader: quoted fields may hold commas, doubled quotes and newlines.
CsvTable parse_csv(std::string_view text);
CsvTable read_csv(const std::filesystem::path& path);

std::string csv_escape(std::string_view field);

}  // namespace ctrlgen::io
