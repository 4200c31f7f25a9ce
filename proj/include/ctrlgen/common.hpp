#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ctrlgen {

/// Base class for all errors raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Which section of the discharge summary is being generated.
enum class Task { bhc, di };

std::string_view to_string(Task task);
Task parse_task(std::string_view text);

/// A whitespace-delimited token together with its byte range in the source.
struct Token {
  std::string_view text;
  std::size_t begin = 0;
  std::size_t end = 0;
};

bool is_space(char c);

/// Splits on ASCII whitespace. Views point into `text`.
std::vector<Token> whitespace_tokens(std::string_view text);
std::vector<std::string> whitespace_words(std::string_view text);

std::string_view trim(std::string_view text);
bool is_blank(std::string_view text);
std::string to_lower(std::string_view text);
bool starts_with_icase(std::string_view text, std::string_view prefix);

std::string join(const std::vector<std::string>& parts, std::string_view sep);

std::size_t count_occurrences(std::string_view haystack, std::string_view needle);

/// Current UTC time formatted as ISO-8601 with second precision.
std::string utc_timestamp();

}  // namespace ctrlgen
