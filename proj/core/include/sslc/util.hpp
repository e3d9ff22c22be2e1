#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sslc {

// Base error for everything raised by the library. CLI maps these to exit 1.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Raised for malformed configuration; CLI maps these to exit 2.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

namespace util {

// Decodes a UTF-8 string into codepoints. Invalid bytes decode as U+FFFD.
std::vector<char32_t> utf8_decode(std::string_view s);

// Encodes a single codepoint back to UTF-8.
std::string utf8_encode(char32_t cp);

bool is_unicode_space(char32_t cp);

// ASCII-only lowercasing; non-ASCII codepoints pass through.
std::string ascii_lower(std::string_view s);

std::string trim(std::string_view s);

std::vector<std::string> split(std::string_view s, char sep);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

// FNV-1a over bytes, hex-encoded. Used for vocabulary fingerprints.
std::uint64_t fnv1a(std::string_view bytes);
std::string fnv1a_hex(std::string_view bytes);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view content);

// Formats a double with 9 significant digits (CSV export contract).
std::string format_sig9(double v);

// Thread cap resolved from SSLC_THREADS (0 or unset = hardware count).
int max_threads();

// Runs fn(i) for i in [0, n), sliced over at most max_threads() threads.
// Falls back to a plain loop when one thread suffices.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace util
}  // namespace sslc
