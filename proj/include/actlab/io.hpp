#pragma once

// File and formatting plumbing shared by checkpointing, reports and the CLI:
// atomic writes, FNV-1a digests, UTF-8 helpers, and shortest-roundtrip float
// formatting so every emitted number reparses to the same bits.

#include <cstdint>
#include <string>
#include <vector>

namespace actlab {

inline constexpr const char* kToolVersion = "actlab 0.1.0";

std::string read_file(const std::string& path);
// Writes to a temp file in the same directory, then renames into place.
void write_file_atomic(const std::string& path, const std::string& content);

std::uint64_t fnv1a64(const void* data, std::size_t n);
std::string hex64(std::uint64_t v);

std::vector<std::uint32_t> utf8_decode(const std::string& text);
std::string utf8_encode(std::uint32_t cp);

// Shortest decimal that round-trips the double (std::to_chars).
std::string double_str(double v);
std::string csv_quote(const std::string& s);

}  // namespace actlab
