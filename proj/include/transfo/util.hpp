#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace transfo {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string to_hex(std::uint64_t value);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

/// Writes to a sibling temp file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

/// Keeps large freed blocks in the heap instead of returning them to the OS.
/// Training allocates and frees the same activation sizes every step; without
/// this glibc re-maps and re-faults them each time. Idempotent; no-op off glibc.
void retain_freed_memory();

}  // namespace transfo
