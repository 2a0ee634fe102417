#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace rareloss::io {

// FNV-1a, 64 bit. Used for data provenance and resume manifests.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(std::span<const double> values, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

// Shortest decimal that parses back to the identical double.
std::string format_double(double value);
double parse_double(std::string_view text);

std::string read_file(const std::filesystem::path& path);
// Writes through a temporary sibling and renames, so readers never see a
// partially written file.
void write_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace rareloss::io
