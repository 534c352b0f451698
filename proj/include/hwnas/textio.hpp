#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace hwnas {

// Shortest decimal that parses back to the same double.
std::string format_real(double v);
// Strict parsers; `what` names the field in the error message.
double parse_real(std::string_view s, const std::string& what);
int parse_int(std::string_view s, const std::string& what);
std::uint64_t parse_u64(std::string_view s, const std::string& what);
bool parse_bool(std::string_view s, const std::string& what);

std::vector<std::string> split_words(std::string_view line);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

std::string utc_timestamp();

}  // namespace hwnas
