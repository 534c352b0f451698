#include "hwnas/textio.hpp"

#include <charconv>
#include <ctime>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace hwnas {

namespace {

template <class T>
T parse_number(std::string_view s, const std::string& what, const char* kind) {
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    throw std::runtime_error(std::string("bad ") + kind + " for " + what + ": '" + std::string(s) + "'");
  return v;
}

}  // namespace

std::string format_real(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw std::runtime_error("format_real failed");
  return std::string(buf, end);
}

double parse_real(std::string_view s, const std::string& what) { return parse_number<double>(s, what, "number"); }
int parse_int(std::string_view s, const std::string& what) { return parse_number<int>(s, what, "integer"); }
std::uint64_t parse_u64(std::string_view s, const std::string& what) {
  return parse_number<std::uint64_t>(s, what, "integer");
}

bool parse_bool(std::string_view s, const std::string& what) {
  if (s == "1" || s == "true" || s == "on") return true;
  if (s == "0" || s == "false" || s == "off") return false;
  throw std::runtime_error("bad boolean for " + what + ": '" + std::string(s) + "'");
}

std::vector<std::string> split_words(std::string_view line) {
  std::istringstream in{std::string(line)};
  std::vector<std::string> out;
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string utc_timestamp() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace hwnas
