#include "cir/io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "cir/error.hpp"

namespace cir::io {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    require(static_cast<bool>(out), ErrorCode::Io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, ErrorCode::Io, "rename to " + path.string() + " failed: " + ec.message());
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

std::string_view ByteReader::bytes(std::size_t n) {
  require(n <= remaining(), ErrorCode::TruncatedFile,
          "needed " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) + ", have " +
              std::to_string(remaining()));
  auto out = data_.substr(pos_, n);
  pos_ += n;
  return out;
}

}  // namespace cir::io
