#include "mqmk/common/binary_io.hpp"

#include <cstdio>
#include <memory>

namespace mqmk::io {

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!f) throw FormatError(path + ": cannot open for writing");
  if (!bytes.empty() && std::fwrite(bytes.data(), 1, bytes.size(), f.get()) != bytes.size()) {
    throw FormatError(path + ": short write");
  }
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> f(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!f) throw FormatError(path + ": cannot open for reading");
  std::fseek(f.get(), 0, SEEK_END);
  long sz = std::ftell(f.get());
  if (sz < 0) throw FormatError(path + ": cannot determine size");
  std::fseek(f.get(), 0, SEEK_SET);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(sz));
  if (sz > 0 && std::fread(bytes.data(), 1, bytes.size(), f.get()) != bytes.size()) {
    throw FormatError(path + ": short read");
  }
  return bytes;
}

}  // namespace mqmk::io
