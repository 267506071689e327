#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace promptmed {

/// Minimal ustar writer with fixed metadata (mtime 0) so output is reproducible.
class TarWriter {
 public:
  void add(const std::string& name, const std::vector<std::uint8_t>& data);
  std::vector<std::uint8_t> finish();

 private:
  std::vector<std::uint8_t> out_;
};

struct TarEntry {
  std::string name;
  std::vector<std::uint8_t> data;
};
std::vector<TarEntry> read_tar(const std::vector<std::uint8_t>& bytes);

}  // namespace promptmed
