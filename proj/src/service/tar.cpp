#include "promptmed/service/tar.hpp"

#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace promptmed {

namespace {
void octal(char* dst, std::size_t width, std::uint64_t v) {
  std::snprintf(dst, width, "%0*llo", static_cast<int>(width - 1), static_cast<unsigned long long>(v));
}
}  // namespace

void TarWriter::add(const std::string& name, const std::vector<std::uint8_t>& data) {
  if (name.size() >= 100) throw std::invalid_argument("tar: name too long");
  char h[512] = {};
  std::memcpy(h, name.data(), name.size());
  octal(h + 100, 8, 0644);
  octal(h + 108, 8, 0);
  octal(h + 116, 8, 0);
  octal(h + 124, 12, data.size());
  octal(h + 136, 12, 0);
  std::memset(h + 148, ' ', 8);
  h[156] = '0';
  std::memcpy(h + 257, "ustar", 6);
  std::memcpy(h + 263, "00", 2);
  unsigned sum = 0;
  for (unsigned char c : h) sum += c;
  std::snprintf(h + 148, 8, "%06o", sum);
  out_.insert(out_.end(), h, h + 512);
  out_.insert(out_.end(), data.begin(), data.end());
  out_.resize(out_.size() + (512 - data.size() % 512) % 512, 0);
}

std::vector<std::uint8_t> TarWriter::finish() {
  out_.resize(out_.size() + 1024, 0);
  return std::move(out_);
}

std::vector<TarEntry> read_tar(const std::vector<std::uint8_t>& b) {
  std::vector<TarEntry> out;
  std::size_t pos = 0;
  while (pos + 512 <= b.size()) {
    const char* h = reinterpret_cast<const char*>(b.data() + pos);
    if (h[0] == 0) break;
    TarEntry e;
    e.name.assign(h, strnlen(h, 100));
    const std::size_t size = std::strtoull(std::string(h + 124, 12).c_str(), nullptr, 8);
    pos += 512;
    if (pos + size > b.size()) throw std::invalid_argument("tar: truncated");
    e.data.assign(b.begin() + pos, b.begin() + pos + size);
    pos += (size + 511) / 512 * 512;
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace promptmed
