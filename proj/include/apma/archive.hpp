#pragma once

// Minimal ustar reader/writer for single-file checkpoint archives.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace apma {

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// In-memory archive: ordered entries of raw bytes.
class Archive {
 public:
  void put(const std::string& name, std::string bytes) {
    if (name.empty() || name.size() > 99) throw ArchiveError("archive entry name too long: " + name);
    if (!entries_.count(name)) order_.push_back(name);
    entries_[name] = std::move(bytes);
  }
  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  const std::string& get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ArchiveError("archive has no entry '" + name + "'");
    return it->second;
  }
  const std::vector<std::string>& names() const { return order_; }

  void write(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ArchiveError("cannot open " + path.string() + " for writing");
    for (const auto& name : order_) {
      const auto& data = entries_.at(name);
      const auto hdr = header(name, data.size());
      os.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
      os.write(data.data(), static_cast<std::streamsize>(data.size()));
      const std::size_t pad = (512 - data.size() % 512) % 512;
      os.write(std::string(pad, '\0').data(), static_cast<std::streamsize>(pad));
    }
    const std::string end(1024, '\0');
    os.write(end.data(), static_cast<std::streamsize>(end.size()));
    if (!os) throw ArchiveError("write failed: " + path.string());
  }

  static Archive read(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ArchiveError("cannot open archive " + path.string());
    Archive a;
    std::vector<char> hdr(512);
    while (is.read(hdr.data(), 512)) {
      if (std::all_of(hdr.begin(), hdr.end(), [](char c) { return c == 0; })) break;
      if (std::memcmp(hdr.data() + 257, "ustar", 5) != 0) throw ArchiveError("not a ustar archive: " + path.string());
      unsigned stored = 0, computed = 0;
      stored = static_cast<unsigned>(parse_octal(hdr.data() + 148, 8));
      for (int i = 0; i < 512; ++i) computed += (i >= 148 && i < 156) ? ' ' : static_cast<unsigned char>(hdr[i]);
      if (stored != computed) throw ArchiveError("corrupt archive header in " + path.string());
      const std::string name(hdr.data(), strnlen(hdr.data(), 100));
      const auto size = parse_octal(hdr.data() + 124, 12);
      std::string data(size, '\0');
      if (!is.read(data.data(), static_cast<std::streamsize>(size))) throw ArchiveError("truncated archive " + path.string());
      is.ignore(static_cast<std::streamsize>((512 - size % 512) % 512));
      a.put(name, std::move(data));
    }
    return a;
  }

 private:
  static std::uint64_t parse_octal(const char* p, std::size_t n) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n && p[i]; ++i) {
      if (p[i] == ' ') continue;
      if (p[i] < '0' || p[i] > '7') throw ArchiveError("bad octal field in archive header");
      v = v * 8 + static_cast<std::uint64_t>(p[i] - '0');
    }
    return v;
  }
  static void put_octal(char* dst, std::size_t width, std::uint64_t v) {
    std::string s(width - 1, '0');
    for (std::size_t i = width - 1; i-- > 0; v >>= 3) s[i] = static_cast<char>('0' + (v & 7));
    std::memcpy(dst, s.data(), width - 1);
    dst[width - 1] = '\0';
  }
  static std::vector<char> header(const std::string& name, std::size_t size) {
    std::vector<char> h(512, '\0');
    std::memcpy(h.data(), name.data(), name.size());
    put_octal(h.data() + 100, 8, 0644);
    put_octal(h.data() + 108, 8, 0);
    put_octal(h.data() + 116, 8, 0);
    put_octal(h.data() + 124, 12, size);
    put_octal(h.data() + 136, 12, 0);  // fixed mtime keeps archives byte-reproducible
    h[156] = '0';
    std::memcpy(h.data() + 257, "ustar", 6);
    std::memcpy(h.data() + 263, "00", 2);
    unsigned sum = 0;
    for (int i = 0; i < 512; ++i) sum += (i >= 148 && i < 156) ? ' ' : static_cast<unsigned char>(h[i]);
    put_octal(h.data() + 148, 7, sum);
    h[155] = ' ';
    return h;
  }

  std::vector<std::string> order_;
  std::map<std::string, std::string> entries_;
};

}  // namespace apma
