#pragma once

// Binary PGM (P5) with maxval 255 (8-bit) or 65535 (16-bit, big-endian
// samples). Values map to [0,1] as sample / maxval; writing quantizes with
// round-half-up after clamping to [0,1].

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "fanfreq/error.hpp"
#include "fanfreq/plane.hpp"

namespace fanfreq::io {

struct PgmImage {
  RealPlane pixels;  ///< values in [0,1]
  unsigned maxval = 255;
};

inline unsigned quantize(double v, unsigned maxval) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<unsigned>(std::floor(c * maxval + 0.5));
}

inline void write_pgm(std::ostream& out, const RealPlane& img, unsigned bits = 8) {
  if (bits != 8 && bits != 16) throw UsageError("PGM bit depth must be 8 or 16");
  const unsigned maxval = bits == 8 ? 255u : 65535u;
  out << "P5\n" << img.width() << " " << img.height() << "\n" << maxval << "\n";
  for (double v : img.values()) {
    const unsigned q = quantize(v, maxval);
    if (bits == 8) {
      out.put(static_cast<char>(q));
    } else {
      out.put(static_cast<char>(q >> 8));
      out.put(static_cast<char>(q & 0xff));
    }
  }
  if (!out) throw IoError("PGM: write failed");
}

namespace detail {

class HeaderReader {
 public:
  explicit HeaderReader(std::istream& in) : in_(in) {}

  std::streamoff offset() const { return offset_; }

  [[noreturn]] void fail(const std::string& what) const {
    throw IoError("PGM: " + what + " at byte offset " + std::to_string(offset_));
  }

  int get() {
    const int c = in_.get();
    if (c != EOF) ++offset_;
    return c;
  }

  void skip_space_and_comments() {
    for (;;) {
      const int c = in_.peek();
      if (c == '#') {
        while (get() != '\n') {
          if (in_.eof()) fail("unterminated comment");
        }
      } else if (c != EOF && std::isspace(c)) {
        get();
      } else {
        return;
      }
    }
  }

  unsigned long number(const char* field) {
    skip_space_and_comments();
    if (!std::isdigit(in_.peek())) fail(std::string("expected ") + field);
    unsigned long v = 0;
    while (std::isdigit(in_.peek())) {
      v = v * 10 + static_cast<unsigned long>(get() - '0');
      if (v > 1'000'000) fail(std::string(field) + " too large");
    }
    return v;
  }

 private:
  std::istream& in_;
  std::streamoff offset_ = 0;
};

}  // namespace detail

inline PgmImage read_pgm(std::istream& in) {
  detail::HeaderReader hr(in);
  if (hr.get() != 'P' || hr.get() != '5') hr.fail("missing P5 magic");
  const auto width = hr.number("width");
  const auto height = hr.number("height");
  const auto maxval = hr.number("maxval");
  if (width == 0 || height == 0) hr.fail("zero image dimension");
  if (maxval == 0 || maxval > 65535) hr.fail("maxval " + std::to_string(maxval) + " out of range");
  const int sep = hr.get();
  if (sep == EOF || !std::isspace(sep)) hr.fail("expected single whitespace after maxval");
  PgmImage img{RealPlane(height, width), static_cast<unsigned>(maxval)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    unsigned v = 0;
    if (maxval < 256) {
      const int c = hr.get();
      if (c == EOF) hr.fail("truncated pixel data");
      v = static_cast<unsigned>(c);
    } else {
      const int hi = hr.get();
      const int lo = hr.get();
      if (hi == EOF || lo == EOF) hr.fail("truncated pixel data");
      v = (static_cast<unsigned>(hi) << 8) | static_cast<unsigned>(lo);
    }
    if (v > maxval) hr.fail("sample exceeds maxval");
    img.pixels[i] = static_cast<double>(v) / static_cast<double>(maxval);
  }
  return img;
}

inline void save_pgm(const std::filesystem::path& path, const RealPlane& img, unsigned bits = 8) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_pgm(out, img, bits);
}

inline PgmImage load_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return read_pgm(in);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace fanfreq::io
