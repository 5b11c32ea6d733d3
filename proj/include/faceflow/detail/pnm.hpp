#pragma once

#include <cctype>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>

#include "faceflow/error.hpp"
#include "faceflow/inference.hpp"

namespace faceflow::detail {

// Binary PGM (P5) and PPM (P6) with maxval <= 255.
inline ImageHandle read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::FormatError, "cannot open image " + path);
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t += c;
    }
    return t;
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw Error(ErrorCode::FormatError, path + ": not a binary PGM/PPM");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw Error(ErrorCode::FormatError, path + ": bad header");
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw Error(ErrorCode::FormatError, path + ": unsupported header");
  auto img = std::make_shared<Image>();
  img->width = w;
  img->height = h;
  img->format = magic == "P5" ? PixelFormat::gray8 : PixelFormat::rgb8;
  const std::size_t n = static_cast<std::size_t>(w) * h * (magic == "P5" ? 1 : 3);
  img->bytes.resize(n);
  if (!in.read(reinterpret_cast<char*>(img->bytes.data()), static_cast<std::streamsize>(n))) {
    throw Error(ErrorCode::FormatError, path + ": truncated pixel data");
  }
  return img;
}

inline void write_pgm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  out << (img.format == PixelFormat::rgb8 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.bytes.data()), static_cast<std::streamsize>(img.bytes.size()));
  if (!out) throw Error(ErrorCode::FormatError, "cannot write " + path);
}

}  // namespace faceflow::detail
