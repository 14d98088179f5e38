#include "fewshot/ppm.hpp"

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <vector>

#include "fewshot/error.hpp"

namespace fewshot {

namespace {

// Reads one whitespace/comment-separated header token.
std::string next_token(std::istream& is, const std::string& path) {
  std::string tok;
  int c = is.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = is.get();
    } else if (std::isspace(c)) {
      c = is.get();
    } else {
      break;
    }
  }
  while (c != EOF && !std::isspace(c) && c != '#') {
    tok.push_back(char(c));
    c = is.get();
  }
  if (c == '#') is.unget();
  if (tok.empty()) throw DataError("truncated PPM header: " + path);
  return tok;
}

std::int64_t parse_dim(const std::string& tok, const std::string& path) {
  long long v = 0;
  try {
    v = std::stoll(tok);
  } catch (const std::exception&) {
    throw DataError("malformed PPM header token '" + tok + "' in " + path);
  }
  if (v <= 0) throw DataError("non-positive PPM dimension in " + path);
  return v;
}

}  // namespace

Tensor<float> read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open image: " + path);
  if (next_token(f, path) != "P6") throw DataError("not a binary PPM (P6): " + path);
  const std::int64_t w = parse_dim(next_token(f, path), path);
  const std::int64_t h = parse_dim(next_token(f, path), path);
  const std::int64_t maxval = parse_dim(next_token(f, path), path);
  if (maxval != 255) throw DataError("unsupported PPM maxval " + std::to_string(maxval) + " in " + path);
  // The header token reader consumed the single whitespace after maxval.
  std::vector<unsigned char> buf(std::size_t(3 * h * w));
  if (!f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size())))
    throw DataError("truncated PPM payload: " + path);

  Tensor<float> img({3, h, w});
  const float inv = 1.0f / 255.0f;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t c = 0; c < 3; ++c)
        img[c * h * w + y * w + x] = float(buf[std::size_t(3 * (y * w + x) + c)]) * inv;
  return img;
}

void write_ppm(const std::string& path, const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw DataError("write_ppm: image must be [3,H,W], got " + shape_str(image.shape()));
  const std::int64_t h = image.dim(1), w = image.dim(2);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path);
  f << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> buf(std::size_t(3 * h * w));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t c = 0; c < 3; ++c) {
        float v = image[c * h * w + y * w + x];
        v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
        buf[std::size_t(3 * (y * w + x) + c)] = (unsigned char)std::lround(v * 255.0f);
      }
  f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
  if (!f) throw DataError("failed writing image: " + path);
}

}  // namespace fewshot
