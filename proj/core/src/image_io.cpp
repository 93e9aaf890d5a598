#include <cmath>
#include <fstream>
#include <string>

#include "propih/data.hpp"

namespace propih {

namespace {

// Reads the three header numbers of a P5/P6 file, allowing arbitrary
// whitespace and '#' comments between tokens, then positions the stream one
// whitespace byte before the raster.
struct PnmHeader {
  int width = 0, height = 0, maxval = 0;
};

int next_header_int(std::istream& in, const std::string& path) {
  for (;;) {
    int c = in.peek();
    if (c == EOF) fail_validation(path, ": truncated header");
    if (c == '#') {
      std::string line;
      std::getline(in, line);
      continue;
    }
    if (std::isspace(c)) {
      in.get();
      continue;
    }
    break;
  }
  int v = -1;
  if (!(in >> v) || v < 0) fail_validation(path, ": malformed header number");
  return v;
}

PnmHeader read_header(std::istream& in, const char* magic, const std::string& path) {
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (!in || m0 != magic[0] || m1 != magic[1])
    fail_validation(path, ": expected ", magic, " file");
  PnmHeader h;
  h.width = next_header_int(in, path);
  h.height = next_header_int(in, path);
  h.maxval = next_header_int(in, path);
  if (h.width <= 0 || h.height <= 0)
    fail_validation(path, ": bad extent ", h.width, "x", h.height);
  if (h.maxval != 255) fail_validation(path, ": maxval must be 255, got ", h.maxval);
  int c = in.get();  // single whitespace byte before raster
  if (c == EOF || !std::isspace(c)) fail_validation(path, ": malformed raster separator");
  return h;
}

std::string read_raster(std::istream& in, std::size_t n, const std::string& path) {
  std::string buf(n, '\0');
  in.read(buf.data(), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    fail_validation(path, ": raster truncated, wanted ", n, " bytes");
  if (in.get() != EOF) fail_validation(path, ": trailing bytes after raster");
  return buf;
}

inline unsigned char to_byte(float v) {
  float c = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
  return static_cast<unsigned char>(c * 255.f + 0.5f);
}

}  // namespace

Tensor<float> load_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail_validation("load_image: cannot open ", path);
  PnmHeader h = read_header(f, "P6", path);
  const std::size_t n = static_cast<std::size_t>(h.width) * h.height;
  std::string raster = read_raster(f, n * 3, path);
  std::vector<float> data(n * 3);
  // interleaved RGB bytes -> planar channel layout
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c)
      data[static_cast<std::size_t>(c) * n + i] =
          static_cast<float>(static_cast<unsigned char>(raster[i * 3 + c])) / 255.f;
  return Tensor<float>({1, 3, h.height, h.width}, std::move(data));
}

void save_image(const Tensor<float>& image, const std::string& path) {
  if (!image.defined() || image.shape().size() != 4 || image.dim(0) != 1 || image.dim(1) != 3)
    fail_validation("save_image: expected [1,3,H,W], got ",
                    image.defined() ? shape_str(image.shape()) : "undefined");
  const int h = image.dim(2), w = image.dim(3);
  const std::size_t n = static_cast<std::size_t>(h) * w;
  const auto& v = image.values();
  std::string raster(n * 3, '\0');
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c)
      raster[i * 3 + c] =
          static_cast<char>(to_byte(v[static_cast<std::size_t>(c) * n + i]));
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail_validation("save_image: cannot open ", path);
  f << "P6\n" << w << ' ' << h << "\n255\n";
  f.write(raster.data(), static_cast<std::streamsize>(raster.size()));
  if (!f) fail_validation("save_image: write failed for ", path);
}

Tensor<float> load_mask(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail_validation("load_mask: cannot open ", path);
  PnmHeader h = read_header(f, "P5", path);
  const std::size_t n = static_cast<std::size_t>(h.width) * h.height;
  std::string raster = read_raster(f, n, path);
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i)
    data[i] = static_cast<unsigned char>(raster[i]) >= 128 ? 1.f : 0.f;
  return Tensor<float>({1, 1, h.height, h.width}, std::move(data));
}

void save_mask(const Tensor<float>& mask, const std::string& path) {
  if (!mask.defined() || mask.shape().size() != 4 || mask.dim(0) != 1 || mask.dim(1) != 1)
    fail_validation("save_mask: expected [1,1,H,W], got ",
                    mask.defined() ? shape_str(mask.shape()) : "undefined");
  const int h = mask.dim(2), w = mask.dim(3);
  const auto& v = mask.values();
  std::string raster(static_cast<std::size_t>(h) * w, '\0');
  for (std::size_t i = 0; i < raster.size(); ++i) {
    if (!(v[i] == 0.f || v[i] == 1.f))
      fail_validation("save_mask: mask values must be exactly 0 or 1");
    raster[i] = static_cast<char>(v[i] == 1.f ? 255 : 0);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail_validation("save_mask: cannot open ", path);
  f << "P5\n" << w << ' ' << h << "\n255\n";
  f.write(raster.data(), static_cast<std::streamsize>(raster.size()));
  if (!f) fail_validation("save_mask: write failed for ", path);
}

}  // namespace propih
