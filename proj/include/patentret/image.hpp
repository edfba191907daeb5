#pragma once

// Single-channel drawing rasters and their on-disk codecs (8-bit grayscale
// PNG, binary PGM).

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <iterator>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

namespace patentret {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint8_t kInk = 0;
inline constexpr std::uint8_t kBackground = 255;

struct DrawingImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, 0 = ink, 255 = background
  std::string patent_id;
  int view_index = 0;

  DrawingImage() = default;
  DrawingImage(std::size_t w, std::size_t h, std::uint8_t fill = kBackground)
      : width(w), height(h), pixels(w * h, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

  /// Pixels darker than the background threshold (<= 200).
  std::size_t ink_count() const {
    std::size_t n = 0;
    for (auto p : pixels) n += p <= 200;
    return n;
  }
  double ink_fraction() const {
    return pixels.empty() ? 0.0 : static_cast<double>(ink_count()) / pixels.size();
  }

  bool same_pixels(const DrawingImage& o) const {
    return width == o.width && height == o.height && pixels == o.pixels;
  }
};

namespace detail {

struct PngWriteGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteGuard() { png_destroy_write_struct(&png, &info); }
};

struct PngReadGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadGuard() { png_destroy_read_struct(&png, &info, nullptr); }
};

inline void png_error_fn(png_structp, png_const_charp msg) { throw ImageError(msg); }
inline void png_warn_fn(png_structp, png_const_charp) {}

inline void png_write_to_vector(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}

struct ReadCursor {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos;
};

inline void png_read_from_cursor(png_structp png, png_bytep out, png_size_t len) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + len > cur->size) png_error(png, "truncated PNG stream");
  std::copy_n(cur->data + cur->pos, len, out);
  cur->pos += len;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_png(const DrawingImage& img) {
  std::vector<std::uint8_t> out;
  detail::PngWriteGuard g;
  g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_fn,
                                  detail::png_warn_fn);
  if (!g.png) throw ImageError("png_create_write_struct failed");
  g.info = png_create_info_struct(g.png);
  if (!g.info) throw ImageError("png_create_info_struct failed");
  png_set_write_fn(g.png, &out, detail::png_write_to_vector, nullptr);
  png_set_IHDR(g.png, g.info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
               8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(g.png, g.info);
  for (std::size_t y = 0; y < img.height; ++y)
    png_write_row(g.png, const_cast<png_bytep>(img.pixels.data() + y * img.width));
  png_write_end(g.png, nullptr);
  return out;
}

inline DrawingImage decode_png(const std::uint8_t* data, std::size_t size) {
  if (size < 8 || png_sig_cmp(data, 0, 8)) throw ImageError("not a PNG stream");
  detail::PngReadGuard g;
  g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_fn,
                                 detail::png_warn_fn);
  if (!g.png) throw ImageError("png_create_read_struct failed");
  g.info = png_create_info_struct(g.png);
  if (!g.info) throw ImageError("png_create_info_struct failed");
  detail::ReadCursor cur{data, size, 0};
  png_set_read_fn(g.png, &cur, detail::png_read_from_cursor);
  png_read_info(g.png, g.info);
  const auto w = png_get_image_width(g.png, g.info);
  const auto h = png_get_image_height(g.png, g.info);
  const auto color = png_get_color_type(g.png, g.info);
  const auto depth = png_get_bit_depth(g.png, g.info);
  if (depth == 16) png_set_strip_16(g.png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(g.png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(g.png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(g.png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE)
    png_set_rgb_to_gray_fixed(g.png, 1, -1, -1);
  png_read_update_info(g.png, g.info);
  if (png_get_channels(g.png, g.info) != 1) throw ImageError("unsupported PNG channel layout");
  DrawingImage img(w, h);
  for (std::size_t y = 0; y < h; ++y) png_read_row(g.png, img.pixels.data() + y * w, nullptr);
  return img;
}

inline std::vector<std::uint8_t> encode_pgm(const DrawingImage& img) {
  std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline DrawingImage decode_pgm(const std::uint8_t* data, std::size_t size) {
  std::size_t pos = 0;
  auto token = [&]() {
    for (;;) {
      while (pos < size && std::isspace(data[pos])) ++pos;
      if (pos < size && data[pos] == '#') {
        while (pos < size && data[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    std::string t;
    while (pos < size && !std::isspace(data[pos])) t.push_back(static_cast<char>(data[pos++]));
    return t;
  };
  if (token() != "P5") throw ImageError("not a binary PGM stream");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw ImageError("malformed PGM header");
  }
  if (maxval != 255 || w == 0 || h == 0) throw ImageError("unsupported PGM (need 8-bit, nonempty)");
  ++pos;  // single whitespace after maxval
  if (pos + w * h > size) throw ImageError("truncated PGM payload");
  DrawingImage img(w, h);
  std::copy_n(data + pos, w * h, img.pixels.begin());
  return img;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Decodes PNG or binary PGM, sniffed from the leading bytes.
inline DrawingImage decode_image(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') return decode_pgm(bytes.data(), bytes.size());
  return decode_png(bytes.data(), bytes.size());
}

inline DrawingImage load_image(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  try {
    return decode_image(bytes);
  } catch (const ImageError& e) {
    throw ImageError(path.string() + ": " + e.what());
  }
}

inline void save_image(const DrawingImage& img, const std::filesystem::path& path) {
  const auto bytes = path.extension() == ".pgm" ? encode_pgm(img) : encode_png(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace patentret
