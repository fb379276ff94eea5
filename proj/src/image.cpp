#include "lightseg/image.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

namespace lightseg {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

ImageU8 read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw data_error("cannot open image: " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                           nullptr);
  if (!png) throw data_error("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw data_error("libpng info init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw data_error("failed to decode PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  const png_uint_32 width = png_get_image_width(png, info);
  const png_uint_32 height = png_get_image_height(png, info);
  const int color_type = png_get_color_type(png, info);
  const int bit_depth = png_get_bit_depth(png, info);

  if (bit_depth == 16) png_set_strip_16(png);
  if (bit_depth < 8) png_set_packing(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  // palette images keep their raw indices: masks store class ids that way
  png_read_update_info(png, info);

  const int out_channels = (color_type == PNG_COLOR_TYPE_RGB ||
                            color_type == PNG_COLOR_TYPE_RGB_ALPHA)
                               ? 3
                               : 1;
  const std::size_t rowbytes = png_get_rowbytes(png, info);

  ImageU8 img;
  img.height = static_cast<int>(height);
  img.width = static_cast<int>(width);
  img.channels = out_channels;
  img.pixels.resize(static_cast<std::size_t>(height) * width * out_channels);
  if (rowbytes != static_cast<std::size_t>(width) * out_channels) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw data_error("unsupported PNG layout in " + path.string());
  }

  std::vector<png_bytep> rows(height);
  for (png_uint_32 y = 0; y < height; ++y) {
    rows[y] = img.pixels.data() + static_cast<std::size_t>(y) * rowbytes;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const std::filesystem::path& path, const ImageU8& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw std::invalid_argument("write_png: channels must be 1 or 3");
  }
  if (image.pixels.size() !=
      static_cast<std::size_t>(image.height) * image.width * image.channels) {
    throw std::invalid_argument("write_png: pixel buffer does not match dimensions");
  }
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw data_error("cannot open image for writing: " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                            nullptr);
  if (!png) throw data_error("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw data_error("libpng info init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw data_error("failed to encode PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width),
               static_cast<png_uint_32>(image.height), 8,
               image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<png_const_bytep> rows(image.height);
  const std::size_t rowbytes =
      static_cast<std::size_t>(image.width) * image.channels;
  for (int y = 0; y < image.height; ++y) {
    rows[y] = image.pixels.data() + static_cast<std::size_t>(y) * rowbytes;
  }
  png_write_image(png, const_cast<png_bytepp>(rows.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace lightseg
