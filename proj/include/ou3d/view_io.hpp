#pragma once

// On-disk view bundles: view_<id>.png, view_<id>.depth, view_<id>.idx.

#include "ou3d/render.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

namespace ou3d {

inline void write_png(const std::filesystem::path& path, int height, int width, std::span<const std::uint8_t> rgb) {
  if (rgb.size() != std::size_t(height) * width * 3) throw Error("write_png: buffer size mismatch");
  std::unique_ptr<FILE, decltype(&std::fclose)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) throw Error("write_png: cannot open '" + path.string() + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("write_png: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("write_png: libpng error writing '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  // No timestamps or gamma chunks: identical pixels give identical bytes.
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(rgb.data() + std::size_t(y) * width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline std::vector<std::uint8_t> read_png(const std::filesystem::path& path, int& height, int& width) {
  std::unique_ptr<FILE, decltype(&std::fclose)> fp(std::fopen(path.string().c_str(), "rb"), &std::fclose);
  if (!fp) throw Error("read_png: cannot open '" + path.string() + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("read_png: libpng init failed");
  }
  std::vector<std::uint8_t> rgb;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("read_png: libpng error reading '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  if (png_get_rowbytes(png, info) != std::size_t(width) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("read_png: unsupported pixel layout in '" + path.string() + "'");
  }
  rgb.resize(std::size_t(height) * width * 3);
  for (int y = 0; y < height; ++y) png_read_row(png, rgb.data() + std::size_t(y) * width * 3, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return rgb;
}

inline std::filesystem::path view_path(const std::filesystem::path& dir, int id, std::string_view ext) {
  return dir / ("view_" + std::to_string(id) + std::string(ext));
}

inline void write_view_bundle(const std::filesystem::path& dir, const RenderedView& v) {
  std::filesystem::create_directories(dir);
  write_png(view_path(dir, v.rig_id, ".png"), v.height, v.width, v.rgb);
  write_depth_map(view_path(dir, v.rig_id, ".depth"), v);
  write_index_map(view_path(dir, v.rig_id, ".idx"), v);
}

inline RenderedView read_view_bundle(const std::filesystem::path& dir, int id) {
  RenderedView v;
  v.rig_id = id;
  int h = 0, w = 0, h2 = 0, w2 = 0, h3 = 0, w3 = 0;
  v.rgb = read_png(view_path(dir, id, ".png"), h, w);
  v.depth = read_raw_map<float>(view_path(dir, id, ".depth"), h2, w2);
  v.point_index = read_raw_map<std::uint32_t>(view_path(dir, id, ".idx"), h3, w3);
  if (h != h2 || h != h3 || w != w2 || w != w3)
    throw Error("view bundle " + std::to_string(id) + ": image, depth and index sizes disagree");
  v.height = h;
  v.width = w;
  return v;
}

}  // namespace ou3d
