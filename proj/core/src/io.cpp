#include "topo/io.hpp"

#include <nlohmann/json.hpp>
#include <png.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

namespace topo::io {

void write_density(const fea::DensityField& d, const std::filesystem::path& path) {
  if (d.values.size() != static_cast<std::size_t>(d.nx) * d.ny) throw IoError("density size does not match its grid");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << nlohmann::json{{"nx", d.nx}, {"ny", d.ny}, {"density", d.values}}.dump() << '\n';
}

fea::DensityField read_density(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  fea::DensityField d;
  try {
    const auto j = nlohmann::json::parse(in);
    d.nx = j.at("nx").get<int>();
    d.ny = j.at("ny").get<int>();
    d.values = j.at("density").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  if (d.nx <= 0 || d.ny <= 0 || d.values.size() != static_cast<std::size_t>(d.nx) * d.ny) {
    throw IoError(path.string() + ": density size does not match nx * ny");
  }
  return d;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};

}  // namespace

void write_png(const fea::DensityField& d, const std::filesystem::path& path) {
  if (d.values.size() != static_cast<std::size_t>(d.nx) * d.ny) throw IoError("density size does not match its grid");
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng initialisation failed");
  }
  std::vector<png_byte> rows(static_cast<std::size_t>(d.nx) * d.ny);
  for (int r = 0; r < d.ny; ++r) {
    const int j = d.ny - 1 - r;
    for (int i = 0; i < d.nx; ++i) {
      const double v = std::clamp(d(i, j), 0.0, 1.0);
      rows[static_cast<std::size_t>(r) * d.nx + i] = static_cast<png_byte>(std::lround(255.0 * v));
    }
  }
  std::vector<png_bytep> ptrs(static_cast<std::size_t>(d.ny));
  for (int r = 0; r < d.ny; ++r) ptrs[r] = rows.data() + static_cast<std::size_t>(r) * d.nx;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(d.nx), static_cast<png_uint_32>(d.ny), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<std::uint8_t> read_png_gray(const std::filesystem::path& path, int& width, int& height) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) throw IoError("cannot read PNG " + path.string());
  img.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, px.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string());
  }
  width = static_cast<int>(img.width);
  height = static_cast<int>(img.height);
  return px;
}

}  // namespace topo::io
