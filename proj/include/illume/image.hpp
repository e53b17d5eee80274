#pragma once

#include <png.h>

#include <cstring>
#include <string>
#include <vector>

#include "illume/tensor.hpp"

namespace illume {

// Images travel as {H, W, 3} float tensors with values in [0, 1].

inline Tensor<float> load_png(const std::string& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw IoError("png read failed: " + path + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("png decode failed: " + path + ": " + image.message);
  }
  idx h = image.height, w = image.width;
  Tensor<float> out({h, w, 3});
  for (idx i = 0; i < out.numel(); ++i)
    out[i] = static_cast<float>(buffer[static_cast<std::size_t>(i)]) / 255.0f;
  return out;
}

inline void save_png(const std::string& path, const Tensor<float>& img) {
  Tensor<float> t = img;
  if (t.ndim() == 4) {
    if (t.dim(0) != 1) throw DomainError("save_png: batch must be 1");
    t = t.reshaped({t.dim(1), t.dim(2), t.dim(3)});
  }
  if (t.ndim() != 3 || t.dim(2) != 3)
    throw DomainError("save_png: expected {H,W,3}");
  idx h = t.dim(0), w = t.dim(1);
  std::vector<png_byte> buffer(static_cast<std::size_t>(h * w * 3));
  for (idx i = 0; i < t.numel(); ++i) {
    float v = t[i];
    v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    buffer[static_cast<std::size_t>(i)] =
        static_cast<png_byte>(v * 255.0f + 0.5f);
  }
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0,
                               nullptr))
    throw IoError("png write failed: " + path + ": " + image.message);
}

}  // namespace illume
