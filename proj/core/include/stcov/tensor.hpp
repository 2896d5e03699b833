#pragma once

#include <string>
#include <vector>

#include "stcov/types.hpp"

namespace stcov {

/// Grayscale video: row-major within frame, frames consecutive.
struct FrameTensor {
  int height = 0, width = 0, frames = 0;
  std::vector<double> data;
  std::string provenance;

  FrameTensor() = default;
  FrameTensor(int h, int w, int f)
      : height(h), width(w), frames(f),
        data(static_cast<std::size_t>(h) * w * f, 0.0) {
    if (h < 1 || w < 1 || f < 1) throw BadInputError("FrameTensor: dims must be positive");
  }

  int pixels() const { return height * width; }
  double& at(int f, int r, int c) {
    return data[(static_cast<std::size_t>(f) * height + r) * width + c];
  }
  double at(int f, int r, int c) const {
    return data[(static_cast<std::size_t>(f) * height + r) * width + c];
  }

  /// Vectorized clip of n_frames starting at start_frame (frame-major).
  Vector clip(int start_frame, int n_frames) const;
  /// Vectorized clip restricted to a pixel rectangle.
  Vector block_clip(int start_frame, int n_frames, int r0, int c0, int bh, int bw) const;

  FrameTensor cropped(int top, int left, int bottom, int right) const;
  FrameTensor reversed() const;
};

/// STEN file: magic "STEN", version 0x01, ndim byte, little-endian u64 dims
/// (height, width, frames), then 64-bit little-endian IEEE-754 payload.
FrameTensor read_tensor(const std::string& path);
void write_tensor(const FrameTensor& t, const std::string& path);

/// Import a directory of 8-bit PGM frames (P5 or P2), sorted by filename;
/// pixel values scale to [0, 1].
FrameTensor import_pgm_dir(const std::string& dir);

/// Per-frame 0/1 labels, CSV with a "frame,label" header.
std::vector<int> read_labels(const std::string& path);
void write_labels(const std::vector<int>& labels, const std::string& path);

}  // namespace stcov
