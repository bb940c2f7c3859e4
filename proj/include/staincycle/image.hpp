#pragma once

#include <torch/torch.h>

#include <stdexcept>
#include <string>

namespace staincycle {

// An image patch is a float32 CHW tensor with values in [-1, 1].
// Every module exchanges patches in this representation; conversion to
// byte/unit ranges happens only at the io boundary.
using ImagePatch = torch::Tensor;

inline void check_image(const ImagePatch& img, const std::string& what = "image") {
  if (img.dim() != 3 || img.size(0) != 3) {
    throw std::invalid_argument(what + ": expected 3xHxW tensor, got " +
                                std::to_string(img.dim()) + " dims");
  }
  if (img.scalar_type() != torch::kFloat32) {
    throw std::invalid_argument(what + ": expected float32");
  }
}

inline void check_image_range(const ImagePatch& img, const std::string& what = "image") {
  check_image(img, what);
  const double lo = img.min().item<double>();
  const double hi = img.max().item<double>();
  if (lo < -1.0 - 1e-6 || hi > 1.0 + 1e-6) {
    throw std::invalid_argument(what + ": values outside [-1,1], min=" + std::to_string(lo) +
                                " max=" + std::to_string(hi));
  }
}

inline void check_shape_divisible(const ImagePatch& img, int64_t divisor = 4) {
  if (img.size(1) % divisor != 0 || img.size(2) % divisor != 0) {
    throw std::invalid_argument("image spatial dims must be divisible by " +
                                std::to_string(divisor));
  }
}

// [-1,1] <-> [0,1] affine maps used between the generator space and the
// segmentation harness's standardisation.
inline torch::Tensor to_unit_range(const torch::Tensor& x) { return (x + 1.0) * 0.5; }
inline torch::Tensor from_unit_range(const torch::Tensor& x) { return x * 2.0 - 1.0; }

}  // namespace staincycle
