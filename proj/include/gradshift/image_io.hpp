#pragma once

#include <string>

#include "gradshift/tensor.hpp"

namespace gradshift {

// Decodes an 8/16-bit PNG or an uncompressed 8/24/32-bit BMP to a grayscale
// [H,W,1] tensor in [0,1]. Color inputs are reduced with the usual luma
// weights; equal-channel pixels map to value/255 exactly.
Tensor load_image_gray(const std::string& path);

// 8-bit grayscale PNG from a [H,W] or [H,W,1] tensor in [0,1].
void save_png_gray(const std::string& path, const Tensor& img);

// 8-bit RGB PNG from a [H,W,3] tensor in [0,1].
void save_png_rgb(const std::string& path, const Tensor& img);

// Separable bilinear resize with edge clamping; [H,W,1] -> [out_h,out_w,1].
Tensor resize_bilinear(const Tensor& img, int out_h, int out_w);

// Nearest-neighbor resize; keeps binary masks binary.
Tensor resize_nearest(const Tensor& img, int out_h, int out_w);

} // namespace gradshift
