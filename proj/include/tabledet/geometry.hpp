#pragma once

#include <vector>

#include "tabledet/tensor.hpp"

namespace tabledet {

// Normalized center-format box. Corners cx +- w/2 may leave [0,1] during
// math; clipping happens only at I/O boundaries.
struct BoxCxCyWh {
  double cx = 0, cy = 0, w = 0, h = 0;

  double x1() const { return cx - w / 2; }
  double y1() const { return cy - h / 2; }
  double x2() const { return cx + w / 2; }
  double y2() const { return cy + h / 2; }
  double area() const { return w * h; }

  bool valid() const { return cx >= 0 && cx <= 1 && cy >= 0 && cy <= 1 && w > 0 && h > 0; }

  Tensor tensor() const { return Tensor::from({4}, {cx, cy, w, h}); }
  static BoxCxCyWh from_tensor(const Tensor& t) { return {t.v[0], t.v[1], t.v[2], t.v[3]}; }
};

double iou(const BoxCxCyWh& a, const BoxCxCyWh& b);
double giou(const BoxCxCyWh& a, const BoxCxCyWh& b);

// Differentiable GIoU between two [4] cxcywh tensors, composed from tape
// primitives so gradients flow to both boxes.
Tensor giou_t(const Tensor& a, const Tensor& b);

// Differentiable kernels live in tensor.hpp: roi_align, bilinear_sample,
// sinusoidal_embed. Convenience overloads on the box value type:
Tensor roi_align(const Tensor& feat, const BoxCxCyWh& box, int S);

// Fixed 2-D sinusoidal position codes for an H x W lattice, [H*W x d].
Tensor positional_grid(int H, int W, int d, double temperature = 10000.0);

}  // namespace tabledet
