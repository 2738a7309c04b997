#include "tabledet/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace tabledet {

namespace {

// Areas from the same corner differences as the intersection, so that
// iou(a, a) == 1 exactly despite rounding in cx +- w/2.
double corner_area(const BoxCxCyWh& b) { return (b.x2() - b.x1()) * (b.y2() - b.y1()); }

}  // namespace

double iou(const BoxCxCyWh& a, const BoxCxCyWh& b) {
  const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double inter = ix * iy;
  const double uni = corner_area(a) + corner_area(b) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double giou(const BoxCxCyWh& a, const BoxCxCyWh& b) {
  const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double inter = ix * iy;
  const double uni = corner_area(a) + corner_area(b) - inter;
  const double hx = std::max(a.x2(), b.x2()) - std::min(a.x1(), b.x1());
  const double hy = std::max(a.y2(), b.y2()) - std::min(a.y1(), b.y1());
  const double hull = hx * hy;
  const double i = uni > 0 ? inter / uni : 0.0;
  return hull > 0 ? i - (hull - uni) / hull : i;
}

namespace {

struct Corners {
  Tensor x1, y1, x2, y2;  // each [1]
};

Corners corners_of(const Tensor& box) {
  Tensor cx = slice_cols(reshape(box, {1, 4}), 0, 1);
  Tensor cy = slice_cols(reshape(box, {1, 4}), 1, 1);
  Tensor w = slice_cols(reshape(box, {1, 4}), 2, 1);
  Tensor h = slice_cols(reshape(box, {1, 4}), 3, 1);
  Tensor hw = scale(w, 0.5), hh = scale(h, 0.5);
  return {sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)};
}

}  // namespace

Tensor giou_t(const Tensor& a, const Tensor& b) {
  Corners ca = corners_of(a), cb = corners_of(b);
  Tensor zero = Tensor::zeros({1, 1});
  Tensor iw = emax(zero, sub(emin(ca.x2, cb.x2), emax(ca.x1, cb.x1)));
  Tensor ih = emax(zero, sub(emin(ca.y2, cb.y2), emax(ca.y1, cb.y1)));
  Tensor inter = mul(iw, ih);
  Tensor area_a = mul(sub(ca.x2, ca.x1), sub(ca.y2, ca.y1));
  Tensor area_b = mul(sub(cb.x2, cb.x1), sub(cb.y2, cb.y1));
  Tensor uni = sub(add(area_a, area_b), inter);
  Tensor hw = sub(emax(ca.x2, cb.x2), emin(ca.x1, cb.x1));
  Tensor hh = sub(emax(ca.y2, cb.y2), emin(ca.y1, cb.y1));
  Tensor hull = mul(hw, hh);
  // iou - (hull - union)/hull, with a small epsilon guard in denominators
  Tensor i = mul(inter, reciprocal(uni));
  Tensor excess = mul(sub(hull, uni), reciprocal(hull));
  return reshape(sub(i, excess), {1});
}

Tensor roi_align(const Tensor& feat, const BoxCxCyWh& box, int S) {
  Tensor b = box.tensor();
  return roi_align(feat, b, S);
}

Tensor positional_grid(int H, int W, int d, double temperature) {
  if (d % 4 != 0) throw ConfigError("positional_grid: d must be divisible by 4");
  const int nf = d / 4;
  Tensor out = Tensor::zeros({H * W, d});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double px = (x + 0.5) / W, py = (y + 0.5) / H;
      const long row = static_cast<long>(y) * W + x;
      for (int f = 0; f < nf; ++f) {
        const double w = std::pow(temperature, -static_cast<double>(f) / nf);
        out.v[row * d + f] = std::sin(px * w);
        out.v[row * d + nf + f] = std::cos(px * w);
        out.v[row * d + 2 * nf + f] = std::sin(py * w);
        out.v[row * d + 3 * nf + f] = std::cos(py * w);
      }
    }
  return out;
}

}  // namespace tabledet
