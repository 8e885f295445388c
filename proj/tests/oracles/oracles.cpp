#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace oracle {

std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                     std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

double max_relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

namespace {

double one_way(const PointCloud& from, const PointCloud& to) {
  double sum = 0.0;
  int n = 0;
  for (int y = 0; y < from.height(); ++y) {
    for (int x = 0; x < from.width(); ++x) {
      if (!from.valid(y, x)) continue;
      double best = std::numeric_limits<double>::infinity();
      for (int v = 0; v < to.height(); ++v) {
        for (int u = 0; u < to.width(); ++u) {
          if (to.valid(v, u)) best = std::min(best, (from.at(y, x) - to.at(v, u)).norm());
        }
      }
      if (std::isfinite(best)) {
        sum += best;
        ++n;
      }
    }
  }
  return n ? sum / n : 0.0;
}

}  // namespace

double chamfer(const PointCloud& a, const PointCloud& b) { return one_way(a, b) + one_way(b, a); }

double ssim_brute(const Image& x, const Image& y, int window) {
  const double c1 = 0.01 * 0.01;
  const double c2 = 0.03 * 0.03;
  const int n = window * window;
  double total = 0.0;
  for (int c = 0; c < x.channels(); ++c) {
    double channel_sum = 0.0;
    int windows = 0;
    for (int y0 = 0; y0 + window <= x.height(); ++y0) {
      for (int x0 = 0; x0 + window <= x.width(); ++x0) {
        std::vector<double> a, b;
        for (int dy = 0; dy < window; ++dy) {
          for (int dx = 0; dx < window; ++dx) {
            a.push_back(x(y0 + dy, x0 + dx, c));
            b.push_back(y(y0 + dy, x0 + dx, c));
          }
        }
        double ma = 0, mb = 0;
        for (int i = 0; i < n; ++i) {
          ma += a[i];
          mb += b[i];
        }
        ma /= n;
        mb /= n;
        double va = 0, vb = 0, cov = 0;
        for (int i = 0; i < n; ++i) {
          va += (a[i] - ma) * (a[i] - ma);
          vb += (b[i] - mb) * (b[i] - mb);
          cov += (a[i] - ma) * (b[i] - mb);
        }
        va /= n - 1;
        vb /= n - 1;
        cov /= n - 1;
        channel_sum += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                       ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++windows;
      }
    }
    total += channel_sum / windows;
  }
  return total / x.channels();
}

Eigen::Matrix3d rotation_series(const Vec3& omega) {
  Eigen::Matrix3d w;
  w << 0, -omega.z(), omega.y(), omega.z(), 0, -omega.x(), -omega.y(), omega.x(), 0;
  Eigen::Matrix3d term = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d sum = term;
  for (int i = 1; i < 60; ++i) {
    term = term * w / i;
    sum += term;
  }
  return sum;
}

Image splat_brute(const Image& channels, const Image& flow, const Mask& valid,
                  const Image& importance, double sharpness, Image* coverage) {
  const int h = channels.height();
  const int w = channels.width();
  const int c = channels.channels();
  Image num(h, w, c), den(h, w, 1), cov(h, w, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!valid(y, x)) continue;
      const double tx = x + flow(y, x, 0);
      const double ty = y + flow(y, x, 1);
      const double fx = std::floor(tx);
      const double fy = std::floor(ty);
      const double e = std::exp(sharpness * importance(y, x));
      for (int cy = 0; cy < 2; ++cy) {
        for (int cx = 0; cx < 2; ++cx) {
          const int px = static_cast<int>(fx) + cx;
          const int py = static_cast<int>(fy) + cy;
          if (px < 0 || py < 0 || px >= w || py >= h) continue;
          const double b = (1 - std::abs(tx - px)) * (1 - std::abs(ty - py));
          if (b <= 0) continue;
          for (int k = 0; k < c; ++k) num(py, px, k) += b * e * channels(y, x, k);
          den(py, px) += b * e;
          cov(py, px) += b;
        }
      }
    }
  }
  Image out(h, w, c);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (cov(y, x) <= 1e-6) continue;
      for (int k = 0; k < c; ++k) out(y, x, k) = num(y, x, k) / den(y, x);
    }
  }
  if (coverage) *coverage = cov;
  return out;
}

}  // namespace oracle
