#pragma once

// Grayscale raster utilities shared by the synthetic generator and the
// explanation renderer: bilinear sampling, affine warps, separable Gaussian
// blur, an exact Euclidean distance transform, and binary PGM/PPM files.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace protomargin {

struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> px;  // row-major, [0,1] for images, {0,1} for masks

    Image() = default;
    Image(int w, int h, double fill = 0.0)
        : width(w), height(h), px(static_cast<std::size_t>(w) * h, fill) {}

    double& at(int y, int x) { return px[static_cast<std::size_t>(y) * width + x]; }
    double at(int y, int x) const { return px[static_cast<std::size_t>(y) * width + x]; }
    std::size_t numel() const { return px.size(); }
};

enum class Border { Clamp, Constant };

inline double sample_bilinear(const Image& img, double x, double y,
                              Border border = Border::Clamp, double fill = 0.0) {
    if (border == Border::Constant &&
        (x < -0.5 || y < -0.5 || x > img.width - 0.5 || y > img.height - 0.5))
        return fill;
    const auto clampi = [](int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const double tx = x - x0, ty = y - y0;
    const int x0c = clampi(x0, img.width - 1), x1c = clampi(x0 + 1, img.width - 1);
    const int y0c = clampi(y0, img.height - 1), y1c = clampi(y0 + 1, img.height - 1);
    const double top = img.at(y0c, x0c) * (1.0 - tx) + img.at(y0c, x1c) * tx;
    const double bot = img.at(y1c, x0c) * (1.0 - tx) + img.at(y1c, x1c) * tx;
    return top * (1.0 - ty) + bot * ty;
}

/// Row-vector affine map from output pixel coordinates to source coordinates:
/// (sx, sy) = (a*x + b*y + c, d*x + e*y + f).
struct Affine {
    double a = 1, b = 0, c = 0;
    double d = 0, e = 1, f = 0;

    static Affine identity() { return {}; }

    /// this, then other (other applied to this's result).
    Affine then(const Affine& o) const {
        return {o.a * a + o.b * d, o.a * b + o.b * e, o.a * c + o.b * f + o.c,
                o.d * a + o.e * d, o.d * b + o.e * e, o.d * c + o.e * f + o.f};
    }
};

inline Image warp_affine(const Image& src, const Affine& m, int out_w, int out_h,
                         Border border = Border::Clamp, double fill = 0.0) {
    Image out(out_w, out_h);
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            const double sx = m.a * x + m.b * y + m.c;
            const double sy = m.d * x + m.e * y + m.f;
            out.at(y, x) = sample_bilinear(src, sx, sy, border, fill);
        }
    return out;
}

inline Image gaussian_blur(const Image& src, double sigma) {
    if (sigma <= 0.0) return src;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = v;
        ksum += v;
    }
    for (double& v : kernel) v /= ksum;

    Image tmp(src.width, src.height);
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                int xx = x + i;
                xx = xx < 0 ? 0 : (xx >= src.width ? src.width - 1 : xx);
                acc += kernel[static_cast<std::size_t>(i + radius)] * src.at(y, xx);
            }
            tmp.at(y, x) = acc;
        }
    Image out(src.width, src.height);
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                int yy = y + i;
                yy = yy < 0 ? 0 : (yy >= src.height ? src.height - 1 : yy);
                acc += kernel[static_cast<std::size_t>(i + radius)] * tmp.at(yy, x);
            }
            out.at(y, x) = acc;
        }
    return out;
}

namespace detail {

// Felzenszwalb & Huttenlocher 1-D squared distance transform.
inline void dt1d(std::vector<double>& f) {
    const int n = static_cast<int>(f.size());
    std::vector<double> d(static_cast<std::size_t>(n));
    std::vector<int> v(static_cast<std::size_t>(n));
    std::vector<double> z(static_cast<std::size_t>(n) + 1);
    int k = 0;
    v[0] = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    for (int q = 1; q < n; ++q) {
        double s;
        while (true) {
            const int p = v[static_cast<std::size_t>(k)];
            s = ((f[static_cast<std::size_t>(q)] + q * q) -
                 (f[static_cast<std::size_t>(p)] + p * p)) /
                (2.0 * q - 2.0 * p);
            if (s <= z[static_cast<std::size_t>(k)]) {
                --k;
            } else {
                break;
            }
        }
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        z[static_cast<std::size_t>(k)] = s;
        z[static_cast<std::size_t>(k) + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[static_cast<std::size_t>(k) + 1] < q) ++k;
        const int p = v[static_cast<std::size_t>(k)];
        d[static_cast<std::size_t>(q)] =
            (q - p) * static_cast<double>(q - p) + f[static_cast<std::size_t>(p)];
    }
    f = std::move(d);
}

}  // namespace detail

/// Squared Euclidean distance to the nearest seed pixel (seed: predicate
/// value != 0 in `seeds`). Pixels with no seed anywhere come back infinite.
inline Image squared_distance_transform(const Image& seeds) {
    constexpr double kInf = 1e20;
    Image d(seeds.width, seeds.height);
    for (std::size_t i = 0; i < seeds.px.size(); ++i)
        d.px[i] = seeds.px[i] != 0.0 ? 0.0 : kInf;
    std::vector<double> col(static_cast<std::size_t>(seeds.height));
    for (int x = 0; x < seeds.width; ++x) {
        for (int y = 0; y < seeds.height; ++y) col[static_cast<std::size_t>(y)] = d.at(y, x);
        detail::dt1d(col);
        for (int y = 0; y < seeds.height; ++y) d.at(y, x) = col[static_cast<std::size_t>(y)];
    }
    std::vector<double> row(static_cast<std::size_t>(seeds.width));
    for (int y = 0; y < seeds.height; ++y) {
        for (int x = 0; x < seeds.width; ++x) row[static_cast<std::size_t>(x)] = d.at(y, x);
        detail::dt1d(row);
        for (int x = 0; x < seeds.width; ++x) d.at(y, x) = row[static_cast<std::size_t>(x)];
    }
    return d;
}

// ---- PGM / PPM --------------------------------------------------------

inline std::uint8_t quantize8(double v) {
    const double s = v <= 0.0 ? 0.0 : (v >= 1.0 ? 1.0 : v);
    return static_cast<std::uint8_t>(std::lround(s * 255.0));
}

inline void write_pgm(const Image& img, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    std::vector<std::uint8_t> bytes(img.px.size());
    for (std::size_t i = 0; i < img.px.size(); ++i) bytes[i] = quantize8(img.px[i]);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + path.string());
}

inline Image read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string magic;
    in >> magic;
    if (magic != "P5") throw std::runtime_error(path.string() + ": not a binary PGM");
    auto next_int = [&in, &path]() {
        int c = in.peek();
        while (c == '#' || std::isspace(c)) {
            if (c == '#') in.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
            else in.get();
            c = in.peek();
        }
        int v;
        if (!(in >> v)) throw std::runtime_error(path.string() + ": truncated PGM header");
        return v;
    };
    const int w = next_int(), h = next_int(), maxval = next_int();
    if (maxval != 255) throw std::runtime_error(path.string() + ": expected maxval 255");
    in.get();  // single whitespace after header
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * h);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw std::runtime_error(path.string() + ": truncated PGM payload");
    Image img(w, h);
    for (std::size_t i = 0; i < bytes.size(); ++i) img.px[i] = bytes[i] / 255.0;
    return img;
}

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
};

inline void write_ppm(const std::vector<Rgb>& px, int width, int height,
                      const std::filesystem::path& path) {
    if (px.size() != static_cast<std::size_t>(width) * height)
        throw std::invalid_argument("write_ppm: pixel count does not match dims");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "P6\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(px.data()),
              static_cast<std::streamsize>(px.size() * 3));
    if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace protomargin
