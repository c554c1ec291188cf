#pragma once

// Metric logging and debug rasters.  Metrics go to an append-only CSV with a
// fixed header; latents dump to binary PGM/PPM with the identity patch
// outlined so a run can be eyeballed without any imaging stack.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "data.hpp"
#include "tensor.hpp"

namespace gsaflow {

/// Shortest round-trip decimal form, stable across writers.
inline std::string metric_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

class MetricsCsv {
  public:
    MetricsCsv(const std::string &path, const std::vector<std::string> &columns) : path_(path) {
        check_contract(!columns.empty(), "metrics: need at least one column");
        std::string header;
        for (size_t i = 0; i < columns.size(); ++i) {
            if (i) header += ",";
            header += columns[i];
        }
        columns_ = columns.size();
        std::ifstream existing(path_);
        if (existing) {
            std::string first;
            std::getline(existing, first);
            check_contract(first == header,
                           "metrics: header mismatch in existing file " + path_);
        } else {
            std::ofstream out(path_, std::ios::app);
            check_contract(static_cast<bool>(out), "metrics: cannot write " + path_);
            out << header << "\n";
        }
    }

    void row(const std::vector<std::string> &cells) {
        check_contract(cells.size() == columns_, "metrics: wrong cell count for row");
        std::ofstream out(path_, std::ios::app);
        check_contract(static_cast<bool>(out), "metrics: cannot append to " + path_);
        for (size_t i = 0; i < cells.size(); ++i) {
            if (i) out << ",";
            out << cells[i];
        }
        out << "\n";
    }

    void row(const std::vector<double> &values) {
        std::vector<std::string> cells;
        cells.reserve(values.size());
        for (double v : values) cells.push_back(metric_num(v));
        row(cells);
    }

  private:
    std::string path_;
    size_t columns_ = 0;
};

namespace detail {

inline unsigned char to_byte(double v) {
    double scaled = (v + 2.0) / 4.0 * 255.0;  // latents live around [-2, 2]
    if (scaled < 0.0) scaled = 0.0;
    if (scaled > 255.0) scaled = 255.0;
    return static_cast<unsigned char>(std::lround(scaled));
}

inline bool on_patch_outline(int y, int x, const DataGeometry &geom) {
    const int q = geom.quadrant();
    if (y >= q || x >= q) return false;
    return y == 0 || x == 0 || y == q - 1 || x == q - 1;
}

}  // namespace detail

inline void write_pgm(const std::string &path, int w, int h,
                      const std::vector<unsigned char> &bytes) {
    check_contract(bytes.size() == static_cast<size_t>(w) * h, "pgm: wrong byte count");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    check_contract(static_cast<bool>(out), "pgm: cannot write " + path);
    out << "P5\n" << w << " " << h << "\n255\n";
    out.write(reinterpret_cast<const char *>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

inline void write_ppm(const std::string &path, int w, int h,
                      const std::vector<unsigned char> &bytes) {
    check_contract(bytes.size() == static_cast<size_t>(w) * h * 3, "ppm: wrong byte count");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    check_contract(static_cast<bool>(out), "ppm: cannot write " + path);
    out << "P6\n" << w << " " << h << "\n255\n";
    out.write(reinterpret_cast<const char *>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

/// First three channels become RGB (grayscale if only one channel exists);
/// the identity-patch border renders white.
template <typename T>
inline std::vector<unsigned char> latent_to_raster(const Tensor<T> &latent,
                                                   const DataGeometry &geom) {
    check_shape(latent.numel() == geom.numel(), "raster: latent/geometry mismatch");
    const int g = geom.latent_grid;
    const bool gray = geom.latent_channels == 1;
    std::vector<unsigned char> bytes;
    bytes.reserve(static_cast<size_t>(g) * g * (gray ? 1 : 3));
    for (int y = 0; y < g; ++y)
        for (int x = 0; x < g; ++x) {
            const bool outline = detail::on_patch_outline(y, x, geom);
            const int planes = gray ? 1 : 3;
            for (int p = 0; p < planes; ++p) {
                if (outline) {
                    bytes.push_back(255);
                    continue;
                }
                const int ch = p < geom.latent_channels ? p : geom.latent_channels - 1;
                bytes.push_back(detail::to_byte(static_cast<double>(
                    latent.value()[static_cast<size_t>(ch) * g * g + static_cast<size_t>(y) * g + x])));
            }
        }
    return bytes;
}

template <typename T>
inline void dump_latent_raster(const std::string &path, const Tensor<T> &latent,
                               const DataGeometry &geom) {
    auto bytes = latent_to_raster(latent, geom);
    if (geom.latent_channels == 1)
        write_pgm(path, geom.latent_grid, geom.latent_grid, bytes);
    else
        write_ppm(path, geom.latent_grid, geom.latent_grid, bytes);
}

}  // namespace gsaflow
