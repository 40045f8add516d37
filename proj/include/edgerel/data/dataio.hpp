#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "edgerel/error.hpp"
#include "edgerel/matrix.hpp"

namespace edgerel::data {

struct GridGeometry {
    std::vector<std::pair<double, double>> coords;

    std::size_t cells() const noexcept { return coords.size(); }

    void validate() const {
        if (coords.empty()) throw Error("geometry: needs at least one cell");
        for (const auto& [x, y] : coords)
            if (!std::isfinite(x) || !std::isfinite(y)) throw Error("geometry: non-finite coordinate");
    }

    // nx × ny grid with unit spacing, row-major (x fastest).
    static GridGeometry rectangular(int nx = 8, int ny = 6) {
        GridGeometry g;
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) g.coords.emplace_back(x, y);
        return g;
    }

    double distance(std::size_t a, std::size_t b) const {
        const double dx = coords[a].first - coords[b].first;
        const double dy = coords[a].second - coords[b].second;
        return std::sqrt(dx * dx + dy * dy);
    }

    friend bool operator==(const GridGeometry&, const GridGeometry&) = default;
};

struct Dataset {
    Matrix samples; // n × C, rows normalized to sum 1
    GridGeometry geometry;
    std::uint64_t seed = 0;
};

struct BlobConfig {
    int min_blobs = 1;
    int max_blobs = 3;
    double min_width = 0.5; // cells
    double max_width = 2.0;
    double min_amplitude = 20.0; // expected peak counts
    double max_amplitude = 200.0;
    bool poisson = true;
};

// Scale each row to unit sum. Rows summing to zero are an error.
inline void normalize_rows(Matrix& m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        double s = 0.0;
        for (double v : row) s += v;
        if (!(s > 0.0)) throw Error("normalize: row " + std::to_string(r + 1) + " sums to zero");
        for (double& v : row) v /= s;
    }
}

// Expected (noise-free) cell intensities of one blob.
inline void add_blob(std::span<double> row, const GridGeometry& g, double cx, double cy, double width, double amp) {
    if (width <= 0.0) {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < g.cells(); ++c) {
            const double dx = g.coords[c].first - cx, dy = g.coords[c].second - cy;
            const double d = dx * dx + dy * dy;
            if (d < best_d) best_d = d, best = c;
        }
        row[best] += amp;
        return;
    }
    for (std::size_t c = 0; c < g.cells(); ++c) {
        const double dx = g.coords[c].first - cx, dy = g.coords[c].second - cy;
        row[c] += amp * std::exp(-(dx * dx + dy * dy) / (2.0 * width * width));
    }
}

// n samples of 1–3 Gaussian blobs on the grid, Poisson-fluctuated and
// row-normalized. A sample whose fluctuated counts are all zero falls back to
// its expected intensities.
inline Dataset gen_synthetic(std::size_t n, std::uint64_t seed, const GridGeometry& geometry,
                             const BlobConfig& cfg = {}) {
    geometry.validate();
    if (n < 1) throw Error("gen_synthetic: n must be >= 1");
    if (cfg.min_blobs < 1 || cfg.max_blobs < cfg.min_blobs) throw Error("gen_synthetic: bad blob count range");
    double xmin = geometry.coords[0].first, xmax = xmin, ymin = geometry.coords[0].second, ymax = ymin;
    for (const auto& [x, y] : geometry.coords) {
        xmin = std::min(xmin, x), xmax = std::max(xmax, x);
        ymin = std::min(ymin, y), ymax = std::max(ymax, y);
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> nblobs(cfg.min_blobs, cfg.max_blobs);
    std::uniform_real_distribution<double> ux(xmin, xmax), uy(ymin, ymax);
    std::uniform_real_distribution<double> uw(cfg.min_width, cfg.max_width);
    std::uniform_real_distribution<double> ua(cfg.min_amplitude, cfg.max_amplitude);

    Dataset d;
    d.geometry = geometry;
    d.seed = seed;
    d.samples = Matrix(n, geometry.cells());
    std::vector<double> expected(geometry.cells());
    for (std::size_t s = 0; s < n; ++s) {
        std::fill(expected.begin(), expected.end(), 0.0);
        const int k = nblobs(rng);
        for (int b = 0; b < k; ++b) {
            const double cx = ux(rng), cy = uy(rng), w = uw(rng), a = ua(rng);
            add_blob(expected, geometry, cx, cy, w, a);
        }
        auto row = d.samples.row(s);
        double total = 0.0;
        for (std::size_t c = 0; c < row.size(); ++c) {
            double v = expected[c];
            if (cfg.poisson) v = static_cast<double>(std::poisson_distribution<long>(expected[c])(rng));
            row[c] = std::max(0.0, v);
            total += row[c];
        }
        if (!(total > 0.0)) std::copy(expected.begin(), expected.end(), row.begin());
    }
    normalize_rows(d.samples);
    return d;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline double parse_number(std::string field, std::size_t row) {
    const auto b = field.find_first_not_of(" \t\r");
    const auto e = field.find_last_not_of(" \t\r");
    if (b == std::string::npos) throw Error("csv: empty field at row " + std::to_string(row));
    field = field.substr(b, e - b + 1);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (ec != std::errc() || ptr != field.data() + field.size() || !std::isfinite(v))
        throw Error("csv: malformed number '" + field + "' at row " + std::to_string(row));
    return v;
}

inline std::vector<std::vector<double>> read_numeric_csv(std::istream& in) {
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::vector<double> r;
        for (auto& f : split_csv_line(line)) r.push_back(parse_number(f, lineno));
        rows.push_back(std::move(r));
    }
    return rows;
}

} // namespace detail

// Parse headerless CSV text with exactly C non-negative columns per row.
// Row numbers in errors count data rows from 1.
inline Dataset parse_csv(std::istream& in, const GridGeometry& geometry) {
    geometry.validate();
    const std::size_t c = geometry.cells();
    std::vector<double> values;
    std::string line;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        ++row;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() != c)
            throw Error("csv: row " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                        " fields, expected " + std::to_string(c));
        double sum = 0.0;
        for (const auto& f : fields) {
            const double v = detail::parse_number(f, row);
            if (v < 0.0) throw Error("csv: negative value at row " + std::to_string(row));
            values.push_back(v);
            sum += v;
        }
        if (!(sum > 0.0)) throw Error("csv: row " + std::to_string(row) + " sums to zero");
    }
    if (row == 0) throw Error("csv: no data rows");
    Dataset d;
    d.geometry = geometry;
    d.samples = Matrix(row, c, std::move(values));
    normalize_rows(d.samples);
    return d;
}

inline Dataset load_csv(const std::string& path, const GridGeometry& geometry) {
    std::ifstream in(path);
    if (!in) throw Error("csv: cannot open '" + path + "'");
    return parse_csv(in, geometry);
}

inline GridGeometry load_geometry_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("geometry: cannot open '" + path + "'");
    GridGeometry g;
    std::size_t r = 0;
    for (const auto& row : detail::read_numeric_csv(in)) {
        ++r;
        if (row.size() != 2) throw Error("geometry: row " + std::to_string(r) + " must have 2 fields");
        g.coords.emplace_back(row[0], row[1]);
    }
    g.validate();
    return g;
}

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_csv(std::ostream& out, const Matrix& m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) {
            if (c) out << ',';
            out << format_double(m(r, c));
        }
        out << '\n';
    }
}

inline void write_geometry_csv(std::ostream& out, const GridGeometry& g) {
    for (const auto& [x, y] : g.coords) out << format_double(x) << ',' << format_double(y) << '\n';
}

struct NoiseSpec {
    double level = 0.05; // α
    std::uint64_t seed = 0;
};

// Root-mean-square of each column.
inline std::vector<double> cell_rms(const Matrix& x) {
    std::vector<double> r(x.cols(), 0.0);
    if (x.rows() == 0) return r;
    for (std::size_t n = 0; n < x.rows(); ++n)
        for (std::size_t c = 0; c < x.cols(); ++c) r[c] += x(n, c) * x(n, c);
    for (double& v : r) v = std::sqrt(v / static_cast<double>(x.rows()));
    return r;
}

// x' = max(0, x + α·r_c·g) with g standard normal and r_c the per-cell RMS
// scale. Rows are not renormalized.
inline Matrix add_noise(const Matrix& x, const NoiseSpec& spec, std::span<const double> scale) {
    if (!(spec.level >= 0.0)) throw Error("add_noise: level must be >= 0");
    if (scale.size() != x.cols()) throw Error("add_noise: scale vector length does not match cell count");
    Matrix out = x;
    if (spec.level == 0.0) return out;
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> g(0.0, 1.0);
    for (std::size_t n = 0; n < x.rows(); ++n)
        for (std::size_t c = 0; c < x.cols(); ++c) out(n, c) = std::max(0.0, x(n, c) + spec.level * scale[c] * g(rng));
    return out;
}

inline Matrix add_noise(const Matrix& x, const NoiseSpec& spec) { return add_noise(x, spec, cell_rms(x)); }

} // namespace edgerel::data
