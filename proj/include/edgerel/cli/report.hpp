#pragma once

// Study report: one record per (width, λ, seed) job plus three heatmaps
// (rows = weight widths, columns = λ) holding the median over seeds.
// Files: one CSV per heatmap and study.json; both carry the config hash.

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "edgerel/data/dataio.hpp"
#include "edgerel/error.hpp"
#include "edgerel/jacreg.hpp"
#include "edgerel/matrix.hpp"
#include "edgerel/model_io.hpp"

namespace edgerel::cli {

inline constexpr int kReportSchemaVersion = 1;

struct StudyJob {
    int width = 0;
    double lambda = 0.0;
    std::uint64_t seed = 0;
    double clean_emd = 0.0;
    double noisy_emd = 0.0;
    double top_eigenvalue = 0.0;
    double trace = 0.0;
    double trace_stderr = 0.0;
    std::string artifact; // per-job JSON, relative to the report directory
};

struct StudyReport {
    std::string config_hash;
    std::vector<int> widths;
    std::vector<double> lambdas;
    std::vector<StudyJob> jobs;
    Matrix noisy_emd;      // widths × lambdas
    Matrix top_eigenvalue; // widths × lambdas
    Matrix trace;          // widths × lambdas
    std::vector<std::string> artifacts;
};

namespace detail {

// Bitwise equality, so NaN cells compare equal to themselves.
inline bool same(double a, double b) {
    return (std::isnan(a) && std::isnan(b)) || std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
}

inline bool same(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    for (std::size_t i = 0; i < a.data().size(); ++i)
        if (!same(a.data()[i], b.data()[i])) return false;
    return true;
}

inline bool same(const StudyJob& a, const StudyJob& b) {
    return a.width == b.width && same(a.lambda, b.lambda) && a.seed == b.seed && same(a.clean_emd, b.clean_emd) &&
           same(a.noisy_emd, b.noisy_emd) && same(a.top_eigenvalue, b.top_eigenvalue) && same(a.trace, b.trace) &&
           same(a.trace_stderr, b.trace_stderr) && a.artifact == b.artifact;
}

inline nlohmann::json number(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline double number(const nlohmann::json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline nlohmann::json table_json(const Matrix& m) {
    auto rows = nlohmann::json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = nlohmann::json::array();
        for (double v : m.row(r)) row.push_back(number(v));
        rows.push_back(row);
    }
    return rows;
}

inline Matrix table_from_json(const nlohmann::json& j, std::size_t rows, std::size_t cols, const std::string& name) {
    if (!j.is_array() || j.size() != rows) throw Error("report: table '" + name + "' has the wrong row count");
    Matrix m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        if (!j[r].is_array() || j[r].size() != cols) throw Error("report: table '" + name + "' has the wrong column count");
        for (std::size_t c = 0; c < cols; ++c) m(r, c) = number(j[r][c]);
    }
    return m;
}

inline std::string heatmap_csv(const StudyReport& r, const Matrix& m) {
    std::ostringstream o;
    o << "# config_hash=" << r.config_hash << "\nwidth";
    for (double l : r.lambdas) o << ",lambda=" << data::format_double(l);
    o << '\n';
    for (std::size_t i = 0; i < r.widths.size(); ++i) {
        o << r.widths[i];
        for (std::size_t j = 0; j < r.lambdas.size(); ++j) o << ',' << data::format_double(m(i, j));
        o << '\n';
    }
    return o.str();
}

// Parses a heatmap CSV and checks its axes against the report.
inline Matrix parse_heatmap_csv(const std::string& text, const StudyReport& r, const std::string& name) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "# config_hash=" + r.config_hash)
        throw Error("report: " + name + " config hash line does not match study.json");
    if (!std::getline(in, line)) throw Error("report: " + name + " is missing its header");
    auto head = data::detail::split_csv_line(line);
    if (head.empty() || head[0] != "width" || head.size() != r.lambdas.size() + 1)
        throw Error("report: " + name + " header does not match the λ axis");
    for (std::size_t j = 0; j < r.lambdas.size(); ++j)
        if (head[j + 1] != "lambda=" + data::format_double(r.lambdas[j]))
            throw Error("report: " + name + " header does not match the λ axis");
    Matrix m(r.widths.size(), r.lambdas.size());
    for (std::size_t i = 0; i < r.widths.size(); ++i) {
        if (!std::getline(in, line)) throw Error("report: " + name + " has too few rows");
        auto f = data::detail::split_csv_line(line);
        if (f.size() != r.lambdas.size() + 1 || f[0] != std::to_string(r.widths[i]))
            throw Error("report: " + name + " row " + std::to_string(i) + " does not match the width axis");
        for (std::size_t j = 0; j < r.lambdas.size(); ++j) m(i, j) = std::strtod(f[j + 1].c_str(), nullptr);
    }
    if (std::getline(in, line) && !line.empty()) throw Error("report: " + name + " has extra rows");
    return m;
}

} // namespace detail

inline bool operator==(const StudyReport& a, const StudyReport& b) {
    if (a.config_hash != b.config_hash || a.widths != b.widths || a.artifacts != b.artifacts) return false;
    if (a.lambdas.size() != b.lambdas.size() || a.jobs.size() != b.jobs.size()) return false;
    for (std::size_t i = 0; i < a.lambdas.size(); ++i)
        if (!detail::same(a.lambdas[i], b.lambdas[i])) return false;
    for (std::size_t i = 0; i < a.jobs.size(); ++i)
        if (!detail::same(a.jobs[i], b.jobs[i])) return false;
    return detail::same(a.noisy_emd, b.noisy_emd) && detail::same(a.top_eigenvalue, b.top_eigenvalue) &&
           detail::same(a.trace, b.trace);
}

// Fill the heatmaps with the per-cell median over seeds. Cells without jobs are NaN.
inline void build_tables(StudyReport& r) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    r.noisy_emd = Matrix(r.widths.size(), r.lambdas.size(), nan);
    r.top_eigenvalue = Matrix(r.widths.size(), r.lambdas.size(), nan);
    r.trace = Matrix(r.widths.size(), r.lambdas.size(), nan);
    for (std::size_t i = 0; i < r.widths.size(); ++i)
        for (std::size_t j = 0; j < r.lambdas.size(); ++j) {
            std::vector<double> e, t, h;
            for (const auto& job : r.jobs)
                if (job.width == r.widths[i] && detail::same(job.lambda, r.lambdas[j])) {
                    e.push_back(job.noisy_emd);
                    t.push_back(job.top_eigenvalue);
                    h.push_back(job.trace);
                }
            if (e.empty()) continue;
            r.noisy_emd(i, j) = jacreg::median(e);
            r.top_eigenvalue(i, j) = jacreg::median(t);
            r.trace(i, j) = jacreg::median(h);
        }
}

inline const char* const kHeatmapFiles[3] = {"heatmap_noisy_emd.csv", "heatmap_top_eigenvalue.csv", "heatmap_trace.csv"};

inline nlohmann::json report_to_json(const StudyReport& r) {
    auto jobs = nlohmann::json::array();
    for (const auto& j : r.jobs)
        jobs.push_back({{"width", j.width},
                        {"lambda", j.lambda},
                        {"seed", j.seed},
                        {"clean_emd", detail::number(j.clean_emd)},
                        {"noisy_emd", detail::number(j.noisy_emd)},
                        {"top_eigenvalue", detail::number(j.top_eigenvalue)},
                        {"trace", detail::number(j.trace)},
                        {"trace_stderr", detail::number(j.trace_stderr)},
                        {"artifact", j.artifact}});
    return {{"schema_version", kReportSchemaVersion},
            {"config_hash", r.config_hash},
            {"widths", r.widths},
            {"lambdas", r.lambdas},
            {"jobs", jobs},
            {"tables",
             {{"noisy_emd", detail::table_json(r.noisy_emd)},
              {"top_eigenvalue", detail::table_json(r.top_eigenvalue)},
              {"trace", detail::table_json(r.trace)}}},
            {"heatmaps", {kHeatmapFiles[0], kHeatmapFiles[1], kHeatmapFiles[2]}},
            {"artifacts", r.artifacts}};
}

inline void write_report(const StudyReport& r, const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error("report: cannot create '" + dir + "': " + ec.message());
    const std::filesystem::path d(dir);
    if (r.noisy_emd.rows() != r.widths.size() || r.noisy_emd.cols() != r.lambdas.size() ||
        r.top_eigenvalue.rows() != r.widths.size() || r.top_eigenvalue.cols() != r.lambdas.size() ||
        r.trace.rows() != r.widths.size() || r.trace.cols() != r.lambdas.size())
        throw Error("report: heatmap shapes do not match the width/λ axes");
    io::write_text((d / kHeatmapFiles[0]).string(), detail::heatmap_csv(r, r.noisy_emd));
    io::write_text((d / kHeatmapFiles[1]).string(), detail::heatmap_csv(r, r.top_eigenvalue));
    io::write_text((d / kHeatmapFiles[2]).string(), detail::heatmap_csv(r, r.trace));
    io::write_text((d / "study.json").string(), report_to_json(r).dump(1) + "\n");
}

// Reload a report; the CSV heatmaps must agree with study.json.
inline StudyReport read_report(const std::string& dir) {
    const std::filesystem::path d(dir);
    const auto path = (d / "study.json").string();
    const auto j = io::parse_json(io::read_text(path), path);
    StudyReport r;
    try {
        if (j.at("schema_version").get<int>() != kReportSchemaVersion)
            throw Error("report: unsupported schema version " + j.at("schema_version").dump());
        r.config_hash = j.at("config_hash").get<std::string>();
        r.widths = j.at("widths").get<std::vector<int>>();
        r.lambdas = j.at("lambdas").get<std::vector<double>>();
        for (const auto& jj : j.at("jobs"))
            r.jobs.push_back({jj.at("width").get<int>(), jj.at("lambda").get<double>(), jj.at("seed").get<std::uint64_t>(),
                              detail::number(jj.at("clean_emd")), detail::number(jj.at("noisy_emd")),
                              detail::number(jj.at("top_eigenvalue")), detail::number(jj.at("trace")),
                              detail::number(jj.at("trace_stderr")), jj.at("artifact").get<std::string>()});
        const auto& t = j.at("tables");
        r.noisy_emd = detail::table_from_json(t.at("noisy_emd"), r.widths.size(), r.lambdas.size(), "noisy_emd");
        r.top_eigenvalue = detail::table_from_json(t.at("top_eigenvalue"), r.widths.size(), r.lambdas.size(), "top_eigenvalue");
        r.trace = detail::table_from_json(t.at("trace"), r.widths.size(), r.lambdas.size(), "trace");
        r.artifacts = j.at("artifacts").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw Error("report: " + path + ": " + e.what());
    }
    const Matrix* tables[3] = {&r.noisy_emd, &r.top_eigenvalue, &r.trace};
    for (int k = 0; k < 3; ++k) {
        const auto csv = (d / kHeatmapFiles[k]).string();
        if (!detail::same(detail::parse_heatmap_csv(io::read_text(csv), r, csv), *tables[k]))
            throw Error("report: " + csv + " disagrees with study.json");
    }
    return r;
}

} // namespace edgerel::cli
