#pragma once

// Earth Mover's Distance (Wasserstein-1) between normalized cell-energy
// distributions. emd_1d is the CDF closed form; EmdSolver is an exact
// transportation simplex on the complete bipartite graph between the
// non-empty cells of p and q, with Euclidean ground distance.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "edgerel/data/dataio.hpp"
#include "edgerel/error.hpp"

namespace edgerel::metrics {

inline constexpr double kMassTolerance = 1e-9;

struct Flow {
    std::size_t source = 0;
    std::size_t target = 0;
    double mass = 0.0;
};

struct TransportPlan {
    std::vector<Flow> flows;
    double cost = 0.0;
};

namespace detail {

inline void check_distribution(std::span<const double> p, const char* name) {
    double s = 0.0;
    for (double v : p) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw Error(std::string("emd: ") + name + " has a negative or non-finite entry");
        s += v;
    }
    if (std::abs(s - 1.0) > kMassTolerance)
        throw Error(std::string("emd: ") + name + " is not normalized (sum " + data::format_double(s) + ")");
}

} // namespace detail

inline double emd_1d(std::span<const double> p, std::span<const double> q, std::span<const double> positions) {
    if (p.size() != q.size() || p.size() != positions.size()) throw Error("emd_1d: length mismatch");
    detail::check_distribution(p, "p");
    detail::check_distribution(q, "q");
    for (std::size_t i = 1; i < positions.size(); ++i)
        if (positions[i] < positions[i - 1]) throw Error("emd_1d: positions must be sorted");
    double cp = 0.0, cq = 0.0, d = 0.0;
    for (std::size_t i = 0; i + 1 < p.size(); ++i) {
        cp += p[i];
        cq += q[i];
        d += std::abs(cp - cq) * (positions[i + 1] - positions[i]);
    }
    return d;
}

// Reusable exact solver bound to one geometry. Not thread-safe (scratch
// buffers); use one instance per thread.
class EmdSolver {
public:
    static constexpr std::size_t max_cells = 256;

    explicit EmdSolver(const data::GridGeometry& g) : cells_(g.cells()) {
        g.validate();
        if (cells_ > max_cells)
            throw Error("emd: geometry has " + std::to_string(cells_) + " cells, limit is " + std::to_string(max_cells));
        dist_.resize(cells_ * cells_);
        for (std::size_t a = 0; a < cells_; ++a)
            for (std::size_t b = 0; b < cells_; ++b) dist_[a * cells_ + b] = g.distance(a, b);
        std::vector<unsigned> idx(cells_ * cells_);
        std::iota(idx.begin(), idx.end(), 0u);
        std::stable_sort(idx.begin(), idx.end(), [&](unsigned x, unsigned y) { return dist_[x] < dist_[y]; });
        max_cost_ = dist_.empty() ? 0.0 : dist_[idx.back()];
        order_.reserve(idx.size());
        for (unsigned k : idx) order_.push_back({static_cast<std::uint16_t>(k / cells_), static_cast<std::uint16_t>(k % cells_)});
    }

    std::size_t cells() const noexcept { return cells_; }
    double distance(std::size_t a, std::size_t b) const { return dist_[a * cells_ + b]; }

    double cost(std::span<const double> p, std::span<const double> q) { return solve(p, q, nullptr); }

    TransportPlan plan(std::span<const double> p, std::span<const double> q) {
        TransportPlan tp;
        tp.cost = solve(p, q, &tp.flows);
        return tp;
    }

    // Optimal spanning tree over the support of p × every cell of q, as
    // (source cell, target cell) pairs.
    using Basis = std::vector<std::pair<std::uint16_t, std::uint16_t>>;

    // Cold solve that also records the optimal tree for later warm starts.
    double cost_with_basis(std::span<const double> p, std::span<const double> q, Basis& out) {
        const auto [m, n] = setup(p, q, true);
        initial_basis(p, q, m, n);
        optimize(m, n);
        out.clear();
        for (const auto& b : basis_)
            out.emplace_back(static_cast<std::uint16_t>(src_[b.row]), static_cast<std::uint16_t>(dst_[b.col]));
        return total_cost(nullptr);
    }

    // Re-solve for a new q starting from a tree that was optimal for the same
    // p (dual feasible: costs do not depend on q). Dual simplex pivots restore
    // primal feasibility; a final pricing pass confirms optimality. Falls back
    // to a cold start if `start` does not fit p.
    double cost_from(std::span<const double> p, std::span<const double> q, const Basis& start) {
        const auto [m, n] = setup(p, q, true);
        if (!load_basis(start, m, n)) {
            initial_basis(p, q, m, n);
            optimize(m, n);
            return total_cost(nullptr);
        }
        if (!dual_phase(m, n)) initial_basis(p, q, m, n);
        optimize(m, n);
        return total_cost(nullptr);
    }

private:
    struct Cell {
        int row;
        int col;
        double flow;
    };

    void check_inputs(std::span<const double> p, std::span<const double> q) const {
        if (p.size() != cells_ || q.size() != cells_) throw Error("emd: distribution length does not match geometry");
        detail::check_distribution(p, "p");
        detail::check_distribution(q, "q");
    }

    // Rows are the non-empty cells of p; columns the non-empty cells of q, or
    // every cell when `all_columns` (zero-demand columns keep a tree valid
    // across changes of q's support).
    std::pair<int, int> setup(std::span<const double> p, std::span<const double> q, bool all_columns) {
        check_inputs(p, q);
        src_.clear();
        dst_.clear();
        row_of_.assign(cells_, -1);
        col_of_.assign(cells_, -1);
        for (std::size_t c = 0; c < cells_; ++c) {
            if (p[c] > 0.0) row_of_[c] = static_cast<int>(src_.size()), src_.push_back(c);
            if (all_columns || q[c] > 0.0) col_of_[c] = static_cast<int>(dst_.size()), dst_.push_back(c);
        }
        const int m = static_cast<int>(src_.size()), n = static_cast<int>(dst_.size());
        n_ = n;
        cost_.resize(static_cast<std::size_t>(m) * n);
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < n; ++c) cost_[r * n + c] = dist_[src_[r] * cells_ + dst_[c]];
        supply_.assign(m, 0.0);
        demand_.assign(n, 0.0);
        for (int r = 0; r < m; ++r) supply_[r] = p[src_[r]];
        for (int c = 0; c < n; ++c) demand_[c] = q[dst_[c]];
        return {m, n};
    }

    double solve(std::span<const double> p, std::span<const double> q, std::vector<Flow>* flows) {
        check_inputs(p, q);
        if (std::equal(p.begin(), p.end(), q.begin())) return 0.0;
        const auto [m, n] = setup(p, q, false);
        initial_basis(p, q, m, n);
        optimize(m, n);
        return total_cost(flows);
    }

    double total_cost(std::vector<Flow>* flows) const {
        double total = 0.0;
        for (const auto& b : basis_) {
            if (b.flow <= 0.0) continue;
            total += b.flow * distance(src_[b.row], dst_[b.col]);
            if (flows) flows->push_back({src_[b.row], dst_[b.col], b.flow});
        }
        if (flows)
            std::sort(flows->begin(), flows->end(), [](const Flow& a, const Flow& b) {
                return a.source != b.source ? a.source < b.source : a.target < b.target;
            });
        return total;
    }

    bool load_basis(const Basis& start, int m, int n) {
        if (start.size() != static_cast<std::size_t>(m + n - 1)) return false;
        basis_.clear();
        for (const auto& [a, b] : start) {
            if (a >= cells_ || b >= cells_) return false;
            const int r = row_of_[a], c = col_of_[b];
            if (r < 0 || c < 0) return false;
            basis_.push_back({r, c, 0.0});
        }
        build_tree(m, n);
        for (int v = 0; v < m + n; ++v)
            if (depth_[v] < 0) return false;
        return true;
    }

    // Tree flows for the current supplies and demands, children before
    // parents in reverse preorder.
    void tree_flows(int m) {
        net_.resize(supply_.size() + demand_.size());
        for (std::size_t r = 0; r < supply_.size(); ++r) net_[r] = supply_[r];
        for (std::size_t c = 0; c < demand_.size(); ++c) net_[m + c] = -demand_[c];
        for (auto it = preorder_.rbegin(); it != preorder_.rend(); ++it) {
            const int v = *it;
            const int e = parent_edge_[v];
            if (e < 0) continue;
            // Net surplus of v's subtree leaves through its parent edge.
            basis_[e].flow = v < m ? net_[v] : -net_[v];
            net_[other_end(e, v, m)] += net_[v];
        }
    }

    // Returns false if the tree could not be made primal feasible (cap hit).
    bool dual_phase(int m, int n) {
        const double flow_tol = 1e-14;
        const long cap = 4L * (m + n) + 100;
        for (long iter = 0; iter <= cap; ++iter) {
            tree_flows(m);
            int leave = -1;
            double worst = -flow_tol;
            for (int e = 0; e < static_cast<int>(basis_.size()); ++e)
                if (basis_[e].flow < worst) worst = basis_[e].flow, leave = e;
            if (leave < 0) {
                for (auto& b : basis_) b.flow = std::max(0.0, b.flow);
                return true;
            }
            // Split the tree at the leaving edge: side_ = 1 marks the component
            // holding its column end.
            const int c0 = m + basis_[leave].col;
            side_.assign(m + n, 0);
            stack_.clear();
            stack_.push_back(c0);
            side_[c0] = 1;
            while (!stack_.empty()) {
                const int u = stack_.back();
                stack_.pop_back();
                for (int h = head_[u]; h >= 0; h = link_[h]) {
                    const int e = h >> 1;
                    if (e == leave) continue;
                    const int v = (h & 1) ? basis_[e].row : m + basis_[e].col;
                    if (side_[v]) continue;
                    side_[v] = 1;
                    stack_.push_back(v);
                }
            }
            // Negative flow means the row side lacks mass; it can only arrive
            // on a cell from a row in the column side to a column in the row side.
            int er = -1, ec = -1;
            double best = 0.0;
            for (int r = 0; r < m; ++r) {
                if (!side_[r]) continue;
                const double* cr = cost_.data() + static_cast<std::size_t>(r) * n;
                for (int c = 0; c < n; ++c) {
                    if (side_[m + c]) continue;
                    const double rc = cr[c] - pot_[r] - pot_[m + c];
                    if (er < 0 || rc < best) best = rc, er = r, ec = c;
                }
            }
            if (er < 0) return false; // infeasible split; cannot happen with balanced mass
            basis_[leave] = {er, ec, 0.0};
            build_tree(m, n);
        }
        return false;
    }

    double cell_cost(int r, int c) const { return cost_[r * n_ + c]; }

    int find(int x) {
        while (uf_[x] != x) x = uf_[x] = uf_[uf_[x]];
        return x;
    }

    // Least-cost greedy start (a forest), completed to a spanning tree with
    // zero-flow cells.
    void initial_basis(std::span<const double> p, std::span<const double> q, int m, int n) {
        basis_.clear();
        supply_.assign(m, 0.0);
        demand_.assign(n, 0.0);
        for (int r = 0; r < m; ++r) supply_[r] = p[src_[r]];
        for (int c = 0; c < n; ++c) demand_[c] = q[dst_[c]];
        uf_.resize(m + n);
        std::iota(uf_.begin(), uf_.end(), 0);
        for (const auto& [a, b] : order_) {
            const int r = row_of_[a], c = col_of_[b];
            if (r < 0 || c < 0 || supply_[r] <= 0.0 || demand_[c] <= 0.0) continue;
            double f;
            if (supply_[r] <= demand_[c]) {
                f = supply_[r];
                supply_[r] = 0.0;
                demand_[c] -= f;
            } else {
                f = demand_[c];
                demand_[c] = 0.0;
                supply_[r] -= f;
            }
            basis_.push_back({r, c, f});
            uf_[find(r)] = find(m + c);
        }
        const std::size_t need = static_cast<std::size_t>(m + n - 1);
        for (const auto& [i, j] : order_) {
            if (basis_.size() >= need) break;
            const int r = row_of_[i], c = col_of_[j];
            if (r < 0 || c < 0) continue;
            const int a = find(r), b = find(m + c);
            if (a == b) continue;
            basis_.push_back({r, c, 0.0});
            uf_[a] = b;
        }
    }

    void build_tree(int m, int n) {
        const int nodes = m + n;
        const int edges = static_cast<int>(basis_.size());
        head_.assign(nodes, -1);
        link_.resize(2 * edges);
        for (int e = 0; e < edges; ++e) {
            const int r = basis_[e].row, c = m + basis_[e].col;
            link_[2 * e] = head_[r], head_[r] = 2 * e;
            link_[2 * e + 1] = head_[c], head_[c] = 2 * e + 1;
        }
        pot_.assign(nodes, 0.0);
        parent_edge_.assign(nodes, -1);
        depth_.assign(nodes, -1);
        stack_.clear();
        preorder_.clear();
        stack_.push_back(0);
        depth_[0] = 0;
        while (!stack_.empty()) {
            const int u = stack_.back();
            stack_.pop_back();
            preorder_.push_back(u);
            for (int h = head_[u]; h >= 0; h = link_[h]) {
                const int e = h >> 1;
                const int v = (h & 1) ? basis_[e].row : m + basis_[e].col;
                if (depth_[v] >= 0) continue;
                depth_[v] = depth_[u] + 1;
                parent_edge_[v] = e;
                // u_r + v_c = cost(r, c)
                pot_[v] = cell_cost(basis_[e].row, basis_[e].col) - pot_[u];
                stack_.push_back(v);
            }
        }
    }

    int other_end(int e, int node, int m) const {
        const int r = basis_[e].row, c = m + basis_[e].col;
        return node == r ? c : r;
    }

    void optimize(int m, int n) {
        const double tol = 1e-12 * (1.0 + max_cost_);
        const long cap = 50L * (m + n) * (m + n) + 1000;
        for (long iter = 0;; ++iter) {
            if (iter > cap) throw Error("emd: transportation simplex did not converge");
            build_tree(m, n);
            // Dantzig pricing; Bland's first-improving rule after many pivots
            // to rule out cycling on degenerate bases.
            const bool bland = iter > cap / 2;
            int er = -1, ec = -1;
            double best = -tol;
            const double* vc = pot_.data() + m;
            for (int r = 0; r < m && !(bland && er >= 0); ++r) {
                const double* cr = cost_.data() + static_cast<std::size_t>(r) * n;
                const double ur = pot_[r];
                for (int c = 0; c < n; ++c) {
                    const double rc = cr[c] - ur - vc[c];
                    if (rc < best) {
                        best = rc, er = r, ec = c;
                        if (bland) break;
                    }
                }
            }
            if (er < 0) return;

            // Tree path from column node to row node.
            path_.clear();
            back_.clear();
            int a = m + ec, b = er;
            while (depth_[a] > depth_[b]) path_.push_back(parent_edge_[a]), a = other_end(parent_edge_[a], a, m);
            while (depth_[b] > depth_[a]) back_.push_back(parent_edge_[b]), b = other_end(parent_edge_[b], b, m);
            while (a != b) {
                path_.push_back(parent_edge_[a]), a = other_end(parent_edge_[a], a, m);
                back_.push_back(parent_edge_[b]), b = other_end(parent_edge_[b], b, m);
            }
            path_.insert(path_.end(), back_.rbegin(), back_.rend());

            // Odd positions along the path lose flow.
            int leave = -1;
            double theta = 0.0;
            for (std::size_t k = 0; k < path_.size(); k += 2) {
                const double f = basis_[path_[k]].flow;
                if (leave < 0 || f < theta) theta = f, leave = path_[k];
            }
            for (std::size_t k = 0; k < path_.size(); ++k) {
                auto& f = basis_[path_[k]].flow;
                f = k % 2 == 0 ? std::max(0.0, f - theta) : f + theta;
            }
            basis_[leave] = {er, ec, theta};
        }
    }

    std::size_t cells_;
    std::vector<double> dist_;
    std::vector<std::pair<std::uint16_t, std::uint16_t>> order_; // cell pairs by ascending distance
    double max_cost_ = 0.0;

    std::vector<std::size_t> src_, dst_;
    std::vector<double> cost_; // m × n costs between the non-empty cells
    int n_ = 0;
    std::vector<int> row_of_, col_of_;
    std::vector<double> supply_, demand_;
    std::vector<int> uf_;
    std::vector<Cell> basis_;
    std::vector<int> head_, link_; // adjacency lists over basis edges, 2e = row end, 2e+1 = column end
    std::vector<double> pot_;
    std::vector<int> parent_edge_, depth_, stack_, path_, back_, preorder_, side_;
    std::vector<double> net_;
};

// Turn a reconstructed cell vector into a distribution: negative cells are
// clamped to zero and the row rescaled to unit sum; an all-zero row becomes
// uniform.
inline void to_distribution(std::span<const double> y, std::span<double> out) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        out[i] = y[i] > 0.0 ? y[i] : 0.0;
        s += out[i];
    }
    if (s > 0.0) {
        for (double& v : out) v /= s;
    } else {
        for (double& v : out) v = 1.0 / static_cast<double>(out.size());
    }
}

struct EmdResult {
    double cost = 0.0;
    TransportPlan plan;
};

// Exact EMD with its optimal plan. p == q yields cost 0 and an empty plan.
inline EmdResult emd_exact(std::span<const double> p, std::span<const double> q, const data::GridGeometry& geometry) {
    EmdSolver solver(geometry);
    EmdResult r;
    r.plan = solver.plan(p, q);
    r.cost = r.plan.cost;
    return r;
}

} // namespace edgerel::metrics
