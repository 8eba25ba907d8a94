#include "orderlab/otreg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "orderlab/errors.hpp"

namespace orderlab {

DiscreteDist DiscreteDist::uniform(Mat points) {
    DiscreteDist d;
    const std::size_t n = points.rows();
    if (n == 0) throw ContractError("DiscreteDist::uniform: no points");
    d.weights.assign(n, 1.0 / static_cast<double>(n));
    d.points = std::move(points);
    return d;
}

void DiscreteDist::validate() const {
    if (weights.empty()) throw ContractError("DiscreteDist: no support points");
    if (points.rows() != 0 && points.rows() != weights.size()) {
        throw ContractError("DiscreteDist: weight count differs from point count");
    }
    double s = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw ContractError("DiscreteDist: negative weight");
        s += w;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ContractError("DiscreteDist: weights do not sum to 1");
}

Mat cost_matrix(const Mat& E, const Mat& G) {
    if (E.cols() != G.cols()) throw DimensionError("cost_matrix: point dims differ");
    Mat c(E.rows(), G.rows());
    for (std::size_t i = 0; i < E.rows(); ++i)
        for (std::size_t j = 0; j < G.rows(); ++j) c(i, j) = squared_distance(E.row(i), G.row(j));
    return c;
}

namespace {

void check_problem(std::span<const double> a, std::span<const double> b, const Mat& cost) {
    if (a.empty() || b.empty()) throw ContractError("ot: empty marginal");
    if (cost.rows() != a.size() || cost.cols() != b.size()) {
        throw DimensionError("ot: cost shape does not match the marginals");
    }
    if (!cost.all_finite()) throw NumericError("ot: non-finite cost entry");
    double sa = 0.0, sb = 0.0;
    for (double x : a) {
        if (!(x >= 0.0)) throw ContractError("ot: negative source weight");
        sa += x;
    }
    for (double x : b) {
        if (!(x >= 0.0)) throw ContractError("ot: negative target weight");
        sb += x;
    }
    if (std::abs(sa - sb) > 1e-7) throw ContractError("ot: marginals have different total mass");
}

void finish_plan(TransportPlan& plan, const Mat& cost) {
    const std::size_t n = cost.rows(), m = cost.cols();
    plan.cost = 0.0;
    plan.row_marginals.assign(n, 0.0);
    plan.col_marginals.assign(m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            const double w = plan.W(i, j);
            plan.cost += w * cost(i, j);
            plan.row_marginals[i] += w;
            plan.col_marginals[j] += w;
        }
    }
}

// Basis = spanning tree over n row nodes and m column nodes (node n + j for
// column j); each basic cell is a tree edge.
class TransportationSimplex {
public:
    TransportationSimplex(std::span<const double> a, std::span<const double> b, const Mat& cost)
        : n_(a.size()), m_(b.size()), cost_(cost), basic_(n_ * m_, -1), adj_(n_ + m_) {
        north_west_corner(a, b);
    }

    TransportPlan solve() {
        const std::size_t max_pivots = 1000 + 50 * n_ * m_;
        double scale = 1.0;
        for (double c : cost_.data()) scale = std::max(scale, std::abs(c));
        const double tol = 1e-12 * scale;

        std::size_t degenerate_run = 0;
        const std::size_t bland_after = n_ + m_;
        std::size_t pivots = 0;
        for (;; ++pivots) {
            if (pivots > max_pivots) throw NumericError("ot_exact: pivot limit exceeded");
            compute_potentials();
            const bool bland = degenerate_run >= bland_after;
            const std::ptrdiff_t enter = choose_entering(tol, bland);
            if (enter < 0) break;
            const double theta = pivot(static_cast<std::size_t>(enter));
            degenerate_run = theta > 0.0 ? 0 : degenerate_run + 1;
        }

        TransportPlan plan;
        plan.W = Mat(n_, m_);
        for (const auto& c : cells_) {
            if (c.alive) plan.W(c.i, c.j) = c.x;
        }
        plan.pivots = pivots;
        finish_plan(plan, cost_);
        return plan;
    }

private:
    struct Cell {
        std::size_t i, j;
        double x;
        bool alive;
    };

    void add_cell(std::size_t i, std::size_t j, double x) {
        const int id = static_cast<int>(cells_.size());
        cells_.push_back({i, j, x, true});
        basic_[i * m_ + j] = id;
        adj_[i].push_back(id);
        adj_[n_ + j].push_back(id);
    }

    void remove_cell(int id) {
        Cell& c = cells_[static_cast<std::size_t>(id)];
        c.alive = false;
        basic_[c.i * m_ + c.j] = -1;
        for (std::size_t node : {c.i, n_ + c.j}) {
            auto& lst = adj_[node];
            lst.erase(std::find(lst.begin(), lst.end(), id));
        }
    }

    void north_west_corner(std::span<const double> a, std::span<const double> b) {
        std::vector<double> ra(a.begin(), a.end()), rb(b.begin(), b.end());
        std::size_t i = 0, j = 0;
        for (;;) {
            const double x = std::max(0.0, std::min(ra[i], rb[j]));
            add_cell(i, j, x);
            ra[i] -= x;
            rb[j] -= x;
            if (i == n_ - 1 && j == m_ - 1) break;
            if (i == n_ - 1) {
                ++j;
            } else if (j == m_ - 1) {
                ++i;
            } else if (ra[i] < rb[j]) {
                ++i;
            } else if (rb[j] < ra[i]) {
                ++j;
            } else {
                ++i;  // tie: keep a zero-valued basic cell in column j
            }
        }
    }

    int other_end(const Cell& c, std::size_t node) const {
        return static_cast<int>(node < n_ ? n_ + c.j : c.i);
    }

    void compute_potentials() {
        u_.assign(n_, 0.0);
        v_.assign(m_, 0.0);
        std::vector<char> seen(n_ + m_, 0);
        std::vector<std::size_t> stack{0};
        seen[0] = 1;
        while (!stack.empty()) {
            const std::size_t node = stack.back();
            stack.pop_back();
            for (int id : adj_[node]) {
                const Cell& c = cells_[static_cast<std::size_t>(id)];
                const auto next = static_cast<std::size_t>(other_end(c, node));
                if (seen[next]) continue;
                seen[next] = 1;
                if (next >= n_) {
                    v_[c.j] = cost_(c.i, c.j) - u_[c.i];
                } else {
                    u_[c.i] = cost_(c.i, c.j) - v_[c.j];
                }
                stack.push_back(next);
            }
        }
    }

    std::ptrdiff_t choose_entering(double tol, bool bland) const {
        std::ptrdiff_t best = -1;
        double best_r = -tol;
        for (std::size_t i = 0; i < n_; ++i) {
            for (std::size_t j = 0; j < m_; ++j) {
                const std::size_t k = i * m_ + j;
                if (basic_[k] >= 0) continue;
                const double r = cost_(i, j) - u_[i] - v_[j];
                if (r < best_r) {
                    if (bland) return static_cast<std::ptrdiff_t>(k);
                    best_r = r;
                    best = static_cast<std::ptrdiff_t>(k);
                }
            }
        }
        return best;
    }

    // Tree path from row node `from` to column node `to`, as cell ids in order.
    std::vector<int> tree_path(std::size_t from, std::size_t to) const {
        std::vector<int> via(n_ + m_, -1);
        std::vector<char> seen(n_ + m_, 0);
        std::vector<std::size_t> queue{from};
        seen[from] = 1;
        for (std::size_t h = 0; h < queue.size(); ++h) {
            const std::size_t node = queue[h];
            if (node == to) break;
            for (int id : adj_[node]) {
                const auto next = static_cast<std::size_t>(other_end(cells_[static_cast<std::size_t>(id)], node));
                if (seen[next]) continue;
                seen[next] = 1;
                via[next] = id;
                queue.push_back(next);
            }
        }
        if (!seen[to]) throw NumericError("ot_exact: basis is not a spanning tree");
        std::vector<int> path;
        for (std::size_t node = to; node != from;) {
            const int id = via[node];
            path.push_back(id);
            node = static_cast<std::size_t>(other_end(cells_[static_cast<std::size_t>(id)], node));
        }
        std::reverse(path.begin(), path.end());
        return path;
    }

    double pivot(std::size_t enter) {
        const std::size_t ei = enter / m_, ej = enter % m_;
        // Path edges alternate -,+,-,... starting at row ei; the entering cell is +.
        const std::vector<int> path = tree_path(ei, n_ + ej);
        double theta = std::numeric_limits<double>::infinity();
        int leave = -1;
        std::size_t leave_key = 0;
        for (std::size_t k = 0; k < path.size(); k += 2) {
            const Cell& c = cells_[static_cast<std::size_t>(path[k])];
            const std::size_t key = c.i * m_ + c.j;
            if (c.x < theta || (c.x == theta && key < leave_key)) {
                theta = c.x;
                leave = path[k];
                leave_key = key;
            }
        }
        for (std::size_t k = 0; k < path.size(); ++k) {
            Cell& c = cells_[static_cast<std::size_t>(path[k])];
            c.x = (k % 2 == 0) ? c.x - theta : c.x + theta;
        }
        cells_[static_cast<std::size_t>(leave)].x = 0.0;
        remove_cell(leave);
        add_cell(ei, ej, theta);
        return theta;
    }

    std::size_t n_, m_;
    const Mat& cost_;
    std::vector<Cell> cells_;
    std::vector<int> basic_;  // flat index -> cell id or -1
    std::vector<std::vector<int>> adj_;
    std::vector<double> u_, v_;
};

}  // namespace

TransportPlan ot_exact(std::span<const double> a, std::span<const double> b, const Mat& cost) {
    check_problem(a, b, cost);
    TransportationSimplex simplex(a, b, cost);
    return simplex.solve();
}

TransportPlan ot_exact(const DiscreteDist& mu, const DiscreteDist& nu, const Mat& cost) {
    mu.validate();
    nu.validate();
    return ot_exact(mu.weights, nu.weights, cost);
}

TransportPlan ot_sinkhorn(std::span<const double> a, std::span<const double> b, const Mat& cost,
                          double eps, std::size_t max_iters, double tol) {
    check_problem(a, b, cost);
    if (!(eps > 0.0)) throw ContractError("ot_sinkhorn: eps must be positive");
    const std::size_t n = a.size(), m = b.size();
    const double neg_inf = -std::numeric_limits<double>::infinity();
    std::vector<double> f(n, 0.0), g(m, 0.0), loga(n), logb(m);
    for (std::size_t i = 0; i < n; ++i) loga[i] = a[i] > 0.0 ? std::log(a[i]) : neg_inf;
    for (std::size_t j = 0; j < m; ++j) logb[j] = b[j] > 0.0 ? std::log(b[j]) : neg_inf;

    auto lse = [](const std::vector<double>& z) {
        const double mx = *std::max_element(z.begin(), z.end());
        if (!std::isfinite(mx)) return mx;
        double s = 0.0;
        for (double v : z) s += std::exp(v - mx);
        return mx + std::log(s);
    };
    std::vector<double> zi(m), zj(n);
    for (std::size_t it = 0; it < max_iters; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            if (loga[i] == neg_inf) {
                f[i] = neg_inf;
                continue;
            }
            for (std::size_t j = 0; j < m; ++j) zi[j] = (g[j] - cost(i, j)) / eps;
            f[i] = eps * (loga[i] - lse(zi));
        }
        for (std::size_t j = 0; j < m; ++j) {
            if (logb[j] == neg_inf) {
                g[j] = neg_inf;
                continue;
            }
            for (std::size_t i = 0; i < n; ++i) zj[i] = (f[i] - cost(i, j)) / eps;
            g[j] = eps * (logb[j] - lse(zj));
        }
        // Columns are exact after the g update; check the rows.
        double err = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                const double e = (f[i] + g[j] - cost(i, j)) / eps;
                if (std::isfinite(e)) row += std::exp(e);
            }
            err += std::abs(row - a[i]);
        }
        if (err < tol) break;
    }
    TransportPlan plan;
    plan.W = Mat(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            const double e = (f[i] + g[j] - cost(i, j)) / eps;
            plan.W(i, j) = std::isfinite(e) ? std::exp(e) : 0.0;
        }
    }
    finish_plan(plan, cost);
    return plan;
}

OtLoss ot_loss(const Mat& current, const Mat& stored, OtSolver solver, double sinkhorn_eps) {
    if (current.rows() != stored.rows()) {
        throw ContractError("ot_loss: current and stored feature counts differ");
    }
    if (current.cols() != stored.cols()) throw DimensionError("ot_loss: feature dims differ");
    OtLoss out;
    const std::size_t g = current.rows();
    out.grad = Mat(g, current.cols());
    if (g == 0) return out;
    const std::vector<double> w(g, 1.0 / static_cast<double>(g));
    const Mat c = cost_matrix(current, stored);
    out.plan = solver == OtSolver::exact ? ot_exact(w, w, c) : ot_sinkhorn(w, w, c, sinkhorn_eps);
    out.value = out.plan.cost;
    for (std::size_t i = 0; i < g; ++i) {
        auto gi = out.grad.row(i);
        const auto e = current.row(i);
        for (std::size_t j = 0; j < g; ++j) {
            const double wij = out.plan.W(i, j);
            if (wij == 0.0) continue;
            const auto s = stored.row(j);
            for (std::size_t k = 0; k < gi.size(); ++k) gi[k] += 2.0 * wij * (e[k] - s[k]);
        }
    }
    return out;
}

OtLoss ot_loss(const Mat& current, const FeatureSnapshot& snapshot, OtSolver solver,
               double sinkhorn_eps) {
    return ot_loss(current, snapshot.features, solver, sinkhorn_eps);
}

}  // namespace orderlab
