#include "nsl/gradflow.hpp"

#include <cmath>
#include <fstream>
#include <limits>

namespace nsl {

FlowProblem FlowProblem::random(int n, int m, int s, Rng& rng, bool consistent) {
    FlowProblem p;
    p.x.resize(n, s);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < s; ++j) p.x(i, j) = rng.normal();
    if (consistent) {
        Eigen::MatrixXd planted(n, m);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) planted(i, j) = rng.normal();
        p.y = planted.transpose() * p.x;
    } else {
        p.y.resize(m, s);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < s; ++j) p.y(i, j) = rng.normal();
    }
    return p;
}

double flow_loss(const Eigen::MatrixXd& w, const FlowProblem& p) {
    const Eigen::MatrixXd r = p.y - w.transpose() * p.x;
    return 0.5 * r.squaredNorm();
}

Eigen::MatrixXd standard_flow_derivative(const Eigen::MatrixXd& w, const FlowProblem& p) {
    if (w.rows() != p.n() || w.cols() != p.m())
        throw ShapeError("standard flow: W must be n x m");
    const Eigen::MatrixXd r = p.y - w.transpose() * p.x;  // m x s
    return p.x * r.transpose();
}

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> nsl_flow_derivatives(const Eigen::MatrixXd& wp,
                                                                 const Eigen::MatrixXd& m,
                                                                 const FlowProblem& p) {
    if (wp.rows() != p.n() || wp.cols() != p.m() || m.rows() != p.n() || m.cols() != p.n())
        throw ShapeError("nsl flow: W' must be n x m and M must be n x n");
    const Eigen::MatrixXd r = p.y - wp.transpose() * (m * p.x);  // m x s
    Eigen::MatrixXd dwp = (m * p.x) * r.transpose();             // n x m
    Eigen::MatrixXd dm = wp * r * p.x.transpose();               // n x n
    return {std::move(dwp), std::move(dm)};
}

Eigen::MatrixXd composite_derivative(const Eigen::MatrixXd& wp, const Eigen::MatrixXd& m,
                                     const FlowProblem& p) {
    const Eigen::MatrixXd r = p.y - wp.transpose() * (m * p.x);
    const Eigen::MatrixXd xr = p.x * r.transpose();  // sum_i x_i r_i^T
    return m.transpose() * m * xr + xr * wp.transpose() * wp;
}

FlowState FlowState::standard(Eigen::MatrixXd w0) {
    FlowState s;
    s.factorized = false;
    s.w = std::move(w0);
    return s;
}

FlowState FlowState::nsl(Eigen::MatrixXd wp0, Eigen::MatrixXd m0) {
    FlowState s;
    s.factorized = true;
    s.wp = std::move(wp0);
    s.m = std::move(m0);
    return s;
}

Eigen::MatrixXd FlowState::composite() const {
    return factorized ? Eigen::MatrixXd(m.transpose() * wp) : w;
}

namespace {

FlowRecord record_state(const FlowState& state, const FlowProblem& p,
                        const Eigen::MatrixXd* min_norm) {
    FlowRecord rec;
    const Eigen::MatrixXd w = state.composite();
    rec.t = state.t;
    rec.loss = flow_loss(w, p);
    rec.frob_norm = w.norm();
    rec.nuclear_norm = nuclear_norm(w);
    rec.rank = numerical_rank(w);
    rec.distance_to_min_norm =
        min_norm ? (w - *min_norm).norm() : std::numeric_limits<double>::quiet_NaN();
    return rec;
}

}  // namespace

FlowTrajectory integrate(FlowState state, const FlowProblem& p, double dt, int steps,
                         double stop_tol) {
    if (!(dt > 0.0)) throw ArgumentError("integrate: dt must be positive");
    Eigen::MatrixXd min_norm;
    const Eigen::MatrixXd* min_norm_ptr = nullptr;
    try {
        min_norm = min_norm_solution(p);
        min_norm_ptr = &min_norm;
    } catch (const Error&) {
        // distance column stays NaN when the least-norm target is unavailable
    }

    FlowTrajectory traj;
    traj.dt = dt;
    traj.records.push_back(record_state(state, p, min_norm_ptr));
    for (int step = 0; step < steps; ++step) {
        if (traj.records.back().loss < stop_tol) {
            traj.converged = true;
            break;
        }
        if (state.factorized) {
            const auto [dwp, dm] = nsl_flow_derivatives(state.wp, state.m, p);
            state.wp += dt * dwp;
            state.m += dt * dm;
        } else {
            state.w += dt * standard_flow_derivative(state.w, p);
        }
        state.t += dt;
        FlowRecord rec = record_state(state, p, min_norm_ptr);
        if (!(rec.loss <= 1e12))
            throw EvalError("gradient flow diverged at step " + std::to_string(step + 1) +
                            " (loss " + std::to_string(rec.loss) + ")");
        traj.records.push_back(rec);
    }
    if (!traj.converged && traj.records.back().loss < stop_tol) traj.converged = true;
    traj.final_state = std::move(state);
    return traj;
}

FlowTrajectory run_flow(FlowState state, const FlowProblem& p, double dt, int steps,
                        double stop_tol, int max_retries) {
    for (int attempt = 0;; ++attempt) {
        try {
            return integrate(state, p, dt, steps, stop_tol);
        } catch (const EvalError&) {
            if (attempt >= max_retries) throw;
            dt *= 0.5;
            steps *= 2;
        }
    }
}

Eigen::MatrixXd min_norm_solution(const FlowProblem& p) {
    // constraints: X^T W = Y^T, stacked sample matrix is X^T (s x n)
    const Eigen::MatrixXd xt = p.x.transpose();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(xt, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    if (p.samples() > p.n() || sv(sv.size() - 1) <= 1e-10 * sv(0))
        throw ArgumentError(
            "stacked sample matrix is rank-deficient; use a regularized solve instead");
    Eigen::VectorXd inv = sv;
    for (int i = 0; i < inv.size(); ++i) inv(i) = 1.0 / sv(i);
    return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose() * p.y.transpose();
}

double nuclear_norm(const Eigen::MatrixXd& w) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(w);
    return svd.singularValues().sum();
}

int numerical_rank(const Eigen::MatrixXd& w) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(w);
    const auto& sv = svd.singularValues();
    if (sv.size() == 0 || sv(0) == 0.0) return 0;
    int rank = 0;
    for (int i = 0; i < sv.size(); ++i)
        if (sv(i) > 1e-8 * sv(0)) ++rank;
    return rank;
}

void write_trajectory_csv(const std::string& path, const FlowTrajectory& traj) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArgumentError("cannot open trajectory file '" + path + "'");
    out << "t,loss,frob_norm,nuclear_norm,rank,distance_to_min_norm\n";
    out.precision(17);
    for (const auto& rec : traj.records)
        out << rec.t << ',' << rec.loss << ',' << rec.frob_norm << ',' << rec.nuclear_norm << ','
            << rec.rank << ',' << rec.distance_to_min_norm << '\n';
}

}  // namespace nsl
