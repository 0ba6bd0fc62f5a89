#pragma once

#include <Eigen/Dense>
#include <string>
#include <utility>
#include <vector>

#include "nsl/error.hpp"
#include "nsl/rng.hpp"

namespace nsl {

/// Linear least squares instance: loss(W) = 1/2 sum_i |y_i - W^T x_i|^2 with
/// samples as columns of x (n x s) and targets as columns of y (m x s).
struct FlowProblem {
    Eigen::MatrixXd x;
    Eigen::MatrixXd y;

    int n() const { return static_cast<int>(x.rows()); }
    int m() const { return static_cast<int>(y.rows()); }
    int samples() const { return static_cast<int>(x.cols()); }

    /// Random instance; when consistent, targets come from a planted W so the
    /// system has zero-residual solutions.
    static FlowProblem random(int n, int m, int s, Rng& rng, bool consistent = true);
};

double flow_loss(const Eigen::MatrixXd& w, const FlowProblem& p);

/// dW/dt = sum_i x_i r_i^T (negative gradient of the standard parameterization).
Eigen::MatrixXd standard_flow_derivative(const Eigen::MatrixXd& w, const FlowProblem& p);

/// (dW'/dt, dM/dt) for the factorized loss with r_i = y_i - W'^T M x_i:
/// dW'/dt = sum_i (M x_i) r_i^T,  dM/dt = sum_i W' r_i x_i^T.
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> nsl_flow_derivatives(const Eigen::MatrixXd& wp,
                                                                 const Eigen::MatrixXd& m,
                                                                 const FlowProblem& p);

/// Closed-form derivative of the composite W = M^T W' along the NSL flow:
/// M^T M sum_i x_i r_i^T + sum_i x_i r_i^T W'^T W'.
Eigen::MatrixXd composite_derivative(const Eigen::MatrixXd& wp, const Eigen::MatrixXd& m,
                                     const FlowProblem& p);

/// Either the raw W (standard mode) or the factor pair (W', M).
struct FlowState {
    bool factorized = false;
    Eigen::MatrixXd w;
    Eigen::MatrixXd wp, m;
    double t = 0.0;

    static FlowState standard(Eigen::MatrixXd w0);
    static FlowState nsl(Eigen::MatrixXd wp0, Eigen::MatrixXd m0);

    /// W in standard mode, M^T W' in NSL mode.
    Eigen::MatrixXd composite() const;
};

struct FlowRecord {
    double t = 0.0;
    double loss = 0.0;
    double frob_norm = 0.0;
    double nuclear_norm = 0.0;
    int rank = 0;
    double distance_to_min_norm = 0.0;  // NaN when the min-norm target is unavailable
};

struct FlowTrajectory {
    std::vector<FlowRecord> records;
    FlowState final_state;
    bool converged = false;  // stopped early because loss < stop_tol
    double dt = 0.0;         // step size actually used (after divergence retries)
};

/// Forward-Euler integration; records one row per accepted state (including
/// t = 0). Throws EvalError naming the step index when the loss exceeds 1e12.
FlowTrajectory integrate(FlowState state, const FlowProblem& p, double dt, int steps,
                         double stop_tol);

/// integrate() with automatic dt-halving retries on divergence.
FlowTrajectory run_flow(FlowState state, const FlowProblem& p, double dt, int steps,
                        double stop_tol, int max_retries = 8);

/// Least-norm solution W* of the consistent system W^T x_i = y_i via an SVD
/// pseudoinverse of the stacked sample matrix. Errors if the stacked X is not
/// of full row rank (regularized solving is out of scope here).
Eigen::MatrixXd min_norm_solution(const FlowProblem& p);

/// Sum of singular values.
double nuclear_norm(const Eigen::MatrixXd& w);

/// Number of singular values above 1e-8 * sigma_max.
int numerical_rank(const Eigen::MatrixXd& w);

/// CSV columns: t,loss,frob_norm,nuclear_norm,rank,distance_to_min_norm.
void write_trajectory_csv(const std::string& path, const FlowTrajectory& traj);

}  // namespace nsl
