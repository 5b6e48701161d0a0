#pragma once

namespace flowvi {

/// log Γ(x) for x > 0. Recurrence up to x ≥ 10, then the Stirling series;
/// absolute error below 1e-13 on [0.5, 1e6]. Throws DomainError for x ≤ 0.
double log_gamma(double x);

/// ψ(x) = d/dx log Γ(x) for x > 0, via the same recurrence/asymptotic split.
double digamma(double x);

/// log(1 + e^x) without overflow.
double softplus(double x);

/// Inverse of softplus: log(e^y − 1) for y > 0.
double softplus_inverse(double y);

double sigmoid(double x);

}  // namespace flowvi
