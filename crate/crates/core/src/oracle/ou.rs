/// Closed-form moments of the scalar Ornstein–Uhlenbeck process
/// `dY = α (β - Y) dt + √D dW` started from `N(μ0, Σ0)`.
pub fn ou_exact_moments(alpha: f64, beta: f64, d: f64, mu0: f64, sigma0: f64, t: f64) -> (f64, f64) {
    let stationary = d / (2.0 * alpha);
    let decay = (-alpha * t).exp();
    (beta + (mu0 - beta) * decay, stationary + (sigma0 - stationary) * decay * decay)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn limits() {
        let (m, v) = ou_exact_moments(1.5, 1.0, 0.25, 0.3, 0.01, 0.0);
        assert!((m - 0.3).abs() < 1e-15 && (v - 0.01).abs() < 1e-15);
        let (m, v) = ou_exact_moments(1.5, 1.0, 0.25, 0.3, 0.01, 100.0);
        assert!((m - 1.0).abs() < 1e-15);
        assert!((v - 0.25 / 3.0).abs() < 1e-15);
    }
}
