use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Standard deviation of the recovered attached mass `q = d / sin²(nπl/L)`
/// given uncertainties in the damage information `d` and the location `l̂`,
/// by first-order propagation:
///
/// σ_q² = σ_d² / sin⁴θ + σ_l² · 4 n² π² d² cos²θ / (L² sin⁶θ),  θ = nπl̂/L.
///
/// Returns `f64::INFINITY` when `l̂` sits on a node of mode `n`.
pub fn error_propagation_sigma_q(sigma_d: f64, sigma_l: f64, d: f64, n: u32, length: f64, l_hat: f64) -> Result<f64> {
    let ok = sigma_d >= 0.0 && sigma_l >= 0.0 && d.is_finite() && n >= 1 && length > 0.0 && l_hat > 0.0 && l_hat < length;
    if !ok {
        return Err(Error::InvalidConfig(format!(
            "sigma_q needs σ_d, σ_l >= 0, n >= 1 and 0 < l̂ < L (got σ_d={sigma_d}, σ_l={sigma_l}, n={n}, L={length}, l̂={l_hat})"
        )));
    }
    let theta = n as f64 * PI * l_hat / length;
    let (s, c) = theta.sin_cos();
    if s.abs() < 1e-12 {
        return Ok(f64::INFINITY);
    }
    let s2 = s * s;
    let var = sigma_d * sigma_d / (s2 * s2)
        + sigma_l * sigma_l * 4.0 * (n as f64 * PI * d * c).powi(2) / (length * length * s2 * s2 * s2);
    Ok(var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midspan_first_mode_passes_sigma_d_through() {
        for (sd, sl) in [(0.1, 0.1), (0.37, 2.0), (0.0, 5.0)] {
            let s = error_propagation_sigma_q(sd, sl, 1.3, 1, 8.0, 4.0).unwrap();
            assert!((s - sd).abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn quarter_span_value_matches_independent_evaluation() {
        // θ = π/4: sin² = cos² = 1/2, so σ_q² = 4σ_d² + σ_l²·4π²d²·(1/2)/(L²/8).
        let (sd, sl, d, l) = (0.1, 0.1, 1.0, 8.0);
        let closed = (4.0 * sd * sd + sl * sl * 16.0 * PI * PI * d * d / (l * l)).sqrt();
        let s = error_propagation_sigma_q(sd, sl, d, 1, l, 2.0).unwrap();
        assert!((s - closed).abs() < 1e-12, "{s} vs {closed}");
        assert!((s - 0.254_310_855_062_703_5).abs() < 1e-12);
    }

    #[test]
    fn blows_up_near_a_support_and_on_nodes() {
        let s = error_propagation_sigma_q(0.1, 0.1, 1.0, 1, 8.0, 0.08).unwrap();
        assert!(s > 100.0 * 0.1, "{s}");
        assert!(error_propagation_sigma_q(0.1, 0.1, 1.0, 2, 8.0, 4.0).unwrap().is_infinite());
    }

    #[test]
    fn rejects_locations_outside_the_span() {
        assert!(error_propagation_sigma_q(0.1, 0.1, 1.0, 1, 8.0, 0.0).is_err());
        assert!(error_propagation_sigma_q(0.1, 0.1, 1.0, 1, 8.0, 8.0).is_err());
        assert!(error_propagation_sigma_q(0.1, 0.1, 1.0, 0, 8.0, 4.0).is_err());
    }
}
