/// Inverse square-root schedule with linear warmup:
/// `d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn lr_inverse_sqrt(step: u64, warmup: u64, d_model: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Fraction of `total_steps` spent warming up in [`lr_triangular`].
pub const TRIANGULAR_WARMUP: f64 = 0.1;

fn triangular_peak(total_steps: u64) -> u64 {
    ((total_steps as f64 * TRIANGULAR_WARMUP).round() as u64).clamp(1, total_steps.max(1))
}

/// Linear warmup to `peak` over the first 10% of `total_steps`, then linear decay to zero.
pub fn lr_triangular(step: u64, total_steps: u64, peak: f64) -> f64 {
    let top = triangular_peak(total_steps);
    let step = step.min(total_steps);
    if step <= top {
        peak * step as f64 / top as f64
    } else {
        peak * (total_steps - step) as f64 / (total_steps - top) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_sqrt_branches_meet_at_warmup() {
        let w = 4000;
        let a = (w as f64).powf(-0.5);
        let b = w as f64 * (w as f64).powf(-1.5);
        assert!((a - b).abs() < 1e-15);
        assert!((lr_inverse_sqrt(w, w, 512) - 512f64.powf(-0.5) * a).abs() < 1e-15);
    }

    #[test]
    fn inverse_sqrt_first_step() {
        let expected = 1.0 / 512f64.sqrt() * (1.0 / 4000f64.powf(1.5));
        assert!((lr_inverse_sqrt(1, 4000, 512) - expected).abs() < 1e-18);
    }

    #[test]
    fn inverse_sqrt_monotone_around_warmup() {
        let lrs: Vec<f64> = (1..=200).map(|s| lr_inverse_sqrt(s, 100, 64)).collect();
        assert!(lrs[..100].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[99..].windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn triangular_shape() {
        assert_eq!(lr_triangular(10, 100, 3e-4), 3e-4);
        assert_eq!(lr_triangular(100, 100, 3e-4), 0.0);
        assert!((lr_triangular(55, 100, 3e-4) - 1.5e-4).abs() < 1e-12);
        assert!((lr_triangular(5, 100, 1.0) - 0.5).abs() < 1e-12);
        // degenerate totals still reach the peak
        assert_eq!(lr_triangular(1, 1, 2.0), 2.0);
    }
}
