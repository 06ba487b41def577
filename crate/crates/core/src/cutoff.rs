use crate::error::{Error, Result};

/// Default per-axis sample count for certification.
pub const DEFAULT_SAMPLES: usize = 10_000;

/// Product bump psi(r, tau) = phi(r) chi(tau): phi is 1 on [0, R/2] and 0
/// from R on, chi is 1 on [0, Lambda/4] and 0 from Lambda on. Both factors
/// are a squared seventh-order smoothstep, so psi is C^2 with the slope
/// vanishing to high order where the support ends.
#[derive(Debug, Clone)]
pub struct CutoffProfile {
    pub r: f64,
    pub lambda: f64,
    pub alpha: f64,
}

/// Value and two derivatives of the unit transition q on [0, 1]; q(0) = 1,
/// q(1) = 0, q' <= 0, constant outside.
fn unit_transition(t: f64) -> (f64, f64, f64) {
    if t <= 0.0 {
        return (1.0, 0.0, 0.0);
    }
    if t >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    // the step is symmetric (s(t) + s(1 - t) = 1), so sigma = 1 - s(t) has
    // two safe evaluations: the literal one while sigma is near 1, and
    // s(1 - t) once the subtraction would cancel; the seam value s(1/2) is
    // an exact binary fraction, so both branches meet bit for bit, and each
    // keeps sigma monotone at roundoff scale on its own half
    let w = 1.0 - t;
    let sigma = if t <= 0.5 {
        let t2 = t * t;
        1.0 - t2 * t2 * (35.0 - 84.0 * t + 70.0 * t2 - 20.0 * t2 * t)
    } else {
        let w2 = w * w;
        w2 * w2 * (35.0 - 84.0 * w + 70.0 * w2 - 20.0 * w2 * w)
    };
    let sigma_p = -140.0 * (t * w) * (t * w) * (t * w);
    let sigma_pp = -420.0 * (t * w) * (t * w) * (1.0 - 2.0 * t);
    let q = sigma * sigma;
    let qp = 2.0 * sigma * sigma_p;
    let qpp = 2.0 * sigma_p * sigma_p + 2.0 * sigma * sigma_pp;
    (q, qp, qpp)
}

impl CutoffProfile {
    pub fn new(r: f64, lambda: f64, alpha: f64) -> Result<Self> {
        if !(r > 0.0) || !(lambda > 0.0) {
            return Err(Error::invariant("cutoff box dimensions must be positive"));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invariant("cutoff exponent must lie strictly between 0 and 1"));
        }
        Ok(CutoffProfile { r, lambda, alpha })
    }

    fn spatial_arg(&self, rad: f64) -> f64 {
        (rad - self.r / 2.0) / (self.r / 2.0)
    }

    fn temporal_arg(&self, tau: f64) -> f64 {
        (tau - self.lambda / 4.0) / (3.0 * self.lambda / 4.0)
    }

    pub fn spatial(&self, rad: f64) -> f64 {
        unit_transition(self.spatial_arg(rad)).0
    }

    pub fn spatial_deriv(&self, rad: f64) -> f64 {
        unit_transition(self.spatial_arg(rad)).1 * 2.0 / self.r
    }

    pub fn spatial_second_deriv(&self, rad: f64) -> f64 {
        unit_transition(self.spatial_arg(rad)).2 * 4.0 / (self.r * self.r)
    }

    pub fn temporal(&self, tau: f64) -> f64 {
        unit_transition(self.temporal_arg(tau)).0
    }

    pub fn temporal_deriv(&self, tau: f64) -> f64 {
        unit_transition(self.temporal_arg(tau)).1 * 4.0 / (3.0 * self.lambda)
    }

    pub fn value(&self, rad: f64, tau: f64) -> f64 {
        self.spatial(rad) * self.temporal(tau)
    }
}

pub fn build_cutoff(r: f64, lambda: f64, alpha: f64) -> Result<CutoffProfile> {
    CutoffProfile::new(r, lambda, alpha)
}

/// Measured ratio constants plus the pointwise property checks. Ratios are
/// taken on the unit-interval transition, where the chain rule cancels the
/// box dimensions, so the numbers depend only on the profile shape and the
/// exponent; the product form makes per-axis sampling cover the full grid.
#[derive(Debug, Clone)]
pub struct CutoffCertificate {
    pub alpha: f64,
    /// sup of max(|d_r psi| R, |d_r^2 psi| R^2) / psi^alpha.
    pub c_alpha: f64,
    pub c_half: f64,
    pub c_three_quarters: f64,
    /// sup of |d_tau psi| Lambda / psi^{1/2}.
    pub d_temporal: f64,
    /// One-dimensional profile constant max(sup psi'^2/psi, sup (-psi'')_+)
    /// on the unit interval with transition on [1/2, 1].
    pub c_base: f64,
    pub samples: usize,
    pub plateau_ok: bool,
    pub support_ok: bool,
    pub sign_ok: bool,
    pub pass: bool,
}

pub fn certify_cutoff(profile: &CutoffProfile, samples: usize) -> Result<CutoffCertificate> {
    if samples < 2 {
        return Err(Error::invariant("certification needs at least two samples per axis"));
    }
    let mut c_alpha = 0.0f64;
    let mut c_half = 0.0f64;
    let mut c_three_quarters = 0.0f64;
    let mut d_temporal = 0.0f64;
    let mut c_base = 0.0f64;
    let mut sign_ok = true;
    let mut prev_q = f64::INFINITY;
    for i in 0..samples {
        let u = i as f64 / (samples - 1) as f64;
        let (q, qp, qpp) = unit_transition(u);
        if qp > 0.0 {
            sign_ok = false;
        }
        if q > prev_q + 1e-15 {
            sign_ok = false;
        }
        prev_q = q;
        if q <= 0.0 {
            continue;
        }
        let first = 2.0 * qp.abs();
        let second = 4.0 * qpp.abs();
        c_alpha = c_alpha.max(first / q.powf(profile.alpha)).max(second / q.powf(profile.alpha));
        c_half = c_half.max(first / q.sqrt()).max(second / q.sqrt());
        c_three_quarters =
            c_three_quarters.max(first / q.powf(0.75)).max(second / q.powf(0.75));
        d_temporal = d_temporal.max(4.0 / 3.0 * qp.abs() / q.sqrt());
        // 1-D profile with the transition on the second half of the unit
        // interval: psi_1' = 2 q', psi_1'' = 4 q''
        c_base = c_base.max(4.0 * qp * qp / q).max((-4.0 * qpp).max(0.0));
    }
    // plateau: the bump and its slope are exactly constant on the inner
    // half-ball and the early window
    let mut plateau_ok = profile.value(0.0, 0.0) == 1.0;
    for frac in [0.0, 0.1, 0.25, 0.4999] {
        plateau_ok &= profile.spatial(frac * profile.r) == 1.0;
        plateau_ok &= profile.spatial_deriv(frac * profile.r) == 0.0;
    }
    for frac in [0.0, 0.1, 0.2499] {
        plateau_ok &= profile.temporal(frac * profile.lambda) == 1.0;
    }
    let mut support_ok = true;
    for frac in [1.0, 1.1, 2.0, 10.0] {
        support_ok &= profile.spatial(frac * profile.r) == 0.0;
        support_ok &= profile.temporal(frac * profile.lambda) == 0.0;
    }
    let finite = [c_alpha, c_half, c_three_quarters, d_temporal, c_base]
        .iter()
        .all(|v| v.is_finite() && *v > 0.0);
    Ok(CutoffCertificate {
        alpha: profile.alpha,
        c_alpha,
        c_half,
        c_three_quarters,
        d_temporal,
        c_base,
        samples,
        plateau_ok,
        support_ok,
        sign_ok,
        pass: plateau_ok && support_ok && sign_ok && finite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn plateau_support_and_seams() {
        let p = build_cutoff(4.0, 1.0, 0.75).unwrap();
        assert_eq!(p.value(0.0, 0.0), 1.0);
        assert_eq!(p.spatial(1.99), 1.0);
        assert_eq!(p.spatial(4.0), 0.0);
        assert_eq!(p.spatial(7.0), 0.0);
        assert_eq!(p.temporal(0.24), 1.0);
        assert_eq!(p.temporal(1.0), 0.0);
        assert_eq!(p.value(3.0, 2.0), 0.0);
        // C^2 seams: value and slope approach the plateau levels smoothly
        assert!((p.spatial(2.0 + 1e-4) - 1.0).abs() < 1e-12);
        assert!(p.spatial_deriv(2.0 + 1e-4).abs() < 1e-9);
        assert!(p.spatial(4.0 - 1e-4) < 1e-25);
    }

    #[test]
    fn spatial_slope_never_positive() {
        let p = build_cutoff(3.0, 0.5, 0.5).unwrap();
        let mut last = f64::INFINITY;
        for i in 0..5000 {
            let rad = 4.0 * i as f64 / 4999.0;
            assert!(p.spatial_deriv(rad) <= 0.0);
            let v = p.spatial(rad);
            assert!(v <= last + 1e-15);
            last = v;
        }
    }

    #[test]
    fn certificate_matches_independent_scan() {
        let p = build_cutoff(4.0, 1.0, 0.75).unwrap();
        let cert = certify_cutoff(&p, 10_000).unwrap();
        assert!(cert.pass);
        assert_relative_eq!(cert.c_half, 166.18272113364987, max_relative = 1e-9);
        assert_relative_eq!(cert.c_three_quarters, 1324.8610879537063, max_relative = 1e-9);
        assert_relative_eq!(cert.d_temporal, 5.8333331582983298, max_relative = 1e-9);
        assert_relative_eq!(cert.c_base, 76.562495405331227, max_relative = 1e-9);
        assert_relative_eq!(cert.c_alpha, cert.c_three_quarters, epsilon = 0.0);
    }

    #[test]
    fn ratio_peaks_near_closed_forms() {
        // the temporal ratio peaks at 35/6 and the profile constant at
        // 1225/16, both attained mid-transition
        let p = build_cutoff(1.0, 1.0, 0.5).unwrap();
        let cert = certify_cutoff(&p, 40_001).unwrap();
        assert_relative_eq!(cert.d_temporal, 35.0 / 6.0, max_relative = 1e-8);
        assert_relative_eq!(cert.c_base, 1225.0 / 16.0, max_relative = 1e-8);
    }

    #[test]
    fn certificate_is_scale_free() {
        let a = certify_cutoff(&build_cutoff(4.0, 1.0, 0.6).unwrap(), 2000).unwrap();
        let b = certify_cutoff(&build_cutoff(17.0, 0.03, 0.6).unwrap(), 2000).unwrap();
        assert_eq!(a.c_alpha.to_bits(), b.c_alpha.to_bits());
        assert_eq!(a.c_half.to_bits(), b.c_half.to_bits());
        assert_eq!(a.d_temporal.to_bits(), b.d_temporal.to_bits());
        assert_eq!(a.c_base.to_bits(), b.c_base.to_bits());
    }

    #[test]
    fn doubling_the_sampling_barely_moves_the_constants() {
        let p = build_cutoff(4.0, 1.0, 0.75).unwrap();
        let a = certify_cutoff(&p, DEFAULT_SAMPLES).unwrap();
        let b = certify_cutoff(&p, 2 * DEFAULT_SAMPLES).unwrap();
        for (x, y) in [
            (a.c_three_quarters, b.c_three_quarters),
            (a.d_temporal, b.d_temporal),
            (a.c_base, b.c_base),
            (a.c_half, b.c_half),
        ] {
            assert!((x - y).abs() / y.abs() < 0.01, "{x} vs {y}");
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(build_cutoff(0.0, 1.0, 0.5).is_err());
        assert!(build_cutoff(1.0, -1.0, 0.5).is_err());
        assert!(build_cutoff(1.0, 1.0, 0.0).is_err());
        assert!(build_cutoff(1.0, 1.0, 1.0).is_err());
        let p = build_cutoff(1.0, 1.0, 0.5).unwrap();
        assert!(certify_cutoff(&p, 1).is_err());
    }

    #[test]
    fn exponent_ordering() {
        let p = build_cutoff(2.0, 2.0, 0.25).unwrap();
        let cert = certify_cutoff(&p, 5000).unwrap();
        assert!(cert.c_half <= cert.c_three_quarters);
        assert!(cert.c_alpha <= cert.c_half);
        assert!(cert.pass);
    }
}
