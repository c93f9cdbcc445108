//! Standard Gaussian primitives in one and two dimensions.
//!
//! The bivariate CDF follows Genz's BVND scheme (Drezner–Wesolowsky with
//! Gauss–Legendre rules of 6, 12 or 20 points depending on |rho|), which is
//! accurate to roughly 1e-15 absolute. Arguments may be infinite; infinite
//! arguments reduce to the marginal CDFs.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};
use std::sync::OnceLock;

use libm::erfc;
use statrs::function::erf::erfc_inv;

use crate::error::{CdrError, Result};

const TWO_PI: f64 = 2.0 * PI;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Arguments of the standard bivariate Gaussian CDF Φ₂(a, b; ρ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BivArgs {
    pub a: f64,
    pub b: f64,
    pub rho: f64,
}

impl BivArgs {
    pub fn new(a: f64, b: f64, rho: f64) -> Result<Self> {
        if a.is_nan() || b.is_nan() {
            return Err(CdrError::Domain("bivariate argument is NaN".into()));
        }
        if !(-1.0..=1.0).contains(&rho) {
            return Err(CdrError::Domain(format!("correlation {rho} outside [-1, 1]")));
        }
        Ok(Self { a, b, rho })
    }

    pub fn cdf(&self) -> f64 {
        biv_cdf(self.a, self.b, self.rho)
    }

    pub fn pdf(&self) -> Result<f64> {
        biv_pdf(self.a, self.b, self.rho)
    }

    pub fn grad(&self) -> Result<(f64, f64, f64)> {
        biv_cdf_grad(self.a, self.b, self.rho)
    }

    pub fn hess_rho(&self) -> Result<(f64, f64, f64)> {
        biv_cdf_hess_rho(self.a, self.b, self.rho)
    }
}

pub fn std_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

pub fn std_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        1.0
    } else if x == f64::NEG_INFINITY {
        0.0
    } else {
        0.5 * erfc(-x * FRAC_1_SQRT_2)
    }
}

/// Inverse of [`std_cdf`]; 0 and 1 map to -∞ and +∞.
pub fn std_quantile(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CdrError::Domain(format!("probability {p} outside [0, 1]")));
    }
    if p == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if p == 1.0 {
        return Ok(f64::INFINITY);
    }
    let mut x = -SQRT_2 * erfc_inv(2.0 * p);
    // Newton polish on whichever tail is represented more accurately.
    for _ in 0..2 {
        let dens = std_pdf(x);
        if dens <= 0.0 || !x.is_finite() {
            break;
        }
        let resid = if x < 0.0 {
            std_cdf(x) - p
        } else {
            (1.0 - p) - std_cdf(-x)
        };
        x -= resid / dens;
    }
    Ok(x)
}

/// ln Φ(x), accurate far into the lower tail where Φ underflows.
pub fn log_std_cdf(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if x > 0.0 {
        return (-std_cdf(-x)).ln_1p();
    }
    if x > -30.0 {
        return std_cdf(x).ln();
    }
    // Asymptotic Mills-ratio expansion.
    let x2 = x * x;
    let inv = 1.0 / x2;
    let series = 1.0 - inv + 3.0 * inv * inv - 15.0 * inv * inv * inv + 105.0 * inv.powi(4);
    -0.5 * x2 - LN_SQRT_2PI - (-x).ln() + series.ln()
}

/// ln Φ₂(a, b; ρ). Falls back to the log-marginal when the other
/// coordinate makes the joint probability indistinguishable from it.
pub fn log_biv_cdf(a: f64, b: f64, rho: f64) -> f64 {
    let p = biv_cdf(a, b, rho);
    if p > 1e-300 {
        return p.ln();
    }
    // Deep lower tail in at least one coordinate.
    if b == f64::INFINITY || (b > 8.0 && rho >= 0.0) || std_cdf(b) == 1.0 {
        return log_std_cdf(a);
    }
    if a == f64::INFINITY || (a > 8.0 && rho >= 0.0) || std_cdf(a) == 1.0 {
        return log_std_cdf(b);
    }
    p.ln()
}

/// Standard bivariate Gaussian density.
pub fn biv_pdf(a: f64, b: f64, rho: f64) -> Result<f64> {
    if rho.abs() >= 1.0 {
        return Err(CdrError::DegenerateCorrelation);
    }
    Ok(biv_pdf_unchecked(a, b, rho))
}

pub(crate) fn biv_pdf_unchecked(a: f64, b: f64, rho: f64) -> f64 {
    if a.is_infinite() || b.is_infinite() {
        return 0.0;
    }
    let om = (1.0 - rho) * (1.0 + rho);
    let q = (a * a - 2.0 * rho * a * b + b * b) / om;
    (-0.5 * q).exp() / (TWO_PI * om.sqrt())
}

/// Φ₂(a, b; ρ) = Pr(X ≤ a, Y ≤ b) for a standard bivariate Gaussian with
/// correlation ρ ∈ [-1, 1].
pub fn biv_cdf(a: f64, b: f64, rho: f64) -> f64 {
    if a.is_nan() || b.is_nan() || rho.is_nan() {
        return f64::NAN;
    }
    if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
        return 0.0;
    }
    if a == f64::INFINITY {
        return std_cdf(b);
    }
    if b == f64::INFINITY {
        return std_cdf(a);
    }
    if rho >= 1.0 {
        return std_cdf(a.min(b));
    }
    if rho <= -1.0 {
        return (std_cdf(a) - std_cdf(-b)).max(0.0);
    }
    bvnd(-a, -b, rho).clamp(0.0, 1.0)
}

/// First partials (∂/∂a, ∂/∂b, ∂/∂ρ) of Φ₂.
pub fn biv_cdf_grad(a: f64, b: f64, rho: f64) -> Result<(f64, f64, f64)> {
    if rho.abs() >= 1.0 {
        return Err(CdrError::DegenerateCorrelation);
    }
    let p = BivPartials::at(a, b, rho);
    Ok((p.da, p.db, p.dr))
}

/// Mixed second partials (∂²/∂ρ∂a, ∂²/∂ρ∂b, ∂²/∂ρ²) of Φ₂.
pub fn biv_cdf_hess_rho(a: f64, b: f64, rho: f64) -> Result<(f64, f64, f64)> {
    if rho.abs() >= 1.0 {
        return Err(CdrError::DegenerateCorrelation);
    }
    let p = BivPartials::at(a, b, rho);
    Ok((p.dra, p.drb, p.drr))
}

/// Value and all first and second partial derivatives of Φ₂ at a point.
#[derive(Debug, Clone, Copy, Default)]
pub struct BivPartials {
    pub value: f64,
    pub da: f64,
    pub db: f64,
    pub dr: f64,
    pub daa: f64,
    pub dbb: f64,
    pub dab: f64,
    pub dra: f64,
    pub drb: f64,
    pub drr: f64,
}

impl BivPartials {
    /// Requires |rho| < 1; infinite a or b are allowed.
    pub fn at(a: f64, b: f64, rho: f64) -> Self {
        let value = biv_cdf(a, b, rho);
        if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
            return Self { value, ..Self::default() };
        }
        if a == f64::INFINITY && b == f64::INFINITY {
            return Self { value, ..Self::default() };
        }
        if b == f64::INFINITY {
            return Self {
                value,
                da: std_pdf(a),
                daa: -a * std_pdf(a),
                ..Self::default()
            };
        }
        if a == f64::INFINITY {
            return Self {
                value,
                db: std_pdf(b),
                dbb: -b * std_pdf(b),
                ..Self::default()
            };
        }
        let om = (1.0 - rho) * (1.0 + rho);
        let sd = om.sqrt();
        let wa = (b - rho * a) / sd;
        let wb = (a - rho * b) / sd;
        let pa = std_pdf(a);
        let pb = std_pdf(b);
        let da = pa * std_cdf(wa);
        let db = pb * std_cdf(wb);
        let dens = biv_pdf_unchecked(a, b, rho);
        let daa = -a * da - rho / sd * pa * std_pdf(wa);
        let dbb = -b * db - rho / sd * pb * std_pdf(wb);
        let dra = -dens * (a - rho * b) / om;
        let drb = -dens * (b - rho * a) / om;
        let drr = dens * (rho / om + (a * b * (1.0 + rho * rho) - rho * (a * a + b * b)) / (om * om));
        Self {
            value,
            da,
            db,
            dr: dens,
            daa,
            dbb,
            dab: dens,
            dra,
            drb,
            drr,
        }
    }
}

struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

fn gauss_legendre(n: usize) -> GaussLegendre {
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut deriv = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            deriv = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / deriv;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes.push(x);
        weights.push(2.0 / ((1.0 - x * x) * deriv * deriv));
    }
    GaussLegendre { nodes, weights }
}

fn rule_for(r: f64) -> &'static GaussLegendre {
    static RULES: OnceLock<[GaussLegendre; 3]> = OnceLock::new();
    let rules = RULES.get_or_init(|| [gauss_legendre(6), gauss_legendre(12), gauss_legendre(20)]);
    let ar = r.abs();
    if ar < 0.3 {
        &rules[0]
    } else if ar < 0.75 {
        &rules[1]
    } else {
        &rules[2]
    }
}

/// Upper orthant probability Pr(X > h, Y > k) for correlation r, |r| < 1.
fn bvnd(h: f64, k: f64, r: f64) -> f64 {
    let rule = rule_for(r);
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = 0.5 * (h * h + k * k);
        let asr = r.asin();
        for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
            let sn = (asr * (x + 1.0) * 0.5).sin();
            bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
        }
        return bvn * asr / (2.0 * TWO_PI) + std_cdf(-h) * std_cdf(-k);
    }
    let mut k = k;
    if r < 0.0 {
        k = -k;
        hk = -hk;
    }
    if r.abs() < 1.0 {
        let as_ = (1.0 - r) * (1.0 + r);
        let mut a = as_.sqrt();
        let bs = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        let expo = -0.5 * (bs / as_ + hk);
        if expo > -100.0 {
            bvn = a * expo.exp() * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
        }
        if hk > -160.0 {
            let b = bs.sqrt();
            bvn -= (-0.5 * hk).exp()
                * TWO_PI.sqrt()
                * std_cdf(-b / a)
                * b
                * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
        }
        a *= 0.5;
        for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
            let xs = (a * (x + 1.0)) * (a * (x + 1.0));
            let rs = (1.0 - xs).sqrt();
            bvn += a
                * w
                * ((-bs / (2.0 * xs) - hk / (1.0 + rs)).exp() / rs
                    - (-0.5 * (bs / xs + hk)).exp() * (1.0 + c * xs * (1.0 + d * xs)));
        }
        bvn = -bvn / TWO_PI;
    }
    if r > 0.0 {
        bvn + std_cdf(-h.max(k))
    } else {
        let mut out = -bvn;
        if k > h {
            if h < 0.0 {
                out += std_cdf(k) - std_cdf(h);
            } else {
                out += std_cdf(-h) - std_cdf(-k);
            }
        }
        out
    }
}
