//! Closed-form survival of decoding schedules under a per-step hazard.
//!
//! A step that unmasks `r` tokens while the visible window holds `W` tokens
//! corrupts the structure with probability `p_r(W)`; `q = log(1 - p)` is its
//! log-survival. Summing `q` over a schedule gives its total log-survival.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum HazardFamily {
    /// `p = 0` everywhere.
    Zero,
    /// `p = min(cap, c * r / W)`.
    Ratio { c: f64, cap: f64 },
}

impl HazardFamily {
    pub fn ratio(c: f64, cap: f64) -> Result<Self> {
        let f = HazardFamily::Ratio { c, cap };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            HazardFamily::Zero => Ok(()),
            HazardFamily::Ratio { c, cap } => {
                if !(c > 0.0 && c.is_finite()) || !(cap > 0.0 && cap < 1.0) {
                    return Err(Error::config(format!(
                        "ratio family needs c > 0 and cap in (0,1), got c={c} cap={cap}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn p(&self, r: f64, w: f64) -> f64 {
        match *self {
            HazardFamily::Zero => 0.0,
            HazardFamily::Ratio { c, cap } => (c * r / w).min(cap),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HazardFamily::Zero => "zero",
            HazardFamily::Ratio { .. } => "ratio",
        }
    }

    /// Parameters as `key=value` pairs separated by `;`.
    pub fn params(&self) -> String {
        match *self {
            HazardFamily::Zero => String::new(),
            HazardFamily::Ratio { c, cap } => format!("c={c};cap={cap}"),
        }
    }
}

/// `log(1 - p_r(W))`; `-inf` once `p >= 1`.
pub fn q_value(family: &HazardFamily, r: f64, w: f64) -> Result<f64> {
    if !(r >= 1.0 && w >= 1.0) {
        return Err(Error::domain(format!(
            "hazard needs r >= 1 and W >= 1, got r={r} W={w}"
        )));
    }
    let p = family.p(r, w);
    Ok(if p >= 1.0 { f64::NEG_INFINITY } else { (-p).ln_1p() })
}

fn rate(l: usize, s: usize) -> Result<usize> {
    if l == 0 || s == 0 || l % s != 0 {
        return Err(Error::domain(format!("S = {s} must divide L = {l}")));
    }
    Ok(l / s)
}

/// `sum_{t=1}^{n} q_r(t r)`.
fn ramp(family: &HazardFamily, r: usize, n: usize) -> Result<f64> {
    (1..=n).map(|t| q_value(family, r as f64, (t * r) as f64)).sum()
}

/// Whole-window schedule: `sum_{t=1}^{S} q_r(t r)` with `r = L / S`.
#[allow(non_snake_case)]
pub fn Q_default(l: usize, s: usize, family: &HazardFamily) -> Result<f64> {
    let r = rate(l, s)?;
    ramp(family, r, s)
}

/// `b` blocks of `L/b` slots, `S/b` steps each: `b * sum_{t=1}^{S/b} q_r(t r)`.
#[allow(non_snake_case)]
pub fn Q_semi_ar(l: usize, s: usize, b: usize, family: &HazardFamily) -> Result<f64> {
    if b == 0 || l % b != 0 || s % b != 0 {
        return Err(Error::domain(format!("b = {b} must divide L = {l} and S = {s}")));
    }
    let r = rate(l, s)?;
    Ok(b as f64 * ramp(family, r, s / b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ConvMode {
    /// Steady segment counted in steps: `((L - K) / r) * q_r(K)`.
    #[default]
    PerStep,
    /// Steady segment counted in tokens: `(L - K) * q_r(K)`.
    PaperLiteral,
}

/// Ramp up to a visible window of `K`, then a steady state at `W = K`.
#[allow(non_snake_case)]
pub fn Q_conv(l: usize, s: usize, k: usize, family: &HazardFamily, mode: ConvMode) -> Result<f64> {
    let r = rate(l, s)?;
    if k == 0 || k > l || k % r != 0 {
        return Err(Error::domain(format!(
            "kernel {k} must be <= L = {l} and a multiple of r = {r}"
        )));
    }
    let q_k = q_value(family, r as f64, k as f64)?;
    let steady_steps = match mode {
        ConvMode::PerStep => ((l - k) / r) as f64,
        ConvMode::PaperLiteral => (l - k) as f64,
    };
    let steady = if steady_steps == 0.0 { 0.0 } else { steady_steps * q_k };
    Ok(steady + ramp(family, r, k / r)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    pub q_default: f64,
    pub q_semi_ar: f64,
    pub q_conv: f64,
    /// `Q_sa <= Q_c`.
    pub sa_le_conv: bool,
    /// `Q_c <= Q_0`.
    pub conv_le_default: bool,
}

impl Ordering {
    pub fn ok(&self) -> bool {
        self.sa_le_conv && self.conv_le_default
    }
}

/// Tolerance for comparing sums that agree up to rounding.
const ORDER_TOL: f64 = 1e-12;

/// Computes the three schedules with `K = L / b` and checks
/// `Q_sa <= Q_c <= Q_0`.
pub fn verify_ordering(l: usize, s: usize, b: usize, family: &HazardFamily) -> Result<Ordering> {
    if b == 0 || l % b != 0 {
        return Err(Error::domain(format!("b = {b} must divide L = {l}")));
    }
    let q0 = Q_default(l, s, family)?;
    let qsa = Q_semi_ar(l, s, b, family)?;
    let qc = Q_conv(l, s, l / b, family, ConvMode::PerStep)?;
    let le = |a: f64, b: f64| a <= b + ORDER_TOL * (1.0 + b.abs());
    Ok(Ordering {
        q_default: q0,
        q_semi_ar: qsa,
        q_conv: qc,
        sa_le_conv: le(qsa, qc),
        conv_le_default: le(qc, q0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardRow {
    pub l: usize,
    pub s: usize,
    pub b: usize,
    pub k: usize,
    pub family: HazardFamily,
    pub ordering: Ordering,
}

/// Evaluates every admissible `(L, S, b)` combination for each family.
/// Combinations where `S` does not divide `L` or `b` does not divide `S`
/// are skipped.
pub fn hazard_grid(ls: &[usize], ss: &[usize], bs: &[usize], families: &[HazardFamily]) -> Result<Vec<HazardRow>> {
    let mut rows = Vec::new();
    for family in families {
        family.validate()?;
        for &l in ls {
            for &s in ss {
                for &b in bs {
                    if s == 0 || b == 0 || l % s != 0 || s % b != 0 || l % b != 0 || s > l {
                        continue;
                    }
                    rows.push(HazardRow {
                        l,
                        s,
                        b,
                        k: l / b,
                        family: *family,
                        ordering: verify_ordering(l, s, b, family)?,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Formats `x`, printing negative zero as `0`.
fn num(x: f64) -> String {
    (x + 0.0).to_string()
}

pub fn write_grid_csv<W: Write>(rows: &[HazardRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "L",
        "S",
        "b",
        "K",
        "family",
        "params",
        "Q_default",
        "Q_semi_ar",
        "Q_conv",
        "ordering_ok",
    ])
    .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    for r in rows {
        out.write_record([
            r.l.to_string(),
            r.s.to_string(),
            r.b.to_string(),
            r.k.to_string(),
            r.family.name().to_string(),
            r.family.params(),
            num(r.ordering.q_default),
            num(r.ordering.q_semi_ar),
            num(r.ordering.q_conv),
            r.ordering.ok().to_string(),
        ])
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    out.flush()?;
    Ok(())
}
