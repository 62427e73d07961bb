//! Theoretical cost model and scaling analysis: convolution and attention
//! operation counts, patch sequence lengths, the VC-style generalization
//! bound, and power-law fits of training time against data size.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::models::ModelSpec;
use crate::real::{self, Real};
use crate::{Error, Result};

/// Multiply-accumulate count of one convolution: `k²·H·W·C_in·C_out`.
pub fn conv_cost(k: u64, h: u64, w: u64, c_in: u64, c_out: u64) -> Result<u64> {
    if [k, h, w, c_in, c_out].contains(&0) {
        return Err(Error::contract(
            "conv_cost",
            "all arguments must be positive",
        ));
    }
    Ok(k * k * h * w * c_in * c_out)
}

/// Attention-matrix cost of one layer: `N²·d`.
pub fn attention_cost(n: u64, d: u64) -> Result<u64> {
    if n == 0 || d == 0 {
        return Err(Error::contract(
            "attention_cost",
            "N and d must be at least 1",
        ));
    }
    Ok(n * n * d)
}

/// Number of non-overlapping `patch×patch` tiles.
pub fn sequence_length(h: usize, w: usize, patch: usize) -> Result<usize> {
    if patch == 0 || h == 0 || w == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(Error::dim(
            "sequence_length",
            format!("{h}x{w} is not divisible into {patch}x{patch} patches"),
        ));
    }
    Ok((h / patch) * (w / patch))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationBound {
    pub vc: Real,
    pub delta: Real,
    pub n: u64,
    pub epsilon: Real,
}

/// `ε = √(vc·ln(1/δ)/n)`.
pub fn generalization_bound(vc: Real, delta: Real, n: u64) -> Result<GeneralizationBound> {
    if !(vc >= 0.0) || !vc.is_finite() {
        return Err(Error::contract(
            "generalization_bound",
            format!("capacity {vc} must be >= 0"),
        ));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::contract(
            "generalization_bound",
            format!("delta {delta} outside (0,1)"),
        ));
    }
    if n == 0 {
        return Err(Error::contract(
            "generalization_bound",
            "sample count must be >= 1",
        ));
    }
    let epsilon = real::sqrt(vc * real::ln(1.0 / delta) / n as Real);
    Ok(GeneralizationBound {
        vc,
        delta,
        n,
        epsilon,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    SubLinear,
    Linear,
    SuperLinear,
}

impl Regime {
    /// Tolerance around 1 that still counts as linear.
    pub const TOLERANCE: Real = 0.05;

    pub fn of(exponent: Real) -> Self {
        if exponent < 1.0 - Self::TOLERANCE {
            Regime::SubLinear
        } else if exponent > 1.0 + Self::TOLERANCE {
            Regime::SuperLinear
        } else {
            Regime::Linear
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Regime::SubLinear => "sub-linear",
            Regime::Linear => "linear",
            Regime::SuperLinear => "super-linear",
        }
    }
}

/// `T(N) = a·N^b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: Real,
    pub b: Real,
    pub points: Vec<(Real, Real)>,
    pub regime: Regime,
}

impl PowerLawFit {
    pub fn eval(&self, n: Real) -> Real {
        self.a * real::pow(n, self.b)
    }
}

/// Two points: exact exponent `ln(T₂/T₁)/ln(N₂/N₁)`. More points: ordinary
/// least squares on `(ln N, ln T)`.
pub fn powerlaw_fit(points: &[(Real, Real)]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(Error::contract("powerlaw_fit", "need at least two points"));
    }
    if let Some(&(n, t)) = points.iter().find(|(n, t)| !(*n > 0.0) || !(*t > 0.0)) {
        return Err(Error::Domain(format!(
            "power-law fit needs positive values, got ({n}, {t})"
        )));
    }
    for (i, p) in points.iter().enumerate() {
        if points[..i].iter().any(|q| q.0 == p.0) {
            return Err(Error::contract(
                "powerlaw_fit",
                format!("duplicate N = {}", p.0),
            ));
        }
    }
    let (a, b) = if points.len() == 2 {
        let ((n1, t1), (n2, t2)) = (points[0], points[1]);
        let b = real::ln(t2 / t1) / real::ln(n2 / n1);
        (t1 / real::pow(n1, b), b)
    } else {
        let k = points.len() as Real;
        let xs: Vec<Real> = points.iter().map(|p| real::ln(p.0)).collect();
        let ys: Vec<Real> = points.iter().map(|p| real::ln(p.1)).collect();
        let mx = xs.iter().sum::<Real>() / k;
        let my = ys.iter().sum::<Real>() / k;
        let sxy: Real = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: Real = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let b = sxy / sxx;
        (real::exp(my - b * mx), b)
    };
    Ok(PowerLawFit {
        a,
        b,
        points: points.to_vec(),
        regime: Regime::of(b),
    })
}

/// One training-time measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingPoint {
    pub model: String,
    pub fraction: Real,
    pub seconds: Real,
}

/// Exponent between two consecutive data fractions of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingStep {
    pub model: String,
    pub from: Real,
    pub to: Real,
    pub fit: PowerLawFit,
}

/// Pairwise exponents between consecutive fractions, per model, in the
/// order models first appear in `timings`.
pub fn scaling_table(timings: &[TimingPoint]) -> Result<Vec<ScalingStep>> {
    let mut models: Vec<&str> = Vec::new();
    for t in timings {
        if !models.contains(&t.model.as_str()) {
            models.push(&t.model);
        }
    }
    let mut out = Vec::new();
    for m in models {
        let mut pts: Vec<(Real, Real)> = timings
            .iter()
            .filter(|t| t.model == m)
            .map(|t| (t.fraction, t.seconds))
            .collect();
        if pts.len() < 2 {
            return Err(Error::contract(
                "scaling_table",
                format!(
                    "model {m} has {} timing point(s); a fit needs two",
                    pts.len()
                ),
            ));
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pts.windows(2) {
            out.push(ScalingStep {
                model: m.to_string(),
                from: w[0].0,
                to: w[1].0,
                fit: powerlaw_fit(w)?,
            });
        }
    }
    Ok(out)
}

/// Training times measured on one T4 pair, averaged over three seeds
/// (model, data fraction, seconds).
pub const REFERENCE_TIMINGS: [(&str, Real, Real); 9] = [
    ("cnn", 1.0, 588.6),
    ("cnn", 0.7, 452.9),
    ("cnn", 0.5, 344.7),
    ("vit", 1.0, 896.2),
    ("vit", 0.7, 650.2),
    ("vit", 0.5, 391.9),
    ("hybrid", 1.0, 961.3),
    ("hybrid", 0.7, 598.6),
    ("hybrid", 0.5, 511.7),
];

pub fn reference_timings() -> Vec<TimingPoint> {
    REFERENCE_TIMINGS
        .iter()
        .map(|&(m, f, s)| TimingPoint {
            model: m.to_string(),
            fraction: f,
            seconds: s,
        })
        .collect()
}

/// Operation count of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: String,
    pub ops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub model: String,
    pub entries: Vec<LayerCost>,
    /// Transformer sequence length (None for a pure CNN).
    pub sequence_length: Option<u64>,
    pub embed_dim: Option<u64>,
    pub attention_layers: u64,
    pub total: u64,
}

impl ComplexityReport {
    /// `N²` of the transformer stage.
    pub fn n_squared(&self) -> Option<u64> {
        self.sequence_length.map(|n| n * n)
    }

    /// Attention cost summed over layers, `L·N²·d`.
    pub fn attention_total(&self) -> Option<u64> {
        Some(self.attention_layers * self.n_squared()? * self.embed_dim?)
    }
}

/// Per-layer convolution and attention costs of a spec.
pub fn complexity_report(spec: &ModelSpec) -> Result<ComplexityReport> {
    let trace = spec.validate()?;
    let mut entries = Vec::new();
    let [mut h, mut w, mut c] = spec.input_shape;
    if let Some(conv) = &spec.conv {
        for (i, &f) in conv.filters.iter().enumerate() {
            entries.push(LayerCost {
                layer: format!("block{}.conv", i + 1),
                ops: conv_cost(conv.kernel as u64, h as u64, w as u64, c as u64, f as u64)?,
            });
            if conv.pool[i] {
                h /= 2;
                w /= 2;
            }
            c = f;
        }
    }
    let mut seq = None;
    let mut dim = None;
    let mut layers = 0;
    if let Some(t) = &spec.transformer {
        let n = sequence_length(h, w, t.patch)? as u64;
        let [_, flat] = trace.shape_of("patch_flatten").unwrap() else {
            unreachable!()
        };
        let d = t.embed_dim as u64;
        entries.push(LayerCost {
            layer: "embed.projection".into(),
            ops: n * *flat as u64 * d,
        });
        for i in 0..t.blocks {
            entries.push(LayerCost {
                layer: format!("transformer{}.attention", i + 1),
                ops: attention_cost(n, d)?,
            });
        }
        seq = Some(n);
        dim = Some(d);
        layers = t.blocks as u64;
    }
    let total = entries.iter().map(|e| e.ops).sum();
    Ok(ComplexityReport {
        model: spec.kind.name().to_string(),
        entries,
        sequence_length: seq,
        embed_dim: dim,
        attention_layers: layers,
        total,
    })
}

/// One row of the sequence-length comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub model: String,
    pub input: String,
    pub n: u64,
    pub n_squared: u64,
    /// `N²` relative to the reference row.
    pub relative: Real,
    /// `N` relative to the reference row.
    pub sequence_ratio: Real,
    /// `L·N²·d` relative to the reference row (includes the embedding width
    /// and depth); informational.
    pub scaled_relative: Real,
}

/// Sequence-length table for every transformer-bearing spec, normalized to
/// the spec with the smallest `N²` (the hybrid for the default specs).
pub fn complexity_table(specs: &[ModelSpec]) -> Result<Vec<ComplexityRow>> {
    let mut reports = Vec::new();
    for s in specs {
        let r = complexity_report(s)?;
        if r.sequence_length.is_some() {
            let input = match &s.conv {
                Some(_) => {
                    let t = s.validate()?;
                    let m = t.shape_of("conv_stage").unwrap();
                    format!("{}x{} feat. map", m[0], m[1])
                }
                None => format!("{}x{} image", s.input_shape[0], s.input_shape[1]),
            };
            reports.push((r, input));
        }
    }
    let Some((reference, _)) = reports.iter().min_by_key(|(r, _)| r.n_squared().unwrap()) else {
        return Ok(Vec::new());
    };
    let (ref_n, ref_n2) = (
        reference.sequence_length.unwrap(),
        reference.n_squared().unwrap(),
    );
    let ref_scaled = reference.attention_total().unwrap();
    Ok(reports
        .iter()
        .map(|(r, input)| ComplexityRow {
            model: r.model.clone(),
            input: input.clone(),
            n: r.sequence_length.unwrap(),
            n_squared: r.n_squared().unwrap(),
            relative: r.n_squared().unwrap() as Real / ref_n2 as Real,
            sequence_ratio: r.sequence_length.unwrap() as Real / ref_n as Real,
            scaled_relative: r.attention_total().unwrap() as Real / ref_scaled as Real,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_cost_examples() {
        assert_eq!(conv_cost(1, 1, 1, 1, 1).unwrap(), 1);
        assert_eq!(
            conv_cost(3, 128, 128, 3, 32).unwrap(),
            9 * 128 * 128 * 3 * 32
        );
        assert_eq!(conv_cost(3, 128, 128, 3, 32).unwrap(), 14_155_776);
        assert_eq!(
            conv_cost(3, 256, 128, 3, 32).unwrap(),
            2 * conv_cost(3, 128, 128, 3, 32).unwrap()
        );
        assert!(conv_cost(0, 1, 1, 1, 1).is_err());
    }

    #[test]
    fn attention_cost_examples() {
        assert_eq!(attention_cost(64, 1).unwrap(), 4096);
        assert_eq!(attention_cost(4, 1).unwrap(), 16);
        assert_eq!(
            attention_cost(64, 1).unwrap() / attention_cost(4, 1).unwrap(),
            256
        );
        assert_eq!(attention_cost(1, 32).unwrap(), 32);
    }

    #[test]
    fn sequence_length_examples() {
        assert_eq!(sequence_length(128, 128, 16).unwrap(), 64);
        assert_eq!(sequence_length(32, 32, 16).unwrap(), 4);
        assert_eq!(sequence_length(16, 16, 16).unwrap(), 1);
        assert!(sequence_length(30, 32, 16).is_err());
    }

    #[test]
    fn bound_examples() {
        assert_eq!(generalization_bound(0.0, 0.05, 10).unwrap().epsilon, 0.0);
        // √(100·ln 20 / 1000)
        let e = generalization_bound(100.0, 0.05, 1000).unwrap().epsilon;
        assert!((e - 0.5473).abs() < 1e-3, "{e}");
        let a = generalization_bound(7.0, 0.1, 100).unwrap().epsilon;
        let b = generalization_bound(7.0, 0.1, 400).unwrap().epsilon;
        assert!((a / b - 2.0).abs() < 1e-12);
        assert!(generalization_bound(1.0, 1.0, 1).is_err());
        assert!(generalization_bound(-1.0, 0.5, 1).is_err());
        assert!(generalization_bound(1.0, 0.5, 0).is_err());
    }

    #[test]
    fn reference_exponents() {
        let cases = [
            ((0.5, 344.7), (0.7, 452.9), 0.81, Regime::SubLinear),
            ((0.5, 391.9), (0.7, 650.2), 1.50, Regime::SuperLinear),
            ((0.7, 598.6), (1.0, 961.3), 1.33, Regime::SuperLinear),
        ];
        for (p, q, b, regime) in cases {
            let fit = powerlaw_fit(&[p, q]).unwrap();
            assert!((fit.b - b).abs() < 0.02, "{} vs {b}", fit.b);
            assert_eq!(fit.regime, regime);
        }
    }

    #[test]
    fn least_squares_recovers_exact_power_law() {
        let pts: Vec<(Real, Real)> = [0.3, 0.5, 0.7, 1.0]
            .iter()
            .map(|&n| (n, 12.5 * libm::pow(n, 1.7)))
            .collect();
        let fit = powerlaw_fit(&pts).unwrap();
        assert!((fit.b - 1.7).abs() < 1e-12);
        assert!((fit.a - 12.5).abs() < 1e-10);
    }

    #[test]
    fn powerlaw_domain_errors() {
        assert!(matches!(
            powerlaw_fit(&[(0.0, 1.0), (1.0, 2.0)]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            powerlaw_fit(&[(1.0, -1.0), (2.0, 2.0)]),
            Err(Error::Domain(_))
        ));
        assert!(powerlaw_fit(&[(1.0, 1.0)]).is_err());
        assert!(powerlaw_fit(&[(1.0, 1.0), (1.0, 2.0)]).is_err());
    }

    #[test]
    fn regime_boundaries() {
        assert_eq!(Regime::of(0.94), Regime::SubLinear);
        assert_eq!(Regime::of(1.0), Regime::Linear);
        assert_eq!(Regime::of(1.05), Regime::Linear);
        assert_eq!(Regime::of(1.06), Regime::SuperLinear);
    }

    #[test]
    fn default_complexity_rows() {
        let rows =
            complexity_table(&[ModelSpec::cnn(), ModelSpec::vit(), ModelSpec::hybrid()]).unwrap();
        assert_eq!(rows.len(), 2);
        let vit = &rows[0];
        let hyb = &rows[1];
        assert_eq!((vit.n, vit.n_squared), (64, 4096));
        assert_eq!((hyb.n, hyb.n_squared), (4, 16));
        assert_eq!(vit.relative, 256.0);
        assert_eq!(hyb.relative, 1.0);
        assert_eq!(vit.sequence_ratio, 16.0);
        let same = complexity_table(&[ModelSpec::vit(), ModelSpec::vit()]).unwrap();
        assert!(same.iter().all(|r| r.relative == 1.0));
    }

    #[test]
    fn report_totals_equal_entry_sum() {
        for spec in [ModelSpec::cnn(), ModelSpec::vit(), ModelSpec::hybrid()] {
            let r = complexity_report(&spec).unwrap();
            assert_eq!(r.total, r.entries.iter().map(|e| e.ops).sum::<u64>());
        }
    }
}
