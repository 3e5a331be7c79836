//! Overlap metrics and the significance tests used to compare experiment
//! arms: one-way ANOVA, pooled two-sample t-tests with Bonferroni
//! adjustment, and the two-sample Kolmogorov-Smirnov test.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::data::is_binary;
use crate::{Error, Image, Result};

pub fn dice(pred: &Image, truth: &Image) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(Error::shape(truth.shape(), pred.shape()));
    }
    if !is_binary(pred) || !is_binary(truth) {
        return Err(Error::Validation("dice needs binary masks".into()));
    }
    let inter: f64 = pred.iter().zip(truth).map(|(a, b)| a * b).sum();
    let total = pred.sum() + truth.sum();
    Ok(if total == 0.0 { 1.0 } else { 2.0 * inter / total })
}

/// Pearson correlation of two images; 0 if either is constant.
pub fn normalized_cross_correlation(a: &Image, b: &Image) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    let (ma, mb) = (a.mean().unwrap_or(0.0), b.mean().unwrap_or(0.0));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Ok(if saa == 0.0 || sbb == 0.0 { 0.0 } else { sab / (saa * sbb).sqrt() })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anova {
    pub f: f64,
    pub p: f64,
    pub df_between: usize,
    pub df_within: usize,
}

pub fn one_way_anova(groups: &[&[f64]]) -> Result<Anova> {
    if groups.len() < 2 {
        return Err(Error::param("groups", format!("need at least 2 groups, got {}", groups.len())));
    }
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(Error::param("groups", format!("every group needs 2 values, one has {}", g.len())));
    }
    let n: usize = groups.iter().map(|g| g.len()).sum();
    let k = groups.len();
    let grand = groups.iter().flat_map(|g| g.iter()).sum::<f64>() / n as f64;
    let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    // equal group means carry no between-group signal; rounding in `grand`
    // must not invent any
    let ssb: f64 = if means.iter().all(|&m| m == means[0]) {
        0.0
    } else {
        groups.iter().zip(&means).map(|(g, m)| g.len() as f64 * (m - grand).powi(2)).sum()
    };
    let ssw: f64 = groups
        .iter()
        .map(|g| {
            let m = mean(g);
            g.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        })
        .sum();
    let (d1, d2) = (k - 1, n - k);
    let (f, p) = if ssw == 0.0 {
        if ssb == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY, 0.0)
        }
    } else {
        let f = (ssb / d1 as f64) / (ssw / d2 as f64);
        let dist = FisherSnedecor::new(d1 as f64, d2 as f64).map_err(|e| Error::param("groups", e.to_string()))?;
        (f, dist.sf(f))
    };
    Ok(Anova {
        f,
        p,
        df_between: d1,
        df_within: d2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-sided equal-variance two-sample t-test.
pub fn t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::param("groups", "each group needs at least 2 values"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = a.len() + b.len() - 2;
    let pooled = ((na - 1.0) * variance(a) + (nb - 1.0) * variance(b)) / df as f64;
    let diff = mean(a) - mean(b);
    let se = (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    let (t, p) = if se == 0.0 {
        if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (diff.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = diff / se;
        let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::param("groups", e.to_string()))?;
        (t, (2.0 * dist.sf(t.abs())).min(1.0))
    };
    Ok(TTest { t, p, df })
}

pub fn bonferroni(p: f64, m: usize) -> f64 {
    (p * m as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustedTTest {
    pub t: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
}

pub fn t_test_bonferroni(pairs: &[(&[f64], &[f64])], m: usize) -> Result<Vec<AdjustedTTest>> {
    if m < pairs.len() {
        return Err(Error::param("m", format!("{m} comparisons is fewer than the {} pairs", pairs.len())));
    }
    pairs
        .iter()
        .map(|(a, b)| {
            let r = t_test(a, b)?;
            Ok(AdjustedTTest {
                t: r.t,
                p_raw: r.p,
                p_adjusted: bonferroni(r.p, m),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsTest {
    pub d: f64,
    pub p: f64,
}

/// Asymptotic Kolmogorov distribution tail `Q(lambda)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov test with the Stephens small-sample
/// correction on the asymptotic p value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsTest> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::param("samples", "both samples must be non-empty"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Validation("ks test input contains NaN".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < na && j < nb {
        let v = a[i].min(b[j]);
        while i < na && a[i] <= v {
            i += 1;
        }
        while j < nb && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let en = ((na * nb) as f64 / (na + nb) as f64).sqrt();
    let p = kolmogorov_q((en + 0.12 + 0.11 / en) * d);
    Ok(KsTest { d, p })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmScores {
    pub name: String,
    pub dice: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub a: String,
    pub b: String,
    pub t: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub arms: Vec<ArmScores>,
    pub anova: Anova,
    pub pairs: Vec<PairComparison>,
    /// Bonferroni comparison count: every unordered pair of arms.
    pub m: usize,
}

impl StatsReport {
    pub fn from_scores(arms: Vec<ArmScores>) -> Result<Self> {
        let groups: Vec<&[f64]> = arms.iter().map(|a| a.dice.as_slice()).collect();
        let anova = one_way_anova(&groups)?;
        let mut index = Vec::new();
        for i in 0..arms.len() {
            for j in i + 1..arms.len() {
                index.push((i, j));
            }
        }
        let m = index.len();
        let raw: Vec<(&[f64], &[f64])> = index.iter().map(|&(i, j)| (groups[i], groups[j])).collect();
        let tests = t_test_bonferroni(&raw, m)?;
        let pairs = index
            .iter()
            .zip(tests)
            .map(|(&(i, j), r)| PairComparison {
                a: arms[i].name.clone(),
                b: arms[j].name.clone(),
                t: r.t,
                p_raw: r.p_raw,
                p_adjusted: r.p_adjusted,
            })
            .collect();
        Ok(Self { arms, anova, pairs, m })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:>4} {:>8} {:>8}", "arm", "n", "mean", "sd");
        for a in &self.arms {
            let _ = writeln!(
                out,
                "{:<22} {:>4} {:>8.4} {:>8.4}",
                a.name,
                a.dice.len(),
                mean(&a.dice),
                variance(&a.dice).sqrt()
            );
        }
        let _ = writeln!(
            out,
            "\nANOVA F({}, {}) = {:.4}, p = {:.4e}\n",
            self.anova.df_between, self.anova.df_within, self.anova.f, self.anova.p
        );
        let _ = writeln!(
            out,
            "{:<22} {:<22} {:>9} {:>11} {:>11}",
            "arm a", "arm b", "t", "p", format!("p x{}", self.m)
        );
        for p in &self.pairs {
            let _ = writeln!(
                out,
                "{:<22} {:<22} {:>9.4} {:>11.4e} {:>11.4e}",
                p.a, p.b, p.t, p.p_raw, p.p_adjusted
            );
        }
        out
    }
}
