//! Listening-test statistics: MOS summaries, one-way ANOVA, Tukey HSD and
//! violin-plot densities.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
pub enum Dimension {
    /// Audio quality.
    #[serde(rename = "AQ")]
    #[value(name = "AQ")]
    Aq,
    /// Dryness level.
    #[serde(rename = "DL")]
    #[value(name = "DL")]
    Dl,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub rater_id: String,
    pub system_id: String,
    pub item_id: String,
    pub dimension: Dimension,
    pub score: u8,
}

/// Validated ratings: scores in 1..=5, one per (rater, system, item, dimension).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RatingsTable {
    rows: Vec<Rating>,
}

impl RatingsTable {
    pub fn new(rows: Vec<Rating>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if !(1..=5).contains(&r.score) {
                return Err(Error::validation(format!(
                    "score {} by {} for {}/{} is outside 1..=5",
                    r.score, r.rater_id, r.system_id, r.item_id
                )));
            }
            if !seen.insert((&r.rater_id, &r.system_id, &r.item_id, r.dimension)) {
                return Err(Error::validation(format!(
                    "duplicate rating by {} for {}/{} ({:?})",
                    r.rater_id, r.system_id, r.item_id, r.dimension
                )));
            }
        }
        Ok(Self { rows })
    }

    /// Parses CSV with the header `rater_id,system_id,item_id,dimension,score`.
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, rec) in csv::Reader::from_reader(reader).deserialize::<Rating>().enumerate() {
            rows.push(rec.map_err(|e| Error::validation(format!("ratings row {}: {e}", i + 1)))?);
        }
        Self::new(rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(f)
    }

    pub fn rows(&self) -> &[Rating] {
        &self.rows
    }

    /// Scores of `dimension` grouped by system, in system-id order.
    pub fn groups(&self, dimension: Dimension) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.dimension == dimension) {
            out.entry(r.system_id.clone()).or_default().push(r.score as f64);
        }
        out
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemSummary {
    pub system: String,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl SystemSummary {
    /// `mean ± std` with two decimals.
    pub fn display(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, self.std)
    }
}

pub fn mos_summary(table: &RatingsTable, dimension: Dimension) -> Result<Vec<SystemSummary>> {
    let groups = table.groups(dimension);
    if groups.is_empty() {
        return Err(Error::validation(format!("no {dimension:?} ratings")));
    }
    Ok(groups
        .into_iter()
        .map(|(system, x)| {
            let m = mean(&x);
            let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64;
            SystemSummary {
                system,
                mean: m,
                std: var.sqrt(),
                n: x.len(),
            }
        })
        .collect())
}

/// Writes non-finite values as the strings `"inf"`, `"-inf"` or `"nan"`.
fn sentinel<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnovaResult {
    #[serde(serialize_with = "sentinel")]
    pub f: f64,
    pub p: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub ss_between: f64,
    pub ss_within: f64,
}

fn check_groups(groups: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    if groups.len() < 2 {
        return Err(Error::validation(format!("ANOVA needs at least 2 systems, found {}", groups.len())));
    }
    if let Some((s, x)) = groups.iter().find(|(_, x)| x.len() < 2) {
        return Err(Error::validation(format!("system {s} has {} rating(s); need at least 2", x.len())));
    }
    Ok(())
}

/// Fixed-effects one-way ANOVA over raw groups. With zero within-group
/// variance, `f` is `+inf` (p = 0) if the means differ and 0 (p = 1) if not.
pub fn anova_groups(groups: &BTreeMap<String, Vec<f64>>) -> Result<AnovaResult> {
    check_groups(groups)?;
    let all: Vec<f64> = groups.values().flatten().copied().collect();
    let grand = mean(&all);
    let (mut ssb, mut ssw) = (0.0, 0.0);
    for x in groups.values() {
        let m = mean(x);
        ssb += x.len() as f64 * (m - grand) * (m - grand);
        ssw += x.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    let df_b = groups.len() - 1;
    let df_w = all.len() - groups.len();
    let (f, p) = if ssw == 0.0 {
        if ssb > 0.0 {
            (f64::INFINITY, 0.0)
        } else {
            (0.0, 1.0)
        }
    } else {
        let f = (ssb / df_b as f64) / (ssw / df_w as f64);
        let dist = FisherSnedecor::new(df_b as f64, df_w as f64).map_err(|e| Error::validation(e.to_string()))?;
        (f, dist.sf(f).clamp(0.0, 1.0))
    };
    Ok(AnovaResult {
        f,
        p,
        df_between: df_b,
        df_within: df_w,
        ss_between: ssb,
        ss_within: ssw,
    })
}

pub fn anova_oneway(table: &RatingsTable, dimension: Dimension) -> Result<AnovaResult> {
    anova_groups(&table.groups(dimension))
}

fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (1..=n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
            loop {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    let w = 2.0 / ((1.0 - x * x) * dp * dp);
                    return (x, w);
                }
            }
        })
        .collect()
}

/// Composite Gauss-Legendre rule on `[a, b]`.
fn integrate(a: f64, b: f64, panels: usize, rule: &[(f64, f64)], mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        for &(x, w) in rule {
            total += w * f(mid + 0.5 * h * x);
        }
    }
    0.5 * h * total
}

fn phi_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// CDF of the range of `k` standard normals.
fn range_cdf(w: f64, k: usize, rule: &[(f64, f64)]) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let v = integrate(-8.5, 8.5, 24, rule, |z| {
        let d = phi_cdf(z) - phi_cdf(z - w);
        norm * (-0.5 * z * z).exp() * d.powi(k as i32 - 1)
    });
    (k as f64 * v).clamp(0.0, 1.0)
}

/// CDF of the studentized range with `k` groups and `df` degrees of freedom.
pub fn ptukey(q: f64, k: usize, df: f64) -> f64 {
    assert!(k >= 2 && df > 0.0, "ptukey needs k >= 2 and df > 0");
    if q <= 0.0 {
        return 0.0;
    }
    if q.is_infinite() {
        return 1.0;
    }
    let rule = gauss_legendre(16);
    if df > 50_000.0 {
        return range_cdf(q, k, &rule);
    }
    let half = 0.5 * df;
    let log_c = half * df.ln() - ln_gamma(half) - (half - 1.0) * std::f64::consts::LN_2;
    let spread = 12.0 / (2.0 * df).sqrt();
    let (lo, hi) = ((1.0 - spread).max(0.0), 1.0 + spread.max(8.0 / df.sqrt()));
    let v = integrate(lo, hi, 24, &rule, |s| {
        if s <= 0.0 {
            return 0.0;
        }
        let log_g = log_c + (df - 1.0) * s.ln() - half * s * s;
        log_g.exp() * range_cdf(q * s, k, &rule)
    });
    v.clamp(0.0, 1.0)
}

/// Quantile of the studentized range distribution, by bisection.
pub fn qtukey(p: f64, k: usize, df: f64) -> f64 {
    assert!((0.0..1.0).contains(&p), "qtukey needs p in [0, 1)");
    let (mut lo, mut hi) = (0.0, 1.0);
    while ptukey(hi, k, df) < p {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ptukey(mid, k, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairComparison {
    pub system_a: String,
    pub system_b: String,
    /// `mean_b - mean_a`.
    pub diff: f64,
    #[serde(serialize_with = "sentinel")]
    pub q: f64,
    pub p_adj: f64,
    pub significant: bool,
}

/// Tukey-Kramer pairwise comparisons on raw groups.
pub fn tukey_groups(groups: &BTreeMap<String, Vec<f64>>, alpha: f64) -> Result<Vec<PairComparison>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation(format!("alpha {alpha} must lie in (0, 1)")));
    }
    let anova = anova_groups(groups)?;
    let msw = anova.ss_within / anova.df_within as f64;
    let k = groups.len();
    let stats: Vec<(&String, f64, usize)> = groups.iter().map(|(s, x)| (s, mean(x), x.len())).collect();
    let mut out = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let (a, ma, na) = stats[i];
            let (b, mb, nb) = stats[j];
            let diff = mb - ma;
            let se = (0.5 * msw * (1.0 / na as f64 + 1.0 / nb as f64)).sqrt();
            let q = if diff == 0.0 {
                0.0
            } else if se == 0.0 {
                f64::INFINITY
            } else {
                diff.abs() / se
            };
            let p_adj = (1.0 - ptukey(q, k, anova.df_within as f64)).clamp(0.0, 1.0);
            out.push(PairComparison {
                system_a: a.clone(),
                system_b: b.clone(),
                diff,
                q,
                p_adj,
                significant: p_adj < alpha,
            });
        }
    }
    Ok(out)
}

pub fn tukey_hsd(table: &RatingsTable, dimension: Dimension, alpha: f64) -> Result<Vec<PairComparison>> {
    tukey_groups(&table.groups(dimension), alpha)
}

/// `"***"`, `"**"`, `"*"` or `"n.s."` for p below 0.001, 0.01, 0.05 or not.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        "n.s."
    }
}

pub const VIOLIN_GRID: (f64, f64, usize) = (0.5, 5.5, 501);
/// Bandwidth used when all scores of a system are equal.
pub const DEGENERATE_BANDWIDTH: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViolinCurve {
    pub system: String,
    pub n: usize,
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    /// First quartile, median, third quartile (linear interpolation).
    pub quartiles: [f64; 3],
    pub min: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Gaussian KDE with Scott's bandwidth, reflected at the grid ends so the
/// curve keeps unit mass on `[0.5, 5.5]`.
pub fn violin_curve(system: &str, scores: &[f64]) -> Result<ViolinCurve> {
    if scores.is_empty() {
        return Err(Error::validation(format!("system {system} has no ratings")));
    }
    let n = scores.len();
    let m = mean(scores);
    let sd = if n > 1 {
        (scores.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let h = if sd > 0.0 { sd * (n as f64).powf(-0.2) } else { DEGENERATE_BANDWIDTH };
    let (a, b, points) = VIOLIN_GRID;
    let grid: Vec<f64> = (0..points).map(|i| a + (b - a) * i as f64 / (points - 1) as f64).collect();
    let norm = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let kern = |u: f64| (-0.5 * u * u).exp();
    let density = grid
        .iter()
        .map(|&x| {
            norm * scores
                .iter()
                .map(|&s| kern((x - s) / h) + kern((x - (2.0 * a - s)) / h) + kern((x - (2.0 * b - s)) / h))
                .sum::<f64>()
        })
        .collect();
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ViolinCurve {
        system: system.to_string(),
        n,
        bandwidth: h,
        grid,
        density,
        quartiles: [quantile(&sorted, 0.25), quantile(&sorted, 0.5), quantile(&sorted, 0.75)],
        min: sorted[0],
        max: sorted[n - 1],
    })
}

pub fn violin_export(table: &RatingsTable, dimension: Dimension) -> Result<Vec<ViolinCurve>> {
    let groups = table.groups(dimension);
    if groups.is_empty() {
        return Err(Error::validation(format!("no {dimension:?} ratings")));
    }
    groups.iter().map(|(s, x)| violin_curve(s, x)).collect()
}

/// Everything `mos-analyze` reports for one dimension.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MosReport {
    pub toolkit_version: String,
    pub dimension: Dimension,
    pub alpha: f64,
    pub summary: Vec<SystemSummary>,
    pub summary_display: BTreeMap<String, String>,
    /// Absent when fewer than two systems have at least two ratings.
    pub anova: Option<AnovaResult>,
    pub tukey: Vec<PairComparison>,
    pub violins: Vec<ViolinCurve>,
}

pub fn analyze(table: &RatingsTable, dimension: Dimension, alpha: f64) -> Result<MosReport> {
    let summary = mos_summary(table, dimension)?;
    let groups = table.groups(dimension);
    let (anova, tukey) = match check_groups(&groups) {
        Ok(()) => (Some(anova_groups(&groups)?), tukey_groups(&groups, alpha)?),
        Err(_) => (None, Vec::new()),
    };
    Ok(MosReport {
        toolkit_version: crate::VERSION.into(),
        dimension,
        alpha,
        summary_display: summary.iter().map(|s| (s.system.clone(), s.display())).collect(),
        summary,
        anova,
        tukey,
        violins: violin_export(table, dimension)?,
    })
}
