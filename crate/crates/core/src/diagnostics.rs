//! Error aggregation, per-region link statistics and the exhaustive-subset
//! regression of model error against those statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::profile::{LinkMeasurement, PathProfile};

/// Marker written in place of an R² that cannot be computed.
pub const UNDEFINED_MARKER: &str = "undefined";
/// Marker written when the normal matrix is singular.
pub const SINGULAR_MARKER: &str = "singular";

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("rmse needs at least one pair"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let sse: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sse / predictions.len() as f64).sqrt())
}

/// Sample standard deviation; `None` with fewer than two values.
pub fn sample_sd(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Some((ss / (n - 1.0)).sqrt())
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// How excess surface height over the direct path is summarised per link.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum DepthMode {
    /// Excess integrated along the path (metres of excess per metre of path).
    #[default]
    Integrated,
    /// Largest single excess.
    Max,
}

impl FromStr for DepthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "integrated" => Ok(DepthMode::Integrated),
            "max" => Ok(DepthMode::Max),
            other => Err(Error::Config(format!("unknown depth mode {other:?}"))),
        }
    }
}

impl fmt::Display for DepthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DepthMode::Integrated => "integrated",
            DepthMode::Max => "max",
        })
    }
}

fn excesses(profile: &PathProfile) -> impl Iterator<Item = f64> + '_ {
    profile
        .center_column()
        .enumerate()
        .map(|(i, h)| (h - profile.direct_path_height(i as f64)).max(0.0))
}

/// True when no center-column sample rises above the direct path.
pub fn is_los(profile: &PathProfile) -> bool {
    excesses(profile).all(|e| e <= 0.0)
}

/// Obstruction depth in metres. Corridor rows are one metre apart, so the
/// integrated form is a plain sum.
pub fn obstruction_depth(profile: &PathProfile, mode: DepthMode) -> f64 {
    match mode {
        DepthMode::Integrated => excesses(profile).sum(),
        DepthMode::Max => excesses(profile).fold(0.0, f64::max),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionStats {
    pub p_los: f64,
    /// Mean obstruction depth, metres.
    pub mu_o: f64,
    /// Sample SD of ground distance, metres; 0 for a single link.
    pub sigma_d: f64,
    /// Most frequent category label among the links.
    pub category: Option<String>,
    pub n_links: usize,
}

impl RegionStats {
    pub fn feature(&self, f: Feature) -> f64 {
        match f {
            Feature::PLos => self.p_los,
            Feature::MuO => self.mu_o,
            Feature::SigmaD => self.sigma_d,
        }
    }
}

pub fn link_stats(links: &[(LinkMeasurement, PathProfile)], mode: DepthMode) -> Result<RegionStats> {
    if links.is_empty() {
        return Err(Error::Empty("link_stats needs at least one link"));
    }
    let n = links.len() as f64;
    let los = links.iter().filter(|(_, p)| is_los(p)).count() as f64;
    let depth: f64 = links.iter().map(|(_, p)| obstruction_depth(p, mode)).sum();
    let distances: Vec<f64> = links.iter().map(|(l, _)| l.ground_distance()).collect();

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (l, _) in links {
        if let Some(c) = &l.category {
            *counts.entry(c).or_default() += 1;
        }
    }
    // BTreeMap iteration is lexical, so max_by_key keeps the last of equal
    // counts; reverse to keep the lexically first instead.
    let category = counts
        .iter()
        .rev()
        .max_by_key(|(_, &n)| n)
        .map(|(c, _)| c.to_string());

    Ok(RegionStats {
        p_los: los / n,
        mu_o: depth / n,
        sigma_d: sample_sd(&distances).unwrap_or(0.0),
        category,
        n_links: links.len(),
    })
}

/// Writes `region,n_links,p_los,mu_o,sigma_d,category`; a missing category
/// is an empty field.
pub fn write_region_stats_csv<W: Write>(writer: W, rows: &[(String, RegionStats)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["region", "n_links", "p_los", "mu_o", "sigma_d", "category"])?;
    for (region, s) in rows {
        wtr.write_record([
            region.clone(),
            s.n_links.to_string(),
            s.p_los.to_string(),
            s.mu_o.to_string(),
            s.sigma_d.to_string(),
            s.category.clone().unwrap_or_default(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn read_region_stats_csv<R: Read>(reader: R) -> Result<Vec<(String, RegionStats)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 6 {
            return Err(Error::format("region stats CSV", "expected 6 columns"));
        }
        let stats = RegionStats {
            n_links: rec[1]
                .parse()
                .map_err(|_| Error::format("region stats CSV", "bad n_links"))?,
            p_los: parse_f64(&rec[2], "p_los")?,
            mu_o: parse_f64(&rec[3], "mu_o")?,
            sigma_d: parse_f64(&rec[4], "sigma_d")?,
            category: (!rec[5].is_empty()).then(|| rec[5].to_string()),
        };
        out.push((rec[0].to_string(), stats));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Feature {
    PLos,
    MuO,
    SigmaD,
}

impl Feature {
    /// Display order inside a subset.
    pub const ALL: [Feature; 3] = [Feature::PLos, Feature::MuO, Feature::SigmaD];

    pub fn name(self) -> &'static str {
        match self {
            Feature::PLos => "p_LOS",
            Feature::MuO => "mu_o",
            Feature::SigmaD => "sigma_d",
        }
    }

    fn bit(self) -> u8 {
        match self {
            Feature::SigmaD => 1,
            Feature::MuO => 2,
            Feature::PLos => 4,
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Feature::ALL
            .into_iter()
            .find(|f| f.name() == s.trim())
            .ok_or_else(|| Error::format("regression CSV", format!("unknown feature {s:?}")))
    }
}

/// The seven non-empty feature subsets, smallest first; rows of equal size
/// are ordered by a bit mask in which σ_d is the low bit and p_LOS the high one.
pub fn feature_subsets() -> Vec<Vec<Feature>> {
    let mut masks: Vec<u8> = (1..8).collect();
    masks.sort_by_key(|m| (m.count_ones(), *m));
    masks
        .into_iter()
        .map(|m| Feature::ALL.into_iter().filter(|f| m & f.bit() != 0).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitStatus {
    Ok,
    /// Collinear or constant features; no coefficients.
    Singular,
    /// Constant target; coefficients are fitted but R² is undefined.
    ConstantTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionResult {
    pub features: Vec<Feature>,
    /// One per feature, on [0, 1]-normalized features; empty when singular.
    pub coefficients: Vec<f64>,
    pub intercept: Option<f64>,
    /// `None` unless the fit status is `Ok`.
    pub r_squared: Option<f64>,
    pub status: FitStatus,
}

impl RegressionResult {
    pub fn label(&self) -> String {
        self.features
            .iter()
            .map(|f| f.name())
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Map values linearly onto [0, 1]; a constant column maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect()
}

/// Solve `a x = b` in place by Gaussian elimination with partial pivoting.
/// Returns `None` when a pivot vanishes relative to the matrix scale.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-10 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Ordinary least squares with intercept. `columns` are the regressors.
pub fn ols(columns: &[Vec<f64>], y: &[f64]) -> Result<RegressionFit> {
    let n = y.len();
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::Shape("regressor and target lengths differ".into()));
    }
    let k = columns.len() + 1;
    let row = |i: usize| std::iter::once(1.0).chain(columns.iter().map(move |c| c[i]));
    let mut xtx = vec![vec![0.0; k]; k];
    let mut xty = vec![0.0; k];
    for i in 0..n {
        let xi: Vec<f64> = row(i).collect();
        for a in 0..k {
            for b in 0..k {
                xtx[a][b] += xi[a] * xi[b];
            }
            xty[a] += xi[a] * y[i];
        }
    }
    let Some(beta) = solve(xtx, xty) else {
        return Ok(RegressionFit::Singular);
    };
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum();
    let ss_res: f64 = (0..n)
        .map(|i| {
            let pred: f64 = row(i).zip(&beta).map(|(x, b)| x * b).sum();
            (y[i] - pred) * (y[i] - pred)
        })
        .sum();
    let r_squared = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(RegressionFit::Solved {
        intercept: beta[0],
        coefficients: beta[1..].to_vec(),
        r_squared,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegressionFit {
    Solved {
        intercept: f64,
        coefficients: Vec<f64>,
        r_squared: Option<f64>,
    },
    Singular,
}

/// Regress `targets` (one per region) on every non-empty subset of the
/// three link statistics after min-max normalizing each feature.
pub fn exhaustive_regression(stats: &[RegionStats], targets: &[f64]) -> Result<Vec<RegressionResult>> {
    if stats.len() < 2 {
        return Err(Error::Empty("regression needs at least two regions"));
    }
    if stats.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} regions vs {} targets",
            stats.len(),
            targets.len()
        )));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("regression target".into()));
    }
    let normalized: BTreeMap<Feature, Vec<f64>> = Feature::ALL
        .into_iter()
        .map(|f| {
            let raw: Vec<f64> = stats.iter().map(|s| s.feature(f)).collect();
            (f, min_max_normalize(&raw))
        })
        .collect();

    feature_subsets()
        .into_iter()
        .map(|features| {
            let cols: Vec<Vec<f64>> = features.iter().map(|f| normalized[f].clone()).collect();
            let fit = ols(&cols, targets)?;
            Ok(match fit {
                RegressionFit::Singular => RegressionResult {
                    features,
                    coefficients: Vec::new(),
                    intercept: None,
                    r_squared: None,
                    status: FitStatus::Singular,
                },
                RegressionFit::Solved {
                    intercept,
                    coefficients,
                    r_squared,
                } => RegressionResult {
                    features,
                    coefficients,
                    intercept: Some(intercept),
                    status: if r_squared.is_some() {
                        FitStatus::Ok
                    } else {
                        FitStatus::ConstantTarget
                    },
                    r_squared,
                },
            })
        })
        .collect()
}

/// Writes `features,r_squared,coefficients,intercept`.
pub fn write_regression_csv<W: Write>(writer: W, results: &[RegressionResult]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["features", "r_squared", "coefficients", "intercept"])?;
    for r in results {
        let r2 = match (r.status, r.r_squared) {
            (FitStatus::Singular, _) => SINGULAR_MARKER.to_string(),
            (_, Some(v)) => v.to_string(),
            (_, None) => UNDEFINED_MARKER.to_string(),
        };
        let coefs = r
            .coefficients
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let icpt = r.intercept.map(|v| v.to_string()).unwrap_or_default();
        wtr.write_record([r.label(), r2, coefs, icpt])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::format("report CSV", format!("bad {what} {s:?}")))
}

pub fn read_regression_csv<R: Read>(reader: R) -> Result<Vec<RegressionResult>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::format("regression CSV", "expected 4 columns"));
        }
        let features = rec[0]
            .split('+')
            .map(str::parse)
            .collect::<Result<Vec<Feature>>>()?;
        let coefficients = if rec[2].is_empty() {
            Vec::new()
        } else {
            rec[2]
                .split(';')
                .map(|c| parse_f64(c, "coefficient"))
                .collect::<Result<Vec<_>>>()?
        };
        let intercept = if rec[3].is_empty() {
            None
        } else {
            Some(parse_f64(&rec[3], "intercept")?)
        };
        let (status, r_squared) = match &rec[1] {
            SINGULAR_MARKER => (FitStatus::Singular, None),
            UNDEFINED_MARKER => (FitStatus::ConstantTarget, None),
            v => (FitStatus::Ok, Some(parse_f64(v, "r_squared")?)),
        };
        out.push(RegressionResult {
            features,
            coefficients,
            intercept,
            r_squared,
            status,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryRow {
    pub category: String,
    pub n_links: usize,
    pub rmse_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryReport {
    pub rows: Vec<CategoryRow>,
    /// Over every labeled link pooled together.
    pub overall: CategoryRow,
    /// Links without a category; left out of every row.
    pub unlabeled: usize,
}

pub const OVERALL_LABEL: &str = "overall";

fn category_rank(c: &str) -> (usize, &str) {
    let known = ["dense_urban", "suburban", "rural"];
    (known.iter().position(|k| *k == c).unwrap_or(known.len()), c)
}

/// RMSE per morphology category plus the pooled overall value.
pub fn categorize_report(
    predictions: &[f64],
    targets: &[f64],
    categories: &[Option<String>],
) -> Result<CategoryReport> {
    if predictions.len() != targets.len() || predictions.len() != categories.len() {
        return Err(Error::Shape("predictions, targets and categories differ in length".into()));
    }
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut unlabeled = 0;
    for ((p, t), c) in predictions.iter().zip(targets).zip(categories) {
        match c {
            Some(c) => {
                let g = groups.entry(c).or_default();
                g.0.push(*p);
                g.1.push(*t);
            }
            None => unlabeled += 1,
        }
    }
    if groups.is_empty() {
        return Err(Error::Empty("no labeled links"));
    }
    if unlabeled > 0 {
        log::warn!("{unlabeled} links without a category were excluded");
    }
    let mut rows = groups
        .iter()
        .map(|(c, (p, t))| {
            Ok(CategoryRow {
                category: c.to_string(),
                n_links: p.len(),
                rmse_db: rmse(p, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| category_rank(&a.category).cmp(&category_rank(&b.category)));

    let (all_p, all_t): (Vec<f64>, Vec<f64>) = predictions
        .iter()
        .zip(targets)
        .zip(categories)
        .filter(|(_, c)| c.is_some())
        .map(|((p, t), _)| (*p, *t))
        .unzip();
    let overall = CategoryRow {
        category: OVERALL_LABEL.into(),
        n_links: all_p.len(),
        rmse_db: rmse(&all_p, &all_t)?,
    };
    Ok(CategoryReport {
        rows,
        overall,
        unlabeled,
    })
}

/// Writes `category,n_links,rmse_db` with the pooled row last.
pub fn write_category_csv<W: Write>(writer: W, report: &CategoryReport) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["category", "n_links", "rmse_db"])?;
    for r in report.rows.iter().chain(std::iter::once(&report.overall)) {
        wtr.write_record([r.category.clone(), r.n_links.to_string(), r.rmse_db.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn read_category_csv<R: Read>(reader: R) -> Result<Vec<CategoryRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(Error::format("category CSV", "expected 3 columns"));
        }
        out.push(CategoryRow {
            category: rec[0].to_string(),
            n_links: rec[1]
                .parse()
                .map_err(|_| Error::format("category CSV", "bad n_links"))?,
            rmse_db: parse_f64(&rec[2], "rmse_db")?,
        });
    }
    Ok(out)
}
