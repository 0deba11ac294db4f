use std::io::{Read, Write};

use super::dataset::{RegionDataset, Sample};
use super::plan::TrainPlan;
use super::split::geographic_split;
use super::train::{evaluate_rmse_db, train_model, BatchObserver, TrainOutcome};
use crate::diagnostics::{mean, sample_sd};
use crate::error::{Error, Result};
use crate::nn::CnnModel;
use crate::profile::{ConfigKind, NormalizationSpec};

/// Text written for a statistic that needs more data than available.
pub const NA: &str = "NA";
/// Holdout label of the summary row.
pub const MEAN_ROW: &str = "mean";

#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutSummary {
    pub holdout: String,
    /// Test RMSE in dB of each run, in run order.
    pub run_rmse_db: Vec<f64>,
    pub mean_db: f64,
    /// Sample SD over runs; `None` for a single run.
    pub sd_db: Option<f64>,
}

impl HoldoutSummary {
    pub fn new(holdout: impl Into<String>, run_rmse_db: Vec<f64>) -> Result<Self> {
        let mean_db = mean(&run_rmse_db).ok_or(Error::Empty("runs"))?;
        let sd_db = sample_sd(&run_rmse_db);
        Ok(Self {
            holdout: holdout.into(),
            run_rmse_db,
            mean_db,
            sd_db,
        })
    }
}

/// Cross-validation test errors.
#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub kind: ConfigKind,
    pub holdouts: Vec<HoldoutSummary>,
    /// Unweighted mean of the per-holdout means.
    pub grand_mean_db: f64,
    /// Unweighted mean of the per-holdout SDs, when every holdout has one.
    pub grand_sd_db: Option<f64>,
}

impl CvReport {
    pub fn from_holdouts(kind: ConfigKind, holdouts: Vec<HoldoutSummary>) -> Result<Self> {
        let means: Vec<f64> = holdouts.iter().map(|h| h.mean_db).collect();
        let grand_mean_db = mean(&means).ok_or(Error::Empty("holdouts"))?;
        let sds: Option<Vec<f64>> = holdouts.iter().map(|h| h.sd_db).collect();
        Ok(Self {
            kind,
            holdouts,
            grand_mean_db,
            grand_sd_db: sds.and_then(|s| mean(&s)),
        })
    }

    pub fn write_runs_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["holdout", "run", "rmse_db"])?;
        for h in &self.holdouts {
            for (run, r) in h.run_rmse_db.iter().enumerate() {
                wtr.write_record([h.holdout.clone(), run.to_string(), r.to_string()])?;
            }
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    /// One row per holdout plus the mean row.
    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["holdout", "model", "runs", "mean_rmse_db", "sd_rmse_db"])?;
        let sd = |v: Option<f64>| v.map_or(NA.to_string(), |s| s.to_string());
        for h in &self.holdouts {
            wtr.write_record([
                h.holdout.clone(),
                self.kind.to_string(),
                h.run_rmse_db.len().to_string(),
                h.mean_db.to_string(),
                sd(h.sd_db),
            ])?;
        }
        let runs = self.holdouts.first().map_or(0, |h| h.run_rmse_db.len());
        wtr.write_record([
            MEAN_ROW.to_string(),
            self.kind.to_string(),
            runs.to_string(),
            self.grand_mean_db.to_string(),
            sd(self.grand_sd_db),
        ])?;
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    /// Rebuild a report from a runs CSV.
    pub fn read_runs_csv<R: Read>(kind: ConfigKind, reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut holdouts: Vec<(String, Vec<f64>)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::format("runs CSV", "expected holdout,run,rmse_db"));
            }
            let v: f64 = rec[2]
                .parse()
                .map_err(|_| Error::format("runs CSV", format!("bad rmse {:?}", &rec[2])))?;
            match holdouts.last_mut() {
                Some((h, vals)) if h == &rec[0] => vals.push(v),
                _ => holdouts.push((rec[0].to_string(), vec![v])),
            }
        }
        let hs = holdouts
            .into_iter()
            .map(|(h, v)| HoldoutSummary::new(h, v))
            .collect::<Result<Vec<_>>>()?;
        Self::from_holdouts(kind, hs)
    }
}

/// `(holdout, mean_rmse_db)` rows of a summary CSV, without the mean row.
pub fn read_summary_csv<R: Read>(reader: R) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 5 {
            return Err(Error::format("summary CSV", "expected 5 columns"));
        }
        if &rec[0] == MEAN_ROW {
            continue;
        }
        let v: f64 = rec[3]
            .parse()
            .map_err(|_| Error::format("summary CSV", format!("bad mean {:?}", &rec[3])))?;
        out.push((rec[0].to_string(), v));
    }
    Ok(out)
}

/// Pool the per-region geographic splits of `regions`.
pub fn pooled_split<'a>(
    regions: &[&'a RegionDataset],
    plan: &TrainPlan,
) -> Result<(Vec<&'a Sample>, Vec<&'a Sample>)> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for r in regions {
        let s = geographic_split(r, plan.split_ratio, plan.cell_size_m, plan.seed)?;
        train.extend(s.train.iter().map(|&i| &r.samples()[i]));
        val.extend(s.validation.iter().map(|&i| &r.samples()[i]));
    }
    Ok((train, val))
}

/// One trained run of a cross-validation fold.
#[derive(Debug, Clone)]
pub struct CvRun {
    pub holdout: String,
    pub run: usize,
    pub rmse_db: f64,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: CvReport,
    pub runs: Vec<CvRun>,
}

/// Leave-one-region-out cross-validation. Each holdout's model is trained on
/// the pooled geographic splits of the other regions and tested on all of
/// the holdout's links.
pub fn cross_validate(
    regions: &[RegionDataset],
    plan: &TrainPlan,
    kind: ConfigKind,
    norm: &NormalizationSpec,
    observer: &mut dyn BatchObserver,
) -> Result<CvOutcome> {
    plan.validate()?;
    if regions.len() < 2 {
        return Err(Error::Config("cross-validation needs at least two regions".into()));
    }
    let holdouts: Vec<&RegionDataset> = match &plan.holdout {
        Some(h) => vec![regions
            .iter()
            .find(|r| r.region() == h)
            .ok_or_else(|| Error::Config(format!("holdout region {h} not found")))?],
        None => regions.iter().collect(),
    };
    let mut runs = Vec::new();
    let mut summaries = Vec::new();
    for test in holdouts {
        let h = test.region().to_string();
        let others: Vec<&RegionDataset> = regions.iter().filter(|r| r.region() != h).collect();
        let annotate = |run: usize| {
            let h = h.clone();
            move |e: Error| Error::Fold {
                holdout: h,
                run,
                source: Box::new(e),
            }
        };
        let (train, val) = pooled_split(&others, plan).map_err(annotate(0))?;
        let test_samples: Vec<&Sample> = test.samples().iter().collect();
        let mut rmses = Vec::with_capacity(plan.runs);
        for run in 0..plan.runs {
            let seed = plan.run_seed(run);
            let outcome =
                train_model(&train, &val, plan, kind, norm, seed, observer).map_err(annotate(run))?;
            let model: CnnModel<f32> = outcome.checkpoint.to_model()?;
            let rmse_db = evaluate_rmse_db(&model, norm, &test_samples, observer).map_err(annotate(run))?;
            log::info!("{kind} holdout {h} run {run}: test RMSE {rmse_db:.3} dB");
            rmses.push(rmse_db);
            runs.push(CvRun {
                holdout: h.clone(),
                run,
                rmse_db,
                outcome,
            });
        }
        summaries.push(HoldoutSummary::new(h, rmses)?);
    }
    Ok(CvOutcome {
        report: CvReport::from_holdouts(kind, summaries)?,
        runs,
    })
}

/// Train `plan.runs` models on the pooled splits of every region.
pub fn train_no_holdout(
    regions: &[RegionDataset],
    plan: &TrainPlan,
    kind: ConfigKind,
    norm: &NormalizationSpec,
    observer: &mut dyn BatchObserver,
) -> Result<Vec<TrainOutcome>> {
    plan.validate()?;
    let all: Vec<&RegionDataset> = regions.iter().collect();
    let (train, val) = pooled_split(&all, plan)?;
    (0..plan.runs)
        .map(|run| train_model(&train, &val, plan, kind, norm, plan.run_seed(run), observer))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(kind: ConfigKind, means: [f64; 6], sds: [f64; 6]) -> CvReport {
        let hs = means
            .iter()
            .zip(&sds)
            .enumerate()
            .map(|(i, (&m, &s))| HoldoutSummary {
                holdout: format!("h{i}"),
                run_rmse_db: vec![m],
                mean_db: m,
                sd_db: Some(s),
            })
            .collect();
        CvReport::from_holdouts(kind, hs).unwrap()
    }

    #[test]
    fn grand_row_matches_known_means() {
        let round2 = |v: f64| (v * 100.0).round() / 100.0;
        let original = table(
            ConfigKind::Original,
            [7.18, 7.75, 8.07, 6.99, 6.35, 7.73],
            [0.27, 0.47, 0.39, 0.23, 0.42, 0.21],
        );
        assert_eq!(round2(original.grand_mean_db), 7.35);
        assert_eq!(round2(original.grand_sd_db.unwrap()), 0.33);
        let fine = table(
            ConfigKind::Fine,
            [7.76, 8.22, 7.75, 7.10, 6.31, 7.62],
            [0.79, 0.60, 0.28, 0.20, 0.36, 0.26],
        );
        assert_eq!(round2(fine.grand_mean_db), 7.46);
        assert!((fine.grand_sd_db.unwrap() - 0.415).abs() < 1e-9);
        let flip = table(
            ConfigKind::Flip,
            [22.34, 12.56, 12.67, 12.09, 10.28, 12.52],
            [1.46, 0.90, 0.56, 0.32, 0.56, 0.57],
        );
        assert_eq!(round2(flip.grand_mean_db), 13.74);
        assert_eq!(round2(flip.grand_sd_db.unwrap()), 0.73);
    }

    #[test]
    fn sd_recomputed_from_runs() {
        let runs = vec![7.0, 7.5, 6.8, 8.1];
        let h = HoldoutSummary::new("a", runs.clone()).unwrap();
        let m = runs.iter().sum::<f64>() / 4.0;
        let var = runs.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / 3.0;
        assert!((h.sd_db.unwrap() - var.sqrt()).abs() < 1e-12);
        assert_eq!(HoldoutSummary::new("b", vec![5.0]).unwrap().sd_db, None);
    }

    #[test]
    fn csv_round_trip() {
        let hs = vec![
            HoldoutSummary::new("a", vec![7.0, 7.5]).unwrap(),
            HoldoutSummary::new("b", vec![6.0, 6.25]).unwrap(),
        ];
        let r = CvReport::from_holdouts(ConfigKind::Fine, hs).unwrap();
        let mut runs = Vec::new();
        r.write_runs_csv(&mut runs).unwrap();
        assert_eq!(CvReport::read_runs_csv(ConfigKind::Fine, &runs[..]).unwrap(), r);
        let mut summary = Vec::new();
        r.write_summary_csv(&mut summary).unwrap();
        let text = String::from_utf8(summary.clone()).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().last().unwrap().starts_with("mean,fine,2,"));
        assert_eq!(
            read_summary_csv(&summary[..]).unwrap(),
            vec![("a".to_string(), 7.25), ("b".to_string(), 6.125)]
        );
    }

    #[test]
    fn single_run_sd_is_na() {
        let r = CvReport::from_holdouts(
            ConfigKind::Flip,
            vec![HoldoutSummary::new("a", vec![7.0]).unwrap()],
        )
        .unwrap();
        let mut out = Vec::new();
        r.write_summary_csv(&mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().contains(",NA"));
    }
}
