use std::io::{Read, Write};

use super::dataset::{RegionDataset, Sample};
use super::train::{predict_db, BatchObserver, Phase};
use crate::diagnostics::rmse;
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, CnnModel};
use crate::profile::{ConfigKind, ModelInput, NormalizationSpec};

/// Equal-weight average of several trained models.
#[derive(Debug, Clone)]
pub struct Ensemble {
    kind: ConfigKind,
    norm: NormalizationSpec,
    members: Vec<CnnModel<f32>>,
}

impl Ensemble {
    pub fn from_checkpoints(checkpoints: &[Checkpoint]) -> Result<Self> {
        let first = checkpoints.first().ok_or(Error::Empty("ensemble members"))?;
        for c in checkpoints {
            if c.kind != first.kind {
                return Err(Error::Config(format!(
                    "ensemble mixes {} and {} models",
                    first.kind, c.kind
                )));
            }
            if c.norm != first.norm {
                return Err(Error::Config("ensemble members use different normalizations".into()));
            }
        }
        Ok(Self {
            kind: first.kind,
            norm: first.norm,
            members: checkpoints
                .iter()
                .map(|c| c.to_model())
                .collect::<Result<_>>()?,
        })
    }

    pub fn kind(&self) -> ConfigKind {
        self.kind
    }

    pub fn norm(&self) -> &NormalizationSpec {
        &self.norm
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Per-member predictions in dB, `[member][sample]`.
    pub fn member_predictions_db(
        &self,
        samples: &[&Sample],
        observer: &mut dyn BatchObserver,
    ) -> Result<Vec<Vec<f64>>> {
        self.members
            .iter()
            .map(|m| predict_db(m, &self.norm, samples, Phase::Test, 256, observer))
            .collect()
    }

    /// Ensemble predictions in dB.
    pub fn predict_db(&self, samples: &[&Sample], observer: &mut dyn BatchObserver) -> Result<Vec<f64>> {
        let members = self.member_predictions_db(samples, observer)?;
        Ok(mean_over_members(&members))
    }

    pub fn predict_one_db(&self, input: &ModelInput) -> Result<f64> {
        let values: Vec<f64> = self
            .members
            .iter()
            .map(|m| m.predict_one(input).map(|p| self.norm.denormalize_target(p as f64)))
            .collect::<Result<_>>()?;
        Ok(order_free_mean(values))
    }
}

/// Mean of values summed in sorted order so member order cannot change
/// the rounding.
fn order_free_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Column-wise mean of `[member][sample]` predictions.
pub fn mean_over_members(members: &[Vec<f64>]) -> Vec<f64> {
    let n = members.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| order_free_mean(members.iter().map(|m| m[i]).collect()))
        .collect()
}

/// Ensemble path loss in dB for one input.
pub fn ensemble_predict(checkpoints: &[Checkpoint], input: &ModelInput) -> Result<f64> {
    Ensemble::from_checkpoints(checkpoints)?.predict_one_db(input)
}

/// Test errors of an ensemble and its members on one region.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRegionRow {
    pub region: String,
    pub n_links: usize,
    pub members: usize,
    pub ensemble_rmse_db: f64,
    pub mean_member_rmse_db: f64,
    pub max_member_rmse_db: f64,
}

/// Evaluate `ensemble` on every link of `region`. Also returns the
/// ensemble predictions in sample order.
pub fn evaluate_region(
    ensemble: &Ensemble,
    region: &RegionDataset,
    observer: &mut dyn BatchObserver,
) -> Result<(EnsembleRegionRow, Vec<f64>)> {
    let samples: Vec<&Sample> = region.samples().iter().collect();
    let targets: Vec<f64> = samples
        .iter()
        .map(|s| {
            s.target_db
                .ok_or_else(|| Error::Config(format!("sample {} has no path loss", s.id)))
        })
        .collect::<Result<_>>()?;
    let members = ensemble.member_predictions_db(&samples, observer)?;
    let member_rmse: Vec<f64> = members.iter().map(|p| rmse(p, &targets)).collect::<Result<_>>()?;
    let preds = mean_over_members(&members);
    let row = EnsembleRegionRow {
        region: region.region().to_string(),
        n_links: samples.len(),
        members: members.len(),
        ensemble_rmse_db: rmse(&preds, &targets)?,
        mean_member_rmse_db: member_rmse.iter().sum::<f64>() / member_rmse.len() as f64,
        max_member_rmse_db: member_rmse.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    Ok((row, preds))
}

const ENSEMBLE_HEADER: [&str; 6] = [
    "region",
    "n_links",
    "members",
    "ensemble_rmse_db",
    "mean_member_rmse_db",
    "max_member_rmse_db",
];

pub fn write_ensemble_csv<W: Write>(writer: W, rows: &[EnsembleRegionRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(ENSEMBLE_HEADER)?;
    for r in rows {
        wtr.write_record([
            r.region.clone(),
            r.n_links.to_string(),
            r.members.to_string(),
            r.ensemble_rmse_db.to_string(),
            r.mean_member_rmse_db.to_string(),
            r.max_member_rmse_db.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn read_ensemble_csv<R: Read>(reader: R) -> Result<Vec<EnsembleRegionRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let bad = |what: &str| Error::format("ensemble CSV", format!("bad {what}"));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != ENSEMBLE_HEADER.len() {
            return Err(Error::format("ensemble CSV", "expected 6 columns"));
        }
        out.push(EnsembleRegionRow {
            region: rec[0].to_string(),
            n_links: rec[1].parse().map_err(|_| bad("n_links"))?,
            members: rec[2].parse().map_err(|_| bad("members"))?,
            ensemble_rmse_db: rec[3].parse().map_err(|_| bad("ensemble_rmse_db"))?,
            mean_member_rmse_db: rec[4].parse().map_err(|_| bad("mean_member_rmse_db"))?,
            max_member_rmse_db: rec[5].parse().map_err(|_| bad("max_member_rmse_db"))?,
        });
    }
    Ok(out)
}
