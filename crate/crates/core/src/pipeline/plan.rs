use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::nn::ArchSpec;

/// Training and cross-validation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    /// Restrict cross-validation to this holdout region.
    pub holdout: Option<String>,
    pub runs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Share of each region's links used for training.
    pub split_ratio: f64,
    /// Side of the square cells used by the geographic split, metres.
    pub cell_size_m: f64,
    pub seed: u64,
    pub arch: ArchSpec,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            holdout: None,
            runs: 10,
            epochs: 200,
            batch_size: 256,
            lr: 1e-4,
            split_ratio: 0.8,
            cell_size_m: 200.0,
            seed: 0,
            arch: ArchSpec::default(),
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad("split_ratio must lie strictly between 0 and 1");
        }
        if self.runs == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("runs, epochs and batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.cell_size_m > 0.0 && self.cell_size_m.is_finite()) {
            return bad("cell_size_m must be positive");
        }
        Ok(())
    }

    /// Seed of run `run` (0-based).
    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }

    /// Read the plan keys from `kv`, starting from `self`.
    pub fn apply(mut self, kv: &mut KeyValues) -> Result<Self> {
        if let Some(h) = kv.raw("holdout") {
            self.holdout = (!h.is_empty()).then_some(h);
        }
        kv.update("runs", &mut self.runs)?;
        kv.update("epochs", &mut self.epochs)?;
        kv.update("batch_size", &mut self.batch_size)?;
        kv.update("lr", &mut self.lr)?;
        kv.update("split_ratio", &mut self.split_ratio)?;
        kv.update("cell_size_m", &mut self.cell_size_m)?;
        kv.update("seed", &mut self.seed)?;
        kv.update("arch", &mut self.arch)?;
        self.validate()?;
        Ok(self)
    }

    /// Write the plan keys into `kv`.
    pub fn store(&self, kv: &mut KeyValues) {
        kv.set("holdout", self.holdout.as_deref().unwrap_or(""));
        kv.set("runs", self.runs);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("split_ratio", self.split_ratio);
        kv.set("cell_size_m", self.cell_size_m);
        kv.set("seed", self.seed);
        kv.set("arch", &self.arch);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let p = TrainPlan::default();
        assert_eq!((p.runs, p.epochs, p.batch_size), (10, 200, 256));
        assert_eq!(p.lr, 1e-4);
        p.validate().unwrap();
        for bad in [
            TrainPlan { split_ratio: 1.0, ..p.clone() },
            TrainPlan { split_ratio: 0.0, ..p.clone() },
            TrainPlan { runs: 0, ..p.clone() },
            TrainPlan { lr: -1.0, ..p.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn key_values_round_trip() {
        let mut kv = KeyValues::parse("runs = 2\nepochs = 5\nlr = 0.001\narch = desk\nholdout = region02").unwrap();
        let plan = TrainPlan::default().apply(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(plan.runs, 2);
        assert_eq!(plan.arch, ArchSpec::desk());
        assert_eq!(plan.holdout.as_deref(), Some("region02"));
        let mut out = KeyValues::default();
        plan.store(&mut out);
        let back = TrainPlan::default()
            .apply(&mut KeyValues::parse(&out.to_text()).unwrap())
            .unwrap();
        assert_eq!(back, plan);
        assert!(TrainPlan::default()
            .apply(&mut KeyValues::parse("split_ratio = 1.5").unwrap())
            .is_err());
    }
}
