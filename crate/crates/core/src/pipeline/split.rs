use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::RegionDataset;
use crate::error::{Error, Result};

/// Allowed deviation of the achieved train share from the requested ratio.
pub const SPLIT_TOLERANCE: f64 = 0.05;
const SPLIT_ATTEMPTS: usize = 64;

/// Indices of the training and validation samples of one region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Spatial train/validation split. Receivers are binned into square cells
/// on a randomly offset grid and whole cells go to validation until its
/// share reaches `1 - ratio`.
pub fn geographic_split(region: &RegionDataset, ratio: f64, cell_size: f64, seed: u64) -> Result<Split> {
    let n = region.len();
    let fail = |reason: String| Error::Split {
        region: region.region().to_string(),
        reason,
    };
    if n < 5 {
        return Err(fail(format!("needs at least 5 links, has {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) || !(cell_size > 0.0) {
        return Err(fail("ratio must be in (0, 1) and cell size positive".into()));
    }
    let want = (1.0 - ratio) * n as f64;
    let lo = (1.0 - ratio - SPLIT_TOLERANCE) * n as f64;
    let hi = (1.0 - ratio + SPLIT_TOLERANCE) * n as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..SPLIT_ATTEMPTS {
        let ox = rng.random_range(0.0..cell_size);
        let oy = rng.random_range(0.0..cell_size);
        let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
        for (i, s) in region.samples().iter().enumerate() {
            let key = (
                ((s.rx_x - ox) / cell_size).floor() as i64,
                ((s.rx_y - oy) / cell_size).floor() as i64,
            );
            cells.entry(key).or_default().push(i);
        }
        let mut order: Vec<Vec<usize>> = cells.into_values().collect();
        order.shuffle(&mut rng);

        let mut in_val = vec![false; n];
        let mut count = 0usize;
        for cell in &order {
            if count as f64 >= want {
                break;
            }
            if (count + cell.len()) as f64 > hi {
                continue;
            }
            for &i in cell {
                in_val[i] = true;
            }
            count += cell.len();
        }
        if (count as f64) >= lo && count > 0 && count < n {
            let (validation, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| in_val[i]);
            return Ok(Split { train, validation });
        }
    }
    Err(fail(format!(
        "no cell assignment within {SPLIT_TOLERANCE} of ratio {ratio} after {SPLIT_ATTEMPTS} attempts"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::dataset::tests::fake_sample;
    use crate::profile::ConfigKind;

    fn region(points: &[(f64, f64)]) -> RegionDataset {
        let samples = points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| fake_sample(i as u64, "r", x, y, ConfigKind::Flip))
            .collect();
        RegionDataset::new("r", samples).unwrap()
    }

    #[test]
    fn separated_clusters_map_whole() {
        let mut pts = Vec::new();
        for i in 0..80 {
            pts.push((1000.0 + (i % 9) as f64, 1000.0 + (i / 9) as f64));
        }
        for i in 0..20 {
            pts.push((5000.0 + (i % 5) as f64, 5000.0 + (i / 5) as f64));
        }
        let r = region(&pts);
        for seed in 0..10 {
            let s = geographic_split(&r, 0.8, 200.0, seed).unwrap();
            assert_eq!(s.validation, (80..100).collect::<Vec<_>>(), "seed {seed}");
        }
    }

    #[test]
    fn partition_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<(f64, f64)> = (0..300)
            .map(|_| (rng.random_range(0.0..2000.0), rng.random_range(0.0..2000.0)))
            .collect();
        let r = region(&pts);
        let s = geographic_split(&r, 0.8, 200.0, 11).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).copied().collect();
        all.sort();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
        assert!(s.train.iter().all(|i| !s.validation.contains(i)));
    }

    #[test]
    fn uniform_region_hits_ratio() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let pts: Vec<(f64, f64)> = (0..1000)
                .map(|_| (rng.random_range(0.0..3000.0), rng.random_range(0.0..3000.0)))
                .collect();
            let s = geographic_split(&region(&pts), 0.8, 200.0, seed).unwrap();
            let frac = s.train.len() as f64 / 1000.0;
            assert!((0.75..=0.85).contains(&frac), "seed {seed}: {frac}");
        }
    }

    #[test]
    fn coincident_receivers_stay_together() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts: Vec<(f64, f64)> = (0..400)
            .map(|_| (rng.random_range(0.0..2000.0), rng.random_range(0.0..2000.0)))
            .collect();
        pts.extend_from_within(..50);
        let r = region(&pts);
        for seed in 0..5 {
            let s = geographic_split(&r, 0.8, 200.0, seed).unwrap();
            for i in 0..50 {
                assert_eq!(s.validation.contains(&i), s.validation.contains(&(400 + i)));
            }
        }
    }

    #[test]
    fn too_small_or_indivisible() {
        let r = region(&[(0.0, 0.0); 4]);
        assert!(geographic_split(&r, 0.8, 200.0, 0).is_err());
        // Everything in one cell cannot be split.
        let r = region(&[(10.0, 10.0); 50]);
        assert!(matches!(geographic_split(&r, 0.8, 200.0, 0), Err(Error::Split { .. })));
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<(f64, f64)> = (0..200)
            .map(|_| (rng.random_range(0.0..1500.0), rng.random_range(0.0..1500.0)))
            .collect();
        let r = region(&pts);
        assert_eq!(
            geographic_split(&r, 0.8, 200.0, 4).unwrap(),
            geographic_split(&r, 0.8, 200.0, 4).unwrap()
        );
    }
}
