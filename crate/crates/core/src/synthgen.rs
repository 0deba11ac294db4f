//! Seeded synthetic terrain and measurements with a known propagation law.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diagnostics::{obstruction_depth, DepthMode};
use crate::error::{Error, Result};
use crate::geodata::{DsmRaster, GridPoint};
use crate::profile::{build_profile, ExtractionParams, LinkMeasurement, PathProfile};

#[derive(Debug, Clone, PartialEq)]
pub struct TerrainParams {
    pub seed: u64,
    /// Cells per side; the raster is square.
    pub size: usize,
    pub cell_size: f64,
    /// Peak amplitude of the smooth ground, metres.
    pub roughness: f64,
    /// Lattice spacing of the ground noise, cells.
    pub noise_scale: usize,
    /// Target fraction of cells covered by buildings.
    pub building_density: f64,
    pub building_height: (f64, f64),
    /// Footprint side length range, cells.
    pub building_size: (usize, usize),
}

impl Default for TerrainParams {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 1024,
            cell_size: 1.0,
            roughness: 5.0,
            noise_scale: 64,
            building_density: 0.25,
            building_height: (6.0, 30.0),
            building_size: (8, 24),
        }
    }
}

impl TerrainParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size < 64 {
            return bad(format!("terrain size must be at least 64, got {}", self.size));
        }
        if !(self.cell_size > 0.0) {
            return bad("cell size must be positive".into());
        }
        if !(self.roughness >= 0.0) || self.noise_scale == 0 {
            return bad("roughness must be non-negative and noise scale positive".into());
        }
        if !(0.0..=1.0).contains(&self.building_density) {
            return bad(format!("building density {} not in [0, 1]", self.building_density));
        }
        let (lo, hi) = self.building_height;
        if !(lo >= 0.0 && hi >= lo) {
            return bad("building height range must be non-negative and ordered".into());
        }
        let (a, b) = self.building_size;
        if a == 0 || b < a {
            return bad("building footprint range must be positive and ordered".into());
        }
        Ok(())
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smooth ground from value noise plus flat-roofed rectangular buildings.
/// Also returns the per-cell building mask.
pub fn generate_terrain_with_mask(params: &TerrainParams) -> Result<(DsmRaster, Vec<bool>)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = params.size;
    let s = params.noise_scale;
    let lat_n = n / s + 2;
    let lattice: Vec<f64> = (0..lat_n * lat_n)
        .map(|_| rng.random::<f64>() * params.roughness)
        .collect();
    let mut heights = vec![0.0f32; n * n];
    for r in 0..n {
        let (gy, ty) = (r / s, smoothstep((r % s) as f64 / s as f64));
        for c in 0..n {
            let (gx, tx) = (c / s, smoothstep((c % s) as f64 / s as f64));
            let v = |y: usize, x: usize| lattice[y * lat_n + x];
            let top = v(gy, gx) * (1.0 - tx) + v(gy, gx + 1) * tx;
            let bot = v(gy + 1, gx) * (1.0 - tx) + v(gy + 1, gx + 1) * tx;
            heights[r * n + c] = (top * (1.0 - ty) + bot * ty) as f32;
        }
    }

    let mut mask = vec![false; n * n];
    let target = (params.building_density * (n * n) as f64).ceil() as usize;
    let mut covered = 0;
    let mut roofs = vec![0.0f32; n * n];
    let (smin, smax) = params.building_size;
    let (hmin, hmax) = params.building_height;
    let mut attempts = 0usize;
    while covered < target && attempts < 1_000_000 {
        attempts += 1;
        let w = rng.random_range(smin..=smax).min(n);
        let h = rng.random_range(smin..=smax).min(n);
        let r0 = rng.random_range(0..=n - h);
        let c0 = rng.random_range(0..=n - w);
        let height = if hmax > hmin {
            rng.random_range(hmin..hmax)
        } else {
            hmin
        } as f32;
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                let i = r * n + c;
                if !mask[i] {
                    mask[i] = true;
                    covered += 1;
                }
                roofs[i] = roofs[i].max(height);
            }
        }
    }
    for (h, roof) in heights.iter_mut().zip(&roofs) {
        *h += roof;
    }
    let raster = DsmRaster::new(0.0, 0.0, params.cell_size, n, n, heights)?;
    Ok((raster, mask))
}

pub fn generate_terrain(params: &TerrainParams) -> Result<DsmRaster> {
    generate_terrain_with_mask(params).map(|(r, _)| r)
}

/// Path loss law used to label synthetic links:
///
/// `L = l0 + 10 n log10(d) + fc log10(f / f0) + oc depth + ic log10(f / f0) depth + noise`
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthModel {
    /// Loss at 1 m and `f0`, dB.
    pub l0: f64,
    pub exponent: f64,
    /// dB per decade of frequency.
    pub freq_coeff: f64,
    /// dB per metre of obstruction depth.
    pub obstruction_coeff: f64,
    /// dB per metre of depth per decade of frequency.
    pub interaction_coeff: f64,
    pub noise_sd: f64,
    /// Reference frequency, MHz.
    pub f0: f64,
    pub depth_mode: DepthMode,
}

impl Default for GroundTruthModel {
    fn default() -> Self {
        Self {
            l0: 40.0,
            exponent: 2.5,
            freq_coeff: 20.0,
            obstruction_coeff: 0.02,
            interaction_coeff: 0.0,
            noise_sd: 0.0,
            f0: 1000.0,
            depth_mode: DepthMode::Integrated,
        }
    }
}

impl GroundTruthModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.exponent >= 1.0) {
            return Err(Error::Config(format!("exponent must be >= 1, got {}", self.exponent)));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Config("noise SD must be non-negative".into()));
        }
        if !(self.f0 > 0.0) {
            return Err(Error::Config("reference frequency must be positive".into()));
        }
        Ok(())
    }

    /// Noise-free loss for a link of ground distance `d` metres.
    pub fn mean_loss(&self, d: f64, mhz: f64, depth: f64) -> f64 {
        let fd = (mhz / self.f0).log10();
        self.l0
            + 10.0 * self.exponent * d.log10()
            + self.freq_coeff * fd
            + self.obstruction_coeff * depth
            + self.interaction_coeff * fd * depth
    }

    pub fn loss_for(&self, link: &LinkMeasurement, profile: &PathProfile) -> f64 {
        let depth = obstruction_depth(profile, self.depth_mode);
        self.mean_loss(link.ground_distance(), link.frequency, depth)
    }
}

/// Layout of a synthetic measurement campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct CampaignParams {
    pub n_links: usize,
    /// Regions are equal-width vertical strips of the raster.
    pub n_regions: usize,
    /// MHz.
    pub bands: Vec<f64>,
    pub distance: (f64, f64),
    pub sites_per_region: usize,
    pub tx_agl: (f64, f64),
    pub rx_agl: f64,
    pub extraction: ExtractionParams,
    pub max_retries: usize,
}

impl Default for CampaignParams {
    fn default() -> Self {
        Self {
            n_links: 500,
            n_regions: 4,
            bands: vec![900.0, 1800.0, 3500.0],
            distance: (70.0, 400.0),
            sites_per_region: 3,
            tx_agl: (15.0, 35.0),
            rx_agl: 1.5,
            extraction: ExtractionParams::default(),
            max_retries: 10_000,
        }
    }
}

pub fn region_name(i: usize) -> String {
    format!("region{:02}", i + 1)
}

/// Morphology label from the share of obstructed center-column samples.
fn classify(profile: &PathProfile) -> &'static str {
    let n = profile.corridor.rows();
    let blocked = profile
        .center_column()
        .enumerate()
        .filter(|&(i, h)| h > profile.direct_path_height(i as f64))
        .count();
    let share = blocked as f64 / n as f64;
    if share > 0.2 {
        "dense_urban"
    } else if share > 0.0 {
        "suburban"
    } else {
        "rural"
    }
}

/// Place `n_links` links over the raster and label each with the truth law.
/// Links are assigned to regions round-robin; each link's Rx lies in its
/// region's strip and every corridor fits inside the raster.
pub fn generate_measurements(
    raster: &DsmRaster,
    campaign: &CampaignParams,
    truth: &GroundTruthModel,
    seed: u64,
) -> Result<Vec<LinkMeasurement>> {
    truth.validate()?;
    let c = campaign;
    if c.n_links == 0 || c.n_regions == 0 || c.sites_per_region == 0 {
        return Err(Error::Config("links, regions and sites must be positive".into()));
    }
    if c.bands.is_empty() || c.bands.iter().any(|b| !(*b > 0.0)) {
        return Err(Error::Config("bands must be a non-empty list of positive MHz".into()));
    }
    let (dlo, dhi) = c.distance;
    if !(dlo >= c.extraction.d_min && dhi >= dlo) {
        return Err(Error::Config(format!(
            "distance range must start at or above {} m",
            c.extraction.d_min
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, truth.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let x0 = raster.origin_x();
    let strip = raster.width_m() / c.n_regions as f64;
    let margin = (c.extraction.width / 2) as f64 + raster.cell_size();
    let y_lo = raster.origin_y() + margin;
    let y_hi = raster.origin_y() + raster.height_m() - margin;
    if strip <= 2.0 * margin || y_hi <= y_lo {
        return Err(Error::Generation("raster too small for the requested regions".into()));
    }

    let sites: Vec<Vec<(GridPoint, f64)>> = (0..c.n_regions)
        .map(|r| {
            let lo = x0 + r as f64 * strip + margin;
            let hi = x0 + (r + 1) as f64 * strip - margin;
            (0..c.sites_per_region)
                .map(|_| {
                    let p = GridPoint::new(rng.random_range(lo..hi), rng.random_range(y_lo..y_hi));
                    let agl = if c.tx_agl.1 > c.tx_agl.0 {
                        rng.random_range(c.tx_agl.0..c.tx_agl.1)
                    } else {
                        c.tx_agl.0
                    };
                    (p, agl)
                })
                .collect()
        })
        .collect();

    let mut links = Vec::with_capacity(c.n_links);
    for k in 0..c.n_links {
        let region = k % c.n_regions;
        let (lo, hi) = (x0 + region as f64 * strip, x0 + (region + 1) as f64 * strip);
        let mut placed = None;
        for _ in 0..c.max_retries {
            let (tx, tx_agl) = sites[region][rng.random_range(0..c.sites_per_region)];
            let d = if dhi > dlo { rng.random_range(dlo..dhi) } else { dlo };
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let rx = GridPoint::new(tx.x + d * theta.cos(), tx.y + d * theta.sin());
            if !(lo..hi).contains(&rx.x) {
                continue;
            }
            let mut link = LinkMeasurement {
                tx_x: tx.x,
                tx_y: tx.y,
                rx_x: rx.x,
                rx_y: rx.y,
                tx_height_agl: tx_agl,
                rx_height_agl: c.rx_agl,
                frequency: c.bands[rng.random_range(0..c.bands.len())],
                path_loss: None,
                region: region_name(region),
                category: None,
            };
            if !raster.contains(rx) {
                continue;
            }
            match build_profile(raster, &link, &c.extraction) {
                Ok(profile) => {
                    let loss = truth.loss_for(&link, &profile) + noise.sample(&mut rng);
                    link.path_loss = Some(loss);
                    link.category = Some(classify(&profile).to_string());
                    placed = Some(link);
                    break;
                }
                Err(Error::OutOfBounds { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        links.push(placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place link {k} in {} after {} attempts",
                region_name(region),
                c.max_retries
            ))
        })?);
    }
    Ok(links)
}
