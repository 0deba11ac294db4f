//! Path profiles: corridor extraction around the Tx-Rx segment, earth
//! curvature correction, and assembly of the network input for each
//! channel configuration.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{bilinear_resample, DsmRaster, Grid2, GridPoint};
use crate::tensor::Tensor;

/// Rows of the resampled profile image.
pub const PROFILE_ROWS: usize = 256;
/// Default corridor width in metres (and columns).
pub const DEFAULT_WIDTH: usize = 61;
/// Default minimum ground distance; keeps `floor(d) > W`.
pub const DEFAULT_D_MIN: f64 = 62.0;
/// Earth radius used for the curvature correction, metres.
pub const EARTH_RADIUS_M: f64 = 6_365_000.0;
/// Spacing between corridor rows along the path, metres.
pub const ROW_SPACING_M: f64 = 1.0;

/// One Tx -> Rx measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkMeasurement {
    pub tx_x: f64,
    pub tx_y: f64,
    pub rx_x: f64,
    pub rx_y: f64,
    pub tx_height_agl: f64,
    pub rx_height_agl: f64,
    /// MHz.
    pub frequency: f64,
    /// dB; absent for inference-only sets.
    pub path_loss: Option<f64>,
    pub region: String,
    /// Morphology label such as `dense_urban`, `suburban` or `rural`.
    pub category: Option<String>,
}

impl LinkMeasurement {
    /// Ground distance between the endpoints.
    pub fn ground_distance(&self) -> f64 {
        (self.rx_x - self.tx_x).hypot(self.rx_y - self.tx_y)
    }

    pub fn validate(&self, d_min: f64) -> Result<()> {
        let coords = [
            self.tx_x,
            self.tx_y,
            self.rx_x,
            self.rx_y,
            self.tx_height_agl,
            self.rx_height_agl,
        ];
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidLink("non-finite coordinate or height".into()));
        }
        let d = self.ground_distance();
        if d < d_min {
            return Err(Error::InvalidLink(format!(
                "ground distance {d:.3} m is below the minimum {d_min} m"
            )));
        }
        if !(self.frequency > 0.0 && self.frequency.is_finite()) {
            return Err(Error::InvalidLink(format!(
                "frequency must be positive, got {}",
                self.frequency
            )));
        }
        if self.path_loss.is_some_and(|pl| !pl.is_finite()) {
            return Err(Error::InvalidLink("path loss is not finite".into()));
        }
        Ok(())
    }
}

/// Keep the links accepted by `keep`. Stands in for noise-floor and
/// reliability screening of raw drive-test data.
pub fn filter_links<F>(links: Vec<LinkMeasurement>, keep: F) -> Vec<LinkMeasurement>
where
    F: Fn(&LinkMeasurement) -> bool,
{
    links.into_iter().filter(|l| keep(l)).collect()
}

/// Corridor geometry knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractionParams {
    /// Corridor width in metres; odd.
    pub width: usize,
    pub d_min: f64,
    pub earth_radius: f64,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            d_min: DEFAULT_D_MIN,
            earth_radius: EARTH_RADIUS_M,
        }
    }
}

/// Surface heights sampled along and around the direct path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathProfile {
    /// `floor(d) x W`, row 0 at the Tx, one row per metre.
    pub corridor: Grid2,
    /// Un-rounded ground distance, metres.
    pub distance: f64,
    /// Ground (DSM) plus antenna height at the Tx, metres above sea level.
    pub tx_abs_height: f64,
    pub rx_abs_height: f64,
}

impl PathProfile {
    pub fn width(&self) -> usize {
        self.corridor.cols()
    }

    pub fn center_col(&self) -> usize {
        (self.width() - 1) / 2
    }

    /// Height of the straight Tx-Rx line at `x` metres from the Tx.
    pub fn direct_path_height(&self, x: f64) -> f64 {
        self.tx_abs_height + (self.rx_abs_height - self.tx_abs_height) * x / self.distance
    }

    /// Surface heights under the direct path, Tx first.
    pub fn center_column(&self) -> impl Iterator<Item = f64> + '_ {
        self.corridor.column(self.center_col())
    }
}

/// Unit vectors along the link and to its left.
fn link_frame(link: &LinkMeasurement) -> ((f64, f64), (f64, f64)) {
    let d = link.ground_distance();
    let along = ((link.rx_x - link.tx_x) / d, (link.rx_y - link.tx_y) / d);
    let left = (-along.1, along.0);
    (along, left)
}

/// Sample the `floor(d) x W` corridor centred on the Tx-Rx segment.
///
/// Entry `(i, j)` is the nearest-cell height `i` metres from the Tx along the
/// link and `j - (W-1)/2` metres to its left.
pub fn extract_corridor(
    raster: &DsmRaster,
    link: &LinkMeasurement,
    params: &ExtractionParams,
) -> Result<PathProfile> {
    let width = params.width;
    if width % 2 == 0 {
        return Err(Error::Config(format!("corridor width must be odd, got {width}")));
    }
    link.validate(params.d_min)?;
    let d = link.ground_distance();
    let rows = d.floor() as usize;
    let half = ((width - 1) / 2) as f64;
    let ((ax, ay), (nx, ny)) = link_frame(link);
    let at = |i: f64, off: f64| {
        GridPoint::new(
            link.tx_x + i * ax + off * nx,
            link.tx_y + i * ay + off * ny,
        )
    };
    let last = (rows - 1) as f64 * ROW_SPACING_M;
    for p in [at(0.0, -half), at(0.0, half), at(last, -half), at(last, half)] {
        if !raster.contains(p) {
            return Err(Error::OutOfBounds { x: p.x, y: p.y });
        }
    }
    let mut data = Vec::with_capacity(rows * width);
    for i in 0..rows {
        let along = i as f64 * ROW_SPACING_M;
        for j in 0..width {
            let h = raster.nearest_neighbor_sample(at(along, j as f64 - half))?;
            data.push(h as f64);
        }
    }
    let corridor = Grid2::new(rows, width, data)?;
    let tx_ground = raster.nearest_neighbor_sample(GridPoint::new(link.tx_x, link.tx_y))?;
    let rx_ground = raster.nearest_neighbor_sample(GridPoint::new(link.rx_x, link.rx_y))?;
    Ok(PathProfile {
        corridor,
        distance: d,
        tx_abs_height: tx_ground as f64 + link.tx_height_agl,
        rx_abs_height: rx_ground as f64 + link.rx_height_agl,
    })
}

/// Earth bulge `x (d - x) / (2 R)` at `x` metres along a link of length `d`.
pub fn earth_bulge(x: f64, d: f64, radius: f64) -> f64 {
    x * (d - x) / (2.0 * radius)
}

/// Lower every corridor row by the earth bulge at its along-path position.
pub fn apply_earth_curvature(profile: &PathProfile, radius: f64) -> PathProfile {
    let mut out = profile.clone();
    let d = profile.distance;
    for i in 0..out.corridor.rows() {
        let b = earth_bulge(i as f64 * ROW_SPACING_M, d, radius);
        for v in out.corridor.row_mut(i) {
            *v -= b;
        }
    }
    out
}

/// `rows x W` grid that is zero except for the center column, which holds
/// the straight line from the Tx to the Rx antenna height.
pub fn direct_path_channel(profile: &PathProfile, rows: usize) -> Grid2 {
    let mut grid = Grid2::zeros(rows, profile.width());
    let c = profile.center_col();
    let (a, b) = (profile.tx_abs_height, profile.rx_abs_height);
    let denom = (rows - 1) as f64;
    for k in 0..rows {
        grid.set(k, c, a + (b - a) * k as f64 / denom);
    }
    grid
}

/// Planar distance from the Tx pixel at every pixel, using the original
/// along-path scale `d / (rows - 1)` per row and 1 m per column.
pub fn distance_grid_2d(d: f64, rows: usize, width: usize) -> Grid2 {
    let half = ((width - 1) / 2) as f64;
    let denom = (rows - 1) as f64;
    Grid2::from_fn(rows, width, |r, c| {
        (r as f64 * d / denom).hypot((c as f64 - half) * ROW_SPACING_M)
    })
}

/// Straight-line distance between the two antennas.
pub fn distance_3d(profile: &PathProfile) -> f64 {
    profile
        .distance
        .hypot(profile.rx_abs_height - profile.tx_abs_height)
}

/// The three input layouts compared in this toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfigKind {
    /// DSM, direct path, filled frequency, 2-D distance grid.
    Original,
    /// DSM, direct path, filled frequency, filled 3-D distance.
    Fine,
    /// DSM, direct path; frequency and 3-D distance go to the dense layers.
    Flip,
}

impl ConfigKind {
    pub const ALL: [ConfigKind; 3] = [ConfigKind::Original, ConfigKind::Fine, ConfigKind::Flip];

    pub fn code(self) -> u8 {
        match self {
            ConfigKind::Original => 0,
            ConfigKind::Fine => 1,
            ConfigKind::Flip => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ConfigKind::Original),
            1 => Ok(ConfigKind::Fine),
            2 => Ok(ConfigKind::Flip),
            other => Err(Error::Config(format!("unknown configuration code {other}"))),
        }
    }
}

impl fmt::Display for ConfigKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConfigKind::Original => "original",
            ConfigKind::Fine => "fine",
            ConfigKind::Flip => "flip",
        })
    }
}

impl FromStr for ConfigKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "original" => Ok(ConfigKind::Original),
            "fine" => Ok(ConfigKind::Fine),
            "flip" => Ok(ConfigKind::Flip),
            other => Err(Error::Config(format!("unknown model configuration {other:?}"))),
        }
    }
}

/// Channel and scalar counts of a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelConfig {
    pub kind: ConfigKind,
    pub n_channels: usize,
    pub n_scalars: usize,
}

impl ChannelConfig {
    pub fn of(kind: ConfigKind) -> Self {
        let (n_channels, n_scalars) = match kind {
            ConfigKind::Original | ConfigKind::Fine => (4, 0),
            ConfigKind::Flip => (2, 2),
        };
        Self {
            kind,
            n_channels,
            n_scalars,
        }
    }

    /// Checked constructor for user-supplied counts.
    pub fn new(kind: ConfigKind, n_channels: usize, n_scalars: usize) -> Result<Self> {
        let cfg = Self {
            kind,
            n_channels,
            n_scalars,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = Self::of(self.kind);
        if *self != expected {
            return Err(Error::Config(format!(
                "{} uses {} channels and {} scalars, got {} and {}",
                self.kind,
                expected.n_channels,
                expected.n_scalars,
                self.n_channels,
                self.n_scalars
            )));
        }
        Ok(())
    }
}

/// Input scaling constants; stored alongside every checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationSpec {
    /// Heights are shifted by the mean antenna height, then divided by this.
    pub height_scale_m: f64,
    /// Frequency becomes `log10(f_MHz) / freq_log_divisor`.
    pub freq_log_divisor: f64,
    pub distance_scale_m: f64,
    pub target_scale_db: f64,
    pub target_offset_db: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            height_scale_m: 200.0,
            freq_log_divisor: 4.0,
            distance_scale_m: 5000.0,
            target_scale_db: 200.0,
            target_offset_db: 0.0,
        }
    }
}

impl NormalizationSpec {
    pub fn to_array(&self) -> [f64; 5] {
        [
            self.height_scale_m,
            self.freq_log_divisor,
            self.distance_scale_m,
            self.target_scale_db,
            self.target_offset_db,
        ]
    }

    pub fn from_array(a: [f64; 5]) -> Result<Self> {
        let spec = Self {
            height_scale_m: a[0],
            freq_log_divisor: a[1],
            distance_scale_m: a[2],
            target_scale_db: a[3],
            target_offset_db: a[4],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let scales = [
            self.height_scale_m,
            self.freq_log_divisor,
            self.distance_scale_m,
            self.target_scale_db,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s != 0.0)) || !self.target_offset_db.is_finite()
        {
            return Err(Error::Config(format!("invalid normalization {self:?}")));
        }
        Ok(())
    }

    pub fn height(&self, h: f64, reference: f64) -> f64 {
        (h - reference) / self.height_scale_m
    }

    pub fn frequency(&self, mhz: f64) -> f64 {
        mhz.log10() / self.freq_log_divisor
    }

    pub fn distance(&self, metres: f64) -> f64 {
        metres / self.distance_scale_m
    }

    pub fn target(&self, db: f64) -> f64 {
        (db - self.target_offset_db) / self.target_scale_db
    }

    pub fn denormalize_target(&self, y: f64) -> f64 {
        y * self.target_scale_db + self.target_offset_db
    }
}

/// Assembled network input for one link.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// `C x rows x W`.
    pub channels: Tensor<f32>,
    pub scalars: Vec<f32>,
    /// Normalized path loss.
    pub target: Option<f32>,
}

impl ModelInput {
    pub fn n_channels(&self) -> usize {
        self.channels.shape()[0]
    }
}

fn push_grid(out: &mut Vec<f32>, grid: &Grid2, f: impl Fn(f64) -> f64) {
    out.extend(grid.data().iter().map(|&v| f(v) as f32));
}

/// Stack the channels and scalars of `config` for an already extracted and
/// curvature-corrected profile.
pub fn assemble_input(
    profile: &PathProfile,
    link: &LinkMeasurement,
    config: &ChannelConfig,
    norm: &NormalizationSpec,
) -> Result<ModelInput> {
    config.validate()?;
    norm.validate()?;
    let rows = PROFILE_ROWS;
    let width = profile.width();
    let plane = rows * width;
    let reference = 0.5 * (profile.tx_abs_height + profile.rx_abs_height);

    let dsm = bilinear_resample(&profile.corridor, rows)?;
    let direct = direct_path_channel(profile, rows);
    let center = profile.center_col();

    let mut data = Vec::with_capacity(config.n_channels * plane);
    push_grid(&mut data, &dsm, |h| norm.height(h, reference));
    for r in 0..rows {
        for c in 0..width {
            let v = if c == center {
                norm.height(direct.get(r, c), reference)
            } else {
                0.0
            };
            data.push(v as f32);
        }
    }

    let freq = norm.frequency(link.frequency) as f32;
    let dist3 = norm.distance(distance_3d(profile)) as f32;
    let scalars = match config.kind {
        ConfigKind::Original => {
            data.extend(std::iter::repeat_n(freq, plane));
            let grid = distance_grid_2d(profile.distance, rows, width);
            push_grid(&mut data, &grid, |d| norm.distance(d));
            Vec::new()
        }
        ConfigKind::Fine => {
            data.extend(std::iter::repeat_n(freq, plane));
            data.extend(std::iter::repeat_n(dist3, plane));
            Vec::new()
        }
        ConfigKind::Flip => vec![freq, dist3],
    };

    let channels = Tensor::new(vec![config.n_channels, rows, width], data)?;
    if !channels.all_finite() || scalars.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("normalized model input".into()));
    }
    let target = match link.path_loss {
        Some(pl) => {
            let t = norm.target(pl) as f32;
            if !t.is_finite() {
                return Err(Error::NonFinite("normalized target".into()));
            }
            Some(t)
        }
        None => None,
    };
    Ok(ModelInput {
        channels,
        scalars,
        target,
    })
}

/// Extract, correct for curvature.
pub fn build_profile(
    raster: &DsmRaster,
    link: &LinkMeasurement,
    params: &ExtractionParams,
) -> Result<PathProfile> {
    let raw = extract_corridor(raster, link, params)?;
    Ok(apply_earth_curvature(&raw, params.earth_radius))
}

/// Full path from measurement to network input.
pub fn prepare_input(
    raster: &DsmRaster,
    link: &LinkMeasurement,
    params: &ExtractionParams,
    config: &ChannelConfig,
    norm: &NormalizationSpec,
) -> Result<ModelInput> {
    let profile = build_profile(raster, link, params)?;
    assemble_input(&profile, link, config, norm)
}

pub const MEASUREMENT_HEADER: [&str; 9] = [
    "tx_x",
    "tx_y",
    "rx_x",
    "rx_y",
    "tx_agl",
    "rx_agl",
    "freq_mhz",
    "path_loss_db",
    "region",
];

#[derive(Debug, Serialize, Deserialize)]
struct MeasurementRecord {
    tx_x: f64,
    tx_y: f64,
    rx_x: f64,
    rx_y: f64,
    tx_agl: f64,
    rx_agl: f64,
    freq_mhz: f64,
    path_loss_db: Option<f64>,
    region: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<String>,
}

/// Parse a measurement CSV. A trailing `category` column is accepted.
pub fn read_measurements<R: Read>(reader: R) -> Result<Vec<LinkMeasurement>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let ok = names.len() >= 9
        && names[..9] == MEASUREMENT_HEADER
        && (names.len() == 9 || (names.len() == 10 && names[9] == "category"));
    if !ok {
        return Err(Error::format(
            "measurement CSV",
            format!("unexpected header {names:?}"),
        ));
    }
    let mut links = Vec::new();
    for rec in rdr.deserialize::<MeasurementRecord>() {
        let r = rec?;
        links.push(LinkMeasurement {
            tx_x: r.tx_x,
            tx_y: r.tx_y,
            rx_x: r.rx_x,
            rx_y: r.rx_y,
            tx_height_agl: r.tx_agl,
            rx_height_agl: r.rx_agl,
            frequency: r.freq_mhz,
            path_loss: r.path_loss_db,
            region: r.region,
            category: r.category.filter(|c| !c.is_empty()),
        });
    }
    Ok(links)
}

/// Write links as measurement CSV; the `category` column is emitted only
/// when at least one link carries a label.
pub fn write_measurements<W: Write>(writer: W, links: &[LinkMeasurement]) -> Result<()> {
    let with_category = links.iter().any(|l| l.category.is_some());
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = MEASUREMENT_HEADER.to_vec();
    if with_category {
        header.push("category");
    }
    wtr.write_record(&header)?;
    for l in links {
        let mut row = vec![
            l.tx_x.to_string(),
            l.tx_y.to_string(),
            l.rx_x.to_string(),
            l.rx_y.to_string(),
            l.tx_height_agl.to_string(),
            l.rx_height_agl.to_string(),
            l.frequency.to_string(),
            l.path_loss.map(|v| v.to_string()).unwrap_or_default(),
            l.region.clone(),
        ];
        if with_category {
            row.push(l.category.clone().unwrap_or_default());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn link(tx: (f64, f64), rx: (f64, f64), agl: (f64, f64), f: f64) -> LinkMeasurement {
        LinkMeasurement {
            tx_x: tx.0,
            tx_y: tx.1,
            rx_x: rx.0,
            rx_y: rx.1,
            tx_height_agl: agl.0,
            rx_height_agl: agl.1,
            frequency: f,
            path_loss: Some(120.0),
            region: "r".into(),
            category: None,
        }
    }

    fn flat(h: f32) -> DsmRaster {
        DsmRaster::from_fn(0.0, 0.0, 1.0, 400, 400, |_, _| h).unwrap()
    }

    #[test]
    fn flat_terrain_corridor_is_constant() {
        let l = link((50.0, 100.0), (300.0, 320.0), (20.0, 1.5), 1802.0);
        let p = extract_corridor(&flat(10.0), &l, &ExtractionParams::default()).unwrap();
        assert_eq!(p.corridor.rows(), l.ground_distance().floor() as usize);
        assert_eq!(p.corridor.cols(), 61);
        assert!(p.corridor.data().iter().all(|&h| h == 10.0));
        assert_eq!(p.tx_abs_height, 30.0);
        assert_eq!(p.rx_abs_height, 11.5);
    }

    #[test]
    fn ramp_terrain_follows_along_path_distance() {
        // Height equals the x coordinate of the cell center.
        let r = DsmRaster::from_fn(0.0, 0.0, 1.0, 200, 600, |_, c| c as f32 + 0.5).unwrap();
        let l = link((40.0, 100.0), (540.0, 100.0), (10.0, 1.5), 900.0);
        let p = extract_corridor(&r, &l, &ExtractionParams::default()).unwrap();
        assert_eq!(p.corridor.rows(), 500);
        for i in 0..p.corridor.rows() {
            for j in 0..61 {
                let want = 40.0 + i as f64;
                assert!((p.corridor.get(i, j) - want).abs() <= 0.5 + 1e-9);
            }
        }
    }

    #[test]
    fn rotation_by_90_degrees_matches_axis_aligned() {
        // Radially symmetric about the Tx cell center, so isotropic around it.
        let r = DsmRaster::from_fn(0.0, 0.0, 1.0, 600, 600, |row, col| {
            let (dx, dy) = (col as f64 - 300.0, row as f64 - 300.0);
            (dx.hypot(dy) * 0.1).sin() as f32 * 10.0 + 20.0
        })
        .unwrap();
        let params = ExtractionParams::default();
        let east = link((300.5, 300.5), (500.5, 300.5), (10.0, 1.5), 900.0);
        let north = link((300.5, 300.5), (300.5, 500.5), (10.0, 1.5), 900.0);
        let a = extract_corridor(&r, &east, &params).unwrap();
        let b = extract_corridor(&r, &north, &params).unwrap();
        assert_eq!(a.corridor.rows(), b.corridor.rows());
        for (x, y) in a.corridor.data().iter().zip(b.corridor.data()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn corridor_outside_raster_is_rejected() {
        let l = link((100.0, 20.0), (300.0, 20.0), (10.0, 1.5), 900.0);
        let err = extract_corridor(&flat(0.0), &l, &ExtractionParams::default()).unwrap_err();
        assert!(matches!(err, Error::OutOfBounds { .. }));
        let diag = link((100.0, 35.0), (300.0, 35.0), (10.0, 1.5), 900.0);
        assert!(extract_corridor(&flat(0.0), &diag, &ExtractionParams::default()).is_ok());
        let diag = link((100.0, 29.0), (300.0, 29.0), (10.0, 1.5), 900.0);
        assert!(extract_corridor(&flat(0.0), &diag, &ExtractionParams::default()).is_err());
    }

    #[test]
    fn short_link_is_rejected() {
        let l = link((100.0, 100.0), (150.0, 100.0), (10.0, 1.5), 900.0);
        assert!(matches!(
            extract_corridor(&flat(0.0), &l, &ExtractionParams::default()),
            Err(Error::InvalidLink(_))
        ));
    }

    #[test]
    fn even_width_is_rejected() {
        let l = link((100.0, 100.0), (250.0, 100.0), (10.0, 1.5), 900.0);
        let params = ExtractionParams {
            width: 60,
            ..Default::default()
        };
        assert!(matches!(
            extract_corridor(&flat(0.0), &l, &params),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn curvature_bulge_values() {
        assert_eq!(earth_bulge(0.0, 1000.0, EARTH_RADIUS_M), 0.0);
        assert_eq!(earth_bulge(1000.0, 1000.0, EARTH_RADIUS_M), 0.0);
        let mid = earth_bulge(500.0, 1000.0, EARTH_RADIUS_M);
        assert!((mid - 250_000.0 / 12_730_000.0).abs() < 1e-15);
        assert!((mid - 0.019639).abs() < 1e-6);
    }

    #[test]
    fn curvature_lowers_interior_rows_only() {
        let l = link((100.0, 100.0), (100.0, 301.0), (10.0, 1.5), 900.0);
        let p = extract_corridor(&flat(10.0), &l, &ExtractionParams::default()).unwrap();
        let c = apply_earth_curvature(&p, EARTH_RADIUS_M);
        assert_eq!(c.corridor.row(0), p.corridor.row(0));
        let i = 100;
        let want = 10.0 - earth_bulge(i as f64, p.distance, EARTH_RADIUS_M);
        assert!(c.corridor.row(i).iter().all(|&v| v == want));
        let flat_earth = apply_earth_curvature(&p, 1e30);
        for (a, b) in flat_earth.corridor.data().iter().zip(p.corridor.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn level_profile(tx: f64, rx: f64) -> PathProfile {
        PathProfile {
            corridor: Grid2::filled(100, 61, 0.0),
            distance: 100.5,
            tx_abs_height: tx,
            rx_abs_height: rx,
        }
    }

    #[test]
    fn direct_path_level_link() {
        let g = direct_path_channel(&level_profile(30.0, 30.0), 256);
        for r in 0..256 {
            for c in 0..61 {
                assert_eq!(g.get(r, c), if c == 30 { 30.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn direct_path_ramp_and_sparsity() {
        let g = direct_path_channel(&level_profile(0.0, 255.0), 256);
        for k in 0..256 {
            assert!((g.get(k, 30) - k as f64).abs() < 1e-12);
        }
        let off: f64 = (0..256)
            .flat_map(|r| (0..61).filter(|&c| c != 30).map(move |c| (r, c)))
            .map(|(r, c)| g.get(r, c).abs())
            .sum();
        assert_eq!(off, 0.0);
    }

    #[test]
    fn distance_grid_values() {
        let g = distance_grid_2d(812.3, 256, 61);
        assert_eq!(g.get(0, 30), 0.0);
        assert!((g.get(255, 30) - 812.3).abs() < 1e-9);
        assert_eq!(g.get(0, 0), 30.0);
        let center: Vec<f64> = g.column(30).collect();
        assert!(center.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn distance_3d_values() {
        assert_eq!(distance_3d(&PathProfile { distance: 500.0, ..level_profile(7.0, 7.0) }), 500.0);
        let p = PathProfile {
            distance: 300.0,
            ..level_profile(10.0, 410.0)
        };
        assert!((distance_3d(&p) - 500.0).abs() < 1e-12);
    }

    #[test]
    fn distance_3d_matches_raw_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raster = DsmRaster::from_fn(0.0, 0.0, 1.0, 500, 500, |r, c| ((r * 31 + c * 17) % 23) as f32)
            .unwrap();
        for _ in 0..100 {
            let tx = (rng.random_range(100.0..400.0), rng.random_range(100.0..400.0));
            let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let d = rng.random_range(70.0..110.0);
            let rx = (tx.0 + d * ang.cos(), tx.1 + d * ang.sin());
            let l = link(tx, rx, (rng.random_range(5.0..40.0), 1.5), 900.0);
            let p = extract_corridor(&raster, &l, &ExtractionParams::default()).unwrap();
            // Independent route: ground heights from the raw cell indices.
            let cell = |x: f64, y: f64| {
                // The containing cell's center is the nearest one.
                let (c, r) = (x.floor() as usize, y.floor() as usize);
                raster.height(r, c) as f64
            };
            let zt = cell(tx.0, tx.1) + l.tx_height_agl;
            let zr = cell(rx.0, rx.1) + l.rx_height_agl;
            let want = ((rx.0 - tx.0).powi(2) + (rx.1 - tx.1).powi(2) + (zr - zt).powi(2)).sqrt();
            assert!((distance_3d(&p) - want).abs() <= 1e-9 * want);
        }
    }

    fn rough_raster() -> DsmRaster {
        DsmRaster::from_fn(0.0, 0.0, 1.0, 400, 400, |r, c| {
            ((r as f32 * 0.05).sin() + (c as f32 * 0.07).cos()) * 8.0 + 12.0
        })
        .unwrap()
    }

    #[test]
    fn assembled_shapes_follow_configuration() {
        let raster = rough_raster();
        let l = link((60.0, 80.0), (330.0, 290.0), (25.0, 1.5), 1802.0);
        let params = ExtractionParams::default();
        let norm = NormalizationSpec::default();
        for kind in ConfigKind::ALL {
            let cfg = ChannelConfig::of(kind);
            let m = prepare_input(&raster, &l, &params, &cfg, &norm).unwrap();
            assert_eq!(m.channels.shape(), &[cfg.n_channels, 256, 61]);
            assert_eq!(m.scalars.len(), cfg.n_scalars);
            assert_eq!(m.target, Some((120.0 / 200.0) as f32));
        }
        let flip = prepare_input(&raster, &l, &params, &ChannelConfig::of(ConfigKind::Flip), &norm)
            .unwrap();
        assert_eq!(flip.channels.shape(), &[2, 256, 61]);
        assert_eq!(flip.scalars.len(), 2);
        assert_eq!(flip.scalars[0], (1802f64.log10() / 4.0) as f32);
    }

    fn variance(xs: &[f32]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
        xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
    }

    #[test]
    fn filled_channels_are_constant_and_configs_share_prefix() {
        let raster = rough_raster();
        let l = link((60.0, 80.0), (330.0, 290.0), (25.0, 1.5), 1802.0);
        let params = ExtractionParams::default();
        let norm = NormalizationSpec::default();
        let orig = prepare_input(&raster, &l, &params, &ChannelConfig::of(ConfigKind::Original), &norm)
            .unwrap();
        let fine = prepare_input(&raster, &l, &params, &ChannelConfig::of(ConfigKind::Fine), &norm)
            .unwrap();
        let freq = norm.frequency(1802.0) as f32;
        assert!(fine.channels.outer(2).iter().all(|&v| v == freq));
        assert_eq!(variance(fine.channels.outer(3)), 0.0);
        assert!(variance(fine.channels.outer(0)) > 0.0);
        for ch in 0..3 {
            assert_eq!(orig.channels.outer(ch), fine.channels.outer(ch));
        }
        assert_ne!(orig.channels.outer(3), fine.channels.outer(3));
        // Deterministic.
        let again = prepare_input(&raster, &l, &params, &ChannelConfig::of(ConfigKind::Original), &norm)
            .unwrap();
        assert_eq!(again, orig);
    }

    #[test]
    fn inconsistent_config_rejected() {
        assert!(ChannelConfig::new(ConfigKind::Flip, 4, 0).is_err());
        assert!(ChannelConfig::new(ConfigKind::Fine, 4, 0).is_ok());
        let bad = ChannelConfig {
            kind: ConfigKind::Original,
            n_channels: 2,
            n_scalars: 2,
        };
        let l = link((60.0, 80.0), (330.0, 290.0), (25.0, 1.5), 1802.0);
        let p = build_profile(&rough_raster(), &l, &ExtractionParams::default()).unwrap();
        assert!(assemble_input(&p, &l, &bad, &NormalizationSpec::default()).is_err());
    }

    #[test]
    fn config_kind_parsing() {
        assert_eq!("FLIP".parse::<ConfigKind>().unwrap(), ConfigKind::Flip);
        assert!("deep".parse::<ConfigKind>().is_err());
        for k in ConfigKind::ALL {
            assert_eq!(ConfigKind::from_code(k.code()).unwrap(), k);
            assert_eq!(k.to_string().parse::<ConfigKind>().unwrap(), k);
        }
    }

    #[test]
    fn measurement_csv_round_trip() {
        let mut a = link((1.5, 2.25), (300.125, 4.0), (25.0, 1.5), 1802.0);
        a.category = Some("rural".into());
        let mut b = link((0.1, 0.2), (100.3, 0.4), (10.0, 1.5), 449.0);
        b.path_loss = None;
        let mut buf = Vec::new();
        write_measurements(&mut buf, &[a.clone(), b.clone()]).unwrap();
        let back = read_measurements(buf.as_slice()).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn measurement_csv_without_category() {
        let text = "tx_x,tx_y,rx_x,rx_y,tx_agl,rx_agl,freq_mhz,path_loss_db,region\n0,0,100,0,20,1.5,1802,,london\n";
        let links = read_measurements(text.as_bytes()).unwrap();
        assert_eq!(links.len(), 1);
        assert_eq!(links[0].path_loss, None);
        assert_eq!(links[0].region, "london");
        let bad = "tx,ty\n1,2\n";
        assert!(read_measurements(bad.as_bytes()).is_err());
    }

    #[test]
    fn filter_hook_applies_predicate() {
        let a = link((0.0, 0.0), (100.0, 0.0), (20.0, 1.5), 449.0);
        let b = link((0.0, 0.0), (100.0, 0.0), (20.0, 1.5), 5850.0);
        let kept = filter_links(vec![a.clone(), b], |l| l.frequency < 1000.0);
        assert_eq!(kept, vec![a]);
    }
}
