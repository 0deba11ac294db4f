use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use profiler_core::config::KeyValues;
use profiler_core::diagnostics::{
    categorize_report, exhaustive_regression, link_stats, write_category_csv, write_region_stats_csv,
    write_regression_csv, RegionStats,
};
use profiler_core::geodata::{load_raster, DsmRaster, LoadOptions, RasterFormat};
use profiler_core::nn::Checkpoint;
use profiler_core::pipeline::{
    average_curves, cross_validate, evaluate_region, extract_samples, group_by_region, read_curve_csv,
    read_summary_csv, train_no_holdout, write_curve_csv, write_ensemble_csv, Ensemble, EpochRecord, InputSet, Sample,
};
use profiler_core::profile::{
    build_profile, read_measurements, write_measurements, ChannelConfig, ConfigKind, ExtractionParams, LinkMeasurement,
    NormalizationSpec, PathProfile,
};
use profiler_core::synthgen::{
    generate_measurements, generate_terrain, CampaignParams, GroundTruthModel, TerrainParams,
};
use profiler_core::{Error, Result};
use rayon::prelude::*;

use crate::settings::Settings;
use crate::{Command, GlobalArgs};

/// Name of the effective configuration written into every output directory.
pub const CONFIG_COPY: &str = "config.txt";

pub fn run(command: Command, g: &GlobalArgs) -> Result<()> {
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let out = g
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required".into()))?;
    let (mut kv, base) = match &g.config {
        Some(p) => {
            let kv = KeyValues::load(p)?;
            let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            (kv, absolute(dir)?)
        }
        None => (KeyValues::default(), absolute(Path::new("."))?),
    };
    if let Some(v) = g.seed {
        kv.set("seed", v);
    }
    if let Some(v) = g.model {
        kv.set("model", v);
    }
    if let Some(v) = g.runs {
        kv.set("runs", v);
    }
    if let Some(v) = g.epochs {
        kv.set("epochs", v);
    }
    if let Some(v) = g.batch {
        kv.set("batch_size", v);
    }
    if let Some(v) = g.lr {
        kv.set("lr", v);
    }
    let s = Settings::new(kv, base);
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    match command {
        Command::Synth => synth(s, &out),
        Command::Extract => extract(s, &out),
        Command::Train => train(s, &out),
        Command::Cv => cv(s, &out),
        Command::EnsembleEval => ensemble_eval(s, &out),
        Command::Diagnose => diagnose(s, &out),
        Command::Losscurve => losscurve(s, &out),
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| io_err(p, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| io_err(path, e))
}

fn finish(s: Settings, out: &Path) -> Result<()> {
    let resolved = s.finish()?;
    let path = out.join(CONFIG_COPY);
    fs::write(&path, resolved.to_text()).map_err(|e| io_err(&path, e))
}

/// Where measurements and rasters come from.
struct RawSpec {
    measurements: PathBuf,
    raster: Option<PathBuf>,
    region_rasters: BTreeMap<String, PathBuf>,
    load: LoadOptions,
    params: ExtractionParams,
}

impl RawSpec {
    fn read(s: &mut Settings) -> Result<Self> {
        Ok(Self {
            measurements: s.required_path("measurements")?,
            raster: s.path("raster")?,
            region_rasters: s.prefixed_paths("raster").into_iter().collect(),
            load: s.load_options()?,
            params: s.extraction()?,
        })
    }

    /// Links from one CSV, or from every `*.csv` in a directory in name
    /// order. Ids are positions in that order.
    fn links(&self) -> Result<Vec<LinkMeasurement>> {
        let p = &self.measurements;
        if !p.is_dir() {
            return read_measurements(open(p)?);
        }
        let mut files: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| io_err(p, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| io_err(p, err)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|f| f.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Config(format!("no .csv files in {}", p.display())));
        }
        let mut all = Vec::new();
        for f in files {
            all.extend(read_measurements(open(&f)?)?);
        }
        Ok(all)
    }

    fn raster_path(&self, region: &str) -> Result<&Path> {
        self.region_rasters
            .get(region)
            .or(self.raster.as_ref())
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Config(format!("no raster configured for region {region}")))
    }

    /// Load every raster the links need, once each.
    fn rasters(&self, links: &[LinkMeasurement]) -> Result<BTreeMap<PathBuf, DsmRaster>> {
        let mut out = BTreeMap::new();
        for l in links {
            let p = self.raster_path(&l.region)?;
            if !out.contains_key(p) {
                let format = RasterFormat::from_path(p).ok_or_else(|| {
                    Error::Config(format!("{}: raster must end in .dsr or .asc", p.display()))
                })?;
                log::info!("loading raster {}", p.display());
                out.insert(p.to_path_buf(), load_raster(p, format, self.load)?);
            }
        }
        Ok(out)
    }

    fn extract(&self, cfg: &ChannelConfig, norm: &NormalizationSpec) -> Result<InputSet> {
        let links = self.links()?;
        let rasters = self.rasters(&links)?;
        let mut samples = Vec::with_capacity(links.len());
        for (path, raster) in &rasters {
            let mine: Vec<(u64, &LinkMeasurement)> = links
                .iter()
                .enumerate()
                .filter(|(_, l)| self.raster_path(&l.region).is_ok_and(|p| p == path))
                .map(|(i, l)| (i as u64, l))
                .collect();
            samples.extend(extract_samples(raster, &mine, &self.params, cfg, norm)?);
        }
        samples.sort_by_key(|s| s.id);
        log::info!("extracted {} samples", samples.len());
        Ok(InputSet {
            kind: cfg.kind,
            norm: *norm,
            samples,
        })
    }

    /// Curvature-corrected profiles of every link, grouped by region.
    fn profiles(&self) -> Result<BTreeMap<String, Vec<(LinkMeasurement, PathProfile)>>> {
        let links = self.links()?;
        let rasters = self.rasters(&links)?;
        let built: Vec<(LinkMeasurement, PathProfile)> = links
            .into_par_iter()
            .enumerate()
            .map(|(i, l)| {
                let raster = &rasters[self.raster_path(&l.region)?];
                let p = build_profile(raster, &l, &self.params)
                    .map_err(|e| Error::InvalidLink(format!("link {i}: {e}")))?;
                Ok((l, p))
            })
            .collect::<Result<_>>()?;
        let mut groups: BTreeMap<String, Vec<(LinkMeasurement, PathProfile)>> = BTreeMap::new();
        for (l, p) in built {
            groups.entry(l.region.clone()).or_default().push((l, p));
        }
        Ok(groups)
    }
}

enum DataSpec {
    Inputs(PathBuf),
    Raw(RawSpec),
}

impl DataSpec {
    fn read(s: &mut Settings) -> Result<Self> {
        match s.path("inputs")? {
            Some(p) => {
                if s.path("measurements")?.is_some() {
                    return Err(Error::Config("inputs and measurements are mutually exclusive".into()));
                }
                Ok(DataSpec::Inputs(p))
            }
            None => Ok(DataSpec::Raw(RawSpec::read(s)?)),
        }
    }

    /// Samples for `cfg`. `norm` is used for extraction, and must match
    /// the stored normalization when reading an inputs file.
    fn load(&self, cfg: &ChannelConfig, norm: Option<&NormalizationSpec>) -> Result<InputSet> {
        match self {
            DataSpec::Inputs(p) => {
                let set = InputSet::read_min1(open(p)?)?;
                if set.kind != cfg.kind {
                    return Err(Error::Config(format!(
                        "{} holds {} inputs but the model is {}",
                        p.display(),
                        set.kind,
                        cfg.kind
                    )));
                }
                if norm.is_some_and(|n| *n != set.norm) {
                    return Err(Error::Config(format!(
                        "{} was extracted with a different normalization",
                        p.display()
                    )));
                }
                Ok(set)
            }
            DataSpec::Raw(raw) => raw.extract(cfg, norm.unwrap_or(&NormalizationSpec::default())),
        }
    }
}

fn synth(mut s: Settings, out: &Path) -> Result<()> {
    let seed: u64 = s.value("seed", 0)?;
    let t = TerrainParams::default();
    let terrain = TerrainParams {
        seed,
        size: s.value("terrain.size", t.size)?,
        cell_size: s.value("terrain.cell_size", t.cell_size)?,
        roughness: s.value("terrain.roughness", t.roughness)?,
        noise_scale: s.value("terrain.noise_scale", t.noise_scale)?,
        building_density: s.value("terrain.building_density", t.building_density)?,
        building_height: (
            s.value("terrain.building_height_min", t.building_height.0)?,
            s.value("terrain.building_height_max", t.building_height.1)?,
        ),
        building_size: (
            s.value("terrain.building_size_min", t.building_size.0)?,
            s.value("terrain.building_size_max", t.building_size.1)?,
        ),
    };
    let c = CampaignParams::default();
    let campaign = CampaignParams {
        n_links: s.value("links", c.n_links)?,
        n_regions: s.value("regions", c.n_regions)?,
        bands: s.list("bands", c.bands)?,
        distance: (s.value("distance_min", c.distance.0)?, s.value("distance_max", c.distance.1)?),
        sites_per_region: s.value("sites_per_region", c.sites_per_region)?,
        tx_agl: (s.value("tx_agl_min", c.tx_agl.0)?, s.value("tx_agl_max", c.tx_agl.1)?),
        rx_agl: s.value("rx_agl", c.rx_agl)?,
        extraction: s.extraction()?,
        max_retries: c.max_retries,
    };
    let g = GroundTruthModel::default();
    let truth = GroundTruthModel {
        l0: s.value("truth.l0", g.l0)?,
        exponent: s.value("truth.exponent", g.exponent)?,
        freq_coeff: s.value("truth.freq_coeff", g.freq_coeff)?,
        obstruction_coeff: s.value("truth.obstruction_coeff", g.obstruction_coeff)?,
        interaction_coeff: s.value("truth.interaction_coeff", g.interaction_coeff)?,
        noise_sd: s.value("truth.noise_sd", g.noise_sd)?,
        f0: s.value("truth.f0", g.f0)?,
        depth_mode: s.depth_mode()?,
    };
    finish(s, out)?;

    let raster = generate_terrain(&terrain)?;
    raster.save_dsr1(&out.join("terrain.dsr"))?;
    let links = generate_measurements(&raster, &campaign, &truth, seed.wrapping_add(1))?;
    let mut w = create(&out.join("measurements.csv"))?;
    write_measurements(&mut w, &links)?;
    w.flush().map_err(|e| io_err(&out.join("measurements.csv"), e))?;
    log::info!("wrote {} links over {} regions", links.len(), campaign.n_regions);
    Ok(())
}

fn extract(mut s: Settings, out: &Path) -> Result<()> {
    let cfg = s.channel_config()?;
    let norm = s.normalization()?;
    let raw = RawSpec::read(&mut s)?;
    finish(s, out)?;
    let set = raw.extract(&cfg, &norm)?;
    let path = out.join("inputs.min1");
    let mut w = create(&path)?;
    set.write_min1(&mut w)?;
    w.flush().map_err(|e| io_err(&path, e))
}

/// Model configuration, data and normalization shared by `train` and `cv`.
fn training_inputs(s: &mut Settings) -> Result<(ChannelConfig, DataSpec, Option<NormalizationSpec>)> {
    let cfg = s.channel_config()?;
    let data = DataSpec::read(s)?;
    let norm = match data {
        DataSpec::Raw(_) => Some(s.normalization()?),
        DataSpec::Inputs(_) => None,
    };
    Ok((cfg, data, norm))
}

fn save_run(ckpt_path: &Path, curve_path: &Path, ckpt: &Checkpoint, curve: &[EpochRecord]) -> Result<()> {
    ckpt.save(ckpt_path)?;
    let mut w = create(curve_path)?;
    write_curve_csv(&mut w, curve)?;
    w.flush().map_err(|e| io_err(curve_path, e))
}

fn write_losscurve(out: &Path, curves: &[Vec<EpochRecord>]) -> Result<()> {
    let path = out.join("losscurve.csv");
    let mut w = create(&path)?;
    write_curve_csv(&mut w, &average_curves(curves)?)?;
    w.flush().map_err(|e| io_err(&path, e))
}

fn train(mut s: Settings, out: &Path) -> Result<()> {
    let (cfg, data, norm) = training_inputs(&mut s)?;
    let plan = s.plan()?;
    if plan.holdout.is_some() {
        return Err(Error::Config("holdout does not apply to train; use cv".into()));
    }
    finish(s, out)?;
    let set = data.load(&cfg, norm.as_ref())?;
    let regions = group_by_region(set.samples)?;
    let outcomes = train_no_holdout(&regions, &plan, cfg.kind, &set.norm, &mut ())?;
    let mut curves = Vec::new();
    for (run, o) in outcomes.into_iter().enumerate() {
        log::info!(
            "run {run}: best epoch {} validation RMSE {:.3} dB",
            o.checkpoint.epoch,
            o.checkpoint.val_loss.sqrt() * set.norm.target_scale_db
        );
        save_run(
            &out.join(format!("model_{run:02}.ckp")),
            &out.join(format!("curve_{run:02}.csv")),
            &o.checkpoint,
            &o.curve,
        )?;
        curves.push(o.curve);
    }
    write_losscurve(out, &curves)
}

fn cv(mut s: Settings, out: &Path) -> Result<()> {
    let (cfg, data, norm) = training_inputs(&mut s)?;
    let plan = s.plan()?;
    finish(s, out)?;
    let set = data.load(&cfg, norm.as_ref())?;
    let regions = group_by_region(set.samples)?;
    let outcome = cross_validate(&regions, &plan, cfg.kind, &set.norm, &mut ())?;

    let models = out.join("models");
    let curve_dir = out.join("curves");
    for d in [&models, &curve_dir] {
        fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    let mut curves = Vec::new();
    for r in &outcome.runs {
        let stem = format!("{}_run{:02}", r.holdout, r.run);
        save_run(
            &models.join(format!("{stem}.ckp")),
            &curve_dir.join(format!("{stem}.csv")),
            &r.outcome.checkpoint,
            &r.outcome.curve,
        )?;
        curves.push(r.outcome.curve.clone());
    }
    write_losscurve(out, &curves)?;
    for (name, summary) in [("cv_runs.csv", false), ("cv_summary.csv", true)] {
        let path = out.join(name);
        let mut w = create(&path)?;
        if summary {
            outcome.report.write_summary_csv(&mut w)?;
        } else {
            outcome.report.write_runs_csv(&mut w)?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
    }
    log::info!("cross-validation mean RMSE {:.3} dB", outcome.report.grand_mean_db);
    Ok(())
}

/// Checkpoints of `holdout` saved by `cv` under `dir`, in run order.
fn cv_checkpoints(dir: &Path, holdout: &str) -> Result<Vec<PathBuf>> {
    let models = dir.join("models");
    let prefix = format!("{holdout}_run");
    let mut found: Vec<PathBuf> = fs::read_dir(&models)
        .map_err(|e| io_err(&models, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "ckp")
                && p.file_stem()
                    .and_then(|s| s.to_str())
                    .and_then(|s| s.strip_prefix(&prefix))
                    .is_some_and(|run| !run.is_empty() && run.chars().all(|c| c.is_ascii_digit()))
        })
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(Error::Config(format!(
            "no checkpoints for region {holdout} in {}",
            models.display()
        )));
    }
    Ok(found)
}

fn load_ensemble(paths: &[PathBuf]) -> Result<Ensemble> {
    let ckpts: Vec<Checkpoint> = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<_>>()?;
    Ensemble::from_checkpoints(&ckpts)
}

fn ensemble_eval(mut s: Settings, out: &Path) -> Result<()> {
    let listed = s.paths("checkpoints")?;
    let cv_dir = s.path("cv_dir")?;
    let kind: Option<ConfigKind> = s.optional("model")?;
    let data = DataSpec::read(&mut s)?;
    finish(s, out)?;

    let shared = match (&cv_dir, listed.is_empty()) {
        (Some(_), false) => {
            return Err(Error::Config("checkpoints and cv_dir are mutually exclusive".into()));
        }
        (None, true) => return Err(Error::Config("set checkpoints or cv_dir".into())),
        (None, false) => Some(load_ensemble(&listed)?),
        (Some(_), true) => None,
    };
    // The data must be read before per-region ensembles are known, so take
    // the configuration from any checkpoint.
    let probe = match &shared {
        Some(e) => (e.kind(), *e.norm()),
        None => {
            let dir = cv_dir.as_deref().expect("checked above");
            let any = fs::read_dir(dir.join("models"))
                .map_err(|e| io_err(&dir.join("models"), e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "ckp"))
                .min()
                .ok_or_else(|| Error::Config(format!("no checkpoints in {}", dir.display())))?;
            let c = Checkpoint::load(&any)?;
            (c.kind, c.norm)
        }
    };
    if kind.is_some_and(|k| k != probe.0) {
        return Err(Error::Config(format!(
            "model is {} but the checkpoints are {}",
            kind.unwrap(),
            probe.0
        )));
    }
    let set = data.load(&ChannelConfig::of(probe.0), Some(&probe.1))?;
    let regions = group_by_region(set.samples)?;

    let mut rows = Vec::new();
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    let mut categories = Vec::new();
    for region in &regions {
        let own;
        let ens = match &shared {
            Some(e) => e,
            None => {
                own = load_ensemble(&cv_checkpoints(cv_dir.as_deref().expect("checked above"), region.region())?)?;
                if own.kind() != probe.0 || *own.norm() != probe.1 {
                    return Err(Error::Config(format!(
                        "checkpoints of {} differ in configuration or normalization",
                        region.region()
                    )));
                }
                &own
            }
        };
        let (row, p) = evaluate_region(ens, region, &mut ())?;
        log::info!(
            "{}: ensemble {:.3} dB, members mean {:.3} dB",
            row.region,
            row.ensemble_rmse_db,
            row.mean_member_rmse_db
        );
        rows.push(row);
        preds.extend(p);
        targets.extend(region.samples().iter().map(|s: &Sample| s.target_db.unwrap_or(f64::NAN)));
        categories.extend(region.samples().iter().map(|s| s.category.clone()));
    }
    let path = out.join("ensemble_regions.csv");
    let mut w = create(&path)?;
    write_ensemble_csv(&mut w, &rows)?;
    w.flush().map_err(|e| io_err(&path, e))?;

    let report = categorize_report(&preds, &targets, &categories)?;
    let path = out.join("ensemble_categories.csv");
    let mut w = create(&path)?;
    write_category_csv(&mut w, &report)?;
    w.flush().map_err(|e| io_err(&path, e))
}

fn diagnose(mut s: Settings, out: &Path) -> Result<()> {
    let summary_path = s.required_path("cv_summary")?;
    let mode = s.depth_mode()?;
    let raw = RawSpec::read(&mut s)?;
    finish(s, out)?;

    let summary = read_summary_csv(open(&summary_path)?)?;
    let mut groups = raw.profiles()?;
    let mut stats: Vec<(String, RegionStats)> = Vec::with_capacity(summary.len());
    for (region, _) in &summary {
        let links = groups
            .remove(region)
            .ok_or_else(|| Error::Config(format!("summary region {region} has no measurements")))?;
        stats.push((region.clone(), link_stats(&links, mode)?));
    }
    let path = out.join("region_stats.csv");
    let mut w = create(&path)?;
    write_region_stats_csv(&mut w, &stats)?;
    w.flush().map_err(|e| io_err(&path, e))?;

    let only: Vec<RegionStats> = stats.into_iter().map(|(_, s)| s).collect();
    let targets: Vec<f64> = summary.iter().map(|(_, v)| *v).collect();
    let results = exhaustive_regression(&only, &targets)?;
    let path = out.join("regression.csv");
    let mut w = create(&path)?;
    write_regression_csv(&mut w, &results)?;
    w.flush().map_err(|e| io_err(&path, e))
}

fn losscurve(mut s: Settings, out: &Path) -> Result<()> {
    let mut files = s.paths("curves")?;
    if let Some(dir) = s.path("curve_dir")? {
        let mut found: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| io_err(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        found.sort();
        files.extend(found);
    }
    finish(s, out)?;
    if files.is_empty() {
        return Err(Error::Config("set curves or curve_dir".into()));
    }
    let curves = files
        .iter()
        .map(|p| read_curve_csv(open(p)?))
        .collect::<Result<Vec<_>>>()?;
    write_losscurve(out, &curves)
}
