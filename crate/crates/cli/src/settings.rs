//! Resolution of config file keys and flag overrides into typed settings.
//!
//! Every value read, defaulted or not, is recorded so the effective
//! configuration can be written next to the artifacts and replayed.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use profiler_core::config::KeyValues;
use profiler_core::diagnostics::DepthMode;
use profiler_core::geodata::LoadOptions;
use profiler_core::nn::ArchSpec;
use profiler_core::pipeline::TrainPlan;
use profiler_core::profile::{ChannelConfig, ConfigKind, ExtractionParams, NormalizationSpec};
use profiler_core::{Error, Result};

pub struct Settings {
    kv: KeyValues,
    resolved: KeyValues,
    base: PathBuf,
}

impl Settings {
    /// `base` is the directory relative paths are taken from.
    pub fn new(kv: KeyValues, base: PathBuf) -> Self {
        Self {
            kv,
            resolved: KeyValues::default(),
            base,
        }
    }

    pub fn value<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.kv.get(key)?.unwrap_or(default);
        self.resolved.set(key, &v);
        Ok(v)
    }

    pub fn optional<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v: Option<T> = self.kv.get(key)?;
        if let Some(v) = &v {
            self.resolved.set(key, v);
        }
        Ok(v)
    }

    pub fn list<T>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.kv.list(key)?.unwrap_or(default);
        self.resolved.set(key, join(&v));
        Ok(v)
    }

    fn absolute(&self, raw: &str) -> PathBuf {
        let p = Path::new(raw);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Path-valued key, made absolute. Missing files are reported by the
    /// reader, not here.
    pub fn path(&mut self, key: &str) -> Result<Option<PathBuf>> {
        Ok(match self.kv.raw(key) {
            Some(raw) if !raw.is_empty() => {
                let p = self.absolute(&raw);
                self.resolved.set(key, p.display());
                Some(p)
            }
            _ => None,
        })
    }

    pub fn required_path(&mut self, key: &str) -> Result<PathBuf> {
        self.path(key)?
            .ok_or_else(|| Error::Config(format!("missing required key {key}")))
    }

    /// Comma-separated list of paths.
    pub fn paths(&mut self, key: &str) -> Result<Vec<PathBuf>> {
        let Some(raw) = self.kv.raw(key) else {
            return Ok(Vec::new());
        };
        let paths: Vec<PathBuf> = raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| self.absolute(s))
            .collect();
        self.resolved.set(
            key,
            paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
        );
        Ok(paths)
    }

    /// `prefix.<name> = path` entries.
    pub fn prefixed_paths(&mut self, prefix: &str) -> Vec<(String, PathBuf)> {
        let hits = self.kv.with_prefix(&format!("{prefix}."));
        hits.into_iter()
            .map(|(name, raw)| {
                let p = self.absolute(&raw);
                self.resolved.set(&format!("{prefix}.{name}"), p.display());
                (name, p)
            })
            .collect()
    }

    /// Input configuration, checked against optional explicit channel and
    /// scalar counts.
    pub fn channel_config(&mut self) -> Result<ChannelConfig> {
        let kind: ConfigKind = self.value("model", ConfigKind::Fine)?;
        let table = ChannelConfig::of(kind);
        let channels = self.value("channels", table.n_channels)?;
        let scalars = self.value("scalars", table.n_scalars)?;
        ChannelConfig::new(kind, channels, scalars)
    }

    pub fn extraction(&mut self) -> Result<ExtractionParams> {
        let d = ExtractionParams::default();
        Ok(ExtractionParams {
            width: self.value("corridor_width", d.width)?,
            d_min: self.value("d_min", d.d_min)?,
            earth_radius: self.value("earth_radius_m", d.earth_radius)?,
        })
    }

    pub fn normalization(&mut self) -> Result<NormalizationSpec> {
        let d = NormalizationSpec::default();
        let n = NormalizationSpec {
            height_scale_m: self.value("norm.height_scale_m", d.height_scale_m)?,
            freq_log_divisor: self.value("norm.freq_log_divisor", d.freq_log_divisor)?,
            distance_scale_m: self.value("norm.distance_scale_m", d.distance_scale_m)?,
            target_scale_db: self.value("norm.target_scale_db", d.target_scale_db)?,
            target_offset_db: self.value("norm.target_offset_db", d.target_offset_db)?,
        };
        n.validate()?;
        Ok(n)
    }

    pub fn load_options(&mut self) -> Result<LoadOptions> {
        Ok(LoadOptions {
            fill: self.optional("raster_fill")?,
        })
    }

    pub fn depth_mode(&mut self) -> Result<DepthMode> {
        self.value("depth_mode", DepthMode::default())
    }

    pub fn plan(&mut self) -> Result<TrainPlan> {
        let defaults = TrainPlan {
            arch: ArchSpec::desk(),
            ..TrainPlan::default()
        };
        let plan = defaults.apply(&mut self.kv)?;
        plan.store(&mut self.resolved);
        Ok(plan)
    }

    /// Reject unknown keys and return the effective configuration.
    pub fn finish(self) -> Result<KeyValues> {
        self.kv.finish()?;
        Ok(self.resolved)
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
