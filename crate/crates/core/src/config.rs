//! Run configuration: one versioned TOML file per invocation.
//!
//! ```toml
//! version = 1
//!
//! [model]
//! lambda_w = 1.0
//! lambda_x = 0.1
//! lambda_v = 10.0
//!
//! [kernel]
//! family = "constant"
//! c = 1.0
//!
//! [initial]
//! n = 64
//! seed = 7
//! sampler = { distribution = "uniform_box", position_lo = [-1.0, -1.0], position_hi = [1.0, 1.0], velocity_lo = [-1.0, -1.0], velocity_hi = [1.0, 1.0] }
//!
//! [integration]
//! dt = 1e-3
//! t_end = 20.0
//! record_every = 100
//! ```
//!
//! `[initial]` takes either `path` (a state CSV) or `sampler` with `n` and
//! `seed`. Optional sections: `[suite]`, `[meanfield]`, `[wasserstein]`,
//! `[check_params]` and `[output]`. Relative paths are resolved against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{ModelParams, ParticleState};
use crate::error::{Error, Result};
use crate::experiments::{Distribution, InitialSampler, SuiteOptions};
use crate::io;
use crate::kernel::{validate_kernel, KernelSpec};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: Option<ModelParams>,
    pub kernel: Option<KernelSpec>,
    pub initial: Option<InitialConfig>,
    pub integration: Option<IntegrationConfig>,
    pub suite: Option<SuiteOptions>,
    pub meanfield: Option<MeanfieldConfig>,
    pub wasserstein: Option<WassersteinConfig>,
    pub check_params: Option<CheckParamsConfig>,
    pub output: Option<OutputConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub path: Option<PathBuf>,
    pub sampler: Option<Distribution>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationConfig {
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

fn default_record_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanfieldConfig {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WassersteinConfig {
    pub a: PathBuf,
    pub b: PathBuf,
}

/// Radius over which `phi` is bounded; defaults to the initial diameter plus headroom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckParamsConfig {
    pub r_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

fn missing(section: &str) -> Error {
    Error::Config(format!("missing section `{section}`"))
}

impl RunConfig {
    /// Parses and validates `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut config = Self::parse(&text).map_err(|e| Error::file(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve(base);
        config.validate()?;
        Ok(config)
    }

    /// Parses without resolving paths or checking files.
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if config.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {}, expected {CONFIG_VERSION}",
                config.version
            )));
        }
        Ok(config)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.initial.as_mut().and_then(|i| i.path.as_mut()) {
            fix(p);
        }
        if let Some(w) = self.wasserstein.as_mut() {
            fix(&mut w.a);
            fix(&mut w.b);
        }
        if let Some(o) = self.output.as_mut() {
            fix(&mut o.dir);
        }
    }

    /// Checks every section that is present.
    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.model {
            m.validate()?;
        }
        if let Some(k) = &self.kernel {
            let probe = match k {
                KernelSpec::Tabulated { knots } => knots.last().map_or(1.0, |k| k.0.max(1.0)),
                _ => 1.0,
            };
            let findings = validate_kernel(k, probe, 101);
            if !findings.is_empty() {
                return Err(Error::InvalidKernel(findings));
            }
        }
        if let Some(i) = &self.integration {
            if !(i.dt.is_finite() && i.dt > 0.0) {
                return Err(Error::Config(format!("integration.dt must be positive, got {}", i.dt)));
            }
            if !(i.t_end.is_finite() && i.t_end > i.dt) {
                return Err(Error::Config(format!(
                    "integration.t_end must exceed dt, got {}",
                    i.t_end
                )));
            }
            if i.record_every == 0 {
                return Err(Error::Config("integration.record_every must be at least 1".into()));
            }
        }
        if let Some(init) = &self.initial {
            match (&init.path, &init.sampler) {
                (Some(p), None) => {
                    if !p.is_file() {
                        return Err(Error::file(p, "initial state file not found"));
                    }
                }
                (None, Some(_)) => {
                    if init.seed.is_none() {
                        return Err(Error::Config("missing field `initial.seed`".into()));
                    }
                }
                _ => {
                    return Err(Error::Config(
                        "initial needs exactly one of `path` or `sampler`".into(),
                    ))
                }
            }
        }
        if let Some(w) = &self.wasserstein {
            for p in [&w.a, &w.b] {
                if !p.is_file() {
                    return Err(Error::file(p, "measure file not found"));
                }
            }
        }
        if let Some(m) = &self.meanfield {
            if m.seeds.is_empty() {
                return Err(Error::Config("meanfield.seeds is empty".into()));
            }
            if m.sizes.is_empty() || m.sizes[0] == 0 || m.sizes.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config(
                    "meanfield.sizes must be positive and strictly ascending".into(),
                ));
            }
            if m.checkpoints.iter().any(|t| !(t.is_finite() && *t >= 0.0))
                || m.checkpoints.windows(2).any(|w| w[1] < w[0])
            {
                return Err(Error::Config(
                    "meanfield.checkpoints must be nonnegative and ascending".into(),
                ));
            }
        }
        if let Some(s) = &self.suite {
            if !(s.tail_threshold > 0.0 && s.tail_threshold < 1.0) {
                return Err(Error::Config("suite.tail_threshold must lie in (0, 1)".into()));
            }
        }
        if let Some(r) = self.check_params.and_then(|c| c.r_max) {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::Config(format!("check_params.r_max must be positive, got {r}")));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> Result<&ModelParams> {
        self.model.as_ref().ok_or_else(|| missing("model"))
    }

    pub fn kernel(&self) -> Result<&KernelSpec> {
        self.kernel.as_ref().ok_or_else(|| missing("kernel"))
    }

    pub fn integration(&self) -> Result<&IntegrationConfig> {
        self.integration.as_ref().ok_or_else(|| missing("integration"))
    }

    pub fn meanfield(&self) -> Result<&MeanfieldConfig> {
        self.meanfield.as_ref().ok_or_else(|| missing("meanfield"))
    }

    pub fn wasserstein(&self) -> Result<&WassersteinConfig> {
        self.wasserstein.as_ref().ok_or_else(|| missing("wasserstein"))
    }

    fn initial_section(&self) -> Result<&InitialConfig> {
        self.initial.as_ref().ok_or_else(|| missing("initial"))
    }

    /// The sampler distribution, for experiments that draw several sizes or seeds.
    pub fn distribution(&self) -> Result<&Distribution> {
        self.initial_section()?
            .sampler
            .as_ref()
            .ok_or_else(|| Error::Config("missing field `initial.sampler`".into()))
    }

    /// The initial state, read from file or drawn from the sampler.
    pub fn initial_state(&self) -> Result<ParticleState> {
        let init = self.initial_section()?;
        if let Some(path) = &init.path {
            return io::read_state_csv(path);
        }
        let n = init
            .n
            .ok_or_else(|| Error::Config("missing field `initial.n`".into()))?;
        InitialSampler {
            distribution: self.distribution()?.clone(),
            seed: init
                .seed
                .ok_or_else(|| Error::Config("missing field `initial.seed`".into()))?,
        }
        .sample(n)
    }

    pub fn suite_options(&self) -> SuiteOptions {
        self.suite.clone().unwrap_or_default()
    }

    /// Output directory: the override, else `[output].dir`, else `./out`.
    pub fn output_dir(&self, override_dir: Option<&Path>) -> PathBuf {
        override_dir
            .map(Path::to_path_buf)
            .or_else(|| self.output.as_ref().map(|o| o.dir.clone()))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFERENCE: &str = r#"
version = 1

[model]
lambda_w = 1.0
lambda_x = 0.1
lambda_v = 10.0

[kernel]
family = "constant"
c = 1.0

[initial]
n = 8
seed = 3
sampler = { distribution = "uniform_box", position_lo = [-1.0], position_hi = [1.0], velocity_lo = [-1.0], velocity_hi = [1.0] }

[integration]
dt = 1e-3
t_end = 1.0
record_every = 10
"#;

    #[test]
    fn reference_parses() {
        let c = RunConfig::parse(REFERENCE).unwrap();
        c.validate().unwrap();
        assert_eq!(c.model().unwrap().lambda_v, 10.0);
        assert_eq!(c.initial_state().unwrap().n(), 8);
        assert_eq!(c.suite_options(), SuiteOptions::default());
    }

    #[test]
    fn missing_kernel_field_is_named() {
        let text = REFERENCE.replace("c = 1.0", "");
        let msg = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(msg.contains("missing field `c`"), "{msg}");
        let text = REFERENCE.replace("family = \"constant\"\n", "");
        let msg = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(msg.contains("family"), "{msg}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        for (from, to) in [
            ("dt = 1e-3", "dt = 0.0"),
            ("t_end = 1.0", "t_end = 1e-4"),
            ("lambda_w = 1.0", "lambda_w = -1.0"),
            ("c = 1.0", "c = -1.0"),
            ("record_every = 10", "record_every = 0"),
        ] {
            let c = RunConfig::parse(&REFERENCE.replace(from, to)).unwrap();
            assert!(c.validate().is_err(), "{to}");
        }
        assert!(RunConfig::parse(&REFERENCE.replace("version = 1", "version = 2")).is_err());
        assert!(RunConfig::parse(&format!("{REFERENCE}\nbogus = 1\n")).is_err());
    }

    #[test]
    fn relative_paths_resolve_against_config() {
        let dir = tempfile::tempdir().unwrap();
        let state = ParticleState::new(0.0, 1, vec![0.0, 1.0], vec![0.0, 0.0]).unwrap();
        io::write_state_csv(&dir.path().join("init.csv"), &state).unwrap();
        let text = "version = 1\n[initial]\npath = \"init.csv\"\n[output]\ndir = \"res\"\n";
        let cfg = dir.path().join("run.toml");
        std::fs::write(&cfg, text).unwrap();
        let c = RunConfig::load(&cfg).unwrap();
        assert_eq!(c.initial_state().unwrap(), state);
        assert_eq!(c.output_dir(None), dir.path().join("res"));
        assert!(matches!(c.model(), Err(Error::Config(m)) if m.contains("`model`")));
        std::fs::write(&cfg, "version = 1\n[initial]\npath = \"nope.csv\"\n").unwrap();
        assert!(RunConfig::load(&cfg).is_err());
    }
}
