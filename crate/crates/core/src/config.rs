//! Run configuration: a TOML file with sections `grid`, `physics`, `omega`,
//! `targets`, `synthesis`, `ladder`, `output`, plus optional `geometry`,
//! `flow` and `steer` tuning.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flows::FlowConfig;
use crate::geometry::{Domain, GeometryConfig};
use crate::linear_control::SynthesisConfig;
use crate::solver::Physics;
use crate::spectral::SpectralField;
use crate::steering::{Forces, SteerParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub n: usize,
    /// Regularity index `m` of the error norms.
    pub m_max: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { n: 64, m_max: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsSection {
    pub nu: f64,
    pub tau: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
}

impl Default for PhysicsSection {
    fn default() -> Self {
        PhysicsSection { nu: 0.01, tau: 0.01, t_end: 1.0 }
    }
}

/// A field on the grid: a named preset or a snapshot file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Zero,
    /// Random mean-free field with `|k| <= radius`, scaled to the given
    /// `L^2` norm.
    Random { radius: f64, amplitude: f64, seed: u64 },
    /// `amplitude cos(k1 x1 + k2 x2 + phase)`.
    Mode { k1: i64, k2: i64, amplitude: f64, phase: f64 },
    File { path: PathBuf },
}

impl FieldSpec {
    /// Builds the field; relative paths resolve against `base`.
    pub fn build(&self, n: usize, base: &Path) -> Result<SpectralField> {
        match self {
            FieldSpec::Zero => Ok(SpectralField::zeros(n)),
            FieldSpec::Random { radius, amplitude, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let f = SpectralField::random_disk(n, *radius, 1.0, &mut rng);
                let norm = f.norm(0);
                if norm == 0.0 {
                    return Err(Error::Config(format!("no modes with |k| <= {radius}")));
                }
                Ok(f.scale(amplitude / norm))
            }
            FieldSpec::Mode { k1, k2, amplitude, phase } => Ok(SpectralField::mode(n, *k1, *k2, *amplitude, *phase)),
            FieldSpec::File { path } => {
                let p = if path.is_absolute() { path.clone() } else { base.join(path) };
                let f = crate::io::read_field(&p)?;
                if f.n() != n {
                    return Err(Error::GridMismatch(n, f.n()));
                }
                Ok(f)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetsSection {
    pub w0: FieldSpec,
    pub theta0: FieldSpec,
    #[serde(rename = "w_T")]
    pub w_t: FieldSpec,
    #[serde(rename = "theta_T")]
    pub theta_t: FieldSpec,
    /// Temperature target of a single temperature step.
    pub theta1: Option<FieldSpec>,
    /// Profile of the vorticity step.
    pub xi: Option<FieldSpec>,
    /// External forcing of the vorticity and temperature equations.
    pub phi_ext: Option<FieldSpec>,
    pub psi_ext: Option<FieldSpec>,
    pub epsilon: f64,
}

impl Default for TargetsSection {
    fn default() -> Self {
        TargetsSection {
            w0: FieldSpec::Zero,
            theta0: FieldSpec::Zero,
            w_t: FieldSpec::Zero,
            theta_t: FieldSpec::Zero,
            theta1: None,
            xi: None,
            phi_ext: None,
            psi_ext: None,
            epsilon: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderSection {
    pub deltas: Vec<f64>,
}

impl Default for LadderSection {
    fn default() -> Self {
        LadderSection { deltas: SteerParams::default().ladder }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub grid: GridSection,
    pub physics: PhysicsSection,
    pub omega: Domain,
    pub targets: TargetsSection,
    pub synthesis: SynthesisConfig,
    pub ladder: LadderSection,
    pub output: OutputSection,
    pub geometry: GeometryConfig,
    pub flow: FlowConfig,
    pub steer: SteerParams,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            grid: GridSection::default(),
            physics: PhysicsSection::default(),
            omega: Domain { a: 1.0, b: 3.0 },
            targets: TargetsSection::default(),
            synthesis: SynthesisConfig::default(),
            ladder: LadderSection::default(),
            output: OutputSection::default(),
            geometry: GeometryConfig::default(),
            flow: FlowConfig::default(),
            steer: SteerParams::default(),
        }
    }
}

/// Fields of a configuration, built at its grid size.
#[derive(Clone, Debug)]
pub struct Fields {
    pub w0: SpectralField,
    pub theta0: SpectralField,
    pub w_t: SpectralField,
    pub theta_t: SpectralField,
    pub theta1: Option<SpectralField>,
    pub xi: Option<SpectralField>,
    pub forces: Forces,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        crate::spectral::check_grid(self.grid.n)?;
        if self.grid.m_max < 1 {
            return Err(Error::Config("grid.m_max must be at least 1".into()));
        }
        if !(self.physics.nu >= 0.0 && self.physics.tau >= 0.0 && self.physics.t_end > 0.0) {
            return Err(Error::Config("physics needs nu, tau >= 0 and T > 0".into()));
        }
        if self.ladder.deltas.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
            return Err(Error::Config("ladder deltas must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn physics(&self) -> Physics {
        Physics { nu: self.physics.nu, tau: self.physics.tau }
    }

    /// Steering parameters with the ladder and `m` of this configuration.
    pub fn steer_params(&self) -> SteerParams {
        SteerParams { m: self.grid.m_max, ladder: self.ladder.deltas.clone(), ..self.steer.clone() }
    }

    pub fn fields(&self, base: &Path) -> Result<Fields> {
        let n = self.grid.n;
        let t = &self.targets;
        let opt = |f: &Option<FieldSpec>| f.as_ref().map(|s| s.build(n, base)).transpose();
        Ok(Fields {
            w0: t.w0.build(n, base)?,
            theta0: t.theta0.build(n, base)?,
            w_t: t.w_t.build(n, base)?,
            theta_t: t.theta_t.build(n, base)?,
            theta1: opt(&t.theta1)?,
            xi: opt(&t.xi)?,
            forces: Forces { phi: opt(&t.phi_ext)?, psi: opt(&t.psi_ext)? },
        })
    }
}
