//! Laboratory configuration: TOML with sections, strict key checking,
//! validation, and the resolved context shared by all experiments.

use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::ControlError;
use crate::coupling::{CouplingError, CouplingMode};
use crate::noise::{AmplitudeRule, CylinderSpec, NoiseBasis, NoiseError};
use crate::solver::{ForcingProfile, SolverError, TimeFourierForcing};
use crate::spectral::{SpectralError, SpectralVelocity, WaveGrid};
use crate::transport::TransportError;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config file {0} not found or unreadable: {1}")]
    MissingFile(String, String),
    #[error("config schema: {0}")]
    Schema(String),
    #[error("config validation: {0}")]
    Validation(String),
    #[error("noise non-degeneracy: {0}")]
    NonDegeneracy(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("experiment: {0}")]
    Experiment(String),
}

impl LabError {
    /// Stable exit-code contract: 0 success, 1 verdict failure (handled by
    /// the dispatcher), 2 configuration error, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::MissingFile(..)
            | LabError::Schema(_)
            | LabError::Validation(_)
            | LabError::NonDegeneracy(_) => 2,
            _ => 3,
        }
    }
}

fn default_nu() -> f64 {
    1.5
}
fn default_k_max() -> u32 {
    8
}
fn default_dt() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConfig {
    pub nu: f64,
    pub k_max: u32,
    pub dt: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig {
            nu: default_nu(),
            k_max: default_k_max(),
            dt: default_dt(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForcingConfig {
    /// amplitude of the constant-in-time lowest-mode deterministic forcing
    pub amplitude: f64,
}

impl Default for ForcingConfig {
    fn default() -> Self {
        ForcingConfig { amplitude: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub j: usize,
    pub b0: f64,
    pub decay_s: f64,
    /// `[t_a, t_b, x_a, x_b, y_a, y_b]`
    pub cylinder: [f64; 6],
    /// explicit amplitudes override the power law when present
    pub explicit_b: Option<Vec<f64>>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let pi = std::f64::consts::PI;
        NoiseConfig {
            j: 64,
            b0: 0.3,
            decay_s: 1.0,
            cylinder: [0.25, 0.75, pi / 2.0, 1.5 * pi, pi / 2.0, 1.5 * pi],
            explicit_b: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoOrValue {
    Auto(String),
    Value(f64),
}

impl AutoOrValue {
    pub fn resolve(&self) -> Result<Option<f64>, LabError> {
        match self {
            AutoOrValue::Value(v) => Ok(Some(*v)),
            AutoOrValue::Auto(s) if s == "auto" => Ok(None),
            AutoOrValue::Auto(s) => Err(LabError::Schema(format!(
                "expected a number or \"auto\", got \"{s}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    /// contraction target of the nonlinear one-step map
    pub q: f64,
    /// contraction radius; "auto" calibrates from the remainder and the
    /// coupling TV window
    pub d: AutoOrValue,
    /// sweep lists: modes to penalize and ridge strengths (largest first)
    pub n_sweep: Vec<usize>,
    pub delta_max: f64,
    pub delta_min: f64,
    /// actuator count per sweep step: `m(N) = min(m_factor * N, J)`
    pub m_factor: usize,
    /// observability check parameters
    pub observability_n: usize,
    pub observability_m: Vec<usize>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            q: 0.25,
            d: AutoOrValue::Auto("auto".into()),
            n_sweep: vec![4, 8, 16, 32],
            delta_max: 1e-1,
            delta_min: 1e-9,
            m_factor: 4,
            observability_n: 8,
            observability_m: vec![16, 32, 64],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentsConfig {
    /// time step of the Monte-Carlo experiments (the solver default stays
    /// at `physics.dt` for accuracy-sensitive checks)
    pub dt: f64,
    pub mode: CouplingMode,
    pub burn_in: usize,
    pub pool_chains: usize,
    pub mixing_chains: usize,
    pub mixing_k_max: usize,
    pub recurrence_chains: usize,
    pub recurrence_horizon: usize,
    pub squeeze_chains: usize,
    pub squeeze_horizon: usize,
    pub coupling_samples: usize,
    /// pair-distance magnitudes for the coupling-inequality experiment;
    /// empty = auto-scale from the measured feedback gain
    pub coupling_magnitudes: Vec<f64>,
    pub tv_mc_draws: usize,
    pub stabilize_steps: usize,
    pub h2_epsilon: f64,
    pub h2_l_max: usize,
    pub h2_points: usize,
}

impl Default for ExperimentsConfig {
    fn default() -> Self {
        ExperimentsConfig {
            dt: 1e-2,
            mode: CouplingMode::Frozen,
            burn_in: 50,
            pool_chains: 16,
            mixing_chains: 300,
            mixing_k_max: 30,
            recurrence_chains: 500,
            recurrence_horizon: 200,
            squeeze_chains: 300,
            squeeze_horizon: 13,
            coupling_samples: 10_000,
            coupling_magnitudes: Vec::new(),
            tv_mc_draws: 100_000,
            stabilize_steps: 10,
            h2_epsilon: 0.02,
            h2_l_max: 40,
            h2_points: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct LabConfig {
    pub physics: PhysicsConfig,
    pub forcing: ForcingConfig,
    pub noise: NoiseConfig,
    pub control: ControlConfig,
    pub experiments: ExperimentsConfig,
}

impl LabConfig {
    pub fn parse_file(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::MissingFile(path.display().to_string(), e.to_string()))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self, LabError> {
        let cfg: LabConfig =
            toml::from_str(text).map_err(|e| LabError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        let p = &self.physics;
        if !(p.nu > 0.0) {
            return Err(LabError::Validation(format!(
                "physics.nu must be positive, got {}",
                p.nu
            )));
        }
        if !(1..=64).contains(&p.k_max) {
            return Err(LabError::Validation(format!(
                "physics.k_max must be in 1..=64, got {}",
                p.k_max
            )));
        }
        for (dt, key) in [(p.dt, "physics.dt"), (self.experiments.dt, "experiments.dt")] {
            crate::solver::steps_for(dt).map_err(|e| {
                LabError::Validation(format!("{key} = {dt} invalid: {e}"))
            })?;
        }
        let n = &self.noise;
        if n.j == 0 || n.j > 256 {
            return Err(LabError::Validation(format!(
                "noise.j must be in 1..=256, got {}",
                n.j
            )));
        }
        let [ta, tb, xa, xb, ya, yb] = n.cylinder;
        CylinderSpec {
            t: (ta, tb),
            x: (xa, xb),
            y: (ya, yb),
        }
        .validate()
        .map_err(|e| LabError::Validation(format!("noise.cylinder: {e}")))?;
        // non-degeneracy: every actuator index needs a nonzero amplitude
        let m_max = self
            .control
            .n_sweep
            .iter()
            .map(|&nn| (self.control.m_factor * nn).min(n.j))
            .max()
            .unwrap_or(0);
        let amps = self.amplitude_rule().amplitudes_preview(n.j)?;
        for (idx, b) in amps.iter().enumerate().take(m_max) {
            if *b == 0.0 {
                return Err(LabError::NonDegeneracy(format!(
                    "amplitude b_{} is zero but indices 1..={m_max} drive the feedback; \
                     all active amplitudes must be nonzero",
                    idx + 1
                )));
            }
        }
        let c = &self.control;
        if !(0.0 < c.q && c.q < 1.0) {
            return Err(LabError::Validation(format!(
                "control.q must be in (0,1), got {}",
                c.q
            )));
        }
        if let Some(d) = c.d.resolve()? {
            if !(d > 0.0) {
                return Err(LabError::Validation(format!(
                    "control.d must be positive, got {d}"
                )));
            }
        }
        if c.n_sweep.is_empty() || c.delta_min <= 0.0 || c.delta_min > c.delta_max {
            return Err(LabError::Validation(
                "control sweep lists must be nonempty with 0 < delta_min <= delta_max".into(),
            ));
        }
        Ok(())
    }

    pub fn amplitude_rule(&self) -> AmplitudeRuleExt {
        match &self.noise.explicit_b {
            Some(v) => AmplitudeRuleExt(AmplitudeRule::Explicit(v.clone())),
            None => AmplitudeRuleExt(AmplitudeRule::PowerLaw {
                b0: self.noise.b0,
                s: self.noise.decay_s,
            }),
        }
    }

    /// Canonical digest of the resolved configuration.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = toml::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        h.finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Build the resolved laboratory context.
    pub fn build(&self, master_seed: u64) -> Result<Lab, LabError> {
        self.validate()?;
        let grid = WaveGrid::new(self.physics.k_max)?;
        let [ta, tb, xa, xb, ya, yb] = self.noise.cylinder;
        let basis = NoiseBasis::build(
            &grid,
            CylinderSpec {
                t: (ta, tb),
                x: (xa, xb),
                y: (ya, yb),
            },
            self.noise.j,
            &self.amplitude_rule().0,
        )?;
        let h = if self.forcing.amplitude != 0.0 {
            let mut field = SpectralVelocity::zero(&grid);
            let amp = self.forcing.amplitude / 2.0f64.sqrt();
            for k in [[1, 0], [0, 1]] {
                let i = grid
                    .wavevectors()
                    .iter()
                    .position(|&kk| kk == k)
                    .expect("lowest modes exist");
                field.coeffs_mut()[i] = Complex64::new(amp * 0.5f64.sqrt(), 0.0);
            }
            ForcingProfile::zero().with(Arc::new(TimeFourierForcing::constant(field)))
        } else {
            ForcingProfile::zero()
        };
        Ok(Lab {
            cfg: self.clone(),
            digest: self.digest(),
            grid,
            basis,
            h,
            master_seed,
        })
    }
}

/// Wrapper so the config can preview amplitudes without building a basis.
pub struct AmplitudeRuleExt(pub AmplitudeRule);

impl AmplitudeRuleExt {
    fn amplitudes_preview(&self, count: usize) -> Result<Vec<f64>, LabError> {
        match &self.0 {
            AmplitudeRule::PowerLaw { b0, s } => {
                if *b0 < 0.0 || !b0.is_finite() || *s < 0.0 {
                    return Err(LabError::Validation(format!(
                        "noise power law needs b0 >= 0 and s >= 0, got b0={b0}, s={s}"
                    )));
                }
                Ok((1..=count).map(|j| b0 * (j as f64).powf(-s)).collect())
            }
            AmplitudeRule::Explicit(v) => {
                if v.len() != count {
                    return Err(LabError::Validation(format!(
                        "noise.explicit_b has {} entries, noise.j = {count}",
                        v.len()
                    )));
                }
                Ok(v.clone())
            }
        }
    }
}

/// Resolved context: grid, dictionary, deterministic forcing, seeds.
pub struct Lab {
    pub cfg: LabConfig,
    pub digest: String,
    pub grid: Arc<WaveGrid>,
    pub basis: Arc<NoiseBasis>,
    pub h: ForcingProfile,
    pub master_seed: u64,
}

impl Lab {
    pub fn nu(&self) -> f64 {
        self.cfg.physics.nu
    }

    pub fn dt_solver(&self) -> f64 {
        self.cfg.physics.dt
    }

    pub fn dt_experiments(&self) -> f64 {
        self.cfg.experiments.dt
    }

    /// Plateau radius of the scalar cutoff: the almost-sure bound on
    /// `||h + eta||_{H1(D_1)}` plus one.
    pub fn cutoff_r(&self) -> f64 {
        self.h.h1_norm_sq_d1(&self.grid).sqrt() + self.basis.amplitude_h1_sum() + 1.0
    }

    /// Almost-sure bound on `||h + eta||_{L2(D_1)}`.
    pub fn forcing_l2_bound(&self) -> f64 {
        self.h.l2_norm_sq_d1(&self.grid).sqrt() + self.basis.l2_sup_bound()
    }

    /// Radius of the invariant absorbing ball from the measured constants
    /// (`kappa = exp(-nu)`, `C1 = 1`).
    pub fn absorbing_radius(&self) -> f64 {
        let kappa = (-self.nu()).exp();
        2.0 * self.forcing_l2_bound() / (1.0 - kappa)
    }

    /// `m(N)` rule of the certificate sweep.
    pub fn m_of_n(&self, n: usize) -> usize {
        (self.cfg.control.m_factor * n).min(self.basis.len())
    }

    /// Geometric ridge-strength list of the sweep, largest first.
    pub fn delta_list(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut d = self.cfg.control.delta_max;
        while d >= self.cfg.control.delta_min * 0.999 {
            out.push(d);
            d /= 2.0;
        }
        out
    }
}
