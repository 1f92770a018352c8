//! Analytic-basis feature mapping and the linear classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, LinearLayer, LN_EPS};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Tape, Var};
use crate::SeededRng;

pub const DEFAULT_HIDDEN: usize = 512;
pub const DEFAULT_OUT_DIM: usize = 64;
pub const MAX_HARMONICS: usize = 3;
pub const BASE_BASES: [&str; 4] = ["identity", "square", "sin", "tanh"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KanConfig {
    pub hidden: usize,
    pub out_dim: usize,
    /// Extra harmonics `cos(n·h)` for `n = 1..=N` and `sin(n·h)` for
    /// `n = 2..=N`; `0` disables them.
    #[serde(default)]
    pub harmonics: usize,
}

impl Default for KanConfig {
    fn default() -> Self {
        Self { hidden: DEFAULT_HIDDEN, out_dim: DEFAULT_OUT_DIM, harmonics: 0 }
    }
}

impl KanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.out_dim == 0 {
            return Err(Error::Config("kan hidden and out_dim must be positive".into()));
        }
        if self.harmonics > MAX_HARMONICS {
            return Err(Error::Config(format!(
                "kan harmonics {} exceeds {MAX_HARMONICS}",
                self.harmonics
            )));
        }
        Ok(())
    }

    /// Number of basis groups in the expansion.
    pub fn num_bases(&self) -> usize {
        4 + if self.harmonics == 0 { 0 } else { 2 * self.harmonics - 1 }
    }

    pub fn basis_names(&self) -> Vec<String> {
        let mut names: Vec<String> = BASE_BASES.iter().map(|s| s.to_string()).collect();
        for n in 1..=self.harmonics {
            names.push(format!("cos{n}"));
        }
        for n in 2..=self.harmonics {
            names.push(format!("sin{n}"));
        }
        names
    }
}

/// `[h, h², sin h, tanh h]` concatenated along the last axis, followed by
/// any configured harmonics.
pub fn basis_expand(tape: &mut Tape, h: Var, harmonics: usize) -> Result<Var> {
    let axis = tape
        .shape(h)
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::dim("basis expansion needs at least one axis"))?;
    let mut parts = vec![h, tape.square(h)?, tape.sin(h)?, tape.tanh(h)?];
    for n in 1..=harmonics {
        let scaled = tape.scale(h, n as f64)?;
        parts.push(tape.cos(scaled)?);
    }
    for n in 2..=harmonics {
        let scaled = tape.scale(h, n as f64)?;
        parts.push(tape.sin(scaled)?);
    }
    tape.concat(&parts, axis)
}

#[derive(Clone, Debug)]
pub struct KanLayer {
    pub in_proj: LinearLayer,
    pub ln: LayerNorm,
    pub out_proj: LinearLayer,
    pub config: KanConfig,
}

impl KanLayer {
    pub fn new(store: &mut ParamStore, name: &str, flat_dim: usize, config: KanConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Head;
        Ok(Self {
            in_proj: LinearLayer::new(store, &format!("{name}.in_proj"), flat_dim, config.hidden, g, rng)?,
            ln: LayerNorm::new(store, &format!("{name}.ln"), config.hidden, g, LN_EPS)?,
            out_proj: LinearLayer::new(store, &format!("{name}.out_proj"), config.num_bases() * config.hidden, config.out_dim, g, rng)?,
            config,
        })
    }

    /// Hidden activation `silu(LN(in_proj(x)))`.
    pub fn hidden(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let p = self.in_proj.forward(tape, store, x)?;
        let n = self.ln.forward(tape, store, p)?;
        tape.silu(n)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden(tape, store, x)?;
        let phi = basis_expand(tape, h, self.config.harmonics)?;
        self.out_proj.forward(tape, store, phi)
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub linear: LinearLayer,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, classes: usize, rng: &mut SeededRng) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        Ok(Self { linear: LinearLayer::new(store, name, in_dim, classes, ParamGroup::Head, rng)? })
    }

    pub fn classes(&self) -> usize {
        self.linear.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Var> {
        self.linear.forward(tape, store, features)
    }
}
