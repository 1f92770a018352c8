//! Planted-structure synthetic EEG-like data.
//!
//! Each sample is `[C, S, P]`: `C` channels, `S` windows of `P` raw values.
//! Channels are split into contiguous communities. A sample of class `y`
//! carries a short (3-window) and a long (5-window) motif starting at a
//! random onset, written into every channel of one community with a
//! per-channel gain. Every community also receives a per-sample random
//! offset pattern shared by its channels, and everything sits on white
//! noise.
//!
//! With `nonlinear` set, the motif and community are chosen by the class
//! family `y / 2`, and the parity `y % 2` is `sign(sin ℓ)` of a latent
//! `ℓ` written linearly at the motif windows. Parity then needs a
//! non-monotone function of a linear feature.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Meta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{seeded, SeededRng};

pub const SHORT_MOTIF: usize = 3;
pub const LONG_MOTIF: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub sessions_per_subject: usize,
    pub trials_per_session: usize,
    pub channels: usize,
    pub windows: usize,
    pub raw_width: usize,
    pub classes: usize,
    pub communities: usize,
    pub noise: f64,
    pub motif_amp: f64,
    pub offset_amp: f64,
    pub latent_amp: f64,
    pub nonlinear: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 10,
            sessions_per_subject: 4,
            trials_per_session: 100,
            channels: 16,
            windows: 10,
            raw_width: 32,
            classes: 4,
            communities: 2,
            noise: 1.0,
            motif_amp: 1.0,
            offset_amp: 0.5,
            latent_amp: 0.7,
            nonlinear: true,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_subjects,
            self.sessions_per_subject,
            self.trials_per_session,
            self.channels,
            self.raw_width,
            self.classes,
            self.communities,
        ];
        if counts.contains(&0) {
            return Err(Error::Config(format!("synthetic generator counts must be positive: {self:?}")));
        }
        if self.channels < self.communities {
            return Err(Error::Config(format!(
                "{} channels cannot hold {} communities",
                self.channels, self.communities
            )));
        }
        if self.windows < LONG_MOTIF {
            return Err(Error::Config(format!("need at least {LONG_MOTIF} windows, got {}", self.windows)));
        }
        if self.nonlinear && self.classes % 2 != 0 {
            return Err(Error::Config("the nonlinear gate needs an even class count".into()));
        }
        if [self.noise, self.motif_amp, self.offset_amp, self.latent_amp].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("synthetic amplitudes must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn samples_per_subject(&self) -> usize {
        self.sessions_per_subject * self.trials_per_session
    }

    pub fn community_of(&self, channel: usize) -> usize {
        channel * self.communities / self.channels
    }

    /// Number of distinct motif templates.
    fn templates(&self) -> usize {
        if self.nonlinear {
            self.classes / 2
        } else {
            self.classes
        }
    }
}

fn gaussian(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector(p: usize, rng: &mut SeededRng) -> Vec<f64> {
    let v: Vec<f64> = (0..p).map(|_| gaussian(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm * (p as f64).sqrt()).collect()
}

/// Fixed random structure shared by every sample of one spec.
struct Plan {
    short: Vec<Vec<f64>>,
    long: Vec<Vec<f64>>,
    latent: Vec<f64>,
    offset_patterns: Vec<Vec<f64>>,
    gains: Vec<f64>,
}

/// Long-motif amplitude over its windows; the short motif is flat.
const LONG_ENVELOPE: [f64; LONG_MOTIF] = [0.5, 1.0, 1.0, 1.0, 0.5];

pub fn gen_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let p = spec.raw_width;
    let plan = Plan {
        short: (0..spec.templates()).map(|_| unit_vector(p, &mut rng)).collect(),
        long: (0..spec.templates()).map(|_| unit_vector(p, &mut rng)).collect(),
        latent: unit_vector(p, &mut rng),
        offset_patterns: (0..spec.communities).map(|_| unit_vector(p, &mut rng)).collect(),
        gains: (0..spec.channels).map(|_| rng.gen_range(0.5..1.5)).collect(),
    };

    let (c, s) = (spec.channels, spec.windows);
    let per_sample = c * s * p;
    let per_subject = spec.samples_per_subject();
    let total = spec.n_subjects * per_subject;
    let mut data = Vec::with_capacity(total * per_sample);
    let mut meta = Meta::new(spec.classes, vec![total, c, s, p]);
    let mut labels = Vec::with_capacity(total);

    for subject in 0..spec.n_subjects {
        let mut ys: Vec<usize> = (0..per_subject).map(|i| i % spec.classes).collect();
        ys.shuffle(&mut rng);
        for (k, &y) in ys.iter().enumerate() {
            let (template, gate) = if spec.nonlinear { (y / 2, Some(y % 2 == 1)) } else { (y, None) };
            let community = template % spec.communities;
            let onset = rng.gen_range(0..=s - LONG_MOTIF);
            let latent = gate.map(|g| sample_latent(g, &mut rng));
            let offsets: Vec<f64> = (0..spec.communities).map(|_| gaussian(&mut rng)).collect();

            let mut x = vec![0.0; per_sample];
            for v in x.iter_mut() {
                *v = spec.noise * gaussian(&mut rng);
            }
            for ch in 0..c {
                let g = spec.community_of(ch);
                let gain = plan.gains[ch];
                for w in 0..s {
                    let row = &mut x[(ch * s + w) * p..(ch * s + w + 1) * p];
                    for (r, o) in row.iter_mut().zip(&plan.offset_patterns[g]) {
                        *r += spec.offset_amp * offsets[g] * o;
                    }
                    if g != community || w < onset || w >= onset + LONG_MOTIF {
                        continue;
                    }
                    let tau = w - onset;
                    let short_env = if tau < SHORT_MOTIF { 1.0 } else { 0.0 };
                    for (i, r) in row.iter_mut().enumerate() {
                        let motif = short_env * plan.short[template][i] + LONG_ENVELOPE[tau] * plan.long[template][i];
                        *r += gain * spec.motif_amp * motif;
                        if let Some(l) = latent {
                            *r += gain * spec.latent_amp * (l / std::f64::consts::PI) * plan.latent[i];
                        }
                    }
                }
            }
            data.extend_from_slice(&x);
            labels.push(y);
            meta.push(subject as u32 + 1, (k / spec.trials_per_session) as u32 + 1, (k % spec.trials_per_session) as u32 + 1, onset, latent);
        }
    }
    meta.communities = (0..c).map(|ch| spec.community_of(ch)).collect();
    let samples = Tensor::new(vec![total, c, s, p], data)?;
    Dataset::new(samples, labels, meta)
}

/// `ℓ ∈ (0, π)` when `gate`, else `ℓ ∈ (−π/2, 0) ∪ (π, 3π/2)`, so the sign
/// of `sin ℓ` recovers the gate.
fn sample_latent(gate: bool, rng: &mut SeededRng) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI};
    let u: f64 = rng.gen_range(0.02..0.98);
    if gate {
        u * PI
    } else if rng.gen_bool(0.5) {
        -FRAC_PI_2 + u * FRAC_PI_2
    } else {
        PI + u * FRAC_PI_2
    }
}
