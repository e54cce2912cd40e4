//! Synthetic scenes: smooth endmember spectra, abundances drawn uniformly on
//! the (optionally truncated) simplex, linear / Fan / generalized bilinear
//! mixing and additive white Gaussian noise.
//!
//! Every random draw comes from a ChaCha stream keyed by `(seed, purpose)`
//! with one stream per pixel, so results do not depend on thread count.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Result, UnmixError};
use crate::metrics::sam;
use crate::spectra::{AbundanceMatrix, EndmemberSet, HyperImage};

/// Minimum pairwise spectral angle between generated endmembers (radians).
pub const MIN_ENDMEMBER_SAM: f64 = 0.15;
const SPECTRUM_FLOOR: f64 = 0.05;
const SPECTRUM_CEIL: f64 = 1.0;
const MAX_REJECTIONS: usize = 100_000;

const STREAM_ENDMEMBERS: u64 = 0x656e_646d;
const STREAM_ABUNDANCES: u64 = 0x6162_756e;
const STREAM_NOISE: u64 = 0x6e6f_6973;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixingModel {
    Linear,
    Fan,
    GeneralizedBilinear,
}

impl fmt::Display for MixingModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixingModel::Linear => "lmm",
            MixingModel::Fan => "fm",
            MixingModel::GeneralizedBilinear => "gbm",
        })
    }
}

impl FromStr for MixingModel {
    type Err = UnmixError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lmm" | "linear" => Ok(MixingModel::Linear),
            "fm" | "fan" => Ok(MixingModel::Fan),
            "gbm" => Ok(MixingModel::GeneralizedBilinear),
            other => Err(UnmixError::Parse(format!("unknown mixing model {other:?}"))),
        }
    }
}

/// Generator configuration for one synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecipe {
    pub model: MixingModel,
    pub n_endmembers: usize,
    pub n_bands: usize,
    pub n_pixels: usize,
    pub sigma2: f64,
    /// GBM interaction coefficients for pairs `(i, j)`, `i < j`, in
    /// lexicographic order. Ignored by the other models.
    pub gamma: Vec<f64>,
    /// Upper bound on each abundance; `1.0` means no truncation.
    pub amax: f64,
    pub seed: u64,
}

impl SceneRecipe {
    /// Default desk-scale scene: N=2500, R=3, L=160, sigma2=1e-4 and GBM
    /// coefficients (0.9, 0.5, 0.3).
    pub fn desk(model: MixingModel, amax: f64, seed: u64) -> Self {
        Self {
            model,
            n_endmembers: 3,
            n_bands: 160,
            n_pixels: 2500,
            sigma2: 1e-4,
            gamma: vec![0.9, 0.5, 0.3],
            amax,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.n_endmembers;
        if r < 2 {
            return Err(UnmixError::InvalidArgument("R must be >= 2".into()));
        }
        if self.n_bands < r {
            return Err(UnmixError::InvalidArgument("L must be >= R".into()));
        }
        if self.n_pixels == 0 {
            return Err(UnmixError::InvalidArgument("N must be >= 1".into()));
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(UnmixError::InvalidArgument("sigma2 must be > 0".into()));
        }
        check_amax(self.amax, r)?;
        if self.model == MixingModel::GeneralizedBilinear {
            if self.gamma.len() != r * (r - 1) / 2 {
                return Err(UnmixError::InvalidArgument(format!(
                    "GBM needs {} gamma coefficients, got {}",
                    r * (r - 1) / 2,
                    self.gamma.len()
                )));
            }
            if self.gamma.iter().any(|g| !(0.0..=1.0).contains(g)) {
                return Err(UnmixError::InvalidArgument("GBM gamma must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Pairwise interaction coefficients actually used by [`mix`].
    pub fn interaction_coefficients(&self) -> Vec<f64> {
        let pairs = self.n_endmembers * (self.n_endmembers - 1) / 2;
        match self.model {
            MixingModel::Linear => vec![0.0; pairs],
            MixingModel::Fan => vec![1.0; pairs],
            MixingModel::GeneralizedBilinear => self.gamma.clone(),
        }
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("model", self.model.to_string()),
            ("r", self.n_endmembers.to_string()),
            ("l", self.n_bands.to_string()),
            ("n", self.n_pixels.to_string()),
            ("sigma2", format!("{:e}", self.sigma2)),
            (
                "gbm_gamma",
                self.gamma.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("amax", self.amax.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// A generated scene together with its ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: HyperImage,
    pub abundances: AbundanceMatrix,
    pub endmembers: EndmemberSet,
    pub recipe: SceneRecipe,
}

fn check_amax(amax: f64, r: usize) -> Result<()> {
    if !(amax > 0.0 && amax <= 1.0) || amax * (r as f64) < 1.0 {
        return Err(UnmixError::InvalidArgument(format!(
            "amax = {amax} is infeasible for R = {r} (need 1/R <= amax <= 1)"
        )));
    }
    Ok(())
}

fn stream_rng(seed: u64, purpose: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ purpose.rotate_left(32));
    rng.set_stream(stream);
    rng
}

/// Smooth nonnegative spectra built from 3 to 5 Gaussian bumps over the band
/// index, with values in `[0.05, 1.0]` and pairwise angles of at least
/// [`MIN_ENDMEMBER_SAM`].
pub fn synth_endmembers(r: usize, l: usize, seed: u64) -> Result<EndmemberSet> {
    if r < 2 {
        return Err(UnmixError::InvalidArgument("need at least two endmembers".into()));
    }
    if l < r {
        return Err(UnmixError::InvalidArgument("need L >= R".into()));
    }
    let mut rng = stream_rng(seed, STREAM_ENDMEMBERS, 0);
    let mut spectra = DMatrix::zeros(l, r);
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < r {
        attempts += 1;
        if attempts > MAX_REJECTIONS {
            return Err(UnmixError::Degenerate(format!(
                "could not draw {r} separated spectra over {l} bands"
            )));
        }
        let candidate = bump_spectrum(&mut rng, l);
        let separated = (0..accepted).all(|k| {
            let prev: Vec<f64> = spectra.column(k).iter().copied().collect();
            sam(&prev, &candidate).map(|a| a >= MIN_ENDMEMBER_SAM).unwrap_or(false)
        });
        if separated {
            for (i, v) in candidate.iter().enumerate() {
                spectra[(i, accepted)] = *v;
            }
            accepted += 1;
        }
    }
    EndmemberSet::new(spectra)
}

fn bump_spectrum(rng: &mut ChaCha20Rng, l: usize) -> Vec<f64> {
    let bumps = rng.random_range(3..=5);
    let span = l as f64;
    let params: Vec<(f64, f64, f64)> = (0..bumps)
        .map(|_| {
            let centre = rng.random_range(0.0..span);
            let width = rng.random_range(span / 20.0..span / 5.0).max(0.5);
            let height = rng.random_range(0.1..0.5);
            (centre, width, height)
        })
        .collect();
    let raw: Vec<f64> = (0..l)
        .map(|b| {
            let x = b as f64;
            SPECTRUM_FLOOR
                + params
                    .iter()
                    .map(|(c, w, h)| h * (-0.5 * ((x - c) / w).powi(2)).exp())
                    .sum::<f64>()
        })
        .collect();
    let peak = raw.iter().cloned().fold(f64::MIN, f64::max);
    if peak > SPECTRUM_CEIL {
        // squash the bump part so the peak lands on the ceiling
        let k = (SPECTRUM_CEIL - SPECTRUM_FLOOR) / (peak - SPECTRUM_FLOOR);
        raw.iter().map(|v| SPECTRUM_FLOOR + (v - SPECTRUM_FLOOR) * k).collect()
    } else {
        raw
    }
}

/// `N` rows drawn uniformly on `{a : sum a = 1, 0 <= a_r <= amax}`.
///
/// Uniform simplex points come from normalized exponential spacings; rows with
/// an entry above `amax` are rejected and redrawn from the same pixel stream.
pub fn sample_abundances(n: usize, r: usize, amax: f64, seed: u64) -> Result<AbundanceMatrix> {
    if r < 2 {
        return Err(UnmixError::InvalidArgument("need at least two endmembers".into()));
    }
    check_amax(amax, r)?;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, STREAM_ABUNDANCES, i as u64);
            loop {
                let e: Vec<f64> = (0..r)
                    .map(|_| -(1.0 - rng.random::<f64>()).ln())
                    .collect();
                let total: f64 = e.iter().sum();
                let mut a: Vec<f64> = e.iter().map(|v| v / total).collect();
                // put the rounding residue on the largest entry
                let resid = 1.0 - a.iter().sum::<f64>();
                let imax = argmax(&a);
                a[imax] += resid;
                if a.iter().all(|v| *v <= amax) {
                    break a;
                }
            }
        })
        .collect();
    let mut m = DMatrix::zeros(n, r);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    AbundanceMatrix::new(m)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Noise-free mixing of `abundances` (N x R) with `endmembers` (L x R).
///
/// LMM: `y = sum_r a_r m_r`; FM adds `sum_{i<j} a_i a_j (m_i * m_j)`; GBM
/// weights each cross term by `gamma_ij`.
pub fn mix(recipe: &SceneRecipe, abundances: &AbundanceMatrix, endmembers: &EndmemberSet) -> Result<HyperImage> {
    let a = abundances.values();
    let m = endmembers.spectra();
    let r = m.ncols();
    if a.ncols() != r || recipe.n_endmembers != r {
        return Err(UnmixError::Dimension(format!(
            "abundances have {} columns, endmembers {}, recipe R = {}",
            a.ncols(),
            r,
            recipe.n_endmembers
        )));
    }
    if recipe.model == MixingModel::GeneralizedBilinear && recipe.gamma.len() != r * (r - 1) / 2 {
        return Err(UnmixError::Dimension("GBM gamma length must be R(R-1)/2".into()));
    }
    let coeffs = recipe.interaction_coefficients();
    let mut y = a * m.transpose();
    let mut k = 0;
    for i in 0..r {
        for j in (i + 1)..r {
            let g = coeffs[k];
            k += 1;
            if g == 0.0 {
                continue;
            }
            let cross = m.column(i).component_mul(&m.column(j));
            for n in 0..a.nrows() {
                let w = g * a[(n, i)] * a[(n, j)];
                if w != 0.0 {
                    for b in 0..cross.len() {
                        y[(n, b)] += w * cross[b];
                    }
                }
            }
        }
    }
    HyperImage::new(y)
}

/// Adds i.i.d. `N(0, sigma2)` noise to every entry.
pub fn add_noise(img: &HyperImage, sigma2: f64, seed: u64) -> Result<HyperImage> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(UnmixError::InvalidArgument("sigma2 must be > 0".into()));
    }
    let normal = Normal::new(0.0, sigma2.sqrt()).expect("positive finite std");
    let px = img.pixels();
    let l = px.ncols();
    let rows: Vec<Vec<f64>> = (0..px.nrows())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, STREAM_NOISE, i as u64);
            (0..l).map(|b| px[(i, b)] + normal.sample(&mut rng)).collect()
        })
        .collect();
    let noisy = DMatrix::from_fn(px.nrows(), l, |i, b| rows[i][b]);
    match img.mean_spectrum() {
        None => HyperImage::new(noisy),
        Some(mean) => HyperImage::from_centered(noisy, mean.clone()),
    }
}

/// Runs the whole generator for a recipe.
pub fn generate(recipe: &SceneRecipe) -> Result<Scene> {
    recipe.validate()?;
    let endmembers = synth_endmembers(recipe.n_endmembers, recipe.n_bands, recipe.seed)?;
    let abundances = sample_abundances(recipe.n_pixels, recipe.n_endmembers, recipe.amax, recipe.seed)?;
    let clean = mix(recipe, &abundances, &endmembers)?;
    let image = add_noise(&clean, recipe.sigma2, recipe.seed)?;
    Ok(Scene {
        image,
        abundances,
        endmembers,
        recipe: recipe.clone(),
    })
}
