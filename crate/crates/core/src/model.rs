//! The trained two-stage pipeline: training, synthesis and reconstruction.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::{ImageTensor, SIDE};
use crate::error::{Error, Result};
use crate::forest::{Conditioning, ForestParams, RandomForest};
use crate::linalg::SeededRng;
use crate::pca::{fit_pca, Coefficients, PcaBasis};
use crate::sampler::{
    draw_inlier, fit_clusters, fit_stats, ClusterModel, GaussianStats, OutlierMethod,
};
use crate::stage1::{
    fit_stage1, forward_stage1, inverse_stage1, AcTensor, DcMap, Stage1Model, AC_PER_BLOCK,
    POSITIONS,
};

/// Subset of the stage-1 AC indices 1..=15 kept at synthesis and reconstruction.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct AcMask(u16);

impl AcMask {
    const VALID: u16 = 0xfffe;

    pub fn all() -> Self {
        AcMask(Self::VALID)
    }

    pub fn none() -> Self {
        AcMask(0)
    }

    /// Bit `i` stands for AC index `i`; bit 0 must be clear.
    pub fn from_bits(bits: u16) -> Result<Self> {
        if bits & !Self::VALID != 0 {
            return Err(Error::InvalidParameter(format!(
                "mask bits {bits:#06x} outside indices 1..=15"
            )));
        }
        Ok(AcMask(bits))
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn contains(self, index: usize) -> bool {
        (1..=AC_PER_BLOCK).contains(&index) && self.0 & (1 << index) != 0
    }

    pub fn with(self, index: usize) -> Result<Self> {
        if !(1..=AC_PER_BLOCK).contains(&index) {
            return Err(Error::InvalidParameter(format!(
                "AC index {index} outside 1..=15"
            )));
        }
        Ok(AcMask(self.0 | (1 << index)))
    }

    pub fn indices(self) -> impl Iterator<Item = usize> {
        (1..=AC_PER_BLOCK).filter(move |&i| self.contains(i))
    }

    pub fn is_subset_of(self, other: AcMask) -> bool {
        self.0 & !other.0 == 0
    }

    /// Zeroes the AC coefficients outside the mask.
    pub fn apply(self, ac: &mut AcTensor) {
        for row in ac.0.iter_mut() {
            for (i, p) in row.iter_mut().enumerate() {
                if !self.contains(i + 1) {
                    *p = 0.0;
                }
            }
        }
    }
}

impl Default for AcMask {
    fn default() -> Self {
        Self::all()
    }
}

impl fmt::Debug for AcMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.indices()).finish()
    }
}

/// Parses lists like `1-8`, `9-15` or `1,3,5-7`.
impl FromStr for AcMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("invalid AC mask {s:?}"));
        let mut mask = AcMask::none();
        for part in s.split(',').map(str::trim) {
            let (lo, hi) = match part.split_once('-') {
                Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
                None => {
                    let v: usize = part.parse().map_err(|_| bad())?;
                    (v, v)
                }
            };
            if lo > hi {
                return Err(bad());
            }
            for i in lo..=hi {
                mask = mask.with(i)?;
            }
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Stage-2 spectral dimension, DC included: the latent holds p_0..p_{K-1}.
    pub spectral_dim: usize,
    pub ac_mask: AcMask,
    pub forest: ForestParams,
    pub conditioning: Conditioning,
    pub outlier: OutlierMethod,
    pub clusters: usize,
    pub max_attempts: usize,
    pub seed: u64,
    /// Nearest-neighbour 16→32 upsampling of synthesized images.
    pub upsample: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            spectral_dim: 12,
            ac_mask: AcMask::all(),
            forest: ForestParams::default(),
            conditioning: Conditioning::DcMap,
            outlier: OutlierMethod::ZScore,
            clusters: 10,
            max_attempts: 1000,
            seed: 0,
            upsample: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=POSITIONS).contains(&self.spectral_dim) {
            return Err(Error::InvalidParameter(format!(
                "stage-2 spectral dimension {} outside 1..={POSITIONS}",
                self.spectral_dim
            )));
        }
        if self.clusters == 0 || self.max_attempts == 0 {
            return Err(Error::InvalidParameter(
                "clusters and max_attempts must be positive".into(),
            ));
        }
        self.forest.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeModel {
    pub config: ModelConfig,
    pub label: u8,
    pub stage1: Stage1Model,
    /// DC-map basis keeping `spectral_dim - 1` AC kernels.
    pub stage2: PcaBasis,
    pub forest: RandomForest,
    pub stats: GaussianStats,
    pub clusters: ClusterModel,
}

/// Synthesis-time overrides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisOptions {
    pub ac_mask: AcMask,
    pub upsample: bool,
}

/// Training-time byproducts, handy for summaries.
#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub images: usize,
    pub stage1_energy: Vec<f64>,
    pub stage2_energy: f64,
    pub stage2_retained: f64,
    pub degenerate_positions: Vec<usize>,
}

impl GenerativeModel {
    /// Fits every component on one class of preprocessed 16×16 images.
    pub fn train(
        images: &ImageTensor,
        label: u8,
        config: ModelConfig,
        rng: &SeededRng,
    ) -> Result<(GenerativeModel, TrainingReport)> {
        config.validate()?;
        let stage1 = fit_stage1(images).map_err(|e| e.in_stage("stage 1"))?;

        let mut dcs = Vec::with_capacity(images.count);
        let mut acs = Vec::with_capacity(images.count);
        for img in images.iter() {
            let (dc, ac) = forward_stage1(&stage1, img)?;
            dcs.push(dc);
            acs.push(ac);
        }

        let forest = RandomForest::fit(&dcs, &acs, config.forest, config.conditioning, &rng.fork(1))
            .map_err(|e| e.in_stage("forest"))?;

        let dc_vectors: Vec<&[f64]> = dcs.iter().map(|d| &d.0[..]).collect();
        let stage2 = fit_pca(&dc_vectors, POSITIONS - 1)
            .and_then(|b| b.truncated(config.spectral_dim - 1))
            .map_err(|e| e.in_stage("stage 2"))?;

        let latents: Vec<Vec<f64>> = dcs
            .iter()
            .map(|d| stage2.forward(&d.0).map(|c| c.0))
            .collect::<Result<_>>()?;
        let stats = fit_stats(&latents).map_err(|e| e.in_stage("latent statistics"))?;
        let clusters = fit_clusters(&latents, config.clusters, &mut rng.fork(2))
            .map_err(|e| e.in_stage("latent clusters"))?;

        let report = TrainingReport {
            images: images.count,
            stage1_energy: stage1
                .bases()
                .iter()
                .map(|b| b.eigenvalues().iter().sum())
                .collect(),
            stage2_energy: stage2.eigenvalues().iter().sum(),
            stage2_retained: stage2.eigenvalues()[..stage2.kept()].iter().sum(),
            degenerate_positions: stage1
                .bases()
                .iter()
                .enumerate()
                .filter(|(_, b)| b.eigenvalues().iter().all(|&e| e == 0.0))
                .map(|(k, _)| k)
                .collect(),
        };
        Ok((
            GenerativeModel {
                config,
                label,
                stage1,
                stage2,
                forest,
                stats,
                clusters,
            },
            report,
        ))
    }

    pub fn default_options(&self) -> SynthesisOptions {
        SynthesisOptions {
            ac_mask: self.config.ac_mask,
            upsample: self.config.upsample,
        }
    }

    pub fn synthesize(&self, rng: &mut SeededRng, n: usize) -> Result<ImageTensor> {
        self.synthesize_with(rng, n, &self.default_options())
    }

    pub fn synthesize_with(
        &self,
        rng: &mut SeededRng,
        n: usize,
        options: &SynthesisOptions,
    ) -> Result<ImageTensor> {
        self.synthesize_latents(rng, n, options).map(|(images, _)| images)
    }

    /// Synthesizes `n` images, also returning the accepted latent vectors.
    pub fn synthesize_latents(
        &self,
        rng: &mut SeededRng,
        n: usize,
        options: &SynthesisOptions,
    ) -> Result<(ImageTensor, Vec<Vec<f64>>)> {
        let side = if options.upsample { 2 * SIDE } else { SIDE };
        let mut pixels = Vec::with_capacity(n * side * side);
        let mut latents = Vec::with_capacity(n);
        for _ in 0..n {
            let draw = draw_inlier(
                &self.stats,
                &self.clusters,
                rng,
                self.config.outlier,
                self.config.max_attempts,
            )?;
            let image = self.decode(&draw.vector, options.ac_mask)?;
            if options.upsample {
                pixels.extend(upsample(&image));
            } else {
                pixels.extend(image);
            }
            latents.push(draw.vector);
        }
        Ok((ImageTensor::new(n, side, side, pixels)?, latents))
    }

    /// Latent → DC map → predicted AC → clamped 16×16 image.
    pub fn decode(&self, latent: &[f64], mask: AcMask) -> Result<Vec<f64>> {
        let dc_vec = self.stage2.inverse(&Coefficients(latent.to_vec()))?;
        let mut dc = [0.0; POSITIONS];
        dc.copy_from_slice(&dc_vec);
        let dc = DcMap(dc);
        let mut ac = self.forest.predict_all(&dc)?;
        mask.apply(&mut ac);
        let mut image = inverse_stage1(&self.stage1, &dc, &ac)?;
        image.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        Ok(image)
    }

    /// Encodes and decodes `image` through both stages with the true AC
    /// projections (masked by the configured mask). No clamping.
    pub fn reconstruct(&self, image: &[f64]) -> Result<Vec<f64>> {
        self.reconstruct_masked(image, self.config.ac_mask)
    }

    pub fn reconstruct_masked(&self, image: &[f64], mask: AcMask) -> Result<Vec<f64>> {
        let (dc, mut ac) = forward_stage1(&self.stage1, image)?;
        let coded = self.stage2.inverse(&self.stage2.forward(&dc.0)?)?;
        let mut dc_hat = [0.0; POSITIONS];
        dc_hat.copy_from_slice(&coded);
        mask.apply(&mut ac);
        inverse_stage1(&self.stage1, &DcMap(dc_hat), &ac)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GenerativeModel> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        GenerativeModel::from_bytes(&bytes)
    }
}

/// Nearest-neighbour 2× upsampling of a 16×16 image.
pub fn upsample(image: &[f64]) -> Vec<f64> {
    let side = 2 * SIDE;
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            out[r * side + c] = image[(r / 2) * SIDE + c / 2];
        }
    }
    out
}
