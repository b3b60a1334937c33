//! Position-dependent 4×4 block PCA over 16×16 images.
//!
//! Blocks are numbered in raster order, `k = 4·block_row + block_col`, and each
//! block is flattened row-major. Persistence relies on this order.

use rayon::prelude::*;

use crate::dataset::{ImageTensor, SIDE};
use crate::error::{Error, Result};
use crate::pca::{fit_pca, Coefficients, PcaBasis};

pub const BLOCK: usize = 4;
pub const BLOCKS_PER_SIDE: usize = SIDE / BLOCK;
pub const POSITIONS: usize = BLOCKS_PER_SIDE * BLOCKS_PER_SIDE;
pub const BLOCK_DIM: usize = BLOCK * BLOCK;
pub const AC_PER_BLOCK: usize = BLOCK_DIM - 1;

/// The 16 flattened blocks of one image.
pub type BlockGrid = [[f64; BLOCK_DIM]; POSITIONS];

/// DC projection of every block position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcMap(pub [f64; POSITIONS]);

/// AC projections p_1..p_15 of every block position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcTensor(pub [[f64; AC_PER_BLOCK]; POSITIONS]);

impl AcTensor {
    pub fn zeros() -> Self {
        AcTensor([[0.0; AC_PER_BLOCK]; POSITIONS])
    }
}

fn check_image(image: &[f64]) -> Result<()> {
    if image.len() != SIDE * SIDE {
        return Err(Error::shape(SIDE * SIDE, image.len()));
    }
    Ok(())
}

pub fn blockify(image: &[f64]) -> Result<BlockGrid> {
    check_image(image)?;
    let mut grid = [[0.0; BLOCK_DIM]; POSITIONS];
    for (k, block) in grid.iter_mut().enumerate() {
        let (br, bc) = (k / BLOCKS_PER_SIDE, k % BLOCKS_PER_SIDE);
        for r in 0..BLOCK {
            let row = (BLOCK * br + r) * SIDE + BLOCK * bc;
            block[r * BLOCK..(r + 1) * BLOCK].copy_from_slice(&image[row..row + BLOCK]);
        }
    }
    Ok(grid)
}

pub fn deblockify(grid: &BlockGrid) -> Vec<f64> {
    let mut image = vec![0.0; SIDE * SIDE];
    for (k, block) in grid.iter().enumerate() {
        let (br, bc) = (k / BLOCKS_PER_SIDE, k % BLOCKS_PER_SIDE);
        for r in 0..BLOCK {
            let row = (BLOCK * br + r) * SIDE + BLOCK * bc;
            image[row..row + BLOCK].copy_from_slice(&block[r * BLOCK..(r + 1) * BLOCK]);
        }
    }
    image
}

/// One full-rank PCA basis per block position.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Model {
    bases: Vec<PcaBasis>,
}

impl Stage1Model {
    pub fn from_bases(bases: Vec<PcaBasis>) -> Result<Self> {
        if bases.len() != POSITIONS {
            return Err(Error::shape(POSITIONS, bases.len()));
        }
        if let Some(b) = bases
            .iter()
            .find(|b| b.dim() != BLOCK_DIM || b.kept() != AC_PER_BLOCK)
        {
            return Err(Error::shape(
                format!("{BLOCK_DIM}-dim basis keeping {AC_PER_BLOCK}"),
                format!("{}-dim basis keeping {}", b.dim(), b.kept()),
            ));
        }
        Ok(Self { bases })
    }

    pub fn bases(&self) -> &[PcaBasis] {
        &self.bases
    }

    pub fn basis(&self, position: usize) -> &PcaBasis {
        &self.bases[position]
    }
}

/// Fits every position independently.
///
/// A position whose blocks carry no AC energy at all (e.g. a corner that never
/// receives ink) falls back to [`PcaBasis::degenerate`]; only when every position
/// is degenerate does fitting fail.
pub fn fit_stage1(images: &ImageTensor) -> Result<Stage1Model> {
    if images.height != SIDE || images.width != SIDE {
        return Err(Error::shape(
            format!("{SIDE}x{SIDE}"),
            format!("{}x{}", images.height, images.width),
        ));
    }
    if images.count == 0 {
        return Err(Error::Empty("stage 1 training images"));
    }
    let grids: Vec<BlockGrid> = images.iter().map(blockify).collect::<Result<_>>()?;
    let fitted: Vec<Result<PcaBasis>> = (0..POSITIONS)
        .into_par_iter()
        .map(|k| {
            let blocks: Vec<&[f64]> = grids.iter().map(|g| &g[k][..]).collect();
            fit_pca(&blocks, AC_PER_BLOCK)
        })
        .collect();

    let mut bases = Vec::with_capacity(POSITIONS);
    let mut degenerate = Vec::new();
    for (k, res) in fitted.into_iter().enumerate() {
        match res {
            Ok(b) => bases.push(b),
            Err(Error::DegenerateData) => {
                degenerate.push(k);
                bases.push(PcaBasis::degenerate(BLOCK_DIM)?);
            }
            Err(e) => {
                return Err(Error::Stage {
                    stage: "stage 1",
                    source: Box::new(Error::InvalidParameter(format!("position {k}: {e}"))),
                })
            }
        }
    }
    if degenerate.len() == POSITIONS {
        return Err(Error::DegeneratePositions(degenerate));
    }
    Stage1Model::from_bases(bases)
}

pub fn forward_stage1(model: &Stage1Model, image: &[f64]) -> Result<(DcMap, AcTensor)> {
    let grid = blockify(image)?;
    let mut dc = [0.0; POSITIONS];
    let mut ac = AcTensor::zeros();
    for (k, block) in grid.iter().enumerate() {
        let c = model.bases[k].forward(block)?;
        dc[k] = c.dc();
        ac.0[k].copy_from_slice(c.ac());
    }
    Ok((DcMap(dc), ac))
}

pub fn inverse_stage1(model: &Stage1Model, dc: &DcMap, ac: &AcTensor) -> Result<Vec<f64>> {
    let mut grid = [[0.0; BLOCK_DIM]; POSITIONS];
    let mut coeffs = Vec::with_capacity(BLOCK_DIM);
    for (k, block) in grid.iter_mut().enumerate() {
        coeffs.clear();
        coeffs.push(dc.0[k]);
        coeffs.extend_from_slice(&ac.0[k]);
        let rec = model.bases[k].inverse(&Coefficients(coeffs.clone()))?;
        block.copy_from_slice(&rec);
    }
    Ok(deblockify(&grid))
}
