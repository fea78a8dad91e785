use ndarray::{Array2, Array3};

use crate::error::{config_err, Result};

/// Latent feature map, `height × width × channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub values: Array3<f64>,
}

impl LatentGrid {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

/// Row-major sequence of flattened `patch × patch × channels` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTokens {
    pub tokens: Array2<f64>,
    pub patch_size: usize,
    /// Shape of the grid the tokens came from.
    pub grid: (usize, usize, usize),
}

impl LatentTokens {
    pub fn token_count(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn token_width(&self) -> usize {
        self.tokens.ncols()
    }
}

pub fn patchify(latent: &LatentGrid, patch: usize) -> Result<LatentTokens> {
    let (h, w, c) = latent.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(config_err(format!("latent {h}×{w} is not divisible into {patch}×{patch} patches")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut tokens = Array2::zeros((gh * gw, patch * patch * c));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = tokens.row_mut(gy * gw + gx);
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..c {
                        row[k] = latent.values[[gy * patch + py, gx * patch + px, ch]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(LatentTokens { tokens, patch_size: patch, grid: (h, w, c) })
}

pub fn unpatchify(tokens: &LatentTokens) -> Result<LatentGrid> {
    let (h, w, c) = tokens.grid;
    let p = tokens.patch_size;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(config_err("token grid is not divisible by the patch size"));
    }
    let (gh, gw) = (h / p, w / p);
    if tokens.tokens.dim() != (gh * gw, p * p * c) {
        return Err(config_err(format!(
            "token matrix {:?} does not match a {h}×{w}×{c} grid with patch {p}",
            tokens.tokens.dim()
        )));
    }
    let mut values = Array3::zeros((h, w, c));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = tokens.tokens.row(gy * gw + gx);
            let mut k = 0;
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        values[[gy * p + py, gx * p + px, ch]] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(LatentGrid { values })
}
