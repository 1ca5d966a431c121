//! Patch-grid rasters of the selected tokens, written as binary PGM.

use std::path::{Path, PathBuf};

use crate::adapter::SelectedFeatures;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One cell per patch, raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMap {
    pub grid: usize,
    /// Prompt-attention mass of selected cells scaled to a maximum of 1;
    /// unselected cells are 0.
    pub mass: Vec<f32>,
    pub mask: Vec<bool>,
}

impl SelectionMap {
    /// `attention` is the prompt attention `[H × n_p × n_sel]` of the fusion
    /// module that read `sel`; without it every selected cell gets mass 1.
    pub fn new(grid: usize, sel: &SelectedFeatures, attention: Option<&Tensor>) -> Result<Self> {
        let cells = grid * grid;
        if sel.indices.iter().any(|&i| i >= cells) {
            return Err(Error::contract(format!(
                "selected index outside the {grid}×{grid} patch grid"
            )));
        }
        let weights = match attention {
            Some(a) => {
                let &[_, _, m] = a.shape() else {
                    return Err(Error::contract("prompt attention must be [H × n_p × n_sel]"));
                };
                if m != sel.len() {
                    return Err(Error::dims("selection map", a.shape(), &[sel.len()]));
                }
                let mut w = vec![0f32; m];
                for row in a.data().chunks_exact(m) {
                    for (acc, &p) in w.iter_mut().zip(row) {
                        *acc += p;
                    }
                }
                w
            }
            None => vec![1.0; sel.len()],
        };
        let top = weights.iter().copied().fold(0f32, f32::max);
        let mut mass = vec![0f32; cells];
        let mut mask = vec![false; cells];
        for (&i, &w) in sel.indices.iter().zip(&weights) {
            mass[i] = if top > 0.0 { w / top } else { 0.0 };
            mask[i] = true;
        }
        Ok(SelectionMap { grid, mass, mask })
    }

    pub fn on_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn mass_pgm(&self) -> Vec<u8> {
        pgm(self.grid, self.mass.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    }

    pub fn mask_pgm(&self) -> Vec<u8> {
        pgm(self.grid, self.mask.iter().map(|&on| if on { 255 } else { 0 }))
    }
}

fn pgm(grid: usize, pixels: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("P5\n{grid} {grid}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

/// `<stem>_mask.pgm` next to `path`.
pub fn mask_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}_mask.pgm"))
}

/// Writes the mass raster to `out` and the mask raster to [`mask_path`].
pub fn export_selection_map(
    grid: usize,
    sel: &SelectedFeatures,
    attention: Option<&Tensor>,
    out: &Path,
) -> Result<SelectionMap> {
    let map = SelectionMap::new(grid, sel, attention)?;
    std::fs::write(out, map.mass_pgm())?;
    std::fs::write(mask_path(out), map.mask_pgm())?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sel(indices: Vec<usize>) -> SelectedFeatures {
        let n = indices.len();
        SelectedFeatures {
            layer_index: 1,
            indices,
            keys: Tensor::zeros(&[1, n, 2]),
            values: Tensor::zeros(&[1, n, 2]),
        }
    }

    #[test]
    fn mass_is_normalized_and_masked() {
        let attn = Tensor::new(vec![0.2, 0.8, 0.6, 0.4], &[1, 2, 2]).unwrap();
        let map = SelectionMap::new(2, &sel(vec![1, 2]), Some(&attn)).unwrap();
        assert_eq!(map.mask, [false, true, true, false]);
        assert_eq!(map.mass[0], 0.0);
        assert!((map.mass[1] - 2.0 / 3.0).abs() < 1e-6);
        assert_eq!(map.mass[2..], [1.0, 0.0]);
        assert_eq!(&map.mask_pgm()[..11], b"P5\n2 2\n255\n");
        assert_eq!(&map.mask_pgm()[11..], [0, 255, 255, 0]);
    }

    #[test]
    fn mask_name() {
        assert_eq!(mask_path(Path::new("out/map.pgm")), Path::new("out/map_mask.pgm"));
    }
}
