//! Tiles, tile sets, the synthetic multi-region benchmark and the on-disk
//! tile directory format.

mod io;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{GramError, Result};

pub use io::{export_tile_directory, load_tile_directory, Manifest, ManifestRegion};
pub use synth::{generate_benchmark, generate_benchmark_relaxed, render_tile, source_region_specs, target_region_spec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    SourceVal,
    Target,
}

impl Split {
    pub fn requires_masks(self) -> bool {
        !matches!(self, Split::Target)
    }
}

/// Generator parameters for one region's settlement morphology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    /// Roof colour (RGB in `[0,1]`).
    pub base_hue: [f64; 3],
    /// Roof edge length in pixels.
    pub structure_size: f64,
    /// Fraction of grid cells inside a settlement that carry a roof.
    pub structure_density: f64,
    /// Maximum absolute rotation of the roof grid, degrees.
    pub orientation_jitter_deg: f64,
    pub noise_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub region_id: usize,
    pub name: String,
    /// Known for synthetic regions only.
    pub texture: Option<TextureParams>,
    pub slum_fraction: Option<f64>,
    /// For a synthetic target region: the two source regions it was blended from.
    pub blended_from: Option<(usize, usize)>,
}

impl RegionSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(f) = self.slum_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(GramError::config("slum_fraction", format!("{f} not in [0, 1]")));
            }
        }
        if let Some(t) = &self.texture {
            if t.structure_size < 2.0 {
                return Err(GramError::config("structure_size", "must be >= 2 px"));
            }
            if !(0.0..=1.0).contains(&t.structure_density) {
                return Err(GramError::config("structure_density", "must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// One square RGB tile. `image` is channel-major `[3, size, size]` in `[0,1]`;
/// `mask` is `[size, size]` with 1 = slum.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub tile_id: String,
    pub region_id: usize,
    pub size: usize,
    pub image: Vec<f32>,
    pub mask: Option<Vec<u8>>,
}

impl Tile {
    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    pub fn image_f64(&self) -> Vec<f64> {
        self.image.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn without_mask(&self) -> Tile {
        Tile {
            mask: None,
            ..self.clone()
        }
    }

    /// Mean colour per channel.
    pub fn mean_rgb(&self) -> [f64; 3] {
        let n = self.pixels();
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.image[c * n..(c + 1) * n].iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileSet {
    pub split: Split,
    pub regions: Vec<RegionSpec>,
    pub tiles: Vec<Tile>,
}

impl TileSet {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn tile_size(&self) -> Option<usize> {
        self.tiles.first().map(|t| t.size)
    }

    pub fn region_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.tiles.iter().map(|t| t.region_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Check the split's mask contract and shape consistency.
    pub fn validate(&self) -> Result<()> {
        for t in &self.tiles {
            if t.image.len() != 3 * t.pixels() {
                return Err(GramError::Shape(format!("tile {} image buffer has wrong size", t.tile_id)));
            }
            match &t.mask {
                Some(m) if m.len() != t.pixels() => {
                    return Err(GramError::Shape(format!("tile {} mask/image size mismatch", t.tile_id)));
                }
                None if self.split.requires_masks() => {
                    return Err(GramError::Usage(format!("tile {} in a source split has no mask", t.tile_id)));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Copy with every mask removed, for code paths that must never see labels.
    pub fn without_masks(&self) -> TileSet {
        TileSet {
            split: self.split,
            regions: self.regions.clone(),
            tiles: self.tiles.iter().map(Tile::without_mask).collect(),
        }
    }

    /// Move the last `per_region` tiles of every region into a validation split.
    pub fn split_holdout(&self, per_region: usize) -> Result<(TileSet, TileSet)> {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for id in self.region_ids() {
            let tiles: Vec<&Tile> = self.tiles.iter().filter(|t| t.region_id == id).collect();
            if tiles.len() <= per_region {
                return Err(GramError::config(
                    "val_tiles_per_region",
                    format!("region {id} has only {} tiles", tiles.len()),
                ));
            }
            let cut = tiles.len() - per_region;
            train.extend(tiles[..cut].iter().map(|t| (*t).clone()));
            val.extend(tiles[cut..].iter().map(|t| (*t).clone()));
        }
        Ok((
            TileSet {
                split: Split::SourceTrain,
                regions: self.regions.clone(),
                tiles: train,
            },
            TileSet {
                split: Split::SourceVal,
                regions: self.regions.clone(),
                tiles: val,
            },
        ))
    }
}
