//! Tile directory format:
//!
//! ```text
//! root/manifest.json                     {"regions": [{"id", "name"}], "tile_size", "split"?}
//! root/tiles/<region_name>/<tile_id>.png 8-bit RGB
//! root/masks/<region_name>/<tile_id>.png 8-bit grayscale, 0 = non-slum, 255 = slum
//! ```
//!
//! `split` defaults to `source_train`. Source splits need a mask for every
//! tile; target directories may omit masks.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{RegionSpec, Split, Tile, TileSet};
use crate::error::{GramError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRegion {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub regions: Vec<ManifestRegion>,
    pub tile_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| GramError::io(dir, e))? {
        let path = entry.map_err(|e| GramError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_tile_directory(root: impl AsRef<Path>) -> Result<TileSet> {
    let root = root.as_ref();
    let manifest_path = root.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| GramError::load(&manifest_path, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| GramError::load(&manifest_path, format!("invalid manifest: {e}")))?;
    let split = manifest.split.unwrap_or(Split::SourceTrain);
    let size = manifest.tile_size;

    let mut seen = HashSet::new();
    for r in &manifest.regions {
        if !seen.insert(r.id) {
            return Err(GramError::load(&manifest_path, format!("duplicate region id {}", r.id)));
        }
        // Source regions index the gating networks, so ids must be 0..D.
        if split.requires_masks() && r.id >= manifest.regions.len() {
            return Err(GramError::load(
                &manifest_path,
                format!("unknown region id {} (expected ids 0..{})", r.id, manifest.regions.len()),
            ));
        }
    }
    let tiles_root = root.join("tiles");
    if let Ok(entries) = fs::read_dir(&tiles_root) {
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.path().is_dir() && !manifest.regions.iter().any(|r| r.name == name) {
                return Err(GramError::load(entry.path(), format!("region directory `{name}` not in manifest")));
            }
        }
    }

    let mut tiles = Vec::new();
    for region in &manifest.regions {
        let dir = tiles_root.join(&region.name);
        for path in list_pngs(&dir)? {
            let tile_id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let rgb = image::open(&path)
                .map_err(|e| GramError::load(&path, format!("cannot decode image: {e}")))?
                .to_rgb8();
            if rgb.width() as usize != size || rgb.height() as usize != size {
                return Err(GramError::load(
                    &path,
                    format!("image is {}x{}, manifest tile_size is {size}", rgb.width(), rgb.height()),
                ));
            }
            let n = size * size;
            let mut img = vec![0.0f32; 3 * n];
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    img[c * n + i] = f32::from(px[c]) / 255.0;
                }
            }
            let mask_path = root.join("masks").join(&region.name).join(format!("{tile_id}.png"));
            let mask = if mask_path.exists() {
                let gray = image::open(&mask_path)
                    .map_err(|e| GramError::load(&mask_path, format!("cannot decode mask: {e}")))?
                    .to_luma8();
                if gray.dimensions() != rgb.dimensions() {
                    return Err(GramError::load(
                        &mask_path,
                        format!("mask is {:?}, image is {:?}", gray.dimensions(), rgb.dimensions()),
                    ));
                }
                Some(gray.pixels().map(|p| u8::from(p[0] >= 128)).collect())
            } else if split.requires_masks() {
                return Err(GramError::load(&mask_path, "missing mask for tile in a source split"));
            } else {
                None
            };
            tiles.push(Tile {
                tile_id,
                region_id: region.id,
                size,
                image: img,
                mask,
            });
        }
    }
    tiles.sort_by(|a, b| (a.region_id, &a.tile_id).cmp(&(b.region_id, &b.tile_id)));
    let regions = manifest
        .regions
        .iter()
        .map(|r| RegionSpec {
            region_id: r.id,
            name: r.name.clone(),
            texture: None,
            slum_fraction: None,
            blended_from: None,
        })
        .collect();
    Ok(TileSet { split, regions, tiles })
}

/// Write a tile set in the directory format read by [`load_tile_directory`].
pub fn export_tile_directory(set: &TileSet, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    let size = set
        .tile_size()
        .ok_or_else(|| GramError::Usage("cannot export an empty tile set".into()))?;
    let used = set.region_ids();
    let regions: Vec<&RegionSpec> = set.regions.iter().filter(|r| used.contains(&r.region_id)).collect();
    let manifest = Manifest {
        regions: regions
            .iter()
            .map(|r| ManifestRegion {
                id: r.region_id,
                name: r.name.clone(),
            })
            .collect(),
        tile_size: size,
        split: Some(set.split),
    };
    fs::create_dir_all(root).map_err(|e| GramError::io(root, e))?;
    let manifest_path = root.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| GramError::io(&manifest_path, e))?;
    for r in &regions {
        let tdir = root.join("tiles").join(&r.name);
        let mdir = root.join("masks").join(&r.name);
        fs::create_dir_all(&tdir).map_err(|e| GramError::io(&tdir, e))?;
        fs::create_dir_all(&mdir).map_err(|e| GramError::io(&mdir, e))?;
    }
    for t in &set.tiles {
        let name = &set
            .regions
            .iter()
            .find(|r| r.region_id == t.region_id)
            .ok_or_else(|| GramError::Usage(format!("tile {} has unknown region {}", t.tile_id, t.region_id)))?
            .name;
        let n = t.pixels();
        let rgb = RgbImage::from_fn(t.size as u32, t.size as u32, |x, y| {
            let i = y as usize * t.size + x as usize;
            image::Rgb(std::array::from_fn(|c| (t.image[c * n + i] * 255.0).round() as u8))
        });
        let path = root.join("tiles").join(name).join(format!("{}.png", t.tile_id));
        rgb.save(&path).map_err(|e| GramError::load(&path, e.to_string()))?;
        if let Some(mask) = &t.mask {
            let gray = GrayImage::from_fn(t.size as u32, t.size as u32, |x, y| {
                image::Luma([mask[y as usize * t.size + x as usize] * 255])
            });
            let path = root.join("masks").join(name).join(format!("{}.png", t.tile_id));
            gray.save(&path).map_err(|e| GramError::load(&path, e.to_string()))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_benchmark;

    #[test]
    fn export_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (src, tgt) = generate_benchmark(1, 3, 16, 32).unwrap();
        export_tile_directory(&src, dir.path().join("source")).unwrap();
        export_tile_directory(&tgt, dir.path().join("target")).unwrap();
        let loaded = load_tile_directory(dir.path().join("source")).unwrap();
        assert_eq!(loaded.len(), 48);
        assert_eq!(loaded.split, Split::SourceTrain);
        // Synthetic images are quantized to 8-bit levels, so the round trip is exact.
        for (a, b) in src.tiles.iter().zip(&loaded.tiles) {
            assert_eq!(a.tile_id, b.tile_id);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.image, b.image);
        }
        let t = load_tile_directory(dir.path().join("target")).unwrap();
        assert_eq!(t.split, Split::Target);
        assert_eq!(t.tiles[0].region_id, 3);
    }

    fn write_manual(root: &Path, regions: &[(usize, &str)], tiles: &[(&str, &str, bool)]) {
        let manifest = Manifest {
            regions: regions
                .iter()
                .map(|&(id, name)| ManifestRegion { id, name: name.into() })
                .collect(),
            tile_size: 4,
            split: None,
        };
        fs::create_dir_all(root).unwrap();
        fs::write(root.join("manifest.json"), serde_json::to_string(&manifest).unwrap()).unwrap();
        for &(region, id, with_mask) in tiles {
            fs::create_dir_all(root.join("tiles").join(region)).unwrap();
            fs::create_dir_all(root.join("masks").join(region)).unwrap();
            RgbImage::from_pixel(4, 4, image::Rgb([10, 20, 30]))
                .save(root.join("tiles").join(region).join(format!("{id}.png")))
                .unwrap();
            if with_mask {
                GrayImage::from_fn(4, 4, |x, _| image::Luma([if x < 2 { 255 } else { 0 }]))
                    .save(root.join("masks").join(region).join(format!("{id}.png")))
                    .unwrap();
            }
        }
    }

    #[test]
    fn loads_two_regions_sorted() {
        let dir = tempfile::tempdir().unwrap();
        write_manual(
            dir.path(),
            &[(1, "b"), (0, "a")],
            &[("b", "t2", true), ("b", "t1", true), ("a", "t9", true), ("a", "t0", true), ("a", "t5", true), ("b", "t0", true)],
        );
        let set = load_tile_directory(dir.path()).unwrap();
        assert_eq!(set.len(), 6);
        let order: Vec<(usize, &str)> = set.tiles.iter().map(|t| (t.region_id, t.tile_id.as_str())).collect();
        assert_eq!(order, vec![(0, "t0"), (0, "t5"), (0, "t9"), (1, "t0"), (1, "t1"), (1, "t2")]);
        assert_eq!(set.tiles[0].mask.as_ref().unwrap()[..4], [1, 1, 0, 0]);
        assert!((set.tiles[0].image[0] - 10.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn missing_mask_in_source_split_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_manual(dir.path(), &[(0, "a")], &[("a", "t0", false)]);
        let err = load_tile_directory(dir.path()).unwrap_err();
        assert!(matches!(err, GramError::Load { ref path, .. } if path.ends_with("masks/a/t0.png")), "{err}");
    }

    #[test]
    fn missing_manifest_and_bad_ids() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_tile_directory(dir.path()), Err(GramError::Load { .. })));
        write_manual(dir.path(), &[(5, "a")], &[("a", "t0", true)]);
        assert!(matches!(load_tile_directory(dir.path()), Err(GramError::Load { .. })));
    }

    #[test]
    fn mask_dimension_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_manual(dir.path(), &[(0, "a")], &[("a", "t0", true)]);
        GrayImage::new(3, 4).save(dir.path().join("masks/a/t0.png")).unwrap();
        let err = load_tile_directory(dir.path()).unwrap_err();
        assert!(err.to_string().contains("masks/a/t0.png"));
    }
}
