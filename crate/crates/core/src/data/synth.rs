//! Procedural multi-region settlement tiles.
//!
//! A tile is smoothed coloured ground with sparse, large, axis-aligned formal
//! buildings. Settlement areas are blobs cut from a low-frequency noise field
//! at the quantile matching the tile's slum fraction; inside them the ground is
//! replaced by a dense rotated grid of small roofs separated by dark alleys.
//! Regions differ in roof colour, roof size, grid density, rotation spread and
//! noise level. The target region blends two source regions' parameters and
//! shifts the hue.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{RegionSpec, Split, TextureParams, Tile, TileSet};
use crate::error::{GramError, Result};
use crate::nn::{upsample_bilinear, Interp1d};
use crate::rng::{stream, streams, StreamRng};

const GROUND: [f64; 3] = [0.52, 0.47, 0.40];
const CONCRETE: [f64; 3] = [0.90, 0.90, 0.88];
const TARGET_HUE_SHIFT: f64 = 0.04;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn rgb_to_hsv(c: [f64; 3]) -> (f64, f64, f64) {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == c[0] {
        ((c[1] - c[2]) / delta).rem_euclid(6.0) / 6.0
    } else if max == c[1] {
        ((c[2] - c[0]) / delta + 2.0) / 6.0
    } else {
        ((c[0] - c[1]) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] * (1.0 - t) + b[0] * t,
        a[1] * (1.0 - t) + b[1] * t,
        a[2] * (1.0 - t) + b[2] * t,
    ]
}

/// Parameters for the `num_regions` source regions of a benchmark.
pub fn source_region_specs(seed: u64, num_regions: usize) -> Vec<RegionSpec> {
    (0..num_regions)
        .map(|i| {
            let mut rng = stream(seed, streams::DATA, &[0, i as u64]);
            let hue = i as f64 / num_regions as f64 + rng.random_range(-0.02..0.02);
            let base_hue = hsv_to_rgb(hue, rng.random_range(0.55..0.8), rng.random_range(0.6..0.85));
            RegionSpec {
                region_id: i,
                name: format!("region_{i}"),
                texture: Some(TextureParams {
                    base_hue,
                    structure_size: rng.random_range(2.5..5.0),
                    structure_density: rng.random_range(0.65..0.95),
                    orientation_jitter_deg: rng.random_range(0.0..40.0),
                    noise_amplitude: rng.random_range(0.04..0.12),
                }),
                slum_fraction: Some(rng.random_range(0.2..0.4)),
                blended_from: None,
            }
        })
        .collect()
}

/// The held-out target region: a convex blend of two source regions plus a
/// hue shift none of the sources has.
pub fn target_region_spec(seed: u64, sources: &[RegionSpec]) -> RegionSpec {
    let mut rng = stream(seed, streams::DATA, &[1]);
    let n = sources.len();
    let a = rng.random_range(0..n);
    let b = if n > 1 { (a + rng.random_range(1..n)) % n } else { a };
    let w = rng.random_range(0.4..0.6);
    let ta = sources[a].texture.as_ref().expect("synthetic source");
    let tb = sources[b].texture.as_ref().expect("synthetic source");
    let lerp = |x: f64, y: f64| w * x + (1.0 - w) * y;
    // Roof colour is blended in HSV along the shorter hue arc, so it stays
    // saturated and lies between the two parents rather than near a third region.
    let (ha, sa, va) = rgb_to_hsv(ta.base_hue);
    let (hb, sb, vb) = rgb_to_hsv(tb.base_hue);
    let dh = (hb - ha + 0.5).rem_euclid(1.0) - 0.5;
    let (h, s, v) = (ha + (1.0 - w) * dh, lerp(sa, sb), lerp(va, vb));
    RegionSpec {
        region_id: n,
        name: "target".into(),
        texture: Some(TextureParams {
            base_hue: hsv_to_rgb(h + TARGET_HUE_SHIFT, s, v),
            structure_size: lerp(ta.structure_size, tb.structure_size),
            structure_density: lerp(ta.structure_density, tb.structure_density),
            orientation_jitter_deg: lerp(ta.orientation_jitter_deg, tb.orientation_jitter_deg),
            noise_amplitude: lerp(ta.noise_amplitude, tb.noise_amplitude),
        }),
        slum_fraction: Some(lerp(
            sources[a].slum_fraction.unwrap_or(0.0),
            sources[b].slum_fraction.unwrap_or(0.0),
        )),
        blended_from: Some((a.min(b), a.max(b))),
    }
}

/// Smooth random field: `coarse x coarse` normals, bilinearly upsampled.
fn smooth_field(size: usize, coarse: usize, rng: &mut StreamRng) -> Vec<f64> {
    let grid: Vec<f64> = (0..coarse * coarse).map(|_| StandardNormal.sample(rng)).collect();
    let interp = Interp1d::new(coarse, size);
    upsample_bilinear(&grid, coarse, coarse, 1, &interp, &interp)
}

#[inline]
fn hash01(a: i64, b: i64, salt: u64) -> f64 {
    let mut x = salt ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// Render one tile. Returns the channel-major image (quantized to 8-bit
/// levels) and the mask.
pub fn render_tile(tex: &TextureParams, slum_fraction: f64, size: usize, rng: &mut StreamRng) -> (Vec<f32>, Vec<u8>) {
    let n = size * size;

    // Settlement mask from the top quantile of a two-octave field.
    let fraction = if slum_fraction > 0.0 {
        (slum_fraction * rng.random_range(0.25..1.75)).min(0.95)
    } else {
        0.0
    };
    let coarse = smooth_field(size, 4, rng);
    let fine = smooth_field(size, 8, rng);
    let field: Vec<f64> = coarse.iter().zip(&fine).map(|(a, b)| a + 0.5 * b).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[b].partial_cmp(&field[a]).expect("finite").then(a.cmp(&b)));
    let mut mask = vec![0u8; n];
    for &i in &order[..(fraction * n as f64).round() as usize] {
        mask[i] = 1;
    }

    // Ground with low-frequency colour variation.
    let amp = tex.noise_amplitude;
    let ground = mix(tex.base_hue, GROUND, 0.7);
    let tint: Vec<Vec<f64>> = (0..3).map(|_| smooth_field(size, 4, rng)).collect();
    let mut img = vec![0.0f64; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            img[c * n + i] = ground[c] + amp * tint[c][i];
        }
    }

    // Sparse formal buildings outside settlements.
    let formal = mix(tex.base_hue, CONCRETE, 0.6);
    let spacing = (tex.structure_size * 3.5).round() as usize;
    let side = (tex.structure_size * 2.0).round() as usize;
    let off_r = rng.random_range(0..spacing);
    let off_c = rng.random_range(0..spacing);
    let salt: u64 = rng.random();
    for r0 in (0..size + spacing).step_by(spacing) {
        for c0 in (0..size + spacing).step_by(spacing) {
            if hash01(r0 as i64, c0 as i64, salt ^ 0xF0F0) > 0.5 {
                continue;
            }
            let (r0, c0) = ((r0 + off_r) as isize - spacing as isize, (c0 + off_c) as isize - spacing as isize);
            for r in r0.max(0)..(r0 + side as isize).min(size as isize) {
                for c in c0.max(0)..(c0 + side as isize).min(size as isize) {
                    let i = r as usize * size + c as usize;
                    if mask[i] == 0 {
                        for ch in 0..3 {
                            img[ch * n + i] = formal[ch];
                        }
                    }
                }
            }
        }
    }

    // Dense rotated roof grid inside settlements.
    let theta = rng.random_range(-1.0..=1.0) * tex.orientation_jitter_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let pitch = tex.structure_size + 1.25;
    let (du, dv) = (rng.random_range(0.0..pitch), rng.random_range(0.0..pitch));
    let alley = mix(ground, [0.0; 3], 0.45);
    for r in 0..size {
        for c in 0..size {
            let i = r * size + c;
            if mask[i] == 0 {
                continue;
            }
            let (x, y) = (c as f64, r as f64);
            let u = cos * x - sin * y + du;
            let v = sin * x + cos * y + dv;
            let (cu, cv) = ((u / pitch).floor(), (v / pitch).floor());
            let (fu, fv) = (u - cu * pitch, v - cv * pitch);
            let on_roof = fu < tex.structure_size
                && fv < tex.structure_size
                && hash01(cu as i64, cv as i64, salt) < tex.structure_density;
            let colour = if on_roof {
                let shade = 0.85 + 0.3 * hash01(cu as i64, cv as i64, salt ^ 0xABCD);
                [tex.base_hue[0] * shade, tex.base_hue[1] * shade, tex.base_hue[2] * shade]
            } else {
                alley
            };
            for ch in 0..3 {
                img[ch * n + i] = colour[ch];
            }
        }
    }

    let image = img
        .iter()
        .map(|&v| {
            let noisy = v + amp * 0.5 * rng.random_range(-1.0..1.0);
            ((noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
        })
        .collect();
    (image, mask)
}

fn render_region(seed: u64, spec: &RegionSpec, count: usize, size: usize) -> Vec<Tile> {
    let tex = spec.texture.as_ref().expect("synthetic region");
    let fraction = spec.slum_fraction.unwrap_or(0.0);
    (0..count)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(seed, streams::DATA, &[2, spec.region_id as u64, t as u64]);
            let (image, mask) = render_tile(tex, fraction, size, &mut rng);
            Tile {
                tile_id: format!("{}_{t:04}", spec.name),
                region_id: spec.region_id,
                size,
                image,
                mask: Some(mask),
            }
        })
        .collect()
}

/// Generate `num_regions` labelled source regions and one blended target
/// region, `tiles_per_region` tiles each. A pure function of its arguments.
pub fn generate_benchmark(
    seed: u64,
    num_regions: usize,
    tiles_per_region: usize,
    tile_size: usize,
) -> Result<(TileSet, TileSet)> {
    if num_regions < 3 {
        return Err(GramError::config("num_regions", format!("must be >= 3, got {num_regions}")));
    }
    if tiles_per_region < 16 {
        return Err(GramError::config(
            "tiles_per_region",
            format!("must be >= 16, got {tiles_per_region}"),
        ));
    }
    if ![32, 64, 128].contains(&tile_size) {
        return Err(GramError::config(
            "tile_size",
            format!("must be one of 32, 64, 128, got {tile_size}"),
        ));
    }
    generate_benchmark_relaxed(seed, num_regions, tiles_per_region, tile_size)
}

/// [`generate_benchmark`] that also accepts 1 or 2 source regions, for
/// degenerate-setup experiments. With one region the target blends it with itself.
pub fn generate_benchmark_relaxed(
    seed: u64,
    num_regions: usize,
    tiles_per_region: usize,
    tile_size: usize,
) -> Result<(TileSet, TileSet)> {
    if num_regions == 0 {
        return Err(GramError::config("num_regions", "must be >= 1"));
    }
    if tiles_per_region == 0 {
        return Err(GramError::config("tiles_per_region", "must be >= 1"));
    }
    if ![32, 64, 128].contains(&tile_size) {
        return Err(GramError::config(
            "tile_size",
            format!("must be one of 32, 64, 128, got {tile_size}"),
        ));
    }
    let sources = source_region_specs(seed, num_regions);
    let target = target_region_spec(seed, &sources);
    Ok(generate_from_specs(seed, sources, target, tiles_per_region, tile_size))
}

/// Render a benchmark from explicit region parameters.
pub(crate) fn generate_from_specs(
    seed: u64,
    sources: Vec<RegionSpec>,
    target: RegionSpec,
    tiles_per_region: usize,
    tile_size: usize,
) -> (TileSet, TileSet) {
    let tiles = sources
        .iter()
        .flat_map(|s| render_region(seed, s, tiles_per_region, tile_size))
        .collect();
    let target_tiles = render_region(seed, &target, tiles_per_region, tile_size);
    let mut target_regions = sources.clone();
    target_regions.push(target);
    (
        TileSet {
            split: Split::SourceTrain,
            regions: sources,
            tiles,
        },
        TileSet {
            split: Split::Target,
            regions: target_regions,
            tiles: target_tiles,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_masks() {
        let (src, tgt) = generate_benchmark(0, 3, 16, 64).unwrap();
        assert_eq!(src.len(), 48);
        assert_eq!(tgt.len(), 16);
        assert!(src.tiles.iter().chain(&tgt.tiles).all(|t| t.mask.is_some()));
        assert!(src.tiles.iter().all(|t| t.image.iter().all(|v| (0.0..=1.0).contains(v))));
        src.validate().unwrap();
        tgt.validate().unwrap();
        assert_eq!(tgt.tiles[0].region_id, 3);
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_benchmark(7, 3, 16, 32).unwrap();
        let b = generate_benchmark(7, 3, 16, 32).unwrap();
        assert_eq!(a, b);
        let c = generate_benchmark(8, 3, 16, 32).unwrap();
        assert_ne!(a.0.tiles[0].image, c.0.tiles[0].image);
    }

    #[test]
    fn rejects_bad_arguments() {
        let check = |r: Result<(TileSet, TileSet)>, name: &str| match r {
            Err(GramError::Config { param, .. }) => assert_eq!(param, name),
            other => panic!("expected config error for {name}, got {other:?}"),
        };
        check(generate_benchmark(0, 2, 16, 64), "num_regions");
        check(generate_benchmark(0, 3, 15, 64), "tiles_per_region");
        check(generate_benchmark(0, 3, 16, 48), "tile_size");
    }

    #[test]
    fn zero_fraction_region_has_empty_masks() {
        let mut sources = source_region_specs(3, 3);
        sources[1].slum_fraction = Some(0.0);
        let target = target_region_spec(3, &sources);
        let (src, _) = generate_from_specs(3, sources, target, 16, 32);
        let empty = src
            .tiles
            .iter()
            .filter(|t| t.region_id == 1)
            .all(|t| t.mask.as_ref().unwrap().iter().all(|&m| m == 0));
        assert!(empty);
    }

    #[test]
    fn mask_balance_within_tolerance() {
        let (src, _) = generate_benchmark(5, 4, 32, 64).unwrap();
        for spec in &src.regions {
            let tiles: Vec<&Tile> = src.tiles.iter().filter(|t| t.region_id == spec.region_id).collect();
            let slum: usize = tiles.iter().map(|t| t.mask.as_ref().unwrap().iter().filter(|&&m| m == 1).count()).sum();
            let frac = slum as f64 / (tiles.len() * 64 * 64) as f64;
            assert!(
                (frac - spec.slum_fraction.unwrap()).abs() <= 0.1,
                "region {}: {frac} vs {}",
                spec.region_id,
                spec.slum_fraction.unwrap()
            );
        }
    }

    #[test]
    fn target_is_blend_of_two_sources() {
        let sources = source_region_specs(11, 3);
        let t = target_region_spec(11, &sources);
        let (a, b) = t.blended_from.unwrap();
        assert!(a < b && b < 3);
        let ta = sources[a].texture.as_ref().unwrap();
        let tb = sources[b].texture.as_ref().unwrap();
        let tt = t.texture.as_ref().unwrap();
        let lo = ta.structure_size.min(tb.structure_size);
        let hi = ta.structure_size.max(tb.structure_size);
        assert!(tt.structure_size >= lo && tt.structure_size <= hi);
    }

    #[test]
    fn hsv_round_trip() {
        for &(h, s, v) in &[(0.1, 0.5, 0.7), (0.45, 0.9, 0.3), (0.8, 0.2, 1.0)] {
            let (h2, s2, v2) = rgb_to_hsv(hsv_to_rgb(h, s, v));
            assert!((h - h2).abs() < 1e-12 && (s - s2).abs() < 1e-12 && (v - v2).abs() < 1e-12);
        }
    }
}
