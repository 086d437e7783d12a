use rayon::prelude::*;

use super::project::{project_gaussian, ProjectedGaussian};
use super::{BlendRecord, BlendRecords, RenderOptions, RenderOutput};
use crate::error::{Error, Result};
use crate::scene::{CameraModel, GaussianPrimitive};

pub(crate) struct TileGrid {
    pub tile: u32,
    pub cols: u32,
    pub rows: u32,
}

impl TileGrid {
    pub fn new(camera: &CameraModel, tile: u32) -> Self {
        Self {
            tile,
            cols: camera.width.div_ceil(tile),
            rows: camera.height.div_ceil(tile),
        }
    }

    pub fn len(&self) -> usize {
        (self.cols * self.rows) as usize
    }

    /// Pixel rectangle `[x0, x1) x [y0, y1)` of a tile.
    pub fn bounds(&self, index: usize, camera: &CameraModel) -> (u32, u32, u32, u32) {
        let tx = index as u32 % self.cols;
        let ty = index as u32 / self.cols;
        let x0 = tx * self.tile;
        let y0 = ty * self.tile;
        (
            x0,
            (x0 + self.tile).min(camera.width),
            y0,
            (y0 + self.tile).min(camera.height),
        )
    }
}

pub(crate) fn feature_dim(gaussians: &[GaussianPrimitive]) -> Result<usize> {
    let dim = gaussians.first().map_or(0, |g| g.feature.len());
    if let Some((i, g)) = gaussians.iter().enumerate().find(|(_, g)| g.feature.len() != dim) {
        return Err(Error::shape(format!("feature of gaussian {i}"), dim, g.feature.len()));
    }
    Ok(dim)
}

pub(crate) fn project_all(
    gaussians: &[GaussianPrimitive],
    camera: &CameraModel,
) -> Vec<Option<ProjectedGaussian>> {
    gaussians
        .par_iter()
        .map(|g| project_gaussian(g, camera))
        .collect()
}

/// Visible Gaussian ids per tile, each list in front-to-back order.
fn bin_tiles(projected: &[Option<ProjectedGaussian>], grid: &TileGrid, camera: &CameraModel) -> Vec<Vec<u32>> {
    let mut order: Vec<u32> = (0..projected.len() as u32)
        .filter(|&i| projected[i as usize].is_some())
        .collect();
    order.sort_by(|&a, &b| {
        let da = projected[a as usize].as_ref().unwrap().depth;
        let db = projected[b as usize].as_ref().unwrap().depth;
        da.total_cmp(&db).then(a.cmp(&b))
    });

    let mut bins = vec![Vec::new(); grid.len()];
    let tile = grid.tile as f64;
    for id in order {
        let p = projected[id as usize].as_ref().unwrap();
        // pixel centers sit at i + 0.5
        let x_lo = (p.mean.x - p.radius - 0.5).ceil().max(0.0);
        let x_hi = (p.mean.x + p.radius - 0.5).floor().min(camera.width as f64 - 1.0);
        let y_lo = (p.mean.y - p.radius - 0.5).ceil().max(0.0);
        let y_hi = (p.mean.y + p.radius - 0.5).floor().min(camera.height as f64 - 1.0);
        if !(x_lo <= x_hi && y_lo <= y_hi) {
            continue;
        }
        let (tx0, tx1) = ((x_lo / tile) as u32, (x_hi / tile) as u32);
        let (ty0, ty1) = ((y_lo / tile) as u32, (y_hi / tile) as u32);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[(ty * grid.cols + tx) as usize].push(id);
            }
        }
    }
    bins
}

struct TilePixels {
    rgb: Vec<f64>,
    depth: Vec<f64>,
    alpha: Vec<f64>,
    feature: Vec<f64>,
    counts: Vec<usize>,
    records: Vec<BlendRecord>,
}

pub fn render(
    gaussians: &[GaussianPrimitive],
    camera: &CameraModel,
    options: &RenderOptions,
) -> Result<RenderOutput> {
    camera.validate()?;
    if options.tile_size == 0 {
        return Err(Error::invalid("tile_size", "must be positive"));
    }
    if gaussians.len() > u32::MAX as usize {
        return Err(Error::invalid("scene", "too many gaussians"));
    }
    let fdim = if options.render_features {
        feature_dim(gaussians)?
    } else {
        0
    };
    let projected = project_all(gaussians, camera);
    let grid = TileGrid::new(camera, options.tile_size);
    let bins = bin_tiles(&projected, &grid, camera);
    let bg = options.background;

    let tiles: Vec<TilePixels> = (0..grid.len())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = grid.bounds(t, camera);
            let n = ((x1 - x0) * (y1 - y0)) as usize;
            let mut out = TilePixels {
                rgb: Vec::with_capacity(n * 3),
                depth: Vec::with_capacity(n),
                alpha: Vec::with_capacity(n),
                feature: Vec::with_capacity(n * fdim),
                counts: Vec::with_capacity(n),
                records: Vec::new(),
            };
            let mut feat = vec![0.0; fdim];
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut transmittance = 1.0;
                    let mut rgb = [0.0; 3];
                    let mut acc_alpha = 0.0;
                    let mut acc_depth = 0.0;
                    feat.iter_mut().for_each(|v| *v = 0.0);
                    let before = out.records.len();
                    for &id in &bins[t] {
                        let p = projected[id as usize].as_ref().unwrap();
                        let Some((falloff, _, _)) = p.falloff(px, py) else {
                            continue;
                        };
                        let g = &gaussians[id as usize];
                        let a = g.alpha * falloff;
                        if a <= 0.0 {
                            continue;
                        }
                        let w = a * transmittance;
                        for ch in 0..3 {
                            rgb[ch] += w * g.c[ch];
                        }
                        acc_alpha += w;
                        acc_depth += w * p.depth;
                        for (f, gf) in feat.iter_mut().zip(&g.feature) {
                            *f += w * gf;
                        }
                        out.records.push(BlendRecord { id, opacity: a, weight: w });
                        transmittance *= 1.0 - a;
                        if transmittance == 0.0 {
                            break;
                        }
                    }
                    for ch in 0..3 {
                        out.rgb.push(rgb[ch] + transmittance * bg[ch]);
                    }
                    out.alpha.push(acc_alpha);
                    out.depth.push(if acc_alpha > 0.0 { acc_depth / acc_alpha } else { 0.0 });
                    out.feature.extend_from_slice(&feat);
                    out.counts.push(out.records.len() - before);
                }
            }
            out
        })
        .collect();

    let npix = camera.num_pixels();
    let width = camera.width as usize;
    let mut rgb = vec![0.0; npix * 3];
    let mut depth = vec![0.0; npix];
    let mut alpha = vec![0.0; npix];
    let mut feature = vec![0.0; npix * fdim];
    // records are regrouped into row-major pixel order
    let mut per_pixel: Vec<(usize, usize, usize)> = vec![(0, 0, 0); npix];
    for (t, tp) in tiles.iter().enumerate() {
        let (x0, x1, y0, y1) = grid.bounds(t, camera);
        let mut local = 0;
        let mut rec_start = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let pix = y as usize * width + x as usize;
                rgb[pix * 3..pix * 3 + 3].copy_from_slice(&tp.rgb[local * 3..local * 3 + 3]);
                depth[pix] = tp.depth[local];
                alpha[pix] = tp.alpha[local];
                feature[pix * fdim..(pix + 1) * fdim]
                    .copy_from_slice(&tp.feature[local * fdim..(local + 1) * fdim]);
                per_pixel[pix] = (t, rec_start, tp.counts[local]);
                rec_start += tp.counts[local];
                local += 1;
            }
        }
    }
    let mut offsets = Vec::with_capacity(npix + 1);
    let mut entries = Vec::with_capacity(tiles.iter().map(|t| t.records.len()).sum());
    offsets.push(0);
    for &(t, start, count) in &per_pixel {
        entries.extend_from_slice(&tiles[t].records[start..start + count]);
        offsets.push(entries.len());
    }

    Ok(RenderOutput {
        width: camera.width,
        height: camera.height,
        rgb,
        depth,
        alpha,
        feature: options.render_features.then_some(feature),
        feature_dim: fdim,
        records: BlendRecords::from_parts(offsets, entries),
        background: bg,
        num_gaussians: gaussians.len(),
    })
}
