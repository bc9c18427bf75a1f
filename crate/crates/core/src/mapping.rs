//! Folding crossbar non-idealities into network weights.
//!
//! Each conv/linear weight tensor is flattened to a `fan_in x fan_out`
//! matrix, cut into `X x X` tiles (zero padded at the edges), and every tile
//! is programmed as a differential pair of conductance tiles. After device
//! variation and the circuit solve, the effective conductances are read back
//! as weights and the tiles are stitched together again.

use std::ops::Range;

use rayon::prelude::*;

use crate::crossbar::{apply_device_variation, effective_conductance, ConductanceTile, CrossbarConfig};
use crate::error::{Error, Result};
use crate::numerics::{Purpose, RandomStream, Tensor};
use crate::snn::{weight_key, LayerSpec, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Linear,
}

/// Weights of one mappable layer. Conv weights are `(out, in, k, k)`,
/// linear weights `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub kind: LayerKind,
    pub tensor: Tensor,
    pub bias: Option<Tensor>,
}

/// The `fan_in x fan_out` matrix a crossbar stores for this layer.
pub fn flatten_weights(layer: &LayerWeights) -> Result<Tensor> {
    let t = &layer.tensor;
    match (layer.kind, t.ndim()) {
        (LayerKind::Conv, 4) => {
            let out = t.shape()[0];
            t.reshaped(&[out, t.len() / out.max(1)])?.transpose2()
        }
        (LayerKind::Linear, 2) => t.transpose2(),
        (kind, n) => Err(Error::shape(format!("{kind:?} layer with a {n}-D weight tensor"))),
    }
}

/// Inverse of [`flatten_weights`] for a tensor of shape `shape`.
pub fn unflatten_weights(kind: LayerKind, flat: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let t = flat.transpose2()?;
    match kind {
        LayerKind::Conv if shape.len() == 4 => t.reshape(shape),
        LayerKind::Linear if shape.len() == 2 && t.shape() == shape => Ok(t),
        _ => Err(Error::shape(format!(
            "cannot unflatten {:?} into {kind:?} shape {shape:?}",
            flat.shape()
        ))),
    }
}

/// Row and column ranges of one tile inside the unpadded matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileRange {
    pub grid_row: usize,
    pub grid_col: usize,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

/// How a matrix is covered by `size x size` tiles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub layer: String,
    pub size: usize,
    pub matrix_rows: usize,
    pub matrix_cols: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Row-major over the tile grid.
    pub tiles: Vec<TileRange>,
}

impl TilePlan {
    pub fn new(layer: &str, matrix_rows: usize, matrix_cols: usize, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("crossbar size must be >= 1"));
        }
        let grid_rows = matrix_rows.div_ceil(size);
        let grid_cols = matrix_cols.div_ceil(size);
        let mut tiles = Vec::with_capacity(grid_rows * grid_cols);
        for gr in 0..grid_rows {
            for gc in 0..grid_cols {
                tiles.push(TileRange {
                    grid_row: gr,
                    grid_col: gc,
                    rows: gr * size..((gr + 1) * size).min(matrix_rows),
                    cols: gc * size..((gc + 1) * size).min(matrix_cols),
                });
            }
        }
        Ok(TilePlan {
            layer: layer.to_string(),
            size,
            matrix_rows,
            matrix_cols,
            grid_rows,
            grid_cols,
            tiles,
        })
    }

    /// Mask of padding cells for tile `k`, row-major `size x size`.
    pub fn padded_mask(&self, k: usize) -> Vec<bool> {
        let r = &self.tiles[k];
        let (nr, nc) = (r.rows.len(), r.cols.len());
        (0..self.size * self.size)
            .map(|idx| idx / self.size >= nr || idx % self.size >= nc)
            .collect()
    }
}

/// Splits `w` into zero-padded `size x size` tiles.
pub fn partition(w: &Tensor, size: usize) -> Result<(TilePlan, Vec<Tensor>)> {
    partition_named(w, size, "")
}

fn partition_named(w: &Tensor, size: usize, layer: &str) -> Result<(TilePlan, Vec<Tensor>)> {
    if w.ndim() != 2 {
        return Err(Error::shape(format!("partition expects a matrix, got {:?}", w.shape())));
    }
    let plan = TilePlan::new(layer, w.shape()[0], w.shape()[1], size)?;
    let tiles = plan
        .tiles
        .iter()
        .map(|r| {
            let mut t = Tensor::zeros(&[size, size]);
            for (i, src) in r.rows.clone().enumerate() {
                for (j, col) in r.cols.clone().enumerate() {
                    t.set2(i, j, w.at2(src, col));
                }
            }
            t
        })
        .collect();
    Ok((plan, tiles))
}

/// Stitches tiles back into the unpadded matrix; padding is dropped.
pub fn reassemble(plan: &TilePlan, tiles: &[Tensor]) -> Result<Tensor> {
    if tiles.len() != plan.tiles.len() {
        return Err(Error::shape(format!(
            "plan has {} tiles, got {}",
            plan.tiles.len(),
            tiles.len()
        )));
    }
    let mut w = Tensor::zeros(&[plan.matrix_rows, plan.matrix_cols]);
    for (r, t) in plan.tiles.iter().zip(tiles) {
        if t.shape() != [plan.size, plan.size] {
            return Err(Error::shape(format!("tile {:?} in a {}-plan", t.shape(), plan.size)));
        }
        for (i, dst) in r.rows.clone().enumerate() {
            for (j, col) in r.cols.clone().enumerate() {
                w.set2(dst, col, t.at2(i, j));
            }
        }
    }
    Ok(w)
}

/// Signed weights as two conductance tiles whose difference carries the sign.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferentialPair {
    pub g_plus: ConductanceTile,
    pub g_minus: ConductanceTile,
    pub scale: f64,
}

/// `g± = g_min + max(±w, 0) / s * (g_max - g_min)`; padded cells sit at
/// `g_min` in both tiles.
pub fn weights_to_conductances(
    w: &Tensor,
    padded: Option<&[bool]>,
    scale: f64,
    cfg: &CrossbarConfig,
) -> Result<DifferentialPair> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("weight scale must be > 0, got {scale}")));
    }
    if w.ndim() != 2 {
        return Err(Error::shape(format!("weight tile {:?} is not a matrix", w.shape())));
    }
    let mask = match padded {
        Some(m) if m.len() == w.len() => m.to_vec(),
        Some(m) => return Err(Error::shape(format!("mask of {} for {} cells", m.len(), w.len()))),
        None => vec![false; w.len()],
    };
    let span = cfg.g_max - cfg.g_min;
    let mut plus = Tensor::full(w.shape(), cfg.g_min);
    let mut minus = Tensor::full(w.shape(), cfg.g_min);
    for (k, &x) in w.data().iter().enumerate() {
        if mask[k] {
            continue;
        }
        if !x.is_finite() || x.abs() > scale {
            return Err(Error::invalid(format!("weight {x} outside [-{scale}, {scale}]")));
        }
        plus.data_mut()[k] = cfg.g_min + x.max(0.0) / scale * span;
        minus.data_mut()[k] = cfg.g_min + (-x).max(0.0) / scale * span;
    }
    Ok(DifferentialPair {
        g_plus: ConductanceTile::new(plus, mask.clone())?,
        g_minus: ConductanceTile::new(minus, mask)?,
        scale,
    })
}

/// `w = s * (g+ - g-) / (g_max - g_min)`.
pub fn conductances_to_weights(g_plus: &Tensor, g_minus: &Tensor, scale: f64, cfg: &CrossbarConfig) -> Result<Tensor> {
    if g_plus.shape() != g_minus.shape() {
        return Err(Error::shape(format!(
            "conductance halves {:?} and {:?}",
            g_plus.shape(),
            g_minus.shape()
        )));
    }
    let k = scale / (cfg.g_max - cfg.g_min);
    let data = g_plus
        .data()
        .iter()
        .zip(g_minus.data())
        .map(|(p, m)| k * (p - m))
        .collect();
    Tensor::from_vec(g_plus.shape(), data)
}

/// Stream index for the variation of one half of one tile; unique per
/// `(layer, tile, half)` so results do not depend on scheduling.
pub fn variation_stream_index(layer: usize, tile: usize, minus: bool) -> u64 {
    ((layer as u64) << 40) | ((tile as u64) << 1) | u64::from(minus)
}

/// Maps one tile through the crossbar and returns its non-ideal weights.
/// Padding cells come back as exact zeros: their row inputs are 0 V and
/// their columns are never read, so they carry no signal.
pub fn map_tile(
    w: &Tensor,
    padded: &[bool],
    scale: f64,
    cfg: &CrossbarConfig,
    seed: u64,
    layer: usize,
    tile: usize,
) -> Result<Tensor> {
    let pair = weights_to_conductances(w, Some(padded), scale, cfg)?;
    let mut sp = RandomStream::new(
        seed,
        Purpose::DeviceVariation,
        variation_stream_index(layer, tile, false),
    );
    let mut sm = RandomStream::new(
        seed,
        Purpose::DeviceVariation,
        variation_stream_index(layer, tile, true),
    );
    let plus = apply_device_variation(&pair.g_plus, cfg, &mut sp)?;
    let minus = apply_device_variation(&pair.g_minus, cfg, &mut sm)?;
    let gp = effective_conductance(&plus, cfg)?;
    let gm = effective_conductance(&minus, cfg)?;
    let mut out = conductances_to_weights(&gp, &gm, scale, cfg)?;
    for (v, &pad) in out.data_mut().iter_mut().zip(padded) {
        if pad {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Weights of every conv/linear layer seen through non-ideal crossbars.
///
/// Variation is drawn once per mapping from streams keyed by
/// `(seed, layer, tile, half)`. Biases, norm parameters and thresholds pass
/// through unchanged; the returned model records the crossbar settings in
/// its metadata. Weights are rounded to `f32` storage precision.
pub fn nonidealize_model(model: &Model, cfg: &CrossbarConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    if cfg.rows != cfg.cols {
        return Err(Error::invalid(format!(
            "crossbar tiles must be square, got {}x{}",
            cfg.rows, cfg.cols
        )));
    }
    model.validate()?;

    struct Job {
        layer: usize,
        tile: usize,
        scale: f64,
        data: Tensor,
        mask: Vec<bool>,
    }
    struct LayerPlan {
        key: String,
        kind: LayerKind,
        shape: Vec<usize>,
        plan: TilePlan,
        scale: f64,
    }

    let mut plans = Vec::new();
    let mut jobs = Vec::new();
    let weighted = model.spec.layers.iter().filter(|l| l.is_weighted());
    for (li, layer) in weighted.enumerate() {
        let (name, kind) = match layer {
            LayerSpec::Conv { name, .. } => (name, LayerKind::Conv),
            LayerSpec::Linear { name, .. } => (name, LayerKind::Linear),
            _ => unreachable!(),
        };
        let key = weight_key(name);
        let tensor = model.tensor(&key)?;
        let flat = flatten_weights(&LayerWeights {
            kind,
            tensor: tensor.clone(),
            bias: None,
        })?;
        let scale = flat.max_abs();
        let (plan, tiles) = partition_named(&flat, cfg.rows, name)?;
        if scale > 0.0 {
            for (k, data) in tiles.into_iter().enumerate() {
                jobs.push(Job {
                    layer: li,
                    tile: k,
                    scale,
                    data,
                    mask: plan.padded_mask(k),
                });
            }
        }
        plans.push(LayerPlan {
            key,
            kind,
            shape: tensor.shape().to_vec(),
            plan,
            scale,
        });
    }

    let mapped: Vec<Result<Tensor>> = jobs
        .par_iter()
        .map(|j| {
            map_tile(&j.data, &j.mask, j.scale, cfg, seed, j.layer, j.tile).map_err(|e| {
                let r = &plans[j.layer].plan.tiles[j.tile];
                Error::Tile {
                    layer: plans[j.layer].plan.layer.clone(),
                    tile_row: r.grid_row,
                    tile_col: r.grid_col,
                    source: Box::new(e),
                }
            })
        })
        .collect();

    let mut out = model.clone();
    let mut results = jobs.iter().zip(mapped);
    for (li, lp) in plans.iter().enumerate() {
        let new = if lp.scale > 0.0 {
            let mut tiles = Vec::with_capacity(lp.plan.tiles.len());
            for _ in 0..lp.plan.tiles.len() {
                let (job, res) = results.next().expect("one result per job");
                debug_assert_eq!(job.layer, li);
                tiles.push(res?);
            }
            let flat = reassemble(&lp.plan, &tiles)?;
            let mut t = unflatten_weights(lp.kind, &flat, &lp.shape)?;
            t.round_to_f32();
            t
        } else {
            Tensor::zeros(&lp.shape)
        };
        out.tensors.insert(lp.key.clone(), new);
    }
    out.metadata.insert("xbar_size".into(), cfg.rows.to_string());
    out.metadata.insert("circuit_mode".into(), cfg.circuit_mode.to_string());
    out.metadata.insert("hw_seed".into(), seed.to_string());
    out.metadata.insert("crossbar".into(), serde_json::to_string(cfg)?);
    Ok(out)
}
