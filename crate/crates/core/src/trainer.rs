//! Optimization: Adam with separate head/backbone learning rates, coupled
//! L2 weight decay, a plateau learning-rate schedule, and the epoch loop.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretize::{DiscretizationScheme, Midpoint};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_batch, MetricReport, DEFAULT_EPSILON};
use crate::net::{Checkpoint, NetConfig, OrdinalNet, ParamGrads, ParamGroup, ParamId, ParamSet, Real, Tensor};
use crate::ordinal::head_loss_and_grad;
use crate::predict::{image_tensor, predict_patch};
use crate::raster::{localize_patch, random_crop_pair, RasterGrid, TilePair};
use crate::rng::SplitMix64;

/// Number of times the plateau rule may lower the learning rates.
pub const MAX_PLATEAU_DROPS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patches_per_epoch: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_head: 1e-3,
            lr_backbone: 1e-4,
            weight_decay: 5e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            batch_size: 8,
            epochs: 20,
            patches_per_epoch: 2000,
            plateau_patience: 2,
            plateau_factor: 0.1,
        }
    }
}

impl OptimConfig {
    /// Full-scale batch and epoch sizes.
    pub fn full() -> Self {
        Self {
            batch_size: 15,
            patches_per_epoch: 10_000,
            ..Self::default()
        }
    }

    /// Sets the head rate and ties the backbone rate to a tenth of it.
    pub fn with_head_lr(mut self, lr: f64) -> Self {
        self.lr_head = lr;
        self.lr_backbone = lr / 10.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_head, self.lr_backbone, self.eps, self.plateau_factor];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("learning rates, eps and plateau factor must be positive".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patches_per_epoch == 0 {
            return Err(Error::Config("batch size, epochs and patches per epoch must be positive".into()));
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_list<const N: usize, T: std::str::FromStr + Copy + Default>(key: &str, v: &str) -> Result<[T; N]> {
    let inner = v.trim().trim_matches(|c| matches!(c, '(' | ')' | '[' | ']'));
    let items: Vec<&str> = inner.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.len() != N {
        return Err(Error::Config(format!("{key} needs {N} values, got {v:?}")));
    }
    let mut out = [T::default(); N];
    for (o, s) in out.iter_mut().zip(items) {
        *o = parse_num(key, s)?;
    }
    Ok(out)
}

/// Applies `key = value` lines to the configs. Keys are the field names of
/// [`OptimConfig`] and [`NetConfig`]; `#` starts a comment.
pub fn apply_config_text(text: &str, optim: &mut OptimConfig, net: &mut NetConfig) -> Result<()> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        set_config_key(key.trim(), value.trim(), optim, net)?;
    }
    Ok(())
}

/// Sets one configuration field by name.
pub fn set_config_key(key: &str, v: &str, optim: &mut OptimConfig, net: &mut NetConfig) -> Result<()> {
    match key {
        "lr_head" => optim.lr_head = parse_num(key, v)?,
        "lr_backbone" => optim.lr_backbone = parse_num(key, v)?,
        "weight_decay" => optim.weight_decay = parse_num(key, v)?,
        "betas" => {
            let [b1, b2] = parse_list::<2, f64>(key, v)?;
            optim.betas = (b1, b2);
        }
        "eps" => optim.eps = parse_num(key, v)?,
        "batch_size" => optim.batch_size = parse_num(key, v)?,
        "epochs" => optim.epochs = parse_num(key, v)?,
        "patches_per_epoch" => optim.patches_per_epoch = parse_num(key, v)?,
        "plateau_patience" => optim.plateau_patience = parse_num(key, v)?,
        "plateau_factor" => optim.plateau_factor = parse_num(key, v)?,
        "stem_channels" => net.stem_channels = parse_num(key, v)?,
        "stage_channels" => net.stage_channels = parse_list(key, v)?,
        "blocks_per_stage" => net.blocks_per_stage = parse_list(key, v)?,
        "aspp_rates" => net.aspp_rates = parse_list(key, v)?,
        "aspp_channels" => net.aspp_channels = parse_num(key, v)?,
        "k" | "K" => net.k = parse_num(key, v)?,
        "head" => net.head = v.parse()?,
        "patch_size" => net.patch_size = parse_num(key, v)?,
        _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

/// Adam moments, one buffer per parameter in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = |p: &crate::net::Param<T>| vec![T::zero(); p.value.numel()];
        Self {
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupLrs {
    pub head: f64,
    pub backbone: f64,
}

impl GroupLrs {
    pub fn of(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Head => self.head,
            ParamGroup::Backbone => self.backbone,
        }
    }
}

/// One Adam update. Weight decay is added to the gradient before the
/// moment updates; with `weight_decay == 0` it is skipped entirely.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamState<T>,
    lrs: GroupLrs,
    weight_decay: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    for ((p, g), (m, v)) in params.iter().zip(grads.iter()).zip(state.m.iter().zip(&state.v)) {
        let n = p.value.numel();
        if g.len() != n || m.len() != n || v.len() != n {
            return Err(Error::Shape(format!("optimizer buffers for {:?} have the wrong size", p.name)));
        }
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient contains non-finite values; step rejected".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(betas.0), T::of(betas.1));
    let (one_b1, one_b2) = (T::of(1.0 - betas.0), T::of(1.0 - betas.1));
    let c1 = T::of(1.0 - betas.0.powi(t));
    let c2 = T::of(1.0 - betas.1.powi(t));
    let wd = T::of(weight_decay);
    let eps = T::of(eps);
    for (i, p) in params.iter_mut().enumerate() {
        let lr = T::of(lrs.of(p.group));
        let g = grads.get(ParamId(i));
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let mut gj = g[j];
            if weight_decay != 0.0 {
                gj += wd * *w;
            }
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w = *w - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Lowers the learning rates when the epoch loss has not beaten its best
/// value for `patience` consecutive epochs. Fires at most
/// [`MAX_PLATEAU_DROPS`] times.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    patience: usize,
    factor: f64,
    best: f64,
    stale: usize,
    drops: usize,
}

impl PlateauSchedule {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            best: f64::INFINITY,
            stale: 0,
            drops: 0,
        }
    }

    /// Records an epoch loss; returns the multiplier to apply to the rates
    /// (1.0 when the schedule does not fire).
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            return 1.0;
        }
        self.stale += 1;
        if self.stale >= self.patience && self.drops < MAX_PLATEAU_DROPS {
            self.stale = 0;
            self.drops += 1;
            return self.factor;
        }
        1.0
    }

    pub fn drops(&self) -> usize {
        self.drops
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub val_rmse: f64,
    pub val_rel: f64,
}

pub fn write_epoch_log<W: Write>(epochs: &[EpochLog], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for e in epochs {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochLog>,
    /// Mean loss of the very first batch, before any update.
    pub first_batch_loss: f64,
    /// RMSE on the validation patches of predicting the mean training height.
    pub baseline_rmse: f64,
    /// Validation metrics after the last epoch, if there is validation data.
    pub final_val: Option<MetricReport>,
}

/// Splits off the last `fraction` of the tiles (at least one) for validation.
pub fn holdout_split(tiles: &[TilePair], fraction: f64) -> (&[TilePair], &[TilePair]) {
    if tiles.len() < 2 || fraction <= 0.0 {
        return (tiles, &[]);
    }
    let n_val = ((tiles.len() as f64 * fraction).round() as usize).clamp(1, tiles.len() - 1);
    tiles.split_at(tiles.len() - n_val)
}

/// Non-overlapping patch grid of a tile, dropping any remainder at the edges,
/// with localized height targets.
pub fn grid_patches(tile: &TilePair, patch: usize) -> Result<Vec<(crate::raster::ImageTile, RasterGrid)>> {
    let mut out = Vec::new();
    for y in (0..tile.dsm.height() / patch).map(|i| i * patch) {
        for x in (0..tile.dsm.width() / patch).map(|i| i * patch) {
            let (heights, _) = match localize_patch(&tile.dsm, x, y, patch) {
                Ok(v) => v,
                Err(Error::NoData(_)) => continue,
                Err(e) => return Err(e),
            };
            out.push((tile.image.crop(x, y, patch, patch)?, heights));
        }
    }
    Ok(out)
}

fn mean_height(patches: &[(crate::raster::ImageTile, RasterGrid)]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (_, h) in patches {
        s += h.data().iter().map(|&v| v as f64).sum::<f64>();
        n += h.data().len();
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Pooled metrics of per-patch predictions against localized truth.
pub fn validate(
    net: &OrdinalNet<f32>,
    scheme: &DiscretizationScheme,
    patches: &[(crate::raster::ImageTile, RasterGrid)],
) -> Result<Option<MetricReport>> {
    if patches.is_empty() {
        return Ok(None);
    }
    let preds = patches
        .par_iter()
        .map(|(img, _)| predict_patch(net, scheme, img, Midpoint::Geometric))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&RasterGrid, &RasterGrid)> = preds.iter().zip(patches.iter().map(|(_, t)| t)).collect();
    match evaluate_batch(&pairs, DEFAULT_EPSILON) {
        Ok(r) => Ok(Some(r)),
        Err(Error::NoData(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn sample_loss_grad(
    net: &OrdinalNet<f32>,
    scheme: &DiscretizationScheme,
    image: &crate::raster::ImageTile,
    heights: &RasterGrid,
) -> Result<(f64, ParamGrads<f32>)> {
    let input: Tensor<f32> = image_tensor(image)?;
    let pass = net.forward(input)?;
    let (loss, grad) = head_loss_and_grad(net.config().head, pass.output().data(), heights, scheme)?;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("non-finite loss {loss}")));
    }
    Ok((loss, net.backward(&pass, &grad)?))
}

const CROP_STREAM: u64 = 0x6372_6f70;

/// Trains a fresh network. Everything random (initialization and crop
/// positions) derives from `seed`, and gradients are summed in sample order,
/// so a rerun with the same inputs gives a bit-identical checkpoint.
pub fn train(
    train_tiles: &[TilePair],
    val_tiles: &[TilePair],
    net_cfg: &NetConfig,
    optim: &OptimConfig,
    scheme: &DiscretizationScheme,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    optim.validate()?;
    net_cfg.validate()?;
    if train_tiles.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if scheme.k() != net_cfg.k {
        return Err(Error::Config(format!(
            "scheme K={} does not match network K={}",
            scheme.k(),
            net_cfg.k
        )));
    }
    let patch = net_cfg.patch_size;
    if let Some(t) = train_tiles.iter().find(|t| t.dsm.width() < patch || t.dsm.height() < patch) {
        return Err(Error::InvalidArgument(format!(
            "tile {}x{} is smaller than patch size {patch}",
            t.dsm.width(),
            t.dsm.height()
        )));
    }

    let mut net = OrdinalNet::<f32>::new(net_cfg.clone(), seed)?;
    let mut state = AdamState::new(net.params());
    let mut schedule = PlateauSchedule::new(optim.plateau_patience, optim.plateau_factor);
    let mut lrs = GroupLrs {
        head: optim.lr_head,
        backbone: optim.lr_backbone,
    };

    let mut val_patches = Vec::new();
    for t in val_tiles {
        val_patches.extend(grid_patches(t, patch)?);
    }
    let mut train_grid = Vec::new();
    for t in train_tiles {
        train_grid.extend(grid_patches(t, patch)?);
    }
    let mean = mean_height(&train_grid) as f32;
    drop(train_grid);
    let baseline_rmse = {
        let (mut s, mut n) = (0.0, 0usize);
        for (_, h) in &val_patches {
            s += h.data().iter().map(|&v| (v as f64 - mean as f64).powi(2)).sum::<f64>();
            n += h.data().len();
        }
        if n == 0 {
            f64::NAN
        } else {
            (s / n as f64).sqrt()
        }
    };

    let mut crop_rng = SplitMix64::stream(seed, CROP_STREAM);
    let mut epochs = Vec::with_capacity(optim.epochs);
    let mut first_batch_loss = None;
    let mut final_val = None;
    for epoch in 0..optim.epochs {
        let mut total = 0.0;
        let mut seen = 0usize;
        while seen < optim.patches_per_epoch {
            let b = optim.batch_size.min(optim.patches_per_epoch - seen);
            let mut batch = Vec::with_capacity(b);
            for _ in 0..b {
                let tile = &train_tiles[crop_rng.below(train_tiles.len() as u64) as usize];
                let (img, heights, _) = random_crop_pair(&tile.image, &tile.dsm, patch, &mut crop_rng)?;
                batch.push((img, heights));
            }
            let results = batch
                .par_iter()
                .map(|(img, h)| sample_loss_grad(&net, scheme, img, h))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::Diverged(msg) => Error::Diverged(format!("epoch {epoch}: {msg}")),
                    e => e,
                })?;
            let mut grads = ParamGrads::zeros_like(net.params());
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                grads.add_assign(g)?;
            }
            grads.scale(1.0 / b as f32);
            first_batch_loss.get_or_insert(batch_loss / b as f64);
            total += batch_loss;
            seen += b;
            adam_step(
                net.params_mut(),
                &grads,
                &mut state,
                lrs,
                optim.weight_decay,
                optim.betas,
                optim.eps,
            )?;
        }
        let mean_loss = total / seen as f64;
        final_val = validate(&net, scheme, &val_patches)?;
        let log = EpochLog {
            epoch,
            mean_loss,
            lr_head: lrs.head,
            lr_backbone: lrs.backbone,
            val_rmse: final_val.map_or(f64::NAN, |r| r.rmse),
            val_rel: final_val.map_or(f64::NAN, |r| r.rel),
        };
        on_epoch(&log);
        epochs.push(log);
        let f = schedule.observe(mean_loss);
        lrs.head *= f;
        lrs.backbone *= f;
    }

    Ok(TrainReport {
        checkpoint: Checkpoint::from_model(&net, scheme, Some(&state)),
        epochs,
        first_batch_loss: first_batch_loss.unwrap_or(f64::NAN),
        baseline_rmse,
        final_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{HeadKind, Tensor};
    use crate::synth::{generate_tile, SceneConfig};

    fn scalar_params(values: &[(&str, f64)]) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        for (name, v) in values {
            ps.add(*name, Tensor::from_vec(&[1], vec![*v]).unwrap()).unwrap();
        }
        ps
    }

    fn grads_of(ps: &ParamSet<f64>, g: &[f64]) -> ParamGrads<f64> {
        let mut grads = ParamGrads::zeros_like(ps);
        for (i, &v) in g.iter().enumerate() {
            grads.get_mut(crate::net::ParamId(i))[0] = v;
        }
        grads
    }

    const LRS: GroupLrs = GroupLrs { head: 0.1, backbone: 0.1 };

    #[test]
    fn defaults_follow_ten_to_one() {
        let c = OptimConfig::default();
        assert!((c.lr_head - 10.0 * c.lr_backbone).abs() < 1e-15);
        let c = OptimConfig::default().with_head_lr(2e-3);
        assert!((c.lr_backbone - 2e-4).abs() < 1e-15);
        assert_eq!(OptimConfig::full().batch_size, 15);
        assert!(OptimConfig { lr_head: 0.0, ..OptimConfig::default() }.validate().is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut ps = scalar_params(&[("head.a", 1.5), ("backbone.b", -2.0)]);
        let before = ps.clone();
        let mut st = AdamState::new(&ps);
        let g = grads_of(&ps, &[0.0, 0.0]);
        adam_step(&mut ps, &g, &mut st, LRS, 0.0, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(ps, before);
    }

    #[test]
    fn adam_first_step_hand_value() {
        let mut ps = scalar_params(&[("head.a", 1.0)]);
        let mut st = AdamState::new(&ps);
        let g = grads_of(&ps, &[1.0]);
        adam_step(&mut ps, &g, &mut st, LRS, 0.0, (0.9, 0.999), 1e-8).unwrap();
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((ps.iter().next().unwrap().value.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn head_moves_ten_times_farther() {
        let mut ps = scalar_params(&[("head.a", 0.0), ("backbone.b", 0.0)]);
        let mut st = AdamState::new(&ps);
        let g = grads_of(&ps, &[0.5, 0.5]);
        let lrs = GroupLrs { head: 1e-3, backbone: 1e-4 };
        adam_step(&mut ps, &g, &mut st, lrs, 0.0, (0.9, 0.999), 1e-8).unwrap();
        let v: Vec<f64> = ps.iter().map(|p| p.value.data()[0]).collect();
        assert!((v[0] / v[1] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn zero_decay_is_pure_adam() {
        // hand-rolled reference Adam over a few steps
        let mut ps = scalar_params(&[("head.a", 0.3), ("backbone.b", -0.7)]);
        let mut st = AdamState::new(&ps);
        let (mut w, mut m, mut v) = ([0.3f64, -0.7], [0.0f64; 2], [0.0f64; 2]);
        let lr = [1e-3, 1e-4];
        for t in 1..=5 {
            let g = [0.1 * t as f64, -0.2 / t as f64];
            let grads = grads_of(&ps, &g);
            adam_step(&mut ps, &grads, &mut st, GroupLrs { head: lr[0], backbone: lr[1] }, 0.0, (0.9, 0.999), 1e-8).unwrap();
            for i in 0..2 {
                m[i] = 0.9 * m[i] + (1.0 - 0.9) * g[i];
                v[i] = 0.999 * v[i] + (1.0 - 0.999) * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                w[i] -= lr[i] * mh / (vh.sqrt() + 1e-8);
            }
        }
        let got: Vec<f64> = ps.iter().map(|p| p.value.data()[0]).collect();
        assert_eq!(got, w.to_vec());
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut ps = scalar_params(&[("head.a", 2.0)]);
        let mut st = AdamState::new(&ps);
        let grads = grads_of(&ps, &[0.0]);
        adam_step(&mut ps, &grads, &mut st, LRS, 0.5, (0.9, 0.999), 1e-8).unwrap();
        assert!(ps.iter().next().unwrap().value.data()[0] < 2.0);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut ps = scalar_params(&[("head.a", 1.0)]);
        let before = ps.clone();
        let mut st = AdamState::new(&ps);
        let g = grads_of(&ps, &[f64::NAN]);
        assert!(adam_step(&mut ps, &g, &mut st, LRS, 0.0, (0.9, 0.999), 1e-8).is_err());
        assert_eq!(ps, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn plateau_fires_after_two_stale_epochs() {
        let mut s = PlateauSchedule::new(2, 0.1);
        let fired: Vec<f64> = [3.0, 2.0, 2.1, 2.2, 2.3, 1.0, 1.5, 1.5, 1.6, 1.7]
            .iter()
            .map(|&l| s.observe(l))
            .collect();
        assert_eq!(fired, [1.0, 1.0, 1.0, 0.1, 1.0, 1.0, 1.0, 0.1, 1.0, 1.0]);
        assert_eq!(s.drops(), 2);
        // capped: no third drop
        assert_eq!(s.observe(5.0), 1.0);
        assert_eq!(s.observe(5.0), 1.0);
    }

    #[test]
    fn equal_loss_is_not_an_improvement() {
        let mut s = PlateauSchedule::new(2, 0.1);
        assert_eq!(s.observe(1.0), 1.0);
        assert_eq!(s.observe(1.0), 1.0);
        assert_eq!(s.observe(1.0), 0.1);
    }

    #[test]
    fn config_text_round() {
        let mut o = OptimConfig::default();
        let mut n = NetConfig::desk();
        let text = "# desk run\nlr_head = 2e-3\nbetas = (0.8, 0.99)\nbatch_size=4\naspp_rates = 1, 2, 4\nhead = mse\nK = 8\n";
        apply_config_text(text, &mut o, &mut n).unwrap();
        assert_eq!(o.lr_head, 2e-3);
        assert_eq!(o.betas, (0.8, 0.99));
        assert_eq!(o.batch_size, 4);
        assert_eq!(n.aspp_rates, [1, 2, 4]);
        assert_eq!(n.head, HeadKind::Mse);
        assert_eq!(n.k, 8);
        assert!(apply_config_text("bogus = 1", &mut o, &mut n).is_err());
        assert!(apply_config_text("stage_channels = 1,2", &mut o, &mut n).is_err());
        assert!(apply_config_text("epochs", &mut o, &mut n).is_err());
    }

    #[test]
    fn holdout_split_sizes() {
        let cfg = SceneConfig { tile_size: 16, n_buildings: (0, 0), footprint_px: (4, 4), ..SceneConfig::default() };
        let tiles: Vec<TilePair> = (0..22)
            .map(|i| {
                let (im, d) = generate_tile(&cfg, i).unwrap();
                TilePair::new(im, d).unwrap()
            })
            .collect();
        let (tr, va) = holdout_split(&tiles, 0.1);
        assert_eq!((tr.len(), va.len()), (20, 2));
        let (tr, va) = holdout_split(&tiles[..1], 0.1);
        assert_eq!((tr.len(), va.len()), (1, 0));
    }

    fn tiny_run(seed: u64) -> TrainReport {
        let cfg = SceneConfig { tile_size: 32, n_buildings: (1, 2), footprint_px: (6, 12), seed: 5, ..SceneConfig::default() };
        let tiles: Vec<TilePair> = (0..4)
            .map(|i| {
                let (im, d) = generate_tile(&cfg, i).unwrap();
                TilePair::new(im, d).unwrap()
            })
            .collect();
        let optim = OptimConfig { batch_size: 2, epochs: 2, patches_per_epoch: 4, ..OptimConfig::default() };
        let scheme = DiscretizationScheme::sid(0.0, 40.0, 4).unwrap();
        train(&tiles[..3], &tiles[3..], &NetConfig::tiny(4), &optim, &scheme, seed, |_| {}).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_anchored() {
        let a = tiny_run(9);
        let b = tiny_run(9);
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.epochs, b.epochs);
        assert!((a.first_batch_loss - 4.0 * 2f64.ln()).abs() < 1e-3);
        assert_eq!(a.epochs.len(), 2);
        assert!(a.checkpoint.optimizer.as_ref().unwrap().step == 4);
        let mut buf = Vec::new();
        write_epoch_log(&a.epochs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,mean_loss,lr_head,lr_backbone,val_rmse,val_rel\n"));
    }

    #[test]
    fn train_rejects_bad_inputs() {
        let scheme = DiscretizationScheme::sid(0.0, 40.0, 4).unwrap();
        let optim = OptimConfig::default();
        assert!(train(&[], &[], &NetConfig::tiny(4), &optim, &scheme, 0, |_| {}).is_err());
        let cfg = SceneConfig { tile_size: 32, footprint_px: (4, 8), ..SceneConfig::default() };
        let (im, d) = generate_tile(&cfg, 0).unwrap();
        let tiles = [TilePair::new(im, d).unwrap()];
        assert!(train(&tiles, &[], &NetConfig::tiny(8), &optim, &scheme, 0, |_| {}).is_err());
    }
}
