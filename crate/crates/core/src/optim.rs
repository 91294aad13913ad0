//! SGD with Nesterov momentum, Adam, loss scaling, learning-rate schedules and
//! gradient accumulation.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::engine::ops::{self, Numerics};
use crate::profiler::OptimizerKind;
use crate::{DenseTensor, Error, NumericFormat, Result, SparsityMask};

/// A moment buffer, stored as `values · scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moment {
    pub values: DenseTensor,
    /// Power-of-two scale; 1 unless momentum rescaling is on.
    pub scale: f64,
}

impl Moment {
    pub fn zeros(like: &DenseTensor) -> Self {
        Moment {
            values: DenseTensor::zeros(like.shape(), like.format()),
            scale: 1.0,
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values.data()[i] * self.scale
    }

    /// Decoded values.
    pub fn to_vec(&self) -> Vec<f64> {
        self.values.data().iter().map(|v| v * self.scale).collect()
    }

    /// Stores `m` in the buffer's format, choosing a new scale if `rescale` is set.
    pub fn store(&mut self, m: &[f64], rescale: bool) {
        if rescale {
            self.scale = rescale_factor(m, self.scale);
        } else {
            self.scale = 1.0;
        }
        let s = self.scale;
        self.values.map_inplace(|i, _| m[i] / s);
    }

    pub fn clear(&mut self) {
        self.values.map_inplace(|_, _| 0.0);
        self.scale = 1.0;
    }
}

const RESCALE_LO: f64 = 512.0;
const RESCALE_HI: f64 = 2048.0;

/// Power-of-two `s` with `max|m|/s` in [2^9, 2^11). `current` is kept when it already fits.
pub fn rescale_factor(m: &[f64], current: f64) -> f64 {
    let max = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if max == 0.0 || !max.is_finite() {
        return 1.0;
    }
    let r = max / current;
    if (RESCALE_LO..RESCALE_HI).contains(&r) {
        return current;
    }
    let mut s = 2f64.powi(max.log2().floor() as i32 - 10);
    while max / s >= RESCALE_HI {
        s *= 2.0;
    }
    while max / s < RESCALE_LO {
        s /= 2.0;
    }
    s
}

/// How update arithmetic is carried out for low-precision tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateOptions {
    /// Widen FP16 tensors to FP32 for the update, then round back.
    pub upcast: bool,
    /// Keep a per-tensor power-of-two scale on FP16 moment buffers.
    pub momentum_rescale: bool,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        UpdateOptions {
            upcast: true,
            momentum_rescale: true,
        }
    }
}

impl UpdateOptions {
    /// Plain arithmetic in each tensor's own format.
    pub fn plain() -> Self {
        UpdateOptions {
            upcast: false,
            momentum_rescale: false,
        }
    }

    fn arith(&self, f: NumericFormat) -> NumericFormat {
        if self.upcast && f == NumericFormat::Fp16 {
            NumericFormat::Fp32
        } else {
            f
        }
    }

    fn rescales(&self, f: NumericFormat) -> bool {
        self.momentum_rescale && f == NumericFormat::Fp16
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub momentum: Vec<Moment>,
    pub mu: f64,
    pub weight_decay: f64,
}

impl SgdState {
    pub fn new(params: &[DenseTensor], mu: f64, weight_decay: f64) -> Self {
        SgdState {
            momentum: params.iter().map(Moment::zeros).collect(),
            mu,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Moment>,
    pub v: Vec<Moment>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[DenseTensor], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamState {
            m: params.iter().map(Moment::zeros).collect(),
            v: params.iter().map(Moment::zeros).collect(),
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
        }
    }
}

fn check(params: &[DenseTensor], grads: &[DenseTensor], masks: &[Option<SparsityMask>], state: usize) -> Result<()> {
    if grads.len() != params.len() || state != params.len() || (!masks.is_empty() && masks.len() != params.len()) {
        return Err(Error::contract(format!(
            "{} parameters, {} gradients, {} masks, {} state buffers",
            params.len(),
            grads.len(),
            masks.len(),
            state
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::contract(format!(
                "parameter {i} has shape {:?} but its gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if let Some(Some(m)) = masks.get(i) {
            if m.shape() != p.shape() {
                return Err(Error::contract(format!(
                    "mask of parameter {i} has shape {:?}",
                    m.shape()
                )));
            }
        }
    }
    Ok(())
}

fn live(masks: &[Option<SparsityMask>], t: usize, i: usize) -> bool {
    match masks.get(t) {
        Some(Some(m)) => m.get(i),
        _ => true,
    }
}

/// `g' = g + wd·w; b ← μ·b + g'; w ← w − lr·(g' + μ·b)`. Masked positions stay zero.
pub fn sgd_nesterov_step(
    params: &mut [DenseTensor],
    grads: &[DenseTensor],
    masks: &[Option<SparsityMask>],
    state: &mut SgdState,
    lr: f64,
    opts: UpdateOptions,
) -> Result<()> {
    check(params, grads, masks, state.momentum.len())?;
    let (mu, wd) = (state.mu, state.weight_decay);
    for (t, (w, g)) in params.iter_mut().zip(grads).enumerate() {
        let f = w.format();
        let a = opts.arith(f);
        let r = |x: f64| a.round(x);
        let buf = &mut state.momentum[t];
        let mut b = buf.to_vec();
        let mut nw = w.data().to_vec();
        for i in 0..nw.len() {
            if !live(masks, t, i) {
                b[i] = 0.0;
                nw[i] = 0.0;
                continue;
            }
            let gi = r(g.data()[i] + r(wd * nw[i]));
            b[i] = r(r(mu * b[i]) + gi);
            nw[i] = r(nw[i] - r(lr * r(gi + r(mu * b[i]))));
        }
        buf.store(&b, opts.rescales(buf.values.format()));
        w.map_inplace(|i, _| nw[i]);
    }
    Ok(())
}

/// Bias-corrected Adam with weight decay folded into the gradient.
pub fn adam_step(
    params: &mut [DenseTensor],
    grads: &[DenseTensor],
    masks: &[Option<SparsityMask>],
    state: &mut AdamState,
    lr: f64,
    opts: UpdateOptions,
) -> Result<()> {
    check(params, grads, masks, state.m.len())?;
    if state.v.len() != state.m.len() {
        return Err(Error::contract("adam moment buffers disagree in count"));
    }
    state.t += 1;
    let (b1, b2, eps, wd) = (state.beta1, state.beta2, state.eps, state.weight_decay);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (t, (w, g)) in params.iter_mut().zip(grads).enumerate() {
        let a = opts.arith(w.format());
        let r = |x: f64| a.round(x);
        let mut m = state.m[t].to_vec();
        let mut v = state.v[t].to_vec();
        let mut nw = w.data().to_vec();
        for i in 0..nw.len() {
            if !live(masks, t, i) {
                m[i] = 0.0;
                v[i] = 0.0;
                nw[i] = 0.0;
                continue;
            }
            let gi = r(g.data()[i] + r(wd * nw[i]));
            m[i] = r(r(b1 * m[i]) + r((1.0 - b1) * gi));
            v[i] = r(r(b2 * v[i]) + r((1.0 - b2) * r(gi * gi)));
            let mh = r(m[i] / c1);
            let vh = r(v[i] / c2);
            nw[i] = r(nw[i] - r(r(lr * mh) / r(r(vh.sqrt()) + eps)));
        }
        let mf = state.m[t].values.format();
        state.m[t].store(&m, opts.rescales(mf));
        let vf = state.v[t].values.format();
        state.v[t].store(&v, opts.rescales(vf));
        w.map_inplace(|i, _| nw[i]);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd(SgdState),
    Adam(AdamState),
}

impl Optimizer {
    /// Momentum 0.9 and weight decay 5e-4.
    pub fn sgd(params: &[DenseTensor]) -> Self {
        Optimizer::Sgd(SgdState::new(params, 0.9, 5e-4))
    }

    /// β = (0.9, 0.98), ε = 1e-8, weight decay 1e-4.
    pub fn adam(params: &[DenseTensor]) -> Self {
        Optimizer::Adam(AdamState::new(params, 0.9, 0.98, 1e-8, 1e-4))
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd(_) => OptimizerKind::SgdNesterov,
            Optimizer::Adam(_) => OptimizerKind::Adam,
        }
    }

    pub fn step(
        &mut self,
        params: &mut [DenseTensor],
        grads: &[DenseTensor],
        masks: &[Option<SparsityMask>],
        lr: f64,
        opts: UpdateOptions,
    ) -> Result<()> {
        match self {
            Optimizer::Sgd(s) => sgd_nesterov_step(params, grads, masks, s, lr, opts),
            Optimizer::Adam(s) => adam_step(params, grads, masks, s, lr, opts),
        }
    }

    pub fn buffers(&self) -> Vec<&Moment> {
        match self {
            Optimizer::Sgd(s) => s.momentum.iter().collect(),
            Optimizer::Adam(s) => s.m.iter().chain(&s.v).collect(),
        }
    }

    fn buffers_of(&mut self, t: usize) -> Vec<&mut Moment> {
        match self {
            Optimizer::Sgd(s) => s.momentum.get_mut(t).into_iter().collect(),
            Optimizer::Adam(s) => s.m.get_mut(t).into_iter().chain(s.v.get_mut(t)).collect(),
        }
    }

    /// Zeros every moment entry of tensor `t` outside `mask`.
    pub fn apply_mask(&mut self, t: usize, mask: &SparsityMask) {
        for b in self.buffers_of(t) {
            b.values.map_inplace(|i, v| if mask.get(i) { v } else { 0.0 });
        }
    }

    /// Zeros all moments of tensor `t`.
    pub fn reset(&mut self, t: usize) {
        for b in self.buffers_of(t) {
            b.clear();
        }
    }

    /// Bytes held by moment buffers.
    pub fn state_bytes(&self) -> u64 {
        self.buffers().iter().map(|b| b.values.bytes()).sum()
    }
}

/// Dynamic loss scaling over powers of two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossScaler {
    pub scale: f64,
    pub growth_interval: u32,
    pub clean_streak: u32,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for LossScaler {
    fn default() -> Self {
        LossScaler {
            scale: 65536.0,
            growth_interval: 1000,
            clean_streak: 0,
            min_scale: 1.0,
            max_scale: 16_777_216.0,
        }
    }
}

fn is_pow2(x: f64) -> bool {
    x > 0.0 && x.is_finite() && x.log2().fract() == 0.0
}

impl LossScaler {
    pub const GROWTH: f64 = 2.0;
    pub const BACKOFF: f64 = 0.5;

    pub fn new(scale: f64, growth_interval: u32, min_scale: f64, max_scale: f64) -> Result<Self> {
        if ![scale, min_scale, max_scale].into_iter().all(is_pow2) {
            return Err(Error::config("loss scales must be positive powers of two"));
        }
        if !(min_scale <= scale && scale <= max_scale) || growth_interval == 0 {
            return Err(Error::config(format!(
                "loss scale {scale} outside [{min_scale}, {max_scale}] or zero growth interval"
            )));
        }
        Ok(LossScaler {
            scale,
            growth_interval,
            clean_streak: 0,
            min_scale,
            max_scale,
        })
    }

    /// Returns true when the step must be skipped.
    pub fn update(&mut self, nonfinite: bool) -> bool {
        if nonfinite {
            self.scale = (self.scale * Self::BACKOFF).max(self.min_scale);
            self.clean_streak = 0;
            return true;
        }
        self.clean_streak += 1;
        if self.clean_streak >= self.growth_interval {
            self.scale = (self.scale * Self::GROWTH).min(self.max_scale);
            self.clean_streak = 0;
        }
        false
    }
}

/// Divides gradients by `scale` in place; false if any value is not finite.
pub fn unscale(grads: &mut [DenseTensor], scale: f64) -> bool {
    let mut finite = true;
    for g in grads {
        let f = g.format();
        g.map_inplace(|_, v| f.round(v / scale));
        finite &= g.all_finite();
    }
    finite
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `rates[i]` applies from position `starts[i]` on.
    Step {
        starts: Vec<u64>,
        rates: Vec<f64>,
    },
    InverseSqrtWarmup {
        warmup: u64,
        peak: f64,
        floor: f64,
    },
}

impl LrSchedule {
    /// Per-epoch WideResNet schedule (epochs counted from 1).
    pub fn wrn() -> Self {
        LrSchedule::Step {
            starts: vec![1, 61, 121, 161],
            rates: vec![0.100, 0.020, 0.040, 0.008],
        }
    }

    /// Per-update transformer schedule.
    pub fn transformer() -> Self {
        LrSchedule::InverseSqrtWarmup {
            warmup: 4000,
            peak: 5e-4,
            floor: 1e-7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::Step { starts, rates } => {
                if starts.is_empty() || starts.len() != rates.len() {
                    return Err(Error::config("step schedule needs one rate per start"));
                }
                if starts.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::config("step schedule starts must increase"));
                }
                if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                    return Err(Error::config("step schedule rates must be positive"));
                }
            }
            LrSchedule::InverseSqrtWarmup { warmup, peak, floor } => {
                if *warmup == 0 || !(*floor > 0.0 && floor < peak && peak.is_finite()) {
                    return Err(Error::config("warmup needs 0 < floor < peak and a positive length"));
                }
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, n: u64) -> f64 {
        match self {
            LrSchedule::Step { starts, rates } => {
                let k = starts.iter().rposition(|&s| s <= n).unwrap_or(0);
                rates[k]
            }
            LrSchedule::InverseSqrtWarmup { warmup, peak, floor } => {
                if n <= *warmup {
                    floor + (peak - floor) * n as f64 / *warmup as f64
                } else {
                    peak * (*warmup as f64 / n as f64).sqrt()
                }
            }
        }
    }
}

/// Gradient buffer for microbatch accumulation.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator {
    pub buffer: Vec<DenseTensor>,
    pub num: Numerics,
    pub pending: usize,
}

impl GradAccumulator {
    pub fn new(params: &[DenseTensor], num: Numerics) -> Self {
        let f = num.accumulator_format();
        GradAccumulator {
            buffer: params.iter().map(|p| DenseTensor::zeros(p.shape(), f)).collect(),
            num,
            pending: 0,
        }
    }

    /// Adds `weight · grads`.
    pub fn add(&mut self, grads: &[DenseTensor], weight: f64) -> Result<()> {
        if grads.len() != self.buffer.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} buffers",
                grads.len(),
                self.buffer.len()
            )));
        }
        for (b, g) in self.buffer.iter_mut().zip(grads) {
            if b.shape() != g.shape() {
                return Err(Error::contract(format!(
                    "gradient shape {:?} vs buffer {:?}",
                    g.shape(),
                    b.shape()
                )));
            }
            let mut data = b.data().to_vec();
            ops::accumulate(&mut data, g.data(), weight, self.num);
            b.map_inplace(|i, _| data[i]);
        }
        self.pending += 1;
        Ok(())
    }

    /// Clips, steps and zeros the buffer. Returns false when nothing was accumulated.
    pub fn flush(
        &mut self,
        params: &mut [DenseTensor],
        masks: &[Option<SparsityMask>],
        optimizer: &mut Optimizer,
        lr: f64,
        clip: Option<f64>,
        opts: UpdateOptions,
    ) -> Result<bool> {
        if self.pending == 0 {
            warn!("flush with no accumulated gradients; skipping step");
            return Ok(false);
        }
        if let Some(c) = clip {
            clip_global_norm(&mut self.buffer, c);
        }
        optimizer.step(params, &self.buffer, masks, lr, opts)?;
        self.clear();
        Ok(true)
    }

    pub fn clear(&mut self) {
        for b in &mut self.buffer {
            b.map_inplace(|_, _| 0.0);
        }
        self.pending = 0;
    }
}

pub fn global_norm(grads: &[DenseTensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [DenseTensor], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm && n > 0.0 {
        let k = max_norm / n;
        for g in grads {
            let f = g.format();
            g.map_inplace(|_, v| f.round(v * k));
        }
    }
    n
}
