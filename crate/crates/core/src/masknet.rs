//! Direction-aware mask estimation network.
//!
//! Per frame, spectral and spatial features pass through a three-layer
//! dense encoder; the target direction passes through a three-layer
//! attractor encoder. Their elementwise product drives a stack of
//! bidirectional GRU layers whose output is mapped to a logistic mask over
//! frequency. Gradients are computed by hand (backpropagation through
//! time) and checked against finite differences in the tests.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::beamform::TfMask;
use crate::signal::MultichannelSpectrogram;
use crate::{Error, Result, Scalar};

pub use crate::metrics::si_sdr;

/// Floor on magnitudes before taking logarithms.
pub const MAGNITUDE_FLOOR: f64 = 1e-7;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DPXMASK\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Target direction as a point on the unit circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction<T: Scalar> {
    pub cos: T,
    pub sin: T,
}

impl<T: Scalar> Direction<T> {
    pub fn from_azimuth(deg: f64) -> Self {
        let rad = deg.to_radians();
        Self { cos: T::lit(rad.cos()), sin: T::lit(rad.sin()) }
    }

    fn as_row(&self) -> Array2<T> {
        Array2::from_shape_vec((1, 2), vec![self.cos, self.sin]).expect("1x2")
    }
}

/// Per-frame features `(T, 2MF)`: log-magnitude of channel 1, log-magnitude
/// of the delay-and-sum output toward `steering` `(F, M)`, then cosines and
/// sines of the phase of channels 2..M relative to channel 1.
pub fn extract_features<T: Scalar>(x: &MultichannelSpectrogram<T>, steering: ArrayView2<num_complex::Complex<T>>) -> Result<Array2<T>> {
    let (f_n, t_n, m_n) = (x.freqs(), x.frames(), x.channels());
    if m_n < 2 {
        return Err(Error::Shape("features need at least two channels".into()));
    }
    if steering.dim() != (f_n, m_n) {
        return Err(Error::Shape(format!("steering is {:?}, expected ({f_n}, {m_n})", steering.dim())));
    }
    let floor = T::lit(MAGNITUDE_FLOOR);
    let data = x.data();
    let mut out = Array2::zeros((t_n, 2 * m_n * f_n));
    let ipd = m_n - 1;
    for t in 0..t_n {
        let mut row = out.row_mut(t);
        for f in 0..f_n {
            let x1 = data[[f, t, 0]];
            row[f] = x1.norm().max(floor).ln();
            let mut y = num_complex::Complex::new(T::zero(), T::zero());
            for m in 0..m_n {
                y += steering[[f, m]].conj() * data[[f, t, m]];
            }
            row[f_n + f] = y.norm().max(floor).ln();
            for m in 1..m_n {
                let phase = (data[[f, t, m]] * x1.conj()).arg();
                row[2 * f_n + (m - 1) * f_n + f] = phase.cos();
                row[2 * f_n + ipd * f_n + (m - 1) * f_n + f] = phase.sin();
            }
        }
    }
    Ok(out)
}

/// Mask `|x̂| / (|x̂| + |x − x̂| + 1e-12)` of an estimated image `x̂` within
/// the observation `x`, both single-channel `(F, T)`.
pub fn teacher_mask_from_image<T: Scalar>(image: ArrayView2<num_complex::Complex<T>>, mixture: ArrayView2<num_complex::Complex<T>>) -> Result<TfMask<T>> {
    if image.dim() != mixture.dim() {
        return Err(Error::Shape(format!("image {:?} vs mixture {:?}", image.dim(), mixture.dim())));
    }
    let eps = T::lit(1e-12);
    let values = ndarray::Zip::from(image).and(mixture).map_collect(|&e, &x| {
        let a = e.norm();
        let m = a / (a + (x - e).norm() + eps);
        if m.is_finite() {
            m.max(T::zero()).min(T::one())
        } else {
            T::zero()
        }
    });
    TfMask::new(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskNetConfig {
    pub freqs: usize,
    pub channels: usize,
    /// Width of the feature and attractor embeddings.
    pub embed: usize,
    pub depth: usize,
    pub hidden: usize,
}

impl MaskNetConfig {
    pub fn new(freqs: usize, channels: usize) -> Self {
        Self { freqs, channels, embed: 128, depth: 1, hidden: 64 }
    }

    pub fn input_width(&self) -> usize {
        2 * self.channels * self.freqs
    }

    pub fn validate(&self) -> Result<()> {
        if self.freqs == 0 || self.channels < 2 || self.embed == 0 || self.depth == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("invalid mask network dimensions {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Scalar> {
    /// `(out, in)`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    fn glorot(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inp + out) as f64).sqrt();
        Self { weight: Array2::from_shape_simple_fn((out, inp), || T::lit(rng.gen_range(-limit..limit))), bias: Array1::zeros(out) }
    }

    fn zeros_like(&self) -> Self {
        Self { weight: Array2::zeros(self.weight.raw_dim()), bias: Array1::zeros(self.bias.len()) }
    }

    fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Accumulates parameter gradients for `y = x Wᵀ + b` and returns `∂/∂x`
    /// when requested.
    fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Self, want_dx: bool) -> Option<Array2<T>> {
        grad.weight += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0));
        want_dx.then(|| dy.dot(&self.weight))
    }
}

/// One direction of a GRU layer, gates ordered reset, update, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell<T: Scalar> {
    /// `(3h, in)`.
    pub w_ih: Array2<T>,
    /// `(3h, h)`.
    pub w_hh: Array2<T>,
    pub b_ih: Array1<T>,
    pub b_hh: Array1<T>,
}

struct GruTrace<T: Scalar> {
    x: Array2<T>,
    /// Row 0 is the zero initial state; row `t + 1` is the output at step `t`.
    h: Array2<T>,
    r: Array2<T>,
    z: Array2<T>,
    n: Array2<T>,
    /// Hidden-side candidate pre-activation `W_hn h + b_hn`.
    hn: Array2<T>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> GruCell<T> {
    fn glorot(inp: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let li = (6.0 / (inp + 3 * hidden) as f64).sqrt();
        let lh = (6.0 / (4 * hidden) as f64).sqrt();
        Self {
            w_ih: Array2::from_shape_simple_fn((3 * hidden, inp), || T::lit(rng.gen_range(-li..li))),
            w_hh: Array2::from_shape_simple_fn((3 * hidden, hidden), || T::lit(rng.gen_range(-lh..lh))),
            b_ih: Array1::zeros(3 * hidden),
            b_hh: Array1::zeros(3 * hidden),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w_ih: Array2::zeros(self.w_ih.raw_dim()),
            w_hh: Array2::zeros(self.w_hh.raw_dim()),
            b_ih: Array1::zeros(self.b_ih.len()),
            b_hh: Array1::zeros(self.b_hh.len()),
        }
    }

    fn hidden(&self) -> usize {
        self.w_hh.ncols()
    }

    /// Runs over the rows of `x` in order.
    fn run(&self, x: Array2<T>) -> GruTrace<T> {
        let (t_n, h_n) = (x.nrows(), self.hidden());
        let gi = x.dot(&self.w_ih.t()) + &self.b_ih;
        let mut h = Array2::zeros((t_n + 1, h_n));
        let mut r = Array2::zeros((t_n, h_n));
        let mut z = Array2::zeros((t_n, h_n));
        let mut n = Array2::zeros((t_n, h_n));
        let mut hn = Array2::zeros((t_n, h_n));
        for t in 0..t_n {
            let gh = self.w_hh.dot(&h.row(t)) + &self.b_hh;
            for k in 0..h_n {
                let rk = sigmoid(gi[[t, k]] + gh[k]);
                let zk = sigmoid(gi[[t, h_n + k]] + gh[h_n + k]);
                let nk = (gi[[t, 2 * h_n + k]] + rk * gh[2 * h_n + k]).tanh();
                r[[t, k]] = rk;
                z[[t, k]] = zk;
                n[[t, k]] = nk;
                hn[[t, k]] = gh[2 * h_n + k];
                h[[t + 1, k]] = (T::one() - zk) * nk + zk * h[[t, k]];
            }
        }
        GruTrace { x, h, r, z, n, hn }
    }

    /// Backpropagates `dh_out` (gradient w.r.t. every output, in run order)
    /// and returns the gradient w.r.t. the inputs.
    fn backward(&self, tr: &GruTrace<T>, dh_out: ArrayView2<T>, grad: &mut Self) -> Array2<T> {
        let (t_n, h_n) = (tr.x.nrows(), self.hidden());
        let mut d_gi = Array2::zeros((t_n, 3 * h_n));
        let mut d_gh = Array2::zeros((t_n, 3 * h_n));
        let mut carry = Array1::<T>::zeros(h_n);
        for t in (0..t_n).rev() {
            let mut dh_prev = Array1::<T>::zeros(h_n);
            for k in 0..h_n {
                let dh = dh_out[[t, k]] + carry[k];
                let (r, z, n, hp) = (tr.r[[t, k]], tr.z[[t, k]], tr.n[[t, k]], tr.h[[t, k]]);
                let dn = dh * (T::one() - z) * (T::one() - n * n);
                let dz = dh * (hp - n) * z * (T::one() - z);
                let dr = dn * tr.hn[[t, k]] * r * (T::one() - r);
                d_gi[[t, k]] = dr;
                d_gi[[t, h_n + k]] = dz;
                d_gi[[t, 2 * h_n + k]] = dn;
                d_gh[[t, k]] = dr;
                d_gh[[t, h_n + k]] = dz;
                d_gh[[t, 2 * h_n + k]] = dn * r;
                dh_prev[k] = dh * z;
            }
            dh_prev += &d_gh.row(t).dot(&self.w_hh);
            carry = dh_prev;
        }
        grad.w_ih += &d_gi.t().dot(&tr.x);
        grad.b_ih += &d_gi.sum_axis(Axis(0));
        grad.w_hh += &d_gh.t().dot(&tr.h.slice(s![..t_n, ..]));
        grad.b_hh += &d_gh.sum_axis(Axis(0));
        d_gi.dot(&self.w_ih)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskNet<T: Scalar> {
    pub config: MaskNetConfig,
    pub encoder: [Dense<T>; 3],
    pub attractor: [Dense<T>; 3],
    /// `[forward, backward]` cells per layer.
    pub recurrent: Vec<[GruCell<T>; 2]>,
    pub output: Dense<T>,
}

struct Trace<T: Scalar> {
    enc: [Array2<T>; 4],
    att: [Array2<T>; 4],
    layers: Vec<(GruTrace<T>, GruTrace<T>)>,
    core: Array2<T>,
    /// `(T, F)` logistic output.
    mask: Array2<T>,
}

fn relu<T: Scalar>(a: &Array2<T>) -> Array2<T> {
    a.mapv(|v| v.max(T::zero()))
}

fn relu_grad<T: Scalar>(d: Array2<T>, pre: &Array2<T>) -> Array2<T> {
    ndarray::Zip::from(&d).and(pre).map_collect(|&g, &p| if p > T::zero() { g } else { T::zero() })
}

fn reversed<T: Scalar>(a: ArrayView2<T>) -> Array2<T> {
    a.slice(s![..;-1, ..]).to_owned()
}

/// Training example: features `(T, 2MF)`, target direction and teacher
/// mask `(F, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample<T: Scalar> {
    pub features: Array2<T>,
    pub direction: Direction<T>,
    pub target: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 8, epochs: 10, seed: 0 }
    }
}

impl<T: Scalar> MaskNet<T> {
    pub fn new(config: MaskNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, h) = (config.embed, config.hidden);
        let encoder = [Dense::glorot(l, config.input_width(), &mut rng), Dense::glorot(l, l, &mut rng), Dense::glorot(l, l, &mut rng)];
        let attractor = [Dense::glorot(l, 2, &mut rng), Dense::glorot(l, l, &mut rng), Dense::glorot(l, l, &mut rng)];
        let recurrent = (0..config.depth)
            .map(|k| {
                let inp = if k == 0 { l } else { 2 * h };
                [GruCell::glorot(inp, h, &mut rng), GruCell::glorot(inp, h, &mut rng)]
            })
            .collect();
        let output = Dense::glorot(config.freqs, 2 * h, &mut rng);
        Ok(Self { config, encoder, attractor, recurrent, output })
    }

    /// All-zero network of the same shape, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            encoder: self.encoder.clone().map(|d| d.zeros_like()),
            attractor: self.attractor.clone().map(|d| d.zeros_like()),
            recurrent: self.recurrent.iter().map(|c| [c[0].zeros_like(), c[1].zeros_like()]).collect(),
            output: self.output.zeros_like(),
        }
    }

    /// Parameter tensors in canonical order: encoder then attractor layers
    /// (weight, bias), recurrent layers (forward then backward cell, each
    /// `w_ih, w_hh, b_ih, b_hh`), output (weight, bias).
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for d in self.encoder.iter().chain(&self.attractor) {
            out.push(d.weight.as_slice().expect("standard layout"));
            out.push(d.bias.as_slice().expect("standard layout"));
        }
        for cell in self.recurrent.iter().flatten() {
            for a in [&cell.w_ih, &cell.w_hh] {
                out.push(a.as_slice().expect("standard layout"));
            }
            for b in [&cell.b_ih, &cell.b_hh] {
                out.push(b.as_slice().expect("standard layout"));
            }
        }
        out.push(self.output.weight.as_slice().expect("standard layout"));
        out.push(self.output.bias.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for d in self.encoder.iter_mut().chain(self.attractor.iter_mut()) {
            out.push(d.weight.as_slice_mut().expect("standard layout"));
            out.push(d.bias.as_slice_mut().expect("standard layout"));
        }
        for cell in self.recurrent.iter_mut().flatten() {
            out.push(cell.w_ih.as_slice_mut().expect("standard layout"));
            out.push(cell.w_hh.as_slice_mut().expect("standard layout"));
            out.push(cell.b_ih.as_slice_mut().expect("standard layout"));
            out.push(cell.b_hh.as_slice_mut().expect("standard layout"));
        }
        out.push(self.output.weight.as_slice_mut().expect("standard layout"));
        out.push(self.output.bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_features(&self, features: &Array2<T>) -> Result<()> {
        if features.ncols() != self.config.input_width() {
            return Err(Error::Shape(format!("features have width {}, network expects {}", features.ncols(), self.config.input_width())));
        }
        if features.nrows() == 0 {
            return Err(Error::Shape("feature block has no frames".into()));
        }
        Ok(())
    }

    fn run(&self, features: &Array2<T>, direction: Direction<T>) -> Trace<T> {
        let e1 = self.encoder[0].forward(features.view());
        let e2 = self.encoder[1].forward(relu(&e1).view());
        let e3 = self.encoder[2].forward(relu(&e2).view());
        let d = direction.as_row();
        let a1 = self.attractor[0].forward(d.view());
        let a2 = self.attractor[1].forward(relu(&a1).view());
        let a3 = self.attractor[2].forward(relu(&a2).view());
        let gated = &e3 * &a3.row(0);
        let h = self.config.hidden;
        let mut layers = Vec::with_capacity(self.recurrent.len());
        let mut input = gated;
        for cells in &self.recurrent {
            let fwd = cells[0].run(input.clone());
            let bwd = cells[1].run(reversed(input.view()));
            let t_n = input.nrows();
            let mut next = Array2::zeros((t_n, 2 * h));
            next.slice_mut(s![.., ..h]).assign(&fwd.h.slice(s![1.., ..]));
            next.slice_mut(s![.., h..]).assign(&bwd.h.slice(s![1..;-1, ..]));
            layers.push((fwd, bwd));
            input = next;
        }
        let mask = self.output.forward(input.view()).mapv(sigmoid);
        Trace { enc: [features.clone(), e1, e2, e3], att: [d, a1, a2, a3], layers, core: input, mask }
    }

    /// Mask `(F, T)` for `features (T, 2MF)` toward `direction`.
    pub fn forward(&self, features: &Array2<T>, direction: Direction<T>) -> Result<TfMask<T>> {
        self.check_features(features)?;
        TfMask::new(self.run(features, direction).mask.reversed_axes().as_standard_layout().to_owned())
    }

    /// Mean squared error against `target (F, T)` and its gradient with
    /// respect to every parameter.
    pub fn loss_and_gradients(&self, features: &Array2<T>, direction: Direction<T>, target: &Array2<T>) -> Result<(T, Self)> {
        let mut grad = self.zeros_like();
        let loss = self.accumulate_gradients(features, direction, target, T::one(), &mut grad)?;
        Ok((loss, grad))
    }

    /// Adds `weight · ∂loss/∂θ` into `grad` and returns the loss.
    fn accumulate_gradients(&self, features: &Array2<T>, direction: Direction<T>, target: &Array2<T>, weight: T, grad: &mut Self) -> Result<T> {
        self.check_features(features)?;
        let t_n = features.nrows();
        if target.dim() != (self.config.freqs, t_n) {
            return Err(Error::Shape(format!("target is {:?}, expected ({}, {t_n})", target.dim(), self.config.freqs)));
        }
        let tr = self.run(features, direction);
        let count = T::lit((self.config.freqs * t_n) as f64);
        let diff = &tr.mask - &target.t();
        let loss = diff.iter().map(|d| *d * *d).sum::<T>() / count;
        if !loss.is_finite() {
            return Err(Error::TrainingDivergence { epoch: 0, trace: vec![loss.as_f64()] });
        }
        let scale = T::lit(2.0) * weight / count;
        let d_out = ndarray::Zip::from(&diff).and(&tr.mask).map_collect(|&d, &m| scale * d * m * (T::one() - m));
        let mut d_core = self.output.backward(tr.core.view(), d_out.view(), &mut grad.output, true).expect("requested");

        let h = self.config.hidden;
        for (k, cells) in self.recurrent.iter().enumerate().rev() {
            let (fwd, bwd) = &tr.layers[k];
            let dx_f = cells[0].backward(fwd, d_core.slice(s![.., ..h]), &mut grad.recurrent[k][0]);
            let d_bwd = reversed(d_core.slice(s![.., h..]));
            let dx_b = cells[1].backward(bwd, d_bwd.view(), &mut grad.recurrent[k][1]);
            d_core = dx_f + &dx_b.slice(s![..;-1, ..]);
        }
        let d_gated = d_core;

        let c = tr.att[3].row(0);
        let d_e3 = &d_gated * &c;
        let d_a3 = (&d_gated * &tr.enc[3]).sum_axis(Axis(0)).insert_axis(Axis(0));

        let d = self.encoder[2].backward(relu(&tr.enc[2]).view(), d_e3.view(), &mut grad.encoder[2], true).expect("requested");
        let d = relu_grad(d, &tr.enc[2]);
        let d = self.encoder[1].backward(relu(&tr.enc[1]).view(), d.view(), &mut grad.encoder[1], true).expect("requested");
        let d = relu_grad(d, &tr.enc[1]);
        self.encoder[0].backward(tr.enc[0].view(), d.view(), &mut grad.encoder[0], false);

        let d = self.attractor[2].backward(relu(&tr.att[2]).view(), d_a3.view(), &mut grad.attractor[2], true).expect("requested");
        let d = relu_grad(d, &tr.att[2]);
        let d = self.attractor[1].backward(relu(&tr.att[1]).view(), d.view(), &mut grad.attractor[1], true).expect("requested");
        let d = relu_grad(d, &tr.att[1]);
        self.attractor[0].backward(tr.att[0].view(), d.view(), &mut grad.attractor[0], false);
        Ok(loss)
    }

    /// Mean loss over a dataset without updating parameters.
    pub fn evaluate(&self, data: &[TrainingSample<T>]) -> Result<f64> {
        let mut total = 0.0;
        for s in data {
            let tr = self.run(&s.features, s.direction);
            let diff = &tr.mask - &s.target.t();
            total += diff.iter().map(|d| (*d * *d).as_f64()).sum::<f64>() / diff.len() as f64;
        }
        Ok(total / data.len().max(1) as f64)
    }

    /// Mini-batch training with Adam (β₁ 0.9, β₂ 0.999, ε 1e-8), shuffling
    /// each epoch. Returns the mean training loss of every epoch.
    pub fn train(&mut self, data: &[TrainingSample<T>], cfg: &TrainConfig) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if !(cfg.learning_rate >= 0.0) || cfg.batch_size == 0 {
            return Err(Error::Config("learning rate must be non-negative and batch size positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(self, cfg.learning_rate);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut trace = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let mut grad = self.zeros_like();
                let w = T::one() / T::lit(batch.len() as f64);
                for &i in batch {
                    let s = &data[i];
                    match self.accumulate_gradients(&s.features, s.direction, &s.target, w, &mut grad) {
                        Ok(l) => total += l.as_f64(),
                        Err(Error::TrainingDivergence { .. }) => {
                            trace.push(f64::NAN);
                            return Err(Error::TrainingDivergence { epoch, trace });
                        }
                        Err(e) => return Err(e),
                    }
                }
                adam.step(self, &grad);
            }
            let mean = total / data.len() as f64;
            trace.push(mean);
            if !mean.is_finite() || !self.is_finite() {
                return Err(Error::TrainingDivergence { epoch, trace });
            }
            log::debug!("epoch {epoch}: loss {mean:.6}");
        }
        Ok(trace)
    }

    /// Writes the checkpoint layout: magic `DPXMASK\0`, little-endian `u32`
    /// version, F, M, L, depth, hidden, then every tensor in canonical
    /// order as row-major little-endian `f32`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let c = self.config;
        for d in [CHECKPOINT_VERSION, c.freqs as u32, c.channels as u32, c.embed as u32, c.depth as u32, c.hidden as u32] {
            w.write_all(&d.to_le_bytes())?;
        }
        for t in self.tensors() {
            for v in t {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a mask network checkpoint".into()));
        }
        let mut dims = [0u32; 6];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b);
        }
        if dims[0] != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", dims[0])));
        }
        let [freqs, channels, embed, depth, hidden] = [dims[1], dims[2], dims[3], dims[4], dims[5]].map(|d| d as usize);
        let mut net = Self::new(MaskNetConfig { freqs, channels, embed, depth, hidden }, 0)?;
        for t in net.tensors_mut() {
            for v in t.iter_mut() {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                *v = T::lit(f32::from_le_bytes(b) as f64);
            }
        }
        if !net.is_finite() {
            return Err(Error::Format("checkpoint holds non-finite parameters".into()));
        }
        Ok(net)
    }

    pub fn cast<U: Scalar>(&self) -> MaskNet<U> {
        let mut out = MaskNet::<U>::new(self.config, 0).expect("valid config");
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::lit(s.as_f64());
            }
        }
        out
    }
}

struct Adam<T: Scalar> {
    lr: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: i32,
}

impl<T: Scalar> Adam<T> {
    fn new(net: &MaskNet<T>, lr: f64) -> Self {
        let m: Vec<Vec<T>> = net.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        Self { lr, v: m.clone(), m, step: 0 }
    }

    fn step(&mut self, net: &mut MaskNet<T>, grad: &MaskNet<T>) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.step += 1;
        let c1 = T::lit(1.0 - B1.powi(self.step));
        let c2 = T::lit(1.0 - B2.powi(self.step));
        let (b1, b2, lr, eps) = (T::lit(B1), T::lit(B2), T::lit(self.lr), T::lit(1e-8));
        for (((p, g), m), v) in net.tensors_mut().into_iter().zip(grad.tensors()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}
