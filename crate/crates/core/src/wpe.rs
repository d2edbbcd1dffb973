//! Block-wise weighted prediction error (WPE) dereverberation.
//!
//! Each frequency bin is processed independently with one MIMO prediction
//! filter that predicts all channels from `taps` frames starting `delay`
//! frames in the past. Filters are re-estimated from scratch for every
//! block; no state crosses block boundaries.

use ndarray::{s, Array2, ArrayView2, Axis};
use num_complex::Complex;
use num_traits::Zero;

use crate::linalg;
use crate::signal::MultichannelSpectrogram;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WpeConfig {
    pub taps: usize,
    pub delay: usize,
    pub iterations: usize,
    /// Lower bound on the per-frame variance, relative to the mean power
    /// of the block at that frequency.
    pub variance_floor: f64,
}

impl Default for WpeConfig {
    fn default() -> Self {
        Self { taps: 5, delay: 3, iterations: 3, variance_floor: 1e-6 }
    }
}

impl WpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taps == 0 || self.delay == 0 || self.iterations == 0 {
            return Err(Error::Config("WPE taps, delay and iterations must all be at least 1".into()));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::Config("WPE variance floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct WpeOutput<T: Scalar> {
    pub spectrogram: MultichannelSpectrogram<T>,
    /// Set when the block was too short to predict from and was passed
    /// through unchanged.
    pub bypassed: bool,
    /// Objective `Σ_t ‖d_t‖²/λ_t + M ln λ_t` per frequency `(F, iterations + 1)`:
    /// column 0 evaluates the unprocessed input against the first variance
    /// estimate, column `i` the output of iteration `i`.
    pub objective: Array2<T>,
}

/// Result of WPE at one frequency bin.
#[derive(Debug, Clone)]
pub struct BinResult<T: Scalar> {
    /// Dereverberated `(T, M)` frames.
    pub output: Array2<Complex<T>>,
    /// Final prediction filter `(M·K, M)`.
    pub filter: Array2<Complex<T>>,
    pub objective: Vec<T>,
}

/// Dereverberates a block. Blocks with `T <= delay + taps` frames are
/// returned unchanged with `bypassed` set.
pub fn wpe_block<T: Scalar>(x: &MultichannelSpectrogram<T>, cfg: &WpeConfig) -> Result<WpeOutput<T>> {
    cfg.validate()?;
    let (f_n, t_n, _) = (x.freqs(), x.frames(), x.channels());
    if t_n <= cfg.delay + cfg.taps {
        log::warn!("WPE bypassed: {t_n} frames is not more than delay + taps");
        return Ok(WpeOutput { spectrogram: x.clone(), bypassed: true, objective: Array2::zeros((f_n, cfg.iterations + 1)) });
    }
    let mut out = x.clone();
    let mut objective = Array2::zeros((f_n, cfg.iterations + 1));
    for f in 0..f_n {
        let res = wpe_bin(x.bin(f), cfg);
        out.data_mut().index_axis_mut(Axis(0), f).assign(&res.output);
        for (i, v) in res.objective.iter().enumerate() {
            objective[[f, i]] = *v;
        }
    }
    Ok(WpeOutput { spectrogram: out, bypassed: false, objective })
}

/// Stacked delayed frames `x̄_t = [x_{t-D}; …; x_{t-D-K+1}]`, zero where
/// the index precedes the block, as a `(T, M·K)` matrix.
pub fn delayed_stack<T: Scalar>(x: ArrayView2<Complex<T>>, taps: usize, delay: usize) -> Array2<Complex<T>> {
    let (t_n, m_n) = x.dim();
    let mut stack = Array2::zeros((t_n, m_n * taps));
    for k in 0..taps {
        let lag = delay + k;
        if lag >= t_n {
            break;
        }
        stack.slice_mut(s![lag.., k * m_n..(k + 1) * m_n]).assign(&x.slice(s![..t_n - lag, ..]));
    }
    stack
}

/// Per-frame variance `max(‖d_t‖²/M, floor)` of the split residual rows.
fn frame_variances<T: Scalar>(dr: &Array2<T>, di: &Array2<T>, floor: T) -> Vec<T> {
    let m = T::lit(dr.nrows() as f64);
    let mut power = vec![T::zero(); dr.ncols()];
    for (r, i) in dr.rows().into_iter().zip(di.rows()) {
        for ((p, &r), &i) in power.iter_mut().zip(&r).zip(&i) {
            *p += r * r + i * i;
        }
    }
    power.into_iter().map(|p| (p / m).max(floor)).collect()
}

fn objective_value<T: Scalar>(dr: &Array2<T>, di: &Array2<T>, lambda: &[T]) -> T {
    let m = T::lit(dr.nrows() as f64);
    let mut power = vec![T::zero(); lambda.len()];
    for (r, i) in dr.rows().into_iter().zip(di.rows()) {
        for ((p, &r), &i) in power.iter_mut().zip(&r).zip(&i) {
            *p += r * r + i * i;
        }
    }
    power.iter().zip(lambda).map(|(&p, &l)| p / l + m * l.ln()).sum()
}

/// Iterative WPE at a single frequency bin; `x` is `(T, M)`.
pub fn wpe_bin<T: Scalar>(x: ArrayView2<Complex<T>>, cfg: &WpeConfig) -> BinResult<T> {
    let (t_n, m_n) = x.dim();
    let mk = m_n * cfg.taps;
    let mean_power = x.iter().map(|z| z.norm_sqr()).sum::<T>() / T::lit((t_n * m_n).max(1) as f64);
    if mean_power == T::zero() {
        return BinResult { output: x.to_owned(), filter: Array2::zeros((mk, m_n)), objective: vec![T::zero(); cfg.iterations + 1] };
    }
    let floor = T::lit(cfg.variance_floor) * mean_power;
    let parts = SplitRows::new(x, cfg.taps, cfg.delay);
    let observed = s![mk.., ..];
    let (mut dr, mut di) = (parts.re.slice(observed).to_owned(), parts.im.slice(observed).to_owned());
    let mut filter = Array2::zeros((mk, m_n));
    let mut objective = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..cfg.iterations {
        let lambda = frame_variances(&dr, &di, floor);
        if it == 0 {
            objective.push(objective_value(&dr, &di, &lambda));
        }
        let inv: Vec<T> = lambda.iter().map(|&l| T::one() / l).collect();
        let (cov, cross) = weighted_moments(&parts, mk, &inv);
        filter = solve_prediction(cov, &cross);
        dr.assign(&parts.re.slice(observed));
        di.assign(&parts.im.slice(observed));
        subtract_prediction(&parts, &filter, &mut dr, &mut di);
        objective.push(objective_value(&dr, &di, &lambda));
    }
    let output = Array2::from_shape_fn((t_n, m_n), |(t, m)| Complex::new(dr[[m, t]], di[[m, t]]));
    BinResult { output, filter, objective }
}

/// The delayed stack `x̄_t` (rows `0..M·K`) followed by the observed
/// channels (rows `M·K..`), one contiguous row per series over time, with
/// real and imaginary parts kept apart so that the time sums vectorize.
struct SplitRows<T> {
    re: Array2<T>,
    im: Array2<T>,
}

impl<T: Scalar> SplitRows<T> {
    fn new(x: ArrayView2<Complex<T>>, taps: usize, delay: usize) -> Self {
        let (t_n, m_n) = x.dim();
        let rows = m_n * (taps + 1);
        let (mut re, mut im) = (Array2::zeros((rows, t_n)), Array2::zeros((rows, t_n)));
        for row in 0..rows {
            // Stack rows are `x_{t-delay-k}` for tap `k`; the last `M` rows have no lag.
            let (k, m) = (row / m_n, row % m_n);
            let lag = if k < taps { delay + k } else { 0 };
            for t in lag..t_n {
                let z = x[[t - lag, m]];
                re[[row, t]] = z.re;
                im[[row, t]] = z.im;
            }
        }
        Self { re, im }
    }
}

/// Sum of `a[i] * b[i]` over independent partial sums so the loop vectorizes.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let rest: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        let x: &[T; LANES] = x.try_into().expect("chunk of LANES");
        let y: &[T; LANES] = y.try_into().expect("chunk of LANES");
        for k in 0..LANES {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    acc.iter().fold(rest, |s, &v| s + v)
}

/// Weighted second moments `Σ_t w_t x̄_t x̄_tᴴ` (Hermitian, `(mk, mk)`) and
/// `Σ_t w_t x̄_t x_tᴴ` (`(mk, M)`). Only the upper triangle of the first is
/// summed; the lower triangle is its conjugate mirror.
fn weighted_moments<T: Scalar>(parts: &SplitRows<T>, mk: usize, w: &[T]) -> (Array2<Complex<T>>, Array2<Complex<T>>) {
    let total = parts.re.nrows();
    let mut cov = Array2::zeros((mk, mk));
    let mut cross = Array2::zeros((mk, total - mk));
    let mut wp = vec![T::zero(); w.len()];
    let mut wq = vec![T::zero(); w.len()];
    for i in 0..mk {
        let (p, q) = (parts.re.row(i), parts.im.row(i));
        for (((wp, wq), (&p, &q)), &w) in wp.iter_mut().zip(wq.iter_mut()).zip(p.iter().zip(&q)).zip(w) {
            *wp = p * w;
            *wq = q * w;
        }
        for j in i..total {
            let (pj, qj) = (parts.re.row(j), parts.im.row(j));
            let (pj, qj) = (pj.to_slice().expect("contiguous row"), qj.to_slice().expect("contiguous row"));
            let v = Complex::new(dot(&wp, pj) + dot(&wq, qj), dot(&wq, pj) - dot(&wp, qj));
            if j < mk {
                cov[[i, j]] = v;
                cov[[j, i]] = v.conj();
            } else {
                cross[[i, j - mk]] = v;
            }
        }
    }
    (cov, cross)
}

/// `d_t -= Gᴴ x̄_t` on split rows; `d` starts as the observed channels.
fn subtract_prediction<T: Scalar>(parts: &SplitRows<T>, filter: &Array2<Complex<T>>, dr: &mut Array2<T>, di: &mut Array2<T>) {
    for (m, (mut dr, mut di)) in dr.rows_mut().into_iter().zip(di.rows_mut()).enumerate() {
        let (dr, di) = (dr.as_slice_mut().expect("contiguous row"), di.as_slice_mut().expect("contiguous row"));
        for (i, g) in filter.column(m).iter().enumerate() {
            let (p, q) = (parts.re.row(i), parts.im.row(i));
            let (p, q) = (p.to_slice().expect("contiguous row"), q.to_slice().expect("contiguous row"));
            // x̄ · conj(g) = (p + iq)(g.re − i g.im)
            for (((dr, di), &p), &q) in dr.iter_mut().zip(di.iter_mut()).zip(p).zip(q) {
                *dr -= p * g.re + q * g.im;
                *di -= q * g.re - p * g.im;
            }
        }
    }
}

/// Solves `R G = P`, adding `1e-6 · tr(R)/MK` to the diagonal if `R` is
/// not numerically positive definite.
fn solve_prediction<T: Scalar>(mut cov: Array2<Complex<T>>, cross: &Array2<Complex<T>>) -> Array2<Complex<T>> {
    if let Some(l) = linalg::cholesky(cov.view()) {
        return linalg::cholesky_solve(l.view(), cross.view());
    }
    let n = cov.nrows();
    let tr = linalg::trace(cov.view()).re;
    if tr > T::zero() {
        linalg::add_diagonal(&mut cov, T::lit(1e-6) * tr / T::lit(n as f64));
        if let Some(l) = linalg::cholesky(cov.view()) {
            return linalg::cholesky_solve(l.view(), cross.view());
        }
    }
    log::warn!("WPE prediction covariance is singular; leaving the bin unfiltered");
    Array2::from_elem(cross.raw_dim(), Complex::zero())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gauss(rng: &mut ChaCha8Rng) -> Complex<f64> {
        Complex::new(rng.sample::<f64, _>(rand_distr::StandardNormal), rng.sample::<f64, _>(rand_distr::StandardNormal)) / 2f64.sqrt()
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = MultichannelSpectrogram::<f64>::zeros(4, 30, 2);
        let out = wpe_block(&x, &WpeConfig::default()).unwrap();
        assert!(!out.bypassed);
        assert_eq!(out.spectrogram, x);
    }

    #[test]
    fn short_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in [3, 8] {
            let x = MultichannelSpectrogram::new(Array3::from_shape_fn((3, t, 2), |_| gauss(&mut rng)));
            let out = wpe_block(&x, &WpeConfig::default()).unwrap();
            assert!(out.bypassed);
            assert_eq!(out.spectrogram, x);
        }
    }

    #[test]
    fn invalid_config() {
        let x = MultichannelSpectrogram::<f64>::zeros(1, 30, 2);
        assert!(wpe_block(&x, &WpeConfig { taps: 0, ..WpeConfig::default() }).is_err());
        assert!(wpe_block(&x, &WpeConfig { iterations: 0, ..WpeConfig::default() }).is_err());
    }

    #[test]
    fn early_frames_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((200, 3), |_| gauss(&mut rng));
        let cfg = WpeConfig::default();
        let res = wpe_bin(x.view(), &cfg);
        for t in 0..cfg.delay {
            assert_eq!(res.output.row(t), x.row(t));
        }
    }

    #[test]
    fn stack_layout() {
        let x = Array2::from_shape_fn((6, 2), |(t, m)| Complex::new((10 * t + m) as f64, 0.0));
        let st = delayed_stack(x.view(), 2, 3);
        assert_eq!(st.dim(), (6, 4));
        assert_eq!(st[[3, 0]].re, 0.0);
        assert_eq!(st[[3, 1]].re, 1.0);
        assert_eq!(st[[4, 2]].re, 0.0);
        assert_eq!(st[[5, 3]].re, 11.0);
        assert!(st.slice(s![..3, ..]).iter().all(|z| z.is_zero()));
    }

    #[test]
    fn objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..10 {
            // nonstationary source with a reverberant tail
            let t_n = 150;
            let scale: Vec<f64> = (0..t_n).map(|_| rng.gen_range(0.05..3.0)).collect();
            let s = Array2::from_shape_fn((t_n, 3), |(t, _)| gauss(&mut rng) * scale[t]);
            let mut x = s.clone();
            for t in 5..t_n {
                for m in 0..3 {
                    let echo = x[[t - 4, m]] * 0.6 + x[[t - 5, (m + 1) % 3]] * 0.2;
                    x[[t, m]] += echo;
                }
            }
            let res = wpe_bin(x.view(), &WpeConfig { iterations: 6, ..WpeConfig::default() });
            for w in res.objective.windows(2) {
                assert!(w[1] <= w[0] + 1e-8 * w[0].abs(), "trial {trial}: {:?}", res.objective);
            }
        }
    }

    #[test]
    fn white_input_learns_small_filter() {
        // Estimation noise in G scales like sqrt(M²K/T).
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let norm = |a: &Array2<Complex<f64>>| a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let x = Array2::from_shape_fn((2000, 2), |_| gauss(&mut rng));
        let res = wpe_bin(x.view(), &WpeConfig::default());
        let predicted = &x - &res.output;
        assert!(norm(&predicted) <= 0.1 * norm(&x), "{}", norm(&predicted) / norm(&x));
        let x = Array2::from_shape_fn((8000, 2), |_| gauss(&mut rng));
        let res = wpe_bin(x.view(), &WpeConfig::default());
        assert!(norm(&res.filter) <= 0.1, "‖G‖ = {}", norm(&res.filter));
    }

    #[test]
    fn recursive_echo_is_removed() {
        // x_t = s_t + 0.8 x_{t-4}: exactly representable by the prediction model
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t_n = 3000;
        let s = Array2::from_shape_fn((t_n, 2), |_| gauss(&mut rng));
        let mut x = s.clone();
        for t in 4..t_n {
            for m in 0..2 {
                let prev = x[[t - 4, m]];
                x[[t, m]] += prev * 0.8;
            }
        }
        let res = wpe_bin(x.view(), &WpeConfig::default());
        let err = |a: &Array2<Complex<f64>>| (a - &s).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        assert!(err(&res.output) <= 0.1 * err(&x), "{} vs {}", err(&res.output), err(&x));
    }
}
