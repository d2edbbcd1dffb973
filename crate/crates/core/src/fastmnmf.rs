//! FastMNMF blind source separation.
//!
//! Every source image has a full-rank spatial covariance that is jointly
//! diagonalized per frequency by `Q_f`:
//!
//! ```text
//! x_ft ~ N_c(0, Σ_n λ_nft · Q_f⁻¹ Diag(g̃_n) Q_f⁻ᴴ),   λ_nft = Σ_c u_ncf v_nct
//! ```
//!
//! The decorrelated observation `y_ft = Q_f x_ft` then has independent
//! channels with variances `σ²_mft = Σ_n λ_nft g̃_mn`. Fitting alternates
//! majorization-minimization updates of the NMF factors and the gains with
//! iterative-projection updates of `Q_f`, so the log-likelihood never
//! decreases.
//!
//! Fitting runs in two phases. The first ties `λ_nft` to a single
//! activation per frame (one component, bases fixed at 1). The second
//! splits each activation into `C` components with random weights that sum
//! to one, which leaves the likelihood unchanged at the switch.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{self, Lu};
use crate::signal::MultichannelSpectrogram;
use crate::{Error, Result, Scalar};

/// Floor applied to U, V and G after every update.
pub const PARAM_FLOOR: f64 = 1e-10;
/// Floor applied to modeled variances and Wiener denominators.
pub const VARIANCE_FLOOR: f64 = 1e-12;

const DUMP_MAGIC: &[u8; 8] = b"DPXMNMF\0";
const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FastMnmfConfig {
    pub sources: usize,
    pub components: usize,
    pub iters_freq_invariant: usize,
    pub iters_full: usize,
    pub eps_init: f64,
    pub seed: u64,
}

impl Default for FastMnmfConfig {
    fn default() -> Self {
        Self { sources: 3, components: 8, iters_freq_invariant: 50, iters_full: 50, eps_init: 0.01, seed: 0 }
    }
}

impl FastMnmfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sources == 0 || self.components == 0 {
            return Err(Error::Config("FastMNMF needs at least one source and one component".into()));
        }
        if !(self.eps_init > 0.0 && self.eps_init <= 1.0) {
            return Err(Error::Config("FastMNMF eps_init must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FastMnmfModel<T: Scalar> {
    /// Diagonalizers `(F, M, M)`.
    pub q: Array3<Complex<T>>,
    /// Bases `(N, C, F)`.
    pub u: Array3<T>,
    /// Activations `(N, C, T)`.
    pub v: Array3<T>,
    /// Frequency-invariant gains `(M, N)`.
    pub g: Array2<T>,
}

impl<T: Scalar> FastMnmfModel<T> {
    pub fn freqs(&self) -> usize {
        self.q.dim().0
    }

    pub fn channels(&self) -> usize {
        self.q.dim().1
    }

    pub fn sources(&self) -> usize {
        self.u.dim().0
    }

    pub fn components(&self) -> usize {
        self.u.dim().1
    }

    pub fn frames(&self) -> usize {
        self.v.dim().2
    }

    /// Source power spectra `λ (N, F, T)`.
    pub fn lambda(&self) -> Array3<T> {
        let (n_n, _, f_n) = self.u.dim();
        let t_n = self.frames();
        let mut out = Array3::zeros((n_n, f_n, t_n));
        for n in 0..n_n {
            let l = self.u.index_axis(Axis(0), n).t().dot(&self.v.index_axis(Axis(0), n));
            out.index_axis_mut(Axis(0), n).assign(&l);
        }
        out
    }

    /// Modeled variances of the decorrelated channels `σ² (M, F, T)`,
    /// floored at [`VARIANCE_FLOOR`].
    pub fn sigma2(&self) -> Array3<T> {
        sigma2_from(&self.lambda(), &self.g)
    }

    /// Spatial covariance of source `n` at frequency `f`:
    /// `Q_f⁻¹ Diag(g̃_n) Q_f⁻ᴴ`.
    pub fn source_scm(&self, n: usize, f: usize) -> Result<Array2<Complex<T>>> {
        let qinv = Lu::new(self.q.index_axis(Axis(0), f)).ok_or(Error::Numerical(format!("Q not invertible at bin {f}")))?.inverse();
        let m_n = self.channels();
        let mut scaled = qinv.clone();
        for j in 0..m_n {
            let gj = self.g[[j, n]];
            scaled.column_mut(j).mapv_inplace(|z| z * gj);
        }
        Ok(linalg::matmul(scaled.view(), linalg::hermitian_transpose(qinv.view()).view()))
    }

    fn check_against(&self, x: &MultichannelSpectrogram<T>) -> Result<()> {
        if x.freqs() != self.freqs() || x.frames() != self.frames() || x.channels() != self.channels() {
            return Err(Error::Shape(format!(
                "model is F={} T={} M={} but observation is F={} T={} M={}",
                self.freqs(),
                self.frames(),
                self.channels(),
                x.freqs(),
                x.frames(),
                x.channels()
            )));
        }
        Ok(())
    }

    /// Writes the versioned binary layout: magic `DPXMNMF\0`, little-endian
    /// `u32` version, `u32` F, T, M, N, C, then `f64` values of Q (re, im
    /// interleaved, row-major `(F, M, M)`), U `(N, C, F)`, V `(N, C, T)`
    /// and G `(M, N)`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        let dims = [DUMP_VERSION, self.freqs() as u32, self.frames() as u32, self.channels() as u32, self.sources() as u32, self.components() as u32];
        for d in dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for z in self.q.iter() {
            w.write_all(&z.re.as_f64().to_le_bytes())?;
            w.write_all(&z.im.as_f64().to_le_bytes())?;
        }
        for x in self.u.iter().chain(self.v.iter()).chain(self.g.iter()) {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::Format("not a FastMNMF model dump".into()));
        }
        let mut word = || -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let version = word()?;
        if version != DUMP_VERSION {
            return Err(Error::Format(format!("unsupported FastMNMF dump version {version}")));
        }
        let [f_n, t_n, m_n, n_n, c_n] = [word()?, word()?, word()?, word()?, word()?].map(|d| d as usize);
        let mut real = || -> Result<T> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(T::lit(f64::from_le_bytes(b)))
        };
        let mut q = Array3::zeros((f_n, m_n, m_n));
        for z in q.iter_mut() {
            *z = Complex::new(real()?, real()?);
        }
        let mut u = Array3::zeros((n_n, c_n, f_n));
        for x in u.iter_mut() {
            *x = real()?;
        }
        let mut v = Array3::zeros((n_n, c_n, t_n));
        for x in v.iter_mut() {
            *x = real()?;
        }
        let mut g = Array2::zeros((m_n, n_n));
        for x in g.iter_mut() {
            *x = real()?;
        }
        Ok(Self { q, u, v, g })
    }
}

fn sigma2_from<T: Scalar>(lambda: &Array3<T>, g: &Array2<T>) -> Array3<T> {
    let (n_n, f_n, t_n) = lambda.dim();
    let m_n = g.nrows();
    let floor = T::lit(VARIANCE_FLOOR);
    let plane = f_n * t_n;
    let ls = lambda.as_slice().expect("standard layout");
    let mut out = vec![T::zero(); m_n * plane];
    for (m, dst) in out.chunks_mut(plane).enumerate() {
        let gm: Vec<T> = (0..n_n).map(|n| g[[m, n]]).collect();
        for (k, d) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (n, &gmn) in gm.iter().enumerate() {
                acc += gmn * ls[n * plane + k];
            }
            *d = acc.max(floor);
        }
    }
    Array3::from_shape_vec((m_n, f_n, t_n), out).expect("consistent shape")
}

/// Orthonormal complement of the unit vector `a`, as the columns of an
/// `M × (M-1)` matrix. The standard basis vector most aligned with `a` is
/// dropped, which keeps the remaining projections linearly independent.
fn orthonormal_complement<T: Scalar>(a: &Array1<Complex<T>>) -> Array2<Complex<T>> {
    let m_n = a.len();
    let skip = (0..m_n).max_by(|&i, &j| a[i].norm_sqr().partial_cmp(&a[j].norm_sqr()).unwrap()).unwrap_or(0);
    let mut basis: Vec<Array1<Complex<T>>> = vec![a.clone()];
    for k in (0..m_n).filter(|&k| k != skip) {
        let mut e = Array1::zeros(m_n);
        e[k] = Complex::new(T::one(), T::zero());
        // two passes of Gram-Schmidt for orthogonality to working precision
        for _ in 0..2 {
            for b in &basis {
                let c = linalg::inner(b.view(), e.view());
                e.zip_mut_with(b, |x, &y| *x -= y * c);
            }
        }
        let nrm = linalg::norm(e.view());
        e.mapv_inplace(|z| z / nrm);
        basis.push(e);
    }
    let mut out = Array2::zeros((m_n, m_n - 1));
    for (j, b) in basis.iter().skip(1).enumerate() {
        out.column_mut(j).assign(b);
    }
    out
}

/// Initializes the model from the target steering vectors `(F, M)`.
///
/// `Q_f⁻¹` has the target steering vector as its first column and an
/// orthonormal complement as the rest. Source 0 gets gains
/// `[1, ε, …, ε]`, the remaining sources uniform gains in `[ε, 1]`, and the
/// NMF factors are uniform in `[0.1, 1)`.
pub fn init_model<T: Scalar>(x: &MultichannelSpectrogram<T>, cfg: &FastMnmfConfig, steering: ArrayView2<Complex<T>>) -> Result<FastMnmfModel<T>> {
    cfg.validate()?;
    let (f_n, t_n, m_n) = (x.freqs(), x.frames(), x.channels());
    if steering.dim() != (f_n, m_n) {
        return Err(Error::Shape(format!("steering is {:?}, expected ({f_n}, {m_n})", steering.dim())));
    }
    if cfg.sources > m_n {
        log::warn!("FastMNMF with {} sources on {m_n} channels is not identifiable", cfg.sources);
    }
    let mut q = Array3::zeros((f_n, m_n, m_n));
    for f in 0..f_n {
        let a = steering.row(f).to_owned();
        let nrm = linalg::norm(a.view());
        if !(nrm > T::zero()) || !nrm.is_finite() {
            return Err(Error::InvalidSteering { freq: f });
        }
        let mut qinv = Array2::zeros((m_n, m_n));
        qinv.column_mut(0).assign(&a);
        let unit = a.mapv(|z| z / nrm);
        qinv.slice_mut(ndarray::s![.., 1..]).assign(&orthonormal_complement(&unit));
        let qf = Lu::new(qinv.view()).ok_or(Error::InvalidSteering { freq: f })?.inverse();
        q.index_axis_mut(Axis(0), f).assign(&qf);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = cfg.eps_init;
    let mut g = Array2::zeros((m_n, cfg.sources));
    for n in 0..cfg.sources {
        for m in 0..m_n {
            g[[m, n]] = T::lit(match (n, m) {
                (0, 0) => 1.0,
                (0, _) => eps,
                _ => rng.gen_range(eps..=1.0),
            });
        }
    }
    let u = Array3::from_shape_simple_fn((cfg.sources, cfg.components, f_n), || T::lit(rng.gen_range(0.1..1.0)));
    let v = Array3::from_shape_simple_fn((cfg.sources, cfg.components, t_n), || T::lit(rng.gen_range(0.1..1.0)));
    Ok(FastMnmfModel { q, u, v, g })
}

/// `y_ft = Q_f x_ft`.
pub fn decorrelate<T: Scalar>(x: &MultichannelSpectrogram<T>, q: &Array3<Complex<T>>) -> Result<MultichannelSpectrogram<T>> {
    let (f_n, t_n, m_n) = (x.freqs(), x.frames(), x.channels());
    if q.dim() != (f_n, m_n, m_n) {
        return Err(Error::Shape(format!("Q is {:?}, expected ({f_n}, {m_n}, {m_n})", q.dim())));
    }
    let mut y = Array3::zeros((f_n, t_n, m_n));
    for f in 0..f_n {
        let yf = x.bin(f).dot(&q.index_axis(Axis(0), f).t());
        y.index_axis_mut(Axis(0), f).assign(&yf);
    }
    Ok(MultichannelSpectrogram::new(y))
}

/// `|y_mft|²` laid out `(M, F, T)`.
pub fn decorrelated_power<T: Scalar>(x: &MultichannelSpectrogram<T>, q: &Array3<Complex<T>>) -> Result<Array3<T>> {
    let (f_n, t_n, m_n) = (x.freqs(), x.frames(), x.channels());
    if q.dim() != (f_n, m_n, m_n) {
        return Err(Error::Shape(format!("Q is {:?}, expected ({f_n}, {m_n}, {m_n})", q.dim())));
    }
    let data = x.data().as_standard_layout();
    let xs = data.as_slice().expect("standard layout");
    let q = q.as_standard_layout();
    let qs = q.as_slice().expect("standard layout");
    let mut out = vec![T::zero(); m_n * f_n * t_n];
    let plane = f_n * t_n;
    for f in 0..f_n {
        let qf = &qs[f * m_n * m_n..(f + 1) * m_n * m_n];
        for t in 0..t_n {
            let xt = &xs[(f * t_n + t) * m_n..(f * t_n + t + 1) * m_n];
            for m in 0..m_n {
                let row = &qf[m * m_n..(m + 1) * m_n];
                let acc = row.iter().zip(xt).fold(Complex::new(T::zero(), T::zero()), |acc, (a, b)| acc + a * b);
                out[m * plane + f * t_n + t] = acc.norm_sqr();
            }
        }
    }
    Ok(Array3::from_shape_vec((m_n, f_n, t_n), out).expect("consistent shape"))
}

fn ln_det_sum<T: Scalar>(q: &Array3<Complex<T>>) -> Result<T> {
    let mut acc = T::zero();
    for (f, qf) in q.outer_iter().enumerate() {
        let lu = Lu::new(qf).ok_or(Error::Numerical(format!("Q not invertible at bin {f}")))?;
        acc += lu.ln_abs_det_sq();
    }
    Ok(acc)
}

fn likelihood_from<T: Scalar>(y_power: &Array3<T>, sigma2: &Array3<T>, ln_det: T, frames: usize) -> T {
    let data: T = ndarray::Zip::from(y_power).and(sigma2).fold(T::zero(), |acc, &y, &s| acc - y / s - s.ln());
    data + T::lit(frames as f64) * ln_det
}

/// `Σ_{f,t,m} (−|y_mft|²/σ²_mft − ln σ²_mft) + T Σ_f ln|det Q_f|²`.
pub fn log_likelihood<T: Scalar>(x: &MultichannelSpectrogram<T>, model: &FastMnmfModel<T>) -> Result<T> {
    model.check_against(x)?;
    let y_power = decorrelated_power(x, &model.q)?;
    Ok(likelihood_from(&y_power, &model.sigma2(), ln_det_sum(&model.q)?, x.frames()))
}

/// Per-source weighted sums `A_nft = Σ_m g̃_mn ỹ_mft/σ⁴_mft` and
/// `B_nft = Σ_m g̃_mn/σ²_mft`.
fn gain_weighted<T: Scalar>(y_power: &Array3<T>, sigma2: &Array3<T>, g: &Array2<T>) -> (Array3<T>, Array3<T>) {
    let (m_n, f_n, t_n) = sigma2.dim();
    let n_n = g.ncols();
    let mut a = Array3::zeros((n_n, f_n, t_n));
    let mut b = Array3::zeros((n_n, f_n, t_n));
    let (ys, ss) = (y_power.as_slice().expect("standard layout"), sigma2.as_slice().expect("standard layout"));
    let plane = f_n * t_n;
    let (a_s, b_s) = (a.as_slice_mut().expect("fresh array"), b.as_slice_mut().expect("fresh array"));
    for m in 0..m_n {
        let (ym, sm) = (&ys[m * plane..(m + 1) * plane], &ss[m * plane..(m + 1) * plane]);
        for n in 0..n_n {
            let gmn = g[[m, n]];
            let (an, bn) = (&mut a_s[n * plane..(n + 1) * plane], &mut b_s[n * plane..(n + 1) * plane]);
            for k in 0..plane {
                let inv = gmn / sm[k];
                bn[k] += inv;
                an[k] += inv * ym[k] / sm[k];
            }
        }
    }
    (a, b)
}

fn floor_params<T: Scalar, D: ndarray::Dimension>(a: &mut ndarray::Array<T, D>) {
    let floor = T::lit(PARAM_FLOOR);
    a.mapv_inplace(|x| if x.is_finite() { x.max(floor) } else { floor });
}

/// One majorization-minimization round over the source parameters, in the
/// order bases, activations, gains. `y_power` is `|y_mft|²` laid out
/// `(M, F, T)`. With `update_bases` unset the bases are held fixed.
pub fn update_source_params<T: Scalar>(model: &mut FastMnmfModel<T>, y_power: &Array3<T>, update_bases: bool) {
    let n_n = model.sources();
    if update_bases {
        let (a, b) = gain_weighted(y_power, &model.sigma2(), &model.g);
        for n in 0..n_n {
            let vn = model.v.index_axis(Axis(0), n);
            let num = vn.dot(&a.index_axis(Axis(0), n).t());
            let den = vn.dot(&b.index_axis(Axis(0), n).t());
            ndarray::Zip::from(model.u.index_axis_mut(Axis(0), n)).and(&num).and(&den).for_each(|u, &p, &q| *u *= (p / q).sqrt());
        }
        floor_params(&mut model.u);
    }
    let (a, b) = gain_weighted(y_power, &model.sigma2(), &model.g);
    for n in 0..n_n {
        let un = model.u.index_axis(Axis(0), n);
        let num = un.dot(&a.index_axis(Axis(0), n));
        let den = un.dot(&b.index_axis(Axis(0), n));
        ndarray::Zip::from(model.v.index_axis_mut(Axis(0), n)).and(&num).and(&den).for_each(|v, &p, &q| *v *= (p / q).sqrt());
    }
    floor_params(&mut model.v);

    let lambda = model.lambda();
    let sigma2 = sigma2_from(&lambda, &model.g);
    let m_n = model.channels();
    let plane = lambda.len() / n_n;
    let (ls, ss, ys) = (lambda.as_slice().expect("standard layout"), sigma2.as_slice().expect("standard layout"), y_power.as_slice().expect("standard layout"));
    let mut next = model.g.clone();
    let mut num = vec![T::zero(); n_n];
    let mut den = vec![T::zero(); n_n];
    for m in 0..m_n {
        num.fill(T::zero());
        den.fill(T::zero());
        let (sm, ym) = (&ss[m * plane..(m + 1) * plane], &ys[m * plane..(m + 1) * plane]);
        for k in 0..plane {
            let inv = T::one() / sm[k];
            let r = ym[k] * inv * inv;
            for n in 0..n_n {
                let l = ls[n * plane + k];
                num[n] += l * r;
                den[n] += l * inv;
            }
        }
        for n in 0..n_n {
            next[[m, n]] *= (num[n] / den[n]).sqrt();
        }
    }
    floor_params(&mut next);
    model.g = next;
}

/// Iterative-projection update of every row of every `Q_f`. Returns the
/// number of rows left unchanged because `Q_f V_mf` stayed singular after
/// diagonal loading.
pub fn update_q<T: Scalar>(model: &mut FastMnmfModel<T>, x: &MultichannelSpectrogram<T>) -> Result<usize> {
    model.check_against(x)?;
    let sigma2 = model.sigma2();
    let (f_n, t_n, m_n) = (x.freqs(), x.frames(), x.channels());
    let inv_t = T::one() / T::lit(t_n as f64);
    let mut skipped = 0;
    let data = x.data().as_standard_layout();
    let xs = data.as_slice().expect("standard layout");
    let ss = sigma2.as_slice().expect("standard layout");
    let plane = f_n * t_n;
    let mm = m_n * m_n;
    let mut acc = vec![Complex::new(T::zero(), T::zero()); m_n * mm];
    let mut outer = vec![Complex::new(T::zero(), T::zero()); mm];
    let mut covs = vec![Array2::<Complex<T>>::zeros((m_n, m_n)); m_n];
    for f in 0..f_n {
        acc.fill(Complex::new(T::zero(), T::zero()));
        for t in 0..t_n {
            let xt = &xs[(f * t_n + t) * m_n..(f * t_n + t + 1) * m_n];
            for i in 0..m_n {
                for j in i..m_n {
                    outer[i * m_n + j] = xt[i] * xt[j].conj();
                }
            }
            for m in 0..m_n {
                let w = inv_t / ss[m * plane + f * t_n + t];
                let dst = &mut acc[m * mm..(m + 1) * mm];
                for i in 0..m_n {
                    for j in i..m_n {
                        dst[i * m_n + j] += outer[i * m_n + j] * w;
                    }
                }
            }
        }
        for (m, cov) in covs.iter_mut().enumerate() {
            let src = &acc[m * mm..(m + 1) * mm];
            for i in 0..m_n {
                cov[[i, i]] = Complex::new(src[i * m_n + i].re, T::zero());
                for j in i + 1..m_n {
                    cov[[i, j]] = src[i * m_n + j];
                    cov[[j, i]] = src[i * m_n + j].conj();
                }
            }
        }
        for (m, vm) in covs.iter().enumerate() {
            let mut qv = model.q.index_axis(Axis(0), f).dot(vm);
            let lu = Lu::new(qv.view()).or_else(|| {
                let tr = linalg::trace(qv.view()).norm();
                linalg::add_diagonal(&mut qv, T::lit(1e-6) * tr / T::lit(m_n as f64));
                Lu::new(qv.view())
            });
            let Some(lu) = lu else {
                skipped += 1;
                continue;
            };
            let mut e = Array1::zeros(m_n);
            e[m] = Complex::new(T::one(), T::zero());
            let mut qm = lu.solve_vec(e.view());
            let quad = linalg::inner(qm.view(), vm.dot(&qm).view()).re;
            if !(quad > T::zero()) || !quad.is_finite() {
                skipped += 1;
                continue;
            }
            let scale = T::one() / quad.sqrt();
            qm.mapv_inplace(|z| z * scale);
            model.q.index_axis_mut(Axis(0), f).row_mut(m).assign(&qm.mapv(|z| z.conj()));
        }
    }
    if skipped > 0 {
        log::warn!("FastMNMF left {skipped} rows of Q unchanged after singular updates");
    }
    Ok(skipped)
}

/// Likelihood-preserving rescaling. Gain columns are scaled to sum to `M`
/// and each `Q_f` to `tr(Q_f Q_fᴴ) = M`; the compensating factors go into
/// the bases, or into the activations when `q_scale` is unset and the
/// bases are tied across frequency.
fn normalize<T: Scalar>(model: &mut FastMnmfModel<T>, q_scale: bool) {
    let m_n = model.channels();
    let m_t = T::lit(m_n as f64);
    for n in 0..model.sources() {
        let mu = model.g.column(n).sum() / m_t;
        model.g.column_mut(n).mapv_inplace(|g| g / mu);
        if q_scale {
            model.u.index_axis_mut(Axis(0), n).mapv_inplace(|u| u * mu);
        } else {
            model.v.index_axis_mut(Axis(0), n).mapv_inplace(|v| v * mu);
        }
    }
    if !q_scale {
        return;
    }
    for f in 0..model.freqs() {
        let mut qf = model.q.index_axis_mut(Axis(0), f);
        let phi = qf.iter().map(|z| z.norm_sqr()).sum::<T>() / m_t;
        let s = T::one() / phi.sqrt();
        qf.mapv_inplace(|z| z * s);
        model.u.index_axis_mut(Axis(2), f).mapv_inplace(|u| u / phi);
    }
    for n in 0..model.sources() {
        for c in 0..model.components() {
            let f_t = T::lit(model.freqs() as f64);
            let mean = model.u.slice(ndarray::s![n, c, ..]).sum() / f_t;
            model.u.slice_mut(ndarray::s![n, c, ..]).mapv_inplace(|u| u / mean);
            model.v.slice_mut(ndarray::s![n, c, ..]).mapv_inplace(|v| v * mean);
        }
    }
    floor_params(&mut model.u);
    floor_params(&mut model.v);
    floor_params(&mut model.g);
}

#[derive(Debug, Clone)]
pub struct FitResult<T: Scalar> {
    pub model: FastMnmfModel<T>,
    /// Log-likelihood of the starting model, then after each sweep of
    /// both phases.
    pub log_likelihood: Vec<T>,
    /// Rows of Q skipped as singular, summed over all sweeps.
    pub skipped_q_rows: usize,
}

/// One sweep; `y_power` must match the current Q on entry and is
/// refreshed for the updated Q on exit.
fn sweep<T: Scalar>(model: &mut FastMnmfModel<T>, x: &MultichannelSpectrogram<T>, y_power: &mut Array3<T>, full: bool) -> Result<(T, usize)> {
    update_source_params(model, y_power, full);
    let skipped = update_q(model, x)?;
    normalize(model, full);
    *y_power = decorrelated_power(x, &model.q)?;
    let ll = likelihood_from(y_power, &model.sigma2(), ln_det_sum(&model.q)?, x.frames());
    Ok((ll, skipped))
}

/// Fits the model: frequency-invariant warm-up, then full NMF sweeps.
pub fn fit<T: Scalar>(x: &MultichannelSpectrogram<T>, cfg: &FastMnmfConfig, steering: ArrayView2<Complex<T>>) -> Result<FitResult<T>> {
    if x.frames() < 2 {
        return Err(Error::Length { needed: 2, got: x.frames() });
    }
    let init = init_model(x, cfg, steering)?;
    let (n_n, f_n, t_n) = (cfg.sources, x.freqs(), x.frames());
    let mut trace = Vec::with_capacity(1 + cfg.iters_freq_invariant + cfg.iters_full);
    let mut skipped = 0;

    // Warm-up: one component per source, bases pinned to 1.
    let start = init.lambda().mean_axis(Axis(1)).expect("F > 0");
    let mut model = FastMnmfModel {
        q: init.q,
        u: Array3::ones((n_n, 1, f_n)),
        v: start.insert_axis(Axis(1)),
        g: init.g,
    };
    let mut y_power = decorrelated_power(x, &model.q)?;
    trace.push(likelihood_from(&y_power, &model.sigma2(), ln_det_sum(&model.q)?, t_n));
    for _ in 0..cfg.iters_freq_invariant {
        let (ll, s) = sweep(&mut model, x, &mut y_power, false)?;
        trace.push(ll);
        skipped += s;
    }

    // Split each activation across C components; λ is unchanged.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let c_n = cfg.components;
    let mut v = Array3::zeros((n_n, c_n, t_n));
    for n in 0..n_n {
        for t in 0..t_n {
            let w: Vec<f64> = (0..c_n).map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = w.iter().sum();
            for c in 0..c_n {
                v[[n, c, t]] = model.v[[n, 0, t]] * T::lit(w[c] / total);
            }
        }
    }
    model.u = Array3::ones((n_n, c_n, f_n));
    model.v = v;
    for _ in 0..cfg.iters_full {
        let (ll, s) = sweep(&mut model, x, &mut y_power, true)?;
        trace.push(ll);
        skipped += s;
    }
    Ok(FitResult { model, log_likelihood: trace, skipped_q_rows: skipped })
}

/// Multichannel Wiener estimate of the image of source `n`:
/// `Q_f⁻¹ Diag(λ_nft g̃_n / Σ_n′ λ_n′ft g̃_n′) Q_f x_ft`.
pub fn wiener_separate<T: Scalar>(x: &MultichannelSpectrogram<T>, model: &FastMnmfModel<T>, n: usize) -> Result<MultichannelSpectrogram<T>> {
    model.check_against(x)?;
    if n >= model.sources() {
        return Err(Error::Config(format!("source {n} out of range for {} sources", model.sources())));
    }
    let lambda = model.lambda();
    let (f_n, t_n, m_n) = (x.freqs(), x.frames(), x.channels());
    let floor = T::lit(VARIANCE_FLOOR);
    let mut out = Array3::zeros((f_n, t_n, m_n));
    for f in 0..f_n {
        let qf = model.q.index_axis(Axis(0), f);
        let qinv = Lu::new(qf).ok_or(Error::Numerical(format!("Q not invertible at bin {f}")))?.inverse();
        let mut y = x.bin(f).dot(&qf.t());
        for t in 0..t_n {
            for m in 0..m_n {
                let mut total = T::zero();
                for k in 0..model.sources() {
                    total += lambda[[k, f, t]] * model.g[[m, k]];
                }
                let gain = lambda[[n, f, t]] * model.g[[m, n]] / total.max(floor);
                y[[t, m]] = y[[t, m]] * gain;
            }
        }
        out.index_axis_mut(Axis(0), f).assign(&y.dot(&qinv.t()));
    }
    Ok(MultichannelSpectrogram::new(out))
}
