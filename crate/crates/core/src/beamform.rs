//! Steering vectors, mask-driven spatial covariance estimation and the
//! DSBF / MPDR / MVDR beamformers.
//!
//! Every matrix inversion adds diagonal loading of `1e-6 * trace / M`.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_complex::Complex;
use num_traits::{Float, Zero};

use crate::linalg::{self, CVector, Lu};
use crate::scenario::ArrayGeometry;
use crate::signal::{MultichannelSpectrogram, StftConfig};
use crate::{Error, Result, Scalar};

pub const DIAGONAL_LOADING: f64 = 1e-6;

/// Unit-norm far-field steering vector, `a_m = exp(-j 2π f τ_m) / √M`.
pub fn steering_vector<T: Scalar>(geom: &ArrayGeometry, azimuth_deg: f64, f_hz: f64) -> CVector<T> {
    let m = geom.mics() as f64;
    geom.delays(azimuth_deg)
        .iter()
        .map(|tau| {
            let phase = -2.0 * std::f64::consts::PI * f_hz * tau;
            Complex::new(T::lit(phase.cos() / m.sqrt()), T::lit(phase.sin() / m.sqrt()))
        })
        .collect()
}

/// Steering vectors for a grid of azimuths at every STFT bin.
#[derive(Debug, Clone)]
pub struct SteeringField<T: Scalar> {
    geometry: ArrayGeometry,
    directions: Vec<f64>,
    freqs_hz: Vec<f64>,
    /// Indexed `(direction, f, m)`.
    vectors: Array3<Complex<T>>,
}

impl<T: Scalar> SteeringField<T> {
    pub fn new(geometry: ArrayGeometry, directions: Vec<f64>, cfg: &StftConfig, sample_rate: u32) -> Self {
        let freqs_hz: Vec<f64> = (0..cfg.freq_bins()).map(|f| cfg.bin_hz(f, sample_rate)).collect();
        let m = geometry.mics();
        let mut vectors = Array3::zeros((directions.len(), freqs_hz.len(), m));
        for (d, &az) in directions.iter().enumerate() {
            for (f, &hz) in freqs_hz.iter().enumerate() {
                vectors.index_axis_mut(Axis(0), d).row_mut(f).assign(&steering_vector::<T>(&geometry, az, hz));
            }
        }
        Self { geometry, directions, freqs_hz, vectors }
    }

    /// Uniform azimuth grid; 72 directions gives 5° spacing.
    pub fn grid(geometry: ArrayGeometry, count: usize, cfg: &StftConfig, sample_rate: u32) -> Self {
        let dirs = (0..count).map(|i| 360.0 * i as f64 / count as f64).collect();
        Self::new(geometry, dirs, cfg, sample_rate)
    }

    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geometry
    }

    pub fn directions(&self) -> &[f64] {
        &self.directions
    }

    pub fn freqs_hz(&self) -> &[f64] {
        &self.freqs_hz
    }

    /// `(F, M)` steering matrix for grid direction `index`.
    pub fn at(&self, index: usize) -> ArrayView2<'_, Complex<T>> {
        self.vectors.index_axis(Axis(0), index)
    }

    /// `(F, M)` steering matrix for an arbitrary azimuth (grid entry when
    /// the azimuth lies on the grid, computed otherwise).
    pub fn for_azimuth(&self, azimuth_deg: f64) -> Array2<Complex<T>> {
        let az = azimuth_deg.rem_euclid(360.0);
        if let Some(i) = self.directions.iter().position(|&d| (d - az).abs() < 1e-9) {
            return self.at(i).to_owned();
        }
        steering_matrix(&self.geometry, az, &self.freqs_hz)
    }
}

/// `(F, M)` steering vectors for one azimuth over the given frequencies.
pub fn steering_matrix<T: Scalar>(geom: &ArrayGeometry, azimuth_deg: f64, freqs_hz: &[f64]) -> Array2<Complex<T>> {
    let mut out = Array2::zeros((freqs_hz.len(), geom.mics()));
    for (f, &hz) in freqs_hz.iter().enumerate() {
        out.row_mut(f).assign(&steering_vector::<T>(geom, azimuth_deg, hz));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScmRole {
    Speech,
    Noise,
}

/// Per-frequency spatial covariance matrices, `(F, M, M)`.
#[derive(Debug, Clone)]
pub struct Scm<T: Scalar> {
    pub matrices: Array3<Complex<T>>,
    pub role: ScmRole,
}

impl<T: Scalar> Scm<T> {
    pub fn freqs(&self) -> usize {
        self.matrices.shape()[0]
    }

    pub fn at(&self, f: usize) -> ArrayView2<'_, Complex<T>> {
        self.matrices.index_axis(Axis(0), f)
    }
}

/// Time-frequency mask with values in `[0, 1]`, shape `(F, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TfMask<T: Scalar> {
    values: Array2<T>,
}

impl<T: Scalar> TfMask<T> {
    pub fn new(values: Array2<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < T::zero() || *v > T::one()) {
            return Err(Error::Shape("mask values must be finite and within [0, 1]".into()));
        }
        Ok(Self { values })
    }

    pub fn constant(freqs: usize, frames: usize, value: T) -> Self {
        Self { values: Array2::from_elem((freqs, frames), value.max(T::zero()).min(T::one())) }
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn into_values(self) -> Array2<T> {
        self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Speech and noise SCMs, `Σ_S = Σ_t m x x^H` and `Σ_N = Σ_t (1 - m) x x^H`,
/// without normalization.
pub fn scms_from_mask<T: Scalar>(x: &MultichannelSpectrogram<T>, mask: &TfMask<T>) -> Result<(Scm<T>, Scm<T>)> {
    let (f_n, t_n, m_n) = (x.freqs(), x.frames(), x.channels());
    if mask.dim() != (f_n, t_n) {
        return Err(Error::Shape(format!("mask {:?} vs spectrogram ({f_n}, {t_n})", mask.dim())));
    }
    let mut speech = Array3::<Complex<T>>::zeros((f_n, m_n, m_n));
    let mut noise = Array3::<Complex<T>>::zeros((f_n, m_n, m_n));
    let data = x.data();
    for f in 0..f_n {
        for t in 0..t_n {
            let w = mask.values[[f, t]];
            let wn = T::one() - w;
            for i in 0..m_n {
                let xi = data[[f, t, i]];
                for j in i..m_n {
                    let outer = xi * data[[f, t, j]].conj();
                    speech[[f, i, j]] += outer * w;
                    noise[[f, i, j]] += outer * wn;
                }
            }
        }
        for i in 0..m_n {
            speech[[f, i, i]].im = T::zero();
            noise[[f, i, i]].im = T::zero();
            for j in (i + 1)..m_n {
                speech[[f, j, i]] = speech[[f, i, j]].conj();
                noise[[f, j, i]] = noise[[f, i, j]].conj();
            }
        }
    }
    Ok((Scm { matrices: speech, role: ScmRole::Speech }, Scm { matrices: noise, role: ScmRole::Noise }))
}

fn loaded<T: Scalar>(a: ArrayView2<Complex<T>>) -> linalg::CMatrix<T> {
    let m = a.nrows();
    let tr = linalg::trace(a).re;
    let mut out = a.to_owned();
    linalg::add_diagonal(&mut out, T::lit(DIAGONAL_LOADING) * tr / T::lit(m as f64));
    out
}

/// MVDR weights `w_f = Σ_N^{-1} Σ_S u_{n0} / tr(Σ_N^{-1} Σ_S)`, shape `(F, M)`.
pub fn mvdr_weights<T: Scalar>(speech: &Scm<T>, noise: &Scm<T>, n0: usize) -> Result<Array2<Complex<T>>> {
    let (f_n, m_n) = (speech.freqs(), speech.matrices.shape()[1]);
    if noise.matrices.shape() != speech.matrices.shape() {
        return Err(Error::Shape("speech and noise SCMs differ in shape".into()));
    }
    if n0 >= m_n {
        return Err(Error::Config(format!("reference microphone {n0} out of range")));
    }
    let mut w = Array2::zeros((f_n, m_n));
    for f in 0..f_n {
        let lu = Lu::new(loaded(noise.at(f)).view()).ok_or(Error::DegenerateScm { freq: f })?;
        let ratio = lu.solve(speech.at(f));
        let tr = linalg::trace(ratio.view());
        if !(tr.norm() >= T::lit(1e-12)) {
            return Err(Error::DegenerateScm { freq: f });
        }
        w.row_mut(f).assign(&ratio.column(n0).mapv(|z| z / tr));
    }
    Ok(w)
}

/// MPDR weights `w = R^{-1} a / (a^H R^{-1} a)` with `R = (1/T) Σ_t x x^H`.
pub fn mpdr_weights<T: Scalar>(x: &MultichannelSpectrogram<T>, steering: ArrayView2<Complex<T>>) -> Result<Array2<Complex<T>>> {
    let (f_n, t_n, m_n) = (x.freqs(), x.frames(), x.channels());
    if steering.dim() != (f_n, m_n) {
        return Err(Error::Shape(format!("steering {:?} vs ({f_n}, {m_n})", steering.dim())));
    }
    let all = TfMask::constant(f_n, t_n, T::one());
    let (cov, _) = scms_from_mask(x, &all)?;
    let scale = T::one() / T::lit(t_n.max(1) as f64);
    let mut w = Array2::zeros((f_n, m_n));
    for f in 0..f_n {
        let a = steering.row(f);
        let r = loaded(cov.at(f).mapv(|z| z * scale).view());
        let z = match Lu::new(r.view()) {
            Some(lu) => lu.solve_vec(a),
            None => a.to_owned(),
        };
        let denom = linalg::inner(a, z.view());
        if denom.norm() == T::zero() {
            return Err(Error::DegenerateScm { freq: f });
        }
        // w^H a = 1 requires conj(denom) in the normalization.
        let norm = denom.conj();
        w.row_mut(f).assign(&z.mapv(|v| v / norm));
    }
    Ok(w)
}

/// `y_ft = w_f^H x_ft`, returned as a single-channel spectrogram.
pub fn apply_beamformer<T: Scalar>(w: ArrayView2<Complex<T>>, x: &MultichannelSpectrogram<T>) -> Result<MultichannelSpectrogram<T>> {
    let (f_n, t_n, m_n) = (x.freqs(), x.frames(), x.channels());
    if w.dim() != (f_n, m_n) {
        return Err(Error::Shape(format!("weights {:?} vs ({f_n}, {m_n})", w.dim())));
    }
    let data = x.data();
    let mut out = Array2::<Complex<T>>::zeros((f_n, t_n));
    for f in 0..f_n {
        let wf = w.row(f);
        for t in 0..t_n {
            let mut acc = Complex::zero();
            for m in 0..m_n {
                acc += wf[m].conj() * data[[f, t, m]];
            }
            out[[f, t]] = acc;
        }
    }
    Ok(MultichannelSpectrogram::from_plane(out))
}

/// Delay-and-sum: `y_ft = a_f^H x_ft` with unit-norm steering.
pub fn dsbf<T: Scalar>(x: &MultichannelSpectrogram<T>, steering: ArrayView2<Complex<T>>) -> Result<MultichannelSpectrogram<T>> {
    apply_beamformer(steering, x)
}

/// Largest deviation from Hermitian symmetry and the most negative
/// eigenvalue relative to the trace, for every frequency.
pub fn scm_health<T: Scalar>(scm: &Scm<T>) -> Result<(T, T)> {
    let mut herm = T::zero();
    let mut neg = T::zero();
    for f in 0..scm.freqs() {
        let a = scm.at(f);
        let m = a.nrows();
        for i in 0..m {
            for j in 0..m {
                herm = herm.max((a[[i, j]] - a[[j, i]].conj()).norm());
            }
        }
        let tr = linalg::trace(a).re;
        let (vals, _) = linalg::hermitian_eig(a).ok_or(Error::Eigen { freq: f })?;
        let min = vals.last().copied().unwrap_or(T::zero());
        if tr > T::zero() {
            neg = neg.min(min / tr);
        }
    }
    Ok((herm, Float::abs(neg)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spec(f: usize, t: usize, m: usize, seed: u64) -> MultichannelSpectrogram<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MultichannelSpectrogram::new(Array3::from_shape_fn((f, t, m), |_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))))
    }

    fn random_mask(f: usize, t: usize, seed: u64) -> TfMask<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TfMask::new(Array2::from_shape_fn((f, t), |_| rng.gen_range(0.0..=1.0))).unwrap()
    }

    #[test]
    fn steering_dc_and_periodicity() {
        let g = ArrayGeometry::headset_arc();
        let a = steering_vector::<f64>(&g, 30.0, 0.0);
        assert!(a.iter().all(|z| (z - Complex::new(1.0 / 5f64.sqrt(), 0.0)).norm() < 1e-15));
        let b = steering_vector::<f64>(&g, 75.0, 2500.0);
        let c = steering_vector::<f64>(&g, 435.0, 2500.0);
        assert!(b.iter().zip(c.iter()).all(|(x, y)| (x - y).norm() < 1e-12));
        assert!((linalg::norm(b.view()) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn endfire_inter_mic_phase() {
        let g = ArrayGeometry::new(vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]], 343.0).unwrap();
        let a = steering_vector::<f64>(&g, 0.0, 1000.0);
        let expected = 2.0 * std::f64::consts::PI * 1000.0 * 0.1 / 343.0;
        let diff = (a[1] / a[0]).arg();
        assert!((diff - expected).abs() < 1e-12, "{diff} vs {expected}");
        assert!((expected - 1.832).abs() < 1e-3);
    }

    #[test]
    fn mask_extremes() {
        let x = random_spec(4, 10, 3, 1);
        let (s, n) = scms_from_mask(&x, &TfMask::constant(4, 10, 1.0)).unwrap();
        assert!(n.matrices.iter().all(|z| z.norm() == 0.0));
        for f in 0..4 {
            for i in 0..3 {
                for j in 0..3 {
                    let direct: Complex<f64> = (0..10).map(|t| x.data()[[f, t, i]] * x.data()[[f, t, j]].conj()).sum();
                    assert!((s.matrices[[f, i, j]] - direct).norm() < 1e-12);
                }
            }
        }
        let (s, n) = scms_from_mask(&x, &TfMask::constant(4, 10, 0.5)).unwrap();
        assert_eq!(s.matrices, n.matrices);
        assert!(scms_from_mask(&x, &TfMask::constant(4, 9, 0.5)).is_err());
    }

    #[test]
    fn mask_rejects_out_of_range() {
        assert!(TfMask::new(Array2::from_elem((2, 2), 1.5)).is_err());
        assert!(TfMask::new(Array2::from_elem((2, 2), f64::NAN)).is_err());
    }

    #[test]
    fn rank_one_mvdr_is_distortionless() {
        let a = ndarray::arr1(&[Complex::new(1.0, 0.0), Complex::new(1.0, 0.0)]).mapv(|z: Complex<f64>| z / 2f64.sqrt());
        let mut speech = Array3::zeros((1, 2, 2));
        for i in 0..2 {
            for j in 0..2 {
                speech[[0, i, j]] = a[i] * a[j].conj();
            }
        }
        let mut noise = Array3::zeros((1, 2, 2));
        noise[[0, 0, 0]] = Complex::new(1.0, 0.0);
        noise[[0, 1, 1]] = Complex::new(1.0, 0.0);
        let w = mvdr_weights(&Scm { matrices: speech, role: ScmRole::Speech }, &Scm { matrices: noise, role: ScmRole::Noise }, 0).unwrap();
        assert!((w[[0, 0]] - Complex::new(0.5, 0.0)).norm() < 1e-12);
        assert!((w[[0, 1]] - Complex::new(0.5, 0.0)).norm() < 1e-12);
        let s = Complex::new(0.3, -0.7);
        let x = a.mapv(|v| v * s * 2f64.sqrt());
        let y = w[[0, 0]].conj() * x[0] + w[[0, 1]].conj() * x[1];
        assert!((y - s).norm() < 1e-12);
    }

    #[test]
    fn identical_scms_select_reference() {
        let eye = linalg::identity::<f64>(3).insert_axis(Axis(0));
        let w = mvdr_weights(&Scm { matrices: eye.clone(), role: ScmRole::Speech }, &Scm { matrices: eye, role: ScmRole::Noise }, 2).unwrap();
        for m in 0..3 {
            let expect = if m == 2 { 1.0 / 3.0 } else { 0.0 };
            assert!((w[[0, m]] - Complex::new(expect, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_speech_is_degenerate() {
        let eye = linalg::identity::<f64>(2).insert_axis(Axis(0));
        let zero = Array3::zeros((1, 2, 2));
        let r = mvdr_weights(&Scm { matrices: zero, role: ScmRole::Speech }, &Scm { matrices: eye, role: ScmRole::Noise }, 0);
        assert!(matches!(r, Err(Error::DegenerateScm { freq: 0 })));
    }

    #[test]
    fn mvdr_matches_nalgebra_solve() {
        let x = random_spec(5, 40, 4, 3);
        let mask = random_mask(5, 40, 4);
        let (s, n) = scms_from_mask(&x, &mask).unwrap();
        let w = mvdr_weights(&s, &n, 1).unwrap();
        for f in 0..5 {
            let nn = nalgebra::DMatrix::from_fn(4, 4, |i, j| n.matrices[[f, i, j]]);
            let tr = nn.trace().re;
            let nn = nn + nalgebra::DMatrix::identity(4, 4) * Complex::new(1e-6 * tr / 4.0, 0.0);
            let ss = nalgebra::DMatrix::from_fn(4, 4, |i, j| s.matrices[[f, i, j]]);
            let ratio = nn.lu().solve(&ss).unwrap();
            let trr = ratio.trace();
            for m in 0..4 {
                assert!((w[[f, m]] - ratio[(m, 1)] / trr).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn mpdr_identity_and_constraint() {
        let g = ArrayGeometry::headset_arc();
        let a = steering_matrix::<f64>(&g, 40.0, &[0.0, 500.0, 3000.0]);
        let x = random_spec(3, 200, 5, 8);
        let w = mpdr_weights(&x, a.view()).unwrap();
        for f in 0..3 {
            let wha = linalg::inner(w.row(f), a.row(f));
            assert!((wha - Complex::new(1.0, 0.0)).norm() < 1e-10);
        }
        // white input with R close to I: w ≈ a / ||a||^2 = a
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 200_000;
        let white = MultichannelSpectrogram::new(Array3::from_shape_fn((1, n, 5), |_| {
            Complex::new(rng.sample::<f64, _>(rand_distr::StandardNormal), rng.sample::<f64, _>(rand_distr::StandardNormal)) / 2f64.sqrt()
        }));
        let w = mpdr_weights(&white, a.slice(ndarray::s![2..3, ..])).unwrap();
        for m in 0..5 {
            assert!((w[[0, m]] - a[[2, m]]).norm() < 0.02);
        }
    }

    #[test]
    fn mpdr_single_source_recovers_reference_scaled_source() {
        let g = ArrayGeometry::headset_arc();
        let a = steering_matrix::<f64>(&g, 120.0, &[1200.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<Complex<f64>> = (0..50).map(|_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let x = MultichannelSpectrogram::new(Array3::from_shape_fn((1, 50, 5), |(_, t, m)| a[[0, m]] * s[t]));
        let w = mpdr_weights(&x, a.view()).unwrap();
        let y = apply_beamformer(w.view(), &x).unwrap();
        for t in 0..50 {
            assert!((y.data()[[0, t, 0]] - s[t]).norm() < 1e-6 * s[t].norm().max(1e-3));
        }
    }

    #[test]
    fn dsbf_identical_channels_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ch: Vec<Complex<f64>> = (0..8).map(|_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let x = MultichannelSpectrogram::new(Array3::from_shape_fn((1, 8, 4), |(_, t, _)| ch[t]));
        let a = Array2::from_elem((1, 4), Complex::new(0.5, 0.0));
        let y = dsbf(&x, a.view()).unwrap();
        for t in 0..8 {
            assert!((y.data()[[0, t, 0]] - ch[t] * 2.0).norm() < 1e-12);
        }
        let z = dsbf(&MultichannelSpectrogram::zeros(1, 8, 4), a.view()).unwrap();
        assert!(z.data().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn dsbf_coherent_gain() {
        // source along the steering, independent unit-variance noise per mic
        let g = ArrayGeometry::headset_arc();
        let a = steering_matrix::<f64>(&g, 10.0, &[1800.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t_n = 20_000;
        let gauss = |rng: &mut ChaCha8Rng| Complex::new(rng.sample::<f64, _>(rand_distr::StandardNormal), rng.sample::<f64, _>(rand_distr::StandardNormal));
        let s: Vec<Complex<f64>> = (0..t_n).map(|_| gauss(&mut rng)).collect();
        let noise = Array3::from_shape_fn((1, t_n, 5), |_| gauss(&mut rng));
        let sig = Array3::from_shape_fn((1, t_n, 5), |(_, t, m)| a[[0, m]] * 5f64.sqrt() * s[t]);
        let ys = dsbf(&MultichannelSpectrogram::new(sig), a.view()).unwrap();
        let yn = dsbf(&MultichannelSpectrogram::new(noise.clone()), a.view()).unwrap();
        let p = |d: &Array3<Complex<f64>>| d.iter().map(|z| z.norm_sqr()).sum::<f64>();
        let out_snr = p(ys.data()) / p(yn.data());
        let in_snr = s.iter().map(|z| z.norm_sqr()).sum::<f64>() / (p(&noise) / 5.0);
        let gain_db = 10.0 * (out_snr / in_snr).log10();
        assert!((gain_db - 10.0 * 5f64.log10()).abs() < 0.3, "gain {gain_db}");
    }

    #[test]
    fn apply_beamformer_linearity_and_oracle() {
        let x = random_spec(3, 6, 3, 10);
        let y = random_spec(3, 6, 3, 11);
        let w = random_spec(3, 3, 1, 12).into_data().index_axis_move(Axis(2), 0);
        let sum = MultichannelSpectrogram::new(x.data() + y.data());
        let out = apply_beamformer(w.view(), &sum).unwrap();
        let ox = apply_beamformer(w.view(), &x).unwrap();
        let oy = apply_beamformer(w.view(), &y).unwrap();
        for ((a, b), c) in out.data().iter().zip(ox.data()).zip(oy.data()) {
            assert!((a - (b + c)).norm() < 1e-12);
        }
        for f in 0..3 {
            for t in 0..6 {
                let direct: Complex<f64> = (0..3).map(|m| w[[f, m]].conj() * x.data()[[f, t, m]]).sum();
                assert!((ox.data()[[f, t, 0]] - direct).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn grid_has_72_unit_vectors() {
        let cfg = StftConfig::new(256, 64).unwrap();
        let field = SteeringField::<f64>::grid(ArrayGeometry::headset_arc(), 72, &cfg, 16_000);
        assert_eq!(field.directions().len(), 72);
        assert!((field.directions()[1] - 5.0).abs() < 1e-12);
        for d in 0..72 {
            for f in 0..cfg.freq_bins() {
                assert!((linalg::norm(field.at(d).row(f)) - 1.0).abs() < 1e-12);
            }
        }
        let off = field.for_azimuth(7.5);
        assert!((linalg::norm(off.row(10)) - 1.0).abs() < 1e-12);
        assert_eq!(field.for_azimuth(365.0), field.at(1).to_owned());
    }
}
