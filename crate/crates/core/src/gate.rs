//! Direction gating of separated sources.
//!
//! For each source the principal eigenvector of its spatial covariance
//! should point along the target steering vector when the source is the
//! target. The response `l_n = Σ_f Σ_{m≥2} |a_fᴴ v_nfm|²` measures how much
//! of the steering vector falls into the minor eigenspace; it is zero for a
//! rank-1 covariance aligned with the target.
//!
//! The response ignores how much energy a source carries. A source that
//! starts at the target direction and never captures signal keeps an
//! aligned covariance, so the gate also requires a minimum share of the
//! mixture energy at the reference microphone.

use ndarray::{Array3, ArrayView2, ArrayView3, Axis};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::beamform::steering_matrix;
use crate::fastmnmf::{wiener_separate, FastMnmfModel};
use crate::linalg;
use crate::scenario::ArrayGeometry;
use crate::signal::MultichannelSpectrogram;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    /// Upper bound on the normalized response for acceptance.
    pub threshold: f64,
    pub max_accepted: usize,
    /// Lower bound on a source's share of the reference-channel energy;
    /// only applied when shares are supplied.
    pub min_share: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { threshold: 0.5, max_accepted: 1, min_share: 0.05 }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("gate threshold {} outside (0, 1)", self.threshold)));
        }
        if self.max_accepted == 0 {
            return Err(Error::Config("gate must accept at least one source".into()));
        }
        if !(0.0..1.0).contains(&self.min_share) {
            return Err(Error::Config(format!("gate minimum share {} outside [0, 1)", self.min_share)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionResponse {
    /// Raw responses `l_n`.
    pub raw: Vec<f64>,
    /// `l_n / F`, in `[0, 1]`: the mean over frequency of the fraction of
    /// the unit steering vector's energy outside the principal eigenvector.
    pub normalized: Vec<f64>,
}

/// Spatial covariances `Q_f⁻¹ Diag(g̃_n) Q_f⁻ᴴ` of source `n`, `(F, M, M)`.
pub fn source_scms<T: Scalar>(model: &FastMnmfModel<T>, n: usize) -> Result<Array3<Complex<T>>> {
    let (f_n, m_n) = (model.freqs(), model.channels());
    let mut out = Array3::zeros((f_n, m_n, m_n));
    for f in 0..f_n {
        out.index_axis_mut(Axis(0), f).assign(&model.source_scm(n, f)?);
    }
    Ok(out)
}

/// Raw and normalized response of one source given its covariances
/// `(F, M, M)` and the target steering vectors `(F, M)`.
pub fn source_response<T: Scalar>(scms: ArrayView3<Complex<T>>, steering: ArrayView2<Complex<T>>) -> Result<(f64, f64)> {
    let (f_n, m_n, _) = scms.dim();
    if steering.dim() != (f_n, m_n) {
        return Err(Error::Shape(format!("steering is {:?}, expected ({f_n}, {m_n})", steering.dim())));
    }
    let mut total = 0.0;
    for f in 0..f_n {
        let a = steering.row(f);
        let nrm = linalg::norm(a).as_f64();
        if !(nrm > 0.0) || !nrm.is_finite() {
            return Err(Error::InvalidSteering { freq: f });
        }
        let (_, vecs) = linalg::hermitian_eig(scms.index_axis(Axis(0), f)).ok_or(Error::Eigen { freq: f })?;
        let mut contribution = 0.0;
        for m in 1..m_n {
            contribution += linalg::inner(a, vecs.column(m)).norm_sqr().as_f64();
        }
        total += contribution / (nrm * nrm);
    }
    Ok((total, total / f_n as f64))
}

/// Responses of every source of a fitted model.
pub fn direction_response<T: Scalar>(model: &FastMnmfModel<T>, steering: ArrayView2<Complex<T>>) -> Result<DirectionResponse> {
    let mut raw = Vec::with_capacity(model.sources());
    let mut normalized = Vec::with_capacity(model.sources());
    for n in 0..model.sources() {
        let (l, r) = source_response(source_scms(model, n)?.view(), steering)?;
        raw.push(l);
        normalized.push(r);
    }
    Ok(DirectionResponse { raw, normalized })
}

/// Share of the reference-channel energy `Σ_ft |x_ft0|²` held by each
/// source's Wiener image. Shares sum to 1.
pub fn energy_shares<T: Scalar>(x: &MultichannelSpectrogram<T>, model: &FastMnmfModel<T>) -> Result<Vec<f64>> {
    let total: f64 = x.data().index_axis(Axis(2), 0).iter().map(|z| z.norm_sqr().as_f64()).sum();
    (0..model.sources())
        .map(|n| {
            let image = wiener_separate(x, model, n)?;
            let e: f64 = image.data().index_axis(Axis(2), 0).iter().map(|z| z.norm_sqr().as_f64()).sum();
            Ok(if total > 0.0 { e / total } else { 0.0 })
        })
        .collect()
}

/// Sources with normalized response below the threshold and, when
/// `shares` is given, energy share at least `min_share`; best first, at
/// most `max_accepted` of them. Ties keep the lower index first.
pub fn accepted_sources(responses: &DirectionResponse, shares: Option<&[f64]>, cfg: &GateConfig) -> Vec<usize> {
    let loud = |n: usize| shares.map_or(true, |s| s.get(n).is_some_and(|&v| v >= cfg.min_share));
    let mut idx: Vec<usize> = (0..responses.normalized.len()).filter(|&n| responses.normalized[n] < cfg.threshold && loud(n)).collect();
    idx.sort_by(|&a, &b| responses.normalized[a].total_cmp(&responses.normalized[b]).then(a.cmp(&b)));
    idx.truncate(cfg.max_accepted);
    idx
}

/// The source regarded as the target, if any qualifies.
pub fn gate(responses: &DirectionResponse, shares: Option<&[f64]>, cfg: &GateConfig) -> Option<usize> {
    accepted_sources(responses, shares, cfg).first().copied()
}

/// Outcome of a threshold calibration sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Normalized responses of sources at the target direction.
    pub aligned: Vec<f64>,
    /// Normalized responses of sources 90° away from the target.
    pub misaligned: Vec<f64>,
}

impl Calibration {
    /// Open interval of thresholds that classify every trial correctly.
    pub fn separating_range(&self) -> Option<(f64, f64)> {
        let lo = self.aligned.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let hi = self.misaligned.iter().copied().fold(f64::INFINITY, f64::min);
        (lo < hi).then_some((lo, hi))
    }

    pub fn errors(&self, threshold: f64) -> usize {
        self.aligned.iter().filter(|&&r| r >= threshold).count() + self.misaligned.iter().filter(|&&r| r < threshold).count()
    }
}

/// Sweeps simulated anechoic covariances `a_s a_sᴴ + δ I` with a random
/// target azimuth per trial, a source either at the target (jittered by up
/// to ±5°) or 90° away, and sensor-noise loading `δ` drawn log-uniformly
/// from `[1e-3, 1e-1]` of the source power.
pub fn calibrate(geometry: &ArrayGeometry, freqs_hz: &[f64], trials: usize, seed: u64) -> Result<Calibration> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut aligned = Vec::with_capacity(trials);
    let mut misaligned = Vec::with_capacity(trials);
    let m_n = geometry.mics();
    for _ in 0..trials {
        let target = rng.gen_range(0.0..360.0);
        let steering = steering_matrix::<f64>(geometry, target, freqs_hz);
        for (offset, out) in [(rng.gen_range(-5.0..5.0), &mut aligned), (90.0, &mut misaligned)] {
            let az: f64 = (target + offset + 360.0) % 360.0;
            let src = steering_matrix::<f64>(geometry, az, freqs_hz);
            let delta = 10f64.powf(rng.gen_range(-3.0..-1.0)) / m_n as f64;
            let mut scms = Array3::zeros((freqs_hz.len(), m_n, m_n));
            for f in 0..freqs_hz.len() {
                for i in 0..m_n {
                    for j in 0..m_n {
                        scms[[f, i, j]] = src[[f, i]] * src[[f, j]].conj();
                    }
                    scms[[f, i, i]] += Complex::new(delta, 0.0);
                }
            }
            out.push(source_response(scms.view(), steering.view())?.1);
        }
    }
    Ok(Calibration { aligned, misaligned })
}
