//! Scale-invariant signal-to-distortion ratio.

use crate::signal::TimeSignal;
use crate::{Error, Result, Scalar};

/// Bound on |SI-SDR| in dB. Perfect reconstructions saturate at the top,
/// silent estimates at the bottom.
pub const SI_SDR_CAP_DB: f64 = 60.0;

/// SI-SDR of the first channel of `enhanced` against the first channel of
/// `reference`, in dB, clamped to `±SI_SDR_CAP_DB`.
pub fn si_sdr<T: Scalar>(enhanced: &TimeSignal<T>, reference: &TimeSignal<T>) -> Result<f64> {
    let e: Vec<f64> = enhanced.channel(0).iter().map(|x| x.as_f64()).collect();
    let r: Vec<f64> = reference.channel(0).iter().map(|x| x.as_f64()).collect();
    si_sdr_slice(&e, &r)
}

pub fn si_sdr_slice(enhanced: &[f64], reference: &[f64]) -> Result<f64> {
    if enhanced.len() != reference.len() {
        return Err(Error::Length { needed: reference.len(), got: enhanced.len() });
    }
    let ref_energy: f64 = reference.iter().map(|x| x * x).sum();
    if !(ref_energy > 0.0) {
        return Err(Error::InvalidReference);
    }
    let alpha = enhanced.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / ref_energy;
    let target = alpha * alpha * ref_energy;
    let residual: f64 = enhanced.iter().zip(reference).map(|(e, r)| (alpha * r - e).powi(2)).sum();
    let db = if target == 0.0 {
        -SI_SDR_CAP_DB
    } else if residual <= target * 10f64.powf(-SI_SDR_CAP_DB / 10.0) {
        SI_SDR_CAP_DB
    } else if target <= residual * 10f64.powf(-SI_SDR_CAP_DB / 10.0) {
        -SI_SDR_CAP_DB
    } else {
        10.0 * (target / residual).log10()
    };
    Ok(db)
}

/// Mean SI-SDR over sources under the best assignment of estimates to
/// references, found by exhaustive search. Returns the mean and the
/// assignment (`perm[i]` is the estimate used for reference `i`).
pub fn best_permutation_si_sdr(estimates: &[Vec<f64>], references: &[Vec<f64>]) -> Result<(f64, Vec<usize>)> {
    if estimates.len() < references.len() {
        return Err(Error::Config(format!("{} estimates for {} references", estimates.len(), references.len())));
    }
    let mut table = vec![vec![0.0; estimates.len()]; references.len()];
    for (i, r) in references.iter().enumerate() {
        for (j, e) in estimates.iter().enumerate() {
            table[i][j] = si_sdr_slice(e, r)?;
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut current = Vec::with_capacity(references.len());
    search(&table, &mut current, &mut vec![false; estimates.len()], &mut best);
    Ok((best.0 / references.len() as f64, best.1))
}

fn search(table: &[Vec<f64>], current: &mut Vec<usize>, used: &mut [bool], best: &mut (f64, Vec<usize>)) {
    if current.len() == table.len() {
        let total: f64 = current.iter().enumerate().map(|(i, &j)| table[i][j]).sum();
        if total > best.0 {
            *best = (total, current.clone());
        }
        return;
    }
    for j in 0..used.len() {
        if !used[j] {
            used[j] = true;
            current.push(j);
            search(table, current, used, best);
            current.pop();
            used[j] = false;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_cases() {
        assert_eq!(si_sdr_slice(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(si_sdr_slice(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), SI_SDR_CAP_DB);
        assert_eq!(si_sdr_slice(&[2.0, 4.0], &[1.0, 2.0]).unwrap(), SI_SDR_CAP_DB);
        assert_eq!(si_sdr_slice(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), -SI_SDR_CAP_DB);
        assert!(matches!(si_sdr_slice(&[1.0, 2.0], &[0.0, 0.0]), Err(Error::InvalidReference)));
        assert!(si_sdr_slice(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn permutation_search() {
        let a = vec![1.0, 0.0, 1.0, 0.0];
        let b = vec![0.0, 1.0, 0.0, -1.0];
        let noisy_b = vec![0.1, 1.0, 0.0, -1.0];
        let (mean, perm) = best_permutation_si_sdr(&[noisy_b.clone(), a.clone(), b.clone()], &[a.clone(), b.clone()]).unwrap();
        assert_eq!(perm, vec![1, 2]);
        assert_eq!(mean, SI_SDR_CAP_DB);
    }
}
