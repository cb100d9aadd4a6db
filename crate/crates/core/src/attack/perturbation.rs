use crate::diff::{Real, Tensor};
use crate::lm::HookSite;
use crate::{Error, Result};

/// Additive latent perturbation for one hook site.
///
/// `delta` is `[rows, d_model]`; `mask[p]` marks the positions the adversary
/// may touch. Rows outside the mask are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDelta<T = f32> {
    pub site: HookSite,
    pub delta: Tensor<T>,
    pub mask: Vec<bool>,
}

/// Per-site perturbations for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet<T = f32> {
    entries: Vec<SiteDelta<T>>,
}

impl<T: Real> PerturbationSet<T> {
    pub fn new(entries: Vec<SiteDelta<T>>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|o| o.site == e.site) {
                return Err(Error::DuplicateSite(e.site.layer));
            }
            let rows = match *e.delta.shape() {
                [r, _] => r,
                _ => {
                    return Err(Error::PerturbationShape {
                        got: e.delta.shape().to_vec(),
                        seq_len: e.mask.len(),
                        d_model: 0,
                    })
                }
            };
            if rows != e.mask.len() {
                return Err(Error::InvalidArgument(format!(
                    "mask of length {} for {rows} perturbation rows",
                    e.mask.len()
                )));
            }
            for (p, &m) in e.mask.iter().enumerate() {
                if !m && e.delta.row(p).iter().any(|v| *v != T::zero()) {
                    return Err(Error::InvalidArgument(format!(
                        "site {}: nonzero perturbation at masked-out position {p}",
                        e.site.layer
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    /// Zero perturbations at `sites` covering `rows` positions, the first
    /// `prompt_len` of which are attackable.
    pub fn zeros(sites: &[HookSite], rows: usize, d_model: usize, prompt_len: usize) -> Self {
        let entries = sites
            .iter()
            .map(|&site| SiteDelta {
                site,
                delta: Tensor::zeros(&[rows, d_model]),
                mask: (0..rows).map(|p| p < prompt_len).collect(),
            })
            .collect();
        Self { entries }
    }

    /// Zero perturbations over exactly the prompt positions.
    pub fn zeros_for_prompt(sites: &[HookSite], prompt_len: usize, d_model: usize) -> Self {
        Self::zeros(sites, prompt_len, d_model, prompt_len)
    }

    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn entries(&self) -> &[SiteDelta<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [SiteDelta<T>] {
        &mut self.entries
    }

    pub fn sites(&self) -> Vec<HookSite> {
        self.entries.iter().map(|e| e.site).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.delta.data().iter().all(|v| *v == T::zero()))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.delta.is_finite())
    }

    pub fn cast<U: Real>(&self) -> PerturbationSet<U> {
        PerturbationSet {
            entries: self
                .entries
                .iter()
                .map(|e| SiteDelta {
                    site: e.site,
                    delta: e.delta.cast(),
                    mask: e.mask.clone(),
                })
                .collect(),
        }
    }

    /// Rejects sets that reach past the sequence or attack completion positions.
    pub fn check_against(&self, prompt_len: usize, seq_len: usize) -> Result<()> {
        for e in &self.entries {
            let rows = e.delta.rows();
            if rows > seq_len {
                return Err(Error::PerturbationShape {
                    got: e.delta.shape().to_vec(),
                    seq_len,
                    d_model: e.delta.cols(),
                });
            }
            for p in prompt_len..rows {
                if e.mask[p] || e.delta.row(p).iter().any(|v| *v != T::zero()) {
                    return Err(Error::PerturbationOutsidePrompt {
                        site: e.site.layer,
                        position: p,
                        prompt_len,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Largest scale `s ≤ target` such that `s · ‖v‖`, recomputed on the rounded
/// values, does not exceed `radius`. Keeps projections exactly idempotent.
fn fit_scale<T: Real>(v: &[T], radius: f64, norm: f64) -> Vec<T> {
    let mut s = radius / norm;
    loop {
        let scaled: Vec<T> = v.iter().map(|&x| T::of(x.as_f64() * s)).collect();
        if norm_f64(&scaled) <= radius {
            return scaled;
        }
        s *= 1.0 - 1e-7;
    }
}

pub(crate) fn norm_f64<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::NegativeEpsilon(epsilon));
    }
    Ok(())
}

fn check_mask<T: Real>(delta: &Tensor<T>, mask: &[bool]) -> Result<()> {
    if delta.shape().len() != 2 || delta.rows() != mask.len() {
        return Err(Error::InvalidArgument(format!(
            "mask of length {} for perturbation of shape {:?}",
            mask.len(),
            delta.shape()
        )));
    }
    Ok(())
}

/// Projects each masked position's vector onto the L2 ball of radius
/// `epsilon` and zeroes unmasked positions.
pub fn project_l2<T: Real>(delta: &Tensor<T>, mask: &[bool], epsilon: f64) -> Result<Tensor<T>> {
    check_epsilon(epsilon)?;
    check_mask(delta, mask)?;
    let mut out = delta.clone();
    for (p, &m) in mask.iter().enumerate() {
        let row = out.row_mut(p);
        if !m {
            row.fill(T::zero());
            continue;
        }
        let norm = norm_f64(row);
        if norm > epsilon {
            let scaled = fit_scale(row, epsilon, norm);
            row.copy_from_slice(&scaled);
        }
    }
    Ok(out)
}

/// Projects the masked part of `delta` as one vector onto the L2 ball.
pub fn project_l2_aggregate<T: Real>(delta: &Tensor<T>, mask: &[bool], epsilon: f64) -> Result<Tensor<T>> {
    check_epsilon(epsilon)?;
    check_mask(delta, mask)?;
    let mut out = delta.clone();
    for (p, &m) in mask.iter().enumerate() {
        if !m {
            out.row_mut(p).fill(T::zero());
        }
    }
    let norm = norm_f64(out.data());
    if norm > epsilon {
        let scaled = fit_scale(out.data(), epsilon, norm);
        out.data_mut().copy_from_slice(&scaled);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scales_onto_ball() {
        let d = Tensor::matrix(1, 2, vec![3.0f32, 4.0]).unwrap();
        let p = project_l2(&d, &[true], 1.0).unwrap();
        assert!((p.data()[0] - 0.6).abs() < 1e-6);
        assert!((p.data()[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn interior_unchanged() {
        let d = Tensor::matrix(1, 2, vec![0.3f32, 0.4]).unwrap();
        assert_eq!(project_l2(&d, &[true], 1.0).unwrap(), d);
    }

    #[test]
    fn unmasked_rows_zeroed() {
        let d = Tensor::matrix(2, 2, vec![0.1f32, 0.1, 5.0, 5.0]).unwrap();
        let p = project_l2(&d, &[true, false], 1.0).unwrap();
        assert_eq!(p.row(1), &[0.0, 0.0]);
        assert_eq!(p.row(0), d.row(0));
    }

    #[test]
    fn negative_epsilon_rejected() {
        let d = Tensor::<f32>::zeros(&[1, 2]);
        assert!(matches!(project_l2(&d, &[true], -1.0), Err(Error::NegativeEpsilon(_))));
    }

    #[test]
    fn aggregate_bounds_whole_tensor() {
        let d = Tensor::matrix(2, 2, vec![3.0f32, 0.0, 0.0, 4.0]).unwrap();
        let p = project_l2_aggregate(&d, &[true, true], 1.0).unwrap();
        assert!(norm_f64(p.data()) <= 1.0);
        assert!((p.data()[0] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn set_rejects_nonzero_masked_rows() {
        let site = HookSite { layer: 0 };
        let e = SiteDelta {
            site,
            delta: Tensor::matrix(2, 1, vec![0.0f32, 1.0]).unwrap(),
            mask: vec![true, false],
        };
        assert!(PerturbationSet::new(vec![e]).is_err());
    }
}
