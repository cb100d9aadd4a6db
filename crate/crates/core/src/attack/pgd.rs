use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::perturbation::{norm_f64, project_l2, project_l2_aggregate, PerturbationSet};
use super::whiten::{project_whitened, Whitener};
use crate::diff::{Real, Tensor};
use crate::{Error, Result};

/// Whether the adversary descends an attack loss or ascends a defense loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    /// Minimize the objective (steer toward a target behaviour).
    Targeted,
    /// Maximize the objective (push away from the desired behaviour).
    Untargeted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackInit {
    Zero,
    /// Uniform in the constraint ball of each site.
    UniformBall,
}

/// How the L2 budget is measured over the prompt positions of a site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormScope {
    /// Every position's vector lies in its own ball of radius ε.
    #[default]
    PerPosition,
    /// The concatenation of all attacked positions lies in one ball.
    Aggregate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackBudget {
    /// Radius per hook site, aligned with the perturbation set's entries.
    pub epsilon: Vec<f64>,
    /// Number of PGD iterations `K`.
    pub steps: usize,
    /// Step size `η`; `None` uses `ε / 4` for each site.
    pub step_size: Option<f64>,
    pub mode: AttackMode,
    pub init: AttackInit,
    pub scope: NormScope,
}

impl AttackBudget {
    /// Same radius at `n_sites` sites, `K = 16`, `η = ε/4`, targeted, zero init.
    pub fn uniform(epsilon: f64, n_sites: usize) -> Self {
        Self {
            epsilon: vec![epsilon; n_sites],
            steps: 16,
            step_size: None,
            mode: AttackMode::Targeted,
            init: AttackInit::Zero,
            scope: NormScope::PerPosition,
        }
    }

    pub fn validate(&self, n_sites: usize) -> Result<()> {
        if self.epsilon.len() != n_sites {
            return Err(Error::InvalidBudget(format!(
                "{} radii for {n_sites} sites",
                self.epsilon.len()
            )));
        }
        if let Some(&e) = self.epsilon.iter().find(|e| e.is_nan() || **e < 0.0) {
            return Err(Error::NegativeEpsilon(e));
        }
        if let Some(eta) = self.step_size {
            if !(eta > 0.0) || !eta.is_finite() {
                return Err(Error::InvalidBudget(format!("step size must be positive, got {eta}")));
            }
        }
        Ok(())
    }

    pub fn is_null(&self) -> bool {
        self.steps == 0 || self.epsilon.iter().all(|&e| e == 0.0)
    }

    fn step_for(&self, site: usize) -> f64 {
        self.step_size.unwrap_or(self.epsilon[site] / 4.0)
    }
}

/// Result of one PGD run.
#[derive(Debug, Clone)]
pub struct PgdOutcome<T = f32> {
    pub perturbation: PerturbationSet<T>,
    /// Objective value at each iterate before its update (`K` entries).
    pub losses: Vec<f64>,
    /// Iterations whose gradient was non-finite and reset the iterate.
    pub resets: usize,
}

/// Projects every site of `set` onto its constraint set.
pub fn project_set<T: Real>(
    set: &PerturbationSet<T>,
    budget: &AttackBudget,
    whiteners: Option<&[Whitener]>,
) -> Result<PerturbationSet<T>> {
    let mut out = set.clone();
    for (i, e) in out.entries_mut().iter_mut().enumerate() {
        let eps = budget.epsilon[i];
        e.delta = match (whiteners, budget.scope) {
            (Some(w), _) => project_whitened(&e.delta, &e.mask, &w[i], eps)?,
            (None, NormScope::PerPosition) => project_l2(&e.delta, &e.mask, eps)?,
            (None, NormScope::Aggregate) => project_l2_aggregate(&e.delta, &e.mask, eps)?,
        };
    }
    Ok(out)
}

fn unit_ball_point(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = norm_f64(&g).max(f64::MIN_POSITIVE);
    let r = rng.gen::<f64>().powf(1.0 / dim as f64);
    g.into_iter().map(|x| x * r / n).collect()
}

fn initial<T: Real>(
    template: &PerturbationSet<T>,
    budget: &AttackBudget,
    whiteners: Option<&[Whitener]>,
    rng: &mut impl Rng,
) -> Result<PerturbationSet<T>> {
    let mut set = template.clone();
    for (i, e) in set.entries_mut().iter_mut().enumerate() {
        e.delta.fill(T::zero());
        if budget.init == AttackInit::Zero {
            continue;
        }
        let eps = budget.epsilon[i];
        let d = e.delta.cols();
        let masked: Vec<usize> = (0..e.mask.len()).filter(|&p| e.mask[p]).collect();
        match (whiteners, budget.scope) {
            (None, NormScope::Aggregate) => {
                let u = unit_ball_point(rng, masked.len() * d);
                for (k, &p) in masked.iter().enumerate() {
                    for (v, x) in e.delta.row_mut(p).iter_mut().zip(&u[k * d..(k + 1) * d]) {
                        *v = T::of(x * eps);
                    }
                }
            }
            _ => {
                for &p in &masked {
                    let z: Vec<f64> = unit_ball_point(rng, d).into_iter().map(|x| x * eps).collect();
                    let v = match whiteners {
                        Some(w) => w[i].dewhiten_f64(&z),
                        None => z,
                    };
                    for (o, x) in e.delta.row_mut(p).iter_mut().zip(v) {
                        *o = T::of(x);
                    }
                }
            }
        }
    }
    project_set(&set, budget, whiteners)
}

/// Projected gradient descent over latent perturbations.
///
/// `template` fixes the sites, shapes and attackable positions; its values are
/// ignored. `objective` returns the loss at a perturbation and its gradient
/// with respect to each entry's `delta`. Each iteration moves every site by
/// `η` along its normalized gradient (over attackable positions; in whitened
/// coordinates when `whiteners` is given) and projects back. A non-finite
/// loss or gradient resets the iterate to the initial point; the iteration
/// still counts. With `ε = 0` everywhere the zero perturbation is returned
/// without evaluating the objective.
pub fn run_pgd<T, F>(
    mut objective: F,
    template: &PerturbationSet<T>,
    budget: &AttackBudget,
    whiteners: Option<&[Whitener]>,
    rng: &mut impl Rng,
) -> Result<PgdOutcome<T>>
where
    T: Real,
    F: FnMut(&PerturbationSet<T>) -> Result<(T, Vec<Tensor<T>>)>,
{
    let n_sites = template.entries().len();
    budget.validate(n_sites)?;
    if let Some(w) = whiteners {
        if w.len() != n_sites {
            return Err(Error::InvalidBudget(format!(
                "{} whiteners for {n_sites} sites",
                w.len()
            )));
        }
        if budget.scope == NormScope::Aggregate {
            return Err(Error::InvalidBudget("whitened attacks use per-position norms".into()));
        }
    }
    if budget.is_null() {
        let mut zero = template.clone();
        zero.entries_mut().iter_mut().for_each(|e| e.delta.fill(T::zero()));
        return Ok(PgdOutcome {
            perturbation: zero,
            losses: Vec::new(),
            resets: 0,
        });
    }
    let start = initial(template, budget, whiteners, rng)?;
    let mut current = start.clone();
    let mut losses = Vec::with_capacity(budget.steps);
    let mut resets = 0;
    let sign = match budget.mode {
        AttackMode::Targeted => -1.0,
        AttackMode::Untargeted => 1.0,
    };
    for _ in 0..budget.steps {
        let (loss, grads) = objective(&current)?;
        if grads.len() != n_sites {
            return Err(Error::InvalidArgument(format!(
                "objective returned {} gradients for {n_sites} sites",
                grads.len()
            )));
        }
        losses.push(loss.as_f64());
        if !loss.as_f64().is_finite() || !grads.iter().all(Tensor::is_finite) {
            current = start.clone();
            resets += 1;
            continue;
        }
        let mut next = current.clone();
        for (i, (e, g)) in next.entries_mut().iter_mut().zip(&grads).enumerate() {
            if g.shape() != e.delta.shape() {
                return Err(Error::PerturbationShape {
                    got: g.shape().to_vec(),
                    seq_len: e.delta.rows(),
                    d_model: e.delta.cols(),
                });
            }
            let eta = budget.step_for(i);
            if eta == 0.0 || budget.epsilon[i] == 0.0 {
                continue;
            }
            let d = e.delta.cols();
            let rows: Vec<usize> = (0..e.mask.len()).filter(|&p| e.mask[p]).collect();
            let dirs: Vec<Vec<f64>> = rows
                .iter()
                .map(|&p| {
                    let g: Vec<f64> = g.row(p).iter().map(|x| x.as_f64()).collect();
                    match whiteners {
                        Some(w) => w[i].gradient_to_whitened(&g),
                        None => g,
                    }
                })
                .collect();
            let norm = dirs.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            for (&p, dir) in rows.iter().zip(&dirs) {
                let step: Vec<f64> = dir.iter().map(|x| sign * eta * x / norm).collect();
                let step = match whiteners {
                    Some(w) => w[i].dewhiten_f64(&step),
                    None => step,
                };
                let row = e.delta.row_mut(p);
                for (v, s) in row.iter_mut().zip(&step[..d]) {
                    *v = T::of(v.as_f64() + s);
                }
            }
        }
        current = project_set(&next, budget, whiteners)?;
    }
    Ok(PgdOutcome {
        perturbation: current,
        losses,
        resets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::HookSite;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn template(rows: usize, d: usize, prompt: usize) -> PerturbationSet<f64> {
        PerturbationSet::zeros(&[HookSite { layer: 0 }], rows, d, prompt)
    }

    /// Loss ‖δ − target‖² on the first row.
    fn quadratic(target: Vec<f64>) -> impl FnMut(&PerturbationSet<f64>) -> Result<(f64, Vec<Tensor<f64>>)> {
        move |set| {
            let e = &set.entries()[0];
            let mut g = Tensor::zeros(e.delta.shape());
            let mut loss = 0.0;
            for (j, t) in target.iter().enumerate() {
                let diff = e.delta.row(0)[j] - t;
                loss += diff * diff;
                g.row_mut(0)[j] = 2.0 * diff;
            }
            Ok((loss, vec![g]))
        }
    }

    #[test]
    fn zero_epsilon_short_circuits() {
        let mut calls = 0;
        let out = run_pgd(
            |_: &PerturbationSet<f64>| {
                calls += 1;
                Ok((0.0, vec![]))
            },
            &template(2, 3, 2),
            &AttackBudget::uniform(0.0, 1),
            None,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(calls, 0);
        assert!(out.perturbation.is_zero());
    }

    #[test]
    fn targeted_descends_to_boundary() {
        let budget = AttackBudget {
            steps: 40,
            ..AttackBudget::uniform(1.0, 1)
        };
        let out = run_pgd(
            quadratic(vec![3.0, 4.0]),
            &template(1, 2, 1),
            &budget,
            None,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let r = out.perturbation.entries()[0].delta.row(0).to_vec();
        assert!((r[0] - 0.6).abs() < 1e-6 && (r[1] - 0.8).abs() < 1e-6, "{r:?}");
        assert!(out.losses.last().unwrap() < &out.losses[0]);
    }

    #[test]
    fn untargeted_ascends() {
        let budget = AttackBudget {
            steps: 40,
            mode: AttackMode::Untargeted,
            ..AttackBudget::uniform(1.0, 1)
        };
        let out = run_pgd(
            quadratic(vec![3.0, 4.0]),
            &template(1, 2, 1),
            &budget,
            None,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let r = out.perturbation.entries()[0].delta.row(0).to_vec();
        assert!((r[0] + 0.6).abs() < 1e-6 && (r[1] + 0.8).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_gradient_resets() {
        let budget = AttackBudget {
            steps: 3,
            ..AttackBudget::uniform(1.0, 1)
        };
        let out = run_pgd(
            |set: &PerturbationSet<f64>| {
                let g = Tensor::full(set.entries()[0].delta.shape(), f64::NAN);
                Ok((1.0, vec![g]))
            },
            &template(1, 2, 1),
            &budget,
            None,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(out.resets, 3);
        assert_eq!(out.losses.len(), 3);
        assert!(out.perturbation.is_zero());
    }

    #[test]
    fn uniform_init_stays_in_ball_and_off_completion() {
        let budget = AttackBudget {
            steps: 1,
            init: AttackInit::UniformBall,
            ..AttackBudget::uniform(0.5, 1)
        };
        let out = run_pgd(
            |set: &PerturbationSet<f64>| Ok((0.0, vec![Tensor::zeros(set.entries()[0].delta.shape())])),
            &template(4, 3, 2),
            &budget,
            None,
            &mut ChaCha8Rng::seed_from_u64(7),
        )
        .unwrap();
        let d = &out.perturbation.entries()[0].delta;
        for p in 0..2 {
            assert!(norm_f64(d.row(p)) <= 0.5);
            assert!(norm_f64(d.row(p)) > 0.0);
        }
        assert!(d.row(2).iter().chain(d.row(3)).all(|&v| v == 0.0));
    }

    #[test]
    fn negative_epsilon_rejected() {
        let r = run_pgd(
            quadratic(vec![1.0]),
            &template(1, 1, 1),
            &AttackBudget::uniform(-0.1, 1),
            None,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(r, Err(Error::NegativeEpsilon(_))));
    }
}
