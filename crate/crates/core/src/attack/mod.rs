//! Latent-space adversary: perturbation sets, norm-ball projections,
//! activation whitening and projected gradient descent.

mod perturbation;
mod pgd;
mod whiten;

pub use perturbation::{project_l2, project_l2_aggregate, PerturbationSet, SiteDelta};
pub use pgd::{project_set, run_pgd, AttackBudget, AttackInit, AttackMode, NormScope, PgdOutcome};
pub use whiten::{fit_whitener, fit_whitener_default, project_whitened, Whitener};
