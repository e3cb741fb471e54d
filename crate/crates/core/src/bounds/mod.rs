//! Exact computations on finite-support worlds: f-divergences,
//! pushforwards, supervised and adversarial losses, and the inequalities
//! relating them.

mod campaign;
mod divergence;
mod exact;
mod world;

pub use campaign::{check_world, verify_campaign, write_csv, CheckRow, IDENTITY_TOL};
pub use divergence::{
    classwise, d_u, d_v, push_attack, push_kernel, push_map, pushed, DivergenceResult, LatentAtoms,
    PushedDistributions, LATENT_TOL,
};
pub use exact::{
    adv_loss_exact, adv_loss_relabeled, asymptotic_un_loss, info_nce_estimate, info_nce_exact,
    info_nce_limit, info_nce_monte_carlo, mean_classifier, multiset_count, sup_loss_exact, tau_ce,
    verify_pushforward_identity, verify_theorem1, verify_theorem1_relabeled, worst_case_attack,
    Estimate, Theorem1Report, ENUMERATION_BUDGET, SLACK_TOL,
};
pub use world::{random_classifier, random_kernel, random_world, Attack, DiscreteWorld, WorldSpec};
