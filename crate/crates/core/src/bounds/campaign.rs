use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;

use super::divergence::{d_u, d_v, pushed};
use super::exact::{
    asymptotic_un_loss, mean_classifier, sup_loss_exact, verify_pushforward_identity,
    verify_theorem1, verify_theorem1_relabeled, SLACK_TOL,
};
use super::world::{random_classifier, random_world, WorldSpec};

/// Tolerance of the pushforward identity.
pub const IDENTITY_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub world_id: usize,
    pub check_name: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
}

fn le(world_id: usize, check_name: &'static str, lhs: f64, rhs: f64) -> CheckRow {
    CheckRow {
        world_id,
        check_name,
        lhs,
        rhs,
        slack: rhs - lhs,
        pass: rhs - lhs >= SLACK_TOL,
    }
}

/// Runs every exact check on one world with a random `W` and `τ`.
pub fn check_world<R: Rng + ?Sized>(
    world_id: usize,
    rng: &mut R,
    spec: &WorldSpec,
) -> Result<Vec<CheckRow>> {
    let world = random_world(rng, spec);
    let w = random_classifier(rng, &world);
    let tau = rng.gen_range(0.2..2.0);
    let mut rows = Vec::new();

    let t1 = verify_theorem1(&world, &w, tau)?;
    rows.push(le(world_id, "theorem1_data", t1.lhs, t1.rhs_data));
    rows.push(le(world_id, "theorem1_latent", t1.lhs, t1.rhs_latent));
    rows.push(le(
        world_id,
        "theorem1_classwise_data",
        t1.lhs,
        t1.rhs_class_data,
    ));
    rows.push(le(
        world_id,
        "theorem1_classwise_latent",
        t1.lhs,
        t1.rhs_class_latent,
    ));
    let rel = verify_theorem1_relabeled(&world, &w, tau)?;
    rows.push(le(
        world_id,
        "theorem1_relabeled_data",
        rel.lhs,
        rel.rhs_data,
    ));
    rows.push(le(
        world_id,
        "theorem1_relabeled_latent",
        rel.lhs,
        rel.rhs_latent,
    ));

    let err = verify_pushforward_identity(&world, &w, tau);
    rows.push(CheckRow {
        world_id,
        check_name: "pushforward_identity",
        lhs: err,
        rhs: IDENTITY_TOL,
        slack: IDENTITY_TOL - err,
        pass: err < IDENTITY_TOL,
    });

    let wb = mean_classifier(&world);
    let lsup = sup_loss_exact(&world, &wb, tau);
    let lun = asymptotic_un_loss(&world, tau);
    rows.push(le(world_id, "mean_classifier_bound", lsup, lun));
    let min_prior = world.pi.iter().copied().fold(f64::INFINITY, f64::min);
    rows.push(le(
        world_id,
        "mean_classifier_bound_prior",
        lsup,
        lun - min_prior.ln(),
    ));

    let d = pushed(&world);
    let du = d_u(&d.p_adv, &d.p_data)?.value;
    let dv = d_v(&d.p_adv, &d.p_data)?.value;
    rows.push(le(world_id, "du_squared_le_dv", du * du, dv));
    Ok(rows)
}

/// Checks `worlds` random worlds. World `i` draws from its own stream so
/// any single world can be reproduced from `(seed, i)`.
pub fn verify_campaign(worlds: usize, seed: u64, max_atoms: usize) -> Result<Vec<CheckRow>> {
    let spec = WorldSpec {
        max_atoms: max_atoms.max(2),
        ..WorldSpec::default()
    };
    let mut rows = Vec::new();
    for id in 0..worlds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64);
        rows.extend(check_world(id, &mut rng, &spec)?);
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[CheckRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
