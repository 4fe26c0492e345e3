use super::latent::Latent;
use super::schedule::NoiseSchedule;
use crate::backend::{Backend, ConditioningBundle};
use crate::error::{Error, Result};

/// Deterministic (eta = 0) DDIM sampling from `t_from` down to `t_to` over
/// `substeps` evenly spaced jumps, querying the backend's guided noise
/// prediction at each visited timestep.
pub fn ddim_denoise(
    z: &Latent,
    t_to: u32,
    cond: &ConditioningBundle,
    backend: &dyn Backend,
    schedule: &NoiseSchedule,
    substeps: u32,
) -> Result<Latent> {
    let t_from = z.timestep;
    schedule.check_timestep(t_from)?;
    if t_to == t_from {
        return Ok(z.clone());
    }
    if t_to > t_from {
        return Err(Error::InvalidTimestep(format!(
            "cannot denoise upward from {t_from} to {t_to}"
        )));
    }
    let path = NoiseSchedule::trajectory(t_from, t_to, substeps);
    let mut cur = z.clone();
    for &t_next in &path[1..] {
        let eps = backend.predict_noise(&cur, cond, schedule)?;
        cur = ddim_step(&cur, &eps, t_next, schedule);
    }
    Ok(cur)
}

/// One DDIM update: estimate the clean latent from the noise prediction and
/// re-noise it to `t_next` along the predicted direction.
pub fn ddim_step(z: &Latent, eps: &super::Noise, t_next: u32, schedule: &NoiseSchedule) -> Latent {
    let t = z.timestep;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    let (an, sn) = (schedule.alpha(t_next), schedule.sigma(t_next));
    let mut data = z.data.clone();
    data.zip_mut_with(eps, |zt, e| {
        let x0 = (*zt - s * e) / a;
        *zt = an * x0 + sn * e;
    });
    Latent {
        data,
        timestep: t_next,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ToyBackend, ToyConfig};
    use crate::diffusion::ScheduleProfile;
    use ndarray::Array3;

    #[test]
    fn empty_trajectory_is_identity() {
        let b = ToyBackend::new(ToyConfig { width: 2, height: 2, ..Default::default() });
        let s = NoiseSchedule::new(100, ScheduleProfile::Cosine).unwrap();
        let z = Latent::new(Array3::from_elem((3, 2, 2), 0.7), 40).unwrap();
        let cond = ConditioningBundle::unguided(b.encode_text("red").unwrap());
        assert_eq!(ddim_denoise(&z, 40, &cond, &b, &s, 10).unwrap(), z);
    }

    #[test]
    fn rejects_upward_denoising() {
        let b = ToyBackend::new(ToyConfig { width: 2, height: 2, ..Default::default() });
        let s = NoiseSchedule::new(100, ScheduleProfile::Cosine).unwrap();
        let z = Latent::new(Array3::zeros((3, 2, 2)), 10).unwrap();
        let cond = ConditioningBundle::unguided(b.encode_text("red").unwrap());
        assert!(ddim_denoise(&z, 20, &cond, &b, &s, 1).is_err());
    }
}
