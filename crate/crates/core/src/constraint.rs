//! Hydrostatic-balance guidance: a penalty on the horizontal mean of every
//! channel, its gradient, the guidance-strength schedule, and the wall fix-up
//! applied to generated fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::OceanState;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Which rows the wall fix-up overwrites.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WallRows {
    /// First and last latitude rows (the meridional solid walls).
    #[default]
    Latitude,
    /// Shallowest and deepest levels.
    Levels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintConfig {
    /// Target per-channel means (temperature levels, then salinity levels).
    /// `None` means zeros, the standardized training mean.
    pub mu: Option<Vec<f64>>,
    pub eta: f64,
    pub lambda: f64,
    pub k_exp: f64,
    pub walls: WallRows,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        ConstraintConfig {
            mu: None,
            eta: 1e-3,
            lambda: 40.0,
            k_exp: 20.0,
            walls: WallRows::Latitude,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) {
            return Err(Error::config("eta", "must be >= 0"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be >= 0"));
        }
        if !(self.k_exp > 0.0) {
            return Err(Error::config("k_exp", "must be > 0"));
        }
        Ok(())
    }

    fn targets<R: Real>(&self, channels: usize) -> Result<Vec<R>> {
        match &self.mu {
            None => Ok(vec![R::zero(); channels]),
            Some(mu) if mu.len() == channels => Ok(mu.iter().map(|&v| R::of(v)).collect()),
            Some(mu) => Err(Error::Validation(format!(
                "constraint mu has {} entries, tensor has {channels} channels",
                mu.len()
            ))),
        }
    }
}

/// Horizontal mean of each channel.
pub fn channel_means<R: Real>(x: &Tensor<R>) -> Vec<R> {
    let n = R::of(x.plane() as f64);
    (0..x.c).map(|c| x.channel(c).iter().copied().sum::<R>() / n).collect()
}

/// `sum_k (mu_k - m_k)^2` over all channels, `m_k` the channel's horizontal mean.
pub fn constraint_value<R: Real>(x: &Tensor<R>, cfg: &ConstraintConfig) -> Result<R> {
    let mu = cfg.targets::<R>(x.c)?;
    Ok(channel_means(x)
        .into_iter()
        .zip(mu)
        .map(|(m, t)| (t - m) * (t - m))
        .sum())
}

/// Root of the constraint value: the Euclidean norm of the layer-mean deviations.
pub fn layer_mean_deviation<R: Real>(x: &Tensor<R>, cfg: &ConstraintConfig) -> Result<R> {
    Ok(constraint_value(x, cfg)?.sqrt())
}

/// `dC/dx_ijk = (2/N)(m_k - mu_k)`, constant over each channel.
pub fn constraint_gradient<R: Real>(x: &Tensor<R>, cfg: &ConstraintConfig) -> Result<Tensor<R>> {
    let mu = cfg.targets::<R>(x.c)?;
    let scale = R::of(2.0) / R::of(x.plane() as f64);
    let mut g = Tensor::zeros(x.c, x.w, x.h);
    for (c, m) in channel_means(x).into_iter().enumerate() {
        g.channel_mut(c).fill(scale * (m - mu[c]));
    }
    Ok(g)
}

/// Guidance strength `eta (1 + lambda exp(-k s / S))`; largest near `s = 1`.
pub fn kappa(s: usize, n_steps: usize, cfg: &ConstraintConfig) -> f64 {
    cfg.eta * (1.0 + cfg.lambda * (-cfg.k_exp * s as f64 / n_steps as f64).exp())
}

/// Copies the nearest interior row onto each wall row.
pub fn boundary_fixup<R: Real>(state: &OceanState<R>, walls: WallRows) -> Result<OceanState<R>> {
    let d = state.dims;
    let mut out = state.clone();
    match walls {
        WallRows::Latitude => {
            if d.h < 3 {
                return Err(Error::Validation(format!(
                    "wall fix-up needs H >= 3, got {}",
                    d.h
                )));
            }
            for field in [&mut out.temperature, &mut out.salinity] {
                for k in 0..d.z {
                    for i in 0..d.w {
                        field[d.idx(k, i, 0)] = field[d.idx(k, i, 1)];
                        field[d.idx(k, i, d.h - 1)] = field[d.idx(k, i, d.h - 2)];
                    }
                }
            }
        }
        WallRows::Levels => {
            if d.z < 3 {
                return Err(Error::Validation(format!(
                    "level fix-up needs Z >= 3, got {}",
                    d.z
                )));
            }
            let n = d.level_len();
            for field in [&mut out.temperature, &mut out.salinity] {
                field.copy_within(n..2 * n, 0);
                field.copy_within((d.z - 2) * n..(d.z - 1) * n, (d.z - 1) * n);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_tensor(c: usize, w: usize, h: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(c, w, h, (0..c * w * h).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn hand_example() {
        let x = Tensor::from_vec(2, 2, 1, vec![1.0, 3.0, -1.0, 1.0]);
        let cfg = ConstraintConfig::default();
        assert_eq!(constraint_value(&x, &cfg).unwrap(), 4.0);
        let g = constraint_gradient(&x, &cfg).unwrap();
        assert_eq!(g.data, vec![2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn satisfied_constraint_is_zero_with_zero_gradient() {
        let mut x = random_tensor(4, 3, 5, 1);
        let means = channel_means(&x);
        let cfg = ConstraintConfig {
            mu: Some(means.clone()),
            ..Default::default()
        };
        assert!(constraint_value(&x, &cfg).unwrap() < 1e-28);
        assert!(constraint_gradient(&x, &cfg).unwrap().data.iter().all(|v| v.abs() < 1e-14));
        for c in 0..4 {
            let m = means[c];
            x.channel_mut(c).iter_mut().for_each(|v| *v -= m);
        }
        assert!(constraint_value(&x, &ConstraintConfig::default()).unwrap() < 1e-28);
    }

    #[test]
    fn mu_length_mismatch_is_an_error() {
        let x = random_tensor(4, 2, 2, 0);
        let cfg = ConstraintConfig {
            mu: Some(vec![0.0; 3]),
            ..Default::default()
        };
        assert!(constraint_value(&x, &cfg).is_err());
        assert!(constraint_gradient(&x, &cfg).is_err());
    }

    #[test]
    fn shifting_one_channel_changes_value_by_quadratic_difference() {
        let x = random_tensor(3, 4, 4, 2);
        let cfg = ConstraintConfig::default();
        let m = channel_means(&x)[1];
        let c = 0.7;
        let mut y = x.clone();
        y.channel_mut(1).iter_mut().for_each(|v| *v += c);
        let diff = constraint_value(&y, &cfg).unwrap() - constraint_value(&x, &cfg).unwrap();
        assert!((diff - ((m + c).powi(2) - m.powi(2))).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let x = random_tensor(4, 6, 5, 3);
        let cfg = ConstraintConfig {
            mu: Some(vec![0.3, -0.2, 0.1, 0.5]),
            ..Default::default()
        };
        let g = constraint_gradient(&x, &cfg).unwrap();
        let h = 1e-5;
        for p in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data[p] += h;
            b.data[p] -= h;
            let fd = (constraint_value(&a, &cfg).unwrap() - constraint_value(&b, &cfg).unwrap()) / (2.0 * h);
            assert!((fd - g.data[p]).abs() <= 1e-8 * g.data[p].abs().max(1e-3));
        }
    }

    #[test]
    fn kappa_at_stated_constants() {
        let cfg = ConstraintConfig::default();
        let end = kappa(1000, 1000, &cfg);
        assert!((end - 1e-3 * (1.0 + 40.0 * (-20.0f64).exp())).abs() < 1e-18);
        assert!((end - 1.0000000824e-3).abs() < 1e-13);
        let quarter = kappa(250, 1000, &cfg);
        assert!((quarter - 1.2695e-3).abs() < 1e-7);
    }

    #[test]
    fn kappa_strictly_decreases_in_s() {
        let cfg = ConstraintConfig::default();
        let ks: Vec<f64> = (1..=250).map(|s| kappa(s, 250, &cfg)).collect();
        assert!(ks.windows(2).all(|p| p[1] < p[0]));
        assert!(ks.iter().all(|&k| k > 0.0));
    }

    fn random_state(dims: Dims, seed: u64) -> OceanState<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let t = (0..dims.len()).map(|_| rng.gen_range(0.0..20.0)).collect();
        let s = (0..dims.len()).map(|_| rng.gen_range(34.0..36.0)).collect();
        OceanState::new(dims, t, s, false).unwrap()
    }

    #[test]
    fn fixup_copies_interior_rows_and_is_idempotent() {
        let d = Dims::new(3, 4, 5);
        let st = random_state(d, 5);
        let once = boundary_fixup(&st, WallRows::Latitude).unwrap();
        for k in 0..3 {
            for i in 0..4 {
                assert_eq!(once.temperature[d.idx(k, i, 0)], once.temperature[d.idx(k, i, 1)]);
                assert_eq!(once.salinity[d.idx(k, i, 4)], once.salinity[d.idx(k, i, 3)]);
                assert_eq!(once.temperature[d.idx(k, i, 2)], st.temperature[d.idx(k, i, 2)]);
            }
        }
        assert_eq!(boundary_fixup(&once, WallRows::Latitude).unwrap(), once);
        assert!(boundary_fixup(&random_state(Dims::new(2, 2, 2), 0), WallRows::Latitude).is_err());
    }

    #[test]
    fn level_fixup_copies_neighbouring_levels() {
        let d = Dims::new(4, 2, 3);
        let st = random_state(d, 6);
        let out = boundary_fixup(&st, WallRows::Levels).unwrap();
        assert_eq!(out.t_level(0), st.t_level(1));
        assert_eq!(out.s_level(3), st.s_level(2));
        assert_eq!(out.t_level(2), st.t_level(2));
    }

    proptest! {
        #[test]
        fn value_is_nonnegative_and_gradient_is_uniform(seed in any::<u64>(), c in 1usize..5) {
            let x = random_tensor(c, 3, 4, seed);
            let cfg = ConstraintConfig::default();
            prop_assert!(constraint_value(&x, &cfg).unwrap() >= 0.0);
            let g = constraint_gradient(&x, &cfg).unwrap();
            for ch in 0..c {
                let first = g.channel(ch)[0];
                prop_assert!(g.channel(ch).iter().all(|&v| v == first));
            }
        }

        #[test]
        fn small_descent_step_decreases_value(seed in any::<u64>(), rate in 0.01f64..5.9) {
            // N = 12 cells per channel, so any rate below N/2 = 6 descends.
            let x = random_tensor(3, 3, 4, seed);
            let cfg = ConstraintConfig::default();
            let c0 = constraint_value(&x, &cfg).unwrap();
            let g = constraint_gradient(&x, &cfg).unwrap();
            let mut y = x.clone();
            y.data.iter_mut().zip(&g.data).for_each(|(v, d)| *v -= rate * d);
            prop_assert!(c0 == 0.0 || constraint_value(&y, &cfg).unwrap() < c0);
        }
    }
}
