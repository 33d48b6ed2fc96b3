//! Training-time sparsity anneal: dense start, +0.03 every 30 steps up to
//! 0.9, with the KV keep fraction gliding from all blocks down to 0.1x.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub step_interval: u64,
    pub increment: f64,
    pub cap: f64,
    pub kv_start_fraction: f64,
    pub kv_end_fraction: f64,
    pub r_fixed: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            step_interval: 30,
            increment: 0.03,
            cap: 0.9,
            kv_start_fraction: 1.0,
            kv_end_fraction: 0.1,
            r_fixed: 0.5,
        }
    }
}

impl AnnealSchedule {
    /// s = min(cap, increment * floor(step / interval)).
    pub fn sparsity_at_step(&self, step: u64) -> f64 {
        (self.increment * (step / self.step_interval) as f64).min(self.cap)
    }

    /// Linear glide from the start fraction to the end fraction across the
    /// anneal horizon, held at the end value afterwards.
    pub fn kv_fraction_at_step(&self, step: u64, total_anneal_steps: u64) -> f64 {
        assert!(total_anneal_steps > 0, "anneal horizon must be positive");
        if step >= total_anneal_steps {
            return self.kv_end_fraction;
        }
        let t = step as f64 / total_anneal_steps as f64;
        self.kv_start_fraction + (self.kv_end_fraction - self.kv_start_fraction) * t
    }
}

/// Splits a combined sparsity target into (r, kv_keep_fraction): r stays at
/// r_fixed while the KV side can absorb the target, then the query side
/// relaxes alone.
pub fn knobs_for_sparsity(s_target: f64, r_fixed: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&s_target) {
        return Err(Error::Config(format!("sparsity target {s_target} outside [0,1)")));
    }
    if !(r_fixed > 0.0 && r_fixed <= 1.0) {
        return Err(Error::Config(format!("r_fixed {r_fixed} outside (0,1]")));
    }
    let kv = (1.0 - s_target) / r_fixed;
    Ok(if kv <= 1.0 { (r_fixed, kv) } else { (1.0 - s_target, 1.0) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::combined_sparsity;

    #[test]
    fn dense_warmup_then_steps() {
        let sch = AnnealSchedule::default();
        for step in 0..30 {
            assert_eq!(sch.sparsity_at_step(step), 0.0);
        }
        assert_eq!(sch.sparsity_at_step(30), 0.03);
        assert_eq!(sch.sparsity_at_step(59), 0.03);
        assert_eq!(sch.sparsity_at_step(60), 0.06);
    }

    #[test]
    fn caps_at_point_nine() {
        let sch = AnnealSchedule::default();
        assert_eq!(sch.sparsity_at_step(10_000), 0.9);
        // at step 900 the product 0.03 * 30 is still below the cap in f64
        // (0.8999999999999999), so the formula value is returned as-is
        assert_eq!(sch.sparsity_at_step(900), 0.03 * 30.0);
        assert!(sch.sparsity_at_step(900) < 0.9);
        assert_eq!(sch.sparsity_at_step(930), 0.9);
    }

    #[test]
    fn non_decreasing_piecewise_constant() {
        let sch = AnnealSchedule::default();
        let mut prev = 0.0;
        for step in 0..2000 {
            let s = sch.sparsity_at_step(step);
            assert!(s >= prev);
            assert_eq!(s, sch.sparsity_at_step(step - step % 30));
            prev = s;
        }
    }

    #[test]
    fn kv_glide_endpoints_and_midpoint() {
        let sch = AnnealSchedule::default();
        assert_eq!(sch.kv_fraction_at_step(0, 9000), 1.0);
        assert_eq!(sch.kv_fraction_at_step(9000, 9000), 0.1);
        assert_eq!(sch.kv_fraction_at_step(20_000, 9000), 0.1);
        assert!((sch.kv_fraction_at_step(4500, 9000) - 0.55).abs() < 1e-12);
    }

    #[test]
    fn knob_examples() {
        let (r, kv) = knobs_for_sparsity(0.93, 0.5).unwrap();
        assert_eq!(r, 0.5);
        assert!((kv - 0.14).abs() < 1e-12);

        assert_eq!(knobs_for_sparsity(0.0, 0.5).unwrap(), (1.0, 1.0));

        let (r, kv) = knobs_for_sparsity(0.3, 0.5).unwrap();
        assert!((r - 0.7).abs() < 1e-15);
        assert_eq!(kv, 1.0);
    }

    #[test]
    fn knob_round_trip() {
        for i in 0..=18 {
            let s = i as f64 * 0.05;
            let (r, kv) = knobs_for_sparsity(s, 0.5).unwrap();
            let back = combined_sparsity(1.0 - r, 1.0 - kv);
            assert!((back - s).abs() < 1e-12, "s={s} back={back}");
        }
    }

    #[test]
    fn knob_domain_checked() {
        assert!(knobs_for_sparsity(1.0, 0.5).is_err());
        assert!(knobs_for_sparsity(-0.1, 0.5).is_err());
        assert!(knobs_for_sparsity(0.5, 0.0).is_err());
    }
}
