//! Per-client battery accounting.
//!
//! Each round every live client loses its standby cost `r`; a client that is
//! selected additionally pays the upload cost `s` and one communication cost
//! `a`. A client whose level drops to the critical level or below is dead
//! for the rest of the run.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOW_B0: (f64, f64) = (0.245, 0.265);
pub const HIGH_B0: (f64, f64) = (0.895, 0.905);
pub const STANDBY_RANGE: (f64, f64) = (0.1, 0.15);
pub const UPLOAD_RANGE: (f64, f64) = (0.4, 0.5);
pub const COMM_RANGE: (f64, f64) = (0.24, 0.25);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerRole {
    Low,
    High,
}

/// Multipliers applied to the standby, upload and communication ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostScales {
    pub r_scale: f64,
    pub s_scale: f64,
    pub a_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryParams {
    /// Initial level.
    pub b0: f64,
    /// Standby drain per round.
    pub r: f64,
    /// Model-upload drain per selected round.
    pub s: f64,
    /// Drain per other communication event.
    pub a: f64,
}

impl BatteryParams {
    /// Total drain of one selected round.
    pub fn round_cost(&self) -> f64 {
        self.r + self.s + self.a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryState {
    pub level: f64,
    pub alive: bool,
    pub death_round: Option<usize>,
}

impl BatteryState {
    pub fn new(params: &BatteryParams, critical: f64) -> Self {
        Self {
            level: params.b0,
            alive: params.b0 > critical,
            death_round: None,
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64), scale: f64) -> f64 {
    rng.random_range(lo * scale..=hi * scale)
}

pub fn draw_battery_params(
    role: PowerRole,
    scales: CostScales,
    rng: &mut impl Rng,
) -> Result<BatteryParams> {
    for (name, v) in [
        ("r_scale", scales.r_scale),
        ("s_scale", scales.s_scale),
        ("a_scale", scales.a_scale),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
        }
    }
    let b0 = match role {
        PowerRole::Low => uniform(rng, LOW_B0, 1.0),
        PowerRole::High => uniform(rng, HIGH_B0, 1.0),
    };
    Ok(BatteryParams {
        b0,
        r: uniform(rng, STANDBY_RANGE, scales.r_scale),
        s: uniform(rng, UPLOAD_RANGE, scales.s_scale),
        a: uniform(rng, COMM_RANGE, scales.a_scale),
    })
}

/// Drain charged for one step.
pub fn step_cost(params: &BatteryParams, selected: bool, extra_comm_events: u32) -> f64 {
    let mut cost = params.r;
    if selected {
        cost += params.s + params.a;
    }
    cost + f64::from(extra_comm_events) * params.a
}

/// Advances one round. `death_round` is left for the caller to fill in.
pub fn step_battery(
    state: &BatteryState,
    params: &BatteryParams,
    selected: bool,
    extra_comm_events: u32,
    critical: f64,
) -> Result<BatteryState> {
    if !state.alive {
        return Err(Error::ContractViolation(
            "battery step on a dead client".into(),
        ));
    }
    let level = (state.level - step_cost(params, selected, extra_comm_events)).max(0.0);
    Ok(BatteryState {
        level,
        alive: level > critical,
        death_round: state.death_round,
    })
}

/// True while the fraction of clients at or below `critical` is under
/// `dead_fraction_stop`.
pub fn network_alive(levels: &[f64], critical: f64, dead_fraction_stop: f64) -> bool {
    if levels.is_empty() {
        return false;
    }
    let dead = levels.iter().filter(|&&l| l <= critical).count();
    (dead as f64 / levels.len() as f64) < dead_fraction_stop
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const UNIT: CostScales = CostScales {
        r_scale: 1.0,
        s_scale: 1.0,
        a_scale: 1.0,
    };

    fn params(b0: f64, r: f64, s: f64, a: f64) -> BatteryParams {
        BatteryParams { b0, r, s, a }
    }

    #[test]
    fn draws_within_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let h = draw_battery_params(PowerRole::High, UNIT, &mut rng).unwrap();
            assert!((0.895..=0.905).contains(&h.b0));
            assert!((0.1..=0.15).contains(&h.r));
            assert!((0.4..=0.5).contains(&h.s));
            assert!((0.24..=0.25).contains(&h.a));
            let l = draw_battery_params(PowerRole::Low, UNIT, &mut rng).unwrap();
            assert!((0.245..=0.265).contains(&l.b0));
        }
        let scaled = CostScales {
            r_scale: 0.01,
            s_scale: 0.1,
            a_scale: 0.5,
        };
        let p = draw_battery_params(PowerRole::Low, scaled, &mut rng).unwrap();
        assert!((0.001..=0.0015).contains(&p.r));
        assert!((0.04..=0.05).contains(&p.s));
        assert!((0.12..=0.125).contains(&p.a));
    }

    #[test]
    fn draws_are_seeded() {
        let a = draw_battery_params(PowerRole::Low, UNIT, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = draw_battery_params(PowerRole::Low, UNIT, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_nonpositive_scales() {
        let bad = CostScales {
            r_scale: 0.0,
            ..UNIT
        };
        assert!(draw_battery_params(PowerRole::Low, bad, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn step_arithmetic() {
        let s = BatteryState {
            level: 0.9,
            alive: true,
            death_round: None,
        };
        let p = params(0.9, 0.00125, 0.0045, 0.0025);
        let idle = step_battery(&s, &p, false, 0, 0.2).unwrap();
        assert!((idle.level - 0.89875).abs() < 1e-15);
        let sel = step_battery(&s, &p, true, 0, 0.2).unwrap();
        // 0.9 - (0.00125 + 0.0045 + 0.0025)
        assert!((sel.level - 0.89175).abs() < 1e-15);
        let extra = step_battery(&s, &p, false, 2, 0.2).unwrap();
        assert!((extra.level - (0.9 - 0.00125 - 0.005)).abs() < 1e-15);
    }

    #[test]
    fn crossing_the_critical_level_kills() {
        let s = BatteryState {
            level: 0.201,
            alive: true,
            death_round: None,
        };
        let next = step_battery(&s, &params(0.3, 0.002, 0.0, 0.0), false, 0, 0.2).unwrap();
        assert!((next.level - 0.199).abs() < 1e-15);
        assert!(!next.alive);
        assert!(step_battery(&next, &params(0.3, 0.002, 0.0, 0.0), false, 0, 0.2).is_err());
    }

    #[test]
    fn exactly_critical_is_dead() {
        let p = params(0.2, 0.0, 0.0, 0.0);
        assert!(!BatteryState::new(&p, 0.2).alive);
        assert!(!network_alive(&[0.2, 0.9], 0.2, 0.5));
    }

    #[test]
    fn level_floors_at_zero() {
        let s = BatteryState {
            level: 0.25,
            alive: true,
            death_round: None,
        };
        let next = step_battery(&s, &params(0.3, 0.3, 0.0, 0.0), false, 0, 0.2).unwrap();
        assert_eq!(next.level, 0.0);
    }

    #[test]
    fn network_death_threshold() {
        let mut levels = vec![0.9; 40];
        assert!(network_alive(&levels, 0.2, 0.5));
        for l in levels.iter_mut().take(19) {
            *l = 0.1;
        }
        assert!(network_alive(&levels, 0.2, 0.5));
        levels[19] = 0.2;
        assert!(!network_alive(&levels, 0.2, 0.5));
    }
}
