//! Seed derivation tree: scenario seed → per-subsystem → per-step/attempt.
//!
//! Every derived seed is `mix(parent, label)` with SplitMix64 finalization, so
//! streams are independent of evaluation order and thread count.

pub fn mix(parent: u64, label: u64) -> u64 {
    let mut z = parent ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Labels of the top-level branches.
pub mod branch {
    pub const SUBSYSTEM: u64 = 1;
    pub const DISTURBANCE: u64 = 2;
    pub const PROBE: u64 = 3;
    pub const SYSID: u64 = 4;
    pub const RESELECT: u64 = 5;
}

pub fn subsystem(scenario_seed: u64, i: usize) -> u64 {
    mix(mix(scenario_seed, branch::SUBSYSTEM), i as u64)
}

pub fn disturbance(scenario_seed: u64) -> u64 {
    mix(scenario_seed, branch::DISTURBANCE)
}

/// Seed for a reselection attempt of a subsystem at step `t`.
pub fn reselect(subsystem_seed: u64, t: usize, attempt: u32) -> u64 {
    mix(mix(mix(subsystem_seed, branch::RESELECT), t as u64), attempt as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_branches() {
        let s = 42;
        let a = subsystem(s, 0);
        let b = subsystem(s, 1);
        let c = disturbance(s);
        assert!(a != b && b != c && a != c);
        assert_eq!(a, subsystem(42, 0));
        assert_ne!(reselect(a, 3, 1), reselect(a, 3, 2));
    }
}
