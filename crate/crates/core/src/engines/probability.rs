//! Mutation probabilities and the coverage-feedback update rule.

use std::collections::{BTreeMap, BTreeSet};

use super::{EngineError, MutationLog};
use crate::dissector::DissectedPacket;

pub const P_MIN: f64 = 0.001;
pub const P_MAX: f64 = 1.0;

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(P_MIN, P_MAX)
}

/// Initial per-field probability `k / |F_P|`, clamped.
pub fn initial_probability(k: f64, field_count: usize) -> f64 {
    if field_count == 0 {
        return P_MAX;
    }
    clamp_probability(k / field_count as f64)
}

pub fn init_probabilities(d: &DissectedPacket, k: f64) -> Vec<(String, f64)> {
    let p = initial_probability(k, d.field_count());
    d.fields.iter().map(|f| (f.path.clone(), p)).collect()
}

/// Warm-up factor `min(i / warm_i, 1)`.
pub fn gamma_warmup(i: u64, warm_i: u64) -> Result<f64, EngineError> {
    if warm_i == 0 {
        return Err(EngineError::InvalidHyperparameter("warm_i must be positive".into()));
    }
    Ok((i as f64 / warm_i as f64).min(1.0))
}

/// Signed gain `h(c) * g(i) / n`.
///
/// The penalty branch at `gamma == 0` uses `g = 1 / beta`.
pub fn feedback_gain(c_i: u64, i: u64, beta: f64, warm_i: u64, n_i: usize) -> Result<f64, EngineError> {
    if n_i == 0 {
        return Err(EngineError::InvalidHyperparameter("n_i must be at least 1".into()));
    }
    if beta.is_nan() || beta <= 0.0 {
        return Err(EngineError::InvalidHyperparameter("beta must be positive".into()));
    }
    let gamma = gamma_warmup(i, warm_i)?;
    let (h, g) = if c_i > 0 {
        (1.0, beta * gamma)
    } else if gamma == 0.0 {
        (-1.0, 1.0 / beta)
    } else {
        (-1.0, 1.0 / (beta * gamma))
    };
    Ok(h * g / n_i as f64)
}

/// `clamp(p + G / log2(|V_f| + 1))`.
pub fn apply_gain(p: f64, gain: f64, domain_size: u128) -> f64 {
    clamp_probability(p + gain / ((domain_size as f64) + 1.0).log2())
}

/// Per `(message code, field path)` probabilities plus the update hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityTable {
    pub k: f64,
    pub beta: f64,
    pub warm_i: u64,
    entries: BTreeMap<(u8, String), f64>,
}

impl ProbabilityTable {
    pub fn new(k: f64, beta: f64, warm_i: u64) -> Result<Self, EngineError> {
        if !k.is_finite() || k < 0.0 {
            return Err(EngineError::InvalidHyperparameter("k must be non-negative".into()));
        }
        if !beta.is_finite() || beta <= 0.0 {
            return Err(EngineError::InvalidHyperparameter("beta must be positive".into()));
        }
        if warm_i == 0 {
            return Err(EngineError::InvalidHyperparameter("warm_i must be positive".into()));
        }
        Ok(Self { k, beta, warm_i, entries: BTreeMap::new() })
    }

    /// Probabilities aligned with `d.fields`; fields seen for the first time
    /// are initialized from this packet's field count.
    pub fn probabilities_for(&mut self, message: u8, d: &DissectedPacket) -> Vec<f64> {
        let init = initial_probability(self.k, d.field_count());
        d.fields.iter().map(|f| *self.entries.entry((message, f.path.clone())).or_insert(init)).collect()
    }

    pub fn get(&self, message: u8, path: &str) -> Option<f64> {
        self.entries.get(&(message, path.to_string())).copied()
    }

    pub fn set(&mut self, message: u8, path: &str, p: f64) {
        self.entries.insert((message, path.to_string()), clamp_probability(p));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, &str, f64)> {
        self.entries.iter().map(|((m, p), v)| (*m, p.as_str(), *v))
    }

    /// Applies the gain once to every distinct field mutated during the iteration.
    pub fn update(&mut self, log: &MutationLog, c_i: u64, i: u64) -> Result<(), EngineError> {
        let n_i = log.n_i();
        if n_i == 0 {
            return Ok(());
        }
        let gain = feedback_gain(c_i, i, self.beta, self.warm_i, n_i)?;
        let mut seen = BTreeSet::new();
        for m in &log.mutations {
            if !seen.insert((m.message, m.path.as_str())) {
                continue;
            }
            let key = (m.message, m.path.clone());
            let p = self.entries.get(&key).copied().unwrap_or_else(|| initial_probability(self.k, 1));
            self.entries.insert(key, apply_gain(p, gain, 1u128 << m.bit_width));
        }
        Ok(())
    }
}

pub fn update_probabilities(
    table: &mut ProbabilityTable,
    log: &MutationLog,
    c_i: u64,
    i: u64,
) -> Result<(), EngineError> {
    table.update(log, c_i, i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engines::FieldMutation;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn initial_probability_examples() {
        assert!(close(initial_probability(2.0, 10), 0.2, 1e-12));
        assert_eq!(initial_probability(2.0, 1), 1.0);
        assert_eq!(initial_probability(2.0, 4000), P_MIN);
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(gamma_warmup(1000, 2000).unwrap(), 0.5);
        assert_eq!(gamma_warmup(3000, 2000).unwrap(), 1.0);
        assert_eq!(gamma_warmup(0, 2000).unwrap(), 0.0);
        assert!(gamma_warmup(5, 0).is_err());
    }

    #[test]
    fn gain_examples() {
        assert!(close(feedback_gain(5, 4000, 3.0, 2000, 2).unwrap(), 1.5, 1e-12));
        assert!(close(feedback_gain(0, 4000, 3.0, 2000, 3).unwrap(), -1.0 / 9.0, 1e-12));
        assert!(close(feedback_gain(1, 1000, 3.0, 2000, 1).unwrap(), 1.5, 1e-12));
    }

    #[test]
    fn gain_guard_at_zero_warmup() {
        assert!(close(feedback_gain(0, 0, 3.0, 2000, 1).unwrap(), -1.0 / 3.0, 1e-12));
        assert_eq!(feedback_gain(4, 0, 3.0, 2000, 1).unwrap(), 0.0);
        assert!(feedback_gain(1, 1, 3.0, 2000, 0).is_err());
    }

    #[test]
    fn apply_gain_byte_field() {
        // log2(257) = 8.005624549193879
        let p = apply_gain(0.2, 1.5, 256);
        assert!(close(p, 0.387_368_3, 1e-6));
        assert!(close(p, 0.38737, 1e-5));
        assert_eq!(apply_gain(0.999, 100.0, 256), 1.0);
        assert_eq!(apply_gain(0.002, -100.0, 256), P_MIN);
    }

    fn log_with(paths: &[&str]) -> MutationLog {
        let mut log = MutationLog::new(1);
        for p in paths {
            log.mutations.push(FieldMutation { message: 0x0c, path: p.to_string(), bit_width: 8, old: 0, new: 1 });
        }
        log
    }

    #[test]
    fn update_is_noop_without_mutations() {
        let mut t = ProbabilityTable::new(2.0, 3.0, 2000).unwrap();
        t.set(0x0c, "a", 0.2);
        let before = t.clone();
        t.update(&MutationLog::new(7), 10, 7).unwrap();
        assert_eq!(t, before);
    }

    #[test]
    fn update_touches_only_mutated_fields_once() {
        let mut t = ProbabilityTable::new(2.0, 3.0, 2000).unwrap();
        t.set(0x0c, "a", 0.2);
        t.set(0x0c, "b", 0.2);
        // n_i = 2 log entries, one distinct field; G = 3 * 1 / 2.
        t.update(&log_with(&["a", "a"]), 5, 4000).unwrap();
        assert!(close(t.get(0x0c, "a").unwrap(), 0.38737, 1e-5));
        assert_eq!(t.get(0x0c, "b").unwrap(), 0.2);
    }

    #[test]
    fn table_rejects_bad_hyperparameters() {
        assert!(ProbabilityTable::new(2.0, 0.0, 2000).is_err());
        assert!(ProbabilityTable::new(2.0, 3.0, 0).is_err());
        assert!(ProbabilityTable::new(-1.0, 3.0, 10).is_err());
    }
}
