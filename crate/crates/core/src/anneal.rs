//! Simulated annealing over per-stage pruning ratios: geometric cooling,
//! Metropolis acceptance, reheating when the temperature freezes, and a
//! bounded restart count. The energy function is pluggable; lower is better.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::prune::{RatioConfig, RATIO_MAX};
use crate::rng::substream;

/// Neighbor step scale at T = T_init.
pub const NEIGHBOR_SIGMA: f64 = 0.15;

/// Temperature units spanned by the seed-set energy spread under
/// normalization. With the step size proportional to T, the Metropolis
/// exponent is temperature-invariant, so this single constant sets how
/// greedy the walk is; four units keeps T_init hot while making the
/// sub-0.25 tail of each cooling cycle effectively a descent.
pub const SPREAD_TEMPERATURE_UNITS: f64 = 4.0;

#[derive(Clone, Debug)]
pub struct SaParams {
    pub t_init: f64,
    pub alpha: f64,
    pub n_iter: usize,
    pub seeds: Vec<RatioConfig>,
    pub restart_max: usize,
    pub t_min: f64,
    pub rng_seed: u64,
    /// Rescale energies by the seed-set spread so t_init = 1 is meaningful
    /// for any objective.
    pub normalize_energy: bool,
}

impl SaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha {} outside (0,1)", self.alpha)));
        }
        if self.n_iter == 0 {
            return Err(Error::invalid("n_iter must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seed set must be non-empty"));
        }
        if !(self.t_init > 0.0) || !(self.t_min > 0.0) {
            return Err(Error::invalid("temperatures must be positive"));
        }
        for s in &self.seeds {
            s.validate()?;
        }
        Ok(())
    }

    /// Library defaults: mild cooling, a uniform seed ladder plus the
    /// published sdxl 512x512 block-wise row.
    pub fn default_seeds() -> Vec<RatioConfig> {
        let mut seeds: Vec<RatioConfig> = [0.1, 0.2, 0.3, 0.4]
            .into_iter()
            .map(|r| crate::prune::uniform_config(r).expect("in range"))
            .collect();
        seeds.push(RatioConfig::new(0.397, 0.434, 0.387).expect("in range"));
        seeds
    }
}

impl Default for SaParams {
    fn default() -> Self {
        Self {
            t_init: 1.0,
            alpha: 0.95,
            n_iter: 300,
            seeds: Self::default_seeds(),
            restart_max: 2,
            t_min: 1e-3,
            rng_seed: 0,
            normalize_energy: true,
        }
    }
}

/// Evaluation contract mapping a ratio configuration to a scalar energy.
pub trait EnergyFn {
    fn evaluate(&self, config: &RatioConfig) -> Result<f64>;
}

impl<F: Fn(&RatioConfig) -> Result<f64>> EnergyFn for F {
    fn evaluate(&self, config: &RatioConfig) -> Result<f64> {
        self(config)
    }
}

#[derive(Clone, Debug)]
pub struct TraceRow {
    pub iter: usize,
    pub temperature: f64,
    pub config: RatioConfig,
    pub energy: f64,
    pub accepted: bool,
    pub energy_best: f64,
}

/// Final annealer state plus the full evaluation trace.
#[derive(Clone, Debug)]
pub struct SaState {
    pub s_curr: RatioConfig,
    pub s_best: RatioConfig,
    pub e_curr: f64,
    pub e_best: f64,
    pub temperature: f64,
    pub restarts: usize,
    pub evaluations: usize,
    pub seed_energies: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

/// Lowest-energy seed; ties go to the earliest list position.
pub fn best_seed(seeds: &[RatioConfig], energy: &dyn EnergyFn) -> Result<(RatioConfig, f64)> {
    let energies = evaluate_seeds(seeds, energy)?;
    let (idx, e) = argmin(&energies);
    Ok((seeds[idx], e))
}

fn evaluate_seeds(seeds: &[RatioConfig], energy: &dyn EnergyFn) -> Result<Vec<f64>> {
    if seeds.is_empty() {
        return Err(Error::invalid("seed set must be non-empty"));
    }
    seeds.iter().map(|s| energy.evaluate(s)).collect()
}

fn argmin(values: &[f64]) -> (usize, f64) {
    let mut idx = 0;
    let mut best = values[0];
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < best {
            idx = i;
            best = v;
        }
    }
    (idx, best)
}

/// Perturbs each component with an independent Gaussian of standard deviation
/// 0.15·(T/T_init), then clamps to the valid ratio range.
pub fn generate_neighbor(
    config: &RatioConfig,
    temperature: f64,
    t_init: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RatioConfig> {
    if temperature <= 0.0 || t_init <= 0.0 {
        return Err(Error::invalid("neighbor generation needs T > 0"));
    }
    let sigma = NEIGHBOR_SIGMA * (temperature / t_init);
    let mut vals = config.as_array();
    for v in &mut vals {
        let z: f64 = rng.sample(StandardNormal);
        *v = (*v + sigma * z).clamp(0.0, RATIO_MAX);
    }
    Ok(RatioConfig {
        r_down: vals[0],
        r_mid: vals[1],
        r_up: vals[2],
    })
}

/// Metropolis rule: downhill always accepted, uphill iff exp(−ΔE/T) > u.
pub fn accept(e_curr: f64, e_neighbor: f64, temperature: f64, u: f64) -> bool {
    if e_neighbor < e_curr {
        return true;
    }
    (-(e_neighbor - e_curr) / temperature).exp() > u
}

/// Runs the annealing loop. `observer` sees each trace row as it is produced,
/// so callers can stream the trace to disk; when an energy evaluation fails
/// mid-run, everything streamed so far is already flushed.
pub fn run(
    params: &SaParams,
    energy: &dyn EnergyFn,
    mut observer: impl FnMut(&TraceRow),
) -> Result<SaState> {
    params.validate()?;
    let seed_energies = evaluate_seeds(&params.seeds, energy)?;
    let (best_idx, e_init) = argmin(&seed_energies);

    // Affine rescale by the seed-set spread; acceptance then sees deltas
    // measured in fractions of the spread.
    let scale = if params.normalize_energy {
        let lo = seed_energies.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = seed_energies
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > 0.0 {
            (hi - lo) / SPREAD_TEMPERATURE_UNITS
        } else {
            1.0
        }
    } else {
        1.0
    };

    let mut state = SaState {
        s_curr: params.seeds[best_idx],
        s_best: params.seeds[best_idx],
        e_curr: e_init,
        e_best: e_init,
        temperature: params.t_init,
        restarts: 0,
        evaluations: params.seeds.len(),
        seed_energies,
        trace: Vec::new(),
    };

    let mut rng = substream(params.rng_seed, "anneal", 0);
    for iter in 1..=params.n_iter {
        let temperature = state.temperature;
        let neighbor = generate_neighbor(&state.s_curr, temperature, params.t_init, &mut rng)?;
        let e_neighbor = energy.evaluate(&neighbor)?;
        state.evaluations += 1;

        let accepted = if e_neighbor < state.e_curr {
            true
        } else {
            let u: f64 = rng.gen_range(0.0..1.0);
            accept(state.e_curr / scale, e_neighbor / scale, temperature, u)
        };
        if accepted {
            state.s_curr = neighbor;
            state.e_curr = e_neighbor;
        }
        if state.e_curr < state.e_best {
            state.s_best = state.s_curr;
            state.e_best = state.e_curr;
        }

        let row = TraceRow {
            iter,
            temperature,
            config: neighbor,
            energy: e_neighbor,
            accepted,
            energy_best: state.e_best,
        };
        observer(&row);
        state.trace.push(row);

        state.temperature *= params.alpha;
        if state.temperature < params.t_min {
            state.temperature = params.t_init;
            state.restarts += 1;
            if state.restarts > params.restart_max {
                break;
            }
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prune::uniform_config;

    fn convex_energy(target: [f64; 3]) -> impl Fn(&RatioConfig) -> Result<f64> {
        move |r: &RatioConfig| {
            let v = r.as_array();
            Ok(v.iter()
                .zip(target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum())
        }
    }

    #[test]
    fn best_seed_examples() {
        let seeds = vec![
            uniform_config(0.1).unwrap(),
            uniform_config(0.2).unwrap(),
            uniform_config(0.3).unwrap(),
        ];
        // Single seed returns itself.
        let one = &seeds[..1];
        let f = |_: &RatioConfig| Ok(7.0);
        let (s, e) = best_seed(one, &f).unwrap();
        assert_eq!(s, seeds[0]);
        assert_eq!(e, 7.0);

        // Energies (3, 1, 2) -> second seed.
        let f = |r: &RatioConfig| {
            Ok(match (r.r_down * 10.0).round() as i64 {
                1 => 3.0,
                2 => 1.0,
                _ => 2.0,
            })
        };
        let (s, e) = best_seed(&seeds, &f).unwrap();
        assert_eq!(s, seeds[1]);
        assert_eq!(e, 1.0);

        // Duplicated best energy -> earliest index.
        let f = |r: &RatioConfig| {
            Ok(if (r.r_down * 10.0).round() as i64 == 3 {
                5.0
            } else {
                1.0
            })
        };
        let (s, _) = best_seed(&seeds, &f).unwrap();
        assert_eq!(s, seeds[0]);

        let f = |_: &RatioConfig| Ok(0.0);
        assert!(best_seed(&[], &f).is_err());
    }

    #[test]
    fn neighbor_scale_tracks_temperature() {
        let base = uniform_config(0.45).unwrap();
        let mut rng = substream(5, "nbr", 0);
        // Vanishing temperature keeps the neighbor close.
        let n = generate_neighbor(&base, 1e-9, 1.0, &mut rng).unwrap();
        for (a, b) in n.as_array().iter().zip(base.as_array()) {
            assert!((a - b).abs() < 1e-6);
        }
        // Component at the cap can only move downward.
        let capped = RatioConfig::new(0.9, 0.5, 0.5).unwrap();
        for i in 0..100 {
            let mut r = substream(i, "cap", 0);
            let n = generate_neighbor(&capped, 1.0, 1.0, &mut r).unwrap();
            assert!(n.r_down <= 0.9);
        }
        assert!(generate_neighbor(&base, 0.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn neighbor_empirical_std_matches_sigma() {
        let base = uniform_config(0.45).unwrap();
        let mut rng = substream(11, "std", 0);
        let n = 10_000usize;
        let mut deltas = Vec::with_capacity(n);
        for _ in 0..n {
            let nb = generate_neighbor(&base, 1.0, 1.0, &mut rng).unwrap();
            deltas.push(nb.r_mid - 0.45);
        }
        let mean = deltas.iter().sum::<f64>() / n as f64;
        let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        assert!(
            (std - NEIGHBOR_SIGMA).abs() / NEIGHBOR_SIGMA < 0.05,
            "std {std}"
        );
    }

    #[test]
    fn acceptance_rule() {
        assert!(accept(1.0, 0.9, 0.5, 0.999)); // downhill always
        // Delta 0.5, T 1: accepted iff u < exp(-0.5) = 0.606531.
        assert!(accept(1.0, 1.5, 1.0, 0.60));
        assert!(!accept(1.0, 1.5, 1.0, 0.61));
        // Frozen limit rejects uphill.
        assert!(!accept(1.0, 1.1, 1e-9, 0.5));
    }

    #[test]
    fn constant_energy_keeps_best_seed() {
        let params = SaParams {
            n_iter: 50,
            rng_seed: 3,
            ..SaParams::default()
        };
        let f = |_: &RatioConfig| Ok(2.5);
        let state = run(&params, &f, |_| {}).unwrap();
        assert_eq!(state.s_best, params.seeds[0]);
        assert_eq!(state.e_best, 2.5);
        for row in &state.trace {
            assert_eq!(row.energy_best, 2.5);
        }
    }

    #[test]
    fn single_iteration_evaluates_one_neighbor() {
        let params = SaParams {
            n_iter: 1,
            rng_seed: 4,
            ..SaParams::default()
        };
        let f = convex_energy([0.4, 0.3, 0.2]);
        let state = run(&params, &f, |_| {}).unwrap();
        assert_eq!(state.trace.len(), 1);
        assert_eq!(state.evaluations, params.seeds.len() + 1);
    }

    #[test]
    fn best_energy_is_monotone_and_bounded_by_seeds() {
        let params = SaParams {
            n_iter: 200,
            rng_seed: 9,
            ..SaParams::default()
        };
        let f = convex_energy([0.4, 0.3, 0.2]);
        let state = run(&params, &f, |_| {}).unwrap();
        let min_seed = state
            .seed_energies
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(state.e_best <= min_seed);
        let mut prev = f64::INFINITY;
        for row in &state.trace {
            assert!(row.energy_best <= prev + 1e-15);
            prev = row.energy_best;
        }
    }

    #[test]
    fn temperature_trajectory_reheats_and_respects_restart_cap() {
        let params = SaParams {
            n_iter: 10_000,
            rng_seed: 2,
            ..SaParams::default()
        };
        let f = convex_energy([0.4, 0.3, 0.2]);
        let state = run(&params, &f, |_| {}).unwrap();
        // Geometric cooling between resets.
        let mut resets = 0;
        for pair in state.trace.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if b.temperature > a.temperature {
                assert!((b.temperature - params.t_init).abs() < 1e-12);
                resets += 1;
            } else {
                assert!((b.temperature - a.temperature * params.alpha).abs() < 1e-12);
            }
        }
        assert!(state.restarts <= params.restart_max + 1);
        assert_eq!(state.restarts, params.restart_max + 1);
        // Break happened at the final reset, so observed resets in the trace
        // are one fewer than the restart counter.
        assert_eq!(resets, state.restarts - 1);
        // Cooling steps per cycle: ceil(log(t_min/t_init)/log(alpha)) = 135.
        let per_cycle = ((params.t_min / params.t_init).ln() / params.alpha.ln()).ceil() as usize;
        assert_eq!(state.trace.len(), per_cycle * (params.restart_max + 1));
    }

    #[test]
    fn convex_benchmark_converges() {
        let target = [0.4, 0.3, 0.2];
        let f = convex_energy(target);
        let mut hits = 0;
        for seed in 0..10u64 {
            let params = SaParams {
                n_iter: 495,
                rng_seed: seed,
                ..SaParams::default()
            };
            let state = run(&params, &f, |_| {}).unwrap();
            assert!(state.evaluations <= 500);
            let linf = state
                .s_best
                .as_array()
                .iter()
                .zip(target)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            if linf <= 0.05 {
                hits += 1;
            }
        }
        assert!(hits >= 9, "only {hits}/10 seeds converged");
    }

    #[test]
    fn identical_params_give_identical_traces() {
        let f = convex_energy([0.4, 0.3, 0.2]);
        let params = SaParams {
            n_iter: 80,
            rng_seed: 31,
            ..SaParams::default()
        };
        let a = run(&params, &f, |_| {}).unwrap();
        let b = run(&params, &f, |_| {}).unwrap();
        assert_eq!(a.trace.len(), b.trace.len());
        for (ra, rb) in a.trace.iter().zip(&b.trace) {
            assert_eq!(ra.energy.to_bits(), rb.energy.to_bits());
            assert_eq!(ra.config, rb.config);
            assert_eq!(ra.accepted, rb.accepted);
        }
    }
}

