mod common;

use common::{config, quadratic};
use proptest::prelude::*;
use serde_json::json;
use slowmo::numerics::{max_abs_diff, ordered_mean, ParameterVector};
use slowmo::protocol::{gossip_round, pushsum_round, WorkerState};
use slowmo::topology::{Stochasticity, TopologySchedule};
use slowmo::{run, Simulation};

fn states(values: &[Vec<f64>]) -> Vec<WorkerState> {
    values.iter().map(|v| WorkerState::new(v.clone().into())).collect()
}

fn halves(s: &[WorkerState]) -> Vec<ParameterVector> {
    s.iter().map(|w| w.x.clone()).collect()
}

fn osgp(m: usize, delay: serde_json::Value, staleness: u64, tau: u64, steps: u64) -> slowmo::ExperimentConfig {
    let mut v = quadratic(m, 3, json!({"kind": "osgp", "delay": delay, "staleness": staleness}), tau, 1.0, 0.0, 0.05, steps, 0.5);
    v["seed"] = 11.into();
    config(v)
}

#[test]
fn exponential_push_sum_reaches_consensus() {
    let sched = TopologySchedule::exponential(8);
    let mut s = states(&(0..8).map(|i| vec![i as f64, (i * i) as f64 - 3.0]).collect::<Vec<_>>());
    let avg = ordered_mean(s.iter().map(|w| &w.x[..]));
    for round in 0..50 {
        let p = sched.mixing_matrix(round, Stochasticity::Column).unwrap();
        let h = halves(&s);
        pushsum_round(&mut s, &p, &h).unwrap();
    }
    for w in &s {
        assert!(max_abs_diff(&w.z, &avg) < 1e-8);
    }
}

#[test]
fn overlap_mass_is_conserved_with_unit_delay() {
    let cfg = osgp(2, json!({"kind": "fixed", "rounds": 1}), 3, 50, 100);
    let trace = run(&cfg).unwrap();
    for r in &trace.records {
        assert!((r.weight_mass - 2.0).abs() <= 1e-9);
    }
}

#[test]
fn staleness_zero_blocks_every_round_when_messages_lag() {
    let cfg = osgp(4, json!({"kind": "fixed", "rounds": 1}), 0, 20, 20);
    let mut sim = Simulation::new(&cfg).unwrap();
    sim.run_to_end().unwrap();
    // Every step is followed by a stalled round while the message is in transit.
    assert_eq!(sim.clock().stalled_rounds, 4 * 10);
    assert!(sim.network().is_empty());
}

#[test]
fn staleness_zero_without_delay_never_stalls() {
    let cfg = osgp(8, json!({"kind": "fixed", "rounds": 0}), 0, 10, 40);
    let mut sim = Simulation::new(&cfg).unwrap();
    sim.run_to_end().unwrap();
    assert_eq!(sim.clock().stalled_rounds, 0);
}

#[test]
fn geometric_delays_deliver_everything_and_keep_mass() {
    let cfg = osgp(15, json!({"kind": "geometric", "p": 0.3}), 4, 37, 300);
    let mut sim = Simulation::new(&cfg).unwrap();
    while !sim.is_done() {
        sim.run_outer().unwrap();
        assert!(sim.network().is_empty(), "messages left after the barrier");
    }
    sim.finish().unwrap();
    assert!(sim.trace().records.iter().all(|r| (r.weight_mass - 15.0).abs() <= 1e-9));
    assert!(sim.comm().messages_sent > 0);
}

#[test]
fn stalled_workers_do_not_draw_gradient_noise() {
    // With staleness 0 and delay 2, each worker steps once every three
    // rounds. The noise it sees must be the same as in a run that never
    // stalls, because stalled rounds draw nothing.
    let slow = osgp(2, json!({"kind": "fixed", "rounds": 2}), 0, 30, 30);
    let mut sim = Simulation::new(&slow).unwrap();
    sim.run_to_end().unwrap();
    let steps_taken = 30 - sim.clock().stalled_rounds / 2;
    assert_eq!(steps_taken, 10);

    // The same stream consumed directly for exactly 10 draws per worker.
    let p = sim.problem().clone();
    for i in 0..2 {
        let mut rng = slowmo::numerics::rng::gradient_stream(slow.seed, i);
        for _ in 0..10 {
            p.worker_stochastic_gradient(i, &[0.0; 3], &mut rng).unwrap();
        }
        assert_eq!(sim.gradient_stream_position(i), rng.get_word_pos());
    }
}

#[test]
fn dpsgd_and_double_average_run() {
    let trace = run(&config(quadratic(8, 3, json!({"kind": "dpsgd"}), 6, 1.0, 0.5, 0.05, 60, 0.5))).unwrap();
    assert!(trace.final_record().unwrap().loss < trace.records[0].loss);

    let mut v = quadratic(4, 3, json!({"kind": "double-average", "period": 3}), 6, 1.0, 0.5, 0.05, 60, 0.5);
    v["base_optimizer"] = json!({"rule": {"kind": "sgd-nesterov", "momentum": 0.9}, "buffer_strategy": "maintain"});
    let mut sim = Simulation::new(&config(v)).unwrap();
    sim.run_to_end().unwrap();
    assert_eq!(sim.comm().double_averages, 20);
}

fn matrix_strategy() -> impl Strategy<Value = (usize, u64, Vec<Vec<f64>>)> {
    (2usize..12, 0u64..40).prop_flat_map(|(m, round)| {
        (Just(m), Just(round), proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), m))
    })
}

proptest! {
    #[test]
    fn push_sum_conserves_mass_and_sum((m, round, xs) in matrix_strategy()) {
        let sched = TopologySchedule::exponential(m);
        let mut s = states(&xs);
        let total = |s: &[WorkerState]| -> Vec<f64> {
            (0..3).map(|j| s.iter().map(|w| w.x[j]).sum()).collect()
        };
        let before = total(&s);
        for r in round..round + 5 {
            let p = sched.mixing_matrix(r, Stochasticity::Column).unwrap();
            let h = halves(&s);
            pushsum_round(&mut s, &p, &h).unwrap();
            let mass: f64 = s.iter().map(|w| w.w).sum();
            prop_assert!((mass - m as f64).abs() <= 1e-9);
            for w in &s {
                for j in 0..3 {
                    prop_assert!((w.z[j] * w.w - w.x[j]).abs() <= 1e-12 * w.x[j].abs().max(1.0));
                }
            }
        }
        let after = total(&s);
        for j in 0..3 {
            prop_assert!((before[j] - after[j]).abs() <= 1e-9);
        }
    }

    #[test]
    fn gossip_preserves_the_average(half in 1usize..4, rounds in 1u64..20, seed in 0u64..1000) {
        let m = 2 * half * 4;
        let sched = TopologySchedule::exponential(m);
        let xs: Vec<Vec<f64>> = (0..m).map(|i| vec![((i as u64 * 7919 + seed) % 101) as f64 / 10.0]).collect();
        let mut s = states(&xs);
        let avg = ordered_mean(s.iter().map(|w| &w.x[..]))[0];
        for r in 0..rounds {
            let Ok(p) = sched.mixing_matrix(r, Stochasticity::Doubly) else { continue };
            let h = halves(&s);
            gossip_round(&mut s, &p, &h).unwrap();
            let now = ordered_mean(s.iter().map(|w| &w.x[..]))[0];
            prop_assert!((now - avg).abs() <= 1e-12);
        }
    }

    #[test]
    fn overlap_mass_holds_for_random_delays(m in 2usize..10, p in 0.2f64..1.0, s in 0u64..4, seed in 0u64..50) {
        let mut v = quadratic(m, 2, json!({"kind": "osgp", "delay": {"kind": "geometric", "p": p}, "staleness": s}), 20, 1.0, 0.0, 0.05, 40, 0.3);
        v["seed"] = seed.into();
        let trace = run(&config(v)).unwrap();
        for r in &trace.records {
            prop_assert!((r.weight_mass - m as f64).abs() <= 1e-9);
        }
    }
}
