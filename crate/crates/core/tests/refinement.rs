use mjp_core::bayes;
use mjp_core::bridge::{refine, Problem};
use mjp_core::dsl::parse_model;

fn problem(text: &str) -> Problem {
    Problem::from_document(&parse_model(text).unwrap()).unwrap()
}

const ARRIVALS: &str = "species A B
reaction a: 0 -> A @ mass_action(1)
reaction b: 0 -> B @ mass_action(1)
reaction da: A -> 0 @ mass_action(0.05)
init point (0, 0)
terminal point (12, 14) at 10
options bounds=(31, 31) m=2 delta=1e-3 rtol=1e-8 atol=1e-16 solver=rk45 time_points=41
";

/// Uniformization on the full bounded grid; states leaving it are lost.
fn exact_bridge(side: usize, horizon: f64, points: usize) -> Vec<Vec<f64>> {
    let n = side * side;
    let idx = |a: usize, b: usize| a * side + b;
    let rates = |s: usize| -> Vec<(Option<usize>, f64)> {
        let (a, b) = (s / side, s % side);
        vec![
            ((a + 1 < side).then(|| idx(a + 1, b)), 1.0),
            ((b + 1 < side).then(|| idx(a, b + 1)), 1.0),
            ((a > 0).then(|| idx(a.saturating_sub(1), b)), 0.05 * a as f64),
        ]
    };
    let q = (0..n).map(|s| rates(s).iter().map(|r| r.1).sum::<f64>()).fold(0.0, f64::max) * 1.05;
    let step = |v: &[f64], forward: bool| -> Vec<f64> {
        let mut w = vec![0.0; n];
        for s in 0..n {
            let out = rates(s);
            let exit: f64 = out.iter().map(|r| r.1).sum();
            if forward {
                w[s] += v[s] * (1.0 - exit / q);
                for (t, r) in &out {
                    if let Some(t) = t {
                        w[*t] += v[s] * r / q;
                    }
                }
            } else {
                let mut acc = v[s] * (1.0 - exit / q);
                for (t, r) in &out {
                    if let Some(t) = t {
                        acc += r / q * v[*t];
                    }
                }
                w[s] = acc;
            }
        }
        w
    };
    let propagate = |v: &[f64], dt: f64, forward: bool| -> Vec<f64> {
        let a = q * dt;
        let mut weight = (-a).exp();
        let mut seen = weight;
        let mut term = v.to_vec();
        let mut acc: Vec<f64> = term.iter().map(|x| x * weight).collect();
        let mut k = 0.0;
        while seen < 1.0 - 1e-15 {
            k += 1.0;
            weight *= a / k;
            seen += weight;
            term = step(&term, forward);
            for (s, t) in acc.iter_mut().zip(&term) {
                *s += weight * t;
            }
        }
        acc
    };
    let dt = horizon / (points - 1) as f64;
    let mut fwd = vec![vec![0.0; n]];
    fwd[0][idx(0, 0)] = 1.0;
    let mut bwd = vec![vec![0.0; n]];
    bwd[0][idx(12, 14)] = 1.0;
    for _ in 1..points {
        let f = propagate(fwd.last().unwrap(), dt, true);
        let b = propagate(bwd.last().unwrap(), dt, false);
        fwd.push(f);
        bwd.push(b);
    }
    bwd.reverse();
    let z: f64 = fwd[0].iter().zip(&bwd[0]).map(|(a, b)| a * b).sum();
    (0..points)
        .map(|k| (0..n).map(|s| fwd[k][s] * bwd[k][s] / z).collect())
        .collect()
}

#[test]
fn two_dimensional_truncation_keeps_the_bridge() {
    let p = problem(ARRIVALS);
    let (sol, trace) = refine(&p).unwrap();
    let exact = exact_bridge(32, 10.0, 41);
    let threshold = 10.0 * p.options.delta;
    let mut required = 0;
    for s in 0..32 * 32 {
        let peak = exact.iter().map(|g| g[s]).fold(0.0, f64::max);
        if peak > threshold {
            required += 1;
            let x = [(s / 32) as i64, (s % 32) as i64];
            let i = sol.space.locate(&x).unwrap_or_else(|| panic!("{x:?} was truncated"));
            assert!(sol.space.states()[i].is_micro());
        }
    }
    assert!(required > 20);
    assert!(trace.final_states < 32 * 32);
    // the truncated chain bounds the reachability probability from below
    let z_exact = {
        let p2 = problem(&ARRIVALS.replace("m=2 delta=1e-3", "m=0 delta=1e-3"));
        refine(&p2).unwrap().0.normalizer
    };
    assert!(sol.normalizer <= z_exact * (1.0 + 1e-6));
    assert!(sol.normalizer >= 0.9 * z_exact);
}

#[test]
fn micro_granularity_is_reached_after_m_refinements() {
    for m in 0..=3 {
        let p = problem(&ARRIVALS.replace("m=2", &format!("m={m}")));
        let (sol, trace) = refine(&p).unwrap();
        assert_eq!(trace.iterations.len(), m as usize + 1);
        assert!(sol.space.states().iter().all(|s| s.volume() == 1));
        for (i, it) in trace.iterations.iter().enumerate() {
            let side = 1u64 << (m as usize - i);
            assert!(trace.snapshots[i].iter().all(|b| b.volume() == side * side), "pass {i}");
            assert_eq!(it.boxes, trace.snapshots[i].len());
        }
    }
}

#[test]
fn endpoints_carry_the_bridging_mass() {
    let p = problem(ARRIVALS);
    let (sol, _) = refine(&p).unwrap();
    let start = sol.space.locate(&[0, 0]).unwrap();
    let goal = sol.space.locate(&[12, 14]).unwrap();
    assert!((sol.gamma[0][start] - 1.0).abs() <= 1e-6);
    assert!((sol.gamma.last().unwrap()[goal] - 1.0).abs() <= 1e-6);
}

#[test]
fn smaller_thresholds_never_lower_the_bound() {
    let text = "species A B
reaction a: 0 -> A @ mass_action(1)
reaction b: 0 -> B @ mass_action(1)
init point (0, 0)
terminal pred \"A >= 20 and B >= 20\" at 8
options bounds=(63, 63) m=3 rtol=1e-8 atol=1e-30 solver=rk45
";
    let mut last = 0.0;
    for delta in [1e-1, 1e-2, 1e-3, 1e-4] {
        let mut p = problem(text);
        p.options.delta = delta;
        let r = mjp_core::rare_event_bound(&p).unwrap();
        assert!(r.bound + 10.0 * p.options.atol >= last, "δ={delta}: {} < {last}", r.bound);
        last = r.bound;
    }
    assert!(last > 0.0);
}

#[test]
fn posterior_is_prior_times_likelihood() {
    let text = "species S E I
param lambda = 0.5
reaction infection: S + I -> E + I @ mass_action(lambda)
reaction onset: E -> I @ mass_action(3)
reaction removal: I -> 0 @ mass_action(3)
init point (29, 0, 1)
terminal observe binary_test(sensitivity=0.9, fpr=0.1, observed=6, species=I, population=30) at 0.5
options bounds=(29, 29, 30) m=1 delta=1e-6 rtol=1e-8 atol=1e-14
";
    let r = bayes::smooth(&parse_model(text).unwrap()).unwrap();
    let z = r.terminal.normalizer;
    let mut total = 0.0;
    for (i, s) in r.bridging.space.states().iter().enumerate() {
        let l = r.likelihood.at(s.lower()[2]);
        let lhs = r.terminal.posterior[i] * z;
        let rhs = r.prior[i].max(0.0) * l;
        assert!((lhs - rhs).abs() <= 1e-12, "state {:?}: {lhs} vs {rhs}", s.lower());
        total += r.terminal.posterior[i];
    }
    assert!((total - 1.0).abs() < 1e-12);
    let marginal: f64 = r.observed_marginal().values().map(|v| v.2).sum();
    assert!((marginal - 1.0).abs() < 1e-12);
}
