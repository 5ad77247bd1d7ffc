//! Monte-Carlo and algebraic oracles for the closed-form diffusion math.

use shallowdiff_core::diffusion::{
    forward_sample, posterior_moment, reverse_step, simple_loss, single_step_diffuse,
};
use shallowdiff_core::rng::{normal_vec, stream};
use shallowdiff_core::{Grid, NoiseDraw, NoisedGrid, Schedule};

const CHAINS: usize = 100_000;

fn scalar(v: f64) -> Grid {
    Grid::new(1, 1, vec![v]).unwrap()
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

#[test]
fn forward_marginal_mean_at_t100() {
    let s = Schedule::standard();
    let y0 = scalar(1.0);
    let mut rng = stream(11, 0);
    let xs: Vec<f64> = (0..CHAINS)
        .map(|_| {
            let eps = NoiseDraw::sample(1, 1, &mut rng);
            forward_sample(&y0, 100, &eps, &s).unwrap().grid.values()[0]
        })
        .collect();
    let (m, _) = mean_var(&xs);
    let tol = 4.0 * s.one_minus_alpha_bar[100].sqrt() / (CHAINS as f64).sqrt();
    assert!((m - s.alpha_bar[100].sqrt()).abs() < tol, "mean {m}");
}

#[test]
fn iterated_steps_match_closed_form() {
    let s = Schedule::standard();
    let y0 = 0.7;
    let checkpoints = [1usize, 10, 20, 50, 100];
    let mut rng = stream(12, 0);
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(CHAINS); checkpoints.len()];
    for _ in 0..CHAINS {
        let mut y = NoisedGrid { grid: scalar(y0), t: 0 };
        let mut next = 0;
        while y.t < 100 {
            y = single_step_diffuse(&y, &s, &mut rng).unwrap();
            if y.t == checkpoints[next] {
                samples[next].push(y.grid.values()[0]);
                next += 1;
            }
        }
    }
    for (&t, xs) in checkpoints.iter().zip(&samples) {
        let (m, v) = mean_var(xs);
        let var = s.one_minus_alpha_bar[t];
        let n = CHAINS as f64;
        let se_mean = (var / n).sqrt();
        let se_var = var * (2.0 / (n - 1.0)).sqrt();
        assert!((m - s.alpha_bar[t].sqrt() * y0).abs() < 4.0 * se_mean, "t={t} mean {m}");
        assert!((v - var).abs() < 4.0 * se_var, "t={t} var {v} vs {var}");
    }
}

#[test]
fn one_step_variance_is_beta() {
    let s = Schedule::standard();
    let mut rng = stream(13, 0);
    for t_prev in [0usize, 30, 99] {
        let start = NoisedGrid { grid: scalar(-0.4), t: t_prev };
        let xs: Vec<f64> = (0..CHAINS)
            .map(|_| single_step_diffuse(&start, &s, &mut rng).unwrap().grid.values()[0])
            .collect();
        let (m, v) = mean_var(&xs);
        let b = s.beta[t_prev + 1];
        let n = CHAINS as f64;
        assert!((m - (1.0 - b).sqrt() * -0.4).abs() < 4.0 * (b / n).sqrt());
        assert!((v - b).abs() < 4.0 * b * (2.0 / (n - 1.0)).sqrt(), "var {v} vs {b}");
    }
    let at_end = NoisedGrid { grid: scalar(0.0), t: 100 };
    assert!(single_step_diffuse(&at_end, &s, &mut rng).is_err());
}

#[test]
fn zero_beta_step_is_identity() {
    // derive without validation: β = 0 is outside the valid range
    let s = Schedule::derive_from_betas(&[0.0, 0.0, 0.0]);
    let y = NoisedGrid { grid: scalar(0.3), t: 1 };
    let out = single_step_diffuse(&y, &s, &mut stream(1, 0)).unwrap();
    assert_eq!(out.grid.values()[0], 0.3);
    assert_eq!(out.t, 2);
}

#[test]
fn exact_recovery_identity_all_steps() {
    let s = Schedule::standard();
    let mut rng = stream(14, 0);
    for case in 0..20 {
        let y0 = Grid::new(3, 4, normal_vec(&mut rng, 12)).unwrap();
        for t in 1..=100 {
            let eps = NoiseDraw::sample(3, 4, &mut rng);
            let yt = forward_sample(&y0, t, &eps, &s).unwrap();
            let rev = reverse_step(&yt, eps.grid(), &NoiseDraw::zeros(3, 4), &s).unwrap();
            assert_eq!(rev.t, t - 1);
            let post = posterior_moment(&yt, &y0, &s).unwrap();
            assert_eq!(post.variance, s.beta_tilde[t]);
            for (a, b) in rev.grid.values().iter().zip(post.mean.values()) {
                assert!((a - b).abs() < 1e-12, "case {case} t={t}: {a} vs {b}");
            }
            if t == 1 {
                for (a, b) in rev.grid.values().iter().zip(y0.values()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn t_zero_forward_is_identity() {
    let s = Schedule::standard();
    let mut rng = stream(15, 0);
    let y0 = Grid::new(2, 3, normal_vec(&mut rng, 6)).unwrap();
    let eps = NoiseDraw::sample(2, 3, &mut rng);
    assert_eq!(forward_sample(&y0, 0, &eps, &s).unwrap().grid, y0);
    assert!(forward_sample(&y0, 101, &eps, &s).is_err());
}

#[test]
fn simple_loss_brute_force() {
    let mut rng = stream(16, 0);
    for _ in 0..50 {
        let a = NoiseDraw::sample(5, 7, &mut rng);
        let b = Grid::new(5, 7, normal_vec(&mut rng, 35)).unwrap();
        let mut acc = 0.0;
        for r in 0..5 {
            for c in 0..7 {
                let d = a.grid().at(r, c) - b.at(r, c);
                acc += d * d;
            }
        }
        let l = simple_loss(&a, &b).unwrap();
        assert!((l - acc / 35.0).abs() < 1e-12);
        assert!(l >= 0.0);
    }
    let z = NoiseDraw::zeros(2, 2);
    assert_eq!(simple_loss(&z, &Grid::filled(2, 2, 1.0)).unwrap(), 1.0);
    assert_eq!(simple_loss(&z, &Grid::zeros(2, 2)).unwrap(), 0.0);
}
