use shallowdiff_core::{CoreError, Schedule};

// Double-double arithmetic for the reference product.
#[derive(Clone, Copy, Debug)]
struct Dd(f64, f64);

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    fn one_minus(b: f64) -> Dd {
        let (s, e) = two_sum(1.0, -b);
        Dd(s, e)
    }

    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.0, o.0);
        let e = e + (self.0 * o.1 + self.1 * o.0);
        let (hi, lo) = two_sum(p, e);
        Dd(hi, lo)
    }

    fn to_f64(self) -> f64 {
        self.0 + self.1
    }
}

fn dd_alpha_bar(betas: &[f64]) -> Vec<f64> {
    let mut acc = Dd(1.0, 0.0);
    let mut out = vec![1.0];
    for &b in betas {
        acc = acc.mul(Dd::one_minus(b));
        out.push(acc.to_f64());
    }
    out
}

/// ᾱ_100 of the default schedule, from the double-double product.
const PINNED_ALPHA_BAR_100: f64 = 4.654703359380520e-2;

#[test]
fn alpha_bar_matches_extended_precision_product() {
    let s = Schedule::standard();
    let oracle = dd_alpha_bar(&s.beta[1..]);
    for t in 0..=100 {
        let rel = (s.alpha_bar[t] - oracle[t]).abs() / oracle[t];
        assert!(rel < 1e-12, "t={t}: {} vs {} (rel {rel:e})", s.alpha_bar[t], oracle[t]);
    }
    let rel = (oracle[100] - PINNED_ALPHA_BAR_100).abs() / PINNED_ALPHA_BAR_100;
    assert!(rel < 1e-14, "oracle drifted from pin: {:.17e}", oracle[100]);
    let rel = (s.alpha_bar[100] - PINNED_ALPHA_BAR_100).abs() / PINNED_ALPHA_BAR_100;
    assert!(rel < 1e-12);
}

#[test]
fn default_schedule_is_valid_with_monotone_snr() {
    let s = Schedule::standard();
    s.validate().unwrap();
    for t in 2..=100 {
        assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
        assert!(s.snr(t) < s.snr(t - 1));
        assert!(s.beta[t] >= s.beta[t - 1]);
    }
    for t in 1..=100 {
        assert!(s.beta_tilde[t] >= 0.0 && s.beta_tilde[t] <= s.beta[t]);
    }
}

#[test]
fn snr_monotone_for_other_schedules() {
    for (steps, b1, bt) in [(2, 0.1, 0.2), (10, 1e-3, 1e-3), (50, 1e-5, 0.5), (1000, 1e-4, 0.02)] {
        let s = Schedule::linear(steps, b1, bt).unwrap();
        for t in 2..=steps {
            assert!(s.snr(t) < s.snr(t - 1), "T={steps} t={t}");
        }
    }
}

#[test]
fn hand_built_violations_are_reported() {
    let mut betas: Vec<f64> = (1..=10).map(|t| t as f64 * 0.01).collect();
    betas.swap(4, 5);
    match Schedule::from_betas(&betas) {
        Err(CoreError::Schedule { invariant, step }) => {
            assert!(invariant.contains("nondecreasing"));
            assert_eq!(step, 6);
        }
        other => panic!("expected violation, got {other:?}"),
    }
    let mut s = Schedule::standard();
    s.alpha_bar[0] = 0.9;
    assert!(matches!(s.validate(), Err(CoreError::Schedule { step: 0, .. })));
    let mut s = Schedule::standard();
    s.sigma[40] *= 1.01;
    assert!(matches!(s.validate(), Err(CoreError::Schedule { step: 40, .. })));
}
