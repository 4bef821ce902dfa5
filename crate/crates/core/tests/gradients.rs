//! Analytic gradients against central finite differences.

use mdlab::denoiser::{grad_nelbo, DenoiserParams, Gradient, TrainItem};
use mdlab::r2ft::{grad_r2ft, r2ft_loss, PreferencePair};
use mdlab::rng::rng_from_seed;
use mdlab::schedule::NoiseSchedule;
use mdlab::state::{forward_mask, SequenceState};
use mdlab::vocab::TokenId;
use rand::Rng;

const H: f64 = 1e-5;

fn numeric<F: Fn(&DenoiserParams) -> f64>(params: &DenoiserParams, f: F) -> Vec<f64> {
    let mut p = params.clone();
    (0..p.num_params())
        .map(|k| {
            let x = *p.param_mut(k);
            *p.param_mut(k) = x + H;
            let up = f(&p);
            *p.param_mut(k) = x - H;
            let down = f(&p);
            *p.param_mut(k) = x;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn rel_error(analytic: &Gradient, numeric: &[f64]) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (k, n) in numeric.iter().enumerate() {
        let a = analytic.get(k);
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
}

fn random_tokens<R: Rng>(rng: &mut R, n: usize, v: usize) -> Vec<TokenId> {
    (0..n).map(|_| rng.gen_range(0..v as TokenId)).collect()
}

#[test]
fn nelbo_gradient_matches_finite_differences() {
    let schedule = NoiseSchedule::linear(16).unwrap();
    for seed in 0..24u64 {
        let mut rng = rng_from_seed(seed);
        let v = rng.gen_range(3..7);
        let params = DenoiserParams::random(v, rng.gen_range(1..5), 0.8, &mut rng).unwrap();
        let batch: Vec<TrainItem> = (0..3)
            .map(|_| {
                let len = rng.gen_range(4..10);
                let toks = random_tokens(&mut rng, len, v);
                let x0 = SequenceState::from_tokens(&toks, 1).unwrap();
                let t = rng.gen_range(1..=16) as f64 / 16.0;
                let xt = forward_mask(&x0, &schedule, t, &mut rng).unwrap();
                TrainItem { x0, xt, t }
            })
            .collect();
        let (_, analytic) = grad_nelbo(&params, &schedule, &batch).unwrap();
        let num = numeric(&params, |p| grad_nelbo(p, &schedule, &batch).unwrap().0);
        let err = rel_error(&analytic, &num);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn r2ft_gradient_matches_finite_differences() {
    for seed in 0..24u64 {
        let mut rng = rng_from_seed(1000 + seed);
        let v = rng.gen_range(3..7);
        let params = DenoiserParams::random(v, rng.gen_range(1..5), 0.8, &mut rng).unwrap();
        let n = rng.gen_range(1..4);
        let prefix = random_tokens(&mut rng, n, v);
        let n = rng.gen_range(1..6);
        let yw = random_tokens(&mut rng, n, v);
        let n = rng.gen_range(1..7);
        let mut yl = random_tokens(&mut rng, n, v);
        if yl == yw {
            yl.push(0);
        }
        let pair = PreferencePair::new(&prefix, &yw, &yl).unwrap();
        let gamma = [0.0, 0.1, 1.0][seed as usize % 3];
        let beta = rng.gen_range(0.3..2.0);
        let (_, analytic) = grad_r2ft(&params, &pair, gamma, beta).unwrap();
        let num = numeric(&params, |p| r2ft_loss(p, &pair, gamma, beta).unwrap());
        let err = rel_error(&analytic, &num);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}
