use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numcore::check_gradients;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random scan coefficients with `Ā` in (0, 1).
fn random_params(len: usize, dim: usize, state: usize, seed: u64) -> ScanParams {
    let mut r = rng(seed);
    let w = len * dim * state;
    let a_bar = (0..w).map(|_| r.random_range(0.05..0.999)).collect();
    let bx = (0..w).map(|_| r.random_range(-1.0..1.0)).collect();
    let c = (0..len * state).map(|_| r.random_range(-1.0..1.0)).collect();
    ScanParams::new(len, dim, state, a_bar, bx, c).unwrap()
}

/// Lane-major per-step loop, written independently of the library kernels.
fn oracle_scan(p: &ScanParams) -> Vec<f64> {
    let mut y = vec![0.0; p.len * p.dim];
    for ch in 0..p.dim {
        for k in 0..p.state {
            let mut h = 0.0;
            for t in 0..p.len {
                let i = (t * p.dim + ch) * p.state + k;
                h = p.a_bar[i] * h + p.bx[i];
                y[t * p.dim + ch] += p.c[t * p.state + k] * h;
            }
        }
    }
    y
}

fn normwise_rel(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    diff / scale.max(f64::MIN_POSITIVE)
}

#[test]
fn discretize_substitution() {
    let a = Tensor::new(&[1, 1], vec![-1.0]).unwrap();
    let b = Tensor::new(&[1, 1], vec![1.0]).unwrap();
    let dt = Tensor::new(&[1, 1], vec![std::f64::consts::LN_2]).unwrap();
    let (ab, bb) = discretize(&a, &b, &dt, Discretization::Euler).unwrap();
    assert!((ab.item() - 0.5).abs() < 1e-15);
    assert!((bb.item() - std::f64::consts::LN_2).abs() < 1e-15);
    let (_, bz) = discretize(&a, &b, &dt, Discretization::ExactZoh).unwrap();
    assert!((bz.item() - 0.5).abs() < 1e-15);
}

#[test]
fn discretize_rejects_bad_steps() {
    let a = Tensor::new(&[1, 1], vec![-1.0]).unwrap();
    let b = Tensor::new(&[1, 1], vec![1.0]).unwrap();
    for bad in [0.0, -0.1] {
        let dt = Tensor::new(&[1, 1], vec![bad]).unwrap();
        assert!(matches!(
            discretize(&a, &b, &dt, Discretization::Euler),
            Err(Error::Contract(_))
        ));
    }
    let pos_a = Tensor::new(&[1, 1], vec![0.5]).unwrap();
    let dt = Tensor::new(&[1, 1], vec![0.1]).unwrap();
    assert!(discretize(&pos_a, &b, &dt, Discretization::Euler).is_err());
}

#[test]
fn euler_and_exact_agree_to_first_order() {
    let mut r = rng(2);
    let (l, d, n) = (16, 3, 4);
    let a = Tensor::new(&[d, n], (0..d * n).map(|_| -r.random_range(0.1..5.0)).collect()).unwrap();
    let b = Tensor::randn(&[l, n], 1.0, &mut r);
    let dt = Tensor::full(&[l, d], 1e-3);
    let (_, eu) = discretize(&a, &b, &dt, Discretization::Euler).unwrap();
    let (_, ex) = discretize(&a, &b, &dt, Discretization::ExactZoh).unwrap();
    for t in 0..l {
        for c in 0..d {
            for k in 0..n {
                let i = (t * d + c) * n + k;
                let bound = 1e-3 * a.at2(c, k).abs() * b.at2(t, k).abs();
                assert!((eu.data()[i] - ex.data()[i]).abs() < bound);
            }
        }
    }
}

#[test]
fn scan_two_step_example() {
    let p = ScanParams::new(2, 1, 1, vec![0.5, 0.5], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
    assert_eq!(selective_scan_seq(&p).data(), &[1.0, 1.5]);
}

#[test]
fn zero_decay_is_memoryless() {
    let mut p = random_params(20, 3, 4, 3);
    p.a_bar.iter_mut().for_each(|v| *v = 0.0);
    let y = selective_scan_seq(&p);
    for t in 0..p.len {
        for ch in 0..p.dim {
            let expect: f64 = (0..p.state)
                .map(|k| p.c[t * p.state + k] * p.bx[(t * p.dim + ch) * p.state + k])
                .sum();
            assert!((y.at2(t, ch) - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn sequential_matches_independent_loop() {
    let p = random_params(256, 4, 8, 4);
    let y = selective_scan_seq(&p);
    assert!(normwise_rel(y.data(), &oracle_scan(&p)) < 1e-12);
}

#[test]
fn single_chunk_is_bit_identical() {
    let p = random_params(300, 3, 5, 5);
    let seq = selective_scan_seq(&p);
    let par = selective_scan_par(&p, p.len).unwrap();
    assert_eq!(seq, par);
    let par = selective_scan_par(&p, 10 * p.len).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn long_chunked_scan_matches_sequential() {
    let p = random_params(4096, 8, 16, 6);
    let seq = selective_scan_seq(&p);
    let par = selective_scan_par(&p, 64).unwrap();
    assert!(normwise_rel(par.data(), seq.data()) < 1e-10);
}

#[test]
fn chunked_grid_matches_sequential() {
    for &l in &[1usize, 2, 255, 256] {
        let p = random_params(l, 3, 4, 7 + l as u64);
        let seq = selective_scan_seq(&p);
        for &chunk in &[1usize, 7, 64, l] {
            let par = selective_scan_par(&p, chunk).unwrap();
            let err = normwise_rel(par.data(), seq.data());
            assert!(err < 1e-10, "L={l} chunk={chunk}: {err:e}");
        }
    }
    assert!(selective_scan_par(&random_params(4, 1, 1, 0), 0).is_err());
}

#[test]
fn combine_is_associative() {
    let mut r = rng(8);
    for _ in 0..1000 {
        let mut draw = || (r.random_range(0.0..1.0), r.random_range(-2.0..2.0));
        let (p, q, s) = (draw(), draw(), draw());
        let left = combine(combine(p, q), s);
        let right = combine(p, combine(q, s));
        assert!((left.0 - right.0).abs() < 1e-12);
        assert!((left.1 - right.1).abs() < 1e-12);
    }
}

#[test]
fn chunked_result_ignores_worker_count() {
    let p = random_params(1000, 4, 4, 9);
    let one = crate::par::with_threads(1, || selective_scan_par(&p, 37).unwrap());
    let four = crate::par::with_threads(4, || selective_scan_par(&p, 37).unwrap());
    assert_eq!(one, four);
}

#[test]
fn hidden_state_stays_bounded() {
    for seed in 0..20 {
        let p = random_params(500, 2, 3, 100 + seed);
        let h = scan_states_seq(&p.a_bar, &p.bx, p.dim * p.state);
        let max_b = p.bx.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let max_a = p.a_bar.iter().fold(0.0f64, |m, &v| m.max(v));
        let bound = max_b / (1.0 - max_a);
        assert!(h.iter().all(|v| v.abs() <= bound * (1.0 + 1e-12)));
    }
}

fn random_s6(dim: usize, state: usize, seed: u64) -> S6Params {
    let mut r = rng(seed);
    let mut p = S6Params::init(dim, state, &mut r);
    // Larger steps than the training init so the recurrence actually mixes.
    p.delta_bias = Tensor::new(&[dim], (0..dim).map(|_| r.random_range(-1.0..0.5)).collect()).unwrap();
    p
}

#[test]
fn init_respects_stability_and_step_range() {
    let p = S6Params::init(6, 8, &mut rng(10));
    assert!(p.a_log.data().iter().all(|v| -v.exp() < 0.0));
    assert!((p.a_log.at2(3, 7) - 8f64.ln()).abs() < 1e-15);
    for &b in p.delta_bias.data() {
        let dt = crate::numcore::softplus(b);
        assert!((DT_MIN * (1.0 - 1e-9)..=DT_MAX * (1.0 + 1e-9)).contains(&dt), "{dt}");
    }
}

#[test]
fn zero_input_gives_zero_output() {
    let p = random_s6(5, 4, 11);
    let y = s6_eval(&Tensor::zeros(&[12, 5]), &p, ScanMode::Sequential).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn s6_is_causal() {
    let p = random_s6(4, 3, 12);
    let mut r = rng(13);
    let x = Tensor::randn(&[30, 4], 1.0, &mut r);
    let y = s6_eval(&x, &p, ScanMode::Sequential).unwrap();
    for t in [0usize, 7, 29] {
        let mut x2 = x.clone();
        x2.data_mut()[t * 4 + 1] += 0.5;
        let y2 = s6_eval(&x2, &p, ScanMode::Sequential).unwrap();
        assert_eq!(&y.data()[..t * 4], &y2.data()[..t * 4]);
        assert_ne!(&y.data()[t * 4..], &y2.data()[t * 4..]);
    }
}

#[test]
fn s6_chunked_mode_matches_sequential() {
    let p = random_s6(4, 3, 14);
    let x = Tensor::randn(&[100, 4], 1.0, &mut rng(15));
    let a = s6_eval(&x, &p, ScanMode::Sequential).unwrap();
    let b = s6_eval(&x, &p, ScanMode::Chunked(9)).unwrap();
    assert!(normwise_rel(b.data(), a.data()) < 1e-10);
}

#[test]
fn s6_gradients_match_finite_differences() {
    let p = random_s6(4, 3, 16);
    let x = Tensor::randn(&[12, 4], 1.0, &mut rng(17));
    let mut inputs = vec![x];
    inputs.extend(p.to_vec());
    let report = check_gradients(
        |t, v| {
            let vars = S6Vars::from_array([v[1], v[2], v[3], v[4], v[5]]);
            let y = s6_forward(t, v[0], &vars, ScanMode::Sequential)?;
            t.mean(y)
        },
        &inputs,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.inputs);
    // Same check against a random cotangent and the chunked kernel.
    let report = check_gradients(
        |t, v| {
            let vars = S6Vars::from_array([v[1], v[2], v[3], v[4], v[5]]);
            s6_forward(t, v[0], &vars, ScanMode::Chunked(5))
        },
        &inputs,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.inputs);
}

#[test]
fn one_head_is_plain_s6() {
    let p = random_s6(6, 4, 18);
    let x = Tensor::randn(&[40, 6], 1.0, &mut rng(19));
    let single = s6_eval(&x, &p, ScanMode::Sequential).unwrap();
    let multi = mhs6_eval(&x, std::slice::from_ref(&p), ScanMode::Sequential).unwrap();
    assert_eq!(single, multi);
}

#[test]
fn heads_are_isolated() {
    let cfg = HeadConfig::new(3, 12, 4).unwrap();
    let mut r = rng(20);
    let heads: Vec<S6Params> = (0..3).map(|i| random_s6(4, 4, 200 + i)).collect();
    let x = Tensor::randn(&[25, 12], 1.0, &mut r);
    let y = mhs6_eval(&x, &heads, ScanMode::Sequential).unwrap();
    for head in 0..cfg.num_heads {
        let mut x2 = x.clone();
        for t in 0..25 {
            x2.data_mut()[t * 12 + head * 4 + 2] += 0.3;
        }
        let y2 = mhs6_eval(&x2, &heads, ScanMode::Sequential).unwrap();
        for t in 0..25 {
            for ch in 0..12 {
                let same = y.at2(t, ch) == y2.at2(t, ch);
                assert_eq!(same, ch / 4 != head, "head {head} t {t} ch {ch}");
            }
        }
    }
}

#[test]
fn head_config_validation() {
    assert!(HeadConfig::new(5, 48, 8).is_err());
    assert!(HeadConfig::new(0, 48, 8).is_err());
    let cfg = HeadConfig::new(DEFAULT_HEADS, 48, 8).unwrap();
    assert_eq!(cfg.head_dim(), 8);
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4, 10]));
    let heads: Vec<S6Vars> = (0..3).map(|i| random_s6(3, 2, i).constant_on(&tape)).collect();
    assert!(matches!(
        mhs6_forward(&tape, x, &heads, ScanMode::Sequential),
        Err(Error::Config(_))
    ));
}

#[test]
fn six_heads_shape_and_gradients() {
    let cfg = HeadConfig::new(6, 48, 8).unwrap();
    let mut r = rng(21);
    let heads = cfg.init_heads(&mut r);
    let x = Tensor::randn(&[128, 48], 1.0, &mut r);
    let y = mhs6_eval(&x, &heads, ScanMode::Sequential).unwrap();
    assert_eq!(y.shape(), &[128, 48]);

    let mut inputs = vec![x];
    for h in &heads {
        inputs.extend(h.to_vec());
    }
    let report = check_gradients(
        |t, v| {
            let vars: Vec<S6Vars> = v[1..]
                .chunks(5)
                .map(|c| S6Vars::from_array([c[0], c[1], c[2], c[3], c[4]]))
                .collect();
            mhs6_forward(t, v[0], &vars, ScanMode::Sequential)
        },
        &inputs,
    )
    .unwrap();
    assert!(report.passed(), "max rel error {:e}", report.max_rel_error());
}

fn reverse(x: &Tensor) -> Tensor {
    let (l, d) = x.dims2("reverse").unwrap();
    let mut data = Vec::with_capacity(l * d);
    for t in (0..l).rev() {
        data.extend_from_slice(x.row(t));
    }
    Tensor::new(&[l, d], data).unwrap()
}

#[test]
fn backward_branch_is_reversed_forward_scan() {
    let fwd = vec![random_s6(4, 3, 22)];
    let bwd = vec![random_s6(4, 3, 23)];
    let x = Tensor::randn(&[15, 4], 1.0, &mut rng(24));
    let both = bidirectional_eval(&x, &fwd, Some(&bwd), ScanMode::Sequential).unwrap();
    let f = mhs6_eval(&x, &fwd, ScanMode::Sequential).unwrap();
    let b = reverse(&mhs6_eval(&reverse(&x), &bwd, ScanMode::Sequential).unwrap());
    for i in 0..both.len() {
        assert_eq!(both.data()[i], f.data()[i] + b.data()[i]);
    }
}

#[test]
fn bidirectional_has_global_receptive_field() {
    let mut r = rng(25);
    let fwd: Vec<S6Params> = (0..2).map(|i| random_s6(3, 3, 300 + i)).collect();
    let bwd: Vec<S6Params> = (0..2).map(|i| random_s6(3, 3, 400 + i)).collect();
    let x = Tensor::randn(&[20, 6], 1.0, &mut r);
    let y = bidirectional_eval(&x, &fwd, Some(&bwd), ScanMode::Sequential).unwrap();
    for t in 0..20 {
        let mut x2 = x.clone();
        x2.data_mut()[t * 6] += 0.1;
        let y2 = bidirectional_eval(&x2, &fwd, Some(&bwd), ScanMode::Sequential).unwrap();
        for s in 0..20 {
            assert_ne!(y.row(s), y2.row(s), "perturb t={t} left row {s} unchanged");
        }
    }
}

#[test]
fn palindromes_stay_palindromic_with_tied_branches() {
    let p = vec![random_s6(3, 4, 26)];
    let mut r = rng(27);
    for _ in 0..5 {
        let half = Tensor::randn(&[8, 3], 1.0, &mut r);
        let mut data = half.data().to_vec();
        data.extend_from_slice(reverse(&half).data());
        let x = Tensor::new(&[16, 3], data).unwrap();
        let y = bidirectional_eval(&x, &p, Some(&p), ScanMode::Sequential).unwrap();
        let yr = reverse(&y);
        assert!(y.max_abs_diff(&yr) < 1e-12 * (1.0 + y.max_abs()));
    }
}
