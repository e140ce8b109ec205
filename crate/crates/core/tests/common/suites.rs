//! Seeded property checks shared by the integration tests (few seeds, under
//! proptest) and the acceptance harness (full trial counts).

use ibp_core::attack::{pgd_attack, AttackConfig, RestartInit};
use ibp_core::bounds::{input_box, propagate, worst_case_logits};
use ibp_core::data::Dataset;
use ibp_core::network::{Activation, GradientTape};
use ibp_core::training::{loss_graph, LossVariant};
use ibp_core::verify::{bab_verify, pgd_gap_hunt, verified_error, BabConfig, BabMode, Status};
use ibp_core::{Layer, Network, Rng, Tensor};

use super::{batch1, corners, full_loss, kink_distance, naive_trace, random_conv, random_mlp, sample_in, true_margin};

fn pick<T: Copy>(rng: &mut Rng, items: &[T]) -> T {
    items[rng.below(items.len())]
}

/// A small random net: an MLP of random depth and width with a random
/// monotone activation, or (one time in four) a ReLU conv net.
pub fn random_small_net(rng: &mut Rng, relu_only: bool) -> Network {
    if rng.below(4) == 0 {
        let dims: Vec<usize> = [2, 3, 2, 2, 2, 3].iter().map(|&n| rng.below(n)).collect();
        return random_conv(rng, [1 + dims[0], 5, 5], 1 + dims[1], 2 + dims[2], 1 + dims[3], dims[4], 2 + dims[5]);
    }
    let mut widths = vec![1 + rng.below(6)];
    for _ in 0..1 + rng.below(3) {
        widths.push(2 + rng.below(10));
    }
    widths.push(2 + rng.below(3));
    let act = if relu_only {
        Activation::Relu
    } else {
        pick(rng, &[Activation::Relu, Activation::Tanh, Activation::Sigmoid])
    };
    let scale = 0.5 + 2.0 * rng.uniform();
    random_mlp(rng, &widths, Some(act), scale)
}

fn tol(v: f64) -> f64 {
    1e-10 * (1.0 + v.abs())
}

/// Samples `samples` points of a random ε-box (corners first) and counts
/// layer outputs or margins that escape the propagated bounds.
pub fn ibp_containment(seed: u64, samples: usize) -> usize {
    let mut rng = Rng::new(seed);
    let net = random_small_net(&mut rng, false);
    let n = net.input_len();
    let x0: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let eps = 0.01 + 0.3 * rng.uniform();
    let t = rng.below(net.num_classes());
    let x = Tensor::new(net.input_shape().to_vec(), x0.clone()).unwrap();
    let b = input_box(&x, eps, None).unwrap();
    let (lo, hi) = (b.lower().data().to_vec(), b.upper().data().to_vec());
    let layers = propagate(&net, &b, false).unwrap();
    let elided = worst_case_logits(&net, &x, eps, t, true, None).unwrap();
    let plain = worst_case_logits(&net, &x, eps, t, false, None).unwrap();

    let fixed = if n <= 8 { corners(&lo, &hi) } else { Vec::new() };
    let mut violations = 0;
    for s in 0..samples {
        let p = match fixed.get(s) {
            Some(c) => c.clone(),
            None if s % 10 == 0 => lo.iter().zip(&hi).map(|(&l, &h)| if rng.below(2) == 0 { l } else { h }).collect(),
            None => sample_in(&mut rng, &lo, &hi),
        };
        let trace = naive_trace(&net, &p);
        for (vals, bounds) in trace.iter().zip(&layers) {
            let out = vals
                .iter()
                .zip(bounds.lower().data().iter().zip(bounds.upper().data()))
                .any(|(&v, (&l, &u))| v < l - tol(v) || v > u + tol(v));
            violations += usize::from(out);
        }
        let z = trace.last().unwrap();
        for y in (0..z.len()).filter(|&y| y != t) {
            let m = z[y] - z[t];
            let (e, w) = (elided.data(), plain.data());
            if m > e[y] - e[t] + tol(m) || m > w[y] - w[t] + tol(m) {
                violations += 1;
            }
        }
    }
    violations
}

/// Counts classes whose elided worst-case margin exceeds the plain one.
pub fn elision_dominance(seed: u64) -> usize {
    let mut rng = Rng::new(seed);
    let net = random_small_net(&mut rng, false);
    let x0: Vec<f64> = (0..net.input_len()).map(|_| rng.uniform()).collect();
    let x = Tensor::new(net.input_shape().to_vec(), x0).unwrap();
    let eps = 0.3 * rng.uniform();
    let t = rng.below(net.num_classes());
    let e = worst_case_logits(&net, &x, eps, t, true, None).unwrap();
    let p = worst_case_logits(&net, &x, eps, t, false, None).unwrap();
    (0..net.num_classes())
        .filter(|&y| y != t)
        .filter(|&y| {
            let (a, b) = (e.data()[y] - e.data()[t], p.data()[y] - p.data()[t]);
            a > b + 1e-12 * (1.0 + b.abs())
        })
        .count()
}

/// Largest gap between IBP bounds (per logit and elided margins) and the
/// exact optimum over the box corners, for a single affine layer.
pub fn affine_exactness(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let inputs = 1 + rng.below(10);
    let classes = 2 + rng.below(4);
    let scale = 0.5 + 3.0 * rng.uniform();
    let net = random_mlp(&mut rng, &[inputs, classes], None, scale);
    let x0: Vec<f64> = (0..inputs).map(|_| rng.uniform_in(-1.0, 2.0)).collect();
    let x = Tensor::vector(x0).unwrap();
    let eps = 0.5 * rng.uniform();
    let t = rng.below(classes);
    let b = input_box(&x, eps, None).unwrap();
    let out = propagate(&net, &b, false).unwrap().pop().unwrap();
    let elided = worst_case_logits(&net, &x, eps, t, true, None).unwrap();

    let zs: Vec<Vec<f64>> = corners(b.lower().data(), b.upper().data())
        .iter()
        .map(|c| super::naive_forward(&net, c))
        .collect();
    let mut err: f64 = 0.0;
    for k in 0..classes {
        let max = zs.iter().map(|z| z[k]).fold(f64::NEG_INFINITY, f64::max);
        let min = zs.iter().map(|z| z[k]).fold(f64::INFINITY, f64::min);
        err = err.max((out.upper().data()[k] - max).abs()).max((out.lower().data()[k] - min).abs());
        if k != t {
            let m = zs.iter().map(|z| z[k] - z[t]).fold(f64::NEG_INFINITY, f64::max);
            err = err.max((elided.data()[k] - m).abs());
        }
    }
    err
}

/// Worst relative error between tape gradients of the full robust loss and
/// central finite differences, over every parameter of a random net.
pub fn gradient_check(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let net = if seed % 5 == 4 {
        random_conv(&mut rng, [1, 5, 5], 2, 3, 1, 1, 3)
    } else {
        random_mlp(&mut rng, &[3, 6, 5, 3], Some(Activation::Relu), 1.5)
    };
    let eps = 0.02;
    let variant = if seed.is_multiple_of(2) { LossVariant::CrossEntropy } else { LossVariant::Softplus };
    let elision = !seed.is_multiple_of(3);
    let kappa = rng.uniform_in(0.1, 0.9);
    let labels = vec![0, 1, 2];
    let mut x;
    let mut tries = 0;
    loop {
        let d: Vec<f64> = (0..3 * net.input_len()).map(|_| rng.uniform()).collect();
        let mut shape = vec![3];
        shape.extend_from_slice(net.input_shape());
        x = Tensor::new(shape, d).unwrap();
        if kink_distance(&net, &x, eps) > 1e-3 {
            break;
        }
        tries += 1;
        assert!(tries < 1000, "no kink-free point for seed {seed}");
    }
    let (_, grads) = full_loss(&net, &x, &labels, eps, kappa, variant, elision);
    let h = 1e-6;
    let params: Vec<Tensor> = net.parameters().into_iter().cloned().collect();
    let mut worst: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let shifted = |delta: f64| {
                let mut ps = params.clone();
                let mut d = ps[pi].data().to_vec();
                d[j] += delta;
                ps[pi] = Tensor::new(p.shape().to_vec(), d).unwrap();
                let n = net.with_parameters(ps).unwrap();
                full_loss(&n, &x, &labels, eps, kappa, variant, elision).0
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let g = grads[pi].data()[j];
            worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-7));
        }
    }
    worst
}

/// Outcome of one branch-and-bound sandwich trial.
#[derive(Debug)]
pub struct Sandwich {
    pub grid_max: f64,
    pub lower: f64,
    pub upper: f64,
    pub falsified: bool,
    pub replay_ok: bool,
}

impl Sandwich {
    pub fn holds(&self, gap: f64) -> bool {
        self.grid_max <= self.upper + 1e-12 && self.lower <= self.upper && self.upper - self.lower < gap && self.replay_ok
    }
}

/// A random 2-input ReLU net: `grid`×`grid` samples of the box against the
/// bracket from branch-and-bound in optimize mode.
pub fn bab_sandwich(seed: u64, grid: usize, gap: f64) -> Sandwich {
    let mut rng = Rng::new(seed);
    let h = 4 + rng.below(8);
    let classes = 2 + rng.below(2);
    let net = random_mlp(&mut rng, &[2, h, h, classes], Some(Activation::Relu), 2.0);
    let x0 = vec![rng.uniform_in(0.2, 0.8), rng.uniform_in(0.2, 0.8)];
    let eps = rng.uniform_in(0.03, 0.15);
    let x = Tensor::vector(x0.clone()).unwrap();
    let t = net.predict(&x).unwrap()[0];
    let cfg = BabConfig {
        mode: BabMode::Optimize { gap_tolerance: gap },
        max_nodes: 2_000_000,
        min_box_width: 1e-9,
        ..BabConfig::default()
    };
    let out = bab_verify(&net, &x, t, eps, &cfg).unwrap();
    let mut grid_max = f64::NEG_INFINITY;
    for i in 0..grid {
        for j in 0..grid {
            let f = |k: usize| -eps + 2.0 * eps * k as f64 / (grid - 1) as f64;
            let p = [(x0[0] + f(i)).clamp(0.0, 1.0), (x0[1] + f(j)).clamp(0.0, 1.0)];
            grid_max = grid_max.max(true_margin(&net, &p, t));
        }
    }
    let (falsified, replay_ok) = match &out.status {
        Status::Falsified(c) => (true, replays(&net, c, &x0, eps, t)),
        _ => (false, true),
    };
    Sandwich {
        grid_max,
        lower: out.best_lower_bound,
        upper: out.best_upper_bound,
        falsified,
        replay_ok,
    }
}

/// `c` lies in the ε-box around `x0` (within the unit domain) and is not
/// classified as `t`.
pub fn replays(net: &Network, c: &Tensor, x0: &[f64], eps: f64, t: usize) -> bool {
    let inside = c
        .data()
        .iter()
        .zip(x0)
        .all(|(&v, &x)| (v - x).abs() <= eps + 1e-12 && (0.0..=1.0).contains(&v));
    inside && net.predict(&batch1(net, c.data())).unwrap()[0] != t
}

/// At ε = 0: the robust loss equals the nominal cross-entropy bit for bit,
/// and nominal, PGD, branch-and-bound and IBP error rates coincide.
pub fn epsilon_zero_collapse(seed: u64) -> Result<(), String> {
    let mut rng = Rng::new(seed);
    let net = random_mlp(&mut rng, &[2, 12, 12, 3], Some(Activation::Relu), 2.0);
    let n = 7;
    let xs: Vec<f64> = (0..2 * n).map(|_| rng.uniform()).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
    let x = Tensor::new(vec![n, 2], xs).unwrap();

    let mut tape = GradientTape::new();
    let params = net.bind(&mut tape, false);
    let xv = tape.leaf(x.clone(), false);
    let logits = net.forward_graph(&mut tape, &params, xv).unwrap();
    let ce = loss_graph(&mut tape, logits, None, &labels, 1.0, LossVariant::CrossEntropy, 1.0).unwrap();
    let ce = tape.mean(ce).unwrap();
    let ce = tape.value(ce).unwrap().data()[0];
    for kappa in [0.0, 0.25, 0.5, 1.0] {
        for elision in [true, false] {
            let (l, _) = full_loss(&net, &x, &labels, 0.0, kappa, LossVariant::CrossEntropy, elision);
            if l.to_bits() != ce.to_bits() {
                return Err(format!("κ={kappa} elision={elision}: {l:e} vs {ce:e}"));
            }
        }
    }

    let ds = Dataset::new(x, labels, 3, "random").map_err(|e| e.to_string())?;
    let attack = AttackConfig {
        steps: 20,
        restarts: 2,
        ..AttackConfig::default()
    };
    let r = verified_error(&net, &ds, 0.0, &attack, &BabConfig::default()).map_err(|e| e.to_string())?.rates;
    if !(r.nominal_rate == r.pgd_rate && r.pgd_rate == r.bab_rate && r.bab_rate == r.ibp_rate) {
        return Err(format!("rates differ at ε=0: {r:?}"));
    }
    Ok(())
}

/// One-input net whose margin is flat around 0.5 and only turns positive
/// near the edge of the ε = 0.1 box.
pub fn gradient_trap() -> Network {
    Network::new(
        vec![
            Layer::linear(Tensor::matrix(&[&[20.0]]).unwrap(), Tensor::vector(vec![-11.6]).unwrap()).unwrap(),
            Layer::Activation(Activation::Relu),
            Layer::linear(Tensor::matrix(&[&[0.0], &[1.0]]).unwrap(), Tensor::vector(vec![0.1, 0.0]).unwrap()).unwrap(),
        ],
        vec![1],
    )
    .unwrap()
}

/// PGD with one restart from the center fails on the trap, branch-and-bound
/// falsifies it, the gap hunt reports it, and the counterexample replays.
pub fn trap_hunt() -> Result<(), String> {
    let net = gradient_trap();
    let x0 = Tensor::vector(vec![0.5]).unwrap();
    let eps = 0.1;
    let attack = AttackConfig {
        epsilon: eps,
        steps: 100,
        restarts: 1,
        init: RestartInit::CenterThenUniform,
        ..AttackConfig::default()
    };
    let pgd = pgd_attack(&net, &x0, 0, &attack).map_err(|e| e.to_string())?;
    if pgd.success {
        return Err("PGD escaped the plateau".into());
    }
    let out = bab_verify(&net, &x0, 0, eps, &BabConfig::default()).map_err(|e| e.to_string())?;
    let Status::Falsified(c) = &out.status else {
        return Err(format!("branch-and-bound returned {}", out.status.name()));
    };
    if !replays(&net, c, &[0.5], eps, 0) {
        return Err(format!("counterexample {:?} does not replay", c.data()));
    }
    let ds = Dataset::new(Tensor::new(vec![1, 1], vec![0.5]).unwrap(), vec![0], 2, "trap").map_err(|e| e.to_string())?;
    let found = pgd_gap_hunt(&net, &ds, eps, &attack, &BabConfig::default()).map_err(|e| e.to_string())?;
    match found.as_slice() {
        [g] if g.index == 0 && !g.attack.success && replays(&net, &g.counterexample, &[0.5], eps, 0) => Ok(()),
        other => Err(format!("gap hunt reported {other:?}")),
    }
}
