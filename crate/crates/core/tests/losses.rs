use agct_core::fanbeam::{build_geometry, GeometryConfig, Projector, View};
use agct_core::losses::*;
use agct_core::networks::{FeatureExtractor, FeatureExtractorConfig, SegNet, SegNetConfig};
use agct_tensor::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn projector(n: usize) -> Projector {
    Projector::new(&build_geometry(&GeometryConfig::desk(n), View::Ap).unwrap()).unwrap()
}

fn random_volume(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn small_seg() -> SegNet {
    let mut s = SegNet::new(&SegNetConfig {
        channels: [2, 3, 4],
        ..SegNetConfig::default()
    })
    .unwrap();
    s.freeze();
    s
}

fn small_fx() -> FeatureExtractor {
    FeatureExtractor::new(&FeatureExtractorConfig {
        channels: [2, 3, 4, 5],
        ..FeatureExtractorConfig::default()
    })
    .unwrap()
}

fn scalar_of(f: impl Fn(&mut Tape, Var, Var) -> Var, a: &Tensor, b: &Tensor) -> f64 {
    let mut t = Tape::new();
    let x = t.constant(a.clone());
    let y = t.constant(b.clone());
    let l = f(&mut t, x, y);
    t.scalar(l)
}

#[test]
fn every_loss_vanishes_on_agreement() {
    let p = projector(8);
    let seg = small_seg();
    let fx = small_fx();
    let y = random_volume(1, &[1, 1, 8, 8, 8]);
    let terms: Vec<(&str, f64)> = vec![
        ("r", scalar_of(|t, a, b| recon_loss(t, a, b).unwrap(), &y, &y)),
        ("proj", scalar_of(|t, a, b| projection_loss(t, &p, a, b).unwrap(), &y, &y)),
        ("s", scalar_of(|t, a, b| dice_seg_loss(t, &seg, a, b).unwrap(), &y, &y)),
        ("p", scalar_of(|t, a, b| perceptual_loss(t, &fx, a, b, PerceptualOptions::default()).unwrap(), &y, &y)),
    ];
    for (name, v) in terms {
        assert!(v == 0.0, "{name} = {v}");
    }
}

#[test]
fn projection_loss_ignores_voxels_outside_the_fan() {
    let p = projector(8);
    let y = random_volume(2, &[1, 1, 8, 8, 8]);
    let mut yh = y.clone();
    // Corner columns fall outside every ray of the circumscribed sampling.
    let m = p.matrix(View::Ap).csr().clone();
    let l = p.matrix(View::Lat).csr().clone();
    let mut touched = [false; 64];
    for mat in [m, l] {
        for r in 0..mat.n_rows() {
            for (c, _) in mat.row(r) {
                touched[c] = true;
            }
        }
    }
    let outside: Vec<usize> = (0..64).filter(|&c| !touched[c]).collect();
    if outside.is_empty() {
        // Nothing to perturb: the operator covers the whole grid.
        return;
    }
    for &c in &outside {
        for z in 0..8 {
            yh.data_mut()[c * 8 + z] += 0.3;
        }
    }
    let v = scalar_of(|t, a, b| projection_loss(t, &p, a, b).unwrap(), &yh, &y);
    assert_eq!(v, 0.0);
}

#[test]
fn projection_loss_gradient_matches_finite_differences() {
    let p = projector(8);
    let y = random_volume(3, &[1, 1, 8, 8, 8]);
    let yh = random_volume(4, &[1, 1, 8, 8, 8]);
    let mut t = Tape::new();
    let x = t.leaf(&yh.clone().with_grad());
    let yt = t.constant(y.clone());
    let l = projection_loss(&mut t, &p, x, yt).unwrap();
    let g = t.backward(l).unwrap().get(x).unwrap().to_vec();
    let f = |v: &Tensor| scalar_of(|t, a, b| projection_loss(t, &p, a, b).unwrap(), v, &y);
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..40 {
        let i = rng.random_range(0..512);
        let mut up = yh.clone();
        up.data_mut()[i] += h;
        let mut down = yh.clone();
        down.data_mut()[i] -= h;
        let num = (f(&up) - f(&down)) / (2.0 * h);
        if g[i] == 0.0 && num.abs() < 1e-12 {
            continue;
        }
        let rel = (g[i] - num).abs() / g[i].abs().max(num.abs());
        assert!(rel < 1e-6, "voxel {i}: {} vs {num}", g[i]);
    }
}

#[test]
fn projection_loss_rejects_foreign_geometry() {
    let p = projector(8);
    let a = random_volume(1, &[1, 1, 16, 16, 16]);
    let mut t = Tape::new();
    let x = t.constant(a.clone());
    let y = t.constant(a);
    assert!(projection_loss(&mut t, &p, x, y).is_err());
}

#[test]
fn frozen_networks_receive_no_gradient() {
    let seg = small_seg();
    let fx = small_fx();
    let y = random_volume(6, &[1, 1, 8, 8, 8]);
    let yh = random_volume(7, &[1, 1, 8, 8, 8]);
    let mut t = Tape::new();
    let x = t.leaf(&yh.with_grad());
    let yt = t.constant(y);
    let s = dice_seg_loss(&mut t, &seg, x, yt).unwrap();
    let p = perceptual_loss(&mut t, &fx, x, yt, PerceptualOptions::default()).unwrap();
    let total = t.add(s, p).unwrap();
    let g = t.backward(total).unwrap();
    assert!(g.get(x).unwrap().iter().any(|&v| v != 0.0));
    // Every recorded node that is not downstream of x has no gradient; the
    // parameters are constants, so no accumulator can change.
    for net in [seg.params(), fx.params()] {
        for (_, p) in net.iter() {
            assert!(p.grad().is_none() && !p.requires_grad());
        }
    }
}

#[test]
fn perceptual_loss_is_symmetric() {
    let fx = small_fx();
    let a = random_volume(8, &[2, 1, 8, 8, 8]);
    let b = random_volume(9, &[2, 1, 8, 8, 8]);
    for opts in [
        PerceptualOptions::default(),
        PerceptualOptions {
            norm: FeatureNorm::L1,
            slice_axis: SliceAxis::Coronal,
        },
    ] {
        let ab = scalar_of(|t, x, y| perceptual_loss(t, &fx, x, y, opts).unwrap(), &a, &b);
        let ba = scalar_of(|t, x, y| perceptual_loss(t, &fx, x, y, opts).unwrap(), &b, &a);
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-12);
    }
}

#[test]
fn single_slice_perceptual_loss_equals_direct_feature_distance() {
    let fx = small_fx();
    let a = random_volume(10, &[1, 1, 8, 8, 1]);
    let b = random_volume(11, &[1, 1, 8, 8, 1]);
    let v = scalar_of(|t, x, y| perceptual_loss(t, &fx, x, y, PerceptualOptions::default()).unwrap(), &a, &b);

    let mut t = Tape::new();
    let sa = t.constant(Tensor::new(vec![1, 1, 8, 8], a.data().to_vec()).unwrap());
    let sb = t.constant(Tensor::new(vec![1, 1, 8, 8], b.data().to_vec()).unwrap());
    let fa = fx.forward(&mut t, sa).unwrap();
    let fb = fx.forward(&mut t, sb).unwrap();
    let mut direct = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let (x, y) = (t.value(*x), t.value(*y));
        direct += x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
    }
    assert!((v - direct).abs() < 1e-12);
}

#[test]
fn baseline_never_builds_the_auxiliary_terms() {
    let p = projector(8);
    let seg = small_seg();
    let fx = small_fx();
    let y = random_volume(12, &[1, 1, 8, 8, 8]);
    let yh = random_volume(13, &[1, 1, 8, 8, 8]);
    let d = random_volume(14, &[1, 1, 1, 1, 1]);
    let run = |obj: &GeneratorObjective| {
        let mut t = Tape::new();
        let a = t.constant(yh.clone());
        let b = t.constant(y.clone());
        let df = t.constant(d.clone());
        obj.evaluate(&mut t, df, a, b, 3).unwrap().1
    };
    let cfg = LossConfig {
        weights: LossWeights::baseline(),
        ..LossConfig::default()
    };
    let with = run(&GeneratorObjective::new(cfg, &p, Some(&seg), Some(&fx)).unwrap());
    let without = run(&GeneratorObjective::new(cfg, &p, None, None).unwrap());
    assert_eq!(with.total.to_bits(), without.total.to_bits());
    assert_eq!((seg.invocations(), fx.invocations()), (0, 0));
    assert_eq!((with.s, with.p), (0.0, 0.0));
    assert!((with.total - with.weighted_total(&cfg.weights)).abs() < 1e-12);

    let full = LossConfig::default();
    assert!(GeneratorObjective::new(full, &p, None, Some(&fx)).is_err());
    let b = run(&GeneratorObjective::new(full, &p, Some(&seg), Some(&fx)).unwrap());
    assert!(seg.invocations() == 2 && fx.invocations() == 2);
    assert!((b.total - b.weighted_total(&full.weights)).abs() < 1e-12);
    assert!(b.total > with.total);
}

fn hard_masks(len: usize, a: &[bool], b: &[bool]) -> (Tensor, Tensor) {
    let to = |m: &[bool]| {
        let mut d = vec![0.0; 2 * len];
        for (i, &on) in m.iter().enumerate() {
            d[i] = if on { 0.0 } else { 1.0 };
            d[len + i] = if on { 1.0 } else { 0.0 };
        }
        Tensor::new(vec![1, 2, len], d).unwrap()
    };
    (to(a), to(b))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_nonnegative(seed in 0u64..1000) {
        let a = random_volume(seed, &[1, 1, 8, 8, 8]);
        let b = random_volume(seed + 1, &[1, 1, 8, 8, 8]);
        let v = scalar_of(|t, x, y| recon_loss(t, x, y).unwrap(), &a, &b);
        prop_assert!(v >= 0.0);
        let mut t = Tape::new();
        let x = t.constant(a.clone());
        let y = t.constant(b.clone());
        let d = lsgan_d_loss(&mut t, x, y).unwrap();
        let g = lsgan_g_loss(&mut t, x);
        prop_assert!(t.scalar(d) >= 0.0 && t.scalar(g) >= 0.0);
    }

    /// Moving one predicted voxel from outside to inside the target keeps
    /// both mask sizes fixed and raises the overlap by one.
    #[test]
    fn dice_decreases_with_overlap(size in 2usize..12, overlap in 0usize..11) {
        let len = 32;
        let overlap = overlap.min(size - 1);
        let target: Vec<bool> = (0..len).map(|i| i < size).collect();
        let pred = |k: usize| -> Vec<bool> {
            (0..len).map(|i| if i < size { i < k } else { i < size + (size - k) }).collect()
        };
        let loss = |k: usize| {
            let (p, q) = hard_masks(len, &pred(k), &target);
            scalar_of(|t, x, y| soft_dice_foreground(t, x, y).unwrap(), &p, &q)
        };
        prop_assert!(loss(overlap + 1) < loss(overlap));
    }
}
