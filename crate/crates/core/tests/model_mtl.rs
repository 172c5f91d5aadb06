use std::sync::Arc;

use mtmgc_core::dataset::{make_samples, synthesize, SampleSet, Split, SynthConfig};
use mtmgc_core::graphs::{renormalize, GraphSet};
use mtmgc_core::model::{
    mgc_forward, network_forward, rct_forward, Activation, MgcLayer, MgcNetwork, NetworkConfig, Sharing, Variant,
    N_GRAPHS,
};
use mtmgc_core::mtl::{j1, Covariances, FlipFlopConfig};
use mtmgc_core::numcore::linalg::Cholesky;
use mtmgc_core::{Matrix, Tensor3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn rand_graph(rng: &mut ChaCha8Rng, n: usize) -> Arc<Matrix> {
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = rng.random_range(0.0..2.0);
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    Arc::new(renormalize(&a).unwrap())
}

fn rand_graphs(rng: &mut ChaCha8Rng, n: usize) -> [Arc<Matrix>; N_GRAPHS] {
    [(); N_GRAPHS].map(|_| rand_graph(rng, n))
}

fn rand_spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let a = rand_matrix(rng, n, n);
    let mut s = a.matmul(&a.transpose()).unwrap();
    for i in 0..n {
        s.set(i, i, s.get(i, i) + 0.5);
    }
    s
}

fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows() * b.rows(), a.cols() * b.cols(), |i, j| {
        a.get(i / b.rows(), j / b.cols()) * b.get(i % b.rows(), j % b.cols())
    })
}

fn layer(sharing: Sharing, n_modes: usize, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> MgcLayer {
    let count = if sharing == Sharing::Rct { n_modes * n_modes } else { n_modes };
    MgcLayer {
        sharing,
        activation: Activation::Identity,
        n_modes,
        fan_in,
        fan_out,
        weights: (0..count).map(|_| rand_matrix(rng, N_GRAPHS * fan_in, fan_out)).collect(),
        biases: (0..n_modes).map(|_| rand_matrix(rng, 1, fan_out)).collect(),
    }
}

#[test]
fn block_form_equals_four_term_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let graphs = rand_graphs(&mut rng, 3);
    let h = rand_matrix(&mut rng, 3, 2);
    let w = rand_matrix(&mut rng, 8, 3);
    let b = rand_matrix(&mut rng, 1, 3);
    let got = mgc_forward(&h, &graphs, &w, &b, Activation::Identity).unwrap();
    let mut expect = Matrix::from_fn(3, 3, |_, j| b.get(0, j));
    for (r, a) in graphs.iter().enumerate() {
        let w_r = w.row_block(2 * r, 2);
        let term = a.matmul(&h).unwrap().matmul(&w_r).unwrap();
        expect = expect.add(&term).unwrap();
    }
    assert!(got.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn two_mode_cross_layer_matches_hand_expansion() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let graphs = vec![rand_graphs(&mut rng, 2), rand_graphs(&mut rng, 2)];
    let l = layer(Sharing::Rct, 2, 1, 1, &mut rng);
    let inputs = vec![rand_matrix(&mut rng, 2, 1), rand_matrix(&mut rng, 2, 1)];
    let out = rct_forward(&l, &inputs, &graphs).unwrap();
    for m in 0..2 {
        for z in 0..2 {
            let mut v = l.biases[m].get(0, 0);
            for k in 0..2 {
                let w = &l.weights[k * 2 + m];
                for r in 0..N_GRAPHS {
                    // source k's graphs carry source k's input
                    let a = &graphs[k][r];
                    let ah = a.get(z, 0) * inputs[k].get(0, 0) + a.get(z, 1) * inputs[k].get(1, 0);
                    v += w.get(r, 0) * ah;
                }
            }
            assert!((out[m].get(z, 0) - v).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_inter_weights_decouple_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let graphs = vec![rand_graphs(&mut rng, 4), rand_graphs(&mut rng, 4), rand_graphs(&mut rng, 4)];
    let mut l = layer(Sharing::Rct, 3, 2, 3, &mut rng);
    l.activation = Activation::Relu;
    for idx in 0..9 {
        if l.is_inter(idx) {
            l.weights[idx] = Matrix::zeros(8, 3);
        }
    }
    let inputs: Vec<Matrix> = (0..3).map(|_| rand_matrix(&mut rng, 4, 2)).collect();
    let out = rct_forward(&l, &inputs, &graphs).unwrap();
    for m in 0..3 {
        let alone = mgc_forward(&inputs[m], &graphs[m], l.intra(m), &l.biases[m], Activation::Relu).unwrap();
        assert_eq!(out[m], alone);
    }
}

#[test]
fn single_mode_cross_layer_is_plain_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let graphs = vec![rand_graphs(&mut rng, 5)];
    let l = layer(Sharing::Rct, 1, 3, 2, &mut rng);
    let h = rand_matrix(&mut rng, 5, 3);
    let out = rct_forward(&l, std::slice::from_ref(&h), &graphs).unwrap();
    let plain = mgc_forward(&h, &graphs[0], &l.weights[0], &l.biases[0], Activation::Identity).unwrap();
    assert_eq!(out[0], plain);
}

struct Fixture {
    graphs: GraphSet,
    set: SampleSet,
}

fn fixture(n_zones: usize) -> Fixture {
    let cfg = SynthConfig {
        n_zones,
        n_hours: 260,
        ..Default::default()
    };
    let syn = synthesize(&cfg, 17).unwrap();
    let s = make_samples(&syn.demand, &Split::default()).unwrap();
    let graphs = GraphSet::build(&syn.zones, &syn.demand, s.train_window()).unwrap();
    Fixture { graphs, set: s.train }
}

fn small_net(variant: Variant, seed: u64) -> MgcNetwork {
    let cfg = NetworkConfig {
        layer_sizes: vec![6, 5, 1],
        ..Default::default()
    };
    MgcNetwork::new(variant, 2, 4, &cfg, seed).unwrap()
}

#[test]
fn one_sample_matches_its_rows_in_a_batch() {
    let fx = fixture(5);
    let net = small_net(Variant::Mix, 2);
    let all = network_forward(&net, &fx.graphs, &fx.set).unwrap();
    let n = fx.set.n_zones();
    for k in [0, 3, fx.set.len() - 1] {
        let mut d = fx.set.clone();
        // rebuild a one-sample set on the same statistics
        d = subset(&d, k);
        let one = network_forward(&net, &fx.graphs, &d).unwrap();
        for m in 0..2 {
            for z in 0..n {
                assert_eq!(one[m].get(z, 0), all[m].get(k * n + z, 0));
            }
        }
    }
}

fn subset(set: &SampleSet, k: usize) -> SampleSet {
    let cfg = SynthConfig {
        n_zones: set.n_zones(),
        n_hours: 260,
        ..Default::default()
    };
    let syn = synthesize(&cfg, 17).unwrap();
    SampleSet::build(&syn.demand, vec![set.hours()[k]], set.normalization().clone()).unwrap()
}

#[test]
fn zone_permutation_permutes_predictions() {
    let fx = fixture(6);
    let perm = [3, 5, 0, 1, 4, 2];
    for variant in Variant::ALL {
        let net = small_net(variant, 4);
        let base = network_forward(&net, &fx.graphs, &fx.set).unwrap();
        let g = fx.graphs.permuted(&perm).unwrap();
        let s = fx.set.permute_zones(&perm);
        let out = network_forward(&net, &g, &s).unwrap();
        for m in 0..2 {
            for k in 0..fx.set.len() {
                for (new, &old) in perm.iter().enumerate() {
                    let a = out[m].get(k * 6 + new, 0);
                    let b = base[m].get(k * 6 + old, 0);
                    assert!((a - b).abs() < 1e-9, "{variant}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn zeroed_output_layer_predicts_its_bias() {
    let fx = fixture(4);
    let mut net = small_net(Variant::Rct, 1);
    let last = net.layers.last_mut().unwrap();
    for w in &mut last.weights {
        *w = Matrix::zeros(w.rows(), w.cols());
    }
    last.biases = vec![Matrix::scalar(0.25), Matrix::scalar(-1.5)];
    let out = network_forward(&net, &fx.graphs, &fx.set).unwrap();
    let ls = &fx.set.normalization().labels;
    for m in 0..2 {
        let b = [0.25, -1.5][m];
        for r in 0..out[m].rows() {
            let z = r % 4;
            assert!((out[m].get(r, 0) - (ls.mean[m][z] + ls.std[m][z] * b)).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let fx = fixture(4);
    let net = small_net(Variant::Mlr, 9);
    let a = network_forward(&net, &fx.graphs, &fx.set).unwrap();
    let b = network_forward(&net, &fx.graphs, &fx.set).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mismatched_zone_order_is_rejected() {
    let fx = fixture(4);
    let net = small_net(Variant::Mgc, 0);
    let g = fx.graphs.permuted(&[1, 0, 2, 3]).unwrap();
    assert!(network_forward(&net, &g, &fx.set).is_err());
}

#[test]
fn j1_alpha_one_is_plain_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w: Vec<Matrix> = (0..9).map(|_| rand_matrix(&mut rng, 3, 2)).collect();
    let total: f64 = w.iter().map(Matrix::sum_squares).sum();
    assert!((j1(&w, 3, 1.0).unwrap() - total).abs() < 1e-12);
}

#[test]
fn j1_ignores_mode_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w: Vec<Matrix> = (0..9).map(|_| rand_matrix(&mut rng, 3, 2)).collect();
    let perm = [2, 0, 1];
    let permuted: Vec<Matrix> = (0..9).map(|idx| w[perm[idx / 3] * 3 + perm[idx % 3]].clone()).collect();
    assert!((j1(&w, 3, 0.1).unwrap() - j1(&permuted, 3, 0.1).unwrap()).abs() < 1e-12);
}

fn random_covariances(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Covariances {
    let s = dims.map(|d| rand_spd(rng, d));
    Covariances::new(0, s, false, false).unwrap()
}

fn explicit_j2(w: &Tensor3, cov: &Covariances) -> f64 {
    let k = kron(&kron(cov.sigma(0), cov.sigma(1)), cov.sigma(2));
    let chol = Cholesky::factor(&k).unwrap();
    let [a, b, c] = w.dims();
    let v = Matrix::from_fn(a * b * c, 1, |r, _| w.get(r / (b * c), (r / c) % b, r % c));
    let x = chol.solve(&v).unwrap();
    let quad: f64 = v.data().iter().zip(x.data()).map(|(p, q)| p * q).sum();
    quad - chol.log_det()
}

#[test]
fn mode_products_match_explicit_kronecker() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for dims in [[2, 2, 2], [3, 2, 2], [2, 3, 4]] {
        let cov = random_covariances(&mut rng, dims);
        let w = Tensor3::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0));
        let (fast, slow) = (cov.j2(&w).unwrap(), explicit_j2(&w, &cov));
        assert!((fast - slow).abs() < 1e-10, "{dims:?}: {fast} vs {slow}");
    }
}

#[test]
fn j2_ignores_consistent_mode_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cov = random_covariances(&mut rng, [2, 2, 3]);
    let w = Tensor3::from_fn([2, 2, 3], |_, _, _| rng.random_range(-1.0..1.0));
    let perm = [1, 2, 0];
    let wp = Tensor3::from_fn([2, 2, 3], |i, j, m| w.get(i, j, perm[m]));
    let sm = cov.sigma(2).permute_symmetric(&perm);
    let cp = Covariances::new(0, [cov.sigma(0).clone(), cov.sigma(1).clone(), sm], false, false).unwrap();
    assert!((cov.j2(&w).unwrap() - cp.j2(&wp).unwrap()).abs() < 1e-10);
}

#[test]
fn j2_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cov = random_covariances(&mut rng, [3, 2, 2]);
    let w = Tensor3::from_fn([3, 2, 2], |_, _, _| rng.random_range(-1.0..1.0));
    let (_, grad) = cov.j2_with_gradient(&w).unwrap();
    let h = 1e-5;
    for i in 0..3 {
        for j in 0..2 {
            for m in 0..2 {
                let mut up = w.clone();
                up.set(i, j, m, w.get(i, j, m) + h);
                let mut dn = w.clone();
                dn.set(i, j, m, w.get(i, j, m) - h);
                let fd = (cov.j2(&up).unwrap() - cov.j2(&dn).unwrap()) / (2.0 * h);
                let an = grad.get(i, j, m);
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(rel < 1e-6, "({i},{j},{m}): {an} vs {fd}");
            }
        }
    }
}

#[test]
fn proportional_modes_give_rank_one_mode_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c = 1.7;
    let w1 = rand_matrix(&mut rng, 4, 3);
    let w = Tensor3::stack_frontal(&[&w1, &w1.scale(c)]).unwrap();
    let mut cov = Covariances::identity(0, [4, 3, 2], true, true);
    let cfg = FlipFlopConfig {
        ridge_factor: 1e-5,
        ..Default::default()
    };
    cov.flip_flop(&w, &cfg).unwrap();
    let s = cov.sigma(2);
    assert!((s.trace() - 2.0).abs() < 1e-12);
    let corr = s.get(0, 1) / (s.get(0, 0) * s.get(1, 1)).sqrt();
    assert!((corr - 1.0).abs() < 1e-4, "{corr}");
    assert!((s.get(0, 1) / s.get(0, 0) - c).abs() < 1e-3);
    assert_eq!(cov.sigma(0), &Matrix::identity(4));
    assert_eq!(cov.sigma(1), &Matrix::identity(3));
}

#[test]
fn flip_flop_never_raises_the_negative_log_prior() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let w = Tensor3::from_fn([4, 3, 3], |_, _, _| rng.random_range(-1.0..1.0));
        let mut cov = Covariances::identity(0, [4, 3, 3], false, false);
        let cfg = FlipFlopConfig {
            fix_input: false,
            fix_output: false,
            ..Default::default()
        };
        let report = cov.flip_flop(&w, &cfg).unwrap();
        assert!(report.sweeps >= 2);
        let h = &report.objective_history;
        for pair in h.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9 * pair[0].abs().max(1.0), "seed {seed}: {h:?}");
        }
        for k in 0..3 {
            assert!(cov.sigma(k).is_symmetric(1e-10));
            assert!(Cholesky::factor(cov.sigma(k)).is_ok());
        }
    }
}

#[test]
fn singular_statistic_is_rescued_by_the_ridge() {
    // rank-deficient weights make the raw input statistic singular
    let w = Tensor3::from_fn([5, 1, 2], |i, _, m| if i == 0 { 1.0 + m as f64 } else { 0.0 });
    let mut cov = Covariances::identity(3, [5, 1, 2], false, true);
    let cfg = FlipFlopConfig {
        fix_input: false,
        ..Default::default()
    };
    cov.flip_flop(&w, &cfg).unwrap();
    assert!(Cholesky::factor(cov.sigma(0)).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn j2_with_identity_factors_is_squared_norm(data in prop::collection::vec(-3.0f64..3.0, 12)) {
        let w = Tensor3::new([2, 3, 2], data).unwrap();
        let cov = Covariances::identity(0, [2, 3, 2], true, true);
        let norm: f64 = w.data().iter().map(|v| v * v).sum();
        prop_assert!((cov.j2(&w).unwrap() - norm).abs() < 1e-12);
    }

    #[test]
    fn j1_is_nonnegative_and_monotone_in_alpha(seed in 0u64..500, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<Matrix> = (0..4).map(|_| rand_matrix(&mut rng, 2, 2)).collect();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (x, y) = (j1(&w, 2, lo).unwrap(), j1(&w, 2, hi).unwrap());
        prop_assert!(x >= 0.0 && x <= y + 1e-12);
    }
}
