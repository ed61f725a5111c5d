mod common;

use common::{brute_force_plan, rng, KERNEL_SCHEDULES};
use convrec::cds::{cds_forward, conv_block, count_flops, plan_schedule, schedule_family, BlockParams, CdsOptions};
use convrec::config::parse_schedule;
use convrec::encoder::LAYER_NORM_EPS;
use convrec::numerics::{grad_check, Graph, ParamId, ParamStore, PeakProbe, Tensor};
use proptest::prelude::*;

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng(seed))
}

fn blocks(store: &mut ParamStore, d: usize, layers: &[(usize, usize)], seed: u64) -> Vec<BlockParams> {
    let mut r = rng(seed);
    layers.iter().enumerate().map(|(j, &(k, _))| BlockParams::new(store, j, d, k, &mut r)).collect()
}

fn randomize(store: &mut ParamStore, ids: &[ParamId], seed: u64) {
    for (n, &id) in ids.iter().enumerate() {
        let t = store.value(id);
        let fresh = Tensor::uniform(t.shape(), 0.5, &mut rng(seed + n as u64));
        *store.value_mut(id) = fresh;
    }
}

#[test]
fn planned_examples() {
    let s = plan_schedule(70, &[(2, 2), (5, 5), (7, 7)]).unwrap();
    assert_eq!((s.lengths.clone(), s.paddings.clone()), (vec![35, 7, 1], vec![0, 0, 0]));
    let s = plan_schedule(50, &[(2, 2), (5, 5), (7, 7)]).unwrap();
    assert_eq!((s.lengths.clone(), s.paddings.clone()), (vec![25, 5, 1], vec![0, 0, 2]));
    let s = plan_schedule(7, &[(5, 5)]).unwrap();
    assert_eq!((s.lengths.clone(), s.paddings.clone()), (vec![2], vec![3]));
    assert_eq!(plan_schedule(70, &[(10, 10), (7, 7)]).unwrap().lengths, [7, 1]);
    assert!(matches!(plan_schedule(10, &[]), Err(convrec::Error::Config(_))));
}

#[test]
fn plan_matches_window_enumeration() {
    for len in 1..=64 {
        for k in 1..=8 {
            for s in 1..=8 {
                let plan = plan_schedule(len, &[(k, s), (k, s)]).unwrap();
                assert_eq!((plan.lengths, plan.paddings), brute_force_plan(len, &[(k, s), (k, s)]), "L={len} K={k} S={s}");
            }
        }
    }
}

#[test]
fn every_table_schedule_plans() {
    for text in KERNEL_SCHEDULES {
        let layers = parse_schedule(text).unwrap();
        for len in [30, 50, 70] {
            let plan = plan_schedule(len, &layers).unwrap();
            assert!(plan.output_len() >= 1);
            assert_eq!((plan.lengths, plan.paddings), brute_force_plan(len, &layers));
        }
    }
}

proptest! {
    #[test]
    fn lengths_shrink_under_striding(len in 2usize..500, k in 1usize..9, s in 2usize..9) {
        let plan = plan_schedule(len, &[(k, s)]).unwrap();
        prop_assert!(plan.lengths[0] < len);
    }

    #[test]
    fn family_reaches_one(len in 1usize..5000) {
        let plan = plan_schedule(len, &schedule_family(len)).unwrap();
        prop_assert_eq!(plan.output_len(), 1);
    }
}

#[test]
fn first_block_takes_both_residuals_from_z() {
    let d = 4;
    let mut store = ParamStore::new();
    let b = blocks(&mut store, d, &[(2, 2)], 1);
    let plan = plan_schedule(6, &[(2, 2)]).unwrap();
    let z = random(&[6, d], 2);
    let mut g = Graph::new(&store);
    let zv = g.input(z.clone());
    let out = conv_block(&mut g, &b[0], zv, zv, zv, &plan, 0, CdsOptions::default(), &mut rng(0)).unwrap();
    let via_forward = cds_forward(&mut g, &b, &plan, zv, CdsOptions::default(), &mut rng(0)).unwrap();
    let collapsed = g.mean_rows(out).unwrap();
    assert_eq!(g.value(collapsed).data(), g.value(via_forward).data());
}

#[test]
fn degenerate_weights_give_constant_rows() {
    let d = 5;
    let mut store = ParamStore::new();
    let b = blocks(&mut store, d, &[(3, 3)], 3);
    for id in [b[0].kernel, b[0].w_g, b[0].alpha1, b[0].alpha2] {
        let zero = Tensor::zeros(store.value(id).shape());
        *store.value_mut(id) = zero;
    }
    *store.value_mut(b[0].b_g) = Tensor::vector(&[0.3, -1.0, 2.0, 0.0, 0.7]);
    let plan = plan_schedule(9, &[(3, 3)]).unwrap();
    let mut g = Graph::new(&store);
    let z = g.input(random(&[9, d], 4));
    let o = conv_block(&mut g, &b[0], z, z, z, &plan, 0, CdsOptions::default(), &mut rng(0)).unwrap();
    // Reference: LayerNorm of GELU(b_G) in every row.
    let act: Vec<f64> = [0.3, -1.0, 2.0, 0.0, 0.7].iter().map(|&x| convrec::numerics::gelu_scalar(x)).collect();
    let mean = act.iter().sum::<f64>() / d as f64;
    let var = act.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
    let expected: Vec<f64> = act.iter().map(|x| (x - mean) / (var + LAYER_NORM_EPS).sqrt()).collect();
    let o = g.value(o);
    assert_eq!(o.rows(), 3);
    for i in 0..3 {
        for (a, e) in o.row(i).iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn block_gradient_matches_finite_differences() {
    let d = 3;
    let mut store = ParamStore::new();
    let layers = [(2, 2), (3, 3)];
    let b = blocks(&mut store, d, &layers, 5);
    let plan = plan_schedule(7, &layers).unwrap();
    let o_prev = store.add("o_prev", random(&[4, d], 6));
    let z = store.add("z", random(&[7, d], 7));
    let prog = store.add("prog", random(&[4, d], 8));
    randomize(&mut store, &[b[1].conv_bias, b[1].b_g, b[1].ln_gamma, b[1].ln_beta], 20);
    let w = random(&[2 * d], 9).into_data();
    let report = grad_check(&mut store, &[], 1e-6, |g| {
        let (o, zv, p) = (g.param(o_prev), g.param(z), g.param(prog));
        let out = conv_block(g, &b[1], o, zv, p, &plan, 1, CdsOptions::default(), &mut rng(0))?;
        g.weighted_sum(out, &w)
    })
    .unwrap();
    assert!(report.passes(1e-3), "{report:?}");
}

#[test]
fn full_pyramid_gradient_matches_finite_differences() {
    let d = 3;
    let mut store = ParamStore::new();
    let layers = [(2, 2), (5, 5)];
    let b = blocks(&mut store, d, &layers, 10);
    let plan = plan_schedule(10, &layers).unwrap();
    let z = store.add("z", random(&[10, d], 11));
    let w = random(&[d], 12).into_data();
    let report = grad_check(&mut store, &[], 1e-6, |g| {
        let zv = g.param(z);
        let x = cds_forward(g, &b, &plan, zv, CdsOptions::default(), &mut rng(0))?;
        g.weighted_sum(x, &w)
    })
    .unwrap();
    assert!(report.passes(1e-3), "{report:?}");
}

#[test]
fn beauty_pyramid_needs_no_collapse() {
    let d = 256;
    let layers = [(2, 2), (5, 5), (7, 7)];
    let mut store = ParamStore::new();
    let b = blocks(&mut store, d, &layers, 13);
    let plan = plan_schedule(70, &layers).unwrap();
    assert_eq!(plan.output_len(), 1);
    let mut g = Graph::new(&store);
    let z = g.input(random(&[70, d], 14));
    let x = cds_forward(&mut g, &b, &plan, z, CdsOptions::default(), &mut rng(0)).unwrap();
    assert_eq!(g.value(x).shape(), &[1, d]);
}

#[test]
fn single_full_width_conv_is_a_dense_layer() {
    let (len, d) = (6, 3);
    let mut store = ParamStore::new();
    let b = blocks(&mut store, d, &[(len, len)], 15);
    randomize(&mut store, &[b[0].conv_bias, b[0].b_g], 30);
    let plan = plan_schedule(len, &[(len, len)]).unwrap();
    let z = random(&[len, d], 16);
    // Dense weight over the flattened sequence: W[t·d + c][o] = kernel[o][c][t].
    let kernel = store.value(b[0].kernel).clone();
    let mut dense = vec![0.0; len * d * d];
    for o in 0..d {
        for c in 0..d {
            for t in 0..len {
                dense[(t * d + c) * d + o] = kernel.data()[(o * d + c) * len + t];
            }
        }
    }
    let opts = CdsOptions {
        no_residuals: true,
        ..CdsOptions::default()
    };
    let mut g = Graph::new(&store);
    let zv = g.input(z.clone());
    let block = cds_forward(&mut g, &b, &plan, zv, opts, &mut rng(0)).unwrap();
    let flat = g.input(z.reshape(vec![1, len * d]).unwrap());
    let w = g.input(Tensor::new(vec![len * d, d], dense).unwrap());
    let cb = g.param(b[0].conv_bias);
    let fc = g.linear(flat, w, Some(cb)).unwrap();
    let (wg, bg) = (g.param(b[0].w_g), g.param(b[0].b_g));
    let proj = g.linear(fc, wg, Some(bg)).unwrap();
    let act = g.gelu(proj);
    let (gamma, beta) = (g.param(b[0].ln_gamma), g.param(b[0].ln_beta));
    let reference = g.layer_norm(act, gamma, beta, LAYER_NORM_EPS).unwrap();
    for (a, r) in g.value(block).data().iter().zip(g.value(reference).data()) {
        assert!((a - r).abs() < 1e-10, "{a} vs {r}");
    }
}

#[test]
fn non_overlapping_windows_partition_the_input() {
    let d = 2;
    let mut store = ParamStore::new();
    let b = blocks(&mut store, d, &[(3, 3)], 17);
    let plan = plan_schedule(9, &[(3, 3)]).unwrap();
    let input = store.add("input", random(&[9, d], 18));
    let opts = CdsOptions {
        no_residuals: true,
        ..CdsOptions::default()
    };
    for out_row in 0..3 {
        let mut g = Graph::new(&store);
        let x = g.param(input);
        let o = conv_block(&mut g, &b[0], x, x, x, &plan, 0, opts, &mut rng(0)).unwrap();
        let mut w = vec![0.0; 3 * d];
        w[out_row * d] = 1.0;
        let loss = g.weighted_sum(o, &w).unwrap();
        let grads = g.backward(loss).unwrap().param_dense(input, &store);
        for row in 0..9 {
            let touched = grads[row * d..(row + 1) * d].iter().any(|&v| v != 0.0);
            assert_eq!(touched, row / 3 == out_row, "output {out_row}, input {row}");
        }
    }
}

#[test]
fn residual_removal_cuts_gradient_to_z() {
    let d = 3;
    let mut store = ParamStore::new();
    let b = blocks(&mut store, d, &[(2, 2)], 19);
    let zero = Tensor::zeros(store.value(b[0].kernel).shape());
    *store.value_mut(b[0].kernel) = zero;
    let plan = plan_schedule(8, &[(2, 2)]).unwrap();
    let z = store.add("z", random(&[8, d], 20));
    let w = random(&[4 * d], 21).into_data();
    let grad_norm = |store: &ParamStore, opts: CdsOptions| {
        let mut g = Graph::new(store);
        let zv = g.param(z);
        let o = conv_block(&mut g, &b[0], zv, zv, zv, &plan, 0, opts, &mut rng(0)).unwrap();
        let loss = g.weighted_sum(o, &w).unwrap();
        g.backward(loss).unwrap().param_dense(z, store).iter().map(|v| v.abs()).sum::<f64>()
    };
    assert!(grad_norm(&store, CdsOptions::default()) > 0.0);
    assert_eq!(grad_norm(&store, CdsOptions { no_residuals: true, ..CdsOptions::default() }), 0.0);
    *store.value_mut(b[0].alpha1) = Tensor::scalar(0.0);
    *store.value_mut(b[0].alpha2) = Tensor::scalar(0.0);
    assert_eq!(grad_norm(&store, CdsOptions::default()), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn output_is_always_one_row(
        len in 1usize..40,
        layers in prop::collection::vec((1usize..6, 1usize..6), 1..4),
        seed in 0u64..100,
    ) {
        let d = 2;
        let mut store = ParamStore::new();
        let b = blocks(&mut store, d, &layers, seed);
        let plan = plan_schedule(len, &layers).unwrap();
        let mut g = Graph::new(&store);
        let mut o = g.input(random(&[len, d], seed));
        let z = o;
        for j in 0..layers.len() {
            o = conv_block(&mut g, &b[j], o, z, o, &plan, j, CdsOptions::default(), &mut rng(0)).unwrap();
            prop_assert_eq!(g.value(o).rows(), plan.lengths[j]);
        }
        let x = cds_forward(&mut g, &b, &plan, z, CdsOptions::default(), &mut rng(0)).unwrap();
        prop_assert_eq!(g.value(x).shape(), &[1, d]);
    }
}

#[test]
fn flops_hand_count_and_doubling() {
    let s = plan_schedule(4, &[(2, 2)]).unwrap();
    assert_eq!(count_flops(&s, 1), 4 + 2);
    let d = 8u64;
    let macs = |len: usize| count_flops(&plan_schedule(len, &schedule_family(len)).unwrap(), d as usize);
    for len in [8usize, 16, 32, 64, 128, 256, 512, 1024] {
        // Doubling prepends one (2, 2) layer whose output has `len` rows.
        assert_eq!(schedule_family(2 * len)[1..], schedule_family(len)[..]);
        assert_eq!(macs(2 * len), macs(len) + 3 * len as u64 * d * d);
    }
    for len in [64usize, 128, 256, 512, 1024, 2048] {
        let per_position = macs(len) as f64 / (len as u64 * d * d) as f64;
        assert!((2.5..=3.1).contains(&per_position), "L={len}: {per_position}");
    }
}

#[test]
fn pyramid_memory_grows_linearly() {
    let d = 16;
    let mut per_position = Vec::new();
    for len in [64, 128, 256, 512] {
        let layers = schedule_family(len);
        let mut store = ParamStore::new();
        let b = blocks(&mut store, d, &layers, 1);
        let plan = plan_schedule(len, &layers).unwrap();
        let z = random(&[len, d], 2);
        let probe = PeakProbe::start();
        {
            let mut g = Graph::new(&store);
            let zv = g.leaf(z);
            let x = cds_forward(&mut g, &b, &plan, zv, CdsOptions::default(), &mut rng(0)).unwrap();
            let loss = g.mean(x);
            let _ = g.backward(loss).unwrap();
        }
        per_position.push(probe.peak_above_baseline() as f64 / (len * d) as f64);
    }
    let (lo, hi) = per_position.iter().fold((f64::MAX, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    assert!(hi / lo < 1.3, "{per_position:?}");
}
