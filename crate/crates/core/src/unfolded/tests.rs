use super::*;
use crate::fpc::{default_initial, fpc_step, FpcState};
use crate::rng::RngSeed;
use crate::sensing::{generate_gaussian_matrix, quantize, SensingProblem};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn noisy(mat: &DMatrix<f64>, scale: f64, seed: RngSeed) -> DMatrix<f64> {
    let mut rng = seed.rng();
    mat.map(|x| x + scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
}

#[test]
fn init_from_fpc_matches_update_matrices() {
    let phi = generate_gaussian_matrix(6, 4, RngSeed(1)).unwrap();
    let model = UnfoldedModel::init_from_fpc(&phi, 0.01, 1.1, 10.0, 5).unwrap();
    let w = &model.weights[0];
    assert_eq!(w.a, phi.as_matrix().transpose() * 0.01);
    assert_eq!(w.c, -&w.a);
    assert_eq!(&w.b, phi.as_matrix());
    assert!(model.nu.iter().all(|&n| n == 0.01 / 1.1));
    assert_eq!(UnfoldedModel::init_from_fpc(&phi, 0.01, 1.1, 10.0, 1).unwrap().nu.len(), 1);
    assert!(UnfoldedModel::init_from_fpc(&phi, 0.0, 1.1, 10.0, 1).is_err());
    assert!(!model.normalize_per_layer);
}

#[test]
fn single_identity_layer_just_normalizes() {
    let phi = generate_gaussian_matrix(3, 2, RngSeed(2)).unwrap();
    let mut model = UnfoldedModel::init_from_fpc(&phi, 0.1, 1.0, 1.0, 1).unwrap();
    model.weights[0].a.fill(0.0);
    model.weights[0].c.fill(0.0);
    model.nu[0] = 0.0;
    let y = quantize(&v(&[1.0, -1.0, 1.0]));
    let x0 = v(&[3.0, -4.0]);
    let out = model.predict(&y, Some(&x0)).unwrap();
    assert!((out - v(&[0.6, -0.8])).amax() < 1e-15);
}

#[test]
fn zero_input_zero_weights_is_degenerate() {
    let phi = generate_gaussian_matrix(3, 2, RngSeed(2)).unwrap();
    let mut model = UnfoldedModel::init_from_fpc(&phi, 0.1, 1.0, 1.0, 2).unwrap();
    model.weights[0].a.fill(0.0);
    let y = quantize(&v(&[1.0, -1.0, 1.0]));
    assert!(matches!(model.predict(&y, None), Err(Error::Degenerate(_))));
}

#[test]
fn tape_replay_reproduces_every_layer() {
    let p = SensingProblem::generate(20, 10, 2, 0.0, RngSeed(8)).unwrap();
    let model = UnfoldedModel::init_from_fpc(&p.phi, 0.2, 2.0, 5.0, 4).unwrap();
    let (out, tape) = model.forward(&p.measurements, None).unwrap();
    assert_eq!(tape.layers(), 4);
    for r in 0..4 {
        let w = model.weights_for(r);
        let mut t = DVector::zeros(20);
        t.gemv(model.kappa, &w.b, &tape.inputs[r], 0.0);
        assert_eq!(t.map(f64::tanh), tape.activations[r]);
        let next = tape.pre[r].map(|x| shrink(x, model.nu[r]));
        let expected = if r + 1 < 4 { &tape.inputs[r + 1] } else { &tape.last };
        assert_eq!(&next, expected);
    }
    assert_eq!(out, tape.output);
    assert_eq!(model.forward(&p.measurements, None).unwrap().1, tape);
}

/// Runs the network and `fpc_step` side by side and returns the max-norm gap,
/// or `None` when some |Φx| entry falls within 1e-4 of zero.
pub(crate) fn fpc_equivalence_gap(p: &SensingProblem, layers: usize, tau: f64, lambda: f64) -> Option<f64> {
    let mut model = UnfoldedModel::init_from_fpc(&p.phi, tau, lambda, 1e6, layers).unwrap();
    model.normalize_per_layer = true;
    let x0 = default_initial(&p.phi, &p.measurements).unwrap();
    let mut state = FpcState { x: x0.clone(), iteration: 0, lambda };
    let mut x = x0.clone();
    for _ in 0..layers {
        if (p.phi.as_matrix() * &x).iter().any(|z| z.abs() < 1e-4) {
            return None;
        }
        state = fpc_step(&state, &p.phi, &p.measurements, tau, tau / lambda).ok()?;
        x = state.x.clone();
    }
    let out = model.predict(&p.measurements, Some(&x0)).ok()?;
    Some((out - state.x).amax())
}

#[test]
fn matches_fpc_steps_with_sharp_tanh() {
    let mut checked = 0;
    for seed in 0..40 {
        let p = SensingProblem::generate(24, 12, 3, 0.0, RngSeed(seed)).unwrap();
        if let Some(gap) = fpc_equivalence_gap(&p, 6, 0.1, 1.0) {
            assert!(gap <= 1e-6, "seed {seed}: gap {gap}");
            checked += 1;
        }
    }
    assert!(checked >= 20);
}

#[test]
fn loss_examples() {
    let a = v(&[1.0, 2.0]);
    assert_eq!(loss(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
    assert_eq!(loss(&[v(&[1.0, 0.0, 0.0])], &[v(&[0.0, 0.0, 0.0])]).unwrap(), 1.0);
    let outs = [v(&[1.0, 0.0]), v(&[3.0, 0.0])];
    let truths = [v(&[0.0, 0.0]), v(&[0.0, 0.0])];
    assert_eq!(loss(&outs, &truths).unwrap(), 5.0);
    assert!(loss(&[], &[]).is_err());
    assert!(loss(&outs, &truths[..1]).is_err());
}

/// A small model perturbed away from its FPC initialisation so every
/// gradient block is generically nonzero.
pub(crate) fn perturbed_model(m: usize, n: usize, layers: usize, seed: RngSeed) -> UnfoldedModel {
    let phi = generate_gaussian_matrix(m, n, seed.derive(1)).unwrap();
    let mut model = UnfoldedModel::init_from_fpc(&phi, 0.3, 3.0, 2.0, layers).unwrap();
    let w = &mut model.weights[0];
    w.a = noisy(&w.a, 0.05, seed.derive(2));
    w.b = noisy(&w.b, 0.05, seed.derive(3));
    w.c = noisy(&w.c, 0.05, seed.derive(4));
    for (r, nu) in model.nu.iter_mut().enumerate() {
        *nu *= 1.0 + 0.3 * r as f64;
    }
    model
}

fn min_kink_margin(model: &UnfoldedModel, tape: &ForwardTape) -> f64 {
    tape.pre
        .iter()
        .zip(&model.nu)
        .flat_map(|(p, nu)| p.iter().map(move |x| (x.abs() - nu).abs()))
        .fold(f64::INFINITY, f64::min)
}

fn param_mut(m: &mut UnfoldedModel, set: usize, block: usize, i: usize, j: usize) -> &mut f64 {
    let w = &mut m.weights[set];
    match block {
        0 => &mut w.a[(i, j)],
        1 => &mut w.b[(i, j)],
        _ => &mut w.c[(i, j)],
    }
}

/// Central differences of the single-sample loss for every parameter.
pub(crate) fn finite_difference_gradients(
    model: &UnfoldedModel,
    y: &BinaryMeasurements,
    x0: &DVector<f64>,
    truth: &DVector<f64>,
    h: f64,
) -> ParameterGradients {
    let eval = |m: &UnfoldedModel| (m.predict(y, Some(x0)).unwrap() - truth).norm_squared();
    let mut fd = ParameterGradients::zeros_like(model);
    for s in 0..model.weights.len() {
        for block in 0..3 {
            let shape = match block {
                0 => model.weights[s].a.shape(),
                1 => model.weights[s].b.shape(),
                _ => model.weights[s].c.shape(),
            };
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let mut plus = model.clone();
                    let mut minus = model.clone();
                    *param_mut(&mut plus, s, block, i, j) += h;
                    *param_mut(&mut minus, s, block, i, j) -= h;
                    let g = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let d = &mut fd.weights[s];
                    match block {
                        0 => d.a[(i, j)] = g,
                        1 => d.b[(i, j)] = g,
                        _ => d.c[(i, j)] = g,
                    }
                }
            }
        }
    }
    for r in 0..model.layers() {
        let mut plus = model.clone();
        let mut minus = model.clone();
        plus.nu[r] += h;
        minus.nu[r] -= h;
        fd.nu[r] = (eval(&plus) - eval(&minus)) / (2.0 * h);
    }
    fd
}

/// Largest relative deviation, with differences below `floor` in magnitude
/// treated as resolved.
pub(crate) fn max_relative_error(a: &ParameterGradients, b: &ParameterGradients, floor: f64) -> f64 {
    let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(floor);
    let mut worst = 0.0f64;
    for (wa, wb) in a.weights.iter().zip(&b.weights) {
        for (ma, mb) in [(&wa.a, &wb.a), (&wa.b, &wb.b), (&wa.c, &wb.c)] {
            for (x, y) in ma.iter().zip(mb.iter()) {
                worst = worst.max(rel(*x, *y));
            }
        }
    }
    for (x, y) in a.nu.iter().zip(&b.nu) {
        worst = worst.max(rel(*x, *y));
    }
    worst
}

fn gradient_check_case(per_layer_weights: bool, per_layer_norm: bool) {
    let mut checked = 0;
    for seed in 0..200u64 {
        let seed = RngSeed(seed);
        let mut model = perturbed_model(12, 6, 3, seed);
        model.normalize_per_layer = per_layer_norm;
        if per_layer_weights {
            model.untie_weights();
            for (r, w) in model.weights.iter_mut().enumerate() {
                w.c = noisy(&w.c, 0.02, seed.derive(10 + r as u64));
            }
        }
        let p = SensingProblem::generate(12, 6, 2, 0.0, seed.derive(5)).unwrap();
        let x0 = noisy(&DMatrix::zeros(6, 1), 0.3, seed.derive(6)).column(0).into_owned();
        let truth = crate::sensing::unit_normalize(p.signal.values()).unwrap();
        let Ok((_, tape)) = model.forward(&p.measurements, Some(&x0)) else { continue };
        if min_kink_margin(&model, &tape) < 1e-3 {
            continue;
        }
        let mut analytic = ParameterGradients::zeros_like(&model);
        backward_accumulate(&model, &tape, &p.measurements, &truth, GradientScope::ALL, 1.0, &mut analytic).unwrap();
        let fd = finite_difference_gradients(&model, &p.measurements, &x0, &truth, 1e-6);
        let err = max_relative_error(&analytic, &fd, 1e-4);
        assert!(err <= 1e-4, "seed {seed:?}: relative error {err}");
        assert!(analytic.max_abs() > 1e-3);
        checked += 1;
        if checked == 3 {
            return;
        }
    }
    panic!("found only {checked} kink-free instances");
}

#[test]
fn gradients_match_finite_differences_shared() {
    gradient_check_case(false, false);
}

#[test]
fn gradients_match_finite_differences_per_layer_weights() {
    gradient_check_case(true, false);
}

#[test]
fn gradients_match_finite_differences_per_layer_normalization() {
    gradient_check_case(false, true);
}

#[test]
fn dead_layer_passes_no_weight_gradient() {
    // Layer 1 kills everything; layer 2 rebuilds from the bias A·y alone, so
    // the B and C paths of layer 1 must carry no gradient.
    let mut model = perturbed_model(12, 6, 2, RngSeed(3));
    model.untie_weights();
    model.nu[0] = 1e6;
    let p = SensingProblem::generate(12, 6, 2, 0.0, RngSeed(4)).unwrap();
    let truth = crate::sensing::unit_normalize(p.signal.values()).unwrap();
    let (_, tape) = model.forward(&p.measurements, None).unwrap();
    let g = backward(&model, &tape, &p.measurements, &truth).unwrap();
    assert_eq!(g.weights[0].a.amax(), 0.0);
    assert_eq!(g.weights[0].c.amax(), 0.0);
    assert_eq!(g.nu[0], 0.0);
    assert!(g.weights[1].a.amax() > 0.0);
}

#[test]
fn single_layer_threshold_derivative_matches_hand_derivation() {
    // With A = B = C = 0 the output is S_ν(x0)/‖S_ν(x0)‖. On the surviving
    // coordinates s = x0 − ν·sign(x0), so ds/dν = −sign(x0) there and
    //   dL/dν = 2(out − t)ᵀ (I − out·outᵀ)/‖s‖ · ds/dν.
    let phi = generate_gaussian_matrix(4, 5, RngSeed(1)).unwrap();
    let mut model = UnfoldedModel::init_from_fpc(&phi, 0.1, 1.0, 1.0, 1).unwrap();
    model.weights[0] = LayerWeights::zeros(4, 5);
    model.nu[0] = 0.25;
    let x0 = v(&[0.9, -0.1, -0.7, 0.4, 0.05]);
    let truth = crate::sensing::unit_normalize(&v(&[1.0, 0.0, -0.5, 0.0, 0.0])).unwrap();
    let y = quantize(&v(&[1.0, 1.0, -1.0, 1.0]));

    let s = v(&[0.65, 0.0, -0.45, 0.15, 0.0]);
    let ds = v(&[-1.0, 0.0, 1.0, -1.0, 0.0]);
    let out = &s / s.norm();
    let g = (&out - &truth) * 2.0;
    let proj = &g - &out * out.dot(&g);
    let hand = proj.dot(&ds) / s.norm();

    let (_, tape) = model.forward(&y, Some(&x0)).unwrap();
    let grads = backward(&model, &tape, &y, &truth).unwrap();
    assert!((grads.nu[0] - hand).abs() < 1e-14, "{} vs {hand}", grads.nu[0]);
    let fd = finite_difference_gradients(&model, &y, &x0, &truth, 1e-6);
    assert!((fd.nu[0] - hand).abs() < 1e-8);
}

#[test]
fn backward_rejects_mismatched_tape() {
    let model = perturbed_model(12, 6, 3, RngSeed(1));
    let shorter = model.truncated(2).unwrap();
    let p = SensingProblem::generate(12, 6, 2, 0.0, RngSeed(2)).unwrap();
    let (_, tape) = shorter.forward(&p.measurements, None).unwrap();
    let truth = DVector::zeros(6);
    assert!(backward(&model, &tape, &p.measurements, &truth).is_err());
}

#[test]
fn accumulate_examples() {
    let model = perturbed_model(12, 6, 2, RngSeed(1));
    let p = SensingProblem::generate(12, 6, 2, 0.0, RngSeed(2)).unwrap();
    let truth = crate::sensing::unit_normalize(p.signal.values()).unwrap();
    let (_, tape) = model.forward(&p.measurements, None).unwrap();
    let g = backward(&model, &tape, &p.measurements, &truth).unwrap();
    assert_eq!(accumulate(std::slice::from_ref(&g)).unwrap(), g);
    assert_eq!(accumulate(&[g.clone(), g.clone()]).unwrap(), g);
    let mut neg = g.clone();
    neg.add_scaled(&g, -2.0);
    assert_eq!(accumulate(&[g.clone(), neg]).unwrap().max_abs(), 0.0);
    assert!(accumulate(&[]).is_err());
}

#[test]
fn batch_gradients_agree_with_per_sample_mean() {
    let model = perturbed_model(12, 6, 3, RngSeed(7));
    let phi = generate_gaussian_matrix(12, 6, RngSeed(7).derive(1)).unwrap();
    let samples = crate::sensing::generate_pairs(&phi, 19, 2, 0.0, RngSeed(8)).unwrap();
    let refs: Vec<&Sample> = samples.iter().collect();
    let BatchGradients { grads: batch, mean_loss: batch_loss, degenerate } = batch_gradients(&model, &refs, GradientScope::ALL).unwrap();
    assert_eq!(degenerate, 0);
    let mut per_sample = Vec::new();
    let mut outs = Vec::new();
    for (y, t) in &samples {
        let (out, tape) = model.forward(y, None).unwrap();
        per_sample.push(backward(&model, &tape, y, t).unwrap());
        outs.push(out);
    }
    let mean = accumulate(&per_sample).unwrap();
    let mut diff = batch.clone();
    diff.add_scaled(&mean, -1.0);
    assert!(diff.max_abs() < 1e-12 * mean.max_abs().max(1.0));
    let truths: Vec<_> = samples.iter().map(|s| s.1.clone()).collect();
    assert!((batch_loss - loss(&outs, &truths).unwrap()).abs() < 1e-12);
    assert!((dataset_loss(&model, &samples).unwrap() - batch_loss).abs() < 1e-12);

    let thr = batch_gradients(&model, &refs, GradientScope::thresholds_from(2)).unwrap().grads;
    assert_eq!(thr.weights[0].a.amax(), 0.0);
    assert_eq!(thr.nu[..2], [0.0, 0.0]);
    assert!((thr.nu[2] - batch.nu[2]).abs() < 1e-12);
}

#[test]
fn truncation_and_untying() {
    let mut model = perturbed_model(12, 6, 4, RngSeed(1));
    assert_eq!(model.truncated(2).unwrap().layers(), 2);
    assert!(model.truncated(5).is_err());
    model.untie_weights();
    assert_eq!(model.weights.len(), 4);
    assert_eq!(model.truncated(3).unwrap().weights.len(), 3);
    assert!(model.validate().is_ok());
}

#[test]
fn model_file_rejects_garbage() {
    assert!(matches!(read_model(&b"NOPE"[..]), Err(Error::Format(_))));
    let model = perturbed_model(4, 3, 2, RngSeed(1));
    let mut bytes = Vec::new();
    write_model(&model, &mut bytes).unwrap();
    assert!(matches!(read_model(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(read_model(&extra[..]).is_err());
    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    assert!(read_model(&bad_version[..]).is_err());
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION_SHARED);
    assert!(matches!(load_model(std::path::Path::new("/nonexistent/model.dfpc")), Err(Error::MissingModel(_))));
}

#[test]
fn header_layout_is_fixed() {
    let model = perturbed_model(4, 3, 2, RngSeed(1));
    let mut bytes = Vec::new();
    write_model(&model, &mut bytes).unwrap();
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    assert_eq!((u64_at(8), u64_at(16), u64_at(24)), (4, 3, 2));
    assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), model.kappa);
    assert_eq!(bytes[40], 0);
    // A[0,1] is the second float after the header.
    assert_eq!(f64::from_le_bytes(bytes[49..57].try_into().unwrap()), model.weights[0].a[(0, 1)]);
    assert_eq!(bytes.len(), 41 + 8 * (3 * 12 + 2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn model_round_trip_is_bit_exact(
        seed in any::<u64>(),
        m in 1usize..8,
        n in 1usize..8,
        layers in 1usize..5,
        untied in any::<bool>(),
        per_layer_norm in any::<bool>(),
    ) {
        let mut model = perturbed_model(m, n, layers, RngSeed(seed));
        model.normalize_per_layer = per_layer_norm;
        if untied {
            model.untie_weights();
        }
        let mut bytes = Vec::new();
        write_model(&model, &mut bytes).unwrap();
        let back = read_model(&bytes[..]).unwrap();
        let mut again = Vec::new();
        write_model(&back, &mut again).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(bytes, again);
    }

    #[test]
    fn forward_output_is_unit_norm_and_deterministic(seed in any::<u64>(), layers in 1usize..5, per_layer_norm in any::<bool>()) {
        let mut model = perturbed_model(10, 5, layers, RngSeed(seed));
        model.normalize_per_layer = per_layer_norm;
        let p = SensingProblem::generate(10, 5, 2, 0.0, RngSeed(seed).derive(9)).unwrap();
        match model.forward(&p.measurements, None) {
            Ok((out, tape)) => {
                prop_assert!((out.norm() - 1.0).abs() <= 1e-12);
                let (again, tape2) = model.forward(&p.measurements, None).unwrap();
                prop_assert_eq!(out, again);
                prop_assert_eq!(tape, tape2);
            }
            Err(e) => prop_assert!(matches!(e, Error::Degenerate(_))),
        }
    }

    #[test]
    fn tanh_approaches_sign_monotonically(seed in any::<u64>()) {
        let p = SensingProblem::generate(10, 5, 2, 0.0, RngSeed(seed)).unwrap();
        let x = crate::sensing::unit_normalize(p.signal.values()).unwrap();
        let bx = p.phi.as_matrix() * &x;
        prop_assume!(bx.iter().all(|z| *z != 0.0));
        let target = quantize(&bx).into_vector();
        let gaps: Vec<f64> = [1.0, 10.0, 100.0, 1e6]
            .iter()
            .map(|k| ((&bx * *k).map(f64::tanh) - &target).amax())
            .collect();
        prop_assert!(gaps.windows(2).all(|w| w[1] <= w[0]));
    }
}
