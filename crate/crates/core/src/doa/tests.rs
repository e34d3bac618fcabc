use super::*;
use crate::fpc::Penalty;
use proptest::prelude::*;
use rand::Rng;

fn random_complex_matrix(r: usize, c: usize, seed: u64) -> DMatrix<Complex64> {
    let mut rng = RngSeed(seed).rng();
    DMatrix::from_fn(r, c, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

fn scenario(doas: &[f64], snapshots: usize, snr_db: Option<f64>, seed: u64) -> DoaScenario {
    DoaScenario {
        geometry: UlaGeometry::half_wavelength(8),
        grid: AngularGrid::uniform(60).unwrap(),
        true_doas: doas.to_vec(),
        snapshots,
        snr_db,
        seed: RngSeed(seed),
    }
}

#[test]
fn uniform_grid_is_half_open() {
    let g = AngularGrid::uniform(180).unwrap();
    assert_eq!(g.angles[0], -90.0);
    assert_eq!(g.angles[90], 0.0);
    assert_eq!(*g.angles.last().unwrap(), 89.0);
    assert_eq!(g.nearest(10.4), 100);
    assert!(AngularGrid::uniform(1).is_err());
}

#[test]
fn orthogonal_grid_angles() {
    let g = orthogonal_grid(4).unwrap();
    let expect = [-90.0, -30.0, 0.0, 30.0];
    for (a, e) in g.angles.iter().zip(expect) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn steering_entries_by_hand() {
    let geo = UlaGeometry::half_wavelength(3);
    let a = geo.response(30.0);
    // exp(−jπ·m/2) for m = 0, 1, 2
    let expect = [Complex64::new(1.0, 0.0), Complex64::new(0.0, -1.0), Complex64::new(-1.0, 0.0)];
    for (x, e) in a.iter().zip(expect) {
        assert!((x - e).norm() < 1e-15);
    }
}

#[test]
fn orthogonal_grid_columns_are_orthogonal() {
    for m in [2, 5, 8, 16, 32] {
        let st = steering_matrix(&UlaGeometry::half_wavelength(m), &orthogonal_grid(m).unwrap()).unwrap();
        let gram = st.complex.adjoint() * &st.complex;
        let diff = gram - DMatrix::<Complex64>::identity(m, m).scale(m as f64);
        assert!(diff.norm() <= 1e-9, "M={m}: {}", diff.norm());
    }
}

#[test]
fn lifting_layout() {
    let m = DMatrix::from_row_slice(1, 1, &[Complex64::new(2.0, 3.0)]);
    let l = lift_matrix(&m);
    assert_eq!(l, DMatrix::from_row_slice(2, 2, &[2.0, -3.0, 3.0, 2.0]));
    let v = DVector::from_vec(vec![Complex64::new(1.0, -1.0), Complex64::new(0.5, 2.0)]);
    assert_eq!(lift_vector(&v).as_slice(), &[1.0, 0.5, -1.0, 2.0]);
    assert_eq!(unlift_vector(&lift_vector(&v)).unwrap(), v);
    assert!(unlift_vector(&DVector::zeros(3)).is_err());
}

#[test]
fn complex_quantizer_maps_zero_to_minus_one() {
    assert_eq!(quantize_complex(Complex64::new(0.0, 0.0)), Complex64::new(-1.0, -1.0));
    assert_eq!(quantize_complex(Complex64::new(0.1, -2.0)), Complex64::new(1.0, -1.0));
}

#[test]
fn simulation_is_consistent_with_truth() {
    let sc = scenario(&[-30.0, 12.0], 20, None, 4);
    let sim = simulate_snapshots(&sc).unwrap();
    let st = steering_matrix(&sc.geometry, &sc.grid).unwrap();
    assert_eq!(sim.simulated_doas, vec![-30.0, 12.0]);
    assert!(sim.snapped.is_empty());
    assert_eq!(sim.noise.norm(), 0.0);
    // Noise-free snapshots are exactly the lifted quantization of Λ̃ S̃.
    let clean = st.lifted.as_matrix() * &sim.truth;
    let z = sim.snapshots.lifted_matrix();
    for (c, zi) in clean.iter().zip(z.iter()) {
        assert_eq!(sign(*c), *zi);
    }
    // Only the support rows of S̃ are populated.
    let power = angular_power(&sim.truth).unwrap();
    for (i, p) in power.iter().enumerate() {
        assert_eq!(*p > 0.0, sim.support.contains(&i));
    }
}

#[test]
fn off_grid_sources_are_snapped_and_reported() {
    let sc = scenario(&[-16.7, 15.7], 2, None, 1);
    let sim = simulate_snapshots(&sc).unwrap();
    assert_eq!(sim.snapped.len(), 2);
    assert_eq!(sim.simulated_doas, vec![-18.0, 15.0]);
    assert!(simulate_snapshots(&scenario(&[0.5, 1.0], 2, None, 1)).is_err());
}

#[test]
fn noise_power_matches_snr() {
    let sc = DoaScenario { geometry: UlaGeometry::half_wavelength(16), ..scenario(&[0.0], 4000, Some(5.0), 9) };
    let sim = simulate_snapshots(&sc).unwrap();
    let expected = 10f64.powf(-0.5);
    let measured = sim.noise.norm_squared() / sim.noise.len() as f64;
    assert!((measured / expected - 1.0).abs() < 0.05, "{measured} vs {expected}");
    let source = sim.amplitudes.norm_squared() / sim.amplitudes.len() as f64;
    assert!((source - 1.0).abs() < 0.05, "{source}");
}

#[test]
fn simulation_is_deterministic() {
    let sc = scenario(&[-10.0, 40.0], 5, Some(10.0), 3);
    let a = simulate_snapshots(&sc).unwrap();
    let b = simulate_snapshots(&sc).unwrap();
    assert_eq!(a.snapshots, b.snapshots);
    assert_eq!(a.truth, b.truth);
}

#[test]
fn objective_separates_over_snapshots() {
    let sc = scenario(&[-30.0, 0.0, 45.0], 7, Some(10.0), 11);
    let sim = simulate_snapshots(&sc).unwrap();
    let st = steering_matrix(&sc.geometry, &sc.grid).unwrap();
    let mut rng = RngSeed(5).rng();
    let s = DMatrix::from_fn(st.lifted.cols(), 7, |_, _| rng.random_range(-1.0..1.0));
    let z = sim.snapshots.lifted_matrix();
    for lambda in [0.1, 1.1, 40.0] {
        let joint = multi_snapshot_objective(&s, st.lifted.as_matrix(), &z, lambda).unwrap();
        let split: f64 = (0..7)
            .map(|t| {
                let col = s.column(t).into_owned();
                fpc::objective(&st.lifted, &col, &sim.snapshots.lifted_columns[t], lambda, Penalty::OneSidedL1).unwrap()
            })
            .sum();
        assert!((joint - split).abs() <= 1e-12 * split.abs(), "{joint} vs {split}");
    }
    assert!(multi_snapshot_objective(&s, st.lifted.as_matrix(), &z.columns(0, 3).into_owned(), 1.0).is_err());
}

#[test]
fn batch_recovery_matches_column_loop() {
    let sc = scenario(&[-20.0, 30.0], 6, Some(20.0), 2);
    let sim = simulate_snapshots(&sc).unwrap();
    let st = steering_matrix(&sc.geometry, &sc.grid).unwrap();
    let cfg = FpcConfig { inner_iters: 20, outer_iters: 3, ..FpcConfig::default() };
    let model = UnfoldedModel::init_from_fpc(&st.lifted, 0.01, 1.1, 5.0, 4).unwrap();
    for solver in [SpectrumSolver::Fpc(&cfg), SpectrumSolver::Unfolded(&model)] {
        let batch = recover_spectrum(&sim.snapshots, &st, solver).unwrap();
        assert!(batch.failed.is_empty());
        for t in 0..sim.snapshots.len() {
            let single = recover_column(&sim.snapshots.lifted_columns[t], &st, solver).unwrap();
            assert_eq!(batch.spectrum.column(t), single.column(0));
        }
    }
}

#[test]
fn mismatched_model_is_rejected() {
    let sc = scenario(&[0.0], 2, None, 2);
    let sim = simulate_snapshots(&sc).unwrap();
    let st = steering_matrix(&sc.geometry, &sc.grid).unwrap();
    let other = steering_matrix(&sc.geometry, &AngularGrid::uniform(30).unwrap()).unwrap();
    let model = UnfoldedModel::init_from_fpc(&other.lifted, 0.01, 1.1, 5.0, 2).unwrap();
    assert!(recover_spectrum(&sim.snapshots, &st, SpectrumSolver::Unfolded(&model)).is_err());
}

#[test]
fn peak_rule_examples() {
    assert_eq!(peak_indices(&[1.0, 3.0, 2.0, 5.0, 4.0], 2).unwrap(), vec![1, 3]);
    assert_eq!(peak_indices(&[1.0, 3.0, 2.0, 5.0, 4.0], 1).unwrap(), vec![3]);
    // Boundary entries only need to beat their single neighbour.
    assert_eq!(peak_indices(&[5.0, 1.0, 1.0, 1.0, 4.0], 2).unwrap(), vec![0, 4]);
    // A plateau has no strict maximum; fill from the largest values, lower index first.
    assert_eq!(peak_indices(&[2.0, 2.0, 2.0], 1).unwrap(), vec![0]);
    // One peak, two requested: the runner-up is its shoulder.
    assert_eq!(peak_indices(&[0.0, 1.0, 9.0, 3.0, 0.0], 2).unwrap(), vec![2, 3]);
    assert_eq!(peak_indices(&[7.0], 1).unwrap(), vec![0]);
    assert!(peak_indices(&[1.0, 2.0], 3).is_err());
    assert!(peak_indices(&[1.0, 2.0], 0).is_err());
}

#[test]
fn extract_from_exact_spectrum() {
    let sc = scenario(&[-42.0, 0.0, 51.0], 4, None, 8);
    let sim = simulate_snapshots(&sc).unwrap();
    assert_eq!(extract_doas(&sim.truth, &sc.grid, 3).unwrap(), vec![-42.0, 0.0, 51.0]);
}

#[test]
fn mae_pairs_sorted_estimates() {
    let truth = [10.0, -20.0];
    let est = vec![vec![-19.0, 12.0], vec![10.0, -20.0]];
    assert!((mae(&est, &truth).unwrap() - 0.75).abs() < 1e-15);
    assert!(mae(&[vec![1.0]], &truth).is_err());
    assert!(mae(&[], &truth).is_err());
}

#[test]
fn hermitian_eigen_residual() {
    let a = random_complex_matrix(9, 9, 3);
    let h = &a + a.adjoint();
    let eig = hermitian_eigen(&h).unwrap();
    assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
    for (i, &v) in eig.values.iter().enumerate() {
        let x = eig.vectors.column(i);
        assert!((&h * x - x.scale(v)).norm() <= 1e-10 * h.norm());
    }
    assert!(hermitian_eigen(&a).is_err());
}

#[test]
fn music_finds_separated_sources() {
    let sc = DoaScenario { geometry: UlaGeometry::half_wavelength(12), ..scenario(&[-33.0, 21.0], 400, Some(10.0), 6) };
    let sim = simulate_snapshots(&sc).unwrap();
    let est = music_1bit(&sim.snapshots, &sc.geometry, &sc.grid, 2).unwrap();
    assert_eq!(est.doas, vec![-33.0, 21.0]);
    assert_eq!(est.pseudospectrum.len(), sc.grid.len());
}

#[test]
fn music_preconditions() {
    let sc = scenario(&[-30.0, 30.0], 1, None, 1);
    let sim = simulate_snapshots(&sc).unwrap();
    assert!(matches!(
        music_1bit(&sim.snapshots, &sc.geometry, &sc.grid, 2),
        Err(Error::InsufficientSnapshots { needed: 2, got: 1 })
    ));
    assert!(music_1bit(&sim.snapshots, &sc.geometry, &sc.grid, 8).is_err());
    assert!(music_1bit(&sim.snapshots, &sc.geometry, &sc.grid, 0).is_err());
}

#[test]
fn snapshot_set_round_trips_through_lifting() {
    let sim = simulate_snapshots(&scenario(&[5.0], 3, Some(0.0), 2)).unwrap();
    let back = SnapshotSet::from_lifted(sim.snapshots.lifted_columns.clone()).unwrap();
    assert_eq!(back, sim.snapshots);
    assert!(SnapshotSet::from_quantized(DMatrix::from_element(2, 1, Complex64::new(1.0, 0.0))).is_err());
}

#[test]
fn scenario_file_parsing() {
    let sc = parse_scenario(
        "sensors = 16\ngrid = \"uniform\"\ngrid_size = 90\ndoas = [-16.7, 15.7]\nsnapshots = 10\nsnr_db = 20.0\nseed = 3\n",
    )
    .unwrap();
    assert_eq!(sc.geometry, UlaGeometry::half_wavelength(16));
    assert_eq!(sc.grid.len(), 90);
    assert_eq!(sc.snr_db, Some(20.0));

    let ortho = parse_scenario("sensors = 8\ngrid = \"orthogonal\"\ndoas = [0.0]\nsnapshots = 1\n").unwrap();
    assert_eq!(ortho.grid.kind, GridKind::Orthogonal);
    assert_eq!(ortho.snr_db, None);

    let err = parse_scenario("sensors = 8\ngrid = \"orthogonal\"\ndoas = [0.0]\nsnapshots = 1\nbogus = 2\n").unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("line 5"), "{err}");
    assert!(parse_scenario("sensors = 8\ngrid = \"uniform\"\ndoas = [0.0]\nsnapshots = 1\n").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lifting_commutes_with_products(seed in any::<u64>(), r in 1usize..6, c in 1usize..6) {
        let m = random_complex_matrix(r, c, seed);
        let v = random_complex_matrix(c, 1, seed ^ 1).column(0).into_owned();
        let lhs = lift_matrix(&m) * lift_vector(&v);
        let rhs = lift_vector(&(&m * &v));
        prop_assert!((lhs - rhs).norm() <= 1e-12);
    }

    #[test]
    fn peaks_are_sorted_distinct_and_sized(p in prop::collection::vec(0.0f64..10.0, 1..40), k in 1usize..6) {
        prop_assume!(k <= p.len());
        let idx = peak_indices(&p, k).unwrap();
        prop_assert_eq!(idx.len(), k);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn mae_is_order_invariant(est in prop::collection::vec(-90.0f64..90.0, 3), truth in prop::collection::vec(-90.0f64..90.0, 3)) {
        let mut rev = est.clone();
        rev.reverse();
        let a = mae(&[est], &truth).unwrap();
        let b = mae(&[rev], &truth).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a >= 0.0);
    }
}

#[test]
fn broadside_column_is_all_ones_and_entries_unit_modulus() {
    let geo = UlaGeometry::half_wavelength(7);
    assert!(geo.response(0.0).iter().all(|v| *v == Complex64::new(1.0, 0.0)));
    let st = steering_matrix(&geo, &AngularGrid::uniform(45).unwrap()).unwrap();
    assert!(st.complex.iter().all(|v| (v.norm() - 1.0).abs() < 1e-15));
}

#[test]
fn objective_base_cases() {
    let st = steering_matrix(&UlaGeometry::half_wavelength(5), &AngularGrid::uniform(20).unwrap()).unwrap();
    let sc = DoaScenario {
        geometry: UlaGeometry::half_wavelength(5),
        grid: AngularGrid::uniform(20).unwrap(),
        ..scenario(&[9.0], 1, Some(5.0), 4)
    };
    let sim = simulate_with_steering(&sc, &st).unwrap();
    let z = sim.snapshots.lifted_matrix();
    assert_eq!(multi_snapshot_objective(&DMatrix::zeros(40, 1), st.lifted.as_matrix(), &z, 3.0).unwrap(), 0.0);
    let s = DMatrix::from_fn(40, 1, |i, _| (i as f64 * 0.37).sin());
    let single = fpc::objective(&st.lifted, &s.column(0).into_owned(), &sim.snapshots.lifted_columns[0], 3.0, Penalty::OneSidedL1);
    assert_eq!(multi_snapshot_objective(&s, st.lifted.as_matrix(), &z, 3.0).unwrap(), single.unwrap());
}

#[test]
fn spectrum_recovery_is_column_wise() {
    let sc = scenario(&[-12.0, 27.0], 5, Some(15.0), 9);
    let sim = simulate_snapshots(&sc).unwrap();
    let st = steering_matrix(&sc.geometry, &sc.grid).unwrap();
    let cfg = FpcConfig { inner_iters: 15, outer_iters: 3, ..FpcConfig::default() };
    let solver = SpectrumSolver::Fpc(&cfg);

    let one = SnapshotSet::from_lifted(vec![sim.snapshots.lifted_columns[2].clone()]).unwrap();
    let direct = fpc::solve(&st.lifted, &sim.snapshots.lifted_columns[2], &cfg, None).unwrap().x;
    assert_eq!(recover_spectrum(&one, &st, solver).unwrap().spectrum.column(0), direct.column(0));

    let perm = [3, 0, 4, 2, 1];
    let base = recover_spectrum(&sim.snapshots, &st, solver).unwrap().spectrum;
    let shuffled = recover_spectrum(&sim.snapshots.permuted(&perm), &st, solver).unwrap().spectrum;
    for (i, &t) in perm.iter().enumerate() {
        assert_eq!(shuffled.column(i), base.column(t));
    }
}

#[test]
fn extraction_examples() {
    let grid = AngularGrid::uniform(60).unwrap();
    let mut s = DMatrix::zeros(120, 2);
    s[(70, 1)] = 0.4;
    assert_eq!(extract_doas(&s, &grid, 1).unwrap(), vec![grid.angles[10]]);
    let mut s = DMatrix::zeros(120, 1);
    s[(45, 0)] = 1.0;
    s[(5, 0)] = -1.0;
    assert_eq!(extract_doas(&s, &grid, 2).unwrap(), vec![grid.angles[5], grid.angles[45]]);
    assert!(extract_doas(&s, &grid, 61).is_err());
}

#[test]
fn fpc_locates_a_noise_free_source() {
    let sc = scenario(&[-27.0], 4, None, 13);
    let sim = simulate_snapshots(&sc).unwrap();
    let st = steering_matrix(&sc.geometry, &sc.grid).unwrap();
    let rec = recover_spectrum(&sim.snapshots, &st, SpectrumSolver::Fpc(&FpcConfig::default())).unwrap();
    let est = extract_doas(&rec.spectrum, &sc.grid, 1).unwrap();
    assert!((est[0] + 27.0).abs() <= 3.0, "{est:?}");
}

#[test]
fn mae_hand_examples() {
    assert_eq!(mae(&[vec![1.0, 9.0]], &[0.0, 10.0]).unwrap(), 1.0);
    assert_eq!(mae(&[vec![9.0, 1.0]], &[0.0, 10.0]).unwrap(), 1.0);
    assert_eq!(mae(&[vec![10.0, 0.0], vec![0.0, 10.0]], &[0.0, 10.0]).unwrap(), 0.0);
}

#[test]
fn music_locates_a_noise_free_source() {
    let sc = scenario(&[15.0], 8, None, 21);
    let sim = simulate_snapshots(&sc).unwrap();
    let est = music_1bit(&sim.snapshots, &sc.geometry, &sc.grid, 1).unwrap();
    assert!((est.doas[0] - 15.0).abs() <= 3.0, "{:?}", est.doas);
    assert!(est.pseudospectrum.iter().all(|p| p.is_finite() && *p >= 0.0));
    assert!(music_1bit(&sim.snapshots, &sc.geometry, &sc.grid, 7).is_ok());
}
