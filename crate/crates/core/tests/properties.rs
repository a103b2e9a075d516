use std::sync::Arc;

use proptest::prelude::*;

use prac_core::estimator::{
    matrix_with_spectrum, minimax_lower_bound, spectral_profile, theoretical_variance,
    VarianceInput,
};
use prac_core::ledger::{block_ledger, ArchSpec, RowClass};
use prac_core::linalg::{complement_project, sample_gaussian, thin_qr, thin_svd};
use prac_core::projector::SharedSubspaceCache;
use prac_core::projector::{build_basis, compress, maybe_refresh, ProjectionMode, RefreshSchedule};
use prac_core::train::{
    ActivationStore, CompressionMode, CompressionPolicy, ForwardContext, Model, ModelConfig,
};

fn mode() -> impl Strategy<Value = ProjectionMode> {
    prop_oneof![
        Just(ProjectionMode::Pac),
        Just(ProjectionMode::Rac),
        Just(ProjectionMode::Prac)
    ]
}

/// `(r1, r2)` admissible for `mode` at width `n`.
fn ranks_for(mode: ProjectionMode, n: usize, a: usize, b: usize) -> (usize, usize) {
    match mode {
        ProjectionMode::Pac => (1 + a % n, 0),
        ProjectionMode::Rac => (0, 1 + b % n),
        ProjectionMode::Prac => {
            let r1 = 1 + a % (n - 1);
            (r1, 1 + b % (n - r1))
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_is_orthonormal_sorted_and_loses_only_the_tail(
        rows in 1usize..=64,
        cols in 1usize..=64,
        r_seed in any::<usize>(),
        seed in any::<u64>(),
    ) {
        let x = sample_gaussian(rows, cols, seed);
        let full = rows.min(cols);
        let r = 1 + r_seed % full;
        let all = thin_svd(&x, full).unwrap().sigma;
        let svd = thin_svd(&x, r).unwrap();
        prop_assert!(svd.u.orthonormality_defect() < 1e-10);
        prop_assert!(svd.v.orthonormality_defect() < 1e-10);
        prop_assert!(svd.sigma.windows(2).all(|w| w[0] >= w[1]));
        let err = x.sub(&svd.reconstruct()).frobenius_norm_sq();
        let discarded: f64 = all[r..].iter().map(|s| s * s).sum();
        prop_assert!((err - discarded).abs() <= 1e-9 * x.frobenius_norm_sq().max(1.0));
    }

    #[test]
    fn qr_is_idempotent_on_orthonormal_input(
        rows in 1usize..=32,
        cols_seed in any::<usize>(),
        seed in any::<u64>(),
    ) {
        let cols = 1 + cols_seed % rows;
        let q = thin_qr(&sample_gaussian(rows, cols, seed)).unwrap();
        prop_assert!(q.orthonormality_defect() < 1e-12);
        prop_assert!(thin_qr(&q).unwrap().max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn complement_projection_is_linear_and_idempotent(
        n in 2usize..=24,
        r1_seed in any::<usize>(),
        k in 1usize..=6,
        alpha in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let r1 = r1_seed % n;
        let q1 = if r1 == 0 {
            prac_core::Matrix::zeros(n, 0)
        } else {
            thin_qr(&sample_gaussian(n, r1, seed)).unwrap()
        };
        let a = sample_gaussian(n, k, seed ^ 1);
        let b = sample_gaussian(n, k, seed ^ 2);
        let pa = complement_project(&q1, &a).unwrap();
        let twice = complement_project(&q1, &pa).unwrap();
        prop_assert!(twice.max_abs_diff(&pa) < 1e-10);
        let mut combo = a.clone();
        combo.axpy(alpha, &b);
        let mut expected = pa.clone();
        expected.axpy(alpha, &complement_project(&q1, &b).unwrap());
        prop_assert!(complement_project(&q1, &combo).unwrap().max_abs_diff(&expected) < 1e-10);
        if r1 > 0 {
            prop_assert!(q1.t_matmul(&pa).max_abs() < 1e-10);
        }
    }

    #[test]
    fn bases_stay_orthogonal_across_refreshes(
        mode in mode(),
        n in 2usize..=16,
        a in any::<usize>(),
        b in any::<usize>(),
        principal in 1u64..=5,
        random in 1u64..=5,
        seed in any::<u64>(),
    ) {
        let (r1, r2) = ranks_for(mode, n, a, b);
        let schedule = RefreshSchedule::new(principal, random).unwrap();
        let mut basis = build_basis(&sample_gaussian(16, n, seed), mode, r1, r2, seed, 1.0).unwrap();
        for t in 1..12u64 {
            let x = sample_gaussian(16, n, seed.wrapping_add(t));
            basis = maybe_refresh(&basis, &x, t, schedule, seed.wrapping_mul(31).wrapping_add(t))
                .unwrap();
            prop_assert!(basis.validate().is_ok());
            prop_assert!(basis.orthogonality_defect() < 1e-8, "t = {}", t);
            if r1 > 0 && r2 > 0 {
                prop_assert!(basis.q1().t_matmul(basis.q2()).max_abs() < 1e-8);
            }
        }
    }

    #[test]
    fn compressed_storage_is_rows_times_rank(
        mode in mode(),
        rows in 1usize..=40,
        n in 2usize..=16,
        a in any::<usize>(),
        b in any::<usize>(),
        seed in any::<u64>(),
    ) {
        let (r1, r2) = ranks_for(mode, n, a, b);
        let x = sample_gaussian(rows, n, seed);
        let basis = Arc::new(build_basis(&sample_gaussian(16, n, seed ^ 9), mode, r1, r2, seed, 1.0).unwrap());
        let ca = compress(&x, &basis).unwrap();
        prop_assert_eq!(ca.stored_scalars(), rows * (r1 + r2));
        prop_assert_eq!(basis.storage_scalars(), n * (r1 + r2));
        let other = sample_gaussian(rows + 7, n, seed ^ 5);
        prop_assert_eq!(compress(&other, &basis).unwrap().stored_scalars(), (rows + 7) * (r1 + r2));
    }

    #[test]
    fn tail_energy_is_non_increasing_in_head_count(
        rows in 1usize..=20,
        cols in 1usize..=20,
        seed in any::<u64>(),
    ) {
        let x = sample_gaussian(rows, cols, seed);
        let qs: Vec<f64> = (0..=rows.min(cols))
            .map(|s| spectral_profile(&x, s).unwrap().tail)
            .collect();
        prop_assert!(qs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(*qs.last().unwrap(), 0.0);
    }

    /// The closed form meets the minimax floor when `q` is the input's own
    /// tail energy, and stays below it for any looser `q`.
    #[test]
    fn prac_attains_the_minimax_floor(
        n in 4usize..=24,
        s_seed in any::<usize>(),
        r_seed in any::<usize>(),
        slack in 1.0f64..4.0,
        head in prop::collection::vec(1.0f64..20.0, 1..4),
        tail in prop::collection::vec(0.01f64..1.0, 24),
        seed in any::<u64>(),
    ) {
        let s = 1 + s_seed % (n - 2).min(head.len());
        let r = s + 1 + r_seed % (n - s - 1);
        let mut sigma: Vec<f64> = head.iter().take(s).map(|h| h + 1.0).collect();
        sigma.extend(tail.iter().take(n - s));
        sigma.sort_by(|a, b| b.total_cmp(a));
        let x = matrix_with_spectrum(n, n, &sigma, seed);
        let profile = spectral_profile(&x, s).unwrap();
        let theory = theoretical_variance(
            ProjectionMode::Prac, n, s, r - s, VarianceInput::Profile(&profile),
        ).unwrap();
        let tight = minimax_lower_bound(n, s, r, profile.tail).unwrap();
        prop_assert!((theory - tight).abs() <= 1e-10 * tight.max(1.0));
        let loose = minimax_lower_bound(n, s, r, slack * profile.tail).unwrap();
        prop_assert!(theory <= loose * (1.0 + 1e-12));
    }

    /// With `sigma_1^2` above the tail energy and `r1 <= r2`, PRAC beats RAC
    /// at equal total rank.
    #[test]
    fn dominant_head_favours_prac(
        n in 4usize..=24,
        r1_seed in any::<usize>(),
        r2_seed in any::<usize>(),
        lead in 1.0f64..10.0,
        tail in prop::collection::vec(0.0f64..1.0, 24),
        seed in any::<u64>(),
    ) {
        let r1 = 1 + r1_seed % ((n - 1) / 2);
        let r2 = r1 + r2_seed % (n - 2 * r1);
        prop_assume!(r1 + r2 < n);
        let mut rest: Vec<f64> = tail[..n - 1].to_vec();
        rest.sort_by(|a, b| b.total_cmp(a));
        let tail_energy: f64 = rest.iter().map(|v| v * v).sum();
        let mut sigma = vec![(tail_energy + lead).sqrt()];
        sigma.extend(rest);
        let x = matrix_with_spectrum(n, n, &sigma, seed);
        let prac = theoretical_variance(ProjectionMode::Prac, n, r1, r2, VarianceInput::Matrix(&x))
            .unwrap();
        let rac = theoretical_variance(ProjectionMode::Rac, n, 0, r1 + r2, VarianceInput::Matrix(&x))
            .unwrap();
        prop_assert!(prac < rac, "PRAC {} vs RAC {}", prac, rac);
    }
}

fn arch() -> impl Strategy<Value = ArchSpec> {
    (1u64..=8, 1u64..=32, 1u64..=8, 1u64..=64, 1u64..=8, 1u64..=4).prop_map(
        |(batch, seq_len, per_head, hidden, heads, layers)| ArchSpec {
            batch,
            seq_len,
            width: per_head * heads * 4,
            hidden: hidden + 4,
            heads,
            layers,
        },
    )
}

fn policy() -> impl Strategy<Value = CompressionPolicy> {
    (
        prop_oneof![
            Just(CompressionMode::None),
            Just(CompressionMode::Pac),
            Just(CompressionMode::Rac),
            Just(CompressionMode::Prac)
        ],
        0.25f64..=0.3,
        0.25f64..=0.3,
    )
        .prop_map(|(mode, linear, nonlinear)| CompressionPolicy {
            mode,
            linear_rank_fraction: linear,
            nonlinear_rank_fraction: nonlinear,
            ..CompressionPolicy::default()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ledger_is_linear_in_batch_and_sequence(arch in arch(), policy in policy()) {
        let base = block_ledger(&arch, &policy).unwrap();
        for scaled in [
            ArchSpec { batch: 2 * arch.batch, ..arch },
            ArchSpec { seq_len: 2 * arch.seq_len, ..arch },
        ] {
            let doubled = block_ledger(&scaled, &policy).unwrap();
            for (a, d) in base.rows.iter().zip(&doubled.rows) {
                prop_assert_eq!(d.baseline_scalars, 2 * a.baseline_scalars);
                prop_assert_eq!(d.compressed_scalars, 2 * a.compressed_scalars);
            }
            prop_assert_eq!(doubled.baseline_total, 2 * base.baseline_total);
            prop_assert_eq!(doubled.compressed_total, 2 * base.compressed_total);
            prop_assert_eq!(doubled.basis_scalars, base.basis_scalars);
        }
    }

    #[test]
    fn compression_never_grows_the_ledger(arch in arch(), policy in policy()) {
        let ledger = block_ledger(&arch, &policy).unwrap();
        prop_assert!(ledger.compressed_total <= ledger.baseline_total);
        for r in &ledger.rows {
            prop_assert!(r.compressed_scalars <= r.baseline_scalars);
            if r.class != RowClass::Compressible || policy.mode == CompressionMode::None {
                prop_assert_eq!(r.compressed_scalars, r.baseline_scalars);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_output_is_policy_independent(
        policy in policy(),
        heads in 1usize..=3,
        layer_norm in any::<bool>(),
        rows in 12usize..=24,
        seed in any::<u64>(),
    ) {
        let config = ModelConfig {
            input_dim: 8,
            hidden_dim: 12,
            output_dim: 8,
            heads,
            layer_norm,
            residual: layer_norm,
            init_scale: 1.0,
        };
        prop_assume!(config.validate().is_ok());
        let model = Model::mlp_block(config, seed).unwrap();
        let x = sample_gaussian(rows, 8, seed ^ 9);
        let mut cache = SharedSubspaceCache::new();
        let mut store = ActivationStore::new();
        let mut ctx = ForwardContext {
            policy: &policy,
            cache: &mut cache,
            store: &mut store,
        };
        let stored = model.forward_store(&x, &mut ctx).unwrap();
        prop_assert_eq!(stored, model.forward(&x).unwrap());
    }
}
